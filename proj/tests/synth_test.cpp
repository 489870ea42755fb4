#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "derain/synth.hpp"

using namespace derain;
namespace fs = std::filesystem;

namespace {

fs::path test_root() {
  const fs::path d = fs::temp_directory_path() / "derain_synth_test";
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Image random_image(int h, int w, uint64_t seed) {
  Rng rng(seed);
  Image im(h, w);
  for (float& v : im.data) v = float(rng.uniform01());
  return im;
}

TransmissionMap random_map(int h, int w, uint64_t seed) {
  Rng rng(seed);
  TransmissionMap t(h, w);
  for (float& v : t.data) v = float(rng.uniform01());
  return t;
}

// Mean absolute difference between 4-adjacent pixels; the local homogeneity
// statistic the vapor field must keep small.
double adjacency_stat(const TransmissionMap& v) {
  double sum = 0.0;
  long n = 0;
  for (int y = 0; y < v.height; ++y)
    for (int x = 0; x < v.width; ++x) {
      if (x + 1 < v.width) {
        sum += std::abs(double(v.at(y, x)) - double(v.at(y, x + 1)));
        ++n;
      }
      if (y + 1 < v.height) {
        sum += std::abs(double(v.at(y, x)) - double(v.at(y + 1, x)));
        ++n;
      }
    }
  return sum / double(n);
}

struct Bbox {
  int y0 = 1 << 30, y1 = -1, x0 = 1 << 30, x1 = -1;
  bool empty() const { return y1 < 0; }
  int height() const { return y1 - y0 + 1; }
  int width() const { return x1 - x0 + 1; }
};

Bbox mask_bbox(const Mask& m) {
  Bbox b;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) {
        b.y0 = std::min(b.y0, y);
        b.y1 = std::max(b.y1, y);
        b.x0 = std::min(b.x0, x);
        b.x1 = std::max(b.x1, x);
      }
  return b;
}

}  // namespace

TEST_CASE("streak layer basics") {
  StreakParams p;
  p.seed = 7;

  SECTION("deterministic and in range") {
    const StreakLayer a = render_streak_layer(64, 80, p);
    const StreakLayer b = render_streak_layer(64, 80, p);
    REQUIRE(a.layer.data == b.layer.data);
    REQUIRE(a.mask.data == b.mask.data);
    for (float v : a.layer.data) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 80; ++x)
        REQUIRE(a.mask.at(y, x) == (a.layer.at(y, x) > 0.1f));
    // Default density must actually put rain on a 64x80 field.
    REQUIRE(mask_bbox(a.mask).empty() == false);

    StreakParams q = p;
    q.seed = 8;
    const StreakLayer c = render_streak_layer(64, 80, q);
    REQUIRE(a.layer.data != c.layer.data);
  }

  SECTION("expected count zero leaves the field empty") {
    StreakParams q = p;
    q.density = 1e-9;
    const StreakLayer sl = render_streak_layer(32, 32, q);
    for (float v : sl.layer.data) REQUIRE(v == 0.0f);
    REQUIRE(mask_bbox(sl.mask).empty());
  }

  SECTION("parameter validation") {
    StreakParams q = p;
    q.density = 0.0;
    REQUIRE_THROWS_AS(render_streak_layer(32, 32, q), InvalidParams);
    q = p;
    q.length_range = {9.0f, 5.0f};
    REQUIRE_THROWS_AS(render_streak_layer(32, 32, q), InvalidParams);
    q = p;
    q.intensity_range = {0.2f, 1.5f};
    REQUIRE_THROWS_AS(render_streak_layer(32, 32, q), InvalidParams);
    q = p;
    q.width_range = {0.0f, 1.0f};
    REQUIRE_THROWS_AS(render_streak_layer(32, 32, q), InvalidParams);
    REQUIRE_THROWS_AS(render_streak_layer(8, 32, p), InvalidParams);
    REQUIRE_THROWS_AS(render_streak_layer(32, 15, p), InvalidParams);
  }
}

TEST_CASE("vertical streak geometry") {
  // One streak per field: expected count = density * 64*64/1000 = 1.
  StreakParams p;
  p.density = 1000.0 / (64.0 * 64.0);
  p.angle_range = {0.0f, 0.0f};
  p.length_range = {9.0f, 9.0f};
  p.width_range = {1.0f, 1.0f};
  p.intensity_range = {0.8f, 0.8f};

  for (uint64_t seed = 1; seed <= 12; ++seed) {
    p.seed = seed;
    const StreakLayer sl = render_streak_layer(64, 64, p);
    const Bbox b = mask_bbox(sl.mask);
    INFO("seed " << seed);
    REQUIRE(!b.empty());
    REQUIRE(b.height() >= 9);  // at least the projected length
    REQUIRE(b.width() <= 3);   // a 1px-wide vertical streak stays narrow
  }
}

TEST_CASE("screen blend") {
  const Image j = random_image(24, 33, 11);

  SECTION("layer zero is the identity") {
    const TransmissionMap zero(24, 33);
    const Image out = screen_blend(j, zero);
    REQUIRE(out.data == j.data);
  }

  SECTION("layer one saturates") {
    TransmissionMap one(24, 33);
    for (float& v : one.data) v = 1.0f;
    const Image out = screen_blend(j, one);
    for (float v : out.data) REQUIRE(v == 1.0f);
  }

  SECTION("midpoint value") {
    Image half(16, 16);
    for (float& v : half.data) v = 0.5f;
    TransmissionMap l(16, 16);
    for (float& v : l.data) v = 0.5f;
    const Image out = screen_blend(half, l);
    for (float v : out.data) REQUIRE(v == 0.75f);
  }

  SECTION("commutative on single-channel fields") {
    const TransmissionMap a = random_map(21, 19, 12);
    const TransmissionMap b = random_map(21, 19, 13);
    const TransmissionMap ab = screen_blend(a, b);
    const TransmissionMap ba = screen_blend(b, a);
    REQUIRE(ab.data == ba.data);
  }

  SECTION("monotone and bounded") {
    const TransmissionMap l = random_map(24, 33, 14);
    const Image out = screen_blend(j, l);
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 33; ++x)
        for (int c = 0; c < 3; ++c) {
          REQUIRE(out.at(y, x, c) >= j.at(y, x, c));
          REQUIRE(out.at(y, x, c) >= l.at(y, x));
          REQUIRE(out.at(y, x, c) <= 1.0f);
        }
  }

  SECTION("dimension mismatch") {
    const TransmissionMap l(24, 32);
    REQUIRE_THROWS_AS(screen_blend(j, l), DimensionMismatch);
  }
}

TEST_CASE("vapor field") {
  VaporParams p;
  p.seed = 21;

  SECTION("deterministic, bounded, locally homogeneous") {
    const TransmissionMap a = render_vapor_map(96, 64, p);
    const TransmissionMap b = render_vapor_map(96, 64, p);
    REQUIRE(a.data == b.data);
    for (float v : a.data) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= p.strength_range[1]);
    }
    REQUIRE(adjacency_stat(a) < 0.05);

    VaporParams q = p;
    q.seed = 22;
    REQUIRE(render_vapor_map(96, 64, q).data != a.data);
  }

  SECTION("worst-case parameters still satisfy the smoothness bound") {
    VaporParams q;
    q.octaves = 3;
    q.base_scale = 8.0f;
    q.strength_range = {1.0f, 1.0f};
    for (uint64_t seed = 1; seed <= 5; ++seed) {
      q.seed = seed;
      const TransmissionMap v = render_vapor_map(64, 64, q);
      INFO("seed " << seed);
      REQUIRE(adjacency_stat(v) < 0.05);
    }
  }

  SECTION("single octave at field scale") {
    VaporParams q;
    q.octaves = 1;
    q.base_scale = 64.0f;
    q.strength_range = {0.3f, 0.7f};
    q.seed = 5;
    const TransmissionMap v = render_vapor_map(64, 64, q);
    for (float x : v.data) REQUIRE(x <= q.strength_range[1]);
    REQUIRE(adjacency_stat(v) < 0.05);
  }

  SECTION("zero strength gives a zero field") {
    VaporParams q = p;
    q.strength_range = {0.0f, 0.0f};
    const TransmissionMap v = render_vapor_map(32, 32, q);
    for (float x : v.data) REQUIRE(x == 0.0f);
  }

  SECTION("parameter validation") {
    VaporParams q = p;
    q.octaves = 0;
    REQUIRE_THROWS_AS(render_vapor_map(32, 32, q), InvalidParams);
    q = p;
    q.octaves = 4;
    REQUIRE_THROWS_AS(render_vapor_map(32, 32, q), InvalidParams);
    q = p;
    q.base_scale = 4.0f;
    REQUIRE_THROWS_AS(render_vapor_map(32, 32, q), InvalidParams);
    q = p;
    q.strength_range = {0.6f, 0.2f};
    REQUIRE_THROWS_AS(render_vapor_map(32, 32, q), InvalidParams);
    q = p;
    q.strength_range = {0.0f, 1.5f};
    REQUIRE_THROWS_AS(render_vapor_map(32, 32, q), InvalidParams);
    REQUIRE_THROWS_AS(render_vapor_map(8, 32, p), InvalidParams);
  }
}

TEST_CASE("model scene construction") {
  const Image j = random_image(32, 32, 31);
  const AtmosphereLight a(0.9f, 0.85f, 0.8f);

  SECTION("clear scene transmits fully") {
    StreakParams sp;
    sp.density = 1e-9;  // expected count 0
    VaporParams vp;
    vp.strength_range = {0.0f, 0.0f};
    const RainScene sc = make_model_scene(j, sp, vp, a, 0.4f);
    for (float v : sc.t_streak.data) REQUIRE(v == 0.6f);
    for (float v : sc.t_vapor.data) REQUIRE(v == 0.4f);
    REQUIRE(sc.rainy.data == j.data);
    REQUIRE(mask_bbox(sc.streak_mask).empty());
  }

  SECTION("saturated streak layer") {
    // A single huge full-opacity capsule covers the whole 32x32 field.
    StreakParams sp;
    sp.density = 1000.0 / (32.0 * 32.0);
    sp.length_range = {40.0f, 40.0f};
    sp.width_range = {200.0f, 200.0f};
    sp.angle_range = {0.0f, 0.0f};
    sp.intensity_range = {1.0f, 1.0f};
    VaporParams vp;
    vp.strength_range = {0.0f, 0.0f};
    const RainScene sc = make_model_scene(j, sp, vp, a, 0.4f);
    for (float v : sc.t_streak.data) REQUIRE(v == 0.0f);
    for (float v : sc.t_vapor.data) REQUIRE(v == 0.4f);
    for (size_t i = 0; i < j.pixel_count(); ++i)
      for (int c = 0; c < 3; ++c) {
        const float expect = 0.4f * j.data[i * 3 + c] + 0.6f * a[c];
        REQUIRE_THAT(sc.rainy.data[i * 3 + c],
                     Catch::Matchers::WithinAbs(expect, 1e-6));
      }
  }

  SECTION("generated scenes satisfy the model and invert") {
    StreakParams sp;
    sp.seed = 41;
    VaporParams vp;
    vp.seed = 42;
    vp.strength_range = {0.2f, 0.5f};
    for (uint64_t trial = 0; trial < 3; ++trial) {
      sp.seed = 41 + trial;
      vp.seed = 142 + trial;
      const Image bg = random_image(48, 40, 200 + trial);
      const RainScene sc = make_model_scene(bg, sp, vp, a, 0.4f);
      float worst = 0.0f;
      for (size_t i = 0; i < sc.t_streak.data.size(); ++i) {
        const float total = sc.t_streak.data[i] + sc.t_vapor.data[i];
        REQUIRE(total <= 1.0f + 1e-6f);
        REQUIRE(sc.t_streak.data[i] >= 0.0f);
        REQUIRE(sc.t_vapor.data[i] >= 0.0f);
      }
      const Image rec =
          recover_background(sc.rainy, sc.t_streak, sc.t_vapor, sc.atmosphere);
      for (size_t i = 0; i < rec.data.size(); ++i)
        worst = std::max(worst, std::abs(rec.data[i] - bg.data[i]));
      INFO("trial " << trial);
      REQUIRE(worst <= 1e-5f);
    }
  }

  SECTION("mixing coefficient validation") {
    StreakParams sp;
    VaporParams vp;
    REQUIRE_THROWS_AS(make_model_scene(j, sp, vp, a, 0.0f), InvalidParams);
    REQUIRE_THROWS_AS(make_model_scene(j, sp, vp, a, 1.0f), InvalidParams);
  }
}

TEST_CASE("blend dataset generation") {
  const fs::path root = test_root();
  const fs::path corpus = root / "corpus";
  fs::remove_all(corpus);
  fs::create_directories(corpus);
  write_png_rgb8((corpus / "a.png").string(), random_image(80, 70, 51));
  write_png_rgb8((corpus / "b.png").string(), random_image(64, 64, 52));

  StreakParams sp;
  VaporParams vp;

  SECTION("produces a valid, self-describing dataset") {
    const fs::path out = root / "set1";
    fs::remove_all(out);
    const DatasetManifest m =
        make_blend_dataset(corpus.string(), 3, 48, sp, vp, out.string(), 99);
    REQUIRE(m.entries.size() == 3);
    REQUIRE(m.global_seed == 99);
    for (const ManifestEntry& e : m.entries) {
      const Image rainy = read_png_rgb8((out / e.rainy_path).string());
      const Image clean = read_png_rgb8((out / e.clean_path).string());
      REQUIRE(rainy.height == 48);
      REQUIRE(rainy.width == 48);
      REQUIRE(same_dims(rainy, clean));
      REQUIRE(e.atmosphere.has_value());
      for (int c = 0; c < 3; ++c) {
        REQUIRE((*e.atmosphere)[c] >= 0.7f);
        REQUIRE((*e.atmosphere)[c] <= 1.0f);
      }
      // Rain only brightens under a screen blend of a veiled background.
      double brighter = 0.0;
      for (size_t i = 0; i < rainy.data.size(); ++i)
        brighter += double(rainy.data[i]) - double(clean.data[i]);
      REQUIRE(brighter > 0.0);
    }
    REQUIRE_NOTHROW(validate_manifest(m, out.string()));

    const DatasetManifest loaded = load_manifest((out / "manifest.json").string());
    REQUIRE(loaded.entries.size() == 3);
    REQUIRE(loaded.global_seed == 99);
    const StreakParams sp_back = loaded.generator_params.at("streaks").get<StreakParams>();
    REQUIRE(sp_back.density == sp.density);
    REQUIRE(sp_back.length_range == sp.length_range);
    for (size_t i = 0; i < loaded.entries.size(); ++i) {
      REQUIRE(loaded.entries[i].rainy_path == m.entries[i].rainy_path);
      REQUIRE(loaded.entries[i].seed == m.entries[i].seed);
      REQUIRE(loaded.entries[i].atmosphere == m.entries[i].atmosphere);
    }
  }

  SECTION("generation is reproducible file for file") {
    const fs::path out_a = root / "rep_a";
    const fs::path out_b = root / "rep_b";
    fs::remove_all(out_a);
    fs::remove_all(out_b);
    const DatasetManifest ma =
        make_blend_dataset(corpus.string(), 4, 32, sp, vp, out_a.string(), 7);
    const DatasetManifest mb =
        make_blend_dataset(corpus.string(), 4, 32, sp, vp, out_b.string(), 7);
    REQUIRE(slurp(out_a / "manifest.json") == slurp(out_b / "manifest.json"));
    for (size_t i = 0; i < ma.entries.size(); ++i) {
      REQUIRE(slurp(out_a / ma.entries[i].rainy_path) ==
              slurp(out_b / mb.entries[i].rainy_path));
      REQUIRE(slurp(out_a / ma.entries[i].clean_path) ==
              slurp(out_b / mb.entries[i].clean_path));
    }

    const fs::path out_c = root / "rep_c";
    fs::remove_all(out_c);
    make_blend_dataset(corpus.string(), 4, 32, sp, vp, out_c.string(), 8);
    REQUIRE(slurp(out_a / "rainy_0000.png") != slurp(out_c / "rainy_0000.png"));
  }

  SECTION("zero count is a valid empty dataset") {
    const fs::path out = root / "empty_set";
    fs::remove_all(out);
    const DatasetManifest m =
        make_blend_dataset(corpus.string(), 0, 48, sp, vp, out.string(), 5);
    REQUIRE(m.entries.empty());
    REQUIRE(fs::exists(out / "manifest.json"));
    const DatasetManifest loaded = load_manifest((out / "manifest.json").string());
    REQUIRE(loaded.entries.empty());
    REQUIRE_NOTHROW(validate_manifest(loaded, out.string()));
  }

  SECTION("degenerate rain parameters reproduce the clean image") {
    StreakParams sp0 = sp;
    sp0.density = 1e-9;
    VaporParams vp0 = vp;
    vp0.strength_range = {0.0f, 0.0f};
    const fs::path out = root / "identity_set";
    fs::remove_all(out);
    const DatasetManifest m =
        make_blend_dataset(corpus.string(), 2, 32, sp0, vp0, out.string(), 3);
    for (const ManifestEntry& e : m.entries)
      REQUIRE(slurp(out / e.rainy_path) == slurp(out / e.clean_path));
  }

  SECTION("corpus failures") {
    const fs::path none = root / "no_corpus";
    fs::remove_all(none);
    REQUIRE_THROWS_AS(
        make_blend_dataset(none.string(), 1, 32, sp, vp, (root / "x").string(), 1),
        IoError);
    fs::create_directories(none);
    REQUIRE_THROWS_AS(
        make_blend_dataset(none.string(), 1, 32, sp, vp, (root / "x").string(), 1),
        EmptyCorpus);
  }
}

TEST_CASE("manifest io and validation") {
  const fs::path root = test_root();
  const fs::path dir = root / "manifest_io";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const Image rainy = random_image(20, 22, 61);
  const Image clean = random_image(20, 22, 62);
  const TransmissionMap ts = random_map(20, 22, 63);
  write_png_rgb8((dir / "r.png").string(), rainy);
  write_png_rgb8((dir / "c.png").string(), clean);
  write_png_gray16((dir / "ts.png").string(), ts);

  ManifestEntry e;
  e.rainy_path = "r.png";
  e.clean_path = "c.png";
  e.ts_path = "ts.png";
  e.atmosphere = std::array<float, 3>{0.9f, 0.8f, 0.7f};
  e.seed = 1234;
  DatasetManifest m;
  m.entries.push_back(e);
  m.global_seed = 77;
  m.generator_params = nlohmann::json{{"note", "hand built"}};

  SECTION("round trip preserves all fields") {
    save_manifest((dir / "manifest.json").string(), m);
    REQUIRE(!fs::exists(dir / "manifest.json.partial"));
    const DatasetManifest back = load_manifest((dir / "manifest.json").string());
    REQUIRE(back.global_seed == 77);
    REQUIRE(back.entries.size() == 1);
    REQUIRE(back.entries[0].rainy_path == "r.png");
    REQUIRE(back.entries[0].ts_path == "ts.png");
    REQUIRE(back.entries[0].tv_path.empty());
    REQUIRE(back.entries[0].mask_path.empty());
    REQUIRE(back.entries[0].atmosphere == e.atmosphere);
    REQUIRE(back.entries[0].seed == 1234);
    REQUIRE(back.generator_params.at("note") == "hand built");
    REQUIRE_NOTHROW(validate_manifest(back, dir.string()));
  }

  SECTION("validation spots missing and mismatched files") {
    DatasetManifest bad = m;
    bad.entries[0].clean_path = "missing.png";
    REQUIRE_THROWS_AS(validate_manifest(bad, dir.string()), IoError);

    write_png_rgb8((dir / "small.png").string(), random_image(16, 16, 64));
    bad = m;
    bad.entries[0].clean_path = "small.png";
    REQUIRE_THROWS_AS(validate_manifest(bad, dir.string()), IoError);

    bad = m;
    bad.entries[0].ts_path = "c.png";  // rgb where 16-bit gray is required
    REQUIRE_THROWS_AS(validate_manifest(bad, dir.string()), IoError);
  }

  SECTION("malformed json is rejected") {
    std::ofstream out(dir / "broken.json", std::ios::binary);
    out << "{ not json";
    out.close();
    REQUIRE_THROWS_AS(load_manifest((dir / "broken.json").string()), IoError);
    REQUIRE_THROWS_AS(load_manifest((dir / "nonexistent.json").string()), IoError);
  }
}
