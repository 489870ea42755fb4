#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "derain/metrics.hpp"
#include "derain/rng.hpp"

using namespace derain;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* name) {
  const fs::path d = fs::temp_directory_path() / "derain_metrics_test" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Image const_image(int h, int w, float v) {
  Image im(h, w);
  for (float& x : im.data) x = v;
  return im;
}

Image random_image(int h, int w, uint64_t seed) {
  Rng rng(seed);
  Image im(h, w);
  for (float& v : im.data) v = float(rng.uniform01());
  return im;
}

// Random image holding only exactly PNG-representable values, so disk round
// trips in the directory tests are lossless.
Image quantized_random_image(int h, int w, uint64_t seed) {
  Rng rng(seed);
  Image im(h, w);
  for (float& v : im.data) v = float(rng.below(256)) / 255.0f;
  return im;
}

}  // namespace

TEST_CASE("psnr") {
  SECTION("constant offset has a closed form") {
    const Image a = const_image(16, 16, 0.5f);
    const Image b = const_image(16, 16, 0.4f);
    const double d = 0.5 - double(0.4f);
    REQUIRE(psnr(a, b) == Catch::Approx(-20.0 * std::log10(std::abs(d))).margin(1e-9));
    // Shifting both images together changes nothing.
    const Image a2 = const_image(16, 16, 0.8f);
    const Image b2 = const_image(16, 16, 0.7f);
    const double d2 = double(0.8f) - double(0.7f);
    REQUIRE(psnr(a2, b2) == Catch::Approx(-20.0 * std::log10(std::abs(d2))).margin(1e-6));
  }

  SECTION("identical images cap at exactly 100 dB") {
    const Image a = random_image(20, 24, 5);
    REQUIRE(psnr(a, a) == 100.0);
  }

  SECTION("cap engages exactly at the documented mse threshold") {
    // One differing sample among 16x16x3: mse = d^2 / 768.
    Image a = const_image(16, 16, 0.5f);
    Image below = a, above = a;
    below.data[0] = a.data[0] + 2.629e-4f;   // mse ~ 0.9e-10
    above.data[0] = a.data[0] + 2.9066e-4f;  // mse ~ 1.1e-10
    REQUIRE(psnr(a, below) == 100.0);
    REQUIRE(psnr(a, above) < 100.0);
    REQUIRE(psnr(a, above) > 99.0);
  }

  SECTION("symmetric to the bit") {
    const Image a = random_image(15, 17, 6);
    const Image b = random_image(15, 17, 7);
    REQUIRE(psnr(a, b) == psnr(b, a));
  }

  SECTION("rejects mismatched dimensions") {
    REQUIRE_THROWS_AS(psnr(const_image(8, 8, 0.0f), const_image(8, 9, 0.0f)),
                      DimensionMismatch);
  }
}

TEST_CASE("ssim") {
  SECTION("flat images have a closed form") {
    // Zero variance kills the structure term, leaving the luminance ratio
    // (2ab + C1) / (a^2 + b^2 + C1).
    const Image a = const_image(16, 16, 0.5f);
    const Image b = const_image(16, 16, 0.3f);
    const double av = 0.5, bv = double(0.3f);
    const double expect = (2.0 * av * bv + 1e-4) / (av * av + bv * bv + 1e-4);
    REQUIRE(ssim(a, b) == Catch::Approx(expect).margin(1e-12));
    REQUIRE(reference::ssim(a, b) == Catch::Approx(expect).margin(1e-12));
  }

  SECTION("identical images score exactly one") {
    const Image a = random_image(24, 18, 9);
    REQUIRE(ssim(a, a) == 1.0);
    REQUIRE(reference::ssim(a, a) == 1.0);
  }

  SECTION("symmetric to the bit") {
    const Image a = random_image(16, 16, 10);
    const Image b = random_image(16, 16, 11);
    REQUIRE(ssim(a, b) == ssim(b, a));
  }

  SECTION("degradations lower the score") {
    const Image a = random_image(32, 32, 12);
    Image shifted = a;
    for (float& v : shifted.data) v = v * 0.8f + 0.1f;
    REQUIRE(ssim(a, shifted) < 1.0);

    Image noisy = a;
    Rng rng(13);
    for (float& v : noisy.data)
      v = std::clamp(v + float(rng.uniform(-0.1, 0.1)), 0.0f, 1.0f);
    REQUIRE(ssim(a, noisy) < ssim(a, a));
  }

  SECTION("stays within the theoretical range") {
    for (uint64_t s = 0; s < 6; ++s) {
      const Image a = random_image(16, 16, 100 + s);
      const Image b = random_image(16, 16, 200 + s);
      const double v = ssim(a, b);
      REQUIRE(v <= 1.0 + 1e-9);
      REQUIRE(v >= -1.0 - 1e-9);
    }
  }

  SECTION("rejects undersized or mismatched input") {
    REQUIRE_THROWS_AS(ssim(const_image(10, 16, 0.5f), const_image(10, 16, 0.5f)), TooSmall);
    REQUIRE_THROWS_AS(reference::ssim(const_image(16, 10, 0.5f), const_image(16, 10, 0.5f)),
                      TooSmall);
    REQUIRE_THROWS_AS(ssim(const_image(16, 16, 0.5f), const_image(16, 17, 0.5f)),
                      DimensionMismatch);
  }
}

TEST_CASE("fast metrics match the plain-definition forms") {
  struct Size {
    int h, w;
  };
  const Size sizes[] = {{11, 11}, {16, 13}, {24, 48}, {32, 32}};
  uint64_t seed = 1000;
  for (const Size& s : sizes) {
    for (int pair = 0; pair < 3; ++pair) {
      const Image a = random_image(s.h, s.w, seed++);
      Image b;
      if (pair == 0) {
        b = random_image(s.h, s.w, seed++);  // unrelated
      } else if (pair == 1) {
        b = a;  // tiny perturbation: the cancellation-heavy regime
        Rng rng(seed++);
        for (float& v : b.data) v = std::clamp(v + float(rng.uniform(-1e-3, 1e-3)), 0.0f, 1.0f);
      } else {
        b = a;  // correlated, moderate distortion
        Rng rng(seed++);
        for (float& v : b.data) v = std::clamp(v * 0.9f + float(rng.uniform(0.0, 0.1)), 0.0f, 1.0f);
      }
      INFO("size " << s.h << "x" << s.w << " pair " << pair);
      REQUIRE(psnr(a, b) == Catch::Approx(reference::psnr(a, b)).margin(1e-9));
      REQUIRE(ssim(a, b) == Catch::Approx(reference::ssim(a, b)).margin(1e-9));
    }
  }
}

TEST_CASE("directory evaluation") {
  SECTION("scores the filename intersection in sorted order") {
    const fs::path rest = fresh_dir("rest");
    const fs::path ref = fresh_dir("ref");
    const char* names[] = {"img_c.png", "img_a.png", "img_b.png"};
    std::vector<Image> rimgs, fimgs;
    for (int i = 0; i < 3; ++i) {
      Image r = quantized_random_image(20, 20, 50 + uint64_t(i));
      Image f = quantized_random_image(20, 20, 60 + uint64_t(i));
      write_png_rgb8((rest / names[i]).string(), r);
      write_png_rgb8((ref / names[i]).string(), f);
      rimgs.push_back(std::move(r));
      fimgs.push_back(std::move(f));
    }
    // Unpaired and non-PNG files must be ignored.
    write_png_rgb8((rest / "only_restored.png").string(), rimgs[0]);
    write_png_rgb8((ref / "only_reference.png").string(), fimgs[0]);
    std::ofstream(rest / "notes.txt") << "not an image";

    const EvalResult res = evaluate_dirs(rest.string(), ref.string());
    REQUIRE(res.count == 3);
    REQUIRE(res.entries.size() == 3);
    REQUIRE(res.entries[0].name == "img_a.png");
    REQUIRE(res.entries[1].name == "img_b.png");
    REQUIRE(res.entries[2].name == "img_c.png");

    // names[] was written shuffled: entry k scored images 50+perm(k).
    const int perm[] = {1, 2, 0};
    double psum = 0.0, ssum = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double ep = psnr(rimgs[perm[k]], fimgs[perm[k]]);
      const double es = ssim(rimgs[perm[k]], fimgs[perm[k]]);
      REQUIRE(res.entries[k].psnr_db == Catch::Approx(ep).margin(1e-12));
      REQUIRE(res.entries[k].ssim_val == Catch::Approx(es).margin(1e-12));
      psum += ep;
      ssum += es;
    }
    REQUIRE(res.mean_psnr == Catch::Approx(psum / 3.0).margin(1e-12));
    REQUIRE(res.mean_ssim == Catch::Approx(ssum / 3.0).margin(1e-12));
  }

  SECTION("identical directories score the caps exactly") {
    const fs::path d = fresh_dir("self");
    write_png_rgb8((d / "one.png").string(), quantized_random_image(16, 16, 77));
    write_png_rgb8((d / "two.png").string(), quantized_random_image(16, 16, 78));
    const EvalResult res = evaluate_dirs(d.string(), d.string());
    REQUIRE(res.count == 2);
    for (const EvalEntry& e : res.entries) {
      REQUIRE(e.psnr_db == 100.0);
      REQUIRE(e.ssim_val == 1.0);
    }
    REQUIRE(res.mean_psnr == 100.0);
    REQUIRE(res.mean_ssim == 1.0);
  }

  SECTION("disjoint or unreadable directories fail loudly") {
    const fs::path a = fresh_dir("disjoint_a");
    const fs::path b = fresh_dir("disjoint_b");
    write_png_rgb8((a / "x.png").string(), const_image(16, 16, 0.5f));
    write_png_rgb8((b / "y.png").string(), const_image(16, 16, 0.5f));
    REQUIRE_THROWS_AS(evaluate_dirs(a.string(), b.string()), NameMismatch);
    REQUIRE_THROWS_AS(evaluate_dirs((a / "missing_subdir").string(), b.string()), IoError);
  }

  SECTION("size disagreements are reported") {
    const fs::path a = fresh_dir("sized_a");
    const fs::path b = fresh_dir("sized_b");
    write_png_rgb8((a / "x.png").string(), const_image(16, 16, 0.5f));
    write_png_rgb8((b / "x.png").string(), const_image(16, 20, 0.5f));
    REQUIRE_THROWS_AS(evaluate_dirs(a.string(), b.string()), DimensionMismatch);
  }
}

TEST_CASE("evaluation rendering") {
  EvalResult r;
  r.entries = {{"a.png", 31.25, 0.91}, {"b.png", 28.5, 0.87}};
  r.count = 2;
  r.mean_psnr = (31.25 + 28.5) / 2.0;
  r.mean_ssim = (0.91 + 0.87) / 2.0;

  SECTION("csv has one row per image plus the mean, no header") {
    const std::string csv = eval_csv(r);
    std::istringstream in(csv);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    REQUIRE(lines.size() == 3);  // count + 1
    REQUIRE(lines[0].rfind("a.png,", 0) == 0);
    REQUIRE(lines[1].rfind("b.png,", 0) == 0);
    REQUIRE(lines[2].rfind("mean,", 0) == 0);

    auto fields = [](const std::string& line) {
      std::vector<std::string> out;
      std::istringstream ls(line);
      for (std::string f; std::getline(ls, f, ',');) out.push_back(f);
      return out;
    };
    const auto f0 = fields(lines[0]);
    REQUIRE(f0.size() == 3);
    REQUIRE(std::stod(f0[1]) == Catch::Approx(31.25).margin(1e-6));
    REQUIRE(std::stod(f0[2]) == Catch::Approx(0.91).margin(1e-6));
    const auto fm = fields(lines[2]);
    REQUIRE(std::stod(fm[1]) == Catch::Approx(r.mean_psnr).margin(1e-6));
    REQUIRE(std::stod(fm[2]) == Catch::Approx(r.mean_ssim).margin(1e-6));
  }

  SECTION("table lists every image and the mean") {
    const std::string t = eval_table(r);
    REQUIRE(t.find("a.png") != std::string::npos);
    REQUIRE(t.find("b.png") != std::string::npos);
    REQUIRE(t.find("mean") != std::string::npos);
    REQUIRE(t.find("psnr") != std::string::npos);
  }
}
