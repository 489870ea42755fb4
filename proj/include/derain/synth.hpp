#pragma once
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "derain/manifest.hpp"
#include "derain/rain_model.hpp"
#include "derain/rng.hpp"

// Synthetic data generation. Two families:
//  - screen-blend rainy/clean pairs (streak layer blended over a veiled
//    background), used for training;
//  - fully specified scenes that satisfy the transmission model exactly,
//    used as in-memory testing oracles.

namespace derain {

// ---------------------------------------------------------------------------
// Parameters

struct StreakParams {
  double density = 2.0;  // expected streak count per kilopixel
  std::array<float, 2> length_range{12.0f, 28.0f};    // pixels
  std::array<float, 2> width_range{1.0f, 2.0f};       // pixels
  std::array<float, 2> angle_range{-12.0f, 12.0f};    // degrees from vertical
  std::array<float, 2> intensity_range{0.3f, 0.9f};   // opacity in [0,1]
  uint64_t seed = 0;
};

struct VaporParams {
  int octaves = 2;           // noise octaves, 1..3
  float base_scale = 48.0f;  // coarsest noise cell size in pixels
  std::array<float, 2> strength_range{0.1f, 0.5f};  // subset of [0,1]
  uint64_t seed = 0;
};

namespace detail {
inline void require_ordered(const std::array<float, 2>& r, const char* what) {
  if (!(r[0] <= r[1])) throw InvalidParams(std::string(what) + " range must be ordered");
}
}  // namespace detail

inline void validate(const StreakParams& p) {
  if (!(p.density > 0.0)) throw InvalidParams("streak density must be positive");
  detail::require_ordered(p.length_range, "length");
  detail::require_ordered(p.width_range, "width");
  detail::require_ordered(p.angle_range, "angle");
  detail::require_ordered(p.intensity_range, "intensity");
  if (p.length_range[0] < 1.0f) throw InvalidParams("streak length must be at least 1 pixel");
  if (p.width_range[0] <= 0.0f) throw InvalidParams("streak width must be positive");
  if (p.intensity_range[0] < 0.0f || p.intensity_range[1] > 1.0f)
    throw InvalidParams("streak intensity range must lie in [0,1]");
}

inline void validate(const VaporParams& p) {
  if (p.octaves < 1 || p.octaves > 3)
    throw InvalidParams("vapor octaves must be between 1 and 3");
  if (!(p.base_scale >= 8.0f))
    throw InvalidParams("vapor base_scale must be at least 8 pixels");
  detail::require_ordered(p.strength_range, "strength");
  if (p.strength_range[0] < 0.0f || p.strength_range[1] > 1.0f)
    throw InvalidParams("vapor strength range must lie in [0,1]");
}

inline void to_json(nlohmann::json& j, const StreakParams& p) {
  j = nlohmann::json{{"density", p.density},
                     {"length_range", p.length_range},
                     {"width_range", p.width_range},
                     {"angle_range", p.angle_range},
                     {"intensity_range", p.intensity_range},
                     {"seed", p.seed}};
}
inline void from_json(const nlohmann::json& j, StreakParams& p) {
  p.density = j.at("density").get<double>();
  p.length_range = j.at("length_range").get<std::array<float, 2>>();
  p.width_range = j.at("width_range").get<std::array<float, 2>>();
  p.angle_range = j.at("angle_range").get<std::array<float, 2>>();
  p.intensity_range = j.at("intensity_range").get<std::array<float, 2>>();
  p.seed = j.at("seed").get<uint64_t>();
}
inline void to_json(nlohmann::json& j, const VaporParams& p) {
  j = nlohmann::json{{"octaves", p.octaves},
                     {"base_scale", p.base_scale},
                     {"strength_range", p.strength_range},
                     {"seed", p.seed}};
}
inline void from_json(const nlohmann::json& j, VaporParams& p) {
  p.octaves = j.at("octaves").get<int>();
  p.base_scale = j.at("base_scale").get<float>();
  p.strength_range = j.at("strength_range").get<std::array<float, 2>>();
  p.seed = j.at("seed").get<uint64_t>();
}

// ---------------------------------------------------------------------------
// Streak layer

struct StreakLayer {
  TransmissionMap layer;  // opacity field in [0,1]
  Mask mask;              // layer > 0.1
};

// Draws round(density * h*w/1000) anti-aliased capsules (line segments with
// thickness) at sampled angles/lengths, combined by per-pixel max. Each streak
// is placed so its full extent fits inside the field; this keeps the
// per-streak geometry (bounding boxes of mask pixels) independent of position.
inline StreakLayer render_streak_layer(int h, int w, const StreakParams& p) {
  validate(p);
  if (h < 16 || w < 16) throw InvalidParams("streak field must be at least 16x16");
  StreakLayer out{TransmissionMap(h, w), Mask(h, w)};

  const long long count = std::llround(p.density * double(h) * double(w) / 1000.0);
  Rng rng(p.seed);
  for (long long i = 0; i < count; ++i) {
    const double ang =
        rng.uniform(p.angle_range[0], p.angle_range[1]) * std::numbers::pi / 180.0;
    const double len = rng.uniform(p.length_range[0], p.length_range[1]);
    const double wid = rng.uniform(p.width_range[0], p.width_range[1]);
    const double inten = rng.uniform(p.intensity_range[0], p.intensity_range[1]);
    const double ux = rng.uniform01();
    const double uy = rng.uniform01();

    const double r = wid / 2.0;
    const double dx = std::sin(ang);
    const double dy = std::cos(ang);
    // Half extents of the capsule plus the 1px anti-aliasing feather.
    const double hx = std::abs(dx) * len / 2.0 + r + 1.0;
    const double hy = std::abs(dy) * len / 2.0 + r + 1.0;
    const double cx = (w > 2.0 * hx) ? hx + ux * (w - 2.0 * hx) : w / 2.0;
    const double cy = (h > 2.0 * hy) ? hy + uy * (h - 2.0 * hy) : h / 2.0;
    const double ax = cx - dx * len / 2.0, ay = cy - dy * len / 2.0;
    const double bx = cx + dx * len / 2.0, by = cy + dy * len / 2.0;

    const int x0 = std::max(0, int(std::floor(std::min(ax, bx) - r - 1.0)));
    const int x1 = std::min(w - 1, int(std::ceil(std::max(ax, bx) + r + 1.0)));
    const int y0 = std::max(0, int(std::floor(std::min(ay, by) - r - 1.0)));
    const int y1 = std::min(h - 1, int(std::ceil(std::max(ay, by) + r + 1.0)));
    const double vx = bx - ax, vy = by - ay;
    const double vlen2 = vx * vx + vy * vy;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        double t = 0.0;
        if (vlen2 > 0.0)
          t = std::clamp(((px - ax) * vx + (py - ay) * vy) / vlen2, 0.0, 1.0);
        const double qx = ax + t * vx, qy = ay + t * vy;
        const double d = std::hypot(px - qx, py - qy);
        const double cov = std::clamp(0.5 + (r - d), 0.0, 1.0);
        const float v = float(inten * cov);
        float& cell = out.layer.at(y, x);
        cell = std::max(cell, v);
      }
    }
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.mask.set(y, x, out.layer.at(y, x) > 0.1f);
  return out;
}

// ---------------------------------------------------------------------------
// Blending

// out = 1 - (1-J)(1-L), evaluated in double as (J + L) - J*L. Both the sum and
// the product of two floats are exact in double, so the result is symmetric in
// its arguments and exact at L=0 (identity) and L=1 (saturation).
inline float screen_blend_value(float j, float l) {
  const double out = (double(j) + double(l)) - double(j) * double(l);
  return float(std::clamp(out, 0.0, 1.0));
}

inline Image screen_blend(const Image& j, const TransmissionMap& layer) {
  if (!same_dims(j, layer)) throw DimensionMismatch("screen_blend: dimensions differ");
  Image out(j.height, j.width);
  for (size_t i = 0; i < out.pixel_count(); ++i)
    for (int c = 0; c < 3; ++c)
      out.data[i * 3 + c] = screen_blend_value(j.data[i * 3 + c], layer.data[i]);
  return out;
}

inline TransmissionMap screen_blend(const TransmissionMap& a, const TransmissionMap& b) {
  if (!same_dims(a, b)) throw DimensionMismatch("screen_blend: dimensions differ");
  TransmissionMap out(a.height, a.width);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = screen_blend_value(a.data[i], b.data[i]);
  return out;
}

// Vapor veil: per pixel, (1-v)*J + v*A.
inline Image veil(const Image& j, const TransmissionMap& v, const AtmosphereLight& a) {
  if (!same_dims(j, v)) throw DimensionMismatch("veil: dimensions differ");
  Image out(j.height, j.width);
  for (size_t i = 0; i < out.pixel_count(); ++i) {
    const double vv = v.data[i];
    for (int c = 0; c < 3; ++c) {
      const double mixed = (1.0 - vv) * double(j.data[i * 3 + c]) + vv * double(a[c]);
      out.data[i * 3 + c] = float(std::clamp(mixed, 0.0, 1.0));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vapor field

// Multi-octave bilinear value noise, Gaussian smoothed, scaled by a strength
// drawn once per field. Octave cell sizes are floored at 8px and the result is
// smoothed with sigma=2, which keeps the mean absolute difference between
// 4-adjacent pixels well below 0.05 for any valid parameters.
inline TransmissionMap render_vapor_map(int h, int w, const VaporParams& p) {
  validate(p);
  if (h < 16 || w < 16) throw InvalidParams("vapor field must be at least 16x16");

  Rng head(split_seed(p.seed, 0));
  const double strength = head.uniform(p.strength_range[0], p.strength_range[1]);

  std::vector<double> acc(size_t(h) * w, 0.0);
  double wsum = 0.0;
  for (int o = 0; o < p.octaves; ++o) {
    const double scale = std::max(double(p.base_scale) / double(1 << o), 8.0);
    const int gw = int(std::floor(w / scale)) + 2;
    const int gh = int(std::floor(h / scale)) + 2;
    Rng ro(split_seed(p.seed, uint64_t(o) + 1));
    std::vector<double> grid(size_t(gh) * gw);
    for (double& g : grid) g = ro.uniform01();
    const double amp = std::pow(0.5, o);
    wsum += amp;
    for (int y = 0; y < h; ++y) {
      const double gy = y / scale;
      const int iy = int(gy);
      const double fy = gy - iy;
      for (int x = 0; x < w; ++x) {
        const double gx = x / scale;
        const int ix = int(gx);
        const double fx = gx - ix;
        const double g00 = grid[size_t(iy) * gw + ix];
        const double g01 = grid[size_t(iy) * gw + ix + 1];
        const double g10 = grid[size_t(iy + 1) * gw + ix];
        const double g11 = grid[size_t(iy + 1) * gw + ix + 1];
        const double top = g00 + (g01 - g00) * fx;
        const double bot = g10 + (g11 - g10) * fx;
        acc[size_t(y) * w + x] += amp * (top + (bot - top) * fy);
      }
    }
  }

  // Separable Gaussian, sigma=2, radius 5, replicated edges.
  constexpr int kRadius = 5;
  std::array<double, 2 * kRadius + 1> kern{};
  double ksum = 0.0;
  for (int k = -kRadius; k <= kRadius; ++k) {
    kern[size_t(k + kRadius)] = std::exp(-double(k * k) / 8.0);
    ksum += kern[size_t(k + kRadius)];
  }
  for (double& k : kern) k /= ksum;

  std::vector<double> tmp(acc.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -kRadius; k <= kRadius; ++k)
        s += kern[size_t(k + kRadius)] * acc[size_t(y) * w + std::clamp(x + k, 0, w - 1)];
      tmp[size_t(y) * w + x] = s;
    }
  for (int x = 0; x < w; ++x)
    for (int y = 0; y < h; ++y) {
      double s = 0.0;
      for (int k = -kRadius; k <= kRadius; ++k)
        s += kern[size_t(k + kRadius)] * tmp[size_t(std::clamp(y + k, 0, h - 1)) * w + x];
      acc[size_t(y) * w + x] = s;
    }

  TransmissionMap out(h, w);
  for (size_t i = 0; i < acc.size(); ++i)
    out.data[i] = float(std::clamp(strength * (acc[i] / wsum), 0.0, 1.0));
  return out;
}

// ---------------------------------------------------------------------------
// Model-consistent scenes

// Builds a scene that satisfies the transmission model exactly: with streak
// opacity s and vapor density v, Ts = (1-alpha)(1-s) and Tv = alpha(1-v), so
// Ts + Tv <= 1 holds everywhere and a clear scene (s=0, v=0) transmits fully.
inline RainScene make_model_scene(const Image& background, const StreakParams& sp,
                                  const VaporParams& vp, const AtmosphereLight& a,
                                  float alpha = 0.4f) {
  if (!(alpha > 0.0f && alpha < 1.0f))
    throw InvalidParams("mixing coefficient must lie in (0,1)");
  StreakLayer sl = render_streak_layer(background.height, background.width, sp);
  const TransmissionMap v = render_vapor_map(background.height, background.width, vp);

  RainScene scene;
  scene.background = background;
  scene.atmosphere = a;
  scene.t_streak = TransmissionMap(background.height, background.width);
  scene.t_vapor = TransmissionMap(background.height, background.width);
  for (size_t i = 0; i < v.data.size(); ++i) {
    scene.t_streak.data[i] = (1.0f - alpha) * (1.0f - sl.layer.data[i]);
    scene.t_vapor.data[i] = alpha * (1.0f - v.data[i]);
  }
  scene.rainy = compose(background, scene.t_streak, scene.t_vapor, a);
  scene.streak_mask = std::move(sl.mask);
  return scene;
}

// ---------------------------------------------------------------------------
// Screen-blend dataset

namespace detail {

inline Image resize_bilinear(const Image& src, int oh, int ow) {
  if (oh < 1 || ow < 1) throw InvalidParams("resize target must be positive");
  Image out(oh, ow);
  const double sy = double(src.height) / oh;
  const double sx = double(src.width) / ow;
  for (int y = 0; y < oh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(src.height - 1));
    const int iy = int(fy);
    const int iy1 = std::min(iy + 1, src.height - 1);
    const double wy = fy - iy;
    for (int x = 0; x < ow; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(src.width - 1));
      const int ix = int(fx);
      const int ix1 = std::min(ix + 1, src.width - 1);
      const double wx = fx - ix;
      for (int c = 0; c < 3; ++c) {
        const double top = src.at(iy, ix, c) + (src.at(iy, ix1, c) - src.at(iy, ix, c)) * wx;
        const double bot =
            src.at(iy1, ix, c) + (src.at(iy1, ix1, c) - src.at(iy1, ix, c)) * wx;
        out.at(y, x, c) = float(top + (bot - top) * wy);
      }
    }
  }
  return out;
}

// Scales the shorter side to the target, then takes a random square crop.
inline Image random_tile(const Image& src, int size, Rng& rng) {
  if (src.height == size && src.width == size) return src;
  const double s = double(size) / std::min(src.height, src.width);
  const int nh = std::max(size, int(std::lround(src.height * s)));
  const int nw = std::max(size, int(std::lround(src.width * s)));
  const Image scaled =
      (nh == src.height && nw == src.width) ? src : resize_bilinear(src, nh, nw);
  const int oy = int(rng.below(uint64_t(nh - size + 1)));
  const int ox = int(rng.below(uint64_t(nw - size + 1)));
  Image out(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = scaled.at(oy + y, ox + x, c);
  return out;
}

inline std::string entry_name(const char* stem, int i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04d.png", stem, i);
  return buf;
}

}  // namespace detail

// Generates `count` rainy/clean pairs into out_dir and writes manifest.json.
// Each entry derives its own RNG stream from (seed, entry index), so the
// output is a pure function of (corpus contents, params, seed) and entries
// could be produced in any order.
inline DatasetManifest make_blend_dataset(const std::string& clean_dir, int count, int size,
                                          const StreakParams& sp, const VaporParams& vp,
                                          const std::string& out_dir, uint64_t seed) {
  namespace fs = std::filesystem;
  if (count < 0) throw InvalidParams("dataset count must be non-negative");
  if (size < 16) throw InvalidParams("dataset image size must be at least 16");
  validate(sp);
  validate(vp);

  std::vector<fs::path> corpus;
  {
    std::error_code ec;
    fs::directory_iterator it(clean_dir, ec), end;
    if (ec) throw IoError("cannot read corpus directory '" + clean_dir + "'");
    for (; it != end; ++it)
      if (it->is_regular_file() && it->path().extension() == ".png")
        corpus.push_back(it->path());
  }
  std::sort(corpus.begin(), corpus.end());
  if (corpus.empty()) throw EmptyCorpus("no PNG images in '" + clean_dir + "'");

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir + "'");

  DatasetManifest m;
  m.global_seed = seed;
  m.generator_params = nlohmann::json{
      {"size", size}, {"count", count}, {"streaks", sp}, {"vapor", vp}};

  for (int i = 0; i < count; ++i) {
    const uint64_t entry_seed = split_seed(seed, uint64_t(i));
    Rng er(entry_seed);
    const Image src = read_png_rgb8(corpus[er.below(corpus.size())].string());
    const Image clean = detail::random_tile(src, size, er);

    StreakParams spi = sp;
    spi.seed = er.next_u64();
    VaporParams vpi = vp;
    vpi.seed = er.next_u64();
    const float aval = float(er.uniform(0.7, 1.0));
    const AtmosphereLight atm(aval, aval, aval);

    const StreakLayer sl = render_streak_layer(size, size, spi);
    const TransmissionMap v = render_vapor_map(size, size, vpi);
    const Image rainy = screen_blend(veil(clean, v, atm), sl.layer);

    ManifestEntry e;
    e.rainy_path = detail::entry_name("rainy", i);
    e.clean_path = detail::entry_name("clean", i);
    e.atmosphere = atm.rgb;
    e.seed = entry_seed;
    write_png_rgb8((fs::path(out_dir) / e.rainy_path).string(), rainy);
    write_png_rgb8((fs::path(out_dir) / e.clean_path).string(), clean);
    m.entries.push_back(std::move(e));
  }

  save_manifest((fs::path(out_dir) / "manifest.json").string(), m);
  return m;
}

// Generates `count` fully specified scenes (rainy, clean, both transmission
// maps, streak mask, atmosphere) so downstream stages can be validated against
// exact ground truth. Transmission maps and masks are stored as 16-bit
// grayscale; atmosphere is kept at full precision in the manifest.
inline DatasetManifest make_scene_dataset(const std::string& clean_dir, int count, int size,
                                          const StreakParams& sp, const VaporParams& vp,
                                          const std::string& out_dir, uint64_t seed,
                                          float alpha = 0.4f) {
  namespace fs = std::filesystem;
  if (count < 0) throw InvalidParams("dataset count must be non-negative");
  if (size < 16) throw InvalidParams("dataset image size must be at least 16");
  if (!(alpha > 0.0f && alpha < 1.0f))
    throw InvalidParams("mixing coefficient must lie in (0,1)");
  validate(sp);
  validate(vp);

  std::vector<fs::path> corpus;
  {
    std::error_code ec;
    fs::directory_iterator it(clean_dir, ec), end;
    if (ec) throw IoError("cannot read corpus directory '" + clean_dir + "'");
    for (; it != end; ++it)
      if (it->is_regular_file() && it->path().extension() == ".png")
        corpus.push_back(it->path());
  }
  std::sort(corpus.begin(), corpus.end());
  if (corpus.empty()) throw EmptyCorpus("no PNG images in '" + clean_dir + "'");

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir + "'");

  DatasetManifest m;
  m.global_seed = seed;
  m.generator_params = nlohmann::json{{"size", size},
                                      {"count", count},
                                      {"alpha", alpha},
                                      {"streaks", sp},
                                      {"vapor", vp}};

  for (int i = 0; i < count; ++i) {
    const uint64_t entry_seed = split_seed(seed, uint64_t(i));
    Rng er(entry_seed);
    const Image src = read_png_rgb8(corpus[er.below(corpus.size())].string());
    const Image clean = detail::random_tile(src, size, er);

    StreakParams spi = sp;
    spi.seed = er.next_u64();
    VaporParams vpi = vp;
    vpi.seed = er.next_u64();
    const float aval = float(er.uniform(0.7, 1.0));
    const AtmosphereLight atm(aval, aval, aval);

    const RainScene scene = make_model_scene(clean, spi, vpi, atm, alpha);

    ManifestEntry e;
    e.rainy_path = detail::entry_name("rainy", i);
    e.clean_path = detail::entry_name("clean", i);
    e.ts_path = detail::entry_name("ts", i);
    e.tv_path = detail::entry_name("tv", i);
    e.mask_path = detail::entry_name("mask", i);
    e.atmosphere = atm.rgb;
    e.seed = entry_seed;
    write_png_rgb8((fs::path(out_dir) / e.rainy_path).string(), scene.rainy);
    write_png_rgb8((fs::path(out_dir) / e.clean_path).string(), scene.background);
    write_png_gray16((fs::path(out_dir) / e.ts_path).string(), scene.t_streak);
    write_png_gray16((fs::path(out_dir) / e.tv_path).string(), scene.t_vapor);
    TransmissionMap mask_map(size, size);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        mask_map.at(y, x) = scene.streak_mask.at(y, x) ? 1.0f : 0.0f;
    write_png_gray16((fs::path(out_dir) / e.mask_path).string(), mask_map);
    m.entries.push_back(std::move(e));
  }

  save_manifest((fs::path(out_dir) / "manifest.json").string(), m);
  return m;
}

}  // namespace derain
