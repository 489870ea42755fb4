#pragma once
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "derain/image.hpp"
#include "derain/png_io.hpp"

// Image-quality metrics: peak signal-to-noise ratio and structural
// similarity, plus paired-directory evaluation. `derain::reference` holds
// deliberately plain, loop-per-window implementations of the same formulas;
// the fast versions must agree with them and the test suite enforces it.

namespace derain {

namespace detail {

// Running compensated (Kahan) sum; keeps directory-level means stable no
// matter how many images contribute.
struct KahanSum {
  double sum = 0.0, comp = 0.0;

  void add(double x) {
    const double y = x - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;  // (K1 * L)^2 with L = 1
constexpr double kSsimC2 = 0.03 * 0.03;  // (K2 * L)^2

inline const std::vector<double>& gaussian11() {
  static const std::vector<double> k = [] {
    std::vector<double> w(kSsimWindow);
    double sum = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
      const double d = double(i) - (kSsimWindow - 1) / 2.0;
      w[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
      sum += w[i];
    }
    for (double& v : w) v /= sum;
    return w;
  }();
  return k;
}

// Valid-region separable Gaussian filtering of an H x W plane; the result is
// (H-10) x (W-10). Kept out of line on purpose: the similarity score promises
// bitwise symmetry and an exact 1.0 for identical inputs, which requires the
// five moment maps of one comparison to go through one compiled copy of this
// loop. Inlining would let the optimizer contract each copy differently and
// break those identities by one ulp.
#if defined(__GNUC__)
[[gnu::noinline]]
#endif
inline std::vector<double> smooth_valid(const std::vector<double>& p, int h, int w) {
  const auto& k = gaussian11();
  const int ow = w - kSsimWindow + 1;
  const int oh = h - kSsimWindow + 1;
  std::vector<double> tmp(size_t(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kSsimWindow; ++i) acc += k[i] * p[size_t(y) * w + x + i];
      tmp[size_t(y) * ow + x] = acc;
    }
  std::vector<double> out(size_t(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int j = 0; j < kSsimWindow; ++j) acc += k[j] * tmp[size_t(y + j) * ow + x];
      out[size_t(y) * ow + x] = acc;
    }
  return out;
}

inline std::vector<double> channel_plane(const Image& im, int c) {
  std::vector<double> p(im.pixel_count());
  for (size_t i = 0; i < p.size(); ++i) p[i] = double(im.data[i * 3 + c]);
  return p;
}

}  // namespace detail

// 10 * log10(1 / MSE) over all pixels and channels, for images in [0,1].
// Capped at 100 dB once the MSE drops below 1e-10, so identical images score
// exactly 100 instead of infinity. noinline for the same reason as
// smooth_valid: one compiled copy keeps psnr(a,b) == psnr(b,a) bitwise.
#if defined(__GNUC__)
[[gnu::noinline]]
#endif
inline double psnr(const Image& a, const Image& b) {
  if (!same_dims(a, b)) throw DimensionMismatch("psnr: image dimensions differ");
  detail::KahanSum acc;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    acc.add(d * d);
  }
  const double mse = acc.sum / double(a.data.size());
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

// Mean structural similarity: 11x11 Gaussian-weighted windows (sigma 1.5),
// K1 = 0.01, K2 = 0.03, dynamic range 1. Only windows fully inside the image
// count, each channel is averaged separately, and the channel means are
// averaged into one score. Identical inputs give exactly 1.0: every window's
// numerator and denominator are then computed from bitwise-equal moments.
// noinline so both orders of a comparison run the identical instruction
// stream; see smooth_valid.
#if defined(__GNUC__)
[[gnu::noinline]]
#endif
inline double ssim(const Image& a, const Image& b) {
  if (!same_dims(a, b)) throw DimensionMismatch("ssim: image dimensions differ");
  if (a.height < detail::kSsimWindow || a.width < detail::kSsimWindow)
    throw TooSmall("ssim: images must be at least 11x11");

  const int oh = a.height - detail::kSsimWindow + 1;
  const int ow = a.width - detail::kSsimWindow + 1;
  double channel_mean_sum = 0.0;
  for (int c = 0; c < 3; ++c) {
    const std::vector<double> pa = detail::channel_plane(a, c);
    const std::vector<double> pb = detail::channel_plane(b, c);
    std::vector<double> paa(pa.size()), pbb(pa.size()), pab(pa.size());
    for (size_t i = 0; i < pa.size(); ++i) {
      paa[i] = pa[i] * pa[i];
      pbb[i] = pb[i] * pb[i];
      pab[i] = pa[i] * pb[i];
    }
    const std::vector<double> mu_a = detail::smooth_valid(pa, a.height, a.width);
    const std::vector<double> mu_b = detail::smooth_valid(pb, a.height, a.width);
    const std::vector<double> mu_aa = detail::smooth_valid(paa, a.height, a.width);
    const std::vector<double> mu_bb = detail::smooth_valid(pbb, a.height, a.width);
    const std::vector<double> mu_ab = detail::smooth_valid(pab, a.height, a.width);

    detail::KahanSum acc;
    for (size_t i = 0; i < size_t(oh) * ow; ++i) {
      const double sq_a = mu_a[i] * mu_a[i];
      const double sq_b = mu_b[i] * mu_b[i];
      const double prod = mu_a[i] * mu_b[i];
      const double var_a = mu_aa[i] - sq_a;
      const double var_b = mu_bb[i] - sq_b;
      const double cov = mu_ab[i] - prod;
      const double num = (2.0 * prod + detail::kSsimC1) * (2.0 * cov + detail::kSsimC2);
      const double den =
          ((sq_a + sq_b) + detail::kSsimC1) * ((var_a + var_b) + detail::kSsimC2);
      acc.add(num / den);
    }
    channel_mean_sum += acc.sum / double(size_t(oh) * ow);
  }
  return channel_mean_sum / 3.0;
}

// ---------------------------------------------------------------------------
// Plain-definition twins. These trade every optimization for obviousness:
// each window is visited tap by tap and the statistics follow the defining
// sums, including the centered-moment form of the (co)variances. They exist
// so the fast versions above always have an independent check.

namespace reference {

inline double psnr(const Image& a, const Image& b) {
  if (!same_dims(a, b)) throw DimensionMismatch("reference::psnr: dimensions differ");
  double sum = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    sum += d * d;
  }
  const double mse = sum / double(a.data.size());
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

inline double ssim(const Image& a, const Image& b) {
  if (!same_dims(a, b)) throw DimensionMismatch("reference::ssim: dimensions differ");
  constexpr int kW = detail::kSsimWindow;
  if (a.height < kW || a.width < kW)
    throw TooSmall("reference::ssim: images must be at least 11x11");
  const auto& k = detail::gaussian11();

  double channel_mean_sum = 0.0;
  for (int c = 0; c < 3; ++c) {
    double win_sum = 0.0;
    int win_count = 0;
    for (int y0 = 0; y0 + kW <= a.height; ++y0)
      for (int x0 = 0; x0 + kW <= a.width; ++x0) {
        double mu_a = 0.0, mu_b = 0.0;
        for (int j = 0; j < kW; ++j)
          for (int i = 0; i < kW; ++i) {
            const double w = k[j] * k[i];
            mu_a += w * double(a.at(y0 + j, x0 + i, c));
            mu_b += w * double(b.at(y0 + j, x0 + i, c));
          }
        double var_a = 0.0, var_b = 0.0, cov = 0.0;
        for (int j = 0; j < kW; ++j)
          for (int i = 0; i < kW; ++i) {
            const double w = k[j] * k[i];
            const double da = double(a.at(y0 + j, x0 + i, c)) - mu_a;
            const double db = double(b.at(y0 + j, x0 + i, c)) - mu_b;
            var_a += w * da * da;
            var_b += w * db * db;
            cov += w * da * db;
          }
        const double num =
            (2.0 * mu_a * mu_b + detail::kSsimC1) * (2.0 * cov + detail::kSsimC2);
        const double den = (mu_a * mu_a + mu_b * mu_b + detail::kSsimC1) *
                           (var_a + var_b + detail::kSsimC2);
        win_sum += num / den;
        ++win_count;
      }
    channel_mean_sum += win_sum / double(win_count);
  }
  return channel_mean_sum / 3.0;
}

}  // namespace reference

// ---------------------------------------------------------------------------
// Paired-directory evaluation

struct EvalEntry {
  std::string name;
  double psnr_db = 0.0;
  double ssim_val = 0.0;
};

struct EvalResult {
  std::vector<EvalEntry> entries;  // sorted by name
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  int count = 0;
};

// Scores every PNG filename present in both directories (matched by bare
// filename, sorted). Throws NameMismatch when the intersection is empty and
// IoError when a directory cannot be listed.
inline EvalResult evaluate_dirs(const std::string& restored_dir,
                                const std::string& reference_dir) {
  namespace fs = std::filesystem;
  auto list_pngs = [](const std::string& dir) {
    std::set<std::string> names;
    std::error_code ec;
    fs::directory_iterator it(dir, ec), end;
    if (ec) throw IoError("cannot list directory '" + dir + "': " + ec.message());
    for (; it != end; ++it)
      if (it->path().extension() == ".png") names.insert(it->path().filename().string());
    return names;
  };
  const std::set<std::string> rest = list_pngs(restored_dir);
  const std::set<std::string> ref = list_pngs(reference_dir);
  std::vector<std::string> common;
  std::set_intersection(rest.begin(), rest.end(), ref.begin(), ref.end(),
                        std::back_inserter(common));
  if (common.empty())
    throw NameMismatch("no PNG filenames shared between '" + restored_dir + "' and '" +
                       reference_dir + "'");

  EvalResult out;
  detail::KahanSum psnr_acc, ssim_acc;
  for (const std::string& name : common) {
    const Image a = read_png_rgb8((fs::path(restored_dir) / name).string());
    const Image b = read_png_rgb8((fs::path(reference_dir) / name).string());
    if (!same_dims(a, b))
      throw DimensionMismatch("evaluate_dirs: '" + name + "' differs in size between dirs");
    EvalEntry e;
    e.name = name;
    e.psnr_db = psnr(a, b);
    e.ssim_val = ssim(a, b);
    psnr_acc.add(e.psnr_db);
    ssim_acc.add(e.ssim_val);
    out.entries.push_back(std::move(e));
  }
  out.count = int(out.entries.size());
  out.mean_psnr = psnr_acc.sum / out.count;
  out.mean_ssim = ssim_acc.sum / out.count;
  return out;
}

// CSV form: one `name,psnr,ssim` row per image plus a final `mean` row; no
// header line. Values carry six decimals.
inline std::string eval_csv(const EvalResult& r) {
  std::string out;
  char buf[160];
  for (const EvalEntry& e : r.entries) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", e.name.c_str(), e.psnr_db, e.ssim_val);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f\n", r.mean_psnr, r.mean_ssim);
  out += buf;
  return out;
}

// Aligned human-readable table for terminal output.
inline std::string eval_table(const EvalResult& r) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-32s %10s %8s\n", "image", "psnr[dB]", "ssim");
  out += buf;
  for (const EvalEntry& e : r.entries) {
    std::snprintf(buf, sizeof buf, "%-32s %10.4f %8.4f\n", e.name.c_str(), e.psnr_db,
                  e.ssim_val);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%-32s %10.4f %8.4f\n", "mean", r.mean_psnr, r.mean_ssim);
  out += buf;
  return out;
}

}  // namespace derain
