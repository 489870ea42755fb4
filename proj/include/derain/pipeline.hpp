#pragma once
#include <algorithm>
#include <cmath>
#include <cstddef>

#include "derain/networks.hpp"
#include "derain/rain_model.hpp"
#include "derain/training.hpp"

// End-to-end restoration: run the transmission / atmosphere networks on an
// image of arbitrary size and invert the formation model on the original
// (unpadded) pixels. Also provides the difference views used by the map-dump
// diagnostics.

namespace derain {

// The streak network halves the resolution twice, so inference inputs must
// have both dimensions divisible by this.
inline constexpr int kNetAlignment = 4;

struct RestorationResult {
  Image restored;            // recovered background, clamped to [0,1]
  TransmissionMap t_streak;  // network estimate at input resolution
  TransmissionMap t_vapor;   // all zeros when no vapor net participated
  AtmosphereLight atmosphere;
};

// Pads the bottom/right edge by mirroring interior rows/columns (the edge
// itself is not repeated: row h maps back to row h-2) until both dimensions
// are multiples of `mult`. Returns the input unchanged when already aligned.
inline Image reflect_pad_to_multiple(const Image& im, int mult) {
  if (mult < 1) throw InvalidParams("pad multiple must be positive");
  const int ph = (mult - im.height % mult) % mult;
  const int pw = (mult - im.width % mult) % mult;
  if (ph == 0 && pw == 0) return im;
  if (ph > im.height - 1 || pw > im.width - 1)
    throw TooSmall("image too small to reflect-pad to a multiple of " + std::to_string(mult));
  Image out(im.height + ph, im.width + pw);
  for (int y = 0; y < out.height; ++y) {
    const int sy = y < im.height ? y : 2 * im.height - 2 - y;
    for (int x = 0; x < out.width; ++x) {
      const int sx = x < im.width ? x : 2 * im.width - 2 - x;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = im.at(sy, sx, c);
    }
  }
  return out;
}

// Top-left crop back to the pre-padding size.
inline TransmissionMap crop_map(const TransmissionMap& m, int h, int w) {
  if (h > m.height || w > m.width)
    throw DimensionMismatch("crop target exceeds source dimensions");
  TransmissionMap out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = m.at(y, x);
  return out;
}

// Full restoration: streak map from `snet`, atmosphere from `anet`, and, when
// `vnet` is non-null, a vapor map conditioned on the streak estimate. The
// networks see the reflection-padded image; the returned maps are cropped back
// and the recovery runs on the original pixels only.
inline RestorationResult restore_image(const Image& input, const nn::ParamSet<float>& snet,
                                       const nn::ParamSet<float>& anet,
                                       const nn::ParamSet<float>* vnet = nullptr,
                                       float eps = kDefaultTransmissionFloor) {
  if (input.height < 16 || input.width < 16)
    throw TooSmall("restoration needs at least a 16x16 input");
  const Image padded = reflect_pad_to_multiple(input, kNetAlignment);
  RestorationResult r;
  {
    nn::NoGradGuard ng;
    auto x = nn::Var<float>::leaf(to_tensor(padded), false);
    auto ts = nn::snet_forward(x, snet);
    r.t_streak = crop_map(to_map(ts.value()), input.height, input.width);
    if (vnet) {
      auto tv = nn::vnet_forward(x, ts, *vnet);
      r.t_vapor = crop_map(to_map(tv.value()), input.height, input.width);
    } else {
      r.t_vapor = TransmissionMap(input.height, input.width);
    }
    r.atmosphere = to_atmosphere(nn::anet_forward(x, anet).value());
  }
  r.restored = recover_background(input, r.t_streak, r.t_vapor, r.atmosphere, eps);
  return r;
}

// Restoration with the atmosphere supplied by the caller instead of a
// network; used by the ablation variant that fixes A to per-image labels.
inline RestorationResult restore_with_atmosphere(const Image& input,
                                                 const nn::ParamSet<float>& snet,
                                                 const AtmosphereLight& atmosphere,
                                                 const nn::ParamSet<float>* vnet = nullptr,
                                                 float eps = kDefaultTransmissionFloor) {
  if (input.height < 16 || input.width < 16)
    throw TooSmall("restoration needs at least a 16x16 input");
  const Image padded = reflect_pad_to_multiple(input, kNetAlignment);
  RestorationResult r;
  r.atmosphere = atmosphere;
  {
    nn::NoGradGuard ng;
    auto x = nn::Var<float>::leaf(to_tensor(padded), false);
    auto ts = nn::snet_forward(x, snet);
    r.t_streak = crop_map(to_map(ts.value()), input.height, input.width);
    if (vnet) {
      auto tv = nn::vnet_forward(x, ts, *vnet);
      r.t_vapor = crop_map(to_map(tv.value()), input.height, input.width);
    } else {
      r.t_vapor = TransmissionMap(input.height, input.width);
    }
  }
  r.restored = recover_background(input, r.t_streak, r.t_vapor, r.atmosphere, eps);
  return r;
}

namespace detail {
// Recovery with only the streak map active (vapor treated as absent).
inline Image streak_only_restoration(const Image& input, const RestorationResult& r,
                                     float eps) {
  const TransmissionMap zero(input.height, input.width);
  return recover_background(input, r.t_streak, zero, r.atmosphere, eps);
}
}  // namespace detail

// Difference views for the dump-map diagnostics. Each shows the magnitude of
// what one map changed: the streak view compares the input against the
// streak-only restoration, the vapor view compares the streak-only restoration
// against the full one. Absolute values are taken because a PNG cannot hold
// signed differences and the sign varies per pixel.
inline Image removed_streak_view(const Image& input, const RestorationResult& r,
                                 float eps = kDefaultTransmissionFloor) {
  const Image streak_only = detail::streak_only_restoration(input, r, eps);
  Image out(input.height, input.width);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = std::fabs(input.data[i] - streak_only.data[i]);
  return out;
}

inline Image removed_vapor_view(const Image& input, const RestorationResult& r,
                                float eps = kDefaultTransmissionFloor) {
  const Image streak_only = detail::streak_only_restoration(input, r, eps);
  Image out(input.height, input.width);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = std::fabs(streak_only.data[i] - r.restored.data[i]);
  return out;
}

}  // namespace derain
