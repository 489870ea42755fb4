#pragma once
#include <algorithm>
#include <cmath>

#include "derain/image.hpp"

// Rain image formation with both streaks and vapors acting as transmission
// media:
//
//   I = (Ts + Tv) . J + (1 - Ts - Tv) . A
//
// and its inversion for background recovery. The division in the inverse is
// guarded by clamping the total transmission to [eps, 1].

namespace derain {

constexpr float kDefaultTransmissionFloor = 0.05f;

// Fully specified synthetic scene. `rainy` is always the exact composition
// of the other fields; `streak_mask` marks rain-streak pixels.
struct RainScene {
  Image background;       // J
  TransmissionMap t_streak;  // Ts
  TransmissionMap t_vapor;   // Tv
  AtmosphereLight atmosphere;
  Image rainy;            // I
  Mask streak_mask;
};

// I(x,c) = (Ts(x)+Tv(x)) * J(x,c) + (1 - Ts(x) - Tv(x)) * A(c)
// Requires Ts+Tv <= 1 per pixel; the output is in [0,1] by construction.
inline Image compose(const Image& background, const TransmissionMap& t_streak,
                     const TransmissionMap& t_vapor, const AtmosphereLight& atmosphere) {
  if (!same_dims(background, t_streak) || !same_dims(background, t_vapor))
    throw DimensionMismatch("compose: image/transmission dimensions differ");
  Image out(background.height, background.width);
  const size_t n = background.pixel_count();
  for (size_t i = 0; i < n; ++i) {
    const float t = t_streak.data[i] + t_vapor.data[i];
    if (t > 1.0f + 1e-9f)
      throw TransmissionRangeViolation("compose: Ts+Tv exceeds 1");
    const float airlight = 1.0f - t;
    for (int c = 0; c < 3; ++c) {
      float v = t * background.data[i * 3 + c] + airlight * atmosphere[c];
      out.data[i * 3 + c] = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return out;
}

// Per-pixel clamp(Ts+Tv, eps, 1), shared by recovery and the training losses.
inline TransmissionMap effective_transmission(const TransmissionMap& t_streak,
                                              const TransmissionMap& t_vapor, float eps) {
  if (!same_dims(t_streak, t_vapor))
    throw DimensionMismatch("effective_transmission: dimensions differ");
  TransmissionMap out(t_streak.height, t_streak.width);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = std::clamp(t_streak.data[i] + t_vapor.data[i], eps, 1.0f);
  return out;
}

// J(x,c) = (I(x,c) - (1 - T'(x)) * A(c)) / T'(x),  T' = clamp(Ts+Tv, eps, 1).
// The result is clamped to [0,1].
inline Image recover_background(const Image& rainy, const TransmissionMap& t_streak,
                                const TransmissionMap& t_vapor, const AtmosphereLight& atmosphere,
                                float eps = kDefaultTransmissionFloor) {
  if (!same_dims(rainy, t_streak) || !same_dims(rainy, t_vapor))
    throw DimensionMismatch("recover_background: image/transmission dimensions differ");
  if (!(eps > 0.0f && eps <= 0.5f))
    throw InvalidParams("recover_background: eps must be in (0, 0.5]");
  Image out(rainy.height, rainy.width);
  const size_t n = rainy.pixel_count();
  for (size_t i = 0; i < n; ++i) {
    const float t = std::clamp(t_streak.data[i] + t_vapor.data[i], eps, 1.0f);
    const float airlight = 1.0f - t;
    for (int c = 0; c < 3; ++c) {
      float v = (rainy.data[i * 3 + c] - airlight * atmosphere[c]) / t;
      out.data[i * 3 + c] = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return out;
}

}  // namespace derain
