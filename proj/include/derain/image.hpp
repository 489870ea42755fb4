#pragma once
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "derain/errors.hpp"

namespace derain {

// H x W x 3 intensity field, values in [0,1], row-major, interleaved RGB.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;  // size = height * width * 3

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), data(size_t(h) * w * 3, fill) {
    if (h < 1 || w < 1) throw DimensionMismatch("Image: height and width must be >= 1");
  }

  float& at(int y, int x, int c) { return data[(size_t(y) * width + x) * 3 + c]; }
  const float& at(int y, int x, int c) const { return data[(size_t(y) * width + x) * 3 + c]; }
  size_t pixel_count() const { return size_t(height) * width; }
};

// H x W scalar field in [0,1]. Houses transmission maps; also reused for
// single-channel render layers.
struct TransmissionMap {
  int height = 0;
  int width = 0;
  std::vector<float> data;  // size = height * width

  TransmissionMap() = default;
  TransmissionMap(int h, int w, float fill = 0.0f)
      : height(h), width(w), data(size_t(h) * w, fill) {
    if (h < 1 || w < 1) throw DimensionMismatch("TransmissionMap: height and width must be >= 1");
  }

  float& at(int y, int x) { return data[size_t(y) * width + x]; }
  const float& at(int y, int x) const { return data[size_t(y) * width + x]; }
};

// Per-image constant atmosphere light, one value per RGB channel.
struct AtmosphereLight {
  std::array<float, 3> rgb{0.0f, 0.0f, 0.0f};

  AtmosphereLight() = default;
  AtmosphereLight(float r, float g, float b) : rgb{r, g, b} {}
  float operator[](int c) const { return rgb[size_t(c)]; }
  float& operator[](int c) { return rgb[size_t(c)]; }
};

// Per-pixel boolean field (rain-streak mask).
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;

  Mask() = default;
  Mask(int h, int w, bool fill = false)
      : height(h), width(w), data(size_t(h) * w, fill ? 1 : 0) {}

  bool at(int y, int x) const { return data[size_t(y) * width + x] != 0; }
  void set(int y, int x, bool v) { data[size_t(y) * width + x] = v ? 1 : 0; }
  size_t count() const {
    size_t n = 0;
    for (uint8_t v : data) n += v;
    return n;
  }
};

inline bool same_dims(const Image& a, const Image& b) {
  return a.height == b.height && a.width == b.width;
}
inline bool same_dims(const Image& a, const TransmissionMap& b) {
  return a.height == b.height && a.width == b.width;
}
inline bool same_dims(const TransmissionMap& a, const TransmissionMap& b) {
  return a.height == b.height && a.width == b.width;
}

}  // namespace derain
