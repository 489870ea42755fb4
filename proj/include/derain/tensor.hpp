#pragma once
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "derain/errors.hpp"

namespace derain::nn {

// All tensors are logically 4D (b, c, h, w). Batched vectors such as the
// atmosphere light live as (b, c, 1, 1); scalars as (1,1,1,1). Convolution
// weights map (out_channels, in_channels_per_group, kh, kw) onto the same
// four slots.
struct Shape {
  int b = 1, c = 1, h = 1, w = 1;

  int64_t numel() const { return int64_t(b) * c * h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    return "(" + std::to_string(b) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(size_t(s.numel()), fill) {}
  Tensor(int b, int c, int h, int w, T fill = T(0)) : Tensor(Shape{b, c, h, w}, fill) {}

  T& at(int b_, int c_, int y, int x) {
    return data[((size_t(b_) * shape.c + c_) * shape.h + y) * shape.w + x];
  }
  const T& at(int b_, int c_, int y, int x) const {
    return data[((size_t(b_) * shape.c + c_) * shape.h + y) * shape.w + x];
  }

  int64_t numel() const { return shape.numel(); }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

template <typename T>
inline void require_shape(const Tensor<T>& t, const Shape& s, const char* where) {
  if (!(t.shape == s))
    throw ShapeMismatch(std::string(where) + ": expected " + s.str() + ", got " + t.shape.str());
}

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

}  // namespace derain::nn
