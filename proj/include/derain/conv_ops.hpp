#pragma once
#include <algorithm>
#include <memory>
#include <vector>

#include "derain/autodiff.hpp"
#include "derain/gemm.hpp"

// Spatial network primitives: grouped 2D convolution (GEMM-backed, with
// symmetric or zero boundary padding), depthwise convolution, pooling,
// bilinear upsampling and the ShuffleNet channel permutation.

namespace derain::nn {

enum class Pad { Symmetric, Zero };

namespace detail {

// Symmetric (edge-inclusive) reflection: -1 -> 0, n -> n-1. Valid for any
// pad reachable here; also works for n == 1.
inline int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

struct ConvDims {
  int batch, in_ch, height, width;
  int out_ch, kh, kw, stride, groups;
  int icg, ocg, ph, pw, oh, ow;
};

template <typename T>
ConvDims conv_dims(const Shape& x, const Shape& w, int stride, int groups) {
  ConvDims d;
  d.batch = x.b;
  d.in_ch = x.c;
  d.height = x.h;
  d.width = x.w;
  d.out_ch = w.b;
  d.kh = w.h;
  d.kw = w.w;
  d.stride = stride;
  d.groups = groups;
  if (groups < 1 || d.in_ch % groups != 0 || d.out_ch % groups != 0)
    throw IndivisibleChannels("conv2d: groups " + std::to_string(groups) +
                              " does not divide channels " + std::to_string(d.in_ch) + "/" +
                              std::to_string(d.out_ch));
  d.icg = d.in_ch / groups;
  d.ocg = d.out_ch / groups;
  if (w.c != d.icg)
    throw ShapeMismatch("conv2d: weight expects " + std::to_string(w.c) +
                        " channels/group, input provides " + std::to_string(d.icg));
  if (d.kh % 2 == 0 || d.kw % 2 == 0) throw ShapeMismatch("conv2d: kernels must be odd");
  if (stride != 1 && stride != 2) throw ShapeMismatch("conv2d: stride must be 1 or 2");
  d.ph = (d.kh - 1) / 2;
  d.pw = (d.kw - 1) / 2;
  d.oh = (d.height + 2 * d.ph - d.kh) / stride + 1;
  d.ow = (d.width + 2 * d.pw - d.kw) / stride + 1;
  return d;
}

// Builds the column matrix (icg*kh*kw) x (rows*ow) for output rows
// [row0, row0+rows) of one (batch, group) slice.
template <typename T>
void im2col(const T* x, const ConvDims& d, Pad pad, int group, int row0, int rows, T* col) {
  const size_t plane = size_t(d.height) * d.width;
  const int n = rows * d.ow;
  for (int ci = 0; ci < d.icg; ++ci) {
    const T* src = x + (size_t(group) * d.icg + ci) * plane;
    for (int ky = 0; ky < d.kh; ++ky)
      for (int kx = 0; kx < d.kw; ++kx) {
        T* dst = col + (size_t(ci) * d.kh * d.kw + size_t(ky) * d.kw + kx) * n;
        for (int oy = row0; oy < row0 + rows; ++oy) {
          const int sy = oy * d.stride + ky - d.ph;
          const bool y_in = sy >= 0 && sy < d.height;
          const int ry = y_in ? sy : (pad == Pad::Symmetric ? reflect_index(sy, d.height) : -1);
          for (int ox = 0; ox < d.ow; ++ox) {
            const int sx = ox * d.stride + kx - d.pw;
            int rx = sx;
            if (sx < 0 || sx >= d.width)
              rx = pad == Pad::Symmetric ? reflect_index(sx, d.width) : -1;
            *dst++ = (ry >= 0 && rx >= 0) ? src[size_t(ry) * d.width + rx] : T(0);
          }
        }
      }
  }
}

// Adjoint of im2col: scatter-adds the column gradient back onto dx.
template <typename T>
void col2im_add(const T* col, const ConvDims& d, Pad pad, int group, int row0, int rows, T* dx) {
  const size_t plane = size_t(d.height) * d.width;
  const int n = rows * d.ow;
  for (int ci = 0; ci < d.icg; ++ci) {
    T* dst = dx + (size_t(group) * d.icg + ci) * plane;
    for (int ky = 0; ky < d.kh; ++ky)
      for (int kx = 0; kx < d.kw; ++kx) {
        const T* src = col + (size_t(ci) * d.kh * d.kw + size_t(ky) * d.kw + kx) * n;
        for (int oy = row0; oy < row0 + rows; ++oy) {
          const int sy = oy * d.stride + ky - d.ph;
          const bool y_in = sy >= 0 && sy < d.height;
          const int ry = y_in ? sy : (pad == Pad::Symmetric ? reflect_index(sy, d.height) : -1);
          for (int ox = 0; ox < d.ow; ++ox) {
            const int sx = ox * d.stride + kx - d.pw;
            int rx = sx;
            if (sx < 0 || sx >= d.width)
              rx = pad == Pad::Symmetric ? reflect_index(sx, d.width) : -1;
            if (ry >= 0 && rx >= 0) dst[size_t(ry) * d.width + rx] += *src;
            ++src;
          }
        }
      }
  }
}

inline int tile_rows_for(int k, int ow, int oh) {
  const int64_t budget = 2'000'000;  // elements of scratch per tile
  int rows = int(std::max<int64_t>(1, budget / (int64_t(k) * ow)));
  return std::min(rows, oh);
}

// Copies one image (in_ch planes) into a border-padded buffer of
// (height+2ph) x (width+2pw) per channel.
template <typename T>
void pad_image(const T* x, const ConvDims& d, Pad pad, T* dst) {
  const size_t plane = size_t(d.height) * d.width;
  const int pw_ = d.width + 2 * d.pw, ph_ = d.height + 2 * d.ph;
  const size_t pplane = size_t(ph_) * pw_;
  for (int c = 0; c < d.in_ch; ++c) {
    const T* src = x + size_t(c) * plane;
    T* out = dst + size_t(c) * pplane;
    for (int y = -d.ph; y < d.height + d.ph; ++y) {
      T* row = out + size_t(y + d.ph) * pw_;
      const bool y_in = y >= 0 && y < d.height;
      if (!y_in && pad == Pad::Zero) {
        std::fill(row, row + pw_, T(0));
        continue;
      }
      const T* srow = src + size_t(y_in ? y : reflect_index(y, d.height)) * d.width;
      for (int x_ = 0; x_ < d.pw; ++x_) {
        row[x_] = pad == Pad::Zero ? T(0) : srow[reflect_index(x_ - d.pw, d.width)];
        row[pw_ - 1 - x_] = pad == Pad::Zero ? T(0) : srow[reflect_index(d.width + d.pw - 1 - x_, d.width)];
      }
      std::copy(srow, srow + d.width, row + d.pw);
    }
  }
}

// Per-axis bilinear source indices/weights, half-pixel centers, clamped.
template <typename T>
struct Lerp {
  int i0, i1;
  T w1;
};

template <typename T>
std::vector<Lerp<T>> bilinear_axis(int n_out, int n_in) {
  std::vector<Lerp<T>> v(static_cast<size_t>(n_out));
  for (int i = 0; i < n_out; ++i) {
    const double src = (double(i) + 0.5) * double(n_in) / double(n_out) - 0.5;
    const double f = std::floor(src);
    int i0 = int(f);
    T w1 = T(src - f);
    if (i0 < 0) {
      i0 = 0;
      w1 = T(0);
    }
    int i1 = i0 + 1;
    if (i1 >= n_in) {
      i1 = n_in - 1;
      w1 = T(0);
    }
    v[size_t(i)] = {i0, i1, w1};
  }
  return v;
}

// Depthwise convolution evaluated directly; GEMM would degenerate to
// 1-row multiplies with call overhead dominating. 3x3 stride-1 interiors take
// a branch-free path the compiler can vectorize.
template <typename T>
void depthwise_forward(const T* x, const T* w, const T* bias, const ConvDims& d, Pad pad, T* out) {
  const size_t plane = size_t(d.height) * d.width;
  const size_t oplane = size_t(d.oh) * d.ow;
  const int k2 = d.kh * d.kw;
  const bool fast33 = d.kh == 3 && d.kw == 3 && d.stride == 1 && d.height >= 2 && d.width >= 2;
  for (int b = 0; b < d.batch; ++b)
    for (int c = 0; c < d.in_ch; ++c) {
      const T* src = x + (size_t(b) * d.in_ch + c) * plane;
      const T* wk = w + size_t(c) * k2;
      const T bv = bias ? bias[c] : T(0);
      T* dst = out + (size_t(b) * d.in_ch + c) * oplane;
      for (int oy = 0; oy < d.oh; ++oy)
        for (int ox = 0; ox < d.ow; ++ox) {
          if (fast33 && oy > 0 && oy < d.oh - 1 && ox > 0) {
            if (ox < d.ow - 1) {
              const T* r0 = src + size_t(oy - 1) * d.width + ox - 1;
              const T* r1 = r0 + d.width;
              const T* r2 = r1 + d.width;
              T* drow = dst + size_t(oy) * d.ow;
              // consume the whole interior of this row in one pass
              for (; ox < d.ow - 1; ++ox, ++r0, ++r1, ++r2)
                drow[ox] = bv + wk[0] * r0[0] + wk[1] * r0[1] + wk[2] * r0[2] +
                           wk[3] * r1[0] + wk[4] * r1[1] + wk[5] * r1[2] +
                           wk[6] * r2[0] + wk[7] * r2[1] + wk[8] * r2[2];
            }
          }
          T acc = bv;
          for (int ky = 0; ky < d.kh; ++ky) {
            int sy = oy * d.stride + ky - d.ph;
            if (sy < 0 || sy >= d.height) {
              if (pad == Pad::Zero) continue;
              sy = reflect_index(sy, d.height);
            }
            for (int kx = 0; kx < d.kw; ++kx) {
              int sx = ox * d.stride + kx - d.pw;
              if (sx < 0 || sx >= d.width) {
                if (pad == Pad::Zero) continue;
                sx = reflect_index(sx, d.width);
              }
              acc += wk[ky * d.kw + kx] * src[size_t(sy) * d.width + sx];
            }
          }
          dst[size_t(oy) * d.ow + ox] = acc;
        }
    }
}

template <typename T>
void depthwise_backward(const T* x, const T* w, const T* g, const ConvDims& d, Pad pad, T* dx,
                        T* dw, T* db) {
  const size_t plane = size_t(d.height) * d.width;
  const size_t oplane = size_t(d.oh) * d.ow;
  const int k2 = d.kh * d.kw;
  for (int b = 0; b < d.batch; ++b)
    for (int c = 0; c < d.in_ch; ++c) {
      const T* src = x + (size_t(b) * d.in_ch + c) * plane;
      const T* go = g + (size_t(b) * d.in_ch + c) * oplane;
      const T* wk = w + size_t(c) * k2;
      T* dxc = dx ? dx + (size_t(b) * d.in_ch + c) * plane : nullptr;
      T* dwc = dw ? dw + size_t(c) * k2 : nullptr;
      for (int oy = 0; oy < d.oh; ++oy)
        for (int ox = 0; ox < d.ow; ++ox) {
          const T gv = go[size_t(oy) * d.ow + ox];
          if (db) db[c] += gv;
          for (int ky = 0; ky < d.kh; ++ky) {
            int sy = oy * d.stride + ky - d.ph;
            if (sy < 0 || sy >= d.height) {
              if (pad == Pad::Zero) continue;
              sy = reflect_index(sy, d.height);
            }
            for (int kx = 0; kx < d.kw; ++kx) {
              int sx = ox * d.stride + kx - d.pw;
              if (sx < 0 || sx >= d.width) {
                if (pad == Pad::Zero) continue;
                sx = reflect_index(sx, d.width);
              }
              const T xv = src[size_t(sy) * d.width + sx];
              if (dwc) dwc[ky * d.kw + kx] += gv * xv;
              if (dxc) dxc[size_t(sy) * d.width + sx] += gv * wk[ky * d.kw + kx];
            }
          }
        }
    }
}

}  // namespace detail

// Grouped 2D convolution. x: (B,IC,H,W), w: (OC, IC/groups, KH, KW),
// bias: (1,OC,1,1) or an invalid Var for none. Odd kernels only; padding is
// (K-1)/2 so stride 1 preserves the spatial size and stride 2 yields
// ceil(H/2) x ceil(W/2).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride = 1,
              int groups = 1, Pad pad = Pad::Symmetric) {
  using namespace detail;
  const ConvDims d = conv_dims<T>(x.shape(), w.shape(), stride, groups);
  if (bias.valid() && !(bias.shape() == Shape{1, d.out_ch, 1, 1}))
    throw ShapeMismatch("conv2d: bias shape " + bias.shape().str());

  Tensor<T> out(d.batch, d.out_ch, d.oh, d.ow);
  const T* bptr = bias.valid() ? bias.value().data.data() : nullptr;
  const bool depthwise = d.groups == d.in_ch && d.icg == 1 && d.ocg == 1;
  const size_t in_img = size_t(d.in_ch) * d.height * d.width;
  const size_t out_img = size_t(d.out_ch) * d.oh * d.ow;
  const size_t oplane = size_t(d.oh) * d.ow;
  const int k = d.icg * d.kh * d.kw;

  if (depthwise) {
    depthwise_forward(x.value().data.data(), w.value().data.data(), bptr, d, pad,
                      out.data.data());
  } else if (d.kh == 1 && d.kw == 1 && stride == 1) {
    // 1x1: the input slice is already the column matrix.
    const int n = d.height * d.width;
    for (int b = 0; b < d.batch; ++b)
      for (int g = 0; g < d.groups; ++g) {
        const T* xg = x.value().data.data() + b * in_img + size_t(g) * d.icg * n;
        T* og = out.data.data() + b * out_img + size_t(g) * d.ocg * n;
        gemm(false, false, d.ocg, n, k, T(1), w.value().data.data() + size_t(g) * d.ocg * k, k,
             xg, n, T(0), og, n);
      }
    if (bptr)
      for (int b = 0; b < d.batch; ++b)
        for (int c = 0; c < d.out_ch; ++c) {
          T* og = out.data.data() + b * out_img + size_t(c) * oplane;
          const T bv = bptr[c];
          for (size_t i = 0; i < oplane; ++i) og[i] += bv;
        }
  } else if (stride == 1) {
    // Pad once, then fill the column matrix with row memcpys from the padded
    // planes; one deep-K GEMM per (group, row tile).
    const int pw_ = d.width + 2 * d.pw, ph_ = d.height + 2 * d.ph;
    const size_t pplane = size_t(ph_) * pw_;
    std::unique_ptr<T[]> padded(new T[size_t(d.in_ch) * pplane]);
    const int tile = tile_rows_for(k, d.ow, d.oh);
    std::unique_ptr<T[]> col(new T[size_t(k) * tile * d.ow]);
    for (int b = 0; b < d.batch; ++b) {
      pad_image(x.value().data.data() + b * in_img, d, pad, padded.get());
      T* ob = out.data.data() + b * out_img;
      for (int g = 0; g < d.groups; ++g)
        for (int row0 = 0; row0 < d.oh; row0 += tile) {
          const int rows = std::min(tile, d.oh - row0);
          const int n = rows * d.ow;
          T* cp = col.get();
          for (int ci = 0; ci < d.icg; ++ci) {
            const T* plane_ = padded.get() + (size_t(g) * d.icg + ci) * pplane;
            for (int ky = 0; ky < d.kh; ++ky)
              for (int kx = 0; kx < d.kw; ++kx)
                for (int y = row0; y < row0 + rows; ++y) {
                  const T* srow = plane_ + size_t(y + ky) * pw_ + kx;
                  std::copy(srow, srow + d.ow, cp);
                  cp += d.ow;
                }
          }
          gemm(false, false, d.ocg, n, k, T(1),
               w.value().data.data() + size_t(g) * d.ocg * k, k, col.get(), n, T(0),
               ob + size_t(g) * d.ocg * oplane + size_t(row0) * d.ow, int(oplane));
        }
      if (bptr)
        for (int c = 0; c < d.out_ch; ++c) {
          T* og = ob + size_t(c) * oplane;
          const T bv = bptr[c];
          for (size_t i = 0; i < oplane; ++i) og[i] += bv;
        }
    }
  } else {
    const int tile = tile_rows_for(k, d.ow, d.oh);
    std::vector<T> col(size_t(k) * tile * d.ow);
    for (int b = 0; b < d.batch; ++b)
      for (int g = 0; g < d.groups; ++g)
        for (int row0 = 0; row0 < d.oh; row0 += tile) {
          const int rows = std::min(tile, d.oh - row0);
          const int n = rows * d.ow;
          im2col(x.value().data.data() + b * in_img, d, pad, g, row0, rows, col.data());
          // C rows (channels) are strided by the full output plane; the tile
          // itself is contiguous because it spans whole output rows.
          T* og = out.data.data() + b * out_img + size_t(g) * d.ocg * oplane +
                  size_t(row0) * d.ow;
          gemm(false, false, d.ocg, n, k, T(1), w.value().data.data() + size_t(g) * d.ocg * k, k,
               col.data(), n, T(0), og, oplane);
        }
    if (bptr)
      for (int b = 0; b < d.batch; ++b)
        for (int c = 0; c < d.out_ch; ++c) {
          T* og = out.data.data() + b * out_img + size_t(c) * oplane;
          const T bv = bptr[c];
          for (size_t i = 0; i < oplane; ++i) og[i] += bv;
        }
  }

  std::vector<Var<T>> inputs{x, w};
  if (bias.valid()) inputs.push_back(bias);
  const bool has_bias = bias.valid();
  return detail::make_op<T>(std::move(out), std::move(inputs),
                            [d, pad, depthwise, has_bias](detail::Node<T>& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    detail::Node<T>* pb = has_bias ? n.parents[2].get() : nullptr;
    const size_t in_img = size_t(d.in_ch) * d.height * d.width;
    const size_t out_img = size_t(d.out_ch) * d.oh * d.ow;
    const size_t oplane = size_t(d.oh) * d.ow;
    const int k = d.icg * d.kh * d.kw;
    if (px.requires_grad) px.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    if (pb && pb->requires_grad) pb->ensure_grad();

    if (pb && pb->requires_grad) {
      for (int b = 0; b < d.batch; ++b)
        for (int c = 0; c < d.out_ch; ++c) {
          const T* g = n.grad.data.data() + b * out_img + size_t(c) * oplane;
          T acc = T(0);
          for (size_t i = 0; i < oplane; ++i) acc += g[i];
          pb->grad.data[size_t(c)] += acc;
        }
    }

    if (depthwise) {
      detail::depthwise_backward<T>(px.value.data.data(), pw.value.data.data(),
                                    n.grad.data.data(), d, pad,
                                    px.requires_grad ? px.grad.data.data() : nullptr,
                                    pw.requires_grad ? pw.grad.data.data() : nullptr, nullptr);
      return;
    }
    if (d.kh == 1 && d.kw == 1 && d.stride == 1) {
      const int nsp = d.height * d.width;
      for (int b = 0; b < d.batch; ++b)
        for (int g = 0; g < d.groups; ++g) {
          const T* gog = n.grad.data.data() + b * out_img + size_t(g) * d.ocg * nsp;
          const T* xg = px.value.data.data() + b * in_img + size_t(g) * d.icg * nsp;
          if (pw.requires_grad)
            gemm(false, true, d.ocg, k, nsp, T(1), gog, nsp, xg, nsp, T(1),
                 pw.grad.data.data() + size_t(g) * d.ocg * k, k);
          if (px.requires_grad)
            gemm(true, false, k, nsp, d.ocg, T(1),
                 pw.value.data.data() + size_t(g) * d.ocg * k, k, gog, nsp, T(1),
                 px.grad.data.data() + b * in_img + size_t(g) * d.icg * nsp, nsp);
        }
      return;
    }
    const int tile = detail::tile_rows_for(k, d.ow, d.oh);
    std::vector<T> col(size_t(k) * tile * d.ow);
    std::vector<T> dcol(size_t(k) * tile * d.ow);
    for (int b = 0; b < d.batch; ++b)
      for (int g = 0; g < d.groups; ++g)
        for (int row0 = 0; row0 < d.oh; row0 += tile) {
          const int rows = std::min(tile, d.oh - row0);
          const int nsp = rows * d.ow;
          const T* gog = n.grad.data.data() + b * out_img + size_t(g) * d.ocg * oplane +
                         size_t(row0) * d.ow;
          if (pw.requires_grad) {
            detail::im2col(px.value.data.data() + b * in_img, d, pad, g, row0, rows, col.data());
            gemm(false, true, d.ocg, k, nsp, T(1), gog, oplane, col.data(), nsp, T(1),
                 pw.grad.data.data() + size_t(g) * d.ocg * k, k);
          }
          if (px.requires_grad) {
            gemm(true, false, k, nsp, d.ocg, T(1),
                 pw.value.data.data() + size_t(g) * d.ocg * k, k, gog, oplane, T(0), dcol.data(),
                 nsp);
            detail::col2im_add(dcol.data(), d, pad, g, row0, rows,
                               px.grad.data.data() + b * in_img);
          }
        }
  });
}

// Depthwise 3x3 convolution with symmetric padding (SDWConv). The weight is
// (C,1,3,3); stride 2 halves spatial dims (ceil).
template <typename T>
Var<T> sdw_conv(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride = 1) {
  if (w.shape().b != x.shape().c || w.shape().c != 1)
    throw ShapeMismatch("sdw_conv: weight must be (C,1,kh,kw) with C matching input");
  return conv2d(x, w, bias, stride, x.shape().c, Pad::Symmetric);
}

// ShuffleNet channel permutation: output channel i reads input channel
// (i mod g)*(C/g) + i/g. Pure permutation; composing with a (C/g)-shuffle
// restores the identity.
template <typename T>
Var<T> channel_shuffle(const Var<T>& x, int g) {
  const Shape s = x.shape();
  if (g < 1 || s.c % g != 0)
    throw IndivisibleChannels("channel_shuffle: " + std::to_string(g) +
                              " does not divide C=" + std::to_string(s.c));
  const int cpg = s.c / g;
  const size_t plane = size_t(s.h) * s.w;
  Tensor<T> out(s);
  for (int b = 0; b < s.b; ++b)
    for (int i = 0; i < s.c; ++i) {
      const int src_c = (i % g) * cpg + i / g;
      const T* src = x.value().data.data() + (size_t(b) * s.c + src_c) * plane;
      T* dst = out.data.data() + (size_t(b) * s.c + i) * plane;
      std::copy(src, src + plane, dst);
    }
  return detail::make_op<T>(std::move(out), {x}, [g, cpg, plane](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const Shape s = p.value.shape;
    for (int b = 0; b < s.b; ++b)
      for (int i = 0; i < s.c; ++i) {
        const int src_c = (i % g) * cpg + i / g;
        const T* gsrc = n.grad.data.data() + (size_t(b) * s.c + i) * plane;
        T* gdst = p.grad.data.data() + (size_t(b) * s.c + src_c) * plane;
        for (size_t j = 0; j < plane; ++j) gdst[j] += gsrc[j];
      }
  });
}

// 3x3 stride-2 average pool with symmetric padding; ceil(H/2) x ceil(W/2).
template <typename T>
Var<T> avg_pool_3x3_s2(const Var<T>& x) {
  const Shape s = x.shape();
  const int oh = (s.h + 2 - 3) / 2 + 1;
  const int ow = (s.w + 2 - 3) / 2 + 1;
  Tensor<T> out(s.b, s.c, oh, ow);
  const size_t plane = size_t(s.h) * s.w;
  const size_t oplane = size_t(oh) * ow;
  const T inv9 = T(1) / T(9);
  for (int bc = 0; bc < s.b * s.c; ++bc) {
    const T* src = x.value().data.data() + size_t(bc) * plane;
    T* dst = out.data.data() + size_t(bc) * oplane;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T acc = T(0);
        for (int ky = -1; ky <= 1; ++ky) {
          const int sy = detail::reflect_index(oy * 2 + ky, s.h);
          for (int kx = -1; kx <= 1; ++kx) {
            const int sx = detail::reflect_index(ox * 2 + kx, s.w);
            acc += src[size_t(sy) * s.w + sx];
          }
        }
        *dst++ = acc * inv9;
      }
  }
  return detail::make_op<T>(std::move(out), {x}, [plane, oplane, oh, ow](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const Shape s = p.value.shape;
    const T inv9 = T(1) / T(9);
    for (int bc = 0; bc < s.b * s.c; ++bc) {
      const T* g = n.grad.data.data() + size_t(bc) * oplane;
      T* dst = p.grad.data.data() + size_t(bc) * plane;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const T gv = g[size_t(oy) * ow + ox] * inv9;
          for (int ky = -1; ky <= 1; ++ky) {
            const int sy = detail::reflect_index(oy * 2 + ky, s.h);
            for (int kx = -1; kx <= 1; ++kx) {
              const int sx = detail::reflect_index(ox * 2 + kx, s.w);
              dst[size_t(sy) * s.w + sx] += gv;
            }
          }
        }
    }
  });
}

// Adaptive average pooling to (oh, ow); cell (i,j) averages the input region
// [floor(i*H/oh), ceil((i+1)*H/oh)) x [floor(j*W/ow), ceil((j+1)*W/ow)).
template <typename T>
Var<T> adaptive_avg_pool(const Var<T>& x, int oh, int ow) {
  const Shape s = x.shape();
  if (oh > s.h || ow > s.w)
    throw LevelTooLarge("adaptive_avg_pool: target " + std::to_string(oh) + "x" +
                        std::to_string(ow) + " exceeds input " + std::to_string(s.h) + "x" +
                        std::to_string(s.w));
  Tensor<T> out(s.b, s.c, oh, ow);
  const size_t plane = size_t(s.h) * s.w;
  const size_t oplane = size_t(oh) * ow;
  for (int bc = 0; bc < s.b * s.c; ++bc) {
    const T* src = x.value().data.data() + size_t(bc) * plane;
    T* dst = out.data.data() + size_t(bc) * oplane;
    for (int oy = 0; oy < oh; ++oy) {
      const int y0 = oy * s.h / oh, y1 = ceil_div((oy + 1) * s.h, oh);
      for (int ox = 0; ox < ow; ++ox) {
        const int x0 = ox * s.w / ow, x1 = ceil_div((ox + 1) * s.w, ow);
        T acc = T(0);
        for (int y = y0; y < y1; ++y)
          for (int x_ = x0; x_ < x1; ++x_) acc += src[size_t(y) * s.w + x_];
        *dst++ = acc / T((y1 - y0) * (x1 - x0));
      }
    }
  }
  return detail::make_op<T>(std::move(out), {x}, [plane, oplane, oh, ow](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const Shape s = p.value.shape;
    for (int bc = 0; bc < s.b * s.c; ++bc) {
      const T* g = n.grad.data.data() + size_t(bc) * oplane;
      T* dst = p.grad.data.data() + size_t(bc) * plane;
      for (int oy = 0; oy < oh; ++oy) {
        const int y0 = oy * s.h / oh, y1 = ceil_div((oy + 1) * s.h, oh);
        for (int ox = 0; ox < ow; ++ox) {
          const int x0 = ox * s.w / ow, x1 = ceil_div((ox + 1) * s.w, ow);
          const T gv = g[size_t(oy) * ow + ox] / T((y1 - y0) * (x1 - x0));
          for (int y = y0; y < y1; ++y)
            for (int x_ = x0; x_ < x1; ++x_) dst[size_t(y) * s.w + x_] += gv;
        }
      }
    }
  });
}

// Bilinear resize to (oh, ow), half-pixel centers, edges clamped.
template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int oh, int ow) {
  const Shape s = x.shape();
  Tensor<T> out(s.b, s.c, oh, ow);
  const size_t plane = size_t(s.h) * s.w;
  const size_t oplane = size_t(oh) * ow;

  const std::vector<detail::Lerp<T>> ys = detail::bilinear_axis<T>(oh, s.h);
  const std::vector<detail::Lerp<T>> xs = detail::bilinear_axis<T>(ow, s.w);

  // separable: expand every input row horizontally once, then blend row pairs
  std::vector<T> hrows(size_t(s.h) * ow);
  for (int bc = 0; bc < s.b * s.c; ++bc) {
    const T* src = x.value().data.data() + size_t(bc) * plane;
    T* dst = out.data.data() + size_t(bc) * oplane;
    for (int y = 0; y < s.h; ++y) {
      const T* srow = src + size_t(y) * s.w;
      T* hrow = hrows.data() + size_t(y) * ow;
      for (int ox = 0; ox < ow; ++ox) {
        const auto& lx = xs[size_t(ox)];
        const T a = srow[lx.i0];
        hrow[ox] = a + (srow[lx.i1] - a) * lx.w1;
      }
    }
    for (int oy = 0; oy < oh; ++oy) {
      const auto& ly = ys[size_t(oy)];
      const T* top = hrows.data() + size_t(ly.i0) * ow;
      const T* bot = hrows.data() + size_t(ly.i1) * ow;
      const T wy = ly.w1;
      T* drow = dst + size_t(oy) * ow;
      for (int ox = 0; ox < ow; ++ox) drow[ox] = top[ox] + (bot[ox] - top[ox]) * wy;
    }
  }
  return detail::make_op<T>(std::move(out), {x},
                            [plane, oplane, oh, ow, ys, xs](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const Shape s = p.value.shape;
    for (int bc = 0; bc < s.b * s.c; ++bc) {
      const T* g = n.grad.data.data() + size_t(bc) * oplane;
      T* dst = p.grad.data.data() + size_t(bc) * plane;
      for (int oy = 0; oy < oh; ++oy) {
        const auto& ly = ys[size_t(oy)];
        for (int ox = 0; ox < ow; ++ox) {
          const auto& lx = xs[size_t(ox)];
          const T gv = g[size_t(oy) * ow + ox];
          const T wy1 = ly.w1, wx1 = lx.w1;
          dst[size_t(ly.i0) * s.w + lx.i0] += gv * (T(1) - wy1) * (T(1) - wx1);
          dst[size_t(ly.i0) * s.w + lx.i1] += gv * (T(1) - wy1) * wx1;
          dst[size_t(ly.i1) * s.w + lx.i0] += gv * wy1 * (T(1) - wx1);
          dst[size_t(ly.i1) * s.w + lx.i1] += gv * wy1 * wx1;
        }
      }
    }
  });
}

}  // namespace derain::nn
