#pragma once
#include <map>
#include <string>
#include <vector>

#include "derain/conv_ops.hpp"
#include "derain/rng.hpp"

// The three estimators: snet (streak transmission), vnet (vapor
// transmission), anet (atmospheric light), built from grouped pointwise
// convs, symmetric depthwise convs, channel shuffles and pyramid pooling.

namespace derain::nn {

struct ArchConfig {
  int groups = 3;
  int base_channels = 12;   // total stem width; the three 5x5 stems emit a third each
  int vnet_channels = 12;
  int spp_proj = 4;         // channels each pyramid level contributes
  std::vector<int> spp_levels{1, 2, 4, 8};
  int anet_base = 16;
  float act_slope = 0.1f;

  bool operator==(const ArchConfig&) const = default;
};

inline void validate_config(const ArchConfig& c) {
  if (c.groups < 1 || c.base_channels < 3 || c.vnet_channels < 2 || c.spp_proj < 1 ||
      c.anet_base < 1)
    throw InvalidParams("arch config: non-positive width");
  if (c.base_channels % 3 != 0)
    throw IndivisibleChannels("arch config: stem width " + std::to_string(c.base_channels) +
                              " must split across 3 stems");
  if (c.base_channels % c.groups != 0)
    throw IndivisibleChannels("arch config: groups " + std::to_string(c.groups) +
                              " does not divide " + std::to_string(c.base_channels));
  if (c.vnet_channels % 2 != 0)
    throw IndivisibleChannels("arch config: vnet units are 2-grouped, width " +
                              std::to_string(c.vnet_channels) + " must be even");
  if (c.spp_levels.empty()) throw InvalidParams("arch config: no pyramid levels");
  for (size_t i = 0; i < c.spp_levels.size(); ++i) {
    if (c.spp_levels[i] < 1) throw InvalidParams("arch config: pyramid level < 1");
    if (i > 0 && c.spp_levels[i] <= c.spp_levels[i - 1])
      throw InvalidParams("arch config: pyramid levels must be strictly increasing");
  }
  if (!(c.act_slope >= 0.0f && c.act_slope < 1.0f))
    throw InvalidParams("arch config: activation slope outside [0,1)");
}

// ---------------------------------------------------------------------------

struct ParamSpec {
  std::string name;
  Shape shape;
  int fan_in;  // 0 marks a bias (zero-initialized)
};

namespace detail {

inline void push_conv(std::vector<ParamSpec>& out, const std::string& name, int oc, int icg,
                      int k) {
  out.push_back({name + ".w", Shape{oc, icg, k, k}, icg * k * k});
  out.push_back({name + ".b", Shape{1, oc, 1, 1}, 0});
}

inline void push_unit(std::vector<ParamSpec>& out, const std::string& prefix, int c, int g) {
  push_conv(out, prefix + ".p1", c, c / g, 1);
  push_conv(out, prefix + ".d1", c, 1, 3);
  push_conv(out, prefix + ".p2", c, c / g, 1);
  push_conv(out, prefix + ".d2", c, 1, 3);
  push_conv(out, prefix + ".p3", c, c / g, 1);
}

}  // namespace detail

inline std::vector<ParamSpec> param_specs(const std::string& arch_id, const ArchConfig& cfg) {
  validate_config(cfg);
  std::vector<ParamSpec> out;
  if (arch_id == "snet") {
    const int c = cfg.base_channels, g = cfg.groups;
    for (int i = 0; i < 3; ++i)
      detail::push_conv(out, "stem" + std::to_string(i), c / 3, 3, 5);
    detail::push_unit(out, "enc1", c, g);
    detail::push_unit(out, "enc2", 2 * c, g);
    for (int i = 1; i <= 3; ++i) detail::push_unit(out, "mid" + std::to_string(i), 4 * c, g);
    detail::push_conv(out, "dec1", 2 * c, 4 * c, 3);
    detail::push_conv(out, "dec2", c, 2 * c, 3);
    detail::push_conv(out, "head", 1, c, 3);
  } else if (arch_id == "vnet") {
    const int c = cfg.vnet_channels;
    detail::push_conv(out, "in", c, 4, 3);
    detail::push_unit(out, "unit1", c, 2);
    detail::push_unit(out, "unit2", c, 2);
    for (size_t i = 0; i < cfg.spp_levels.size(); ++i)
      detail::push_conv(out, "spp" + std::to_string(i), cfg.spp_proj, c, 1);
    detail::push_conv(out, "fuse1", c, c + int(cfg.spp_levels.size()) * cfg.spp_proj, 3);
    detail::push_conv(out, "fuse2", 1, c, 3);
  } else if (arch_id == "anet") {
    const int c = cfg.anet_base;
    detail::push_conv(out, "c1", c, 3, 3);
    detail::push_conv(out, "c2", 2 * c, c, 3);
    detail::push_conv(out, "c3", 4 * c, 2 * c, 3);
    detail::push_conv(out, "out", 3, 4 * c, 1);
  } else {
    throw UnknownArch("unknown architecture '" + arch_id + "'");
  }
  return out;
}

template <typename T>
struct ParamSet {
  std::string arch_id;
  ArchConfig cfg;
  uint64_t init_seed = 0;
  std::map<std::string, Var<T>> tensors;  // ordered: optimizer/serialization walk this

  const Var<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw NameMismatch(arch_id + ": no parameter named '" + name + "'");
    return it->second;
  }

  int64_t count() const {
    int64_t n = 0;
    for (const auto& [_, v] : tensors) n += v.value().numel();
    return n;
  }

  // Deep copy. Var copies share their underlying node, so a plain ParamSet
  // copy would alias every tensor with the original; clone() materializes
  // fresh leaves and is what anything that mutates parameters should hold.
  ParamSet clone() const {
    ParamSet out;
    out.arch_id = arch_id;
    out.cfg = cfg;
    out.init_seed = init_seed;
    for (const auto& [name, v] : tensors) {
      Tensor<T> t = v.value();
      out.tensors.emplace(name, Var<T>::leaf(std::move(t), v.requires_grad()));
    }
    return out;
  }
};

// Fan-in-scaled uniform init: U(-a, a) with a = sqrt(6/fan_in), so the
// sample variance is 2/fan_in. Biases start at zero. Each tensor gets its own
// stream keyed on (seed, arch/name), so widths can change without reshuffling
// unrelated layers.
template <typename T>
ParamSet<T> init_params(const std::string& arch_id, const ArchConfig& cfg, uint64_t seed) {
  ParamSet<T> p;
  p.arch_id = arch_id;
  p.cfg = cfg;
  p.init_seed = seed;
  for (const ParamSpec& spec : param_specs(arch_id, cfg)) {
    Tensor<T> t(spec.shape);
    if (spec.fan_in > 0) {
      Rng rng(split_seed(seed, hash_name(arch_id + "/" + spec.name)));
      const double a = std::sqrt(6.0 / spec.fan_in);
      for (T& v : t.data) v = T(rng.uniform(-a, a));
    }
    p.tensors.emplace(spec.name, Var<T>::leaf(std::move(t), true));
  }
  return p;
}

template <typename T>
void require_arch(const ParamSet<T>& p, const std::string& want) {
  if (p.arch_id != want)
    throw ArchMismatch("expected '" + want + "' parameters, got '" + p.arch_id + "'");
}

// ---------------------------------------------------------------------------

template <typename T>
struct ShuffleUnitParams {
  Var<T> p1w, p1b, d1w, d1b, p2w, p2b, d2w, d2b, p3w, p3b;
};

template <typename T>
ShuffleUnitParams<T> unit_params(const ParamSet<T>& p, const std::string& prefix) {
  return {p.at(prefix + ".p1.w"), p.at(prefix + ".p1.b"), p.at(prefix + ".d1.w"),
          p.at(prefix + ".d1.b"), p.at(prefix + ".p2.w"), p.at(prefix + ".p2.b"),
          p.at(prefix + ".d2.w"), p.at(prefix + ".d2.b"), p.at(prefix + ".p3.w"),
          p.at(prefix + ".p3.b")};
}

namespace detail {

// With no normalization layers, the convs that are not followed by an
// activation roughly double second moments at init; left alone, the stacked
// units push the head logits deep into sigmoid saturation (dead gradients
// from the first step). The fixed branch scale keeps trunk variance bounded
// without touching the parameter distribution.
template <typename T>
inline constexpr T kBranchScale = T(1) / T(3);

template <typename T>
Var<T> unit_main(const Var<T>& x, const ShuffleUnitParams<T>& u, int g, T slope,
                 int first_stride) {
  Var<T> y = leaky_relu(conv2d(x, u.p1w, u.p1b, 1, g), slope);
  y = channel_shuffle(y, g);
  y = sdw_conv(y, u.d1w, u.d1b, first_stride);
  y = leaky_relu(conv2d(y, u.p2w, u.p2b, 1, g), slope);
  y = channel_shuffle(y, g);
  y = sdw_conv(y, u.d2w, u.d2b, 1);
  y = conv2d(y, u.p3w, u.p3b, 1, g);
  return affine(y, kBranchScale<T>, T(0));
}
}  // namespace detail

// Residual unit; spatial size and channel count preserved. No activation
// after the residual add.
template <typename T>
Var<T> shuffle_unit_add(const Var<T>& x, const ShuffleUnitParams<T>& u, int g, T slope) {
  return add(detail::unit_main(x, u, g, slope, 1), x);
}

// Downsampling unit: main branch strides once, shortcut is a 3x3 stride-2
// average pool; concatenated output doubles the channels ([main | shortcut]).
template <typename T>
Var<T> shuffle_unit_cat(const Var<T>& x, const ShuffleUnitParams<T>& u, int g, T slope) {
  Var<T> main_ = detail::unit_main(x, u, g, slope, 2);
  Var<T> shortcut = avg_pool_3x3_s2(x);
  return concat_channels(std::vector<Var<T>>{main_, shortcut});
}

template <typename T>
struct SppParams {
  std::vector<Var<T>> w, b;
};

template <typename T>
SppParams<T> spp_params(const ParamSet<T>& p, size_t levels) {
  SppParams<T> s;
  for (size_t i = 0; i < levels; ++i) {
    s.w.push_back(p.at("spp" + std::to_string(i) + ".w"));
    s.b.push_back(p.at("spp" + std::to_string(i) + ".b"));
  }
  return s;
}

// Pyramid pooling: each level pools to lxl, projects through a 1x1 conv and
// is resized back; the input rides along in the concat, so the output has
// C + levels*proj channels at the input resolution.
template <typename T>
Var<T> spp(const Var<T>& x, const std::vector<int>& levels, const SppParams<T>& p, T slope) {
  if (p.w.size() != levels.size() || p.b.size() != levels.size())
    throw ShapeMismatch("spp: params for " + std::to_string(p.w.size()) + " levels, want " +
                        std::to_string(levels.size()));
  const int h = x.shape().h, w = x.shape().w;
  std::vector<Var<T>> feats{x};
  for (size_t i = 0; i < levels.size(); ++i) {
    Var<T> pooled = adaptive_avg_pool(x, levels[i], levels[i]);
    pooled = leaky_relu(conv2d(pooled, p.w[i], p.b[i]), slope);
    feats.push_back(upsample_bilinear(pooled, h, w));
  }
  return concat_channels(feats);
}

// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void require_finite_output(const Var<T>& v, const char* where) {
  if (!v.value().all_finite())
    throw NonFiniteActivation(std::string(where) + ": non-finite activation");
}
}  // namespace detail

// Streak transmission map in (0,1), same spatial size as the input.
template <typename T>
Var<T> snet_forward(const Var<T>& image, const ParamSet<T>& p) {
  require_arch(p, "snet");
  const Shape s = image.shape();
  if (s.c != 3) throw ShapeMismatch("snet: expected 3-channel input, got " + s.str());
  if (s.h % 4 != 0 || s.w % 4 != 0)
    throw ShapeMismatch("snet: spatial dims must be multiples of 4, got " + s.str());
  const int g = p.cfg.groups;
  const T slope = T(p.cfg.act_slope);

  std::vector<Var<T>> stems;
  for (int i = 0; i < 3; ++i) {
    const std::string n = "stem" + std::to_string(i);
    stems.push_back(conv2d(image, p.at(n + ".w"), p.at(n + ".b")));
  }
  Var<T> y = leaky_relu(concat_channels(stems), slope);

  y = shuffle_unit_cat(y, unit_params(p, "enc1"), g, slope);
  y = shuffle_unit_cat(y, unit_params(p, "enc2"), g, slope);
  for (int i = 1; i <= 3; ++i)
    y = shuffle_unit_add(y, unit_params(p, "mid" + std::to_string(i)), g, slope);

  y = upsample_bilinear(y, s.h / 2, s.w / 2);
  y = leaky_relu(conv2d(y, p.at("dec1.w"), p.at("dec1.b")), slope);
  y = upsample_bilinear(y, s.h, s.w);
  y = leaky_relu(conv2d(y, p.at("dec2.w"), p.at("dec2.b")), slope);

  Var<T> ts = sigmoid(conv2d(y, p.at("head.w"), p.at("head.b")));
  detail::require_finite_output(ts, "snet");
  return ts;
}

// Vapor transmission map, gated so that ts + tv <= 1 pointwise by
// construction: tv = sigma * (1 - ts).
template <typename T>
Var<T> vnet_forward(const Var<T>& image, const Var<T>& ts, const ParamSet<T>& p) {
  require_arch(p, "vnet");
  const Shape s = image.shape();
  if (s.c != 3) throw ShapeMismatch("vnet: expected 3-channel image, got " + s.str());
  if (!(ts.shape() == Shape{s.b, 1, s.h, s.w}))
    throw ShapeMismatch("vnet: transmission map " + ts.shape().str() + " does not match image " +
                        s.str());
  const T slope = T(p.cfg.act_slope);

  Var<T> y = concat_channels(std::vector<Var<T>>{image, ts});
  y = leaky_relu(conv2d(y, p.at("in.w"), p.at("in.b")), slope);
  y = shuffle_unit_add(y, unit_params(p, "unit1"), 2, slope);
  y = shuffle_unit_add(y, unit_params(p, "unit2"), 2, slope);
  y = spp(y, p.cfg.spp_levels, spp_params(p, p.cfg.spp_levels.size()), slope);
  y = leaky_relu(conv2d(y, p.at("fuse1.w"), p.at("fuse1.b")), slope);
  Var<T> sig = sigmoid(conv2d(y, p.at("fuse2.w"), p.at("fuse2.b")));

  Var<T> tv = mul(sig, affine(ts, T(-1), T(1)));
  detail::require_finite_output(tv, "vnet");
  return tv;
}

// Global atmospheric light per image, a 3-vector in (0,1) shaped (B,3,1,1).
template <typename T>
Var<T> anet_forward(const Var<T>& image, const ParamSet<T>& p) {
  require_arch(p, "anet");
  if (image.shape().c != 3)
    throw ShapeMismatch("anet: expected 3-channel input, got " + image.shape().str());
  const T slope = T(p.cfg.act_slope);
  Var<T> y = leaky_relu(conv2d(image, p.at("c1.w"), p.at("c1.b"), 2), slope);
  y = leaky_relu(conv2d(y, p.at("c2.w"), p.at("c2.b"), 2), slope);
  y = leaky_relu(conv2d(y, p.at("c3.w"), p.at("c3.b"), 2), slope);
  y = adaptive_avg_pool(y, 1, 1);
  Var<T> a = sigmoid(conv2d(y, p.at("out.w"), p.at("out.b")));
  detail::require_finite_output(a, "anet");
  return a;
}

// (B,3,1,1) atmosphere vector replicated over h x w.
template <typename T>
Var<T> broadcast_atmosphere(const Var<T>& a, int h, int w) {
  if (a.shape().c != 3 || a.shape().h != 1 || a.shape().w != 1)
    throw ShapeMismatch("broadcast_atmosphere: expected (B,3,1,1), got " + a.shape().str());
  return broadcast_spatial(a, h, w);
}

}  // namespace derain::nn
