#pragma once
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "derain/manifest.hpp"
#include "derain/networks.hpp"
#include "derain/rain_model.hpp"
#include "derain/rng.hpp"

// Staged training: atmosphere-label extraction, the three losses, Adam, and
// the three-stage protocol (atmosphere pretraining, streak pretraining with
// the vapor term held at zero, then joint training of all three networks).

namespace derain {

// ---------------------------------------------------------------------------
// Configuration and reports

struct TrainConfig {
  int patch = 64;  // crop size, must be a multiple of 4
  int batch = 8;
  int epochs_anet = 10;
  int epochs_snet = 10;
  int epochs_joint = 20;
  double lr_anet_pre = 1e-3;
  double lr_main = 1e-3;
  double lr_finetune = 1e-6;  // 0 freezes the fine-tuned networks
  double lambda1 = 0.01;      // gradient-difference weight
  double lambda2 = 1.0;       // L1 weight
  float eps = kDefaultTransmissionFloor;
  uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

inline void validate(const TrainConfig& c) {
  if (c.patch < 16 || c.patch % 4 != 0)
    throw InvalidParams("patch must be at least 16 and divisible by 4");
  if (c.batch < 1) throw InvalidParams("batch must be positive");
  if (c.epochs_anet < 0 || c.epochs_snet < 0 || c.epochs_joint < 0)
    throw InvalidParams("epoch counts must be non-negative");
  if (!(c.lr_anet_pre > 0.0) || !(c.lr_main > 0.0))
    throw InvalidParams("primary learning rates must be positive");
  if (c.lr_finetune < 0.0) throw InvalidParams("fine-tune learning rate must be >= 0");
  if (c.lambda1 < 0.0 || c.lambda2 < 0.0) throw InvalidParams("loss weights must be >= 0");
  if (!(c.eps > 0.0f && c.eps <= 0.5f))
    throw InvalidParams("transmission floor must lie in (0, 0.5]");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0))
    throw InvalidParams("adam betas must lie in [0,1)");
  if (!(c.adam_eps > 0.0)) throw InvalidParams("adam epsilon must be positive");
}

struct StageReport {
  std::string stage;
  std::vector<double> epoch_loss;  // mean loss per epoch
  int skipped_entries = 0;         // entries without usable rain pixels
  double wall_seconds = 0.0;       // not serialized; see to_json note
};

// Invoked after every completed epoch with (stage name, epoch index, mean
// loss); lets callers stream progress without the stages knowing about any
// output channel.
using EpochCallback = std::function<void(const std::string&, int, double)>;

struct TrainReport {
  std::vector<StageReport> stages;
  std::vector<std::string> checkpoint_paths;
  uint64_t seed = 0;
  bool anet_pretrained = false;  // set when stage outputs feed later stages
  bool snet_pretrained = false;
  double wall_seconds = 0.0;
};

// Wall-clock fields are deliberately left out of the serialized form: reports
// from identical (data, config, seed) runs must be byte-identical, and timing
// is the one quantity that never is. Timings go to the progress log instead.
inline void to_json(nlohmann::json& j, const StageReport& s) {
  j = nlohmann::json{{"stage", s.stage},
                     {"epoch_loss", s.epoch_loss},
                     {"skipped_entries", s.skipped_entries}};
}
inline void from_json(const nlohmann::json& j, StageReport& s) {
  s.stage = j.at("stage").get<std::string>();
  s.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
  s.skipped_entries = j.at("skipped_entries").get<int>();
}
inline void to_json(nlohmann::json& j, const TrainReport& r) {
  j = nlohmann::json{{"stages", r.stages},
                     {"checkpoints", r.checkpoint_paths},
                     {"seed", r.seed},
                     {"anet_pretrained", r.anet_pretrained},
                     {"snet_pretrained", r.snet_pretrained}};
}
inline void from_json(const nlohmann::json& j, TrainReport& r) {
  r.stages = j.at("stages").get<std::vector<StageReport>>();
  r.checkpoint_paths = j.at("checkpoints").get<std::vector<std::string>>();
  r.seed = j.at("seed").get<uint64_t>();
  r.anet_pretrained = j.at("anet_pretrained").get<bool>();
  r.snet_pretrained = j.at("snet_pretrained").get<bool>();
}

// ---------------------------------------------------------------------------
// Rain-pixel detection and atmosphere labels

inline float luminance(float r, float g, float b) {
  return 0.299f * r + 0.587f * g + 0.114f * b;
}

// Bright-pixel heuristic: luminance at or above the 99.5th percentile AND at
// least 0.1 above the 11x11 local mean. A provided mask (synthetic data)
// bypasses the heuristic entirely.
inline Mask detect_rain_pixels(const Image& im, const Mask* provided = nullptr) {
  if (provided) {
    if (provided->height != im.height || provided->width != im.width)
      throw DimensionMismatch("detect_rain_pixels: mask dimensions differ from image");
    return *provided;
  }
  const int h = im.height, w = im.width;
  const size_t n = im.pixel_count();
  std::vector<float> lum(n);
  for (size_t i = 0; i < n; ++i)
    lum[i] = luminance(im.data[i * 3], im.data[i * 3 + 1], im.data[i * 3 + 2]);

  std::vector<float> sorted(lum);
  const size_t k = size_t(std::floor(0.995 * double(n - 1)));
  std::nth_element(sorted.begin(), sorted.begin() + long(k), sorted.end());
  const float thresh = sorted[k];

  // Integral image for the clamped 11x11 window mean.
  std::vector<double> integ(size_t(h + 1) * (w + 1), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      integ[size_t(y + 1) * (w + 1) + (x + 1)] = double(lum[size_t(y) * w + x]) +
                                                 integ[size_t(y) * (w + 1) + (x + 1)] +
                                                 integ[size_t(y + 1) * (w + 1) + x] -
                                                 integ[size_t(y) * (w + 1) + x];
  Mask out(h, w);
  constexpr int kR = 5;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int y0 = std::max(0, y - kR), y1 = std::min(h - 1, y + kR);
      const int x0 = std::max(0, x - kR), x1 = std::min(w - 1, x + kR);
      const double sum = integ[size_t(y1 + 1) * (w + 1) + (x1 + 1)] -
                         integ[size_t(y0) * (w + 1) + (x1 + 1)] -
                         integ[size_t(y1 + 1) * (w + 1) + x0] +
                         integ[size_t(y0) * (w + 1) + x0];
      const double mean = sum / (double(y1 - y0 + 1) * double(x1 - x0 + 1));
      const float l = lum[size_t(y) * w + x];
      out.set(y, x, l >= thresh && double(l) - mean >= 0.1);
    }
  return out;
}

// RGB of the rain pixel with maximal luminance; first occurrence in row-major
// order wins ties.
inline AtmosphereLight extract_atmosphere_label(const Image& im, const Mask& rain) {
  if (rain.height != im.height || rain.width != im.width)
    throw DimensionMismatch("extract_atmosphere_label: mask dimensions differ");
  int best = -1;
  float best_lum = 0.0f;
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) {
      if (!rain.at(y, x)) continue;
      const float l =
          luminance(im.at(y, x, 0), im.at(y, x, 1), im.at(y, x, 2));
      if (best < 0 || l > best_lum) {
        best = y * im.width + x;
        best_lum = l;
      }
    }
  if (best < 0) throw NoRainPixels("no rain pixels available for atmosphere label");
  const int y = best / im.width, x = best % im.width;
  return AtmosphereLight(im.at(y, x, 0), im.at(y, x, 1), im.at(y, x, 2));
}

// ---------------------------------------------------------------------------
// Losses (autodiff expressions)

// Mean over the batch of the squared Euclidean distance between samples.
template <typename T>
nn::Var<T> loss_anet(const nn::Var<T>& pred, const nn::Var<T>& label) {
  if (!(pred.shape() == label.shape()))
    throw ShapeMismatch("loss_anet: " + pred.shape().str() + " vs " + label.shape().str());
  auto d = nn::sub(pred, label);
  auto sq = nn::mul(d, d);
  const T per_sample = T(sq.value().numel() / size_t(sq.shape().b));
  return nn::affine(nn::mean_all(sq), per_sample, T(0));
}

// Per-element mean squared error (batch mean of the per-pixel-mean error).
template <typename T>
nn::Var<T> loss_snet(const nn::Var<T>& j_hat, const nn::Var<T>& j) {
  if (!(j_hat.shape() == j.shape()))
    throw ShapeMismatch("loss_snet: " + j_hat.shape().str() + " vs " + j.shape().str());
  auto d = nn::sub(j_hat, j);
  return nn::mean_all(nn::mul(d, d));
}

template <typename T>
std::pair<nn::Var<T>, nn::Var<T>> image_gradient(const nn::Var<T>& x) {
  return {nn::grad_x(x), nn::grad_y(x)};
}

// lambda1 * mean||grad(J_hat) - grad(J)||^2 + lambda2 * mean|J_hat - J|; the
// gradient mean runs over both difference directions as well.
template <typename T>
nn::Var<T> loss_total(const nn::Var<T>& j_hat, const nn::Var<T>& j, T lambda1, T lambda2) {
  if (!(j_hat.shape() == j.shape()))
    throw ShapeMismatch("loss_total: " + j_hat.shape().str() + " vs " + j.shape().str());
  auto gx = nn::sub(nn::grad_x(j_hat), nn::grad_x(j));
  auto gy = nn::sub(nn::grad_y(j_hat), nn::grad_y(j));
  auto gterm = nn::affine(
      nn::add(nn::mean_all(nn::mul(gx, gx)), nn::mean_all(nn::mul(gy, gy))), T(0.5), T(0));
  auto l1 = nn::mean_all(nn::abs_val(nn::sub(j_hat, j)));
  return nn::add(nn::affine(gterm, lambda1, T(0)), nn::affine(l1, lambda2, T(0)));
}

// Differentiable background recovery: J = (I - (1-T')A) / T' with
// T' = clamp(Ts (+ Tv), eps, 1). The output is left unclamped so the loss
// keeps its gradient when the prediction overshoots [0,1].
template <typename T>
nn::Var<T> recover_var(const nn::Var<T>& rainy, const nn::Var<T>& ts, const nn::Var<T>* tv,
                       const nn::Var<T>& a, T eps) {
  auto total = tv ? nn::add(ts, *tv) : ts;
  auto tcl = nn::clamp(total, eps, T(1));
  auto t3 = nn::expand_channels(tcl, 3);
  auto af = nn::broadcast_spatial(a, rainy.shape().h, rainy.shape().w);
  auto num = nn::sub(rainy, nn::mul(nn::affine(t3, T(-1), T(1)), af));
  return nn::div(num, t3);
}

// ---------------------------------------------------------------------------
// Image / tensor bridging (NCHW)

inline nn::Tensor<float> to_tensor(const Image& im) {
  nn::Tensor<float> t(1, 3, im.height, im.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) t.at(0, c, y, x) = im.at(y, x, c);
  return t;
}

inline nn::Tensor<float> to_tensor(const TransmissionMap& m) {
  nn::Tensor<float> t(1, 1, m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) t.at(0, 0, y, x) = m.at(y, x);
  return t;
}

// Batch row `b` of a (B,3,H,W) tensor as an Image; values are copied verbatim.
inline Image to_image(const nn::Tensor<float>& t, int b = 0) {
  if (t.shape.c != 3 || b < 0 || b >= t.shape.b)
    throw ShapeMismatch("to_image: need a (B,3,H,W) tensor and a valid batch row");
  Image im(t.shape.h, t.shape.w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < t.shape.h; ++y)
      for (int x = 0; x < t.shape.w; ++x) im.at(y, x, c) = t.at(b, c, y, x);
  return im;
}

inline TransmissionMap to_map(const nn::Tensor<float>& t, int b = 0) {
  if (t.shape.c != 1 || b < 0 || b >= t.shape.b)
    throw ShapeMismatch("to_map: need a (B,1,H,W) tensor and a valid batch row");
  TransmissionMap m(t.shape.h, t.shape.w);
  for (int y = 0; y < t.shape.h; ++y)
    for (int x = 0; x < t.shape.w; ++x) m.at(y, x) = t.at(b, 0, y, x);
  return m;
}

inline AtmosphereLight to_atmosphere(const nn::Tensor<float>& t, int b = 0) {
  if (t.shape.c != 3 || t.shape.h != 1 || t.shape.w != 1 || b < 0 || b >= t.shape.b)
    throw ShapeMismatch("to_atmosphere: need a (B,3,1,1) tensor and a valid batch row");
  return AtmosphereLight(t.at(b, 0, 0, 0), t.at(b, 1, 0, 0), t.at(b, 2, 0, 0));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::map<std::string, nn::Tensor<float>> m, v;
  long step = 0;
};

// Standard bias-corrected Adam over an explicit gradient map.
inline void adam_step(nn::ParamSet<float>& p,
                      const std::map<std::string, nn::Tensor<float>>& grads, AdamState& st,
                      double lr, double beta1, double beta2, double eps_opt) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(beta2, double(st.step));
  for (auto& [name, var] : p.tensors) {
    const auto it = grads.find(name);
    if (it == grads.end())
      throw ShapeMismatch("adam_step: missing gradient for '" + name + "'");
    const nn::Tensor<float>& g = it->second;
    nn::Tensor<float>& value = var.node()->value;
    if (!(g.shape == value.shape))
      throw ShapeMismatch("adam_step: gradient shape mismatch for '" + name + "'");
    nn::Tensor<float>& m = st.m[name];
    nn::Tensor<float>& v = st.v[name];
    if (m.data.empty()) m = nn::Tensor<float>(value.shape);
    if (v.data.empty()) v = nn::Tensor<float>(value.shape);
    for (size_t i = 0; i < value.data.size(); ++i) {
      const double gi = g.data[i];
      const double mi = beta1 * m.data[i] + (1.0 - beta1) * gi;
      const double vi = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
      m.data[i] = float(mi);
      v.data[i] = float(vi);
      value.data[i] -=
          float(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps_opt));
    }
  }
}

// Convenience overload: pulls gradients accumulated on the ParamSet's Vars.
inline void adam_step(nn::ParamSet<float>& p, AdamState& st, double lr, double beta1,
                      double beta2, double eps_opt) {
  std::map<std::string, nn::Tensor<float>> grads;
  for (const auto& [name, var] : p.tensors) grads.emplace(name, var.grad());
  adam_step(p, grads, st, lr, beta1, beta2, eps_opt);
}

// ---------------------------------------------------------------------------
// Data plumbing shared by the stages

namespace detail {

struct PairSet {
  std::vector<Image> rainy, clean;
  std::vector<Mask> mask;       // empty Mask when the entry has none
  std::vector<bool> has_mask;
};

inline PairSet load_pairs(const DatasetManifest& m, const std::string& base_dir) {
  namespace fs = std::filesystem;
  PairSet out;
  for (const ManifestEntry& e : m.entries) {
    Image r = read_png_rgb8((fs::path(base_dir) / e.rainy_path).string());
    Image c = read_png_rgb8((fs::path(base_dir) / e.clean_path).string());
    if (!same_dims(r, c))
      throw IoError("training pair '" + e.rainy_path + "' has mismatched dimensions");
    if (!e.mask_path.empty()) {
      const TransmissionMap mm =
          read_png_gray16((fs::path(base_dir) / e.mask_path).string());
      if (!same_dims(r, mm))
        throw IoError("mask '" + e.mask_path + "' has mismatched dimensions");
      Mask msk(mm.height, mm.width);
      for (int y = 0; y < mm.height; ++y)
        for (int x = 0; x < mm.width; ++x) msk.set(y, x, mm.at(y, x) > 0.5f);
      out.mask.push_back(std::move(msk));
      out.has_mask.push_back(true);
    } else {
      out.mask.emplace_back();
      out.has_mask.push_back(false);
    }
    out.rainy.push_back(std::move(r));
    out.clean.push_back(std::move(c));
  }
  return out;
}

// Copies an aligned random crop of a pair into row `k` of the batch tensors.
inline void fill_patch(const Image& rainy, const Image& clean, int patch, Rng& rng, int k,
                       nn::Tensor<float>& r_dst, nn::Tensor<float>& c_dst) {
  if (rainy.height < patch || rainy.width < patch)
    throw TooSmall("training image smaller than the configured patch size");
  const int oy = int(rng.below(uint64_t(rainy.height - patch + 1)));
  const int ox = int(rng.below(uint64_t(rainy.width - patch + 1)));
  const size_t plane = size_t(patch) * patch;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < patch; ++y)
      for (int x = 0; x < patch; ++x) {
        const size_t di = (size_t(k) * 3 + c) * plane + size_t(y) * patch + x;
        r_dst.data[di] = rainy.at(oy + y, ox + x, c);
        c_dst.data[di] = clean.at(oy + y, ox + x, c);
      }
}

inline void check_finite_loss(double loss, const char* stage, int epoch) {
  if (!std::isfinite(loss))
    throw NonFiniteActivation(std::string(stage) + ": non-finite loss at epoch " +
                              std::to_string(epoch));
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: atmosphere network pretraining

// Trains ANet to predict the per-image atmosphere label extracted from the
// brightest rain pixel. Entries with no detectable rain pixels are skipped
// and counted in the report.
inline std::pair<nn::ParamSet<float>, StageReport> pretrain_anet(
    const DatasetManifest& data, const std::string& base_dir, const nn::ArchConfig& arch,
    const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  validate(cfg);
  nn::validate_config(arch);
  const auto t0 = std::chrono::steady_clock::now();
  StageReport rep;
  rep.stage = "anet";

  const detail::PairSet pairs = detail::load_pairs(data, base_dir);
  std::vector<size_t> usable;
  std::vector<AtmosphereLight> labels(pairs.rainy.size());
  for (size_t i = 0; i < pairs.rainy.size(); ++i) {
    const Mask rain = detect_rain_pixels(
        pairs.rainy[i], pairs.has_mask[i] ? &pairs.mask[i] : nullptr);
    try {
      labels[i] = extract_atmosphere_label(pairs.rainy[i], rain);
      usable.push_back(i);
    } catch (const NoRainPixels&) {
      ++rep.skipped_entries;
    }
  }

  nn::ParamSet<float> anet = nn::init_params<float>(
      "anet", arch, split_seed(cfg.seed, hash_name("anet_init")));
  if (cfg.epochs_anet == 0) {
    rep.wall_seconds = detail::seconds_since(t0);
    return {std::move(anet), std::move(rep)};
  }
  if (usable.empty())
    throw NoUsableSamples("no training entries with detectable rain pixels");

  AdamState adam;
  const uint64_t stage_seed = split_seed(cfg.seed, hash_name("stage_anet"));
  for (int epoch = 0; epoch < cfg.epochs_anet; ++epoch) {
    Rng rng(split_seed(stage_seed, uint64_t(epoch)));
    std::vector<size_t> order = usable;
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch)) {
      const int nb = int(std::min(order.size() - start, size_t(cfg.batch)));
      nn::Tensor<float> rb(nb, 3, cfg.patch, cfg.patch);
      nn::Tensor<float> cb(nb, 3, cfg.patch, cfg.patch);
      nn::Tensor<float> lb(nb, 3, 1, 1);
      for (int k = 0; k < nb; ++k) {
        const size_t e = order[start + size_t(k)];
        detail::fill_patch(pairs.rainy[e], pairs.clean[e], cfg.patch, rng, k, rb, cb);
        for (int c = 0; c < 3; ++c) lb.data[size_t(k) * 3 + c] = labels[e][c];
      }
      auto input = nn::Var<float>::leaf(std::move(rb));
      auto label = nn::Var<float>::leaf(std::move(lb));
      auto loss = loss_anet(nn::anet_forward(input, anet), label);
      const double lv = loss.value().data[0];
      detail::check_finite_loss(lv, "anet", epoch);
      nn::backward(loss);
      adam_step(anet, adam, cfg.lr_anet_pre, cfg.beta1, cfg.beta2, cfg.adam_eps);
      loss_sum += lv * nb;
    }
    rep.epoch_loss.push_back(loss_sum / double(order.size()));
    if (on_epoch) on_epoch(rep.stage, epoch, rep.epoch_loss.back());
  }
  rep.wall_seconds = detail::seconds_since(t0);
  return {std::move(anet), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Stage 2: streak network pretraining (vapor term held at zero)

// For each batch: Ts = S(I), A = A(I), J_hat = recover(I, Ts, 0, A, eps);
// SNet learns at lr_main while ANet fine-tunes at lr_finetune.
inline std::tuple<nn::ParamSet<float>, nn::ParamSet<float>, StageReport> pretrain_snet(
    const DatasetManifest& data, const std::string& base_dir, nn::ParamSet<float> anet,
    const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  validate(cfg);
  nn::require_arch(anet, "anet");
  anet = anet.clone();  // Var copies alias; own what the optimizer mutates
  const auto t0 = std::chrono::steady_clock::now();
  StageReport rep;
  rep.stage = "snet";

  nn::ParamSet<float> snet = nn::init_params<float>(
      "snet", anet.cfg, split_seed(cfg.seed, hash_name("snet_init")));
  if (cfg.epochs_snet == 0) {
    rep.wall_seconds = detail::seconds_since(t0);
    return {std::move(snet), std::move(anet), std::move(rep)};
  }

  const detail::PairSet pairs = detail::load_pairs(data, base_dir);
  if (pairs.rainy.empty()) throw NoUsableSamples("dataset has no entries");

  AdamState adam_s, adam_a;
  const uint64_t stage_seed = split_seed(cfg.seed, hash_name("stage_snet"));
  for (int epoch = 0; epoch < cfg.epochs_snet; ++epoch) {
    Rng rng(split_seed(stage_seed, uint64_t(epoch)));
    std::vector<size_t> order(pairs.rainy.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch)) {
      const int nb = int(std::min(order.size() - start, size_t(cfg.batch)));
      nn::Tensor<float> rb(nb, 3, cfg.patch, cfg.patch);
      nn::Tensor<float> cb(nb, 3, cfg.patch, cfg.patch);
      for (int k = 0; k < nb; ++k) {
        const size_t e = order[start + size_t(k)];
        detail::fill_patch(pairs.rainy[e], pairs.clean[e], cfg.patch, rng, k, rb, cb);
      }
      auto input = nn::Var<float>::leaf(std::move(rb));
      auto target = nn::Var<float>::leaf(std::move(cb));
      auto ts = nn::snet_forward(input, snet);
      auto a = nn::anet_forward(input, anet);
      auto j_hat = recover_var<float>(input, ts, nullptr, a, cfg.eps);
      auto loss = loss_snet(j_hat, target);
      const double lv = loss.value().data[0];
      detail::check_finite_loss(lv, "snet", epoch);
      nn::backward(loss);
      adam_step(snet, adam_s, cfg.lr_main, cfg.beta1, cfg.beta2, cfg.adam_eps);
      if (cfg.lr_finetune > 0.0)
        adam_step(anet, adam_a, cfg.lr_finetune, cfg.beta1, cfg.beta2, cfg.adam_eps);
      loss_sum += lv * nb;
    }
    rep.epoch_loss.push_back(loss_sum / double(order.size()));
    if (on_epoch) on_epoch(rep.stage, epoch, rep.epoch_loss.back());
  }
  rep.wall_seconds = detail::seconds_since(t0);
  return {std::move(snet), std::move(anet), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Stage 3: joint training with the vapor network

// Ts = S(I), Tv = V(I, Ts), A = A(I), J_hat = recover(I, Ts, Tv, A, eps);
// VNet learns at lr_main, SNet/ANet fine-tune at lr_finetune. SNet receives
// gradient both directly through J_hat and through VNet's Ts input.
inline std::tuple<nn::ParamSet<float>, nn::ParamSet<float>, nn::ParamSet<float>, StageReport>
joint_train(const DatasetManifest& data, const std::string& base_dir,
            nn::ParamSet<float> snet, nn::ParamSet<float> anet, const TrainConfig& cfg,
            const EpochCallback& on_epoch = {}) {
  validate(cfg);
  nn::require_arch(snet, "snet");
  nn::require_arch(anet, "anet");
  snet = snet.clone();  // see pretrain_snet: by-value ParamSets still alias
  anet = anet.clone();
  const auto t0 = std::chrono::steady_clock::now();
  StageReport rep;
  rep.stage = "joint";

  nn::ParamSet<float> vnet = nn::init_params<float>(
      "vnet", snet.cfg, split_seed(cfg.seed, hash_name("vnet_init")));
  if (cfg.epochs_joint == 0) {
    rep.wall_seconds = detail::seconds_since(t0);
    return {std::move(snet), std::move(vnet), std::move(anet), std::move(rep)};
  }

  const detail::PairSet pairs = detail::load_pairs(data, base_dir);
  if (pairs.rainy.empty()) throw NoUsableSamples("dataset has no entries");

  AdamState adam_v, adam_s, adam_a;
  const uint64_t stage_seed = split_seed(cfg.seed, hash_name("stage_joint"));
  for (int epoch = 0; epoch < cfg.epochs_joint; ++epoch) {
    Rng rng(split_seed(stage_seed, uint64_t(epoch)));
    std::vector<size_t> order(pairs.rainy.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch)) {
      const int nb = int(std::min(order.size() - start, size_t(cfg.batch)));
      nn::Tensor<float> rb(nb, 3, cfg.patch, cfg.patch);
      nn::Tensor<float> cb(nb, 3, cfg.patch, cfg.patch);
      for (int k = 0; k < nb; ++k) {
        const size_t e = order[start + size_t(k)];
        detail::fill_patch(pairs.rainy[e], pairs.clean[e], cfg.patch, rng, k, rb, cb);
      }
      auto input = nn::Var<float>::leaf(std::move(rb));
      auto target = nn::Var<float>::leaf(std::move(cb));
      auto ts = nn::snet_forward(input, snet);
      auto tv = nn::vnet_forward(input, ts, vnet);
      auto a = nn::anet_forward(input, anet);
      auto j_hat = recover_var(input, ts, &tv, a, cfg.eps);
      auto loss = loss_total(j_hat, target, float(cfg.lambda1), float(cfg.lambda2));
      const double lv = loss.value().data[0];
      detail::check_finite_loss(lv, "joint", epoch);
      nn::backward(loss);
      adam_step(vnet, adam_v, cfg.lr_main, cfg.beta1, cfg.beta2, cfg.adam_eps);
      if (cfg.lr_finetune > 0.0) {
        adam_step(snet, adam_s, cfg.lr_finetune, cfg.beta1, cfg.beta2, cfg.adam_eps);
        adam_step(anet, adam_a, cfg.lr_finetune, cfg.beta1, cfg.beta2, cfg.adam_eps);
      }
      loss_sum += lv * nb;
    }
    rep.epoch_loss.push_back(loss_sum / double(order.size()));
    if (on_epoch) on_epoch(rep.stage, epoch, rep.epoch_loss.back());
  }
  rep.wall_seconds = detail::seconds_since(t0);
  return {std::move(snet), std::move(vnet), std::move(anet), std::move(rep)};
}

}  // namespace derain
