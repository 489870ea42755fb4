#pragma once
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "derain/metrics.hpp"
#include "derain/pipeline.hpp"
#include "derain/training.hpp"

// Ablation study variants. Each mode trains a subset of the full pipeline and
// evaluates it on a held-out manifest, isolating one component's contribution:
//   c1   — streak net only, atmosphere fixed to per-image bright-pixel labels
//   c2   — streak net on top of a frozen pretrained atmosphere net
//   c3   — streak net with the atmosphere net jointly fine-tuned
//   full — c3 followed by the joint vapor stage

namespace derain {

enum class AblationMode { C1, C2, C3, Full };

inline AblationMode parse_ablation_mode(const std::string& s) {
  if (s == "c1") return AblationMode::C1;
  if (s == "c2") return AblationMode::C2;
  if (s == "c3") return AblationMode::C3;
  if (s == "full") return AblationMode::Full;
  throw InvalidParams("unknown ablation mode '" + s + "' (expected c1, c2, c3 or full)");
}

inline const char* ablation_mode_name(AblationMode m) {
  switch (m) {
    case AblationMode::C1: return "c1";
    case AblationMode::C2: return "c2";
    case AblationMode::C3: return "c3";
    case AblationMode::Full: return "full";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// C1 training stage: streak net against fixed per-image atmosphere labels.
// Mirrors the regular streak pretraining stage batch for batch (same seed
// stream, same initialization) so c1 and c2 differ only in where the
// atmosphere comes from. Entries whose label extraction finds no rain pixels
// are skipped and counted, as in the atmosphere pretraining stage.
inline std::pair<nn::ParamSet<float>, StageReport> pretrain_snet_fixed_a(
    const DatasetManifest& data, const std::string& base_dir, const nn::ArchConfig& arch,
    const TrainConfig& cfg) {
  validate(cfg);
  nn::validate_config(arch);
  const auto t0 = std::chrono::steady_clock::now();
  StageReport rep;
  rep.stage = "snet_fixed_a";

  nn::ParamSet<float> snet = nn::init_params<float>(
      "snet", arch, split_seed(cfg.seed, hash_name("snet_init")));
  if (cfg.epochs_snet == 0) {
    rep.wall_seconds = detail::seconds_since(t0);
    return {std::move(snet), std::move(rep)};
  }

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
  if (usable.empty())
    throw NoUsableSamples("no training entries with detectable rain pixels");

  AdamState adam_s;
  const uint64_t stage_seed = split_seed(cfg.seed, hash_name("stage_snet"));
  for (int epoch = 0; epoch < cfg.epochs_snet; ++epoch) {
    Rng rng(split_seed(stage_seed, uint64_t(epoch)));
    std::vector<size_t> order = usable;
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch)) {
      const int nb = int(std::min(order.size() - start, size_t(cfg.batch)));
      nn::Tensor<float> rb(nb, 3, cfg.patch, cfg.patch);
      nn::Tensor<float> cb(nb, 3, cfg.patch, cfg.patch);
      nn::Tensor<float> ab(nb, 3, 1, 1);
      for (int k = 0; k < nb; ++k) {
        const size_t e = order[start + size_t(k)];
        detail::fill_patch(pairs.rainy[e], pairs.clean[e], cfg.patch, rng, k, rb, cb);
        for (int c = 0; c < 3; ++c) ab.data[size_t(k) * 3 + c] = labels[e][c];
      }
      auto input = nn::Var<float>::leaf(std::move(rb));
      auto target = nn::Var<float>::leaf(std::move(cb));
      auto a = nn::Var<float>::leaf(std::move(ab), false);  // constant label
      auto ts = nn::snet_forward(input, snet);
      auto j_hat = recover_var<float>(input, ts, nullptr, a, cfg.eps);
      auto loss = loss_snet(j_hat, target);
      const double lv = loss.value().data[0];
      detail::check_finite_loss(lv, "snet_fixed_a", epoch);
      nn::backward(loss);
      adam_step(snet, adam_s, cfg.lr_main, cfg.beta1, cfg.beta2, cfg.adam_eps);
      loss_sum += lv * nb;
    }
    rep.epoch_loss.push_back(loss_sum / double(order.size()));
  }
  rep.wall_seconds = detail::seconds_since(t0);
  return {std::move(snet), std::move(rep)};
}

// Atmosphere for c1 at evaluation time: the bright-pixel label of the test
// image itself. When the detector finds no rain pixels the brightest pixel
// overall stands in, so every test entry still gets a score.
inline AtmosphereLight c1_eval_label(const Image& rainy, const Mask* provided = nullptr) {
  const Mask rain = detect_rain_pixels(rainy, provided);
  try {
    return extract_atmosphere_label(rainy, rain);
  } catch (const NoRainPixels&) {
    const Mask all(rainy.height, rainy.width, true);
    return extract_atmosphere_label(rainy, all);
  }
}

// ---------------------------------------------------------------------------
// Variant runner

struct AblationResult {
  AblationMode mode = AblationMode::C1;
  TrainReport report;
  nn::ParamSet<float> snet;
  std::optional<nn::ParamSet<float>> anet;  // absent in c1
  std::optional<nn::ParamSet<float>> vnet;  // present only in full
  EvalResult eval;                          // per-entry scores on the test set
};

// Trains the requested variant on `train_data` and scores it on `test_data`.
// All stages draw from cfg.seed exactly as the regular pipeline does, so a
// mode/seed/config triple fully determines the result.
inline AblationResult run_ablation(AblationMode mode, const DatasetManifest& train_data,
                                   const std::string& train_dir,
                                   const DatasetManifest& test_data,
                                   const std::string& test_dir, const nn::ArchConfig& arch,
                                   const TrainConfig& cfg) {
  validate(cfg);
  nn::validate_config(arch);
  if ((mode == AblationMode::C3 || mode == AblationMode::Full) && !(cfg.lr_finetune > 0.0))
    throw InvalidParams("modes c3 and full require a positive fine-tune rate");

  AblationResult out;
  out.mode = mode;
  out.report.seed = cfg.seed;
  out.report.anet_pretrained = mode != AblationMode::C1;
  out.report.snet_pretrained = mode == AblationMode::Full;

  switch (mode) {
    case AblationMode::C1: {
      auto [snet, rep] = pretrain_snet_fixed_a(train_data, train_dir, arch, cfg);
      out.snet = std::move(snet);
      out.report.stages.push_back(std::move(rep));
      break;
    }
    case AblationMode::C2: {
      TrainConfig frozen = cfg;
      frozen.lr_finetune = 0.0;  // zero rate gates the atmosphere updates off
      auto [anet, rep_a] = pretrain_anet(train_data, train_dir, arch, frozen);
      auto [snet, anet2, rep_s] =
          pretrain_snet(train_data, train_dir, std::move(anet), frozen);
      out.snet = std::move(snet);
      out.anet = std::move(anet2);
      out.report.stages.push_back(std::move(rep_a));
      out.report.stages.push_back(std::move(rep_s));
      break;
    }
    case AblationMode::C3:
    case AblationMode::Full: {
      auto [anet, rep_a] = pretrain_anet(train_data, train_dir, arch, cfg);
      auto [snet, anet2, rep_s] =
          pretrain_snet(train_data, train_dir, std::move(anet), cfg);
      out.report.stages.push_back(std::move(rep_a));
      out.report.stages.push_back(std::move(rep_s));
      if (mode == AblationMode::Full) {
        auto [snet3, vnet, anet3, rep_j] =
            joint_train(train_data, train_dir, std::move(snet), std::move(anet2), cfg);
        out.snet = std::move(snet3);
        out.anet = std::move(anet3);
        out.vnet = std::move(vnet);
        out.report.stages.push_back(std::move(rep_j));
      } else {
        out.snet = std::move(snet);
        out.anet = std::move(anet2);
      }
      break;
    }
  }

  const detail::PairSet test = detail::load_pairs(test_data, test_dir);
  if (test.rainy.empty()) throw NoUsableSamples("ablation test manifest has no entries");

  detail::KahanSum psum, ssum;
  for (size_t i = 0; i < test.rainy.size(); ++i) {
    RestorationResult r;
    switch (mode) {
      case AblationMode::C1:
        r = restore_with_atmosphere(
            test.rainy[i], out.snet,
            c1_eval_label(test.rainy[i], test.has_mask[i] ? &test.mask[i] : nullptr),
            nullptr, cfg.eps);
        break;
      case AblationMode::C2:
      case AblationMode::C3:
        r = restore_image(test.rainy[i], out.snet, *out.anet, nullptr, cfg.eps);
        break;
      case AblationMode::Full:
        r = restore_image(test.rainy[i], out.snet, *out.anet, &*out.vnet, cfg.eps);
        break;
    }
    const double p = psnr(r.restored, test.clean[i]);
    const double s = ssim(r.restored, test.clean[i]);
    out.eval.entries.push_back({test_data.entries[i].rainy_path, p, s});
    psum.add(p);
    ssum.add(s);
  }
  out.eval.count = out.eval.entries.size();
  out.eval.mean_psnr = psum.sum / double(out.eval.count);
  out.eval.mean_ssim = ssum.sum / double(out.eval.count);
  return out;
}

}  // namespace derain
