#pragma once
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "derain/networks.hpp"
#include "derain/synth.hpp"
#include "derain/training.hpp"

// Plain-text run configuration: one `key = value` per line, `#` comments,
// unknown keys rejected. Every value is checked against its owning type's
// invariants before the parse returns, so a config that parses is a config
// that can run.

namespace derain {

struct RunConfig {
  TrainConfig train;
  nn::ArchConfig arch;
  StreakParams streaks;
  VaporParams vapor;
  float alpha = 0.4f;     // streak/vapor mixing share for model-consistent scenes
  std::string clean_dir;  // optional path defaults; command-line flags override
  std::string data_dir;
  std::string out_dir;
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline double parse_double(const std::string& v, const std::string& key) {
  size_t idx = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &idx);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
  if (idx != v.size() || !std::isfinite(out))
    throw ConfigError("config key '" + key + "': '" + v + "' is not a finite number");
  return out;
}

inline float parse_float(const std::string& v, const std::string& key) {
  return float(parse_double(v, key));
}

inline int parse_int(const std::string& v, const std::string& key) {
  size_t idx = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &idx);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  }
  if (idx != v.size() || out < std::numeric_limits<int>::min() ||
      out > std::numeric_limits<int>::max())
    throw ConfigError("config key '" + key + "': '" + v + "' is not a valid integer");
  return int(out);
}

inline uint64_t parse_u64(const std::string& v, const std::string& key) {
  if (!v.empty() && v[0] == '-')
    throw ConfigError("config key '" + key + "': '" + v + "' must be non-negative");
  size_t idx = 0;
  uint64_t out = 0;
  try {
    out = std::stoull(v, &idx);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  }
  if (idx != v.size())
    throw ConfigError("config key '" + key + "': '" + v + "' is not a valid integer");
  return out;
}

inline std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> parts;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) parts.push_back(trim(item));
  return parts;
}

inline std::array<float, 2> parse_range(const std::string& v, const std::string& key) {
  const auto parts = split_commas(v);
  if (parts.size() != 2)
    throw ConfigError("config key '" + key + "': expected two comma-separated values");
  return {parse_float(parts[0], key), parse_float(parts[1], key)};
}

inline std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
  const auto parts = split_commas(v);
  if (parts.empty())
    throw ConfigError("config key '" + key + "': expected a comma-separated list");
  std::vector<int> out;
  for (const auto& p : parts) out.push_back(parse_int(p, key));
  return out;
}

inline void apply_config_key(RunConfig& rc, const std::string& key, const std::string& val) {
  // Training schedule
  if (key == "train.patch") rc.train.patch = parse_int(val, key);
  else if (key == "train.batch") rc.train.batch = parse_int(val, key);
  else if (key == "train.epochs_anet") rc.train.epochs_anet = parse_int(val, key);
  else if (key == "train.epochs_snet") rc.train.epochs_snet = parse_int(val, key);
  else if (key == "train.epochs_joint") rc.train.epochs_joint = parse_int(val, key);
  else if (key == "train.lr_anet_pre") rc.train.lr_anet_pre = parse_double(val, key);
  else if (key == "train.lr_main") rc.train.lr_main = parse_double(val, key);
  else if (key == "train.lr_finetune") rc.train.lr_finetune = parse_double(val, key);
  else if (key == "train.lambda1") rc.train.lambda1 = parse_double(val, key);
  else if (key == "train.lambda2") rc.train.lambda2 = parse_double(val, key);
  else if (key == "train.eps") rc.train.eps = parse_float(val, key);
  else if (key == "train.beta1") rc.train.beta1 = parse_double(val, key);
  else if (key == "train.beta2") rc.train.beta2 = parse_double(val, key);
  else if (key == "train.adam_eps") rc.train.adam_eps = parse_double(val, key);
  else if (key == "seed") rc.train.seed = parse_u64(val, key);
  // Architecture
  else if (key == "arch.groups") rc.arch.groups = parse_int(val, key);
  else if (key == "arch.base_channels") rc.arch.base_channels = parse_int(val, key);
  else if (key == "arch.vnet_channels") rc.arch.vnet_channels = parse_int(val, key);
  else if (key == "arch.spp_proj") rc.arch.spp_proj = parse_int(val, key);
  else if (key == "arch.spp_levels") rc.arch.spp_levels = parse_int_list(val, key);
  else if (key == "arch.anet_base") rc.arch.anet_base = parse_int(val, key);
  else if (key == "arch.act_slope") rc.arch.act_slope = parse_float(val, key);
  // Streak rendering
  else if (key == "streaks.density") rc.streaks.density = parse_double(val, key);
  else if (key == "streaks.length_range") rc.streaks.length_range = parse_range(val, key);
  else if (key == "streaks.width_range") rc.streaks.width_range = parse_range(val, key);
  else if (key == "streaks.angle_range") rc.streaks.angle_range = parse_range(val, key);
  else if (key == "streaks.intensity_range")
    rc.streaks.intensity_range = parse_range(val, key);
  // Vapor field
  else if (key == "vapor.octaves") rc.vapor.octaves = parse_int(val, key);
  else if (key == "vapor.base_scale") rc.vapor.base_scale = parse_float(val, key);
  else if (key == "vapor.strength_range") rc.vapor.strength_range = parse_range(val, key);
  // Scene mixing and path defaults
  else if (key == "alpha") rc.alpha = parse_float(val, key);
  else if (key == "clean_dir") rc.clean_dir = val;
  else if (key == "data_dir") rc.data_dir = val;
  else if (key == "out_dir") rc.out_dir = val;
  else throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace detail

inline void validate(const RunConfig& rc) {
  validate(rc.train);
  nn::validate_config(rc.arch);
  validate(rc.streaks);
  validate(rc.vapor);
  if (!(rc.alpha > 0.0f && rc.alpha < 1.0f))
    throw InvalidParams("alpha must lie strictly between 0 and 1");
}

inline RunConfig parse_run_config(std::istream& in) {
  RunConfig rc;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected 'key = value', got '" + t + "'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string val = detail::trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    detail::apply_config_key(rc, key, val);
  }
  validate(rc);
  return rc;
}

inline RunConfig parse_run_config(const std::string& text) {
  std::istringstream ss(text);
  return parse_run_config(ss);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file '" + path + "'");
  return parse_run_config(f);
}

}  // namespace derain
