#pragma once
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "derain/png_io.hpp"

// Dataset manifest: a JSON index of generated rainy/clean pairs plus optional
// ground-truth maps. All paths inside a manifest are relative to the file's
// own directory, so a dataset directory can be moved wholesale.

namespace derain {

struct ManifestEntry {
  std::string rainy_path;
  std::string clean_path;
  std::string ts_path;    // optional; empty means not stored
  std::string tv_path;    // optional
  std::string mask_path;  // optional; stored as 16-bit grayscale 0/1
  std::optional<std::array<float, 3>> atmosphere;
  uint64_t seed = 0;  // per-entry generator stream seed
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  nlohmann::json generator_params = nlohmann::json::object();
  uint64_t global_seed = 0;
};

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
  j = nlohmann::json{{"rainy", e.rainy_path}, {"clean", e.clean_path}, {"seed", e.seed}};
  if (!e.ts_path.empty()) j["ts"] = e.ts_path;
  if (!e.tv_path.empty()) j["tv"] = e.tv_path;
  if (!e.mask_path.empty()) j["mask"] = e.mask_path;
  if (e.atmosphere) j["atmosphere"] = *e.atmosphere;
}

inline void from_json(const nlohmann::json& j, ManifestEntry& e) {
  e.rainy_path = j.at("rainy").get<std::string>();
  e.clean_path = j.at("clean").get<std::string>();
  e.seed = j.at("seed").get<uint64_t>();
  e.ts_path = j.value("ts", std::string());
  e.tv_path = j.value("tv", std::string());
  e.mask_path = j.value("mask", std::string());
  if (j.contains("atmosphere"))
    e.atmosphere = j.at("atmosphere").get<std::array<float, 3>>();
  else
    e.atmosphere.reset();
}

inline void save_manifest(const std::string& path, const DatasetManifest& m) {
  nlohmann::json root{{"global_seed", m.global_seed},
                      {"generator_params", m.generator_params},
                      {"entries", m.entries}};
  const std::string partial = path + ".partial";
  {
    std::ofstream out(partial, std::ios::binary | std::ios::trunc);
    if (!out.good()) throw IoError("manifest: cannot open '" + partial + "' for writing");
    out << root.dump(2) << '\n';
    if (!out.good()) throw IoError("manifest: write failed for '" + path + "'");
  }
  std::error_code ec;
  std::filesystem::rename(partial, path, ec);
  if (ec) throw IoError("manifest: cannot finalize '" + path + "': " + ec.message());
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw IoError("manifest: cannot open '" + path + "'");
  try {
    const nlohmann::json root = nlohmann::json::parse(in);
    DatasetManifest m;
    m.global_seed = root.at("global_seed").get<uint64_t>();
    m.generator_params = root.at("generator_params");
    m.entries = root.at("entries").get<std::vector<ManifestEntry>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest: '" + path + "' is malformed: " + e.what());
  }
}

// Checks that every referenced file exists, decodes, and has dimensions
// matching its entry's rainy image. `base_dir` is the manifest's directory.
inline void validate_manifest(const DatasetManifest& m, const std::string& base_dir) {
  namespace fs = std::filesystem;
  for (size_t i = 0; i < m.entries.size(); ++i) {
    const ManifestEntry& e = m.entries[i];
    const auto resolve = [&](const std::string& rel) {
      return (fs::path(base_dir) / rel).string();
    };
    const Image rainy = read_png_rgb8(resolve(e.rainy_path));
    const Image clean = read_png_rgb8(resolve(e.clean_path));
    if (!same_dims(rainy, clean))
      throw IoError("manifest: entry " + std::to_string(i) + " has mismatched dimensions");
    const auto check_map = [&](const std::string& rel) {
      if (rel.empty()) return;
      const TransmissionMap t = read_png_gray16(resolve(rel));
      if (!same_dims(rainy, t))
        throw IoError("manifest: entry " + std::to_string(i) + " has mismatched dimensions");
    };
    check_map(e.ts_path);
    check_map(e.tv_path);
    check_map(e.mask_path);
  }
}

}  // namespace derain
