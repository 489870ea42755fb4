#pragma once
#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "derain/networks.hpp"

// Parameter checkpoints. Byte layout (see docs/formats.md):
//
//   bytes 0..7    ASCII magic "DRNPRM1\n"
//   bytes 8..15   header length N, unsigned 64-bit little-endian
//   bytes 16..    JSON header, exactly N bytes of UTF-8
//   rest          tensor blob: float32 little-endian values, tensors
//                 concatenated in header-table order
//
// The header records arch_id, the architecture configuration, the init seed
// and a tensor table (name, dtype, shape, byte offset into the blob, element
// count). Tables are ordered by tensor name, so identical parameter sets
// serialize byte-identically.

namespace derain::nn {

inline constexpr char kCheckpointMagic[8] = {'D', 'R', 'N', 'P', 'R', 'M', '1', '\n'};

namespace detail {

inline constexpr uint32_t bswap32(uint32_t v) {
  return (v << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}
inline constexpr uint64_t bswap64(uint64_t v) {
  return (uint64_t(bswap32(uint32_t(v))) << 32) | bswap32(uint32_t(v >> 32));
}

inline void write_f32_le(std::FILE* f, const std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    if (std::fwrite(v.data(), sizeof(float), v.size(), f) != v.size())
      throw IoError("checkpoint: short write");
  } else {
    for (float x : v) {
      uint32_t u = bswap32(std::bit_cast<uint32_t>(x));
      if (std::fwrite(&u, 4, 1, f) != 1) throw IoError("checkpoint: short write");
    }
  }
}

inline void read_f32_le(std::FILE* f, std::vector<float>& v) {
  if (std::fread(v.data(), sizeof(float), v.size(), f) != v.size())
    throw IoError("checkpoint: truncated tensor blob");
  if constexpr (std::endian::native == std::endian::big) {
    for (float& x : v) x = std::bit_cast<float>(bswap32(std::bit_cast<uint32_t>(x)));
  }
}

inline nlohmann::json config_json(const ArchConfig& c) {
  return {{"groups", c.groups},
          {"base_channels", c.base_channels},
          {"vnet_channels", c.vnet_channels},
          {"spp_proj", c.spp_proj},
          {"spp_levels", c.spp_levels},
          {"anet_base", c.anet_base},
          {"act_slope", double(c.act_slope)}};
}

inline ArchConfig config_from_json(const nlohmann::json& j) {
  ArchConfig c;
  c.groups = j.at("groups").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.vnet_channels = j.at("vnet_channels").get<int>();
  c.spp_proj = j.at("spp_proj").get<int>();
  c.spp_levels = j.at("spp_levels").get<std::vector<int>>();
  c.anet_base = j.at("anet_base").get<int>();
  c.act_slope = float(j.at("act_slope").get<double>());
  return c;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline void save_params(const ParamSet<float>& p, const std::string& path) {
  nlohmann::json header;
  header["arch_id"] = p.arch_id;
  header["config"] = detail::config_json(p.cfg);
  header["init_seed"] = p.init_seed;
  uint64_t offset = 0;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, var] : p.tensors) {
    const Shape s = var.value().shape;
    table.push_back({{"name", name},
                     {"dtype", "f32"},
                     {"shape", {s.b, s.c, s.h, s.w}},
                     {"offset", offset},
                     {"count", uint64_t(s.numel())}});
    offset += uint64_t(s.numel()) * 4;
  }
  header["tensors"] = std::move(table);
  const std::string text = header.dump();

  const std::string tmp = path + ".partial";
  detail::FilePtr f(std::fopen(tmp.c_str(), "wb"));
  if (!f) throw IoError("checkpoint: cannot open '" + tmp + "' for writing");
  if (std::fwrite(kCheckpointMagic, 1, 8, f.get()) != 8)
    throw IoError("checkpoint: short write");
  uint64_t len = text.size();
  if constexpr (std::endian::native == std::endian::big) len = detail::bswap64(len);
  if (std::fwrite(&len, 8, 1, f.get()) != 1) throw IoError("checkpoint: short write");
  if (std::fwrite(text.data(), 1, text.size(), f.get()) != text.size())
    throw IoError("checkpoint: short write");
  for (const auto& [name, var] : p.tensors) detail::write_f32_le(f.get(), var.value().data);
  if (std::fflush(f.get()) != 0) throw IoError("checkpoint: flush failed");
  f.reset();
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("checkpoint: rename to '" + path + "' failed: " + ec.message());
}

inline ParamSet<float> load_params(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  if (std::fread(magic, 1, 8, f.get()) != 8 ||
      !std::equal(magic, magic + 8, kCheckpointMagic))
    throw IoError("checkpoint: '" + path + "' is not a parameter checkpoint");
  uint64_t len = 0;
  if (std::fread(&len, 8, 1, f.get()) != 1) throw IoError("checkpoint: truncated header");
  if constexpr (std::endian::native == std::endian::big) len = detail::bswap64(len);
  if (len > (1u << 24)) throw IoError("checkpoint: implausible header length");
  std::string text(size_t(len), '\0');
  if (std::fread(text.data(), 1, text.size(), f.get()) != text.size())
    throw IoError("checkpoint: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }

  ParamSet<float> p;
  try {
    p.arch_id = header.at("arch_id").get<std::string>();
    p.cfg = detail::config_from_json(header.at("config"));
    p.init_seed = header.at("init_seed").get<uint64_t>();

    // The tensor table must agree exactly with what this arch/config defines.
    // Serialization follows the parameter map, i.e. name order.
    auto specs = param_specs(p.arch_id, p.cfg);
    std::sort(specs.begin(), specs.end(),
              [](const ParamSpec& a, const ParamSpec& b) { return a.name < b.name; });
    const auto& table = header.at("tensors");
    if (table.size() != specs.size())
      throw IoError("checkpoint: tensor table size mismatch");
    uint64_t expect_offset = 0;
    for (size_t i = 0; i < specs.size(); ++i) {
      const auto& e = table.at(i);
      const auto shape = e.at("shape").get<std::vector<int>>();
      if (e.at("name").get<std::string>() != specs[i].name ||
          e.at("dtype").get<std::string>() != "f32" || shape.size() != 4 ||
          !(Shape{shape[0], shape[1], shape[2], shape[3]} == specs[i].shape) ||
          e.at("offset").get<uint64_t>() != expect_offset ||
          e.at("count").get<uint64_t>() != uint64_t(specs[i].shape.numel()))
        throw IoError("checkpoint: tensor table entry '" + specs[i].name +
                      "' does not match the declared architecture");
      expect_offset += uint64_t(specs[i].shape.numel()) * 4;
    }
    for (const ParamSpec& spec : specs) {
      Tensor<float> t(spec.shape);
      detail::read_f32_le(f.get(), t.data);
      if (!t.all_finite())
        throw IoError("checkpoint: non-finite values in tensor '" + spec.name + "'");
      p.tensors.emplace(spec.name, Var<float>::leaf(std::move(t), true));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return p;
}

}  // namespace derain::nn
