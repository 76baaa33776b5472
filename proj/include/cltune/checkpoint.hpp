// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
//
// Binary artifact container: 8-byte magic "CLTUNE01", a little-endian
// u32 header length, the UTF-8 JSON header, then the float32 payload in
// little-endian order. Checkpoints and fisher diagonals share the format
// and differ only in the header's strategy_metadata.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cltune/model.hpp"
#include "cltune/strategies.hpp"

namespace cltune {

constexpr char kArtifactMagic[8] = {'C', 'L', 'T', 'U', 'N', 'E', '0', '1'};

namespace detail {

inline void put_u32_le(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

inline std::uint32_t get_u32_le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32_le(std::ostream& out, float f) {
  put_u32_le(out, std::bit_cast<std::uint32_t>(f));
}

inline float get_f32_le(std::istream& in) { return std::bit_cast<float>(get_u32_le(in)); }

}  // namespace detail

inline void write_artifact(const std::filesystem::path& path, const ModelConfig& cfg,
                           std::span<const float> payload, nlohmann::json strategy_metadata,
                           const std::string& config_digest) {
  nlohmann::json header = {{"version", 1},
                           {"model_config", cfg.to_json()},
                           {"param_count", payload.size()},
                           {"strategy_metadata", std::move(strategy_metadata)},
                           {"config_digest", config_digest}};
  const std::string header_str = header.dump();
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot open artifact for writing: " + path.string());
  out.write(kArtifactMagic, 8);
  detail::put_u32_le(out, static_cast<std::uint32_t>(header_str.size()));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (float f : payload) detail::put_f32_le(out, f);
  require(out.good(), "failed writing artifact: " + path.string());
}

struct Artifact {
  nlohmann::json header;
  ModelConfig model_config;
  std::vector<float> payload;

  const nlohmann::json& strategy_metadata() const { return header.at("strategy_metadata"); }
  std::string config_digest() const { return header.at("config_digest").get<std::string>(); }
};

inline Artifact read_artifact(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw MissingArtifactError("artifact not found: " + path.string());
  char magic[8];
  in.read(magic, 8);
  require(in.good() && std::memcmp(magic, kArtifactMagic, 8) == 0,
          "bad magic in artifact: " + path.string());
  const std::uint32_t header_len = detail::get_u32_le(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), header_len);
  require(in.good(), "truncated artifact header: " + path.string());

  Artifact a;
  a.header = nlohmann::json::parse(header_str);
  require(a.header.at("version").get<int>() == 1, "unsupported artifact version");
  a.model_config = ModelConfig::from_json(a.header.at("model_config"));
  const auto count = a.header.at("param_count").get<std::size_t>();
  a.payload.resize(count);
  for (std::size_t i = 0; i < count; ++i) a.payload[i] = detail::get_f32_le(in);
  require(in.good(), "truncated artifact payload: " + path.string());
  return a;
}

// --------------------------------------------------------------------------
// Typed wrappers.

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                            const ParamVector& params, nlohmann::json strategy_metadata,
                            const std::string& config_digest) {
  check_param_compat(cfg, params);
  write_artifact(path, cfg, params.values, std::move(strategy_metadata), config_digest);
}

struct LoadedCheckpoint {
  ModelConfig config;
  ParamVector params;
  nlohmann::json header;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  Artifact a = read_artifact(path);
  LoadedCheckpoint c;
  c.config = a.model_config;
  c.params.values = std::move(a.payload);
  c.params.config_hash = c.config.hash();
  require(c.params.values.size() == ParamLayout(c.config).total_size(),
          "checkpoint payload length does not match its model config");
  c.header = std::move(a.header);
  return c;
}

inline void save_fisher(const std::filesystem::path& path, const ModelConfig& cfg,
                        const FisherDiagonal& fisher, const std::string& config_digest) {
  nlohmann::json meta = {{"kind", "fisher"},
                         {"n_batches_used", fisher.n_batches_used},
                         {"source_seed", fisher.source_seed}};
  write_artifact(path, cfg, fisher.values, std::move(meta), config_digest);
}

inline FisherDiagonal load_fisher(const std::filesystem::path& path, const ModelConfig& expect) {
  Artifact a = read_artifact(path);
  require(a.strategy_metadata().value("kind", "") == "fisher",
          "artifact is not a fisher diagonal: " + path.string());
  require(a.model_config.hash() == expect.hash(),
          "fisher artifact was built for a different model config");
  FisherDiagonal f;
  f.values = std::move(a.payload);
  f.n_batches_used = a.strategy_metadata().at("n_batches_used").get<int>();
  f.source_seed = a.strategy_metadata().at("source_seed").get<std::uint64_t>();
  for (float v : f.values)
    if (v < 0) throw NumericsError("fisher artifact contains a negative entry");
  return f;
}

}  // namespace cltune
