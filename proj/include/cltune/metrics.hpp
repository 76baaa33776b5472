// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cltune/tensor.hpp"

namespace cltune {

/// One JSONL line: either a per-step record or an eval event. Absent
/// optionals are omitted from the serialized object, never null.
struct MetricsRecord {
  long step = 0;
  std::string phase;     // "pretrain" | "domain-tune" | "probe"
  std::string strategy;  // strategy kind, or "pretrain"
  std::optional<double> target_loss;
  std::optional<double> source_loss;
  std::optional<double> penalty;
  std::optional<bool> gem_flag;
  std::optional<std::map<std::string, double>> eval_losses;
  std::uint64_t seed = 0;
  double wall_ms = 0;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"step", step}, {"phase", phase}, {"strategy", strategy},
                        {"seed", seed}, {"wall_ms", wall_ms}};
    if (target_loss) j["target_loss"] = *target_loss;
    if (source_loss) j["source_loss"] = *source_loss;
    if (penalty) j["penalty"] = *penalty;
    if (gem_flag) j["gem_flag"] = *gem_flag;
    if (eval_losses) j["eval_losses"] = *eval_losses;
    return j;
  }
};

/// Appends one JSON object per line. The first line of a fresh file is a
/// meta record carrying the experiment config digest so every metrics file
/// is self-identifying.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& path, const std::string& config_digest,
                const std::string& strategy, std::uint64_t seed, bool append = false)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    require(out_.good(), "cannot open metrics file: " + path.string());
    if (!append) {
      nlohmann::json meta = {{"phase", "meta"},
                             {"config_digest", config_digest},
                             {"strategy", strategy},
                             {"seed", seed},
                             {"version", 1}};
      out_ << meta.dump() << "\n";
    }
  }

  void write(const MetricsRecord& r) { out_ << r.to_json().dump() << "\n"; }

  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in.good()) throw MissingArtifactError("metrics file not found: " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

}  // namespace cltune
