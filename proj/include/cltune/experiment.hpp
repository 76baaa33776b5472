// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
//
// Config-driven experiment wiring: JSON schema validation, the canonical
// config digest embedded in every artifact, named scale presets, and the
// resolution of config sections into runtime structs.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "cltune/corpus.hpp"
#include "cltune/probes.hpp"
#include "cltune/strategies.hpp"
#include "cltune/trainer.hpp"

namespace cltune {

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::string& section,
                       const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key))
      throw ConfigError("unknown key '" + key + "' in config section '" + section + "'");
  }
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace detail

struct ProbesSection {
  int n_train = 2000;
  int n_test = 2000;
  int seq_len = 32;
  int hidden_dim = 64;
  int steps = 500;
  int batch_size = 64;
  double learning_rate = 1e-2;
  std::vector<double> train_fractions = {1.0};
  bool finetune_encoder = false;
};

struct ExperimentConfig {
  nlohmann::json raw;
  std::string digest;

  ModelConfig model;
  int alphabet_size = 0;
  double peakedness = 6.0;
  double overlap = 1.0;
  std::uint64_t source_corpus_seed = 0, target_corpus_seed = 0;
  std::size_t source_train_tokens = 0, source_val_tokens = 0;
  std::size_t target_train_tokens = 0, target_val_tokens = 0;

  nlohmann::json pretrain_section, tune_defaults, tune_overrides;
  std::size_t rehearsal_buffer_size = 1024;
  int fisher_batches = 64;
  ProbesSection probes;

  std::filesystem::path output_dir;
  std::uint64_t seed_base = 1;

  DomainSpec source_spec() const {
    return make_source_spec(alphabet_size, source_corpus_seed, peakedness);
  }
  DomainSpec target_spec() const {
    return make_target_spec(source_spec(), overlap, target_corpus_seed, peakedness);
  }
  DomainSpec spec_for(Domain d) const {
    return d == Domain::kSource ? source_spec() : target_spec();
  }

  std::filesystem::path corpus_path(Domain d, Split s) const {
    return output_dir / "corpus" /
           (std::string(d == Domain::kSource ? "source" : "target") + "_" + split_tag(s) + ".ids");
  }
  std::filesystem::path run_dir(const std::string& name) const { return output_dir / name; }
  std::filesystem::path checkpoint_path(const std::string& run) const {
    return run_dir(run) / "checkpoint.bin";
  }
  std::filesystem::path metrics_path(const std::string& run) const {
    return run_dir(run) / "metrics.jsonl";
  }
  std::filesystem::path fisher_path() const { return output_dir / "fisher" / "fisher.bin"; }

  std::size_t corpus_tokens(Domain d, Split s) const {
    if (d == Domain::kSource) return s == Split::kTrain ? source_train_tokens : source_val_tokens;
    return s == Split::kTrain ? target_train_tokens : target_val_tokens;
  }
  std::uint64_t corpus_seed(Domain d) const {
    return d == Domain::kSource ? source_corpus_seed : target_corpus_seed;
  }
};

namespace detail {

/// Named scale presets: "desk" is the laptop-sized default, "paper" keeps
/// the published batch shape and learning rate.
inline nlohmann::json preset_values(const std::string& name) {
  if (name == "desk") return {{"batch_size", 8}, {"seq_len", 64}, {"learning_rate", 3e-4}};
  if (name == "paper") return {{"batch_size", 8}, {"seq_len", 512}, {"learning_rate", 5e-5}};
  throw ConfigError("unknown preset: " + name);
}

inline TrainConfig resolve_train(const nlohmann::json& section, Phase phase,
                                 std::uint64_t seed_base, const std::string& where) {
  check_keys(section, where,
             {"preset", "steps", "batch_size", "seq_len", "optimizer", "learning_rate",
              "warmup_steps", "eval_every", "checkpoint_every", "eval_subsets", "eval_fraction"});
  nlohmann::json resolved = nlohmann::json::object();
  if (section.contains("preset"))
    resolved.update(preset_values(section.at("preset").get<std::string>()));
  for (const auto& [k, v] : section.items())
    if (k != "preset") resolved[k] = v;

  TrainConfig t;
  t.phase = phase;
  t.seed_base = seed_base;
  t.steps = resolved.value("steps", 0L);
  t.batch_size = resolved.value("batch_size", 8);
  t.seq_len = resolved.value("seq_len", 64);
  t.optimizer.kind = parse_optimizer(resolved.value("optimizer", std::string("adam")));
  t.optimizer.learning_rate = resolved.value("learning_rate", 3e-4);
  t.optimizer.warmup_steps = resolved.value("warmup_steps", 0);
  t.eval_every = resolved.value("eval_every", 0L);
  t.checkpoint_every = resolved.value("checkpoint_every", 0L);
  t.eval_subsets = resolved.value("eval_subsets", 5);
  t.eval_fraction = resolved.value("eval_fraction", 0.5);
  t.validate();
  return t;
}

}  // namespace detail

inline ExperimentConfig parse_experiment(const nlohmann::json& doc) {
  detail::check_keys(doc, "<root>",
                     {"model", "corpus_source", "corpus_target", "pretrain", "domain_tune",
                      "probes", "output_dir", "seeds"});
  for (const char* required :
       {"model", "corpus_source", "corpus_target", "pretrain", "domain_tune", "output_dir",
        "seeds"})
    if (!doc.contains(required))
      throw ConfigError(std::string("config is missing required section '") + required + "'");

  ExperimentConfig e;
  e.raw = doc;
  // the digest covers the semantic configuration; where artifacts land
  // (output_dir, or its environment override) is not part of identity
  nlohmann::json for_digest = doc;
  for_digest.erase("output_dir");
  e.digest = detail::hex64(fnv1a64(for_digest.dump()));

  const auto& seeds = doc.at("seeds");
  detail::check_keys(seeds, "seeds", {"base"});
  e.seed_base = seeds.at("base").get<std::uint64_t>();

  const auto& m = doc.at("model");
  detail::check_keys(m, "model",
                     {"vocab_size", "max_seq_len", "d_model", "n_layers", "n_heads", "d_ff"});
  e.model.vocab_size = m.at("vocab_size").get<int>();
  e.model.max_seq_len = m.at("max_seq_len").get<int>();
  e.model.d_model = m.at("d_model").get<int>();
  e.model.n_layers = m.at("n_layers").get<int>();
  e.model.n_heads = m.at("n_heads").get<int>();
  e.model.d_ff = m.at("d_ff").get<int>();
  e.model.seed = mix_seed(e.seed_base, fnv1a64("init"));
  e.model.validate();

  const auto& cs = doc.at("corpus_source");
  detail::check_keys(cs, "corpus_source",
                     {"alphabet_size", "n_train_tokens", "n_val_tokens", "seed", "peakedness"});
  e.alphabet_size = cs.at("alphabet_size").get<int>();
  e.source_train_tokens = cs.at("n_train_tokens").get<std::size_t>();
  e.source_val_tokens = cs.at("n_val_tokens").get<std::size_t>();
  e.source_corpus_seed = cs.at("seed").get<std::uint64_t>();
  e.peakedness = cs.value("peakedness", 6.0);
  require(e.alphabet_size + kFirstRegularToken <= e.model.vocab_size,
          "alphabet_size + special tokens exceeds vocab_size");

  const auto& ct = doc.at("corpus_target");
  detail::check_keys(ct, "corpus_target", {"overlap", "n_train_tokens", "n_val_tokens", "seed"});
  e.overlap = ct.at("overlap").get<double>();
  e.target_train_tokens = ct.at("n_train_tokens").get<std::size_t>();
  e.target_val_tokens = ct.at("n_val_tokens").get<std::size_t>();
  e.target_corpus_seed = ct.at("seed").get<std::uint64_t>();

  e.pretrain_section = doc.at("pretrain");

  const auto& dt = doc.at("domain_tune");
  detail::check_keys(dt, "domain_tune",
                     {"defaults", "sdt", "rh", "l2", "ewc", "gem", "dis"});
  e.tune_defaults = dt.value("defaults", nlohmann::json::object());
  e.tune_overrides = dt;
  for (const char* s : {"sdt", "rh", "l2", "ewc", "gem", "dis"}) {
    if (!dt.contains(s)) continue;
    detail::check_keys(dt.at(s), std::string("domain_tune.") + s,
                       {"lambda", "buffer_size", "fisher_batches", "steps", "learning_rate",
                        "warmup_steps", "eval_every"});
  }
  if (dt.contains("rh") && dt.at("rh").contains("buffer_size"))
    e.rehearsal_buffer_size = dt.at("rh").at("buffer_size").get<std::size_t>();
  if (dt.contains("ewc") && dt.at("ewc").contains("fisher_batches"))
    e.fisher_batches = dt.at("ewc").at("fisher_batches").get<int>();

  if (doc.contains("probes")) {
    const auto& p = doc.at("probes");
    detail::check_keys(p, "probes",
                       {"n_train", "n_test", "seq_len", "hidden_dim", "steps", "batch_size",
                        "learning_rate", "train_fractions", "finetune_encoder"});
    e.probes.n_train = p.value("n_train", e.probes.n_train);
    e.probes.n_test = p.value("n_test", e.probes.n_test);
    e.probes.seq_len = p.value("seq_len", e.probes.seq_len);
    e.probes.hidden_dim = p.value("hidden_dim", e.probes.hidden_dim);
    e.probes.steps = p.value("steps", e.probes.steps);
    e.probes.batch_size = p.value("batch_size", e.probes.batch_size);
    e.probes.learning_rate = p.value("learning_rate", e.probes.learning_rate);
    e.probes.finetune_encoder = p.value("finetune_encoder", false);
    if (p.contains("train_fractions"))
      e.probes.train_fractions = p.at("train_fractions").get<std::vector<double>>();
    require(e.probes.seq_len <= e.model.max_seq_len, "probes.seq_len exceeds model max_seq_len");
  }

  e.output_dir = doc.at("output_dir").get<std::string>();
  if (const char* env = std::getenv("CLTUNE_OUTPUT_DIR"); env && *env) e.output_dir = env;
  return e;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in.good()) throw MissingArtifactError("config file not found: " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError("config is not valid JSON: " + std::string(ex.what()));
  }
  return parse_experiment(doc);
}

inline TrainConfig pretrain_config(const ExperimentConfig& e) {
  auto t = detail::resolve_train(e.pretrain_section, Phase::kPretrain, e.seed_base, "pretrain");
  require(t.seq_len <= e.model.max_seq_len, "pretrain.seq_len exceeds model max_seq_len");
  return t;
}

inline TrainConfig tune_config(const ExperimentConfig& e, StrategyKind kind) {
  nlohmann::json merged = e.tune_defaults;
  if (e.tune_overrides.contains(strategy_name(kind))) {
    for (const auto& [k, v] : e.tune_overrides.at(strategy_name(kind)).items())
      if (k != "lambda" && k != "buffer_size" && k != "fisher_batches") merged[k] = v;
  }
  auto t = detail::resolve_train(merged, Phase::kDomainTune, e.seed_base,
                                 std::string("domain_tune.") + strategy_name(kind));
  require(t.seq_len <= e.model.max_seq_len, "domain_tune.seq_len exceeds model max_seq_len");
  return t;
}

/// Strategy lambda resolution: explicit CLI override, then the config
/// entry, then the published default.
inline double lambda_for(const ExperimentConfig& e, StrategyKind kind,
                         std::optional<double> cli_override) {
  if (cli_override) return *cli_override;
  const std::string name = strategy_name(kind);
  if (e.tune_overrides.contains(name) && e.tune_overrides.at(name).contains("lambda"))
    return e.tune_overrides.at(name).at("lambda").get<double>();
  return default_lambda(kind);
}

}  // namespace cltune
