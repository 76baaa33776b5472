// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command-line pipeline through real processes.
#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "cltune/checkpoint.hpp"
#include "cltune/metrics.hpp"

using namespace cltune;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CLTUNE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

json base_config(const fs::path& out_dir) {
  return json{
      {"model",
       {{"vocab_size", 24}, {"max_seq_len", 32}, {"d_model", 16}, {"n_layers", 1},
        {"n_heads", 2}, {"d_ff", 32}}},
      {"corpus_source",
       {{"alphabet_size", 20}, {"n_train_tokens", 16000}, {"n_val_tokens", 3000}, {"seed", 101}}},
      {"corpus_target",
       {{"overlap", 0.2}, {"n_train_tokens", 16000}, {"n_val_tokens", 3000}, {"seed", 202}}},
      {"pretrain",
       {{"steps", 60}, {"batch_size", 8}, {"seq_len", 32}, {"optimizer", "adam"},
        {"learning_rate", 1e-3}, {"warmup_steps", 10}, {"eval_every", 30}}},
      {"domain_tune",
       {{"defaults",
         {{"steps", 40}, {"batch_size", 8}, {"seq_len", 32}, {"optimizer", "adam"},
          {"learning_rate", 1e-3}, {"warmup_steps", 5}, {"eval_every", 20}}},
        {"sdt", json::object()},
        {"rh", {{"lambda", 0.1}, {"buffer_size", 64}}},
        {"l2", {{"lambda", 1.0}}},
        {"ewc", {{"lambda", 100.0}, {"fisher_batches", 4}}},
        {"gem", json::object()},
        {"dis", {{"lambda", 0.1}}}}},
      {"probes",
       {{"n_train", 200}, {"n_test", 200}, {"seq_len", 32}, {"steps", 80},
        {"train_fractions", {1.0}}}},
      {"output_dir", out_dir.string()},
      {"seeds", {{"base", 1}}}};
}

fs::path write_config(const json& cfg, const std::string& name) {
  const auto path = fs::temp_directory_path() / name;
  std::ofstream out(path);
  out << cfg.dump(2);
  return path;
}

void gen_all_corpora(const fs::path& config) {
  for (const char* d : {"source", "target"})
    for (const char* s : {"train", "val"})
      REQUIRE(run_cli("gen-corpus --config " + config.string() + " --domain " + d + " --split " +
                      s) == 0);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string metrics_without_wall_ms(const fs::path& p) {
  std::string out;
  for (auto& j : read_jsonl(p)) {
    j.erase("wall_ms");
    out += j.dump();
    out += "\n";
  }
  return out;
}

struct Workspace {
  fs::path out_dir, config;
  explicit Workspace(const std::string& tag) {
    out_dir = fs::temp_directory_path() / ("cltune_cli_" + tag);
    fs::remove_all(out_dir);
    config = write_config(base_config(out_dir), "cltune_cli_" + tag + ".json");
  }
  ~Workspace() {
    fs::remove_all(out_dir);
    fs::remove(config);
  }
};

}  // namespace

TEST_CASE("gen-corpus writes the documented format and is idempotent") {
  Workspace ws("gen");
  const std::string gen =
      "gen-corpus --config " + ws.config.string() + " --domain source --split train";
  REQUIRE(run_cli(gen) == 0);

  const auto path = ws.out_dir / "corpus" / "source_train.ids";
  std::ifstream in(path);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line.rfind("#cltune-corpus v1 domain=s split=train seed=101", 0) == 0);
  long lines = 1;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 16001);  // header + one line per token

  // idempotent rerun, no rewrite
  const auto t0 = fs::last_write_time(path);
  REQUIRE(run_cli(gen) == 0);
  CHECK(fs::last_write_time(path) == t0);

  // a mismatched config refuses unless forced
  auto changed = base_config(ws.out_dir);
  changed["corpus_source"]["seed"] = 999;
  const auto config2 = write_config(changed, "cltune_cli_gen2.json");
  CHECK(run_cli("gen-corpus --config " + config2.string() + " --domain source --split train") ==
        1);
  CHECK(run_cli("gen-corpus --config " + config2.string() +
                " --domain source --split train --force") == 0);
  fs::remove(config2);
}

TEST_CASE("unknown config keys are rejected") {
  auto cfg = base_config(fs::temp_directory_path() / "cltune_cli_bad");
  cfg["model"]["extra_knob"] = 3;
  const auto path = write_config(cfg, "cltune_cli_bad.json");
  CHECK(run_cli("pretrain --config " + path.string()) == 1);
  fs::remove(path);
}

TEST_CASE("prerequisites are enforced with exit code 2") {
  Workspace ws("prereq");
  gen_all_corpora(ws.config);

  // domain-tune before pretrain
  CHECK(run_cli("domain-tune --config " + ws.config.string() + " --strategy sdt") == 2);

  REQUIRE(run_cli("pretrain --config " + ws.config.string()) == 0);

  // ewc without the fisher artifact names it
  const std::string cmd = std::string(CLTUNE_CLI_PATH) + " domain-tune --config " +
                          ws.config.string() + " --strategy ewc 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string output;
  char buf[256];
  while (fgets(buf, sizeof(buf), pipe)) output += buf;
  const int rc = WEXITSTATUS(pclose(pipe));
  CHECK(rc == 2);
  CHECK(output.find("fisher") != std::string::npos);
}

TEST_CASE("the full pipeline runs and reports deterministically") {
  Workspace ws("full");
  gen_all_corpora(ws.config);
  REQUIRE(run_cli("pretrain --config " + ws.config.string()) == 0);
  REQUIRE(run_cli("fisher --config " + ws.config.string()) == 0);
  for (const char* s : {"sdt", "rh", "l2", "ewc"})
    REQUIRE(run_cli("domain-tune --config " + ws.config.string() + " --strategy " +
                    std::string(s)) == 0);

  // default lambdas are applied and recorded in the checkpoint header
  const auto rh = load_checkpoint(ws.out_dir / "rh" / "checkpoint.bin");
  CHECK(rh.header.at("strategy_metadata").at("lambda").get<double>() == 0.1);
  const auto l2 = load_checkpoint(ws.out_dir / "l2" / "checkpoint.bin");
  CHECK(l2.header.at("strategy_metadata").at("lambda").get<double>() == 1.0);

  // a lambda override wins
  REQUIRE(run_cli("domain-tune --config " + ws.config.string() +
                  " --strategy l2 --lambda 2.5") == 0);
  const auto l2b = load_checkpoint(ws.out_dir / "l2" / "checkpoint.bin");
  CHECK(l2b.header.at("strategy_metadata").at("lambda").get<double>() == 2.5);
  REQUIRE(run_cli("domain-tune --config " + ws.config.string() + " --strategy l2") == 0);

  REQUIRE(run_cli("probe --config " + ws.config.string() + " --strategy ewc --task shift") == 0);
  REQUIRE(run_cli("probe --config " + ws.config.string() + " --strategy ewc --task mi") == 0);

  // probe records land in the run's metrics file
  bool saw_probe = false;
  for (const auto& j : read_jsonl(ws.out_dir / "ewc" / "metrics.jsonl"))
    if (j.value("phase", "") == "probe") saw_probe = true;
  CHECK(saw_probe);

  REQUIRE(run_cli("report --config " + ws.config.string()) == 0);
  const auto curves1 = slurp(ws.out_dir / "report" / "loss_curves.csv");
  const auto summary1 = slurp(ws.out_dir / "report" / "summary.csv");

  // row count equals the number of eval events across runs
  long eval_events = 0;
  for (const char* run : {"pretrain", "sdt", "rh", "l2", "ewc"})
    for (const auto& j : read_jsonl(ws.out_dir / run / "metrics.jsonl"))
      if (j.contains("eval_losses") && j.value("phase", "") != "probe") ++eval_events;
  long rows = -1;  // exclude the header line
  for (char c : curves1) rows += (c == '\n') ? 1 : 0;
  CHECK(rows == eval_events);

  // rerunning the report is pure
  REQUIRE(run_cli("report --config " + ws.config.string()) == 0);
  CHECK(slurp(ws.out_dir / "report" / "loss_curves.csv") == curves1);
  CHECK(slurp(ws.out_dir / "report" / "summary.csv") == summary1);
  CHECK(summary1.find("shift_in_domain") != std::string::npos);
}

TEST_CASE("identical configs replay to byte-identical artifacts") {
  Workspace a("rep_a"), b("rep_b");
  for (auto* ws : {&a, &b}) {
    gen_all_corpora(ws->config);
    REQUIRE(run_cli("pretrain --config " + ws->config.string()) == 0);
    REQUIRE(run_cli("domain-tune --config " + ws->config.string() + " --strategy sdt") == 0);
  }
  // corpora and checkpoints are byte-identical; metrics match minus timing
  CHECK(slurp(a.out_dir / "corpus" / "source_train.ids") ==
        slurp(b.out_dir / "corpus" / "source_train.ids"));
  const auto ca = load_checkpoint(a.out_dir / "sdt" / "checkpoint.bin");
  const auto cb = load_checkpoint(b.out_dir / "sdt" / "checkpoint.bin");
  CHECK(ca.params.values == cb.params.values);
  CHECK(metrics_without_wall_ms(a.out_dir / "sdt" / "metrics.jsonl") ==
        metrics_without_wall_ms(b.out_dir / "sdt" / "metrics.jsonl"));
}

TEST_CASE("rh with lambda 0 reproduces the sdt checkpoint payload") {
  Workspace ws("rh0");
  gen_all_corpora(ws.config);
  REQUIRE(run_cli("pretrain --config " + ws.config.string()) == 0);
  REQUIRE(run_cli("domain-tune --config " + ws.config.string() + " --strategy sdt") == 0);
  REQUIRE(run_cli("domain-tune --config " + ws.config.string() +
                  " --strategy rh --lambda 0") == 0);
  const auto sdt = load_checkpoint(ws.out_dir / "sdt" / "checkpoint.bin");
  const auto rh = load_checkpoint(ws.out_dir / "rh" / "checkpoint.bin");
  CHECK(sdt.params.values == rh.params.values);
}
