// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line pipeline: gen-corpus -> pretrain -> fisher -> domain-tune
// -> probe -> report. Each command is a single deterministic process;
// expensive artifacts (pretrained checkpoint, fisher diagonal) are shared
// across strategy runs through the output directory.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cltune/checkpoint.hpp"
#include "cltune/experiment.hpp"
#include "cltune/report.hpp"

namespace fs = std::filesystem;
using namespace cltune;

namespace {

TokenStream load_corpus_checked(const ExperimentConfig& exp, Domain domain, Split split) {
  const auto path = exp.corpus_path(domain, split);
  if (!fs::exists(path))
    throw MissingArtifactError("missing corpus file " + path.string() +
                               " (run gen-corpus first)");
  CorpusHeader header;
  auto stream = read_corpus_file(path, &header);
  if (header.digest != exp.digest)
    throw ConfigError("corpus " + path.string() + " has config digest " + header.digest +
                      ", expected " + exp.digest);
  require(header.domain == domain_tag(domain) && header.split == split_tag(split),
          "corpus " + path.string() + " holds the wrong domain/split");
  return stream;
}

std::vector<Row> corpus_rows(const ExperimentConfig& exp, Domain domain, Split split,
                             int seq_len) {
  return pack_sequences(load_corpus_checked(exp, domain, split), seq_len);
}

LoadedCheckpoint load_run_checkpoint(const ExperimentConfig& exp, const std::string& run) {
  const auto path = exp.checkpoint_path(run);
  if (!fs::exists(path))
    throw MissingArtifactError("missing checkpoint " + path.string() + " (run '" + run +
                               "' first)");
  auto ckpt = load_checkpoint(path);
  if (ckpt.header.at("config_digest").get<std::string>() != exp.digest)
    throw ConfigError("checkpoint " + path.string() + " belongs to a different config");
  if (ckpt.config.hash() != exp.model.hash())
    throw ConfigError("checkpoint " + path.string() + " has an incompatible model config hash");
  return ckpt;
}

int cmd_gen_corpus(const ExperimentConfig& exp, const std::string& domain_s,
                   const std::string& split_s, bool force) {
  const Domain domain = domain_s == "source" ? Domain::kSource : Domain::kTarget;
  const Split split = split_s == "train" ? Split::kTrain : Split::kValidation;
  const auto path = exp.corpus_path(domain, split);
  const auto seed = exp.corpus_seed(domain);

  if (fs::exists(path) && !force) {
    CorpusHeader header;
    read_corpus_file(path, &header);
    if (header.domain == domain_tag(domain) && header.split == split_tag(split) &&
        header.seed == seed && header.digest == exp.digest) {
      std::cout << "corpus up to date: " << path.string() << "\n";
      return 0;
    }
    throw ConfigError("refusing to overwrite " + path.string() + ": existing header has seed=" +
                      std::to_string(header.seed) + " digest=" + header.digest +
                      ", config wants seed=" + std::to_string(seed) + " digest=" + exp.digest +
                      " (use --force)");
  }

  fs::create_directories(path.parent_path());
  const auto stream =
      generate_domain(exp.spec_for(domain), exp.corpus_tokens(domain, split), domain, split);
  write_corpus_file(path, stream, seed, exp.digest);
  std::cout << "wrote " << stream.ids.size() << " tokens to " << path.string() << "\n";
  return 0;
}

int cmd_pretrain(const ExperimentConfig& exp) {
  const auto train_cfg = pretrain_config(exp);
  RunInputs in;
  in.model = exp.model;
  in.train = train_cfg;
  in.strategy.kind = StrategyKind::kSdt;
  in.init = init_params(exp.model);
  in.train_rows = corpus_rows(exp, Domain::kSource, Split::kTrain, train_cfg.seq_len);
  in.source_val_rows = corpus_rows(exp, Domain::kSource, Split::kValidation, train_cfg.seq_len);

  fs::create_directories(exp.run_dir("pretrain"));
  MetricsWriter metrics(exp.metrics_path("pretrain"), exp.digest, "pretrain", exp.seed_base);
  const auto checkpoint_cb = [&](long step, const ParamVector& p) {
    save_checkpoint(exp.run_dir("pretrain") / ("checkpoint_" + std::to_string(step) + ".bin"),
                    exp.model, p,
                    {{"phase", "pretrain"}, {"step", step}, {"seed", exp.seed_base}}, exp.digest);
  };
  const auto params = run_training(in, metrics, checkpoint_cb);
  save_checkpoint(exp.checkpoint_path("pretrain"), exp.model, params,
                  {{"phase", "pretrain"}, {"step", train_cfg.steps}, {"seed", exp.seed_base}},
                  exp.digest);

  const auto records = read_jsonl(exp.metrics_path("pretrain"));
  double first_eval = -1, last_eval = -1;
  for (const auto& j : records) {
    if (!j.contains("eval_losses")) continue;
    const double v = j["eval_losses"]["source_val"].get<double>();
    if (first_eval < 0) first_eval = v;
    last_eval = v;
  }
  std::cout << "pretrain done: source val " << first_eval << " -> " << last_eval << "\n";
  if (last_eval >= first_eval)
    std::cout << "warning: validation loss did not improve over pretraining\n";
  return 0;
}

int cmd_fisher(const ExperimentConfig& exp) {
  const auto ckpt = load_run_checkpoint(exp, "pretrain");
  const auto tune_cfg = tune_config(exp, StrategyKind::kEwc);
  const auto rows = corpus_rows(exp, Domain::kSource, Split::kTrain, tune_cfg.seq_len);

  const RngSet rng(exp.seed_base);
  BatchSampler sampler(rows.size(), rng.stream("fisher-order"));
  auto mask_stream = rng.stream("fisher-masking");
  std::vector<MaskedBatch> batches;
  batches.reserve(exp.fisher_batches);
  for (int i = 0; i < exp.fisher_batches; ++i) {
    const auto idx = sampler.next(static_cast<std::size_t>(tune_cfg.batch_size));
    batches.push_back(
        mask_batch(select_rows(rows, idx), mask_stream, exp.model.vocab_size, "masking-source"));
  }
  auto fisher = estimate_fisher_diagonal(exp.model, ckpt.params, batches);
  fisher.source_seed = exp.source_corpus_seed;
  save_fisher(exp.fisher_path(), exp.model, fisher, exp.digest);
  std::cout << "fisher written: " << exp.fisher_path().string() << " (" << fisher.n_batches_used
            << " batches)\n";
  return 0;
}

int cmd_domain_tune(const ExperimentConfig& exp, const std::string& strategy_s,
                    std::optional<double> lambda_cli) {
  const StrategyKind kind = parse_strategy(strategy_s);
  const auto train_cfg = tune_config(exp, kind);
  const double lambda = lambda_for(exp, kind, lambda_cli);
  const auto pre = load_run_checkpoint(exp, "pretrain");

  RunInputs in;
  in.model = exp.model;
  in.train = train_cfg;
  in.strategy.kind = kind;
  in.strategy.lambda = lambda;
  in.init = pre.params;
  in.train_rows = corpus_rows(exp, Domain::kTarget, Split::kTrain, train_cfg.seq_len);
  in.target_val_rows = corpus_rows(exp, Domain::kTarget, Split::kValidation, train_cfg.seq_len);
  in.source_val_rows = corpus_rows(exp, Domain::kSource, Split::kValidation, train_cfg.seq_len);
  in.source_train_rows = corpus_rows(exp, Domain::kSource, Split::kTrain, train_cfg.seq_len);

  switch (kind) {
    case StrategyKind::kL2:
      in.strategy.anchor = std::make_shared<ParamVector>(pre.params);
      break;
    case StrategyKind::kEwc: {
      if (!fs::exists(exp.fisher_path()))
        throw MissingArtifactError("missing fisher artifact " + exp.fisher_path().string() +
                                   " (run the fisher command first)");
      auto fisher = load_fisher(exp.fisher_path(), exp.model);
      in.strategy.anchor = std::make_shared<ParamVector>(pre.params);
      in.strategy.fisher = std::make_shared<FisherDiagonal>(std::move(fisher));
      break;
    }
    case StrategyKind::kRehearsal: {
      auto stream = RngSet(exp.seed_base).stream("rehearsal-sampling");
      in.strategy.buffer = std::make_shared<RehearsalBuffer>(
          RehearsalBuffer::sample(in.source_train_rows, exp.rehearsal_buffer_size, stream));
      break;
    }
    case StrategyKind::kDistillation:
      in.strategy.teacher = std::make_shared<ParamVector>(pre.params);
      break;
    default:
      break;
  }

  const std::string run = strategy_name(kind);
  fs::create_directories(exp.run_dir(run));
  MetricsWriter metrics(exp.metrics_path(run), exp.digest, run, exp.seed_base);
  std::cout << "domain-tune strategy=" << run << " lambda=" << lambda
            << " steps=" << train_cfg.steps << "\n";
  const auto checkpoint_cb = [&](long step, const ParamVector& p) {
    save_checkpoint(exp.run_dir(run) / ("checkpoint_" + std::to_string(step) + ".bin"), exp.model,
                    p,
                    {{"phase", "domain-tune"},
                     {"kind", run},
                     {"lambda", lambda},
                     {"step", step},
                     {"seed", exp.seed_base}},
                    exp.digest);
  };
  const auto params = run_training(in, metrics, checkpoint_cb);
  save_checkpoint(exp.checkpoint_path(run), exp.model, params,
                  {{"phase", "domain-tune"},
                   {"kind", run},
                   {"lambda", lambda},
                   {"step", train_cfg.steps},
                   {"seed", exp.seed_base}},
                  exp.digest);
  std::cout << "domain-tune done: " << exp.checkpoint_path(run).string() << "\n";
  return 0;
}

int cmd_probe(const ExperimentConfig& exp, const std::string& strategy_s,
              const std::string& task_s) {
  const StrategyKind kind = parse_strategy(strategy_s);
  const std::string run = strategy_name(kind);
  const auto ckpt = load_run_checkpoint(exp, run);
  const long final_step = ckpt.header.at("strategy_metadata").value("step", 0L);

  const auto [source_task, target_task] =
      make_shift_task_pair(exp.source_spec(), exp.target_spec(), exp.probes.n_train,
                           exp.probes.n_test, exp.probes.seq_len,
                           mix_seed(exp.seed_base, fnv1a64("probe-task")));

  ProbeConfig pc;
  pc.hidden_dim = exp.probes.hidden_dim;
  pc.steps = exp.probes.steps;
  pc.batch_size = exp.probes.batch_size;
  pc.learning_rate = exp.probes.learning_rate;
  pc.seed = mix_seed(exp.seed_base, fnv1a64("probe"));

  MetricsWriter metrics(exp.metrics_path(run), exp.digest, run, exp.seed_base, /*append=*/true);
  for (const double fraction : exp.probes.train_fractions) {
    pc.train_fraction = fraction;
    std::map<std::string, double> values;
    values["train_fraction"] = fraction;

    if (task_s == "target") {
      const auto r = finetune_probe(exp.model, ckpt.params, target_task, pc,
                                    exp.probes.finetune_encoder);
      values["probe_target_accuracy"] = r.probe.test_accuracy;
      values["probe_target_mean_loglik"] = r.probe.test_mean_loglik;
    } else if (task_s == "source") {
      const auto r = finetune_probe(exp.model, ckpt.params, source_task, pc,
                                    exp.probes.finetune_encoder);
      values["probe_source_accuracy"] = r.probe.test_accuracy;
      values["probe_source_mean_loglik"] = r.probe.test_mean_loglik;
    } else if (task_s == "shift") {
      const auto r = finetune_probe(exp.model, ckpt.params, target_task, pc,
                                    exp.probes.finetune_encoder);
      values["shift_in_domain_accuracy"] = r.probe.test_accuracy;
      values["shift_accuracy"] = domain_shift_eval(exp.model, r, source_task);
    } else if (task_s == "mi") {
      const auto sdt = load_run_checkpoint(exp, "sdt");
      values["mi_gap_vs_sdt"] = mi_gap(exp.model, ckpt.params, sdt.params, target_task, pc);
    } else {
      throw ConfigError("unknown probe task: " + task_s);
    }

    MetricsRecord r;
    r.step = final_step;
    r.phase = "probe";
    r.strategy = run;
    r.seed = exp.seed_base;
    r.eval_losses = values;
    metrics.write(r);
    std::cout << "probe " << task_s << " strategy=" << run << " fraction=" << fraction << ":";
    for (const auto& [k, v] : values)
      if (k != "train_fraction") std::cout << " " << k << "=" << v;
    std::cout << "\n";
  }
  return 0;
}

int cmd_report(const ExperimentConfig& exp) {
  const auto report = build_report(exp);
  write_report(exp, report);
  std::cout << "report written to " << (exp.output_dir / "report").string() << " ("
            << report.eval_events << " eval events)\n";
  std::cout << report.summary_csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual-learning domain-tuning workbench"};
  app.require_subcommand(1);

  std::string config_path, domain, split, strategy, task;
  bool force = false;
  std::optional<double> lambda_cli;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config JSON")->required();
  };

  auto* gen = app.add_subcommand("gen-corpus", "generate a corpus cache file");
  add_config(gen);
  gen->add_option("--domain", domain)->check(CLI::IsMember({"source", "target"}))->required();
  gen->add_option("--split", split)->check(CLI::IsMember({"train", "val"}))->required();
  gen->add_flag("--force", force, "overwrite an existing file with a mismatched header");

  auto* pre = app.add_subcommand("pretrain", "pretrain on the source domain");
  add_config(pre);

  auto* fis = app.add_subcommand("fisher", "estimate the empirical fisher diagonal");
  add_config(fis);

  auto* tune = app.add_subcommand("domain-tune", "domain-tune from the pretrained checkpoint");
  add_config(tune);
  tune->add_option("--strategy", strategy)
      ->check(CLI::IsMember({"sdt", "rh", "l2", "ewc", "gem", "dis"}))
      ->required();
  double lambda_value = 0;
  auto* lambda_opt = tune->add_option("--lambda", lambda_value, "loss multiplier override");

  auto* probe = app.add_subcommand("probe", "run transfer probes against a tuned checkpoint");
  add_config(probe);
  probe->add_option("--strategy", strategy)
      ->check(CLI::IsMember({"sdt", "rh", "l2", "ewc", "gem", "dis"}))
      ->required();
  probe->add_option("--task", task)
      ->check(CLI::IsMember({"target", "source", "shift", "mi"}))
      ->required();

  auto* rep = app.add_subcommand("report", "derive figure/table CSVs from metrics");
  add_config(rep);

  try {
    app.parse(argc, argv);
    if (lambda_opt->count() > 0) lambda_cli = lambda_value;

    const auto exp = load_experiment(config_path);
    if (gen->parsed()) return cmd_gen_corpus(exp, domain, split, force);
    if (pre->parsed()) return cmd_pretrain(exp);
    if (fis->parsed()) return cmd_fisher(exp);
    if (tune->parsed()) return cmd_domain_tune(exp, strategy, lambda_cli);
    if (probe->parsed()) return cmd_probe(exp, strategy, task);
    if (rep->parsed()) return cmd_report(exp);
    return 1;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_name() == "CallForHelp" ? 0 : 1;
  } catch (const MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericsError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
