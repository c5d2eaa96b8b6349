// intapt: command-line driver for the experiment pipeline.
//
//   intapt gen-data | pretrain | train-am | train --regime R | eval | report | run-all
//
// Exit codes: 0 success, 1 config error, 2 stage failure, 3 invariant
// violation.

#include "intapt/error.hpp"
#include "intapt/json_io.hpp"
#include "intapt/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>
#include <optional>

namespace {

using namespace intapt;
namespace fs = std::filesystem;

struct CommonOptions {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
  std::string name = "experiment";
  std::string dir;
  std::string log_level = "info";
};

void add_common(CLI::App &app, CommonOptions &o) {
  app.add_option("-c,--config", o.config_file, "Experiment config (JSON)");
  app.add_option("-s,--set", o.overrides,
                 "Override one config key, e.g. --set train.lambda_mi=0.3 (repeatable)");
  app.add_option("-o,--out", o.out,
                 std::string("Output root (default: $") + pipeline::kOutputRootEnv +
                     " or ./intapt-out)");
  app.add_option("-n,--name", o.name, "Experiment name under the output root");
  app.add_option("-d,--dir", o.dir, "Experiment directory (overrides --out/--name)");
  app.add_option("--log-level", o.log_level, "trace, debug, info, warn, error or off");
}

/// "a.b.c=value" -> {"a": {"b": {"c": value}}}; value parsed as JSON when
/// possible, else taken as a string.
nlohmann::json override_patch(const std::string &assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1) {
    parts.push_back(key.substr(start, dot - start));
  }
  parts.push_back(key.substr(start));
  nlohmann::json patch = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw ConfigError("--set: empty key segment in '" + key + "'");
    patch = nlohmann::json{{*it, patch}};
  }
  return patch;
}

fs::path experiment_dir(const CommonOptions &o) {
  if (!o.dir.empty()) return o.dir;
  const std::optional<fs::path> flag = o.out.empty() ? std::nullopt : std::optional<fs::path>(o.out);
  return pipeline::output_root(flag) / o.name;
}

/// Config precedence: --config file, else the experiment's config.json,
/// else defaults; then every --set in order.
ExperimentConfig resolve_config(const CommonOptions &o, const fs::path &dir) {
  nlohmann::json j = nlohmann::json(ExperimentConfig{});
  const fs::path saved = dir / "config.json";
  if (!o.config_file.empty()) {
    if (!fs::exists(o.config_file)) throw ConfigError("config file " + o.config_file + " not found");
    j = read_json(o.config_file);
  } else if (fs::exists(saved)) {
    j = read_json(saved);
  }
  for (const auto &a : o.overrides) j.merge_patch(override_patch(a));
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

struct Context {
  ExperimentConfig config;
  pipeline::Layout layout;
};

Context open(const CommonOptions &o) {
  const auto level = spdlog::level::from_str(o.log_level);
  if (level == spdlog::level::off && o.log_level != "off") {
    throw ConfigError("unknown log level '" + o.log_level + "'");
  }
  spdlog::set_level(level);
  const fs::path dir = experiment_dir(o);
  ExperimentConfig c = resolve_config(o, dir);
  pipeline::Layout l = pipeline::prepare(c, dir);
  spdlog::info("experiment directory {}", l.dir.string());
  return {std::move(c), std::move(l)};
}

std::vector<std::uint64_t> seeds_or_all(const std::vector<std::uint64_t> &given,
                                        const ExperimentConfig &c) {
  return given.empty() ? c.regime_seeds : given;
}

void print_wer(const std::string &label, const eval::WerTable &t) {
  std::cout << label << " on " << corpus::to_string(t.split) << '\n';
  for (const auto &[a, w] : t.accent) {
    std::cout << "  accent " << a << " (" << t.accent_count.at(a) << " utts): " << w << '\n';
  }
  for (const auto &[g, w] : t.group) std::cout << "  " << g << ": " << w << '\n';
}

int run(int argc, char **argv) {
  CLI::App app{"INTapt desk-scale experiment pipeline"};
  app.require_subcommand(1);
  CommonOptions o;

  auto *gen = app.add_subcommand("gen-data", "Generate (or reuse) the synthetic corpus");
  auto *pre = app.add_subcommand("pretrain", "Pretrain (or reuse) the backbone on L1 speech");
  auto *am = app.add_subcommand("train-am", "Train (or reuse) the accent module on the frozen backbone");
  auto *train = app.add_subcommand("train", "Train one adaptation regime");
  auto *ev = app.add_subcommand("eval", "WER of one trained model on one split");
  auto *rep = app.add_subcommand("report", "Rebuild every report from persisted artifacts");
  auto *all = app.add_subcommand("run-all", "Run every stage, regime and seed, then report");
  for (CLI::App *sub : {gen, pre, am, train, ev, rep, all}) add_common(*sub, o);

  std::string regime_name;
  std::vector<std::uint64_t> seeds;
  train->add_option("-r,--regime", regime_name, "finetune, prompt_ctc or intapt")->required();
  train->add_option("--seed", seeds, "Regime seeds (default: regime_seeds from the config)");

  std::string eval_model = "backbone";
  std::string split_name = "l2_test";
  std::uint64_t eval_seed = 0;
  ev->add_option("-m,--model", eval_model, "backbone, finetune, prompt_ctc or intapt");
  ev->add_option("--seed", eval_seed, "Regime seed of the checkpoint (default: first configured)");
  ev->add_option("--split", split_name, "l2_test, l2_dev, l1_test or l1_dev");

  CLI11_PARSE(app, argc, argv);

  // Argument values are checked before any stage runs.
  std::optional<Regime> train_regime;
  if (train->parsed()) train_regime = regime_from_string(regime_name);
  std::optional<Regime> eval_regime;
  std::optional<corpus::Split> eval_split;
  if (ev->parsed()) {
    eval_split = corpus::split_from_string(split_name);
    if (eval_model != "backbone") eval_regime = regime_from_string(eval_model);
  }

  Context ctx = open(o);
  const ExperimentConfig &c = ctx.config;
  const pipeline::Layout &l = ctx.layout;

  if (all->parsed()) {
    const eval::MetricsReport r = pipeline::run_experiment(c, l);
    std::cout << eval::format_tables(r);
    return 0;
  }
  if (rep->parsed()) {
    const eval::MetricsReport r = pipeline::build_report(l);
    pipeline::write_report(r, l);
    std::cout << eval::format_tables(r);
    return 0;
  }

  const corpus::Corpus corpus = pipeline::gen_data(c, l);
  if (gen->parsed()) return 0;
  const Backbone backbone = pipeline::pretrain_stage(c, l, corpus);
  if (pre->parsed()) return 0;

  if (ev->parsed()) {
    if (!eval_regime) {
      print_wer("backbone", eval::eval_wer(Recognizer(backbone), corpus, *eval_split));
      return 0;
    }
    const std::uint64_t seed = eval_seed != 0 ? eval_seed : c.regime_seeds.at(0);
    const fs::path run_dir = l.run(*eval_regime, seed);
    if (!fs::exists(run_dir / "run.json")) {
      throw StageError("no trained " + eval_model + " run for seed " + std::to_string(seed) +
                       " in " + run_dir.string() + "; run 'intapt train' first");
    }
    const RunCheckpoint ck = RunCheckpoint::load(run_dir);
    print_wer(eval_model + " seed " + std::to_string(seed),
              eval::eval_wer(ck.recognizer(backbone), corpus, *eval_split));
    return 0;
  }

  const AccentModule accent = pipeline::train_am_stage(c, l, corpus, backbone);
  if (am->parsed()) return 0;

  if (train->parsed()) {
    for (std::uint64_t seed : seeds_or_all(seeds, c)) {
      pipeline::train_stage(c, l, *train_regime, seed, corpus, backbone, accent);
    }
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  try {
    return run(argc, argv);
  } catch (const intapt::Error &e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(e.code());
  } catch (const std::exception &e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(intapt::ExitCode::kStageFailure);
  }
}
