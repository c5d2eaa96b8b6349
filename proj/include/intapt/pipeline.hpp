#pragma once

// End-to-end experiment driver. Every stage persists its artifact under one
// experiment directory together with a key (hash of everything it depends
// on); a stage whose key matches is loaded instead of recomputed.

#include "intapt/eval.hpp"

#include <filesystem>
#include <optional>

namespace intapt::pipeline {

namespace fs = std::filesystem;

/// The one environment variable the tools read.
inline constexpr const char *kOutputRootEnv = "INTAPT_OUTPUT_ROOT";

/// `flag` when given, else $INTAPT_OUTPUT_ROOT, else "intapt-out".
fs::path output_root(const std::optional<fs::path> &flag = std::nullopt);

struct Layout {
  fs::path dir;

  fs::path config() const { return dir / "config.json"; }
  fs::path corpus() const { return dir / "data" / "corpus.bin"; }
  fs::path backbone() const { return dir / "backbone" / "backbone.ckpt"; }
  fs::path pretrain_report() const { return dir / "backbone" / "pretrain.json"; }
  fs::path accent_module() const { return dir / "accent_module" / "accent_module.ckpt"; }
  fs::path accent_report() const { return dir / "accent_module" / "train.json"; }
  fs::path run(Regime regime, std::uint64_t seed) const;
  fs::path report_dir() const { return dir / "report"; }
};

/// Stage keys: hashes of the config sections each artifact depends on.
std::string corpus_key(const ExperimentConfig &c);
std::string backbone_key(const ExperimentConfig &c);
std::string accent_key(const ExperimentConfig &c);
std::string run_key(const ExperimentConfig &c, Regime regime, std::uint64_t seed);

/// Writes config.json (after validation) and returns the layout.
Layout prepare(const ExperimentConfig &config, const fs::path &dir);

/// Each stage loads its cached artifact when the key matches, otherwise
/// builds and persists it. `reused` reports which happened. Failures are
/// rethrown with the stage name prepended and the same exit category.
corpus::Corpus gen_data(const ExperimentConfig &c, const Layout &l, bool *reused = nullptr);
Backbone pretrain_stage(const ExperimentConfig &c, const Layout &l, const corpus::Corpus &corpus,
                        bool *reused = nullptr);
AccentModule train_am_stage(const ExperimentConfig &c, const Layout &l,
                            const corpus::Corpus &corpus, const Backbone &backbone,
                            bool *reused = nullptr);
RunCheckpoint train_stage(const ExperimentConfig &c, const Layout &l, Regime regime,
                          std::uint64_t seed, const corpus::Corpus &corpus,
                          const Backbone &backbone, const AccentModule &am,
                          bool *reused = nullptr);

/// Recomputes every report cell from the persisted artifacts of `l` alone.
eval::MetricsReport build_report(const Layout &l);

/// report.json (validated), tables.txt, wer.csv, cosine.csv, isolation.csv.
void write_report(const eval::MetricsReport &r, const Layout &l);

/// gen-data -> pretrain -> train-am -> every regime and seed -> report.
eval::MetricsReport run_experiment(const ExperimentConfig &c, const Layout &l);

}  // namespace intapt::pipeline
