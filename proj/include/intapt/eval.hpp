#pragma once

// Analyses over trained artifacts: WER tables per accent and group, cosine
// similarity to the L1 accent centroid, and accent-isolation probes.

#include "intapt/probe.hpp"
#include "intapt/trainer.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace intapt::eval {

/// Column name of the utterance-weighted aggregate.
inline constexpr const char *kAll = "ALL";

struct WerTable {
  corpus::Split split = corpus::Split::kL2Test;
  std::map<int, double> accent;          // mean WER per accent id
  std::map<int, int> accent_count;       // utterances per accent id
  std::map<std::string, double> group;   // MFA / LFA / UA / L1 and ALL
  std::map<std::string, int> group_count;
};

/// Greedy-decodes every utterance of an L1 or L2 evaluation split. Throws
/// ConfigError for training splits or an empty split, and
/// InvariantViolation when an utterance's accent does not belong there.
WerTable eval_wer(const Recognizer &recognizer, const corpus::Corpus &corpus, corpus::Split split);

/// Utterance-weighted mean over accent columns.
double weighted_all(const std::map<int, double> &accent, const std::map<int, int> &count);

struct CosineMethod {
  std::string name;
  const Recognizer *recognizer = nullptr;
};

struct CosineTable {
  Vector l1_centroid;
  /// method -> accent id -> mean cosine(z or z', L1 centroid)
  std::map<std::string, std::map<int, double>> similarity;
};

/// Accent feature of one utterance under a recogniser: z without a prompt,
/// z' (over the input rows) with one.
Vector accent_feature(const Recognizer &recognizer, const AccentModule &am, const Matrix &features);

/// The L1 centroid is the mean z of the frozen backbone over l1_test.
/// Throws ConfigError when an L2 accent has no test utterances.
CosineTable cosine_report(const Backbone &backbone, const AccentModule &am,
                          std::span<const CosineMethod> methods, const corpus::Corpus &corpus);

struct IsolationReport {
  Matrix projection;  // n x 2, rows follow l2_test
  std::vector<int> accent;
  std::vector<int> nuisance;
  analysis::ProbeResult accent_probe;
  analysis::ProbeResult nuisance_probe;
};

/// z over l2_test, projected on its top-2 principal axes, plus held-out
/// linear probes for accent id and the nuisance attribute.
IsolationReport isolation_report(const Backbone &backbone, const AccentModule &am,
                                 const corpus::Corpus &corpus, std::uint64_t seed);

struct AccentQuality {
  double dev_accuracy = 0.0;
  /// Pearson correlation of the intensity head with per-frame CTC.
  double intensity_correlation = 0.0;
};
AccentQuality accent_quality(const Backbone &backbone, const AccentModule &am,
                             const corpus::Corpus &corpus);

struct Stat {
  double mean = 0.0;
  std::optional<double> std;  // sample std, present with >= 2 values
  std::vector<double> values;
};
Stat summarize(std::span<const double> values);

struct MethodMetrics {
  std::map<int, Stat> l2_accent;
  std::map<std::string, Stat> l2_group;
  Stat l1_wer;
  /// L1-test WER minus the frozen backbone's.
  Stat l1_delta;
  /// Mean cosine to the L1 centroid per L2 accent (backbone and prompt
  /// regimes only).
  std::map<int, Stat> cosine;
};

struct ParameterCounts {
  std::size_t backbone = 0;
  std::size_t prompt_generator = 0;
  std::size_t critic = 0;
  double ratio = 0.0;  // prompt_generator / backbone
  double cap = 0.0;
};

struct RunSummary {
  std::string regime;
  std::uint64_t seed = 0;
  std::string dir;
  int selected_epoch = 0;
  long steps = 0;
  std::size_t trainable_parameters = 0;
  bool backbone_unchanged = false;
  bool am_unchanged = false;
};

struct MetricsReport {
  int schema_version = 1;
  std::string config_hash;
  std::string corpus_hash;
  std::vector<std::uint64_t> seeds;
  std::map<int, std::string> groups;  // accent id -> group name
  std::map<int, int> l2_test_count;
  int l1_test_count = 0;
  double backbone_l1_dev_wer = 0.0;
  AccentQuality accent_module;
  IsolationReport isolation;
  ParameterCounts parameters;
  /// backbone, finetune, prompt_ctc, intapt
  std::map<std::string, MethodMetrics> methods;
  std::vector<RunSummary> runs;
};

inline constexpr int kReportSchemaVersion = 1;

nlohmann::json to_json(const MetricsReport &r);
MetricsReport report_from_json(const nlohmann::json &j);

/// Structural and arithmetic checks (ALL is the weighted mean of its
/// accents, std present with >= 2 seeds, cosines in [-1, 1], ...).
/// Throws InvariantViolation naming the first failed check.
void validate_report(const nlohmann::json &j);

/// Human-readable WER, L1-regression, cosine and isolation tables.
std::string format_tables(const MetricsReport &r);

}  // namespace intapt::eval
