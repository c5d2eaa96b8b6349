#include "fixtures.hpp"
#include "intapt/error.hpp"
#include "intapt/json_io.hpp"
#include "intapt/pipeline.hpp"

#include <doctest.h>

#include <cstdlib>

using namespace intapt;
using intapt::testing::TempDir;
using intapt::testing::tiny_config;

TEST_CASE("full pipeline writes a valid report and reuses its stages") {
  TempDir dir("pipeline");
  const ExperimentConfig c = tiny_config();
  const pipeline::Layout l = pipeline::prepare(c, dir.path() / "exp");
  const eval::MetricsReport r = pipeline::run_experiment(c, l);

  for (const char *f : {"report.json", "tables.txt", "wer.csv", "cosine.csv", "isolation.csv"}) {
    CHECK(std::filesystem::exists(l.report_dir() / f));
  }
  const nlohmann::json j = read_json(l.report_dir() / "report.json");
  CHECK_NOTHROW(eval::validate_report(j));
  CHECK(r.runs.size() == 3 * c.regime_seeds.size());
  for (const eval::RunSummary &s : r.runs) CHECK(s.backbone_unchanged);
  for (const eval::RunSummary &s : r.runs) CHECK(s.am_unchanged);
  CHECK(r.parameters.ratio < r.parameters.cap);
  CHECK(r.methods.at("backbone").l1_delta.mean == doctest::Approx(0.0));

  bool reused = false;
  const corpus::Corpus corpus = pipeline::gen_data(c, l, &reused);
  CHECK(reused);
  const Backbone b = pipeline::pretrain_stage(c, l, corpus, &reused);
  CHECK(reused);
  const AccentModule am = pipeline::train_am_stage(c, l, corpus, b, &reused);
  CHECK(reused);
  for (Regime regime : {Regime::kFinetune, Regime::kPromptCtc, Regime::kIntapt}) {
    pipeline::train_stage(c, l, regime, c.regime_seeds.front(), corpus, b, am, &reused);
    CHECK(reused);
  }

  const eval::MetricsReport again = pipeline::build_report(l);
  CHECK(eval::to_json(again) == eval::to_json(r));

  ExperimentConfig changed = c;
  changed.train.lambda_mi = 0.7;
  pipeline::train_stage(changed, l, Regime::kPromptCtc, c.regime_seeds.front(), corpus, b, am,
                        &reused);
  CHECK(reused);  // prompt_ctc does not depend on lambda
  CHECK(pipeline::run_key(changed, Regime::kIntapt, 1) != pipeline::run_key(c, Regime::kIntapt, 1));
  CHECK(pipeline::corpus_key(changed) == pipeline::corpus_key(c));
  changed.train.lr_prompt *= 2;
  CHECK(pipeline::run_key(changed, Regime::kFinetune, 1) == pipeline::run_key(c, Regime::kFinetune, 1));
  CHECK(pipeline::run_key(changed, Regime::kPromptCtc, 1) != pipeline::run_key(c, Regime::kPromptCtc, 1));
}

TEST_CASE("report validation catches inconsistent cells") {
  TempDir dir("report");
  const ExperimentConfig c = tiny_config();
  const pipeline::Layout l = pipeline::prepare(c, dir.path());
  const nlohmann::json good = eval::to_json(pipeline::run_experiment(c, l));

  nlohmann::json bad_all = good;
  auto &all = bad_all["methods"]["intapt"]["l2_group"][eval::kAll];
  all["values"][0] = all["values"][0].get<double>() + 0.1;
  CHECK_THROWS_AS(eval::validate_report(bad_all), InvariantViolation);

  nlohmann::json missing = good;
  missing["methods"].erase("finetune");
  CHECK_THROWS_AS(eval::validate_report(missing), InvariantViolation);

  nlohmann::json cos = good;
  auto &cell = cos["methods"]["intapt"]["cosine"].begin().value();
  cell["values"][0] = 1.5;
  CHECK_THROWS_AS(eval::validate_report(cos), InvariantViolation);

  nlohmann::json no_std = good;
  no_std["methods"]["prompt_ctc"]["l1_wer"].erase("std");
  CHECK_THROWS_AS(eval::validate_report(no_std), InvariantViolation);
}

TEST_CASE("a corpus swapped behind the pipeline's back is detected") {
  TempDir dir("swap");
  const ExperimentConfig c = tiny_config();
  const pipeline::Layout l = pipeline::prepare(c, dir.path());
  pipeline::run_experiment(c, l);
  ExperimentConfig other = c;
  other.seed += 1;
  corpus::save_corpus(l.corpus(), corpus::build_corpus(other));
  CHECK_THROWS_AS(pipeline::build_report(l), InvariantViolation);
}

TEST_CASE("stage errors carry the stage name and exit category") {
  TempDir dir("fail");
  ExperimentConfig c = tiny_config();
  c.pretrain.target_wer = 0.0;
  const pipeline::Layout l = pipeline::prepare(c, dir.path());
  const corpus::Corpus corpus = pipeline::gen_data(c, l);
  try {
    pipeline::pretrain_stage(c, l, corpus);
    FAIL("pretraining to zero WER in one epoch should fail");
  } catch (const StageError &e) {
    CHECK(std::string(e.what()).find("stage pretrain") != std::string::npos);
    CHECK(e.code() == ExitCode::kStageFailure);
  }
}

TEST_CASE("output root resolution") {
  CHECK(pipeline::output_root(std::filesystem::path("x")) == "x");
  ::setenv(pipeline::kOutputRootEnv, "/tmp/from-env", 1);
  CHECK(pipeline::output_root() == "/tmp/from-env");
  ::unsetenv(pipeline::kOutputRootEnv);
  CHECK(pipeline::output_root() == "intapt-out");
}

TEST_CASE("config files reject unknown keys and bad values") {
  TempDir dir("config");
  ExperimentConfig c = tiny_config();
  save_config(dir.path() / "c.json", c);
  const ExperimentConfig back = load_config(dir.path() / "c.json");
  CHECK(nlohmann::json(back) == nlohmann::json(c));
  CHECK(config_hash(back) == config_hash(c));

  nlohmann::json j = nlohmann::json(c);
  j["train"]["lambda"] = 1.0;
  write_json(dir.path() / "typo.json", j);
  CHECK_THROWS_AS(load_config(dir.path() / "typo.json"), ConfigError);

  nlohmann::json neg = nlohmann::json(c);
  neg["train"]["lambda_mi"] = -1.0;
  write_json(dir.path() / "neg.json", neg);
  CHECK_THROWS_AS(load_config(dir.path() / "neg.json"), ConfigError);

  nlohmann::json wrong_type = nlohmann::json(c);
  wrong_type["train"]["epochs"] = "many";
  write_json(dir.path() / "type.json", wrong_type);
  CHECK_THROWS_AS(load_config(dir.path() / "type.json"), ConfigError);

  ExperimentConfig no_mfa = c;
  no_mfa.corpus.groups = {AccentGroup::kL1, AccentGroup::kUA};
  CHECK_THROWS_AS(validate(no_mfa), ConfigError);
}
