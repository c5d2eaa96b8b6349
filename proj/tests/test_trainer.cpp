#include "fixtures.hpp"
#include "intapt/error.hpp"
#include "intapt/json_io.hpp"
#include "intapt/trainer.hpp"

#include <doctest.h>

using namespace intapt;
using intapt::testing::log_softmax;
using intapt::testing::random_matrix;
using intapt::testing::TempDir;
using intapt::testing::tiny_config;

namespace {

struct World {
  ExperimentConfig config = tiny_config();
  corpus::Corpus corpus = corpus::build_corpus(config);
  Backbone backbone = Backbone(config.backbone, 5);
  AccentModule am = train_am(corpus, backbone, config);
};

const World &world() {
  static const World w;
  return w;
}

}  // namespace

TEST_CASE("ctc over a prompted output keeps or drops the prompt rows") {
  std::mt19937_64 rng(1);
  const Matrix lp = log_softmax(random_matrix(7, 4, rng));
  const std::vector<int> target{1, 3};
  CHECK(ctc_over_prompted_output(lp, target, 2, false) == doctest::Approx(ctc::loss(lp, target)));
  CHECK(ctc_over_prompted_output(lp, target, 2, true) ==
        doctest::Approx(ctc::loss(lp.bottomRows(5), target)));
  CHECK(ctc_over_prompted_output(lp, target, 0, true) == doctest::Approx(ctc::loss(lp, target)));

  const Matrix small = log_softmax(random_matrix(6, 3, rng));
  const auto oracle = ctc::loss_oracle(small.bottomRows(4), std::vector<int>{1, 2});
  REQUIRE(oracle.has_value());
  CHECK(ctc_over_prompted_output(small, std::vector<int>{1, 2}, 2, true) ==
        doctest::Approx(*oracle).epsilon(1e-10));

  nn::Graph g;
  nn::Var v = g.leaf(lp);
  nn::Var l = ctc_over_prompted_output(v, target, 2, true);
  g.backward(l);
  CHECK(g.grad(v).topRows(2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(l.scalar() == doctest::Approx(ctc::loss(lp.bottomRows(5), target)));
}

TEST_CASE("decoding reads only the input frames of a prompted output") {
  const World &w = world();
  const PromptGenerator pg(w.config.prompt, w.config.backbone.d_model, 2);
  const Recognizer rec(w.backbone, &pg);
  const corpus::Utterance &u = *w.corpus.split(corpus::Split::kL2Test).front();
  const Recognizer::Pass pass = rec.run(u.features);
  CHECK(pass.prompt.rows() == w.config.prompt.length);
  CHECK(pass.log_probs.rows() == u.features.rows() + w.config.prompt.length);
  CHECK(pass.input_tap().rows() == u.features.rows());
  CHECK(rec.decode(u.features) ==
        ctc::greedy_decode(pass.log_probs.bottomRows(u.features.rows())));
}

TEST_CASE("prompt regimes keep the backbone and accent module frozen") {
  const World &w = world();
  const std::string bb = w.backbone.fingerprint();
  const std::string am = w.am.fingerprint();
  for (Regime r : {Regime::kPromptCtc, Regime::kIntapt}) {
    CAPTURE(to_string(r));
    const RunCheckpoint ck = train_regime(r, w.corpus, w.backbone, &w.am, w.config, 1);
    CHECK(ck.fingerprints.backbone_start == bb);
    CHECK(ck.fingerprints.backbone_end == bb);
    CHECK(ck.fingerprints.am_start == am);
    CHECK(ck.fingerprints.am_end == am);
    CHECK(ck.generator.has_value());
    CHECK(ck.trainable_parameters == ck.generator->parameter_count());
    CHECK(ck.steps > 0);
    CHECK(ck.loss_trace.size() == static_cast<std::size_t>(ck.steps));
  }
  CHECK(w.backbone.fingerprint() == bb);
  CHECK(w.am.fingerprint() == am);
}

TEST_CASE("intapt with lambda zero reproduces prompt_ctc") {
  const World &w = world();
  ExperimentConfig c = w.config;
  c.train.lambda_mi = 0.0;
  const RunCheckpoint base = train_prompt_ctc(w.corpus, w.backbone, c, 2, &w.am);
  const RunCheckpoint zero = train_intapt(w.corpus, w.backbone, w.am, c, 2);
  CHECK(zero.fingerprints.generator == base.fingerprints.generator);
  CHECK(zero.loss_trace == base.loss_trace);
  CHECK(zero.selected_epoch == base.selected_epoch);

  c.train.lambda_mi = 1.0;
  const RunCheckpoint on = train_intapt(w.corpus, w.backbone, w.am, c, 2);
  CHECK(on.loss_trace != base.loss_trace);
  CHECK(on.critic.has_value());
  CHECK(on.mi_trace.size() == static_cast<std::size_t>(on.steps));
}

TEST_CASE("training is deterministic for a fixed seed") {
  const World &w = world();
  ExperimentConfig c = w.config;
  c.train.epochs = 3;
  const RunCheckpoint a = train_intapt(w.corpus, w.backbone, w.am, c, 3);
  const RunCheckpoint b = train_intapt(w.corpus, w.backbone, w.am, c, 3);
  REQUIRE(a.loss_trace.size() == b.loss_trace.size());
  const std::size_t n = std::min<std::size_t>(100, a.loss_trace.size());
  for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(a.loss_trace[i] - b.loss_trace[i]) < 1e-6);
  CHECK(a.fingerprints.generator == b.fingerprints.generator);
  CHECK(a.fingerprints.critic == b.fingerprints.critic);

  const RunCheckpoint other = train_intapt(w.corpus, w.backbone, w.am, c, 4);
  CHECK(other.fingerprints.generator != a.fingerprints.generator);
}

TEST_CASE("step limits are honoured") {
  const World &w = world();
  ExperimentConfig c = w.config;
  c.train.max_steps = 3;
  const RunCheckpoint ck = train_intapt(w.corpus, w.backbone, w.am, c, 1);
  CHECK(ck.steps == 3);
}

TEST_CASE("finetune trains a copy") {
  const World &w = world();
  const std::string bb = w.backbone.fingerprint();
  const RunCheckpoint ck = train_finetune(w.corpus, w.backbone, w.config, 1);
  REQUIRE(ck.finetuned.has_value());
  CHECK(ck.finetuned->fingerprint() != bb);
  CHECK(w.backbone.fingerprint() == bb);
  CHECK(ck.fingerprints.backbone_start == bb);
  CHECK(ck.fingerprints.backbone_end == bb);
  CHECK(ck.trainable_parameters == w.backbone.parameter_count());
}

TEST_CASE("model selection picks the best dev epoch") {
  const World &w = world();
  ExperimentConfig c = w.config;
  c.train.epochs = 3;
  const RunCheckpoint ck = train_prompt_ctc(w.corpus, w.backbone, c, 1);
  REQUIRE(ck.history.size() == 4);
  for (const EvalRecord &r : ck.history) {
    CHECK(ck.history[static_cast<std::size_t>(ck.selected_epoch)].dev_wer <= r.dev_wer);
  }
}

TEST_CASE("run checkpoints round-trip and detect tampering") {
  const World &w = world();
  TempDir dir("run");
  const RunCheckpoint ck = train_intapt(w.corpus, w.backbone, w.am, w.config, 1);
  ck.save(dir.path());
  const RunCheckpoint back = RunCheckpoint::load(dir.path());
  CHECK(back.regime == Regime::kIntapt);
  CHECK(back.fingerprints.generator == ck.fingerprints.generator);
  CHECK(back.critic->fingerprint() == ck.critic->fingerprint());
  CHECK(back.loss_trace == ck.loss_trace);
  CHECK(back.history.size() == ck.history.size());
  const corpus::Utterance &u = *w.corpus.split(corpus::Split::kL2Test).front();
  CHECK(back.recognizer(w.backbone).decode(u.features) == ck.recognizer(w.backbone).decode(u.features));

  nlohmann::json f = read_json(dir.path() / "fingerprints.json");
  f["generator"] = std::string(64, '0');
  write_json(dir.path() / "fingerprints.json", f);
  CHECK_THROWS_AS(RunCheckpoint::load(dir.path()), InvariantViolation);
}

TEST_CASE("regime arguments are checked") {
  const World &w = world();
  CHECK_THROWS_AS(regime_from_string("adapter"), ConfigError);
  CHECK_THROWS_AS(train_regime(Regime::kIntapt, w.corpus, w.backbone, nullptr, w.config, 1),
                  ConfigError);
  for (Regime r : {Regime::kFinetune, Regime::kPromptCtc, Regime::kIntapt}) {
    CHECK(regime_from_string(to_string(r)) == r);
  }
  const RunSeeds a = run_seeds(1, 2), b = run_seeds(1, 3);
  CHECK(a.generator != b.generator);
}
