#include "fixtures.hpp"
#include "intapt/error.hpp"
#include "intapt/eval.hpp"
#include "intapt/probe.hpp"

#include <doctest.h>

using namespace intapt;
using intapt::testing::random_matrix;
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

TEST_CASE("wer tables aggregate per accent, per group and overall") {
  const World &w = world();
  const Recognizer rec(w.backbone);
  const eval::WerTable t = eval::eval_wer(rec, w.corpus, corpus::Split::kL2Test);
  CHECK(t.group.count(eval::kAll) == 1);
  CHECK(t.group.count("L1") == 0);
  CHECK(t.group.at(eval::kAll) == doctest::Approx(eval::weighted_all(t.accent, t.accent_count)));

  double direct = 0.0;
  const auto test = w.corpus.split(corpus::Split::kL2Test);
  for (const auto *u : test) direct += rec.wer(*u);
  CHECK(t.group.at(eval::kAll) == doctest::Approx(direct / test.size()));
  int total = 0;
  for (const auto &[a, n] : t.accent_count) total += n;
  CHECK(total == static_cast<int>(test.size()));
  CHECK(t.group_count.at(eval::kAll) == total);

  const eval::WerTable l1 = eval::eval_wer(rec, w.corpus, corpus::Split::kL1Test);
  CHECK(l1.group.count("L1") == 1);
  CHECK_THROWS_AS(eval::eval_wer(rec, w.corpus, corpus::Split::kL2Train), ConfigError);
}

TEST_CASE("weighted mean of accent columns") {
  const std::map<int, double> w{{1, 0.2}, {2, 0.5}};
  const std::map<int, int> n{{1, 3}, {2, 1}};
  CHECK(eval::weighted_all(w, n) == doctest::Approx((0.6 + 0.5) / 4.0));
}

TEST_CASE("cosine report covers every L2 accent and stays in range") {
  const World &w = world();
  const Recognizer plain(w.backbone);
  const PromptGenerator pg(w.config.prompt, w.config.backbone.d_model, 3);
  const Recognizer prompted(w.backbone, &pg);
  const eval::CosineMethod methods[] = {{"backbone", &plain}, {"prompted", &prompted}};
  const eval::CosineTable t = eval::cosine_report(w.backbone, w.am, methods, w.corpus);
  CHECK(analysis::cosine(t.l1_centroid, t.l1_centroid) == doctest::Approx(1.0));
  for (const auto &[name, per_accent] : t.similarity) {
    CHECK(per_accent.size() == w.corpus.accents().size() - 1);
    CHECK_FALSE(per_accent.contains(w.corpus.l1_accent()));
    for (const auto &[a, c] : per_accent) {
      CHECK(c >= -1.0);
      CHECK(c <= 1.0);
    }
  }
  const eval::CosineMethod null_method[] = {{"none", nullptr}};
  CHECK_THROWS_AS(eval::cosine_report(w.backbone, w.am, null_method, w.corpus), ConfigError);
}

TEST_CASE("accent features of a prompted pass use only the input rows") {
  const World &w = world();
  const Recognizer plain(w.backbone);
  const auto *u = w.corpus.split(corpus::Split::kL2Test).front();
  CHECK((eval::accent_feature(plain, w.am, u->features) -
         w.am.extract(w.backbone.forward(u->features)
                          .hidden.layers[static_cast<std::size_t>(w.config.backbone.tap_layer)]))
            .cwiseAbs()
            .maxCoeff() < 1e-12);
}

TEST_CASE("isolation report shapes") {
  const World &w = world();
  const eval::IsolationReport r = eval::isolation_report(w.backbone, w.am, w.corpus, 1);
  const auto n = static_cast<Eigen::Index>(w.corpus.split(corpus::Split::kL2Test).size());
  CHECK(r.projection.rows() == n);
  CHECK(r.projection.cols() == 2);
  CHECK(r.accent.size() == static_cast<std::size_t>(n));
  CHECK(r.nuisance.size() == static_cast<std::size_t>(n));
  CHECK(r.nuisance_probe.chance >= 0.5);
}

TEST_CASE("linear probes separate separable labels and not shuffled ones") {
  std::mt19937_64 rng(12);
  const int n = 400;
  Matrix x = random_matrix(n, 5, rng);
  std::vector<int> labels(n), shuffled(n);
  for (int i = 0; i < n; ++i) {
    labels[i] = i % 2;
    x(i, 0) += labels[i] ? 3.0 : -3.0;
  }
  shuffled = labels;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto good = analysis::linear_probe(x, labels, 1);
  CHECK(good.test_accuracy > 0.95);
  const auto null = analysis::linear_probe(x, shuffled, 1);
  CHECK(null.test_accuracy < null.chance + 0.1);
}

TEST_CASE("principal projection and correlation helpers") {
  std::mt19937_64 rng(13);
  Matrix x = random_matrix(50, 4, rng, 0.01);
  for (int i = 0; i < 50; ++i) x(i, 2) += i;
  const Matrix p = analysis::project_2d(x);
  CHECK(p.rows() == 50);
  CHECK(p.cols() == 2);
  CHECK(std::abs(p.col(0).mean()) < 1e-9);
  const std::vector<double> a{1, 2, 3, 4}, b{2, 4, 6, 8}, c{4, 3, 2, 1};
  CHECK(analysis::pearson(a, b) == doctest::Approx(1.0));
  CHECK(analysis::pearson(a, c) == doctest::Approx(-1.0));
}

TEST_CASE("summaries report the sample standard deviation") {
  const std::vector<double> one{0.3};
  const eval::Stat s1 = eval::summarize(one);
  CHECK(s1.mean == 0.3);
  CHECK_FALSE(s1.std.has_value());
  const std::vector<double> three{1.0, 2.0, 3.0};
  const eval::Stat s3 = eval::summarize(three);
  CHECK(s3.mean == doctest::Approx(2.0));
  REQUIRE(s3.std.has_value());
  CHECK(*s3.std == doctest::Approx(1.0));
}

TEST_CASE("accent module quality is measured on the dev set") {
  const World &w = world();
  const eval::AccentQuality q = eval::accent_quality(w.backbone, w.am, w.corpus);
  CHECK(q.dev_accuracy >= 0.0);
  CHECK(q.dev_accuracy <= 1.0);
  CHECK(q.intensity_correlation >= -1.0);
  CHECK(q.intensity_correlation <= 1.0);
}
