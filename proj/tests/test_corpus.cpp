#include "fixtures.hpp"
#include "intapt/error.hpp"
#include "intapt/synthcorpus.hpp"

#include <doctest.h>

#include <fstream>
#include <iterator>
#include <set>

using namespace intapt;
using namespace intapt::corpus;
using intapt::testing::TempDir;
using intapt::testing::tiny_config;

namespace {

std::string file_bytes(const std::filesystem::path &p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

const Corpus &tiny_corpus() {
  static const Corpus c = build_corpus(tiny_config());
  return c;
}

}  // namespace

TEST_CASE("corpus generation is deterministic down to the file bytes") {
  TempDir dir("corpus");
  const Corpus a = build_corpus(tiny_config());
  const Corpus b = build_corpus(tiny_config());
  CHECK(a == b);
  save_corpus(dir.path() / "a.bin", a);
  save_corpus(dir.path() / "b.bin", b);
  CHECK(file_bytes(dir.path() / "a.bin") == file_bytes(dir.path() / "b.bin"));

  ExperimentConfig other = tiny_config();
  other.seed += 1;
  CHECK_FALSE(build_corpus(other) == a);
}

TEST_CASE("corpus file round-trips and reports its header") {
  TempDir dir("corpus-rt");
  const Corpus &c = tiny_corpus();
  const auto path = dir.path() / "c.bin";
  save_corpus(path, c);
  CHECK(load_corpus(path) == c);
  const CorpusFileInfo info = inspect_corpus(path);
  CHECK(info.format_version == kCorpusFormatVersion);
  CHECK(info.config_hash == c.config_hash());
  CHECK(info.n_utterances == c.utterances().size());
  CHECK(info.n_records == c.utterances().size());
}

TEST_CASE("corrupt or truncated corpus files are rejected") {
  TempDir dir("corpus-bad");
  const auto path = dir.path() / "c.bin";
  save_corpus(path, tiny_corpus());
  const std::string bytes = file_bytes(path);

  std::string flipped = bytes;
  flipped[bytes.size() / 2] = static_cast<char>(flipped[bytes.size() / 2] ^ 0x5a);
  std::ofstream(dir.path() / "flip.bin", std::ios::binary) << flipped;
  CHECK_THROWS_AS(load_corpus(dir.path() / "flip.bin"), StageError);

  std::ofstream(dir.path() / "cut.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 9);
  CHECK_THROWS_AS(load_corpus(dir.path() / "cut.bin"), StageError);

  std::ofstream(dir.path() / "tiny.bin", std::ios::binary) << bytes.substr(0, 5);
  CHECK_THROWS_AS(load_corpus(dir.path() / "tiny.bin"), StageError);
  CHECK_THROWS_AS(load_corpus(dir.path() / "missing.bin"), StageError);
}

TEST_CASE("splits satisfy the regime layout") {
  const Corpus &c = tiny_corpus();
  CHECK_NOTHROW(validate_splits(c));
  std::map<int, int> train;
  for (const Utterance *u : c.split(Split::kL2Train)) ++train[u->accent_id];
  const auto mfa = c.accents_in(AccentGroup::kMFA);
  const auto lfa = c.accents_in(AccentGroup::kLFA);
  const auto ua = c.accents_in(AccentGroup::kUA);
  REQUIRE(mfa.size() == 2);
  REQUIRE(lfa.size() == 2);
  REQUIRE(ua.size() == 2);
  CHECK(train[mfa[0]] == train[mfa[1]]);
  for (int a : lfa) CHECK(train[a] == train[mfa[0]] / 2);
  for (int a : ua) CHECK(train[a] == 0);
  for (const Utterance *u : c.split(Split::kL2Test)) CHECK(c.group(u->accent_id) != AccentGroup::kL1);
  for (const Utterance *u : c.split(Split::kL1Test)) CHECK(u->accent_id == c.l1_accent());
  for (int a : ua) {
    bool in_test = false;
    for (const Utterance *u : c.split(Split::kL2Test)) in_test |= u->accent_id == a;
    CHECK(in_test);
  }
}

TEST_CASE("split tampering is detected") {
  const Corpus &c = tiny_corpus();
  CorpusSplits leaked = c.splits();
  leaked.l2_test.push_back(leaked.l2_train.front());
  const Corpus bad(c.config_hash(), c.render(), c.accents(), c.utterances(), leaked);
  CHECK_THROWS_AS(validate_splits(bad), InvariantViolation);

  CorpusSplits ua_trained = c.splits();
  for (const std::string &id : c.splits().l2_test) {
    if (c.group(c.get(id).accent_id) == AccentGroup::kUA) {
      ua_trained.l2_test.erase(std::find(ua_trained.l2_test.begin(), ua_trained.l2_test.end(), id));
      ua_trained.l2_train.push_back(id);
      break;
    }
  }
  const Corpus bad2(c.config_hash(), c.render(), c.accents(), c.utterances(), ua_trained);
  CHECK_THROWS_AS(validate_splits(bad2), InvariantViolation);
}

TEST_CASE("utterances are consistent with their labels") {
  const Corpus &c = tiny_corpus();
  for (const Utterance &u : c.utterances()) {
    CHECK(u.features.cols() == c.d_feat());
    CHECK(ctc::feasible(static_cast<int>(u.features.rows()), u.transcript));
    CHECK(u.intensity >= 0.0);
    CHECK(u.intensity <= 1.0);
    if (u.accent_id == c.l1_accent()) CHECK(u.intensity == 0.0);
  }
}

TEST_CASE("accent directions are distinct, unit-norm and antipodal in pairs") {
  AccentLayout layout;
  layout.subspace_dim = 2;
  layout.antipodal_pairs = true;
  const auto specs = gen_accent_specs(7, 16, 3, layout);
  REQUIRE(specs.size() == 7);
  for (std::size_t a = 0; a < specs.size(); ++a) {
    CHECK(specs[a].direction.norm() == doctest::Approx(1.0));
    for (std::size_t b = 0; b < a; ++b) CHECK(specs[a].direction.dot(specs[b].direction) < 0.8);
  }
  Vector mean = Vector::Zero(16);
  for (std::size_t a = 1; a < specs.size(); ++a) mean += specs[a].direction;
  CHECK(mean.norm() < 1e-9);
  for (std::size_t a = 1; a + 1 < specs.size(); a += 2) {
    CHECK((specs[a].direction + specs[a + 1].direction).norm() < 1e-12);
  }

  AccentLayout shared;
  shared.shared_direction = 0.5;
  const auto blended = gen_accent_specs(4, 8, 3, shared);
  for (std::size_t a = 0; a < blended.size(); ++a) {
    for (std::size_t b = 0; b < a; ++b) {
      CHECK(blended[a].direction.dot(blended[b].direction) == doctest::Approx(0.5));
    }
  }
}

TEST_CASE("antipodal layouts in a plane can be placed for any seed") {
  AccentLayout layout;
  layout.subspace_dim = 2;
  layout.antipodal_pairs = true;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    CAPTURE(seed);
    CHECK_NOTHROW(gen_accent_specs(7, 16, seed, layout));
  }
}

TEST_CASE("accent spec generation rejects impossible layouts") {
  CHECK_THROWS_AS(gen_accent_specs(1, 8, 1), ConfigError);
  CHECK_THROWS_AS(gen_accent_specs(9, 8, 1), ConfigError);
  AccentLayout l;
  l.subspace_dim = 1;
  CHECK_THROWS_AS(gen_accent_specs(3, 8, 1, l), ConfigError);
  l.subspace_dim = 9;
  CHECK_THROWS_AS(gen_accent_specs(3, 8, 1, l), ConfigError);
  AccentLayout swaps;
  swaps.vocab_size = 4;
  swaps.shared_swaps = 2;
  swaps.private_swaps = 1;
  CHECK_THROWS_AS(gen_accent_specs(3, 8, 1, swaps), ConfigError);
  AccentLayout warp;
  warp.warp_min = 0.5;
  warp.warp_max = 0.1;
  CHECK_THROWS_AS(gen_accent_specs(3, 8, 1, warp), ConfigError);
}

TEST_CASE("token substitutions are disjoint swaps with a shared core") {
  AccentLayout l;
  l.vocab_size = 10;
  l.shared_swaps = 2;
  l.private_swaps = 1;
  const auto specs = gen_accent_specs(4, 8, 9, l);
  std::set<std::pair<int, int>> common;
  for (std::size_t a = 0; a < specs.size(); ++a) {
    const auto &s = specs[a].substitution;
    REQUIRE(s.size() == 10);
    std::set<std::pair<int, int>> pairs;
    for (int k = 1; k <= 10; ++k) {
      const int j = s[static_cast<std::size_t>(k - 1)];
      CHECK(s[static_cast<std::size_t>(j - 1)] == k);
      if (j != k) pairs.insert({std::min(j, k), std::max(j, k)});
    }
    CHECK(pairs.size() == 3);
    if (a == 0) {
      common = pairs;
    } else {
      std::set<std::pair<int, int>> both;
      std::set_intersection(pairs.begin(), pairs.end(), common.begin(), common.end(),
                            std::inserter(both, both.begin()));
      CHECK(both.size() >= 2);
    }
  }
}

TEST_CASE("substitution map is orthogonal and moves swapped prototypes towards their partners") {
  const Corpus &c = tiny_corpus();
  const Matrix &p = c.render().prototypes;
  const AccentSpec &spec = c.accents().at(1);
  REQUIRE_FALSE(spec.substitution.empty());
  const Matrix m = substitution_matrix(spec, p);
  const Eigen::Index d = p.cols();
  CHECK((m.transpose() * m - Matrix::Identity(d, d)).cwiseAbs().maxCoeff() < 1e-9);

  for (int k = 1; k <= c.vocab_size(); ++k) {
    const int j = spec.substitution[static_cast<std::size_t>(k - 1)];
    if (j == k) continue;
    const double before = (p.row(k - 1) - p.row(j - 1)).norm();
    const double after = (p.row(k - 1) * m - p.row(j - 1)).norm();
    CHECK(after < before);
  }

  const Eigen::JacobiSVD<Matrix> svd(p, Eigen::ComputeFullV);
  const Eigen::Index rank = svd.rank();
  for (Eigen::Index i = rank; i < d; ++i) {
    const nn::RowVector v = svd.matrixV().col(i).transpose();
    CHECK((v * m - v).norm() < 1e-9);
  }

  AccentSpec none = spec;
  none.substitution.clear();
  CHECK(substitution_matrix(none, p) == Matrix::Identity(d, d));
}

TEST_CASE("mixing matrices are orthogonal and seeded") {
  const AccentSpec &spec = tiny_corpus().accents().at(2);
  const Matrix m = mixing_matrix(spec, 16);
  CHECK((m.transpose() * m - Matrix::Identity(16, 16)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(mixing_matrix(spec, 16) == m);
}

TEST_CASE("zero intensity renders the un-accented utterance") {
  const Corpus &c = tiny_corpus();
  const std::vector<int> t{1, 2, 3};
  RenderSettings r = c.render();
  r.substitution_strength = 0.0;
  const Utterance u = synthesize_utterance(r, t, c.accents().at(3), 0.0, 1, 42);
  CHECK(u.features == render_base(r, t, 1, 42));
  const Utterance accented = synthesize_utterance(r, t, c.accents().at(3), 1.0, 1, 42);
  const bool changed = accented.features.rows() != u.features.rows() || accented.features != u.features;
  CHECK(changed);
}

TEST_CASE("synthesis rejects bad arguments") {
  const Corpus &c = tiny_corpus();
  const AccentSpec &s = c.accents().at(1);
  CHECK_THROWS_AS(synthesize_utterance(c.render(), std::vector<int>{}, s, 0.5, 0, 1), ConfigError);
  CHECK_THROWS_AS(synthesize_utterance(c.render(), std::vector<int>{99}, s, 0.5, 0, 1), ConfigError);
  CHECK_THROWS_AS(synthesize_utterance(c.render(), std::vector<int>{1}, s, 1.5, 0, 1), ConfigError);
  CHECK_THROWS_AS(synthesize_utterance(c.render(), std::vector<int>{1}, s, 0.5, 2, 1), ConfigError);
}

TEST_CASE("the nuisance attribute is balanced and orthogonal to accent directions") {
  const Corpus &c = tiny_corpus();
  for (const AccentSpec &s : c.accents()) {
    CHECK(std::abs(s.direction.dot(c.render().nuisance_direction)) < 1e-9);
  }
  int ones = 0, total = 0;
  for (const Utterance &u : c.utterances()) {
    ones += u.nuisance;
    ++total;
  }
  CHECK(ones > total / 4);
  CHECK(ones < 3 * total / 4);
}

TEST_CASE("split names round-trip") {
  for (Split s : {Split::kL1Pretrain, Split::kL1Dev, Split::kL1Test, Split::kL2Train,
                  Split::kL2Dev, Split::kL2Test}) {
    CHECK(split_from_string(to_string(s)) == s);
  }
  CHECK_THROWS_AS(split_from_string("train"), ConfigError);
}
