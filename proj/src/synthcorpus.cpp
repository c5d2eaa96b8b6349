#include "intapt/synthcorpus.hpp"

#include "intapt/error.hpp"
#include "intapt/hash.hpp"
#include "intapt/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace intapt::corpus {

namespace {

using Rng = std::mt19937_64;

// Salts for child seeds.
constexpr std::uint64_t kSaltPrototypes = 1;
constexpr std::uint64_t kSaltAccents = 2;
constexpr std::uint64_t kSaltNuisance = 3;
constexpr std::uint64_t kSaltTranscripts = 4;
constexpr std::uint64_t kSaltSpeakers = 5;
constexpr std::uint64_t kSaltUtterance = 6;
constexpr std::uint64_t kSaltLfa = 7;
constexpr std::uint64_t kSaltWarp = 101;
constexpr std::uint64_t kSaltNoise = 102;
constexpr std::uint64_t kSaltIntensity = 103;

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng &rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n01(rng);
  }
  return m;
}

Matrix random_orthogonal(int d, Rng &rng) {
  Eigen::HouseholderQR<Matrix> qr(gaussian_matrix(d, d, rng));
  Matrix q = qr.householderQ();
  // Fix column signs so the factorisation is unique.
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < d; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return q;
}

double beta22(Rng &rng) {
  std::gamma_distribution<double> g(2.0, 1.0);
  const double a = g(rng), b = g(rng);
  return a / (a + b);
}

void check_transcript(std::span<const int> transcript, int vocab) {
  if (transcript.empty()) throw ConfigError("synthesize: transcript must be nonempty");
  for (int t : transcript) {
    if (t < 1 || t > vocab) throw ConfigError("synthesize: token outside 1..V");
  }
}

Matrix render_frames(const RenderSettings &r, std::span<const int> transcript,
                     std::span<const int> durations, Rng &noise_rng) {
  int total = 0;
  for (int d : durations) total += d;
  const Eigen::Index d_feat = r.prototypes.cols();
  Matrix x(total, d_feat);
  std::normal_distribution<double> noise(0.0, r.noise_sigma);
  Eigen::Index t = 0;
  for (std::size_t k = 0; k < transcript.size(); ++k) {
    for (int f = 0; f < durations[k]; ++f, ++t) {
      for (Eigen::Index j = 0; j < d_feat; ++j) {
        x(t, j) = r.prototypes(transcript[k] - 1, j) + (r.noise_sigma > 0 ? noise(noise_rng) : 0.0);
      }
    }
  }
  return x;
}

void add_nuisance(const RenderSettings &r, int nuisance, Matrix &x) {
  const double sign = nuisance != 0 ? 1.0 : -1.0;
  x.rowwise() += (sign * r.nuisance_scale) * r.nuisance_direction.transpose();
}

}  // namespace

// --- accents ----------------------------------------------------------------

std::vector<AccentSpec> gen_accent_specs(int n_accents, int d_feat, std::uint64_t seed,
                                         const AccentLayout &layout) {
  if (n_accents < 2) throw ConfigError("gen_accent_specs: need at least one L1 and one L2 accent");
  if (n_accents > d_feat) {
    throw ConfigError("gen_accent_specs: " + std::to_string(n_accents) +
                      " accents cannot have distinct directions in " + std::to_string(d_feat) +
                      " dimensions");
  }
  const double shared = layout.shared_direction;
  if (layout.warp_min < 0 || layout.warp_max < layout.warp_min) {
    throw ConfigError("gen_accent_specs: bad warp range");
  }
  if (!(shared >= 0.0 && shared < 0.8)) throw ConfigError("gen_accent_specs: shared must lie in [0, 0.8)");
  if (layout.subspace_dim < 0 || layout.subspace_dim == 1) {
    throw ConfigError("gen_accent_specs: subspace_dim must be 0 or at least 2");
  }
  const int private_axes = layout.subspace_dim == 0 ? n_accents : layout.subspace_dim;
  const int needed = private_axes + (shared > 0.0 ? 1 : 0);
  if (needed > d_feat) {
    throw ConfigError("gen_accent_specs: " + std::to_string(needed) + " axes do not fit in " +
                      std::to_string(d_feat) + " dimensions");
  }
  const int swaps = layout.shared_swaps + layout.private_swaps;
  if (layout.shared_swaps < 0 || layout.private_swaps < 0 ||
      (swaps > 0 && 2 * swaps > layout.vocab_size)) {
    throw ConfigError("gen_accent_specs: " + std::to_string(swaps) +
                      " token swaps do not fit in a vocabulary of " +
                      std::to_string(layout.vocab_size));
  }

  Rng rng(seed);
  const Matrix basis = random_orthogonal(d_feat, rng);
  const Vector common = basis.col(std::min(private_axes, d_feat - 1));
  const Matrix axes = basis.leftCols(private_axes);

  // Private parts are redrawn until every pairwise cosine is below 0.8.
  std::vector<Vector> priv(static_cast<std::size_t>(n_accents));
  std::normal_distribution<double> n01(0.0, 1.0);
  auto direction = [&](std::size_t a) {
    return (std::sqrt(1.0 - shared) * priv[a] + std::sqrt(shared) * common).normalized();
  };
  // Greedy placement can reach a dead end in a small subspace; the whole
  // layout is then redrawn.
  auto place_all = [&] {
    for (std::size_t a = 0; a < priv.size(); ++a) {
      const bool paired = layout.antipodal_pairs && a % 2 == 1 && a + 1 < priv.size();
      if (layout.antipodal_pairs && a >= 2 && a % 2 == 0) continue;  // set with its partner
      for (int attempt = 0;; ++attempt) {
        if (layout.subspace_dim == 0) {
          priv[a] = axes.col(static_cast<Eigen::Index>(a));
        } else {
          Vector w(layout.subspace_dim);
          for (int i = 0; i < layout.subspace_dim; ++i) w(i) = n01(rng);
          priv[a] = (axes * w).normalized();
        }
        if (paired) priv[a + 1] = -priv[a];
        bool ok = true;
        for (std::size_t b = 0; b < a && ok; ++b) {
          ok = direction(a).dot(direction(b)) < 0.8 &&
               (!paired || direction(a + 1).dot(direction(b)) < 0.8);
        }
        if (ok) break;
        if (attempt > 10000 || layout.subspace_dim == 0) return false;
      }
    }
    return true;
  };
  for (int restart = 0; !place_all(); ++restart) {
    if (restart >= 100) throw ConfigError("gen_accent_specs: cannot place distinct directions");
  }

  // Tokens 1..V in a seeded order; the first 2 * shared_swaps form the
  // common swaps, each accent draws its private swaps from the rest.
  std::vector<int> tokens(static_cast<std::size_t>(std::max(layout.vocab_size, 0)));
  std::iota(tokens.begin(), tokens.end(), 1);
  std::shuffle(tokens.begin(), tokens.end(), rng);
  const auto n_common = static_cast<std::ptrdiff_t>(2 * layout.shared_swaps);

  std::vector<AccentSpec> specs;
  for (int a = 0; a < n_accents; ++a) {
    AccentSpec s;
    s.accent_id = a;
    s.mixing_seed = mix_seed(seed, static_cast<std::uint64_t>(a) + 1000);
    s.direction = direction(static_cast<std::size_t>(a));
    s.warp_min = layout.warp_min;
    s.warp_max = layout.warp_max;
    if (swaps > 0) {
      s.substitution.resize(tokens.size());
      std::iota(s.substitution.begin(), s.substitution.end(), 1);
      std::vector<int> rest(tokens.begin() + n_common, tokens.end());
      Rng own(s.mixing_seed);
      std::shuffle(rest.begin(), rest.end(), own);
      std::vector<int> pairs(tokens.begin(), tokens.begin() + n_common);
      pairs.insert(pairs.end(), rest.begin(), rest.begin() + 2 * layout.private_swaps);
      for (std::size_t i = 0; i + 1 < pairs.size(); i += 2) {
        s.substitution[static_cast<std::size_t>(pairs[i] - 1)] = pairs[i + 1];
        s.substitution[static_cast<std::size_t>(pairs[i + 1] - 1)] = pairs[i];
      }
    }
    specs.push_back(std::move(s));
  }
  return specs;
}

Matrix mixing_matrix(const AccentSpec &spec, int d_feat) {
  Rng rng(spec.mixing_seed);
  return random_orthogonal(d_feat, rng);
}

Matrix substitution_matrix(const AccentSpec &spec, const Matrix &prototypes) {
  const Eigen::Index d = prototypes.cols();
  if (spec.substitution.empty()) return Matrix::Identity(d, d);
  if (static_cast<Eigen::Index>(spec.substitution.size()) != prototypes.rows()) {
    throw ConfigError("substitution_matrix: substitution does not match the vocabulary");
  }
  Matrix target(prototypes.rows(), d);
  for (Eigen::Index k = 0; k < prototypes.rows(); ++k) {
    target.row(k) = prototypes.row(spec.substitution[static_cast<std::size_t>(k)] - 1);
  }
  // Procrustes: argmin over orthogonal M of |P M - P_sub|, with the
  // complement of the prototype row space held fixed.
  const Eigen::JacobiSVD<Matrix> span(prototypes, Eigen::ComputeFullV);
  const Eigen::Index rank = span.rank();
  const Matrix null_basis = span.matrixV().rightCols(d - rank);
  const Matrix m = prototypes.transpose() * target + null_basis * null_basis.transpose();
  const Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

// --- rendering --------------------------------------------------------------

Matrix render_base(const RenderSettings &render, std::span<const int> transcript, int nuisance,
                   std::uint64_t seed) {
  check_transcript(transcript, static_cast<int>(render.prototypes.rows()));
  std::vector<int> durations(transcript.size(), render.frames_per_token);
  Rng noise_rng(mix_seed(seed, kSaltNoise));
  Matrix x = render_frames(render, transcript, durations, noise_rng);
  add_nuisance(render, nuisance, x);
  return x;
}

Utterance synthesize_utterance(const RenderSettings &render, std::span<const int> transcript,
                               const AccentSpec &spec, double intensity, int nuisance,
                               std::uint64_t seed, std::string id) {
  if (!(intensity >= 0.0 && intensity <= 1.0)) throw ConfigError("synthesize: intensity outside [0, 1]");
  if (nuisance != 0 && nuisance != 1) throw ConfigError("synthesize: nuisance must be 0 or 1");
  check_transcript(transcript, static_cast<int>(render.prototypes.rows()));

  Rng warp_rng(mix_seed(seed, kSaltWarp));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double magnitude = intensity * (spec.warp_min + (spec.warp_max - spec.warp_min) * unit(warp_rng));
  std::vector<int> durations;
  for (std::size_t k = 0; k < transcript.size(); ++k) {
    const double eps = 2.0 * unit(warp_rng) - 1.0;
    const double len = render.frames_per_token * (1.0 + magnitude * eps);
    durations.push_back(std::max(2, static_cast<int>(std::lround(len))));
  }

  Rng noise_rng(mix_seed(seed, kSaltNoise));
  Matrix x = render_frames(render, transcript, durations, noise_rng);
  if (intensity > 0.0) {
    const double w = intensity * render.mixing_strength;
    x = (1.0 - w) * x + w * (x * mixing_matrix(spec, static_cast<int>(x.cols())));
    const double s = render.substitution_strength;
    if (s > 0.0 && !spec.substitution.empty()) {
      x = (1.0 - s) * x + s * (x * substitution_matrix(spec, render.prototypes));
    }
    x.rowwise() += (intensity * render.shift_scale) * spec.direction.transpose();
  }
  add_nuisance(render, nuisance, x);

  Utterance u;
  u.id = std::move(id);
  u.features = std::move(x);
  u.transcript.assign(transcript.begin(), transcript.end());
  u.accent_id = spec.accent_id;
  u.intensity = intensity;
  u.nuisance = nuisance;
  return u;
}

// --- splits and corpus ------------------------------------------------------

std::string to_string(Split s) {
  switch (s) {
    case Split::kL1Pretrain: return "l1_pretrain";
    case Split::kL1Dev: return "l1_dev";
    case Split::kL1Test: return "l1_test";
    case Split::kL2Train: return "l2_train";
    case Split::kL2Dev: return "l2_dev";
    case Split::kL2Test: return "l2_test";
  }
  return "?";
}

Split split_from_string(const std::string &s) {
  for (Split x : {Split::kL1Pretrain, Split::kL1Dev, Split::kL1Test, Split::kL2Train,
                  Split::kL2Dev, Split::kL2Test}) {
    if (to_string(x) == s) return x;
  }
  throw ConfigError("unknown split '" + s + "'");
}

const std::vector<std::string> &CorpusSplits::ids(Split s) const {
  switch (s) {
    case Split::kL1Pretrain: return l1_pretrain;
    case Split::kL1Dev: return l1_dev;
    case Split::kL1Test: return l1_test;
    case Split::kL2Train: return l2_train;
    case Split::kL2Dev: return l2_dev;
    case Split::kL2Test: return l2_test;
  }
  return l2_test;
}

Corpus::Corpus(std::string config_hash, RenderSettings render, std::vector<AccentSpec> accents,
               std::vector<Utterance> utterances, CorpusSplits splits)
    : config_hash_(std::move(config_hash)),
      render_(std::move(render)),
      accents_(std::move(accents)),
      utterances_(std::move(utterances)),
      splits_(std::move(splits)) {
  for (std::size_t i = 0; i < utterances_.size(); ++i) {
    if (!index_.emplace(utterances_[i].id, i).second) {
      throw InvariantViolation("corpus: duplicate utterance id " + utterances_[i].id);
    }
  }
}

const Utterance &Corpus::get(const std::string &id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw ConfigError("corpus: unknown utterance id " + id);
  return utterances_[it->second];
}

std::vector<const Utterance *> Corpus::split(Split s) const {
  std::vector<const Utterance *> out;
  for (const auto &id : splits_.ids(s)) out.push_back(&get(id));
  return out;
}

AccentGroup Corpus::group(int accent_id) const {
  auto it = splits_.group_map.find(accent_id);
  if (it == splits_.group_map.end()) throw ConfigError("corpus: unknown accent " + std::to_string(accent_id));
  return it->second;
}

int Corpus::l1_accent() const {
  for (const auto &[a, g] : splits_.group_map) {
    if (g == AccentGroup::kL1) return a;
  }
  throw InvariantViolation("corpus: no L1 accent");
}

std::vector<int> Corpus::accents_in(AccentGroup g) const {
  std::vector<int> out;
  for (const auto &[a, grp] : splits_.group_map) {
    if (grp == g) out.push_back(a);
  }
  return out;
}

bool Corpus::operator==(const Corpus &o) const {
  return config_hash_ == o.config_hash_ && render_ == o.render_ && accents_ == o.accents_ &&
         utterances_ == o.utterances_ && splits_ == o.splits_;
}

namespace {

std::vector<ctc::TokenSeq> draw_transcripts(const CorpusConfig &c, std::size_t count, Rng &rng) {
  // Sequences without adjacent repeats: V * (V-1)^(k-1) of length k.
  double capacity = 0.0;
  for (int k = c.min_tokens; k <= c.max_tokens; ++k) {
    capacity += c.vocab_size * std::pow(c.vocab_size - 1.0, k - 1);
  }
  if (static_cast<double>(count) > 0.5 * capacity) {
    throw StageError("build_corpus: transcript pool too small (" + std::to_string(count) +
                     " distinct transcripts requested, capacity " +
                     std::to_string(static_cast<long long>(capacity)) + ")");
  }
  std::uniform_int_distribution<int> len(c.min_tokens, c.max_tokens);
  std::uniform_int_distribution<int> tok(1, c.vocab_size);
  std::set<ctc::TokenSeq> seen;
  std::vector<ctc::TokenSeq> out;
  while (out.size() < count) {
    ctc::TokenSeq t;
    const int n = len(rng);
    while (static_cast<int>(t.size()) < n) {
      const int v = tok(rng);
      if (!t.empty() && t.back() == v) continue;
      t.push_back(v);
    }
    if (seen.insert(t).second) out.push_back(std::move(t));
  }
  return out;
}

std::string make_id(int accent, int speaker, int transcript) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "a%d-s%d-t%05d", accent, speaker, transcript);
  return buf;
}

std::set<ctc::TokenSeq> transcripts_of(const Corpus &c, Split s) {
  std::set<ctc::TokenSeq> out;
  for (const Utterance *u : c.split(s)) out.insert(u->transcript);
  return out;
}

bool disjoint(const std::set<ctc::TokenSeq> &a, const std::set<ctc::TokenSeq> &b) {
  for (const auto &t : a) {
    if (b.contains(t)) return false;
  }
  return true;
}

}  // namespace

Corpus build_corpus(const ExperimentConfig &config) {
  const CorpusConfig &c = config.corpus;
  const std::uint64_t seed = config.seed;
  const int n_accents = static_cast<int>(c.groups.size());
  if (n_accents >= c.d_feat) {
    throw ConfigError("build_corpus: need d_feat > number of accents for the nuisance direction");
  }

  RenderSettings render;
  render.frames_per_token = c.frames_per_token;
  render.noise_sigma = c.noise_sigma;
  render.shift_scale = c.shift_scale;
  render.mixing_strength = c.mixing_strength;
  render.substitution_strength = c.substitution_strength;
  render.nuisance_scale = c.nuisance_scale;
  {
    Rng rng(mix_seed(seed, kSaltPrototypes));
    render.prototypes = gaussian_matrix(c.vocab_size, c.d_feat, rng);
    render.prototypes.rowwise().normalize();
  }
  AccentLayout layout;
  layout.warp_min = c.warp_min;
  layout.warp_max = c.warp_max;
  layout.shared_direction = c.shared_direction;
  layout.subspace_dim = c.accent_subspace_dim;
  layout.antipodal_pairs = c.antipodal_pairs;
  layout.vocab_size = c.vocab_size;
  layout.shared_swaps = c.shared_swaps;
  layout.private_swaps = c.private_swaps;
  std::vector<AccentSpec> accents =
      gen_accent_specs(n_accents, c.d_feat, mix_seed(seed, kSaltAccents), layout);
  {
    Rng rng(mix_seed(seed, kSaltNuisance));
    Vector v = gaussian_matrix(c.d_feat, 1, rng).col(0);
    Matrix dirs(c.d_feat, static_cast<Eigen::Index>(accents.size()));
    for (std::size_t a = 0; a < accents.size(); ++a) dirs.col(static_cast<Eigen::Index>(a)) = accents[a].direction;
    const Eigen::HouseholderQR<Matrix> qr(dirs);
    const Matrix q = qr.householderQ() * Matrix::Identity(c.d_feat, dirs.cols());
    v -= q * (q.transpose() * v);
    v -= q * (q.transpose() * v);
    render.nuisance_direction = v.normalized();
  }

  const int n_l2 = c.n_l2_transcripts;
  const int n_train = static_cast<int>(std::lround(n_l2 * c.train_ratio));
  const int n_dev = static_cast<int>(std::lround(n_l2 * c.dev_ratio));
  const int n_test = n_l2 - n_train - n_dev;
  if (n_train < 1 || n_dev < 1 || n_test < 1) {
    throw StageError("build_corpus: transcript pool of " + std::to_string(n_l2) +
                     " cannot give every L2 split at least one transcript");
  }
  Rng trng(mix_seed(seed, kSaltTranscripts));
  const std::size_t n_l1 = static_cast<std::size_t>(c.n_l1_pretrain + c.n_l1_dev + c.n_l1_test);
  const std::vector<ctc::TokenSeq> pool = draw_transcripts(c, n_l2 + n_l1, trng);

  std::vector<Utterance> utterances;
  CorpusSplits splits;
  for (int a = 0; a < n_accents; ++a) splits.group_map[a] = c.groups[a];

  auto emit = [&](int accent, int speaker, int tid, double intensity, int nuisance,
                  std::vector<std::string> &into) {
    const std::uint64_t useed =
        mix_seed(seed, kSaltUtterance ^ (static_cast<std::uint64_t>(accent) << 40) ^
                           (static_cast<std::uint64_t>(speaker) << 32) ^
                           static_cast<std::uint64_t>(tid));
    Utterance u = synthesize_utterance(render, pool[tid], accents[accent], intensity, nuisance,
                                       useed, make_id(accent, speaker, tid));
    u.speaker = speaker;
    into.push_back(u.id);
    utterances.push_back(std::move(u));
  };

  // L2 speakers: every speaker reads every L2 transcript of the kept splits.
  for (int a = 0; a < n_accents; ++a) {
    const AccentGroup g = c.groups[a];
    if (g == AccentGroup::kL1) continue;
    std::vector<std::string> train_ids;
    for (int s = 0; s < c.speakers_per_accent; ++s) {
      Rng srng(mix_seed(seed, kSaltSpeakers ^ (static_cast<std::uint64_t>(a) << 16) ^
                                  static_cast<std::uint64_t>(s)));
      std::uniform_real_distribution<double> mean_dist(c.intensity_mean_min, c.intensity_mean_max);
      const double speaker_mean = mean_dist(srng);
      const int nuisance = s % 2;
      for (int tid = 0; tid < n_l2; ++tid) {
        const bool is_train = tid < n_train;
        if (is_train && g == AccentGroup::kUA) continue;
        Rng irng(mix_seed(seed, kSaltIntensity ^ (static_cast<std::uint64_t>(a) << 40) ^
                                    (static_cast<std::uint64_t>(s) << 32) ^
                                    static_cast<std::uint64_t>(tid)));
        const double intensity =
            std::clamp(speaker_mean + c.intensity_spread * (beta22(irng) - 0.5), 0.0, 1.0);
        if (is_train) {
          emit(a, s, tid, intensity, nuisance, train_ids);
        } else if (tid < n_train + n_dev) {
          emit(a, s, tid, intensity, nuisance, splits.l2_dev);
        } else {
          emit(a, s, tid, intensity, nuisance, splits.l2_test);
        }
      }
    }
    if (g == AccentGroup::kLFA) {
      Rng lrng(mix_seed(seed, kSaltLfa ^ static_cast<std::uint64_t>(a)));
      std::vector<std::string> shuffled = train_ids;
      std::shuffle(shuffled.begin(), shuffled.end(), lrng);
      const auto half = static_cast<std::ptrdiff_t>(shuffled.size() / 2);
      const std::set<std::string> drop(shuffled.begin() + half, shuffled.end());
      std::erase_if(utterances, [&](const Utterance &u) { return drop.contains(u.id); });
      std::erase_if(train_ids, [&](const std::string &id) { return drop.contains(id); });
    }
    splits.l2_train.insert(splits.l2_train.end(), train_ids.begin(), train_ids.end());
  }

  // L1 speakers read disjoint transcript pools for pretrain / dev / test.
  const int l1 = static_cast<int>(std::find(c.groups.begin(), c.groups.end(), AccentGroup::kL1) -
                                  c.groups.begin());
  for (std::size_t i = 0; i < n_l1; ++i) {
    const int tid = n_l2 + static_cast<int>(i);
    const int speaker = static_cast<int>(i) % std::max(2, c.speakers_per_accent);
    auto &into = i < static_cast<std::size_t>(c.n_l1_pretrain) ? splits.l1_pretrain
                 : i < static_cast<std::size_t>(c.n_l1_pretrain + c.n_l1_dev) ? splits.l1_dev
                                                                              : splits.l1_test;
    emit(l1, speaker, tid, 0.0, speaker % 2, into);
  }

  Corpus corpus(corpus_hash(config), std::move(render), std::move(accents), std::move(utterances),
                std::move(splits));
  validate_splits(corpus);
  return corpus;
}

void validate_splits(const Corpus &corpus) {
  const CorpusSplits &s = corpus.splits();
  std::set<std::string> in_split;
  for (Split sp : {Split::kL1Pretrain, Split::kL1Dev, Split::kL1Test, Split::kL2Train,
                   Split::kL2Dev, Split::kL2Test}) {
    for (const auto &id : s.ids(sp)) {
      corpus.get(id);
      if (!in_split.insert(id).second) {
        throw InvariantViolation("splits: utterance " + id + " appears in two splits");
      }
    }
  }
  const auto tr = transcripts_of(corpus, Split::kL2Train);
  const auto dv = transcripts_of(corpus, Split::kL2Dev);
  const auto te = transcripts_of(corpus, Split::kL2Test);
  if (!disjoint(tr, dv) || !disjoint(tr, te) || !disjoint(dv, te)) {
    throw InvariantViolation("splits: L2 train/dev/test transcripts overlap");
  }
  const auto p1 = transcripts_of(corpus, Split::kL1Pretrain);
  const auto d1 = transcripts_of(corpus, Split::kL1Dev);
  const auto t1 = transcripts_of(corpus, Split::kL1Test);
  if (!disjoint(p1, d1) || !disjoint(p1, t1) || !disjoint(d1, t1)) {
    throw InvariantViolation("splits: L1 pretrain/dev/test transcripts overlap");
  }
  std::map<int, std::size_t> train_counts;
  for (const Utterance *u : corpus.split(Split::kL2Train)) ++train_counts[u->accent_id];
  std::set<std::size_t> mfa_counts;
  for (int a : corpus.accents_in(AccentGroup::kMFA)) mfa_counts.insert(train_counts[a]);
  if (mfa_counts.size() != 1 || *mfa_counts.begin() == 0) {
    throw InvariantViolation("splits: MFA accents must share one nonzero training size");
  }
  const std::size_t mfa = *mfa_counts.begin();
  for (int a : corpus.accents_in(AccentGroup::kLFA)) {
    if (train_counts[a] != mfa / 2) {
      throw InvariantViolation("splits: LFA accent " + std::to_string(a) + " has " +
                               std::to_string(train_counts[a]) + " training utterances, expected " +
                               std::to_string(mfa / 2));
    }
  }
  for (int a : corpus.accents_in(AccentGroup::kUA)) {
    if (train_counts[a] != 0) {
      throw InvariantViolation("splits: UA accent " + std::to_string(a) + " has training data");
    }
  }
  if (train_counts.contains(corpus.l1_accent())) {
    throw InvariantViolation("splits: L1 utterances in l2_train");
  }
  for (const Utterance &u : corpus.utterances()) {
    if (u.features.rows() < static_cast<Eigen::Index>(u.transcript.size()) ||
        !ctc::feasible(static_cast<int>(u.features.rows()), u.transcript)) {
      throw InvariantViolation("corpus: utterance " + u.id + " is CTC-infeasible");
    }
    if (!u.features.allFinite()) throw InvariantViolation("corpus: non-finite features in " + u.id);
  }
}

// --- serialisation ----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'I', 'N', 'T', 'A', 'P', 'T', 'C', 'P'};

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    buf_.append(reinterpret_cast<const char *>(&v), sizeof(T));
  }
  void str(const std::string &s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void matrix(const Matrix &m) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    pod<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    buf_.append(reinterpret_cast<const char *>(m.data()),
                sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  void ids(const std::vector<std::string> &v) {
    pod<std::uint64_t>(v.size());
    for (const auto &s : v) str(s);
  }
  const std::string &bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view buf) : buf_(buf) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + at_, sizeof(T));
    at_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(buf_.substr(at_, n));
    at_ += n;
    return s;
  }
  Matrix matrix() {
    const auto r = pod<std::uint32_t>();
    const auto c = pod<std::uint32_t>();
    const std::size_t bytes = sizeof(double) * static_cast<std::size_t>(r) * c;
    need(bytes);
    Matrix m(r, c);
    if (bytes > 0) std::memcpy(m.data(), buf_.data() + at_, bytes);
    at_ += bytes;
    return m;
  }
  std::vector<std::string> ids() {
    const auto n = pod<std::uint64_t>();
    std::vector<std::string> v;
    for (std::uint64_t i = 0; i < n; ++i) v.push_back(str());
    return v;
  }
  bool done() const { return at_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (at_ + n > buf_.size()) throw StageError("corpus file: truncated record");
  }
  std::string_view buf_;
  std::size_t at_ = 0;
};

struct RawFile {
  CorpusFileInfo info;
  std::string body;
};

RawFile read_raw(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StageError("corpus file: cannot open " + path.string());
  std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  constexpr std::size_t kHeader = 8 + 4 + 64 + 8 + 32;
  if (all.size() < kHeader) throw StageError("corpus file: truncated header in " + path.string());
  if (std::memcmp(all.data(), kMagic, 8) != 0) throw StageError("corpus file: bad magic");
  RawFile raw;
  std::memcpy(&raw.info.format_version, all.data() + 8, 4);
  if (raw.info.format_version != kCorpusFormatVersion) {
    throw StageError("corpus file: format version " + std::to_string(raw.info.format_version) +
                     " does not match " + std::to_string(kCorpusFormatVersion));
  }
  raw.info.config_hash.assign(all.data() + 12, 64);
  std::memcpy(&raw.info.n_utterances, all.data() + 76, 8);
  std::array<std::uint8_t, 32> sum{};
  std::memcpy(sum.data(), all.data() + 84, 32);
  raw.info.checksum = to_hex(sum);
  raw.body = all.substr(kHeader);
  if (sha256_hex(raw.body) != raw.info.checksum) {
    throw StageError("corpus file: checksum mismatch (corrupt or truncated) in " + path.string());
  }
  return raw;
}

Utterance read_record(Reader &r) {
  Utterance u;
  u.id = r.str();
  u.accent_id = r.pod<std::int32_t>();
  u.intensity = r.pod<double>();
  u.nuisance = r.pod<std::int32_t>();
  u.speaker = r.pod<std::int32_t>();
  const auto n_tok = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tok; ++i) u.transcript.push_back(r.pod<std::int32_t>());
  u.features = r.matrix();
  return u;
}

}  // namespace

void save_corpus(const std::filesystem::path &path, const Corpus &corpus) {
  Writer w;
  const RenderSettings &rs = corpus.render();
  w.pod<std::int32_t>(rs.frames_per_token);
  w.pod<double>(rs.noise_sigma);
  w.pod<double>(rs.shift_scale);
  w.pod<double>(rs.mixing_strength);
  w.pod<double>(rs.substitution_strength);
  w.pod<double>(rs.nuisance_scale);
  w.matrix(rs.prototypes);
  w.matrix(rs.nuisance_direction);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(corpus.accents().size()));
  for (const AccentSpec &a : corpus.accents()) {
    w.pod<std::int32_t>(a.accent_id);
    w.pod<std::uint64_t>(a.mixing_seed);
    w.matrix(a.direction);
    w.pod<double>(a.warp_min);
    w.pod<double>(a.warp_max);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(a.substitution.size()));
    for (int t : a.substitution) w.pod<std::int32_t>(t);
  }
  const CorpusSplits &s = corpus.splits();
  w.ids(s.l1_pretrain);
  w.ids(s.l1_dev);
  w.ids(s.l1_test);
  w.ids(s.l2_train);
  w.ids(s.l2_dev);
  w.ids(s.l2_test);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(s.group_map.size()));
  for (const auto &[a, g] : s.group_map) {
    w.pod<std::int32_t>(a);
    w.pod<std::int32_t>(static_cast<std::int32_t>(g));
  }
  for (const Utterance &u : corpus.utterances()) {
    w.str(u.id);
    w.pod<std::int32_t>(u.accent_id);
    w.pod<double>(u.intensity);
    w.pod<std::int32_t>(u.nuisance);
    w.pod<std::int32_t>(u.speaker);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(u.transcript.size()));
    for (int t : u.transcript) w.pod<std::int32_t>(t);
    w.matrix(u.features);
  }

  std::string hash = corpus.config_hash();
  hash.resize(64, '0');
  Sha256 h;
  h.update(w.bytes());
  const auto sum = h.digest();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StageError("corpus file: cannot write " + path.string());
  const std::uint32_t version = kCorpusFormatVersion;
  const std::uint64_t n = corpus.utterances().size();
  os.write(kMagic, 8);
  os.write(reinterpret_cast<const char *>(&version), 4);
  os.write(hash.data(), 64);
  os.write(reinterpret_cast<const char *>(&n), 8);
  os.write(reinterpret_cast<const char *>(sum.data()), 32);
  os.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!os) throw StageError("corpus file: write failed for " + path.string());
}

Corpus load_corpus(const std::filesystem::path &path) {
  RawFile raw = read_raw(path);
  Reader r(raw.body);
  RenderSettings rs;
  rs.frames_per_token = r.pod<std::int32_t>();
  rs.noise_sigma = r.pod<double>();
  rs.shift_scale = r.pod<double>();
  rs.mixing_strength = r.pod<double>();
  rs.substitution_strength = r.pod<double>();
  rs.nuisance_scale = r.pod<double>();
  rs.prototypes = r.matrix();
  rs.nuisance_direction = r.matrix().col(0);
  std::vector<AccentSpec> accents(r.pod<std::uint32_t>());
  for (AccentSpec &a : accents) {
    a.accent_id = r.pod<std::int32_t>();
    a.mixing_seed = r.pod<std::uint64_t>();
    a.direction = r.matrix().col(0);
    a.warp_min = r.pod<double>();
    a.warp_max = r.pod<double>();
    a.substitution.resize(r.pod<std::uint32_t>());
    for (int &t : a.substitution) t = r.pod<std::int32_t>();
  }
  CorpusSplits s;
  s.l1_pretrain = r.ids();
  s.l1_dev = r.ids();
  s.l1_test = r.ids();
  s.l2_train = r.ids();
  s.l2_dev = r.ids();
  s.l2_test = r.ids();
  const auto n_groups = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_groups; ++i) {
    const int a = r.pod<std::int32_t>();
    s.group_map[a] = static_cast<AccentGroup>(r.pod<std::int32_t>());
  }
  std::vector<Utterance> utterances;
  for (std::uint64_t i = 0; i < raw.info.n_utterances; ++i) utterances.push_back(read_record(r));
  if (!r.done()) throw StageError("corpus file: trailing bytes after last record");
  Corpus c(raw.info.config_hash, std::move(rs), std::move(accents), std::move(utterances),
           std::move(s));
  validate_splits(c);
  return c;
}

CorpusFileInfo inspect_corpus(const std::filesystem::path &path) {
  // Full parse counts the records actually present.
  RawFile raw = read_raw(path);
  Corpus c = load_corpus(path);
  raw.info.n_records = c.utterances().size();
  return raw.info;
}

Matrix mean_pooled_features(std::span<const Utterance *const> utterances) {
  if (utterances.empty()) return Matrix();
  Matrix out(static_cast<Eigen::Index>(utterances.size()), utterances[0]->features.cols());
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = utterances[i]->features.colwise().mean();
  }
  return out;
}

double learnability_floor(const Corpus &corpus, std::uint64_t seed) {
  std::map<int, std::pair<double, int>> intensity;
  for (const Utterance *u : corpus.split(Split::kL2Test)) {
    intensity[u->accent_id].first += u->intensity;
    intensity[u->accent_id].second += 1;
  }
  int strongest = -1;
  double best = -1.0;
  for (const auto &[a, acc] : intensity) {
    const double m = acc.first / acc.second;
    if (m > best) {
      best = m;
      strongest = a;
    }
  }
  std::vector<const Utterance *> pick;
  std::vector<int> labels;
  for (const Utterance *u : corpus.split(Split::kL1Test)) {
    pick.push_back(u);
    labels.push_back(0);
  }
  for (const Utterance *u : corpus.split(Split::kL2Test)) {
    if (u->accent_id != strongest) continue;
    pick.push_back(u);
    labels.push_back(1);
  }
  return analysis::linear_probe(mean_pooled_features(pick), labels, seed).test_accuracy;
}

}  // namespace intapt::corpus
