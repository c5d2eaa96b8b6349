#pragma once

// Deterministic synthetic accented "speech": token prototypes rendered as
// frame sequences, then distorted per accent by a partial mixing transform,
// an intensity-scaled shift along the accent direction and a time warp. A
// binary nuisance attribute adds a constant offset orthogonal to every accent
// direction.

#include "intapt/config.hpp"
#include "intapt/ctc.hpp"
#include "intapt/nn/graph.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace intapt::corpus {

using nn::Matrix;
using nn::Vector;

struct AccentSpec {
  int accent_id = 0;
  std::uint64_t mixing_seed = 0;
  /// Unit-norm accent direction in feature space.
  Vector direction;
  /// Relative time-warp bounds, 0 <= warp_min <= warp_max.
  double warp_min = 0.0;
  double warp_max = 0.0;
  /// substitution[k - 1] is the token that token k is pronounced like (a
  /// permutation made of disjoint swaps). Empty means none.
  std::vector<int> substitution;

  bool operator==(const AccentSpec &) const = default;
};

struct AccentLayout {
  double warp_min = 0.1;
  double warp_max = 0.35;
  /// Pairwise cosine contributed by an axis common to all accents.
  double shared_direction = 0.0;
  /// 0: one orthonormal private axis per accent; otherwise private parts
  /// are random unit vectors inside one subspace of this dimension.
  int subspace_dim = 0;
  /// Accents 2k + 1 and 2k + 2 get opposite private parts, so that the
  /// mean L2 shift along the private subspace vanishes.
  bool antipodal_pairs = false;
  /// Token substitutions (need vocab_size > 0): swaps common to every
  /// accent plus swaps private to each.
  int vocab_size = 0;
  int shared_swaps = 0;
  int private_swaps = 0;
};

/// One spec per accent. Directions are a private part blended with a
/// common axis; pairwise cosines stay below 0.8. Throws ConfigError when
/// n_accents < 2, n_accents > d_feat, the direction axes do not fit in
/// d_feat dimensions, or the swaps do not fit in the vocabulary.
std::vector<AccentSpec> gen_accent_specs(int n_accents, int d_feat, std::uint64_t seed,
                                         const AccentLayout &layout = {});

/// Random rotation drawn from spec.mixing_seed, applied as x -> x M.
Matrix mixing_matrix(const AccentSpec &spec, int d_feat);

/// Orthogonal map M (x -> x M) fitted by Procrustes so that each token
/// prototype moves towards the prototype of its substitute; identity on the
/// complement of the prototype span. Identity without a substitution.
Matrix substitution_matrix(const AccentSpec &spec, const Matrix &prototypes);

/// Everything needed to render a transcript besides the accent.
struct RenderSettings {
  int frames_per_token = 4;
  double noise_sigma = 0.05;
  double shift_scale = 1.0;
  double mixing_strength = 0.5;
  /// Weight of the token substitution, independent of intensity.
  double substitution_strength = 0.0;
  double nuisance_scale = 0.1;
  /// Row k-1 is the prototype of token k.
  Matrix prototypes;
  Vector nuisance_direction;

  bool operator==(const RenderSettings &) const = default;
};

struct Utterance {
  std::string id;
  /// L x d_feat.
  Matrix features;
  ctc::TokenSeq transcript;
  int accent_id = 0;
  double intensity = 0.0;
  int nuisance = 0;
  int speaker = 0;

  bool operator==(const Utterance &) const = default;
};

/// Un-accented rendering: prototypes repeated frames_per_token times plus
/// Gaussian noise plus the nuisance offset.
Matrix render_base(const RenderSettings &render, std::span<const int> transcript, int nuisance,
                   std::uint64_t seed);

/// Throws ConfigError unless intensity is in [0, 1] and the transcript is
/// nonempty with tokens in 1..V.
Utterance synthesize_utterance(const RenderSettings &render, std::span<const int> transcript,
                               const AccentSpec &spec, double intensity, int nuisance,
                               std::uint64_t seed, std::string id = {});

enum class Split { kL1Pretrain, kL1Dev, kL1Test, kL2Train, kL2Dev, kL2Test };
std::string to_string(Split s);
Split split_from_string(const std::string &s);

struct CorpusSplits {
  std::vector<std::string> l1_pretrain;
  std::vector<std::string> l1_dev;
  std::vector<std::string> l1_test;
  std::vector<std::string> l2_train;
  std::vector<std::string> l2_dev;
  std::vector<std::string> l2_test;
  std::map<int, AccentGroup> group_map;

  const std::vector<std::string> &ids(Split s) const;
  bool operator==(const CorpusSplits &) const = default;
};

class Corpus {
 public:
  Corpus() = default;
  Corpus(std::string config_hash, RenderSettings render, std::vector<AccentSpec> accents,
         std::vector<Utterance> utterances, CorpusSplits splits);

  const std::string &config_hash() const { return config_hash_; }
  const RenderSettings &render() const { return render_; }
  const std::vector<AccentSpec> &accents() const { return accents_; }
  const std::vector<Utterance> &utterances() const { return utterances_; }
  const CorpusSplits &splits() const { return splits_; }

  const Utterance &get(const std::string &id) const;
  std::vector<const Utterance *> split(Split s) const;
  AccentGroup group(int accent_id) const;
  int l1_accent() const;
  std::vector<int> accents_in(AccentGroup g) const;
  int d_feat() const { return static_cast<int>(render_.prototypes.cols()); }
  int vocab_size() const { return static_cast<int>(render_.prototypes.rows()); }

  bool operator==(const Corpus &o) const;

 private:
  std::string config_hash_;
  RenderSettings render_;
  std::vector<AccentSpec> accents_;
  std::vector<Utterance> utterances_;
  CorpusSplits splits_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Generates the whole corpus and checks every split invariant.
Corpus build_corpus(const ExperimentConfig &config);

/// Throws InvariantViolation if any CorpusSplits invariant is broken.
void validate_splits(const Corpus &corpus);

inline constexpr std::uint32_t kCorpusFormatVersion = 2;

struct CorpusFileInfo {
  std::uint32_t format_version = 0;
  std::string config_hash;
  std::uint64_t n_utterances = 0;
  std::string checksum;
  /// Records actually parsed from the body.
  std::uint64_t n_records = 0;
};

void save_corpus(const std::filesystem::path &path, const Corpus &corpus);
/// Throws StageError on version mismatch, truncation or checksum failure.
Corpus load_corpus(const std::filesystem::path &path);
CorpusFileInfo inspect_corpus(const std::filesystem::path &path);

/// Mean over frames of each utterance's raw features (n x d_feat).
Matrix mean_pooled_features(std::span<const Utterance *const> utterances);

/// Accuracy of a held-out linear probe separating L1 from the L2 accent
/// with the highest mean intensity, on mean-pooled raw features.
double learnability_floor(const Corpus &corpus, std::uint64_t seed);

}  // namespace intapt::corpus
