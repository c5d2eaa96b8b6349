#pragma once

// Input-dependent prompt synthesis: one transformer layer over the clean
// tap h, the first L' positions kept and projected into the backbone's
// embedding space.

#include "intapt/config.hpp"
#include "intapt/nn/archive.hpp"
#include "intapt/nn/layers.hpp"

#include <filesystem>

namespace intapt {

using nn::Matrix;

class PromptGenerator {
 public:
  PromptGenerator() = default;
  PromptGenerator(const PromptConfig &config, int d_model, std::uint64_t seed);

  int length() const { return config_.length; }
  int d_model() const { return d_model_; }
  const PromptConfig &config() const { return config_; }

  /// h: L x d_model (L >= 1) -> L' x d_model. Inputs shorter than L' are
  /// zero-padded before the transformer layer.
  nn::Var generate(nn::Graph &g, nn::Var h) const;
  Matrix generate(const Matrix &h) const;

  nn::ParameterList parameters();
  nn::ConstParameterList parameters() const;
  std::size_t parameter_count() const { return nn::count_parameters(parameters()); }
  std::string fingerprint() const { return nn::fingerprint(parameters()); }

  void save(const std::filesystem::path &path, const nlohmann::json &metadata = {}) const;
  static PromptGenerator load(const std::filesystem::path &path, nlohmann::json *metadata = nullptr);

 private:
  PromptConfig config_;
  int d_model_ = 0;
  nn::TransformerLayer layer_;
  nn::Linear projection_;
};

/// Throws ConfigError unless count(PG) < cap * count(backbone).
void check_parameter_budget(std::size_t generator, std::size_t backbone, double cap);

}  // namespace intapt
