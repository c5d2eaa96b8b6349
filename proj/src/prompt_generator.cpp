#include "intapt/prompt_generator.hpp"

#include "intapt/error.hpp"
#include "intapt/nn/archive.hpp"

namespace intapt {

namespace {
constexpr const char *kArchiveKind = "prompt_generator";
}

PromptGenerator::PromptGenerator(const PromptConfig &config, int d_model, std::uint64_t seed)
    : config_(config), d_model_(d_model) {
  if (config.length < 0) throw ConfigError("prompt: length must be >= 0");
  if (d_model % config.n_heads != 0) throw ConfigError("prompt: n_heads must divide d_model");
  nn::Rng rng(seed);
  layer_ = nn::TransformerLayer("pg.layer", d_model, config.n_heads, config.d_ff, rng);
  projection_ = nn::Linear("pg.projection", d_model, d_model, rng, config.init_gain);
}

nn::Var PromptGenerator::generate(nn::Graph &g, nn::Var h) const {
  if (h.rows() < 1) throw ConfigError("prompt: empty hidden sequence");
  if (h.cols() != d_model_) throw ConfigError("prompt: hidden dim mismatch");
  const Eigen::Index lp = config_.length;
  if (h.rows() < lp) {
    const nn::Var parts[] = {h, g.constant(Matrix::Zero(lp - h.rows(), d_model_))};
    h = nn::concat_rows(parts);
  }
  nn::Var out = layer_(g, h);
  return projection_(g, nn::slice_rows(out, 0, lp));
}

Matrix PromptGenerator::generate(const Matrix &h) const {
  nn::Graph g;
  return generate(g, g.constant(h)).value();
}

nn::ParameterList PromptGenerator::parameters() {
  nn::ParameterList out;
  layer_.collect(out);
  projection_.collect(out);
  return out;
}

nn::ConstParameterList PromptGenerator::parameters() const {
  nn::ConstParameterList out;
  layer_.collect(out);
  projection_.collect(out);
  return out;
}

void PromptGenerator::save(const std::filesystem::path &path, const nlohmann::json &metadata) const {
  const nlohmann::json meta = {{"config", config_}, {"d_model", d_model_}, {"training", metadata}};
  nn::write_archive(path, kArchiveKind, meta, parameters());
}

PromptGenerator PromptGenerator::load(const std::filesystem::path &path, nlohmann::json *metadata) {
  nn::Archive a = nn::read_archive(path, kArchiveKind);
  PromptGenerator pg(a.meta.at("config").get<PromptConfig>(), a.meta.at("d_model").get<int>(), 0);
  nn::assign(a, pg.parameters());
  if (metadata != nullptr) *metadata = a.meta.at("training");
  return pg;
}

void check_parameter_budget(std::size_t generator, std::size_t backbone, double cap) {
  if (!(static_cast<double>(generator) < cap * static_cast<double>(backbone))) {
    throw ConfigError("prompt generator has " + std::to_string(generator) +
                      " parameters, over the cap of " + std::to_string(cap) + " x " +
                      std::to_string(backbone) + " backbone parameters");
  }
}

}  // namespace intapt
