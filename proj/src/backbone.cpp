#include "intapt/backbone.hpp"

#include "intapt/error.hpp"
#include "intapt/hash.hpp"
#include "intapt/nn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace intapt {

namespace {
constexpr const char *kArchiveKind = "backbone";
}

Backbone::Backbone(const BackboneConfig &config, std::uint64_t seed) : config_(config) {
  if (config.tap_layer < 0 || config.tap_layer >= config.n_layers) {
    throw ConfigError("backbone: tap_layer must lie in [0, n_layers)");
  }
  if (config.d_model % config.n_heads != 0) {
    throw ConfigError("backbone: d_model must be divisible by n_heads");
  }
  nn::Rng rng(seed);
  input_ = nn::Linear("backbone.input", config.d_feat, config.d_model, rng);
  for (int i = 0; i < config.n_layers; ++i) {
    layers_.emplace_back("backbone.layer" + std::to_string(i), config.d_model, config.n_heads,
                         config.d_ff, rng);
  }
  final_norm_ = nn::LayerNorm("backbone.final_norm", config.d_model);
  head_ = nn::Linear("backbone.head", config.d_model, config.vocab_size + 1, rng);
}

BackboneVars Backbone::forward(nn::Graph &g, nn::Var prompt, nn::Var features,
                               int stop_after_layer) const {
  if (features.cols() != config_.d_feat) throw ConfigError("backbone: feature dim mismatch");
  if (features.rows() < 1) throw ConfigError("backbone: empty input");
  const Eigen::Index prompt_len = prompt.valid() ? prompt.rows() : 0;
  if (prompt.valid() && prompt.cols() != config_.d_model) {
    throw ConfigError("backbone: prompt dim " + std::to_string(prompt.cols()) +
                      " != d_model " + std::to_string(config_.d_model));
  }
  const Eigen::Index total = prompt_len + features.rows();
  if (total > config_.max_len) {
    throw ConfigError("backbone: sequence of " + std::to_string(total) + " frames exceeds max_len " +
                      std::to_string(config_.max_len));
  }
  nn::Var x = input_(g, features);
  if (prompt_len > 0) {
    const nn::Var parts[] = {prompt, x};
    x = nn::concat_rows(parts);
  }
  x = nn::add(x, g.constant(nn::sinusoidal_positions(total, config_.d_model)));
  BackboneVars out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i](g, x);
    out.hidden.push_back(x);
    if (stop_after_layer >= 0 && static_cast<int>(i) == stop_after_layer) return out;
  }
  out.log_probs = nn::log_softmax_rows(head_(g, final_norm_(g, x)));
  return out;
}

BackboneOutput Backbone::forward(const Matrix &features) const {
  nn::Graph g;
  BackboneVars v = forward(g, nn::Var{}, g.constant(features));
  BackboneOutput out;
  out.log_probs = v.log_probs.value();
  for (const auto &h : v.hidden) out.hidden.layers.push_back(h.value());
  return out;
}

BackboneOutput Backbone::forward_with_prompt(const Matrix &prompt, const Matrix &features) const {
  if (prompt.rows() > 0 && prompt.cols() != config_.d_model) {
    throw ConfigError("backbone: prompt dim " + std::to_string(prompt.cols()) + " != d_model " +
                      std::to_string(config_.d_model));
  }
  nn::Graph g;
  nn::Var p = prompt.rows() > 0 ? g.constant(prompt) : nn::Var{};
  BackboneVars v = forward(g, p, g.constant(features));
  BackboneOutput out;
  out.log_probs = v.log_probs.value();
  for (const auto &h : v.hidden) out.hidden.layers.push_back(h.value());
  return out;
}

nn::ParameterList Backbone::parameters() {
  nn::ParameterList out;
  input_.collect(out);
  for (auto &l : layers_) l.collect(out);
  final_norm_.collect(out);
  head_.collect(out);
  return out;
}

nn::ConstParameterList Backbone::parameters() const {
  nn::ConstParameterList out;
  input_.collect(out);
  for (const auto &l : layers_) l.collect(out);
  final_norm_.collect(out);
  head_.collect(out);
  return out;
}

std::size_t Backbone::parameter_count() const { return nn::count_parameters(parameters()); }

std::string Backbone::fingerprint() const { return nn::fingerprint(parameters()); }

void Backbone::save(const std::filesystem::path &path, const nlohmann::json &metadata) const {
  nlohmann::json meta = {{"config", config_}, {"training", metadata}};
  nn::write_archive(path, kArchiveKind, meta, parameters());
}

Backbone Backbone::load(const std::filesystem::path &path, nlohmann::json *metadata) {
  nn::Archive a = nn::read_archive(path, kArchiveKind);
  Backbone b(a.meta.at("config").get<BackboneConfig>(), 0);
  nn::assign(a, b.parameters());
  if (metadata != nullptr) *metadata = a.meta.at("training");
  return b;
}

double mean_wer(const Backbone &backbone, std::span<const corpus::Utterance *const> utterances) {
  if (utterances.empty()) throw ConfigError("mean_wer: no utterances");
  double total = 0.0;
  for (const corpus::Utterance *u : utterances) {
    total += ctc::wer(u->transcript, ctc::greedy_decode(backbone.forward(u->features).log_probs));
  }
  return total / static_cast<double>(utterances.size());
}

Backbone pretrain(const corpus::Corpus &corpus, const ExperimentConfig &config,
                  PretrainReport *report) {
  auto train = corpus.split(corpus::Split::kL1Pretrain);
  auto dev = corpus.split(corpus::Split::kL1Dev);
  if (train.empty()) throw ConfigError("pretrain: empty L1 pretrain split");
  if (dev.empty()) throw ConfigError("pretrain: empty L1 dev split");

  Backbone model(config.backbone, mix_seed(config.seed, 0xb0b));
  nn::AdamWOptions opt;
  opt.learning_rate = config.pretrain.learning_rate;
  opt.beta1 = config.train.beta1;
  opt.beta2 = config.train.beta2;
  opt.eps = config.train.eps;
  opt.weight_decay = config.train.weight_decay;
  opt.clip_norm = config.train.grad_clip;
  nn::ParameterList params = model.parameters();
  nn::AdamW adam(params, opt);
  const nn::ConstParameterList trainable = nn::as_const(params);

  std::mt19937_64 rng(mix_seed(config.seed, 0xbeef));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  PretrainReport rep;
  const std::size_t batch = static_cast<std::size_t>(config.pretrain.batch_size);
  for (int epoch = 0; epoch < config.pretrain.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      nn::Graph g;
      g.set_trainable(trainable);
      std::vector<nn::Var> losses;
      for (std::size_t i = start; i < end; ++i) {
        const corpus::Utterance *u = train[order[i]];
        BackboneVars v = model.forward(g, nn::Var{}, g.constant(u->features));
        losses.push_back(ctc::loss(v.log_probs, u->transcript));
      }
      nn::Var total = nn::mean(nn::concat_rows(losses));
      if (!std::isfinite(total.scalar())) throw StageError("pretrain: non-finite loss");
      epoch_loss += total.scalar() * static_cast<double>(end - start);
      g.backward(total);
      adam.step(g.parameter_gradients());
    }
    rep.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    rep.dev_wer.push_back(mean_wer(model, dev));
    rep.epochs = epoch + 1;
    rep.final_dev_wer = rep.dev_wer.back();
    if (rep.final_dev_wer < config.pretrain.target_wer && rep.epochs >= config.pretrain.min_epochs) {
      rep.converged = true;
      break;
    }
  }
  if (report != nullptr) *report = rep;
  if (!rep.converged) {
    throw StageError("pretrain: L1 dev WER " + std::to_string(rep.final_dev_wer) +
                     " still above target " + std::to_string(config.pretrain.target_wer) +
                     " after " + std::to_string(rep.epochs) + " epochs");
  }
  return model;
}

}  // namespace intapt
