#include "intapt/accent_module.hpp"

#include "intapt/error.hpp"
#include "intapt/hash.hpp"
#include "intapt/nn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

namespace intapt {

namespace {

constexpr const char *kArchiveKind = "accent_module";

int class_of(const std::vector<int> &class_accents, int accent_id) {
  auto it = std::find(class_accents.begin(), class_accents.end(), accent_id);
  return it == class_accents.end() ? -1 : static_cast<int>(it - class_accents.begin());
}

// Accents the classifier is trained on: L1 plus every L2 accent with
// training speech (MFA, LFA), in accent-id order.
std::vector<int> training_accents(const corpus::Corpus &corpus) {
  std::vector<int> out;
  for (const auto &spec : corpus.accents()) {
    if (corpus.group(spec.accent_id) != AccentGroup::kUA) out.push_back(spec.accent_id);
  }
  return out;
}

std::size_t largest_accent_share(std::span<const corpus::Utterance *const> us) {
  std::map<int, std::size_t> counts;
  for (const auto *u : us) ++counts[u->accent_id];
  std::size_t best = 0;
  for (const auto &[a, n] : counts) best = std::max(best, n);
  return best;
}

std::vector<const corpus::Utterance *> with_l1_share(std::vector<const corpus::Utterance *> l2,
                                                     std::vector<const corpus::Utterance *> l1) {
  const std::size_t n = std::min(l1.size(), largest_accent_share(l2));
  l2.insert(l2.end(), l1.begin(), l1.begin() + static_cast<std::ptrdiff_t>(n));
  return l2;
}

struct Example {
  Matrix pooled;  // 1 x d_model
  int label = -1;
  double target = 0.0;  // standardised per-frame CTC
};

}  // namespace

AccentModule::AccentModule(const AccentModuleConfig &config, int d_model,
                           std::vector<int> class_accents, std::uint64_t seed)
    : config_(config), d_model_(d_model), class_accents_(std::move(class_accents)) {
  if (class_accents_.size() < 2) throw ConfigError("accent module: need at least two classes");
  nn::Rng rng(seed);
  extractor_ = nn::Mlp("am.extractor", {d_model, config.hidden, config.hidden, config.d_acc}, rng);
  classifier_ = nn::Mlp("am.classifier", {config.d_acc, static_cast<int>(class_accents_.size())},
                        rng);
  regressor_ = nn::Mlp("am.regressor",
                       {config.d_acc, config.regressor_hidden, config.regressor_hidden, 1}, rng);
}

nn::Var AccentModule::extract(nn::Graph &g, nn::Var tap) const {
  if (tap.rows() < 1) throw ConfigError("accent module: empty hidden sequence");
  return extract_pooled(g, nn::mean_rows(tap));
}

nn::Var AccentModule::extract_pooled(nn::Graph &g, nn::Var pooled) const {
  if (pooled.cols() != d_model_) throw ConfigError("accent module: tap dim mismatch");
  return extractor_(g, pooled);
}

Vector AccentModule::extract(const Matrix &tap) const {
  nn::Graph g;
  return extract(g, g.constant(tap)).value().row(0).transpose();
}

nn::Var AccentModule::classify(nn::Graph &g, nn::Var z) const { return classifier_(g, z); }

Vector AccentModule::classify(const Vector &z) const {
  nn::Graph g;
  return classify(g, g.constant(z.transpose())).value().row(0).transpose();
}

int AccentModule::predict_accent(const Vector &z) const {
  Eigen::Index k = 0;
  classify(z).maxCoeff(&k);
  return class_accents_[static_cast<std::size_t>(k)];
}

nn::Var AccentModule::predict_intensity(nn::Graph &g, nn::Var z) const { return regressor_(g, z); }

double AccentModule::predict_intensity(const Vector &z) const {
  nn::Graph g;
  return predict_intensity(g, g.constant(z.transpose())).scalar();
}

void AccentModule::set_target_stats(double mean, double std) {
  if (!std::isfinite(mean) || !(std > 0.0)) throw StageError("accent module: bad target stats");
  target_mean_ = mean;
  target_std_ = std;
}

nn::ParameterList AccentModule::parameters() {
  nn::ParameterList out;
  extractor_.collect(out);
  classifier_.collect(out);
  regressor_.collect(out);
  return out;
}

nn::ConstParameterList AccentModule::parameters() const {
  nn::ConstParameterList out;
  extractor_.collect(out);
  classifier_.collect(out);
  regressor_.collect(out);
  return out;
}

nn::ParameterList AccentModule::extractor_parameters() {
  nn::ParameterList out;
  extractor_.collect(out);
  return out;
}

nn::ParameterList AccentModule::classifier_parameters() {
  nn::ParameterList out;
  classifier_.collect(out);
  return out;
}

nn::ParameterList AccentModule::regressor_parameters() {
  nn::ParameterList out;
  regressor_.collect(out);
  return out;
}

std::string AccentModule::fingerprint() const { return nn::fingerprint(parameters()); }

void AccentModule::save(const std::filesystem::path &path, const nlohmann::json &metadata) const {
  const nlohmann::json meta = {{"config", config_},
                               {"d_model", d_model_},
                               {"class_accents", class_accents_},
                               {"target_mean", target_mean_},
                               {"target_std", target_std_},
                               {"training", metadata}};
  nn::write_archive(path, kArchiveKind, meta, parameters());
}

AccentModule AccentModule::load(const std::filesystem::path &path, nlohmann::json *metadata) {
  nn::Archive a = nn::read_archive(path, kArchiveKind);
  AccentModule m(a.meta.at("config").get<AccentModuleConfig>(), a.meta.at("d_model").get<int>(),
                 a.meta.at("class_accents").get<std::vector<int>>(), 0);
  nn::assign(a, m.parameters());
  m.target_mean_ = a.meta.at("target_mean").get<double>();
  m.target_std_ = a.meta.at("target_std").get<double>();
  if (metadata != nullptr) *metadata = a.meta.at("training");
  return m;
}

double per_frame_ctc(const Backbone &backbone, const corpus::Utterance &u) {
  const Matrix lp = backbone.forward(u.features).log_probs;
  return ctc::loss(lp, u.transcript) / static_cast<double>(lp.rows());
}

std::vector<const corpus::Utterance *> accent_training_set(const corpus::Corpus &corpus) {
  return with_l1_share(corpus.split(corpus::Split::kL2Train),
                       corpus.split(corpus::Split::kL1Pretrain));
}

std::vector<const corpus::Utterance *> accent_dev_set(const corpus::Corpus &corpus) {
  std::vector<const corpus::Utterance *> l2;
  for (const auto *u : corpus.split(corpus::Split::kL2Dev)) {
    if (corpus.group(u->accent_id) != AccentGroup::kUA) l2.push_back(u);
  }
  return with_l1_share(std::move(l2), corpus.split(corpus::Split::kL1Dev));
}

AccentModule train_am(const corpus::Corpus &corpus, const Backbone &backbone,
                      const ExperimentConfig &config, AccentTrainReport *report) {
  const AccentModuleConfig &ac = config.accent;
  const int tap = backbone.config().tap_layer;
  AccentModule model(ac, backbone.config().d_model, training_accents(corpus),
                     mix_seed(config.seed, 0xacc));

  auto prepare = [&](const std::vector<const corpus::Utterance *> &us, std::vector<double> &raw) {
    std::vector<Example> out;
    for (const auto *u : us) {
      const BackboneOutput o = backbone.forward(u->features);
      Example e;
      e.pooled = o.hidden.layers[static_cast<std::size_t>(tap)].colwise().mean();
      e.label = class_of(model.class_accents(), u->accent_id);
      if (e.label < 0) throw StageError("train_am: accent " + std::to_string(u->accent_id) +
                                        " has no classifier class");
      raw.push_back(ctc::loss(o.log_probs, u->transcript) / static_cast<double>(o.log_probs.rows()));
      out.push_back(std::move(e));
    }
    return out;
  };
  const auto train_us = accent_training_set(corpus);
  const auto dev_us = accent_dev_set(corpus);
  if (corpus.split(corpus::Split::kL2Train).empty()) throw ConfigError("train_am: empty L2 train");
  std::vector<double> train_raw, dev_raw;
  std::vector<Example> train = prepare(train_us, train_raw);
  std::vector<Example> dev = prepare(dev_us, dev_raw);

  const double mean = std::accumulate(train_raw.begin(), train_raw.end(), 0.0) /
                      static_cast<double>(train_raw.size());
  double var = 0.0;
  for (double r : train_raw) var += (r - mean) * (r - mean);
  const double stdev = std::sqrt(var / static_cast<double>(train_raw.size()));
  model.set_target_stats(mean, std::max(stdev, 1e-12));
  for (std::size_t i = 0; i < train.size(); ++i) train[i].target = (train_raw[i] - mean) / model.target_std();
  for (std::size_t i = 0; i < dev.size(); ++i) dev[i].target = (dev_raw[i] - mean) / model.target_std();

  const bool regress = ac.lambda > 0.0;
  nn::ParameterList params = model.extractor_parameters();
  for (nn::Parameter *p : model.classifier_parameters()) params.push_back(p);
  if (regress) {
    for (nn::Parameter *p : model.regressor_parameters()) params.push_back(p);
  }
  nn::AdamWOptions opt;
  opt.learning_rate = ac.learning_rate;
  opt.beta1 = config.train.beta1;
  opt.beta2 = config.train.beta2;
  opt.eps = config.train.eps;
  opt.weight_decay = config.train.weight_decay;
  opt.clip_norm = config.train.grad_clip;
  nn::AdamW adam(params, opt);
  const nn::ConstParameterList trainable = nn::as_const(params);

  // CE + lambda * MSE over a batch; returns (total, ce, mse) and leaves the graph
  // ready for backward().
  struct Terms {
    nn::Var total;
    double ce = 0.0;
    double mse = 0.0;
    int correct = 0;
  };
  auto batch_loss = [&](nn::Graph &g, const std::vector<Example> &data,
                        std::span<const std::size_t> idx) {
    std::vector<nn::Var> pooled;
    pooled.reserve(idx.size());
    Matrix targets(static_cast<Eigen::Index>(idx.size()), 1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      pooled.push_back(g.constant(data[idx[i]].pooled));
      targets(static_cast<Eigen::Index>(i), 0) = data[idx[i]].target;
    }
    nn::Var z = model.extract_pooled(g, nn::concat_rows(pooled));
    nn::Var logits = model.classify(g, z);
    std::vector<nn::Var> ces;
    Terms t;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const int label = data[idx[i]].label;
      nn::Var row = nn::slice_rows(logits, static_cast<Eigen::Index>(i), 1);
      ces.push_back(nn::cross_entropy(row, label));
      Eigen::Index arg = 0;
      row.value().row(0).maxCoeff(&arg);
      t.correct += static_cast<int>(arg == label);
    }
    nn::Var ce = nn::mean(nn::concat_rows(ces));
    t.ce = ce.scalar();
    if (regress) {
      nn::Var m = nn::mse(model.predict_intensity(g, z), g.constant(targets));
      t.mse = m.scalar();
      t.total = nn::add(ce, nn::scale(m, ac.lambda));
    } else {
      t.total = ce;
    }
    return t;
  };

  auto dev_eval = [&](double *accuracy) {
    std::vector<std::size_t> all(dev.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    nn::Graph g;
    Terms t = batch_loss(g, dev, all);
    double mse = t.mse;
    if (!regress) {
      // The regressor is untouched at lambda 0 but its error is still reported.
      Matrix targets(static_cast<Eigen::Index>(dev.size()), 1);
      std::vector<nn::Var> pooled;
      for (std::size_t i = 0; i < dev.size(); ++i) {
        pooled.push_back(g.constant(dev[i].pooled));
        targets(static_cast<Eigen::Index>(i), 0) = dev[i].target;
      }
      nn::Var z = model.extract_pooled(g, nn::concat_rows(pooled));
      mse = nn::mse(model.predict_intensity(g, z), g.constant(targets)).scalar();
    }
    *accuracy = static_cast<double>(t.correct) / static_cast<double>(dev.size());
    return t.ce + ac.lambda * mse;
  };

  AccentTrainReport rep;
  std::mt19937_64 rng(mix_seed(config.seed, 0xacc0));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Matrix> best;
  double best_dev = std::numeric_limits<double>::infinity();
  const std::size_t batch = static_cast<std::size_t>(ac.batch_size);
  for (int epoch = 0; epoch < ac.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      nn::Graph g;
      g.set_trainable(trainable);
      Terms t = batch_loss(g, train, std::span(order).subspan(start, end - start));
      const double total = t.total.scalar();
      if (!std::isfinite(total)) {
        throw StageError("train_am: non-finite loss at epoch " + std::to_string(epoch) +
                         " (ce " + std::to_string(t.ce) + ", mse " + std::to_string(t.mse) + ")");
      }
      rep.max_decomposition_error =
          std::max(rep.max_decomposition_error, std::abs(total - (t.ce + ac.lambda * t.mse)));
      epoch_loss += total * static_cast<double>(end - start);
      g.backward(t.total);
      adam.step(g.parameter_gradients());
    }
    rep.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    double acc = 0.0;
    const double d = dev_eval(&acc);
    if (!std::isfinite(d)) throw StageError("train_am: non-finite dev loss");
    rep.dev_loss.push_back(d);
    rep.dev_accuracy.push_back(acc);
    if (d < best_dev) {
      best_dev = d;
      rep.selected_epoch = epoch;
      best.clear();
      for (const nn::Parameter *p : model.parameters()) best.push_back(p->value);
    }
  }
  nn::ParameterList all = model.parameters();
  for (std::size_t i = 0; i < all.size(); ++i) all[i]->value = best[i];
  if (report != nullptr) *report = rep;
  return model;
}

}  // namespace intapt
