#include "intapt/trainer.hpp"

#include "intapt/error.hpp"
#include "intapt/hash.hpp"
#include "intapt/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace intapt {

namespace fs = std::filesystem;

std::string to_string(Regime r) {
  switch (r) {
    case Regime::kFinetune: return "finetune";
    case Regime::kPromptCtc: return "prompt_ctc";
    case Regime::kIntapt: return "intapt";
  }
  return "unknown";
}

Regime regime_from_string(const std::string &s) {
  for (Regime r : {Regime::kFinetune, Regime::kPromptCtc, Regime::kIntapt}) {
    if (to_string(r) == s) return r;
  }
  throw ConfigError("unknown regime '" + s + "' (expected finetune, prompt_ctc or intapt)");
}

bool uses_prompt(Regime r) { return r != Regime::kFinetune; }

nn::AdamWOptions adamw_options(const TrainConfig &t, double learning_rate) {
  nn::AdamWOptions o;
  o.learning_rate = learning_rate;
  o.beta1 = t.beta1;
  o.beta2 = t.beta2;
  o.eps = t.eps;
  o.weight_decay = t.weight_decay;
  o.clip_norm = t.grad_clip;
  return o;
}

nn::Var ctc_over_prompted_output(nn::Var log_probs, std::span<const int> target,
                                 Eigen::Index prompt_len, bool strip) {
  if (strip && prompt_len > 0) {
    log_probs = nn::slice_rows(log_probs, prompt_len, log_probs.rows() - prompt_len);
  }
  return ctc::loss(log_probs, target);
}

double ctc_over_prompted_output(const Matrix &log_probs, std::span<const int> target,
                                Eigen::Index prompt_len, bool strip) {
  if (strip && prompt_len > 0) {
    return ctc::loss(log_probs.bottomRows(log_probs.rows() - prompt_len), target);
  }
  return ctc::loss(log_probs, target);
}

// ---------------------------------------------------------------------------

Recognizer::Recognizer(const Backbone &backbone, const PromptGenerator *generator)
    : backbone_(&backbone), generator_(generator) {}

Recognizer::Pass Recognizer::run(const Matrix &features) const {
  const int tap = backbone_->config().tap_layer;
  Pass pass;
  if (generator_ != nullptr && generator_->length() > 0) {
    nn::Graph g;
    BackboneVars clean = backbone_->forward(g, nn::Var{}, g.constant(features), tap);
    pass.prompt = generator_->generate(clean.hidden.back().value());
  }
  BackboneOutput out = pass.prompt.rows() > 0 ? backbone_->forward_with_prompt(pass.prompt, features)
                                              : backbone_->forward(features);
  pass.log_probs = std::move(out.log_probs);
  pass.tap = std::move(out.hidden.layers[static_cast<std::size_t>(tap)]);
  return pass;
}

ctc::TokenSeq Recognizer::decode(const Matrix &features) const {
  Pass pass = run(features);
  const Eigen::Index lp = pass.prompt.rows();
  const bool input_only = generator_ != nullptr && (generator_->config().strip_prompt_frames ||
                                                    !generator_->config().decode_prompt_frames);
  if (input_only && lp > 0) {
    return ctc::greedy_decode(pass.log_probs.bottomRows(pass.log_probs.rows() - lp));
  }
  return ctc::greedy_decode(pass.log_probs);
}

double Recognizer::wer(const corpus::Utterance &u) const {
  return ctc::wer(u.transcript, decode(u.features));
}

double Recognizer::mean_wer(std::span<const corpus::Utterance *const> us) const {
  if (us.empty()) throw ConfigError("recognizer: no utterances to score");
  double total = 0.0;
  for (const auto *u : us) total += wer(*u);
  return total / static_cast<double>(us.size());
}

// ---------------------------------------------------------------------------

RunSeeds run_seeds(std::uint64_t experiment_seed, std::uint64_t regime_seed) {
  const std::uint64_t base = mix_seed(experiment_seed, regime_seed);
  return {mix_seed(base, 1), mix_seed(base, 2), mix_seed(base, 3)};
}

std::vector<const corpus::Utterance *> adaptation_train_set(const corpus::Corpus &corpus) {
  return corpus.split(corpus::Split::kL2Train);
}

std::vector<const corpus::Utterance *> adaptation_dev_set(const corpus::Corpus &corpus) {
  std::vector<const corpus::Utterance *> out;
  for (const auto *u : corpus.split(corpus::Split::kL2Dev)) {
    if (corpus.group(u->accent_id) != AccentGroup::kUA) out.push_back(u);
  }
  return out;
}

namespace {

void require_frozen(const std::string &what, const std::string &before, const std::string &after) {
  if (before != after) {
    throw InvariantViolation(what + " fingerprint drifted from " + before.substr(0, 16) + " to " +
                             after.substr(0, 16));
  }
}

struct Batches {
  std::vector<std::size_t> order;
  std::mt19937_64 rng;
  std::size_t batch;

  Batches(std::size_t n, std::uint64_t seed, std::size_t batch_size) : order(n), rng(seed), batch(batch_size) {
    std::iota(order.begin(), order.end(), std::size_t{0});
  }
  void shuffle() { std::shuffle(order.begin(), order.end(), rng); }
  std::size_t count() const { return (order.size() + batch - 1) / batch; }
  std::span<const std::size_t> get(std::size_t b) const {
    const std::size_t start = b * batch;
    return std::span(order).subspan(start, std::min(batch, order.size() - start));
  }
};

void check_finite(double v, const std::string &what, long step, const std::vector<double> &trace) {
  if (std::isfinite(v)) return;
  std::string tail;
  for (std::size_t i = trace.size() > 5 ? trace.size() - 5 : 0; i < trace.size(); ++i) {
    tail += " " + std::to_string(trace[i]);
  }
  throw StageError(what + " became non-finite at step " + std::to_string(step) +
                   "; last losses:" + (tail.empty() ? " none" : tail));
}

RunCheckpoint train_prompt_loop(Regime regime, const corpus::Corpus &corpus,
                                const Backbone &backbone, const AccentModule *am,
                                const ExperimentConfig &config, std::uint64_t seed) {
  const TrainConfig &tc = config.train;
  const bool intapt = regime == Regime::kIntapt;
  if (intapt && am == nullptr) throw ConfigError("train_intapt: accent module required");
  const RunSeeds seeds = run_seeds(config.seed, seed);
  const int tap = backbone.config().tap_layer;

  RunCheckpoint ck;
  ck.regime = regime;
  ck.seed = seed;
  ck.config = config;
  ck.fingerprints.backbone_start = backbone.fingerprint();
  if (am != nullptr) ck.fingerprints.am_start = am->fingerprint();

  PromptGenerator pg(config.prompt, backbone.config().d_model, seeds.generator);
  check_parameter_budget(pg.parameter_count(), backbone.parameter_count(), config.prompt.param_cap);
  nn::ParameterList params = pg.parameters();
  nn::AdamW adam(params, adamw_options(tc, tc.lr_prompt));
  const nn::ConstParameterList trainable = nn::as_const(params);
  ck.trainable_parameters = pg.parameter_count();

  std::optional<mine::MineCritic> critic;
  if (intapt) {
    mine::CriticOptions co;
    co.hidden = config.mine.hidden;
    co.output_clip = config.mine.output_clip;
    co.ema_rate = config.mine.ema_rate;
    co.adam = adamw_options(tc, config.mine.learning_rate);
    critic.emplace(am->d_acc(), am->d_acc(), co, seeds.critic);
  }

  const auto train = adaptation_train_set(corpus);
  const auto dev = adaptation_dev_set(corpus);
  if (train.size() < 2) throw ConfigError("train: L2 train split too small");
  if (dev.empty()) throw ConfigError("train: empty L2 dev split");

  // Clean-pass taps (and accent features) never change: the backbone and
  // the accent module are frozen.
  std::vector<Matrix> taps;
  Matrix z_clean;
  taps.reserve(train.size());
  for (const auto *u : train) {
    nn::Graph g;
    taps.push_back(backbone.forward(g, nn::Var{}, g.constant(u->features), tap).hidden.back().value());
  }
  if (intapt) {
    z_clean.resize(static_cast<Eigen::Index>(train.size()), am->d_acc());
    for (std::size_t i = 0; i < train.size(); ++i) {
      z_clean.row(static_cast<Eigen::Index>(i)) = am->extract(taps[i]).transpose();
    }
  }

  const Eigen::Index lp = config.prompt.length;
  const bool strip = config.prompt.strip_prompt_frames;
  Batches batches(train.size(), seeds.order, static_cast<std::size_t>(tc.batch_size));
  auto dev_wer = [&] { return Recognizer(backbone, &pg).mean_wer(dev); };

  ck.history.push_back({0, 0, dev_wer(), 0.0, 0.0, 0.0});
  PromptGenerator best = pg;
  double best_wer = ck.history.back().dev_wer;
  bool stop = false;
  for (int epoch = 1; epoch <= tc.epochs && !stop; ++epoch) {
    batches.shuffle();
    double sum_obj = 0.0, sum_ctc = 0.0, sum_mi = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < batches.count(); ++b) {
      if (tc.max_steps >= 0 && ck.steps >= tc.max_steps) {
        stop = true;
        break;
      }
      const auto idx = batches.get(b);
      nn::Graph g;
      g.set_trainable(trainable);
      std::vector<nn::Var> ctcs, zs;
      for (std::size_t i : idx) {
        nn::Var p = lp > 0 ? pg.generate(g, g.constant(taps[i])) : nn::Var{};
        BackboneVars out = backbone.forward(g, p, g.constant(train[i]->features));
        ctcs.push_back(ctc_over_prompted_output(out.log_probs, train[i]->transcript, lp, strip));
        if (intapt) {
          nn::Var h = out.hidden[static_cast<std::size_t>(tap)];
          zs.push_back(am->extract(g, nn::slice_rows(h, lp, h.rows() - lp)));
        }
      }
      nn::Var objective = nn::mean(nn::concat_rows(ctcs));
      const double ctc_value = objective.scalar();
      check_finite(ctc_value, "CTC loss", ck.steps, ck.loss_trace);

      double mi = 0.0;
      std::string critic_hash;
      if (intapt && idx.size() >= 2) {
        nn::Var z_prompted = nn::concat_rows(zs);
        Matrix z_batch(static_cast<Eigen::Index>(idx.size()), z_clean.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) {
          z_batch.row(static_cast<Eigen::Index>(k)) = z_clean.row(static_cast<Eigen::Index>(idx[k]));
        }
        // Critic ascent with the generator held fixed.
        const std::string pg_hash = tc.check_minmax ? pg.fingerprint() : std::string{};
        for (int k = 0; k < tc.critic_steps; ++k) critic->update(z_prompted.value(), z_batch);
        if (tc.check_minmax) require_frozen("prompt generator during critic step", pg_hash, pg.fingerprint());

        const std::vector<int> perm = mine::derangement(idx.size(), critic->rng());
        nn::Var dv = mine::dv_estimate(g, critic->network(), z_prompted, g.constant(z_batch), perm);
        mi = dv.scalar();
        check_finite(mi, "MI estimate", ck.steps, ck.loss_trace);
        if (tc.lambda_mi > 0.0) objective = nn::add(objective, nn::scale(dv, tc.lambda_mi));
        if (tc.check_minmax) critic_hash = critic->network().fingerprint();
      }

      // Generator descent with the critic held fixed.
      g.backward(objective);
      adam.step(g.parameter_gradients());
      if (!critic_hash.empty()) {
        require_frozen("critic during generator step", critic_hash, critic->network().fingerprint());
      }
      ++ck.steps;
      ck.loss_trace.push_back(objective.scalar());
      if (intapt) ck.mi_trace.push_back(mi);
      sum_obj += objective.scalar() * static_cast<double>(idx.size());
      sum_ctc += ctc_value * static_cast<double>(idx.size());
      sum_mi += mi * static_cast<double>(idx.size());
      seen += idx.size();
    }
    if (seen == 0) break;
    const double n = static_cast<double>(seen);
    ck.history.push_back({epoch, ck.steps, dev_wer(), sum_obj / n, sum_ctc / n, sum_mi / n});
    if (ck.history.back().dev_wer < best_wer) {
      best_wer = ck.history.back().dev_wer;
      best = pg;
      ck.selected_epoch = epoch;
    }
  }

  ck.generator = std::move(best);
  ck.fingerprints.generator = ck.generator->fingerprint();
  if (critic) {
    ck.critic = critic->network();
    ck.fingerprints.critic = ck.critic->fingerprint();
  }
  ck.fingerprints.backbone_end = backbone.fingerprint();
  require_frozen("backbone", ck.fingerprints.backbone_start, ck.fingerprints.backbone_end);
  if (am != nullptr) {
    ck.fingerprints.am_end = am->fingerprint();
    require_frozen("accent module", ck.fingerprints.am_start, ck.fingerprints.am_end);
  }
  return ck;
}

}  // namespace

RunCheckpoint train_prompt_ctc(const corpus::Corpus &corpus, const Backbone &backbone,
                               const ExperimentConfig &config, std::uint64_t seed,
                               const AccentModule *am) {
  return train_prompt_loop(Regime::kPromptCtc, corpus, backbone, am, config, seed);
}

RunCheckpoint train_intapt(const corpus::Corpus &corpus, const Backbone &backbone,
                           const AccentModule &am, const ExperimentConfig &config,
                           std::uint64_t seed) {
  return train_prompt_loop(Regime::kIntapt, corpus, backbone, &am, config, seed);
}

RunCheckpoint train_finetune(const corpus::Corpus &corpus, const Backbone &backbone,
                             const ExperimentConfig &config, std::uint64_t seed) {
  const TrainConfig &tc = config.train;
  const RunSeeds seeds = run_seeds(config.seed, seed);
  RunCheckpoint ck;
  ck.regime = Regime::kFinetune;
  ck.seed = seed;
  ck.config = config;
  ck.fingerprints.backbone_start = backbone.fingerprint();

  Backbone model = backbone;
  nn::ParameterList params = model.parameters();
  nn::AdamW adam(params, adamw_options(tc, tc.lr_finetune));
  const nn::ConstParameterList trainable = nn::as_const(params);
  ck.trainable_parameters = model.parameter_count();

  const auto train = adaptation_train_set(corpus);
  const auto dev = adaptation_dev_set(corpus);
  if (train.empty()) throw ConfigError("train: empty L2 train split");
  if (dev.empty()) throw ConfigError("train: empty L2 dev split");
  Batches batches(train.size(), seeds.order, static_cast<std::size_t>(tc.batch_size));

  ck.history.push_back({0, 0, mean_wer(model, dev), 0.0, 0.0, 0.0});
  Backbone best = model;
  double best_wer = ck.history.back().dev_wer;
  bool stop = false;
  for (int epoch = 1; epoch <= tc.epochs && !stop; ++epoch) {
    batches.shuffle();
    double sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < batches.count(); ++b) {
      if (tc.max_steps >= 0 && ck.steps >= tc.max_steps) {
        stop = true;
        break;
      }
      const auto idx = batches.get(b);
      nn::Graph g;
      g.set_trainable(trainable);
      std::vector<nn::Var> ctcs;
      for (std::size_t i : idx) {
        BackboneVars out = model.forward(g, nn::Var{}, g.constant(train[i]->features));
        ctcs.push_back(ctc::loss(out.log_probs, train[i]->transcript));
      }
      nn::Var loss = nn::mean(nn::concat_rows(ctcs));
      check_finite(loss.scalar(), "CTC loss", ck.steps, ck.loss_trace);
      g.backward(loss);
      adam.step(g.parameter_gradients());
      ++ck.steps;
      ck.loss_trace.push_back(loss.scalar());
      sum += loss.scalar() * static_cast<double>(idx.size());
      seen += idx.size();
    }
    if (seen == 0) break;
    const double mean_loss = sum / static_cast<double>(seen);
    ck.history.push_back({epoch, ck.steps, mean_wer(model, dev), mean_loss, mean_loss, 0.0});
    if (ck.history.back().dev_wer < best_wer) {
      best_wer = ck.history.back().dev_wer;
      best = model;
      ck.selected_epoch = epoch;
    }
  }
  ck.finetuned = std::move(best);
  ck.fingerprints.finetuned = ck.finetuned->fingerprint();
  ck.fingerprints.backbone_end = backbone.fingerprint();
  require_frozen("original backbone", ck.fingerprints.backbone_start, ck.fingerprints.backbone_end);
  return ck;
}

RunCheckpoint train_regime(Regime regime, const corpus::Corpus &corpus, const Backbone &backbone,
                           const AccentModule *am, const ExperimentConfig &config,
                           std::uint64_t seed) {
  switch (regime) {
    case Regime::kFinetune: return train_finetune(corpus, backbone, config, seed);
    case Regime::kPromptCtc: return train_prompt_ctc(corpus, backbone, config, seed, am);
    case Regime::kIntapt:
      if (am == nullptr) throw ConfigError("intapt regime needs a trained accent module");
      return train_intapt(corpus, backbone, *am, config, seed);
  }
  throw ConfigError("unknown regime");
}

// ---------------------------------------------------------------------------

Recognizer RunCheckpoint::recognizer(const Backbone &frozen) const {
  return Recognizer(finetuned ? *finetuned : frozen, generator ? &*generator : nullptr);
}

namespace {

nlohmann::json to_json(const EvalRecord &r) {
  return {{"epoch", r.epoch},           {"step", r.step},         {"dev_wer", r.dev_wer},
          {"train_loss", r.train_loss}, {"train_ctc", r.train_ctc}, {"train_mi", r.train_mi}};
}

nlohmann::json to_json(const RunFingerprints &f) {
  return {{"backbone_start", f.backbone_start}, {"backbone_end", f.backbone_end},
          {"am_start", f.am_start},             {"am_end", f.am_end},
          {"generator", f.generator},           {"critic", f.critic},
          {"finetuned", f.finetuned}};
}

}  // namespace

void RunCheckpoint::save(const fs::path &dir) const {
  fs::create_directories(dir);
  write_json(dir / "config.json", config);
  const nlohmann::json training = {{"regime", to_string(regime)}, {"seed", seed},
                                   {"selected_epoch", selected_epoch}};
  if (generator) generator->save(dir / "weights.bin", training);
  if (finetuned) finetuned->save(dir / "weights.bin", training);
  if (critic) critic->save(dir / "critic.bin", training);
  {
    std::ofstream os(dir / "metrics.jsonl");
    if (!os) throw StageError("cannot write metrics.jsonl in " + dir.string());
    for (const auto &r : history) os << to_json(r).dump() << '\n';
  }
  write_json(dir / "fingerprints.json", to_json(fingerprints));
  write_json(dir / "run.json", {{"regime", to_string(regime)},
                                {"seed", seed},
                                {"selected_epoch", selected_epoch},
                                {"steps", steps},
                                {"trainable_parameters", trainable_parameters},
                                {"loss_trace", loss_trace},
                                {"mi_trace", mi_trace}});
}

RunCheckpoint RunCheckpoint::load(const fs::path &dir) {
  RunCheckpoint ck;
  const nlohmann::json run = read_json(dir / "run.json");
  ck.regime = regime_from_string(run.at("regime").get<std::string>());
  ck.seed = run.at("seed").get<std::uint64_t>();
  ck.selected_epoch = run.at("selected_epoch").get<int>();
  ck.steps = run.at("steps").get<long>();
  ck.trainable_parameters = run.at("trainable_parameters").get<std::size_t>();
  ck.loss_trace = run.at("loss_trace").get<std::vector<double>>();
  ck.mi_trace = run.at("mi_trace").get<std::vector<double>>();
  ck.config = read_json(dir / "config.json");
  if (uses_prompt(ck.regime)) {
    ck.generator = PromptGenerator::load(dir / "weights.bin");
  } else {
    ck.finetuned = Backbone::load(dir / "weights.bin");
  }
  if (ck.regime == Regime::kIntapt) ck.critic = mine::StatisticsNetwork::load(dir / "critic.bin");
  const nlohmann::json f = read_json(dir / "fingerprints.json");
  ck.fingerprints = {f.at("backbone_start"), f.at("backbone_end"), f.at("am_start"),
                     f.at("am_end"),         f.at("generator"),    f.at("critic"),
                     f.at("finetuned")};
  std::ifstream metrics(dir / "metrics.jsonl");
  std::string line;
  while (std::getline(metrics, line)) {
    if (line.empty()) continue;
    const nlohmann::json r = nlohmann::json::parse(line);
    ck.history.push_back({r.at("epoch"), r.at("step"), r.at("dev_wer"), r.at("train_loss"),
                          r.at("train_ctc"), r.at("train_mi")});
  }
  const std::string stored = ck.generator ? ck.fingerprints.generator : ck.fingerprints.finetuned;
  const std::string actual = ck.generator ? ck.generator->fingerprint() : ck.finetuned->fingerprint();
  if (stored != actual) throw InvariantViolation("checkpoint weights do not match fingerprints.json");
  return ck;
}

}  // namespace intapt
