#include "intapt/mine.hpp"

#include "intapt/error.hpp"
#include "intapt/hash.hpp"

#include <cmath>
#include <numeric>
#include <random>

namespace intapt::mine {

namespace {
constexpr const char *kArchiveKind = "mine_critic";
}

std::vector<int> derangement(std::size_t n, nn::Rng &rng) {
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 2);
    std::swap(perm[i - 1], perm[pick(rng)]);
  }
  return perm;
}

StatisticsNetwork::StatisticsNetwork(int d_x, int d_y, int hidden, double output_clip,
                                     std::uint64_t seed)
    : hidden_(hidden), d_x_(d_x), d_y_(d_y), clip_(output_clip) {
  if (d_x < 1 || d_y < 1 || hidden < 1) throw ConfigError("mine: bad critic dimensions");
  if (!(output_clip > 0.0)) throw ConfigError("mine: output_clip must be > 0");
  nn::Rng rng(seed);
  mlp_ = nn::Mlp("mine.critic", {d_x + d_y, hidden, hidden, 1}, rng);
}

nn::Var StatisticsNetwork::operator()(nn::Graph &g, nn::Var x, nn::Var y) const {
  if (x.cols() != d_x_ || y.cols() != d_y_ || x.rows() != y.rows()) {
    throw ConfigError("mine: critic input shape mismatch");
  }
  const nn::Var parts[] = {x, y};
  return nn::clamp(mlp_(g, nn::concat_cols(parts)), -clip_, clip_);
}

Matrix StatisticsNetwork::operator()(const Matrix &x, const Matrix &y) const {
  nn::Graph g;
  return (*this)(g, g.constant(x), g.constant(y)).value();
}

nn::ParameterList StatisticsNetwork::parameters() {
  nn::ParameterList out;
  mlp_.collect(out);
  return out;
}

nn::ConstParameterList StatisticsNetwork::parameters() const {
  nn::ConstParameterList out;
  mlp_.collect(out);
  return out;
}

void StatisticsNetwork::save(const std::filesystem::path &path,
                             const nlohmann::json &metadata) const {
  const nlohmann::json meta = {{"d_x", d_x_},
                               {"d_y", d_y_},
                               {"hidden", hidden_},
                               {"output_clip", clip_},
                               {"training", metadata}};
  nn::write_archive(path, kArchiveKind, meta, parameters());
}

StatisticsNetwork StatisticsNetwork::load(const std::filesystem::path &path,
                                          nlohmann::json *metadata) {
  nn::Archive a = nn::read_archive(path, kArchiveKind);
  StatisticsNetwork t(a.meta.at("d_x").get<int>(), a.meta.at("d_y").get<int>(),
                      a.meta.at("hidden").get<int>(), a.meta.at("output_clip").get<double>(), 0);
  nn::assign(a, t.parameters());
  if (metadata != nullptr) *metadata = a.meta.at("training");
  return t;
}

nn::Var dv_estimate(nn::Graph &g, const StatisticsNetwork &t, nn::Var x, nn::Var y,
                    std::span<const int> perm) {
  if (x.rows() < 2) throw ConfigError("mine: DV estimate needs a batch of at least 2");
  if (perm.size() != static_cast<std::size_t>(y.rows())) {
    throw ConfigError("mine: permutation length mismatch");
  }
  nn::Var joint = nn::mean(t(g, x, y));
  nn::Var marginal = nn::log_mean_exp(t(g, x, nn::gather_rows(y, perm)));
  return nn::sub(joint, marginal);
}

double estimate(const StatisticsNetwork &t, const Matrix &x, const Matrix &y, nn::Rng &rng) {
  nn::Graph g;
  const std::vector<int> perm = derangement(static_cast<std::size_t>(y.rows()), rng);
  return dv_estimate(g, t, g.constant(x), g.constant(y), perm).scalar();
}

MineCritic::MineCritic(int d_x, int d_y, const CriticOptions &options, std::uint64_t seed)
    : options_(options),
      net_(std::make_unique<StatisticsNetwork>(d_x, d_y, options.hidden, options.output_clip,
                                               mix_seed(seed, 1))),
      rng_(mix_seed(seed, 2)) {
  if (!(options.ema_rate > 0.0 && options.ema_rate < 1.0)) {
    throw ConfigError("mine: ema_rate must lie in (0, 1)");
  }
  adam_ = std::make_unique<nn::AdamW>(net_->parameters(), options.adam);
}

double MineCritic::update(const Matrix &x, const Matrix &y) {
  if (x.rows() < 2) throw ConfigError("mine: critic update needs a batch of at least 2");
  nn::Graph g;
  g.set_trainable(nn::as_const(net_->parameters()));
  const std::vector<int> perm = derangement(static_cast<std::size_t>(y.rows()), rng_);
  nn::Var xv = g.constant(x);
  nn::Var yv = g.constant(y);
  nn::Var joint = nn::mean((*net_)(g, xv, yv));
  nn::Var t_marg = (*net_)(g, xv, nn::gather_rows(yv, perm));
  nn::Var exp_marg = nn::mean(nn::exp(t_marg));

  const double batch_mean = exp_marg.scalar();
  const double dv = joint.scalar() - nn::log_mean_exp(t_marg).scalar();
  if (!std::isfinite(dv) || !std::isfinite(batch_mean)) {
    throw StageError("mine: non-finite estimate at critic step " + std::to_string(steps()));
  }
  ema_ = options_.ema_rate * ema_ + (1.0 - options_.ema_rate) * batch_mean;
  ++ema_updates_;
  const double corrected = ema_ / (1.0 - std::pow(options_.ema_rate, ema_updates_));

  // Ascent on joint - E[exp T] / ema, i.e. descent on its negation.
  nn::Var surrogate = nn::sub(nn::scale(exp_marg, 1.0 / corrected), joint);
  g.backward(surrogate);
  nn::Gradients grads = g.parameter_gradients();
  if (!grads.all_finite()) {
    throw StageError("mine: non-finite critic gradient at step " + std::to_string(steps()));
  }
  adam_->step(std::move(grads));
  return dv;
}

}  // namespace intapt::mine
