#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "evomodel.hpp"
#include "numeric.hpp"
#include "proposal.hpp"
#include "rng.hpp"
#include "seqio.hpp"
#include "sweep.hpp"

namespace phylosmc {

enum class Objective { vcsmc, vncsmc };

inline std::string to_string(Objective o) { return o == Objective::vcsmc ? "vcsmc" : "vncsmc"; }
inline std::string to_string(DiscreteEstimator e) {
  return e == DiscreteEstimator::drop_discrete ? "drop_discrete" : "gumbel_softmax";
}

struct TrainConfig {
  Objective objective = Objective::vcsmc;
  std::size_t particles = 16;
  std::size_t subsamples = 1;
  int epochs = 100;
  double learning_rate = 1e-3;
  double batch_fraction = 0.25;
  double gumbel_temperature = 0.5;
  DiscreteEstimator estimator = DiscreteEstimator::drop_discrete;
  std::uint64_t seed = 0;
  double lambda_bl = 10.0;
  ModelKind model = ModelKind::jc69;
  bool learn_model = false;
  bool learn_branch_rate = true;
  bool per_rank_rate = false;
  unsigned threads = 1;

  void validate() const {
    if (particles < 1) throw std::invalid_argument("train: K must be >= 1");
    if (subsamples < 1) throw std::invalid_argument("train: M must be >= 1");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (!(gumbel_temperature > 0.0)) throw std::invalid_argument("train: Gumbel temperature must be positive");
    if (!(batch_fraction > 0.0 && batch_fraction <= 1.0))
      throw std::invalid_argument("train: batch fraction must lie in (0, 1]");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
    if (!(lambda_bl > 0.0)) throw std::invalid_argument("train: lambda_bl must be positive");
  }
};

struct EpochRecord {
  int epoch = 0;
  double elbo_estimate = 0.0;  // mean batch-scaled log Zhat over the epoch's steps
  double full_data_loglik_estimate = 0.0;  // log Zhat of an end-of-epoch full-data sweep
  double ess_min = 0.0;
  double ess_mean = 0.0;
  double wall_seconds = 0.0;
  std::vector<double> theta;
  std::vector<double> log_rate;
};

using ElboTrace = std::vector<EpochRecord>;

struct TrainResult {
  ElboTrace trace;
  RateModel model = RateModel::jc69();
  ProposalParams proposal;
  PhyloTree best_tree = PhyloTree::leaf(0);
  std::vector<RankRecord> final_records;
};

// Parameter vector x = [theta (when learned), psi (when learned)].
struct ParameterSet {
  ParamLayout layout;
  ModelKind kind = ModelKind::jc69;
  std::vector<double> theta;  // full model parameters, learned or not
  ProposalParams proposal;

  std::vector<double> pack() const {
    std::vector<double> x;
    if (layout.theta) x.insert(x.end(), theta.begin(), theta.end());
    if (layout.psi) x.insert(x.end(), proposal.log_rate.begin(), proposal.log_rate.end());
    return x;
  }
  void unpack(const std::vector<double>& x) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < layout.theta; ++i) theta[i] = x[o++];
    for (std::size_t i = 0; i < layout.psi; ++i) proposal.log_rate[i] = x[o++];
  }
  RateModel model() const { return build_model(kind, theta); }
};

struct ElboResult {
  double log_Zhat = 0.0;
  std::vector<double> grad;
  SweepResult sweep;
};

struct AdamState {
  std::vector<double> m, v;
  long t = 0;
};

// One Adam descent step on `grads`.
inline void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& state, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: parameter/gradient size mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: optimizer state size mismatch");
  ++state.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
    double mhat = state.m[i] / c1;
    double vhat = state.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

inline SweepConfig sweep_config_for(const TrainConfig& cfg, std::uint64_t step, double likelihood_scale) {
  SweepConfig sc;
  sc.method = cfg.objective == Objective::vcsmc ? Method::csmc : Method::ncsmc;
  sc.particles = cfg.particles;
  sc.subsamples = cfg.subsamples;
  sc.seed = cfg.seed;
  sc.step = step;
  sc.threads = cfg.threads;
  sc.likelihood_scale = likelihood_scale;
  return sc;
}

// log Zhat of one sweep on `batch` and its gradient with respect to the
// learned parameters of `ps`.
inline ElboResult elbo_and_grad(const Alignment& batch, const ParameterSet& ps, const TrainConfig& cfg,
                                std::uint64_t step, double likelihood_scale = 1.0,
                                const DiscreteChoices* replay = nullptr) {
  for (double t : ps.theta)
    if (!std::isfinite(t)) throw NumericalError("elbo_and_grad: non-finite model parameter");
  RateModel model = ps.model();
  GradientSpec spec{ps.layout, cfg.estimator, cfg.gumbel_temperature};
  ElboResult out;
  out.sweep = detail::sweep(batch, model, ps.proposal, sweep_config_for(cfg, step, likelihood_scale), &spec, replay);
  out.log_Zhat = out.sweep.log_Zhat;
  out.grad = out.sweep.grad;
  return out;
}

// ceil(fraction * S) distinct site indices in increasing order.
inline std::vector<std::size_t> draw_minibatch(std::size_t sites, double fraction, const CounterRng& rng,
                                               std::uint64_t step) {
  auto size = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(sites) - 1e-9));
  size = std::clamp<std::size_t>(size, 1, sites);
  std::vector<std::size_t> idx(sites);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (size == sites) return idx;
  DrawStream draws(rng, Stream::minibatch, step, 0);
  for (std::size_t i = 0; i < size; ++i) {
    auto span = static_cast<double>(sites - i);
    std::size_t j = i + std::min<std::size_t>(static_cast<std::size_t>(draws.uniform(i, 0) * span), sites - i - 1);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(size);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline ParameterSet initial_parameters(const TrainConfig& cfg, int ranks) {
  ParameterSet ps;
  ps.kind = cfg.model;
  ps.theta.assign(cfg.model == ModelKind::gtr ? kGtrParameters : 0, 0.0);
  ps.proposal = ProposalParams::with_prior_rate(cfg.lambda_bl, cfg.per_rank_rate, ranks);
  ps.layout.theta = cfg.learn_model ? ps.theta.size() : 0;
  ps.layout.psi = cfg.learn_branch_rate ? ps.proposal.log_rate.size() : 0;
  ps.layout.per_rank_psi = cfg.per_rank_rate;
  return ps;
}

// Evaluation sweeps use their own key space so they never share draws with
// training steps.
inline constexpr std::uint64_t kEvaluationStepBase = std::uint64_t{1} << 62;

using EpochCallback = std::function<void(const EpochRecord&, const ParameterSet&)>;

inline TrainResult train(const Alignment& aln, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const int ranks = static_cast<int>(aln.taxon_count()) - 1;
  ParameterSet ps = initial_parameters(cfg, ranks);
  const std::size_t S = aln.site_count();
  const std::size_t B = draw_minibatch(S, cfg.batch_fraction, CounterRng(cfg.seed), 0).size();
  const double scale = static_cast<double>(S) / static_cast<double>(B);
  const auto steps_per_epoch = static_cast<std::size_t>((S + B - 1) / B);
  const CounterRng rng(cfg.seed);
  AdamState adam;
  TrainResult result;
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto started = std::chrono::steady_clock::now();
    double elbo_sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      auto sites = draw_minibatch(S, cfg.batch_fraction, rng, step);
      Alignment batch = B == S ? aln : aln.select_sites(sites);
      ElboResult er = elbo_and_grad(batch, ps, cfg, step, scale);
      if (!std::isfinite(er.log_Zhat)) throw NumericalError(fmt::format("epoch {}: non-finite ELBO", epoch));
      elbo_sum += er.log_Zhat;
      if (ps.layout.size() == 0) continue;
      std::vector<double> x = ps.pack();
      std::vector<double> descent(er.grad.size());
      for (std::size_t i = 0; i < descent.size(); ++i) descent[i] = -er.grad[i];
      adam_step(x, descent, adam, cfg.learning_rate);
      ps.unpack(x);
    }
    RateModel model = ps.model();
    SweepResult eval = detail::sweep(aln, model, ps.proposal,
                                     sweep_config_for(cfg, kEvaluationStepBase + static_cast<std::uint64_t>(epoch), 1.0));
    EpochRecord rec;
    rec.epoch = epoch;
    rec.elbo_estimate = elbo_sum / static_cast<double>(steps_per_epoch);
    if (!std::isfinite(rec.elbo_estimate)) throw NumericalError(fmt::format("epoch {}: non-finite ELBO", epoch));
    rec.full_data_loglik_estimate = eval.log_Zhat;
    rec.ess_min = eval.system.records.front().ess;
    double ess_total = 0.0;
    for (const auto& r : eval.system.records) {
      rec.ess_min = std::min(rec.ess_min, r.ess);
      ess_total += r.ess;
    }
    rec.ess_mean = ess_total / static_cast<double>(eval.system.records.size());
    rec.theta = ps.theta;
    rec.log_rate = ps.proposal.log_rate;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.trace.push_back(rec);
    if (on_epoch) on_epoch(rec, ps);
    if (epoch == cfg.epochs) {
      result.best_tree = eval.system.best_tree();
      result.final_records = eval.system.records;
    }
  }
  result.model = ps.model();
  result.proposal = ps.proposal;
  return result;
}

}  // namespace phylosmc
