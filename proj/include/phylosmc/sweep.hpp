#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include <fmt/format.h>

#include "forest.hpp"
#include "ncsmc.hpp"
#include "numeric.hpp"
#include "parallel.hpp"
#include "proposal.hpp"
#include "rng.hpp"
#include "smc.hpp"

namespace phylosmc {

enum class Method { csmc, ncsmc };
enum class DiscreteEstimator { drop_discrete, gumbel_softmax };

struct SweepConfig {
  Method method = Method::csmc;
  std::size_t particles = 16;
  std::size_t subsamples = 1;  // M, NCSMC only
  std::uint64_t seed = 0;
  std::uint64_t step = 0;  // training step; part of every draw key
  unsigned threads = 1;
  double likelihood_scale = 1.0;
};

struct GradientSpec {
  ParamLayout layout;
  DiscreteEstimator estimator = DiscreteEstimator::drop_discrete;
  double temperature = 0.5;
};

// Discrete outcomes of a sweep. Feeding them back pins ancestors and NCSMC
// cells, so that nearby parameter values follow the same discrete path.
struct DiscreteChoices {
  std::vector<std::vector<int>> ancestors;        // one row per rank >= 2
  std::vector<std::vector<std::size_t>> cells;    // one row per rank (NCSMC)
};

struct SweepResult {
  ParticleSystem system;
  double log_Zhat = 0.0;       // objective value (relaxed under Gumbel-softmax)
  double hard_log_Zhat = 0.0;  // same sweep evaluated with the sampled ancestors
  std::vector<double> grad;    // d log_Zhat / d params, empty unless requested
  DiscreteChoices choices;
};

namespace detail {

struct StepOutcome {
  PartialState state;
  double log_w = kNegInf;
  std::vector<double> dlog_w;
  std::size_t cell = 0;
  std::size_t evaluations = 0;
  std::size_t L = 0;
  double max_potential = kNegInf;
};

struct SweepContext {
  const ProposalParams* params;
  const SweepConfig* config;
  LikelihoodContext lik;
  CounterRng rng;
};

// Extends `from` to rank `rank` with the draws addressed by `particle`.
inline StepOutcome extend_particle(const PartialState& from, int rank, std::size_t particle, const SweepContext& sc,
                                   std::optional<std::size_t> forced_cell) {
  const ProposalParams& params = *sc.params;
  const SweepConfig& cfg = *sc.config;
  const auto r = static_cast<std::uint64_t>(rank);
  StepOutcome out;
  if (cfg.method == Method::csmc) {
    DrawStream draws(sc.rng, Stream::propose, cfg.step, r);
    Proposal p = propose(from, params, sc.lik, draws.uniform(particle, 0), draws.uniform(particle, 1),
                         draws.uniform(particle, 2));
    out.log_w = csmc_weight(from, p.next, p.log_q, params, cfg.likelihood_scale);
    if (sc.lik.tracking())
      out.dlog_w = merge_gradient(p.next.tree(p.i), from.tree(p.i), from.tree(p.j), *sc.lik.layout, params, rank,
                                  cfg.likelihood_scale);
    out.state = std::move(p.next);
    out.evaluations = 1;
    return out;
  }
  DrawStream look(sc.rng, Stream::lookahead, cfg.step, r);
  LookAheadTable table = build_lookahead(from, params, cfg.subsamples, sc.lik, look, particle, cfg.likelihood_scale);
  out.L = table.L;
  out.evaluations = table.cells();
  out.max_potential = table.max_log_potential();
  out.log_w = ncsmc_weight(table);
  if (forced_cell) {
    if (*forced_cell >= table.cells()) throw std::out_of_range("replayed cell index out of range");
    out.cell = *forced_cell;
  } else {
    DrawStream sel(sc.rng, Stream::select, cfg.step, r);
    out.cell = select_cell(table, sel.uniform(particle, 0));
  }
  if (sc.lik.tracking()) {
    std::vector<double> prob(table.cells());
    softmax_into(table.log_potentials, prob);
    out.dlog_w.assign(sc.lik.layout->size(), 0.0);
    for (std::size_t c = 0; c < table.cells(); ++c) {
      if (prob[c] == 0.0) continue;
      for (std::size_t p = 0; p < out.dlog_w.size(); ++p) out.dlog_w[p] += prob[c] * table.potential_grads[c][p];
    }
  }
  out.state = std::move(table.states[out.cell]);
  return out;
}

inline void check_gradient(const std::vector<double>& g, int rank) {
  for (double v : g)
    if (!std::isfinite(v)) throw NumericalError(fmt::format("non-finite gradient at rank {}", rank));
}

// One full sweep over ranks 1..N-1. With `gradient`, also returns
// d log_Zhat / d params; with `replay`, discrete choices are taken from it.
inline SweepResult sweep(const Alignment& aln, const RateModel& model, const ProposalParams& params,
                         const SweepConfig& cfg, const GradientSpec* gradient = nullptr,
                         const DiscreteChoices* replay = nullptr) {
  if (cfg.particles < 1) throw std::invalid_argument("sweep: K must be >= 1");
  if (cfg.method == Method::ncsmc && cfg.subsamples < 1) throw std::invalid_argument("sweep: M must be >= 1");
  const int ranks = static_cast<int>(aln.taxon_count()) - 1;
  params.validate(ranks);
  if (gradient) {
    if (gradient->layout.tracks_branches() && params.grid)
      throw std::invalid_argument("sweep: branch-rate gradients need the exponential proposal");
    if (gradient->layout.per_rank_psi != params.per_rank() && gradient->layout.tracks_branches())
      throw std::invalid_argument("sweep: gradient layout and proposal disagree on per-rank rates");
    if (gradient->layout.theta != 0 && gradient->layout.theta != model.parameter_count())
      throw std::invalid_argument("sweep: gradient layout does not match the model");
    if (gradient->estimator == DiscreteEstimator::gumbel_softmax && !(gradient->temperature > 0.0))
      throw std::invalid_argument("sweep: Gumbel-softmax temperature must be positive");
  }
  const std::size_t K = cfg.particles;
  const std::size_t P = gradient ? gradient->layout.size() : 0;
  const bool relaxed = gradient && gradient->estimator == DiscreteEstimator::gumbel_softmax;

  SweepContext sc{&params, &cfg, LikelihoodContext{&model, gradient ? &gradient->layout : nullptr}, CounterRng(cfg.seed)};

  SweepResult res;
  res.system.seed = cfg.seed;
  res.grad.assign(P, 0.0);
  std::vector<PartialState> particles(K, PartialState::initial(aln, sc.lik));
  std::vector<double> log_w(K, 0.0);
  std::vector<std::vector<double>> dlog_w(K, std::vector<double>(P, 0.0));
  double hard_total = 0.0;

  for (int rank = 1; rank <= ranks; ++rank) {
    const auto r = static_cast<std::uint64_t>(rank);
    std::vector<int> ancestors(K);
    if (rank == 1) {
      for (std::size_t k = 0; k < K; ++k) ancestors[k] = static_cast<int>(k);
    } else if (replay) {
      ancestors = replay->ancestors.at(static_cast<std::size_t>(rank - 2));
      if (ancestors.size() != K) throw std::invalid_argument("replayed ancestors have the wrong size");
    } else if (relaxed) {
      DrawStream gum(sc.rng, Stream::gumbel, cfg.step, r);
      for (std::size_t k = 0; k < K; ++k) {
        double best = kNegInf;
        std::size_t arg = 0;
        for (std::size_t j = 0; j < K; ++j) {
          double v = log_w[j] + gum.gumbel(k, j);
          if (v > best) best = v, arg = j;
        }
        ancestors[k] = static_cast<int>(arg);
      }
    } else {
      ancestors = resample(log_w, DrawStream(sc.rng, Stream::resample, cfg.step, r));
    }
    if (rank >= 2) res.system.ancestors.push_back(ancestors);

    const std::vector<std::size_t>* forced = nullptr;
    if (replay && cfg.method == Method::ncsmc) forced = &replay->cells.at(static_cast<std::size_t>(rank - 1));

    std::vector<StepOutcome> outcomes(K);
    std::vector<double> next_log_w(K);
    std::vector<std::vector<double>> next_dlog_w(K);
    parallel_for(K, cfg.threads, [&](std::size_t k) {
      std::optional<std::size_t> cell;
      if (forced) cell = forced->at(k);
      outcomes[k] = extend_particle(particles[static_cast<std::size_t>(ancestors[k])], rank, k, sc, cell);
      next_log_w[k] = outcomes[k].log_w;
      next_dlog_w[k] = outcomes[k].dlog_w;
      if (!relaxed || rank == 1) return;
      // Relaxed resampling: mix one-step extensions of every ancestor with
      // Gumbel-softmax weights; particle k's own draws are reused for each.
      DrawStream gum(sc.rng, Stream::gumbel, cfg.step, r);
      std::vector<double> logits(K), y(K);
      for (std::size_t j = 0; j < K; ++j) logits[j] = (log_w[j] + gum.gumbel(k, j)) / gradient->temperature;
      softmax_into(logits, y);
      double value = 0.0;
      std::vector<double> g(P, 0.0), ybar(P, 0.0);
      for (std::size_t j = 0; j < K; ++j)
        for (std::size_t p = 0; p < P; ++p) ybar[p] += y[j] * dlog_w[j][p];
      for (std::size_t j = 0; j < K; ++j) {
        if (y[j] == 0.0) continue;
        const StepOutcome* alt = &outcomes[k];
        StepOutcome other;
        if (static_cast<int>(j) != ancestors[k]) {
          other = extend_particle(particles[j], rank, k, sc, std::nullopt);
          alt = &other;
        }
        if (alt->log_w == kNegInf) {
          value = kNegInf;
          continue;
        }
        value += y[j] * alt->log_w;
        const double c = alt->log_w * y[j] / gradient->temperature;
        for (std::size_t p = 0; p < P; ++p) g[p] += y[j] * alt->dlog_w[p] + c * (dlog_w[j][p] - ybar[p]);
      }
      next_log_w[k] = value;
      next_dlog_w[k] = std::move(g);
    });

    RankRecord rec;
    rec.rank = rank;
    std::vector<double> step_hard(K);
    for (std::size_t k = 0; k < K; ++k) {
      rec.likelihood_evaluations += outcomes[k].evaluations;
      step_hard[k] = outcomes[k].log_w;
      if (cfg.method == Method::ncsmc) {
        rec.lookahead_pairs = static_cast<int>(outcomes[k].L);
        rec.subsamples = static_cast<int>(cfg.subsamples);
        if (std::isnan(rec.max_log_potential) || outcomes[k].max_potential > rec.max_log_potential)
          rec.max_log_potential = outcomes[k].max_potential;
      }
    }
    if (log_sum_exp(next_log_w) == kNegInf)
      throw NumericalError(fmt::format("rank {}: every particle weight is zero", rank));
    rec.log_avg_weight = log_mean_exp(next_log_w);
    rec.ess = ess(next_log_w);
    res.system.per_rank_log_avg.push_back(rec.log_avg_weight);
    res.system.records.push_back(rec);
    hard_total += log_mean_exp(step_hard);

    if (cfg.method == Method::ncsmc) {
      std::vector<std::size_t> cells(K);
      for (std::size_t k = 0; k < K; ++k) cells[k] = outcomes[k].cell;
      res.choices.cells.push_back(std::move(cells));
    }
    if (P > 0) {
      std::vector<double> prob(K);
      softmax_into(next_log_w, prob);
      for (std::size_t k = 0; k < K; ++k) {
        if (prob[k] == 0.0) continue;
        for (std::size_t p = 0; p < P; ++p) res.grad[p] += prob[k] * next_dlog_w[k][p];
      }
      check_gradient(res.grad, rank);
    }
    for (std::size_t k = 0; k < K; ++k) particles[k] = std::move(outcomes[k].state);
    log_w = std::move(next_log_w);
    dlog_w = std::move(next_dlog_w);
  }

  res.log_Zhat = 0.0;
  for (double v : res.system.per_rank_log_avg) res.log_Zhat += v;
  res.hard_log_Zhat = hard_total;
  res.choices.ancestors = res.system.ancestors;
  res.system.particles = std::move(particles);
  res.system.log_weights = std::move(log_w);
  return res;
}

}  // namespace detail

inline SweepResult run_csmc(const Alignment& aln, const RateModel& model, const ProposalParams& params, std::size_t K,
                            std::uint64_t seed, unsigned threads = default_thread_count()) {
  SweepConfig cfg;
  cfg.method = Method::csmc;
  cfg.particles = K;
  cfg.seed = seed;
  cfg.threads = threads;
  return detail::sweep(aln, model, params, cfg);
}

inline SweepResult run_ncsmc(const Alignment& aln, const RateModel& model, const ProposalParams& params,
                             std::size_t K, std::size_t M, std::uint64_t seed,
                             unsigned threads = default_thread_count()) {
  SweepConfig cfg;
  cfg.method = Method::ncsmc;
  cfg.particles = K;
  cfg.subsamples = M;
  cfg.seed = seed;
  cfg.threads = threads;
  return detail::sweep(aln, model, params, cfg);
}

}  // namespace phylosmc
