#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <unordered_set>
#include <vector>

#include <fmt/format.h>

#include "forest.hpp"
#include "numeric.hpp"
#include "proposal.hpp"
#include "rng.hpp"

namespace phylosmc {

// K multinomial ancestor draws, stream.uniform(k, 0) for particle k.
inline std::vector<int> resample(std::span<const double> log_weights, const DrawStream& stream) {
  if (log_weights.empty()) throw NumericalError("resample: no weights");
  for (double w : log_weights)
    if (std::isnan(w) || w == std::numeric_limits<double>::infinity())
      throw NumericalError("resample: non-finite log weight");
  double lse = log_sum_exp(log_weights);
  if (lse == kNegInf) throw NumericalError("resample: all weights are zero");
  std::vector<double> cdf(log_weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < log_weights.size(); ++i) {
    acc += std::exp(log_weights[i] - lse);
    cdf[i] = acc;
  }
  std::vector<int> ancestors(log_weights.size());
  for (std::size_t k = 0; k < ancestors.size(); ++k) {
    double u = stream.uniform(k, 0) * acc;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    std::size_t a = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
    while (log_weights[a] == kNegInf && a > 0) --a;  // never land on a zero-weight cell through rounding
    ancestors[k] = static_cast<int>(a);
  }
  return ancestors;
}

inline double ess(std::span<const double> log_weights) { return ess_from_log(log_weights); }

struct Proposal {
  std::size_t i = 0, j = 0;             // merged trees, i < j
  double b_left = 0.0, b_right = 0.0;  // for trees i and j respectively
  double log_q = 0.0;                   // log pair probability + both branch densities
  PartialState next;
};

// Uniform pair over the C(f,2) choices and two independent branch lengths.
// The three uniforms fully determine the proposal.
inline Proposal propose(const PartialState& state, const ProposalParams& params, const LikelihoodContext& ctx,
                        double u_pair, double u_left, double u_right) {
  if (state.complete()) throw std::logic_error("propose: state is already a single tree");
  std::size_t f = state.tree_count();
  std::size_t pairs = pair_count(f);
  std::size_t index = std::min<std::size_t>(static_cast<std::size_t>(u_pair * static_cast<double>(pairs)), pairs - 1);
  auto [i, j] = pair_at(f, index);
  int rank = state.rank() + 1;
  BranchDraw left = draw_branch(params, rank, u_left);
  BranchDraw right = draw_branch(params, rank, u_right);
  Proposal p;
  p.i = i;
  p.j = j;
  p.b_left = left.length;
  p.b_right = right.length;
  p.log_q = -std::log(static_cast<double>(pairs)) + left.log_q + right.log_q;
  p.next = merge(state, i, j, left.length, right.length, ctx);
  return p;
}

// log pi(next) - log pi(prev): new trees minus removed trees, plus the prior of
// the new branches. Only the trees that differ enter, so shared trees cancel
// exactly. `likelihood_scale` multiplies the likelihood part (minibatches).
inline double log_target_ratio(const PartialState& prev, const PartialState& next, double lambda_bl,
                               double likelihood_scale = 1.0) {
  std::unordered_set<const Subtree*> before, after;
  for (const auto& t : prev.trees()) before.insert(t.get());
  for (const auto& t : next.trees()) after.insert(t.get());
  double dll = 0.0, dprior = 0.0;
  auto prior = [lambda_bl](const Subtree& t) {
    return t.branch_count * std::log(lambda_bl) - lambda_bl * t.branch_length_sum;
  };
  for (const auto& t : next.trees()) {
    if (before.count(t.get())) continue;
    dll += t->log_likelihood;
    dprior += prior(*t);
  }
  for (const auto& t : prev.trees()) {
    if (after.count(t.get())) continue;
    dll -= t->log_likelihood;
    dprior -= prior(*t);
  }
  if (dll == kNegInf || std::isnan(dll)) return kNegInf;
  return likelihood_scale * dll + dprior;
}

// log w = log pi(next) - log pi(prev) + log nu^-(prev) - log q with nu^- = 1.
inline double csmc_weight(const PartialState& prev, const PartialState& next, double log_q,
                          const ProposalParams& params, double likelihood_scale = 1.0) {
  if (next.rank() != prev.rank() + 1)
    throw std::invalid_argument(fmt::format("csmc_weight: rank mismatch ({} -> {})", prev.rank(), next.rank()));
  return log_target_ratio(prev, next, params.lambda_bl, likelihood_scale) - log_q;
}

struct RankRecord {
  int rank = 0;
  double log_avg_weight = 0.0;
  double ess = 0.0;
  std::size_t likelihood_evaluations = 0;
  int lookahead_pairs = 0;  // L (NCSMC only)
  int subsamples = 0;       // M (NCSMC only)
  double max_log_potential = std::numeric_limits<double>::quiet_NaN();
};

// State of K particles after a sweep. Ancestor indices are 0-based; row r-2
// holds the draws made before rank r (no resampling precedes rank 1).
struct ParticleSystem {
  std::vector<PartialState> particles;
  std::vector<double> log_weights;
  std::vector<std::vector<int>> ancestors;
  std::vector<double> per_rank_log_avg;
  std::vector<RankRecord> records;
  std::uint64_t seed = 0;

  std::size_t best_particle() const {
    return static_cast<std::size_t>(std::max_element(log_weights.begin(), log_weights.end()) - log_weights.begin());
  }
  PhyloTree best_tree() const { return to_phylo_tree(particles.at(best_particle()).tree(0)); }
};

}  // namespace phylosmc
