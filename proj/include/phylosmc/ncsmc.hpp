#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include <fmt/format.h>

#include "forest.hpp"
#include "numeric.hpp"
#include "proposal.hpp"
#include "rng.hpp"
#include "smc.hpp"

namespace phylosmc {

struct Candidate {
  std::size_t i = 0, j = 0;
  double b_left = 0.0, b_right = 0.0;
  double log_q = 0.0;  // branch lengths only
};

// All one-step extensions of one particle: L pairs x M branch draws, stored
// row-major (cell = pair * M + m).
struct LookAheadTable {
  std::size_t L = 0;
  std::size_t M = 0;
  std::vector<Candidate> candidates;
  std::vector<double> log_potentials;
  std::vector<PartialState> states;
  std::vector<std::vector<double>> potential_grads;  // filled when gradients are tracked

  std::size_t cells() const { return L * M; }
  double max_log_potential() const {
    double hi = kNegInf;
    for (double p : log_potentials) hi = std::max(hi, p);
    return hi;
  }
};

// Lookahead slots for a particle: 1 + 2 * cell + {0, 1}.
inline std::uint64_t lookahead_slot(std::size_t cell, int side) { return 1 + 2 * static_cast<std::uint64_t>(cell) + static_cast<std::uint64_t>(side); }

namespace detail {

// d(potential) for a merge that replaced trees a and b by `joined`.
inline std::vector<double> merge_gradient(const Subtree& joined, const Subtree& a, const Subtree& b,
                                          const ParamLayout& layout, const ProposalParams& params, int rank,
                                          double likelihood_scale) {
  std::vector<double> g(layout.size(), 0.0);
  if (!std::isfinite(joined.log_likelihood)) return g;
  for (std::size_t p = 0; p < g.size(); ++p) g[p] = likelihood_scale * (joined.grad[p] - a.grad[p] - b.grad[p]);
  if (layout.tracks_branches()) {
    // prior -lambda*b contributes lambda*b per branch, -log q contributes -1.
    g[layout.psi_index(rank)] += params.lambda_bl * (joined.left_length + joined.right_length) - 2.0;
  }
  return g;
}

}  // namespace detail

// Potentials use the CSMC weight formula, including the uniform pair density
// 1/L, so that the selection step is properly weighted.
inline LookAheadTable build_lookahead(const PartialState& state, const ProposalParams& params, std::size_t M,
                                      const LikelihoodContext& ctx, const DrawStream& draws, std::size_t particle,
                                      double likelihood_scale = 1.0) {
  if (state.complete()) throw std::logic_error("build_lookahead: state is already a single tree");
  if (M < 1) throw std::invalid_argument("build_lookahead: M must be >= 1");
  const std::size_t f = state.tree_count();
  const int rank = state.rank() + 1;
  LookAheadTable t;
  t.L = pair_count(f);
  t.M = M;
  t.candidates.reserve(t.cells());
  t.log_potentials.reserve(t.cells());
  t.states.reserve(t.cells());
  const double log_pairs = std::log(static_cast<double>(t.L));
  std::size_t cell = 0;
  for (std::size_t pair = 0; pair < t.L; ++pair) {
    auto [i, j] = pair_at(f, pair);
    for (std::size_t m = 0; m < M; ++m, ++cell) {
      BranchDraw left = draw_branch(params, rank, draws.uniform(particle, lookahead_slot(cell, 0)));
      BranchDraw right = draw_branch(params, rank, draws.uniform(particle, lookahead_slot(cell, 1)));
      PartialState next = merge(state, i, j, left.length, right.length, ctx);
      double log_q = left.log_q + right.log_q;
      double pot = log_target_ratio(state, next, params.lambda_bl, likelihood_scale) - log_q + log_pairs;
      if (ctx.tracking())
        t.potential_grads.push_back(detail::merge_gradient(next.tree(i), state.tree(i), state.tree(j), *ctx.layout,
                                                           params, rank, likelihood_scale));
      t.candidates.push_back({i, j, left.length, right.length, log_q});
      t.log_potentials.push_back(pot);
      t.states.push_back(std::move(next));
    }
  }
  return t;
}

// Categorical cell index proportional to exp(potential), inverse CDF at u.
inline std::size_t select_cell(const LookAheadTable& table, double u) {
  double lse = log_sum_exp(table.log_potentials);
  if (lse == kNegInf || std::isnan(lse)) throw NumericalError("select_extension: all potentials are zero");
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t c = 0; c < table.cells(); ++c) {
    if (table.log_potentials[c] == kNegInf) continue;
    acc += std::exp(table.log_potentials[c] - lse);
    last = c;
    if (u < acc) return c;
  }
  return last;
}

struct Extension {
  std::size_t i = 0, j = 0;
  std::size_t cell = 0;
  PartialState state;
};

inline Extension select_extension(const LookAheadTable& table, double u) {
  std::size_t c = select_cell(table, u);
  return {table.candidates[c].i, table.candidates[c].j, c, table.states[c]};
}

// log of the mean potential over all L*M cells.
inline double ncsmc_weight(const LookAheadTable& table) { return log_mean_exp(table.log_potentials); }

struct ProperWeightingResult {
  double lhs = 0.0;        // Monte Carlo mean of w * h, in units of exp(log_offset)
  double rhs = 0.0;        // exact value, same units
  double standard_error = 0.0;
  double z_score = 0.0;
  double log_offset = 0.0;
};

// Checks E[w h(s')] = sum over one-merge extensions s' of pi(s')/pi(s) h(s')
// for one NCSMC step from `state`. Requires a grid proposal so the right side
// is a finite sum; the exact side prunes each extended tree from scratch.
inline ProperWeightingResult proper_weighting_check(const PartialState& state, const Alignment& aln,
                                                    const RateModel& model, const ProposalParams& params,
                                                    const std::function<double(const PartialState&)>& h,
                                                    std::size_t reps, std::size_t M = 1, std::uint64_t seed = 0) {
  if (!params.grid) throw std::invalid_argument("proper_weighting_check needs a grid proposal");
  if (state.complete()) throw std::invalid_argument("proper_weighting_check: state is already a single tree");
  if (reps < 2) throw std::invalid_argument("proper_weighting_check: reps must be >= 2");
  const GridSpec& grid = *params.grid;
  const std::size_t f = state.tree_count();
  const double lambda = params.lambda_bl;
  auto prior = [lambda](double b) { return log_branch_prior(b, lambda); };

  // Exact side.
  double base = 0.0;
  for (const auto& t : state.trees()) {
    base += prune_tree(to_phylo_tree(*t), aln, model).log_likelihood;
    base += t->branch_count * std::log(lambda) - lambda * t->branch_length_sum;
  }
  LikelihoodContext ctx{&model, nullptr};
  std::vector<double> log_terms;
  std::vector<double> h_values;
  for (std::size_t pair = 0; pair < pair_count(f); ++pair) {
    auto [i, j] = pair_at(f, pair);
    for (double bl : grid.values()) {
      for (double br : grid.values()) {
        PartialState next = merge(state, i, j, bl, br, ctx);
        PhyloTree joined = PhyloTree::join(to_phylo_tree(state.tree(i)), bl, to_phylo_tree(state.tree(j)), br);
        double lp = base - prune_tree(to_phylo_tree(state.tree(i)), aln, model).log_likelihood -
                    prune_tree(to_phylo_tree(state.tree(j)), aln, model).log_likelihood +
                    prune_tree(joined, aln, model).log_likelihood + prior(bl) + prior(br);
        log_terms.push_back(lp - base);
        h_values.push_back(h(next));
      }
    }
  }
  ProperWeightingResult out;
  out.log_offset = log_sum_exp(log_terms);
  for (std::size_t c = 0; c < log_terms.size(); ++c) out.rhs += std::exp(log_terms[c] - out.log_offset) * h_values[c];

  // Monte Carlo side.
  CounterRng rng(seed);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t rep = 0; rep < reps; ++rep) {
    DrawStream look(rng, Stream::lookahead, rep, 0);
    DrawStream sel(rng, Stream::select, rep, 0);
    LookAheadTable table = build_lookahead(state, params, M, ctx, look, 0);
    Extension ext = select_extension(table, sel.uniform(0, 0));
    double v = std::exp(ncsmc_weight(table) - out.log_offset) * h(ext.state);
    sum += v;
    sum_sq += v * v;
  }
  double n = static_cast<double>(reps);
  out.lhs = sum / n;
  double var = std::max(0.0, (sum_sq - n * out.lhs * out.lhs) / (n - 1.0));
  out.standard_error = std::sqrt(var / n);
  double diff = out.lhs - out.rhs;
  out.z_score = out.standard_error > 0.0 ? diff / out.standard_error : (diff == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff));
  return out;
}

}  // namespace phylosmc
