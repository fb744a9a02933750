#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "evomodel.hpp"
#include "numeric.hpp"
#include "proposal.hpp"
#include "seqio.hpp"
#include "tree.hpp"

// Brute-force references for tiny instances.
namespace phylosmc::oracle {

inline constexpr int kMaxChainTaxa = 7;
inline constexpr int kMaxGridTaxa = 5;
inline constexpr std::size_t kMaxGridSize = 4;
inline constexpr std::size_t kMaxBruteInternal = 4;

class SizeGuardError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A merge sequence: at step r, the pair (i, j), i < j, of the forest sorted
// by smallest leaf.
using JumpChain = std::vector<std::pair<int, int>>;

namespace detail {

inline void sort_forest(std::vector<PhyloTree>& forest) {
  std::sort(forest.begin(), forest.end(),
            [](const PhyloTree& a, const PhyloTree& b) { return a.min_leaf(a.root()) < b.min_leaf(b.root()); });
}

inline std::vector<PhyloTree> joined(const std::vector<PhyloTree>& forest, int i, int j, double bi, double bj) {
  std::vector<PhyloTree> next;
  next.reserve(forest.size() - 1);
  for (int k = 0; k < static_cast<int>(forest.size()); ++k)
    if (k != i && k != j) next.push_back(forest[static_cast<std::size_t>(k)]);
  next.push_back(PhyloTree::join(forest[static_cast<std::size_t>(i)], bi, forest[static_cast<std::size_t>(j)], bj));
  sort_forest(next);
  return next;
}

inline void chains_from(int f, JumpChain& prefix, std::vector<JumpChain>& out) {
  if (f == 1) {
    out.push_back(prefix);
    return;
  }
  for (int i = 0; i < f; ++i) {
    for (int j = i + 1; j < f; ++j) {
      prefix.emplace_back(i, j);
      chains_from(f - 1, prefix, out);
      prefix.pop_back();
    }
  }
}

// Running log-sum-exp with a fixed accumulation order.
struct LogAccumulator {
  double hi = kNegInf;
  double sum = 0.0;
  void add(double x) {
    if (x == kNegInf) return;
    if (x <= hi) {
      sum += std::exp(x - hi);
    } else {
      sum = sum * std::exp(hi - x) + 1.0;
      hi = x;
    }
  }
  double value() const { return hi == kNegInf ? kNegInf : hi + std::log(sum); }
};

}  // namespace detail

// All (n-1)-step ordered merge sequences from n singletons.
inline std::vector<JumpChain> enumerate_jump_chains(int n) {
  if (n < 2) throw std::invalid_argument("enumerate_jump_chains: n must be >= 2");
  if (n > kMaxChainTaxa) throw SizeGuardError(fmt::format("enumerate_jump_chains: n = {} exceeds {}", n, kMaxChainTaxa));
  std::vector<JumpChain> out;
  JumpChain prefix;
  detail::chains_from(n, prefix, out);
  return out;
}

// Tree built by a chain with all branch lengths set to `length`.
inline PhyloTree chain_tree(const JumpChain& chain, int n, double length = 0.0) {
  std::vector<PhyloTree> forest;
  for (int i = 0; i < n; ++i) forest.push_back(PhyloTree::leaf(i));
  for (auto [i, j] : chain) forest = detail::joined(forest, i, j, length, length);
  if (forest.size() != 1) throw std::invalid_argument("chain_tree: chain does not end in a single tree");
  return forest.front();
}

inline std::set<std::string> chain_topologies(int n) {
  std::set<std::string> keys;
  for (const auto& c : enumerate_jump_chains(n)) keys.insert(topology_key(chain_tree(c, n)));
  return keys;
}

// log sum over ordered merge sequences and grid assignments of every branch
// of likelihood(final tree) * prod exponential prior density at the atoms.
// Ancestral forests do not enter; only completed trees are scored, each by
// pruning from scratch.
inline double exact_log_Z_grid(const Alignment& aln, const RateModel& model, const GridSpec& grid, double lambda_bl) {
  const int n = static_cast<int>(aln.taxon_count());
  if (n > kMaxGridTaxa) throw SizeGuardError(fmt::format("exact_Z_grid: N = {} exceeds {}", n, kMaxGridTaxa));
  if (grid.size() > kMaxGridSize)
    throw SizeGuardError(fmt::format("exact_Z_grid: grid has {} atoms, at most {} allowed", grid.size(), kMaxGridSize));
  std::vector<double> log_prior;
  for (double b : grid.values()) log_prior.push_back(std::log(lambda_bl) - lambda_bl * b);

  detail::LogAccumulator acc;
  auto recurse = [&](auto&& self, const std::vector<PhyloTree>& forest, double prior_so_far) -> void {
    if (forest.size() == 1) {
      acc.add(prune_tree(forest.front(), aln, model).log_likelihood + prior_so_far);
      return;
    }
    const int f = static_cast<int>(forest.size());
    for (int i = 0; i < f; ++i)
      for (int j = i + 1; j < f; ++j)
        for (std::size_t a = 0; a < grid.size(); ++a)
          for (std::size_t b = 0; b < grid.size(); ++b)
            self(self, detail::joined(forest, i, j, grid.values()[a], grid.values()[b]),
                 prior_so_far + log_prior[a] + log_prior[b]);
  };
  std::vector<PhyloTree> leaves;
  for (int i = 0; i < n; ++i) leaves.push_back(PhyloTree::leaf(i));
  recurse(recurse, leaves, 0.0);
  return acc.value();
}

// Sum over taxa of each leaf's own marginal likelihood, i.e. log pi of the
// all-singletons forest. Particle-filter estimates of Z are relative to it.
inline double leaf_log_likelihood_total(const Alignment& aln, const RateModel& model) {
  double total = 0.0;
  const Vector4& eta = model.eta();
  for (std::size_t i = 0; i < aln.taxon_count(); ++i) {
    for (std::size_t s = 0; s < aln.site_count(); ++s) {
      SiteVector v = aln.site_vector(i, s);
      total += std::log(eta(0) * v[0] + eta(1) * v[1] + eta(2) * v[2] + eta(3) * v[3]);
    }
  }
  return total;
}

// Per site, sums over every assignment of states to internal nodes.
inline double brute_force_loglik(const PhyloTree& tree, const Alignment& aln, const RateModel& model) {
  const std::size_t internal = tree.internal_count();
  if (internal > kMaxBruteInternal)
    throw SizeGuardError(fmt::format("brute_force_loglik: {} internal nodes exceeds {}", internal, kMaxBruteInternal));
  const auto& nodes = tree.nodes();
  const Vector4& eta = model.eta();
  std::vector<int> internal_ids;
  for (int i = 0; i < static_cast<int>(nodes.size()); ++i)
    if (!nodes[static_cast<std::size_t>(i)].is_leaf()) internal_ids.push_back(i);
  std::vector<int> slot(nodes.size(), -1);
  for (std::size_t k = 0; k < internal_ids.size(); ++k) slot[static_cast<std::size_t>(internal_ids[k])] = static_cast<int>(k);
  struct Edge {
    int parent, child;
    Matrix4 P;
  };
  std::vector<Edge> edges;
  for (int id : internal_ids) {
    const auto& nd = nodes[static_cast<std::size_t>(id)];
    edges.push_back({id, nd.left, model.transition_probs(nd.left_length)});
    edges.push_back({id, nd.right, model.transition_probs(nd.right_length)});
  }
  const int root = tree.root();
  std::size_t assignments = 1;
  for (std::size_t k = 0; k < internal; ++k) assignments *= kStates;

  double total = 0.0;
  std::vector<int> state(internal);
  for (std::size_t s = 0; s < aln.site_count(); ++s) {
    if (internal == 0) {
      SiteVector v = aln.site_vector(static_cast<std::size_t>(nodes[0].leaf), s);
      total += std::log(eta(0) * v[0] + eta(1) * v[1] + eta(2) * v[2] + eta(3) * v[3]);
      continue;
    }
    double site = 0.0;
    for (std::size_t code = 0; code < assignments; ++code) {
      std::size_t c = code;
      for (std::size_t k = 0; k < internal; ++k) {
        state[k] = static_cast<int>(c % kStates);
        c /= kStates;
      }
      double term = eta(state[static_cast<std::size_t>(slot[static_cast<std::size_t>(root)])]);
      for (const Edge& e : edges) {
        int from = state[static_cast<std::size_t>(slot[static_cast<std::size_t>(e.parent)])];
        const auto& child = nodes[static_cast<std::size_t>(e.child)];
        if (child.is_leaf()) {
          SiteVector v = aln.site_vector(static_cast<std::size_t>(child.leaf), s);
          double x = 0.0;
          for (int to = 0; to < kStates; ++to) x += e.P(from, to) * v[static_cast<std::size_t>(to)];
          term *= x;
        } else {
          term *= e.P(from, state[static_cast<std::size_t>(slot[static_cast<std::size_t>(e.child)])]);
        }
      }
      site += term;
    }
    total += std::log(site);
  }
  return total;
}

}  // namespace phylosmc::oracle
