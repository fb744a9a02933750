#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <stdexcept>
#include <vector>

#include "evomodel.hpp"
#include "proposal.hpp"
#include "rng.hpp"
#include "seqio.hpp"
#include "tree.hpp"

namespace phylosmc {

// Random binary tree on n leaves: uniform random merges with exponential
// branch lengths of the given mean.
inline PhyloTree random_tree(int n, double mean_length, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("random_tree: n must be >= 1");
  CounterRng rng(seed);
  std::vector<PhyloTree> forest;
  for (int i = 0; i < n; ++i) forest.push_back(PhyloTree::leaf(i));
  std::uint64_t draw = 0;
  while (forest.size() > 1) {
    std::size_t f = forest.size();
    std::size_t pairs = pair_count(f);
    auto index = std::min<std::size_t>(static_cast<std::size_t>(rng.uniform({0, draw}) * static_cast<double>(pairs)), pairs - 1);
    auto [i, j] = pair_at(f, index);
    double bl = -mean_length * std::log(rng.uniform({1, draw}));
    double br = -mean_length * std::log(rng.uniform({2, draw}));
    ++draw;
    PhyloTree joined = PhyloTree::join(forest[i], bl, forest[j], br);
    forest.erase(forest.begin() + static_cast<std::ptrdiff_t>(j));
    forest[i] = std::move(joined);
  }
  return forest.front();
}

inline std::vector<std::string> default_taxon_names(std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back("S" + std::to_string(i));
  return names;
}

// Sequences evolved down `tree` from a root drawn from the stationary
// distribution. Leaf labels index `names`.
inline Alignment simulate_alignment(const PhyloTree& tree, const RateModel& model, std::size_t sites,
                                    std::uint64_t seed, std::vector<std::string> names = {}) {
  static constexpr char kBases[] = {'A', 'C', 'G', 'T'};
  if (names.empty()) names = default_taxon_names(tree.leaf_count());
  CounterRng rng(seed);
  auto pick = [](const double* probs, double u) {
    double acc = 0.0;
    for (int k = 0; k < 3; ++k) {
      acc += probs[k];
      if (u < acc) return k;
    }
    return 3;
  };
  const auto& nodes = tree.nodes();
  std::vector<std::array<double, 16>> edge_left(nodes.size()), edge_right(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].is_leaf()) continue;
    edge_left[i] = detail::row_major(model.transition_probs(nodes[i].left_length));
    edge_right[i] = detail::row_major(model.transition_probs(nodes[i].right_length));
  }
  std::vector<std::string> rows(names.size(), std::string(sites, 'N'));
  std::vector<int> state(nodes.size());
  double eta[4] = {model.eta()(0), model.eta()(1), model.eta()(2), model.eta()(3)};
  const auto sim = static_cast<std::uint64_t>(Stream::simulate);
  for (std::size_t s = 0; s < sites; ++s) {
    const int root = tree.root();
    state[static_cast<std::size_t>(root)] = pick(eta, rng.uniform({sim, s, static_cast<std::uint64_t>(root)}));
    // Nodes are stored post-order, so walking backwards visits parents first.
    for (int i = root; i >= 0; --i) {
      const auto& nd = nodes[static_cast<std::size_t>(i)];
      if (nd.is_leaf()) {
        rows.at(static_cast<std::size_t>(nd.leaf))[s] = kBases[state[static_cast<std::size_t>(i)]];
        continue;
      }
      int from = state[static_cast<std::size_t>(i)];
      state[static_cast<std::size_t>(nd.left)] =
          pick(edge_left[static_cast<std::size_t>(i)].data() + 4 * from, rng.uniform({sim, s, static_cast<std::uint64_t>(nd.left)}));
      state[static_cast<std::size_t>(nd.right)] =
          pick(edge_right[static_cast<std::size_t>(i)].data() + 4 * from, rng.uniform({sim, s, static_cast<std::uint64_t>(nd.right)}));
    }
  }
  return Alignment(std::move(names), std::move(rows));
}

}  // namespace phylosmc
