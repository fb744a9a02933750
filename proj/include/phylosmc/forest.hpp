#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include <fmt/format.h>

#include "evomodel.hpp"
#include "numeric.hpp"
#include "seqio.hpp"
#include "tree.hpp"

namespace phylosmc {

// Layout of the differentiable parameter vector: model theta first, then the
// log branch-proposal rate(s) psi.
struct ParamLayout {
  std::size_t theta = 0;
  std::size_t psi = 0;
  bool per_rank_psi = false;

  std::size_t size() const { return theta + psi; }
  bool tracks_branches() const { return psi > 0; }
  // Index of the psi component that generated branches created at `rank`.
  std::size_t psi_index(int rank) const { return theta + (per_rank_psi ? static_cast<std::size_t>(rank - 1) : 0); }
};

struct Subtree;
using SubtreePtr = std::shared_ptr<const Subtree>;

// One rooted tree of a forest with its cached pruning messages. Children are
// shared between particles; nothing is mutated after construction.
struct Subtree {
  int leaf = -1;
  SubtreePtr left, right;
  double left_length = 0.0, right_length = 0.0;
  int rank = 0;  // merge rank that created this node (and its two child edges)
  int min_leaf = 0;
  int leaf_count = 1;
  int branch_count = 0;
  double branch_length_sum = 0.0;
  std::vector<double> partials;   // S*4, rescaled
  std::vector<double> log_scale;  // S, cumulative log rescaling below this node
  double log_likelihood = 0.0;
  std::vector<double> grad;  // d log_likelihood / d params (empty unless tracked)

  bool is_leaf() const { return leaf >= 0; }
  std::size_t site_count() const { return log_scale.size(); }
};

// What merges need to know: the model and, when gradients are tracked, the
// parameter layout.
struct LikelihoodContext {
  const RateModel* model = nullptr;
  const ParamLayout* layout = nullptr;  // null: no gradients

  bool tracking() const { return layout != nullptr && layout->size() > 0; }
};

namespace detail {

// Adds d(log_likelihood of the tree rooted at `root`)/d params into `grad`.
// Rescaling constants are held fixed, which leaves the derivative exact.
inline void accumulate_tree_gradient(const Subtree& root, const RateModel& model, const ParamLayout& layout,
                                     std::span<double> grad) {
  const std::size_t sites = root.site_count();
  const Vector4& eta = model.eta();
  std::vector<double> adjoint(4 * sites);
  Vector4 deta = Vector4::Zero();
  for (std::size_t s = 0; s < sites; ++s) {
    const double* m = root.partials.data() + 4 * s;
    double site = eta(0) * m[0] + eta(1) * m[1] + eta(2) * m[2] + eta(3) * m[3];
    double inv = 1.0 / site;
    for (int i = 0; i < 4; ++i) {
      adjoint[4 * s + static_cast<std::size_t>(i)] = eta(i) * inv;
      deta(i) += m[i] * inv;
    }
  }
  if (layout.theta > 0) {
    Eigen::VectorXd g = model.deta_dtheta().transpose() * deta;
    for (std::size_t k = 0; k < layout.theta; ++k) grad[k] += g(static_cast<Eigen::Index>(k));
  }

  struct Pending {
    const Subtree* node;
    std::vector<double> adjoint;
  };
  std::vector<Pending> stack;
  stack.push_back({&root, std::move(adjoint)});
  while (!stack.empty()) {
    Pending cur = std::move(stack.back());
    stack.pop_back();
    const Subtree& v = *cur.node;
    if (v.is_leaf()) continue;
    const Subtree& a = *v.left;
    const Subtree& b = *v.right;
    const Matrix4 pa = model.transition_probs(v.left_length);
    const Matrix4 pb = model.transition_probs(v.right_length);
    const auto ra = row_major(pa);
    const auto rb = row_major(pb);
    Eigen::Matrix4d ga = Eigen::Matrix4d::Zero(), gb = Eigen::Matrix4d::Zero();
    std::vector<double> adj_a(a.is_leaf() ? 0 : 4 * sites), adj_b(b.is_leaf() ? 0 : 4 * sites);
    for (std::size_t s = 0; s < sites; ++s) {
      const double* x = a.partials.data() + 4 * s;
      const double* y = b.partials.data() + 4 * s;
      double u[4], w[4], hi = 0.0;
      for (int i = 0; i < 4; ++i) {
        const double* ar = ra.data() + 4 * i;
        const double* br = rb.data() + 4 * i;
        u[i] = ar[0] * x[0] + ar[1] * x[1] + ar[2] * x[2] + ar[3] * x[3];
        w[i] = br[0] * y[0] + br[1] * y[1] + br[2] * y[2] + br[3] * y[3];
        hi = std::max(hi, u[i] * w[i]);
      }
      double inv = 1.0 / hi;
      const double* ybar = cur.adjoint.data() + 4 * s;
      double ubar[4], wbar[4];
      for (int i = 0; i < 4; ++i) {
        ubar[i] = ybar[i] * w[i] * inv;
        wbar[i] = ybar[i] * u[i] * inv;
      }
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
          ga(i, j) += ubar[i] * x[j];
          gb(i, j) += wbar[i] * y[j];
        }
      }
      if (!adj_a.empty()) {
        for (int j = 0; j < 4; ++j)
          adj_a[4 * s + static_cast<std::size_t>(j)] =
              ra[static_cast<std::size_t>(j)] * ubar[0] + ra[static_cast<std::size_t>(4 + j)] * ubar[1] +
              ra[static_cast<std::size_t>(8 + j)] * ubar[2] + ra[static_cast<std::size_t>(12 + j)] * ubar[3];
      }
      if (!adj_b.empty()) {
        for (int j = 0; j < 4; ++j)
          adj_b[4 * s + static_cast<std::size_t>(j)] =
              rb[static_cast<std::size_t>(j)] * wbar[0] + rb[static_cast<std::size_t>(4 + j)] * wbar[1] +
              rb[static_cast<std::size_t>(8 + j)] * wbar[2] + rb[static_cast<std::size_t>(12 + j)] * wbar[3];
      }
    }
    auto edge = [&](const Eigen::Matrix4d& g, double length) {
      TransitionGrads tg = model.transition_grads(length);
      if (layout.tracks_branches()) {
        double dl_db = g.cwiseProduct(tg.dP_db).sum();
        grad[layout.psi_index(v.rank)] += dl_db * (-length);
      }
      for (std::size_t k = 0; k < layout.theta; ++k) grad[k] += g.cwiseProduct(tg.dP_dtheta[k]).sum();
    };
    edge(ga, v.left_length);
    edge(gb, v.right_length);
    if (!a.is_leaf()) stack.push_back({&a, std::move(adj_a)});
    if (!b.is_leaf()) stack.push_back({&b, std::move(adj_b)});
  }
}

}  // namespace detail

inline SubtreePtr make_leaf(const Alignment& aln, int taxon, const LikelihoodContext& ctx) {
  auto node = std::make_shared<Subtree>();
  node->leaf = taxon;
  node->min_leaf = taxon;
  auto p = aln.leaf_partials(static_cast<std::size_t>(taxon));
  node->partials.assign(p.begin(), p.end());
  node->log_scale.assign(aln.site_count(), 0.0);
  node->log_likelihood = detail::root_log_likelihood(node->partials, node->log_scale, ctx.model->eta());
  if (ctx.tracking()) {
    node->grad.assign(ctx.layout->size(), 0.0);
    detail::accumulate_tree_gradient(*node, *ctx.model, *ctx.layout, node->grad);
  }
  return node;
}

// Joins two subtrees at a new root: message (P(bl) msg_l) * (P(br) msg_r).
inline SubtreePtr make_merged(const SubtreePtr& left, const SubtreePtr& right, double left_length,
                              double right_length, int rank, const LikelihoodContext& ctx) {
  auto check = [](double b) {
    if (!(b >= 0.0) || !std::isfinite(b))
      throw std::invalid_argument(fmt::format("merge: branch length must be finite and >= 0, got {}", b));
  };
  check(left_length);
  check(right_length);
  auto node = std::make_shared<Subtree>();
  node->left = left;
  node->right = right;
  node->left_length = left_length;
  node->right_length = right_length;
  node->rank = rank;
  node->min_leaf = std::min(left->min_leaf, right->min_leaf);
  node->leaf_count = left->leaf_count + right->leaf_count;
  node->branch_count = left->branch_count + right->branch_count + 2;
  node->branch_length_sum = left->branch_length_sum + right->branch_length_sum + left_length + right_length;
  const std::size_t sites = left->site_count();
  node->partials.resize(4 * sites);
  node->log_scale.resize(sites);
  const RateModel& model = *ctx.model;
  detail::combine_partials(left->partials, left->log_scale, model.transition_probs(left_length), right->partials,
                           right->log_scale, model.transition_probs(right_length), node->partials, node->log_scale);
  node->log_likelihood = detail::root_log_likelihood(node->partials, node->log_scale, model.eta());
  if (ctx.tracking()) {
    node->grad.assign(ctx.layout->size(), 0.0);
    if (std::isfinite(node->log_likelihood))
      detail::accumulate_tree_gradient(*node, model, *ctx.layout, node->grad);
  }
  return node;
}

inline PhyloTree to_phylo_tree(const Subtree& t) {
  if (t.is_leaf()) return PhyloTree::leaf(t.leaf);
  return PhyloTree::join(to_phylo_tree(*t.left), t.left_length, to_phylo_tree(*t.right), t.right_length);
}

// A forest over all taxa whose trees are kept sorted by smallest leaf index.
// Rank r has N - r trees.
class PartialState {
 public:
  PartialState() = default;

  // The rank-0 state: every taxon is its own tree.
  static PartialState initial(const Alignment& aln, const LikelihoodContext& ctx) {
    PartialState s;
    s.taxa_ = static_cast<int>(aln.taxon_count());
    s.forest_.reserve(aln.taxon_count());
    for (std::size_t i = 0; i < aln.taxon_count(); ++i) s.forest_.push_back(make_leaf(aln, static_cast<int>(i), ctx));
    return s;
  }

  static PartialState from_trees(std::vector<SubtreePtr> trees, int taxa) {
    std::sort(trees.begin(), trees.end(), [](const SubtreePtr& a, const SubtreePtr& b) { return a->min_leaf < b->min_leaf; });
    PartialState s;
    s.taxa_ = taxa;
    s.rank_ = taxa - static_cast<int>(trees.size());
    s.forest_ = std::move(trees);
    return s;
  }

  int rank() const { return rank_; }
  int taxon_count() const { return taxa_; }
  int final_rank() const { return taxa_ - 1; }
  bool complete() const { return rank_ == final_rank(); }
  std::size_t tree_count() const { return forest_.size(); }
  const std::vector<SubtreePtr>& trees() const { return forest_; }
  const Subtree& tree(std::size_t i) const { return *forest_.at(i); }

  double log_likelihood() const {
    double total = 0.0;
    for (const auto& t : forest_) total += t->log_likelihood;
    return total;
  }
  int branch_count() const {
    int n = 0;
    for (const auto& t : forest_) n += t->branch_count;
    return n;
  }
  double branch_length_sum() const {
    double s = 0.0;
    for (const auto& t : forest_) s += t->branch_length_sum;
    return s;
  }

  // Replaces trees i < j by `joined`, keeping the min-leaf order (the joined
  // tree takes slot i because tree i holds the smaller leaf).
  PartialState with_merged(std::size_t i, std::size_t j, SubtreePtr joined) const {
    PartialState next;
    next.taxa_ = taxa_;
    next.rank_ = rank_ + 1;
    next.forest_.reserve(forest_.size() - 1);
    for (std::size_t k = 0; k < forest_.size(); ++k) {
      if (k == i)
        next.forest_.push_back(joined);
      else if (k != j)
        next.forest_.push_back(forest_[k]);
    }
    return next;
  }

 private:
  int rank_ = 0;
  int taxa_ = 0;
  std::vector<SubtreePtr> forest_;
};

// Sum of per-tree log-likelihoods (the forest extension of the tree target).
inline double forest_loglik(const PartialState& state) { return state.log_likelihood(); }

// Same quantity recomputed from scratch by pruning every tree.
inline double forest_loglik_fresh(const PartialState& state, const Alignment& aln, const RateModel& model) {
  double total = 0.0;
  for (const auto& t : state.trees()) total += prune_tree(to_phylo_tree(*t), aln, model).log_likelihood;
  return total;
}

// Joins trees i and j (any order) with child edge lengths b_left (for the tree
// holding the smaller leaf) and b_right.
inline PartialState merge(const PartialState& state, std::size_t i, std::size_t j, double b_left, double b_right,
                          const LikelihoodContext& ctx) {
  if (i == j || i >= state.tree_count() || j >= state.tree_count())
    throw std::out_of_range(fmt::format("merge: invalid tree indices ({}, {}) for a forest of {}", i, j,
                                        state.tree_count()));
  if (i > j) std::swap(i, j);
  SubtreePtr joined = make_merged(state.trees()[i], state.trees()[j], b_left, b_right, state.rank() + 1, ctx);
  return state.with_merged(i, j, std::move(joined));
}

}  // namespace phylosmc
