#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <fmt/format.h>

#include "evomodel.hpp"
#include "numeric.hpp"
#include "seqio.hpp"

namespace phylosmc {

// Rooted binary tree with leaves labeled by alignment row index. Nodes are
// stored in post-order; the root is the last node.
class PhyloTree {
 public:
  struct Node {
    int leaf = -1;  // alignment row for leaves, -1 for internal nodes
    int left = -1;
    int right = -1;
    double left_length = 0.0;
    double right_length = 0.0;
    bool is_leaf() const { return leaf >= 0; }
  };

  static PhyloTree leaf(int label) {
    if (label < 0) throw std::invalid_argument("leaf label must be non-negative");
    PhyloTree t;
    t.nodes_.push_back(Node{label});
    return t;
  }

  static PhyloTree join(const PhyloTree& a, double a_length, const PhyloTree& b, double b_length) {
    check_length(a_length);
    check_length(b_length);
    PhyloTree t;
    t.nodes_.reserve(a.nodes_.size() + b.nodes_.size() + 1);
    t.append(a, 0);
    int a_root = static_cast<int>(t.nodes_.size()) - 1;
    t.append(b, static_cast<int>(t.nodes_.size()));
    int b_root = static_cast<int>(t.nodes_.size()) - 1;
    t.nodes_.push_back(Node{-1, a_root, b_root, a_length, b_length});
    std::vector<int> labels = t.leaves();
    if (std::adjacent_find(labels.begin(), labels.end()) != labels.end())
      throw std::invalid_argument("leaf labels within a tree must be distinct");
    return t;
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }
  int root() const { return static_cast<int>(nodes_.size()) - 1; }
  std::size_t leaf_count() const { return (nodes_.size() + 1) / 2; }
  std::size_t internal_count() const { return nodes_.size() / 2; }

  // Sorted leaf labels.
  std::vector<int> leaves() const {
    std::vector<int> out;
    for (const Node& n : nodes_)
      if (n.is_leaf()) out.push_back(n.leaf);
    std::sort(out.begin(), out.end());
    return out;
  }

  int min_leaf(int i) const {
    const Node& n = node(i);
    if (n.is_leaf()) return n.leaf;
    return std::min(min_leaf(n.left), min_leaf(n.right));
  }

  std::vector<double> branch_lengths() const {
    std::vector<double> out;
    for (const Node& n : nodes_) {
      if (n.is_leaf()) continue;
      out.push_back(n.left_length);
      out.push_back(n.right_length);
    }
    return out;
  }

  PhyloTree subtree(int i) const {
    const Node& n = node(i);
    if (n.is_leaf()) return leaf(n.leaf);
    return join(subtree(n.left), n.left_length, subtree(n.right), n.right_length);
  }

 private:
  static void check_length(double b) {
    if (!(b >= 0.0) || !std::isfinite(b))
      throw std::invalid_argument(fmt::format("branch length must be finite and >= 0, got {}", b));
  }

  void append(const PhyloTree& other, int offset) {
    for (Node n : other.nodes_) {
      if (!n.is_leaf()) {
        n.left += offset;
        n.right += offset;
      }
      nodes_.push_back(n);
    }
  }

  std::vector<Node> nodes_;
};

// (2n-3)!!, the number of rooted binary topologies on n labeled leaves.
inline boost::multiprecision::cpp_int count_topologies(int n) {
  if (n < 2) throw std::invalid_argument(fmt::format("count_topologies needs n >= 2, got {}", n));
  boost::multiprecision::cpp_int acc = 1;
  for (int k = 3; k <= 2 * n - 3; k += 2) acc *= k;
  return acc;
}

namespace detail {

inline std::array<double, 16> row_major(const Matrix4& p) {
  std::array<double, 16> out{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) out[static_cast<std::size_t>(4 * i + j)] = p(i, j);
  return out;
}

// out_s = (Pa xa_s) * (Pb xb_s) elementwise, rescaled by its maximum, with
// the log of the rescaling accumulated into out_scale.
inline void combine_partials(std::span<const double> xa, std::span<const double> sa, const Matrix4& pa,
                             std::span<const double> xb, std::span<const double> sb, const Matrix4& pb,
                             std::span<double> out, std::span<double> out_scale) {
  const auto a = row_major(pa);
  const auto b = row_major(pb);
  const std::size_t sites = out_scale.size();
  for (std::size_t s = 0; s < sites; ++s) {
    const double* x = xa.data() + 4 * s;
    const double* y = xb.data() + 4 * s;
    double* o = out.data() + 4 * s;
    double hi = 0.0;
    for (int i = 0; i < 4; ++i) {
      const double* ar = a.data() + 4 * i;
      const double* br = b.data() + 4 * i;
      double u = ar[0] * x[0] + ar[1] * x[1] + ar[2] * x[2] + ar[3] * x[3];
      double v = br[0] * y[0] + br[1] * y[1] + br[2] * y[2] + br[3] * y[3];
      o[i] = u * v;
      hi = std::max(hi, o[i]);
    }
    if (hi > 0.0) {
      double inv = 1.0 / hi;
      for (int i = 0; i < 4; ++i) o[i] *= inv;
      out_scale[s] = sa[s] + sb[s] + std::log(hi);
    } else {
      out_scale[s] = kNegInf;
    }
  }
}

inline double root_log_likelihood(std::span<const double> x, std::span<const double> scale, const Vector4& eta) {
  double total = 0.0;
  for (std::size_t s = 0; s < scale.size(); ++s) {
    const double* v = x.data() + 4 * s;
    double site = eta(0) * v[0] + eta(1) * v[1] + eta(2) * v[2] + eta(3) * v[3];
    total += std::log(site) + scale[s];
  }
  return std::isnan(total) ? kNegInf : total;
}

}  // namespace detail

struct PruneResult {
  std::vector<double> root_partials;  // S*4 conditional likelihoods at the root
  std::vector<double> log_scalers;    // per-site log rescaling
  double log_likelihood = 0.0;
};

// Felsenstein pruning in one post-order pass.
inline PruneResult prune_tree(const PhyloTree& tree, const Alignment& aln, const RateModel& model) {
  const std::size_t sites = aln.site_count();
  const auto& nodes = tree.nodes();
  std::vector<std::vector<double>> partials(nodes.size());
  std::vector<std::vector<double>> scales(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    if (n.is_leaf()) {
      if (static_cast<std::size_t>(n.leaf) >= aln.taxon_count())
        throw std::out_of_range(fmt::format("leaf {} outside alignment of {} taxa", n.leaf, aln.taxon_count()));
      auto leaf = aln.leaf_partials(static_cast<std::size_t>(n.leaf));
      partials[i].assign(leaf.begin(), leaf.end());
      scales[i].assign(sites, 0.0);
      continue;
    }
    partials[i].resize(4 * sites);
    scales[i].resize(sites);
    auto l = static_cast<std::size_t>(n.left), r = static_cast<std::size_t>(n.right);
    detail::combine_partials(partials[l], scales[l], model.transition_probs(n.left_length), partials[r], scales[r],
                             model.transition_probs(n.right_length), partials[i], scales[i]);
    partials[l].clear();
    partials[l].shrink_to_fit();
    partials[r].clear();
    partials[r].shrink_to_fit();
  }
  PruneResult out;
  out.root_partials = std::move(partials.back());
  out.log_scalers = std::move(scales.back());
  out.log_likelihood = detail::root_log_likelihood(out.root_partials, out.log_scalers, model.eta());
  return out;
}

// ---------------------------------------------------------------------------
// Newick

namespace detail {

inline std::string format_length(double b) { return fmt::format("{:.10g}", b); }

inline void write_newick(const PhyloTree& t, int i, const std::vector<std::string>& names, std::string& out) {
  const auto& n = t.node(i);
  if (n.is_leaf()) {
    if (static_cast<std::size_t>(n.leaf) >= names.size())
      throw std::out_of_range(fmt::format("no name for leaf {}", n.leaf));
    out += names[static_cast<std::size_t>(n.leaf)];
    return;
  }
  int first = n.left, second = n.right;
  double lf = n.left_length, ls = n.right_length;
  if (t.min_leaf(second) < t.min_leaf(first)) {
    std::swap(first, second);
    std::swap(lf, ls);
  }
  out += '(';
  write_newick(t, first, names, out);
  out += ':';
  out += format_length(lf);
  out += ',';
  write_newick(t, second, names, out);
  out += ':';
  out += format_length(ls);
  out += ')';
}

inline void write_topology(const PhyloTree& t, int i, std::string& out) {
  const auto& n = t.node(i);
  if (n.is_leaf()) {
    out += std::to_string(n.leaf);
    return;
  }
  int first = n.left, second = n.right;
  if (t.min_leaf(second) < t.min_leaf(first)) std::swap(first, second);
  out += '(';
  write_topology(t, first, out);
  out += ',';
  write_topology(t, second, out);
  out += ')';
}

}  // namespace detail

// Canonical Newick: children ordered by smallest contained leaf index,
// lengths with 10 significant digits.
inline std::string to_newick(const PhyloTree& tree, const std::vector<std::string>& names) {
  std::string out;
  detail::write_newick(tree, tree.root(), names, out);
  out += ';';
  return out;
}

// Canonical topology key without branch lengths, e.g. "((0,1),2)".
inline std::string topology_key(const PhyloTree& tree) {
  std::string out;
  detail::write_topology(tree, tree.root(), out);
  return out;
}

class NewickError : public std::runtime_error {
 public:
  NewickError(std::size_t position, const std::string& what)
      : std::runtime_error(fmt::format("newick: {} at position {}", what, position)), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

namespace detail {

class NewickParser {
 public:
  NewickParser(std::string_view text, const std::vector<std::string>& names) : text_(text) {
    for (std::size_t i = 0; i < names.size(); ++i) index_.emplace(names[i], static_cast<int>(i));
  }

  PhyloTree parse() {
    PhyloTree t = subtree();
    skip_ws();
    if (peek() == ':') {  // a root edge length is accepted and dropped
      ++pos_;
      length();
    }
    skip_ws();
    if (peek() != ';') fail("expected ';'");
    ++pos_;
    skip_ws();
    if (pos_ != text_.size()) fail("trailing characters after ';'");
    return t;
  }

 private:
  PhyloTree subtree() {
    skip_ws();
    if (peek() == '(') {
      ++pos_;
      PhyloTree a = subtree();
      double la = edge_length();
      skip_ws();
      if (peek() != ',') fail("expected ',' (only binary trees are supported)");
      ++pos_;
      PhyloTree b = subtree();
      double lb = edge_length();
      skip_ws();
      if (peek() != ')') fail("expected ')' (only binary trees are supported)");
      ++pos_;
      label();  // internal labels are ignored
      try {
        return PhyloTree::join(a, la, b, lb);
      } catch (const std::invalid_argument& e) {
        fail(e.what());
      }
    }
    std::size_t at = pos_;
    std::string name = label();
    if (name.empty()) fail("expected a taxon label");
    auto it = index_.find(name);
    if (it == index_.end()) throw NewickError(at, fmt::format("unknown taxon '{}'", name));
    return PhyloTree::leaf(it->second);
  }

  double edge_length() {
    skip_ws();
    if (peek() != ':') fail("expected ':' and a branch length");
    ++pos_;
    return length();
  }

  double length() {
    skip_ws();
    std::size_t start = pos_;
    while (pos_ < text_.size() && (std::isdigit(static_cast<unsigned char>(text_[pos_])) ||
                                   std::string_view("+-.eE").find(text_[pos_]) != std::string_view::npos))
      ++pos_;
    std::string token(text_.substr(start, pos_ - start));
    if (token.empty()) fail("expected a number");
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(token, &used);
    } catch (...) {
      pos_ = start;
      fail("malformed number");
    }
    if (used != token.size()) {
      pos_ = start;
      fail("malformed number");
    }
    if (!(v >= 0.0) || !std::isfinite(v)) {
      pos_ = start;
      fail("branch length must be finite and >= 0");
    }
    return v;
  }

  std::string label() {
    skip_ws();
    if (peek() == '\'') {
      std::size_t close = text_.find('\'', pos_ + 1);
      if (close == std::string_view::npos) fail("unterminated quoted label");
      std::string out(text_.substr(pos_ + 1, close - pos_ - 1));
      pos_ = close + 1;
      return out;
    }
    std::size_t start = pos_;
    while (pos_ < text_.size() && std::string_view("(),:;").find(text_[pos_]) == std::string_view::npos &&
           !std::isspace(static_cast<unsigned char>(text_[pos_])))
      ++pos_;
    return std::string(text_.substr(start, pos_ - start));
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }
  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }
  [[noreturn]] void fail(const std::string& what) const { throw NewickError(pos_, what); }

  std::string_view text_;
  std::size_t pos_ = 0;
  std::unordered_map<std::string, int> index_;
};

}  // namespace detail

inline PhyloTree parse_newick(std::string_view text, const std::vector<std::string>& names) {
  return detail::NewickParser(text, names).parse();
}

}  // namespace phylosmc
