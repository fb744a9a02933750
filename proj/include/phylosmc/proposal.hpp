#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <stdexcept>
#include <utility>
#include <vector>

#include <fmt/format.h>

namespace phylosmc {

// Finite branch-length support used in place of the exponential proposal
// when an exact enumeration of the target is needed.
class GridSpec {
 public:
  GridSpec(std::vector<double> values, std::vector<double> probs) {
    if (values.empty() || values.size() != probs.size())
      throw std::invalid_argument("grid: values and probs must be nonempty and of equal length");
    std::vector<std::size_t> order(values.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    double total = 0.0;
    for (std::size_t i : order) {
      if (!(values[i] > 0.0) || !std::isfinite(values[i]))
        throw std::invalid_argument(fmt::format("grid: value {} is not a positive finite length", values[i]));
      if (!(probs[i] > 0.0)) throw std::invalid_argument("grid: probabilities must be positive");
      if (!values_.empty() && values[i] == values_.back())
        throw std::invalid_argument("grid: values must be distinct");
      values_.push_back(values[i]);
      probs_.push_back(probs[i]);
      total += probs[i];
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument(fmt::format("grid: probabilities sum to {}", total));
    for (double& p : probs_) p /= total;
  }

  const std::vector<double>& values() const { return values_; }
  const std::vector<double>& probs() const { return probs_; }
  std::size_t size() const { return values_.size(); }

  // Inverse-CDF selection of an atom index from u in (0, 1).
  std::size_t index_for(double u) const {
    double cum = 0.0;
    for (std::size_t g = 0; g + 1 < probs_.size(); ++g) {
      cum += probs_[g];
      if (u < cum) return g;
    }
    return probs_.size() - 1;
  }

 private:
  std::vector<double> values_;
  std::vector<double> probs_;
};

// Parses "v1:p1,v2:p2,...".
inline GridSpec parse_grid(const std::string& text) {
  std::vector<double> values, probs;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t comma = text.find(',', pos);
    std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    std::size_t colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument(fmt::format("grid: expected value:prob in '{}'", item));
    values.push_back(std::stod(item.substr(0, colon)));
    probs.push_back(std::stod(item.substr(colon + 1)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return GridSpec(std::move(values), std::move(probs));
}

// Branch-length prior rate lambda_bl and the proposal's log rate psi (one
// shared value, or one per rank). A grid, when set, replaces the exponential
// proposal.
struct ProposalParams {
  std::vector<double> log_rate;
  double lambda_bl = 10.0;
  std::optional<GridSpec> grid;

  static ProposalParams with_prior_rate(double lambda_bl = 10.0, bool per_rank = false, int ranks = 1) {
    ProposalParams p;
    p.lambda_bl = lambda_bl;
    p.log_rate.assign(per_rank ? static_cast<std::size_t>(std::max(ranks, 1)) : 1, std::log(lambda_bl));
    return p;
  }

  void validate(int ranks) const {
    if (!(lambda_bl > 0.0) || !std::isfinite(lambda_bl))
      throw std::invalid_argument(fmt::format("lambda_bl must be positive, got {}", lambda_bl));
    if (grid) return;
    if (log_rate.empty()) throw std::invalid_argument("proposal needs at least one log rate");
    if (log_rate.size() != 1 && log_rate.size() != static_cast<std::size_t>(ranks))
      throw std::invalid_argument(fmt::format("proposal has {} log rates, expected 1 or {}", log_rate.size(), ranks));
    for (double r : log_rate)
      if (!std::isfinite(r)) throw std::invalid_argument("proposal log rate must be finite");
  }

  bool per_rank() const { return log_rate.size() > 1; }
  double rate(int rank) const {
    std::size_t i = per_rank() ? static_cast<std::size_t>(rank - 1) : 0;
    return std::exp(log_rate.at(i));
  }
};

struct BranchDraw {
  double length;
  double log_q;  // log density (exponential) or log atom probability (grid)
};

// b = -log(u) / rate for the exponential proposal, so b is a deterministic
// function of psi for fixed u.
inline BranchDraw draw_branch(const ProposalParams& params, int rank, double u) {
  if (params.grid) {
    std::size_t g = params.grid->index_for(u);
    return {params.grid->values()[g], std::log(params.grid->probs()[g])};
  }
  double rate = params.rate(rank);
  double b = -std::log(u) / rate;
  return {b, std::log(rate) - rate * b};
}

// Exponential prior log density; on a grid it is the prior mass of the atom.
inline double log_branch_prior(double b, double lambda_bl) { return std::log(lambda_bl) - lambda_bl * b; }

inline std::size_t pair_count(std::size_t f) { return f * (f - 1) / 2; }

// Lexicographic index -> (i, j), i < j.
inline std::pair<std::size_t, std::size_t> pair_at(std::size_t f, std::size_t index) {
  for (std::size_t i = 0; i + 1 < f; ++i) {
    std::size_t row = f - 1 - i;
    if (index < row) return {i, i + 1 + index};
    index -= row;
  }
  throw std::out_of_range("pair index out of range");
}

}  // namespace phylosmc
