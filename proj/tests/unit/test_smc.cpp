#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "phylosmc/oracle.hpp"
#include "phylosmc/simulate.hpp"
#include "phylosmc/sweep.hpp"

using namespace phylosmc;

namespace {

double mean(const std::vector<double>& xs) { return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size()); }

double variance(const std::vector<double>& xs) {
  double m = mean(xs), s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return s / static_cast<double>(xs.size() - 1);
}

PartialState with_tree_swapped_children(const PartialState& s, std::size_t index, const LikelihoodContext& ctx) {
  std::vector<SubtreePtr> trees = s.trees();
  const Subtree& t = *trees[index];
  trees[index] = make_merged(t.right, t.left, t.right_length, t.left_length, t.rank, ctx);
  return PartialState::from_trees(trees, s.taxon_count());
}

}  // namespace

TEST(Resample, UniformWeightsGiveUniformAncestors) {
  const std::size_t K = 10, sweeps = 10000;
  std::vector<double> lw(K, -3.0);
  std::vector<double> counts(K, 0.0);
  CounterRng rng(7);
  for (std::size_t t = 0; t < sweeps; ++t)
    for (int a : resample(lw, DrawStream(rng, Stream::resample, t, 0))) counts[static_cast<std::size_t>(a)] += 1;
  const double n = static_cast<double>(K * sweeps), p = 1.0 / K;
  for (double c : counts) EXPECT_LT(std::abs(c - n * p), 4 * std::sqrt(n * p * (1 - p)));
}

TEST(Resample, DegenerateCases) {
  CounterRng rng(1);
  DrawStream d(rng, Stream::resample, 0, 0);
  std::vector<double> one{kNegInf, 2.0, kNegInf, kNegInf};
  for (int a : resample(one, d)) EXPECT_EQ(a, 1);
  std::vector<double> single{5.0};
  EXPECT_EQ(resample(single, d), std::vector<int>{0});
  std::vector<double> dead(3, kNegInf);
  EXPECT_THROW(resample(dead, d), NumericalError);
  std::vector<double> bad{0.0, NAN};
  EXPECT_THROW(resample(bad, d), NumericalError);
}

TEST(Ess, Bounds) {
  std::vector<double> uniform(8, -1.5);
  EXPECT_NEAR(ess(uniform), 8.0, 1e-12);
  std::vector<double> degenerate{0.0, kNegInf, kNegInf, kNegInf};
  EXPECT_DOUBLE_EQ(ess(degenerate), 1.0);
  std::vector<double> dead(2, kNegInf);
  EXPECT_THROW(ess(dead), NumericalError);
  std::vector<double> big{-1000, -1001, -1005, -999.5};
  double e = ess(big);
  EXPECT_GE(e, 1.0);
  EXPECT_LE(e, 4.0);
}

TEST(Propose, PairDensity) {
  RateModel m = RateModel::jc69();
  Alignment aln = simulate_alignment(random_tree(4, 0.1, 1), m, 10, 2);
  LikelihoodContext ctx{&m, nullptr};
  ProposalParams p = ProposalParams::with_prior_rate(10.0);
  PartialState s = PartialState::initial(aln, ctx);
  Proposal pr = propose(s, p, ctx, 0.5, 0.3, 0.7);
  double rate = 10.0;
  double branch = 2 * std::log(rate) - rate * (pr.b_left + pr.b_right);
  EXPECT_NEAR(pr.log_q - branch, -std::log(6.0), 1e-12);
  EXPECT_NEAR(pr.b_left, -std::log(0.3) / rate, 1e-15);
  PartialState two = merge(merge(s, 0, 1, 0.1, 0.1, ctx), 0, 1, 0.1, 0.1, ctx);
  Proposal last = propose(two, p, ctx, 0.99, 0.3, 0.7);
  EXPECT_NEAR(last.log_q - (2 * std::log(rate) - rate * (last.b_left + last.b_right)), 0.0, 1e-12);
  EXPECT_TRUE(last.next.complete());
  EXPECT_THROW(propose(last.next, p, ctx, 0.5, 0.5, 0.5), std::logic_error);
}

TEST(Propose, PairIsUniform) {
  RateModel m = RateModel::jc69();
  Alignment aln = simulate_alignment(random_tree(4, 0.1, 1), m, 3, 2);
  LikelihoodContext ctx{&m, nullptr};
  ProposalParams p = ProposalParams::with_prior_rate(10.0);
  PartialState s = PartialState::initial(aln, ctx);
  std::vector<int> counts(6, 0);
  for (int k = 0; k < 6000; ++k) {
    Proposal pr = propose(s, p, ctx, (k + 0.5) / 6000.0, 0.5, 0.5);
    int idx = 0;
    for (std::size_t i = 0; i < pr.i; ++i) idx += static_cast<int>(3 - i);
    counts[static_cast<std::size_t>(idx + static_cast<int>(pr.j - pr.i - 1))]++;
  }
  for (int c : counts) EXPECT_EQ(c, 1000);
}

TEST(CsmcWeight, PriorCancelsProposalAtMatchingRate) {
  RateModel m = RateModel::jc69();
  Alignment aln = simulate_alignment(random_tree(5, 0.1, 3), m, 30, 4);
  LikelihoodContext ctx{&m, nullptr};
  ProposalParams p = ProposalParams::with_prior_rate(10.0);
  PartialState s = PartialState::initial(aln, ctx);
  Proposal pr = propose(s, p, ctx, 0.31, 0.2, 0.9);
  double w = csmc_weight(s, pr.next, pr.log_q, p);
  double dll = pr.next.tree(pr.i).log_likelihood - s.tree(pr.i).log_likelihood - s.tree(pr.j).log_likelihood;
  EXPECT_NEAR(w, std::log(10.0) + dll, 1e-10);
}

TEST(CsmcWeight, IdenticalSitesAtZeroLength) {
  Alignment aln({"a", "b"}, {"A", "A"});
  RateModel m = RateModel::jc69();
  LikelihoodContext ctx{&m, nullptr};
  ProposalParams p = ProposalParams::with_prior_rate(10.0);
  PartialState s = PartialState::initial(aln, ctx);
  Proposal pr = propose(s, p, ctx, 0.5, 1.0 - 1e-15, 1.0 - 1e-15);
  EXPECT_NEAR(std::exp(csmc_weight(s, pr.next, pr.log_q, p)), 4.0, 1e-9);
}

TEST(CsmcWeight, LeftRightRelabeling) {
  RateModel m = RateModel::jc69();
  Alignment aln = simulate_alignment(random_tree(4, 0.1, 5), m, 20, 6);
  LikelihoodContext ctx{&m, nullptr};
  ProposalParams p = ProposalParams::with_prior_rate(10.0);
  PartialState s = PartialState::initial(aln, ctx);
  PartialState a = merge(s, 0, 2, 0.1, 0.3, ctx);
  PartialState b = with_tree_swapped_children(a, 0, ctx);
  ASSERT_NEAR(a.tree(0).log_likelihood, b.tree(0).log_likelihood, 1e-13);
  EXPECT_NEAR(csmc_weight(s, a, -1.0, p), csmc_weight(s, b, -1.0, p), 1e-13);
  EXPECT_THROW(csmc_weight(s, s, 0.0, p), std::invalid_argument);
}

TEST(RunCsmc, ShapeAndCounters) {
  RateModel m = RateModel::jc69();
  Alignment aln = simulate_alignment(random_tree(6, 0.1, 7), m, 40, 8);
  SweepResult r = run_csmc(aln, m, ProposalParams::with_prior_rate(), 12, 99, 1);
  EXPECT_EQ(r.system.records.size(), 5u);
  EXPECT_EQ(r.system.ancestors.size(), 4u);
  EXPECT_EQ(r.system.particles.size(), 12u);
  double total = 0.0;
  for (const auto& rec : r.system.records) {
    EXPECT_EQ(rec.likelihood_evaluations, 12u);
    EXPECT_TRUE(std::isfinite(rec.log_avg_weight));
    EXPECT_GE(rec.ess, 1.0 - 1e-12);
    EXPECT_LE(rec.ess, 12.0 + 1e-12);
    total += rec.log_avg_weight;
  }
  EXPECT_DOUBLE_EQ(total, r.log_Zhat);
  for (const auto& row : r.system.ancestors)
    for (int a : row) EXPECT_TRUE(a >= 0 && a < 12);
  for (const auto& s : r.system.particles) EXPECT_TRUE(s.complete());
  EXPECT_EQ(r.system.best_tree().leaf_count(), 6u);
}

TEST(RunCsmc, DeterministicAcrossThreads) {
  RateModel m = RateModel::jc69();
  Alignment aln = simulate_alignment(random_tree(7, 0.1, 1), m, 50, 2);
  ProposalParams p = ProposalParams::with_prior_rate();
  SweepResult a = run_csmc(aln, m, p, 16, 5, 1);
  SweepResult b = run_csmc(aln, m, p, 16, 5, 4);
  SweepResult c = run_csmc(aln, m, p, 16, 5, 1);
  EXPECT_EQ(a.log_Zhat, b.log_Zhat);
  EXPECT_EQ(a.log_Zhat, c.log_Zhat);
  EXPECT_EQ(a.system.ancestors, b.system.ancestors);
  EXPECT_NE(a.log_Zhat, run_csmc(aln, m, p, 16, 6, 1).log_Zhat);
}

TEST(RunCsmc, TwoTaxaUnbiasedOnGrid) {
  RateModel m = RateModel::jc69();
  Alignment aln({"a", "b"}, {"ACGTAC", "ACGAAC"});
  ProposalParams p = ProposalParams::with_prior_rate(10.0);
  p.grid = GridSpec({0.05, 0.2}, {0.6, 0.4});
  double exact = oracle::exact_log_Z_grid(aln, m, *p.grid, 10.0) - oracle::leaf_log_likelihood_total(aln, m);
  std::vector<double> z;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) z.push_back(std::exp(run_csmc(aln, m, p, 4, seed, 1).log_Zhat - exact));
  double se = std::sqrt(variance(z) / static_cast<double>(z.size()));
  EXPECT_LT(std::abs(mean(z) - 1.0), 3 * se);
}

TEST(RunCsmc, VarianceShrinksWithParticles) {
  RateModel m = RateModel::jc69();
  Alignment aln = simulate_alignment(random_tree(4, 0.1, 11), m, 20, 12);
  ProposalParams p = ProposalParams::with_prior_rate();
  double previous = INFINITY;
  for (std::size_t K : {4, 16, 64}) {
    std::vector<double> lz;
    for (std::uint64_t seed = 0; seed < 50; ++seed) lz.push_back(run_csmc(aln, m, p, K, seed, 1).log_Zhat);
    double v = variance(lz);
    EXPECT_LT(v, previous) << "K=" << K;
    previous = v;
  }
}

TEST(RunCsmc, ValidatesInputs) {
  RateModel m = RateModel::jc69();
  Alignment aln({"a", "b"}, {"A", "A"});
  ProposalParams p = ProposalParams::with_prior_rate();
  EXPECT_THROW(run_csmc(aln, m, p, 0, 1, 1), std::invalid_argument);
  p.lambda_bl = -1;
  EXPECT_THROW(run_csmc(aln, m, p, 2, 1, 1), std::invalid_argument);
}

TEST(Grid, Validation) {
  EXPECT_THROW(GridSpec({0.1, 0.1}, {0.5, 0.5}), std::invalid_argument);
  EXPECT_THROW(GridSpec({0.1, -0.2}, {0.5, 0.5}), std::invalid_argument);
  EXPECT_THROW(GridSpec({0.1, 0.2}, {0.5, 0.6}), std::invalid_argument);
  EXPECT_THROW(GridSpec({}, {}), std::invalid_argument);
  GridSpec g = parse_grid("0.3:0.25,0.1:0.75");
  EXPECT_EQ(g.values(), (std::vector<double>{0.1, 0.3}));
  EXPECT_EQ(g.index_for(0.7), 0u);
  EXPECT_EQ(g.index_for(0.8), 1u);
}
