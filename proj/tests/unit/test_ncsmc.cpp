#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "phylosmc/ncsmc.hpp"
#include "phylosmc/oracle.hpp"
#include "phylosmc/simulate.hpp"
#include "phylosmc/sweep.hpp"

using namespace phylosmc;

namespace {

LookAheadTable table_with(std::vector<double> potentials) {
  LookAheadTable t;
  t.L = potentials.size();
  t.M = 1;
  t.log_potentials = std::move(potentials);
  t.candidates.resize(t.L);
  t.states.resize(t.L);
  return t;
}

struct Instance {
  RateModel model = RateModel::jc69();
  Alignment aln;
  LikelihoodContext ctx;
  PartialState root;
  explicit Instance(int n, std::size_t sites = 12, std::uint64_t seed = 1)
      : aln(simulate_alignment(random_tree(n, 0.15, seed), model, sites, seed + 1)),
        ctx{&model, nullptr},
        root(PartialState::initial(aln, ctx)) {}
};

}  // namespace

TEST(Lookahead, CandidateCounts) {
  Instance s(6);
  ProposalParams p = ProposalParams::with_prior_rate();
  CounterRng rng(1);
  DrawStream d(rng, Stream::lookahead, 0, 1);
  EXPECT_EQ(build_lookahead(s.root, p, 1, s.ctx, d, 0).cells(), 15u);
  PartialState f3 = merge(merge(merge(s.root, 0, 1, 0.1, 0.1, s.ctx), 0, 1, 0.1, 0.1, s.ctx), 0, 1, 0.1, 0.1, s.ctx);
  EXPECT_EQ(build_lookahead(f3, p, 1, s.ctx, d, 0).L, 3u);
  PartialState f2 = merge(f3, 0, 1, 0.1, 0.1, s.ctx);
  LookAheadTable t2 = build_lookahead(f2, p, 3, s.ctx, d, 0);
  EXPECT_EQ(t2.L, 1u);
  EXPECT_EQ(t2.cells(), 3u);
  EXPECT_THROW(build_lookahead(merge(f2, 0, 1, 0.1, 0.1, s.ctx), p, 1, s.ctx, d, 0), std::logic_error);
}

TEST(Lookahead, FigureFourState) {
  // {A, B, (C,D)}: three enumerated merges.
  Instance s(4);
  PartialState cd = merge(s.root, 2, 3, 0.1, 0.1, s.ctx);
  CounterRng rng(2);
  LookAheadTable t = build_lookahead(cd, ProposalParams::with_prior_rate(), 2, s.ctx, DrawStream(rng, Stream::lookahead, 0, 2), 0);
  ASSERT_EQ(t.L, 3u);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t c = 0; c < t.cells(); c += 2) pairs.emplace_back(t.candidates[c].i, t.candidates[c].j);
  EXPECT_EQ(pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}, {0, 2}, {1, 2}}));
  for (std::size_t c = 0; c < t.cells(); ++c) {
    EXPECT_EQ(t.candidates[c].i, t.candidates[c / 2 * 2].i);
    EXPECT_GT(t.candidates[c].b_left, 0.0);
    EXPECT_GT(t.candidates[c].b_right, 0.0);
  }
}

TEST(Lookahead, PotentialsUseTheCsmcWeightFormula) {
  Instance s(5, 20);
  ProposalParams p = ProposalParams::with_prior_rate(10.0);
  p.log_rate = {std::log(7.0)};
  CounterRng rng(3);
  LookAheadTable t = build_lookahead(s.root, p, 2, s.ctx, DrawStream(rng, Stream::lookahead, 0, 1), 4);
  const double log_pair = -std::log(static_cast<double>(t.L));
  for (std::size_t c = 0; c < t.cells(); ++c)
    EXPECT_NEAR(t.log_potentials[c], csmc_weight(s.root, t.states[c], t.candidates[c].log_q + log_pair, p), 1e-12);
}

TEST(Select, SingleFiniteCell) {
  LookAheadTable t = table_with({kNegInf, -2.0, kNegInf});
  for (double u : {1e-9, 0.5, 1 - 1e-9}) EXPECT_EQ(select_cell(t, u), 1u);
  EXPECT_THROW(select_cell(table_with({kNegInf, kNegInf}), 0.5), NumericalError);
}

TEST(Select, ProportionalToPotentials) {
  LookAheadTable t = table_with({std::log(3.0) - 4.0, -4.0});
  CounterRng rng(4);
  const int n = 100000;
  int first = 0;
  for (int k = 0; k < n; ++k) first += select_cell(t, rng.uniform({static_cast<std::uint64_t>(k)})) == 0;
  double p = 0.75;
  EXPECT_LT(std::abs(first - n * p), 4 * std::sqrt(n * p * (1 - p)));

  LookAheadTable u = table_with(std::vector<double>(5, 1.0));
  std::vector<int> counts(5, 0);
  for (int k = 0; k < n; ++k) counts[select_cell(u, rng.uniform({9, static_cast<std::uint64_t>(k)}))]++;
  for (int c : counts) EXPECT_LT(std::abs(c - n * 0.2), 4 * std::sqrt(n * 0.2 * 0.8));
}

TEST(NcsmcWeight, LogMeanOfPotentials) {
  EXPECT_NEAR(ncsmc_weight(table_with({-3.5, -3.5, -3.5, -3.5})), -3.5, 1e-14);
  EXPECT_EQ(ncsmc_weight(table_with({0.25})), 0.25);
  CounterRng rng(5);
  std::vector<double> pots;
  double direct = 0.0;
  for (std::uint64_t k = 0; k < 24; ++k) {
    double w = 0.5 + rng.uniform({k});
    pots.push_back(std::log(w));
    direct += w;
  }
  EXPECT_NEAR(std::exp(ncsmc_weight(table_with(pots))), direct / 24.0, 1e-12);
  std::vector<double> rev(pots.rbegin(), pots.rend());
  EXPECT_NEAR(ncsmc_weight(table_with(rev)), ncsmc_weight(table_with(pots)), 1e-15);
}

TEST(RunNcsmc, CountersAndDeterminism) {
  Instance s(7, 30);
  ProposalParams p = ProposalParams::with_prior_rate();
  SweepResult a = run_ncsmc(s.aln, s.model, p, 5, 3, 17, 1);
  SweepResult b = run_ncsmc(s.aln, s.model, p, 5, 3, 17, 4);
  EXPECT_EQ(a.log_Zhat, b.log_Zhat);
  ASSERT_EQ(a.system.records.size(), 6u);
  for (const auto& rec : a.system.records) {
    std::size_t f = 7 - static_cast<std::size_t>(rec.rank) + 1;
    EXPECT_EQ(rec.likelihood_evaluations, 5 * pair_count(f) * 3);
    EXPECT_EQ(static_cast<std::size_t>(rec.lookahead_pairs), pair_count(f));
    EXPECT_EQ(rec.subsamples, 3);
    EXPECT_TRUE(std::isfinite(rec.max_log_potential));
  }
  SweepResult csmc = run_csmc(s.aln, s.model, p, 5, 17, 1);
  for (std::size_t r = 0; r < csmc.system.records.size(); ++r)
    EXPECT_GE(a.system.records[r].likelihood_evaluations, csmc.system.records[r].likelihood_evaluations);
}

TEST(RunNcsmc, TwoTaxaUnbiasedOnGrid) {
  RateModel m = RateModel::jc69();
  Alignment aln({"a", "b"}, {"ACGTAC", "ACGAAC"});
  ProposalParams p = ProposalParams::with_prior_rate(10.0);
  p.grid = GridSpec({0.05, 0.2}, {0.6, 0.4});
  double exact = oracle::exact_log_Z_grid(aln, m, *p.grid, 10.0) - oracle::leaf_log_likelihood_total(aln, m);
  double sum = 0, sum_sq = 0;
  const int reps = 10000;
  for (int seed = 0; seed < reps; ++seed) {
    double z = std::exp(run_ncsmc(aln, m, p, 2, 1, static_cast<std::uint64_t>(seed), 1).log_Zhat - exact);
    sum += z;
    sum_sq += z * z;
  }
  double mean = sum / reps, se = std::sqrt((sum_sq / reps - mean * mean) / reps);
  EXPECT_LT(std::abs(mean - 1.0), 3 * se);
}

TEST(ProperWeighting, ZeroAndConstantTestFunctions) {
  Instance s(4, 8, 3);
  ProposalParams p = ProposalParams::with_prior_rate(10.0);
  p.grid = GridSpec({0.05, 0.25}, {0.5, 0.5});
  PartialState ab = merge(s.root, 0, 1, 0.05, 0.25, s.ctx);
  auto zero = proper_weighting_check(ab, s.aln, s.model, p, [](const PartialState&) { return 0.0; }, 1000);
  EXPECT_EQ(zero.lhs, 0.0);
  EXPECT_EQ(zero.rhs, 0.0);
  EXPECT_EQ(zero.z_score, 0.0);
  auto one = proper_weighting_check(ab, s.aln, s.model, p, [](const PartialState&) { return 1.0; }, 20000, 2, 5);
  EXPECT_LT(std::abs(one.z_score), 3.0) << one.lhs << " vs " << one.rhs;
  EXPECT_THROW(proper_weighting_check(ab, s.aln, s.model, ProposalParams::with_prior_rate(),
                                      [](const PartialState&) { return 1.0; }, 10),
               std::invalid_argument);
}

// With more sub-samples the pair-selection distribution approaches the exact
// one-step distribution of merged topologies.
TEST(ProperWeighting, SelectionApproachesLocallyOptimal) {
  Instance s(5, 15, 8);
  ProposalParams p = ProposalParams::with_prior_rate(10.0);
  p.grid = GridSpec({0.02, 0.1, 0.4}, {0.3, 0.4, 0.3});
  const GridSpec& g = *p.grid;
  std::vector<double> exact_log(pair_count(5), kNegInf);
  for (std::size_t pair = 0; pair < exact_log.size(); ++pair) {
    auto [i, j] = pair_at(5, pair);
    std::vector<double> terms;
    for (double bl : g.values())
      for (double br : g.values())
        terms.push_back(log_target_ratio(s.root, merge(s.root, i, j, bl, br, s.ctx), p.lambda_bl));
    exact_log[pair] = log_sum_exp(terms);
  }
  std::vector<double> exact(exact_log.size());
  softmax_into(exact_log, exact);

  CounterRng rng(13);
  double previous = INFINITY;
  for (std::size_t M : {1, 4, 16, 64}) {
    double tv = 0.0;
    const int reps = 200;
    for (int rep = 0; rep < reps; ++rep) {
      LookAheadTable t = build_lookahead(s.root, p, M, s.ctx, DrawStream(rng, Stream::lookahead, M, static_cast<std::uint64_t>(rep)), 0);
      std::vector<double> prob(t.cells());
      softmax_into(t.log_potentials, prob);
      double dist = 0.0;
      for (std::size_t pair = 0; pair < t.L; ++pair) {
        double q = 0.0;
        for (std::size_t m = 0; m < M; ++m) q += prob[pair * M + m];
        dist += std::abs(q - exact[pair]);
      }
      tv += 0.5 * dist / reps;
    }
    EXPECT_LT(tv, previous) << "M=" << M;
    previous = tv;
  }
}
