#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phylosmc/oracle.hpp"
#include "phylosmc/simulate.hpp"
#include "phylosmc/tree.hpp"

using namespace phylosmc;

namespace {

std::vector<std::string> names(std::size_t n) { return default_taxon_names(n); }

}  // namespace

TEST(CountTopologies, KnownValues) {
  EXPECT_EQ(count_topologies(2), 1);
  EXPECT_EQ(count_topologies(3), 3);
  EXPECT_EQ(count_topologies(4), 15);
  EXPECT_EQ(count_topologies(12), boost::multiprecision::cpp_int("13749310575"));
  EXPECT_EQ(count_topologies(40).str(), "1009847364737869270905302433221592504062302663202724609375");
  EXPECT_THROW(count_topologies(1), std::invalid_argument);
}

TEST(Prune, SingleLeaf) {
  Alignment aln({"a", "b"}, {"A", "C"});
  PruneResult r = prune_tree(PhyloTree::leaf(0), aln, RateModel::jc69());
  EXPECT_EQ(r.root_partials, (std::vector<double>{1, 0, 0, 0}));
  EXPECT_NEAR(r.log_likelihood, std::log(0.25), 1e-15);
}

TEST(Prune, CherryAtZeroLength) {
  Alignment aln({"a", "b"}, {"A", "A"});
  PhyloTree t = PhyloTree::join(PhyloTree::leaf(0), 0.0, PhyloTree::leaf(1), 0.0);
  EXPECT_NEAR(prune_tree(t, aln, RateModel::jc69()).log_likelihood, std::log(0.25), 1e-15);
}

TEST(Prune, TwoTaxonClosedForm) {
  Alignment aln({"a", "b"}, {"AAC", "AAG"});
  double b1 = 0.2, b2 = 0.15;
  PhyloTree t = PhyloTree::join(PhyloTree::leaf(0), b1, PhyloTree::leaf(1), b2);
  double e = std::exp(-4.0 * (b1 + b2) / 3.0);
  double same = 0.25 * (0.25 + 0.75 * e), diff = 0.25 * (0.25 - 0.25 * e);
  EXPECT_NEAR(prune_tree(t, aln, RateModel::jc69()).log_likelihood, 2 * std::log(same) + std::log(diff), 1e-12);
}

TEST(Prune, MatchesBruteForceOnThreeTaxa) {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> n(0, 0.7);
  for (int rep = 0; rep < 30; ++rep) {
    std::vector<double> theta(kGtrParameters);
    for (double& x : theta) x = n(gen);
    RateModel m = RateModel::gtr(theta);
    PhyloTree t = random_tree(3, 0.4, 100 + static_cast<std::uint64_t>(rep));
    Alignment aln = simulate_alignment(t, m, 12, 200 + static_cast<std::uint64_t>(rep));
    EXPECT_NEAR(prune_tree(t, aln, m).log_likelihood, oracle::brute_force_loglik(t, aln, m), 1e-9);
  }
}

TEST(Prune, RescalingKeepsLongAlignmentsFinite) {
  PhyloTree t = random_tree(16, 0.5, 2);
  Alignment aln = simulate_alignment(t, RateModel::jc69(), 20000, 3);
  double ll = prune_tree(t, aln, RateModel::jc69()).log_likelihood;
  EXPECT_TRUE(std::isfinite(ll));
  EXPECT_LT(ll, -20000.0);
}

TEST(Prune, ImpossibleDataIsNegativeInfinity) {
  Alignment aln({"a", "b"}, {"A", "C"});
  PhyloTree t = PhyloTree::join(PhyloTree::leaf(0), 0.0, PhyloTree::leaf(1), 0.0);
  EXPECT_EQ(prune_tree(t, aln, RateModel::jc69()).log_likelihood, -INFINITY);
}

TEST(PhyloTree, Validation) {
  EXPECT_THROW(PhyloTree::join(PhyloTree::leaf(0), 0.1, PhyloTree::leaf(0), 0.1), std::invalid_argument);
  EXPECT_THROW(PhyloTree::join(PhyloTree::leaf(0), -0.1, PhyloTree::leaf(1), 0.1), std::invalid_argument);
  EXPECT_THROW(PhyloTree::join(PhyloTree::leaf(0), NAN, PhyloTree::leaf(1), 0.1), std::invalid_argument);
  PhyloTree t = random_tree(7, 0.1, 4);
  EXPECT_EQ(t.leaf_count(), 7u);
  EXPECT_EQ(t.internal_count(), 6u);
  EXPECT_EQ(t.branch_lengths().size(), 12u);
}

TEST(Newick, Cherry) {
  PhyloTree t = PhyloTree::join(PhyloTree::leaf(0), 0.1, PhyloTree::leaf(1), 0.2);
  EXPECT_EQ(to_newick(t, {"a", "b"}), "(a:0.1,b:0.2);");
  PhyloTree swapped = PhyloTree::join(PhyloTree::leaf(1), 0.2, PhyloTree::leaf(0), 0.1);
  EXPECT_EQ(to_newick(swapped, {"a", "b"}), "(a:0.1,b:0.2);");
}

TEST(Newick, RoundTripRandomTrees) {
  for (int rep = 0; rep < 100; ++rep) {
    int n = 2 + rep % 15;
    PhyloTree t = random_tree(n, 0.3, static_cast<std::uint64_t>(rep));
    auto nm = names(static_cast<std::size_t>(n));
    std::string text = to_newick(t, nm);
    PhyloTree back = parse_newick(text, nm);
    EXPECT_EQ(to_newick(back, nm), text);
    EXPECT_EQ(topology_key(back), topology_key(t));
  }
}

TEST(Newick, PrimateClades) {
  std::vector<std::string> nm = names(12);
  const std::string text = "((S11,((S10,(S9,(S8,S7))),(S6,(S5,(S4,(S3,S2)))))),(S1,S0));";
  // Attach unit lengths to every child edge.
  std::string annotated;
  for (std::size_t i = 0; i < text.size(); ++i) {
    annotated.push_back(text[i]);
    bool closes_child = (std::isalnum(static_cast<unsigned char>(text[i])) &&
                         (i + 1 < text.size() && !std::isalnum(static_cast<unsigned char>(text[i + 1])))) ||
                        (text[i] == ')' && i + 1 < text.size() && text[i + 1] != ';');
    if (closes_child) annotated += ":1";
  }
  PhyloTree t = parse_newick(annotated, nm);
  EXPECT_EQ(t.leaf_count(), 12u);
  std::string out = to_newick(t, nm);
  // Prosimians (S0,S1) split from the rest; hominids S2-S6 and monkeys S7-S10
  // are nested groups.
  EXPECT_EQ(out,
            "((S0:1,S1:1):1,((((((S2:1,S3:1):1,S4:1):1,S5:1):1,S6:1):1,(((S7:1,S8:1):1,S9:1):1,S10:1):1):1,"
            "S11:1):1);");
  EXPECT_NE(out.find("(S0:1,S1:1)"), std::string::npos);
  EXPECT_NE(out.find("(((S2:1,S3:1):1,S4:1):1,S5:1)"), std::string::npos);
  EXPECT_NE(out.find("(((S7:1,S8:1):1,S9:1):1,S10:1)"), std::string::npos);
  EXPECT_EQ(topology_key(parse_newick(out, nm)), topology_key(t));
}

TEST(Newick, Errors) {
  std::vector<std::string> nm{"a", "b", "c"};
  EXPECT_THROW(parse_newick("(a:0.1,b:0.2)", nm), NewickError);
  EXPECT_THROW(parse_newick("(a:0.1,z:0.2);", nm), NewickError);
  EXPECT_THROW(parse_newick("(a:0.1,b:0.2,c:0.3);", nm), NewickError);
  EXPECT_THROW(parse_newick("(a,b);", nm), NewickError);
  EXPECT_THROW(parse_newick("(a:-1,b:0.2);", nm), NewickError);
  PhyloTree q = parse_newick("('a':0.5,(b:1e-3,c:2):0.25):0.0;", nm);
  EXPECT_EQ(to_newick(q, nm), "(a:0.5,(b:0.001,c:2):0.25);");
}
