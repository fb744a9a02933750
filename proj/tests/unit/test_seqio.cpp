#include <gtest/gtest.h>

#include <string>

#include "phylosmc/seqio.hpp"
#include "phylosmc/simulate.hpp"

using namespace phylosmc;

namespace {

InputErrorKind kind_of(const std::string& text) {
  try {
    parse_alignment(text);
  } catch (const InputError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error for input";
  return InputErrorKind::malformed;
}

}  // namespace

TEST(Fasta, ParsesTwoRecords) {
  Alignment aln = parse_fasta(">a\nACGT\n>b\nACGA\n");
  EXPECT_EQ(aln.taxon_count(), 2u);
  EXPECT_EQ(aln.site_count(), 4u);
  EXPECT_EQ(aln.taxa(), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(aln.rows()[1], "ACGA");
}

TEST(Fasta, MultiLineAndLowercase) {
  Alignment aln = parse_fasta(">x desc\nac\ngt\n\n>y\nAC-T\r\n");
  EXPECT_EQ(aln.rows()[0], "ACGT");
  EXPECT_EQ(aln.rows()[1], "AC-T");
  EXPECT_EQ(aln.taxa()[0], "x");
}

TEST(Fasta, UnequalLengthsReported) {
  try {
    parse_fasta(">a\nAC\n>b\nACG\n");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_EQ(e.kind(), InputErrorKind::unequal_lengths);
    EXPECT_NE(std::string(e.what()).find("2 vs 3"), std::string::npos) << e.what();
    EXPECT_GT(e.line(), 0u);
  }
}

TEST(Fasta, DistinctDiagnostics) {
  EXPECT_EQ(kind_of(""), InputErrorKind::empty_input);
  EXPECT_EQ(kind_of("  \n\n"), InputErrorKind::empty_input);
  EXPECT_EQ(kind_of(">a\nAC\n>a\nAC\n"), InputErrorKind::duplicate_taxon);
  EXPECT_EQ(kind_of(">a\nAC\n>b\nAJ\n"), InputErrorKind::illegal_character);
}

TEST(Fasta, IllegalCharacterLine) {
  try {
    parse_fasta(">a\nACGT\n>b\nAC\nG!\n");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_EQ(e.kind(), InputErrorKind::illegal_character);
    EXPECT_EQ(e.line(), 5u);
  }
}

TEST(Fasta, DuplicateLine) {
  try {
    parse_fasta(">a\nAC\n>b\nAC\n>a\nAC\n");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_EQ(e.kind(), InputErrorKind::duplicate_taxon);
    EXPECT_EQ(e.line(), 5u);
  }
}

TEST(Encode, OneHotAndAmbiguity) {
  EXPECT_EQ(encode_site('A'), (SiteVector{1, 0, 0, 0}));
  EXPECT_EQ(encode_site('t'), (SiteVector{0, 0, 0, 1}));
  EXPECT_EQ(encode_site('U'), (SiteVector{0, 0, 0, 1}));
  EXPECT_EQ(encode_site('R'), (SiteVector{1, 0, 1, 0}));
  EXPECT_EQ(encode_site('Y'), (SiteVector{0, 1, 0, 1}));
  EXPECT_EQ(encode_site('-'), (SiteVector{1, 1, 1, 1}));
  EXPECT_EQ(encode_site('N'), (SiteVector{1, 1, 1, 1}));
  EXPECT_THROW(encode_site('J'), InputError);
}

TEST(Encode, EveryCodeIsANonemptyIndicator) {
  for (char c : std::string("ACGTURYSWKMBDHVN-?")) {
    SiteVector v = encode_site(c);
    double sum = 0;
    for (double x : v) {
      EXPECT_TRUE(x == 0.0 || x == 1.0);
      sum += x;
    }
    EXPECT_GE(sum, 1.0) << c;
    EXPECT_LE(sum, 4.0) << c;
  }
}

TEST(Fasta, WriteParseRoundTrip) {
  PhyloTree t = random_tree(5, 0.2, 3);
  Alignment aln = simulate_alignment(t, RateModel::jc69(), 137, 4);
  std::string text = write_fasta(aln);
  for (std::size_t pos = 0, next; (next = text.find('\n', pos)) != std::string::npos; pos = next + 1)
    EXPECT_LE(next - pos, 60u);
  Alignment back = parse_fasta(text);
  EXPECT_EQ(back.taxa(), aln.taxa());
  EXPECT_EQ(back.rows(), aln.rows());
  EXPECT_EQ(write_fasta(back), text);
}

TEST(Phylip, Sequential) {
  Alignment aln = parse_alignment("3 6\nalpha ACGTAC\nbeta  ACG\nTAA\ngamma AC-TAN\n");
  EXPECT_EQ(aln.taxon_count(), 3u);
  EXPECT_EQ(aln.rows()[1], "ACGTAA");
  EXPECT_EQ(aln.taxa()[2], "gamma");
}

TEST(Phylip, HeaderMismatch) { EXPECT_THROW(parse_phylip("2 4\na ACGT\n"), InputError); }

TEST(Nexus, MatrixBlock) {
  std::string text =
      "#NEXUS\nBEGIN DATA;\n DIMENSIONS NTAX=2 NCHAR=4;\n FORMAT DATATYPE=DNA GAP=-;\n MATRIX\n"
      "  one ACGT\n  two AC-T\n ;\nEND;\n";
  Alignment aln = parse_alignment(text);
  EXPECT_EQ(aln.taxa(), (std::vector<std::string>{"one", "two"}));
  EXPECT_EQ(aln.rows()[1], "AC-T");
}

TEST(Alignment, Invariants) {
  EXPECT_THROW(Alignment({"a"}, {"AC"}), InputError);
  EXPECT_THROW(Alignment({"a", "b"}, {"", ""}), InputError);
  Alignment aln({"a", "b"}, {"ACGT", "RYNN"});
  EXPECT_EQ(aln.site_vector(1, 0), (SiteVector{1, 0, 1, 0}));
  std::vector<std::size_t> cols{3, 0};
  Alignment sub = aln.select_sites(cols);
  EXPECT_EQ(sub.rows()[0], "TA");
}
