#pragma once

#include <array>
#include <cctype>
#include <cstddef>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <fmt/format.h>

namespace phylosmc {

inline constexpr int kStates = 4;  // nucleotide alphabet A, C, G, T
using SiteVector = std::array<double, kStates>;

enum class InputErrorKind { empty_input, duplicate_taxon, unequal_lengths, illegal_character, malformed };

class InputError : public std::runtime_error {
 public:
  InputError(InputErrorKind kind, std::size_t line, const std::string& what)
      : std::runtime_error(line > 0 ? fmt::format("line {}: {}", line, what) : what),
        kind_(kind),
        line_(line) {}
  InputErrorKind kind() const { return kind_; }
  std::size_t line() const { return line_; }

 private:
  InputErrorKind kind_;
  std::size_t line_;
};

// Likelihood vector over (A, C, G, T) for one IUPAC code. Gaps, 'N' and '?'
// are fully missing data.
inline SiteVector encode_site(char ch) {
  auto set = [](bool a, bool c, bool g, bool t) {
    return SiteVector{a ? 1.0 : 0.0, c ? 1.0 : 0.0, g ? 1.0 : 0.0, t ? 1.0 : 0.0};
  };
  switch (std::toupper(static_cast<unsigned char>(ch))) {
    case 'A': return set(1, 0, 0, 0);
    case 'C': return set(0, 1, 0, 0);
    case 'G': return set(0, 0, 1, 0);
    case 'T':
    case 'U': return set(0, 0, 0, 1);
    case 'R': return set(1, 0, 1, 0);
    case 'Y': return set(0, 1, 0, 1);
    case 'S': return set(0, 1, 1, 0);
    case 'W': return set(1, 0, 0, 1);
    case 'K': return set(0, 0, 1, 1);
    case 'M': return set(1, 1, 0, 0);
    case 'B': return set(0, 1, 1, 1);
    case 'D': return set(1, 0, 1, 1);
    case 'H': return set(1, 1, 0, 1);
    case 'V': return set(1, 1, 1, 0);
    case 'N':
    case '-':
    case '?': return set(1, 1, 1, 1);
    default:
      throw InputError(InputErrorKind::illegal_character, 0,
                       fmt::format("unknown nucleotide character '{}'", ch));
  }
}

inline bool is_sequence_char(char ch) {
  try {
    encode_site(ch);
    return true;
  } catch (const InputError&) {
    return false;
  }
}

// N taxa x S sites of aligned nucleotides. Immutable after construction.
class Alignment {
 public:
  Alignment(std::vector<std::string> taxa, std::vector<std::string> rows) : taxa_(std::move(taxa)) {
    if (taxa_.size() != rows.size()) throw std::invalid_argument("Alignment: taxa/rows size mismatch");
    if (rows.empty()) throw InputError(InputErrorKind::empty_input, 0, "alignment has no sequences");
    if (rows.size() < 2) throw InputError(InputErrorKind::malformed, 0, "alignment needs at least two taxa");
    std::unordered_set<std::string> seen;
    for (const auto& t : taxa_) {
      if (t.empty()) throw InputError(InputErrorKind::malformed, 0, "empty taxon name");
      if (!seen.insert(t).second)
        throw InputError(InputErrorKind::duplicate_taxon, 0, fmt::format("duplicate taxon name '{}'", t));
    }
    sites_ = rows.front().size();
    if (sites_ == 0) throw InputError(InputErrorKind::empty_input, 0, "alignment has zero sites");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != sites_)
        throw InputError(InputErrorKind::unequal_lengths, 0,
                         fmt::format("unequal sequence lengths ({} vs {}) for '{}'", sites_, rows[i].size(),
                                     taxa_[i]));
    }
    rows_.reserve(rows.size());
    encoding_.resize(rows.size() * sites_ * kStates);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::string up = rows[i];
      for (std::size_t s = 0; s < sites_; ++s) {
        up[s] = static_cast<char>(std::toupper(static_cast<unsigned char>(up[s])));
        SiteVector v = encode_site(up[s]);
        std::copy(v.begin(), v.end(), encoding_.begin() + static_cast<std::ptrdiff_t>((i * sites_ + s) * kStates));
      }
      rows_.push_back(std::move(up));
    }
  }

  std::size_t taxon_count() const { return taxa_.size(); }
  std::size_t site_count() const { return sites_; }
  const std::vector<std::string>& taxa() const { return taxa_; }
  const std::vector<std::string>& rows() const { return rows_; }

  // S*4 contiguous site likelihood vectors of one taxon.
  std::span<const double> leaf_partials(std::size_t taxon) const {
    return {encoding_.data() + taxon * sites_ * kStates, sites_ * kStates};
  }
  SiteVector site_vector(std::size_t taxon, std::size_t site) const {
    SiteVector v{};
    auto p = leaf_partials(taxon).subspan(site * kStates, kStates);
    std::copy(p.begin(), p.end(), v.begin());
    return v;
  }

  // Column subset in the given order.
  Alignment select_sites(std::span<const std::size_t> sites) const {
    std::vector<std::string> rows(rows_.size());
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      rows[i].reserve(sites.size());
      for (std::size_t s : sites) rows[i].push_back(rows_.at(i).at(s));
    }
    return Alignment(taxa_, std::move(rows));
  }

 private:
  std::vector<std::string> taxa_;
  std::vector<std::string> rows_;
  std::size_t sites_ = 0;
  std::vector<double> encoding_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline void append_sequence(std::string& row, std::string_view text, std::size_t line) {
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) continue;
    if (!is_sequence_char(ch))
      throw InputError(InputErrorKind::illegal_character, line, fmt::format("illegal character '{}'", ch));
    row.push_back(ch);
  }
}

// Re-raises Alignment construction errors with the line where the offending
// record started.
template <typename Build>
Alignment with_record_lines(const std::vector<std::size_t>& lines, const std::vector<std::string>& taxa,
                            Build&& build) {
  try {
    return build();
  } catch (const InputError& e) {
    if (e.line() != 0) throw;
    std::string msg = e.what();
    for (std::size_t i = 0; i < taxa.size(); ++i) {
      if (msg.find("'" + taxa[i] + "'") != std::string::npos)
        throw InputError(e.kind(), lines[i], msg);
    }
    throw;
  }
}

}  // namespace detail

inline Alignment parse_fasta(std::string_view text) {
  std::vector<std::string> taxa, rows;
  std::vector<std::size_t> lines;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = detail::trim(text.substr(pos, nl - pos));
    ++line_no;
    pos = nl + 1;
    if (line.empty() || line.front() == ';') continue;
    if (line.front() == '>') {
      std::string_view header = detail::trim(line.substr(1));
      std::string name(header.substr(0, header.find_first_of(" \t")));
      if (name.empty()) throw InputError(InputErrorKind::malformed, line_no, "empty FASTA header");
      if (!seen.insert(name).second)
        throw InputError(InputErrorKind::duplicate_taxon, line_no, fmt::format("duplicate taxon name '{}'", name));
      taxa.push_back(std::move(name));
      rows.emplace_back();
      lines.push_back(line_no);
      continue;
    }
    if (taxa.empty()) throw InputError(InputErrorKind::malformed, line_no, "sequence data before first '>' header");
    detail::append_sequence(rows.back(), line, line_no);
  }
  if (taxa.empty()) throw InputError(InputErrorKind::empty_input, 0, "empty FASTA input");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size())
      throw InputError(InputErrorKind::unequal_lengths, lines[i],
                       fmt::format("unequal sequence lengths ({} vs {}) for '{}'", rows[0].size(), rows[i].size(),
                                   taxa[i]));
  }
  return detail::with_record_lines(lines, taxa, [&] { return Alignment(taxa, rows); });
}

// Sequential (non-interleaved) PHYLIP: header "N S", then N records of a
// whitespace-delimited name followed by S characters, possibly over several
// lines.
inline Alignment parse_phylip(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  std::size_t n = 0, s = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    std::istringstream hdr(line);
    if (!(hdr >> n >> s) || n == 0 || s == 0)
      throw InputError(InputErrorKind::malformed, line_no, "PHYLIP header must be 'N S'");
    break;
  }
  if (n == 0) throw InputError(InputErrorKind::empty_input, 0, "empty PHYLIP input");
  std::vector<std::string> taxa, rows;
  std::vector<std::size_t> lines;
  std::unordered_set<std::string> seen;
  while (taxa.size() < n || (!rows.empty() && rows.back().size() < s)) {
    if (!std::getline(in, line)) {
      throw InputError(InputErrorKind::malformed, line_no,
                       fmt::format("PHYLIP input ended early: expected {} taxa of {} sites", n, s));
    }
    ++line_no;
    std::string_view body = detail::trim(line);
    if (body.empty()) continue;
    if (rows.empty() || rows.back().size() >= s) {
      std::size_t cut = body.find_first_of(" \t");
      std::string name(body.substr(0, cut));
      if (!seen.insert(name).second)
        throw InputError(InputErrorKind::duplicate_taxon, line_no, fmt::format("duplicate taxon name '{}'", name));
      taxa.push_back(name);
      rows.emplace_back();
      lines.push_back(line_no);
      body = cut == std::string_view::npos ? std::string_view{} : body.substr(cut);
    }
    detail::append_sequence(rows.back(), body, line_no);
    if (rows.back().size() > s)
      throw InputError(InputErrorKind::unequal_lengths, line_no,
                       fmt::format("unequal sequence lengths ({} vs {}) for '{}'", s, rows.back().size(),
                                   taxa.back()));
  }
  return detail::with_record_lines(lines, taxa, [&] { return Alignment(taxa, rows); });
}

// Minimal NEXUS reader: the MATRIX block of a DATA or CHARACTERS block, one
// line per taxon (non-interleaved).
inline Alignment parse_nexus(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool in_matrix = false;
  std::vector<std::string> taxa, rows;
  std::vector<std::size_t> lines;
  std::unordered_set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view body = detail::trim(line);
    if (body.empty() || body.front() == '[') continue;
    std::string lower(body);
    for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (!in_matrix) {
      if (lower.rfind("matrix", 0) == 0) in_matrix = true;
      continue;
    }
    bool last = false;
    if (body.front() == ';') break;
    if (body.back() == ';') {
      body = detail::trim(body.substr(0, body.size() - 1));
      last = true;
    }
    if (!body.empty()) {
      std::string name;
      std::string_view rest;
      if (body.front() == '\'') {
        std::size_t close = body.find('\'', 1);
        if (close == std::string_view::npos)
          throw InputError(InputErrorKind::malformed, line_no, "unterminated quoted taxon name");
        name = std::string(body.substr(1, close - 1));
        rest = body.substr(close + 1);
      } else {
        std::size_t cut = body.find_first_of(" \t");
        name = std::string(body.substr(0, cut));
        rest = cut == std::string_view::npos ? std::string_view{} : body.substr(cut);
      }
      if (!seen.insert(name).second)
        throw InputError(InputErrorKind::duplicate_taxon, line_no, fmt::format("duplicate taxon name '{}'", name));
      taxa.push_back(name);
      rows.emplace_back();
      lines.push_back(line_no);
      detail::append_sequence(rows.back(), rest, line_no);
    }
    if (last) break;
  }
  if (taxa.empty()) throw InputError(InputErrorKind::empty_input, 0, "NEXUS input has no MATRIX rows");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size())
      throw InputError(InputErrorKind::unequal_lengths, lines[i],
                       fmt::format("unequal sequence lengths ({} vs {}) for '{}'", rows[0].size(), rows[i].size(),
                                   taxa[i]));
  }
  return detail::with_record_lines(lines, taxa, [&] { return Alignment(taxa, rows); });
}

// Dispatches on content: '>' starts FASTA, '#NEXUS' starts NEXUS, anything
// else is read as sequential PHYLIP.
inline Alignment parse_alignment(std::string_view text) {
  std::string_view head = detail::trim(text);
  if (head.empty()) throw InputError(InputErrorKind::empty_input, 0, "empty input");
  if (head.front() == '>') return parse_fasta(text);
  if (head.size() >= 6) {
    std::string tag(head.substr(0, 6));
    for (char& c : tag) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (tag == "#NEXUS") return parse_nexus(text);
  }
  return parse_phylip(text);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(InputErrorKind::malformed, 0, fmt::format("cannot open '{}'", path));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Alignment read_alignment(const std::string& path) { return parse_alignment(read_file(path)); }

// Uppercase records wrapped at 60 columns.
inline std::string write_fasta(const Alignment& aln) {
  std::string out;
  for (std::size_t i = 0; i < aln.taxon_count(); ++i) {
    out += '>';
    out += aln.taxa()[i];
    out += '\n';
    const std::string& row = aln.rows()[i];
    for (std::size_t p = 0; p < row.size(); p += 60) {
      out.append(row, p, 60);
      out += '\n';
    }
  }
  return out;
}

}  // namespace phylosmc
