#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "nmtdesk/error.hpp"
#include "nmtdesk/random.hpp"
#include "nmtdesk/text.hpp"

namespace nmtdesk {

struct SentencePair {
  Sentence source;
  Sentence target;
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  std::string language_pair;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }

  const Sentence& side(std::size_t i, Side s) const {
    return s == Side::kSource ? pairs[i].source : pairs[i].target;
  }
};

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

inline constexpr TokenId kBosId = 0;
inline constexpr TokenId kEosId = 1;
inline constexpr TokenId kBlankId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr std::size_t kNumSpecials = 4;
inline constexpr std::size_t kDefaultVocabLimit = 50000;

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> specials = {"<s>", "</s>", "<blank>", "<unk>"};
  return specials;
}

inline const std::string& unk_token() { return special_tokens()[kUnkId]; }

/// Closed word list: the four specials at ids 0..3, then entries by rank.
class Vocabulary {
 public:
  struct Entry {
    std::string token;
    std::uint64_t count = 0;
  };

  Vocabulary() { rebuild_index(); }

  /// Keeps the size_limit most frequent tokens, ordered by count descending
  /// and then lexicographically. Special token strings are never entries.
  static Vocabulary build(const std::vector<const Sentence*>& sentences, std::size_t size_limit) {
    std::unordered_map<std::string, std::uint64_t> counts;
    for (const Sentence* s : sentences) {
      for (const std::string& tok : s->tokens) ++counts[tok];
    }
    const auto& specials = special_tokens();
    std::vector<Entry> entries;
    entries.reserve(counts.size());
    for (auto& [tok, n] : counts) {
      if (std::find(specials.begin(), specials.end(), tok) != specials.end()) continue;
      entries.push_back({tok, n});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      return a.count != b.count ? a.count > b.count : a.token < b.token;
    });
    if (entries.size() > size_limit) entries.resize(size_limit);
    Vocabulary v;
    v.entries_ = std::move(entries);
    v.size_limit_ = size_limit;
    v.rebuild_index();
    return v;
  }

  std::size_t size() const { return kNumSpecials + entries_.size(); }
  std::size_t size_limit() const { return size_limit_; }
  const std::vector<Entry>& entries() const { return entries_; }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) {
      fail(ErrorKind::kDimensionMismatch, "token id " + std::to_string(id) + " outside vocabulary");
    }
    if (static_cast<std::size_t>(id) < kNumSpecials) return special_tokens()[id];
    return entries_[id - kNumSpecials].token;
  }

  /// Four header lines naming the specials, then "token<TAB>count" per entry.
  std::string serialize() const {
    std::string out;
    for (const std::string& s : special_tokens()) out += s + '\n';
    for (const Entry& e : entries_) out += e.token + '\t' + std::to_string(e.count) + '\n';
    return out;
  }

  static Vocabulary deserialize(std::string_view text) {
    Vocabulary v;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    for (const std::string& expected : special_tokens()) {
      ++line_no;
      if (!std::getline(in, line) || line != expected) {
        fail(ErrorKind::kFormat, "vocabulary header line " + std::to_string(line_no) +
                                     " must be '" + expected + "'");
      }
    }
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const std::size_t tab = line.find('\t');
      if (tab == std::string::npos || tab == 0) {
        fail(ErrorKind::kFormat, "vocabulary line " + std::to_string(line_no) + ": expected token<TAB>count");
      }
      Entry e;
      e.token = line.substr(0, tab);
      try {
        std::size_t used = 0;
        e.count = std::stoull(line.substr(tab + 1), &used);
        if (used != line.size() - tab - 1) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        fail(ErrorKind::kFormat, "vocabulary line " + std::to_string(line_no) + ": bad count");
      }
      v.entries_.push_back(std::move(e));
    }
    v.size_limit_ = v.entries_.size();
    v.rebuild_index();
    return v;
  }

 private:
  void rebuild_index() {
    index_.clear();
    const auto& specials = special_tokens();
    for (std::size_t i = 0; i < specials.size(); ++i) index_[specials[i]] = static_cast<TokenId>(i);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (!index_.emplace(entries_[i].token, static_cast<TokenId>(kNumSpecials + i)).second) {
        fail(ErrorKind::kFormat, "duplicate vocabulary token '" + entries_[i].token + "'");
      }
    }
  }

  std::vector<Entry> entries_;
  std::size_t size_limit_ = 0;
  std::unordered_map<std::string, TokenId> index_;
};

inline std::vector<const Sentence*> side_view(const ParallelCorpus& c, Side side) {
  std::vector<const Sentence*> out;
  out.reserve(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) out.push_back(&c.side(i, side));
  return out;
}

inline Vocabulary build_vocabulary(const ParallelCorpus& c, Side side,
                                   std::size_t size_limit = kDefaultVocabLimit) {
  return Vocabulary::build(side_view(c, side), size_limit);
}

inline Truecaser build_truecaser(const ParallelCorpus& c, Side side) {
  if (c.empty()) fail(ErrorKind::kEmptyCorpus, "cannot build a truecaser from an empty corpus");
  return Truecaser::train(side_view(c, side));
}

inline TokenIds encode(const Sentence& s, const Vocabulary& v, bool add_boundaries) {
  TokenIds ids;
  ids.reserve(s.size() + 2);
  if (add_boundaries) ids.push_back(kBosId);
  for (const std::string& tok : s.tokens) ids.push_back(v.id(tok));
  if (add_boundaries) ids.push_back(kEosId);
  return ids;
}

/// Maps ids back to surface tokens; BOS/EOS/BLANK are dropped, UNK is kept.
inline Sentence decode_ids(const TokenIds& ids, const Vocabulary& v) {
  Sentence s;
  for (TokenId id : ids) {
    if (id == kBosId || id == kEosId || id == kBlankId) continue;
    s.tokens.push_back(v.token(id));
  }
  return s;
}

/// Keeps pairs whose source and target both have at most max_len tokens.
inline ParallelCorpus filter_by_length(const ParallelCorpus& c, std::size_t max_len = 50) {
  ParallelCorpus out;
  out.language_pair = c.language_pair;
  for (const SentencePair& p : c.pairs) {
    if (p.source.size() <= max_len && p.target.size() <= max_len) out.pairs.push_back(p);
  }
  return out;
}

struct CorpusStats {
  std::uint64_t sentence_count = 0;
  std::uint64_t word_count = 0;
  std::uint64_t vocab_size = 0;

  /// Average sentence length in tokens (punctuation included).
  double asl() const {
    return sentence_count == 0 ? 0.0 : static_cast<double>(word_count) / static_cast<double>(sentence_count);
  }
};

inline CorpusStats corpus_stats(const ParallelCorpus& c, Side side) {
  CorpusStats st;
  std::set<std::string> distinct;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Sentence& s = c.side(i, side);
    ++st.sentence_count;
    st.word_count += s.size();
    distinct.insert(s.tokens.begin(), s.tokens.end());
  }
  st.vocab_size = distinct.size();
  return st;
}

/// 583 -> "583", 583000 -> "583K", 10500000 -> "10.5M", 174000000 -> "174M".
inline std::string abbreviate_count(std::uint64_t n) {
  if (n < 1000) return std::to_string(n);
  double value = static_cast<double>(n);
  const char* suffix = "K";
  if (n >= 1000000000ULL) { value /= 1e9; suffix = "G"; }
  else if (n >= 1000000ULL) { value /= 1e6; suffix = "M"; }
  else { value /= 1e3; }
  char buf[32];
  if (value < 100.0) std::snprintf(buf, sizeof buf, "%.1f%s", value, suffix);
  else std::snprintf(buf, sizeof buf, "%.0f%s", value, suffix);
  return buf;
}

struct StatsRow {
  std::string label;
  CorpusStats stats;
};

/// Aligned table with columns Sent. / Words / Voc. / ASL; ASL to one decimal.
inline std::string format_stats_table(const std::vector<StatsRow>& rows, bool exact = false) {
  auto count = [exact](std::uint64_t n) { return exact ? std::to_string(n) : abbreviate_count(n); };
  std::vector<std::vector<std::string>> cells = {{"", "Sent.", "Words", "Voc.", "ASL"}};
  for (const StatsRow& r : rows) {
    char asl[32];
    std::snprintf(asl, sizeof asl, "%.1f", r.stats.asl());
    cells.push_back({r.label, count(r.stats.sentence_count), count(r.stats.word_count),
                     count(r.stats.vocab_size), asl});
  }
  std::vector<std::size_t> width(5, 0);
  for (const auto& row : cells)
    for (std::size_t k = 0; k < row.size(); ++k) width[k] = std::max(width[k], row[k].size());
  std::string out;
  for (const auto& row : cells) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (k == 0) {
        out += row[k] + std::string(width[k] - row[k].size(), ' ');
      } else {
        out += "  " + std::string(width[k] - row[k].size(), ' ') + row[k];
      }
    }
    out += '\n';
  }
  return out;
}

struct CorpusSplit {
  ParallelCorpus train;
  ParallelCorpus dev;
  ParallelCorpus test;
};

/// Seeded shuffle of pair indices, then dev takes the first dev_size, test the
/// next test_size and train the rest. Each part keeps the original corpus order.
inline CorpusSplit split_corpus(const ParallelCorpus& c, std::size_t dev_size = 10000,
                                std::size_t test_size = 10000, std::uint64_t seed = 1) {
  if (dev_size + test_size > c.size()) {
    fail(ErrorKind::kInsufficientData, "dev (" + std::to_string(dev_size) + ") + test (" +
                                           std::to_string(test_size) + ") exceeds corpus size " +
                                           std::to_string(c.size()));
  }
  std::vector<std::size_t> order(c.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  std::vector<std::size_t> dev(order.begin(), order.begin() + dev_size);
  std::vector<std::size_t> test(order.begin() + dev_size, order.begin() + dev_size + test_size);
  std::vector<std::size_t> train(order.begin() + dev_size + test_size, order.end());
  auto gather = [&c](std::vector<std::size_t>& idx) {
    std::sort(idx.begin(), idx.end());
    ParallelCorpus part;
    part.language_pair = c.language_pair;
    for (std::size_t i : idx) part.pairs.push_back(c.pairs[i]);
    return part;
  };
  return {gather(train), gather(dev), gather(test)};
}

// ---------------------------------------------------------------------------
// File I/O

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write '" + path + "'");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) fail(ErrorKind::kIo, "write failed for '" + path + "'");
}

/// Lines of a text file without terminators; a trailing newline does not add
/// an empty final line. CRLF endings are accepted.
inline std::vector<std::string> read_lines(const std::string& path) {
  const std::string text = read_file(path);
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    pos = nl + 1;
  }
  return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::string out;
  for (const std::string& l : lines) out += l + '\n';
  write_file(path, out);
}

/// Reads two line-aligned files. Line counts must match and blank lines are
/// rejected with their line number.
inline ParallelCorpus read_parallel(const std::string& source_path, const std::string& target_path,
                                    std::string language_pair = {}) {
  const auto src = read_lines(source_path);
  const auto tgt = read_lines(target_path);
  if (src.size() != tgt.size()) {
    fail(ErrorKind::kMisaligned, "'" + source_path + "' has " + std::to_string(src.size()) +
                                     " lines but '" + target_path + "' has " + std::to_string(tgt.size()));
  }
  ParallelCorpus c;
  c.language_pair = std::move(language_pair);
  c.pairs.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    SentencePair p{tokenize(src[i]), tokenize(tgt[i])};
    if (p.source.empty() || p.target.empty()) {
      fail(ErrorKind::kFormat, "blank line " + std::to_string(i + 1) + " in '" +
                                   (p.source.empty() ? source_path : target_path) + "'");
    }
    c.pairs.push_back(std::move(p));
  }
  return c;
}

inline void write_parallel(const ParallelCorpus& c, const std::string& source_path,
                           const std::string& target_path) {
  std::vector<std::string> src, tgt;
  for (const SentencePair& p : c.pairs) {
    src.push_back(detokenize(p.source));
    tgt.push_back(detokenize(p.target));
  }
  write_lines(source_path, src);
  write_lines(target_path, tgt);
}

}  // namespace nmtdesk
