#pragma once

// Word-level tokenization, detokenization and truecasing.
//
// Tokens split off a preceding character in the raw text (punctuation glued to
// a word, or a word glued to an opening bracket) carry a `joined` marker, which
// is what lets detokenize() restore the original spacing exactly.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "nmtdesk/error.hpp"

namespace nmtdesk {

struct Sentence {
  std::vector<std::string> tokens;
  /// joined[i] is true when token i had no whitespace before it. Either empty
  /// (spacing unknown, e.g. model output) or the same length as tokens.
  std::vector<bool> joined;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }

  static Sentence from_tokens(std::vector<std::string> tokens) {
    Sentence s;
    s.tokens = std::move(tokens);
    return s;
  }
};

inline bool operator==(const Sentence& a, const Sentence& b) { return a.tokens == b.tokens; }

namespace detail {

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline bool is_split_punct(char c) {
  switch (c) {
    case '.': case ',': case ';': case ':': case '!': case '?':
    case '"': case '(': case ')':
      return true;
    default:
      return false;
  }
}

// Bytes >= 0x80 belong to multi-byte UTF-8 letters; all split punctuation is ASCII.
inline bool is_word_byte(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u >= 0x80 || (u >= '0' && u <= '9') || (u >= 'a' && u <= 'z') || (u >= 'A' && u <= 'Z');
}

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Lowercase mapping for ASCII, Latin-1 Supplement and Latin Extended-A, which
// covers the English, German and French corpora this tool targets.
inline char32_t lower_codepoint(char32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 32;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 32;
  if (cp >= 0x100 && cp <= 0x137 && cp % 2 == 0) return cp + 1;
  if (cp >= 0x139 && cp <= 0x148 && cp % 2 == 1) return cp + 1;
  if (cp >= 0x14A && cp <= 0x177 && cp % 2 == 0) return cp + 1;
  if (cp == 0x178) return 0xFF;
  if (cp >= 0x179 && cp <= 0x17E && cp % 2 == 1) return cp + 1;
  return cp;
}

}  // namespace detail

/// Lowercases a UTF-8 string. Malformed sequences are copied through bytewise.
inline std::string utf8_lower(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    char32_t cp = b0;
    if (b0 >= 0xC0 && b0 < 0xE0) { len = 2; cp = b0 & 0x1F; }
    else if (b0 >= 0xE0 && b0 < 0xF0) { len = 3; cp = b0 & 0x0F; }
    else if (b0 >= 0xF0 && b0 < 0xF8) { len = 4; cp = b0 & 0x07; }
    bool ok = i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) ok = false;
      cp = (cp << 6) | (b & 0x3F);
    }
    if (!ok || (len == 1 && b0 >= 0x80)) {
      out.push_back(s[i]);
      ++i;
      continue;
    }
    detail::append_utf8(out, detail::lower_codepoint(cp));
    i += len;
  }
  return out;
}

/// Splits on whitespace and detaches . , ; : ! ? " ( ) as separate tokens.
/// A '.' or ',' between two word characters stays inside the word (3.5, 1,000).
/// Hyphens and apostrophes are never split.
inline Sentence tokenize(std::string_view text) {
  Sentence out;
  auto emit = [&out](std::string token, bool joined) {
    out.tokens.push_back(std::move(token));
    out.joined.push_back(joined);
  };

  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && detail::is_space(text[pos])) ++pos;
    std::size_t end = pos;
    while (end < text.size() && !detail::is_space(text[end])) ++end;
    const std::string_view chunk = text.substr(pos, end - pos);

    std::string word;
    std::size_t word_start = 0;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const char c = chunk[i];
      const bool inner_separator = (c == '.' || c == ',') && i > 0 && i + 1 < chunk.size() &&
                                   detail::is_word_byte(chunk[i - 1]) &&
                                   detail::is_word_byte(chunk[i + 1]);
      if (detail::is_split_punct(c) && !inner_separator) {
        if (!word.empty()) emit(std::move(word), word_start > 0);
        word.clear();
        emit(std::string(1, c), i > 0);
        word_start = i + 1;
      } else {
        word.push_back(c);
      }
    }
    if (!word.empty()) emit(std::move(word), word_start > 0);
    pos = end;
  }
  return out;
}

/// Infers joined markers for tokens that lost their spacing information
/// (model output): closing punctuation attaches left, an opening bracket
/// attaches its successor, and double quotes alternate open/close.
inline std::vector<bool> infer_joins(const std::vector<std::string>& tokens) {
  std::vector<bool> joined(tokens.size(), false);
  bool quote_open = false;
  bool attach_next = false;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    bool j = attach_next;
    attach_next = false;
    if (t == "." || t == "," || t == ";" || t == ":" || t == "!" || t == "?" || t == ")") {
      j = true;
    } else if (t == "(") {
      attach_next = true;
    } else if (t == "\"") {
      if (quote_open) {
        j = true;
      } else {
        attach_next = true;
      }
      quote_open = !quote_open;
    }
    joined[i] = i > 0 && j;
  }
  return joined;
}

/// Joins tokens with single spaces except where a token is marked joined.
/// Sentences without markers get them from infer_joins().
inline std::string detokenize(const Sentence& s) {
  const std::vector<bool> joined =
      s.joined.size() == s.tokens.size() ? s.joined : infer_joins(s.tokens);
  std::string out;
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    if (i > 0 && !joined[i]) out.push_back(' ');
    out += s.tokens[i];
  }
  return out;
}

/// Collapses whitespace runs to single spaces and trims both ends.
inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (detail::is_space(c)) {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(c);
    }
  }
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

enum class Side { kSource, kTarget };

/// Sentence-initial truecasing model: each lowercased word maps to its most
/// frequent surface form in the training text.
class Truecaser {
 public:
  Truecaser() = default;

  /// Counts every token of the given sentences. Ties in frequency go to the
  /// lexicographically smallest surface form.
  static Truecaser train(const std::vector<const Sentence*>& sentences) {
    if (sentences.empty()) fail(ErrorKind::kEmptyCorpus, "cannot train a truecaser on no sentences");
    std::map<std::string, std::map<std::string, std::uint64_t>> counts;
    for (const Sentence* s : sentences) {
      for (const std::string& tok : s->tokens) ++counts[utf8_lower(tok)][tok];
    }
    Truecaser tc;
    for (const auto& [key, forms] : counts) {
      // std::map iterates forms in ascending order, so strict > keeps the smallest on ties.
      const std::string* best = nullptr;
      std::uint64_t best_count = 0;
      for (const auto& [form, n] : forms) {
        if (best == nullptr || n > best_count) {
          best = &form;
          best_count = n;
        }
      }
      tc.table_.emplace(key, *best);
    }
    return tc;
  }

  /// Replaces the sentence-initial token by its most frequent form. With
  /// position_aware set, tokens following a sentence-final . ! ? inside the
  /// segment are treated as sentence-initial too. Unknown words are unchanged.
  Sentence apply(const Sentence& s, bool position_aware = false) const {
    Sentence out = s;
    bool initial = true;
    for (std::size_t i = 0; i < out.tokens.size(); ++i) {
      std::string& tok = out.tokens[i];
      if (initial) {
        if (auto it = table_.find(utf8_lower(tok)); it != table_.end()) tok = it->second;
      }
      initial = position_aware && (tok == "." || tok == "!" || tok == "?");
    }
    return out;
  }

  const std::map<std::string, std::string>& table() const { return table_; }
  std::size_t size() const { return table_.size(); }

  /// One "lowercased<TAB>surface" line per entry, sorted by key.
  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : table_) out += k + '\t' + v + '\n';
    return out;
  }

  static Truecaser deserialize(std::string_view text) {
    Truecaser tc;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t nl = text.find('\n', pos);
      if (nl == std::string_view::npos) nl = text.size();
      const std::string_view line = text.substr(pos, nl - pos);
      ++line_no;
      pos = nl + 1;
      if (line.empty()) continue;
      const std::size_t tab = line.find('\t');
      if (tab == std::string_view::npos) {
        fail(ErrorKind::kFormat, "truecaser line " + std::to_string(line_no) + ": missing tab");
      }
      tc.table_.emplace(std::string(line.substr(0, tab)), std::string(line.substr(tab + 1)));
    }
    return tc;
  }

 private:
  std::map<std::string, std::string> table_;
};

}  // namespace nmtdesk
