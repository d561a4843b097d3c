#pragma once

// Automatic translation quality metrics: corpus BLEU (single reference,
// case-sensitive, punctuation included, no smoothing), word error rate, and
// BLEU / negative WER broken down by source sentence length.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmtdesk/corpus.hpp"
#include "nmtdesk/error.hpp"
#include "nmtdesk/text.hpp"

namespace nmtdesk {

inline constexpr int kBleuOrder = 4;

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, std::size_t>;

/// All contiguous n-token subsequences of s with multiplicity.
inline NgramCounts ngram_counts(const std::vector<std::string>& s, std::size_t n) {
  if (n == 0) fail(ErrorKind::kUsage, "n-gram order must be >= 1");
  NgramCounts counts;
  if (s.size() < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++counts[Ngram(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

inline NgramCounts ngram_counts(const Sentence& s, std::size_t n) { return ngram_counts(s.tokens, n); }

/// Sufficient statistics for corpus BLEU; sums over sentences.
struct BleuStats {
  std::array<std::uint64_t, kBleuOrder> matches{};
  std::array<std::uint64_t, kBleuOrder> totals{};
  std::uint64_t hyp_len = 0;
  std::uint64_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o) {
    for (int n = 0; n < kBleuOrder; ++n) {
      matches[n] += o.matches[n];
      totals[n] += o.totals[n];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
  }
};

/// Clipped n-gram matches of one hypothesis against its reference.
inline BleuStats sentence_bleu_stats(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  BleuStats st;
  st.hyp_len = hyp.size();
  st.ref_len = ref.size();
  for (int n = 1; n <= kBleuOrder; ++n) {
    const NgramCounts h = ngram_counts(hyp, n);
    const NgramCounts r = ngram_counts(ref, n);
    std::uint64_t matched = 0;
    for (const auto& [gram, count] : h) {
      if (auto it = r.find(gram); it != r.end()) matched += std::min(count, it->second);
    }
    st.matches[n - 1] = matched;
    st.totals[n - 1] = hyp.size() >= static_cast<std::size_t>(n) ? hyp.size() - n + 1 : 0;
  }
  return st;
}

struct BleuReport {
  double bleu = 0.0;  // 0..100
  std::array<double, kBleuOrder> precisions{};
  double brevity_penalty = 1.0;
  std::uint64_t hyp_len = 0;
  std::uint64_t ref_len = 0;
};

/// BP = exp(1 - r/c) for c < r. An empty hypothesis side counts as length 1
/// in the ratio so BP stays positive; its BLEU is 0 regardless.
inline BleuReport bleu_from_stats(const BleuStats& st) {
  BleuReport r;
  r.hyp_len = st.hyp_len;
  r.ref_len = st.ref_len;
  bool any_zero = false;
  double log_sum = 0.0;
  for (int n = 0; n < kBleuOrder; ++n) {
    r.precisions[n] = st.totals[n] == 0 ? 0.0 : static_cast<double>(st.matches[n]) / static_cast<double>(st.totals[n]);
    if (r.precisions[n] <= 0.0) {
      any_zero = true;
    } else {
      log_sum += std::log(r.precisions[n]);
    }
  }
  if (st.hyp_len < st.ref_len) {
    const double c = static_cast<double>(std::max<std::uint64_t>(st.hyp_len, 1));
    r.brevity_penalty = std::exp(1.0 - static_cast<double>(st.ref_len) / c);
  }
  r.bleu = any_zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / kBleuOrder);
  return r;
}

inline BleuReport bleu_corpus(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs) {
  if (hyps.size() != refs.size()) {
    fail(ErrorKind::kLengthMismatch, std::to_string(hyps.size()) + " hypotheses vs " + std::to_string(refs.size()) +
                                         " references");
  }
  if (hyps.empty()) fail(ErrorKind::kEmptyCorpus, "BLEU needs at least one sentence");
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += sentence_bleu_stats(hyps[i].tokens, refs[i].tokens);
  return bleu_from_stats(total);
}

/// Moses-style one-line summary, e.g.
/// "BLEU = 45.64, 78.1/52.3/38.0/28.2 (BP=1.000, ratio=1.012, hyp_len=..., ref_len=...)".
inline std::string format_bleu(const BleuReport& r) {
  char buf[256];
  const double ratio = r.ref_len == 0 ? 0.0 : static_cast<double>(r.hyp_len) / static_cast<double>(r.ref_len);
  std::snprintf(buf, sizeof buf, "BLEU = %.2f, %.1f/%.1f/%.1f/%.1f (BP=%.3f, ratio=%.3f, hyp_len=%llu, ref_len=%llu)",
                r.bleu, 100 * r.precisions[0], 100 * r.precisions[1], 100 * r.precisions[2], 100 * r.precisions[3],
                r.brevity_penalty, ratio, static_cast<unsigned long long>(r.hyp_len),
                static_cast<unsigned long long>(r.ref_len));
  return buf;
}

// ---------------------------------------------------------------------------
// Word error rate

/// Minimal number of unit-cost insertions, deletions and substitutions
/// turning a into b.
inline std::size_t edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// WER may exceed 1 when the hypothesis is much longer than the reference.
struct WerReport {
  std::uint64_t edits = 0;
  std::uint64_t ref_len = 0;
  double wer = 0.0;
  double neg_wer = 0.0;
};

inline WerReport make_wer_report(std::uint64_t edits, std::uint64_t ref_len) {
  WerReport r;
  r.edits = edits;
  r.ref_len = ref_len;
  r.wer = static_cast<double>(edits) / static_cast<double>(ref_len);
  r.neg_wer = edits == 0 ? 0.0 : -r.wer;  // no negative zero in reports
  return r;
}

inline WerReport wer(const Sentence& hyp, const Sentence& ref) {
  if (ref.empty()) fail(ErrorKind::kEmptyReference, "WER is undefined for an empty reference");
  return make_wer_report(edit_distance(hyp.tokens, ref.tokens), ref.size());
}

/// Micro-average: total edits over total reference tokens.
inline WerReport wer_corpus(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs) {
  if (hyps.size() != refs.size()) {
    fail(ErrorKind::kLengthMismatch, std::to_string(hyps.size()) + " hypotheses vs " + std::to_string(refs.size()) +
                                         " references");
  }
  std::uint64_t edits = 0, ref_len = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    edits += edit_distance(hyps[i].tokens, refs[i].tokens);
    ref_len += refs[i].size();
  }
  if (ref_len == 0) fail(ErrorKind::kEmptyReference, "WER is undefined for empty references");
  return make_wer_report(edits, ref_len);
}

// ---------------------------------------------------------------------------
// Length bins

/// Sorts sentence indices by (source length, original index) and cuts the
/// order into k contiguous groups of floor(N/k) or ceil(N/k) sentences, the
/// larger groups first. Returns the bin index of every sentence.
inline std::vector<std::size_t> assign_length_bins(const std::vector<std::size_t>& source_lengths, std::size_t k = 10) {
  const std::size_t N = source_lengths.size();
  if (k < 1 || N < k) {
    fail(ErrorKind::kTooFewSentences, std::to_string(N) + " sentences cannot fill " + std::to_string(k) + " bins");
  }
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return source_lengths[a] < source_lengths[b]; });
  std::vector<std::size_t> bin(N);
  const std::size_t base = N / k, extra = N % k;
  std::size_t pos = 0;
  for (std::size_t b = 0; b < k; ++b) {
    const std::size_t size = base + (b < extra ? 1 : 0);
    for (std::size_t j = 0; j < size; ++j) bin[order[pos++]] = b;
  }
  return bin;
}

inline std::vector<std::size_t> assign_length_bins(const std::vector<Sentence>& sources, std::size_t k = 10) {
  std::vector<std::size_t> lengths;
  lengths.reserve(sources.size());
  for (const Sentence& s : sources) lengths.push_back(s.size());
  return assign_length_bins(lengths, k);
}

struct LengthBin {
  std::size_t min_len = 0;
  std::size_t max_len = 0;
  std::size_t count = 0;
  double bleu = 0.0;
  double neg_wer = 0.0;
};

struct LengthBinReport {
  std::vector<LengthBin> bins;
};

inline LengthBinReport binned_quality(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs,
                                      const std::vector<Sentence>& sources, std::size_t k = 10) {
  if (hyps.size() != refs.size() || hyps.size() != sources.size()) {
    fail(ErrorKind::kLengthMismatch, "hypotheses, references and sources must be line-aligned");
  }
  const std::vector<std::size_t> bin = assign_length_bins(sources, k);
  std::vector<std::vector<Sentence>> bin_hyps(k), bin_refs(k);
  LengthBinReport report;
  report.bins.resize(k);
  std::vector<bool> seen(k, false);
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const std::size_t b = bin[i];
    bin_hyps[b].push_back(hyps[i]);
    bin_refs[b].push_back(refs[i]);
    LengthBin& lb = report.bins[b];
    const std::size_t len = sources[i].size();
    lb.min_len = seen[b] ? std::min(lb.min_len, len) : len;
    lb.max_len = seen[b] ? std::max(lb.max_len, len) : len;
    seen[b] = true;
    ++lb.count;
  }
  for (std::size_t b = 0; b < k; ++b) {
    report.bins[b].bleu = bleu_corpus(bin_hyps[b], bin_refs[b]).bleu;
    report.bins[b].neg_wer = wer_corpus(bin_hyps[b], bin_refs[b]).neg_wer;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

/// bin_index,min_len,max_len,count,bleu,neg_wer with BLEU to two decimals.
inline std::string length_bins_csv(const LengthBinReport& r) {
  std::string out = "bin_index,min_len,max_len,count,bleu,neg_wer\n";
  for (std::size_t b = 0; b < r.bins.size(); ++b) {
    const LengthBin& lb = r.bins[b];
    out += std::to_string(b) + ',' + std::to_string(lb.min_len) + ',' + std::to_string(lb.max_len) + ',' +
           std::to_string(lb.count) + ',' + format_fixed(lb.bleu, 2) + ',' + format_fixed(lb.neg_wer, 4) + '\n';
  }
  return out;
}

inline nlohmann::ordered_json to_json(const BleuReport& r) {
  nlohmann::ordered_json j;
  j["bleu"] = r.bleu;
  j["precisions"] = r.precisions;
  j["brevity_penalty"] = r.brevity_penalty;
  j["hyp_len"] = r.hyp_len;
  j["ref_len"] = r.ref_len;
  return j;
}

inline nlohmann::ordered_json to_json(const WerReport& r) {
  nlohmann::ordered_json j;
  j["edits"] = r.edits;
  j["ref_len"] = r.ref_len;
  j["wer"] = r.wer;
  j["neg_wer"] = r.neg_wer;
  return j;
}

inline nlohmann::ordered_json to_json(const LengthBinReport& r) {
  nlohmann::ordered_json bins = nlohmann::ordered_json::array();
  for (std::size_t b = 0; b < r.bins.size(); ++b) {
    const LengthBin& lb = r.bins[b];
    nlohmann::ordered_json j;
    j["bin_index"] = b;
    j["min_len"] = lb.min_len;
    j["max_len"] = lb.max_len;
    j["count"] = lb.count;
    j["bleu"] = lb.bleu;
    j["neg_wer"] = lb.neg_wer;
    bins.push_back(std::move(j));
  }
  nlohmann::ordered_json out;
  out["bins"] = std::move(bins);
  return out;
}

/// Canonical JSON text: two-space indent, fixed field order, trailing newline.
inline std::string canonical_json(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

enum class ReportFormat { kCsv, kJson };

inline void emit_report(const LengthBinReport& r, ReportFormat format, const std::string& path) {
  write_file(path, format == ReportFormat::kCsv ? length_bins_csv(r) : canonical_json(to_json(r)));
}

// ---------------------------------------------------------------------------
// Evaluation protocol for files of detokenized text

struct EvalProtocol {
  bool truecase = true;
  bool position_aware = false;
};

/// Tokenizes detokenized lines for n-gram counting, truecasing them with tc
/// when the protocol asks for it.
inline std::vector<Sentence> prepare_eval_side(const std::vector<std::string>& lines, const Truecaser* tc,
                                               const EvalProtocol& protocol) {
  std::vector<Sentence> out;
  out.reserve(lines.size());
  for (const std::string& line : lines) {
    Sentence s = tokenize(line);
    if (protocol.truecase && tc != nullptr) s = tc->apply(s, protocol.position_aware);
    out.push_back(std::move(s));
  }
  return out;
}

/// Truecasing model for an evaluation run: trained on the reference side.
inline std::optional<Truecaser> eval_truecaser(const std::vector<std::string>& reference_lines) {
  std::vector<Sentence> refs;
  refs.reserve(reference_lines.size());
  for (const std::string& l : reference_lines) refs.push_back(tokenize(l));
  std::vector<const Sentence*> view;
  for (const Sentence& s : refs) view.push_back(&s);
  if (view.empty()) return std::nullopt;
  return Truecaser::train(view);
}

}  // namespace nmtdesk
