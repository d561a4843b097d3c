#pragma once

// Greedy and beam-search decoding plus attention-argmax <unk> replacement.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmtdesk/checkpoint.hpp"
#include "nmtdesk/corpus.hpp"
#include "nmtdesk/model.hpp"
#include "nmtdesk/text.hpp"

namespace nmtdesk {

inline constexpr double kDefaultMaxLenFactor = 2.0;

/// Decoded output. ids exclude BOS/EOS; attention has one row per id.
struct Hypothesis {
  TokenIds ids;
  Sentence tokens;  // filled by attach_tokens()
  double score = 0.0;
  RowMatrix attention;  // [|ids| x T_in]
  bool finished = false;  // ended with EOS rather than the length cap
};

struct DecodeOptions {
  double max_len_factor = kDefaultMaxLenFactor;
  /// Overrides the factor-based cap when set.
  std::optional<std::size_t> max_len;
};

/// ceil(factor * T_in) + 5 unless max_len overrides it.
inline std::size_t length_cap(std::size_t source_len, const DecodeOptions& opt) {
  if (opt.max_len) return *opt.max_len;
  return static_cast<std::size_t>(std::ceil(opt.max_len_factor * static_cast<double>(source_len))) + 5;
}

namespace detail {

inline RowMatrix stack_rows(const std::vector<Vec>& rows, Eigen::Index cols) {
  RowMatrix m(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return m;
}

/// Lowest index among the maxima.
inline Eigen::Index argmax_lowest(const Vec& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace detail

inline Hypothesis greedy_decode(const ModelParams& p, const ModelConfig& cfg, const TokenIds& source,
                                const DecodeOptions& opt = {}) {
  const EncoderResult enc = encode_source(source, p, cfg, nullptr);
  const AttentionKeys keys = attention_keys(enc.source_states, p.attention, cfg.attention);
  const std::size_t cap = length_cap(source.size(), opt);
  DecoderState state = initial_decoder_state(enc, cfg);
  Hypothesis h;
  std::vector<Vec> rows;
  TokenId prev = kBosId;
  while (h.ids.size() < cap) {
    DecoderStepResult step = decoder_step(prev, state, enc.source_states, keys, p, cfg, nullptr);
    const Vec logp = log_softmax(step.logits);
    const auto best = static_cast<TokenId>(detail::argmax_lowest(logp));
    h.score += logp[best];
    if (best == kEosId) {
      h.finished = true;
      break;
    }
    h.ids.push_back(best);
    rows.push_back(std::move(step.attn_weights));
    state = std::move(step.state);
    prev = best;
  }
  h.attention = detail::stack_rows(rows, static_cast<Eigen::Index>(source.size()));
  return h;
}

/// Length-capped beam search over summed log-probabilities, without length
/// normalisation. Each step keeps the `beam` best one-token extensions of the
/// live hypotheses (ties: earlier parent, then lower id); extensions ending
/// in EOS move to the finished set. The search stops once the best finished
/// score is at least the best live score, since extending can only lower a
/// score. beam = 1 reproduces greedy_decode.
inline Hypothesis beam_decode(const ModelParams& p, const ModelConfig& cfg, const TokenIds& source, std::size_t beam,
                              const DecodeOptions& opt = {}) {
  if (beam < 1) fail(ErrorKind::kUsage, "beam width must be >= 1");
  const EncoderResult enc = encode_source(source, p, cfg, nullptr);
  const AttentionKeys keys = attention_keys(enc.source_states, p.attention, cfg.attention);
  const std::size_t cap = length_cap(source.size(), opt);
  const auto T = static_cast<Eigen::Index>(source.size());

  struct Live {
    TokenIds ids;
    std::vector<Vec> rows;
    double score = 0.0;
    DecoderState state;
  };
  struct Candidate {
    double score;
    std::size_t parent;
    TokenId token;
  };

  std::vector<Live> live(1);
  live[0].state = initial_decoder_state(enc, cfg);
  std::optional<Hypothesis> best_done;
  auto offer = [&](Hypothesis h) {
    if (!best_done || h.score > best_done->score) best_done = std::move(h);
  };

  for (std::size_t len = 0; !live.empty(); ++len) {
    if (best_done && best_done->score >= live.front().score) break;
    if (len == cap) {
      for (Live& l : live) {
        Hypothesis h;
        h.ids = std::move(l.ids);
        h.score = l.score;
        h.attention = detail::stack_rows(l.rows, T);
        offer(std::move(h));
      }
      break;
    }
    std::vector<DecoderStepResult> steps;
    std::vector<Candidate> cands;
    steps.reserve(live.size());
    for (std::size_t i = 0; i < live.size(); ++i) {
      const TokenId prev = live[i].ids.empty() ? kBosId : live[i].ids.back();
      steps.push_back(decoder_step(prev, live[i].state, enc.source_states, keys, p, cfg, nullptr));
      const Vec logp = log_softmax(steps.back().logits);
      for (Eigen::Index v = 0; v < logp.size(); ++v) {
        cands.push_back({live[i].score + logp[v], i, static_cast<TokenId>(v)});
      }
    }
    const std::size_t keep = std::min(beam, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });
    std::vector<Live> next;
    for (std::size_t k = 0; k < keep; ++k) {
      const Candidate& c = cands[k];
      const Live& parent = live[c.parent];
      if (c.token == kEosId) {
        Hypothesis h;
        h.ids = parent.ids;
        h.score = c.score;
        h.attention = detail::stack_rows(parent.rows, T);
        h.finished = true;
        offer(std::move(h));
        continue;
      }
      Live l;
      l.ids = parent.ids;
      l.ids.push_back(c.token);
      l.rows = parent.rows;
      l.rows.push_back(steps[c.parent].attn_weights);
      l.score = c.score;
      l.state = steps[c.parent].state;
      next.push_back(std::move(l));
    }
    live = std::move(next);
  }
  return std::move(*best_done);
}

/// Sum of step log-probabilities of emitting ids (and EOS when finished)
/// under teacher forcing.
inline double forced_score(const ModelParams& p, const ModelConfig& cfg, const TokenIds& source, const TokenIds& ids,
                           bool finished) {
  const EncoderResult enc = encode_source(source, p, cfg, nullptr);
  const AttentionKeys keys = attention_keys(enc.source_states, p.attention, cfg.attention);
  DecoderState state = initial_decoder_state(enc, cfg);
  double score = 0.0;
  TokenId prev = kBosId;
  const std::size_t n = ids.size() + (finished ? 1 : 0);
  for (std::size_t t = 0; t < n; ++t) {
    DecoderStepResult step = decoder_step(prev, state, enc.source_states, keys, p, cfg, nullptr);
    const TokenId y = t < ids.size() ? ids[t] : kEosId;
    score += log_softmax(step.logits)[y];
    state = std::move(step.state);
    prev = y;
  }
  return score;
}

inline Hypothesis decode(const ModelParams& p, const ModelConfig& cfg, const TokenIds& source, std::size_t beam,
                         const DecodeOptions& opt = {}) {
  return beam <= 1 ? greedy_decode(p, cfg, source, opt) : beam_decode(p, cfg, source, beam, opt);
}

/// Fills h.tokens with target surface forms; unknown words stay as <unk>.
inline void attach_tokens(Hypothesis& h, const Vocabulary& target_vocab) {
  std::vector<std::string> toks;
  toks.reserve(h.ids.size());
  for (TokenId id : h.ids) toks.push_back(target_vocab.token(id));
  h.tokens = Sentence::from_tokens(std::move(toks));
}

/// Replaces each <unk> output token with the source token it attends to most
/// (ties: leftmost source position). Other tokens pass through unchanged.
inline Sentence replace_unk(const Sentence& output, const RowMatrix& attention, const Sentence& source_tokens) {
  if (static_cast<std::size_t>(attention.rows()) != output.size()) {
    fail(ErrorKind::kDimensionMismatch, "attention has " + std::to_string(attention.rows()) + " rows for " +
                                            std::to_string(output.size()) + " output tokens");
  }
  if (static_cast<std::size_t>(attention.cols()) != source_tokens.size()) {
    fail(ErrorKind::kDimensionMismatch, "attention has " + std::to_string(attention.cols()) + " columns for " +
                                            std::to_string(source_tokens.size()) + " source tokens");
  }
  Sentence out = output;
  out.joined.clear();  // replaced words change spacing; let detokenize infer it
  for (std::size_t i = 0; i < out.tokens.size(); ++i) {
    if (out.tokens[i] != unk_token()) continue;
    if (source_tokens.empty()) fail(ErrorKind::kDimensionMismatch, "cannot replace <unk> from an empty source");
    const Vec row = attention.row(static_cast<Eigen::Index>(i)).transpose();
    out.tokens[i] = source_tokens.tokens[static_cast<std::size_t>(detail::argmax_lowest(row))];
  }
  return out;
}

inline Sentence replace_unk(const Hypothesis& h, const Sentence& source_tokens) {
  return replace_unk(h.tokens, h.attention, source_tokens);
}

// ---------------------------------------------------------------------------
// Attention sidecar: one {"rows": [[...]], "src_len": n} object per line.

inline std::string attention_to_json_line(const RowMatrix& a) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(a.cols()));
    for (Eigen::Index c = 0; c < a.cols(); ++c) row[static_cast<std::size_t>(c)] = a(r, c);
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  j["src_len"] = a.cols();
  return j.dump();
}

inline RowMatrix attention_from_json_line(const std::string& line, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
    const auto src_len = j.at("src_len").get<std::size_t>();
    const auto& rows = j.at("rows");
    RowMatrix a(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(src_len));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto row = rows[r].get<std::vector<double>>();
      if (row.size() != src_len) {
        fail(ErrorKind::kFormat, "sidecar line " + std::to_string(line_no) + ": row " + std::to_string(r) +
                                     " has " + std::to_string(row.size()) + " entries, src_len is " +
                                     std::to_string(src_len));
      }
      for (std::size_t c = 0; c < src_len; ++c) a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
    }
    return a;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, "sidecar line " + std::to_string(line_no) + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// File translation

struct TranslateOptions {
  std::size_t beam = 1;
  DecodeOptions decode;
  bool unk_replace = true;
  std::size_t threads = 1;
};

struct Translation {
  std::string text;       // detokenized output line
  Hypothesis hypothesis;  // raw decoder output (tokens may contain <unk>)
};

/// tokenize -> truecase -> encode -> decode -> replace_unk -> detokenize.
/// A blank input line yields a blank output line.
inline Translation translate_line(const ModelBundle& m, const std::string& line, const TranslateOptions& opt) {
  Translation out;
  const Sentence raw = tokenize(line);
  if (raw.empty()) return out;
  const Sentence src = m.src_truecaser.apply(raw);
  out.hypothesis = decode(m.params, m.config, encode(src, m.src_vocab, false), opt.beam, opt.decode);
  attach_tokens(out.hypothesis, m.tgt_vocab);
  // Copied words keep the source's original casing.
  const Sentence final_tokens = opt.unk_replace ? replace_unk(out.hypothesis, raw) : out.hypothesis.tokens;
  out.text = detokenize(final_tokens);
  return out;
}

/// Standalone <unk> replacement for already-decoded text: raw_line is the
/// detokenized decoder output (with <unk> tokens) and attention its sidecar
/// matrix over the tokenized source_line.
inline std::string replace_unk_line(const std::string& raw_line, const RowMatrix& attention,
                                    const std::string& source_line) {
  return detokenize(replace_unk(tokenize(raw_line), attention, tokenize(source_line)));
}

/// Translates every line of source_path into out_path, preserving line
/// alignment. Lines are decoded concurrently; output order is input order.
inline void translate_file(const ModelBundle& m, const std::string& source_path, const std::string& out_path,
                           const TranslateOptions& opt, const std::string& sidecar_path = "") {
  const std::vector<std::string> lines = read_lines(source_path);
  std::vector<Translation> results(lines.size());
  std::vector<std::string> errors(lines.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < lines.size(); i = next++) {
      try {
        results[i] = translate_line(m, lines[i], opt);
      } catch (const Error& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(opt.threads, lines.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) fail(ErrorKind::kFormat, source_path + ":" + std::to_string(i + 1) + ": " + errors[i]);
  }

  std::vector<std::string> out;
  out.reserve(results.size());
  for (const Translation& t : results) out.push_back(t.text);
  write_lines(out_path, out);
  if (!sidecar_path.empty()) {
    std::vector<std::string> side;
    side.reserve(results.size());
    for (const Translation& t : results) side.push_back(attention_to_json_line(t.hypothesis.attention));
    write_lines(sidecar_path, side);
  }
}

}  // namespace nmtdesk
