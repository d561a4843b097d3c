#pragma once

// Word-level LSTM encoder-decoder with global attention.
//
// Encoder and decoder are stacks of unidirectional LSTMs; the decoder starts
// from the encoder's final (h, c) in every layer. At each target step the top
// decoder state h_t attends over the top encoder states h_s:
//
//   concat : score(h_t, h_s) = v_a . tanh(W_a [h_t; h_s])
//   general: score(h_t, h_s) = h_t . (W_a h_s)
//   a_t = softmax(scores),  ctx_t = sum_s a_t(s) h_s
//   h~_t = tanh(W_c [ctx_t; h_t]),  logits = W_out h~_t + b_out
//
// All gradients are derived by hand in backward(); gradient_check() verifies
// them against central finite differences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nmtdesk/corpus.hpp"
#include "nmtdesk/error.hpp"
#include "nmtdesk/random.hpp"
#include "nmtdesk/scalar_reference.hpp"
#include "nmtdesk/tensor.hpp"

namespace nmtdesk {

enum class AttentionKind { kGeneral, kConcat };

inline std::string to_string(AttentionKind k) { return k == AttentionKind::kConcat ? "concat" : "general"; }

inline AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "concat") return AttentionKind::kConcat;
  if (s == "general") return AttentionKind::kGeneral;
  fail(ErrorKind::kFormat, "unknown attention kind '" + s + "' (expected concat or general)");
}

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t hidden_size = 1000;
  std::size_t embed_size = 1000;
  std::size_t src_vocab = 50000;
  std::size_t tgt_vocab = 50000;
  /// Width of the concat scorer's hidden layer; 0 means hidden_size.
  std::size_t attention_size = 0;
  double dropout = 0.3;
  AttentionKind attention = AttentionKind::kConcat;
  bool input_feeding = false;
  std::size_t max_train_len = 50;

  std::size_t attention_dim() const { return attention_size == 0 ? hidden_size : attention_size; }

  std::size_t decoder_input_size() const { return embed_size + (input_feeding ? hidden_size : 0); }

  void validate() const {
    if (layers < 1) fail(ErrorKind::kShapeMismatch, "layers must be >= 1");
    if (hidden_size < 1 || embed_size < 1) fail(ErrorKind::kShapeMismatch, "hidden_size and embed_size must be >= 1");
    if (src_vocab <= kNumSpecials || tgt_vocab <= kNumSpecials) {
      fail(ErrorKind::kShapeMismatch, "vocabularies must hold more than the four special tokens");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) fail(ErrorKind::kShapeMismatch, "dropout must lie in [0, 1)");
  }

  /// Flat "key = value" lines; apply() accepts the same keys.
  std::string to_key_values() const {
    std::ostringstream out;
    out.precision(17);
    out << "layers = " << layers << '\n'
        << "hidden_size = " << hidden_size << '\n'
        << "embed_size = " << embed_size << '\n'
        << "src_vocab = " << src_vocab << '\n'
        << "tgt_vocab = " << tgt_vocab << '\n'
        << "attention_size = " << attention_size << '\n'
        << "dropout = " << dropout << '\n'
        << "attention_kind = " << to_string(attention) << '\n'
        << "input_feeding = " << (input_feeding ? "true" : "false") << '\n'
        << "max_train_len = " << max_train_len << '\n';
    return out.str();
  }

  /// Applies recognised keys from kv and leaves the others untouched.
  void apply(const std::map<std::string, std::string>& kv);
};

/// Parses "key = value" lines; '#' starts a comment.
inline std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::kFormat, "config line " + std::to_string(line_no) + ": expected key = value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

namespace detail {

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    fail(ErrorKind::kFormat, "config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    fail(ErrorKind::kFormat, "config key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  fail(ErrorKind::kFormat, "config key '" + key + "': expected true/false, got '" + v + "'");
}

}  // namespace detail

inline void ModelConfig::apply(const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "layers") layers = detail::parse_size(k, v);
    else if (k == "hidden_size") hidden_size = detail::parse_size(k, v);
    else if (k == "embed_size") embed_size = detail::parse_size(k, v);
    else if (k == "src_vocab") src_vocab = detail::parse_size(k, v);
    else if (k == "tgt_vocab") tgt_vocab = detail::parse_size(k, v);
    else if (k == "attention_size") attention_size = detail::parse_size(k, v);
    else if (k == "dropout") dropout = detail::parse_real(k, v);
    else if (k == "attention_kind") attention = parse_attention_kind(v);
    else if (k == "input_feeding") input_feeding = detail::parse_bool(k, v);
    else if (k == "max_train_len") max_train_len = detail::parse_size(k, v);
  }
}

// ---------------------------------------------------------------------------
// Parameters

/// Gate rows are ordered (input, forget, cell, output), H rows each.
struct LstmParams {
  Tensor w_x;  // [4H x E_in]
  Tensor w_h;  // [4H x H]
  Tensor b;    // [4H]
};

struct AttentionParams {
  Tensor w_a;  // concat: [A x 2H] over [h_t; h_s]; general: [H x H]
  Tensor v_a;  // concat: [A]; empty for general
  Tensor w_c;  // [H x 2H] over [ctx; h_t]
};

struct ModelParams {
  Tensor src_embed;  // [V_src x E]
  Tensor tgt_embed;  // [V_tgt x E]
  std::vector<LstmParams> encoder;
  std::vector<LstmParams> decoder;
  AttentionParams attention;
  Tensor out_w;  // [V_tgt x H]
  Tensor out_b;  // [V_tgt]
};

/// Gradients share the parameter layout.
using Gradients = ModelParams;

/// Visits every tensor with a stable name, in a fixed order. Empty tensors
/// (v_a under general attention) are skipped.
template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  fn(std::string("src_embed"), p.src_embed);
  fn(std::string("tgt_embed"), p.tgt_embed);
  auto stack = [&fn](const std::string& prefix, auto& layers) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string base = prefix + "." + std::to_string(l) + ".";
      fn(base + "w_x", layers[l].w_x);
      fn(base + "w_h", layers[l].w_h);
      fn(base + "b", layers[l].b);
    }
  };
  stack("encoder", p.encoder);
  stack("decoder", p.decoder);
  fn(std::string("attention.w_a"), p.attention.w_a);
  if (!p.attention.v_a.empty()) fn(std::string("attention.v_a"), p.attention.v_a);
  fn(std::string("attention.w_c"), p.attention.w_c);
  fn(std::string("output.w"), p.out_w);
  fn(std::string("output.b"), p.out_b);
}

/// Zero-filled parameters with the shapes implied by cfg.
inline ModelParams zero_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t H = cfg.hidden_size, E = cfg.embed_size;
  ModelParams p;
  p.src_embed = Tensor({cfg.src_vocab, E});
  p.tgt_embed = Tensor({cfg.tgt_vocab, E});
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t enc_in = l == 0 ? E : H;
    const std::size_t dec_in = l == 0 ? cfg.decoder_input_size() : H;
    p.encoder.push_back({Tensor({4 * H, enc_in}), Tensor({4 * H, H}), Tensor({4 * H})});
    p.decoder.push_back({Tensor({4 * H, dec_in}), Tensor({4 * H, H}), Tensor({4 * H})});
  }
  if (cfg.attention == AttentionKind::kConcat) {
    p.attention.w_a = Tensor({cfg.attention_dim(), 2 * H});
    p.attention.v_a = Tensor({cfg.attention_dim()});
  } else {
    p.attention.w_a = Tensor({H, H});
  }
  p.attention.w_c = Tensor({H, 2 * H});
  p.out_w = Tensor({cfg.tgt_vocab, H});
  p.out_b = Tensor({cfg.tgt_vocab});
  return p;
}

/// Uniform [-scale, scale] for every parameter, then forget-gate biases set to +1.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.1) {
  ModelParams p = zero_params(cfg);
  Rng rng(seed);
  for_each_tensor(p, [&](const std::string&, Tensor& t) {
    for (double& v : t.data) v = rng.uniform(-scale, scale);
  });
  const std::size_t H = cfg.hidden_size;
  for (auto* stack : {&p.encoder, &p.decoder}) {
    for (LstmParams& layer : *stack) layer.b.vec().segment(static_cast<Eigen::Index>(H), static_cast<Eigen::Index>(H)).setOnes();
  }
  return p;
}

/// Closed-form parameter count; equals the total size of zero_params(cfg).
inline std::uint64_t param_count(const ModelConfig& cfg) {
  const std::uint64_t H = cfg.hidden_size, E = cfg.embed_size, L = cfg.layers;
  const std::uint64_t Vs = cfg.src_vocab, Vt = cfg.tgt_vocab, A = cfg.attention_dim();
  auto lstm = [H](std::uint64_t in) { return 4 * H * in + 4 * H * H + 4 * H; };
  std::uint64_t n = (Vs + Vt) * E;
  n += lstm(E) + (L - 1) * lstm(H);
  n += lstm(E + (cfg.input_feeding ? H : 0)) + (L - 1) * lstm(H);
  n += cfg.attention == AttentionKind::kConcat ? A * 2 * H + A : H * H;
  n += H * 2 * H;
  n += Vt * H + Vt;
  return n;
}

inline Gradients zero_like(const ModelParams& p) {
  Gradients g = p;
  for_each_tensor(g, [](const std::string&, Tensor& t) { t.set_zero(); });
  return g;
}

inline bool same_shapes(const ModelParams& a, const ModelParams& b) {
  std::vector<std::vector<std::size_t>> sa, sb;
  for_each_tensor(a, [&](const std::string&, const Tensor& t) { sa.push_back(t.shape); });
  for_each_tensor(b, [&](const std::string&, const Tensor& t) { sb.push_back(t.shape); });
  return sa == sb;
}

/// g += other, tensor by tensor.
inline void accumulate(Gradients& g, const Gradients& other) {
  std::vector<const Tensor*> src;
  for_each_tensor(other, [&](const std::string&, const Tensor& t) { src.push_back(&t); });
  std::size_t k = 0;
  for_each_tensor(g, [&](const std::string&, Tensor& t) { t.vec() += src[k++]->vec(); });
}

// ---------------------------------------------------------------------------
// Verification hook: backward() can drop one gradient term so that tests can
// confirm gradient_check() notices the damage.

enum class GradientTerm {
  kNone,
  kInputGate,
  kForgetGate,
  kCellGate,
  kOutputGate,
  kRecurrent,
  kAttentionScore,
  kAttentionContext,
  kCombination,
  kOutputProjection,
  kEmbedding,
};

struct BackwardOptions {
  GradientTerm zeroed_term = GradientTerm::kNone;
};

// ---------------------------------------------------------------------------
// LSTM cell

struct LstmCache {
  Vec x, h_prev, c_prev;
  Vec i, f, g, o;
  Vec c, tanh_c;
};

struct LstmStep {
  Vec h;
  Vec c;
  LstmCache cache;
};

inline LstmStep lstm_cell_forward(const Vec& x, const Vec& h, const Vec& c, const LstmParams& p) {
  const auto H = static_cast<Eigen::Index>(p.w_h.cols());
  if (p.w_h.rows() != static_cast<std::size_t>(4 * H) || p.w_x.rows() != p.w_h.rows() ||
      p.b.size() != p.w_h.rows()) {
    fail(ErrorKind::kShapeMismatch, "inconsistent LSTM parameter shapes " + shape_string(p.w_x.shape) + ", " +
                                        shape_string(p.w_h.shape) + ", " + shape_string(p.b.shape));
  }
  require_size(x, static_cast<Eigen::Index>(p.w_x.cols()), "LSTM input");
  require_size(h, H, "LSTM hidden state");
  require_size(c, H, "LSTM cell state");

  const Vec pre = p.w_x.mat() * x + p.w_h.mat() * h + p.b.vec();
  LstmStep step;
  LstmCache& k = step.cache;
  k.x = x;
  k.h_prev = h;
  k.c_prev = c;
  k.i = pre.segment(0, H).unaryExpr(&sigmoid);
  k.f = pre.segment(H, H).unaryExpr(&sigmoid);
  k.g = pre.segment(2 * H, H).array().tanh().matrix();
  k.o = pre.segment(3 * H, H).unaryExpr(&sigmoid);
  k.c = (k.f.array() * c.array() + k.i.array() * k.g.array()).matrix();
  k.tanh_c = k.c.array().tanh().matrix();
  step.c = k.c;
  step.h = (k.o.array() * k.tanh_c.array()).matrix();
  return step;
}

struct LstmGrad {
  Vec dx, dh_prev, dc_prev;
};

/// Accumulates parameter gradients into g and returns input/state gradients.
inline LstmGrad lstm_cell_backward(const LstmCache& k, const LstmParams& p, const Vec& dh, const Vec& dc,
                                   LstmParams& g, const BackwardOptions& opt = {}) {
  const auto H = k.c.size();
  const Vec d_o = (dh.array() * k.tanh_c.array()).matrix();
  const Vec dc_total = (dc.array() + dh.array() * k.o.array() * (1.0 - k.tanh_c.array().square())).matrix();
  Vec da(4 * H);
  da.segment(0, H) = (dc_total.array() * k.g.array() * k.i.array() * (1.0 - k.i.array())).matrix();
  da.segment(H, H) = (dc_total.array() * k.c_prev.array() * k.f.array() * (1.0 - k.f.array())).matrix();
  da.segment(2 * H, H) = (dc_total.array() * k.i.array() * (1.0 - k.g.array().square())).matrix();
  da.segment(3 * H, H) = (d_o.array() * k.o.array() * (1.0 - k.o.array())).matrix();
  switch (opt.zeroed_term) {
    case GradientTerm::kInputGate: da.segment(0, H).setZero(); break;
    case GradientTerm::kForgetGate: da.segment(H, H).setZero(); break;
    case GradientTerm::kCellGate: da.segment(2 * H, H).setZero(); break;
    case GradientTerm::kOutputGate: da.segment(3 * H, H).setZero(); break;
    default: break;
  }

  g.w_x.mat().noalias() += da * k.x.transpose();
  g.w_h.mat().noalias() += da * k.h_prev.transpose();
  g.b.vec() += da;

  LstmGrad out;
  out.dx = p.w_x.mat().transpose() * da;
  out.dh_prev = p.w_h.mat().transpose() * da;
  out.dc_prev = (dc_total.array() * k.f.array()).matrix();
  if (opt.zeroed_term == GradientTerm::kRecurrent) out.dh_prev.setZero();
  return out;
}

// ---------------------------------------------------------------------------
// Attention

/// Per-sentence precomputation. For concat attention keys holds W_as h_s for
/// every source position (rows); general attention needs nothing.
struct AttentionKeys {
  RowMatrix keys;  // [T x A]
};

inline void check_attention_shapes(const AttentionParams& p, AttentionKind kind, Eigen::Index H) {
  const auto Hs = static_cast<std::size_t>(H);
  bool ok = p.w_c.rows() == Hs && p.w_c.cols() == 2 * Hs;
  if (kind == AttentionKind::kConcat) {
    ok = ok && p.w_a.cols() == 2 * Hs && p.v_a.size() == p.w_a.rows();
  } else {
    ok = ok && p.w_a.rows() == Hs && p.w_a.cols() == Hs;
  }
  if (!ok) fail(ErrorKind::kShapeMismatch, "attention parameters do not match hidden size " + std::to_string(H));
}

inline AttentionKeys attention_keys(const RowMatrix& source_states, const AttentionParams& p, AttentionKind kind) {
  AttentionKeys k;
  if (kind == AttentionKind::kConcat) {
    const auto H = source_states.cols();
    k.keys = source_states * p.w_a.mat().rightCols(H).transpose();
  }
  return k;
}

struct AttentionCache {
  Vec h_t;
  RowMatrix u;  // concat: tanh activations [T x A]
  Vec query;    // general: W_a^T h_t
  Vec weights;
  Vec context;
  Vec h_tilde;
};

struct AttentionResult {
  Vec weights;
  Vec context;
  Vec h_tilde;
  AttentionCache cache;
};

inline AttentionResult attention_step(const Vec& h_t, const RowMatrix& source_states, const AttentionKeys& keys,
                                      const AttentionParams& p, AttentionKind kind) {
  const auto T = source_states.rows();
  const auto H = source_states.cols();
  if (T < 1) fail(ErrorKind::kShapeMismatch, "attention over an empty source");
  require_size(h_t, H, "attention query");
  check_attention_shapes(p, kind, H);

  AttentionResult r;
  AttentionCache& c = r.cache;
  c.h_t = h_t;
  Vec scores(T);
  if (kind == AttentionKind::kConcat) {
    const Vec qa = p.w_a.mat().leftCols(H) * h_t;
    c.u = (keys.keys.rowwise() + qa.transpose()).array().tanh().matrix();
    scores = c.u * p.v_a.vec();
  } else {
    c.query = p.w_a.mat().transpose() * h_t;
    scores = source_states * c.query;
  }
  c.weights = softmax(scores);
  c.context = source_states.transpose() * c.weights;
  Vec cat(2 * H);
  cat << c.context, h_t;
  c.h_tilde = (p.w_c.mat() * cat).array().tanh().matrix();
  r.weights = c.weights;
  r.context = c.context;
  r.h_tilde = c.h_tilde;
  return r;
}

inline AttentionResult attention_step(const Vec& h_t, const RowMatrix& source_states, const AttentionParams& p,
                                      AttentionKind kind) {
  if (source_states.rows() < 1) fail(ErrorKind::kShapeMismatch, "attention over an empty source");
  check_attention_shapes(p, kind, source_states.cols());
  return attention_step(h_t, source_states, attention_keys(source_states, p, kind), p, kind);
}

// ---------------------------------------------------------------------------
// Encoder

namespace detail {

inline Vec dropout_mask(Eigen::Index n, double rate, Rng& rng) {
  Vec m(n);
  const double keep = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < n; ++i) m[i] = rng.bernoulli(rate) ? 0.0 : keep;
  return m;
}

inline void check_ids(const TokenIds& ids, std::size_t vocab, const char* what) {
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      fail(ErrorKind::kShapeMismatch, std::string(what) + " id " + std::to_string(id) + " outside vocabulary of " +
                                          std::to_string(vocab));
    }
  }
}

}  // namespace detail

struct EncoderCache {
  TokenIds ids;
  std::vector<std::vector<LstmCache>> cells;  // [layer][t]
  std::vector<std::vector<Vec>> masks;        // [layer][t]; empty when no dropout
};

struct EncoderResult {
  RowMatrix source_states;  // [T x H], top-layer hidden states
  std::vector<Vec> final_h;
  std::vector<Vec> final_c;
  EncoderCache cache;
};

/// rng is non-null only in training mode with dropout active.
inline EncoderResult encode_source(const TokenIds& ids, const ModelParams& p, const ModelConfig& cfg, Rng* rng) {
  if (ids.empty()) fail(ErrorKind::kEmptyInput, "encoder input is empty");
  detail::check_ids(ids, p.src_embed.rows(), "source");
  const auto H = static_cast<Eigen::Index>(cfg.hidden_size);
  const std::size_t T = ids.size(), L = p.encoder.size();
  const bool drop = rng != nullptr && cfg.dropout > 0.0;

  EncoderResult r;
  r.cache.ids = ids;
  r.cache.cells.assign(L, {});
  r.cache.masks.assign(L, {});
  r.source_states.resize(static_cast<Eigen::Index>(T), H);
  std::vector<Vec> h(L, Vec::Zero(H)), c(L, Vec::Zero(H));
  for (std::size_t t = 0; t < T; ++t) {
    Vec input = p.src_embed.row(static_cast<std::size_t>(ids[t]));
    for (std::size_t l = 0; l < L; ++l) {
      if (l > 0 && drop) {
        Vec m = detail::dropout_mask(H, cfg.dropout, *rng);
        input = (input.array() * m.array()).matrix();
        r.cache.masks[l].push_back(std::move(m));
      }
      LstmStep step = lstm_cell_forward(input, h[l], c[l], p.encoder[l]);
      h[l] = step.h;
      c[l] = step.c;
      r.cache.cells[l].push_back(std::move(step.cache));
      input = h[l];
    }
    r.source_states.row(static_cast<Eigen::Index>(t)) = h[L - 1].transpose();
  }
  r.final_h = std::move(h);
  r.final_c = std::move(c);
  return r;
}

inline EncoderResult encoder_forward(const TokenIds& ids, const ModelParams& p, const ModelConfig& cfg,
                                     bool train_mode, std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  return encode_source(ids, p, cfg, train_mode && cfg.dropout > 0.0 ? &rng : nullptr);
}

// ---------------------------------------------------------------------------
// Decoder

struct DecoderState {
  std::vector<Vec> h;
  std::vector<Vec> c;
  Vec feed;  // previous h_tilde (input feeding), zero before the first step
};

inline DecoderState initial_decoder_state(const EncoderResult& enc, const ModelConfig& cfg) {
  DecoderState s{enc.final_h, enc.final_c, Vec::Zero(static_cast<Eigen::Index>(cfg.hidden_size))};
  return s;
}

struct DecoderStepCache {
  TokenId y_prev = 0;
  std::vector<LstmCache> cells;  // per layer
  std::vector<Vec> masks;        // per layer (index 0 unused); empty without dropout
  AttentionCache attention;
};

struct DecoderStepResult {
  Vec logits;
  DecoderState state;
  Vec attn_weights;
  DecoderStepCache cache;
};

inline DecoderStepResult decoder_step(TokenId y_prev, const DecoderState& state, const RowMatrix& source_states,
                                      const AttentionKeys& keys, const ModelParams& p, const ModelConfig& cfg,
                                      Rng* rng) {
  const auto H = static_cast<Eigen::Index>(cfg.hidden_size);
  const auto E = static_cast<Eigen::Index>(cfg.embed_size);
  const std::size_t L = p.decoder.size();
  if (state.h.size() != L || state.c.size() != L) {
    fail(ErrorKind::kShapeMismatch, "decoder state has " + std::to_string(state.h.size()) + " layers, model has " +
                                        std::to_string(L));
  }
  if (y_prev < 0 || static_cast<std::size_t>(y_prev) >= p.tgt_embed.rows()) {
    fail(ErrorKind::kShapeMismatch, "target id " + std::to_string(y_prev) + " outside vocabulary");
  }
  const bool drop = rng != nullptr && cfg.dropout > 0.0;

  DecoderStepResult r;
  r.cache.y_prev = y_prev;
  r.state.h.resize(L);
  r.state.c.resize(L);
  if (drop) r.cache.masks.resize(L);

  Vec input(cfg.decoder_input_size());
  input.head(E) = p.tgt_embed.row(static_cast<std::size_t>(y_prev));
  if (cfg.input_feeding) {
    require_size(state.feed, H, "input-feeding vector");
    input.tail(H) = state.feed;
  }
  for (std::size_t l = 0; l < L; ++l) {
    if (l > 0 && drop) {
      Vec m = detail::dropout_mask(H, cfg.dropout, *rng);
      input = (input.array() * m.array()).matrix();
      r.cache.masks[l] = std::move(m);
    }
    LstmStep step = lstm_cell_forward(input, state.h[l], state.c[l], p.decoder[l]);
    r.state.h[l] = step.h;
    r.state.c[l] = step.c;
    r.cache.cells.push_back(std::move(step.cache));
    input = r.state.h[l];
  }
  AttentionResult att = attention_step(r.state.h[L - 1], source_states, keys, p.attention, cfg.attention);
  r.logits = p.out_w.mat() * att.h_tilde + p.out_b.vec();
  r.state.feed = att.h_tilde;
  r.attn_weights = att.weights;
  r.cache.attention = std::move(att.cache);
  return r;
}

inline DecoderStepResult decoder_step(TokenId y_prev, const DecoderState& state, const RowMatrix& source_states,
                                      const ModelParams& p, const ModelConfig& cfg, bool train_mode,
                                      std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  return decoder_step(y_prev, state, source_states, attention_keys(source_states, p.attention, cfg.attention), p,
                      cfg, train_mode && cfg.dropout > 0.0 ? &rng : nullptr);
}

// ---------------------------------------------------------------------------
// Loss

struct ForwardCache {
  bool valid = false;
  EncoderCache encoder;
  RowMatrix source_states;
  std::vector<DecoderStepCache> steps;
  std::vector<TokenId> gold;
  std::vector<Vec> probs;
};

struct ForwardResult {
  double nll_sum = 0.0;
  std::size_t token_count = 0;
  ForwardCache cache;
};

/// Teacher-forced negative log-likelihood. The decoder reads BOS + target and
/// is scored against target + EOS, so token_count = |target| + 1.
inline ForwardResult forward_loss(const TokenIds& source, const TokenIds& target, const ModelParams& p,
                                  const ModelConfig& cfg, bool train_mode, std::uint64_t rng_seed) {
  if (target.empty()) fail(ErrorKind::kEmptyInput, "target sentence is empty");
  detail::check_ids(target, p.tgt_embed.rows(), "target");
  Rng rng(rng_seed);
  Rng* drop_rng = train_mode && cfg.dropout > 0.0 ? &rng : nullptr;

  ForwardResult r;
  EncoderResult enc = encode_source(source, p, cfg, drop_rng);
  const AttentionKeys keys = attention_keys(enc.source_states, p.attention, cfg.attention);
  DecoderState state = initial_decoder_state(enc, cfg);
  ForwardCache& fc = r.cache;
  const std::size_t n = target.size() + 1;
  fc.steps.reserve(n);
  fc.probs.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    const TokenId y_prev = t == 0 ? kBosId : target[t - 1];
    const TokenId gold = t < target.size() ? target[t] : kEosId;
    DecoderStepResult step = decoder_step(y_prev, state, enc.source_states, keys, p, cfg, drop_rng);
    const Vec logp = log_softmax(step.logits);
    r.nll_sum -= logp[gold];
    fc.probs.push_back(logp.array().exp().matrix());
    fc.gold.push_back(gold);
    fc.steps.push_back(std::move(step.cache));
    state = std::move(step.state);
  }
  r.token_count = n;
  if (!std::isfinite(r.nll_sum)) fail(ErrorKind::kNonFiniteLoss, "loss is not finite");
  fc.encoder = std::move(enc.cache);
  fc.source_states = std::move(enc.source_states);
  fc.valid = true;
  return r;
}

// ---------------------------------------------------------------------------
// Backward

/// Adds the gradient of the cached forward pass's nll_sum into g.
inline void backward_into(const ForwardCache& fc, const ModelParams& p, const ModelConfig& cfg, Gradients& g,
                          const BackwardOptions& opt = {}) {
  if (!fc.valid) fail(ErrorKind::kMissingCache, "backward called without a forward cache");
  const auto H = static_cast<Eigen::Index>(cfg.hidden_size);
  const auto E = static_cast<Eigen::Index>(cfg.embed_size);
  const std::size_t L = p.decoder.size();
  const RowMatrix& S = fc.source_states;
  const auto T = S.rows();
  const bool concat = cfg.attention == AttentionKind::kConcat;
  const GradientTerm zeroed = opt.zeroed_term;

  RowMatrix dS = RowMatrix::Zero(T, H);
  RowMatrix dK;
  if (concat) dK = RowMatrix::Zero(T, static_cast<Eigen::Index>(cfg.attention_dim()));

  std::vector<Vec> dh_rec(L, Vec::Zero(H)), dc_rec(L, Vec::Zero(H));
  Vec dfeed = Vec::Zero(H);

  for (std::size_t tt = fc.steps.size(); tt-- > 0;) {
    const DecoderStepCache& step = fc.steps[tt];
    const AttentionCache& ac = step.attention;

    Vec dlogits = fc.probs[tt];
    dlogits[fc.gold[tt]] -= 1.0;
    if (zeroed != GradientTerm::kOutputProjection) g.out_w.mat().noalias() += dlogits * ac.h_tilde.transpose();
    g.out_b.vec() += dlogits;
    Vec dh_tilde = p.out_w.mat().transpose() * dlogits + dfeed;

    // h~ = tanh(W_c [ctx; h_t])
    const Vec dz = (dh_tilde.array() * (1.0 - ac.h_tilde.array().square())).matrix();
    if (zeroed != GradientTerm::kCombination) {
      g.attention.w_c.mat().leftCols(H).noalias() += dz * ac.context.transpose();
      g.attention.w_c.mat().rightCols(H).noalias() += dz * ac.h_t.transpose();
    }
    const Vec dctx = p.attention.w_c.mat().leftCols(H).transpose() * dz;
    Vec dh_top = p.attention.w_c.mat().rightCols(H).transpose() * dz;

    // ctx = S^T a
    if (zeroed != GradientTerm::kAttentionContext) dS.noalias() += ac.weights * dctx.transpose();
    const Vec da = S * dctx;
    Vec dscore = (ac.weights.array() * (da.array() - ac.weights.dot(da))).matrix();
    if (zeroed == GradientTerm::kAttentionScore) dscore.setZero();

    if (concat) {
      // score_s = v . u_s, u_s = tanh(W_ah h_t + K_s)
      g.attention.v_a.vec().noalias() += ac.u.transpose() * dscore;
      RowMatrix du = ((dscore * p.attention.v_a.vec().transpose()).array() * (1.0 - ac.u.array().square())).matrix();
      dK += du;
      const Vec du_sum = du.colwise().sum().transpose();
      g.attention.w_a.mat().leftCols(H).noalias() += du_sum * ac.h_t.transpose();
      dh_top.noalias() += p.attention.w_a.mat().leftCols(H).transpose() * du_sum;
    } else {
      // score = S q, q = W_a^T h_t
      dS.noalias() += dscore * ac.query.transpose();
      const Vec dq = S.transpose() * dscore;
      g.attention.w_a.mat().noalias() += ac.h_t * dq.transpose();
      dh_top.noalias() += p.attention.w_a.mat() * dq;
    }

    Vec dh_above = std::move(dh_top);
    for (std::size_t l = L; l-- > 0;) {
      const Vec dh = dh_rec[l] + dh_above;
      LstmGrad lg = lstm_cell_backward(step.cells[l], p.decoder[l], dh, dc_rec[l], g.decoder[l], opt);
      dh_rec[l] = std::move(lg.dh_prev);
      dc_rec[l] = std::move(lg.dc_prev);
      if (l > 0) {
        dh_above = step.masks.empty() ? lg.dx : Vec((lg.dx.array() * step.masks[l].array()).matrix());
      } else {
        if (zeroed != GradientTerm::kEmbedding) g.tgt_embed.row(static_cast<std::size_t>(step.y_prev)) += lg.dx.head(E);
        dfeed = cfg.input_feeding ? Vec(lg.dx.tail(H)) : Vec::Zero(H);
      }
    }
  }

  if (concat) {
    g.attention.w_a.mat().rightCols(H).noalias() += dK.transpose() * S;
    dS.noalias() += dK * p.attention.w_a.mat().rightCols(H);
  }

  const EncoderCache& ec = fc.encoder;
  for (std::size_t t = static_cast<std::size_t>(T); t-- > 0;) {
    Vec dh_above = dS.row(static_cast<Eigen::Index>(t)).transpose();
    for (std::size_t l = L; l-- > 0;) {
      const Vec dh = dh_rec[l] + dh_above;
      LstmGrad lg = lstm_cell_backward(ec.cells[l][t], p.encoder[l], dh, dc_rec[l], g.encoder[l], opt);
      dh_rec[l] = std::move(lg.dh_prev);
      dc_rec[l] = std::move(lg.dc_prev);
      if (l > 0) {
        dh_above = ec.masks[l].empty() ? lg.dx : Vec((lg.dx.array() * ec.masks[l][t].array()).matrix());
      } else if (zeroed != GradientTerm::kEmbedding) {
        g.src_embed.row(static_cast<std::size_t>(ec.ids[t])) += lg.dx;
      }
    }
  }
}

inline Gradients backward(const ForwardCache& fc, const ModelParams& p, const ModelConfig& cfg,
                          const BackwardOptions& opt = {}) {
  if (!fc.valid) fail(ErrorKind::kMissingCache, "backward called without a forward cache");
  Gradients g = zero_like(p);
  backward_into(fc, p, cfg, g, opt);
  return g;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
};

/// Compares backward() with central differences on a deterministic sample of
/// coordinates: a stratified draw from every tensor plus the embedding rows
/// the pair actually uses. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
///
/// The perturbed losses come from the scalar reference forward evaluated in
/// long double; in plain double the difference quotient carries ~1e-10 of
/// rounding noise, which swamps small gradient coordinates.
inline GradientCheckResult gradient_check_detailed(const ModelParams& params, const ModelConfig& cfg,
                                                   const TokenIds& source, const TokenIds& target, double epsilon,
                                                   const BackwardOptions& opt = {}, std::size_t per_tensor = 12,
                                                   std::uint64_t seed = 7) {
  if (cfg.dropout > 0.0) fail(ErrorKind::kDropoutActive, "gradient check requires dropout = 0");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) fail(ErrorKind::kInvalidEpsilon, "epsilon must be positive");

  ModelParams p = params;
  const ForwardResult base = forward_loss(source, target, p, cfg, false, 0);
  const Gradients g = backward(base.cache, p, cfg, opt);

  struct Coord {
    Tensor* param;
    const Tensor* grad;
    std::string name;
    std::size_t index;
  };
  std::vector<Coord> coords;
  std::vector<const Tensor*> grads;
  for_each_tensor(g, [&](const std::string&, const Tensor& t) { grads.push_back(&t); });

  // At least 200 sampled coordinates overall.
  per_tensor = std::max(per_tensor, (200 + grads.size() - 1) / grads.size());
  Rng rng(seed);
  std::size_t k = 0;
  for_each_tensor(p, [&](const std::string& name, Tensor& t) {
    const Tensor* gt = grads[k++];
    const std::size_t n = std::min(per_tensor, t.size());
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t lo = j * t.size() / n, hi = (j + 1) * t.size() / n;
      coords.push_back({&t, gt, name, lo + rng.below(hi - lo)});
    }
    const TokenIds* used = name == "src_embed" ? &source : name == "tgt_embed" ? &target : nullptr;
    if (used != nullptr) {
      for (TokenId id : *used) {
        const std::size_t base_idx = static_cast<std::size_t>(id) * t.cols();
        coords.push_back({&t, gt, name, base_idx + rng.below(t.cols())});
      }
    }
  });

  GradientCheckResult result;
  for (const Coord& c : coords) {
    double& v = c.param->data[c.index];
    const double saved = v;
    v = saved + epsilon;
    const long double up = scalar_reference::nll<long double>(source, target, p);
    v = saved - epsilon;
    const long double down = scalar_reference::nll<long double>(source, target, p);
    v = saved;
    const auto numeric = static_cast<double>((up - down) / (2.0L * static_cast<long double>(epsilon)));
    const double analytic = c.grad->data[c.index];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel > result.max_relative_error || result.coordinates == 0) {
      result.max_relative_error = rel;
      result.worst_tensor = c.name;
      result.worst_index = c.index;
    }
    ++result.coordinates;
  }
  return result;
}

inline double gradient_check(const ModelParams& params, const ModelConfig& cfg, const TokenIds& source,
                             const TokenIds& target, double epsilon = 1e-5, const BackwardOptions& opt = {}) {
  return gradient_check_detailed(params, cfg, source, target, epsilon, opt).max_relative_error;
}

}  // namespace nmtdesk
