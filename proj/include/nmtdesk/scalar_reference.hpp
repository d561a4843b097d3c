#pragma once

// Scalar re-implementation of the model's forward computation, written with
// plain loops over the row-major parameter arrays and templated on the
// arithmetic type. It shares nothing with the Eigen path in model.hpp beyond
// the parameter containers, so it serves as an independent oracle: tests run
// it in double against the fast path, and gradient_check() runs it in long
// double so that finite-difference rounding noise stays far below the
// gradients being checked.

#include <algorithm>
#include <cmath>
#include <vector>

#include "nmtdesk/corpus.hpp"
#include "nmtdesk/tensor.hpp"

namespace nmtdesk::scalar_reference {

template <typename S>
using Vector = std::vector<S>;

template <typename S>
S sig(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

inline double at(const Tensor& t, std::size_t r, std::size_t c) { return t.data[r * t.shape[1] + c]; }

template <typename S>
struct Cell {
  Vector<S> h, c;
};

template <typename S, typename Lstm>
Cell<S> lstm(const Vector<S>& x, const Vector<S>& h, const Vector<S>& c, const Lstm& p) {
  const std::size_t H = h.size();
  Cell<S> out{Vector<S>(H), Vector<S>(H)};
  for (std::size_t j = 0; j < H; ++j) {
    S pre[4];
    for (std::size_t gate = 0; gate < 4; ++gate) {
      const std::size_t row = gate * H + j;
      S s = p.b.data[row];
      for (std::size_t k = 0; k < x.size(); ++k) s += at(p.w_x, row, k) * x[k];
      for (std::size_t k = 0; k < H; ++k) s += at(p.w_h, row, k) * h[k];
      pre[gate] = s;
    }
    const S i = sig(pre[0]), f = sig(pre[1]), g = std::tanh(pre[2]), o = sig(pre[3]);
    out.c[j] = f * c[j] + i * g;
    out.h[j] = o * std::tanh(out.c[j]);
  }
  return out;
}

template <typename S>
struct Attention {
  Vector<S> weights, context, h_tilde;
};

/// concat scores when v_a is non-empty, general scores otherwise.
template <typename S, typename Att>
Attention<S> attend(const Vector<S>& ht, const std::vector<Vector<S>>& src, const Att& p) {
  const std::size_t T = src.size(), H = ht.size();
  const bool concat = !p.v_a.empty();
  Vector<S> score(T);
  for (std::size_t s = 0; s < T; ++s) {
    S sc = 0;
    if (concat) {
      const std::size_t A = p.w_a.shape[0];
      for (std::size_t a = 0; a < A; ++a) {
        S u = 0;
        for (std::size_t k = 0; k < H; ++k) u += at(p.w_a, a, k) * ht[k] + at(p.w_a, a, H + k) * src[s][k];
        sc += p.v_a.data[a] * std::tanh(u);
      }
    } else {
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t k = 0; k < H; ++k) sc += ht[i] * at(p.w_a, i, k) * src[s][k];
    }
    score[s] = sc;
  }
  const S mx = *std::max_element(score.begin(), score.end());
  S z = 0;
  Attention<S> out;
  out.weights.resize(T);
  for (std::size_t s = 0; s < T; ++s) z += (out.weights[s] = std::exp(score[s] - mx));
  for (S& w : out.weights) w /= z;
  out.context.assign(H, S(0));
  for (std::size_t s = 0; s < T; ++s)
    for (std::size_t k = 0; k < H; ++k) out.context[k] += out.weights[s] * src[s][k];
  out.h_tilde.resize(H);
  for (std::size_t j = 0; j < H; ++j) {
    S v = 0;
    for (std::size_t k = 0; k < H; ++k) v += at(p.w_c, j, k) * out.context[k] + at(p.w_c, j, H + k) * ht[k];
    out.h_tilde[j] = std::tanh(v);
  }
  return out;
}

template <typename S>
Vector<S> embed(const Tensor& table, TokenId id) {
  const std::size_t E = table.shape[1];
  const auto first = static_cast<std::size_t>(id) * E;
  return Vector<S>(table.data.begin() + static_cast<std::ptrdiff_t>(first),
                   table.data.begin() + static_cast<std::ptrdiff_t>(first + E));
}

template <typename S>
struct Encoded {
  std::vector<Vector<S>> states;
  std::vector<Vector<S>> h, c;
};

template <typename S, typename Params>
Encoded<S> encode(const TokenIds& ids, const Params& p) {
  const std::size_t L = p.encoder.size(), H = p.encoder[0].w_h.shape[1];
  Encoded<S> e{{}, std::vector<Vector<S>>(L, Vector<S>(H, S(0))), std::vector<Vector<S>>(L, Vector<S>(H, S(0)))};
  for (TokenId id : ids) {
    Vector<S> x = embed<S>(p.src_embed, id);
    for (std::size_t l = 0; l < L; ++l) {
      Cell<S> cell = lstm(x, e.h[l], e.c[l], p.encoder[l]);
      e.h[l] = cell.h;
      e.c[l] = cell.c;
      x = cell.h;
    }
    e.states.push_back(x);
  }
  return e;
}

template <typename S>
struct Step {
  Vector<S> logits;
  Vector<S> weights;
};

/// Decoder state carried between steps. Input feeding is inferred from the
/// width of the first decoder layer's input matrix.
template <typename S>
struct DecoderRun {
  std::vector<Vector<S>> h, c;
  Vector<S> feed;

  template <typename Params>
  Step<S> step(TokenId y_prev, const std::vector<Vector<S>>& states, const Params& p) {
    Vector<S> x = embed<S>(p.tgt_embed, y_prev);
    if (p.decoder[0].w_x.shape[1] > p.tgt_embed.shape[1]) x.insert(x.end(), feed.begin(), feed.end());
    for (std::size_t l = 0; l < p.decoder.size(); ++l) {
      Cell<S> cell = lstm(x, h[l], c[l], p.decoder[l]);
      h[l] = cell.h;
      c[l] = cell.c;
      x = cell.h;
    }
    Attention<S> a = attend(x, states, p.attention);
    feed = a.h_tilde;
    const std::size_t V = p.out_w.shape[0], H = x.size();
    Step<S> s{Vector<S>(V), a.weights};
    for (std::size_t v = 0; v < V; ++v) {
      S z = p.out_b.data[v];
      for (std::size_t k = 0; k < H; ++k) z += at(p.out_w, v, k) * a.h_tilde[k];
      s.logits[v] = z;
    }
    return s;
  }
};

template <typename S>
DecoderRun<S> start_decoder(const Encoded<S>& e) {
  return DecoderRun<S>{e.h, e.c, Vector<S>(e.h[0].size(), S(0))};
}

template <typename S>
S log_prob(const Vector<S>& logits, TokenId gold) {
  const S mx = *std::max_element(logits.begin(), logits.end());
  S z = 0;
  for (S v : logits) z += std::exp(v - mx);
  return logits[gold] - mx - std::log(z);
}

/// Teacher-forced NLL of target + EOS given source.
template <typename S, typename Params>
S nll(const TokenIds& src, const TokenIds& tgt, const Params& p) {
  Encoded<S> e = encode<S>(src, p);
  DecoderRun<S> d = start_decoder(e);
  S total = 0;
  TokenId prev = kBosId;
  for (std::size_t t = 0; t <= tgt.size(); ++t) {
    const TokenId gold = t < tgt.size() ? tgt[t] : kEosId;
    total -= log_prob(d.step(prev, e.states, p).logits, gold);
    prev = gold;
  }
  return total;
}

}  // namespace nmtdesk::scalar_reference
