#pragma once

// Mini-batch SGD with learning-rate halving on stalled validation perplexity,
// per-epoch validation BLEU, checkpointing and BLEU-patience stopping.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmtdesk/checkpoint.hpp"
#include "nmtdesk/corpus.hpp"
#include "nmtdesk/decode.hpp"
#include "nmtdesk/evaluation.hpp"
#include "nmtdesk/model.hpp"
#include "nmtdesk/random.hpp"

namespace nmtdesk {

/// What "the validation perplexity did not decrease" is compared against.
enum class LrMode { kBestSoFar, kPreviousEpoch };

inline std::string to_string(LrMode m) { return m == LrMode::kBestSoFar ? "best" : "previous"; }

inline LrMode parse_lr_mode(const std::string& s) {
  if (s == "best") return LrMode::kBestSoFar;
  if (s == "previous") return LrMode::kPreviousEpoch;
  fail(ErrorKind::kFormat, "unknown lr_mode '" + s + "' (expected best or previous)");
}

/// How per-sentence gradients are combined into one batch gradient.
enum class GradientScale { kBatchMean, kBatchSum };

inline std::string to_string(GradientScale g) { return g == GradientScale::kBatchMean ? "mean" : "sum"; }

inline GradientScale parse_gradient_scale(const std::string& s) {
  if (s == "mean") return GradientScale::kBatchMean;
  if (s == "sum") return GradientScale::kBatchSum;
  fail(ErrorKind::kFormat, "unknown gradient_scale '" + s + "' (expected mean or sum)");
}

struct TrainConfig {
  std::size_t batch_size = 250;
  double initial_lr = 1.0;
  std::size_t max_epochs = 13;
  /// Global-norm clipping threshold; 0 disables clipping.
  double grad_clip_norm = 5.0;
  std::uint64_t seed = 1;
  LrMode lr_mode = LrMode::kBestSoFar;
  GradientScale gradient_scale = GradientScale::kBatchMean;
  /// Epochs without a val BLEU improvement before stopping; 0 disables.
  std::size_t patience = 3;
  std::size_t threads = 1;
  double max_len_factor = kDefaultMaxLenFactor;
  std::string checkpoint_dir;  // empty: no checkpoints
  std::string history_path;    // empty: no history file
  std::vector<std::string> probe_sentences;

  void validate() const {
    if (batch_size < 1) fail(ErrorKind::kUsage, "batch_size must be >= 1");
    if (!(initial_lr > 0.0)) fail(ErrorKind::kUsage, "initial_lr must be > 0");
    if (max_epochs < 1) fail(ErrorKind::kUsage, "max_epochs must be >= 1");
    if (!(grad_clip_norm >= 0.0)) fail(ErrorKind::kUsage, "grad_clip_norm must be >= 0");
  }

  void apply(const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv) {
      if (k == "batch_size") batch_size = detail::parse_size(k, v);
      else if (k == "initial_lr" || k == "lr") initial_lr = detail::parse_real(k, v);
      else if (k == "max_epochs") max_epochs = detail::parse_size(k, v);
      else if (k == "grad_clip_norm") grad_clip_norm = detail::parse_real(k, v);
      else if (k == "seed") seed = detail::parse_size(k, v);
      else if (k == "lr_mode") lr_mode = parse_lr_mode(v);
      else if (k == "gradient_scale") gradient_scale = parse_gradient_scale(v);
      else if (k == "patience") patience = detail::parse_size(k, v);
      else if (k == "max_len_factor") max_len_factor = detail::parse_real(k, v);
      else if (k == "threads") threads = detail::parse_size(k, v);
    }
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_nll_per_token = 0.0;
  double val_ppl = 0.0;
  double val_bleu = 0.0;
  double lr = 0.0;  // learning rate in force after this epoch's update
};

inline bool operator==(const EpochRecord& a, const EpochRecord& b) {
  return a.epoch == b.epoch && a.train_nll_per_token == b.train_nll_per_token && a.val_ppl == b.val_ppl &&
         a.val_bleu == b.val_bleu && a.lr == b.lr;
}

struct TrainState {
  std::size_t epoch = 0;
  double lr = 1.0;
  double best_val_ppl = std::numeric_limits<double>::infinity();
  double last_val_ppl = std::numeric_limits<double>::infinity();
  std::vector<EpochRecord> history;
};

inline TrainState initial_train_state(const TrainConfig& tcfg) {
  TrainState s;
  s.lr = tcfg.initial_lr;
  return s;
}

/// Halves lr unless new_val_ppl is strictly below the reference perplexity
/// (best so far, or the previous epoch's); ties halve.
inline TrainState update_lr(TrainState s, double new_val_ppl, LrMode mode = LrMode::kBestSoFar) {
  if (!(new_val_ppl > 0.0)) fail(ErrorKind::kUsage, "validation perplexity must be > 0");
  const double reference = mode == LrMode::kBestSoFar ? s.best_val_ppl : s.last_val_ppl;
  if (new_val_ppl >= reference) s.lr /= 2.0;
  s.best_val_ppl = std::min(s.best_val_ppl, new_val_ppl);
  s.last_val_ppl = new_val_ppl;
  return s;
}

// ---------------------------------------------------------------------------
// Batching

struct EncodedPair {
  TokenIds source;
  TokenIds target;
};

/// Source and target padded with BLANK to the batch maxima. target_mask marks
/// scored decoder positions, including the final EOS (|target| + 1 per row).
struct Batch {
  std::vector<std::size_t> indices;  // into the corpus given to make_batches
  std::vector<TokenIds> source;
  std::vector<TokenIds> target;
  std::vector<std::size_t> source_lengths;
  std::vector<std::size_t> target_lengths;
  std::vector<std::vector<bool>> target_mask;

  std::size_t size() const { return indices.size(); }
  std::size_t padded_source_positions() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < size(); ++i) n += source[i].size() - source_lengths[i];
    return n;
  }
  std::size_t scored_tokens() const {
    std::size_t n = 0;
    for (const auto& row : target_mask) n += static_cast<std::size_t>(std::count(row.begin(), row.end(), true));
    return n;
  }
};

inline constexpr std::size_t kBatchesPerLengthPool = 20;

/// Seeded shuffle, then pools of kBatchesPerLengthPool batches are sorted by
/// source length and cut into batches. Full batches are visited in shuffled
/// order; the one partial batch, if any, comes last.
inline std::vector<Batch> make_batches(const std::vector<EncodedPair>& corpus, std::size_t batch_size,
                                       std::uint64_t seed) {
  if (batch_size < 1) fail(ErrorKind::kUsage, "batch_size must be >= 1");
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  const std::size_t pool = batch_size * kBatchesPerLengthPool;
  for (std::size_t begin = 0; begin < order.size(); begin += pool) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(begin);
    const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), begin + pool));
    std::stable_sort(first, last,
                     [&](std::size_t a, std::size_t b) { return corpus[a].source.size() < corpus[b].source.size(); });
  }

  std::vector<Batch> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    Batch b;
    const std::size_t end = std::min(order.size(), begin + batch_size);
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end));
    std::size_t max_src = 0, max_tgt = 0;
    for (std::size_t i : b.indices) {
      max_src = std::max(max_src, corpus[i].source.size());
      max_tgt = std::max(max_tgt, corpus[i].target.size());
    }
    for (std::size_t i : b.indices) {
      TokenIds s = corpus[i].source, t = corpus[i].target;
      b.source_lengths.push_back(s.size());
      b.target_lengths.push_back(t.size());
      std::vector<bool> mask(max_tgt + 1, false);
      std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(t.size() + 1), true);
      s.resize(max_src, kBlankId);
      t.resize(max_tgt, kBlankId);
      b.source.push_back(std::move(s));
      b.target.push_back(std::move(t));
      b.target_mask.push_back(std::move(mask));
    }
    batches.push_back(std::move(b));
  }
  const bool has_partial = !batches.empty() && batches.back().size() < batch_size;
  const std::size_t full = batches.size() - (has_partial ? 1 : 0);
  rng.shuffle(std::span<Batch>(batches.data(), full));
  return batches;
}

// ---------------------------------------------------------------------------
// SGD

inline double global_norm(const Gradients& g) {
  double sq = 0.0;
  for_each_tensor(g, [&](const std::string&, const Tensor& t) { sq += t.vec().squaredNorm(); });
  return std::sqrt(sq);
}

/// p <- p - lr * g, with g rescaled to clip_norm when its global L2 norm
/// exceeds it (clip_norm 0 disables clipping). Returns the unclipped norm.
inline double sgd_step(ModelParams& p, const Gradients& g, double lr, double clip_norm) {
  if (!same_shapes(p, g)) fail(ErrorKind::kShapeMismatch, "gradient shapes do not match parameters");
  for_each_tensor(g, [](const std::string& name, const Tensor& t) {
    if (!t.all_finite()) fail(ErrorKind::kNonFiniteGradient, "non-finite gradient in " + name);
  });
  const double norm = global_norm(g);
  const double scale = clip_norm > 0.0 && norm > clip_norm ? clip_norm / norm : 1.0;
  std::vector<const Tensor*> grads;
  for_each_tensor(g, [&](const std::string&, const Tensor& t) { grads.push_back(&t); });
  std::size_t k = 0;
  for_each_tensor(p, [&](const std::string&, Tensor& t) { t.vec() -= (lr * scale) * grads[k++]->vec(); });
  return norm;
}

/// Fixed number of gradient shards per batch; sentences are split into
/// contiguous shards and the shard sums are added in shard order, so results
/// do not depend on the number of threads.
inline constexpr std::size_t kGradientShards = 8;

struct BatchGradient {
  Gradients grad;
  double nll_sum = 0.0;
  std::size_t tokens = 0;
};

/// Sum over the batch of d(nll)/d(params), divided by |batch| for kBatchMean.
inline BatchGradient batch_gradient(const Batch& batch, const ModelParams& p, const ModelConfig& cfg,
                                    std::uint64_t seed, std::size_t threads,
                                    GradientScale scale = GradientScale::kBatchMean) {
  const std::size_t n = batch.size();
  const std::size_t shards = std::min(kGradientShards, n);
  std::vector<BatchGradient> parts(shards);
  std::vector<std::string> errors(shards);
  auto run_shard = [&](std::size_t s) {
    try {
      BatchGradient& part = parts[s];
      part.grad = zero_like(p);
      const std::size_t begin = s * n / shards, end = (s + 1) * n / shards;
      for (std::size_t i = begin; i < end; ++i) {
        const TokenIds src(batch.source[i].begin(),
                           batch.source[i].begin() + static_cast<std::ptrdiff_t>(batch.source_lengths[i]));
        const TokenIds tgt(batch.target[i].begin(),
                           batch.target[i].begin() + static_cast<std::ptrdiff_t>(batch.target_lengths[i]));
        const ForwardResult fr = forward_loss(src, tgt, p, cfg, true, derive_seed(seed, batch.indices[i]));
        backward_into(fr.cache, p, cfg, part.grad);
        part.nll_sum += fr.nll_sum;
        part.tokens += fr.token_count;
      }
    } catch (const std::exception& e) {
      errors[s] = e.what();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, shards));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t s = w; s < shards; s += workers) run_shard(s);
    });
  }
  for (std::size_t s = 0; s < shards; s += workers) run_shard(s);
  for (std::thread& t : pool) t.join();
  for (const std::string& e : errors)
    if (!e.empty()) fail(ErrorKind::kNonFiniteLoss, e);

  BatchGradient total = std::move(parts[0]);
  for (std::size_t s = 1; s < shards; ++s) {
    accumulate(total.grad, parts[s].grad);
    total.nll_sum += parts[s].nll_sum;
    total.tokens += parts[s].tokens;
  }
  if (scale == GradientScale::kBatchSum) return total;
  const double inv = 1.0 / static_cast<double>(n);
  for_each_tensor(total.grad, [inv](const std::string&, Tensor& t) { t.vec() *= inv; });
  return total;
}

// ---------------------------------------------------------------------------
// Data preparation and validation

/// Development data in both forms: ids for perplexity, text for BLEU.
struct DevSet {
  std::vector<EncodedPair> pairs;
  std::vector<Sentence> source_tokens;  // tokenized, original casing (unk copy source)
  std::vector<std::string> references;  // detokenized target lines
};

struct PreparedData {
  ModelBundle assets;  // vocabularies and truecasers; params left empty
  std::vector<EncodedPair> train;
  DevSet dev;
};

inline Sentence truecase_sentence(const Truecaser& tc, const Sentence& s) { return tc.apply(s); }

/// Truecasers and vocabularies come from the training side only. Training
/// pairs longer than cfg.max_train_len on either side are dropped. The
/// vocabulary sizes in cfg are shrunk to what the data supports.
inline PreparedData prepare_data(const ParallelCorpus& train, const ParallelCorpus& dev, ModelConfig& cfg) {
  if (train.empty()) fail(ErrorKind::kEmptyCorpus, "training corpus is empty");
  if (dev.empty()) fail(ErrorKind::kEmptyCorpus, "development corpus is empty");
  PreparedData d;
  ModelBundle& a = d.assets;
  a.src_truecaser = build_truecaser(train, Side::kSource);
  a.tgt_truecaser = build_truecaser(train, Side::kTarget);

  ParallelCorpus cased;
  for (const SentencePair& pair : filter_by_length(train, cfg.max_train_len).pairs) {
    cased.pairs.push_back({a.src_truecaser.apply(pair.source), a.tgt_truecaser.apply(pair.target)});
  }
  if (cased.empty()) fail(ErrorKind::kEmptyCorpus, "no training pair survives the length filter");
  auto limit = [](std::size_t total) { return total > kNumSpecials ? total - kNumSpecials : 0; };
  a.src_vocab = build_vocabulary(cased, Side::kSource, limit(cfg.src_vocab));
  a.tgt_vocab = build_vocabulary(cased, Side::kTarget, limit(cfg.tgt_vocab));
  cfg.src_vocab = a.src_vocab.size();
  cfg.tgt_vocab = a.tgt_vocab.size();
  a.config = cfg;

  for (const SentencePair& pair : cased.pairs) {
    if (pair.source.empty() || pair.target.empty()) continue;
    d.train.push_back({encode(pair.source, a.src_vocab, false), encode(pair.target, a.tgt_vocab, false)});
  }
  for (const SentencePair& pair : dev.pairs) {
    if (pair.source.empty() || pair.target.empty()) continue;
    d.dev.pairs.push_back({encode(a.src_truecaser.apply(pair.source), a.src_vocab, false),
                           encode(a.tgt_truecaser.apply(pair.target), a.tgt_vocab, false)});
    d.dev.source_tokens.push_back(pair.source);
    d.dev.references.push_back(detokenize(pair.target));
  }
  if (d.dev.pairs.empty()) fail(ErrorKind::kEmptyCorpus, "development corpus has no usable pairs");
  return d;
}

struct Validation {
  double val_ppl = 0.0;
  double val_bleu = 0.0;
  double nll_sum = 0.0;
  std::size_t tokens = 0;
};

inline double validation_perplexity(const ModelParams& p, const ModelConfig& cfg, const std::vector<EncodedPair>& dev,
                                    double* nll_out = nullptr, std::size_t* tokens_out = nullptr) {
  if (dev.empty()) fail(ErrorKind::kEmptyCorpus, "development corpus is empty");
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const EncodedPair& pair : dev) {
    const ForwardResult r = forward_loss(pair.source, pair.target, p, cfg, false, 0);
    nll += r.nll_sum;
    tokens += r.token_count;
  }
  if (nll_out) *nll_out = nll;
  if (tokens_out) *tokens_out = tokens;
  return std::exp(nll / static_cast<double>(tokens));
}

/// Greedy-decodes every dev source, replaces <unk>, detokenizes, and scores
/// the text against the references with the truecased evaluation protocol.
inline std::vector<std::string> decode_dev(const ModelParams& p, const ModelConfig& cfg, const Vocabulary& tgt_vocab,
                                           const DevSet& dev, double max_len_factor) {
  std::vector<std::string> out;
  out.reserve(dev.pairs.size());
  DecodeOptions opt;
  opt.max_len_factor = max_len_factor;
  for (std::size_t i = 0; i < dev.pairs.size(); ++i) {
    Hypothesis h = greedy_decode(p, cfg, dev.pairs[i].source, opt);
    attach_tokens(h, tgt_vocab);
    out.push_back(detokenize(replace_unk(h, dev.source_tokens[i])));
  }
  return out;
}

inline double text_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  const auto tc = eval_truecaser(refs);
  const Truecaser* t = tc ? &*tc : nullptr;
  return bleu_corpus(prepare_eval_side(hyps, t, {}), prepare_eval_side(refs, t, {})).bleu;
}

inline Validation validate(const ModelParams& p, const ModelConfig& cfg, const Vocabulary& tgt_vocab,
                           const DevSet& dev, double max_len_factor = kDefaultMaxLenFactor) {
  Validation v;
  v.val_ppl = validation_perplexity(p, cfg, dev.pairs, &v.nll_sum, &v.tokens);
  v.val_bleu = text_bleu(decode_dev(p, cfg, tgt_vocab, dev, max_len_factor), dev.references);
  return v;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  ModelBundle model;
  TrainState state;
  std::vector<std::string> checkpoints;
  std::size_t best_epoch = 0;
  std::string stop_reason;
};

inline std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch-%03zu.ckpt", epoch);
  return buf;
}

inline nlohmann::ordered_json to_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_nll_per_token"] = r.train_nll_per_token;
  j["val_ppl"] = r.val_ppl;
  j["val_bleu"] = r.val_bleu;
  j["lr"] = r.lr;
  return j;
}

/// Runs SGD epochs over data.train, validating on data.dev after each one.
/// log receives human-readable progress lines (may be null).
inline TrainResult train(const PreparedData& data, const ModelConfig& cfg, const TrainConfig& tcfg,
                         std::ostream* log = nullptr) {
  tcfg.validate();
  cfg.validate();
  if (data.train.empty()) fail(ErrorKind::kEmptyCorpus, "no training pairs");
  TrainResult result;
  result.model = data.assets;
  result.model.config = cfg;
  result.model.params = init_params(cfg, derive_seed(tcfg.seed, 0));
  ModelParams& p = result.model.params;
  TrainState& state = result.state;
  state = initial_train_state(tcfg);

  if (!tcfg.checkpoint_dir.empty()) std::filesystem::create_directories(tcfg.checkpoint_dir);
  std::string history_text;
  double best_bleu = -1.0;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = state.lr;
    const std::uint64_t epoch_seed = derive_seed(tcfg.seed, epoch);
    const std::vector<Batch> batches = make_batches(data.train, tcfg.batch_size, epoch_seed);
    double nll = 0.0;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      try {
        BatchGradient bg = batch_gradient(batches[b], p, cfg, derive_seed(epoch_seed, b + 1), tcfg.threads,
                                        tcfg.gradient_scale);
        sgd_step(p, bg.grad, lr, tcfg.grad_clip_norm);
        nll += bg.nll_sum;
        tokens += bg.tokens;
      } catch (const Error& e) {
        fail(e.kind(), "epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1) + " of " +
                           std::to_string(batches.size()) + " (lr " + std::to_string(lr) + "): " + e.what());
      }
    }
    const Validation v = validate(p, cfg, data.assets.tgt_vocab, data.dev, tcfg.max_len_factor);
    state = update_lr(state, v.val_ppl, tcfg.lr_mode);
    state.epoch = epoch;
    EpochRecord rec{epoch, nll / static_cast<double>(tokens), v.val_ppl, v.val_bleu, state.lr};
    state.history.push_back(rec);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!tcfg.history_path.empty()) {
      nlohmann::ordered_json j = to_json(rec);
      j["wall_seconds"] = wall;
      history_text += j.dump() + "\n";
      write_file(tcfg.history_path, history_text);
    }
    const bool improved = v.val_bleu > best_bleu;
    if (improved) {
      best_bleu = v.val_bleu;
      result.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (!tcfg.checkpoint_dir.empty()) {
      const std::filesystem::path dir(tcfg.checkpoint_dir);
      const std::string name = checkpoint_name(epoch);
      save_checkpoint(result.model, (dir / name).string());
      result.checkpoints.push_back((dir / name).string());
      if (improved) {
        nlohmann::ordered_json best;
        best["epoch"] = epoch;
        best["checkpoint"] = name;
        best["val_bleu"] = v.val_bleu;
        best["val_ppl"] = v.val_ppl;
        write_file((dir / "best.json").string(), best.dump(2) + "\n");
      }
    }
    if (log) {
      char line[200];
      std::snprintf(line, sizeof line, "epoch %zu  train_nll/tok %.4f  val_ppl %.4f  val_bleu %.2f  lr %g  (%.1fs)\n",
                    epoch, rec.train_nll_per_token, rec.val_ppl, rec.val_bleu, rec.lr, wall);
      *log << line;
      for (const std::string& probe : tcfg.probe_sentences) {
        TranslateOptions topt;
        topt.decode.max_len_factor = tcfg.max_len_factor;
        *log << "  probe: " << probe << "\n     -> " << translate_line(result.model, probe, topt).text << "\n";
      }
      log->flush();
    }
    if (tcfg.patience > 0 && since_best >= tcfg.patience) {
      result.stop_reason = "val_bleu did not improve for " + std::to_string(tcfg.patience) + " epochs";
      break;
    }
  }
  if (result.stop_reason.empty()) result.stop_reason = "reached max_epochs";
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic task

/// Deterministic reversal task: sources are 3..10 random words from a
/// vocab_size-word alphabet ("w00", "w01", ...), targets the reversed source.
inline ParallelCorpus make_reversal_task(std::size_t pairs, std::size_t vocab_size, std::size_t min_len,
                                         std::size_t max_len, std::uint64_t seed) {
  if (vocab_size < 1 || min_len < 1 || max_len < min_len) fail(ErrorKind::kUsage, "invalid reversal task parameters");
  Rng rng(seed);
  ParallelCorpus c;
  c.language_pair = "rev";
  for (std::size_t i = 0; i < pairs; ++i) {
    std::vector<std::string> words(min_len + rng.below(max_len - min_len + 1));
    for (std::string& w : words) {
      const std::size_t k = rng.below(vocab_size);
      w = std::string("w") + (k < 10 ? "0" : "") + std::to_string(k);
    }
    std::vector<std::string> reversed(words.rbegin(), words.rend());
    c.pairs.push_back({Sentence::from_tokens(std::move(words)), Sentence::from_tokens(std::move(reversed))});
  }
  return c;
}

}  // namespace nmtdesk
