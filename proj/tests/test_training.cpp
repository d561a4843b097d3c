#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "nmtdesk/training.hpp"
#include "oracles.hpp"

using namespace nmtdesk;

namespace {

std::vector<EncodedPair> pairs_with_lengths(const std::vector<std::size_t>& lengths) {
  std::vector<EncodedPair> out;
  for (std::size_t n : lengths) {
    TokenIds ids(n, static_cast<TokenId>(kNumSpecials));
    out.push_back({ids, TokenIds(n + 1, static_cast<TokenId>(kNumSpecials + 1))});
  }
  return out;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.hidden_size = 8;
  cfg.embed_size = 6;
  cfg.dropout = 0.0;
  cfg.src_vocab = 100;
  cfg.tgt_vocab = 100;
  return cfg;
}

struct Toy {
  ModelConfig cfg = small_config();
  PreparedData data;
};

Toy toy_data(std::size_t n_train = 60) {
  Toy t;
  const ParallelCorpus all = make_reversal_task(n_train + 10, 8, 2, 5, 3);
  ParallelCorpus tr, dv;
  tr.pairs.assign(all.pairs.begin(), all.pairs.begin() + static_cast<std::ptrdiff_t>(n_train));
  dv.pairs.assign(all.pairs.begin() + static_cast<std::ptrdiff_t>(n_train), all.pairs.end());
  t.data = prepare_data(tr, dv, t.cfg);
  return t;
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig t;
  t.batch_size = 16;
  t.max_epochs = epochs;
  t.patience = 0;
  t.seed = 5;
  return t;
}

oracle::Words words_of(const std::string& line) { return tokenize(line).tokens; }

}  // namespace

TEST(Batches, SizesAndPartialLast) {
  const auto corpus = pairs_with_lengths({3, 1, 4, 1, 5});
  const std::vector<Batch> b = make_batches(corpus, 2, 9);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 2u);
  EXPECT_EQ(b[1].size(), 2u);
  EXPECT_EQ(b[2].size(), 1u);
}

TEST(Batches, PaddingAndMask) {
  const auto corpus = pairs_with_lengths({3, 5});
  const std::vector<Batch> b = make_batches(corpus, 2, 1);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].padded_source_positions(), 2u);
  EXPECT_EQ(b[0].scored_tokens(), 5u + 7u);  // targets of 4 and 6 tokens, each plus EOS
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(b[0].source[i].size(), 5u);
    EXPECT_EQ(b[0].target[i].size(), 6u);
    EXPECT_EQ(b[0].target_mask[i].size(), 7u);
    for (std::size_t j = b[0].source_lengths[i]; j < 5; ++j) EXPECT_EQ(b[0].source[i][j], kBlankId);
  }
}

TEST(Batches, EverySentenceExactlyOnceAndTokensConserved) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> lengths(1 + rng.below(200));
    std::size_t tokens = 0;
    for (std::size_t& n : lengths) tokens += (n = 1 + rng.below(12));
    const auto corpus = pairs_with_lengths(lengths);
    const std::size_t bs = 1 + rng.below(30);
    std::vector<int> seen(corpus.size(), 0);
    std::size_t counted = 0;
    for (const Batch& b : make_batches(corpus, bs, static_cast<std::uint64_t>(trial))) {
      EXPECT_LE(b.size(), bs);
      for (std::size_t k = 0; k < b.size(); ++k) {
        ++seen[b.indices[k]];
        counted += b.source_lengths[k];
        EXPECT_EQ(b.source_lengths[k], corpus[b.indices[k]].source.size());
      }
    }
    EXPECT_EQ(counted, tokens);
    for (int s : seen) EXPECT_EQ(s, 1);
  }
}

TEST(Batches, DeterministicPerSeed) {
  const auto corpus = pairs_with_lengths({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  const auto a = make_batches(corpus, 3, 7), b = make_batches(corpus, 3, 7);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].indices, b[i].indices);
  EXPECT_THROW(make_batches(corpus, 0, 1), Error);
}

TEST(Sgd, StepClipAndErrors) {
  const ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 1);
  const ModelParams before = p;
  Gradients g = zero_like(p);
  g.out_b.data[0] = 3.0;
  g.out_b.data[1] = 4.0;

  ModelParams q = p;
  EXPECT_DOUBLE_EQ(sgd_step(q, g, 0.5, 0.0), 5.0);
  EXPECT_DOUBLE_EQ(q.out_b.data[0], before.out_b.data[0] - 1.5);
  EXPECT_DOUBLE_EQ(q.out_b.data[1], before.out_b.data[1] - 2.0);

  q = p;
  EXPECT_DOUBLE_EQ(sgd_step(q, g, 1.0, 1.0), 5.0);
  EXPECT_NEAR(q.out_b.data[0], before.out_b.data[0] - 0.6, 1e-15);
  EXPECT_NEAR(q.out_b.data[1], before.out_b.data[1] - 0.8, 1e-15);

  q = p;
  sgd_step(q, g, 0.0, 5.0);
  for_each_tensor(q, [&](const std::string& name, const Tensor& t) {
    for_each_tensor(before, [&](const std::string& n2, const Tensor& t2) {
      if (name == n2) {
        EXPECT_EQ(t.data, t2.data) << name;
      }
    });
  });

  g.out_b.data[2] = std::nan("");
  try {
    sgd_step(q, g, 1.0, 5.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNonFiniteGradient);
  }
  ModelConfig other = cfg;
  other.hidden_size = 9;
  try {
    sgd_step(q, zero_params(other), 1.0, 5.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShapeMismatch);
  }
}

TEST(LearningRate, HalvingTrace) {
  TrainState s;
  std::vector<double> trace;
  for (double ppl : {20.0, 15.0, 16.0, 14.0, 14.0}) {
    s = update_lr(s, ppl);
    trace.push_back(s.lr);
  }
  EXPECT_EQ(trace, (std::vector<double>{1, 1, 0.5, 0.5, 0.25}));
  EXPECT_DOUBLE_EQ(s.best_val_ppl, 14.0);
}

TEST(LearningRate, TieHalves) {
  TrainState s = update_lr(TrainState{}, 10.0);
  EXPECT_DOUBLE_EQ(update_lr(s, 10.0).lr, 0.5);
  EXPECT_DOUBLE_EQ(update_lr(s, 9.999).lr, 1.0);
}

TEST(LearningRate, PreviousEpochMode) {
  TrainState best, prev;
  std::vector<double> tb, tp;
  for (double ppl : {20.0, 15.0, 16.0, 15.5, 14.0}) {
    best = update_lr(best, ppl, LrMode::kBestSoFar);
    prev = update_lr(prev, ppl, LrMode::kPreviousEpoch);
    tb.push_back(best.lr);
    tp.push_back(prev.lr);
  }
  EXPECT_EQ(tb, (std::vector<double>{1, 1, 0.5, 0.25, 0.25}));
  EXPECT_EQ(tp, (std::vector<double>{1, 1, 0.5, 0.5, 0.5}));
  EXPECT_THROW(update_lr(TrainState{}, 0.0), Error);
  EXPECT_EQ(parse_lr_mode("previous"), LrMode::kPreviousEpoch);
  EXPECT_THROW(parse_lr_mode("sometimes"), Error);
}

TEST(Validation, UniformModelPerplexityIsVocabularySize) {
  Toy t = toy_data();
  const ModelParams zero = zero_params(t.cfg);
  const Validation v = validate(zero, t.cfg, t.data.assets.tgt_vocab, t.data.dev);
  EXPECT_NEAR(v.val_ppl, static_cast<double>(t.cfg.tgt_vocab), 1e-9);
  EXPECT_GT(v.tokens, 0u);
}

TEST(Validation, BleuMatchesOracleOnDecodedText) {
  Toy t = toy_data();
  const ModelParams p = init_params(t.cfg, 8, 1.0);
  const Validation v = validate(p, t.cfg, t.data.assets.tgt_vocab, t.data.dev);
  const auto hyps = decode_dev(p, t.cfg, t.data.assets.tgt_vocab, t.data.dev, kDefaultMaxLenFactor);
  std::vector<oracle::Words> h, r;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    h.push_back(words_of(hyps[i]));
    r.push_back(words_of(t.data.dev.references[i]));
  }
  EXPECT_NEAR(v.val_bleu, oracle::bleu(h, r), 1e-9);
  EXPECT_DOUBLE_EQ(text_bleu(t.data.dev.references, t.data.dev.references), 100.0);
}

TEST(Validation, PerplexityMatchesSummedTokenLoss) {
  Toy t = toy_data();
  const ModelParams p = init_params(t.cfg, 2);
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const EncodedPair& pair : t.data.dev.pairs) {
    const ForwardResult r = forward_loss(pair.source, pair.target, p, t.cfg, false, 0);
    nll += r.nll_sum;
    tokens += r.token_count;
    EXPECT_EQ(r.token_count, pair.target.size() + 1);
  }
  EXPECT_NEAR(validation_perplexity(p, t.cfg, t.data.dev.pairs), std::exp(nll / static_cast<double>(tokens)), 1e-12);
}

TEST(BatchGradient, IndependentOfThreadCount) {
  Toy t = toy_data();
  t.cfg.dropout = 0.2;
  const ModelParams p = init_params(t.cfg, 4);
  const std::vector<Batch> batches = make_batches(t.data.train, 13, 2);
  for (GradientScale scale : {GradientScale::kBatchMean, GradientScale::kBatchSum}) {
    const BatchGradient one = batch_gradient(batches[0], p, t.cfg, 77, 1, scale);
    const BatchGradient four = batch_gradient(batches[0], p, t.cfg, 77, 4, scale);
    EXPECT_EQ(one.nll_sum, four.nll_sum);
    EXPECT_EQ(global_norm(one.grad), global_norm(four.grad));
  }
  const BatchGradient mean = batch_gradient(batches[0], p, t.cfg, 77, 1, GradientScale::kBatchMean);
  const BatchGradient sum = batch_gradient(batches[0], p, t.cfg, 77, 1, GradientScale::kBatchSum);
  EXPECT_NEAR(global_norm(sum.grad), global_norm(mean.grad) * static_cast<double>(batches[0].size()), 1e-9);
}

TEST(BatchGradient, MatchesSumOfSentenceGradients) {
  Toy t = toy_data();
  const ModelParams p = init_params(t.cfg, 6);
  const Batch b = make_batches(t.data.train, 10, 3)[0];
  Gradients expect = zero_like(p);
  for (std::size_t i = 0; i < b.size(); ++i) {
    const EncodedPair& pair = t.data.train[b.indices[i]];
    backward_into(forward_loss(pair.source, pair.target, p, t.cfg, false, 0).cache, p, t.cfg, expect);
  }
  const BatchGradient got = batch_gradient(b, p, t.cfg, 1, 2, GradientScale::kBatchSum);
  EXPECT_NEAR(global_norm(got.grad), global_norm(expect), 1e-9);
  EXPECT_EQ(got.tokens, b.scored_tokens());
}

TEST(Train, HistoryDeterministicAcrossRunsAndThreads) {
  Toy t = toy_data();
  TrainConfig a = quick_train(3);
  TrainConfig b = a;
  b.threads = 3;
  const TrainResult ra = train(t.data, t.cfg, a);
  const TrainResult rb = train(t.data, t.cfg, b);
  ASSERT_EQ(ra.state.history.size(), 3u);
  EXPECT_EQ(ra.state.history, rb.state.history);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(ra.state.history[i].epoch, i + 1);
  EXPECT_EQ(ra.stop_reason, "reached max_epochs");
}

TEST(Train, PatienceStopsEarly) {
  Toy t = toy_data();
  TrainConfig c = quick_train(10);
  c.patience = 1;
  c.initial_lr = 1e-12;  // nothing moves, so BLEU never improves after epoch 1
  const TrainResult r = train(t.data, t.cfg, c);
  EXPECT_EQ(r.state.history.size(), 2u);
  EXPECT_EQ(r.best_epoch, 1u);
  EXPECT_NE(r.stop_reason.find("did not improve"), std::string::npos);
}

TEST(Train, CheckpointsHistoryAndBitExactReload) {
  const auto dir = std::filesystem::temp_directory_path() / "nmtdesk_train_test";
  std::filesystem::remove_all(dir);
  Toy t = toy_data();
  TrainConfig c = quick_train(2);
  c.checkpoint_dir = (dir / "ckpt").string();
  c.history_path = (dir / "history.jsonl").string();
  const TrainResult r = train(t.data, t.cfg, c);
  ASSERT_EQ(r.checkpoints.size(), 2u);
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt" / "best.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt" / "epoch-002.ckpt"));

  const auto lines = read_lines(c.history_path);
  ASSERT_EQ(lines.size(), 2u);
  const auto j = nlohmann::json::parse(lines[1]);
  EXPECT_EQ(j["epoch"], 2);
  EXPECT_EQ(j["val_ppl"].get<double>(), r.state.history[1].val_ppl);
  EXPECT_TRUE(j.contains("wall_seconds"));

  const ModelBundle back = load_checkpoint(r.checkpoints.back());
  const Validation live = validate(r.model.params, r.model.config, r.model.tgt_vocab, t.data.dev);
  const Validation loaded = validate(back.params, back.config, back.tgt_vocab, t.data.dev);
  EXPECT_EQ(live.val_ppl, loaded.val_ppl);
  EXPECT_EQ(live.val_bleu, loaded.val_bleu);
  EXPECT_EQ(loaded.val_ppl, r.state.history.back().val_ppl);
  std::filesystem::remove_all(dir);
}

TEST(Train, LearnsBeyondUniformOnTinyTask) {
  Toy t = toy_data(200);
  TrainConfig c = quick_train(6);
  c.batch_size = 10;
  const TrainResult r = train(t.data, t.cfg, c);
  EXPECT_LT(r.state.history.back().val_ppl, 0.8 * static_cast<double>(t.cfg.tgt_vocab));
}

TEST(PrepareData, FiltersAndShrinksVocabulary) {
  ParallelCorpus tr, dv;
  tr.pairs.push_back({tokenize("The hotel"), tokenize("Das Hotel")});
  tr.pairs.push_back({tokenize("the pool"), tokenize("der Pool")});
  tr.pairs.push_back({Sentence::from_tokens(std::vector<std::string>(60, "x")), tokenize("lang")});
  dv.pairs.push_back({tokenize("The bar"), tokenize("Die Bar")});
  ModelConfig cfg = small_config();
  const PreparedData d = prepare_data(tr, dv, cfg);
  EXPECT_EQ(d.train.size(), 2u);
  EXPECT_EQ(cfg.src_vocab, kNumSpecials + 3);  // the, hotel, pool
  EXPECT_FALSE(d.assets.src_vocab.contains("x"));
  EXPECT_EQ(d.dev.references, (std::vector<std::string>{"Die Bar"}));
  EXPECT_EQ(d.dev.source_tokens[0].tokens[0], "The");
  ModelConfig c2 = small_config();
  EXPECT_THROW(prepare_data(ParallelCorpus{}, dv, c2), Error);
}

TEST(ReversalTask, TargetsAreReversedSources) {
  const ParallelCorpus c = make_reversal_task(50, 30, 3, 10, 1);
  ASSERT_EQ(c.size(), 50u);
  for (const SentencePair& p : c.pairs) {
    EXPECT_GE(p.source.size(), 3u);
    EXPECT_LE(p.source.size(), 10u);
    EXPECT_EQ(p.target.tokens, std::vector<std::string>(p.source.tokens.rbegin(), p.source.tokens.rend()));
  }
  EXPECT_EQ(make_reversal_task(5, 30, 3, 10, 1).pairs[0].source.tokens, c.pairs[0].source.tokens);
}

TEST(TrainConfig, ApplyAndValidate) {
  TrainConfig c;
  c.apply({{"batch_size", "32"}, {"lr", "0.5"}, {"lr_mode", "previous"}, {"gradient_scale", "sum"}});
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_DOUBLE_EQ(c.initial_lr, 0.5);
  EXPECT_EQ(c.lr_mode, LrMode::kPreviousEpoch);
  EXPECT_EQ(c.gradient_scale, GradientScale::kBatchSum);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), Error);
}
