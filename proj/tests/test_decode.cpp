#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "nmtdesk/decode.hpp"
#include "nmtdesk/scalar_reference.hpp"

using namespace nmtdesk;
namespace ref = nmtdesk::scalar_reference;

namespace {

ModelConfig small_config(std::size_t tgt_vocab = 12, AttentionKind kind = AttentionKind::kConcat, bool feed = false) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden_size = 6;
  cfg.embed_size = 5;
  cfg.src_vocab = 12;
  cfg.tgt_vocab = tgt_vocab;
  cfg.dropout = 0.0;
  cfg.attention = kind;
  cfg.input_feeding = feed;
  return cfg;
}

TokenIds random_source(Rng& rng, std::size_t vocab, std::size_t max_len) {
  TokenIds ids(1 + rng.below(max_len));
  for (TokenId& id : ids) id = static_cast<TokenId>(kNumSpecials + rng.below(vocab - kNumSpecials));
  return ids;
}

void expect_rows_normalised(const Hypothesis& h) {
  for (Eigen::Index r = 0; r < h.attention.rows(); ++r) EXPECT_NEAR(h.attention.row(r).sum(), 1.0, 1e-9);
}

Sentence words(const std::string& line) { return tokenize(line); }

}  // namespace

TEST(Greedy, EosAlwaysWinsGivesEmptyHypothesis) {
  const ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 1);
  p.out_b.data[kEosId] = 100.0;
  const Hypothesis h = greedy_decode(p, cfg, {4, 5, 6});
  EXPECT_TRUE(h.ids.empty());
  EXPECT_EQ(h.attention.rows(), 0);
  EXPECT_TRUE(h.finished);
}

TEST(Greedy, CapReachedWithoutEos) {
  const ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 2);
  p.out_b.data[7] = 100.0;
  const TokenIds src = {4, 5, 6};
  const Hypothesis h = greedy_decode(p, cfg, src);
  EXPECT_EQ(h.ids.size(), 2u * 3u + 5u);
  EXPECT_FALSE(h.finished);
  EXPECT_EQ(h.attention.rows(), static_cast<Eigen::Index>(h.ids.size()));
  DecodeOptions opt;
  opt.max_len_factor = 1.5;
  EXPECT_EQ(greedy_decode(p, cfg, src, opt).ids.size(), 5u + 5u);  // ceil(4.5) + 5
  opt.max_len = 3;
  EXPECT_EQ(greedy_decode(p, cfg, src, opt).ids.size(), 3u);
}

TEST(Greedy, ReplaysArgmaxOfScalarOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelConfig cfg = small_config(12, trial % 2 ? AttentionKind::kGeneral : AttentionKind::kConcat, trial % 3 == 0);
    const ModelParams p = init_params(cfg, 100 + trial, 1.0);
    const TokenIds src = random_source(rng, cfg.src_vocab, 6);
    const Hypothesis h = greedy_decode(p, cfg, src);
    expect_rows_normalised(h);

    ref::Encoded<double> e = ref::encode<double>(src, p);
    ref::DecoderRun<double> d = ref::start_decoder(e);
    TokenId prev = kBosId;
    double score = 0.0;
    for (std::size_t t = 0; t <= h.ids.size(); ++t) {
      const ref::Step<double> step = d.step(prev, e.states, p);
      const auto best = static_cast<TokenId>(std::max_element(step.logits.begin(), step.logits.end()) - step.logits.begin());
      score += ref::log_prob(step.logits, best);
      if (t == h.ids.size()) {
        if (h.finished) { EXPECT_EQ(best, kEosId); }
        break;
      }
      ASSERT_EQ(h.ids[t], best) << "trial " << trial << " step " << t;
      for (std::size_t s = 0; s < src.size(); ++s) EXPECT_NEAR(h.attention(t, s), step.weights[s], 1e-12);
      prev = best;
    }
    if (h.finished) { EXPECT_NEAR(h.score, score, 1e-9); }
  }
}

TEST(Greedy, Deterministic) {
  const ModelConfig cfg = small_config();
  const ModelParams p = init_params(cfg, 9, 1.0);
  const Hypothesis a = greedy_decode(p, cfg, {4, 8, 9, 10});
  const Hypothesis b = greedy_decode(p, cfg, {4, 8, 9, 10});
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(a.score, b.score);
  EXPECT_TRUE(a.attention == b.attention);
}

TEST(Beam, WidthOneEqualsGreedy) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const ModelConfig cfg = small_config(8 + trial % 5, trial % 2 ? AttentionKind::kGeneral : AttentionKind::kConcat);
    const ModelParams p = init_params(cfg, 500 + trial, 1.0);
    const TokenIds src = random_source(rng, cfg.src_vocab, 7);
    const Hypothesis g = greedy_decode(p, cfg, src);
    const Hypothesis b = beam_decode(p, cfg, src, 1);
    ASSERT_EQ(g.ids, b.ids) << "trial " << trial;
    EXPECT_EQ(g.score, b.score);
    EXPECT_EQ(g.finished, b.finished);
    EXPECT_TRUE(g.attention == b.attention);
  }
}

TEST(Beam, FullWidthCapTwoMatchesEnumeration) {
  const std::size_t V = 6;
  for (int trial = 0; trial < 20; ++trial) {
    const ModelConfig cfg = small_config(V, trial % 2 ? AttentionKind::kGeneral : AttentionKind::kConcat);
    const ModelParams p = init_params(cfg, 900 + trial, 1.5);
    const TokenIds src = {4, 5, 6, 7};

    // Every output allowed under cap 2: EOS at length 0 or 1, or two non-EOS tokens.
    ref::Encoded<double> e = ref::encode<double>(src, p);
    double best = -std::numeric_limits<double>::infinity();
    TokenIds best_ids;
    const ref::DecoderRun<double> d0 = ref::start_decoder(e);
    ref::DecoderRun<double> d = d0;
    const ref::Step<double> s0 = d.step(kBosId, e.states, p);
    auto consider = [&](double score, TokenIds ids) {
      if (score > best) {
        best = score;
        best_ids = std::move(ids);
      }
    };
    consider(ref::log_prob(s0.logits, kEosId), {});
    for (TokenId a = 0; a < static_cast<TokenId>(V); ++a) {
      if (a == kEosId) continue;
      ref::DecoderRun<double> da = d;
      const ref::Step<double> s1 = da.step(a, e.states, p);
      const double la = ref::log_prob(s0.logits, a);
      consider(la + ref::log_prob(s1.logits, kEosId), {a});
      for (TokenId b = 0; b < static_cast<TokenId>(V); ++b) {
        if (b != kEosId) consider(la + ref::log_prob(s1.logits, b), {a, b});
      }
    }

    DecodeOptions opt;
    opt.max_len = 2;
    const Hypothesis h = beam_decode(p, cfg, src, V, opt);
    EXPECT_EQ(h.ids, best_ids) << "trial " << trial;
    EXPECT_NEAR(h.score, best, 1e-12);
  }
}

TEST(Beam, ScoreEqualsForcedDecoding) {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelConfig cfg = small_config(10, AttentionKind::kConcat, trial % 2 == 0);
    const ModelParams p = init_params(cfg, 40 + trial, 1.0);
    const TokenIds src = random_source(rng, cfg.src_vocab, 6);
    const Hypothesis h = beam_decode(p, cfg, src, 4);
    EXPECT_NEAR(h.score, forced_score(p, cfg, src, h.ids, h.finished), 1e-10);
    expect_rows_normalised(h);
    EXPECT_EQ(h.attention.rows(), static_cast<Eigen::Index>(h.ids.size()));
  }
}

TEST(Beam, RejectsZeroWidth) { EXPECT_THROW(beam_decode(init_params(small_config(), 1), small_config(), {4}, 0), Error); }

TEST(ReplaceUnk, WorkedExample) {
  const Sentence src = words("Offering a restaurant, Hodor Eco-lodge is located in Winterfell.");
  const Sentence raw = words("Das <unk> <unk> in <unk> bietet ein Restaurant.");
  ASSERT_EQ(raw.size(), 9u);
  RowMatrix att = RowMatrix::Constant(9, static_cast<Eigen::Index>(src.size()), 0.01);
  auto peak = [&](Eigen::Index row, Eigen::Index col) { att(row, col) = 0.5; };
  peak(1, 4);  // Hodor
  peak(2, 5);  // Eco-lodge
  peak(4, 9);  // Winterfell
  att.array().colwise() /= att.rowwise().sum().array();
  EXPECT_EQ(detokenize(replace_unk(raw, att, src)), "Das Hodor Eco-lodge in Winterfell bietet ein Restaurant.");
}

TEST(ReplaceUnk, NoUnkUnchangedAndSingletonSource) {
  const Sentence out = words("ein Hotel .");
  const RowMatrix att = RowMatrix::Constant(3, 2, 0.5);
  EXPECT_EQ(replace_unk(out, att, words("a hotel")).tokens, out.tokens);
  const Sentence unks = Sentence::from_tokens({"<unk>", "x", "<unk>"});
  EXPECT_EQ(replace_unk(unks, RowMatrix::Ones(3, 1), words("Hodor")).tokens,
            (std::vector<std::string>{"Hodor", "x", "Hodor"}));
}

TEST(ReplaceUnk, TiesGoLeftmost) {
  const Sentence unks = Sentence::from_tokens({"<unk>"});
  EXPECT_EQ(replace_unk(unks, RowMatrix::Constant(1, 3, 1.0 / 3), words("a b c")).tokens[0], "a");
}

TEST(ReplaceUnk, DimensionMismatch) {
  const Sentence unks = Sentence::from_tokens({"<unk>", "x"});
  try {
    replace_unk(unks, RowMatrix::Ones(2, 2), words("a b c"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimensionMismatch);
  }
  EXPECT_THROW(replace_unk(unks, RowMatrix::Ones(1, 3), words("a b c")), Error);
}

TEST(ReplaceUnk, RandomCasesNeverLeaveUnk) {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t T = 1 + rng.below(8), n = rng.below(10);
    std::vector<std::string> src, out;
    for (std::size_t i = 0; i < T; ++i) src.push_back("s" + std::to_string(i));
    for (std::size_t i = 0; i < n; ++i) out.push_back(rng.bernoulli(0.4) ? "<unk>" : "o" + std::to_string(rng.below(5)));
    RowMatrix att(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(T));
    for (Eigen::Index r = 0; r < att.rows(); ++r)
      for (Eigen::Index c = 0; c < att.cols(); ++c) att(r, c) = rng.uniform();
    const Sentence o = Sentence::from_tokens(out);
    const Sentence got = replace_unk(o, att, Sentence::from_tokens(src));
    ASSERT_EQ(got.size(), o.size());
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NE(got.tokens[i], "<unk>");
      if (out[i] != "<unk>") {
        EXPECT_EQ(got.tokens[i], out[i]);
      } else {
        Eigen::Index arg = 0;
        att.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
        EXPECT_EQ(got.tokens[i], src[static_cast<std::size_t>(arg)]);
      }
    }
  }
}

TEST(Sidecar, RoundTrip) {
  RowMatrix a(2, 3);
  a << 0.2, 0.3, 0.5, 1.0 / 3, 1.0 / 3, 1.0 / 3;
  const std::string line = attention_to_json_line(a);
  EXPECT_EQ(line.substr(0, 9), "{\"rows\":[");
  EXPECT_NE(line.find("\"src_len\":3"), std::string::npos);
  EXPECT_TRUE(attention_from_json_line(line, 1) == a);
  EXPECT_EQ(attention_from_json_line("{\"rows\":[],\"src_len\":4}", 1).rows(), 0);
  EXPECT_THROW(attention_from_json_line("{\"rows\":[[1,2]],\"src_len\":3}", 7), Error);
  EXPECT_THROW(attention_from_json_line("not json", 2), Error);
}

TEST(Sidecar, StandaloneReplacement) {
  RowMatrix att = RowMatrix::Zero(4, 4);
  att(0, 0) = att(1, 1) = att(2, 2) = att(3, 3) = 1.0;
  EXPECT_EQ(replace_unk_line("Willkommen in <unk>.", att, "Welcome to Winterfell ."), "Willkommen in Winterfell.");
}

namespace {

ModelBundle tiny_bundle() {
  ModelBundle m;
  ParallelCorpus c;
  for (const char* s : {"the hotel is nice .", "a pool .", "the hotel has a pool ."}) {
    c.pairs.push_back({tokenize(s), tokenize(s)});
  }
  m.src_vocab = build_vocabulary(c, Side::kSource, 100);
  m.tgt_vocab = build_vocabulary(c, Side::kTarget, 100);
  m.src_truecaser = build_truecaser(c, Side::kSource);
  m.tgt_truecaser = build_truecaser(c, Side::kTarget);
  m.config = small_config(m.tgt_vocab.size());
  m.config.src_vocab = m.src_vocab.size();
  m.params = init_params(m.config, 3, 1.0);
  return m;
}

}  // namespace

TEST(TranslateFile, PreservesLineCountAndOrder) {
  const auto dir = std::filesystem::temp_directory_path() / "nmtdesk_decode_test";
  std::filesystem::create_directories(dir);
  const std::string in = (dir / "in.txt").string(), out = (dir / "out.txt").string(),
                    side = (dir / "att.jsonl").string();
  const ModelBundle m = tiny_bundle();

  write_file(in, "");
  translate_file(m, in, out, {});
  EXPECT_EQ(read_file(out), "");

  write_lines(in, {"The hotel is nice.", "", "Hodor has a pool.", "a pool"});
  TranslateOptions opt;
  opt.threads = 3;
  translate_file(m, in, out, opt, side);
  const auto lines = read_lines(out);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[1], "");
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(lines[i], i == 1 ? "" : translate_line(m, read_lines(in)[i], {}).text);
  EXPECT_EQ(read_lines(side).size(), 4u);
  const std::string first = read_file(out);
  translate_file(m, in, out, {});
  EXPECT_EQ(read_file(out), first);
  std::filesystem::remove_all(dir);
}

TEST(TranslateLine, UnknownSourceWordIsCopied) {
  ModelBundle m = tiny_bundle();
  m.params.out_b.data[kUnkId] = 50.0;  // first step always <unk>
  DecodeOptions opt;
  opt.max_len = 1;
  TranslateOptions t;
  t.decode = opt;
  EXPECT_EQ(translate_line(m, "Hodor", t).text, "Hodor");
  t.unk_replace = false;
  EXPECT_EQ(translate_line(m, "Hodor", t).text, "<unk>");
}

// Wider beams are not monotone in general (a narrow beam can luck into a path
// a wider one prunes), but an exhaustive beam dominates every narrower one.
TEST(Beam, ExhaustiveWidthDominatesNarrowerBeams) {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelConfig cfg = small_config(6);
    const ModelParams p = init_params(cfg, 70 + trial, 1.5);
    const TokenIds src = random_source(rng, cfg.src_vocab, 5);
    DecodeOptions opt;
    opt.max_len = 2;
    const double full = beam_decode(p, cfg, src, 6 * 6, opt).score;
    for (std::size_t b = 1; b <= 6; ++b) EXPECT_GE(full, beam_decode(p, cfg, src, b, opt).score);
  }
}
