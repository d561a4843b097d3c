#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "nmtdesk/evaluation.hpp"
#include "nmtdesk/random.hpp"
#include "oracles.hpp"

using namespace nmtdesk;

namespace {

Sentence S(std::initializer_list<const char*> words) {
  std::vector<std::string> t;
  for (const char* w : words) t.emplace_back(w);
  return Sentence::from_tokens(std::move(t));
}

Sentence chars(const std::string& s) { return Sentence::from_tokens(oracle::split_chars(s)); }

Sentence random_words(Rng& rng, std::size_t max_len, std::size_t alphabet) {
  std::vector<std::string> t(rng.below(max_len + 1));
  for (auto& w : t) w = "w" + std::to_string(rng.below(alphabet));
  return Sentence::from_tokens(std::move(t));
}

}  // namespace

TEST(Ngrams, CountsWithMultiplicity) {
  const NgramCounts uni = ngram_counts(S({"a", "b", "a"}), 1);
  EXPECT_EQ(uni.size(), 2u);
  EXPECT_EQ(uni.at({"a"}), 2u);
  EXPECT_EQ(uni.at({"b"}), 1u);
  const NgramCounts tri = ngram_counts(S({"a", "b", "a"}), 3);
  ASSERT_EQ(tri.size(), 1u);
  EXPECT_EQ(tri.at({"a", "b", "a"}), 1u);
  EXPECT_TRUE(ngram_counts(S({"a", "b"}), 3).empty());
  EXPECT_THROW(ngram_counts(S({"a"}), 0), Error);
}

TEST(Bleu, IdenticalIsHundred) {
  const std::vector<Sentence> refs = {S({"the", "cat", "sat", "on", "the", "mat", "."}),
                                      S({"a", "b", "c", "d", "e"})};
  const BleuReport r = bleu_corpus(refs, refs);
  EXPECT_DOUBLE_EQ(r.bleu, 100.0);
  for (double p : r.precisions) EXPECT_DOUBLE_EQ(p, 1.0);
  EXPECT_DOUBLE_EQ(r.brevity_penalty, 1.0);
}

TEST(Bleu, ClippedUnigramPrecision) {
  const BleuReport r = bleu_corpus({S({"the", "the", "the", "the", "the", "the", "the"})},
                                   {S({"the", "cat", "is", "on", "the", "mat"})});
  EXPECT_DOUBLE_EQ(r.precisions[0], 2.0 / 7.0);
  EXPECT_EQ(r.bleu, 0.0);  // no bigram matches, no smoothing
}

TEST(Bleu, BrevityPenalty) {
  const Sentence ref = S({"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"});
  const Sentence hyp = S({"a", "b", "c", "d", "e", "f", "g", "h", "i"});
  const BleuReport r = bleu_corpus({hyp}, {ref});
  for (double p : r.precisions) EXPECT_DOUBLE_EQ(p, 1.0);
  EXPECT_NEAR(r.brevity_penalty, std::exp(1.0 - 10.0 / 9.0), 1e-15);
  EXPECT_NEAR(r.brevity_penalty, 0.894839, 1e-6);
  EXPECT_NEAR(r.bleu, 89.48, 0.005);
}

TEST(Bleu, Errors) {
  EXPECT_THROW(bleu_corpus({}, {}), Error);
  try {
    bleu_corpus({S({"a"})}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kLengthMismatch);
  }
  try {
    bleu_corpus({}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEmptyCorpus);
  }
}

TEST(Bleu, EmptyHypothesisSideStaysInRange) {
  const BleuReport r = bleu_corpus({S({})}, {S({"a", "b"})});
  EXPECT_EQ(r.bleu, 0.0);
  EXPECT_GT(r.brevity_penalty, 0.0);
  EXPECT_LE(r.brevity_penalty, 1.0);
}

TEST(Bleu, MatchesOracleOnRandomCorpora) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Sentence> hyps, refs;
    std::vector<oracle::Words> oh, orr;
    const std::size_t n = 1 + rng.below(20);
    for (std::size_t i = 0; i < n; ++i) {
      hyps.push_back(random_words(rng, 15, 6));
      refs.push_back(random_words(rng, 15, 6));
      oh.push_back(hyps.back().tokens);
      orr.push_back(refs.back().tokens);
    }
    const double got = bleu_corpus(hyps, refs).bleu;
    EXPECT_NEAR(got, static_cast<double>(oracle::bleu(oh, orr)), 1e-9) << "trial " << trial;
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 100.0);
  }
}

TEST(Bleu, ClippedNeverExceedsUnclipped) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Sentence h = random_words(rng, 12, 4), r = random_words(rng, 12, 4);
    const BleuStats st = sentence_bleu_stats(h.tokens, r.tokens);
    for (int n = 1; n <= kBleuOrder; ++n) {
      const NgramCounts hc = ngram_counts(h, n), rc = ngram_counts(r, n);
      std::uint64_t unclipped = 0;
      for (const auto& [g, c] : hc)
        if (rc.count(g)) unclipped += c;
      EXPECT_LE(st.matches[n - 1], unclipped);
    }
  }
}

TEST(Bleu, PermutationInvariant) {
  Rng rng(9);
  std::vector<Sentence> hyps, refs;
  for (int i = 0; i < 30; ++i) {
    hyps.push_back(random_words(rng, 10, 5));
    refs.push_back(random_words(rng, 10, 5));
  }
  const double before = bleu_corpus(hyps, refs).bleu;
  std::vector<std::size_t> perm(hyps.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<Sentence> ph, pr;
  for (std::size_t i : perm) {
    ph.push_back(hyps[i]);
    pr.push_back(refs[i]);
  }
  EXPECT_DOUBLE_EQ(bleu_corpus(ph, pr).bleu, before);
}

TEST(Bleu, FormatLine) {
  const std::vector<Sentence> refs = {S({"a", "b", "c", "d"})};
  EXPECT_EQ(format_bleu(bleu_corpus(refs, refs)),
            "BLEU = 100.00, 100.0/100.0/100.0/100.0 (BP=1.000, ratio=1.000, hyp_len=4, ref_len=4)");
}

TEST(Wer, Examples) {
  EXPECT_EQ(wer(S({"a", "b"}), S({"a", "b"})).wer, 0.0);
  const WerReport one = wer(S({"a", "x", "c"}), S({"a", "b", "c"}));
  EXPECT_EQ(one.edits, 1u);
  EXPECT_DOUBLE_EQ(one.wer, 1.0 / 3.0);
  EXPECT_EQ(one.neg_wer, -one.wer);
  const WerReport del = wer(S({}), S({"a", "b", "c", "d"}));
  EXPECT_EQ(del.edits, 4u);
  EXPECT_DOUBLE_EQ(del.wer, 1.0);
  EXPECT_GT(wer(S({"a", "b", "c"}), S({"z"})).wer, 1.0);
}

TEST(Wer, EmptyReference) {
  try {
    wer(S({"a"}), S({}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEmptyReference);
  }
  EXPECT_THROW(wer_corpus({S({"a"})}, {S({})}), Error);
}

TEST(Wer, CorpusIsMicroAverage) {
  const WerReport r = wer_corpus({S({"a"}), S({"x", "y", "z", "w"})}, {S({"b"}), S({"x", "y", "z", "w"})});
  EXPECT_EQ(r.edits, 1u);
  EXPECT_EQ(r.ref_len, 5u);
  EXPECT_DOUBLE_EQ(r.wer, 0.2);
}

TEST(Wer, MatchesBreadthFirstOracleUpToLengthFour) {
  const auto strings = oracle::all_strings("abc", 4);
  for (const std::string& a : strings) {
    for (const std::string& b : strings) {
      const std::size_t want = oracle::bfs_edit_distance(a, b, "abc");
      const std::size_t got = edit_distance(chars(a).tokens, chars(b).tokens);
      ASSERT_EQ(got, want) << "'" << a << "' -> '" << b << "'";
    }
  }
}

TEST(Wer, EditCountSymmetric) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const Sentence a = random_words(rng, 8, 3), b = random_words(rng, 8, 3);
    EXPECT_EQ(edit_distance(a.tokens, b.tokens), edit_distance(b.tokens, a.tokens));
  }
}

TEST(LengthBins, TwentyIntoTen) {
  std::vector<std::size_t> lengths(20);
  std::iota(lengths.begin(), lengths.end(), 1);
  std::reverse(lengths.begin(), lengths.end());
  const auto bin = assign_length_bins(lengths, 10);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(bin[i], (lengths[i] - 1) / 2);
}

TEST(LengthBins, EqualLengthsSplitByIndexLargerFirst) {
  const auto bin = assign_length_bins(std::vector<std::size_t>(7, 4), 3);
  EXPECT_EQ(bin, (std::vector<std::size_t>{0, 0, 0, 1, 1, 2, 2}));
}

TEST(LengthBins, SingletonsWhenKEqualsN) {
  const auto bin = assign_length_bins(std::vector<std::size_t>{5, 1, 3}, 3);
  EXPECT_EQ(bin, (std::vector<std::size_t>{2, 0, 1}));
}

TEST(LengthBins, TooFew) {
  try {
    assign_length_bins(std::vector<std::size_t>{1, 2}, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kTooFewSentences);
  }
}

TEST(LengthBins, PartitionProperty) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng.below(10);
    const std::size_t n = k + rng.below(200);
    std::vector<std::size_t> lengths(n);
    for (auto& l : lengths) l = 1 + rng.below(30);
    const auto bin = assign_length_bins(lengths, k);
    std::vector<std::size_t> count(k, 0), lo(k, 1000), hi(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ASSERT_LT(bin[i], k);
      ++count[bin[i]];
      lo[bin[i]] = std::min(lo[bin[i]], lengths[i]);
      hi[bin[i]] = std::max(hi[bin[i]], lengths[i]);
    }
    EXPECT_EQ(std::accumulate(count.begin(), count.end(), std::size_t{0}), n);
    for (std::size_t b = 0; b < k; ++b) {
      EXPECT_TRUE(count[b] == n / k || count[b] == n / k + 1);
      if (b > 0) {
        EXPECT_LE(count[b], count[b - 1]);
        EXPECT_LE(hi[b - 1], lo[b]);
      }
    }
  }
}

TEST(BinnedQuality, PerfectAndCorruptedBin) {
  Rng rng(4);
  std::vector<Sentence> src, ref;
  for (std::size_t i = 0; i < 100; ++i) {
    std::vector<std::string> t;
    for (std::size_t j = 0; j < 4 + i / 10; ++j) t.push_back("t" + std::to_string(rng.below(50)));
    src.push_back(Sentence::from_tokens(t));
    ref.push_back(Sentence::from_tokens(t));
  }
  const LengthBinReport perfect = binned_quality(ref, ref, src, 10);
  for (const LengthBin& b : perfect.bins) {
    EXPECT_DOUBLE_EQ(b.bleu, 100.0);
    EXPECT_EQ(b.neg_wer, 0.0);
    EXPECT_EQ(b.count, 10u);
  }
  std::vector<Sentence> hyp = ref;
  const auto bin = assign_length_bins(src, 10);
  for (std::size_t i = 0; i < hyp.size(); ++i)
    if (bin[i] == 3) hyp[i].tokens[1] = "WRONG";
  const LengthBinReport r = binned_quality(hyp, ref, src, 10);
  for (std::size_t b = 0; b < 10; ++b) {
    if (b == 3) {
      EXPECT_LT(r.bins[b].bleu, 100.0);
      EXPECT_LT(r.bins[b].neg_wer, 0.0);
    } else {
      EXPECT_DOUBLE_EQ(r.bins[b].bleu, 100.0);
      EXPECT_EQ(r.bins[b].neg_wer, 0.0);
    }
  }
}

TEST(Report, CsvAndCanonicalJson) {
  LengthBinReport r;
  for (std::size_t b = 0; b < 10; ++b) r.bins.push_back({b + 1, b + 2, 100, 45.6449 + b, -0.25});
  const std::string csv = length_bins_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 11);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "bin_index,min_len,max_len,count,bleu,neg_wer");
  EXPECT_NE(csv.find("\n0,1,2,100,45.64,-0.2500\n"), std::string::npos);

  const std::string json = canonical_json(to_json(r));
  EXPECT_EQ(canonical_json(nlohmann::ordered_json::parse(json)), json);

  const auto dir = std::filesystem::temp_directory_path() / "nmtdesk_eval_test";
  std::filesystem::create_directories(dir);
  emit_report(r, ReportFormat::kCsv, (dir / "r.csv").string());
  EXPECT_EQ(read_file((dir / "r.csv").string()), csv);
  emit_report(r, ReportFormat::kJson, (dir / "r.json").string());
  EXPECT_EQ(read_file((dir / "r.json").string()), json);
  std::filesystem::remove_all(dir);
}

TEST(Protocol, TruecasesSentenceInitialWord) {
  const std::vector<std::string> refs = {"the hotel is nice .", "The hotel has a pool .", "We like the hotel ."};
  const auto tc = eval_truecaser(refs);
  ASSERT_TRUE(tc.has_value());
  const auto hyps = prepare_eval_side({"The hotel is nice."}, &*tc, {});
  EXPECT_EQ(hyps[0].tokens, (std::vector<std::string>{"the", "hotel", "is", "nice", "."}));
  const auto raw = prepare_eval_side({"The hotel is nice."}, &*tc, {false, false});
  EXPECT_EQ(raw[0].tokens[0], "The");
}
