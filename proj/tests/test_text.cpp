#include <gtest/gtest.h>

#include "nmtdesk/random.hpp"
#include "nmtdesk/text.hpp"

using namespace nmtdesk;

using Tokens = std::vector<std::string>;

TEST(Tokenize, WorkedExampleSentence) {
  EXPECT_EQ(tokenize("Offering a restaurant, Hodor Eco-lodge is located in Winterfell.").tokens,
            (Tokens{"Offering", "a", "restaurant", ",", "Hodor", "Eco-lodge", "is", "located", "in", "Winterfell", "."}));
}

TEST(Tokenize, Trivial) {
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_TRUE(tokenize("   \t ").empty());
  EXPECT_EQ(tokenize("a b").tokens, (Tokens{"a", "b"}));
}

TEST(Tokenize, PunctuationAndWordInternals) {
  EXPECT_EQ(tokenize("(free) \"Wi-Fi\"; it's 3.5 km, 1,000 m!?").tokens,
            (Tokens{"(", "free", ")", "\"", "Wi-Fi", "\"", ";", "it's", "3.5", "km", ",", "1,000", "m", "!", "?"}));
}

TEST(Tokenize, NoEmptyOrSpacedTokens) {
  for (const Sentence& s : {tokenize("a ,, b .. (( c"), tokenize(" \" . ")}) {
    for (const std::string& t : s.tokens) {
      EXPECT_FALSE(t.empty());
      EXPECT_EQ(t.find_first_of(" \t"), std::string::npos);
    }
  }
}

TEST(Detokenize, Markers) {
  Sentence s = Sentence::from_tokens({"Hello", ",", "world", "."});
  s.joined = {false, true, false, true};
  EXPECT_EQ(detokenize(s), "Hello, world.");
  EXPECT_EQ(detokenize(Sentence{}), "");
}

TEST(Detokenize, InfersSpacingForModelOutput) {
  EXPECT_EQ(detokenize(Sentence::from_tokens({"Das", "Hotel", "(", "neu", ")", "hat", "\"", "WLAN", "\"", "."})),
            "Das Hotel (neu) hat \"WLAN\".");
}

TEST(Detokenize, RoundTripsWorkedExample) {
  const std::string line = "Offering a restaurant, Hodor Eco-lodge is located in Winterfell.";
  EXPECT_EQ(detokenize(tokenize(line)), line);
}

TEST(Detokenize, RoundTripProperty) {
  const std::string alphabet = "aZ9.,;:!?\"()-' \t";
  Rng rng(12);
  for (int trial = 0; trial < 2000; ++trial) {
    std::string line;
    const std::size_t n = rng.below(30);
    for (std::size_t i = 0; i < n; ++i) line += alphabet[rng.below(alphabet.size())];
    if (rng.bernoulli(0.2)) line += "\xc3\xa9t\xc3\xa9";  // été
    ASSERT_EQ(detokenize(tokenize(line)), normalize_whitespace(line)) << "'" << line << "'";
  }
}

TEST(Lowercase, Utf8) {
  EXPECT_EQ(utf8_lower("Hotel"), "hotel");
  EXPECT_EQ(utf8_lower("\xc3\x89T\xc3\x89"), "\xc3\xa9t\xc3\xa9");  // ÉTÉ -> été
  EXPECT_EQ(utf8_lower("\xc5\x81\xc3\x93" "D\xc5\xb9"), "\xc5\x82\xc3\xb3" "d\xc5\xba");  // ŁÓDŹ -> łódź
}

namespace {

Truecaser train_on(const std::vector<std::string>& lines) {
  std::vector<Sentence> ss;
  for (const std::string& l : lines) ss.push_back(tokenize(l));
  std::vector<const Sentence*> view;
  for (const Sentence& s : ss) view.push_back(&s);
  return Truecaser::train(view);
}

}  // namespace

TEST(Truecaser, MostFrequentForm) {
  std::vector<std::string> lines;
  for (int i = 0; i < 5; ++i) lines.push_back("The");
  for (int i = 0; i < 9; ++i) lines.push_back("the");
  const Truecaser tc = train_on(lines);
  EXPECT_EQ(tc.table().at("the"), "the");
  EXPECT_EQ(tc.apply(tokenize("The hotel")).tokens, (Tokens{"the", "hotel"}));
}

TEST(Truecaser, UnknownAndNonInitialUntouched) {
  const Truecaser tc = train_on({"the hotel", "the Pool"});
  EXPECT_EQ(tc.apply(tokenize("Winterfell The Hotel")).tokens, (Tokens{"Winterfell", "The", "Hotel"}));
  EXPECT_EQ(tc.apply(tokenize("POOL")).tokens, (Tokens{"Pool"}));
}

TEST(Truecaser, TiesGoToSmallestForm) {
  const Truecaser tc = train_on({"Paris", "paris"});
  EXPECT_EQ(tc.table().at("paris"), "Paris");
}

TEST(Truecaser, ValuesLowercaseToKeys) {
  const Truecaser tc = train_on({"The Hotel in Łódź.", "ÉTÉ été Été"});
  for (const auto& [k, v] : tc.table()) EXPECT_EQ(utf8_lower(v), k);
}

TEST(Truecaser, PositionAware) {
  const Truecaser tc = train_on({"the pool", "the bar", "The"});
  EXPECT_EQ(tc.apply(tokenize("The pool. The bar"), true).tokens, (Tokens{"the", "pool", ".", "the", "bar"}));
  EXPECT_EQ(tc.apply(tokenize("The pool. The bar"), false).tokens, (Tokens{"the", "pool", ".", "The", "bar"}));
}

TEST(Truecaser, EmptyCorpus) {
  try {
    Truecaser::train({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEmptyCorpus);
  }
}

TEST(Truecaser, SerializeRoundTrip) {
  const Truecaser tc = train_on({"The Hotel", "the hotel", "the Pool ."});
  const Truecaser back = Truecaser::deserialize(tc.serialize());
  EXPECT_EQ(back.table(), tc.table());
  EXPECT_THROW(Truecaser::deserialize("no tab here\n"), Error);
}
