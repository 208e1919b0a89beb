#include <doctest.h>

#include <fstream>
#include <regex>

#include "mtlforge/error.hpp"
#include "mtlforge/textnorm.hpp"
#include "support/fuzz_text.hpp"
#include "support/segment_oracle.hpp"

using namespace mtlforge;
using namespace mtlforge::textnorm;

namespace {

const Lexicon& shipped_lexicon() {
  static const Lexicon lex = Lexicon::load(std::string(MTLFORGE_DATA_DIR) + "/lexicon.tsv");
  return lex;
}

const EmojiTable& shipped_emoji() {
  static const EmojiTable t = EmojiTable::load(std::string(MTLFORGE_DATA_DIR) + "/emoji.tsv");
  return t;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

}  // namespace

TEST_CASE("mask normalization examples") {
  NormConfig cfg;
  CHECK(normalize_masks("@john check https://x.com/a", cfg) == "[USER] check [URL]");
  CHECK(normalize_masks("<user> hi URL", cfg) == "[USER] hi [URL]");
  CHECK(normalize_masks("no handles here", cfg) == "no handles here");
  CHECK(normalize_masks("@USER said HTTPURL", cfg) == "[USER] said [URL]");
  CHECK(normalize_masks("URLs are not URL", cfg) == "URLs are not [URL]");

  NormConfig custom;
  custom.user_token = "<USR$1>";
  custom.url_token = "LINK";
  custom.validate();
  CHECK(normalize_masks("@a www.b.c", custom) == "<USR$1> LINK");
}

TEST_CASE("mask tokens are validated") {
  NormConfig cfg;
  cfg.user_token = "";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.user_token = "a b";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.user_token = "@x";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.user_token = "URL";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.user_token = "[URL]";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(NormConfig{}.validate());
}

TEST_CASE("mask normalization is idempotent and removes handles and URLs on fuzzed input") {
  NormConfig cfg;
  numerics::Rng rng(17);
  const std::regex handle(R"(@\w)");
  const std::regex url(R"(https?://)", std::regex::icase);
  for (int i = 0; i < 2000; ++i) {
    const std::string s = testing::fuzz_social_text(rng);
    const std::string once = normalize_masks(s, cfg);
    CAPTURE(s);
    CHECK(normalize_masks(once, cfg) == once);
    CHECK_FALSE(std::regex_search(once, handle));
    CHECK_FALSE(std::regex_search(once, url));
  }
}

TEST_CASE("hashtag segmentation examples") {
  const auto& lex = shipped_lexicon();
  CHECK(segment_hashtags("#hello", lex) == "hello");
  CHECK(segment_hashtags("#metoo", lex) == "me too");
  CHECK(segment_hashtags("love #catsofinstagram", lex) == "love cats of instagram");
  CHECK(segment_hashtags("#MeToo now", lex) == "me too now");
  CHECK(segment_hashtags("plain text # here", lex) == "plain text # here");
  CHECK(segment_hashtags("#metoo#timesup", lex) == "me too times up");

  // Bodies with no in-lexicon split pass through with '#' stripped.
  auto small = Lexicon::from_counts({{"hello", 50}, {"world", 30}});
  CHECK(segment_hashtags("#helloworld", small) == "hello world");
  CHECK(segment_hashtags("say #QQQ", small) == "say QQQ");
}

TEST_CASE("hashtag segmentation agrees with the exhaustive oracle") {
  const auto& lex = shipped_lexicon();
  for (const std::string body : {"metoo", "catsofinstagram", "hello"}) {
    auto oracle = testing::exhaustive_segmentation(body, lex);
    CHECK(join(segment_word(body, lex)) == join(oracle.words));
  }
  CHECK(join(testing::exhaustive_segmentation("metoo", lex).words) == "me too");
  CHECK(join(testing::exhaustive_segmentation("catsofinstagram", lex).words) == "cats of instagram");
}

TEST_CASE("segmentation is a partition of the lowercased body") {
  const auto& lex = shipped_lexicon();
  std::ifstream in(std::string(MTLFORGE_FIXTURE_DIR) + "/hashtags.txt");
  std::string body;
  int n = 0;
  while (std::getline(in, body)) {
    if (body.empty()) continue;
    std::string out = segment_hashtags("#" + body, lex);
    std::string joined;
    for (char c : out) {
      if (c != ' ') joined += c;
    }
    CHECK(joined == body);
    ++n;
  }
  CHECK(n >= 20);
}

TEST_CASE("lexicon loading rejects malformed rows") {
  CHECK_THROWS_AS(Lexicon::from_counts({{"Word", 3}}), SchemaError);
  CHECK_THROWS_AS(Lexicon::from_counts({{"word", 0}}), SchemaError);
  CHECK_THROWS_AS(Lexicon::from_counts({{"a", 1}, {"a", 2}}), SchemaError);
  CHECK_THROWS_AS(Lexicon::from_counts({}), SchemaError);
  CHECK_THROWS_AS(Lexicon::load("/nonexistent/lexicon.tsv"), IoError);
  auto lex = Lexicon::from_counts({{"a", 3}, {"b", 1}});
  CHECK(lex.total() == 4);
  CHECK(lex.log_prob("a") == doctest::Approx(std::log(0.75)));
  CHECK(lex.log_prob("zz") == doctest::Approx(-6.0 * std::log(10.0) - std::log(4.0)));
}

TEST_CASE("emoji conversion") {
  const auto& t = shipped_emoji();
  CHECK(t.size() > 3000);
  CHECK(emojis_to_text("😂", t) == "face with tears of joy");
  CHECK(emojis_to_text("good 😂😂", t) == "good face with tears of joy face with tears of joy");
  CHECK(emojis_to_text("nothing to see", t) == "nothing to see");
  CHECK(emojis_to_text("I ❤️ you", t) == "I red heart you");
  CHECK(emojis_to_text("👍🏽", t) == "thumbs up medium skin tone");
  CHECK(emojis_to_text("café ☕!", t) == "café hot beverage !");

  auto small = EmojiTable::from_entries({{"\xF0\x9F\x98\x82", "joy"}});
  CHECK(emojis_to_text("a🔥b", small) == "a🔥b");
  CHECK_THROWS_AS(EmojiTable::from_entries({{"x", "keycap #"}}), SchemaError);
}

TEST_CASE("preprocess toggles and stage order") {
  const auto& lex = shipped_lexicon();
  const auto& t = shipped_emoji();
  const std::string input = "@a #metoo 😂";

  NormConfig masks_only{.masks = true, .emoji = false, .hashtags = false};
  CHECK(preprocess(input, masks_only, lex, t) == "[USER] #metoo 😂");

  NormConfig submitted{.masks = true, .emoji = true, .hashtags = false};
  CHECK(preprocess(input, submitted, lex, t) == "[USER] #metoo face with tears of joy");

  NormConfig all_on{.masks = true, .emoji = true, .hashtags = true};
  CHECK(preprocess(input, all_on, lex, t) == "[USER] me too face with tears of joy");

  // Composition of the stage functions.
  const std::string composed = segment_hashtags(emojis_to_text(normalize_masks(input, all_on), t), lex);
  CHECK(preprocess(input, all_on, lex, t) == composed);

  // A URL fragment that looks like a hashtag never reaches segmentation.
  CHECK(preprocess("see https://x.com/#metoo", all_on, lex, t) == "see [URL]");
}

TEST_CASE("submitted-setting goldens") {
  Preprocessor pre(NormConfig{.masks = true, .emoji = true, .hashtags = false}, shipped_lexicon(),
                   shipped_emoji());
  std::ifstream in(std::string(MTLFORGE_FIXTURE_DIR) + "/preprocess_goldens.tsv");
  REQUIRE(in);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto tab = line.find('\t');
    REQUIRE(tab != std::string::npos);
    CHECK(pre(line.substr(0, tab)) == line.substr(tab + 1));
    ++n;
  }
  CHECK(n == 12);
}
