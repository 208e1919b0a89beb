#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mtlforge::textnorm {

/// Toggles for the three normalization stages and the canonical mask tokens.
struct NormConfig {
  bool masks = true;
  bool emoji = true;
  bool hashtags = false;
  std::string user_token = "[USER]";
  std::string url_token = "[URL]";

  /// Tokens must be non-empty, whitespace-free, distinct, and must not
  /// themselves look like a handle or URL.
  void validate() const;
};

/// Unigram frequency model used for hashtag segmentation.
class Lexicon {
 public:
  Lexicon() = default;
  static Lexicon from_counts(std::vector<std::pair<std::string, std::uint64_t>> counts);
  /// "word<TAB>count" per line.
  static Lexicon load(const std::filesystem::path& path);

  std::size_t size() const { return counts_.size(); }
  std::uint64_t total() const { return total_; }
  bool contains(const std::string& word) const { return counts_.count(word) != 0; }
  std::uint64_t count(const std::string& word) const;

  /// Natural-log probability: count/total for known words, otherwise
  /// 10^(-3*len)/total.
  double log_prob(const std::string& word) const;

 private:
  std::unordered_map<std::string, std::uint64_t> counts_;
  std::uint64_t total_ = 0;
  double log_total_ = 0.0;
};

/// Emoji sequence -> space-separated phrase.
class EmojiTable {
 public:
  EmojiTable() = default;
  static EmojiTable from_entries(const std::vector<std::pair<std::string, std::string>>& entries);
  /// "emoji<TAB>phrase" per line, UTF-8.
  static EmojiTable load(const std::filesystem::path& path);

  std::size_t size() const { return phrases_.size(); }
  const std::string* lookup(std::string_view emoji) const;
  std::size_t max_key_bytes() const { return max_key_bytes_; }
  bool may_start(unsigned char byte) const { return first_bytes_[byte]; }

 private:
  std::unordered_map<std::string, std::string> phrases_;
  std::size_t max_key_bytes_ = 0;
  bool first_bytes_[256] = {};
};

std::string normalize_masks(std::string_view text, const NormConfig& config);

/// Maximum-likelihood split of a lowercase ASCII body under the lexicon.
std::vector<std::string> segment_word(std::string_view body, const Lexicon& lexicon);

std::string segment_hashtags(std::string_view text, const Lexicon& lexicon);

std::string emojis_to_text(std::string_view text, const EmojiTable& table);

/// masks -> emoji -> hashtags, each stage gated by its toggle.
std::string preprocess(std::string_view text, const NormConfig& config, const Lexicon& lexicon,
                       const EmojiTable& table);

/// Bundles the configuration with its resources for repeated use.
class Preprocessor {
 public:
  Preprocessor(NormConfig config, Lexicon lexicon, EmojiTable table);
  std::string operator()(std::string_view text) const {
    return preprocess(text, config_, lexicon_, table_);
  }
  const NormConfig& config() const { return config_; }

 private:
  NormConfig config_;
  Lexicon lexicon_;
  EmojiTable table_;
};

}  // namespace mtlforge::textnorm
