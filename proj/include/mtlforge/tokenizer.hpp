#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mtlforge::tokenizer {

inline constexpr std::int64_t kPad = 0;
inline constexpr std::int64_t kUnk = 1;
inline constexpr std::int64_t kCls = 2;
inline constexpr std::int64_t kSep = 3;
inline constexpr std::int64_t kMask = 4;
inline constexpr std::size_t kNumSpecials = 5;

/// Lowercases ASCII, splits on whitespace, and emits each ASCII punctuation
/// character as its own token. Bracketed words such as "[USER]" stay whole.
std::vector<std::string> tokenize(std::string_view text);

/// The token sequence joined by single spaces.
std::string canonical_text(std::string_view text);

class Vocab {
 public:
  /// Tokens ordered by (-frequency, token); only those seen >= min_freq times.
  static Vocab build(std::span<const std::string> texts, std::size_t min_freq = 1);
  static Vocab load(const std::filesystem::path& path);
  static Vocab parse(std::string_view contents);

  /// "token<TAB>id" per line, specials first.
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::size_t min_freq() const { return min_freq_; }
  std::optional<std::int64_t> find(const std::string& token) const;
  std::int64_t id_or_unk(const std::string& token) const;
  const std::string& token(std::int64_t id) const;
  static bool is_special(std::int64_t id) { return id >= 0 && id < static_cast<std::int64_t>(kNumSpecials); }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> ids_;
  std::size_t min_freq_ = 0;
};

struct Encoding {
  std::vector<std::int64_t> ids;
  std::vector<std::int64_t> mask;  // 1 for real tokens, 0 for padding
};

/// [CLS] tokens... [SEP], truncated so [SEP] is always kept, then padded.
Encoding encode(std::string_view text, const Vocab& vocab, std::size_t max_len);

/// Drops PAD/CLS/SEP and joins the remaining tokens with spaces.
std::string decode(std::span<const std::int64_t> ids, const Vocab& vocab);

}  // namespace mtlforge::tokenizer
