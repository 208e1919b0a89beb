#include "mtlforge/textnorm.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <regex>

#include "mtlforge/error.hpp"

namespace mtlforge::textnorm {

namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }
bool is_alnum(unsigned char c) { return c < 128 && std::isalnum(c) != 0; }
bool is_continuation(unsigned char c) { return (c & 0xC0) == 0x80; }

std::string escape_format(const std::string& token) {
  std::string out;
  for (char c : token) {
    if (c == '$') out += '$';
    out += c;
  }
  return out;
}

std::string lower_ascii(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Reads a two-column TSV, rejecting lines without exactly one tab.
std::vector<std::pair<std::string, std::string>> read_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::pair<std::string, std::string>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": expected two tab-separated columns");
    }
    rows.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return rows;
}

struct MaskPatterns {
  std::regex url{R"((?:https?://|www\.)\S*)", std::regex::ECMAScript | std::regex::icase};
  std::regex legacy_url{R"(<url>|\{url\}|httpurl)", std::regex::ECMAScript | std::regex::icase};
  std::regex bare_url{R"((^|[^A-Za-z0-9_\[])URL(?![A-Za-z0-9_\]]))", std::regex::ECMAScript};
  std::regex legacy_user{R"(<user>|\{user\}|<mention>)", std::regex::ECMAScript | std::regex::icase};
  std::regex handle{R"(@\w+)", std::regex::ECMAScript};
};

const MaskPatterns& patterns() {
  static const MaskPatterns p;
  return p;
}

}  // namespace

void NormConfig::validate() const {
  for (const auto* tok : {&user_token, &url_token}) {
    if (tok->empty()) throw ConfigError("mask tokens must be non-empty");
    for (unsigned char c : *tok) {
      if (is_space(c)) throw ConfigError("mask token '" + *tok + "' contains whitespace");
    }
    const std::string low = lower_ascii(*tok);
    if (tok->find('@') != std::string::npos || low.find("http") != std::string::npos ||
        low.find("www.") != std::string::npos || tok->find('#') != std::string::npos) {
      throw ConfigError("mask token '" + *tok + "' would itself be rewritten by normalization");
    }
  }
  if (user_token == url_token) throw ConfigError("user and URL mask tokens must differ");
  for (const auto* tok : {&user_token, &url_token}) {
    if (normalize_masks(*tok, *this) != *tok) {
      throw ConfigError("mask token '" + *tok + "' is not a fixed point of mask normalization");
    }
  }
}

Lexicon Lexicon::from_counts(std::vector<std::pair<std::string, std::uint64_t>> counts) {
  Lexicon lex;
  for (auto& [word, n] : counts) {
    if (word.empty()) throw SchemaError("lexicon: empty word");
    if (lower_ascii(word) != word) throw SchemaError("lexicon: word '" + word + "' is not lowercase");
    if (n == 0) throw SchemaError("lexicon: count for '" + word + "' must be positive");
    if (!lex.counts_.emplace(word, n).second) throw SchemaError("lexicon: duplicate word '" + word + "'");
    lex.total_ += n;
  }
  if (lex.counts_.empty()) throw SchemaError("lexicon: no entries");
  lex.log_total_ = std::log(static_cast<double>(lex.total_));
  return lex;
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
  std::vector<std::pair<std::string, std::uint64_t>> counts;
  for (auto& [word, count] : read_tsv(path)) {
    std::uint64_t n = 0;
    try {
      std::size_t used = 0;
      n = std::stoull(count, &used);
      if (used != count.size()) throw std::invalid_argument(count);
    } catch (const std::exception&) {
      throw SchemaError(path.string() + ": bad count '" + count + "' for '" + word + "'");
    }
    counts.emplace_back(std::move(word), n);
  }
  return from_counts(std::move(counts));
}

std::uint64_t Lexicon::count(const std::string& word) const {
  auto it = counts_.find(word);
  return it == counts_.end() ? 0 : it->second;
}

double Lexicon::log_prob(const std::string& word) const {
  auto it = counts_.find(word);
  if (it != counts_.end()) return std::log(static_cast<double>(it->second)) - log_total_;
  return -3.0 * static_cast<double>(word.size()) * std::log(10.0) - log_total_;
}

EmojiTable EmojiTable::from_entries(const std::vector<std::pair<std::string, std::string>>& entries) {
  EmojiTable t;
  for (const auto& [emoji, phrase] : entries) {
    if (emoji.empty() || phrase.empty()) throw SchemaError("emoji table: empty emoji or phrase");
    if (phrase.find('#') != std::string::npos || is_space(phrase.front()) || is_space(phrase.back())) {
      throw SchemaError("emoji table: phrase '" + phrase + "' must be trimmed and contain no '#'");
    }
    t.phrases_[emoji] = phrase;
    t.max_key_bytes_ = std::max(t.max_key_bytes_, emoji.size());
    t.first_bytes_[static_cast<unsigned char>(emoji[0])] = true;
  }
  return t;
}

EmojiTable EmojiTable::load(const std::filesystem::path& path) { return from_entries(read_tsv(path)); }

const std::string* EmojiTable::lookup(std::string_view emoji) const {
  auto it = phrases_.find(std::string(emoji));
  return it == phrases_.end() ? nullptr : &it->second;
}

std::string normalize_masks(std::string_view text, const NormConfig& config) {
  const auto& p = patterns();
  const std::string url_fmt = escape_format(config.url_token);
  const std::string user_fmt = escape_format(config.user_token);
  std::string s(text);
  s = std::regex_replace(s, p.url, url_fmt);
  s = std::regex_replace(s, p.legacy_url, url_fmt);
  s = std::regex_replace(s, p.bare_url, "$1" + url_fmt);
  s = std::regex_replace(s, p.legacy_user, user_fmt);
  s = std::regex_replace(s, p.handle, user_fmt);
  return s;
}

std::vector<std::string> segment_word(std::string_view body, const Lexicon& lexicon) {
  const std::size_t n = body.size();
  if (n == 0) return {};
  std::vector<double> best(n + 1, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> back(n + 1, 0);
  best[0] = 0.0;
  for (std::size_t end = 1; end <= n; ++end) {
    for (std::size_t start = 0; start < end; ++start) {
      const double score = best[start] + lexicon.log_prob(std::string(body.substr(start, end - start)));
      if (score > best[end]) {
        best[end] = score;
        back[end] = start;
      }
    }
  }
  std::vector<std::string> words;
  for (std::size_t end = n; end > 0; end = back[end]) {
    words.emplace_back(body.substr(back[end], end - back[end]));
  }
  return {words.rbegin(), words.rend()};
}

std::string segment_hashtags(std::string_view text, const Lexicon& lexicon) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '#' && i + 1 < text.size() && is_alnum(static_cast<unsigned char>(text[i + 1]))) {
      std::size_t j = i + 1;
      while (j < text.size() && is_alnum(static_cast<unsigned char>(text[j]))) ++j;
      const std::string_view body = text.substr(i + 1, j - i - 1);
      const std::string lowered = lower_ascii(body);
      auto words = segment_word(lowered, lexicon);
      if (!out.empty() && is_alnum(static_cast<unsigned char>(out.back()))) out += ' ';
      if (words.size() == 1 && !lexicon.contains(words[0])) {
        out.append(body);
      } else {
        for (std::size_t w = 0; w < words.size(); ++w) {
          if (w) out += ' ';
          out += words[w];
        }
      }
      i = j;
    } else {
      out += text[i++];
    }
  }
  return out;
}

std::string emojis_to_text(std::string_view text, const EmojiTable& table) {
  static constexpr std::string_view kVariationSelector = "\xEF\xB8\x8F";
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t matched = 0;
    const std::string* phrase = nullptr;
    if (table.may_start(lead)) {
      const std::size_t limit = std::min(table.max_key_bytes(), text.size() - i);
      for (std::size_t len = limit; len > 0; --len) {
        if (i + len < text.size() && is_continuation(static_cast<unsigned char>(text[i + len]))) continue;
        if ((phrase = table.lookup(text.substr(i, len)))) {
          matched = len;
          break;
        }
      }
    }
    if (!phrase) {
      std::size_t len = 1;
      while (i + len < text.size() && is_continuation(static_cast<unsigned char>(text[i + len]))) ++len;
      out.append(text.substr(i, len));
      i += len;
      continue;
    }
    i += matched;
    if (text.substr(i, kVariationSelector.size()) == kVariationSelector) i += kVariationSelector.size();
    if (!out.empty() && !is_space(static_cast<unsigned char>(out.back()))) out += ' ';
    out += *phrase;
    if (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) out += ' ';
  }
  return out;
}

std::string preprocess(std::string_view text, const NormConfig& config, const Lexicon& lexicon,
                       const EmojiTable& table) {
  std::string s(text);
  if (config.masks) s = normalize_masks(s, config);
  if (config.emoji) s = emojis_to_text(s, table);
  if (config.hashtags) s = segment_hashtags(s, lexicon);
  return s;
}

Preprocessor::Preprocessor(NormConfig config, Lexicon lexicon, EmojiTable table)
    : config_(std::move(config)), lexicon_(std::move(lexicon)), table_(std::move(table)) {
  config_.validate();
}

}  // namespace mtlforge::textnorm
