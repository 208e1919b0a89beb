#include "mtlforge/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "mtlforge/error.hpp"

namespace mtlforge::tokenizer {

namespace {

const char* const kSpecialTokens[kNumSpecials] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
constexpr std::size_t kMaxBracketWord = 16;

bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c) != 0; }
bool is_ascii_space(unsigned char c) { return c < 128 && std::isspace(c) != 0; }
bool is_word_byte(unsigned char c) { return c >= 128 || std::isalnum(c) != 0 || c == '_'; }

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_ascii_space(c)) {
      flush();
      ++i;
    } else if (c == '[') {
      std::size_t j = i + 1;
      while (j < text.size() && j - i - 1 < kMaxBracketWord && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
      flush();
      if (j < text.size() && text[j] == ']' && j > i + 1 && j - i - 1 <= kMaxBracketWord) {
        std::string tok(text.substr(i, j - i + 1));
        for (char& ch : tok) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        out.push_back(std::move(tok));
        i = j + 1;
      } else {
        out.emplace_back(1, '[');
        ++i;
      }
    } else if (is_ascii_punct(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
      ++i;
    } else {
      cur += static_cast<char>(c < 128 ? std::tolower(c) : c);
      ++i;
    }
  }
  flush();
  return out;
}

std::string canonical_text(std::string_view text) {
  std::string out;
  for (const auto& tok : tokenize(text)) {
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

Vocab Vocab::build(std::span<const std::string> texts, std::size_t min_freq) {
  if (texts.empty()) throw ContractError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> freq;
  for (const auto& t : texts) {
    for (auto& tok : tokenize(t)) ++freq[std::move(tok)];
  }
  std::vector<std::pair<std::string, std::size_t>> entries;
  for (auto& [tok, n] : freq) {
    if (n >= std::max<std::size_t>(min_freq, 1)) entries.emplace_back(tok, n);
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  v.min_freq_ = min_freq;
  for (const char* s : kSpecialTokens) v.tokens_.emplace_back(s);
  for (auto& [tok, n] : entries) {
    // Lowercased text tokens can never equal the uppercase specials.
    v.tokens_.push_back(tok);
  }
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.ids_[v.tokens_[i]] = static_cast<std::int64_t>(i);
  return v;
}

Vocab Vocab::parse(std::string_view contents) {
  std::vector<std::pair<std::string, std::int64_t>> rows;
  std::istringstream in{std::string(contents)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw SchemaError("vocab line " + std::to_string(lineno) + ": expected token<TAB>id");
    }
    std::int64_t id = 0;
    try {
      std::size_t used = 0;
      id = std::stoll(line.substr(tab + 1), &used);
      if (used != line.size() - tab - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw SchemaError("vocab line " + std::to_string(lineno) + ": bad id");
    }
    rows.emplace_back(line.substr(0, tab), id);
  }
  Vocab v;
  v.tokens_.assign(rows.size(), {});
  std::vector<bool> seen(rows.size(), false);
  for (auto& [tok, id] : rows) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows.size() || seen[id]) {
      throw SchemaError("vocab: ids are not a bijection onto 0.." + std::to_string(rows.size() - 1) +
                        " (offending id " + std::to_string(id) + ")");
    }
    seen[id] = true;
    if (!v.ids_.emplace(tok, id).second) throw SchemaError("vocab: duplicate token '" + tok + "'");
    v.tokens_[id] = tok;
  }
  if (v.tokens_.size() < kNumSpecials) throw SchemaError("vocab: missing special tokens");
  for (std::size_t i = 0; i < kNumSpecials; ++i) {
    if (v.tokens_[i] != kSpecialTokens[i]) {
      throw SchemaError("vocab: id " + std::to_string(i) + " must be " + kSpecialTokens[i]);
    }
  }
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocab " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string Vocab::serialize() const {
  std::string out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) out += tokens_[i] + "\t" + std::to_string(i) + "\n";
  return out;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocab " + path.string());
  out << serialize();
}

std::optional<std::int64_t> Vocab::find(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::int64_t Vocab::id_or_unk(const std::string& token) const { return find(token).value_or(kUnk); }

const std::string& Vocab::token(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw RangeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

Encoding encode(std::string_view text, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 2) throw ContractError("encode: max_len must be at least 2");
  const auto toks = tokenize(text);
  const std::size_t keep = std::min(toks.size(), max_len - 2);
  Encoding e;
  e.ids.reserve(max_len);
  e.ids.push_back(kCls);
  for (std::size_t i = 0; i < keep; ++i) e.ids.push_back(vocab.id_or_unk(toks[i]));
  e.ids.push_back(kSep);
  e.mask.assign(e.ids.size(), 1);
  e.ids.resize(max_len, kPad);
  e.mask.resize(max_len, 0);
  return e;
}

std::string decode(std::span<const std::int64_t> ids, const Vocab& vocab) {
  std::string out;
  for (std::int64_t id : ids) {
    const std::string& tok = vocab.token(id);
    if (id == kPad || id == kCls || id == kSep) continue;
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

}  // namespace mtlforge::tokenizer
