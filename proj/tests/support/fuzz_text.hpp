#pragma once

#include <string>
#include <vector>

#include "mtlforge/numerics/rng.hpp"

namespace mtlforge::testing {

// Random strings assembled from fragments that exercise every masking rule
// and their interactions (adjacent tokens, partial URLs, legacy masks).
inline std::string fuzz_social_text(numerics::Rng& rng) {
  static const std::vector<std::string> pieces = {
      "@", "@john", "@USER", "user", "USER", "URL", "url", "<user>", "<url>", "<URL>", "{user}",
      "{url}", "<mention>", "HTTPURL", "http", "https", "://", "www.", ".com", "/", "x", "_",
      "[", "]", "[USER]", "[URL]", "<", ">", "{", "}", " ", " ", "  ", "\t", "#", "#metoo",
      "😂", "❤️", "hello", "a", "9", "-", "'", ":", "é", "$1", "$&"};
  const std::size_t len = 1 + rng.below(12);
  std::string s;
  for (std::size_t i = 0; i < len; ++i) s += pieces[rng.below(pieces.size())];
  return s;
}

}  // namespace mtlforge::testing
