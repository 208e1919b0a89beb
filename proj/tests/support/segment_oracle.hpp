#pragma once

// Exhaustive segmentation oracle: enumerates all 2^(n-1) ways of cutting a
// string and scores each under the same unigram model, with no dynamic
// programming. Only viable for short bodies (n <= ~20).

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mtlforge/textnorm.hpp"

namespace mtlforge::testing {

struct OracleSegmentation {
  std::vector<std::string> words;
  double score = -std::numeric_limits<double>::infinity();
  double runner_up = -std::numeric_limits<double>::infinity();
};

inline OracleSegmentation exhaustive_segmentation(const std::string& body, const textnorm::Lexicon& lex) {
  const std::size_t n = body.size();
  // Word scores for every substring, computed once.
  std::vector<std::vector<double>> piece(n, std::vector<double>(n + 1, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j <= n; ++j) piece[i][j] = lex.log_prob(body.substr(i, j - i));
  }
  OracleSegmentation best;
  const std::uint64_t combos = std::uint64_t{1} << (n - 1);
  std::uint64_t best_mask = 0;
  for (std::uint64_t mask = 0; mask < combos; ++mask) {
    double score = 0.0;
    std::size_t start = 0;
    for (std::size_t cut = 1; cut < n; ++cut) {
      if (mask & (std::uint64_t{1} << (cut - 1))) {
        score += piece[start][cut];
        start = cut;
      }
    }
    score += piece[start][n];
    if (score > best.score) {
      best.runner_up = best.score;
      best.score = score;
      best_mask = mask;
    } else if (score > best.runner_up) {
      best.runner_up = score;
    }
  }
  std::size_t start = 0;
  for (std::size_t cut = 1; cut < n; ++cut) {
    if (best_mask & (std::uint64_t{1} << (cut - 1))) {
      best.words.push_back(body.substr(start, cut - start));
      start = cut;
    }
  }
  best.words.push_back(body.substr(start));
  return best;
}

}  // namespace mtlforge::testing
