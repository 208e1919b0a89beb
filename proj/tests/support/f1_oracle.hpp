#pragma once

// Brute-force macro-F1: per class, counts TP/FP/FN with separate passes and
// uses F1 = 2TP / (2TP + FP + FN). Shares no code with the metrics module.

#include <cstddef>
#include <vector>

#include "mtlforge/numerics/rng.hpp"

namespace mtlforge::testing {

inline double brute_force_macro_f1(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& golds,
                                   std::size_t num_classes) {
  double total = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] == c && golds[i] == c) ++tp;
    }
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] == c && golds[i] != c) ++fp;
    }
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] != c && golds[i] == c) ++fn;
    }
    const std::size_t den = 2 * tp + fp + fn;
    total += den == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(den);
  }
  return total / static_cast<double>(num_classes);
}

struct F1Case {
  std::vector<std::size_t> preds, golds;
  std::size_t num_classes = 2;
};

// n in [1,50], K in [2,11]; labels are drawn from a random subset of the
// classes so zero-support classes occur regularly.
inline F1Case fuzz_f1_case(numerics::Rng& rng) {
  F1Case c;
  c.num_classes = 2 + rng.below(10);
  const std::size_t n = 1 + rng.below(50);
  const std::size_t used = 1 + rng.below(c.num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    c.golds.push_back(rng.below(used));
    c.preds.push_back(rng.bernoulli(0.5) ? c.golds.back() : rng.below(c.num_classes));
  }
  return c;
}

}  // namespace mtlforge::testing
