#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mtlforge/numerics/tensor.hpp"

namespace mtlforge::numerics {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created on first update. Parameters without a gradient buffer are skipped
/// for that step, so heads that did not take part in a batch keep both their
/// values and their moments.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step_count = 0;

  struct Moments {
    std::vector<double> first;
    std::vector<double> second;
    std::size_t updates = 0;
  };
  std::map<std::string, Moments> moments;

  void validate() const;
};

/// One optimizer step over every parameter that currently holds a gradient.
/// Throws NumericError naming the parameter if any gradient is not finite;
/// no parameter is modified in that case.
void adam_step(std::span<const NamedParam> params, AdamState& state);

}  // namespace mtlforge::numerics
