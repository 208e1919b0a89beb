#pragma once

#include <functional>
#include <string>
#include <vector>

namespace mtlforge::sweep {

struct SweepSpec {
  std::string target;
  std::vector<std::string> candidates;
  /// Combinations carried into the next stage.
  std::size_t beam = 2;
  std::size_t stages = 3;
  bool finetune = true;
  /// How many of the best combinations get a +FT run.
  std::size_t ft_top = 2;

  void validate() const;
};

/// Target first, then auxiliary tasks in sorted order.
using Combination = std::vector<std::string>;

std::string combination_name(const Combination& combo);

struct SweepRow {
  std::string name;
  Combination combination;
  std::size_t stage = 0;
  double score = 0.0;
  bool finetuned = false;
};

struct SweepResult {
  /// Sorted by score descending, then name ascending.
  std::vector<SweepRow> rows;
  std::size_t mtl_runs = 0;
  std::size_t ft_runs = 0;
};

/// Extends each of `parents` by one unused candidate, skipping combinations
/// already in `seen`.
std::vector<Combination> next_stage(const std::vector<Combination>& parents, const std::vector<std::string>& candidates,
                                    std::vector<Combination>& seen);

using Evaluator = std::function<double(const Combination&)>;

/// Stage 1 evaluates target + each candidate; each later stage extends the
/// top `beam` combinations of the previous stage by one candidate. The
/// finetune evaluator is called for the top `ft_top` combinations overall.
SweepResult run_sweep(const SweepSpec& spec, const Evaluator& mtl, const Evaluator& finetune = {});

inline constexpr const char* kFinetuneSuffix = " +FT";

/// Ranked markdown table.
std::string render_sweep(const SweepResult& result);

}  // namespace mtlforge::sweep
