#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mtlforge::metrics {

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct EvalResult {
  std::vector<std::string> labels;
  std::vector<ClassScores> per_class;
  double macro_f1 = 0.0;
  /// confusion[gold][pred]
  std::vector<std::vector<std::size_t>> confusion;
  std::size_t n = 0;
};

/// Macro-averaged F1 over every declared label, zero-support classes
/// included. Any 0/0 ratio is 0. Predictions and golds are label indices.
EvalResult macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> golds,
                    const std::vector<std::string>& label_set);

/// Same, for string labels; every label must belong to label_set.
EvalResult macro_f1(std::span<const std::string> preds, std::span<const std::string> golds,
                    const std::vector<std::string>& label_set);

std::string to_json(const EvalResult& result);
std::string confusion_csv(const EvalResult& result);

struct ScoreCell {
  std::string task;
  std::string set;
  double value = 0.0;
};

/// One table row. Cell order defines the column order.
struct RunScores {
  std::string name;
  std::vector<ScoreCell> cells;
};

/// Markdown comparison table, baselines first. Every row must carry the same
/// (task, set) columns in the same order. Values are printed with 4 decimals
/// and the best value of each column is bold; values that tie at 4 decimals
/// are all bold.
std::string compare_runs(const std::vector<RunScores>& results, const std::vector<RunScores>& baselines = {});

}  // namespace mtlforge::metrics
