#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtlforge/corpus.hpp"
#include "mtlforge/model.hpp"
#include "mtlforge/textnorm.hpp"
#include "mtlforge/training.hpp"

namespace mtlforge::cli {

inline constexpr int kConfigVersion = 1;

struct DatasetSpec {
  std::filesystem::path path;
  std::optional<corpus::Format> format;
  std::string source;
  corpus::ColumnMap columns;
};

struct SweepOptions {
  std::size_t beam = 2;
  std::size_t stages = 3;
  bool finetune = true;
  std::size_t ft_top = 2;
};

/// Versioned JSON experiment description. Relative paths resolve against the
/// directory holding the config file.
struct ExperimentConfig {
  std::optional<std::uint64_t> seed;
  std::string mode = "mtl";
  std::vector<DatasetSpec> datasets;
  /// Unlabeled text for domain-adaptive pre-training.
  std::vector<DatasetSpec> domain;
  std::filesystem::path schema;
  std::filesystem::path lexicon;
  std::filesystem::path emoji;
  std::filesystem::path out = "runs";
  std::vector<std::string> tasks;
  std::string target;
  std::vector<std::string> candidates;
  textnorm::NormConfig norm;
  corpus::SplitSpec split;
  /// Per-task cap on training examples.
  std::map<std::string, std::size_t> downsample;
  std::size_t min_freq = 1;
  model::EncoderConfig encoder;
  training::PretrainConfig tapt = training::PretrainConfig::tapt();
  training::PretrainConfig dapt = training::PretrainConfig::dapt();
  training::MtlConfig mtl;
  SweepOptions sweep;

  /// Fully resolved form; parse(to_json()) round-trips.
  std::string to_json() const;
  static ExperimentConfig parse(const std::string& text, const std::filesystem::path& base_dir);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Every referenced input file, in a stable order.
  std::vector<std::pair<std::string, std::filesystem::path>> inputs() const;
  /// Throws IoError naming the first input that does not exist.
  void check_inputs() const;
  /// Applies one seed to every seeded stage.
  void apply_seed(std::uint64_t value);
};

/// Directory holding the shipped lexicon, emoji table and default task schema.
std::filesystem::path default_data_dir();

}  // namespace mtlforge::cli
