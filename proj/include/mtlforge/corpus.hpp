#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mtlforge/textnorm.hpp"

namespace mtlforge::corpus {

enum class Format { Csv, Tsv, Jsonl };

/// "csv", "tsv" or "jsonl" (case-insensitive).
Format parse_format(std::string_view name);
/// Guesses from the file extension; ".json" and ".ndjson" count as JSONL.
Format format_from_path(const std::filesystem::path& path);

struct TextRecord {
  std::string id;
  std::string text;
  std::string source;
  /// task key -> source label string; absent when the row is unlabeled for it.
  std::map<std::string, std::string> labels;

  bool operator==(const TextRecord&) const = default;
};

struct ColumnMap {
  /// Empty means ids are generated as "<source>:<row>".
  std::string id = "id";
  std::string text = "text";
  /// (label key, column) pairs.
  std::vector<std::pair<std::string, std::string>> labels;
};

struct LoadReport {
  std::size_t rows = 0;
  std::size_t loaded = 0;
  std::size_t skipped_empty = 0;
  std::size_t malformed = 0;
  std::vector<std::string> problems;
};

struct LoadResult {
  std::vector<TextRecord> records;
  LoadReport report;
};

/// Parses a headered CSV/TSV or a JSONL file. Rows whose text is empty after
/// preprocessing are skipped; rows with the wrong field count, a missing
/// field or a duplicate id are counted as malformed.
LoadResult load_dataset(const std::filesystem::path& path, Format format, const ColumnMap& columns,
                        const textnorm::Preprocessor* preprocessor = nullptr, std::string source = "");

/// RFC 4180 parsing: quoted fields may contain commas, doubled quotes and newlines.
std::vector<std::vector<std::string>> parse_csv(std::string_view contents, char delimiter = ',');

struct Example {
  std::string id;
  std::string text;
  std::string label;

  bool operator==(const Example&) const = default;
};

struct TaskDataset {
  std::string name;
  std::vector<std::string> label_set;
  double loss_weight = 1.0;
  std::vector<Example> examples;
  /// Optional child label -> parent label map (used by fine-grained tasks).
  std::map<std::string, std::string> parents;

  /// Labels distinct, at least two; weight positive; every example label declared.
  void validate() const;
  std::size_t label_index(const std::string& label) const;
  std::vector<std::size_t> label_counts() const;
  std::vector<std::string> texts() const;
  std::vector<std::size_t> label_indices() const;
};

struct TaskSchema {
  std::string name;
  std::vector<std::string> label_set;
  double loss_weight = 1.0;
  /// Which record label key feeds this task. Defaults to the task name.
  std::string label_key;
  /// Source label -> task label. Empty means identity over label_set.
  std::map<std::string, std::string> mapping;
  /// Restrict to records from these sources; empty accepts all.
  std::vector<std::string> sources;
  std::map<std::string, std::string> parents;

  void validate() const;
};

/// {"version": 1, "tasks": [{"name", "label_set", "loss_weight", "label_key",
/// "mapping", "sources", "parents"}, ...]}
std::vector<TaskSchema> parse_schemas(std::string_view json_text);
std::vector<TaskSchema> load_schemas(const std::filesystem::path& path);
const TaskSchema& find_schema(const std::vector<TaskSchema>& schemas, const std::string& name);

struct CompileReport {
  std::size_t input = 0;
  std::size_t kept = 0;
  std::size_t dropped_unlabeled = 0;
  std::size_t dropped_unmapped = 0;
  std::map<std::string, std::size_t> unmapped_labels;
};

/// Keeps records whose label maps into the task; the rest are dropped and
/// counted. Throws SchemaError when nothing survives.
TaskDataset compile_task(const std::vector<TextRecord>& records, const TaskSchema& schema,
                         CompileReport* report = nullptr);

struct SplitSpec {
  double ratio = 0.8;
  std::uint64_t seed = 0;
  bool stratified = true;

  void validate() const;
};

/// Train/eval split. Stratified splits allot per-class train counts by the
/// largest-remainder method so the total is round(ratio * n). Example order
/// within each part follows the input.
std::pair<TaskDataset, TaskDataset> split_train_eval(const TaskDataset& dataset, const SplitSpec& spec);

/// Uniform sample of n examples without replacement, input order kept.
TaskDataset downsample(const TaskDataset& dataset, std::size_t n, std::uint64_t seed);

struct HierarchyReport {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

/// Checks the coarse/medium/fine label hierarchy by example id: every
/// medium-labeled id is positive in the coarse task, every fine label maps to
/// its medium parent through fine.parents, and the label sets have 4 and 11
/// entries.
HierarchyReport check_hierarchy(const TaskDataset& coarse, const TaskDataset& medium, const TaskDataset& fine,
                                const std::string& coarse_negative = "not sexist");

/// One {"id", "text", "label"} object per line.
void write_jsonl(const TaskDataset& dataset, const std::filesystem::path& path);
/// Reads examples written by write_jsonl; metadata comes from the schema.
TaskDataset read_jsonl(const std::filesystem::path& path, const TaskSchema& schema);

}  // namespace mtlforge::corpus
