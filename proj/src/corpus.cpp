#include "mtlforge/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "mtlforge/error.hpp"
#include "mtlforge/numerics/rng.hpp"

namespace mtlforge::corpus {

using json = nlohmann::json;

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error reading " + path.string());
  return ss.str();
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

std::vector<std::vector<std::string>> parse_tsv(std::string_view contents) {
  std::vector<std::vector<std::string>> rows;
  std::size_t pos = 0;
  while (pos < contents.size()) {
    std::size_t nl = contents.find('\n', pos);
    if (nl == std::string_view::npos) nl = contents.size();
    std::string_view line = contents.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = nl + 1;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      fields.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    rows.push_back(std::move(fields));
  }
  return rows;
}

std::string json_field(const json& obj, const std::string& key, bool& present) {
  auto it = obj.find(key);
  present = it != obj.end();
  if (!present || it->is_null()) return "";
  if (it->is_string()) return it->get<std::string>();
  return it->dump();
}

struct RowSink {
  const ColumnMap& columns;
  const textnorm::Preprocessor* preprocessor;
  std::string source;
  LoadResult result;
  std::unordered_set<std::string> seen_ids;

  void add(std::size_t row, std::string id, std::string text, std::map<std::string, std::string> labels) {
    ++result.report.rows;
    if (columns.id.empty()) id = source + ":" + std::to_string(row);
    if (id.empty()) {
      ++result.report.malformed;
      result.report.problems.push_back("row " + std::to_string(row) + ": empty id");
      return;
    }
    if (preprocessor) text = (*preprocessor)(text);
    if (blank(text)) {
      ++result.report.skipped_empty;
      return;
    }
    if (!seen_ids.insert(id).second) {
      ++result.report.malformed;
      result.report.problems.push_back("row " + std::to_string(row) + ": duplicate id '" + id + "'");
      return;
    }
    ++result.report.loaded;
    result.records.push_back({std::move(id), std::move(text), source, std::move(labels)});
  }

  void malformed(std::size_t row, const std::string& why) {
    ++result.report.rows;
    ++result.report.malformed;
    result.report.problems.push_back("row " + std::to_string(row) + ": " + why);
  }
};

void load_delimited(RowSink& sink, std::vector<std::vector<std::string>> rows, const std::filesystem::path& path) {
  if (rows.empty()) throw SchemaError(path.string() + ": missing header row");
  const auto& header = rows.front();
  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw SchemaError(path.string() + ": no column '" + name + "'; available columns: " + join(header));
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t id_col = sink.columns.id.empty() ? 0 : column(sink.columns.id);
  const std::size_t text_col = column(sink.columns.text);
  std::vector<std::pair<std::string, std::size_t>> label_cols;
  for (const auto& [key, name] : sink.columns.labels) label_cols.emplace_back(key, column(name));

  for (std::size_t r = 1; r < rows.size(); ++r) {
    auto& row = rows[r];
    if (row.size() != header.size()) {
      sink.malformed(r, "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(row.size()));
      continue;
    }
    std::map<std::string, std::string> labels;
    for (const auto& [key, col] : label_cols) {
      if (!row[col].empty()) labels[key] = row[col];
    }
    sink.add(r, sink.columns.id.empty() ? "" : row[id_col], std::move(row[text_col]), std::move(labels));
  }
}

void load_jsonl(RowSink& sink, std::string_view contents, const std::filesystem::path& path) {
  std::size_t pos = 0, lineno = 0;
  bool checked_schema = false;
  while (pos < contents.size()) {
    std::size_t nl = contents.find('\n', pos);
    if (nl == std::string_view::npos) nl = contents.size();
    const std::string_view line = contents.substr(pos, nl - pos);
    pos = nl + 1;
    ++lineno;
    if (blank(line)) continue;
    json obj = json::parse(line, nullptr, false);
    if (obj.is_discarded() || !obj.is_object()) {
      sink.malformed(lineno, "not a JSON object");
      continue;
    }
    std::vector<std::string> wanted{sink.columns.text};
    if (!sink.columns.id.empty()) wanted.push_back(sink.columns.id);
    for (const auto& [key, name] : sink.columns.labels) wanted.push_back(name);
    if (!checked_schema) {
      // The first object defines the available columns, as a header would.
      checked_schema = true;
      std::vector<std::string> keys;
      for (auto it = obj.begin(); it != obj.end(); ++it) keys.push_back(it.key());
      for (const auto& w : wanted) {
        if (!obj.contains(w)) {
          throw SchemaError(path.string() + ": no column '" + w + "'; available columns: " + join(keys));
        }
      }
    }
    bool ok = true, present = false;
    std::string missing;
    auto field = [&](const std::string& key) {
      std::string v = json_field(obj, key, present);
      if (!present) {
        ok = false;
        missing = key;
      }
      return v;
    };
    std::string id = sink.columns.id.empty() ? "" : field(sink.columns.id);
    std::string text = field(sink.columns.text);
    std::map<std::string, std::string> labels;
    for (const auto& [key, name] : sink.columns.labels) {
      std::string v = field(name);
      if (!v.empty()) labels[key] = std::move(v);
    }
    if (!ok) {
      sink.malformed(lineno, "missing field '" + missing + "'");
      continue;
    }
    sink.add(lineno, std::move(id), std::move(text), std::move(labels));
  }
}

}  // namespace

Format parse_format(std::string_view name) {
  const std::string n = lower(name);
  if (n == "csv") return Format::Csv;
  if (n == "tsv") return Format::Tsv;
  if (n == "jsonl") return Format::Jsonl;
  throw ConfigError("unknown dataset format '" + std::string(name) + "' (expected csv, tsv or jsonl)");
}

Format format_from_path(const std::filesystem::path& path) {
  const std::string ext = lower(path.extension().string());
  if (ext == ".csv") return Format::Csv;
  if (ext == ".tsv" || ext == ".tab") return Format::Tsv;
  if (ext == ".jsonl" || ext == ".json" || ext == ".ndjson") return Format::Jsonl;
  throw ConfigError("cannot infer dataset format from '" + path.string() + "'");
}

std::vector<std::vector<std::string>> parse_csv(std::string_view contents, char delimiter) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
    row.clear();
  };
  for (std::size_t i = 0; i < contents.size(); ++i) {
    const char c = contents[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < contents.size() && contents[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (c == delimiter) {
      end_field();
    } else if (c == '\n') {
      end_row();
    } else if (c == '\r') {
      if (i + 1 < contents.size() && contents[i + 1] == '\n') continue;
      end_row();
    } else {
      field += c;
      field_started = true;
    }
  }
  if (quoted) throw SchemaError("csv: unterminated quoted field");
  if (field_started || !field.empty() || !row.empty()) end_row();
  return rows;
}

LoadResult load_dataset(const std::filesystem::path& path, Format format, const ColumnMap& columns,
                        const textnorm::Preprocessor* preprocessor, std::string source) {
  if (columns.text.empty()) throw ConfigError("column map must name a text column");
  if (source.empty()) source = path.stem().string();
  const std::string contents = read_file(path);
  RowSink sink{columns, preprocessor, std::move(source), {}, {}};
  switch (format) {
    case Format::Csv:
      load_delimited(sink, parse_csv(contents), path);
      break;
    case Format::Tsv:
      load_delimited(sink, parse_tsv(contents), path);
      break;
    case Format::Jsonl:
      load_jsonl(sink, contents, path);
      break;
  }
  return std::move(sink.result);
}

void TaskDataset::validate() const {
  if (name.empty()) throw SchemaError("task has no name");
  if (label_set.size() < 2) throw SchemaError("task '" + name + "' needs at least two labels");
  std::set<std::string> distinct(label_set.begin(), label_set.end());
  if (distinct.size() != label_set.size()) throw SchemaError("task '" + name + "' has duplicate labels");
  if (!(loss_weight > 0.0) || !std::isfinite(loss_weight)) {
    throw SchemaError("task '" + name + "' loss weight must be positive");
  }
  for (const auto& ex : examples) {
    if (!distinct.count(ex.label)) {
      throw SchemaError("task '" + name + "': example label '" + ex.label + "' is not in the label set");
    }
  }
}

std::size_t TaskDataset::label_index(const std::string& label) const {
  auto it = std::find(label_set.begin(), label_set.end(), label);
  if (it == label_set.end()) throw LookupError("task '" + name + "' has no label '" + label + "'");
  return static_cast<std::size_t>(it - label_set.begin());
}

std::vector<std::size_t> TaskDataset::label_counts() const {
  std::vector<std::size_t> counts(label_set.size(), 0);
  for (const auto& ex : examples) ++counts[label_index(ex.label)];
  return counts;
}

std::vector<std::string> TaskDataset::texts() const {
  std::vector<std::string> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(ex.text);
  return out;
}

std::vector<std::size_t> TaskDataset::label_indices() const {
  std::vector<std::size_t> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(label_index(ex.label));
  return out;
}

void TaskSchema::validate() const {
  TaskDataset probe{name, label_set, loss_weight, {}, {}};
  probe.validate();
  for (const auto& [from, to] : mapping) {
    if (std::find(label_set.begin(), label_set.end(), to) == label_set.end()) {
      throw SchemaError("task '" + name + "': mapping target '" + to + "' is not in the label set");
    }
  }
  for (const auto& [child, parent] : parents) {
    (void)parent;
    if (std::find(label_set.begin(), label_set.end(), child) == label_set.end()) {
      throw SchemaError("task '" + name + "': parent map names unknown label '" + child + "'");
    }
  }
}

std::vector<TaskSchema> parse_schemas(std::string_view json_text) {
  json doc = json::parse(json_text, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) throw SchemaError("task schema: not a JSON object");
  if (doc.value("version", 0) != 1) throw SchemaError("task schema: unsupported version");
  if (!doc.contains("tasks") || !doc["tasks"].is_array()) throw SchemaError("task schema: missing 'tasks' array");
  std::vector<TaskSchema> out;
  std::set<std::string> names;
  try {
    for (const auto& t : doc["tasks"]) {
      TaskSchema s;
      s.name = t.at("name").get<std::string>();
      s.label_set = t.at("label_set").get<std::vector<std::string>>();
      s.loss_weight = t.value("loss_weight", 1.0);
      s.label_key = t.value("label_key", s.name);
      if (t.contains("mapping")) s.mapping = t["mapping"].get<std::map<std::string, std::string>>();
      if (t.contains("sources")) s.sources = t["sources"].get<std::vector<std::string>>();
      if (t.contains("parents")) s.parents = t["parents"].get<std::map<std::string, std::string>>();
      s.validate();
      if (!names.insert(s.name).second) throw SchemaError("task schema: duplicate task '" + s.name + "'");
      out.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("task schema: ") + e.what());
  }
  return out;
}

std::vector<TaskSchema> load_schemas(const std::filesystem::path& path) { return parse_schemas(read_file(path)); }

const TaskSchema& find_schema(const std::vector<TaskSchema>& schemas, const std::string& name) {
  for (const auto& s : schemas) {
    if (s.name == name) return s;
  }
  std::vector<std::string> names;
  for (const auto& s : schemas) names.push_back(s.name);
  throw LookupError("no task '" + name + "' in schema; declared tasks: " + join(names));
}

TaskDataset compile_task(const std::vector<TextRecord>& records, const TaskSchema& schema, CompileReport* report) {
  schema.validate();
  CompileReport local;
  CompileReport& rep = report ? *report : local;
  rep = {};
  TaskDataset ds{schema.name, schema.label_set, schema.loss_weight, {}, schema.parents};
  const std::string key = schema.label_key.empty() ? schema.name : schema.label_key;
  for (const auto& rec : records) {
    if (!schema.sources.empty() &&
        std::find(schema.sources.begin(), schema.sources.end(), rec.source) == schema.sources.end()) {
      continue;
    }
    ++rep.input;
    auto it = rec.labels.find(key);
    if (it == rec.labels.end()) {
      ++rep.dropped_unlabeled;
      continue;
    }
    std::string label;
    if (schema.mapping.empty()) {
      if (std::find(schema.label_set.begin(), schema.label_set.end(), it->second) != schema.label_set.end()) {
        label = it->second;
      }
    } else if (auto m = schema.mapping.find(it->second); m != schema.mapping.end()) {
      label = m->second;
    }
    if (label.empty()) {
      ++rep.dropped_unmapped;
      ++rep.unmapped_labels[it->second];
      continue;
    }
    ds.examples.push_back({rec.id, rec.text, std::move(label)});
    ++rep.kept;
  }
  if (ds.examples.empty()) throw SchemaError("task '" + schema.name + "' compiled to zero examples");
  ds.validate();
  return ds;
}

void SplitSpec::validate() const {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie strictly between 0 and 1");
}

std::pair<TaskDataset, TaskDataset> split_train_eval(const TaskDataset& dataset, const SplitSpec& spec) {
  spec.validate();
  dataset.validate();
  const std::size_t n = dataset.examples.size();
  if (n < 2) throw ContractError("task '" + dataset.name + "' needs at least two examples to split");
  const numerics::Rng root(spec.seed);
  std::vector<bool> in_train(n, false);

  if (!spec.stratified) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    numerics::Rng rng = root.substream("split");
    rng.shuffle(std::span<std::size_t>(order));
    const auto n_train = static_cast<std::size_t>(std::llround(spec.ratio * static_cast<double>(n)));
    for (std::size_t i = 0; i < n_train; ++i) in_train[order[i]] = true;
  } else {
    const std::size_t k = dataset.label_set.size();
    std::vector<std::vector<std::size_t>> members(k);
    for (std::size_t i = 0; i < n; ++i) members[dataset.label_index(dataset.examples[i].label)].push_back(i);
    std::vector<std::size_t> quota(k, 0);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t allotted = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (members[c].empty()) continue;
      if (members[c].size() == 1) {
        throw ContractError("task '" + dataset.name + "': label '" + dataset.label_set[c] +
                            "' has a single example and cannot be stratified");
      }
      const double exact = spec.ratio * static_cast<double>(members[c].size());
      quota[c] = static_cast<std::size_t>(std::floor(exact));
      allotted += quota[c];
      remainders.emplace_back(exact - std::floor(exact), c);
    }
    const auto target = static_cast<std::size_t>(std::llround(spec.ratio * static_cast<double>(n)));
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; allotted < target && i < remainders.size(); ++i, ++allotted) {
      ++quota[remainders[i].second];
    }
    for (std::size_t c = 0; c < k; ++c) {
      numerics::Rng rng = root.substream("split", c);
      rng.shuffle(std::span<std::size_t>(members[c]));
      for (std::size_t i = 0; i < quota[c]; ++i) in_train[members[c][i]] = true;
    }
  }

  TaskDataset train{dataset.name, dataset.label_set, dataset.loss_weight, {}, dataset.parents};
  TaskDataset eval = train;
  for (std::size_t i = 0; i < n; ++i) (in_train[i] ? train : eval).examples.push_back(dataset.examples[i]);
  return {std::move(train), std::move(eval)};
}

TaskDataset downsample(const TaskDataset& dataset, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ContractError("downsample of task '" + dataset.name + "' to zero examples leaves an empty task");
  if (n > dataset.examples.size()) {
    throw RangeError("downsample of task '" + dataset.name + "': requested " + std::to_string(n) + " of " +
                     std::to_string(dataset.examples.size()) + " examples");
  }
  std::vector<std::size_t> order(dataset.examples.size());
  std::iota(order.begin(), order.end(), 0);
  numerics::Rng rng = numerics::Rng(seed).substream("downsample");
  rng.shuffle(std::span<std::size_t>(order));
  order.resize(n);
  std::sort(order.begin(), order.end());
  TaskDataset out{dataset.name, dataset.label_set, dataset.loss_weight, {}, dataset.parents};
  for (auto i : order) out.examples.push_back(dataset.examples[i]);
  out.validate();
  return out;
}

HierarchyReport check_hierarchy(const TaskDataset& coarse, const TaskDataset& medium, const TaskDataset& fine,
                                const std::string& coarse_negative) {
  HierarchyReport rep;
  if (medium.label_set.size() != 4) {
    rep.violations.push_back("task '" + medium.name + "' has " + std::to_string(medium.label_set.size()) +
                             " labels, expected 4");
  }
  if (fine.label_set.size() != 11) {
    rep.violations.push_back("task '" + fine.name + "' has " + std::to_string(fine.label_set.size()) +
                             " labels, expected 11");
  }
  std::map<std::string, std::string> coarse_by_id, medium_by_id;
  for (const auto& ex : coarse.examples) coarse_by_id[ex.id] = ex.label;
  for (const auto& ex : medium.examples) medium_by_id[ex.id] = ex.label;

  for (const auto& ex : medium.examples) {
    auto it = coarse_by_id.find(ex.id);
    if (it == coarse_by_id.end()) {
      rep.violations.push_back("id " + ex.id + ": labeled in '" + medium.name + "' but absent from '" + coarse.name + "'");
    } else if (it->second == coarse_negative) {
      rep.violations.push_back("id " + ex.id + ": labeled '" + ex.label + "' in '" + medium.name + "' but '" +
                               coarse_negative + "' in '" + coarse.name + "'");
    }
  }
  for (const std::string& label : fine.label_set) {
    auto p = fine.parents.find(label);
    if (p == fine.parents.end()) {
      rep.violations.push_back("label '" + label + "' of '" + fine.name + "' has no declared parent");
    } else if (std::find(medium.label_set.begin(), medium.label_set.end(), p->second) == medium.label_set.end()) {
      rep.violations.push_back("parent '" + p->second + "' of '" + label + "' is not a label of '" + medium.name + "'");
    }
  }
  for (const auto& ex : fine.examples) {
    auto it = medium_by_id.find(ex.id);
    if (it == medium_by_id.end()) {
      rep.violations.push_back("id " + ex.id + ": labeled in '" + fine.name + "' but absent from '" + medium.name + "'");
      continue;
    }
    auto p = fine.parents.find(ex.label);
    if (p != fine.parents.end() && p->second != it->second) {
      rep.violations.push_back("id " + ex.id + ": '" + ex.label + "' belongs under '" + p->second + "' but '" +
                               medium.name + "' says '" + it->second + "'");
    }
  }
  return rep;
}

void write_jsonl(const TaskDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& ex : dataset.examples) {
    nlohmann::ordered_json line{{"id", ex.id}, {"text", ex.text}, {"label", ex.label}};
    out << line.dump() << '\n';
  }
  if (!out) throw IoError("error writing " + path.string());
}

TaskDataset read_jsonl(const std::filesystem::path& path, const TaskSchema& schema) {
  ColumnMap columns{"id", "text", {{"label", "label"}}};
  LoadResult loaded = load_dataset(path, Format::Jsonl, columns, nullptr, schema.name);
  if (loaded.report.malformed) {
    throw SchemaError(path.string() + ": " + std::to_string(loaded.report.malformed) + " malformed rows");
  }
  TaskDataset ds{schema.name, schema.label_set, schema.loss_weight, {}, schema.parents};
  for (auto& rec : loaded.records) {
    auto it = rec.labels.find("label");
    if (it == rec.labels.end()) throw SchemaError(path.string() + ": record " + rec.id + " has no label");
    ds.examples.push_back({std::move(rec.id), std::move(rec.text), it->second});
  }
  if (ds.examples.empty()) throw SchemaError(path.string() + ": no examples");
  ds.validate();
  return ds;
}

}  // namespace mtlforge::corpus
