#include "cli.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "experiment.hpp"
#include "mtlforge/corpus.hpp"
#include "mtlforge/error.hpp"
#include "mtlforge/metrics.hpp"
#include "mtlforge/model.hpp"
#include "mtlforge/numerics/rng.hpp"
#include "mtlforge/sweep.hpp"
#include "mtlforge/textnorm.hpp"
#include "mtlforge/tokenizer.hpp"
#include "mtlforge/training.hpp"

namespace mtlforge::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string out;
  std::optional<std::size_t> beam;
  std::optional<std::size_t> stages;
  std::optional<bool> ft;
  std::string init;
  std::string vocab;
  std::string predictions;
  std::string checkpoint;
  std::string labels;
  std::string task;
  std::vector<std::string> runs;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& contents) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << contents;
  if (!f) throw IoError("error writing " + path.string());
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json file_entry(const fs::path& path) {
  const std::string bytes = read_file(path);
  return {{"path", path.string()}, {"bytes", bytes.size()}, {"fnv1a64", hex64(numerics::fnv1a64(bytes))}};
}

// One timestamp+seed stamped output directory with its manifest.
class RunDir {
 public:
  RunDir(const fs::path& root, const std::string& subcommand, std::uint64_t seed, std::string seed_source,
         std::vector<std::string> argv)
      : subcommand_(subcommand), seed_(seed), seed_source_(std::move(seed_source)), argv_(std::move(argv)) {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
    created_ = stamp;
    const std::string base = created_ + "-seed" + std::to_string(seed) + "-" + subcommand;
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create output directory " + root.string() + ": " + ec.message());
    path_ = root / base;
    for (int i = 2; fs::exists(path_); ++i) path_ = root / (base + "-" + std::to_string(i));
    fs::create_directory(path_, ec);
    if (ec) throw IoError("cannot create run directory " + path_.string() + ": " + ec.message());
  }

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  void write(const std::string& name, const std::string& contents) const { write_file(path_ / name, contents); }

  void add_input(const std::string& role, const fs::path& p) {
    json e = file_entry(p);
    e["role"] = role;
    inputs_.push_back(std::move(e));
  }

  // Records a checkpoint this run starts from, plus the manifest of the run that produced it.
  void add_parent(const fs::path& checkpoint) {
    for (const auto& p : parents_) {
      if (p["checkpoint"]["path"] == checkpoint.string()) return;
    }
    json e{{"checkpoint", file_entry(checkpoint)}};
    const fs::path manifest = checkpoint.parent_path() / "manifest.json";
    if (fs::exists(manifest)) e["manifest"] = file_entry(manifest);
    parents_.push_back(std::move(e));
  }

  void finish(const std::string& config_json) const {
    if (!config_json.empty()) write("config.json", config_json);
    json outputs = json::array();
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(path_)) {
      if (entry.is_regular_file() && entry.path().filename() != "manifest.json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      json e = file_entry(f);
      e["path"] = fs::relative(f, path_).string();
      outputs.push_back(std::move(e));
    }
    json m{{"tool", "mtlforge"},
           {"version", kToolVersion},
           {"subcommand", subcommand_},
           {"created", created_},
           {"seed", seed_},
           {"seed_source", seed_source_},
           {"rng", numerics::Rng::kAlgorithm},
           {"hash", "fnv1a64"},
           {"argv", argv_},
           {"config", config_json.empty() ? json(nullptr) : json("config.json")},
           {"inputs", inputs_},
           {"parents", parents_},
           {"outputs", outputs}};
    write("manifest.json", m.dump(2) + "\n");
  }

 private:
  std::string subcommand_;
  std::uint64_t seed_;
  std::string seed_source_;
  std::vector<std::string> argv_;
  std::string created_;
  fs::path path_;
  json inputs_ = json::array();
  json parents_ = json::array();
};

std::pair<std::uint64_t, std::string> resolve_seed(const std::optional<std::uint64_t>& flag,
                                                    const std::optional<std::uint64_t>& configured) {
  if (flag) return {*flag, "flag"};
  if (const char* env = std::getenv("MTLFORGE_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw ConfigError(std::string("MTLFORGE_SEED is not an unsigned integer: ") + env);
    return {v, "env"};
  }
  if (configured) return {*configured, "config"};
  return {0, "default"};
}

// Shared state for subcommands that read an experiment config.
struct Context {
  ExperimentConfig config;
  std::string seed_source;
  std::optional<textnorm::Preprocessor> pre;
  std::vector<corpus::TaskSchema> schemas;
};

Context open_context(const Options& o) {
  Context c;
  c.config = ExperimentConfig::load(o.config);
  const auto [seed, source] = resolve_seed(o.seed, c.config.seed);
  c.config.apply_seed(seed);
  c.seed_source = source;
  if (!o.out.empty()) c.config.out = fs::absolute(o.out).lexically_normal();
  if (!o.mode.empty()) c.config.mode = o.mode;
  if (o.beam) c.config.sweep.beam = *o.beam;
  if (o.stages) c.config.sweep.stages = *o.stages;
  if (o.ft) c.config.sweep.finetune = *o.ft;
  c.config.check_inputs();
  c.pre.emplace(c.config.norm, textnorm::Lexicon::load(c.config.lexicon), textnorm::EmojiTable::load(c.config.emoji));
  c.schemas = corpus::load_schemas(c.config.schema);
  return c;
}

RunDir open_run(const Context& c, const std::string& subcommand, const std::vector<std::string>& argv) {
  RunDir run(c.config.out, subcommand, *c.config.seed, c.seed_source, argv);
  for (const auto& [role, path] : c.config.inputs()) run.add_input(role, path);
  return run;
}

std::vector<corpus::TextRecord> load_records(const Context& c, const std::vector<DatasetSpec>& specs, json* reports) {
  std::vector<corpus::TextRecord> all;
  for (const auto& d : specs) {
    const auto fmt = d.format ? *d.format : corpus::format_from_path(d.path);
    auto r = corpus::load_dataset(d.path, fmt, d.columns, &*c.pre, d.source);
    if (reports) {
      (*reports)[d.source] = {{"path", d.path.string()},
                              {"rows", r.report.rows},
                              {"loaded", r.report.loaded},
                              {"skipped_empty", r.report.skipped_empty},
                              {"malformed", r.report.malformed},
                              {"problems", r.report.problems}};
    }
    for (auto& rec : r.records) all.push_back(std::move(rec));
  }
  return all;
}

std::vector<std::string> task_names(const ExperimentConfig& cfg) {
  std::vector<std::string> names;
  auto add = [&](const std::string& n) {
    if (!n.empty() && std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
  };
  for (const auto& t : cfg.tasks) add(t);
  add(cfg.target);
  for (const auto& t : cfg.candidates) add(t);
  return names;
}

std::uint64_t task_seed(std::uint64_t seed, const std::string& task) {
  return numerics::splitmix64(seed ^ numerics::fnv1a64(task));
}

struct TaskSplit {
  corpus::TaskDataset train;
  corpus::TaskDataset eval;
  corpus::CompileReport report;
};

TaskSplit compile_split(const Context& c, const std::vector<corpus::TextRecord>& records, const std::string& name) {
  TaskSplit s;
  const auto dataset = corpus::compile_task(records, corpus::find_schema(c.schemas, name), &s.report);
  corpus::SplitSpec spec = c.config.split;
  spec.seed = task_seed(spec.seed, name);
  std::tie(s.train, s.eval) = corpus::split_train_eval(dataset, spec);
  if (const auto it = c.config.downsample.find(name);
      it != c.config.downsample.end() && it->second < s.train.examples.size()) {
    s.train = corpus::downsample(s.train, it->second, spec.seed);
  }
  return s;
}

std::map<std::string, TaskSplit> compile_named(const Context& c, const std::vector<std::string>& names) {
  if (names.empty()) throw ConfigError("config names no tasks (set 'tasks' or 'target')");
  const auto records = load_records(c, c.config.datasets, nullptr);
  std::map<std::string, TaskSplit> out;
  for (const auto& n : names) out.emplace(n, compile_split(c, records, n));
  return out;
}

std::vector<std::string> domain_texts(const Context& c) {
  std::vector<std::string> texts;
  for (auto& r : load_records(c, c.config.domain, nullptr)) texts.push_back(std::move(r.text));
  return texts;
}

tokenizer::Vocab build_vocab(const Context& c, const std::map<std::string, TaskSplit>& tasks,
                             const std::vector<std::string>& extra) {
  std::vector<std::string> texts = extra;
  for (const auto& [name, s] : tasks) {
    for (auto& t : s.train.texts()) texts.push_back(std::move(t));
  }
  return tokenizer::Vocab::build(texts, c.config.min_freq);
}

// Explicit --vocab, else the vocab stored beside the starting checkpoint, else a fresh one.
tokenizer::Vocab resolve_vocab(const Options& o, const fs::path& checkpoint, RunDir& run,
                               const std::function<tokenizer::Vocab()>& build) {
  if (!checkpoint.empty() && !fs::exists(checkpoint)) throw IoError("missing checkpoint file: " + checkpoint.string());
  fs::path p;
  if (!o.vocab.empty()) {
    p = o.vocab;
  } else if (!checkpoint.empty()) {
    p = checkpoint.parent_path() / "vocab.txt";
  }
  if (p.empty()) return build();
  if (!fs::exists(p)) throw IoError("missing vocab file: " + p.string());
  run.add_input("vocab", p);
  return tokenizer::Vocab::load(p);
}

model::HeadSpec head_spec(const std::map<std::string, TaskSplit>& tasks, const std::vector<std::string>& names) {
  model::HeadSpec heads;
  for (const auto& n : names) heads[n] = tasks.at(n).train.label_set;
  return heads;
}

model::ModelBundle start_bundle(const Context& c, const Options& o, RunDir& run, const tokenizer::Vocab& vocab,
                                const model::HeadSpec& heads) {
  const std::uint64_t seed = *c.config.seed;
  if (!o.init.empty()) {
    if (!fs::exists(o.init)) throw IoError("missing checkpoint file: " + o.init);
    run.add_parent(fs::absolute(o.init));
    auto b = model::load_checkpoint(o.init, heads, task_seed(seed, "heads"));
    if (b.config().vocab_size != vocab.size()) {
      throw ConfigError("checkpoint vocab size " + std::to_string(b.config().vocab_size) + " does not match vocab size " +
                        std::to_string(vocab.size()));
    }
    return b;
  }
  model::EncoderConfig ec = c.config.encoder;
  ec.vocab_size = vocab.size();
  auto b = model::ModelBundle::create(ec, seed);
  for (const auto& [task, labels] : heads) b.add_head(task, labels, task_seed(seed, "head:" + task));
  return b;
}

std::vector<corpus::TaskDataset> with_weights(const Context& c, const std::map<std::string, TaskSplit>& tasks,
                                              const std::vector<std::string>& names) {
  std::vector<corpus::TaskDataset> v;
  for (const auto& n : names) {
    auto d = tasks.at(n).train;
    d.loss_weight = corpus::find_schema(c.schemas, n).loss_weight;
    v.push_back(std::move(d));
  }
  return v;
}

json scores_json(const std::string& name, const std::vector<std::pair<std::string, double>>& scores) {
  json arr = json::array();
  for (const auto& [task, v] : scores) arr.push_back({{"task", task}, {"set", "eval"}, {"value", v}});
  return {{"name", name}, {"scores", arr}};
}

metrics::RunScores to_run_scores(const json& j, const std::string& fallback_name) {
  metrics::RunScores r;
  r.name = j.value("name", fallback_name);
  for (const auto& s : j.at("scores")) r.cells.push_back({s.at("task"), s.at("set"), s.at("value").get<double>()});
  return r;
}

// Evaluates every named head on its eval split and writes per-task metric files.
void write_evaluation(RunDir& run, const model::ModelBundle& bundle, const std::map<std::string, TaskSplit>& tasks,
                      const std::vector<std::string>& names, const tokenizer::Vocab& vocab, const std::string& label,
                      std::ostream& out) {
  std::vector<std::pair<std::string, double>> scores;
  for (const auto& n : names) {
    const auto r = training::evaluate(bundle, tasks.at(n).eval, vocab);
    run.write("eval_" + n + ".json", metrics::to_json(r) + "\n");
    run.write("confusion_" + n + ".csv", metrics::confusion_csv(r));
    scores.emplace_back(n, r.macro_f1);
  }
  const json s = scores_json(label, scores);
  run.write("scores.json", s.dump(2) + "\n");
  const std::string table = metrics::compare_runs({to_run_scores(s, label)});
  run.write("metrics.md", table);
  out << table;
}

void write_model(RunDir& run, const model::ModelBundle& bundle, const tokenizer::Vocab& vocab) {
  model::save_checkpoint(bundle, run / "model.ckpt");
  vocab.save(run / "vocab.txt");
}

void write_train_report(RunDir& run, const training::RunReport& report) {
  run.write("report.json", report.to_json() + "\n");
  run.write("loss_curve.csv", report.loss_curve_csv());
}

json records_to_jsonl_line(const corpus::TextRecord& r) {
  json labels = json::object();
  for (const auto& [k, v] : r.labels) labels[k] = v;
  return {{"id", r.id}, {"text", r.text}, {"source", r.source}, {"labels", labels}};
}

std::string safe_name(const std::string& s) {
  std::string out;
  for (char ch : s) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_') ? ch : '_';
  return out;
}

// ---- subcommands ----

void cmd_preprocess(const Options& o, const std::vector<std::string>& argv, std::ostream& out) {
  const Context c = open_context(o);
  RunDir run = open_run(c, "preprocess", argv);
  json reports = json::object();
  for (const auto& d : c.config.datasets) {
    const auto records = load_records(c, {d}, &reports);
    std::string lines;
    for (const auto& r : records) lines += records_to_jsonl_line(r).dump() + "\n";
    run.write(safe_name(d.source) + ".jsonl", lines);
    out << d.source << ": " << records.size() << " records\n";
  }
  run.write("preprocess.json", reports.dump(2) + "\n");
  run.finish(c.config.to_json());
  out << "run directory: " << run.path().string() << "\n";
}

void cmd_build_vocab(const Options& o, const std::vector<std::string>& argv, std::ostream& out) {
  const Context c = open_context(o);
  RunDir run = open_run(c, "build-vocab", argv);
  const auto names = task_names(c.config);
  std::map<std::string, TaskSplit> tasks;
  std::vector<std::string> texts = domain_texts(c);
  if (names.empty()) {
    for (auto& r : load_records(c, c.config.datasets, nullptr)) texts.push_back(std::move(r.text));
  } else {
    tasks = compile_named(c, names);
  }
  const auto vocab = build_vocab(c, tasks, texts);
  vocab.save(run / "vocab.txt");
  run.write("vocab.json", json{{"size", vocab.size()}, {"min_freq", vocab.min_freq()}}.dump(2) + "\n");
  out << "vocab size " << vocab.size() << "\n";
  run.finish(c.config.to_json());
  out << "run directory: " << run.path().string() << "\n";
}

void cmd_compile_tasks(const Options& o, const std::vector<std::string>& argv, std::ostream& out) {
  const Context c = open_context(o);
  RunDir run = open_run(c, "compile-tasks", argv);
  const auto records = load_records(c, c.config.datasets, nullptr);
  auto names = task_names(c.config);
  const bool explicit_names = !names.empty();
  if (!explicit_names) {
    for (const auto& s : c.schemas) names.push_back(s.name);
  }
  json summary = json::object();
  std::map<std::string, TaskSplit> compiled;
  for (const auto& n : names) {
    TaskSplit s;
    try {
      s = compile_split(c, records, n);
    } catch (const SchemaError& e) {
      if (explicit_names) throw;
      summary[n] = {{"skipped", e.what()}};
      continue;
    }
    corpus::write_jsonl(s.train, run / (n + ".train.jsonl"));
    corpus::write_jsonl(s.eval, run / (n + ".eval.jsonl"));
    summary[n] = {{"labels", s.train.label_set},
                  {"input", s.report.input},
                  {"kept", s.report.kept},
                  {"dropped_unlabeled", s.report.dropped_unlabeled},
                  {"dropped_unmapped", s.report.dropped_unmapped},
                  {"unmapped_labels", s.report.unmapped_labels},
                  {"train", s.train.examples.size()},
                  {"eval", s.eval.examples.size()}};
    out << n << ": " << s.train.examples.size() << " train / " << s.eval.examples.size() << " eval\n";
    compiled.emplace(n, std::move(s));
  }
  json result{{"tasks", summary}};
  if (compiled.count("edosA") && compiled.count("edosB") && compiled.count("edosC")) {
    auto whole = [&](const std::string& n) {
      auto d = compiled.at(n).train;
      const auto& e = compiled.at(n).eval.examples;
      d.examples.insert(d.examples.end(), e.begin(), e.end());
      return d;
    };
    const auto h = corpus::check_hierarchy(whole("edosA"), whole("edosB"), whole("edosC"));
    result["hierarchy"] = {{"ok", h.ok()}, {"violations", h.violations}};
    if (!h.ok()) out << "hierarchy: " << h.violations.size() << " violations (see compile.json)\n";
  }
  run.write("compile.json", result.dump(2) + "\n");
  run.finish(c.config.to_json());
  out << "run directory: " << run.path().string() << "\n";
}

void cmd_pretrain(const Options& o, const std::vector<std::string>& argv, std::ostream& out) {
  Context c = open_context(o);
  if (c.config.mode != "tapt" && c.config.mode != "dapt" && c.config.mode != "dapt+tapt") c.config.mode = "tapt";
  const auto mode = training::parse_pretrain_mode(c.config.mode);
  RunDir run = open_run(c, "pretrain", argv);
  const auto names = task_names(c.config);
  std::map<std::string, TaskSplit> tasks;
  if (mode != training::PretrainMode::Dapt || !names.empty()) tasks = compile_named(c, names);
  std::vector<std::string> task_texts;
  for (const auto& [n, s] : tasks) {
    for (auto& t : s.train.texts()) task_texts.push_back(std::move(t));
  }
  const auto domain = mode == training::PretrainMode::Tapt ? std::vector<std::string>{} : domain_texts(c);
  if (mode != training::PretrainMode::Tapt && domain.empty()) throw ConfigError("DAPT needs 'domain' datasets");
  const auto vocab = resolve_vocab(o, o.init.empty() ? fs::path{} : fs::path(o.init), run,
                                   [&] { return build_vocab(c, tasks, domain); });
  auto bundle = start_bundle(c, o, run, vocab, {});
  const auto results = training::run_pretraining(bundle, mode, task_texts, domain, vocab, c.config.tapt, c.config.dapt);
  json stages = json::array();
  const bool two = results.size() == 2;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const std::string stage = two ? (i == 0 ? "dapt" : "tapt") : c.config.mode;
    const auto& r = results[i];
    run.write("curve_" + stage + ".csv", r.curve_csv());
    stages.push_back({{"stage", stage},
                      {"initial_val_loss", r.initial_val_loss},
                      {"best_val_loss", r.best_val_loss},
                      {"converged", r.converged},
                      {"steps", r.steps}});
    out << stage << ": val loss " << r.initial_val_loss << " -> " << r.best_val_loss
        << (r.converged ? " (converged)" : "") << "\n";
  }
  write_model(run, results.back().best, vocab);
  run.write("pretrain.json", json{{"mode", c.config.mode}, {"stages", stages}}.dump(2) + "\n");
  run.finish(c.config.to_json());
  out << "run directory: " << run.path().string() << "\n";
}

void cmd_mtl(const Options& o, const std::vector<std::string>& argv, std::ostream& out) {
  const Context c = open_context(o);
  RunDir run = open_run(c, "mtl", argv);
  auto names = c.config.tasks;
  if (names.empty()) names = task_names(c.config);
  const auto tasks = compile_named(c, names);
  const auto vocab = resolve_vocab(o, o.init.empty() ? fs::path{} : fs::path(o.init), run,
                                   [&] { return build_vocab(c, tasks, {}); });
  const auto bundle = start_bundle(c, o, run, vocab, head_spec(tasks, names));
  const auto result = training::train_mtl(bundle, with_weights(c, tasks, names), vocab, c.config.mtl);
  write_model(run, result.best, vocab);
  write_train_report(run, result.report);
  std::string label;
  for (const auto& n : names) label += (label.empty() ? "" : "+") + n;
  write_evaluation(run, result.best, tasks, names, vocab, label, out);
  run.finish(c.config.to_json());
  out << "run directory: " << run.path().string() << "\n";
}

// Name of the run that produced `checkpoint`, read from its scores.json.
std::optional<std::string> producer_label(const fs::path& checkpoint) {
  const fs::path p = checkpoint.parent_path() / "scores.json";
  if (checkpoint.empty() || !fs::exists(p)) return std::nullopt;
  try {
    return json::parse(read_file(p)).at("name").get<std::string>();
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

// Fine-tuning after multi-task training carries the +FT suffix.
std::string finetune_label(const std::string& init, const std::string& target) {
  if (init.empty()) return target;
  const fs::path manifest = fs::path(init).parent_path() / "manifest.json";
  if (fs::exists(manifest)) {
    try {
      const auto m = json::parse(read_file(manifest));
      if (m.value("subcommand", "") == "mtl") return producer_label(init).value_or(target) + sweep::kFinetuneSuffix;
    } catch (const json::exception&) {
    }
  }
  return target;
}

void cmd_finetune(const Options& o, const std::vector<std::string>& argv, std::ostream& out) {
  const Context c = open_context(o);
  const std::string target = !o.task.empty() ? o.task : c.config.target;
  if (target.empty()) throw ConfigError("finetune needs a target task (config 'target' or --task)");
  RunDir run = open_run(c, "finetune", argv);
  const auto tasks = compile_named(c, {target});
  const auto vocab = resolve_vocab(o, o.init.empty() ? fs::path{} : fs::path(o.init), run,
                                   [&] { return build_vocab(c, tasks, {}); });
  const auto bundle = start_bundle(c, o, run, vocab, head_spec(tasks, {target}));
  auto dataset = tasks.at(target).train;
  const auto result = training::finetune(bundle, dataset, vocab, c.config.mtl);
  write_model(run, result.best, vocab);
  write_train_report(run, result.report);
  write_evaluation(run, result.best, tasks, {target}, vocab, finetune_label(o.init, target), out);
  run.finish(c.config.to_json());
  out << "run directory: " << run.path().string() << "\n";
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) v.push_back(item);
  }
  return v;
}

void cmd_evaluate(const Options& o, const std::vector<std::string>& argv, std::ostream& out) {
  if (!o.predictions.empty()) {
    // Scores a predictions file: one {"gold": ..., "pred": ...} object per line.
    const fs::path path = o.predictions;
    if (!fs::exists(path)) throw IoError("missing predictions file: " + path.string());
    std::vector<std::string> golds, preds;
    std::stringstream lines(read_file(path));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(lines, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = json::parse(line);
        golds.push_back(j.at("gold").get<std::string>());
        preds.push_back(j.at("pred").get<std::string>());
      } catch (const json::exception& e) {
        throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    std::vector<std::string> labels = split_list(o.labels);
    if (labels.empty()) {
      std::set<std::string> all(golds.begin(), golds.end());
      all.insert(preds.begin(), preds.end());
      labels.assign(all.begin(), all.end());
    }
    const auto [seed, source] = resolve_seed(o.seed, std::nullopt);
    RunDir run(o.out.empty() ? fs::path("runs") : fs::path(o.out), "evaluate", seed, source, argv);
    run.add_input("predictions", path);
    const auto r = metrics::macro_f1(preds, golds, labels);
    const std::string task = o.task.empty() ? "predictions" : o.task;
    run.write("eval.json", metrics::to_json(r) + "\n");
    run.write("confusion.csv", metrics::confusion_csv(r));
    const json s = scores_json(task, {{task, r.macro_f1}});
    run.write("scores.json", s.dump(2) + "\n");
    const std::string table = metrics::compare_runs({to_run_scores(s, task)});
    run.write("metrics.md", table);
    out << table;
    run.finish("");
    out << "run directory: " << run.path().string() << "\n";
    return;
  }
  if (o.checkpoint.empty()) throw ConfigError("evaluate needs --predictions or --checkpoint");
  if (o.config.empty()) throw ConfigError("evaluate --checkpoint needs --config");
  const Context c = open_context(o);
  RunDir run = open_run(c, "evaluate", argv);
  if (!fs::exists(o.checkpoint)) throw IoError("missing checkpoint file: " + o.checkpoint);
  run.add_parent(fs::absolute(o.checkpoint));
  auto names = o.task.empty() ? task_names(c.config) : std::vector<std::string>{o.task};
  const auto tasks = compile_named(c, names);
  const auto vocab = resolve_vocab(o, o.checkpoint, run, [&] { return build_vocab(c, tasks, {}); });
  const auto bundle = model::load_checkpoint(o.checkpoint);
  for (const auto& n : names) {
    if (!bundle.has_head(n)) throw LookupError("checkpoint has no head for task '" + n + "'");
  }
  write_evaluation(run, bundle, tasks, names, vocab,
                   producer_label(o.checkpoint).value_or(fs::path(o.checkpoint).parent_path().filename().string()), out);
  run.finish(c.config.to_json());
  out << "run directory: " << run.path().string() << "\n";
}

void cmd_sweep(const Options& o, const std::vector<std::string>& argv, std::ostream& out) {
  const Context c = open_context(o);
  sweep::SweepSpec spec;
  spec.target = c.config.target;
  spec.candidates = c.config.candidates;
  spec.beam = c.config.sweep.beam;
  spec.stages = c.config.sweep.stages;
  spec.finetune = c.config.sweep.finetune;
  spec.ft_top = c.config.sweep.ft_top;
  spec.validate();
  RunDir run = open_run(c, "sweep", argv);
  std::vector<std::string> names{spec.target};
  names.insert(names.end(), spec.candidates.begin(), spec.candidates.end());
  const auto tasks = compile_named(c, names);
  const auto vocab = resolve_vocab(o, o.init.empty() ? fs::path{} : fs::path(o.init), run,
                                   [&] { return build_vocab(c, tasks, {}); });
  const auto& target_eval = tasks.at(spec.target).eval;
  fs::create_directories(run / "combinations");
  std::map<std::string, model::ModelBundle> trained;

  const auto mtl_eval = [&](const sweep::Combination& combo) {
    const std::string name = sweep::combination_name(combo);
    const auto bundle = start_bundle(c, o, run, vocab, head_spec(tasks, combo));
    const auto result = training::train_mtl(bundle, with_weights(c, tasks, combo), vocab, c.config.mtl);
    const double score = training::evaluate(result.best, target_eval, vocab).macro_f1;
    const fs::path dir = run / "combinations" / safe_name(name);
    fs::create_directories(dir);
    write_file(dir / "report.json", result.report.to_json() + "\n");
    write_file(dir / "scores.json", scores_json(name, {{spec.target, score}}).dump(2) + "\n");
    out << "mtl " << name << ": " << score << "\n";
    trained.insert_or_assign(name, result.best.clone());
    return score;
  };
  const auto ft_eval = [&](const sweep::Combination& combo) {
    const std::string name = sweep::combination_name(combo);
    const auto result = training::finetune(trained.at(name), tasks.at(spec.target).train, vocab, c.config.mtl);
    const double score = training::evaluate(result.best, target_eval, vocab).macro_f1;
    const fs::path dir = run / "combinations" / safe_name(name + sweep::kFinetuneSuffix);
    fs::create_directories(dir);
    write_file(dir / "report.json", result.report.to_json() + "\n");
    write_file(dir / "scores.json",
               scores_json(name + sweep::kFinetuneSuffix, {{spec.target, score}}).dump(2) + "\n");
    out << "ft  " << name << ": " << score << "\n";
    return score;
  };
  const auto result = sweep::run_sweep(spec, mtl_eval, ft_eval);
  json rows = json::array();
  for (const auto& r : result.rows) {
    rows.push_back({{"name", r.name}, {"combination", r.combination}, {"stage", r.stage}, {"score", r.score},
                    {"finetuned", r.finetuned}});
  }
  run.write("sweep.json",
            json{{"target", spec.target}, {"mtl_runs", result.mtl_runs}, {"ft_runs", result.ft_runs}, {"rows", rows}}
                    .dump(2) +
                "\n");
  const std::string table = sweep::render_sweep(result);
  run.write("sweep.md", table);
  out << table;
  run.finish(c.config.to_json());
  out << "run directory: " << run.path().string() << "\n";
}

void cmd_report(const Options& o, const std::vector<std::string>& argv, std::ostream& out) {
  std::vector<metrics::RunScores> rows;
  const auto [seed, source] = resolve_seed(o.seed, std::nullopt);
  RunDir run(o.out.empty() ? fs::path("runs") : fs::path(o.out), "report", seed, source, argv);
  for (const auto& dir : o.runs) {
    const fs::path p = fs::path(dir) / "scores.json";
    if (!fs::exists(p)) throw IoError("missing scores file: " + p.string());
    run.add_input("scores", p);
    try {
      rows.push_back(to_run_scores(json::parse(read_file(p)), fs::path(dir).filename().string()));
    } catch (const json::exception& e) {
      throw SchemaError(p.string() + ": " + e.what());
    }
  }
  const std::string table = metrics::compare_runs(rows);
  run.write("report.md", table);
  out << table;
  run.finish("");
  out << "run directory: " << run.path().string() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-task sexism detection experiments", "mtlforge"};
  app.require_subcommand(1);
  Options o;
  std::optional<bool> ft_flag;

  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* cfg = sub->add_option("--config", o.config, "Experiment config (JSON)");
    if (needs_config) cfg->required();
    sub->add_option("--seed", o.seed, "Seed (overrides MTLFORGE_SEED and the config)");
    sub->add_option("--out", o.out, "Root directory for run directories");
  };
  auto* preprocess = app.add_subcommand("preprocess", "Normalize datasets and write JSONL records");
  common(preprocess, true);
  auto* build_vocab_cmd = app.add_subcommand("build-vocab", "Build the word vocabulary");
  common(build_vocab_cmd, true);
  auto* compile = app.add_subcommand("compile-tasks", "Compile task datasets and train/eval splits");
  common(compile, true);
  auto* pretrain = app.add_subcommand("pretrain", "Masked language model pre-training");
  common(pretrain, true);
  pretrain->add_option("--mode", o.mode, "tapt, dapt or dapt+tapt")
      ->check(CLI::IsMember({"tapt", "dapt", "dapt+tapt"}));
  pretrain->add_option("--init", o.init, "Checkpoint to continue from");
  pretrain->add_option("--vocab", o.vocab, "Vocabulary file");
  auto* mtl = app.add_subcommand("mtl", "Multi-task training");
  common(mtl, true);
  mtl->add_option("--init", o.init, "Checkpoint to start from");
  mtl->add_option("--vocab", o.vocab, "Vocabulary file");
  auto* finetune = app.add_subcommand("finetune", "Single-task fine-tuning on the target");
  common(finetune, true);
  finetune->add_option("--init", o.init, "Checkpoint to start from");
  finetune->add_option("--vocab", o.vocab, "Vocabulary file");
  finetune->add_option("--task", o.task, "Task to fine-tune (default: config target)");
  auto* evaluate = app.add_subcommand("evaluate", "Score predictions or a checkpoint");
  common(evaluate, false);
  evaluate->add_option("--predictions", o.predictions, "JSONL of {\"gold\", \"pred\"}");
  evaluate->add_option("--labels", o.labels, "Comma-separated label set");
  evaluate->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate");
  evaluate->add_option("--vocab", o.vocab, "Vocabulary file");
  evaluate->add_option("--task", o.task, "Task name");
  auto* sweep_cmd = app.add_subcommand("sweep", "Incremental dataset-combination sweep");
  common(sweep_cmd, true);
  sweep_cmd->add_option("--beam", o.beam, "Combinations carried to the next stage")->check(CLI::PositiveNumber);
  sweep_cmd->add_option("--stages", o.stages, "Number of stages")->check(CLI::PositiveNumber);
  sweep_cmd->add_flag("--ft,!--no-ft", ft_flag, "Fine-tune the best combinations on the target");
  sweep_cmd->add_option("--init", o.init, "Checkpoint to start every run from");
  sweep_cmd->add_option("--vocab", o.vocab, "Vocabulary file");
  auto* report = app.add_subcommand("report", "Markdown comparison of finished runs");
  report->add_option("runs", o.runs, "Run directories")->required();
  report->add_option("--seed", o.seed, "Seed recorded in the run directory name");
  report->add_option("--out", o.out, "Root directory for run directories");

  std::vector<std::string> argv{"mtlforge"};
  argv.insert(argv.end(), args.begin(), args.end());
  std::vector<const char*> cargv;
  for (const auto& a : argv) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  o.ft = ft_flag;

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "preprocess") cmd_preprocess(o, argv, out);
    else if (name == "build-vocab") cmd_build_vocab(o, argv, out);
    else if (name == "compile-tasks") cmd_compile_tasks(o, argv, out);
    else if (name == "pretrain") cmd_pretrain(o, argv, out);
    else if (name == "mtl") cmd_mtl(o, argv, out);
    else if (name == "finetune") cmd_finetune(o, argv, out);
    else if (name == "evaluate") cmd_evaluate(o, argv, out);
    else if (name == "sweep") cmd_sweep(o, argv, out);
    else if (name == "report") cmd_report(o, argv, out);
  } catch (const IoError& e) {
    err << "mtlforge: I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "mtlforge: I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    err << "mtlforge: error: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    err << "mtlforge: error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitOk;
}

}  // namespace mtlforge::cli
