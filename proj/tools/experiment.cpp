#include "experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mtlforge/error.hpp"

namespace mtlforge::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Rejects keys outside `allowed` so typos surface instead of silently using defaults.
void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in '" + where + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path.lexically_normal() : (base / path).lexically_normal();
}

const char* format_name(corpus::Format f) {
  switch (f) {
    case corpus::Format::Csv: return "csv";
    case corpus::Format::Tsv: return "tsv";
    case corpus::Format::Jsonl: return "jsonl";
  }
  return "csv";
}

DatasetSpec parse_dataset(const json& j, const fs::path& base, const std::string& where) {
  check_keys(j, where, {"path", "format", "source", "columns"});
  DatasetSpec d;
  if (!j.contains("path")) throw ConfigError("'" + where + "' needs a path");
  d.path = resolve(base, j.at("path").get<std::string>());
  if (j.contains("format")) d.format = corpus::parse_format(j.at("format").get<std::string>());
  d.source = j.value("source", d.path.stem().string());
  if (j.contains("columns")) {
    const auto& c = j.at("columns");
    check_keys(c, where + ".columns", {"id", "text", "labels"});
    read(c, "id", d.columns.id);
    read(c, "text", d.columns.text);
    if (c.contains("labels")) {
      for (const auto& [key, column] : c.at("labels").items()) d.columns.labels.emplace_back(key, column.get<std::string>());
    }
  }
  return d;
}

json dataset_json(const DatasetSpec& d) {
  json labels = json::object();
  for (const auto& [key, column] : d.columns.labels) labels[key] = column;
  json j{{"path", d.path.string()}};
  if (d.format) j["format"] = format_name(*d.format);
  j["source"] = d.source;
  j["columns"] = {{"id", d.columns.id}, {"text", d.columns.text}, {"labels", labels}};
  return j;
}

training::PretrainConfig parse_pretrain(const json& j, const std::string& where, training::PretrainConfig p) {
  check_keys(j, where,
             {"mask_prob", "mask_scheme", "batch_size", "max_epochs", "lr", "eval_every", "patience", "val_fraction"});
  read(j, "mask_prob", p.mask_prob);
  if (j.contains("mask_scheme")) {
    const auto s = j.at("mask_scheme").get<std::vector<double>>();
    if (s.size() != 3) throw ConfigError("'" + where + ".mask_scheme' needs three fractions");
    p.scheme = {s[0], s[1], s[2]};
  }
  read(j, "batch_size", p.batch_size);
  read(j, "max_epochs", p.max_epochs);
  read(j, "lr", p.lr);
  read(j, "eval_every", p.eval_every);
  read(j, "patience", p.patience);
  read(j, "val_fraction", p.val_fraction);
  return p;
}

json pretrain_json(const training::PretrainConfig& p) {
  return {{"mask_prob", p.mask_prob},
          {"mask_scheme", {p.scheme.p_mask, p.scheme.p_random, p.scheme.p_keep}},
          {"batch_size", p.batch_size},
          {"max_epochs", p.max_epochs},
          {"lr", p.lr},
          {"eval_every", p.eval_every},
          {"patience", p.patience},
          {"val_fraction", p.val_fraction}};
}

}  // namespace

fs::path default_data_dir() {
  if (const char* env = std::getenv("MTLFORGE_DATA_DIR"); env && *env) return env;
  return MTLFORGE_DEFAULT_DATA_DIR;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const fs::path& base_dir) {
  ExperimentConfig c;
  c.schema = default_data_dir() / "tasks.json";
  c.lexicon = default_data_dir() / "lexicon.tsv";
  c.emoji = default_data_dir() / "emoji.tsv";
  try {
    const json j = json::parse(text);
    check_keys(j, "config",
               {"version", "seed", "mode", "paths", "datasets", "domain", "tasks", "target", "candidates", "norm",
                "split", "downsample", "vocab", "encoder", "tapt", "dapt", "mtl", "sweep"});
    if (!j.contains("version")) throw ConfigError("config has no 'version'");
    if (j.at("version").get<int>() != kConfigVersion) {
      throw ConfigError("unsupported config version " + j.at("version").dump() + " (expected " +
                        std::to_string(kConfigVersion) + ")");
    }
    if (j.contains("seed") && !j.at("seed").is_null()) c.seed = j.at("seed").get<std::uint64_t>();
    read(j, "mode", c.mode);
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      check_keys(p, "paths", {"schema", "lexicon", "emoji", "out"});
      if (p.contains("schema")) c.schema = resolve(base_dir, p.at("schema").get<std::string>());
      if (p.contains("lexicon")) c.lexicon = resolve(base_dir, p.at("lexicon").get<std::string>());
      if (p.contains("emoji")) c.emoji = resolve(base_dir, p.at("emoji").get<std::string>());
      if (p.contains("out")) c.out = resolve(base_dir, p.at("out").get<std::string>());
    }
    if (c.out.is_relative()) c.out = resolve(base_dir, c.out.string());
    if (j.contains("datasets")) {
      for (std::size_t i = 0; i < j.at("datasets").size(); ++i) {
        c.datasets.push_back(parse_dataset(j.at("datasets")[i], base_dir, "datasets[" + std::to_string(i) + "]"));
      }
    }
    if (j.contains("domain")) {
      for (std::size_t i = 0; i < j.at("domain").size(); ++i) {
        c.domain.push_back(parse_dataset(j.at("domain")[i], base_dir, "domain[" + std::to_string(i) + "]"));
      }
    }
    read(j, "tasks", c.tasks);
    read(j, "target", c.target);
    read(j, "candidates", c.candidates);
    if (j.contains("norm")) {
      const auto& n = j.at("norm");
      check_keys(n, "norm", {"masks", "emoji", "hashtags", "user_token", "url_token"});
      read(n, "masks", c.norm.masks);
      read(n, "emoji", c.norm.emoji);
      read(n, "hashtags", c.norm.hashtags);
      read(n, "user_token", c.norm.user_token);
      read(n, "url_token", c.norm.url_token);
    }
    if (j.contains("split")) {
      const auto& s = j.at("split");
      check_keys(s, "split", {"ratio", "stratified"});
      read(s, "ratio", c.split.ratio);
      read(s, "stratified", c.split.stratified);
    }
    read(j, "downsample", c.downsample);
    if (j.contains("vocab")) {
      check_keys(j.at("vocab"), "vocab", {"min_freq"});
      read(j.at("vocab"), "min_freq", c.min_freq);
    }
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      check_keys(e, "encoder", {"vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_len", "dropout"});
      read(e, "vocab_size", c.encoder.vocab_size);
      read(e, "d_model", c.encoder.d_model);
      read(e, "n_heads", c.encoder.n_heads);
      read(e, "n_layers", c.encoder.n_layers);
      read(e, "d_ff", c.encoder.d_ff);
      read(e, "max_len", c.encoder.max_len);
      read(e, "dropout", c.encoder.dropout);
    }
    if (j.contains("tapt")) c.tapt = parse_pretrain(j.at("tapt"), "tapt", c.tapt);
    if (j.contains("dapt")) c.dapt = parse_pretrain(j.at("dapt"), "dapt", c.dapt);
    if (j.contains("mtl")) {
      const auto& m = j.at("mtl");
      check_keys(m, "mtl",
                 {"batch_size", "lr", "epochs", "loss_weights", "ft_lr", "ft_epochs", "dev_fraction", "target_aggregate"});
      read(m, "batch_size", c.mtl.batch_size);
      read(m, "lr", c.mtl.lr);
      read(m, "epochs", c.mtl.epochs);
      read(m, "loss_weights", c.mtl.loss_weights);
      read(m, "ft_lr", c.mtl.ft_lr);
      read(m, "ft_epochs", c.mtl.ft_epochs);
      read(m, "dev_fraction", c.mtl.dev_fraction);
      if (m.contains("target_aggregate") && !m.at("target_aggregate").is_null()) {
        c.mtl.target_aggregate = m.at("target_aggregate").get<double>();
      }
    }
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      check_keys(s, "sweep", {"beam", "stages", "finetune", "ft_top"});
      read(s, "beam", c.sweep.beam);
      read(s, "stages", c.sweep.stages);
      read(s, "finetune", c.sweep.finetune);
      read(s, "ft_top", c.sweep.ft_top);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.norm.validate();
  c.split.validate();
  c.tapt.validate();
  c.dapt.validate();
  c.mtl.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), fs::absolute(path).parent_path());
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["version"] = kConfigVersion;
  j["seed"] = seed ? json(*seed) : json(nullptr);
  j["mode"] = mode;
  j["paths"] = {{"schema", schema.string()}, {"lexicon", lexicon.string()}, {"emoji", emoji.string()},
                {"out", out.string()}};
  j["datasets"] = json::array();
  for (const auto& d : datasets) j["datasets"].push_back(dataset_json(d));
  j["domain"] = json::array();
  for (const auto& d : domain) j["domain"].push_back(dataset_json(d));
  j["tasks"] = tasks;
  j["target"] = target;
  j["candidates"] = candidates;
  j["norm"] = {{"masks", norm.masks}, {"emoji", norm.emoji}, {"hashtags", norm.hashtags},
               {"user_token", norm.user_token}, {"url_token", norm.url_token}};
  j["split"] = {{"ratio", split.ratio}, {"stratified", split.stratified}};
  j["downsample"] = json::object();
  for (const auto& [task, n] : downsample) j["downsample"][task] = n;
  j["vocab"] = {{"min_freq", min_freq}};
  j["encoder"] = json::parse(encoder.to_json());
  j["tapt"] = pretrain_json(tapt);
  j["dapt"] = pretrain_json(dapt);
  j["mtl"] = {{"batch_size", mtl.batch_size},
              {"lr", mtl.lr},
              {"epochs", mtl.epochs},
              {"loss_weights", mtl.loss_weights},
              {"ft_lr", mtl.ft_lr},
              {"ft_epochs", mtl.ft_epochs},
              {"dev_fraction", mtl.dev_fraction},
              {"target_aggregate", mtl.target_aggregate ? json(*mtl.target_aggregate) : json(nullptr)}};
  j["sweep"] = {{"beam", sweep.beam}, {"stages", sweep.stages}, {"finetune", sweep.finetune}, {"ft_top", sweep.ft_top}};
  return j.dump(2) + "\n";
}

std::vector<std::pair<std::string, fs::path>> ExperimentConfig::inputs() const {
  std::vector<std::pair<std::string, fs::path>> v{{"schema", schema}, {"lexicon", lexicon}, {"emoji", emoji}};
  for (const auto& d : datasets) v.emplace_back("dataset", d.path);
  for (const auto& d : domain) v.emplace_back("domain", d.path);
  return v;
}

void ExperimentConfig::check_inputs() const {
  for (const auto& [role, path] : inputs()) {
    if (!fs::is_regular_file(path)) throw IoError("missing " + role + " file: " + path.string());
  }
}

void ExperimentConfig::apply_seed(std::uint64_t value) {
  seed = value;
  split.seed = value;
  tapt.seed = value;
  dapt.seed = value;
  mtl.seed = value;
}

}  // namespace mtlforge::cli
