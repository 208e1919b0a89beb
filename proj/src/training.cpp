#include "mtlforge/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "mtlforge/error.hpp"
#include "mtlforge/numerics/adam.hpp"
#include "mtlforge/numerics/ops.hpp"

namespace mtlforge::training {

namespace ops = numerics;
using model::Batch;
using model::ModelBundle;
using numerics::Rng;
using numerics::Tensor;

namespace {

std::vector<tokenizer::Encoding> encode_all(const std::vector<std::string>& texts, const tokenizer::Vocab& vocab,
                                            std::size_t max_len) {
  std::vector<tokenizer::Encoding> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(tokenizer::encode(t, vocab, max_len));
  return out;
}

// Gathers rows and drops trailing columns that are padding in every row.
Batch gather(const std::vector<tokenizer::Encoding>& enc, std::span<const std::size_t> rows) {
  std::size_t width = 1;
  for (auto r : rows) {
    const auto& m = enc[r].mask;
    for (std::size_t j = m.size(); j > width; --j) {
      if (m[j - 1]) {
        width = j;
        break;
      }
    }
  }
  Batch b;
  b.batch = rows.size();
  b.seq = width;
  for (auto r : rows) {
    b.ids.insert(b.ids.end(), enc[r].ids.begin(), enc[r].ids.begin() + static_cast<std::ptrdiff_t>(width));
    b.mask.insert(b.mask.end(), enc[r].mask.begin(), enc[r].mask.begin() + static_cast<std::ptrdiff_t>(width));
  }
  return b;
}

std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& items, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < items.size(); i += size) {
    out.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(i),
                     items.begin() + static_cast<std::ptrdiff_t>(std::min(items.size(), i + size)));
  }
  return out;
}

struct MaskedBatch {
  Batch batch;
  std::vector<std::int64_t> labels;
  std::size_t targets = 0;
};

MaskedBatch masked_batch(const std::vector<tokenizer::Encoding>& enc, std::span<const std::size_t> rows,
                         std::size_t vocab_size, const PretrainConfig& cfg, Rng& rng) {
  MaskedBatch mb;
  mb.batch = gather(enc, rows);
  MaskedInput mi = mask_tokens(mb.batch.ids, mb.batch.mask, vocab_size, cfg.mask_prob, cfg.scheme, rng);
  mb.batch.ids = std::move(mi.input_ids);
  mb.labels = std::move(mi.labels);
  for (auto l : mb.labels) mb.targets += l != ops::kIgnoreIndex;
  return mb;
}

Tensor mlm_loss(const ModelBundle& bundle, const MaskedBatch& mb, const model::ForwardOptions& opt) {
  const Tensor hidden = model::encode(bundle, mb.batch, opt).hidden;
  const Tensor logits = ops::reshape(model::mlm_logits(bundle, hidden),
                                     {mb.batch.batch * mb.batch.seq, bundle.config().vocab_size});
  return ops::cross_entropy(logits, mb.labels);
}

// Mean masked-token loss over a fixed set of masked validation batches.
double validation_loss(const ModelBundle& bundle, const std::vector<MaskedBatch>& val) {
  ops::NoGradGuard guard;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& mb : val) {
    if (mb.targets == 0) continue;
    total += mlm_loss(bundle, mb, {}).item() * static_cast<double>(mb.targets);
    count += mb.targets;
  }
  return total / static_cast<double>(count);
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::vector<std::size_t> predict_encoded(const ModelBundle& bundle, const std::string& task,
                                         const std::vector<tokenizer::Encoding>& enc, std::span<const std::size_t> rows,
                                         std::size_t batch_size) {
  ops::NoGradGuard guard;
  std::vector<std::size_t> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); i += batch_size) {
    const auto part = rows.subspan(i, std::min(batch_size, rows.size() - i));
    const Tensor logits = model::classify(bundle, task, gather(enc, part));
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < part.size(); ++r) out.push_back(argmax_row(logits.data().subspan(r * k, k)));
  }
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

struct TaskData {
  const corpus::TaskDataset* dataset;
  double weight;
  std::vector<tokenizer::Encoding> enc;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> dev_rows;
};

TrainResult train_loop(const ModelBundle& bundle, const std::vector<corpus::TaskDataset>& tasks,
                       const tokenizer::Vocab& vocab, const MtlConfig& cfg, const std::string& regime, double lr,
                       std::size_t epochs) {
  cfg.validate();
  if (tasks.empty()) throw ConfigError(regime + ": no tasks");
  if (vocab.size() != bundle.config().vocab_size) {
    throw ConfigError(regime + ": vocabulary has " + std::to_string(vocab.size()) + " entries but the encoder expects " +
                      std::to_string(bundle.config().vocab_size));
  }
  const Rng root(cfg.seed);
  std::vector<TaskData> data;
  RunReport report;
  report.regime = regime;
  report.lr = lr;
  report.epochs = epochs;
  report.batch_size = cfg.batch_size;
  report.seed = cfg.seed;
  bool any_positive = false;
  for (const auto& t : tasks) {
    t.validate();
    if (!bundle.has_head(t.name)) throw ConfigError(regime + ": task '" + t.name + "' has no registered head");
    if (bundle.heads().at(t.name) != t.label_set) {
      throw ConfigError(regime + ": head '" + t.name + "' labels differ from the task's label set");
    }
    auto w = cfg.loss_weights.find(t.name);
    const double weight = w == cfg.loss_weights.end() ? t.loss_weight : w->second;
    any_positive = any_positive || weight > 0.0;
    report.loss_weights[t.name] = weight;

    TaskData td{&t, weight, encode_all(t.texts(), vocab, bundle.config().max_len), t.label_indices(), {}, {}};
    std::vector<std::size_t> all(t.examples.size());
    std::iota(all.begin(), all.end(), 0);
    if (cfg.dev_fraction == 0.0 || all.size() < 2) {
      td.train_rows = td.dev_rows = all;
    } else {
      // Carve the selection slice by id so the split reuses the corpus splitter.
      corpus::TaskDataset indexed = t;
      for (std::size_t i = 0; i < indexed.examples.size(); ++i) indexed.examples[i].id = std::to_string(i);
      corpus::SplitSpec spec{1.0 - cfg.dev_fraction, numerics::splitmix64(cfg.seed ^ numerics::fnv1a64(t.name)), true};
      std::pair<corpus::TaskDataset, corpus::TaskDataset> parts;
      try {
        parts = corpus::split_train_eval(indexed, spec);
      } catch (const ContractError&) {
        spec.stratified = false;
        parts = corpus::split_train_eval(indexed, spec);
      }
      for (const auto& ex : parts.first.examples) td.train_rows.push_back(std::stoul(ex.id));
      for (const auto& ex : parts.second.examples) td.dev_rows.push_back(std::stoul(ex.id));
      if (td.dev_rows.empty() || td.train_rows.empty()) td.train_rows = td.dev_rows = all;
    }
    data.push_back(std::move(td));
  }
  if (!any_positive) throw ConfigError(regime + ": at least one loss weight must be positive");

  TrainResult result{bundle.clone(), std::move(report)};
  RunReport& rep = result.report;
  rep.best_aggregate = -1.0;
  if (epochs == 0) return result;

  ModelBundle work = bundle.clone();
  const auto params = work.named_parameters();
  numerics::AdamState adam;
  adam.lr = lr;
  Rng dropout_rng = root.substream("dropout");

  std::vector<std::size_t> sizes;
  for (const auto& td : data) sizes.push_back(td.train_rows.size());

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    Rng sched_rng = root.substream("schedule", epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    std::vector<double> task_loss_sum(data.size(), 0.0);
    std::vector<std::size_t> task_batches(data.size(), 0);
    double loss_sum = 0.0;
    const auto schedule = build_mtl_schedule(sizes, cfg.batch_size, sched_rng);
    for (const auto& sb : schedule) {
      const TaskData& td = data[sb.task];
      std::vector<std::size_t> rows;
      std::vector<std::int64_t> y;
      for (auto e : sb.examples) {
        rows.push_back(td.train_rows[e]);
        y.push_back(static_cast<std::int64_t>(td.labels[td.train_rows[e]]));
      }
      work.zero_grad();
      const Tensor logits = model::classify(work, td.dataset->name, gather(td.enc, rows), {&dropout_rng});
      const Tensor loss = ops::scale(ops::cross_entropy(logits, y), td.weight);
      loss.backward();
      numerics::adam_step(params, adam);
      rep.step_losses.push_back(loss.item());
      loss_sum += loss.item();
      task_loss_sum[sb.task] += loss.item();
      ++task_batches[sb.task];
    }
    rec.train_loss = loss_sum / static_cast<double>(schedule.size());

    double agg = 0.0;
    for (std::size_t t = 0; t < data.size(); ++t) {
      const TaskData& td = data[t];
      const std::string& name = td.dataset->name;
      rec.task_loss[name] = task_batches[t] ? task_loss_sum[t] / static_cast<double>(task_batches[t]) : 0.0;
      const auto preds = predict_encoded(work, name, td.enc, td.dev_rows, 64);
      std::vector<std::size_t> golds;
      for (auto r : td.dev_rows) golds.push_back(td.labels[r]);
      const double f1 = metrics::macro_f1(preds, golds, td.dataset->label_set).macro_f1;
      rec.dev_macro_f1[name] = f1;
      agg += f1;
    }
    rec.aggregate = agg / static_cast<double>(data.size());
    rep.history.push_back(rec);
    if (rec.aggregate > rep.best_aggregate) {
      rep.best_aggregate = rec.aggregate;
      rep.best_epoch = epoch;
      result.best = work.clone();
    }
    if (cfg.target_aggregate && rec.aggregate >= *cfg.target_aggregate) break;
  }
  return result;
}

}  // namespace

void PretrainConfig::validate() const {
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ConfigError("mask_prob must lie in [0, 1]");
  for (double p : {scheme.p_mask, scheme.p_random, scheme.p_keep}) {
    if (p < 0.0) throw ConfigError("masking scheme fractions must be non-negative");
  }
  if (std::abs(scheme.p_mask + scheme.p_random + scheme.p_keep - 1.0) > 1e-9) {
    throw ConfigError("masking scheme fractions must sum to 1");
  }
  if (batch_size == 0) throw ConfigError("pretraining batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("pretraining lr must be positive");
  if (patience == 0) throw ConfigError("patience must be at least 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
}

PretrainConfig PretrainConfig::tapt() { return PretrainConfig{}; }

PretrainConfig PretrainConfig::dapt() {
  PretrainConfig c;
  c.batch_size = 24;
  c.max_epochs = 5;
  return c;
}

MaskedInput mask_tokens(std::span<const std::int64_t> ids, std::span<const std::int64_t> mask, std::size_t vocab_size,
                        double mask_prob, const MaskScheme& scheme, Rng& rng, MaskStats* stats) {
  if (ids.size() != mask.size()) throw DimensionError("mask_tokens: ids and mask differ in length");
  MaskedInput out{{ids.begin(), ids.end()}, std::vector<std::int64_t>(ids.size(), ops::kIgnoreIndex)};
  MaskStats local;
  MaskStats& st = stats ? *stats : local;
  const auto n_regular = static_cast<std::int64_t>(vocab_size) - static_cast<std::int64_t>(tokenizer::kNumSpecials);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    if (mask[i] == 0 || id == tokenizer::kPad || id == tokenizer::kCls || id == tokenizer::kSep) continue;
    ++st.eligible;
    if (!rng.bernoulli(mask_prob)) continue;
    ++st.selected;
    out.labels[i] = id;
    const double u = rng.uniform();
    if (u < scheme.p_mask) {
      out.input_ids[i] = tokenizer::kMask;
      ++st.masked;
    } else if (u < scheme.p_mask + scheme.p_random && n_regular > 0) {
      out.input_ids[i] = static_cast<std::int64_t>(tokenizer::kNumSpecials) +
                         static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n_regular)));
      ++st.randomized;
    } else {
      ++st.kept;
    }
  }
  return out;
}

bool check_convergence(std::span<const double> losses, std::size_t patience) {
  if (patience == 0 || losses.size() < patience + 1) return false;
  for (std::size_t i = losses.size() - patience; i < losses.size(); ++i) {
    if (!(losses[i] - losses[i - 1] >= 0.0)) return false;
  }
  return true;
}

std::string PretrainResult::curve_csv() const {
  std::string out = "epoch,step,train_loss,val_loss\n";
  out += "0,0,," + fmt(initial_val_loss) + "\n";
  for (const auto& p : curve) {
    out += std::to_string(p.epoch) + "," + std::to_string(p.step) + "," + fmt(p.train_loss) + "," + fmt(p.val_loss) + "\n";
  }
  return out;
}

PretrainResult pretrain_mlm(const ModelBundle& bundle, const std::vector<std::string>& texts,
                            const tokenizer::Vocab& vocab, const PretrainConfig& cfg) {
  cfg.validate();
  if (texts.empty()) throw ConfigError("pretraining corpus is empty");
  if (texts.size() < 2) throw ConfigError("pretraining corpus needs at least two texts for a validation slice");
  const std::size_t vocab_size = bundle.config().vocab_size;
  if (vocab.size() != vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " entries but the encoder expects " +
                      std::to_string(vocab_size));
  }
  const Rng root(cfg.seed);
  const auto enc = encode_all(texts, vocab, bundle.config().max_len);

  std::vector<std::size_t> order(texts.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = root.substream("mlm-val-split");
  split_rng.shuffle(std::span<std::size_t>(order));
  auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(texts.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, texts.size() - 1);
  std::vector<std::size_t> val_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_rows(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val_rows.begin(), val_rows.end());
  std::sort(train_rows.begin(), train_rows.end());

  // Validation masking is drawn once so every evaluation scores the same targets.
  std::vector<MaskedBatch> val;
  Rng val_rng = root.substream("mlm-val-mask");
  std::size_t val_targets = 0;
  for (const auto& rows : chunk(val_rows, cfg.batch_size)) {
    val.push_back(masked_batch(enc, rows, vocab_size, cfg, val_rng));
    val_targets += val.back().targets;
  }
  if (val_targets == 0) {
    // Too small to select anything at this rate; score every eligible token.
    PretrainConfig all = cfg;
    all.mask_prob = 1.0;
    val.clear();
    for (const auto& rows : chunk(val_rows, cfg.batch_size)) val.push_back(masked_batch(enc, rows, vocab_size, all, val_rng));
    for (const auto& mb : val) val_targets += mb.targets;
    if (val_targets == 0) throw ConfigError("validation texts contain no maskable tokens");
  }

  PretrainResult res{bundle.clone(), {}, 0.0, 0.0, false, 0};
  res.initial_val_loss = validation_loss(bundle, val);
  res.best_val_loss = res.initial_val_loss;
  if (cfg.max_epochs == 0) return res;

  ModelBundle work = bundle.clone();
  const auto params = work.named_parameters();
  numerics::AdamState adam;
  adam.lr = cfg.lr;
  Rng dropout_rng = root.substream("mlm-dropout");
  std::vector<double> history{res.initial_val_loss};
  double window_loss = 0.0;
  std::size_t window_steps = 0;

  auto evaluate_now = [&](std::size_t epoch) {
    const double v = validation_loss(work, val);
    res.curve.push_back({epoch, res.steps, window_steps ? window_loss / static_cast<double>(window_steps) : 0.0, v});
    window_loss = 0.0;
    window_steps = 0;
    history.push_back(v);
    if (v < res.best_val_loss) {
      res.best_val_loss = v;
      res.best = work.clone();
    }
    res.converged = check_convergence(history, cfg.patience);
    return res.converged;
  };

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && !res.converged; ++epoch) {
    std::vector<std::size_t> shuffled = train_rows;
    Rng epoch_rng = root.substream("mlm-epoch", epoch);
    epoch_rng.shuffle(std::span<std::size_t>(shuffled));
    for (const auto& rows : chunk(shuffled, cfg.batch_size)) {
      Rng mask_rng = root.substream("mlm-mask", res.steps);
      const MaskedBatch mb = masked_batch(enc, rows, vocab_size, cfg, mask_rng);
      ++res.steps;
      if (mb.targets == 0) continue;
      work.zero_grad();
      const Tensor loss = mlm_loss(work, mb, {&dropout_rng});
      loss.backward();
      numerics::adam_step(params, adam);
      window_loss += loss.item();
      ++window_steps;
      if (cfg.eval_every && res.steps % cfg.eval_every == 0 && evaluate_now(epoch)) break;
    }
    if (!cfg.eval_every && !res.converged) evaluate_now(epoch);
  }
  return res;
}

PretrainMode parse_pretrain_mode(const std::string& name) {
  if (name == "tapt") return PretrainMode::Tapt;
  if (name == "dapt") return PretrainMode::Dapt;
  if (name == "dapt+tapt") return PretrainMode::DaptTapt;
  throw ConfigError("unknown pretraining mode '" + name + "' (expected tapt, dapt or dapt+tapt)");
}

std::string to_string(PretrainMode mode) {
  switch (mode) {
    case PretrainMode::Tapt:
      return "tapt";
    case PretrainMode::Dapt:
      return "dapt";
    case PretrainMode::DaptTapt:
      return "dapt+tapt";
  }
  return "";
}

std::vector<PretrainResult> run_pretraining(const ModelBundle& bundle, PretrainMode mode,
                                            const std::vector<std::string>& task_texts,
                                            const std::vector<std::string>& domain_texts,
                                            const tokenizer::Vocab& vocab, const PretrainConfig& tapt_config,
                                            const PretrainConfig& dapt_config) {
  std::vector<PretrainResult> out;
  switch (mode) {
    case PretrainMode::Tapt:
      out.push_back(pretrain_mlm(bundle, task_texts, vocab, tapt_config));
      break;
    case PretrainMode::Dapt:
      out.push_back(pretrain_mlm(bundle, domain_texts, vocab, dapt_config));
      break;
    case PretrainMode::DaptTapt:
      out.push_back(pretrain_mlm(bundle, domain_texts, vocab, dapt_config));
      out.push_back(pretrain_mlm(out.back().best, task_texts, vocab, tapt_config));
      break;
  }
  return out;
}

std::vector<ScheduledBatch> build_mtl_schedule(std::span<const std::size_t> task_sizes, std::size_t batch_size,
                                               Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<ScheduledBatch> batches;
  for (std::size_t t = 0; t < task_sizes.size(); ++t) {
    if (task_sizes[t] == 0) throw ContractError("task " + std::to_string(t) + " has no examples to schedule");
    std::vector<std::size_t> order(task_sizes[t]);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<std::size_t>(order));
    for (auto& part : chunk(order, batch_size)) batches.push_back({t, std::move(part)});
  }
  rng.shuffle(std::span<ScheduledBatch>(batches));
  return batches;
}

void MtlConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0) || !(ft_lr > 0.0)) throw ConfigError("learning rates must be positive");
  for (const auto& [task, w] : loss_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weight for '" + task + "' must be finite and >= 0");
  }
  if (!(dev_fraction >= 0.0 && dev_fraction < 1.0)) throw ConfigError("dev_fraction must lie in [0, 1)");
}

std::string RunReport::to_json() const {
  nlohmann::ordered_json j;
  j["regime"] = regime;
  j["lr"] = lr;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["loss_weights"] = loss_weights;
  j["best_epoch"] = best_epoch;
  j["best_aggregate"] = best_aggregate;
  j["history"] = nlohmann::ordered_json::array();
  for (const auto& e : history) {
    j["history"].push_back({{"epoch", e.epoch},
                            {"train_loss", e.train_loss},
                            {"task_loss", e.task_loss},
                            {"dev_macro_f1", e.dev_macro_f1},
                            {"aggregate", e.aggregate}});
  }
  return j.dump(2);
}

std::string RunReport::loss_curve_csv() const {
  std::string out = "epoch,train_loss,aggregate\n";
  for (const auto& e : history) out += std::to_string(e.epoch) + "," + fmt(e.train_loss) + "," + fmt(e.aggregate) + "\n";
  return out;
}

TrainResult train_mtl(const ModelBundle& bundle, const std::vector<corpus::TaskDataset>& tasks,
                      const tokenizer::Vocab& vocab, const MtlConfig& config) {
  return train_loop(bundle, tasks, vocab, config, "mtl", config.lr, config.epochs);
}

TrainResult finetune(const ModelBundle& bundle, const corpus::TaskDataset& task, const tokenizer::Vocab& vocab,
                     const MtlConfig& config) {
  if (!bundle.has_head(task.name)) {
    std::string names;
    for (const auto& n : bundle.task_names()) names += (names.empty() ? "" : ", ") + n;
    throw LookupError("no head for task '" + task.name + "'; registered tasks: " + (names.empty() ? "(none)" : names));
  }
  return train_loop(bundle, {task}, vocab, config, "finetune", config.ft_lr, config.ft_epochs);
}

std::vector<std::size_t> predict(const ModelBundle& bundle, const std::string& task,
                                 const std::vector<std::string>& texts, const tokenizer::Vocab& vocab,
                                 std::size_t batch_size) {
  if (texts.empty()) return {};
  const auto enc = encode_all(texts, vocab, bundle.config().max_len);
  std::vector<std::size_t> rows(texts.size());
  std::iota(rows.begin(), rows.end(), 0);
  return predict_encoded(bundle, task, enc, rows, std::max<std::size_t>(1, batch_size));
}

metrics::EvalResult evaluate(const ModelBundle& bundle, const corpus::TaskDataset& dataset,
                             const tokenizer::Vocab& vocab) {
  const auto preds = predict(bundle, dataset.name, dataset.texts(), vocab);
  const auto golds = dataset.label_indices();
  return metrics::macro_f1(preds, golds, dataset.label_set);
}

}  // namespace mtlforge::training
