#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtlforge/corpus.hpp"
#include "mtlforge/metrics.hpp"
#include "mtlforge/model.hpp"
#include "mtlforge/numerics/rng.hpp"
#include "mtlforge/tokenizer.hpp"

namespace mtlforge::training {

struct MaskScheme {
  double p_mask = 0.8;
  double p_random = 0.1;
  double p_keep = 0.1;
};

struct PretrainConfig {
  double mask_prob = 0.15;
  MaskScheme scheme;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 10;
  double lr = 5e-6;
  /// Optimizer steps between validation passes; 0 means once per epoch.
  std::size_t eval_every = 0;
  std::size_t patience = 5;
  double val_fraction = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
  static PretrainConfig tapt();
  static PretrainConfig dapt();
};

struct MaskStats {
  std::size_t eligible = 0;
  std::size_t selected = 0;
  std::size_t masked = 0;
  std::size_t randomized = 0;
  std::size_t kept = 0;
};

struct MaskedInput {
  std::vector<std::int64_t> input_ids;
  std::vector<std::int64_t> labels;  // original id where selected, ignore index elsewhere
};

/// Positions with mask 0 or holding [CLS]/[SEP]/[PAD] are never selected.
/// Random replacements are drawn from the non-special ids [5, vocab_size).
MaskedInput mask_tokens(std::span<const std::int64_t> ids, std::span<const std::int64_t> mask, std::size_t vocab_size,
                        double mask_prob, const MaskScheme& scheme, numerics::Rng& rng, MaskStats* stats = nullptr);

/// True iff the last `patience` consecutive deltas are all >= 0.
bool check_convergence(std::span<const double> val_losses, std::size_t patience = 5);

struct LossPoint {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct PretrainResult {
  model::ModelBundle best;
  std::vector<LossPoint> curve;
  double initial_val_loss = 0.0;
  double best_val_loss = 0.0;
  bool converged = false;
  std::size_t steps = 0;

  std::string curve_csv() const;
};

/// MLM training on `texts` with a seeded held-out validation slice. Returns the
/// parameters with the lowest validation loss seen (the input when no
/// evaluation improves on it).
PretrainResult pretrain_mlm(const model::ModelBundle& bundle, const std::vector<std::string>& texts,
                            const tokenizer::Vocab& vocab, const PretrainConfig& config);

enum class PretrainMode { Tapt, Dapt, DaptTapt };
PretrainMode parse_pretrain_mode(const std::string& name);
std::string to_string(PretrainMode mode);

/// TAPT on task texts, DAPT on domain texts, or DAPT followed by TAPT starting
/// from the DAPT result. One result per stage.
std::vector<PretrainResult> run_pretraining(const model::ModelBundle& bundle, PretrainMode mode,
                                            const std::vector<std::string>& task_texts,
                                            const std::vector<std::string>& domain_texts,
                                            const tokenizer::Vocab& vocab, const PretrainConfig& tapt_config,
                                            const PretrainConfig& dapt_config);

struct ScheduledBatch {
  std::size_t task = 0;
  std::vector<std::size_t> examples;
};

/// Each task is shuffled and cut into batches (last partial batch kept); the
/// combined batch list is then shuffled.
std::vector<ScheduledBatch> build_mtl_schedule(std::span<const std::size_t> task_sizes, std::size_t batch_size,
                                               numerics::Rng& rng);

struct MtlConfig {
  std::size_t batch_size = 4;
  double lr = 5e-6;
  std::size_t epochs = 20;
  /// Overrides per task; unlisted tasks use the dataset's own weight.
  std::map<std::string, double> loss_weights;
  double ft_lr = 1e-6;
  std::size_t ft_epochs = 10;
  /// Fraction of each task carved off as its selection slice; 0 selects on
  /// the training data itself.
  double dev_fraction = 0.1;
  /// Stop once the aggregate reaches this value.
  std::optional<double> target_aggregate;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::map<std::string, double> task_loss;
  std::map<std::string, double> dev_macro_f1;
  double aggregate = 0.0;
};

struct RunReport {
  std::string regime;
  double lr = 0.0;
  std::size_t epochs = 0;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  std::map<std::string, double> loss_weights;
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;
  /// best_epoch 0 and a negative aggregate when no epoch ran.
  std::size_t best_epoch = 0;
  double best_aggregate = 0.0;

  std::string to_json() const;
  std::string loss_curve_csv() const;
};

struct TrainResult {
  model::ModelBundle best;
  RunReport report;
};

/// Every task needs a head whose labels equal its label set.
TrainResult train_mtl(const model::ModelBundle& bundle, const std::vector<corpus::TaskDataset>& tasks,
                      const tokenizer::Vocab& vocab, const MtlConfig& config);

/// Single-task training at ft_lr for ft_epochs with a fresh optimizer.
TrainResult finetune(const model::ModelBundle& bundle, const corpus::TaskDataset& task, const tokenizer::Vocab& vocab,
                     const MtlConfig& config);

std::vector<std::size_t> predict(const model::ModelBundle& bundle, const std::string& task,
                                 const std::vector<std::string>& texts, const tokenizer::Vocab& vocab,
                                 std::size_t batch_size = 32);

metrics::EvalResult evaluate(const model::ModelBundle& bundle, const corpus::TaskDataset& dataset,
                             const tokenizer::Vocab& vocab);

}  // namespace mtlforge::training
