#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vitprune/dataset.hpp"
#include "vitprune/json_io.hpp"
#include "vitprune/model.hpp"
#include "vitprune/optim.hpp"

namespace vp {

// ---------------------------------------------------------------------------
// Metrics

struct DomainMetrics {
  std::string name;
  std::int64_t count = 0;
  double top1 = 0.0;
  double loss = 0.0;
};

struct SplitMetrics {
  std::int64_t count = 0;
  double top1 = 0.0;
  double top5 = 0.0;
  double loss = 0.0;
  double precision = 0.0;  // macro over classes
  std::vector<DomainMetrics> per_domain;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]

  Json to_json() const;
};

/// Macro precision: mean over classes of TP / predicted; classes never
/// predicted contribute 0.
double macro_precision(const std::vector<std::vector<std::int64_t>>& confusion);

/// True if no other class has a strictly larger logit than `label` among the
/// top k positions; top-1 uses the first maximal index as the prediction.
bool in_top_k(std::span<const double> logits, int label, int k);

/// Metrics for logits [n, classes] against labels; `domains` (per sample) and
/// `domain_names` are optional and produce per-domain breakdowns.
SplitMetrics compute_metrics(const Tensor& logits, std::span<const int> labels, std::span<const int> domains = {},
                             const std::vector<std::string>& domain_names = {});

SplitMetrics evaluate(const TransformerModel& model, const DomainDataset& data, std::span<const std::size_t> indices,
                      std::int64_t batch_size = 64);

// ---------------------------------------------------------------------------
// Training

enum class Phase { kDgFinetune, kPostpruneFinetune };
std::string to_string(Phase p);
Phase phase_from_string(const std::string& s);

struct TrainConfig {
  Phase phase = Phase::kDgFinetune;
  OptimizerConfig optimizer;
  ScheduleKind schedule = ScheduleKind::kConstant;
  int warmup_epochs = 0;
  double warmup_start_factor = 0.033;
  int batch_size = 8;
  int max_epochs = 50;
  int patience = 5;
  int trainable_blocks = 2;  // last k blocks train; -1 trains everything
  bool flip_augment = true;
  std::uint64_t seed = 0;

  static TrainConfig dg_default();
  static TrainConfig postprune_default();
  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  SplitMetrics train, valid, test;  // train metrics are accumulated during the epoch
};

struct TrainResult {
  TransformerModel best;
  std::vector<EpochRecord> curves;
  int epochs_run = 0;
  int best_epoch = -1;  // 1-based; -1 when no epoch ran
  double best_valid_loss = 0.0;
  bool early_stopped = false;
  double seconds = 0.0;
};

/// Parameter keys the freeze policy leaves trainable.
std::vector<ParamKey> trainable_keys(const ModelConfig& config, int trainable_blocks);

/// Fine-tunes a copy of `model`; the input is never mutated.
TrainResult train(const TransformerModel& model, const DomainDataset& data, const Splits& splits,
                  const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch = {});

/// CSV with columns epoch,split,loss,top1,top5.
std::string curves_to_csv(std::span<const EpochRecord> curves);

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  std::map<std::string, SplitMetrics> splits;  // subset of train/valid/test
  std::int64_t num_classes = 0;
  std::optional<double> baseline_test_top1;
  std::optional<double> finetune_seconds;

  /// valid top-1 minus test top-1; empty unless both splits are present.
  std::optional<double> gap() const;
  std::optional<double> delta_acc() const;
  Json to_json() const;
};

EvalReport evaluate_report(const TransformerModel& model, const DomainDataset& data, const Splits& splits,
                           std::optional<double> baseline_test_top1 = std::nullopt);

}  // namespace vp
