#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vitprune/depgraph.hpp"
#include "vitprune/importance.hpp"
#include "vitprune/json_io.hpp"
#include "vitprune/model.hpp"

namespace vp {

struct PruneSpec {
  double ratio = 0.5;  // fraction of prunable parameters to remove, in [0, 1)
  Criterion criterion = Criterion::kL1;
  std::vector<Site> sites = {Site::kAttnHead, Site::kMlpChannel};
  std::int64_t min_heads = 1;   // per layer
  std::int64_t min_mlp = 1;     // per layer
  std::int64_t min_embed = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PrunePlan {
  ModelConfig base;
  ModelConfig pruned;
  std::vector<UnitId> removed;  // removal order
  std::vector<double> scores;   // score of each removed group
  double threshold = 0.0;       // score of the last removed group
  std::int64_t prunable_params = 0;
  std::int64_t removed_params = 0;
  double target_ratio = 0.0;

  double achieved_ratio() const {
    return prunable_params ? static_cast<double>(removed_params) / static_cast<double>(prunable_params) : 0.0;
  }
};

/// Parameters that the enabled sites could remove if every width went to zero.
std::int64_t prunable_params(const ModelConfig& config, const std::vector<Site>& sites);

/// Global ascending-score greedy selection under the spec's width floors.
/// Throws std::invalid_argument if scores miss an enabled group and
/// std::runtime_error, naming the binding floor, if the ratio is unreachable.
PrunePlan plan_prune(const DependencyGraph& graph, std::span<const ImportanceScore> scores, const PruneSpec& spec);

/// Dense smaller model with the plan's slices physically removed.
TransformerModel apply_prune(const TransformerModel& model, const PrunePlan& plan);

/// Copy of `model` with every scalar the plan's units own set to zero.
TransformerModel mask_prune(const TransformerModel& model, const PrunePlan& plan);

/// Median base forward time over median pruned forward time.
double measure_speedup(const TransformerModel& base, const TransformerModel& pruned, const Tensor& batch, int trials = 7);

struct PruneReport {
  Criterion criterion = Criterion::kL1;
  std::vector<Site> sites;
  double target_ratio = 0.0;
  double achieved_ratio = 0.0;
  double threshold = 0.0;
  std::vector<UnitId> removed;
  std::vector<double> removed_scores;
  std::int64_t params_before = 0, params_after = 0;
  std::int64_t macs_before = 0, macs_after = 0;
  double theoretical_speedup = 1.0;
  double measured_speedup = 0.0;   // 0 when not measured
  double finetune_seconds = -1.0;  // negative when no fine-tune ran

  Json to_json() const;
};

PruneReport make_report(const PrunePlan& plan, const PruneSpec& spec);

}  // namespace vp
