#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vitprune/depgraph.hpp"
#include "vitprune/model.hpp"

namespace vp {

enum class Criterion { kL1, kL2, kTaylor, kHessian, kRandom };
enum class Aggregation { kMean, kSum };

std::string to_string(Criterion c);
Criterion criterion_from_string(const std::string& s);
std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& s);

struct ImportanceScore {
  UnitId group;  // representative (smallest) unit of the group
  Criterion criterion = Criterion::kL1;
  double value = 0.0;
  int calibration = 0;  // batches used; 0 for weight-only criteria
};

/// A labeled image batch.
struct Batch {
  Tensor images;
  std::vector<int> labels;
};

/// First and second moments of loss gradients with respect to every parameter.
struct GradientStats {
  std::map<ParamKey, std::vector<double>> mean_grad;     // mean over evaluations of g
  std::map<ParamKey, std::vector<double>> mean_sq_grad;  // mean over evaluations of g^2
  int evaluations = 0;
  int batches = 0;
};

/// Averages gradients of `loss_at(i)` for i in [0, count) over `params`.
/// The parameters' requires_grad flags are set for the duration of the call.
GradientStats gradient_stats(ParamStore& params, std::size_t count, const std::function<Tensor(std::size_t)>& loss_at);

/// Taylor statistics average batch-loss gradients; Fisher statistics
/// (per_sample = true) average squared per-sample gradients. The model is
/// cloned, never mutated.
GradientStats model_gradient_stats(const TransformerModel& model, std::span<const Batch> batches, bool per_sample);

double score_l1(const PruneGroup& group, const DependencyGraph& graph, const TransformerModel& model,
                Aggregation agg = Aggregation::kMean);
double score_l2(const PruneGroup& group, const DependencyGraph& graph, const TransformerModel& model,
                Aggregation agg = Aggregation::kMean);
/// Mean over group scalars of (g*w)^2 with g the calibration-averaged gradient.
double score_taylor(const PruneGroup& group, const DependencyGraph& graph, const TransformerModel& model,
                    const GradientStats& stats, Aggregation agg = Aggregation::kMean);
/// Mean over group scalars of 0.5 * h * w^2 with h the empirical Fisher diagonal.
double score_hessian(const PruneGroup& group, const DependencyGraph& graph, const TransformerModel& model,
                     const GradientStats& fisher, Aggregation agg = Aggregation::kMean);
/// Uniform in [0,1), a pure function of (seed, group id).
double score_random(const UnitId& group, std::uint64_t seed);

struct ScoringOptions {
  Criterion criterion = Criterion::kL1;
  Aggregation aggregation = Aggregation::kMean;
  std::uint64_t seed = 0;
  std::vector<Site> sites = {Site::kAttnHead, Site::kMlpChannel};
};

/// Scores every group of the enabled sites. Gradient criteria consume
/// `calibration` (required non-empty for taylor/hessian).
std::vector<ImportanceScore> score_groups(const DependencyGraph& graph, const TransformerModel& model,
                                          const ScoringOptions& options, std::span<const Batch> calibration = {});

/// Score-only path for the random criterion; needs no weights.
std::vector<ImportanceScore> score_groups_random(const DependencyGraph& graph, std::uint64_t seed,
                                                 const std::vector<Site>& sites);

/// CSV with header site,layer,index,criterion,score.
std::string scores_to_csv(std::span<const ImportanceScore> scores);

}  // namespace vp
