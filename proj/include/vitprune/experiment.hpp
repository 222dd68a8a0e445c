#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitprune/attention.hpp"
#include "vitprune/dataset.hpp"
#include "vitprune/json_io.hpp"
#include "vitprune/model.hpp"
#include "vitprune/pruner.hpp"
#include "vitprune/train.hpp"

namespace vp {

enum class DataSourceKind { kSynthetic, kFolder };

struct DataSource {
  DataSourceKind kind = DataSourceKind::kSynthetic;
  SynthConfig synthetic;
  std::string folder_root;
};

struct PruneGrid {
  std::vector<Criterion> criteria = {Criterion::kL1, Criterion::kL2, Criterion::kTaylor, Criterion::kHessian,
                                     Criterion::kRandom};
  std::vector<double> ratios = {0.5, 0.75, 0.95};
  std::vector<Site> sites = {Site::kAttnHead, Site::kMlpChannel, Site::kEmbedChannel};
  std::int64_t min_heads = 1;
  std::int64_t min_mlp = 1;
  std::int64_t min_embed = 8;
  Aggregation aggregation = Aggregation::kMean;
  int calibration_batches = 8;
  int calibration_batch_size = 8;
  int speedup_trials = 7;
};

struct AttentionSettings {
  std::int64_t layer = -1;  // -1 = last layer
  int images = 64;          // distance table sample count from the test split
  int maps = 4;             // heatmaps per mode
};

struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t init = 1;
  std::uint64_t split = 1;
  std::uint64_t train = 1;
  std::uint64_t prune = 1;
};

struct ExperimentConfig {
  std::string name = "toy";
  ModelConfig model = ModelConfig::toy();
  DataSource data;
  SplitProtocol split;
  TrainConfig dg = TrainConfig::dg_default();
  TrainConfig postprune = TrainConfig::postprune_default();
  PruneGrid prune;
  AttentionSettings attention;
  Seeds seeds;
  std::string out_dir = "runs/toy";

  /// Desk-scale defaults for the toy model on synthetic data.
  static ExperimentConfig defaults();

  /// Throws std::invalid_argument listing every violated field.
  void validate() const;

  TrainConfig dg_config() const;
  TrainConfig postprune_config() const;
  SplitProtocol split_protocol() const;
  PruneSpec prune_spec(Criterion criterion, double ratio) const;
};

struct PruneJob;
PruneJob prune_job(const ExperimentConfig& c, Criterion criterion, double ratio);

/// Stage inputs with seeds applied: "model", "split", "dg_finetune" or
/// "postprune_finetune".
Json experiment_section(const ExperimentConfig& c, const std::string& section);

Json to_json(const ExperimentConfig& c);
/// Missing keys take defaults; unknown keys, type errors and invalid values are
/// all collected into one std::invalid_argument.
ExperimentConfig experiment_from_json(const Json& j);

/// Applies `dotted.key=value` to a config document. The value is parsed as
/// JSON when possible and taken as a string otherwise.
void apply_override(Json& doc, const std::string& assignment);

std::string to_string(DataSourceKind k);

/// Synthetic generation or folder ingest, as configured.
DomainDataset load_dataset(const ExperimentConfig& c);

// ---------------------------------------------------------------------------
// Pruning pipeline

struct PruneJob {
  PruneSpec spec;
  Aggregation aggregation = Aggregation::kMean;
  int calibration_batches = 8;
  int calibration_batch_size = 8;
  int speedup_trials = 7;  // 0 skips the wall-clock measurement
};

struct PruneOutcome {
  TransformerModel model;
  PrunePlan plan;
  PruneReport report;
  std::vector<ImportanceScore> scores;
};

/// Deterministic labeled batches drawn from `indices` without replacement.
std::vector<Batch> calibration_batches(const DomainDataset& data, std::span<const std::size_t> indices, int count,
                                       int batch_size, std::uint64_t seed);

/// Scores (calibrating on the training split), plans and applies one prune.
PruneOutcome prune_model(const TransformerModel& model, const DomainDataset& data, const Splits& splits,
                         const PruneJob& job);

Json to_json(const PruneJob& job);
PruneJob prune_job_from_json(const Json& j);
Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j, Phase phase);
Json to_json(const SplitProtocol& p);
SplitProtocol split_protocol_from_json(const Json& j);

}  // namespace vp
