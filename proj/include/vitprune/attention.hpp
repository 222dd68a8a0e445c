#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vitprune/dataset.hpp"
#include "vitprune/json_io.hpp"
#include "vitprune/model.hpp"

namespace vp {

// ---------------------------------------------------------------------------
// Mean attention distance

struct AttentionDistanceTable {
  std::int64_t grid = 0;
  std::int64_t patch_size = 0;
  std::vector<std::vector<double>> distance;  // [layer][head], pixels
  std::vector<std::vector<std::int64_t>> n_images;

  std::int64_t num_layers() const { return static_cast<std::int64_t>(distance.size()); }
  /// Largest pairwise patch-center distance on the grid, in pixels.
  double max_distance() const;
  /// CSV with columns layer,head,mean_distance_px,n_images.
  std::string to_csv() const;
  Json to_json() const;
};

/// Mean distance for one attention matrix [tokens x tokens] (row-major): the
/// cls row and column are dropped when `has_cls`, rows renormalized, and the
/// attention-weighted patch-center distance averaged over queries.
double attention_distance(std::span<const double> matrix, std::int64_t grid, std::int64_t patch_size, bool has_cls);

/// Streaming per-(layer, head) accumulator over recorded batches.
class AttentionDistanceAccumulator {
 public:
  explicit AttentionDistanceAccumulator(const ModelConfig& config);

  /// Throws std::invalid_argument when the record does not match the config.
  void add(const AttentionRecord& record);
  AttentionDistanceTable table() const;

 private:
  ModelConfig config_;
  std::vector<std::vector<double>> sum_;
  std::vector<std::vector<std::int64_t>> count_;
};

AttentionDistanceTable mean_attention_distance(std::span<const AttentionRecord> records, const ModelConfig& config);

/// Runs the model over `indices` with recording on.
AttentionDistanceTable mean_attention_distance(const TransformerModel& model, const DomainDataset& data,
                                               std::span<const std::size_t> indices, std::int64_t batch_size = 32);

// ---------------------------------------------------------------------------
// Attention maps

enum class MapMode { kClsQuery, kTokenMask };
std::string to_string(MapMode m);
MapMode map_mode_from_string(const std::string& s);

struct AttentionMap {
  MapMode mode = MapMode::kClsQuery;
  std::int64_t layer = 0;
  std::int64_t grid = 0;
  std::vector<double> saliency;    // grid*grid, row-major, sums to 1
  std::vector<std::uint8_t> mask;  // grid*grid, 1 = kept; filled in token-mask mode
  RawImage heatmap;                // single channel, image resolution
};

/// cls-row attention of one image at one layer averaged over heads, cls column
/// dropped and renormalized. `layer_attention` is [batch, heads, tokens, tokens].
std::vector<double> cls_saliency(const Tensor& layer_attention, std::int64_t image, std::int64_t grid);

/// Smallest patch set reaching `coverage` of the mass; patches tied with the
/// last admitted value are admitted too.
std::vector<std::uint8_t> token_mask(std::span<const double> saliency, double coverage = 0.9);

/// Nearest-neighbor upsampling of a grid to size x size.
std::vector<double> upsample_nearest(std::span<const double> grid_values, std::int64_t grid, std::int64_t size);

/// Grayscale blend: (1 - alpha) * luminance(image) + alpha * overlay, overlay in [0, 1].
RawImage blend_overlay(std::span<const double> raw_pixels, std::int64_t channels, std::int64_t size,
                       std::span<const double> overlay, double alpha = 0.5);

/// Attention map of sample `index`; the heatmap is blended over its raw pixels.
AttentionMap attention_map(const TransformerModel& model, const DomainDataset& data, std::size_t index,
                           std::int64_t layer, MapMode mode);

}  // namespace vp
