#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vitprune/json_io.hpp"
#include "vitprune/model.hpp"

namespace vp {

enum class Site { kAttnHead, kMlpChannel, kEmbedChannel };

std::string to_string(Site s);
Site site_from_string(const std::string& s);

/// Identifies one prunable unit. `layer` is -1 for embed channels, which span
/// the whole network.
struct UnitId {
  Site site = Site::kAttnHead;
  int layer = -1;
  std::int64_t index = 0;

  auto operator<=>(const UnitId&) const = default;
  std::string str() const;
};

/// A contiguous index range along one axis of one parameter.
struct Slice {
  ParamKey key;
  int axis = 0;
  std::int64_t start = 0;
  std::int64_t length = 0;
  std::int64_t elements = 0;  // scalars covered, given the parameter's shape
};

struct PruneUnit {
  UnitId id;
  std::vector<Slice> slices;
  std::int64_t size() const;
};

struct PruneGroup {
  std::vector<UnitId> units;
  Site site = Site::kAttnHead;
  std::int64_t params = 0;
};

/// Prunable units of a ViT and the coupling edges between them. Immutable once built.
class DependencyGraph {
 public:
  DependencyGraph(ModelConfig config, std::vector<PruneUnit> units, std::vector<std::pair<std::size_t, std::size_t>> edges);

  const ModelConfig& config() const { return config_; }
  const std::vector<PruneUnit>& units() const { return units_; }
  const std::vector<std::pair<std::size_t, std::size_t>>& edges() const { return edges_; }
  bool contains(const UnitId& id) const { return index_.count(id) != 0; }
  const PruneUnit& unit(const UnitId& id) const;
  std::size_t count(Site site) const;

  Json to_json() const;

 private:
  ModelConfig config_;
  std::vector<PruneUnit> units_;
  std::vector<std::pair<std::size_t, std::size_t>> edges_;
  std::map<UnitId, std::size_t> index_;
  std::vector<std::vector<std::size_t>> adjacency_;

  friend PruneGroup group_for(const DependencyGraph& graph, const UnitId& unit);
};

/// Schema-driven construction for the ViT layout: one unit per attention
/// head, per MLP hidden channel, and per residual-stream channel.
DependencyGraph build_graph(const ModelConfig& config);
/// Rejects models whose parameter store does not match the known layout.
DependencyGraph build_graph(const TransformerModel& model);

/// Connected component of coupling edges containing `unit`.
PruneGroup group_for(const DependencyGraph& graph, const UnitId& unit);

/// (parameter, axis) pairs that a site can shrink, derived from the config.
struct PrunableAxis {
  ParamKey key;
  int axis;
  Site site;
};
std::vector<PrunableAxis> prunable_axes(const ModelConfig& config);

struct ValidationReport {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

/// Checks full coverage and disjointness of every prunable axis, slice bounds
/// against the model's actual shapes, and group closure.
ValidationReport validate(const DependencyGraph& graph, const TransformerModel& model);
ValidationReport validate(const DependencyGraph& graph, const std::map<ParamKey, Shape>& shapes);

/// Calls f(flat_index) for every scalar a slice covers in a tensor of `shape`.
template <typename F>
void for_each_slice_index(const Shape& shape, const Slice& s, F&& f) {
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < s.axis; ++i) outer *= shape[i];
  for (std::size_t i = s.axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::int64_t n = shape[s.axis];
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = s.start; i < s.start + s.length; ++i) {
      const std::int64_t base = (o * n + i) * inner;
      for (std::int64_t j = 0; j < inner; ++j) f(base + j);
    }
  }
}

}  // namespace vp
