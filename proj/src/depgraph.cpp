#include "vitprune/depgraph.hpp"

#include <algorithm>
#include <deque>
#include <set>
#include <stdexcept>

namespace vp {

namespace {

Slice make_slice(const std::map<ParamKey, Shape>& shapes, ParamKey key, int axis, std::int64_t start,
                 std::int64_t length) {
  const auto& shape = shapes.at(key);
  std::int64_t per_index = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (static_cast<int>(i) != axis) per_index *= shape[i];
  }
  return Slice{std::move(key), axis, start, length, per_index * length};
}

}  // namespace

std::string to_string(Site s) {
  switch (s) {
    case Site::kAttnHead: return "attn_head";
    case Site::kMlpChannel: return "mlp_channel";
    case Site::kEmbedChannel: return "embed_channel";
  }
  return "unknown";
}

Site site_from_string(const std::string& s) {
  if (s == "attn_head") return Site::kAttnHead;
  if (s == "mlp_channel") return Site::kMlpChannel;
  if (s == "embed_channel") return Site::kEmbedChannel;
  throw std::invalid_argument("unknown site '" + s + "' (expected attn_head|mlp_channel|embed_channel)");
}

std::string UnitId::str() const {
  std::string s = to_string(site);
  if (layer >= 0) s += "@" + std::to_string(layer);
  return s + "#" + std::to_string(index);
}

std::int64_t PruneUnit::size() const {
  std::int64_t n = 0;
  for (const auto& s : slices) n += s.elements;
  return n;
}

DependencyGraph::DependencyGraph(ModelConfig config, std::vector<PruneUnit> units,
                                 std::vector<std::pair<std::size_t, std::size_t>> edges)
    : config_(std::move(config)), units_(std::move(units)), edges_(std::move(edges)) {
  adjacency_.resize(units_.size());
  for (std::size_t i = 0; i < units_.size(); ++i) {
    if (!index_.emplace(units_[i].id, i).second) {
      throw std::invalid_argument("dependency graph: duplicate unit " + units_[i].id.str());
    }
  }
  for (const auto& [a, b] : edges_) {
    if (a >= units_.size() || b >= units_.size()) throw std::out_of_range("dependency graph: edge references unknown unit");
    adjacency_[a].push_back(b);
    adjacency_[b].push_back(a);
  }
}

const PruneUnit& DependencyGraph::unit(const UnitId& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::out_of_range("dependency graph: unknown unit " + id.str());
  return units_[it->second];
}

std::size_t DependencyGraph::count(Site site) const {
  return static_cast<std::size_t>(
      std::count_if(units_.begin(), units_.end(), [site](const PruneUnit& u) { return u.id.site == site; }));
}

Json DependencyGraph::to_json() const {
  Json units = Json::array();
  for (const auto& u : units_) {
    Json slices = Json::array();
    for (const auto& s : u.slices) {
      slices.push_back({{"param", s.key.str()}, {"axis", s.axis}, {"start", s.start}, {"length", s.length},
                        {"elements", s.elements}});
    }
    units.push_back({{"site", to_string(u.id.site)}, {"layer", u.id.layer}, {"index", u.id.index},
                     {"params", u.size()}, {"slices", std::move(slices)}});
  }
  Json edges = Json::array();
  for (const auto& [a, b] : edges_) edges.push_back({units_[a].id.str(), units_[b].id.str()});
  return Json{{"config", config_}, {"units", std::move(units)}, {"edges", std::move(edges)}};
}

DependencyGraph build_graph(const ModelConfig& c) {
  c.validate();
  const auto shapes = TransformerModel::expected_shapes(c);
  const auto dh = c.head_dim;
  const auto d = c.embed_dim;
  std::vector<PruneUnit> units;

  for (int l = 0; l < static_cast<int>(c.num_layers); ++l) {
    const auto inner = c.num_heads[l] * dh;
    for (std::int64_t h = 0; h < c.num_heads[l]; ++h) {
      PruneUnit u{{Site::kAttnHead, l, h}, {}};
      for (int part = 0; part < 3; ++part) {
        u.slices.push_back(make_slice(shapes, {l, Component::kQkv, "weight"}, 0, part * inner + h * dh, dh));
        u.slices.push_back(make_slice(shapes, {l, Component::kQkv, "bias"}, 0, part * inner + h * dh, dh));
      }
      u.slices.push_back(make_slice(shapes, {l, Component::kAttnOut, "weight"}, 1, h * dh, dh));
      units.push_back(std::move(u));
    }
    for (std::int64_t i = 0; i < c.mlp_hidden[l]; ++i) {
      PruneUnit u{{Site::kMlpChannel, l, i}, {}};
      u.slices.push_back(make_slice(shapes, {l, Component::kMlpFc1, "weight"}, 0, i, 1));
      u.slices.push_back(make_slice(shapes, {l, Component::kMlpFc1, "bias"}, 0, i, 1));
      u.slices.push_back(make_slice(shapes, {l, Component::kMlpFc2, "weight"}, 1, i, 1));
      units.push_back(std::move(u));
    }
  }

  // A residual-stream channel is shared by every block through the skip
  // additions, so one unit owns it everywhere it appears.
  for (std::int64_t k = 0; k < d; ++k) {
    PruneUnit u{{Site::kEmbedChannel, -1, k}, {}};
    u.slices.push_back(make_slice(shapes, {-1, Component::kPatchEmbed, "weight"}, 0, k, 1));
    u.slices.push_back(make_slice(shapes, {-1, Component::kPatchEmbed, "bias"}, 0, k, 1));
    u.slices.push_back(make_slice(shapes, {-1, Component::kPosEmbed, "value"}, 1, k, 1));
    if (c.use_cls_token) u.slices.push_back(make_slice(shapes, {-1, Component::kCls, "value"}, 1, k, 1));
    for (int l = 0; l < static_cast<int>(c.num_layers); ++l) {
      u.slices.push_back(make_slice(shapes, {l, Component::kLn1, "weight"}, 0, k, 1));
      u.slices.push_back(make_slice(shapes, {l, Component::kLn1, "bias"}, 0, k, 1));
      u.slices.push_back(make_slice(shapes, {l, Component::kQkv, "weight"}, 1, k, 1));
      u.slices.push_back(make_slice(shapes, {l, Component::kAttnOut, "weight"}, 0, k, 1));
      u.slices.push_back(make_slice(shapes, {l, Component::kAttnOut, "bias"}, 0, k, 1));
      u.slices.push_back(make_slice(shapes, {l, Component::kLn2, "weight"}, 0, k, 1));
      u.slices.push_back(make_slice(shapes, {l, Component::kLn2, "bias"}, 0, k, 1));
      u.slices.push_back(make_slice(shapes, {l, Component::kMlpFc1, "weight"}, 1, k, 1));
      u.slices.push_back(make_slice(shapes, {l, Component::kMlpFc2, "weight"}, 0, k, 1));
      u.slices.push_back(make_slice(shapes, {l, Component::kMlpFc2, "bias"}, 0, k, 1));
    }
    u.slices.push_back(make_slice(shapes, {-1, Component::kFinalLn, "weight"}, 0, k, 1));
    u.slices.push_back(make_slice(shapes, {-1, Component::kFinalLn, "bias"}, 0, k, 1));
    u.slices.push_back(make_slice(shapes, {-1, Component::kHead, "weight"}, 1, k, 1));
    units.push_back(std::move(u));
  }
  // Coupling in this family is fully captured inside each unit's slice list,
  // so no unit-level edges remain.
  return DependencyGraph(c, std::move(units), {});
}

DependencyGraph build_graph(const TransformerModel& model) {
  model.check_consistency();
  return build_graph(model.config());
}

PruneGroup group_for(const DependencyGraph& graph, const UnitId& unit) {
  auto it = graph.index_.find(unit);
  if (it == graph.index_.end()) throw std::out_of_range("group_for: unit " + unit.str() + " not in graph");
  std::vector<bool> seen(graph.units_.size(), false);
  std::deque<std::size_t> queue{it->second};
  seen[it->second] = true;
  std::vector<std::size_t> members;
  while (!queue.empty()) {
    const auto cur = queue.front();
    queue.pop_front();
    members.push_back(cur);
    for (auto next : graph.adjacency_[cur]) {
      if (!seen[next]) {
        seen[next] = true;
        queue.push_back(next);
      }
    }
  }
  std::sort(members.begin(), members.end(),
            [&](std::size_t a, std::size_t b) { return graph.units_[a].id < graph.units_[b].id; });
  PruneGroup g;
  g.site = unit.site;
  for (auto m : members) {
    g.units.push_back(graph.units_[m].id);
    g.params += graph.units_[m].size();
  }
  return g;
}

std::vector<PrunableAxis> prunable_axes(const ModelConfig& c) {
  std::vector<PrunableAxis> axes;
  for (const auto& [key, shape] : TransformerModel::expected_shapes(c)) {
    switch (key.component) {
      case Component::kPatchEmbed: axes.push_back({key, 0, Site::kEmbedChannel}); break;
      case Component::kPosEmbed:
      case Component::kCls: axes.push_back({key, 1, Site::kEmbedChannel}); break;
      case Component::kLn1:
      case Component::kLn2:
      case Component::kFinalLn: axes.push_back({key, 0, Site::kEmbedChannel}); break;
      case Component::kQkv:
        axes.push_back({key, 0, Site::kAttnHead});
        if (key.name == "weight") axes.push_back({key, 1, Site::kEmbedChannel});
        break;
      case Component::kAttnOut:
        axes.push_back({key, 0, Site::kEmbedChannel});
        if (key.name == "weight") axes.push_back({key, 1, Site::kAttnHead});
        break;
      case Component::kMlpFc1:
        axes.push_back({key, 0, Site::kMlpChannel});
        if (key.name == "weight") axes.push_back({key, 1, Site::kEmbedChannel});
        break;
      case Component::kMlpFc2:
        axes.push_back({key, 0, Site::kEmbedChannel});
        if (key.name == "weight") axes.push_back({key, 1, Site::kMlpChannel});
        break;
      case Component::kHead:
        if (key.name == "weight") axes.push_back({key, 1, Site::kEmbedChannel});
        break;
    }
  }
  return axes;
}

ValidationReport validate(const DependencyGraph& graph, const TransformerModel& model) {
  std::map<ParamKey, Shape> shapes;
  for (const auto& [key, t] : model.params()) shapes.emplace(key, t.shape());
  auto report = validate(graph, shapes);
  if (!(graph.config() == model.config())) report.violations.push_back("graph config differs from model config");
  return report;
}

ValidationReport validate(const DependencyGraph& graph, const std::map<ParamKey, Shape>& shapes) {
  ValidationReport r;
  // Per (param, axis): how many units of the owning site cover each index.
  std::map<std::pair<ParamKey, int>, std::pair<Site, std::vector<int>>> cover;
  const auto axes = prunable_axes(graph.config());
  for (const auto& a : axes) {
    auto it = shapes.find(a.key);
    if (it == shapes.end()) {
      r.violations.push_back("missing parameter " + a.key.str());
      continue;
    }
    cover[{a.key, a.axis}] = {a.site, std::vector<int>(it->second[a.axis], 0)};
  }
  for (const auto& u : graph.units()) {
    if (u.slices.empty()) r.violations.push_back("unit " + u.id.str() + " owns no slices");
    for (const auto& s : u.slices) {
      auto sh = shapes.find(s.key);
      if (sh == shapes.end()) {
        r.violations.push_back("unit " + u.id.str() + " references unknown parameter " + s.key.str());
        continue;
      }
      if (s.axis < 0 || s.axis >= static_cast<int>(sh->second.size()) || s.start < 0 ||
          s.start + s.length > sh->second[s.axis]) {
        r.violations.push_back("unit " + u.id.str() + " slice out of bounds on " + s.key.str() + " " +
                               shape_str(sh->second));
        continue;
      }
      auto cv = cover.find({s.key, s.axis});
      if (cv == cover.end()) {
        r.violations.push_back("unit " + u.id.str() + " slices non-prunable axis " + std::to_string(s.axis) +
                               " of " + s.key.str());
        continue;
      }
      if (cv->second.first != u.id.site) {
        r.violations.push_back("unit " + u.id.str() + " slices " + s.key.str() + " axis " +
                               std::to_string(s.axis) + " owned by site " + to_string(cv->second.first));
        continue;
      }
      for (std::int64_t i = s.start; i < s.start + s.length; ++i) ++cv->second.second[i];
    }
  }
  for (const auto& [where, entry] : cover) {
    const auto& counts = entry.second;
    std::int64_t missing = 0, doubled = 0, first_missing = -1;
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (counts[i] == 0) {
        if (first_missing < 0) first_missing = static_cast<std::int64_t>(i);
        ++missing;
      }
      if (counts[i] > 1) ++doubled;
    }
    if (missing) {
      r.violations.push_back("coverage: " + where.first.str() + " axis " + std::to_string(where.second) + " has " +
                             std::to_string(missing) + " uncovered indices (first " + std::to_string(first_missing) + ")");
    }
    if (doubled) {
      r.violations.push_back("disjointness: " + where.first.str() + " axis " + std::to_string(where.second) +
                             " has " + std::to_string(doubled) + " indices owned by more than one unit");
    }
  }
  // Closure: every edge stays inside the group of either endpoint.
  for (const auto& [a, b] : graph.edges()) {
    const auto ga = group_for(graph, graph.units()[a].id);
    if (!std::binary_search(ga.units.begin(), ga.units.end(), graph.units()[b].id)) {
      r.violations.push_back("closure: edge " + graph.units()[a].id.str() + " -- " + graph.units()[b].id.str() +
                             " leaves its group");
    }
  }
  return r;
}

}  // namespace vp
