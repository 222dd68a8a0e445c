#include "vitprune/pruner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace vp {

namespace {

// Closed form of the parameter count; unlike param_count it accepts zero widths.
std::int64_t width_param_count(const ModelConfig& c) {
  const auto d = c.embed_dim;
  std::int64_t p = d * c.patch_dim() + d + c.num_tokens() * d + (c.use_cls_token ? d : 0);
  for (std::size_t l = 0; l < static_cast<std::size_t>(c.num_layers); ++l) {
    const auto inner = c.num_heads[l] * c.head_dim;
    const auto hidden = c.mlp_hidden[l];
    p += 4 * d + 3 * inner * d + 3 * inner + d * inner + d + 2 * hidden * d + hidden + d;
  }
  return p + 2 * d + c.num_classes * d + c.num_classes;
}

ModelConfig zero_widths(ModelConfig c, const std::set<Site>& sites) {
  if (sites.count(Site::kAttnHead)) std::fill(c.num_heads.begin(), c.num_heads.end(), 0);
  if (sites.count(Site::kMlpChannel)) std::fill(c.mlp_hidden.begin(), c.mlp_hidden.end(), 0);
  if (sites.count(Site::kEmbedChannel)) c.embed_dim = 0;
  return c;
}

std::int64_t& width_of(ModelConfig& c, const UnitId& id) {
  switch (id.site) {
    case Site::kAttnHead: return c.num_heads.at(id.layer);
    case Site::kMlpChannel: return c.mlp_hidden.at(id.layer);
    case Site::kEmbedChannel: break;
  }
  return c.embed_dim;
}

int site_rank(Site s) { return static_cast<int>(s); }

std::string floor_name(Site s, const PruneSpec& spec) {
  switch (s) {
    case Site::kAttnHead: return "min_heads=" + std::to_string(spec.min_heads) + " per layer";
    case Site::kMlpChannel: return "min_mlp=" + std::to_string(spec.min_mlp) + " per layer";
    case Site::kEmbedChannel: break;
  }
  return "min_embed=" + std::to_string(spec.min_embed);
}

std::map<std::pair<ParamKey, int>, std::set<std::int64_t>> removed_indices(const PrunePlan& plan,
                                                                          const DependencyGraph& graph) {
  std::map<std::pair<ParamKey, int>, std::set<std::int64_t>> out;
  for (const auto& id : plan.removed) {
    if (!graph.contains(id)) throw std::invalid_argument("apply_prune: plan references " + id.str() + ", absent from model");
    for (const auto& s : graph.unit(id).slices) {
      auto& set = out[{s.key, s.axis}];
      for (std::int64_t i = s.start; i < s.start + s.length; ++i) set.insert(i);
    }
  }
  return out;
}

void check_plan(const TransformerModel& model, const PrunePlan& plan) {
  if (!(model.config() == plan.base)) {
    throw std::invalid_argument("apply_prune: plan was made for a different model configuration");
  }
  std::set<UnitId> seen;
  for (const auto& id : plan.removed) {
    if (!seen.insert(id).second) throw std::invalid_argument("apply_prune: plan removes " + id.str() + " twice");
  }
}

}  // namespace

void PruneSpec::validate() const {
  std::vector<std::string> errors;
  if (!(ratio >= 0.0 && ratio < 1.0)) errors.push_back("ratio must be in [0, 1)");
  if (min_heads < 1) errors.push_back("min_heads must be >= 1");
  if (min_mlp < 1) errors.push_back("min_mlp must be >= 1");
  if (min_embed < 1) errors.push_back("min_embed must be >= 1");
  if (sites.empty()) errors.push_back("at least one prune site must be enabled");
  if (!errors.empty()) {
    std::string msg = "invalid prune spec:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw std::invalid_argument(msg);
  }
}

std::int64_t prunable_params(const ModelConfig& config, const std::vector<Site>& sites) {
  return width_param_count(config) - width_param_count(zero_widths(config, {sites.begin(), sites.end()}));
}

PrunePlan plan_prune(const DependencyGraph& graph, std::span<const ImportanceScore> scores, const PruneSpec& spec) {
  spec.validate();
  const std::set<Site> enabled(spec.sites.begin(), spec.sites.end());
  const ModelConfig& base = graph.config();

  std::map<UnitId, double> by_unit;
  for (const auto& s : scores) {
    if (!enabled.count(s.group.site)) continue;
    if (!std::isfinite(s.value) || s.value < 0) throw std::invalid_argument("plan_prune: invalid score for " + s.group.str());
    by_unit[s.group] = s.value;
  }
  struct Candidate {
    PruneGroup group;
    double score;
  };
  std::vector<Candidate> candidates;
  std::set<UnitId> grouped;
  for (const auto& u : graph.units()) {
    if (!enabled.count(u.id.site) || grouped.count(u.id)) continue;
    auto g = group_for(graph, u.id);
    for (const auto& m : g.units) grouped.insert(m);
    auto it = by_unit.find(g.units.front());
    if (it == by_unit.end()) throw std::invalid_argument("plan_prune: no score for group " + g.units.front().str());
    candidates.push_back({std::move(g), it->second});
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    const auto& x = a.group.units.front();
    const auto& y = b.group.units.front();
    return std::tuple(a.score, x.layer, site_rank(x.site), x.index) <
           std::tuple(b.score, y.layer, site_rank(y.site), y.index);
  });

  PrunePlan plan;
  plan.base = base;
  plan.pruned = base;
  plan.target_ratio = spec.ratio;
  plan.prunable_params = prunable_params(base, spec.sites);
  const std::int64_t full = width_param_count(base);
  auto reached = [&] {
    return static_cast<double>(plan.removed_params) >= spec.ratio * static_cast<double>(plan.prunable_params);
  };
  std::set<Site> blocked;
  for (const auto& cand : candidates) {
    if (reached()) break;
    ModelConfig next = plan.pruned;
    bool ok = true;
    for (const auto& id : cand.group.units) {
      auto& w = width_of(next, id);
      --w;
      const std::int64_t floor = id.site == Site::kAttnHead   ? spec.min_heads
                                 : id.site == Site::kMlpChannel ? spec.min_mlp
                                                                : spec.min_embed;
      if (w < floor) {
        ok = false;
        blocked.insert(id.site);
      }
    }
    if (!ok) continue;
    plan.pruned = std::move(next);
    plan.removed_params = full - width_param_count(plan.pruned);
    for (const auto& id : cand.group.units) {
      plan.removed.push_back(id);
      plan.scores.push_back(cand.score);
    }
    plan.threshold = cand.score;
  }
  if (!reached()) {
    std::ostringstream os;
    os << "prune ratio " << spec.ratio << " unreachable: at most " << plan.achieved_ratio()
       << " of prunable parameters can be removed under width floor";
    std::string sep = " ";
    for (auto s : blocked) {
      os << sep << floor_name(s, spec);
      sep = ", ";
    }
    throw std::runtime_error(os.str());
  }
  return plan;
}

TransformerModel apply_prune(const TransformerModel& model, const PrunePlan& plan) {
  check_plan(model, plan);
  const auto graph = build_graph(model);
  const auto removal = removed_indices(plan, graph);
  NoGradGuard guard;
  ParamStore out;
  for (const auto& [key, t] : model.params()) {
    Tensor cur = t;
    for (int axis = 0; axis < static_cast<int>(t.shape().size()); ++axis) {
      auto it = removal.find({key, axis});
      if (it == removal.end() || it->second.empty()) continue;
      std::vector<std::int64_t> keep;
      for (std::int64_t i = 0; i < t.shape()[axis]; ++i) {
        if (!it->second.count(i)) keep.push_back(i);
      }
      cur = index_select(cur, axis, keep);
    }
    const auto data = cur.data();
    out.emplace(key, Tensor::from_data(cur.shape(), std::vector<double>(data.begin(), data.end()), t.requires_grad()));
  }
  TransformerModel pruned(plan.pruned, std::move(out));
  pruned.check_consistency();
  return pruned;
}

TransformerModel mask_prune(const TransformerModel& model, const PrunePlan& plan) {
  check_plan(model, plan);
  const auto graph = build_graph(model);
  TransformerModel masked = model.clone();
  for (const auto& id : plan.removed) {
    if (!graph.contains(id)) throw std::invalid_argument("mask_prune: plan references " + id.str() + ", absent from model");
    for (const auto& s : graph.unit(id).slices) {
      auto& t = masked.param(s.key);
      auto data = t.mutable_data();
      for_each_slice_index(t.shape(), s, [&](std::int64_t i) { data[i] = 0.0; });
    }
  }
  return masked;
}

double measure_speedup(const TransformerModel& base, const TransformerModel& pruned, const Tensor& batch, int trials) {
  if (trials < 5) throw std::invalid_argument("measure_speedup: trials must be >= 5");
  NoGradGuard guard;
  auto time_once = [&](const TransformerModel& m) {
    const auto t0 = std::chrono::steady_clock::now();
    m.forward(batch);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  time_once(base);
  time_once(pruned);
  std::vector<double> tb, tp;
  for (int i = 0; i < trials; ++i) {
    tb.push_back(time_once(base));
    tp.push_back(time_once(pruned));
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  const double p = median(tp);
  return p > 0 ? median(tb) / p : 1.0;
}

PruneReport make_report(const PrunePlan& plan, const PruneSpec& spec) {
  PruneReport r;
  r.criterion = spec.criterion;
  r.sites = spec.sites;
  r.target_ratio = plan.target_ratio;
  r.achieved_ratio = plan.achieved_ratio();
  r.threshold = plan.threshold;
  r.removed = plan.removed;
  r.removed_scores = plan.scores;
  r.params_before = param_count(plan.base);
  r.params_after = param_count(plan.pruned);
  r.macs_before = macs_count(plan.base);
  r.macs_after = macs_count(plan.pruned);
  r.theoretical_speedup = static_cast<double>(r.macs_before) / static_cast<double>(r.macs_after);
  return r;
}

Json PruneReport::to_json() const {
  Json removed_j = Json::array();
  for (std::size_t i = 0; i < removed.size(); ++i) {
    removed_j.push_back({{"unit", removed[i].str()},
                         {"site", to_string(removed[i].site)},
                         {"layer", removed[i].layer},
                         {"index", removed[i].index},
                         {"score", removed_scores[i]}});
  }
  Json sites_j = Json::array();
  for (auto s : sites) sites_j.push_back(to_string(s));
  std::map<std::string, std::int64_t> per_site;
  for (const auto& u : removed) ++per_site[to_string(u.site)];
  Json timing = Json::object();
  if (measured_speedup > 0) timing["measured_speedup"] = measured_speedup;
  if (finetune_seconds >= 0) {
    timing["finetune_time"] = format_hms(finetune_seconds);
    timing["finetune_seconds"] = finetune_seconds;
  }
  return Json{{"criterion", to_string(criterion)},
              {"sites", sites_j},
              {"target_ratio", target_ratio},
              {"achieved_ratio", achieved_ratio},
              {"threshold", threshold},
              {"removed_count", per_site},
              {"removed", removed_j},
              {"params_before", params_before},
              {"params_after", params_after},
              {"params_removed", params_before - params_after},
              {"macs_before", macs_before},
              {"macs_after", macs_after},
              {"theoretical_speedup", theoretical_speedup},
              {"timing", timing}};
}

}  // namespace vp
