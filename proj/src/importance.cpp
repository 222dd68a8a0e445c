#include "vitprune/importance.hpp"

#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "vitprune/random.hpp"

namespace vp {

namespace {

template <typename F>
double reduce_group(const PruneGroup& group, const DependencyGraph& graph, const TransformerModel& model,
                    Aggregation agg, F&& per_scalar) {
  double total = 0.0;
  std::int64_t count = 0;
  for (const auto& id : group.units) {
    for (const auto& s : graph.unit(id).slices) {
      const Tensor& t = model.param(s.key);
      const auto w = t.data();
      for_each_slice_index(t.shape(), s, [&](std::int64_t i) {
        total += per_scalar(s.key, i, w[i]);
        ++count;
      });
    }
  }
  if (count == 0) throw std::invalid_argument("importance: empty group");
  return agg == Aggregation::kMean ? total / static_cast<double>(count) : total;
}

const std::vector<double>& stats_for(const std::map<ParamKey, std::vector<double>>& m, const ParamKey& key,
                                     std::size_t expected) {
  auto it = m.find(key);
  if (it == m.end() || it->second.size() != expected) {
    throw std::logic_error("importance: gradient unavailable for " + key.str());
  }
  return it->second;
}

}  // namespace

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::kL1: return "l1";
    case Criterion::kL2: return "l2";
    case Criterion::kTaylor: return "taylor";
    case Criterion::kHessian: return "hessian";
    case Criterion::kRandom: return "random";
  }
  return "unknown";
}

Criterion criterion_from_string(const std::string& s) {
  if (s == "l1") return Criterion::kL1;
  if (s == "l2") return Criterion::kL2;
  if (s == "taylor") return Criterion::kTaylor;
  if (s == "hessian") return Criterion::kHessian;
  if (s == "random") return Criterion::kRandom;
  throw std::invalid_argument("unknown criterion '" + s + "' (expected l1|l2|taylor|hessian|random)");
}

std::string to_string(Aggregation a) { return a == Aggregation::kMean ? "mean" : "sum"; }

Aggregation aggregation_from_string(const std::string& s) {
  if (s == "mean") return Aggregation::kMean;
  if (s == "sum") return Aggregation::kSum;
  throw std::invalid_argument("unknown aggregation '" + s + "' (expected mean|sum)");
}

GradientStats gradient_stats(ParamStore& params, std::size_t count,
                             const std::function<Tensor(std::size_t)>& loss_at) {
  if (count == 0) throw std::invalid_argument("gradient_stats: no calibration data");
  GradientStats stats;
  std::vector<Tensor> tensors;
  std::vector<bool> previous;
  for (auto& [key, t] : params) {
    previous.push_back(t.requires_grad());
    t.set_requires_grad(true);
    tensors.push_back(t);
    stats.mean_grad[key].assign(t.numel(), 0.0);
    stats.mean_sq_grad[key].assign(t.numel(), 0.0);
  }
  for (std::size_t i = 0; i < count; ++i) {
    for (auto& t : tensors) t.zero_grad();
    Tensor loss = loss_at(i);
    if (!std::isfinite(loss.item())) throw NumericError("gradient_stats: non-finite calibration loss");
    backward(loss, tensors);
    std::size_t k = 0;
    for (auto& [key, t] : params) {
      auto g = tensors[k++].grad();
      auto& m = stats.mean_grad[key];
      auto& s = stats.mean_sq_grad[key];
      for (std::size_t j = 0; j < g.size(); ++j) {
        m[j] += g[j];
        s[j] += g[j] * g[j];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (auto& [key, v] : stats.mean_grad) for (auto& x : v) x *= inv;
  for (auto& [key, v] : stats.mean_sq_grad) for (auto& x : v) x *= inv;
  std::size_t k = 0;
  for (auto& [key, t] : params) {
    t.set_requires_grad(previous[k]);
    tensors[k++].clear_grad();
  }
  stats.evaluations = static_cast<int>(count);
  return stats;
}

GradientStats model_gradient_stats(const TransformerModel& model, std::span<const Batch> batches, bool per_sample) {
  if (batches.empty()) throw std::invalid_argument("calibration: no batches");
  TransformerModel work = model.clone();
  GradientStats stats;
  if (!per_sample) {
    stats = gradient_stats(work.mutable_params(), batches.size(), [&](std::size_t i) {
      return cross_entropy(work.forward(batches[i].images), batches[i].labels);
    });
  } else {
    std::vector<std::pair<std::size_t, std::int64_t>> samples;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      for (std::int64_t s = 0; s < batches[b].images.dim(0); ++s) samples.emplace_back(b, s);
    }
    stats = gradient_stats(work.mutable_params(), samples.size(), [&](std::size_t i) {
      const auto [b, s] = samples[i];
      Tensor img = slice(batches[b].images, 0, s, 1);
      const int label = batches[b].labels[s];
      return cross_entropy(work.forward(img), std::span<const int>(&label, 1));
    });
  }
  stats.batches = static_cast<int>(batches.size());
  return stats;
}

double score_l1(const PruneGroup& group, const DependencyGraph& graph, const TransformerModel& model,
                Aggregation agg) {
  return reduce_group(group, graph, model, agg, [](const ParamKey&, std::int64_t, double w) { return std::abs(w); });
}

double score_l2(const PruneGroup& group, const DependencyGraph& graph, const TransformerModel& model,
                Aggregation agg) {
  const double ms = reduce_group(group, graph, model, agg, [](const ParamKey&, std::int64_t, double w) { return w * w; });
  return std::sqrt(ms);
}

double score_taylor(const PruneGroup& group, const DependencyGraph& graph, const TransformerModel& model,
                    const GradientStats& stats, Aggregation agg) {
  return reduce_group(group, graph, model, agg, [&](const ParamKey& key, std::int64_t i, double w) {
    const auto& g = stats_for(stats.mean_grad, key, model.param(key).numel());
    const double s = g[i] * w;
    return s * s;
  });
}

double score_hessian(const PruneGroup& group, const DependencyGraph& graph, const TransformerModel& model,
                     const GradientStats& fisher, Aggregation agg) {
  return reduce_group(group, graph, model, agg, [&](const ParamKey& key, std::int64_t i, double w) {
    const auto& h = stats_for(fisher.mean_sq_grad, key, model.param(key).numel());
    return 0.5 * h[i] * w * w;
  });
}

double score_random(const UnitId& group, std::uint64_t seed) {
  std::uint64_t x = splitmix64(seed);
  x = splitmix64(x ^ static_cast<std::uint64_t>(group.site));
  x = splitmix64(x ^ static_cast<std::uint64_t>(static_cast<std::int64_t>(group.layer)));
  x = splitmix64(x ^ static_cast<std::uint64_t>(group.index));
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

namespace {

std::vector<PruneGroup> enabled_groups(const DependencyGraph& graph, const std::vector<Site>& sites) {
  const std::set<Site> enabled(sites.begin(), sites.end());
  std::set<UnitId> done;
  std::vector<PruneGroup> groups;
  for (const auto& u : graph.units()) {
    if (!enabled.count(u.id.site) || done.count(u.id)) continue;
    auto g = group_for(graph, u.id);
    for (const auto& id : g.units) done.insert(id);
    groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace

std::vector<ImportanceScore> score_groups_random(const DependencyGraph& graph, std::uint64_t seed,
                                                 const std::vector<Site>& sites) {
  std::vector<ImportanceScore> scores;
  for (const auto& g : enabled_groups(graph, sites)) {
    scores.push_back({g.units.front(), Criterion::kRandom, score_random(g.units.front(), seed), 0});
  }
  return scores;
}

std::vector<ImportanceScore> score_groups(const DependencyGraph& graph, const TransformerModel& model,
                                          const ScoringOptions& options, std::span<const Batch> calibration) {
  if (!(graph.config() == model.config())) throw std::invalid_argument("score_groups: graph was built for a different model");
  if (options.criterion == Criterion::kRandom) return score_groups_random(graph, options.seed, options.sites);
  GradientStats stats;
  int calib = 0;
  if (options.criterion == Criterion::kTaylor || options.criterion == Criterion::kHessian) {
    stats = model_gradient_stats(model, calibration, options.criterion == Criterion::kHessian);
    calib = static_cast<int>(calibration.size());
  }
  std::vector<ImportanceScore> scores;
  for (const auto& g : enabled_groups(graph, options.sites)) {
    double v = 0.0;
    switch (options.criterion) {
      case Criterion::kL1: v = score_l1(g, graph, model, options.aggregation); break;
      case Criterion::kL2: v = score_l2(g, graph, model, options.aggregation); break;
      case Criterion::kTaylor: v = score_taylor(g, graph, model, stats, options.aggregation); break;
      case Criterion::kHessian: v = score_hessian(g, graph, model, stats, options.aggregation); break;
      case Criterion::kRandom: break;
    }
    scores.push_back({g.units.front(), options.criterion, v, calib});
  }
  return scores;
}

std::string scores_to_csv(std::span<const ImportanceScore> scores) {
  std::ostringstream os;
  os.precision(17);
  os << "site,layer,index,criterion,score\n";
  for (const auto& s : scores) {
    os << to_string(s.group.site) << ',' << s.group.layer << ',' << s.group.index << ',' << to_string(s.criterion)
       << ',' << s.value << '\n';
  }
  return os.str();
}

}  // namespace vp
