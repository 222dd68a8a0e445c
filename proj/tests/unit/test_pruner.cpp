#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support/gradcheck.hpp"
#include "vitprune/pruner.hpp"

using namespace vp;
using vp::testing::random_tensor;

namespace {

TransformerModel perturbed(const ModelConfig& c, std::uint64_t seed, double amp = 0.3) {
  auto m = init_model(c, seed);
  Rng rng(seed * 31 + 1);
  for (auto& [k, t] : m.mutable_params()) {
    for (auto& v : t.mutable_data()) v += rng.uniform(-amp, amp);
  }
  return m;
}

Tensor images(const ModelConfig& c, std::int64_t batch, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor(rng, {batch, c.channels, c.image_size, c.image_size}, -1, 1, false);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

Tensor logits(const TransformerModel& m, const Tensor& x) {
  NoGradGuard g;
  return m.forward(x);
}

PrunePlan plan_removing(const TransformerModel& m, std::vector<UnitId> units) {
  const auto g = build_graph(m);
  std::vector<ImportanceScore> scores;
  for (const auto& u : g.units()) {
    const bool chosen = std::find(units.begin(), units.end(), u.id) != units.end();
    scores.push_back({u.id, Criterion::kL1, chosen ? 0.0 : 1.0, 0});
  }
  PruneSpec spec;
  spec.sites = {Site::kAttnHead, Site::kMlpChannel, Site::kEmbedChannel};
  spec.ratio = 0.0;
  auto plan = plan_prune(g, scores, spec);
  // Hand-assemble: take exactly the chosen units.
  plan.removed = units;
  plan.scores.assign(units.size(), 0.0);
  for (const auto& u : units) {
    if (u.site == Site::kAttnHead) --plan.pruned.num_heads[u.layer];
    if (u.site == Site::kMlpChannel) --plan.pruned.mlp_hidden[u.layer];
    if (u.site == Site::kEmbedChannel) --plan.pruned.embed_dim;
  }
  return plan;
}

}  // namespace

TEST_CASE("ratio 0 gives an empty plan and an identical model") {
  auto m = perturbed(ModelConfig::toy(), 1);
  const auto g = build_graph(m);
  PruneSpec spec;
  spec.ratio = 0.0;
  const auto plan = plan_prune(g, score_groups(g, m, {}), spec);
  CHECK(plan.removed.empty());
  CHECK(plan.removed_params == 0);
  CHECK(apply_prune(m, plan).serialize() == m.serialize());
}

TEST_CASE("ViT-Base heads only at half the head parameters removes 72 of 144 heads") {
  const auto base = ModelConfig::vit_base();
  const auto g = build_graph(base);
  PruneSpec spec;
  spec.sites = {Site::kAttnHead};
  spec.ratio = 0.5;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto plan = plan_prune(g, score_groups_random(g, seed, spec.sites), spec);
    CHECK(plan.removed.size() == 72);
    CHECK(std::accumulate(plan.pruned.num_heads.begin(), plan.pruned.num_heads.end(), std::int64_t{0}) == 72);
    CHECK(plan.achieved_ratio() == doctest::Approx(0.5).epsilon(1e-12));
    for (auto h : plan.pruned.num_heads) CHECK(h >= 1);
  }
}

TEST_CASE("the strictly smallest l1 mlp channel is removed first") {
  auto m = perturbed(ModelConfig::toy(), 2);
  const auto g = build_graph(m);
  const UnitId weakest{Site::kMlpChannel, 1, 77};
  for (const auto& s : g.unit(weakest).slices) {
    auto& t = m.param(s.key);
    auto d = t.mutable_data();
    for_each_slice_index(t.shape(), s, [&](std::int64_t i) { d[i] *= 1e-3; });
  }
  PruneSpec spec;
  spec.ratio = 0.05;
  const auto scores = score_groups(g, m, {});
  const auto plan = plan_prune(g, scores, spec);
  REQUIRE_FALSE(plan.removed.empty());
  CHECK(plan.removed.front() == weakest);

  // Exhaustive oracle: removal order is the score sort.
  std::vector<ImportanceScore> sorted(scores.begin(), scores.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.value < b.value; });
  for (std::size_t i = 0; i < plan.removed.size(); ++i) CHECK(plan.removed[i] == sorted[i].group);
  CHECK(plan.threshold == plan.scores.back());
}

TEST_CASE("ties break by layer, site, index") {
  const auto g = build_graph(ModelConfig::toy());
  std::vector<ImportanceScore> scores;
  for (const auto& u : g.units()) scores.push_back({u.id, Criterion::kL1, 1.0, 0});
  PruneSpec spec;
  spec.ratio = 0.3;
  const auto plan = plan_prune(g, scores, spec);
  REQUIRE(plan.removed.size() >= 2);
  CHECK(plan.removed[0] == UnitId{Site::kAttnHead, 0, 0});
  CHECK(plan.removed[1] == UnitId{Site::kAttnHead, 0, 1});
  for (std::size_t i = 1; i < plan.removed.size(); ++i) CHECK(plan.removed[i - 1].layer <= plan.removed[i].layer);
}

TEST_CASE("masked equivalence for one head") {
  const auto c = ModelConfig::toy();
  auto m = perturbed(c, 3);
  const auto x = images(c, 3, 4);
  for (int h = 0; h < 4; ++h) {
    const UnitId id{Site::kAttnHead, 0, h};
    const auto plan = plan_removing(m, {id});
    const auto pruned = apply_prune(m, plan);
    CHECK(pruned.config().num_heads == std::vector<std::int64_t>{3, 4});
    CHECK(max_abs_diff(logits(pruned, x), logits(mask_prune(m, plan), x)) <= 1e-9);

    // Zeroing only the head's attn_out input columns is already equivalent.
    auto cols = m.clone();
    auto& w = cols.param({0, Component::kAttnOut, "weight"});
    auto d = w.mutable_data();
    for (std::int64_t r = 0; r < c.embed_dim; ++r) {
      for (std::int64_t j = h * c.head_dim; j < (h + 1) * c.head_dim; ++j) d[r * 4 * c.head_dim + j] = 0.0;
    }
    CHECK(max_abs_diff(logits(pruned, x), logits(cols, x)) <= 1e-9);
  }
}

TEST_CASE("masked equivalence for one mlp channel via the fc2 column") {
  const auto c = ModelConfig::toy();
  auto m = perturbed(c, 5);
  const auto x = images(c, 2, 6);
  const UnitId id{Site::kMlpChannel, 1, 31};
  const auto pruned = apply_prune(m, plan_removing(m, {id}));
  CHECK(pruned.config().mlp_hidden == std::vector<std::int64_t>{128, 127});
  auto cols = m.clone();
  auto& w = cols.param({1, Component::kMlpFc2, "weight"});
  auto d = w.mutable_data();
  for (std::int64_t r = 0; r < c.embed_dim; ++r) d[r * 128 + 31] = 0.0;
  CHECK(max_abs_diff(logits(pruned, x), logits(cols, x)) <= 1e-9);
}

TEST_CASE("masked equivalence over random head and channel plans") {
  const auto c = ModelConfig::uniform(16, 3, 4, 32, 3, 4, 8, 24, 5);
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = perturbed(c, 100 + trial);
    const auto g = build_graph(m);
    PruneSpec spec;
    spec.ratio = rng.uniform(0.05, 0.8);
    spec.criterion = Criterion::kRandom;
    const auto plan = plan_prune(g, score_groups_random(g, rng.below(1000000), spec.sites), spec);
    const auto x = images(c, 2, 1000 + trial);
    CHECK(max_abs_diff(logits(apply_prune(m, plan), x), logits(mask_prune(m, plan), x)) <= 1e-9);
  }
}

TEST_CASE("pruned model rebuilds a valid graph with reduced unit counts") {
  const auto c = ModelConfig::toy();
  auto m = perturbed(c, 7);
  const auto g = build_graph(m);
  PruneSpec spec;
  spec.sites = {Site::kAttnHead, Site::kMlpChannel, Site::kEmbedChannel};
  spec.ratio = 0.4;
  spec.criterion = Criterion::kL2;
  ScoringOptions opt;
  opt.criterion = Criterion::kL2;
  opt.sites = spec.sites;
  const auto plan = plan_prune(g, score_groups(g, m, opt), spec);
  const auto pruned = apply_prune(m, plan);
  const auto g2 = build_graph(pruned);
  CHECK(validate(g2, pruned).ok());
  for (auto site : spec.sites) {
    const auto removed = std::count_if(plan.removed.begin(), plan.removed.end(), [&](auto& u) { return u.site == site; });
    CHECK(g2.count(site) == g.count(site) - static_cast<std::size_t>(removed));
  }
  const auto out = logits(pruned, images(c, 2, 8));
  CHECK(out.shape() == Shape{2, c.num_classes});
  for (double v : out.data()) CHECK(std::isfinite(v));
}

TEST_CASE("report accounting is exact") {
  const auto c = ModelConfig::toy();
  auto m = perturbed(c, 9);
  const auto g = build_graph(m);
  PruneSpec spec;
  spec.ratio = 0.5;
  const auto plan = plan_prune(g, score_groups(g, m, {}), spec);
  const auto pruned = apply_prune(m, plan);
  const auto report = make_report(plan, spec);
  std::int64_t slice_total = 0;
  for (const auto& u : plan.removed) slice_total += g.unit(u).size();
  CHECK(report.params_before == param_count(m));
  CHECK(report.params_after == param_count(pruned));
  CHECK(report.params_after == report.params_before - slice_total);
  CHECK(report.macs_after == macs_count(pruned));
  CHECK(report.theoretical_speedup == doctest::Approx(double(report.macs_before) / double(report.macs_after)));

  // Constraint satisfaction within one group.
  const double target = spec.ratio * static_cast<double>(plan.prunable_params);
  CHECK(plan.removed_params >= target);
  CHECK(plan.removed_params - g.unit(plan.removed.back()).size() < target);

  const auto j = report.to_json();
  CHECK(j["params_after"] == report.params_after);
  CHECK(j["removed"].size() == plan.removed.size());
  CHECK(j["timing"].empty());
}

TEST_CASE("theoretical speedup is monotone in the ratio") {
  const auto g = build_graph(ModelConfig::toy());
  PruneSpec spec;
  spec.criterion = Criterion::kRandom;
  double prev = 1.0;
  for (double r : {0.0, 0.25, 0.5, 0.75, 0.85}) {
    spec.ratio = r;
    const auto rep = make_report(plan_prune(g, score_groups_random(g, 4, spec.sites), spec), spec);
    CHECK(rep.theoretical_speedup >= prev);
    prev = rep.theoretical_speedup;
  }
  CHECK(prev > 2.0);
}

TEST_CASE("planning is deterministic") {
  auto m = perturbed(ModelConfig::toy(), 10);
  const auto g = build_graph(m);
  PruneSpec spec;
  spec.ratio = 0.6;
  const auto s = score_groups(g, m, {});
  const auto a = plan_prune(g, s, spec);
  const auto b = plan_prune(g, s, spec);
  CHECK(a.removed == b.removed);
  CHECK(a.pruned == b.pruned);
}

TEST_CASE("unreachable ratio names the binding floor") {
  const auto g = build_graph(ModelConfig::toy());
  PruneSpec spec;
  spec.sites = {Site::kAttnHead};
  spec.min_heads = 3;
  spec.ratio = 0.5;
  try {
    plan_prune(g, score_groups_random(g, 0, spec.sites), spec);
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("min_heads=3") != std::string::npos);
  }
  spec.ratio = 0.25;
  CHECK(plan_prune(g, score_groups_random(g, 0, spec.sites), spec).removed.size() == 2);
}

TEST_CASE("invalid inputs are rejected") {
  auto m = init_model(ModelConfig::toy(), 11);
  const auto g = build_graph(m);
  PruneSpec spec;
  spec.ratio = 1.0;
  CHECK_THROWS_AS(plan_prune(g, {}, spec), std::invalid_argument);
  spec.ratio = 0.5;
  spec.min_heads = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.min_heads = 1;

  auto partial = score_groups(g, m, {});
  partial.pop_back();
  CHECK_THROWS_AS(plan_prune(g, partial, spec), std::invalid_argument);

  const auto plan = plan_prune(g, score_groups(g, m, {}), spec);
  auto other = init_model(ModelConfig::uniform(32, 3, 8, 64, 2, 2, 32, 128, 7), 0);
  CHECK_THROWS_AS(apply_prune(other, plan), std::invalid_argument);
  auto twice = plan;
  twice.removed.push_back(twice.removed.front());
  CHECK_THROWS_AS(apply_prune(m, twice), std::invalid_argument);
}

TEST_CASE("measure_speedup") {
  const auto c = ModelConfig::toy();
  auto m = init_model(c, 12);
  const auto x = images(c, 4, 13);
  const double self = measure_speedup(m, m, x, 9);
  CHECK(self >= 0.8);
  CHECK(self <= 1.25);
  CHECK_THROWS_AS(measure_speedup(m, m, x, 4), std::invalid_argument);

  const auto g = build_graph(m);
  PruneSpec spec;
  spec.ratio = 0.85;
  const auto pruned = apply_prune(m, plan_prune(g, score_groups(g, m, {}), spec));
  CHECK(measure_speedup(m, pruned, x, 5) > 1.0);
}
