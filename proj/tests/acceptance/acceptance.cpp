// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.
//
//   acceptance [--work DIR] [--keep] [criteria...]

#include <CLI11.hpp>
#include <json.hpp>
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support/attention_oracle.hpp"
#include "support/gradcheck.hpp"
#include "support/primitive_cases.hpp"
#include "vitprune/depgraph.hpp"
#include "vitprune/importance.hpp"
#include "vitprune/model.hpp"
#include "vitprune/pruner.hpp"
#include "vitprune/train.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;
using namespace vp;
using namespace vp::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

TransformerModel perturbed(const ModelConfig& c, std::uint64_t seed, double amp) {
  auto m = init_model(c, seed);
  Rng rng(seed * 31 + 7);
  for (auto& [k, t] : m.mutable_params()) {
    for (auto& v : t.mutable_data()) v += rng.uniform(-amp, amp);
  }
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

Tensor logits(const TransformerModel& m, const Tensor& x) {
  NoGradGuard g;
  return m.forward(x);
}

Tensor one_hot_logits(const std::vector<int>& pred, int k) {
  std::vector<double> d(pred.size() * k, 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) d[i * k + pred[i]] = 1.0;
  return Tensor::from_data({static_cast<std::int64_t>(pred.size()), k}, std::move(d));
}

// ---------------------------------------------------------------------------

Outcome accounting_anchors() {
  const auto c = ModelConfig::vit_base();
  const double p = param_count(c) / 1e6, g = macs_count(c) / 1e9;
  const bool ok = std::abs(p - 86.57) <= 0.01 * 86.57 && std::abs(g - 17.59) <= 0.02 * 17.59;
  return {ok, fmt("params %.3fM (86.57M +-1%%), MACs %.3fG (17.59G +-2%%)", p, g)};
}

Outcome head_halving() {
  const auto g = build_graph(ModelConfig::vit_base());
  PruneSpec spec;
  spec.sites = {Site::kAttnHead};
  spec.ratio = 0.5;
  spec.criterion = Criterion::kRandom;
  const auto plan = plan_prune(g, score_groups_random(g, 0, spec.sites), spec);
  const auto left = std::accumulate(plan.pruned.num_heads.begin(), plan.pruned.num_heads.end(), std::int64_t{0});
  const bool ok = plan.removed.size() == 72 && left == 72;
  return {ok, fmt("removed %zu of 144 heads, %lld remain", plan.removed.size(), static_cast<long long>(left))};
}

Outcome masked_equivalence() {
  Rng rng(2718);
  double worst = 0.0;
  int multi = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t heads = std::int64_t{2} << rng.below(3);
    auto c = ModelConfig::toy();
    c.num_heads.assign(2, heads);
    c.head_dim = c.embed_dim / heads;
    for (auto& w : c.mlp_hidden) w = 8 + static_cast<std::int64_t>(rng.below(121));
    if (rng.bernoulli(0.3)) {
      c.pooling = Pooling::kMean;
      c.use_cls_token = false;
    }
    const auto m = perturbed(c, 500 + trial, 0.3);
    const auto g = build_graph(m);
    PruneSpec spec;
    spec.criterion = Criterion::kRandom;
    spec.sites = {Site::kAttnHead, Site::kMlpChannel};
    const bool single = trial % 4 == 0;
    spec.ratio = single ? 1e-12 : rng.uniform(0.05, 0.8);
    const auto scores = score_groups_random(g, rng.below(1u << 30), spec.sites);
    PrunePlan plan;
    while (true) {
      try {
        plan = plan_prune(g, scores, spec);
        break;
      } catch (const std::runtime_error&) {
        spec.ratio /= 2;
      }
    }
    if (single && plan.removed.size() != 1) {
      return {false, fmt("trial %d: single-group plan removed %zu", trial, plan.removed.size())};
    }
    if (plan.removed.size() > 1) ++multi;
    Rng xr(9000 + trial);
    const auto x = random_tensor(xr, {2, c.channels, c.image_size, c.image_size}, -1, 1, false);
    worst = std::max(worst, max_abs_diff(logits(apply_prune(m, plan), x), logits(mask_prune(m, plan), x)));
  }
  return {worst <= 1e-9, fmt("100 models (25 single-group, %d multi-group plans), max |dlogit| %.3g", multi, worst)};
}

Outcome gradient_suite() {
  Rng rng(4242);
  std::uint64_t seed = 1;
  double worst = 0.0;
  std::string where;
  auto note = [&](const GradCheckResult& r, const std::string& name) {
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      where = name + " " + r.worst;
    }
  };
  const auto cases = primitive_cases();
  for (int trial = 0; trial < 50; ++trial) {
    for (const auto& pc : cases) {
      std::vector<Tensor> inputs;
      for (const auto& s : pc.shapes) inputs.push_back(random_tensor(rng, s, -1.5, 1.5));
      const auto ps = seed++;
      note(check_gradients([&](const std::vector<Tensor>& in) { return project(pc.op(in), ps); }, inputs), pc.name);
    }
    auto ce = random_tensor(rng, {4, 5}, -2, 2);
    std::vector<int> labels(4);
    for (auto& l : labels) l = static_cast<int>(rng.below(5));
    note(check_gradients([&](const std::vector<Tensor>& in) { return cross_entropy(in[0], labels); }, {ce}),
         "cross_entropy");

    const bool cls = trial % 2 == 0;
    const auto c = ModelConfig::uniform(8, 1, 4, 8, 2, 2, 4, 6, 3, cls ? Pooling::kCls : Pooling::kMean, cls);
    auto model = perturbed(c, 70 + trial, 0.4);
    const auto images = random_tensor(rng, {2, 1, 8, 8}, -1, 1, false);
    const std::vector<int> y{static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))};
    std::vector<Tensor> params;
    for (auto& [k, t] : model.mutable_params()) {
      t.set_requires_grad(true);
      params.push_back(t);
    }
    note(check_gradients([&](const std::vector<Tensor>&) { return cross_entropy(model.forward(images), y); }, params),
         "2-layer model");
  }
  return {worst <= 1e-4, fmt("%zu primitives + cross_entropy + 2-layer model x 50 instances, max rel err %.3g (%s)",
                             cases.size(), worst, where.c_str())};
}

Outcome attention_oracle() {
  Rng rng(17);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t grid = 2 + static_cast<std::int64_t>(rng.below(4));
    const std::int64_t patch = 1 + static_cast<std::int64_t>(rng.below(16));
    const bool cls = rng.bernoulli(0.5);
    const auto c = grid_config(grid, patch, cls);
    const std::int64_t batch = 1 + static_cast<std::int64_t>(rng.below(3));
    std::map<std::tuple<std::int64_t, std::int64_t, std::int64_t>, std::vector<double>> mats;
    const auto rec = make_record(c, batch, [&](auto l, auto b, auto h) {
      return mats[{l, b, h}] = random_attention(rng, c.num_tokens());
    });
    const auto table = mean_attention_distance(std::span(&rec, 1), c);
    for (std::int64_t l = 0; l < c.num_layers; ++l) {
      for (std::int64_t h = 0; h < c.num_heads[l]; ++h) {
        double sum = 0.0;
        for (std::int64_t b = 0; b < batch; ++b) sum += oracle_distance(mats[{l, b, h}], grid, patch, cls);
        worst = std::max(worst, std::abs(table.distance[l][h] - sum / batch));
      }
    }
  }
  const double expected = (0.0 + 16.0 + 16.0 + 16.0 * std::sqrt(2.0)) / 4.0;
  const double uniform = attention_distance(uniform_matrix(5), 2, 16, true);
  const bool ok = worst <= 1e-9 && std::abs(uniform - expected) <= 1e-6 && std::abs(uniform - 13.657) < 1e-3;
  return {ok, fmt("50 random records max |d| %.3g px, uniform 2x2 = %.6f px", worst, uniform)};
}

Outcome metric_identities() {
  // 50 samples; valid misses 2, test misses 3.
  std::vector<int> labels(50), vpred(50), tpred(50);
  for (int i = 0; i < 50; ++i) labels[i] = vpred[i] = tpred[i] = i % 7;
  vpred[0] = 3;
  vpred[1] = 5;
  tpred[0] = tpred[1] = tpred[2] = 4;
  EvalReport r;
  r.num_classes = 7;
  r.splits["valid"] = compute_metrics(one_hot_logits(vpred, 7), labels);
  r.splits["test"] = compute_metrics(one_hot_logits(tpred, 7), labels);
  const double v = r.splits["valid"].top1, t = r.splits["test"].top1;
  bool ok = v == 0.96 && t == 0.94 && *r.gap() == v - t && std::abs(*r.gap() - 0.02) < 1e-12 &&
            r.to_json()["gap"].get<double>() == v - t;
  const auto fixture = fmt("%.2f - %.2f = %.2f", v, t, *r.gap());

  Rng rng(31337);
  int top5_bad = 0, prec_bad = 0, gap_bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(12));
    const int n = 1 + static_cast<int>(rng.below(40));
    std::vector<double> d(n * k);
    for (auto& x : d) x = std::round(rng.uniform(-3, 3));
    std::vector<int> y(n);
    for (auto& l : y) l = static_cast<int>(rng.below(k));
    const auto m = compute_metrics(Tensor::from_data({n, k}, d), y);
    if (!(m.top5 >= m.top1)) ++top5_bad;

    // Confusion oracle: first maximal logit is the prediction.
    std::vector<std::int64_t> tp(k, 0), predicted(k, 0);
    for (int i = 0; i < n; ++i) {
      int p = 0;
      for (int j = 1; j < k; ++j) {
        if (d[i * k + j] > d[i * k + p]) p = j;
      }
      ++predicted[p];
      if (p == y[i]) ++tp[p];
    }
    double prec = 0.0;
    for (int j = 0; j < k; ++j) prec += predicted[j] ? static_cast<double>(tp[j]) / predicted[j] : 0.0;
    prec /= k;
    if (std::abs(prec - m.precision) > 1e-12) ++prec_bad;

    EvalReport e;
    e.splits["valid"] = m;
    e.splits["test"] = compute_metrics(Tensor::from_data({n, k}, std::vector<double>(d.rbegin(), d.rend())), y);
    if (*e.gap() != e.splits["valid"].top1 - e.splits["test"].top1) ++gap_bad;
  }
  ok = ok && top5_bad == 0 && prec_bad == 0 && gap_bad == 0;
  return {ok, fmt("gap fixture %s; 1000 fixtures: top5<top1 %d, precision mismatches %d, gap mismatches %d",
                  fixture.c_str(), top5_bad, prec_bad, gap_bad)};
}

// ---------------------------------------------------------------------------
// End-to-end runs through the command line tool

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json load(const fs::path& p) { return Json::parse(slurp(p)); }

Json strip_timing(Json j) {
  if (j.is_object()) {
    j.erase("timing");
    for (auto& [k, v] : j.items()) v = strip_timing(v);
  } else if (j.is_array()) {
    for (auto& v : j) v = strip_timing(v);
  }
  return j;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(' '), b = s.find_last_not_of(' ');
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

// Drops the named column from a delimited table (csv or markdown pipes).
std::string drop_column(const std::string& text, char sep, const std::string& name) {
  std::istringstream in(text);
  std::string line, out;
  long col = -1;
  while (std::getline(in, line)) {
    auto cells = split(line, sep);
    if (col < 0) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (trim(cells[i]) == name) col = static_cast<long>(i);
      }
      if (col < 0) return text;
    }
    if (col < static_cast<long>(cells.size())) cells.erase(cells.begin() + col);
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? std::string(1, sep) : "") + cells[i];
    out += '\n';
  }
  return out;
}

struct Sweep {
  fs::path out;
  int exit_code = -1;
  double seconds = 0.0;
};

Sweep run_sweep(const fs::path& out) {
  Sweep s{out};
  const std::string cmd = std::string(VP_CLI_PATH) +
                          " --set 'prune.criteria=[\"hessian\"]' --set 'prune.ratios=[0.5,0.95]' --out " +
                          out.string() + " sweep >" + (out.string() + ".log") + " 2>&1";
  const auto t0 = std::chrono::steady_clock::now();
  const int rc = std::system(cmd.c_str());
  s.seconds = seconds_since(t0);
  s.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  return s;
}

Outcome dg_run(const Sweep& a) {
  if (a.exit_code != 0) return {false, fmt("sweep exited %d, see %s.log", a.exit_code, a.out.c_str())};
  const auto cfg = load(a.out / "config.json");
  const auto tr = load(a.out / "reports/baseline/train.json");
  const auto ev = load(a.out / "reports/baseline/eval.json");
  const double valid = ev["splits"]["valid"]["top1"], test = ev["splits"]["test"]["top1"], gap = ev["gap"];
  const double secs = tr["timing"]["seconds"];
  const int epochs = tr["epochs_run"];
  const bool setup = cfg["split"]["protocol"] == "pooled_holdout" && cfg["data"]["synthetic"]["classes"] == 7 &&
                     cfg["data"]["synthetic"]["domains"] == 4 && cfg["dg_finetune"]["max_epochs"].get<int>() <= 50;
  const bool ok = setup && epochs <= 50 && valid >= 2.0 / 7.0 && std::abs(gap) <= 0.15 && secs < 600.0;
  return {ok, fmt("valid %.4f (>= %.4f), test %.4f, gap %+.4f, %d epochs (best %d), %.0f s", valid, 2.0 / 7.0, test,
                  gap, epochs, tr["best_epoch"].get<int>(), secs)};
}

Outcome recovery_trend(const Sweep& a) {
  if (a.exit_code != 0) return {false, fmt("sweep exited %d", a.exit_code)};
  const double base = load(a.out / "reports/baseline/eval.json")["splits"]["test"]["top1"];
  const double pruned = load(a.out / "reports/hessian_r50/eval.json")["splits"]["test"]["top1"];
  const double s50 = load(a.out / "reports/hessian_r50/prune.json")["theoretical_speedup"];
  const double s95 = load(a.out / "reports/hessian_r95/prune.json")["theoretical_speedup"];
  const double m50 = load(a.out / "reports/hessian_r50/prune.json")["macs_after"];
  const double m95 = load(a.out / "reports/hessian_r95/prune.json")["macs_after"];
  const double rec = base > 0 ? pruned / base : 0.0;
  const bool ok = rec >= 0.8 && s95 > s50 && m95 < m50 && a.seconds < 1200.0;
  return {ok, fmt("hessian 50%%: test %.4f vs baseline %.4f (%.1f%% recovered); speedup 50%% %.2fx < 95%% %.2fx; "
                  "sweep %.0f s",
                  pruned, base, 100.0 * rec, s50, s95, a.seconds)};
}

Outcome determinism(const Sweep& a, const Sweep& b) {
  if (a.exit_code != 0 || b.exit_code != 0) return {false, fmt("sweeps exited %d / %d", a.exit_code, b.exit_code)};
  std::set<fs::path> files;
  for (const auto* s : {&a, &b}) {
    for (const auto& e : fs::recursive_directory_iterator(s->out / "reports")) {
      if (e.is_regular_file()) files.insert(fs::relative(e.path(), s->out));
    }
  }
  int compared = 0;
  std::vector<std::string> diffs;
  for (const auto& rel : files) {
    const auto pa = a.out / rel, pb = b.out / rel;
    if (!fs::exists(pa) || !fs::exists(pb)) {
      diffs.push_back(rel.string() + " (missing)");
      continue;
    }
    std::string ta, tb;
    if (rel.extension() == ".json") {
      ta = strip_timing(load(pa)).dump(2);
      tb = strip_timing(load(pb)).dump(2);
    } else if (rel.filename() == "table.md") {
      ta = drop_column(slurp(pa), '|', "FT-time");
      tb = drop_column(slurp(pb), '|', "FT-time");
    } else if (rel.filename() == "table.csv") {
      ta = drop_column(slurp(pa), ',', "finetune_seconds");
      tb = drop_column(slurp(pb), ',', "finetune_seconds");
    } else {
      ta = slurp(pa);
      tb = slurp(pb);
    }
    ++compared;
    if (ta != tb) diffs.push_back(rel.string());
  }
  for (const auto& e : fs::directory_iterator(a.out / "checkpoints")) {
    ++compared;
    if (slurp(e.path()) != slurp(b.out / "checkpoints" / e.path().filename())) {
      diffs.push_back("checkpoints/" + e.path().filename().string());
    }
  }
  std::string first = diffs.empty() ? "" : ", first: " + diffs.front();
  return {diffs.empty() && compared > 10,
          fmt("%d files compared (reports minus timing, checkpoints), %zu differ%s", compared, diffs.size(), first.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string work;
  bool keep = false;
  std::vector<int> only;
  app.add_option("--work", work, "Directory for end-to-end runs (default: a fresh temporary directory)");
  app.add_flag("--keep", keep, "Keep end-to-end outputs");
  app.add_option("criteria", only, "Criteria to run (default: all)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int i) { return only.empty() || std::find(only.begin(), only.end(), i) != only.end(); };

  int failures = 0;
  auto report = [&](int id, const char* title, double limit, const std::function<Outcome()>& fn,
                    double prior_seconds = 0.0) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = prior_seconds + seconds_since(t0);
    if (limit > 0 && secs >= limit) {
      o.pass = false;
      o.detail += fmt(" [over the %.0f s limit]", limit);
    }
    if (!o.pass) ++failures;
    std::printf("%s [%d] %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  report(1, "accounting anchors", 1, accounting_anchors);
  report(2, "head-halving anchor", 10, head_halving);
  report(3, "masked-equivalence oracle", 60, masked_equivalence);
  report(4, "gradient suite", 60, gradient_suite);
  report(5, "attention-distance oracle", 10, attention_oracle);
  report(6, "metric identities", 10, metric_identities);

  if (wanted(7) || wanted(8) || wanted(9)) {
    const bool temp = work.empty();
    fs::path root = temp ? fs::temp_directory_path() / ("vitprune-acceptance-" + std::to_string(std::random_device{}()))
                         : fs::path(work);
    fs::create_directories(root);
    for (const char* d : {"a", "b"}) fs::remove_all(root / d);
    const auto a = run_sweep(root / "a");
    report(7, "desk-scale DG run", 0, [&] { return dg_run(a); }, a.seconds);
    report(8, "pruning-recovery trend", 0, [&] { return recovery_trend(a); }, a.seconds);
    if (wanted(9)) {
      const auto b = run_sweep(root / "b");
      report(9, "determinism", 0, [&] { return determinism(a, b); }, a.seconds + b.seconds);
    }
    if (temp && !keep) fs::remove_all(root);
  }
  return failures == 0 ? 0 : 1;
}
