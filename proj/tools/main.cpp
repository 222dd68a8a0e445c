#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <optional>

#include "cli_support.hpp"

using namespace vpcli;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::string checkpoint;
  std::string name;
  std::string criterion;
  double ratio = -1.0;
  std::string run;
  bool retrain = false;
};

class Pipeline {
 public:
  Pipeline(const Options& opt, const std::string& command)
      : text_(resolve_config(opt.config, opt.sets, opt.out)), cfg_(Json::parse(text_)) {
    layout_.root = cfg_.at("out_dir").get<std::string>();
    if (fs::exists(layout_.config()) && read_file(layout_.config()) != text_) {
      throw CliError(kExitValidation, "config: " + layout_.config().string() +
                                          " was written by a different config; pass it with --config or use a new --out");
    }
    write_file(layout_.config(), text_);
    marker_.emplace(layout_.marker(), command);
  }

  const Json& cfg() const { return cfg_; }
  const Layout& layout() const { return layout_; }
  void stage(const std::string& s) {
    stage_ = s;
    marker_->stage(s);
    std::cerr << "[" << s << "]\n";
  }
  const std::string& current_stage() const { return stage_; }
  void fail(const std::string& msg) { marker_->fail(msg); }
  void done() { marker_->done(); }

  std::string section(const char* name) {
    char* s = nullptr;
    check(vp_config_section(text_.c_str(), name, &s), stage_);
    return take(s);
  }

  vp_dataset* data() {
    if (!data_) {
      vp_dataset* d = nullptr;
      check(vp_dataset_from_config(text_.c_str(), &d), stage_ + " (data)");
      data_.reset(d);
    }
    return data_.get();
  }

  vp_splits* splits() {
    if (!splits_) {
      vp_splits* s = nullptr;
      check(vp_splits_make(data(), section("split").c_str(), &s), stage_ + " (split)");
      splits_.reset(s);
    }
    return splits_.get();
  }

  Model load(const fs::path& path) {
    if (!fs::exists(path)) throw CliError(kExitValidation, stage_ + ": checkpoint " + path.string() + " does not exist");
    vp_model* m = nullptr;
    check(vp_model_load(path.string().c_str(), &m), stage_);
    return Model(m);
  }

  void save(const vp_model* m, const fs::path& path) {
    fs::create_directories(path.parent_path());
    check(vp_model_save(m, path.string().c_str()), stage_);
  }

  Json counts(const vp_model* m) {
    std::int64_t params = 0, macs = 0;
    check(vp_model_counts(m, &params, &macs), stage_);
    return {{"params", params}, {"macs", macs}};
  }

  Json evaluate(const vp_model* m, double baseline, double ft_seconds) {
    char* s = nullptr;
    check(vp_evaluate(m, data(), splits(), baseline, ft_seconds, &s), stage_);
    return Json::parse(take(s));
  }

  double baseline_test_top1() {
    const auto p = layout_.run("baseline") / "eval.json";
    if (!fs::exists(p)) return -1.0;
    const auto j = Json::parse(read_file(p));
    return j.at("splits").at("test").at("top1").get<double>();
  }

 private:
  std::string text_;
  Json cfg_;
  Layout layout_;
  std::optional<IncompleteMarker> marker_;
  std::string stage_ = "start";
  Dataset data_;
  Splits splits_;
};

std::string model_name(const Pipeline& p) { return p.cfg().at("name").get<std::string>(); }

// ---------------------------------------------------------------------------
// Stages

void gen_data(Pipeline& p) {
  p.stage("gen-data");
  const auto root = p.layout().data();
  check(vp_dataset_export(p.data(), (root / "images").string().c_str()), "gen-data (export)");
  char* s = nullptr;
  check(vp_dataset_summary(p.data(), &s), "gen-data");
  write_file(root / "summary.json", take(s));
  check(vp_splits_to_json(p.splits(), &s), "gen-data");
  write_file(root / "splits.json", take(s));
}

void train_baseline(Pipeline& p) {
  p.stage("train");
  vp_model* init = nullptr;
  const auto seed = p.cfg().at("seeds").at("init").get<std::uint64_t>();
  check(vp_model_init(p.section("model").c_str(), seed, &init), "train (init)");
  Model start(init);
  vp_model* best = nullptr;
  char *result = nullptr, *curves = nullptr;
  check(vp_train(start.get(), p.data(), p.splits(), "dg_finetune", p.section("dg_finetune").c_str(), &best, &result,
                 &curves),
        "train");
  Model model(best);
  const auto& l = p.layout();
  p.save(model.get(), l.checkpoint("baseline"));
  write_file(l.curves() / "baseline.csv", take(curves));
  write_file(l.run("baseline") / "train.json", take(result));
  p.stage("eval baseline");
  const auto eval = p.evaluate(model.get(), -1.0, -1.0);
  write_file(l.run("baseline") / "eval.json", dump(eval));
  write_file(l.run("baseline") / "summary.json",
             dump(run_summary(model_name(p), "baseline", nullptr, eval, p.counts(model.get()))));
}

void eval_checkpoint(Pipeline& p, const Options& opt) {
  p.stage("eval");
  const fs::path ckpt = opt.checkpoint.empty() ? p.layout().checkpoint("baseline") : fs::path(opt.checkpoint);
  const auto name = opt.name.empty() ? ckpt.stem().string() : opt.name;
  auto model = p.load(ckpt);
  const double base = name == "baseline" ? -1.0 : p.baseline_test_top1();
  write_file(p.layout().run(name) / "eval.json", dump(p.evaluate(model.get(), base, -1.0)));
}

std::string prune_one(Pipeline& p, const std::string& criterion, double ratio) {
  const auto id = run_id(criterion, ratio);
  p.stage("prune " + id);
  auto base = p.load(p.layout().checkpoint("baseline"));
  char* job = nullptr;
  check(vp_config_prune_job(p.cfg().dump().c_str(), criterion.c_str(), ratio, &job), p.current_stage());
  vp_model* pruned = nullptr;
  char *report = nullptr, *scores = nullptr;
  const auto job_text = take(job);
  check(vp_prune(base.get(), p.data(), p.splits(), job_text.c_str(), &pruned, &report, &scores), p.current_stage());
  Model m(pruned);
  p.save(m.get(), p.layout().checkpoint(id));
  write_file(p.layout().run(id) / "prune.json", take(report));
  write_file(p.layout().run(id) / "scores.csv", take(scores));
  return id;
}

void finetune_one(Pipeline& p, const std::string& id) {
  p.stage("finetune " + id);
  const auto& l = p.layout();
  const auto prune_path = l.run(id) / "prune.json";
  if (!fs::exists(prune_path)) throw CliError(kExitValidation, p.current_stage() + ": " + prune_path.string() + " missing; run prune first");
  auto pruned = p.load(l.checkpoint(id));
  vp_model* best = nullptr;
  char *result = nullptr, *curves = nullptr;
  check(vp_train(pruned.get(), p.data(), p.splits(), "postprune_finetune", p.section("postprune_finetune").c_str(),
                 &best, &result, &curves),
        p.current_stage());
  Model model(best);
  p.save(model.get(), l.checkpoint(id + "_ft"));
  write_file(l.curves() / (id + ".csv"), take(curves));
  const auto train = Json::parse(take(result));
  write_file(l.run(id) / "finetune.json", dump(train));
  p.stage("eval " + id);
  const auto seconds = train.at("timing").at("seconds").get<double>();
  const auto eval = p.evaluate(model.get(), p.baseline_test_top1(), seconds);
  write_file(l.run(id) / "eval.json", dump(eval));
  const auto prune = Json::parse(read_file(prune_path));
  write_file(l.run(id) / "summary.json", dump(run_summary(model_name(p), id, prune, eval, p.counts(model.get()))));
}

void analyze_attention(Pipeline& p, const Options& opt) {
  p.stage("analyze-attn");
  const fs::path ckpt = opt.checkpoint.empty() ? p.layout().checkpoint("baseline") : fs::path(opt.checkpoint);
  const auto name = opt.name.empty() ? ckpt.stem().string() : opt.name;
  auto model = p.load(ckpt);
  const auto& a = p.cfg().at("attention");
  const auto dir = p.layout().attn() / name;
  char *csv = nullptr, *json = nullptr;
  check(vp_attention_distance(model.get(), p.data(), p.splits(), a.at("images").get<std::int64_t>(), &csv, &json),
        "analyze-attn (distance)");
  write_file(dir / "distance.csv", take(csv));
  write_file(dir / "distance.json", take(json));
  char* split_text = nullptr;
  check(vp_splits_to_json(p.splits(), &split_text), "analyze-attn");
  const auto test = Json::parse(take(split_text)).at("test");
  const auto layer = a.at("layer").get<std::int64_t>();
  Json maps = Json::array();
  const auto n = std::min<std::size_t>(a.at("maps").get<std::size_t>(), test.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto idx = test[i].get<std::size_t>();
    for (const char* mode : {"cls_query", "token_mask"}) {
      const auto file = dir / (std::string(mode) + "_" + std::to_string(idx) + ".pgm");
      char* info = nullptr;
      check(vp_attention_map(model.get(), p.data(), idx, layer, mode, file.string().c_str(), &info),
            std::string("analyze-attn (") + mode + ")");
      auto j = Json::parse(take(info));
      j["file"] = file.filename().string();
      maps.push_back(j);
    }
  }
  write_file(dir / "maps.json", dump(maps));
}

std::vector<Json> collect_rows(const Layout& l, const Json& cfg) {
  std::vector<Json> rows;
  if (!fs::exists(l.reports())) return rows;
  for (const auto& entry : fs::directory_iterator(l.reports())) {
    const auto f = entry.path() / "summary.json";
    if (entry.is_directory() && fs::exists(f)) rows.push_back(Json::parse(read_file(f)));
  }
  std::vector<std::string> order;
  for (const auto& c : cfg.at("prune").at("criteria")) order.push_back(c.get<std::string>());
  auto rank = [&](const Json& r) {
    const auto c = r.at("criterion").get<std::string>();
    const auto it = std::find(order.begin(), order.end(), c);
    return c == "none" ? -1 : static_cast<int>(it - order.begin());
  };
  std::sort(rows.begin(), rows.end(), [&](const Json& a, const Json& b) {
    if (rank(a) != rank(b)) return rank(a) < rank(b);
    if (a.at("ratio") != b.at("ratio")) return a.at("ratio").get<double>() < b.at("ratio").get<double>();
    return a.at("run").get<std::string>() < b.at("run").get<std::string>();
  });
  return rows;
}

void report(const Layout& l, const Json& cfg) {
  const auto rows = collect_rows(l, cfg);
  if (rows.empty()) throw CliError(kExitValidation, "report: no run summaries under " + l.reports().string());
  const auto md = table_markdown(rows);
  write_file(l.reports() / "table.md", md);
  write_file(l.reports() / "table.csv", table_csv(rows));
  write_file(l.reports() / "table.json", dump(rows));
  std::cout << md;
}

double pick_ratio(const Pipeline& p, const Options& opt) {
  return opt.ratio >= 0 ? opt.ratio : p.cfg().at("prune").at("ratios").at(0).get<double>();
}

std::string pick_criterion(const Pipeline& p, const Options& opt) {
  return opt.criterion.empty() ? p.cfg().at("prune").at("criteria").at(0).get<std::string>() : opt.criterion;
}

int run(const std::string& command, const Options& opt) {
  if (command == "report") {
    const auto text = resolve_config(opt.config, opt.sets, opt.out);
    const auto cfg = Json::parse(text);
    const Layout l{cfg.at("out_dir").get<std::string>()};
    if (fs::exists(l.marker())) std::cerr << "warning: " << l.root.string() << " is marked incomplete\n";
    report(l, cfg);
    return kExitOk;
  }
  Pipeline p(opt, command);
  try {
    if (command == "gen-data") {
      gen_data(p);
    } else if (command == "train") {
      train_baseline(p);
    } else if (command == "eval") {
      eval_checkpoint(p, opt);
    } else if (command == "prune") {
      prune_one(p, pick_criterion(p, opt), pick_ratio(p, opt));
    } else if (command == "finetune") {
      finetune_one(p, opt.run.empty() ? run_id(pick_criterion(p, opt), pick_ratio(p, opt)) : opt.run);
    } else if (command == "analyze-attn") {
      analyze_attention(p, opt);
    } else if (command == "sweep") {
      if (opt.retrain || !fs::exists(p.layout().checkpoint("baseline"))) train_baseline(p);
      for (const auto& c : p.cfg().at("prune").at("criteria")) {
        for (const auto& r : p.cfg().at("prune").at("ratios")) {
          finetune_one(p, prune_one(p, c.get<std::string>(), r.get<double>()));
        }
      }
      p.stage("report");
      report(p.layout(), p.cfg());
    }
  } catch (const std::exception& e) {
    p.fail(e.what());
    throw;
  }
  p.done();
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured pruning and domain-generalization experiments for vision transformers"};
  app.set_version_flag("--version", vp_version());
  app.require_subcommand(1);
  app.fallthrough();
  Options opt;
  app.add_option("--config", opt.config, "Experiment config JSON (defaults when omitted)")->check(CLI::ExistingFile);
  app.add_option("--set", opt.sets, "Override a config field: dotted.key=value (repeatable)");
  app.add_option("--out", opt.out, "Output directory (overrides out_dir)");

  auto* gen = app.add_subcommand("gen-data", "Generate or ingest the dataset and export images and splits");
  auto* train = app.add_subcommand("train", "Train the baseline model (domain-generalization fine-tune)");
  auto* prune = app.add_subcommand("prune", "Prune the baseline at one criterion and ratio");
  auto* ft = app.add_subcommand("finetune", "Fine-tune a pruned checkpoint and evaluate it");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on train/valid/test");
  auto* attn = app.add_subcommand("analyze-attn", "Mean attention distance table and attention maps");
  auto* rep = app.add_subcommand("report", "Merge run summaries into one table");
  auto* sweep = app.add_subcommand("sweep", "Train (if needed), then prune and fine-tune every criterion x ratio");
  for (auto* sub : {prune, ft}) {
    sub->add_option("--criterion", opt.criterion, "l1 | l2 | taylor | hessian | random");
    sub->add_option("--ratio", opt.ratio, "Fraction of prunable parameters to remove")->check(CLI::Range(0.0, 1.0));
  }
  ft->add_option("--run", opt.run, "Run id, e.g. hessian_r50");
  for (auto* sub : {eval, attn}) {
    sub->add_option("--checkpoint", opt.checkpoint, "Checkpoint file (default: baseline)");
    sub->add_option("--name", opt.name, "Output name (default: checkpoint stem)");
  }
  sweep->add_flag("--retrain", opt.retrain, "Retrain the baseline even if a checkpoint exists");
  (void)gen;
  (void)train;
  (void)rep;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }
  const auto command = app.get_subcommands().front()->get_name();
  try {
    return run(command, opt);
  } catch (const CliError& e) {
    std::cerr << "vitprune: error: " << e.what() << "\n";
    return e.code();
  } catch (const std::exception& e) {
    std::cerr << "vitprune: error: " << command << ": " << e.what() << "\n";
    return kExitRuntime;
  }
}
