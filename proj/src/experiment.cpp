#include "vitprune/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "vitprune/random.hpp"

namespace vp {

namespace {

// Collects every problem in a document instead of stopping at the first.
class Reader {
 public:
  std::vector<std::string> errors;

  bool object(const Json& j, const std::string& path, const std::vector<std::string>& allowed) {
    if (!j.is_object()) {
      errors.push_back(path + ": expected an object");
      return false;
    }
    for (const auto& [k, v] : j.items()) {
      if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
        errors.push_back(path + "." + k + ": unknown key");
      }
    }
    return true;
  }

  template <class T>
  void integer(const Json& j, const std::string& path, const char* key, T& out) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() &&
                                   v.get<std::int64_t>() < 0)) {
      errors.push_back(path + "." + key + ": expected " + (std::is_unsigned_v<T> ? "a non-negative integer" : "an integer"));
      return;
    }
    out = v.get<T>();
  }

  void number(const Json& j, const std::string& path, const char* key, double& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) {
      errors.push_back(path + "." + key + ": expected a number");
      return;
    }
    out = j[key].get<double>();
  }

  void boolean(const Json& j, const std::string& path, const char* key, bool& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_boolean()) {
      errors.push_back(path + "." + key + ": expected true or false");
      return;
    }
    out = j[key].get<bool>();
  }

  void string(const Json& j, const std::string& path, const char* key, std::string& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_string()) {
      errors.push_back(path + "." + key + ": expected a string");
      return;
    }
    out = j[key].get<std::string>();
  }

  template <class E, class Parse>
  void enumeration(const Json& j, const std::string& path, const char* key, E& out, Parse parse) {
    std::string s;
    const auto before = errors.size();
    string(j, path, key, s);
    if (!j.contains(key) || errors.size() != before) return;
    try {
      out = parse(s);
    } catch (const std::exception& e) {
      errors.push_back(path + "." + key + ": " + e.what());
    }
  }

  template <class E, class Parse>
  void enum_list(const Json& j, const std::string& path, const char* key, std::vector<E>& out, Parse parse) {
    if (!j.contains(key)) return;
    if (!j[key].is_array()) {
      errors.push_back(path + "." + key + ": expected an array of strings");
      return;
    }
    std::vector<E> v;
    for (std::size_t i = 0; i < j[key].size(); ++i) {
      const auto& item = j[key][i];
      const auto where = path + "." + key + "[" + std::to_string(i) + "]";
      if (!item.is_string()) {
        errors.push_back(where + ": expected a string");
        continue;
      }
      try {
        v.push_back(parse(item.get<std::string>()));
      } catch (const std::exception& e) {
        errors.push_back(where + ": " + e.what());
      }
    }
    out = v;
  }

  // Runs a validator and records its message under `path`.
  template <class F>
  void check(const std::string& path, F&& f) {
    try {
      f();
    } catch (const std::exception& e) {
      errors.push_back(path + ": " + e.what());
    }
  }
};

void read_train(Reader& r, const Json& j, const std::string& path, TrainConfig& c, bool with_seed = false) {
  std::vector<std::string> keys{"optimizer", "schedule",   "warmup_epochs",    "warmup_start_factor", "batch_size",
                                "max_epochs", "patience", "trainable_blocks", "flip_augment"};
  if (with_seed) keys.push_back("seed");
  if (!r.object(j, path, keys)) return;
  if (with_seed) r.integer(j, path, "seed", c.seed);
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    const auto op = path + ".optimizer";
    if (r.object(o, op, {"kind", "lr", "beta1", "beta2", "eps", "weight_decay"})) {
      r.enumeration(o, op, "kind", c.optimizer.kind, optimizer_kind_from_string);
      r.number(o, op, "lr", c.optimizer.lr);
      r.number(o, op, "beta1", c.optimizer.beta1);
      r.number(o, op, "beta2", c.optimizer.beta2);
      r.number(o, op, "eps", c.optimizer.eps);
      r.number(o, op, "weight_decay", c.optimizer.weight_decay);
    }
  }
  r.enumeration(j, path, "schedule", c.schedule, schedule_kind_from_string);
  r.integer(j, path, "warmup_epochs", c.warmup_epochs);
  r.number(j, path, "warmup_start_factor", c.warmup_start_factor);
  r.integer(j, path, "batch_size", c.batch_size);
  r.integer(j, path, "max_epochs", c.max_epochs);
  r.integer(j, path, "patience", c.patience);
  r.integer(j, path, "trainable_blocks", c.trainable_blocks);
  r.boolean(j, path, "flip_augment", c.flip_augment);
}

void read_split(Reader& r, const Json& j, const std::string& path, SplitProtocol& p) {
  if (!r.object(j, path, {"protocol", "train_fraction", "valid_fraction", "holdout", "seed"})) return;
  r.enumeration(j, path, "protocol", p.kind, split_kind_from_string);
  r.number(j, path, "train_fraction", p.train_fraction);
  r.number(j, path, "valid_fraction", p.valid_fraction);
  r.string(j, path, "holdout", p.holdout);
  r.integer(j, path, "seed", p.seed);
}

void read_model(Reader& r, const Json& j, const std::string& path, ModelConfig& c) {
  if (!r.object(j, path, {"image_size", "channels", "patch_size", "embed_dim", "num_layers", "num_heads", "head_dim",
                          "mlp_hidden", "num_classes", "pooling", "use_cls_token"})) {
    return;
  }
  r.check(path, [&] { c = model_config_from_json(j); });
}

Json sites_json(const std::vector<Site>& sites) {
  Json a = Json::array();
  for (auto s : sites) a.push_back(to_string(s));
  return a;
}

DataSourceKind data_source_from_string(const std::string& s) {
  if (s == "synthetic") return DataSourceKind::kSynthetic;
  if (s == "folder") return DataSourceKind::kFolder;
  throw std::invalid_argument("unknown data source '" + s + "' (expected synthetic|folder)");
}

}  // namespace

std::string to_string(DataSourceKind k) { return k == DataSourceKind::kSynthetic ? "synthetic" : "folder"; }

// ---------------------------------------------------------------------------
// Experiment config

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.data.synthetic.images_per_domain = 400;
  c.dg.optimizer.lr = 1e-3;
  c.dg.optimizer.weight_decay = 0.0;
  c.dg.patience = 8;
  c.postprune.max_epochs = 20;
  return c;
}

TrainConfig ExperimentConfig::dg_config() const {
  auto t = dg;
  t.phase = Phase::kDgFinetune;
  t.seed = seeds.train;
  return t;
}

TrainConfig ExperimentConfig::postprune_config() const {
  auto t = postprune;
  t.phase = Phase::kPostpruneFinetune;
  t.seed = seeds.train;
  return t;
}

SplitProtocol ExperimentConfig::split_protocol() const {
  auto p = split;
  p.seed = seeds.split;
  return p;
}

PruneSpec ExperimentConfig::prune_spec(Criterion criterion, double ratio) const {
  PruneSpec s;
  s.ratio = ratio;
  s.criterion = criterion;
  s.sites = prune.sites;
  s.min_heads = prune.min_heads;
  s.min_mlp = prune.min_mlp;
  s.min_embed = prune.min_embed;
  s.seed = seeds.prune;
  return s;
}

void ExperimentConfig::validate() const {
  Reader r;
  if (name.empty() || name.find_first_of("/\\ ") != std::string::npos) {
    r.errors.push_back("name: must be non-empty without spaces or slashes");
  }
  r.check("model", [&] { model.validate(); });
  if (data.kind == DataSourceKind::kSynthetic) {
    r.check("data.synthetic", [&] { data.synthetic.validate(); });
    if (data.synthetic.image_size != model.image_size) {
      r.errors.push_back("data.synthetic.image_size: must equal model.image_size (" +
                         std::to_string(model.image_size) + ")");
    }
    if (data.synthetic.classes != model.num_classes) {
      r.errors.push_back("data.synthetic.classes: must equal model.num_classes (" +
                         std::to_string(model.num_classes) + ")");
    }
    if (model.channels != 3) r.errors.push_back("model.channels: synthetic data is RGB, expected 3");
    if (split.kind == SplitKind::kLeaveOneDomainOut && data.synthetic.domains > 0) {
      const auto& names = synth_domain_names();
      const auto end = names.begin() + std::min<std::size_t>(names.size(), data.synthetic.domains);
      if (std::find(names.begin(), end, split.holdout) == end) {
        r.errors.push_back("split.holdout: '" + split.holdout + "' is not a synthetic domain");
      }
    }
  } else if (data.folder_root.empty()) {
    r.errors.push_back("data.folder.root: required for folder data");
  }
  r.check("split", [&] { split.validate(); });
  r.check("dg_finetune", [&] { dg.validate(); });
  r.check("postprune_finetune", [&] { postprune.validate(); });
  if (prune.criteria.empty()) r.errors.push_back("prune.criteria: must not be empty");
  if (prune.ratios.empty()) r.errors.push_back("prune.ratios: must not be empty");
  for (double x : prune.ratios) {
    if (!(x >= 0.0 && x < 1.0)) r.errors.push_back("prune.ratios: " + std::to_string(x) + " outside [0, 1)");
  }
  if (std::set<double>(prune.ratios.begin(), prune.ratios.end()).size() != prune.ratios.size()) {
    r.errors.push_back("prune.ratios: duplicate entries");
  }
  if (std::set<Criterion>(prune.criteria.begin(), prune.criteria.end()).size() != prune.criteria.size()) {
    r.errors.push_back("prune.criteria: duplicate entries");
  }
  r.check("prune", [&] { prune_spec(Criterion::kL1, 0.0).validate(); });
  if (prune.calibration_batches < 1) r.errors.push_back("prune.calibration_batches: must be >= 1");
  if (prune.calibration_batch_size < 1) r.errors.push_back("prune.calibration_batch_size: must be >= 1");
  if (prune.speedup_trials != 0 && prune.speedup_trials < 5) {
    r.errors.push_back("prune.speedup_trials: must be 0 (skip) or >= 5");
  }
  if (attention.layer < -1 || attention.layer >= model.num_layers) {
    r.errors.push_back("attention.layer: must be -1 or in [0, " + std::to_string(model.num_layers) + ")");
  }
  if (attention.images < 1) r.errors.push_back("attention.images: must be >= 1");
  if (attention.maps < 0) r.errors.push_back("attention.maps: must be >= 0");
  if (!r.errors.empty()) {
    std::string msg = "invalid experiment config:";
    for (const auto& e : r.errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
}

PruneJob prune_job(const ExperimentConfig& c, Criterion criterion, double ratio) {
  PruneJob job;
  job.spec = c.prune_spec(criterion, ratio);
  job.aggregation = c.prune.aggregation;
  job.calibration_batches = c.prune.calibration_batches;
  job.calibration_batch_size = c.prune.calibration_batch_size;
  job.speedup_trials = c.prune.speedup_trials;
  return job;
}

Json experiment_section(const ExperimentConfig& c, const std::string& section) {
  if (section == "model") return Json(c.model);
  if (section == "split") return to_json(c.split_protocol());
  if (section == "dg_finetune" || section == "postprune_finetune") {
    const auto t = section == "dg_finetune" ? c.dg_config() : c.postprune_config();
    auto j = to_json(t);
    j["seed"] = t.seed;
    return j;
  }
  throw std::invalid_argument("unknown config section '" + section +
                              "' (expected model|split|dg_finetune|postprune_finetune)");
}

Json to_json(const TrainConfig& c) {
  return Json{{"optimizer",
               {{"kind", to_string(c.optimizer.kind)},
                {"lr", c.optimizer.lr},
                {"beta1", c.optimizer.beta1},
                {"beta2", c.optimizer.beta2},
                {"eps", c.optimizer.eps},
                {"weight_decay", c.optimizer.weight_decay}}},
              {"schedule", to_string(c.schedule)},
              {"warmup_epochs", c.warmup_epochs},
              {"warmup_start_factor", c.warmup_start_factor},
              {"batch_size", c.batch_size},
              {"max_epochs", c.max_epochs},
              {"patience", c.patience},
              {"trainable_blocks", c.trainable_blocks},
              {"flip_augment", c.flip_augment}};
}

TrainConfig train_config_from_json(const Json& j, Phase phase) {
  Reader r;
  auto c = phase == Phase::kDgFinetune ? TrainConfig::dg_default() : TrainConfig::postprune_default();
  read_train(r, j, "train", c, true);
  if (r.errors.empty()) r.check("train", [&] { c.validate(); });
  if (!r.errors.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& e : r.errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  return c;
}

Json to_json(const SplitProtocol& p) {
  return Json{{"protocol", to_string(p.kind)},
              {"train_fraction", p.train_fraction},
              {"valid_fraction", p.valid_fraction},
              {"holdout", p.holdout},
              {"seed", p.seed}};
}

SplitProtocol split_protocol_from_json(const Json& j) {
  Reader r;
  SplitProtocol p;
  read_split(r, j, "split", p);
  if (r.errors.empty()) r.check("split", [&] { p.validate(); });
  if (!r.errors.empty()) {
    std::string msg = "invalid split protocol:";
    for (const auto& e : r.errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  return p;
}

Json to_json(const ExperimentConfig& c) {
  Json criteria = Json::array();
  for (auto x : c.prune.criteria) criteria.push_back(to_string(x));
  auto split = to_json(c.split);
  split.erase("seed");
  return Json{
      {"name", c.name},
      {"model", c.model},
      {"data",
       {{"source", to_string(c.data.kind)},
        {"synthetic",
         {{"classes", c.data.synthetic.classes},
          {"domains", c.data.synthetic.domains},
          {"images_per_domain", c.data.synthetic.images_per_domain},
          {"image_size", c.data.synthetic.image_size}}},
        {"folder", {{"root", c.data.folder_root}}}}},
      {"split", split},
      {"dg_finetune", to_json(c.dg)},
      {"postprune_finetune", to_json(c.postprune)},
      {"prune",
       {{"criteria", criteria},
        {"ratios", c.prune.ratios},
        {"sites", sites_json(c.prune.sites)},
        {"min_heads", c.prune.min_heads},
        {"min_mlp", c.prune.min_mlp},
        {"min_embed", c.prune.min_embed},
        {"aggregation", to_string(c.prune.aggregation)},
        {"calibration_batches", c.prune.calibration_batches},
        {"calibration_batch_size", c.prune.calibration_batch_size},
        {"speedup_trials", c.prune.speedup_trials}}},
      {"attention", {{"layer", c.attention.layer}, {"images", c.attention.images}, {"maps", c.attention.maps}}},
      {"seeds",
       {{"data", c.seeds.data},
        {"init", c.seeds.init},
        {"split", c.seeds.split},
        {"train", c.seeds.train},
        {"prune", c.seeds.prune}}},
      {"out_dir", c.out_dir}};
}

ExperimentConfig experiment_from_json(const Json& j) {
  Reader r;
  auto c = ExperimentConfig::defaults();
  if (r.object(j, "config", {"name", "model", "data", "split", "dg_finetune", "postprune_finetune", "prune",
                             "attention", "seeds", "out_dir"})) {
    r.string(j, "config", "name", c.name);
    r.string(j, "config", "out_dir", c.out_dir);
    if (j.contains("model")) read_model(r, j["model"], "model", c.model);
    if (j.contains("data") && r.object(j["data"], "data", {"source", "synthetic", "folder"})) {
      const auto& d = j["data"];
      r.enumeration(d, "data", "source", c.data.kind, data_source_from_string);
      if (d.contains("synthetic") &&
          r.object(d["synthetic"], "data.synthetic", {"classes", "domains", "images_per_domain", "image_size"})) {
        const auto& s = d["synthetic"];
        r.integer(s, "data.synthetic", "classes", c.data.synthetic.classes);
        r.integer(s, "data.synthetic", "domains", c.data.synthetic.domains);
        r.integer(s, "data.synthetic", "images_per_domain", c.data.synthetic.images_per_domain);
        r.integer(s, "data.synthetic", "image_size", c.data.synthetic.image_size);
      }
      if (d.contains("folder") && r.object(d["folder"], "data.folder", {"root"})) {
        r.string(d["folder"], "data.folder", "root", c.data.folder_root);
      }
    }
    if (j.contains("split")) {
      read_split(r, j["split"], "split", c.split);
      if (j["split"].is_object() && j["split"].contains("seed")) r.errors.push_back("split.seed: set seeds.split instead");
    }
    if (j.contains("dg_finetune")) read_train(r, j["dg_finetune"], "dg_finetune", c.dg);
    if (j.contains("postprune_finetune")) read_train(r, j["postprune_finetune"], "postprune_finetune", c.postprune);
    if (j.contains("prune") &&
        r.object(j["prune"], "prune", {"criteria", "ratios", "sites", "min_heads", "min_mlp", "min_embed",
                                       "aggregation", "calibration_batches", "calibration_batch_size",
                                       "speedup_trials"})) {
      const auto& p = j["prune"];
      r.enum_list(p, "prune", "criteria", c.prune.criteria, criterion_from_string);
      r.enum_list(p, "prune", "sites", c.prune.sites, site_from_string);
      if (p.contains("ratios")) {
        if (!p["ratios"].is_array() ||
            !std::all_of(p["ratios"].begin(), p["ratios"].end(), [](const Json& x) { return x.is_number(); })) {
          r.errors.push_back("prune.ratios: expected an array of numbers");
        } else {
          c.prune.ratios = p["ratios"].get<std::vector<double>>();
        }
      }
      r.integer(p, "prune", "min_heads", c.prune.min_heads);
      r.integer(p, "prune", "min_mlp", c.prune.min_mlp);
      r.integer(p, "prune", "min_embed", c.prune.min_embed);
      r.enumeration(p, "prune", "aggregation", c.prune.aggregation, aggregation_from_string);
      r.integer(p, "prune", "calibration_batches", c.prune.calibration_batches);
      r.integer(p, "prune", "calibration_batch_size", c.prune.calibration_batch_size);
      r.integer(p, "prune", "speedup_trials", c.prune.speedup_trials);
    }
    if (j.contains("attention") && r.object(j["attention"], "attention", {"layer", "images", "maps"})) {
      r.integer(j["attention"], "attention", "layer", c.attention.layer);
      r.integer(j["attention"], "attention", "images", c.attention.images);
      r.integer(j["attention"], "attention", "maps", c.attention.maps);
    }
    if (j.contains("seeds") && r.object(j["seeds"], "seeds", {"data", "init", "split", "train", "prune"})) {
      const auto& s = j["seeds"];
      r.integer(s, "seeds", "data", c.seeds.data);
      r.integer(s, "seeds", "init", c.seeds.init);
      r.integer(s, "seeds", "split", c.seeds.split);
      r.integer(s, "seeds", "train", c.seeds.train);
      r.integer(s, "seeds", "prune", c.seeds.prune);
    }
  }
  if (r.errors.empty()) {
    c.validate();
    return c;
  }
  // Report parse errors together with whatever semantic errors remain.
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    std::string rest = e.what();
    const auto nl = rest.find('\n');
    if (nl != std::string::npos) r.errors.push_back(rest.substr(nl + 3));
  }
  std::string msg = "invalid experiment config:";
  for (const auto& e : r.errors) msg += "\n  " + e;
  throw std::invalid_argument(msg);
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' is not of the form key=value");
  }
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json result = doc;
  Json* node = &result;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw std::invalid_argument("override key '" + key + "' has an empty component");
    if (!node->is_object()) {
      if (!node->is_null()) throw std::invalid_argument("override key '" + key + "' descends into a non-object");
      *node = Json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      doc = std::move(result);
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

DomainDataset load_dataset(const ExperimentConfig& c) {
  if (c.data.kind == DataSourceKind::kSynthetic) return synth_generate(c.data.synthetic, c.seeds.data);
  auto d = ingest_folder(c.data.folder_root, c.model.image_size, c.model.channels);
  if (static_cast<std::int64_t>(d.classes.size()) != c.model.num_classes) {
    throw std::invalid_argument("folder dataset has " + std::to_string(d.classes.size()) +
                                " classes, model.num_classes is " + std::to_string(c.model.num_classes));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Pruning pipeline

std::vector<Batch> calibration_batches(const DomainDataset& data, std::span<const std::size_t> indices, int count,
                                       int batch_size, std::uint64_t seed) {
  if (count < 1 || batch_size < 1) throw std::invalid_argument("calibration: count and batch size must be >= 1");
  if (indices.empty()) throw std::invalid_argument("calibration: empty index set");
  std::vector<std::size_t> pool(indices.begin(), indices.end());
  Rng rng(derive_seed(seed, "calibration"));
  rng.shuffle(pool);
  std::vector<Batch> out;
  std::size_t pos = 0;
  for (int b = 0; b < count && pos < pool.size(); ++b) {
    const auto n = std::min<std::size_t>(batch_size, pool.size() - pos);
    std::vector<std::size_t> idx(pool.begin() + pos, pool.begin() + pos + n);
    pos += n;
    out.push_back({data.images(idx), data.labels(idx)});
  }
  return out;
}

PruneOutcome prune_model(const TransformerModel& model, const DomainDataset& data, const Splits& splits,
                         const PruneJob& job) {
  job.spec.validate();
  if (job.speedup_trials != 0 && job.speedup_trials < 5) {
    throw std::invalid_argument("speedup_trials must be 0 or >= 5");
  }
  const auto graph = build_graph(model);
  ScoringOptions opts;
  opts.criterion = job.spec.criterion;
  opts.aggregation = job.aggregation;
  opts.seed = job.spec.seed;
  opts.sites = job.spec.sites;
  std::vector<Batch> calib;
  if (job.spec.criterion == Criterion::kTaylor || job.spec.criterion == Criterion::kHessian) {
    calib = calibration_batches(data, splits.train, job.calibration_batches, job.calibration_batch_size, job.spec.seed);
  }
  PruneOutcome out;
  out.scores = score_groups(graph, model, opts, calib);
  out.plan = plan_prune(graph, out.scores, job.spec);
  out.model = apply_prune(model, out.plan);
  out.report = make_report(out.plan, job.spec);
  if (job.speedup_trials > 0) {
    const auto& pool = splits.valid.empty() ? splits.train : splits.valid;
    std::vector<std::size_t> idx(pool.begin(), pool.begin() + std::min<std::size_t>(pool.size(), 8));
    out.report.measured_speedup = measure_speedup(model, out.model, data.images(idx), job.speedup_trials);
  }
  return out;
}

Json to_json(const PruneJob& job) {
  return Json{{"ratio", job.spec.ratio},
              {"criterion", to_string(job.spec.criterion)},
              {"sites", sites_json(job.spec.sites)},
              {"min_heads", job.spec.min_heads},
              {"min_mlp", job.spec.min_mlp},
              {"min_embed", job.spec.min_embed},
              {"seed", job.spec.seed},
              {"aggregation", to_string(job.aggregation)},
              {"calibration_batches", job.calibration_batches},
              {"calibration_batch_size", job.calibration_batch_size},
              {"speedup_trials", job.speedup_trials}};
}

PruneJob prune_job_from_json(const Json& j) {
  Reader r;
  PruneJob job;
  if (r.object(j, "prune", {"ratio", "criterion", "sites", "min_heads", "min_mlp", "min_embed", "seed", "aggregation",
                            "calibration_batches", "calibration_batch_size", "speedup_trials"})) {
    r.number(j, "prune", "ratio", job.spec.ratio);
    r.enumeration(j, "prune", "criterion", job.spec.criterion, criterion_from_string);
    r.enum_list(j, "prune", "sites", job.spec.sites, site_from_string);
    r.integer(j, "prune", "min_heads", job.spec.min_heads);
    r.integer(j, "prune", "min_mlp", job.spec.min_mlp);
    r.integer(j, "prune", "min_embed", job.spec.min_embed);
    r.integer(j, "prune", "seed", job.spec.seed);
    r.enumeration(j, "prune", "aggregation", job.aggregation, aggregation_from_string);
    r.integer(j, "prune", "calibration_batches", job.calibration_batches);
    r.integer(j, "prune", "calibration_batch_size", job.calibration_batch_size);
    r.integer(j, "prune", "speedup_trials", job.speedup_trials);
  }
  if (r.errors.empty()) r.check("prune", [&] { job.spec.validate(); });
  if (!r.errors.empty()) {
    std::string msg = "invalid prune job:";
    for (const auto& e : r.errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  return job;
}

}  // namespace vp
