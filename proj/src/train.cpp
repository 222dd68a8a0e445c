#include "vitprune/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "vitprune/random.hpp"

namespace vp {

// ---------------------------------------------------------------------------
// Metrics

double macro_precision(const std::vector<std::vector<std::int64_t>>& confusion) {
  const std::size_t k = confusion.size();
  if (k == 0) return 0.0;
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::int64_t predicted = 0;
    for (std::size_t t = 0; t < k; ++t) predicted += confusion[t][c];
    if (predicted > 0) total += static_cast<double>(confusion[c][c]) / static_cast<double>(predicted);
  }
  return total / static_cast<double>(k);
}

bool in_top_k(std::span<const double> logits, int label, int k) {
  const double mine = logits[label];
  int greater = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (logits[j] > mine || (k == 1 && logits[j] == mine && static_cast<int>(j) < label)) ++greater;
  }
  return greater < k;
}

SplitMetrics compute_metrics(const Tensor& logits, std::span<const int> labels, std::span<const int> domains,
                             const std::vector<std::string>& domain_names) {
  if (logits.shape().size() != 2) throw ShapeError("compute_metrics: logits must be [n, classes], got " + shape_str(logits.shape()));
  const auto n = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n) throw std::invalid_argument("compute_metrics: label count mismatch");
  if (!domains.empty() && static_cast<std::int64_t>(domains.size()) != n) {
    throw std::invalid_argument("compute_metrics: domain count mismatch");
  }
  SplitMetrics m;
  m.count = n;
  m.confusion.assign(k, std::vector<std::int64_t>(k, 0));
  std::vector<DomainMetrics> dom(domain_names.size());
  for (std::size_t d = 0; d < dom.size(); ++d) dom[d].name = domain_names[d];
  const auto data = logits.data();
  std::int64_t c1 = 0, c5 = 0;
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::span<const double> row(data.data() + i * k, k);
    const int y = labels[i];
    if (y < 0 || y >= k) throw std::invalid_argument("compute_metrics: label " + std::to_string(y) + " out of range");
    const int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    const double mx = row[pred];
    double se = 0.0;
    for (double v : row) se += std::exp(v - mx);
    const double li = mx + std::log(se) - row[y];
    const bool hit = pred == y;
    c1 += hit;
    c5 += in_top_k(row, y, 5);
    loss += li;
    ++m.confusion[y][pred];
    if (!domains.empty() && !dom.empty()) {
      auto& d = dom.at(domains[i]);
      ++d.count;
      d.top1 += hit;
      d.loss += li;
    }
  }
  if (n > 0) {
    m.top1 = static_cast<double>(c1) / n;
    m.top5 = static_cast<double>(c5) / n;
    m.loss = loss / n;
  }
  m.precision = macro_precision(m.confusion);
  for (auto& d : dom) {
    if (d.count) {
      d.top1 /= d.count;
      d.loss /= d.count;
    }
  }
  m.per_domain = std::move(dom);
  return m;
}

Json SplitMetrics::to_json() const {
  Json dom = Json::object();
  for (const auto& d : per_domain) dom[d.name] = {{"count", d.count}, {"top1", d.top1}, {"loss", d.loss}};
  return Json{{"count", count},     {"top1", top1},         {"top5", top5},          {"loss", loss},
              {"precision", precision}, {"per_domain", dom}, {"confusion", confusion}};
}

SplitMetrics evaluate(const TransformerModel& model, const DomainDataset& data, std::span<const std::size_t> indices,
                      std::int64_t batch_size) {
  if (indices.empty()) throw std::invalid_argument("evaluate: empty split");
  NoGradGuard guard;
  const auto k = model.config().num_classes;
  std::vector<double> all;
  all.reserve(indices.size() * k);
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto part = indices.subspan(start, std::min<std::size_t>(batch_size, indices.size() - start));
    const auto out = model.forward(data.images(part));
    all.insert(all.end(), out.data().begin(), out.data().end());
  }
  std::vector<int> domains;
  for (auto i : indices) domains.push_back(data.samples[i].domain);
  const auto logits = Tensor::from_data({static_cast<std::int64_t>(indices.size()), k}, std::move(all));
  return compute_metrics(logits, data.labels(indices), domains, data.domains);
}

// ---------------------------------------------------------------------------
// Training

std::string to_string(Phase p) { return p == Phase::kDgFinetune ? "dg_finetune" : "postprune_finetune"; }

Phase phase_from_string(const std::string& s) {
  if (s == "dg_finetune") return Phase::kDgFinetune;
  if (s == "postprune_finetune") return Phase::kPostpruneFinetune;
  throw std::invalid_argument("unknown training phase '" + s + "' (expected dg_finetune|postprune_finetune)");
}

TrainConfig TrainConfig::dg_default() {
  TrainConfig c;
  c.phase = Phase::kDgFinetune;
  c.optimizer = {OptimizerKind::kAdam, 5e-5, 0.9, 0.999, 1e-8, 0.05};
  c.schedule = ScheduleKind::kConstant;
  return c;
}

TrainConfig TrainConfig::postprune_default() {
  TrainConfig c;
  c.phase = Phase::kPostpruneFinetune;
  c.optimizer = {OptimizerKind::kAdamW, 1.5e-4, 0.9, 0.999, 1e-8, 0.3};
  c.schedule = ScheduleKind::kCosine;
  c.warmup_epochs = 2;
  c.trainable_blocks = -1;
  return c;
}

void TrainConfig::validate() const {
  std::vector<std::string> errors;
  if (batch_size < 1) errors.push_back("batch_size must be >= 1");
  if (patience < 1) errors.push_back("patience must be >= 1");
  if (max_epochs < 0) errors.push_back("max_epochs must be >= 0");
  if (warmup_epochs < 0) errors.push_back("warmup_epochs must be >= 0");
  if (!(optimizer.lr > 0)) errors.push_back("lr must be positive");
  if (optimizer.weight_decay < 0) errors.push_back("weight_decay must be >= 0");
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1)) {
    errors.push_back("betas must be in [0, 1)");
  }
  if (trainable_blocks < -1) errors.push_back("trainable_blocks must be >= -1");
  if (!(warmup_start_factor > 0 && warmup_start_factor <= 1)) errors.push_back("warmup_start_factor must be in (0, 1]");
  if (!errors.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw std::invalid_argument(msg);
  }
}

std::vector<ParamKey> trainable_keys(const ModelConfig& config, int trainable_blocks) {
  std::vector<ParamKey> keys;
  const bool all = trainable_blocks < 0 || trainable_blocks >= config.num_layers;
  const auto first = config.num_layers - trainable_blocks;
  for (const auto& [key, shape] : TransformerModel::expected_shapes(config)) {
    const bool tail = key.component == Component::kFinalLn || key.component == Component::kHead;
    if (all || tail || (key.layer >= 0 && key.layer >= first)) keys.push_back(key);
  }
  return keys;
}

TrainResult train(const TransformerModel& model, const DomainDataset& data, const Splits& splits,
                  const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  if (splits.train.empty() || splits.valid.empty()) throw std::invalid_argument("train: train and valid splits must be non-empty");
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult result;
  result.best = model.clone();
  if (config.max_epochs == 0) return result;

  TransformerModel work = model.clone();
  for (auto& [key, t] : work.mutable_params()) t.set_requires_grad(false);
  std::vector<Tensor> params;
  for (const auto& key : trainable_keys(work.config(), config.trainable_blocks)) {
    auto& t = work.param(key);
    t.set_requires_grad(true);
    params.push_back(t);
  }
  const auto steps_per_epoch =
      static_cast<std::int64_t>((splits.train.size() + config.batch_size - 1) / config.batch_size);
  LrSchedule schedule;
  schedule.kind = config.schedule;
  schedule.total_steps = steps_per_epoch * config.max_epochs;
  schedule.warmup_steps = steps_per_epoch * config.warmup_epochs;
  schedule.warmup_start_factor = config.warmup_start_factor;
  Optimizer opt(params, config.optimizer, schedule);

  Rng rng(derive_seed(config.seed, "train/" + to_string(config.phase)));
  std::vector<std::size_t> order = splits.train;
  const auto k = work.config().num_classes;
  int stale = 0;
  result.best_valid_loss = std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(order);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.current_lr();
    std::vector<double> seen_logits;
    std::vector<int> seen_labels, seen_domains;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min<std::size_t>(config.batch_size, order.size() - start));
      std::vector<bool> flip(idx.size(), false);
      if (config.flip_augment) {
        for (std::size_t i = 0; i < idx.size(); ++i) flip[i] = rng.bernoulli(0.5);
      }
      const auto labels = data.labels(idx);
      Tensor logits;
      try {
        logits = work.forward(data.images(idx, &flip));
        Tensor loss = cross_entropy(logits, labels);
        if (!std::isfinite(loss.item())) throw NumericError("non-finite loss");
        opt.zero_grad();
        backward(loss, params);
        opt.step();
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      seen_logits.insert(seen_logits.end(), logits.data().begin(), logits.data().end());
      seen_labels.insert(seen_labels.end(), labels.begin(), labels.end());
      for (auto i : idx) seen_domains.push_back(data.samples[i].domain);
    }
    for (auto& t : params) t.clear_grad();
    rec.train = compute_metrics(Tensor::from_data({static_cast<std::int64_t>(seen_labels.size()), k}, std::move(seen_logits)),
                                seen_labels, seen_domains, data.domains);
    rec.valid = evaluate(work, data, splits.valid);
    if (!splits.test.empty()) rec.test = evaluate(work, data, splits.test);
    if (!std::isfinite(rec.valid.loss)) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": non-finite validation loss");
    }
    result.curves.push_back(rec);
    result.epochs_run = epoch;
    if (on_epoch) on_epoch(rec);

    if (rec.valid.loss < result.best_valid_loss) {
      result.best_valid_loss = rec.valid.loss;
      result.best_epoch = epoch;
      result.best = work.clone();
      stale = 0;
    } else if (++stale >= config.patience) {
      result.early_stopped = true;
      break;
    }
  }
  for (auto& [key, t] : result.best.mutable_params()) t.set_requires_grad(false);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

std::string curves_to_csv(std::span<const EpochRecord> curves) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,split,loss,top1,top5\n";
  for (const auto& r : curves) {
    for (const auto& [name, m] : {std::pair<const char*, const SplitMetrics*>{"train", &r.train},
                                  {"valid", &r.valid},
                                  {"test", &r.test}}) {
      if (m->count == 0) continue;
      os << r.epoch << ',' << name << ',' << m->loss << ',' << m->top1 << ',' << m->top5 << '\n';
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Reports

std::optional<double> EvalReport::gap() const {
  auto v = splits.find("valid");
  auto t = splits.find("test");
  if (v == splits.end() || t == splits.end()) return std::nullopt;
  return v->second.top1 - t->second.top1;
}

std::optional<double> EvalReport::delta_acc() const {
  auto t = splits.find("test");
  if (!baseline_test_top1 || t == splits.end()) return std::nullopt;
  return t->second.top1 - *baseline_test_top1;
}

Json EvalReport::to_json() const {
  Json j;
  Json s = Json::object();
  for (const auto& [name, m] : splits) s[name] = m.to_json();
  j["splits"] = s;
  j["gap"] = gap() ? Json(*gap()) : Json(nullptr);
  auto t = splits.find("test");
  j["precision"] = t != splits.end() ? Json(t->second.precision) : Json(nullptr);
  j["delta_acc"] = delta_acc() ? Json(*delta_acc()) : Json(nullptr);
  j["baseline_test_top1"] = baseline_test_top1 ? Json(*baseline_test_top1) : Json(nullptr);
  j["top5_low_information"] = num_classes <= 10;
  Json timing = Json::object();
  if (finetune_seconds) {
    timing["finetune_seconds"] = *finetune_seconds;
    timing["finetune_time"] = format_hms(*finetune_seconds);
  }
  j["timing"] = timing;
  return j;
}

EvalReport evaluate_report(const TransformerModel& model, const DomainDataset& data, const Splits& splits,
                           std::optional<double> baseline_test_top1) {
  EvalReport r;
  r.num_classes = model.config().num_classes;
  if (!splits.train.empty()) r.splits["train"] = evaluate(model, data, splits.train);
  if (!splits.valid.empty()) r.splits["valid"] = evaluate(model, data, splits.valid);
  if (!splits.test.empty()) r.splits["test"] = evaluate(model, data, splits.test);
  r.baseline_test_top1 = baseline_test_top1;
  return r;
}

}  // namespace vp
