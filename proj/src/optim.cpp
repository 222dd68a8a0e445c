#include "vitprune/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace vp {

double LrSchedule::factor(std::int64_t step) const {
  if (kind == ScheduleKind::kConstant) return 1.0;
  if (step < warmup_steps && warmup_steps > 0) {
    const double t = static_cast<double>(step) / static_cast<double>(warmup_steps);
    return warmup_start_factor + (1.0 - warmup_start_factor) * t;
  }
  const std::int64_t span = total_steps - warmup_steps;
  if (span <= 0) return 1.0;
  const double t = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

Optimizer::Optimizer(std::vector<Tensor> params, OptimizerConfig config, LrSchedule schedule)
    : params_(std::move(params)), config_(config), schedule_(schedule) {
  if (!(config_.lr >= 0.0) || config_.beta1 < 0.0 || config_.beta1 >= 1.0 || config_.beta2 < 0.0 ||
      config_.beta2 >= 1.0 || config_.eps <= 0.0 || config_.weight_decay < 0.0) {
    throw std::invalid_argument("optimizer: hyperparameters out of range");
  }
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

double Optimizer::current_lr() const { return config_.lr * schedule_.factor(step_); }

void Optimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw std::logic_error("optimizer: parameter " + std::to_string(i) + " of shape " +
                             shape_str(params_[i].shape()) + " has no gradient");
    }
  }
  const double lr = current_lr();
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  const double wd = config_.weight_decay;
  const bool decoupled = config_.kind == OptimizerKind::kAdamW;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_data();
    auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      double gj = g[j];
      if (!decoupled) gj += wd * w[j];
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      if (decoupled) w[j] -= lr * wd * w[j];
      w[j] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdam ? "adam" : "adamw"; }

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "adamw") return OptimizerKind::kAdamW;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected adam|adamw)");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::kConstant ? "constant" : "cosine"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "constant") return ScheduleKind::kConstant;
  if (s == "cosine") return ScheduleKind::kCosine;
  throw std::invalid_argument("unknown schedule '" + s + "' (expected constant|cosine)");
}

}  // namespace vp
