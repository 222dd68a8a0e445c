#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitprune/tensor.hpp"

namespace vp {

enum class OptimizerKind { kAdam, kAdamW };
enum class ScheduleKind { kConstant, kCosine };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Adam adds decay to the gradient (L2); AdamW applies it decoupled.
  double weight_decay = 0.0;
};

/// Learning-rate multiplier per step. Cosine runs from 1 down to 0 over
/// `total_steps`, after a linear warmup that starts at `warmup_start_factor`.
struct LrSchedule {
  ScheduleKind kind = ScheduleKind::kConstant;
  std::int64_t total_steps = 0;
  std::int64_t warmup_steps = 0;
  double warmup_start_factor = 0.033;

  double factor(std::int64_t step) const;
};

/// Adam / AdamW over a fixed parameter list. Parameters are updated in place.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerConfig config, LrSchedule schedule = {});

  /// Applies one update. Every parameter must carry a grad buffer.
  void step();
  void zero_grad();

  std::int64_t steps_taken() const { return step_; }
  double current_lr() const;
  const OptimizerConfig& config() const { return config_; }

 private:
  std::vector<Tensor> params_;
  OptimizerConfig config_;
  LrSchedule schedule_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t step_ = 0;
};

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& s);

}  // namespace vp
