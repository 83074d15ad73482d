#include "vlmkd/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "vlmkd/error.hpp"

namespace vlmkd {

double lr_at(const LrSchedule& schedule, std::size_t step) {
  if (schedule.total_steps == 0) throw ConfigError("schedule total_steps must be positive");
  if (!(schedule.base_lr > 0.0)) throw ConfigError("schedule base_lr must be positive");
  if (step > schedule.total_steps) {
    throw RangeError("step " + std::to_string(step) + " outside schedule [0, " +
                     std::to_string(schedule.total_steps) + "]");
  }
  if (schedule.kind == ScheduleKind::Constant) return schedule.base_lr;
  if (step == schedule.total_steps) return 0.0;
  const double t = static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return schedule.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void sgd_step(ParamStore& store, double lr, double momentum, double weight_decay) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive, got " + std::to_string(lr));
  for (auto& [name, e] : store.entries()) {
    if (!e.trainable) continue;
    auto p = e.value.data();
    auto g = e.grad.data();
    auto buf = e.momentum.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      buf[i] = momentum * buf[i] + g[i] + weight_decay * p[i];
      p[i] -= lr * buf[i];
    }
  }
}

}  // namespace vlmkd
