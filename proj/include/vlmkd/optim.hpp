#pragma once

#include <cstddef>

#include "vlmkd/param_store.hpp"

namespace vlmkd {

enum class ScheduleKind { Cosine, Constant };

struct LrSchedule {
  double base_lr = 0.1;
  std::size_t total_steps = 1;
  ScheduleKind kind = ScheduleKind::Cosine;
};

/// Learning rate at `step` in [0, total_steps]; cosine decays base_lr to 0.
double lr_at(const LrSchedule& schedule, std::size_t step);

/// Heavy-ball SGD on every trainable entry:
///   buffer <- momentum * buffer + grad + weight_decay * param
///   param  <- param - lr * buffer
void sgd_step(ParamStore& store, double lr, double momentum, double weight_decay);

}  // namespace vlmkd
