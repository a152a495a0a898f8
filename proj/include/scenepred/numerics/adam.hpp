#pragma once

#include "scenepred/numerics/graph.hpp"

#include <cstdint>

namespace scenepred::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction. Moments are keyed by parameter name.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Throws NumericError naming the first parameter whose gradient is not finite; parameters are
  // left untouched in that case.
  void step(ParameterSet& params, const Gradients& grads);

  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  std::uint64_t step_count() const { return steps_; }

  // Serialized into checkpoints as "m/<name>" and "v/<name>" tensors.
  ParameterSet export_state() const;
  void import_state(const ParameterSet& state, std::uint64_t steps);

 private:
  AdamConfig config_;
  std::uint64_t steps_ = 0;
  ParameterSet first_;
  ParameterSet second_;
};

}  // namespace scenepred::nn
