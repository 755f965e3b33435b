#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rsc/tensor.hpp"

namespace rsc {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Moment buffers mirror the
// parameter shapes; the step counter increases by exactly 1 per step().
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  // Applies one update using each parameter's current grad buffer.
  void step();

  std::int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<Tensor>& params() const { return params_; }

  std::span<const double> first_moment(std::size_t i) const { return m_.at(i); }
  std::span<const double> second_moment(std::size_t i) const { return v_.at(i); }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace rsc
