#pragma once

#include <cstdint>
#include <vector>

#include "duco/nn.hpp"

namespace duco {

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t steps = 0;
};

class Adam {
 public:
  Adam(std::vector<NamedTensor> params, double lr, double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8);

  // Applies one update from accumulated gradients, then clears them.
  // Throws if any parameter is frozen.
  void step();
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::uint64_t steps() const { return state_.steps; }

  const AdamState& state() const { return state_; }
  void load_state(AdamState state);
  const std::vector<NamedTensor>& params() const { return params_; }

 private:
  std::vector<NamedTensor> params_;
  AdamState state_;
  double lr_, beta1_, beta2_, eps_;
};

}  // namespace duco
