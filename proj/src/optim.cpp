#include "duco/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace duco {

Adam::Adam(std::vector<NamedTensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    state_.m.emplace_back(p.tensor.numel(), 0.0);
    state_.v.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step() {
  for (const auto& p : params_)
    if (p.tensor.frozen()) throw std::logic_error("optimizer step on frozen parameter '" + p.name + "'");
  ++state_.steps;
  const double t = static_cast<double>(state_.steps);
  const double c1 = 1.0 - std::pow(beta1_, t);
  const double c2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor w = params_[k].tensor;
    if (!w.has_grad()) continue;
    auto val = w.data();
    auto g = w.grad();
    auto& m = state_.m[k];
    auto& v = state_.v[k];
    for (std::size_t i = 0; i < val.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      val[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
    w.zero_grad();
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::load_state(AdamState state) {
  if (state.m.size() != params_.size() || state.v.size() != params_.size())
    throw std::invalid_argument("optimizer state does not match parameter list");
  for (std::size_t k = 0; k < params_.size(); ++k)
    if (state.m[k].size() != params_[k].tensor.numel() || state.v[k].size() != params_[k].tensor.numel())
      throw std::invalid_argument("optimizer state size mismatch for '" + params_[k].name + "'");
  state_ = std::move(state);
}

}  // namespace duco
