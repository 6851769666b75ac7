#include "duco/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace duco {

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng, bool requires_grad) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

std::uint64_t checksum(const std::vector<NamedTensor>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    for (auto d : p.tensor.shape()) mix(&d, sizeof d);
    mix(p.tensor.data().data(), p.tensor.numel() * sizeof(double));
  }
  return h;
}

std::vector<std::vector<double>> copy_values(const std::vector<NamedTensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void assign_values(const std::vector<NamedTensor>& params, const std::vector<std::vector<double>>& values) {
  if (values.size() != params.size()) throw std::invalid_argument("assign_values: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.node()->value.data();
    if (values[i].size() != params[i].tensor.numel()) throw std::invalid_argument("assign_values: size mismatch");
    std::copy(values[i].begin(), values[i].end(), dst);
  }
}

std::size_t Module::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

void Module::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Module::freeze() {
  for (auto& p : params_) p.tensor.freeze();
}

bool Module::frozen() const {
  if (params_.empty()) return false;
  for (const auto& p : params_)
    if (!p.tensor.frozen()) return false;
  return true;
}

Tensor Module::register_param(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  params_.push_back({name, t});
  return t;
}

void Module::register_module(const std::string& prefix, const Module& child) {
  for (const auto& p : child.parameters()) params_.push_back({prefix + "." + p.name, p.tensor});
  descendant_flags_.push_back(child.training_);
  descendant_flags_.insert(descendant_flags_.end(), child.descendant_flags_.begin(), child.descendant_flags_.end());
}

void Module::set_training(bool on) {
  *training_ = on;
  for (auto& f : descendant_flags_) *f = on;
}

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias) {
  weight = register_param("weight", uniform_tensor({in, out}, std::sqrt(3.0 / static_cast<double>(in)), rng, true));
  if (with_bias) bias = register_param("bias", Tensor::zeros({out}));
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
               std::mt19937_64& rng)
    : stride_(stride), padding_(padding) {
  const double fan_in = static_cast<double>(in * kernel * kernel);
  weight = register_param("weight", uniform_tensor({out, in, kernel, kernel}, std::sqrt(6.0 / fan_in) * 0.5, rng, true));
  bias = register_param("bias", Tensor::zeros({out}));
}

LayerNorm::LayerNorm(std::size_t n, double eps) : eps_(eps) {
  gain = register_param("gain", Tensor::full({n}, 1.0));
  bias = register_param("bias", Tensor::zeros({n}));
}

Embedding::Embedding(std::size_t vocab, std::size_t dim, std::mt19937_64& rng) {
  table = register_param("table", normal_tensor({vocab, dim}, 1.0 / std::sqrt(static_cast<double>(dim)), rng, true));
}

GRUCell::GRUCell(std::size_t input, std::size_t hidden, std::mt19937_64& rng) : hidden_(hidden) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  w_input = register_param("w_input", uniform_tensor({input, 3 * hidden}, bound, rng, true));
  w_hidden = register_param("w_hidden", uniform_tensor({hidden, 3 * hidden}, bound, rng, true));
  b_input = register_param("b_input", Tensor::zeros({3 * hidden}));
  b_hidden = register_param("b_hidden", Tensor::zeros({3 * hidden}));
}

Tensor GRUCell::operator()(const Tensor& x, const Tensor& q, std::optional<double> force_update) const {
  const Tensor gx = linear(x, w_input, b_input);
  const Tensor gh = linear(q, w_hidden, b_hidden);
  const std::size_t h = hidden_;
  const Tensor r = sigmoid(slice(gx, -1, 0, h) + slice(gh, -1, 0, h));
  Tensor z = sigmoid(slice(gx, -1, h, h) + slice(gh, -1, h, h));
  if (force_update) z = Tensor::full(z.shape(), *force_update);
  const Tensor n = tanh(slice(gx, -1, 2 * h, h) + r * slice(gh, -1, 2 * h, h));
  return (1.0 - z) * q + z * n;
}

LSTM::LSTM(std::size_t input, std::size_t hidden, std::mt19937_64& rng) : hidden_(hidden) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  w_input = register_param("w_input", uniform_tensor({input, 4 * hidden}, bound, rng, true));
  w_hidden = register_param("w_hidden", uniform_tensor({hidden, 4 * hidden}, bound, rng, true));
  std::vector<double> b(4 * hidden, 0.0);
  for (std::size_t i = hidden; i < 2 * hidden; ++i) b[i] = 1.0;  // forget-gate bias
  bias = register_param("bias", Tensor::from({4 * hidden}, std::move(b)));
}

LSTM::Result LSTM::operator()(const Tensor& x, const std::vector<std::size_t>& lengths, bool reverse) const {
  const std::size_t B = x.dim(0), L = x.dim(1), h = hidden_;
  if (lengths.size() != B) throw std::invalid_argument("LSTM: one length per batch row required");
  const Tensor gates_x = linear(x, w_input, bias);  // [B, L, 4h]
  Tensor hs = Tensor::zeros({B, h});
  Tensor cs = Tensor::zeros({B, h});
  std::vector<Tensor> outputs(L);
  for (std::size_t s = 0; s < L; ++s) {
    const std::size_t t = reverse ? L - 1 - s : s;
    std::vector<double> m(B);
    for (std::size_t b = 0; b < B; ++b) m[b] = t < lengths[b] ? 1.0 : 0.0;
    const Tensor mask = Tensor::from({B, 1}, m);
    const Tensor g = reshape(slice(gates_x, 1, t, 1), {B, 4 * h}) + linear(hs, w_hidden, Tensor());
    const Tensor i = sigmoid(slice(g, 1, 0, h));
    const Tensor f = sigmoid(slice(g, 1, h, h));
    const Tensor gg = tanh(slice(g, 1, 2 * h, h));
    const Tensor o = sigmoid(slice(g, 1, 3 * h, h));
    const Tensor c_new = f * cs + i * gg;
    const Tensor h_new = o * tanh(c_new);
    cs = mask * c_new + (1.0 - mask) * cs;
    hs = mask * h_new + (1.0 - mask) * hs;
    outputs[t] = mask * h_new;
  }
  return {stack(outputs, 1), hs};
}

BiLSTM::BiLSTM(std::size_t input, std::size_t hidden, std::mt19937_64& rng)
    : forward_(input, hidden, rng), backward_(input, hidden, rng) {
  register_module("forward", forward_);
  register_module("backward", backward_);
}

LSTM::Result BiLSTM::operator()(const Tensor& x, const std::vector<std::size_t>& lengths) const {
  auto f = forward_(x, lengths, false);
  auto b = backward_(x, lengths, true);
  return {concat({f.outputs, b.outputs}, -1), concat({f.final, b.final}, -1)};
}

}  // namespace duco
