#pragma once

// Differentiable tensor operations. Binary elementwise ops follow NumPy
// broadcasting. Axis arguments accept negative values.

#include <cstdint>
#include <random>
#include <vector>

#include "duco/tensor.hpp"

namespace duco {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(mul_scalar(a, -1.0), s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.2);
// log(max(x, floor)); gradient is zero where the floor is active.
Tensor clamped_log(const Tensor& x, double floor);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

// a: [..., M, K]; b: [..., K, N] with identical leading dims, or b: [K, N].
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [..., in], weight: [in, out], bias: [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor transpose(const Tensor& x, int a, int b);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor stack(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
Tensor unsqueeze(const Tensor& x, int axis);
// Broadcasts x to shape (NumPy rules).
Tensor expand(const Tensor& x, const Shape& shape);

// Rows of table [V, d] selected by ids -> [ids.size(), d].
Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& ids);
// Picks x[..., index[r]] for every leading row r -> leading shape.
Tensor gather_last(const Tensor& x, const std::vector<std::int64_t>& index);

// Softmax over the last axis. With a mask (same numel, 1 = keep), masked
// entries get exactly zero weight; rows must keep at least one entry.
Tensor softmax(const Tensor& x);
Tensor masked_softmax(const Tensor& x, const std::vector<std::uint8_t>& mask);
Tensor log_softmax(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// NCHW convolution; weight [O, C, k, k]; bias [O] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);
Tensor upsample_nearest2x(const Tensor& x);
Tensor avg_pool2d(const Tensor& x, std::size_t kernel);

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training);

// Mean binary cross-entropy of logits against 0/1 targets (same numel).
Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets);

// x / ||x|| along the last axis.
Tensor l2_normalize(const Tensor& x, double eps = 1e-8);

}  // namespace duco
