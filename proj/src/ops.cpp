#include "duco/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace duco {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw std::out_of_range("axis " + std::to_string(axis) + " out of range for rank " +
                                               std::to_string(rank));
  return static_cast<std::size_t>(a);
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` viewed inside broadcast shape `out` (0 on broadcast dims).
std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    const std::size_t oi = i + (out.size() - s.size());
    strides[oi] = s[i] == 1 ? 0 : stride;
    stride *= s[i];
  }
  return strides;
}

template <class Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        Fn&& fn) {
  const std::size_t n = numel(out);
  const std::size_t r = out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// f(a, b) -> value; da(a, b, y) and db(a, b, y) -> partial derivatives.
template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t n = numel(out_shape);
  std::vector<double> y(n);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  const bool same = a.shape() == b.shape();
  std::vector<std::size_t> sa, sb;
  if (same) {
    for (std::size_t i = 0; i < n; ++i) y[i] = f(av[i], bv[i]);
  } else {
    sa = broadcast_strides(a.shape(), out_shape);
    sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = f(av[ia], bv[ib]); });
  }
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(out_shape, std::move(y), {a, b}, [=](Node& self) {
    const double* g = self.grad.data();
    const double* yv = self.value.data();
    const double* avv = an->value.data();
    const double* bvv = bn->value.data();
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    double* ga = an->requires_grad ? an->grad.data() : nullptr;
    double* gb = bn->requires_grad ? bn->grad.data() : nullptr;
    if (same) {
      for (std::size_t i = 0; i < self.value.size(); ++i) {
        if (ga) ga[i] += g[i] * da(avv[i], bvv[i], yv[i]);
        if (gb) gb[i] += g[i] * db(avv[i], bvv[i], yv[i]);
      }
    } else {
      for_each_broadcast(self.shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        if (ga) ga[ia] += g[i] * da(avv[ia], bvv[ib], yv[i]);
        if (gb) gb[ib] += g[i] * db(avv[ia], bvv[ib], yv[i]);
      });
    }
  });
}

// f(x) -> y; d(x, y) -> dy/dx.
template <class F, class D>
Tensor unary_op(const Tensor& x, F f, D d) {
  std::vector<double> y(x.numel());
  const double* xv = x.data().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  Node* xn = x.node();
  return make_result(x.shape(), std::move(y), {x}, [=](Node& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i)
      xn->grad[i] += self.grad[i] * d(xn->value[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary_op(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor tanh(const Tensor& x) {
  return unary_op(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary_op(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary_op(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Tensor clamped_log(const Tensor& x, double floor) {
  return unary_op(
      x, [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Node* xn = x.node();
  return make_result({}, {s}, {x}, [xn](Node& self) {
    xn->ensure_grad();
    const double g = self.grad[0];
    for (auto& v : xn->grad) v += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw std::invalid_argument("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.rank());
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  Shape out_shape = s;
  if (keepdim)
    out_shape[ax] = 1;
  else
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<double> y(outer * inner, 0.0);
  const double* xv = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += xv[(o * n + k) * inner + i];
  Node* xn = x.node();
  return make_result(out_shape, std::move(y), {x}, [=](Node& self) {
    xn->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) xn->grad[(o * n + k) * inner + i] += self.grad[o * inner + i];
  });
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const double n = static_cast<double>(x.dim(axis));
  return mul_scalar(sum(x, axis, keepdim), 1.0 / n);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw std::invalid_argument("matmul needs rank >= 2 operands");
  const std::size_t M = a.dim(-2), K = a.dim(-1);
  const std::size_t N = b.dim(-1);
  if (b.dim(-2) != K)
    throw std::invalid_argument("matmul inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const bool shared_b = b.rank() == 2;
  if (!shared_b) {
    if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      throw std::invalid_argument("matmul batch dims differ: " + shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (M * K);
  Shape out_shape = a.shape();
  out_shape.back() = N;
  std::vector<double> y(batch * M * N);
  if (shared_b) {
    MapMat(y.data(), batch * M, N).noalias() =
        CMapMat(a.data().data(), batch * M, K) * CMapMat(b.data().data(), K, N);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      MapMat(y.data() + i * M * N, M, N).noalias() =
          CMapMat(a.data().data() + i * M * K, M, K) * CMapMat(b.data().data() + i * K * N, K, N);
  }
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(out_shape, std::move(y), {a, b}, [=](Node& self) {
    if (shared_b) {
      CMapMat G(self.grad.data(), batch * M, N);
      if (an->requires_grad) {
        an->ensure_grad();
        MapMat(an->grad.data(), batch * M, K).noalias() += G * CMapMat(bn->value.data(), K, N).transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        MapMat(bn->grad.data(), K, N).noalias() += CMapMat(an->value.data(), batch * M, K).transpose() * G;
      }
      return;
    }
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::size_t i = 0; i < batch; ++i) {
      CMapMat G(self.grad.data() + i * M * N, M, N);
      if (an->requires_grad)
        MapMat(an->grad.data() + i * M * K, M, K).noalias() +=
            G * CMapMat(bn->value.data() + i * K * N, K, N).transpose();
      if (bn->requires_grad)
        MapMat(bn->grad.data() + i * K * N, K, N).noalias() +=
            CMapMat(an->value.data() + i * M * K, M, K).transpose() * G;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.dim(-1) != weight.dim(0))
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  Tensor in = x.rank() == 1 ? reshape(x, {1, x.dim(0)}) : x;
  Tensor y = matmul(in, weight);
  if (bias.defined()) y = add(y, bias);
  if (x.rank() == 1) y = reshape(y, {weight.dim(1)});
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw std::invalid_argument("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Node* xn = x.node();
  return make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {x},
                     [xn](Node& self) {
                       xn->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
                     });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw std::invalid_argument("permute: rank mismatch");
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = s[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  // Map from output flat index to input flat index.
  std::vector<std::size_t> src(x.numel());
  const std::vector<std::size_t> zero(r, 0);
  for_each_broadcast(out_shape, strides, zero, [&](std::size_t i, std::size_t ia, std::size_t) { src[i] = ia; });
  std::vector<double> y(x.numel());
  const double* xv = x.data().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[src[i]];
  Node* xn = x.node();
  return make_result(out_shape, std::move(y), {x}, [xn, src = std::move(src)](Node& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < src.size(); ++i) xn->grad[src[i]] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x, int a, int b) {
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[norm_axis(a, x.rank())], perm[norm_axis(b, x.rank())]);
  return permute(x, perm);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat of nothing");
  const std::size_t ax = norm_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < p.rank(); ++i)
      if (i != ax && p.shape()[i] != out_shape[i])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                    shape_str(parts[0].shape()));
    out_shape[ax] += p.shape()[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::size_t row = out_shape[ax] * inner;
  std::vector<double> y(outer * row);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.shape()[ax] * inner;
    const double* pv = p.data().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy(pv + o * chunk, pv + (o + 1) * chunk, y.data() + o * row + off);
    off += chunk;
  }
  std::vector<Node*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result(out_shape, std::move(y), parts, [=](Node& self) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      Node* n = nodes[k];
      if (!n->requires_grad) continue;
      n->ensure_grad();
      const std::size_t chunk = n->value.size() / outer;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < chunk; ++i) n->grad[o * chunk + i] += self.grad[o * row + offsets[k] + i];
    }
  });
}

Tensor unsqueeze(const Tensor& x, int axis) {
  Shape s = x.shape();
  const int r = static_cast<int>(s.size()) + 1;
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw std::out_of_range("unsqueeze axis out of range");
  s.insert(s.begin() + a, 1);
  return reshape(x, s);
}

Tensor stack(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("stack of nothing");
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != parts[0].shape()) throw std::invalid_argument("stack: shape mismatch");
    expanded.push_back(unsqueeze(p, axis));
  }
  return concat(expanded, axis);
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis(axis, x.rank());
  const Shape& s = x.shape();
  if (start + length > s[ax]) throw std::out_of_range("slice out of range on " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[ax] = length;
  const std::size_t in_row = s[ax] * inner;
  const std::size_t out_row = length * inner;
  std::vector<double> y(outer * out_row);
  const double* xv = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(xv + o * in_row + start * inner, xv + o * in_row + start * inner + out_row, y.data() + o * out_row);
  Node* xn = x.node();
  return make_result(out_shape, std::move(y), {x}, [=](Node& self) {
    xn->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < out_row; ++i) xn->grad[o * in_row + start * inner + i] += self.grad[o * out_row + i];
  });
}

Tensor expand(const Tensor& x, const Shape& shape) {
  const Shape out = broadcast_shape(x.shape(), shape);
  if (out != shape) throw std::invalid_argument("expand " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return add(x, Tensor::zeros(shape));
}

Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("embedding table must be [V, d]");
  const std::size_t V = table.dim(0), d = table.dim(1);
  std::vector<double> y(ids.size() * d);
  const double* tv = table.data().data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= V)
      throw std::out_of_range("embedding id " + std::to_string(ids[r]) + " outside vocabulary of " +
                              std::to_string(V));
    std::copy(tv + ids[r] * d, tv + (ids[r] + 1) * d, y.data() + r * d);
  }
  Node* tn = table.node();
  return make_result({ids.size(), d}, std::move(y), {table}, [=](Node& self) {
    tn->ensure_grad();
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) tn->grad[ids[r] * d + j] += self.grad[r * d + j];
  });
}

Tensor gather_last(const Tensor& x, const std::vector<std::int64_t>& index) {
  const std::size_t V = x.dim(-1);
  const std::size_t rows = x.numel() / V;
  if (index.size() != rows) throw std::invalid_argument("gather_last: index count mismatch");
  std::vector<double> y(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= V) throw std::out_of_range("gather_last index");
    y[r] = x.data()[r * V + index[r]];
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Node* xn = x.node();
  return make_result(out_shape, std::move(y), {x}, [=](Node& self) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) xn->grad[r * V + index[r]] += self.grad[r];
  });
}

namespace {

Tensor softmax_impl(const Tensor& x, const std::uint8_t* mask) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  std::vector<double> y(x.numel(), 0.0);
  const double* xv = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * n;
    double* yr = y.data() + r * n;
    double mx = -INFINITY;
    for (std::size_t i = 0; i < n; ++i)
      if (!mask || mask[r * n + i]) mx = std::max(mx, xr[i]);
    if (mx == -INFINITY) throw std::invalid_argument("softmax row has no unmasked entries");
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (!mask || mask[r * n + i]) {
        yr[i] = std::exp(xr[i] - mx);
        z += yr[i];
      }
    for (std::size_t i = 0; i < n; ++i) yr[i] /= z;
  }
  Node* xn = x.node();
  return make_result(x.shape(), std::move(y), {x}, [=](Node& self) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = self.value.data() + r * n;
      const double* gr = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += gr[i] * yr[i];
      for (std::size_t i = 0; i < n; ++i) xn->grad[r * n + i] += yr[i] * (gr[i] - dot);
    }
  });
}

}  // namespace

Tensor softmax(const Tensor& x) { return softmax_impl(x, nullptr); }

Tensor masked_softmax(const Tensor& x, const std::vector<std::uint8_t>& mask) {
  if (mask.size() != x.numel()) throw std::invalid_argument("masked_softmax: mask size mismatch");
  return softmax_impl(x, mask.data());
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  std::vector<double> y(x.numel());
  const double* xv = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(xr[i] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] = xr[i] - lse;
  }
  Node* xn = x.node();
  return make_result(x.shape(), std::move(y), {x}, [=](Node& self) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t i = 0; i < n; ++i) gs += self.grad[r * n + i];
      for (std::size_t i = 0; i < n; ++i)
        xn->grad[r * n + i] += self.grad[r * n + i] - std::exp(self.value[r * n + i]) * gs;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t n = x.dim(-1);
  if (gain.numel() != n || bias.numel() != n) throw std::invalid_argument("layer_norm: parameter size mismatch");
  const std::size_t rows = x.numel() / n;
  std::vector<double> y(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* xv = x.data().data();
  const double* gv = gain.data().data();
  const double* bv = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += xr[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < n; ++i) {
      const double h = (xr[i] - mu) * is;
      (*xhat)[r * n + i] = h;
      y[r * n + i] = h * gv[i] + bv[i];
    }
  }
  Node* xn = x.node();
  Node* gn = gain.node();
  Node* bn = bias.node();
  return make_result(x.shape(), std::move(y), {x, gain, bias}, [=](Node& self) {
    const double* g = self.grad.data();
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    const double fn = static_cast<double>(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* h = xhat->data() + r * n;
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = g[r * n + i];
        if (gn->requires_grad) gn->grad[i] += gi * h[i];
        if (bn->requires_grad) bn->grad[i] += gi;
        const double dh = gi * gn->value[i];
        s1 += dh;
        s2 += dh * h[i];
      }
      if (!xn->requires_grad) continue;
      const double is = (*inv_std)[r];
      for (std::size_t i = 0; i < n; ++i) {
        const double dh = g[r * n + i] * gn->value[i];
        xn->grad[r * n + i] += is / fn * (fn * dh - s1 - h[i] * s2);
      }
    }
  });
}

namespace {

// Output columns [lo, hi) whose input column ox * stride + kx - pad is in [0, W).
void valid_range(std::size_t Wo, std::size_t W, std::size_t kx, std::size_t stride, std::size_t pad, std::size_t& lo,
                 std::size_t& hi) {
  lo = kx >= pad ? 0 : (pad - kx + stride - 1) / stride;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(W) - 1 + static_cast<std::ptrdiff_t>(pad) -
                              static_cast<std::ptrdiff_t>(kx);
  hi = last < 0 ? 0 : std::min(Wo, static_cast<std::size_t>(last) / stride + 1);
  if (lo > hi) lo = hi;
}

// Columns are laid out as rows of length ld so several images can share one
// matrix; image n writes at column offset n * Ho * Wo.
void im2col(const double* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, std::size_t ld, double* cols) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * ld;
        std::size_t lo, hi;
        valid_range(Wo, W, kx, stride, pad, lo, hi);
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          double* out = row + oy * Wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(out, out + Wo, 0.0);
            continue;
          }
          const double* in = img + (c * H + iy) * W;
          std::fill(out, out + lo, 0.0);
          for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = in[ox * stride + kx - pad];
          std::fill(out + hi, out + Wo, 0.0);
        }
      }
}

void col2im(const double* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, std::size_t ld, double* img) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * ld;
        std::size_t lo, hi;
        valid_range(Wo, W, kx, stride, pad, lo, hi);
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          double* out = img + (c * H + iy) * W;
          const double* in = row + oy * Wo;
          for (std::size_t ox = lo; ox < hi; ++ox) out[ox * stride + kx - pad] += in[ox];
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4) throw std::invalid_argument("conv2d expects NCHW input and OCkk weight");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != C || weight.dim(3) != k)
    throw std::invalid_argument("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  if (H + 2 * padding < k || W + 2 * padding < k) throw std::invalid_argument("conv2d: kernel larger than input");
  const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
  const std::size_t ckk = C * k * k, hw = Ho * Wo, ld = N * hw;
  // One GEMM over the whole batch: [O, ckk] x [ckk, N*hw].
  std::vector<double> cols(ckk * ld);
  for (std::size_t n = 0; n < N; ++n)
    im2col(x.data().data() + n * C * H * W, C, H, W, k, stride, padding, Ho, Wo, ld, cols.data() + n * hw);
  RowMat Y = CMapMat(weight.data().data(), O, ckk) * CMapMat(cols.data(), ckk, ld);
  std::vector<double> y(N * O * hw);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      const double b = bias.defined() ? bias.data()[o] : 0.0;
      const double* src = Y.data() + o * ld + n * hw;
      double* dst = y.data() + (n * O + o) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p] + b;
    }
  Node* xn = x.node();
  Node* wn = weight.node();
  Node* bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result({N, O, Ho, Wo}, std::move(y), parents, [=](Node& self) {
    if (wn->requires_grad) wn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    if (bn && bn->requires_grad) bn->ensure_grad();
    RowMat G(O, ld);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        std::copy_n(self.grad.data() + (n * O + o) * hw, hw, G.data() + o * ld + n * hw);
    if (bn && bn->requires_grad)
      for (std::size_t o = 0; o < O; ++o) bn->grad[o] += G.row(o).sum();
    if (wn->requires_grad) {
      std::vector<double> cols(ckk * ld);
      for (std::size_t n = 0; n < N; ++n)
        im2col(xn->value.data() + n * C * H * W, C, H, W, k, stride, padding, Ho, Wo, ld, cols.data() + n * hw);
      MapMat(wn->grad.data(), O, ckk).noalias() += G * CMapMat(cols.data(), ckk, ld).transpose();
    }
    if (xn->requires_grad) {
      RowMat dcols = CMapMat(wn->value.data(), O, ckk).transpose() * G;
      for (std::size_t n = 0; n < N; ++n)
        col2im(dcols.data() + n * hw, C, H, W, k, stride, padding, Ho, Wo, ld, xn->grad.data() + n * C * H * W);
    }
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("upsample expects NCHW");
  const std::size_t P = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<double> y(P * 4 * H * W);
  const double* xv = x.data().data();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t i = 0; i < 2 * H; ++i)
      for (std::size_t j = 0; j < 2 * W; ++j) y[(p * 2 * H + i) * 2 * W + j] = xv[(p * H + i / 2) * W + j / 2];
  Node* xn = x.node();
  return make_result({x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(y), {x}, [=](Node& self) {
    xn->ensure_grad();
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t i = 0; i < 2 * H; ++i)
        for (std::size_t j = 0; j < 2 * W; ++j)
          xn->grad[(p * H + i / 2) * W + j / 2] += self.grad[(p * 2 * H + i) * 2 * W + j];
  });
}

Tensor avg_pool2d(const Tensor& x, std::size_t kernel) {
  if (x.rank() != 4) throw std::invalid_argument("avg_pool2d expects NCHW");
  const std::size_t P = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel == 0 || H % kernel || W % kernel) throw std::invalid_argument("avg_pool2d: kernel must divide H and W");
  const std::size_t Ho = H / kernel, Wo = W / kernel;
  const double scale = 1.0 / static_cast<double>(kernel * kernel);
  std::vector<double> y(P * Ho * Wo, 0.0);
  const double* xv = x.data().data();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) y[(p * Ho + i / kernel) * Wo + j / kernel] += xv[(p * H + i) * W + j] * scale;
  Node* xn = x.node();
  return make_result({x.dim(0), x.dim(1), Ho, Wo}, std::move(y), {x}, [=](Node& self) {
    xn->ensure_grad();
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          xn->grad[(p * H + i) * W + j] += self.grad[(p * Ho + i / kernel) * Wo + j / kernel] * scale;
  });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training) {
  if (!training || p <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> m(x.numel());
  const double scale = 1.0 / (1.0 - p);
  for (auto& v : m) v = keep(rng) ? scale : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(m)));
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
  if (targets.size() != logits.numel()) throw std::invalid_argument("bce_with_logits: target count mismatch");
  const std::size_t n = targets.size();
  double total = 0.0;
  const double* xv = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = xv[i];
    total += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  Node* xn = logits.node();
  return make_result({}, {total / static_cast<double>(n)}, {logits}, [=](Node& self) {
    xn->ensure_grad();
    const double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = xn->value[i];
      const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      xn->grad[i] += g * (s - targets[i]);
    }
  });
}

Tensor l2_normalize(const Tensor& x, double eps) {
  return div(x, sqrt(add_scalar(sum(square(x), -1, true), eps)));
}

}  // namespace duco
