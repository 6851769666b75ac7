#pragma once

// Parameter containers and the small layer library the models are built from.

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "duco/ops.hpp"
#include "duco/tensor.hpp"

namespace duco {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng, bool requires_grad);
Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad);

// Value copies for keeping the best parameters seen during training.
std::vector<std::vector<double>> copy_values(const std::vector<NamedTensor>& params);
void assign_values(const std::vector<NamedTensor>& params, const std::vector<std::vector<double>>& values);

// FNV-1a over names, shapes and raw value bytes.
std::uint64_t checksum(const std::vector<NamedTensor>& params);

// Owns an ordered registry of parameter handles. Submodule parameters are
// registered under "<prefix>.<name>". Copies share the underlying storage.
class Module {
 public:
  virtual ~Module() = default;

  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  std::uint64_t checksum() const { return duco::checksum(params_); }
  void zero_grad();

  // Frozen parameters stop accumulating gradient; optimizers and loaders
  // refuse to touch them.
  void freeze();
  bool frozen() const;

  // Propagates to every registered submodule.
  void set_training(bool on);
  bool training() const { return *training_; }

 protected:
  Tensor register_param(const std::string& name, Tensor t);
  void register_module(const std::string& prefix, const Module& child);

 private:
  std::vector<NamedTensor> params_;
  std::shared_ptr<bool> training_ = std::make_shared<bool>(true);
  std::vector<std::shared_ptr<bool>> descendant_flags_;
};

class Linear : public Module {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias = true);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

class Conv2d : public Module {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
         std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride_, padding_); }

  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]

 private:
  std::size_t stride_ = 1;
  std::size_t padding_ = 0;
};

class LayerNorm : public Module {
 public:
  LayerNorm() = default;
  LayerNorm(std::size_t n, double eps);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps_); }

  Tensor gain;
  Tensor bias;

 private:
  double eps_ = 1e-12;
};

class Embedding : public Module {
 public:
  Embedding() = default;
  Embedding(std::size_t vocab, std::size_t dim, std::mt19937_64& rng);
  Tensor operator()(const std::vector<std::int64_t>& ids) const { return embedding(table, ids); }

  Tensor table;  // [V, d]
};

// q' = (1 - z) * q + z * n, with
//   r = sigmoid(x Wr + q Ur + br), z = sigmoid(x Wz + q Uz + bz),
//   n = tanh(x Wn + bn + r * (q Un + bhn)).
class GRUCell : public Module {
 public:
  GRUCell() = default;
  GRUCell(std::size_t input, std::size_t hidden, std::mt19937_64& rng);
  // force_update pins z to a constant (test hook for the gating identity).
  Tensor operator()(const Tensor& x, const Tensor& q, std::optional<double> force_update = std::nullopt) const;

  std::size_t hidden_size() const { return hidden_; }

  Tensor w_input;   // [in, 3h] column blocks r|z|n
  Tensor w_hidden;  // [h, 3h]
  Tensor b_input;   // [3h]
  Tensor b_hidden;  // [3h]

 private:
  std::size_t hidden_ = 0;
};

// Unidirectional LSTM over a padded batch. Past each sequence's length the
// state is carried unchanged and the output is zero.
class LSTM : public Module {
 public:
  LSTM() = default;
  LSTM(std::size_t input, std::size_t hidden, std::mt19937_64& rng);

  struct Result {
    Tensor outputs;  // [B, L, h]
    Tensor final;    // [B, h]
  };
  // x: [B, L, in]; lengths[b] in [1, L].
  Result operator()(const Tensor& x, const std::vector<std::size_t>& lengths, bool reverse = false) const;

  Tensor w_input;   // [in, 4h] blocks i|f|g|o
  Tensor w_hidden;  // [h, 4h]
  Tensor bias;      // [4h]

 private:
  std::size_t hidden_ = 0;
};

class BiLSTM : public Module {
 public:
  BiLSTM() = default;
  BiLSTM(std::size_t input, std::size_t hidden, std::mt19937_64& rng);
  // outputs [B, L, 2h]; final [B, 2h] = [forward final ; backward final].
  LSTM::Result operator()(const Tensor& x, const std::vector<std::size_t>& lengths) const;

 private:
  LSTM forward_;
  LSTM backward_;
};

}  // namespace duco
