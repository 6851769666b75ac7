#pragma once

// Memory-augmented recurrent transformer. Each layer attends over
// [memory cells ; step tokens]; after the step, every layer writes its
// memory with a gated residual driven by the masked mean of its outputs:
//   candidate = tanh(mem Wc + summary Uc + bc)
//   g         = sigmoid(mem Wg + summary Ug + bg)
//   new_mem   = g * candidate + (1 - g) * mem

#include <optional>
#include <random>
#include <vector>

#include "duco/config.hpp"
#include "duco/nn.hpp"

namespace duco {

struct MemoryState {
  std::vector<Tensor> cells;  // per layer [B, M, H]

  MemoryState detach() const;
  MemoryState clone() const;
  std::vector<double> flatten() const;
  // Rebuilds a state with the given layout from flatten() output.
  static MemoryState unflatten(const std::vector<double>& values, std::size_t layers, std::size_t batch,
                               std::size_t cells, std::size_t hidden);
};

struct AttentionPool {
  Tensor alpha;   // [B, L]
  Tensor pooled;  // [B, H]
};

// alpha = masked softmax of enc u over positions; pooled = sum alpha * enc.
AttentionPool attention_pool(const Tensor& encodings, const std::vector<std::uint8_t>& mask, const Tensor& u);

class MartLayer : public Module {
 public:
  MartLayer() = default;
  MartLayer(const MartConfig& cfg, std::mt19937_64& rng);

  Linear query, key, value, out;
  LayerNorm attn_norm;
  Linear ffn_in, ffn_out;
  LayerNorm ffn_norm;
  Linear cand_mem, cand_sum, gate_mem, gate_sum;
};

class Mart : public Module {
 public:
  Mart() = default;
  Mart(const MartConfig& cfg, std::size_t d_in, std::mt19937_64& rng);

  struct Step {
    Tensor encodings;  // [B, L, H]
    MemoryState memory;
    std::vector<Tensor> attention;  // per layer [B, heads, L, M + L]
  };

  // x: [B, L, d_in]; key_mask: [B * L] (1 = real token). attn_mask, when
  // given, is [B * L * L] and further restricts which tokens each query may
  // see (memory cells are always visible). force_gate pins the write gate.
  Step step(const Tensor& x, const std::vector<std::uint8_t>& key_mask, const MemoryState& memory,
            std::mt19937_64& rng, const std::vector<std::uint8_t>* attn_mask = nullptr,
            std::optional<double> force_gate = std::nullopt) const;

  MemoryState zero_memory(std::size_t batch) const;

  const MartConfig& config() const { return cfg_; }

  Linear input_proj;
  Tensor positions;  // [max_seq_len, H]
  LayerNorm input_norm;
  std::vector<MartLayer> layers;

 private:
  MartConfig cfg_;
};

// Cell-specific linear projections of h0 into every layer's memory.
class MemoryInit : public Module {
 public:
  MemoryInit() = default;
  MemoryInit(std::size_t d_h, const MartConfig& cfg, std::mt19937_64& rng);
  MemoryState operator()(const Tensor& h0) const;

  std::vector<Linear> proj;  // per layer, [d_h, M * H] with zero bias

 private:
  MartConfig cfg_;
};

}  // namespace duco
