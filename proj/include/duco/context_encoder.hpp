#pragma once

#include <optional>
#include <random>
#include <vector>

#include "duco/config.hpp"
#include "duco/mart.hpp"
#include "duco/nn.hpp"
#include "duco/text_encoder.hpp"

namespace duco {

// Per-frame conditioning for the generator; every field is batched over stories.
struct FrameContext {
  Tensor m;      // [B, L, H] contextual word encodings
  Tensor alpha;  // [B, L] pooling weights
  Tensor c;      // [B, H]
  Tensor eps;    // [B, d_s]
  Tensor q;      // [B, d_g] GRU state (g_k == q_k)
  Tensor g;      // [B, d_g]
  Tensor o;      // [B, C_out] gist vector
};

// o[c] = sum_j F[c, j] * p[j]; filters [B, C_out, d_p], signal [B, d_p].
Tensor gist(const Tensor& filters, const Tensor& signal);

class ContextEncoder : public Module {
 public:
  ContextEncoder() = default;
  ContextEncoder(const ModelConfig& cfg, std::mt19937_64& rng);

  // GRU over [s_k ; eps_k].
  Tensor gru_step(const Tensor& s, const Tensor& eps, const Tensor& q_prev,
                  std::optional<double> force_update = std::nullopt) const;
  Tensor filters(const Tensor& c, const Tensor& g) const;  // [B, C_out, d_p]
  Tensor text2gist(const Tensor& c, const Tensor& g, const Tensor& s) const;

  MemoryState initial_memory(const Tensor& h0) const;

  // words: [B*T, L, d_w] (story-major); sentences: [B, T, d_s]; mask: [B*T*L].
  std::vector<FrameContext> encode(const Tensor& words, const Tensor& sentences, const std::vector<std::uint8_t>& mask,
                                   const Tensor& h0, std::mt19937_64& rng) const;

  const ModelConfig& config() const { return cfg_; }

  Mart mart;
  MemoryInit memory_init;
  Tensor u;  // attention-pool query [H]
  GRUCell gru;
  Linear filter;
  Linear w_i;

 private:
  ModelConfig cfg_;
};

}  // namespace duco
