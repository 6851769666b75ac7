#include "duco/context_encoder.hpp"

#include <stdexcept>

namespace duco {

Tensor gist(const Tensor& filters, const Tensor& signal) {
  if (filters.rank() != 3 || signal.rank() != 2 || filters.dim(0) != signal.dim(0) || filters.dim(2) != signal.dim(1))
    throw std::invalid_argument("gist: filters " + shape_str(filters.shape()) + " vs signal " +
                                shape_str(signal.shape()));
  const std::size_t B = filters.dim(0), C = filters.dim(1);
  return reshape(matmul(filters, unsqueeze(signal, 2)), {B, C});
}

ContextEncoder::ContextEncoder(const ModelConfig& cfg, std::mt19937_64& rng)
    : mart(cfg.mart, cfg.d_w, rng),
      memory_init(cfg.d_h, cfg.mart, rng),
      gru(2 * cfg.d_s, cfg.gru_hidden, rng),
      filter(cfg.mart.hidden_size + cfg.gru_hidden, cfg.c_out * cfg.d_p, rng),
      w_i(cfg.d_s, cfg.d_p, rng),
      cfg_(cfg) {
  register_module("mart", mart);
  if (cfg.memory_init) register_module("memory_init", memory_init);
  u = register_param("u", normal_tensor({cfg.mart.hidden_size}, 0.1, rng, true));
  register_module("gru", gru);
  register_module("filter", filter);
  register_module("w_i", w_i);
}

Tensor ContextEncoder::gru_step(const Tensor& s, const Tensor& eps, const Tensor& q_prev,
                                std::optional<double> force_update) const {
  return gru(concat({s, eps}, 1), q_prev, force_update);
}

Tensor ContextEncoder::filters(const Tensor& c, const Tensor& g) const {
  const std::size_t B = c.dim(0);
  return reshape(filter(concat({c, g}, 1)), {B, cfg_.c_out, cfg_.d_p});
}

Tensor ContextEncoder::text2gist(const Tensor& c, const Tensor& g, const Tensor& s) const {
  return gist(filters(c, g), tanh(w_i(s)));
}

MemoryState ContextEncoder::initial_memory(const Tensor& h0) const {
  if (cfg_.memory_init) return memory_init(h0);
  return mart.zero_memory(h0.dim(0));
}

std::vector<FrameContext> ContextEncoder::encode(const Tensor& words, const Tensor& sentences,
                                                 const std::vector<std::uint8_t>& mask, const Tensor& h0,
                                                 std::mt19937_64& rng) const {
  if (sentences.rank() != 3) throw std::invalid_argument("ContextEncoder::encode expects [B, T, d_s] sentences");
  const std::size_t B = sentences.dim(0), T = sentences.dim(1), L = words.dim(1), d_w = words.dim(2);
  if (words.dim(0) != B * T || mask.size() != B * T * L)
    throw std::invalid_argument("ContextEncoder::encode: words/mask do not match sentences");
  Tensor w4 = reshape(words, {B, T, L, d_w});
  MemoryState mem = initial_memory(h0);
  Tensor q = Tensor::zeros({B, cfg_.gru_hidden});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<FrameContext> out;
  for (std::size_t k = 0; k < T; ++k) {
    std::vector<std::uint8_t> mk;
    mk.reserve(B * L);
    for (std::size_t b = 0; b < B; ++b)
      mk.insert(mk.end(), mask.begin() + (b * T + k) * L, mask.begin() + (b * T + k + 1) * L);
    Tensor wk = reshape(slice(w4, 1, k, 1), {B, L, d_w});
    Tensor sk = reshape(slice(sentences, 1, k, 1), {B, cfg_.d_s});
    auto stepped = mart.step(wk, mk, mem, rng);
    mem = stepped.memory;
    FrameContext fc;
    fc.m = stepped.encodings;
    auto pool = attention_pool(fc.m, mk, u);
    fc.alpha = pool.alpha;
    fc.c = pool.pooled;
    std::vector<double> e(B * cfg_.d_s);
    for (auto& x : e) x = normal(rng);
    fc.eps = Tensor::from({B, cfg_.d_s}, std::move(e));
    q = gru_step(sk, fc.eps, q);
    fc.q = q;
    fc.g = q;
    fc.o = text2gist(fc.c, fc.g, sk);
    out.push_back(std::move(fc));
  }
  return out;
}

}  // namespace duco
