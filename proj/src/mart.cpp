#include "duco/mart.hpp"

#include <cmath>
#include <stdexcept>

namespace duco {

MemoryState MemoryState::detach() const {
  MemoryState m;
  for (const auto& c : cells) m.cells.push_back(c.detach());
  return m;
}

MemoryState MemoryState::clone() const {
  MemoryState m;
  for (const auto& c : cells) m.cells.push_back(c.clone());
  return m;
}

std::vector<double> MemoryState::flatten() const {
  std::vector<double> v;
  for (const auto& c : cells) v.insert(v.end(), c.data().begin(), c.data().end());
  return v;
}

MemoryState MemoryState::unflatten(const std::vector<double>& values, std::size_t layers, std::size_t batch,
                                   std::size_t cells, std::size_t hidden) {
  const std::size_t per = batch * cells * hidden;
  if (values.size() != layers * per) throw std::invalid_argument("MemoryState::unflatten: size mismatch");
  MemoryState m;
  for (std::size_t l = 0; l < layers; ++l)
    m.cells.push_back(Tensor::from({batch, cells, hidden},
                                   std::vector<double>(values.begin() + l * per, values.begin() + (l + 1) * per)));
  return m;
}

AttentionPool attention_pool(const Tensor& encodings, const std::vector<std::uint8_t>& mask, const Tensor& u) {
  if (encodings.rank() != 3) throw std::invalid_argument("attention_pool expects [B, L, H]");
  const std::size_t B = encodings.dim(0), L = encodings.dim(1), H = encodings.dim(2);
  Tensor logits = reshape(matmul(encodings, reshape(u, {H, 1})), {B, L});
  Tensor alpha = masked_softmax(logits, mask);
  Tensor pooled = sum(encodings * reshape(alpha, {B, L, 1}), 1);
  return {alpha, pooled};
}

MartLayer::MartLayer(const MartConfig& cfg, std::mt19937_64& rng) {
  const std::size_t H = cfg.hidden_size;
  query = Linear(H, H, rng);
  key = Linear(H, H, rng);
  value = Linear(H, H, rng);
  out = Linear(H, H, rng);
  attn_norm = LayerNorm(H, cfg.layer_norm_eps);
  ffn_in = Linear(H, 2 * H, rng);
  ffn_out = Linear(2 * H, H, rng);
  ffn_norm = LayerNorm(H, cfg.layer_norm_eps);
  cand_mem = Linear(H, H, rng);
  cand_sum = Linear(H, H, rng, false);
  gate_mem = Linear(H, H, rng);
  gate_sum = Linear(H, H, rng, false);
  register_module("query", query);
  register_module("key", key);
  register_module("value", value);
  register_module("out", out);
  register_module("attn_norm", attn_norm);
  register_module("ffn_in", ffn_in);
  register_module("ffn_out", ffn_out);
  register_module("ffn_norm", ffn_norm);
  register_module("cand_mem", cand_mem);
  register_module("cand_sum", cand_sum);
  register_module("gate_mem", gate_mem);
  register_module("gate_sum", gate_sum);
}

Mart::Mart(const MartConfig& cfg, std::size_t d_in, std::mt19937_64& rng) : cfg_(cfg) {
  cfg.validate();
  input_proj = Linear(d_in, cfg.hidden_size, rng);
  positions = register_param("positions", normal_tensor({cfg.max_seq_len, cfg.hidden_size}, 0.02, rng, true));
  input_norm = LayerNorm(cfg.hidden_size, cfg.layer_norm_eps);
  register_module("input", input_proj);
  register_module("input_norm", input_norm);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    layers.emplace_back(cfg, rng);
    register_module("layer" + std::to_string(l), layers.back());
  }
}

MemoryState Mart::zero_memory(std::size_t batch) const {
  MemoryState m;
  for (std::size_t l = 0; l < cfg_.num_layers; ++l)
    m.cells.push_back(Tensor::zeros({batch, cfg_.num_memory_cells, cfg_.hidden_size}));
  return m;
}

Mart::Step Mart::step(const Tensor& x, const std::vector<std::uint8_t>& key_mask, const MemoryState& memory,
                      std::mt19937_64& rng, const std::vector<std::uint8_t>* attn_mask,
                      std::optional<double> force_gate) const {
  if (x.rank() != 3) throw std::invalid_argument("Mart::step expects [B, L, d_in]");
  const std::size_t B = x.dim(0), L = x.dim(1), H = cfg_.hidden_size, M = cfg_.num_memory_cells;
  const std::size_t heads = cfg_.num_heads, dh = H / heads;
  if (L > cfg_.max_seq_len) throw std::invalid_argument("Mart::step: sequence longer than max_seq_len");
  if (key_mask.size() != B * L) throw std::invalid_argument("Mart::step: key mask size mismatch");
  if (attn_mask && attn_mask->size() != B * L * L) throw std::invalid_argument("Mart::step: attention mask size");
  if (memory.cells.size() != cfg_.num_layers) throw std::invalid_argument("Mart::step: memory layer count");
  std::vector<std::size_t> counts(B, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L; ++i) counts[b] += key_mask[b * L + i] ? 1 : 0;
  for (auto c : counts)
    if (c == 0) throw std::invalid_argument("Mart::step: a row has no unmasked tokens");

  // Attention visibility over [memory ; tokens] per (b, query).
  std::vector<std::uint8_t> vis(B * heads * L * (M + L), 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < L; ++q) {
        std::uint8_t* row = vis.data() + ((b * heads + h) * L + q) * (M + L);
        for (std::size_t j = 0; j < M; ++j) row[j] = 1;
        for (std::size_t k = 0; k < L; ++k)
          row[M + k] = key_mask[b * L + k] && (!attn_mask || (*attn_mask)[(b * L + q) * L + k]);
      }
  std::vector<double> maskf(key_mask.begin(), key_mask.end());
  Tensor token_mask = Tensor::from({B, L, 1}, std::move(maskf));
  std::vector<double> inv(B);
  for (std::size_t b = 0; b < B; ++b) inv[b] = 1.0 / static_cast<double>(counts[b]);
  Tensor inv_count = Tensor::from({B, 1}, std::move(inv));

  const bool train = training();
  Tensor h = input_norm(input_proj(x) + slice(positions, 0, 0, L));
  h = dropout(h, cfg_.dropout, rng, train);

  Step result;
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const MartLayer& layer = layers[l];
    const Tensor& mem = memory.cells[l];
    Tensor kv_in = concat({mem, h}, 1);  // [B, M+L, H]
    auto split = [&](const Tensor& t, std::size_t n) { return permute(reshape(t, {B, n, heads, dh}), {0, 2, 1, 3}); };
    Tensor q = split(layer.query(h), L);
    Tensor k = split(layer.key(kv_in), M + L);
    Tensor v = split(layer.value(kv_in), M + L);
    Tensor scores = matmul(q, transpose(k, 2, 3)) * (1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor att = masked_softmax(scores, vis);
    Tensor ctx = reshape(permute(matmul(att, v), {0, 2, 1, 3}), {B, L, H});
    h = layer.attn_norm(h + dropout(layer.out(ctx), cfg_.dropout, rng, train));
    Tensor ff = layer.ffn_out(relu(layer.ffn_in(h)));
    h = layer.ffn_norm(h + dropout(ff, cfg_.dropout, rng, train));
    result.attention.push_back(att);

    Tensor summary = unsqueeze(sum(h * token_mask, 1) * inv_count, 1);  // [B, 1, H]
    Tensor cand = tanh(layer.cand_mem(mem) + layer.cand_sum(summary));
    Tensor gate = force_gate ? Tensor::full({B, M, H}, *force_gate) : sigmoid(layer.gate_mem(mem) + layer.gate_sum(summary));
    result.memory.cells.push_back(gate * cand + (1.0 - gate) * mem);
  }
  result.encodings = h;
  return result;
}

MemoryInit::MemoryInit(std::size_t d_h, const MartConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    proj.emplace_back(d_h, cfg.num_memory_cells * cfg.hidden_size, rng);
    register_module("layer" + std::to_string(l), proj.back());
  }
}

MemoryState MemoryInit::operator()(const Tensor& h0) const {
  if (h0.rank() != 2) throw std::invalid_argument("MemoryInit expects [B, d_h]");
  const std::size_t B = h0.dim(0);
  MemoryState m;
  for (const auto& p : proj) m.cells.push_back(reshape(p(h0), {B, cfg_.num_memory_cells, cfg_.hidden_size}));
  return m;
}

}  // namespace duco
