#pragma once

#include <filesystem>
#include <optional>
#include <random>

#include "duco/data.hpp"
#include "duco/nn.hpp"

namespace duco {

// Story-level Gaussian posterior and the draw used for h0.
struct ConditioningState {
  Tensor mu;      // [B, d_h]
  Tensor logvar;  // [B, d_h]
  Tensor sigma2;  // exp(logvar)
  Tensor eps;     // [B, d_h]
  Tensor h0;      // mu + sqrt(sigma2) * eps
};

// h0 = mu + exp(logvar / 2) * eps
ConditioningState reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& eps);

// Mean over the batch of 0.5 * sum(mu^2 + sigma2 - log sigma2 - 1).
// Throws std::domain_error on a nonpositive variance.
Tensor kl_loss(const Tensor& mu, const Tensor& sigma2);
inline Tensor kl_loss(const ConditioningState& s) { return kl_loss(s.mu, s.sigma2); }

class TextEncoder : public Module {
 public:
  TextEncoder() = default;
  TextEncoder(std::size_t vocab_size, std::size_t d_w, std::size_t d_s, std::size_t d_h, std::size_t frames,
              std::mt19937_64& rng);

  struct Words {
    Tensor words;      // [R, L, d_w], zero at padded positions
    Tensor sentences;  // [R, d_s]
  };
  // ids and mask are [R * L]; each row needs at least one unmasked token.
  Words embed(const std::vector<std::int64_t>& ids, const std::vector<std::uint8_t>& mask, std::size_t rows) const;

  // sentences: [B, T, d_s]. eps is drawn from rng unless given.
  ConditioningState encode_story(const Tensor& sentences, std::mt19937_64& rng,
                                 const std::optional<Tensor>& eps = std::nullopt) const;

  // Loads whitespace "token v1 ... vd" rows for tokens present in vocab;
  // returns the number of rows copied.
  std::size_t load_pretrained(const std::filesystem::path& path, const data::Vocab& vocab);

  std::size_t frames() const { return frames_; }
  std::size_t d_s() const { return d_s_; }
  std::size_t d_h() const { return d_h_; }

  Embedding embedding;
  Linear sentence_proj;
  Linear mu_head;
  Linear logvar_head;

 private:
  std::size_t frames_ = 0, d_s_ = 0, d_h_ = 0;
};

}  // namespace duco
