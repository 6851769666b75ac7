#pragma once

#include <optional>
#include <random>
#include <vector>

#include "duco/batch.hpp"
#include "duco/config.hpp"
#include "duco/context_encoder.hpp"
#include "duco/nn.hpp"
#include "duco/text_encoder.hpp"

namespace duco {

struct RegionAttention {
  Tensor context;  // [B, D, N]
  Tensor beta;     // [B, N, L], softmax over words for every region
};

// Word-to-region attention: for region j (column j of regions [B, D, N]),
// beta_j = softmax_i(regions_j . words_i) over unmasked words, and
// context_j = sum_i beta_ji words_i. words: [B, L, D]; mask: [B * L].
RegionAttention region_word_attention(const Tensor& words, const std::vector<std::uint8_t>& mask,
                                      const Tensor& regions);

class ImageGenerator : public Module {
 public:
  ImageGenerator() = default;
  ImageGenerator(const ModelConfig& cfg, std::size_t image_size, std::mt19937_64& rng);

  struct Stage1 {
    Tensor features;  // [B, D_i, S/2, S/2]
    Tensor lowres;    // [B, 3, S/2, S/2] in [-1, 1]
  };
  Stage1 stage1(const Tensor& o) const;

  // Pools a feature map to the region grid: [B, D, N].
  Tensor regions(const Tensor& feature_map) const;

  // m: [B, L, H]; prev: [B, D_i, N] (zeros for the first frame).
  RegionAttention copy_transform(const Tensor& m, const std::vector<std::uint8_t>& mask, const Tensor& prev) const;

  struct Stage2 {
    Tensor image;     // [B, 3, S, S] in [-1, 1]
    Tensor features;  // [B, D_i, N]
    Tensor beta;      // word-to-region attention against the current features
  };
  Stage2 stage2(const Tensor& stage1_features, const Tensor& m, const std::vector<std::uint8_t>& mask,
                const Tensor& copy_context) const;

  std::size_t regions_count() const { return grid_ * grid_; }
  std::size_t channels() const { return cfg_.image_channels; }

  Linear seed;
  std::vector<Conv2d> up1;
  Conv2d lowres_head;
  Linear copy_u;
  Linear word_u;
  Conv2d joint;
  Conv2d res_a, res_b;
  Conv2d up2;
  Conv2d out;

 private:
  ModelConfig cfg_;
  std::size_t image_size_ = 0;
  std::size_t grid_ = 0;
};

class StoryGenerator : public Module {
 public:
  StoryGenerator() = default;
  StoryGenerator(const ModelConfig& cfg, std::size_t vocab_size, std::size_t frames, std::size_t image_size,
                 std::mt19937_64& rng);

  struct Output {
    TextEncoder::Words text;          // words [B*T, L, d_w], sentences [B*T, d_s]
    Tensor sentences;                 // [B, T, d_s]
    ConditioningState cond;
    std::vector<FrameContext> contexts;
    std::vector<Tensor> copy_beta;    // per frame [B, N, L]
    std::vector<Tensor> word_beta;    // per frame [B, N, L]
    std::vector<Tensor> stage2_features;
    Tensor images;                    // [B, T, 3, S, S]
  };

  // `cond` replaces the story encoder's draw (used to hold h0 fixed).
  Output forward(const CaptionBatch& captions, std::mt19937_64& rng,
                 const std::optional<ConditioningState>& cond = std::nullopt) const;

  // Inference: eval mode, no graph, all randomness from `seed`.
  Output generate(const CaptionBatch& captions, std::uint64_t seed);

  TextEncoder text;
  ContextEncoder context;
  ImageGenerator image;

 private:
  std::size_t frames_ = 0;
  std::size_t image_size_ = 0;
};

}  // namespace duco
