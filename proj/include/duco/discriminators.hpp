#pragma once

#include <random>
#include <vector>

#include "duco/config.hpp"
#include "duco/nn.hpp"

namespace duco {

inline constexpr double kProbFloor = 1e-8;

class ImageDiscriminator : public Module {
 public:
  ImageDiscriminator() = default;
  ImageDiscriminator(const ModelConfig& cfg, std::size_t image_size, std::size_t num_characters,
                     std::mt19937_64& rng);

  struct Output {
    Tensor logit;        // [B]
    Tensor prob;         // [B], sigmoid(logit)
    Tensor char_logits;  // [B, C]
  };
  // x: [B, 3, S, S]; s: [B, d_s]; h0: [B, d_h].
  Output operator()(const Tensor& x, const Tensor& s, const Tensor& h0) const;

  std::vector<Conv2d> tower;
  Linear cond;
  Conv2d joint;
  Linear head;
  Linear char_head;

 private:
  std::size_t grid_ = 0;
  std::size_t cond_channels_ = 0;
};

class StoryDiscriminator : public Module {
 public:
  StoryDiscriminator() = default;
  StoryDiscriminator(const ModelConfig& cfg, std::size_t image_size, std::size_t frames, std::mt19937_64& rng);

  // X: [B, T, 3, S, S]; story: [B, T * d_s]. Returns probabilities [B].
  Tensor operator()(const Tensor& X, const Tensor& story) const;

  std::vector<Conv2d> tower;
  Linear frame_proj;
  Linear text_proj;
  Linear hidden;
  Linear head;

 private:
  std::size_t frames_ = 0;
  std::size_t feat_ = 0;
};

// -1/2 E[log D_img(fake)] - 1/2 E[log D_story(fake)]
Tensor generator_adv_loss(const Tensor& img_fake_probs, const Tensor& story_fake_probs);
// -1/2 E[log D(real)] - 1/2 E[log(1 - D(fake))]
Tensor discriminator_loss(const Tensor& real_probs, const Tensor& fake_probs);
// Mean per-label binary cross-entropy.
Tensor char_loss(const Tensor& char_logits, const std::vector<double>& labels);

}  // namespace duco
