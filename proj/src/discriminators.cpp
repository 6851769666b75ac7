#include "duco/discriminators.hpp"

#include <stdexcept>

namespace duco {

ImageDiscriminator::ImageDiscriminator(const ModelConfig& cfg, std::size_t image_size, std::size_t num_characters,
                                       std::mt19937_64& rng) {
  const std::size_t c = cfg.disc_channels;
  tower.emplace_back(3, c, 4, 2, 1, rng);
  tower.emplace_back(c, 2 * c, 4, 2, 1, rng);
  tower.emplace_back(2 * c, 4 * c, 4, 2, 1, rng);
  for (std::size_t i = 0; i < tower.size(); ++i) register_module("tower" + std::to_string(i), tower[i]);
  grid_ = image_size / 8;
  cond_channels_ = 2 * c;
  cond = Linear(cfg.d_s + cfg.d_h, cond_channels_, rng);
  joint = Conv2d(4 * c + cond_channels_, 4 * c, 3, 1, 1, rng);
  head = Linear(4 * c * grid_ * grid_, 1, rng);
  char_head = Linear(4 * c * grid_ * grid_, num_characters, rng);
  register_module("cond", cond);
  register_module("joint", joint);
  register_module("head", head);
  register_module("char_head", char_head);
}

ImageDiscriminator::Output ImageDiscriminator::operator()(const Tensor& x, const Tensor& s, const Tensor& h0) const {
  const std::size_t B = x.dim(0);
  Tensor h = x;
  for (const auto& conv : tower) h = leaky_relu(conv(h));
  if (h.dim(2) != grid_) throw std::invalid_argument("ImageDiscriminator: unexpected image size");
  Tensor cvec = leaky_relu(cond(concat({s, h0}, 1)));
  Tensor cmap = expand(reshape(cvec, {B, cond_channels_, 1, 1}), {B, cond_channels_, grid_, grid_});
  Tensor j = leaky_relu(joint(concat({h, cmap}, 1)));
  Output out;
  out.logit = reshape(head(reshape(j, {B, j.numel() / B})), {B});
  out.prob = sigmoid(out.logit);
  out.char_logits = char_head(reshape(h, {B, h.numel() / B}));
  return out;
}

StoryDiscriminator::StoryDiscriminator(const ModelConfig& cfg, std::size_t image_size, std::size_t frames,
                                       std::mt19937_64& rng)
    : frames_(frames) {
  const std::size_t c = cfg.disc_channels;
  tower.emplace_back(3, c, 4, 2, 1, rng);
  tower.emplace_back(c, 2 * c, 4, 2, 1, rng);
  tower.emplace_back(2 * c, 2 * c, 4, 2, 1, rng);
  for (std::size_t i = 0; i < tower.size(); ++i) register_module("tower" + std::to_string(i), tower[i]);
  const std::size_t grid = image_size / 8;
  feat_ = 2 * c;
  frame_proj = Linear(2 * c * grid * grid, feat_, rng);
  text_proj = Linear(frames * cfg.d_s, 2 * feat_, rng);
  hidden = Linear(frames * feat_ + 2 * feat_, 2 * feat_, rng);
  head = Linear(2 * feat_, 1, rng);
  register_module("frame_proj", frame_proj);
  register_module("text_proj", text_proj);
  register_module("hidden", hidden);
  register_module("head", head);
}

Tensor StoryDiscriminator::operator()(const Tensor& X, const Tensor& story) const {
  if (X.rank() != 5 || X.dim(1) != frames_)
    throw std::invalid_argument("StoryDiscriminator expects [B, " + std::to_string(frames_) + ", 3, H, W], got " +
                                shape_str(X.shape()));
  const std::size_t B = X.dim(0);
  Tensor h = reshape(X, {B * frames_, 3, X.dim(3), X.dim(4)});
  for (const auto& conv : tower) h = leaky_relu(conv(h));
  Tensor f = leaky_relu(frame_proj(reshape(h, {B * frames_, h.numel() / (B * frames_)})));
  Tensor seq = reshape(f, {B, frames_ * feat_});  // concatenated in frame order
  Tensor t = leaky_relu(text_proj(story));
  Tensor z = leaky_relu(hidden(concat({seq, t}, 1)));
  return reshape(sigmoid(head(z)), {B});
}

Tensor generator_adv_loss(const Tensor& img_fake_probs, const Tensor& story_fake_probs) {
  return -0.5 * mean(clamped_log(img_fake_probs, kProbFloor)) - 0.5 * mean(clamped_log(story_fake_probs, kProbFloor));
}

Tensor discriminator_loss(const Tensor& real_probs, const Tensor& fake_probs) {
  return -0.5 * mean(clamped_log(real_probs, kProbFloor)) - 0.5 * mean(clamped_log(1.0 - fake_probs, kProbFloor));
}

Tensor char_loss(const Tensor& char_logits, const std::vector<double>& labels) {
  return bce_with_logits(char_logits, labels);
}

}  // namespace duco
