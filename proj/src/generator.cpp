#include "duco/generator.hpp"

#include <stdexcept>

namespace duco {

namespace {

std::vector<std::uint8_t> region_mask(const std::vector<std::uint8_t>& mask, std::size_t B, std::size_t N,
                                      std::size_t L) {
  std::vector<std::uint8_t> out(B * N * L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t i = 0; i < L; ++i) out[(b * N + j) * L + i] = mask[b * L + i];
  return out;
}

bool power_of_two(std::size_t v) { return v && !(v & (v - 1)); }

}  // namespace

RegionAttention region_word_attention(const Tensor& words, const std::vector<std::uint8_t>& mask,
                                      const Tensor& regions) {
  if (words.rank() != 3 || regions.rank() != 3 || words.dim(0) != regions.dim(0) || words.dim(2) != regions.dim(1))
    throw std::invalid_argument("region_word_attention: words " + shape_str(words.shape()) + " vs regions " +
                                shape_str(regions.shape()));
  const std::size_t B = words.dim(0), L = words.dim(1), N = regions.dim(2);
  if (mask.size() != B * L) throw std::invalid_argument("region_word_attention: mask size mismatch");
  Tensor logits = matmul(transpose(regions, 1, 2), transpose(words, 1, 2));  // [B, N, L]
  Tensor beta = masked_softmax(logits, region_mask(mask, B, N, L));
  Tensor context = transpose(matmul(beta, words), 1, 2);  // [B, D, N]
  return {context, beta};
}

ImageGenerator::ImageGenerator(const ModelConfig& cfg, std::size_t image_size, std::mt19937_64& rng)
    : cfg_(cfg), image_size_(image_size), grid_(cfg.region_grid) {
  const std::size_t half = image_size / 2;
  if (half < 4 || !power_of_two(half / 4) || half % 4)
    throw std::invalid_argument("ImageGenerator: image_size / 8 must be a power of two");
  if (half % grid_ || !power_of_two(half / grid_))
    throw std::invalid_argument("ImageGenerator: region grid must divide image_size / 2 by a power of two");
  const std::size_t D = cfg.image_channels, C0 = cfg.stage1_channels;
  seed = Linear(cfg.c_out, C0 * 16, rng);
  register_module("seed", seed);
  std::size_t ch = C0;
  const std::size_t mid = std::max(D, C0 / 2);
  for (std::size_t size = 4, i = 0; size < half; size *= 2, ++i) {
    const std::size_t next = size * 2 == half ? D : mid;
    up1.emplace_back(ch, next, 3, 1, 1, rng);
    register_module("up1_" + std::to_string(i), up1.back());
    ch = next;
  }
  if (up1.empty()) throw std::invalid_argument("ImageGenerator: image too small");
  lowres_head = Conv2d(D, 3, 3, 1, 1, rng);
  copy_u = Linear(cfg.mart.hidden_size, D, rng, false);
  word_u = Linear(cfg.mart.hidden_size, D, rng, false);
  joint = Conv2d(3 * D, D, 3, 1, 1, rng);
  res_a = Conv2d(D, D, 3, 1, 1, rng);
  res_b = Conv2d(D, D, 3, 1, 1, rng);
  up2 = Conv2d(D, cfg.output_channels, 3, 1, 1, rng);
  out = Conv2d(cfg.output_channels, 3, 3, 1, 1, rng);
  register_module("lowres", lowres_head);
  register_module("copy_u", copy_u);
  register_module("word_u", word_u);
  register_module("joint", joint);
  register_module("res_a", res_a);
  register_module("res_b", res_b);
  register_module("up2", up2);
  register_module("out", out);
}

ImageGenerator::Stage1 ImageGenerator::stage1(const Tensor& o) const {
  const std::size_t B = o.dim(0);
  Tensor h = relu(reshape(seed(o), {B, cfg_.stage1_channels, 4, 4}));
  for (const auto& conv : up1) h = relu(conv(upsample_nearest2x(h)));
  return {h, tanh(lowres_head(h))};
}

Tensor ImageGenerator::regions(const Tensor& feature_map) const {
  const std::size_t B = feature_map.dim(0), D = feature_map.dim(1);
  return reshape(avg_pool2d(feature_map, feature_map.dim(2) / grid_), {B, D, grid_ * grid_});
}

RegionAttention ImageGenerator::copy_transform(const Tensor& m, const std::vector<std::uint8_t>& mask,
                                               const Tensor& prev) const {
  return region_word_attention(copy_u(m), mask, prev);
}

ImageGenerator::Stage2 ImageGenerator::stage2(const Tensor& f1, const Tensor& m, const std::vector<std::uint8_t>& mask,
                                              const Tensor& copy_context) const {
  const std::size_t B = f1.dim(0), D = cfg_.image_channels, half = f1.dim(2);
  auto word = region_word_attention(word_u(m), mask, regions(f1));
  auto to_map = [&](const Tensor& ctx) {
    Tensor t = reshape(ctx, {B, D, grid_, grid_});
    for (std::size_t s = grid_; s < half; s *= 2) t = upsample_nearest2x(t);
    return t;
  };
  Tensor h = relu(joint(concat({f1, to_map(word.context), to_map(copy_context)}, 1)));
  h = relu(h + res_b(relu(res_a(h))));
  Stage2 st;
  st.features = regions(h);
  st.beta = word.beta;
  st.image = tanh(out(relu(up2(upsample_nearest2x(h)))));
  return st;
}

StoryGenerator::StoryGenerator(const ModelConfig& cfg, std::size_t vocab_size, std::size_t frames,
                               std::size_t image_size, std::mt19937_64& rng)
    : text(vocab_size, cfg.d_w, cfg.d_s, cfg.d_h, frames, rng),
      context(cfg, rng),
      image(cfg, image_size, rng),
      frames_(frames),
      image_size_(image_size) {
  register_module("text", text);
  register_module("context", context);
  register_module("image", image);
}

StoryGenerator::Output StoryGenerator::forward(const CaptionBatch& captions, std::mt19937_64& rng,
                                               const std::optional<ConditioningState>& cond) const {
  if (captions.frames != frames_)
    throw std::invalid_argument("StoryGenerator: expected " + std::to_string(frames_) + " frames, got " +
                                std::to_string(captions.frames));
  const std::size_t B = captions.stories, T = captions.frames;
  Output out;
  out.text = text.embed(captions.ids, captions.mask, B * T);
  out.sentences = reshape(out.text.sentences, {B, T, text.d_s()});
  out.cond = cond ? *cond : text.encode_story(out.sentences, rng);
  out.contexts = context.encode(out.text.words, out.sentences, captions.mask, out.cond.h0, rng);
  Tensor prev = Tensor::zeros({B, image.channels(), image.regions_count()});
  std::vector<Tensor> frames;
  for (std::size_t k = 0; k < T; ++k) {
    const auto mk = captions.frame_mask(k);
    const FrameContext& fc = out.contexts[k];
    auto s1 = image.stage1(fc.o);
    auto copy = image.copy_transform(fc.m, mk, prev);
    auto s2 = image.stage2(s1.features, fc.m, mk, copy.context);
    prev = s2.features;
    out.copy_beta.push_back(copy.beta);
    out.word_beta.push_back(s2.beta);
    out.stage2_features.push_back(s2.features);
    frames.push_back(s2.image);
  }
  out.images = stack(frames, 1);
  return out;
}

StoryGenerator::Output StoryGenerator::generate(const CaptionBatch& captions, std::uint64_t seed) {
  const bool was_training = training();
  set_training(false);
  NoGradGuard guard;
  std::mt19937_64 rng(seed);
  Output out = forward(captions, rng);
  set_training(was_training);
  return out;
}

}  // namespace duco
