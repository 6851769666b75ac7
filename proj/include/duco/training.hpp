#pragma once

// Adversarial training. One step is
//   (a) one image-discriminator update on image_batch real/fake frames,
//   (b) one story-discriminator update on story_batch real/fake stories,
//   (c) g_updates generator updates, each on a fresh story batch,
// with every batch drawn from one seeded sampler stream.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "duco/captioner.hpp"
#include "duco/config.hpp"
#include "duco/data.hpp"
#include "duco/discriminators.hpp"
#include "duco/generator.hpp"
#include "duco/optim.hpp"

namespace duco {

struct LossRecord {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double kl = 0.0;
  double g_adv = 0.0;
  double dual = 0.0;
  double d_img = 0.0;
  double d_story = 0.0;
  double char_loss = 0.0;
  double lr_g = 0.0;
  double lr_d = 0.0;

  nlohmann::ordered_json to_json() const;
  bool finite() const;
};

struct UpdateCounters {
  std::uint64_t d_img = 0;
  std::uint64_t d_story = 0;
  std::uint64_t g = 0;
};

// Seeded permutation stream over story indices; reshuffles when exhausted.
class StorySampler {
 public:
  StorySampler() = default;
  StorySampler(std::size_t count, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t n);

  nlohmann::json state() const;
  void load_state(const nlohmann::json& j);

 private:
  std::vector<std::size_t> perm_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

StoryGenerator build_generator(const RunConfig& cfg, std::size_t vocab_size);
// Restores the generator group of a checkpoint after validating its model hash.
void load_generator(const std::filesystem::path& checkpoint, const RunConfig& cfg, StoryGenerator& generator);

class Trainer {
 public:
  // captioner must be frozen unless lambda_dual == 0 (it may then be null).
  Trainer(const RunConfig& cfg, const data::StoryDataset& train, const VideoCaptioner* captioner);

  LossRecord step();

  struct RunOptions {
    std::filesystem::path out_dir;          // checkpoints/, loss_log.jsonl
    std::optional<std::size_t> max_steps;   // overrides the config
    // Called after every completed epoch; may return a validation score that
    // is logged and used to keep checkpoints/best.ckpt.
    std::function<std::optional<double>(std::uint64_t epoch)> on_epoch_end;
    std::function<void(const LossRecord&)> on_step;
  };
  void run(const RunOptions& opts);

  double lr_g_for_epoch(std::uint64_t epoch) const;
  double lr_d_for_epoch(std::uint64_t epoch) const;
  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  std::uint64_t steps_done() const { return step_; }
  std::uint64_t epoch() const { return step_ / steps_per_epoch_; }
  const UpdateCounters& counters() const { return counters_; }

  void save_checkpoint(const std::filesystem::path& path) const;
  // Throws ConfigError on a model-hash mismatch and std::runtime_error on a
  // corrupt file; state is untouched on failure.
  void load_checkpoint(const std::filesystem::path& path);

  StoryGenerator& generator() { return generator_; }
  const ImageDiscriminator& image_disc() const { return image_disc_; }
  const StoryDiscriminator& story_disc() const { return story_disc_; }

  // Activations of the most recent updates (for recomputation checks).
  struct DiscActivations {
    Tensor real_prob, fake_prob, char_logits;
    std::vector<double> labels;
  };
  struct GenActivations {
    Tensor img_prob, story_prob, mu, sigma2, images;
    CaptionBatch captions;
    double kl = 0.0, g_adv = 0.0, dual = 0.0;
  };
  const DiscActivations& last_image_disc() const { return last_di_; }
  const DiscActivations& last_story_disc() const { return last_ds_; }
  const GenActivations& last_generator() const { return last_g_; }

  // Squared L2 norm of the generator gradient from the dual term alone on a
  // fresh batch (used to check that lambda_dual gates the signal).
  double dual_gradient_norm();

 private:
  Tensor frames_h0(const Tensor& h0) const;
  void apply_lr();

  RunConfig cfg_;
  const data::StoryDataset& train_;
  const VideoCaptioner* captioner_;
  StoryGenerator generator_;
  ImageDiscriminator image_disc_;
  StoryDiscriminator story_disc_;
  Adam opt_g_, opt_di_, opt_ds_;
  std::mt19937_64 rng_;
  StorySampler sampler_;
  UpdateCounters counters_;
  std::uint64_t step_ = 0;
  std::size_t steps_per_epoch_ = 1;
  DiscActivations last_di_, last_ds_;
  GenActivations last_g_;
};

}  // namespace duco
