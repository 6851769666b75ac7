#pragma once

// Video captioner used both as the frozen dual network and as the BLEU
// evaluation captioner. At frame k a MART step attends over
// [memory ; N region tokens ; <bos> w_1 .. w_L]; region tokens see only
// regions, text tokens see all regions and the text prefix up to themselves.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "duco/batch.hpp"
#include "duco/config.hpp"
#include "duco/mart.hpp"
#include "duco/nn.hpp"

namespace duco {

class RegionExtractor : public Module {
 public:
  RegionExtractor() = default;
  RegionExtractor(std::size_t image_size, std::size_t region_dim, std::mt19937_64& rng);
  // images [R, 3, S, S] -> [R, N, d_f] with N = (S/8)^2.
  Tensor operator()(const Tensor& images) const;

  std::vector<Conv2d> convs;
};

// Mean over unmasked rows of -logp[r, target[r]]; logp is [R, V].
Tensor mean_nll(const Tensor& log_probs, const std::vector<std::int64_t>& targets,
                const std::vector<std::uint8_t>& mask);

struct CaptionTargets {
  std::vector<std::int64_t> inputs;   // [B*T*(L+1)]: <bos> w_1 .. w_L
  std::vector<std::int64_t> targets;  // [B*T*(L+1)]: w_1 .. w_n <eos> <pad>...
  std::vector<std::uint8_t> mask;     // 1 for the n + 1 scored positions
};
CaptionTargets make_caption_targets(const CaptionBatch& captions);

class VideoCaptioner : public Module {
 public:
  VideoCaptioner() = default;
  VideoCaptioner(const CaptionerConfig& cfg, std::size_t vocab_size, std::size_t frames, std::size_t max_len,
                 std::size_t image_size, std::mt19937_64& rng);

  struct FrameStep {
    Tensor log_probs;  // [B, L+1, V]
    MemoryState memory;
  };
  // regions [B, N, d_f]; text ids [B*(L+1)]; text_len[b] = visible text tokens (>= 1).
  FrameStep step(const Tensor& regions, const std::vector<std::int64_t>& text, const std::vector<std::size_t>& text_len,
                 const MemoryState& memory, std::mt19937_64& rng) const;

  MemoryState initial_memory(std::size_t batch) const;

  // Teacher-forced per-frame distributions; images [B, T, 3, S, S].
  std::vector<Tensor> teacher_forced(const Tensor& images, const CaptionBatch& captions, std::mt19937_64& rng) const;
  // Mean NLL of the ground-truth captions (no freeze requirement).
  Tensor caption_loss(const Tensor& images, const CaptionBatch& captions, std::mt19937_64& rng) const;
  // L_dual; throws ContractError unless the captioner is frozen.
  Tensor dual_loss(const Tensor& images, const CaptionBatch& captions) const;

  // Greedy decoding: [B][T] token ids without <bos>/<eos>.
  std::vector<std::vector<std::vector<std::int64_t>>> greedy(const Tensor& images) const;

  void freeze_for_inference() {
    set_training(false);
    freeze();
  }

  std::size_t frames() const { return frames_; }
  std::size_t max_len() const { return max_len_; }
  std::size_t vocab_size() const { return vocab_; }

  RegionExtractor extractor;
  Linear region_in;
  Embedding embedding;
  Mart mart;
  Tensor memory0;  // [layers, M, H]
  Linear vocab_head;

 private:
  CaptionerConfig cfg_;
  std::size_t vocab_ = 0, frames_ = 0, max_len_ = 0, regions_ = 0;
};

struct CaptionerReport {
  std::size_t epochs = 0;
  double best_val_loss = 0.0;
  double token_accuracy = 0.0;  // greedy, on the validation stories, percent
  std::vector<double> val_history;
};

using ProgressFn = std::function<void(const std::string&)>;

// Cross-entropy pretraining with early stopping on the validation loss; the
// best parameters are restored and the model is frozen on return.
CaptionerReport pretrain_captioner(VideoCaptioner& captioner, const data::StoryDataset& train,
                                   const data::StoryDataset& val, const CaptionerConfig& cfg, std::uint64_t seed,
                                   const ProgressFn& progress = {});

// Position-wise greedy accuracy over reference tokens plus <eos>, percent.
double token_accuracy(const std::vector<std::vector<std::int64_t>>& hyps,
                      const std::vector<std::vector<std::int64_t>>& refs);

}  // namespace duco
