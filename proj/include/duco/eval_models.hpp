#pragma once

// Models trained independently of the generator and frozen before they
// score anything: the character classifier (whose penultimate layer also
// serves the discriminative ranking) and the hierarchical image-text
// matching model used for R-precision.

#include <random>
#include <vector>

#include "duco/batch.hpp"
#include "duco/captioner.hpp"
#include "duco/config.hpp"
#include "duco/nn.hpp"

namespace duco {

class CharClassifier : public Module {
 public:
  CharClassifier() = default;
  CharClassifier(const ClassifierConfig& cfg, std::size_t image_size, std::size_t num_characters,
                 std::mt19937_64& rng);

  Tensor features(const Tensor& images) const;  // [R, feature_dim]
  Tensor logits(const Tensor& images) const;    // [R, C]

  // Thresholded sigmoid decisions, row-major [R * C].
  std::vector<std::uint8_t> predict(const Tensor& images, double threshold) const;

  std::vector<Conv2d> convs;
  Linear feature;
  Linear head;
};

struct ClassifierReport {
  std::size_t epochs = 0;
  double precision = 0.0;
  double recall = 0.0;
  double micro_f1 = 0.0;
  double exact_match = 0.0;
};

ClassifierReport train_char_classifier(CharClassifier& clf, const data::StoryDataset& train,
                                       const data::StoryDataset& val, const ClassifierConfig& cfg,
                                       std::uint64_t seed, double threshold, const ProgressFn& progress = {});

// [n, m] cosine similarities between rows.
Tensor cosine_matrix(const Tensor& a, const Tensor& b);
// Mean of -log softmax(logits)[i, i] over rows.
Tensor diagonal_cross_entropy(const Tensor& logits);
// Story-level matching: cross-entropy of gamma * cos(v_i, t_j) in both
// directions (visual -> text and text -> visual), summed.
Tensor story_matching_loss(const Tensor& visual, const Tensor& text, double gamma);

class HDamsm : public Module {
 public:
  HDamsm() = default;
  HDamsm(const DamsmConfig& cfg, std::size_t vocab_size, std::size_t frames, std::size_t image_size,
         std::mt19937_64& rng);

  struct Text {
    Tensor words;      // [R, L, dim]
    Tensor sentences;  // [R, dim]
    Tensor story;      // [B, dim]
  };
  Text encode_text(const CaptionBatch& captions) const;

  struct Visual {
    Tensor local;   // [R, N, dim]
    Tensor global;  // [R, dim]
    Tensor story;   // [B, dim], mean of the frame vectors
  };
  Visual encode_images(const Tensor& images) const;  // [B, T, 3, S, S]

  struct Losses {
    Tensor word, sentence, story, total;
  };
  Losses losses(const Tensor& images, const CaptionBatch& captions) const;

  Embedding embedding;
  BiLSTM word_rnn;
  BiLSTM story_rnn;
  std::vector<Conv2d> convs;
  Linear global;

 private:
  DamsmConfig cfg_;
  std::size_t frames_ = 0;
};

struct DamsmReport {
  std::size_t epochs = 0;
  double final_loss = 0.0;
  double val_r_precision = -1.0;  // ground truth pairs; -1 when the split is too small
};

DamsmReport train_h_damsm(HDamsm& model, const data::StoryDataset& train, const data::StoryDataset& val,
                          const DamsmConfig& cfg, std::uint64_t seed, const ProgressFn& progress = {});

// Story embeddings for every story of ds, batched; images override the
// dataset frames when given ([S, T, 3, H, W]).
struct StoryEmbeddings {
  std::vector<std::vector<double>> visual;
  std::vector<std::vector<double>> text;
};
StoryEmbeddings embed_stories(const HDamsm& model, const data::StoryDataset& ds, const Tensor* images = nullptr);

}  // namespace duco
