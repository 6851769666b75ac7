#pragma once

// Small configurations and corpora shared by the model tests.

#include <random>

#include "duco/batch.hpp"
#include "duco/config.hpp"
#include "duco/data.hpp"

namespace duco::testing {

// Every width shrunk so a forward/backward pass takes milliseconds.
inline RunConfig tiny_config() {
  RunConfig cfg = preset_config("desk");
  cfg.data.num_stories = 60;
  cfg.data.image_size = 16;
  cfg.data.max_len = 12;
  MartConfig mart;
  mart.hidden_size = 12;
  mart.num_layers = 2;
  mart.num_heads = 2;
  mart.num_memory_cells = 2;
  mart.dropout = 0.0;
  mart.max_seq_len = 32;
  cfg.model.d_w = 8;
  cfg.model.d_s = 10;
  cfg.model.d_h = 9;
  cfg.model.mart = mart;
  cfg.model.gru_hidden = 6;
  cfg.model.c_out = 8;
  cfg.model.d_p = 5;
  cfg.model.stage1_channels = 8;
  cfg.model.image_channels = 6;
  cfg.model.output_channels = 4;
  cfg.model.region_grid = 2;
  cfg.model.disc_channels = 4;
  cfg.captioner.region_dim = 16;
  cfg.captioner.region_grid = 2;
  cfg.captioner.word_dim = 8;
  cfg.captioner.mart = mart;
  cfg.captioner.batch = 4;
  cfg.captioner.max_epochs = 2;
  cfg.captioner.patience = 1;
  cfg.classifier.base_channels = 4;
  cfg.classifier.feature_dim = 16;
  cfg.classifier.epochs = 1;
  cfg.damsm.dim = 8;
  cfg.damsm.word_dim = 8;
  cfg.damsm.epochs = 1;
  cfg.train.image_batch = 10;
  cfg.train.story_batch = 2;
  return cfg;
}

inline data::StoryCorpus tiny_corpus(const RunConfig& cfg, std::uint64_t seed = 7) {
  data::SynthConfig sc;
  sc.num_stories = cfg.data.num_stories;
  sc.frames_per_story = cfg.data.frames_per_story;
  sc.image_size = cfg.data.image_size;
  sc.max_len = cfg.data.max_len;
  return data::generate_shape_stories(sc, seed);
}

inline CaptionBatch first_stories(const data::StoryDataset& ds, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return make_caption_batch(pick(ds, idx));
}

}  // namespace duco::testing
