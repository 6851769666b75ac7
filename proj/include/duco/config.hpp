#pragma once

// Run configuration. A RunConfig is a preset (desk or paper) overlaid with
// a JSON document and then with command-line overrides. Unknown keys and
// type mismatches are rejected with the dotted path of the offending key.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

namespace duco {

struct DataConfig {
  std::string source = "shapestories";  // or "pororo"
  std::string root;                     // Pororo-SV layout root when source == "pororo"
  std::size_t num_stories = 2000;
  std::size_t frames_per_story = 5;
  std::size_t image_size = 32;
  std::size_t max_len = 24;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
};

struct MartConfig {
  std::size_t hidden_size = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t num_memory_cells = 3;
  double dropout = 0.1;
  double layer_norm_eps = 1e-12;
  std::size_t max_seq_len = 64;

  void validate() const;
};

struct ModelConfig {
  std::size_t d_w = 32;
  std::size_t d_s = 128;
  std::size_t d_h = 128;
  MartConfig mart;
  std::size_t gru_hidden = 64;
  std::size_t c_out = 64;
  std::size_t d_p = 32;
  std::size_t stage1_channels = 64;
  std::size_t image_channels = 32;  // D_i
  std::size_t output_channels = 16;
  std::size_t region_grid = 4;      // N = region_grid^2
  std::size_t disc_channels = 16;
  bool memory_init = true;          // false: MART memory starts from zeros
};

struct CaptionerConfig {
  std::string variant = "mart_video";
  std::size_t region_dim = 128;  // d_f
  std::size_t region_grid = 4;
  std::size_t word_dim = 32;
  MartConfig mart;
  double lr = 1e-3;
  std::size_t batch = 8;
  std::size_t max_epochs = 40;
  std::size_t patience = 4;
};

struct ClassifierConfig {
  std::size_t base_channels = 16;
  std::size_t feature_dim = 128;
  double lr = 1e-3;
  std::size_t batch = 32;
  std::size_t epochs = 6;
};

struct DamsmConfig {
  std::size_t dim = 64;
  std::size_t word_dim = 32;
  double lr = 1e-3;
  std::size_t batch = 4;  // stories
  std::size_t epochs = 6;
  double gamma1 = 4.0;
  double gamma2 = 5.0;
  double gamma3 = 10.0;
  double gamma_story = 15.0;
};

struct TrainConfig {
  double lr_g = 2e-4;
  double lr_d = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::size_t epochs = 120;
  std::size_t max_steps = 0;  // 0: run all epochs
  std::size_t lr_decay_every = 20;
  double lr_decay_factor = 0.5;
  std::size_t checkpoint_every = 10;
  std::size_t image_batch = 20;
  std::size_t story_batch = 4;
  std::size_t g_updates = 2;
  double lambda_dual = 1.0;
  double lambda_char = 1.0;
  std::size_t log_every = 50;
};

struct EvalConfig {
  double threshold = 0.5;
  std::size_t num_negatives = 4;
  std::size_t r_precision_runs = 10;
  std::size_t r_precision_candidates = 100;
  double bleu_epsilon = 0.1;
};

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 7;
  std::string output_dir;
  DataConfig data;
  ModelConfig model;
  CaptionerConfig captioner;
  ClassifierConfig classifier;
  DamsmConfig damsm;
  TrainConfig train;
  EvalConfig eval;

  void validate() const;
};

RunConfig preset_config(const std::string& preset);

nlohmann::json to_json(const RunConfig& cfg);
// Overlays `doc` on the preset named by doc["preset"] (default "desk").
RunConfig config_from_json(const nlohmann::json& doc);
// Applies "a.b.c=value"; value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);
RunConfig load_config(const std::filesystem::path& path);

// Hash over everything that fixes parameter shapes.
std::uint64_t model_hash(const RunConfig& cfg);

}  // namespace duco
