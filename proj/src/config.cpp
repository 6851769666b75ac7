#include "duco/config.hpp"

#include <fstream>

#include "duco/archive.hpp"
#include "duco/errors.hpp"

namespace duco {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DataConfig, source, root, num_stories, frames_per_story, image_size, max_len,
                                   val_fraction, test_fraction)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MartConfig, hidden_size, num_layers, num_heads, num_memory_cells, dropout,
                                   layer_norm_eps, max_seq_len)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, d_w, d_s, d_h, mart, gru_hidden, c_out, d_p, stage1_channels,
                                   image_channels, output_channels, region_grid, disc_channels, memory_init)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CaptionerConfig, variant, region_dim, region_grid, word_dim, mart, lr, batch,
                                   max_epochs, patience)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ClassifierConfig, base_channels, feature_dim, lr, batch, epochs)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DamsmConfig, dim, word_dim, lr, batch, epochs, gamma1, gamma2, gamma3,
                                   gamma_story)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainConfig, lr_g, lr_d, beta1, beta2, epochs, max_steps, lr_decay_every,
                                   lr_decay_factor, checkpoint_every, image_batch, story_batch, g_updates,
                                   lambda_dual, lambda_char, log_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EvalConfig, threshold, num_negatives, r_precision_runs, r_precision_candidates,
                                   bleu_epsilon)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunConfig, preset, seed, output_dir, data, model, captioner, classifier, damsm,
                                   train, eval)

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) {
    // Integers may not be overwritten by fractional values.
    if ((a.is_number_integer() || a.is_number_unsigned()) && b.is_number_float()) return false;
    if (a.is_number_unsigned() && b.is_number_integer() && b.get<std::int64_t>() < 0) return false;
    return true;
  }
  return a.type() == b.type();
}

void overlay(nlohmann::json& base, const nlohmann::json& doc, const std::string& path) {
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key: " + key);
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      if (!it->is_object()) throw ConfigError("config key " + key + " must be an object");
      overlay(slot, *it, key);
    } else {
      if (!same_kind(slot, *it)) throw ConfigError("config key " + key + " has the wrong type (expected " +
                                                   std::string(slot.type_name()) + ")");
      slot = *it;
    }
  }
}

}  // namespace

void MartConfig::validate() const {
  require(hidden_size >= 1 && num_layers >= 1 && num_heads >= 1 && num_memory_cells >= 1 && max_seq_len >= 1,
          "mart sizes must all be >= 1");
  require(hidden_size % num_heads == 0, "mart.hidden_size must be divisible by mart.num_heads");
  require(dropout >= 0.0 && dropout < 1.0, "mart.dropout must lie in [0, 1)");
  require(layer_norm_eps > 0.0, "mart.layer_norm_eps must be positive");
}

void RunConfig::validate() const {
  require(preset == "desk" || preset == "paper", "preset must be desk or paper");
  require(data.source == "shapestories" || data.source == "pororo", "data.source must be shapestories or pororo");
  require(data.num_stories >= 1, "data.num_stories must be >= 1");
  require(data.frames_per_story >= 1, "data.frames_per_story must be >= 1");
  require(data.image_size >= 16 && data.image_size % 8 == 0, "data.image_size must be a multiple of 8, >= 16");
  require(data.max_len >= 1, "data.max_len must be >= 1");
  model.mart.validate();
  captioner.mart.validate();
  require((data.image_size / 2) % model.region_grid == 0, "model.region_grid must divide image_size / 2");
  require(captioner.variant == "mart_video", "captioner.variant: only mart_video is implemented");
  require(train.lr_g > 0 && train.lr_d > 0, "learning rates must be positive");
  require(train.image_batch >= 1 && train.story_batch >= 1 && train.g_updates >= 1, "batch sizes must be >= 1");
  require(train.image_batch % data.frames_per_story == 0, "train.image_batch must be a multiple of frames_per_story");
  require(train.lr_decay_every >= 1 && train.checkpoint_every >= 1, "schedule periods must be >= 1");
  require(damsm.batch >= 2, "damsm.batch must be >= 2 (contrastive loss)");
  require(eval.threshold > 0.0 && eval.threshold < 1.0, "eval.threshold must lie in (0, 1)");
  require(eval.r_precision_candidates >= 2, "eval.r_precision_candidates must be >= 2");
}

RunConfig preset_config(const std::string& preset) {
  RunConfig cfg;
  cfg.preset = preset;
  if (preset == "desk") {
    cfg.train.max_steps = 2000;
    // at 2000 steps the dual signal has to carry the conditioning; 1.0 barely moves char F1
    cfg.train.lambda_dual = 4.0;
    cfg.captioner.max_epochs = 8;
    cfg.captioner.patience = 2;
    cfg.damsm.epochs = 3;
    return cfg;
  }
  if (preset != "paper") throw ConfigError("unknown preset: " + preset);
  cfg.data.image_size = 64;
  cfg.model.d_w = 300;
  cfg.model.mart.hidden_size = 192;
  cfg.model.mart.num_heads = 6;
  cfg.model.gru_hidden = 128;
  cfg.model.c_out = 128;
  cfg.model.image_channels = 64;
  cfg.model.stage1_channels = 128;
  cfg.model.output_channels = 32;
  cfg.model.region_grid = 8;
  cfg.model.disc_channels = 32;
  cfg.captioner.region_dim = 2048;
  cfg.captioner.region_grid = 8;
  cfg.captioner.word_dim = 300;
  cfg.captioner.mart.hidden_size = 192;
  cfg.captioner.mart.num_heads = 6;
  cfg.captioner.mart.max_seq_len = 128;
  cfg.damsm.dim = 256;
  cfg.damsm.epochs = 6;
  cfg.damsm.word_dim = 300;
  return cfg;
}

nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j = cfg;
  return j;
}

RunConfig config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
  std::string preset = "desk";
  if (doc.contains("preset")) {
    if (!doc["preset"].is_string()) throw ConfigError("config key preset must be a string");
    preset = doc["preset"].get<std::string>();
  }
  nlohmann::json base = to_json(preset_config(preset));
  overlay(base, doc, "");
  RunConfig cfg = base.get<RunConfig>();
  cfg.validate();
  return cfg;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("malformed override key: " + path);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = nlohmann::json::object();
    node = &(*node)[key];
    if (!node->is_object()) throw ConfigError("override path crosses a non-object at " + path.substr(0, dot));
    start = dot + 1;
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  return config_from_json(doc);
}

std::uint64_t model_hash(const RunConfig& cfg) {
  nlohmann::json j;
  j["model"] = cfg.model;
  j["frames"] = cfg.data.frames_per_story;
  j["image_size"] = cfg.data.image_size;
  j["max_len"] = cfg.data.max_len;
  return fnv1a(j.dump());
}

}  // namespace duco
