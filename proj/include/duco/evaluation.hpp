#pragma once

// Metric-model snapshots and the MetricReport that scores a generator
// checkpoint on one split: character F1 / exact match, BLEU-2/3 from the
// captioner's redescriptions, discriminative top-1/top-2 ranking and
// R-precision under H-DAMSM.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "duco/captioner.hpp"
#include "duco/config.hpp"
#include "duco/data.hpp"
#include "duco/eval_models.hpp"
#include "duco/generator.hpp"

namespace duco {

// Snapshots record the sub-config that fixes their shapes and the
// vocabulary hash; loading validates both and returns a frozen model.
// A missing file raises DependencyError naming the pretrain command.
void save_captioner(const std::filesystem::path& path, const VideoCaptioner& model, const RunConfig& cfg,
                    const data::Vocab& vocab, const nlohmann::json& report = {});
VideoCaptioner load_captioner(const std::filesystem::path& path, const RunConfig& cfg, const data::Vocab& vocab);

void save_classifier(const std::filesystem::path& path, const CharClassifier& model, const RunConfig& cfg,
                     std::size_t num_characters, const nlohmann::json& report = {});
CharClassifier load_classifier(const std::filesystem::path& path, const RunConfig& cfg, std::size_t num_characters);

void save_damsm(const std::filesystem::path& path, const HDamsm& model, const RunConfig& cfg, const data::Vocab& vocab,
                const nlohmann::json& report = {});
HDamsm load_damsm(const std::filesystem::path& path, const RunConfig& cfg, const data::Vocab& vocab);

// Header of a snapshot without loading its arrays.
nlohmann::json snapshot_header(const std::filesystem::path& path);

struct MetricReport {
  double char_f1 = 0.0;
  double char_exact_match = 0.0;
  std::vector<std::string> character_names;
  std::vector<double> per_character_f1;
  double bleu2 = 0.0;
  double bleu3 = 0.0;
  double disc_top1 = 0.0;
  double disc_top2 = 0.0;
  std::size_t disc_sets = 0;
  std::size_t disc_skipped = 0;
  double r_precision_mean = 0.0;
  double r_precision_std = 0.0;
  std::vector<double> r_precision_runs;

  std::string checkpoint;
  std::string split;
  std::uint64_t seed = 0;
  std::size_t stories = 0;
  std::size_t frames = 0;

  nlohmann::ordered_json to_json() const;
};

// Empty when `j` is a well-formed report; otherwise one message per problem.
std::vector<std::string> validate_metric_report(const nlohmann::json& j, std::size_t expected_runs = 10);

struct MetricModels {
  const CharClassifier* classifier = nullptr;
  const VideoCaptioner* captioner = nullptr;
  const HDamsm* damsm = nullptr;
};

struct EvalOptions {
  std::string checkpoint_id;
  std::uint64_t seed = 7;
  std::size_t batch = 10;  // stories generated at once
  // Line-delimited per-frame predictions (labels, decisions, redescription).
  std::optional<std::filesystem::path> predictions_path;
};

// Generates every story of `split` and scores it. Throws DependencyError
// naming any missing metric model.
MetricReport full_report(StoryGenerator& generator, const data::StoryDataset& split, const MetricModels& models,
                         const RunConfig& cfg, const EvalOptions& options);

}  // namespace duco
