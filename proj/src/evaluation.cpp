#include "duco/evaluation.hpp"

#include <fstream>
#include <map>

#include "duco/archive.hpp"
#include "duco/batch.hpp"
#include "duco/errors.hpp"
#include "duco/metrics.hpp"

namespace duco {

namespace {

constexpr const char* kSnapshotMagic = "DUCOSNAP";

nlohmann::json section(const RunConfig& cfg, const char* name) { return to_json(cfg).at(name); }

void require_snapshot(const std::filesystem::path& path, const std::string& which) {
  if (!std::filesystem::exists(path))
    throw DependencyError("no " + which + " snapshot at " + path.string() + "; pretrain " + which + " first");
}

Archive read_snapshot(const std::filesystem::path& path, const std::string& which) {
  require_snapshot(path, which);
  Archive ar = read_archive(path, kSnapshotMagic);
  if (ar.header.value("kind", std::string()) != which)
    throw ConfigError(path.string() + " is not a " + which + " snapshot");
  return ar;
}

void expect_equal(const nlohmann::json& header, const std::string& key, const nlohmann::json& want,
                  const std::filesystem::path& path) {
  if (!header.contains(key) || header.at(key) != want)
    throw ConfigError("snapshot " + path.string() + " was built with " + key + "=" +
                      (header.contains(key) ? header.at(key).dump() : std::string("<missing>")) + ", config has " +
                      want.dump());
}

// Shape-defining fields only; optimizer settings may differ between runs.
nlohmann::json captioner_shape(const RunConfig& cfg) {
  auto j = section(cfg, "captioner");
  return {{"region_dim", j["region_dim"]}, {"region_grid", j["region_grid"]}, {"word_dim", j["word_dim"]},
          {"mart", j["mart"]}, {"frames", cfg.data.frames_per_story}, {"max_len", cfg.data.max_len},
          {"image_size", cfg.data.image_size}};
}

nlohmann::json classifier_shape(const RunConfig& cfg, std::size_t num_characters) {
  return {{"base_channels", cfg.classifier.base_channels}, {"feature_dim", cfg.classifier.feature_dim},
          {"image_size", cfg.data.image_size}, {"num_characters", num_characters}};
}

nlohmann::json damsm_shape(const RunConfig& cfg) {
  return {{"dim", cfg.damsm.dim}, {"word_dim", cfg.damsm.word_dim}, {"frames", cfg.data.frames_per_story},
          {"image_size", cfg.data.image_size}};
}

void write_snapshot(const std::filesystem::path& path, const std::string& kind, const Module& model,
                    nlohmann::json shape, const nlohmann::json& extra, const nlohmann::json& report) {
  Archive ar;
  ar.header["kind"] = kind;
  ar.header["shape"] = std::move(shape);
  for (auto it = extra.begin(); it != extra.end(); ++it) ar.header[it.key()] = it.value();
  ar.header["report"] = report;
  ar.add_parameters(kind, model.parameters());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_archive(path, kSnapshotMagic, ar);
}

std::vector<std::string> words_of(const data::Vocab& vocab, const std::vector<std::int64_t>& ids) {
  std::vector<std::string> w;
  for (auto id : ids) w.push_back(vocab.token(id));
  return w;
}

std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) s += (s.empty() ? "" : " ") + w;
  return s;
}

Tensor frames_tensor(const std::vector<const data::Image*>& ims) {
  const std::size_t H = ims.front()->height, W = ims.front()->width;
  std::vector<double> v;
  v.reserve(ims.size() * 3 * H * W);
  for (const auto* im : ims) v.insert(v.end(), im->pixels.begin(), im->pixels.end());
  return Tensor::from({ims.size(), 3, H, W}, std::move(v));
}

std::vector<std::vector<double>> rows_of(const Tensor& t) {
  const std::size_t n = t.dim(0), d = t.numel() / n;
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(t.data().begin() + i * d, t.data().begin() + (i + 1) * d);
  return out;
}

}  // namespace

void save_captioner(const std::filesystem::path& path, const VideoCaptioner& model, const RunConfig& cfg,
                    const data::Vocab& vocab, const nlohmann::json& report) {
  write_snapshot(path, "captioner", model, captioner_shape(cfg),
                 {{"vocab_hash", vocab.hash()}, {"vocab_size", vocab.size()}}, report);
}

VideoCaptioner load_captioner(const std::filesystem::path& path, const RunConfig& cfg, const data::Vocab& vocab) {
  const Archive ar = read_snapshot(path, "captioner");
  expect_equal(ar.header, "shape", captioner_shape(cfg), path);
  expect_equal(ar.header, "vocab_hash", vocab.hash(), path);
  std::mt19937_64 rng(0);
  VideoCaptioner model(cfg.captioner, vocab.size(), cfg.data.frames_per_story, cfg.data.max_len, cfg.data.image_size,
                       rng);
  ar.restore_parameters("captioner", model.parameters());
  model.freeze_for_inference();
  return model;
}

void save_classifier(const std::filesystem::path& path, const CharClassifier& model, const RunConfig& cfg,
                     std::size_t num_characters, const nlohmann::json& report) {
  write_snapshot(path, "classifier", model, classifier_shape(cfg, num_characters), nlohmann::json::object(), report);
}

CharClassifier load_classifier(const std::filesystem::path& path, const RunConfig& cfg, std::size_t num_characters) {
  const Archive ar = read_snapshot(path, "classifier");
  expect_equal(ar.header, "shape", classifier_shape(cfg, num_characters), path);
  std::mt19937_64 rng(0);
  CharClassifier model(cfg.classifier, cfg.data.image_size, num_characters, rng);
  ar.restore_parameters("classifier", model.parameters());
  model.set_training(false);
  model.freeze();
  return model;
}

void save_damsm(const std::filesystem::path& path, const HDamsm& model, const RunConfig& cfg, const data::Vocab& vocab,
                const nlohmann::json& report) {
  write_snapshot(path, "damsm", model, damsm_shape(cfg), {{"vocab_hash", vocab.hash()}, {"vocab_size", vocab.size()}},
                 report);
}

HDamsm load_damsm(const std::filesystem::path& path, const RunConfig& cfg, const data::Vocab& vocab) {
  const Archive ar = read_snapshot(path, "damsm");
  expect_equal(ar.header, "shape", damsm_shape(cfg), path);
  expect_equal(ar.header, "vocab_hash", vocab.hash(), path);
  std::mt19937_64 rng(0);
  HDamsm model(cfg.damsm, vocab.size(), cfg.data.frames_per_story, cfg.data.image_size, rng);
  ar.restore_parameters("damsm", model.parameters());
  model.set_training(false);
  model.freeze();
  return model;
}

nlohmann::json snapshot_header(const std::filesystem::path& path) {
  return read_archive(path, kSnapshotMagic).header;
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["char_f1"] = char_f1;
  j["char_exact_match"] = char_exact_match;
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < per_character_f1.size(); ++i)
    per[i < character_names.size() ? character_names[i] : std::to_string(i)] = per_character_f1[i];
  j["per_character_f1"] = per;
  j["bleu2"] = bleu2;
  j["bleu3"] = bleu3;
  j["disc_top1"] = disc_top1;
  j["disc_top2"] = disc_top2;
  j["disc_sets"] = disc_sets;
  j["disc_skipped"] = disc_skipped;
  j["r_precision_mean"] = r_precision_mean;
  j["r_precision_std"] = r_precision_std;
  j["r_precision_runs"] = r_precision_runs;
  nlohmann::ordered_json meta;
  meta["checkpoint"] = checkpoint;
  meta["split"] = split;
  meta["seed"] = seed;
  meta["stories"] = stories;
  meta["frames"] = frames;
  j["metadata"] = meta;
  return j;
}

std::vector<std::string> validate_metric_report(const nlohmann::json& j, std::size_t expected_runs) {
  std::vector<std::string> problems;
  if (!j.is_object()) return {"report is not an object"};
  auto rate = [&](const std::string& key) {
    if (!j.contains(key) || !j.at(key).is_number())
      problems.push_back(key + " missing or not a number");
    else if (j.at(key).get<double>() < 0.0 || j.at(key).get<double>() > 100.0)
      problems.push_back(key + " outside [0, 100]");
  };
  for (const char* key : {"char_f1", "char_exact_match", "bleu2", "bleu3", "disc_top1", "disc_top2", "r_precision_mean"})
    rate(key);
  if (!j.contains("r_precision_std") || !j.at("r_precision_std").is_number() || j.at("r_precision_std").get<double>() < 0)
    problems.push_back("r_precision_std missing or negative");
  if (!j.contains("per_character_f1") || !j.at("per_character_f1").is_object() || j.at("per_character_f1").empty()) {
    problems.push_back("per_character_f1 missing or empty");
  } else {
    for (auto it = j.at("per_character_f1").begin(); it != j.at("per_character_f1").end(); ++it)
      if (!it->is_number() || it->get<double>() < 0.0 || it->get<double>() > 100.0)
        problems.push_back("per_character_f1." + it.key() + " outside [0, 100]");
  }
  if (!j.contains("r_precision_runs") || !j.at("r_precision_runs").is_array() ||
      j.at("r_precision_runs").size() != expected_runs)
    problems.push_back("r_precision_runs must hold " + std::to_string(expected_runs) + " values");
  if (!j.contains("metadata") || !j.at("metadata").is_object()) {
    problems.push_back("metadata missing");
  } else {
    for (const char* key : {"checkpoint", "split", "seed"})
      if (!j.at("metadata").contains(key)) problems.push_back(std::string("metadata.") + key + " missing");
  }
  return problems;
}

MetricReport full_report(StoryGenerator& generator, const data::StoryDataset& split, const MetricModels& models,
                         const RunConfig& cfg, const EvalOptions& options) {
  if (!models.classifier) throw DependencyError("missing metric model: classifier (pretrain classifier first)");
  if (!models.captioner) throw DependencyError("missing metric model: captioner (pretrain captioner first)");
  if (!models.damsm) throw DependencyError("missing metric model: damsm (pretrain damsm first)");
  if (!models.classifier->frozen() || !models.captioner->frozen() || !models.damsm->frozen())
    throw ContractError("metric models must be frozen before scoring");
  if (split.stories.empty()) throw DataIntegrityError("cannot evaluate an empty split");
  if (split.stories.size() < cfg.eval.r_precision_candidates)
    throw DataIntegrityError("R-precision needs at least " + std::to_string(cfg.eval.r_precision_candidates) +
                             " stories; split " + data::to_string(split.split) + " has " +
                             std::to_string(split.stories.size()));
  NoGradGuard guard;
  const std::size_t C = split.char_names.size(), T = split.frames_per_story();
  const std::size_t S = cfg.data.image_size, n = split.stories.size();

  std::vector<std::uint8_t> preds, labels;
  std::vector<std::vector<std::string>> hyps, refs;
  std::vector<std::vector<double>> final_features(n), visual, text;
  std::ofstream dump;
  if (options.predictions_path) {
    if (options.predictions_path->has_parent_path())
      std::filesystem::create_directories(options.predictions_path->parent_path());
    dump.open(*options.predictions_path);
    if (!dump) throw std::runtime_error("cannot write " + options.predictions_path->string());
  }

  for (std::size_t start = 0; start < n; start += options.batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + options.batch); ++i) idx.push_back(i);
    const auto stories = pick(split, idx);
    const CaptionBatch cb = make_caption_batch(stories);
    const std::size_t B = idx.size();
    Tensor images = generator.generate(cb, options.seed + start).images;

    const auto p = models.classifier->predict(reshape(images, {B * T, 3, S, S}), cfg.eval.threshold);
    preds.insert(preds.end(), p.begin(), p.end());
    Tensor finals = reshape(slice(images, 1, T - 1, 1), {B, 3, S, S});
    const auto feats = rows_of(models.classifier->features(finals));
    for (std::size_t b = 0; b < B; ++b) final_features[idx[b]] = feats[b];

    const auto greedy = models.captioner->greedy(images);
    for (auto& v : rows_of(models.damsm->encode_images(images).story)) visual.push_back(std::move(v));
    for (auto& v : rows_of(models.damsm->encode_text(cb).story)) text.push_back(std::move(v));

    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < T; ++k) {
        const auto& story = *stories[b];
        const auto& cap = story.captions[k];
        labels.insert(labels.end(), story.char_labels[k].begin(), story.char_labels[k].end());
        hyps.push_back(words_of(split.vocab, greedy[b][k]));
        refs.push_back(words_of(split.vocab, {cap.ids.begin(), cap.ids.begin() + cap.length}));
        if (dump) {
          const std::size_t r = b * T + k;
          nlohmann::ordered_json line;
          line["story"] = story.id;
          line["frame"] = k;
          line["labels"] = story.char_labels[k];
          line["predictions"] = std::vector<int>(p.begin() + r * C, p.begin() + (r + 1) * C);
          line["caption"] = join(refs.back());
          line["redescription"] = join(hyps.back());
          dump << line.dump() << '\n';
        }
      }
  }

  MetricReport rep;
  const auto cs = metrics::score_characters(preds, labels, C);
  rep.char_f1 = cs.micro_f1;
  rep.char_exact_match = cs.exact_match;
  rep.per_character_f1 = cs.per_character_f1;
  rep.character_names = split.char_names;
  rep.bleu2 = metrics::corpus_bleu(hyps, refs, 2, cfg.eval.bleu_epsilon);
  rep.bleu3 = metrics::corpus_bleu(hyps, refs, 3, cfg.eval.bleu_epsilon);

  // Discriminative ranking: generated final frame against the real candidates.
  const auto sets = data::build_discriminative_sets(split, cfg.eval.num_negatives, options.seed);
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> real;
  std::vector<data::FrameRef> pending;
  for (const auto& set : sets.sets)
    for (const auto& c : set.candidates)
      if (real.emplace(std::make_pair(c.story, c.frame), std::vector<double>{}).second) pending.push_back(c);
  for (std::size_t i = 0; i < pending.size(); i += 64) {
    std::vector<const data::Image*> ims;
    for (std::size_t j = i; j < std::min(pending.size(), i + 64); ++j) ims.push_back(&data::resolve(split, pending[j]));
    const auto feats = rows_of(models.classifier->features(frames_tensor(ims)));
    for (std::size_t j = 0; j < feats.size(); ++j) real[{pending[i + j].story, pending[i + j].frame}] = feats[j];
  }
  std::vector<metrics::RankingQuery> queries;
  for (const auto& set : sets.sets) {
    metrics::RankingQuery q;
    q.query = final_features[set.target.story];
    for (const auto& c : set.candidates) q.candidates.push_back(real.at({c.story, c.frame}));
    q.answer = set.answer_index;
    queries.push_back(std::move(q));
  }
  if (!queries.empty()) {
    const auto acc = metrics::ranking_accuracy(queries);
    rep.disc_top1 = acc.top1;
    rep.disc_top2 = acc.top2;
  }
  rep.disc_sets = sets.sets.size();
  rep.disc_skipped = sets.skipped.size();

  const auto rp = metrics::r_precision(visual, text, cfg.eval.r_precision_runs, cfg.eval.r_precision_candidates,
                                       options.seed);
  rep.r_precision_mean = rp.mean;
  rep.r_precision_std = rp.std;
  rep.r_precision_runs = rp.runs;

  rep.checkpoint = options.checkpoint_id;
  rep.split = data::to_string(split.split);
  rep.seed = options.seed;
  rep.stories = n;
  rep.frames = n * T;
  return rep;
}

}  // namespace duco
