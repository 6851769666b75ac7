// duco: dataset generation, metric-model pretraining, GAN training,
// evaluation and story grids. Every output lands under the run directory:
//
//   <out>/data/                      ShapeStories in Pororo-SV layout
//   <out>/snapshots/<which>.snap     frozen metric models (+ <which>_report.json)
//   <out>/train/                     checkpoints/, loss_log.jsonl, val_log.jsonl, config.json
//   <out>/eval/<ckpt>_<split>.json   MetricReport (+ _predictions.jsonl)
//   <out>/generate/<ckpt>_<name>.png ground-truth row over generated row per story

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "duco/batch.hpp"
#include "duco/config.hpp"
#include "duco/data.hpp"
#include "duco/errors.hpp"
#include "duco/evaluation.hpp"
#include "duco/image_io.hpp"
#include "duco/metrics.hpp"
#include "duco/training.hpp"

namespace fs = std::filesystem;
using namespace duco;

namespace {

struct Globals {
  std::string config_file;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
};

std::string quote(const std::string& s) {
  if (s.find_first_of(" \t'\"$") == std::string::npos) return s;
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

// The global flags as typed, so diagnostics can print an exact command.
std::string flags_of(const Globals& g) {
  std::string s;
  if (!g.config_file.empty()) s += " --config " + quote(g.config_file);
  if (!g.preset.empty()) s += " --preset " + g.preset;
  if (g.seed) s += " --seed " + std::to_string(*g.seed);
  if (!g.out.empty()) s += " --out " + quote(g.out);
  for (const auto& a : g.sets) s += " --set " + quote(a);
  return s;
}

RunConfig resolve_config(const Globals& g) {
  nlohmann::json doc = nlohmann::json::object();
  if (!g.config_file.empty()) {
    std::ifstream in(g.config_file);
    if (!in) throw ConfigError("cannot open config file " + g.config_file);
    doc = nlohmann::json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config file is not valid JSON: " + g.config_file);
  }
  if (!g.preset.empty()) doc["preset"] = g.preset;
  if (g.seed) doc["seed"] = *g.seed;
  if (!g.out.empty()) doc["output_dir"] = g.out;
  for (const auto& a : g.sets) apply_override(doc, a);
  RunConfig cfg = config_from_json(doc);
  if (cfg.output_dir.empty()) {
    const char* root = std::getenv("DUCO_OUTPUT_ROOT");
    cfg.output_dir = (fs::path(root && *root ? root : "duco_runs") / (cfg.preset + "_seed" + std::to_string(cfg.seed)))
                         .string();
  }
  return cfg;
}

fs::path out_dir(const RunConfig& cfg) { return cfg.output_dir; }
fs::path snapshot_path(const RunConfig& cfg, const std::string& which) {
  return out_dir(cfg) / "snapshots" / (which + ".snap");
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

data::StoryCorpus load_data(const RunConfig& cfg, const Globals& g) {
  data::LoadOptions lo{cfg.data.image_size, cfg.data.max_len};
  if (cfg.data.source == "pororo") {
    if (cfg.data.root.empty()) throw ConfigError("data.root must point at a Pororo-SV tree when data.source is pororo");
    return data::load_corpus(cfg.data.root, lo);
  }
  const fs::path root = out_dir(cfg) / "data";
  if (!fs::exists(root / "splits.json"))
    throw DependencyError("no dataset at " + root.string() + "; generate it first: duco gen-data" + flags_of(g));
  return data::load_corpus(root, lo);
}

void require_snapshot(const RunConfig& cfg, const Globals& g, const std::string& which) {
  const auto p = snapshot_path(cfg, which);
  if (!fs::exists(p))
    throw DependencyError("no " + which + " snapshot at " + p.string() + "; pretrain " + which +
                          " first: duco pretrain " + which + flags_of(g));
}

ProgressFn printer(const std::string& tag) {
  return [tag](const std::string& msg) { std::cout << "[" << tag << "] " << msg << std::endl; };
}

fs::path resolve_checkpoint(const RunConfig& cfg, const Globals& g, const std::string& name) {
  if (fs::exists(name) && fs::is_regular_file(name)) return name;
  const fs::path p = out_dir(cfg) / "train" / "checkpoints" / (name + ".ckpt");
  if (!fs::exists(p))
    throw DependencyError("no checkpoint '" + name + "' at " + p.string() + "; train first: duco train" + flags_of(g));
  return p;
}

std::string checkpoint_id(const std::string& name) { return fs::path(name).stem().string(); }

// Character micro-F1 of generated frames, used for validation during training.
double generated_char_f1(StoryGenerator& gen, const data::StoryDataset& ds, const CharClassifier& clf,
                         const RunConfig& cfg, std::uint64_t seed) {
  const std::size_t T = ds.frames_per_story(), S = cfg.data.image_size;
  std::vector<std::uint8_t> preds, labels;
  for (std::size_t start = 0; start < ds.stories.size(); start += 10) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.stories.size(), start + 10); ++i) idx.push_back(i);
    const auto stories = pick(ds, idx);
    Tensor images = gen.generate(make_caption_batch(stories), seed + start).images;
    NoGradGuard guard;
    const auto p = clf.predict(reshape(images, {idx.size() * T, 3, S, S}), cfg.eval.threshold);
    preds.insert(preds.end(), p.begin(), p.end());
    for (const auto* s : stories)
      for (const auto& l : s->char_labels) labels.insert(labels.end(), l.begin(), l.end());
  }
  return metrics::score_characters(preds, labels, ds.char_names.size()).micro_f1;
}

int cmd_gen_data(const RunConfig& cfg) {
  if (cfg.data.source != "shapestories")
    throw ConfigError("gen-data synthesizes ShapeStories only; data.source is " + cfg.data.source);
  data::SynthConfig sc;
  sc.num_stories = cfg.data.num_stories;
  sc.frames_per_story = cfg.data.frames_per_story;
  sc.image_size = cfg.data.image_size;
  sc.max_len = cfg.data.max_len;
  sc.val_fraction = cfg.data.val_fraction;
  sc.test_fraction = cfg.data.test_fraction;
  const auto corpus = data::generate_shape_stories(sc, cfg.seed);
  const fs::path root = out_dir(cfg) / "data";
  fs::remove_all(root);
  data::export_pororo_sv(corpus, root);
  std::ostringstream fp;
  fp << std::hex << std::setw(16) << std::setfill('0') << data::fingerprint(corpus);
  std::cout << "wrote " << corpus.stories.size() << " stories to " << root.string() << " (fingerprint " << fp.str()
            << ")" << std::endl;
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, const Globals& g, const std::string& which) {
  const auto corpus = load_data(cfg, g);
  const auto train = corpus.select(data::Split::train), val = corpus.select(data::Split::val);
  const std::size_t T = cfg.data.frames_per_story, S = cfg.data.image_size;
  const auto path = snapshot_path(cfg, which);
  fs::create_directories(path.parent_path());
  nlohmann::ordered_json report;
  if (which == "classifier") {
    std::mt19937_64 rng(cfg.seed + 11);
    CharClassifier clf(cfg.classifier, S, train.char_names.size(), rng);
    const auto r = train_char_classifier(clf, train, val, cfg.classifier, cfg.seed, cfg.eval.threshold, printer(which));
    report = {{"epochs", r.epochs}, {"precision", r.precision}, {"recall", r.recall},
              {"micro_f1", r.micro_f1}, {"exact_match", r.exact_match}};
    save_classifier(path, clf, cfg, train.char_names.size(), report);
  } else if (which == "damsm") {
    std::mt19937_64 rng(cfg.seed + 12);
    HDamsm dm(cfg.damsm, train.vocab.size(), T, S, rng);
    const auto r = train_h_damsm(dm, train, val, cfg.damsm, cfg.seed, printer(which));
    report = {{"epochs", r.epochs}, {"final_loss", r.final_loss}, {"val_r_precision", r.val_r_precision}};
    save_damsm(path, dm, cfg, train.vocab, report);
  } else {
    std::mt19937_64 rng(cfg.seed + 13);
    VideoCaptioner cap(cfg.captioner, train.vocab.size(), T, cfg.data.max_len, S, rng);
    const auto r = pretrain_captioner(cap, train, val, cfg.captioner, cfg.seed, printer(which));
    report = {{"epochs", r.epochs}, {"best_val_loss", r.best_val_loss}, {"token_accuracy", r.token_accuracy},
              {"val_history", r.val_history}};
    save_captioner(path, cap, cfg, train.vocab, report);
  }
  write_json(out_dir(cfg) / "snapshots" / (which + "_report.json"), report);
  std::cout << which << " snapshot " << path.string() << " " << report.dump() << std::endl;
  return 0;
}

int cmd_train(const RunConfig& cfg, const Globals& g, std::optional<std::size_t> max_steps, bool resume) {
  const auto corpus = load_data(cfg, g);
  const auto train = corpus.select(data::Split::train), val = corpus.select(data::Split::val);
  std::optional<VideoCaptioner> cap;
  if (cfg.train.lambda_dual != 0.0) {
    require_snapshot(cfg, g, "captioner");
    cap = load_captioner(snapshot_path(cfg, "captioner"), cfg, train.vocab);
  }
  std::optional<CharClassifier> clf;
  if (fs::exists(snapshot_path(cfg, "classifier")))
    clf = load_classifier(snapshot_path(cfg, "classifier"), cfg, train.char_names.size());
  else
    std::cout << "no classifier snapshot; validation F1 and best.ckpt are skipped" << std::endl;

  const fs::path dir = out_dir(cfg) / "train";
  Trainer trainer(cfg, train, cap ? &*cap : nullptr);
  const fs::path last = dir / "checkpoints" / "last.ckpt";
  if (resume) {
    if (!fs::exists(last)) throw DependencyError("nothing to resume: " + last.string() + " does not exist");
    trainer.load_checkpoint(last);
    std::cout << "resumed at step " << trainer.steps_done() << std::endl;
  }
  write_json(dir / "config.json", to_json(cfg));

  Trainer::RunOptions opts;
  opts.out_dir = dir;
  opts.max_steps = max_steps;
  opts.on_step = [&](const LossRecord& r) {
    if ((r.step + 1) % cfg.train.log_every == 0) std::cout << r.to_json().dump() << std::endl;
  };
  if (clf && !val.stories.empty())
    opts.on_epoch_end = [&](std::uint64_t epoch) -> std::optional<double> {
      const double f1 = generated_char_f1(trainer.generator(), val, *clf, cfg, cfg.seed);
      std::cout << "epoch " << epoch << " val char F1 " << f1 << std::endl;
      return f1;
    };
  trainer.run(opts);
  std::cout << "trained to step " << trainer.steps_done() << "; checkpoints in " << (dir / "checkpoints").string()
            << std::endl;
  return 0;
}

int cmd_eval(const RunConfig& cfg, const Globals& g, const std::string& checkpoint, const std::string& split_name,
             std::uint64_t seed) {
  for (const char* which : {"captioner", "classifier", "damsm"}) require_snapshot(cfg, g, which);
  const auto corpus = load_data(cfg, g);
  const auto split = corpus.select(data::parse_split(split_name));
  const auto ckpt = resolve_checkpoint(cfg, g, checkpoint);
  const auto cap = load_captioner(snapshot_path(cfg, "captioner"), cfg, split.vocab);
  const auto clf = load_classifier(snapshot_path(cfg, "classifier"), cfg, split.char_names.size());
  const auto dm = load_damsm(snapshot_path(cfg, "damsm"), cfg, split.vocab);
  auto gen = build_generator(cfg, split.vocab.size());
  load_generator(ckpt, cfg, gen);

  const std::string id = checkpoint_id(checkpoint);
  const fs::path dir = out_dir(cfg) / "eval";
  EvalOptions opt;
  opt.checkpoint_id = id;
  opt.seed = seed;
  opt.predictions_path = dir / (id + "_" + split_name + "_predictions.jsonl");
  const auto rep = full_report(gen, split, {&clf, &cap, &dm}, cfg, opt);
  const fs::path path = dir / (id + "_" + split_name + ".json");
  write_json(path, rep.to_json());
  std::cout << std::fixed << std::setprecision(2) << "char_f1 " << rep.char_f1 << " EM " << rep.char_exact_match
            << " BLEU2 " << rep.bleu2 << " BLEU3 " << rep.bleu3 << " top1 " << rep.disc_top1 << " top2 "
            << rep.disc_top2 << " R-prec " << rep.r_precision_mean << " +- " << rep.r_precision_std << " -> "
            << path.string() << std::endl;
  return 0;
}

// One story per line: a JSON array of T caption strings.
std::vector<data::Story> read_caption_file(const fs::path& path, const data::Vocab& vocab, const RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open captions file " + path.string());
  std::vector<data::Story> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    const std::string where = path.string() + ":" + std::to_string(n);
    if (!j.is_array() || j.size() != cfg.data.frames_per_story)
      throw ConfigError(where + ": expected a JSON array of " + std::to_string(cfg.data.frames_per_story) +
                        " captions");
    data::Story s;
    s.id = "line" + std::to_string(n);
    for (const auto& c : j) {
      if (!c.is_string()) throw ConfigError(where + ": captions must be strings");
      for (const auto& tok : data::tokenize(c.get<std::string>()))
        if (!vocab.contains(tok)) throw ConfigError(where + ": word '" + tok + "' is not in the training vocabulary");
      s.captions.push_back(data::encode_caption(vocab, c.get<std::string>(), cfg.data.max_len));
      s.frames.push_back(data::Image::blank(cfg.data.image_size, cfg.data.image_size));
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ConfigError("captions file " + path.string() + " holds no stories");
  return out;
}

int cmd_generate(const RunConfig& cfg, const Globals& g, const std::string& checkpoint, const std::string& captions,
                 const std::string& split_name, std::size_t count, std::size_t scale, std::uint64_t seed) {
  const auto corpus = load_data(cfg, g);
  const auto ckpt = resolve_checkpoint(cfg, g, checkpoint);
  auto gen = build_generator(cfg, corpus.vocab.size());
  load_generator(ckpt, cfg, gen);

  std::vector<data::Story> stories;
  std::string name;
  const bool from_file = !captions.empty();
  if (from_file) {
    stories = read_caption_file(captions, corpus.vocab, cfg);
    name = fs::path(captions).stem().string();
  } else {
    auto split = corpus.select(data::parse_split(split_name));
    if (split.stories.empty()) throw DataIntegrityError("split " + split_name + " is empty");
    split.stories.resize(std::min(count, split.stories.size()));
    stories = std::move(split.stories);
    name = split_name;
  }
  std::vector<const data::Story*> ptrs;
  for (const auto& s : stories) ptrs.push_back(&s);
  const auto images = to_images(gen.generate(make_caption_batch(ptrs), seed).images);

  const std::size_t T = cfg.data.frames_per_story, px = cfg.data.image_size * scale;
  auto up = [&](const data::Image& im) { return data::resize(im, px, px); };
  std::vector<std::vector<data::Image>> rows;
  for (std::size_t b = 0; b < stories.size(); ++b) {
    if (!from_file) {
      std::vector<data::Image> truth;
      for (const auto& f : stories[b].frames) truth.push_back(up(f));
      rows.push_back(std::move(truth));
    }
    std::vector<data::Image> fake;
    for (std::size_t k = 0; k < T; ++k) fake.push_back(up(images[b * T + k]));
    rows.push_back(std::move(fake));
  }
  const fs::path path = out_dir(cfg) / "generate" / (checkpoint_id(checkpoint) + "_" + name + ".png");
  fs::create_directories(path.parent_path());
  data::write_grid_png(path, rows);
  std::cout << "wrote " << stories.size() << " stories to " << path.string() << std::endl;
  return 0;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"duco: story visualization with a dual captioning loss"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_file, "JSON config file overlaid on the preset");
  app.add_option("--preset", g.preset, "desk or paper; overrides the config file")
      ->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", g.seed, "Run seed; overrides the config file");
  app.add_option("--out", g.out, "Run directory (default $DUCO_OUTPUT_ROOT/<preset>_seed<seed>)");
  app.add_option("--set", g.sets, "Override one key, e.g. --set train.lr_g=1e-4 (repeatable, applied last)");

  auto* gen_data = app.add_subcommand("gen-data", "Synthesize the ShapeStories dataset under <out>/data");

  auto* pretrain = app.add_subcommand("pretrain", "Train and freeze one metric model");
  std::string which;
  pretrain->add_option("which", which, "captioner, classifier or damsm")
      ->required()
      ->check(CLI::IsMember({"captioner", "classifier", "damsm"}));

  auto* train = app.add_subcommand("train", "Adversarial training; writes <out>/train");
  std::optional<std::size_t> max_steps;
  bool resume = false;
  train->add_option("--max-steps", max_steps, "Stop after this many steps (overrides train.max_steps)");
  train->add_flag("--resume", resume, "Continue from <out>/train/checkpoints/last.ckpt");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint; writes <out>/eval/<ckpt>_<split>.json");
  std::string checkpoint = "last", split = "val";
  std::uint64_t eval_seed = 7;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint name under <out>/train/checkpoints, or a path")
      ->capture_default_str();
  eval->add_option("--split", split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  eval->add_option("--eval-seed", eval_seed, "Seed for generation and candidate sampling")->capture_default_str();

  auto* generate = app.add_subcommand("generate", "Render ground-truth and generated rows to a PNG grid");
  std::string captions;
  std::size_t count = 4, scale = 4;
  generate->add_option("--checkpoint", checkpoint, "Checkpoint name or path")->capture_default_str();
  generate->add_option("--captions", captions, "File of stories, one JSON array of captions per line");
  generate->add_option("--split", split, "Split to draw stories from when --captions is absent")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  generate->add_option("--count", count, "Stories to draw from the split")->capture_default_str();
  generate->add_option("--scale", scale, "Integer upscaling of each frame")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  generate->add_option("--eval-seed", eval_seed, "Seed for generation")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const RunConfig cfg = resolve_config(g);
    if (gen_data->parsed()) return cmd_gen_data(cfg);
    if (pretrain->parsed()) return cmd_pretrain(cfg, g, which);
    if (train->parsed()) return cmd_train(cfg, g, max_steps, resume);
    if (eval->parsed()) return cmd_eval(cfg, g, checkpoint, split, eval_seed);
    if (generate->parsed()) return cmd_generate(cfg, g, checkpoint, captions, split, count, scale, eval_seed);
  } catch (const ConfigError& e) {
    std::cerr << "duco: config error: " << one_line(e.what()) << std::endl;
    return 2;
  } catch (const DependencyError& e) {
    std::cerr << "duco: missing dependency: " << one_line(e.what()) << std::endl;
    return 3;
  } catch (const DataIntegrityError& e) {
    std::cerr << "duco: data error: " << one_line(e.what()) << std::endl;
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "duco: error: " << one_line(e.what()) << std::endl;
    return 1;
  }
  return 1;
}
