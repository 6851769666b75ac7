#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "duco/errors.hpp"
#include "duco/evaluation.hpp"
#include "duco/training.hpp"
#include "fixtures.hpp"

namespace duco {
namespace {

namespace fs = std::filesystem;
using testing::tiny_config;

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("duco_eval_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Untrained but frozen metric models: enough to exercise the plumbing.
struct EvalFixture {
  RunConfig cfg = [] {
    auto c = tiny_config();
    c.eval.r_precision_candidates = 5;
    return c;
  }();
  data::StoryCorpus corpus = testing::tiny_corpus(cfg);
  data::StoryDataset train = corpus.select(data::Split::train);
  std::mt19937_64 rng{21};
  CharClassifier clf{cfg.classifier, cfg.data.image_size, train.char_names.size(), rng};
  VideoCaptioner cap{cfg.captioner, train.vocab.size(), 5, cfg.data.max_len, cfg.data.image_size, rng};
  HDamsm damsm{cfg.damsm, train.vocab.size(), 5, cfg.data.image_size, rng};
  StoryGenerator gen = build_generator(cfg, train.vocab.size());

  EvalFixture() {
    clf.freeze();
    clf.set_training(false);
    cap.freeze_for_inference();
    damsm.freeze();
    damsm.set_training(false);
  }
  MetricModels models() const { return {&clf, &cap, &damsm}; }
};

TEST(FullReport, FieldsInRangeAndSchemaValid) {
  EvalFixture fx;
  EvalOptions opt;
  opt.checkpoint_id = "init";
  const auto rep = full_report(fx.gen, fx.train, fx.models(), fx.cfg, opt);
  EXPECT_EQ(rep.stories, fx.train.stories.size());
  EXPECT_EQ(rep.frames, 5 * fx.train.stories.size());
  EXPECT_EQ(rep.per_character_f1.size(), fx.train.char_names.size());
  EXPECT_EQ(rep.r_precision_runs.size(), 10u);
  const auto j = rep.to_json();
  EXPECT_TRUE(validate_metric_report(nlohmann::json::parse(j.dump())).empty());
  for (const char* key : {"char_f1", "char_exact_match", "bleu2", "bleu3", "disc_top1", "disc_top2", "r_precision_mean"}) {
    EXPECT_GE(j.at(key).get<double>(), 0.0) << key;
    EXPECT_LE(j.at(key).get<double>(), 100.0) << key;
  }
  EXPECT_EQ(j.at("metadata").at("checkpoint"), "init");
  EXPECT_EQ(j.at("metadata").at("split"), "train");
}

TEST(FullReport, SameSeedSameReport) {
  EvalFixture fx;
  EvalOptions opt;
  opt.seed = 3;
  const auto a = full_report(fx.gen, fx.train, fx.models(), fx.cfg, opt).to_json().dump();
  const auto b = full_report(fx.gen, fx.train, fx.models(), fx.cfg, opt).to_json().dump();
  EXPECT_EQ(a, b);
}

TEST(FullReport, CharF1RecomputedFromDump) {
  EvalFixture fx;
  const auto dir = scratch("dump");
  EvalOptions opt;
  opt.predictions_path = dir / "predictions.jsonl";
  const auto rep = full_report(fx.gen, fx.train, fx.models(), fx.cfg, opt);

  std::ifstream in(*opt.predictions_path);
  std::string line;
  std::size_t tp = 0, fp = 0, fn = 0, exact = 0, frames = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto p = j.at("predictions").get<std::vector<int>>();
    const auto y = j.at("labels").get<std::vector<int>>();
    ASSERT_EQ(p.size(), y.size());
    bool all = true;
    for (std::size_t c = 0; c < p.size(); ++c) {
      tp += p[c] && y[c];
      fp += p[c] && !y[c];
      fn += !p[c] && y[c];
      all = all && p[c] == y[c];
    }
    exact += all;
    ++frames;
  }
  ASSERT_EQ(frames, rep.frames);
  const double denom = 2.0 * tp + fp + fn;
  EXPECT_DOUBLE_EQ(rep.char_f1, denom == 0 ? 100.0 : 100.0 * 2 * tp / denom);
  EXPECT_DOUBLE_EQ(rep.char_exact_match, 100.0 * exact / frames);
  fs::remove_all(dir);
}

TEST(FullReport, MissingOrUnfrozenModels) {
  EvalFixture fx;
  EvalOptions opt;
  auto m = fx.models();
  m.captioner = nullptr;
  try {
    full_report(fx.gen, fx.train, m, fx.cfg, opt);
    FAIL() << "expected DependencyError";
  } catch (const DependencyError& e) {
    EXPECT_NE(std::string(e.what()).find("pretrain captioner"), std::string::npos);
  }
  m = fx.models();
  m.damsm = nullptr;
  EXPECT_THROW(full_report(fx.gen, fx.train, m, fx.cfg, opt), DependencyError);

  std::mt19937_64 rng(1);
  CharClassifier live(fx.cfg.classifier, fx.cfg.data.image_size, fx.train.char_names.size(), rng);
  m = fx.models();
  m.classifier = &live;
  EXPECT_THROW(full_report(fx.gen, fx.train, m, fx.cfg, opt), ContractError);

  auto cfg = fx.cfg;
  cfg.eval.r_precision_candidates = 100;
  EXPECT_THROW(full_report(fx.gen, fx.train, fx.models(), cfg, opt), DataIntegrityError);
}

TEST(MetricReport, ValidatorFlagsProblems) {
  MetricReport rep;
  rep.r_precision_runs.assign(10, 1.0);
  rep.character_names = {"a", "b"};
  rep.per_character_f1 = {50.0, 100.0};
  auto j = nlohmann::json::parse(rep.to_json().dump());
  EXPECT_TRUE(validate_metric_report(j).empty());
  j["bleu2"] = 101.0;
  j["r_precision_std"] = -1.0;
  j["r_precision_runs"] = std::vector<double>(9, 1.0);
  j["metadata"].erase("seed");
  EXPECT_EQ(validate_metric_report(j).size(), 4u);
}

TEST(Snapshots, RoundTripAndMismatch) {
  EvalFixture fx;
  const auto dir = scratch("snap");
  save_classifier(dir / "classifier.snap", fx.clf, fx.cfg, fx.train.char_names.size());
  save_captioner(dir / "captioner.snap", fx.cap, fx.cfg, fx.train.vocab);
  save_damsm(dir / "damsm.snap", fx.damsm, fx.cfg, fx.train.vocab, {{"final_loss", 1.5}});

  const auto clf = load_classifier(dir / "classifier.snap", fx.cfg, fx.train.char_names.size());
  const auto cap = load_captioner(dir / "captioner.snap", fx.cfg, fx.train.vocab);
  const auto dm = load_damsm(dir / "damsm.snap", fx.cfg, fx.train.vocab);
  EXPECT_EQ(clf.checksum(), fx.clf.checksum());
  EXPECT_EQ(cap.checksum(), fx.cap.checksum());
  EXPECT_EQ(dm.checksum(), fx.damsm.checksum());
  EXPECT_TRUE(clf.frozen() && cap.frozen() && dm.frozen());
  EXPECT_FALSE(cap.training());
  EXPECT_EQ(snapshot_header(dir / "damsm.snap").at("report").at("final_loss"), 1.5);

  auto other = fx.cfg;
  other.classifier.feature_dim += 1;
  EXPECT_THROW(load_classifier(dir / "classifier.snap", other, fx.train.char_names.size()), ConfigError);
  other = fx.cfg;
  other.captioner.word_dim += 2;
  EXPECT_THROW(load_captioner(dir / "captioner.snap", other, fx.train.vocab), ConfigError);
  const auto foreign = data::Vocab::build({"an entirely different vocabulary"});
  EXPECT_THROW(load_damsm(dir / "damsm.snap", fx.cfg, foreign), ConfigError);

  try {
    load_captioner(dir / "absent.snap", fx.cfg, fx.train.vocab);
    FAIL() << "expected DependencyError";
  } catch (const DependencyError& e) {
    EXPECT_NE(std::string(e.what()).find("pretrain captioner first"), std::string::npos);
  }
  fs::remove_all(dir);
}

}  // namespace
}  // namespace duco
