// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--only N ...]                   criteria 1-8 (in-process)
//   acceptance --e2e --cli PATH --work DIR      criteria 10 then 9 (CLI pipeline)
//
// Exit status is nonzero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "duco/captioner.hpp"
#include "duco/discriminators.hpp"
#include "duco/errors.hpp"
#include "duco/eval_models.hpp"
#include "duco/evaluation.hpp"
#include "duco/metrics.hpp"
#include "duco/training.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

namespace fs = std::filesystem;
using namespace duco;
using clk = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

// Collects failed sub-checks; the first few are reported.
struct Checks {
  std::vector<std::string> failures;
  void expect(bool cond, const std::string& what) {
    if (!cond) failures.push_back(what);
  }
  Outcome outcome(const std::string& summary) const {
    if (failures.empty()) return {true, summary};
    std::string d = std::to_string(failures.size()) + " check(s) failed: ";
    for (std::size_t i = 0; i < std::min<std::size_t>(3, failures.size()); ++i) d += (i ? "; " : "") + failures[i];
    return {false, d};
  }
};

std::string fmt(double v, int prec = 3) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

double seconds_since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor randn(Shape shape, std::mt19937_64& rng, double sd = 1.0) { return normal_tensor(shape, sd, rng, false); }

// Frozen captioner on the tiny corpus vocabulary.
VideoCaptioner frozen_captioner(const RunConfig& cfg, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  VideoCaptioner cap(cfg.captioner, vocab, cfg.data.frames_per_story, cfg.data.max_len, cfg.data.image_size, rng);
  cap.freeze_for_inference();
  return cap;
}

// ---- 1. analytic loss oracles ----

Outcome analytic_oracles() {
  const auto t0 = clk::now();
  Checks ck;
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> mu_d(-3.0, 3.0), lv_d(-4.0, 2.0);
  std::uniform_int_distribution<std::size_t> dim_d(1, 16);
  double worst_kl = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t B = 1 + i % 3, d = dim_d(rng);
    std::vector<double> mu(B * d), s2(B * d);
    for (std::size_t j = 0; j < B * d; ++j) {
      mu[j] = mu_d(rng);
      s2[j] = std::exp(lv_d(rng));
    }
    long double closed = 0.0L;
    for (std::size_t j = 0; j < B * d; ++j)
      closed += 0.5L * (static_cast<long double>(mu[j]) * mu[j] + s2[j] - std::log(static_cast<long double>(s2[j])) - 1.0L);
    closed /= B;
    const double got = kl_loss(Tensor::from({B, d}, mu), Tensor::from({B, d}, s2)).item();
    worst_kl = std::max(worst_kl, std::abs(got - static_cast<double>(closed)));
  }
  ck.expect(worst_kl < 1e-6, "KL max error " + fmt(worst_kl));

  // Discriminators with zeroed heads output exactly 0.5.
  auto cfg = testing::tiny_config();
  const std::size_t S = cfg.data.image_size, T = cfg.data.frames_per_story, C = 9;
  ImageDiscriminator di(cfg.model, S, C, rng);
  StoryDiscriminator ds(cfg.model, S, T, rng);
  for (auto* t : {&di.head.weight, &di.head.bias, &ds.head.weight, &ds.head.bias})
    std::fill(t->data().begin(), t->data().end(), 0.0);
  const std::size_t B = 3;
  Tensor x = uniform_tensor({B * T, 3, S, S}, 1.0, rng, false);
  Tensor s = randn({B * T, cfg.model.d_s}, rng), h0 = randn({B * T, cfg.model.d_h}, rng);
  Tensor img_p = di(x, s, h0).prob;
  Tensor story_p = ds(reshape(x, {B, T, 3, S, S}), randn({B, T * cfg.model.d_s}, rng));
  for (double p : img_p.data()) ck.expect(p == 0.5, "D_img output " + fmt(p, 17));
  for (double p : story_p.data()) ck.expect(p == 0.5, "D_story output " + fmt(p, 17));
  const double log2 = std::log(2.0);
  const double ld_img = discriminator_loss(img_p, img_p).item();
  const double ld_story = discriminator_loss(story_p, story_p).item();
  const double lg = generator_adv_loss(img_p, story_p).item();
  ck.expect(std::abs(ld_img - log2) < 1e-6, "L_D_img " + fmt(ld_img, 10));
  ck.expect(std::abs(ld_story - log2) < 1e-6, "L_D_story " + fmt(ld_story, 10));
  ck.expect(std::abs(lg - log2) < 1e-6, "L_G " + fmt(lg, 10));

  // Uniform captioner distributions over V = 100.
  auto corpus = testing::tiny_corpus(cfg);
  auto train = corpus.select(data::Split::train);
  std::mt19937_64 crng(102);
  VideoCaptioner cap(cfg.captioner, 100, T, cfg.data.max_len, S, crng);
  std::fill(cap.vocab_head.weight.data().begin(), cap.vocab_head.weight.data().end(), 0.0);
  std::fill(cap.vocab_head.bias.data().begin(), cap.vocab_head.bias.data().end(), 0.0);
  cap.freeze_for_inference();
  const auto stories = pick(train, {0, 1, 2});
  const double dual = cap.dual_loss(make_image_batch(stories), make_caption_batch(stories)).item();
  ck.expect(std::abs(dual - std::log(100.0)) < 1e-6, "dual " + fmt(dual, 10));

  const double secs = seconds_since(t0);
  ck.expect(secs < 60.0, "runtime " + fmt(secs) + " s");
  return ck.outcome("KL max err " + fmt(worst_kl) + " over 100 draws; L_D_img " + fmt(ld_img, 8) + ", L_D_story " +
                    fmt(ld_story, 8) + ", L_G " + fmt(lg, 8) + " vs log2; dual " + fmt(dual, 8) + " vs log 100; " +
                    fmt(secs) + " s");
}

// ---- 2. gradient checks ----

// Checks `count` coordinates drawn uniformly from those parameters of
// `params` that receive a non-negligible gradient.
double param_grad_check(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params,
                        std::size_t count, std::uint64_t seed, std::size_t& checked) {
  for (auto p : params) p.tensor.zero_grad();
  loss().backward();
  std::vector<std::pair<std::size_t, std::size_t>> pool;
  std::vector<std::vector<double>> analytic;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    for (std::size_t i = 0; i < analytic[k].size(); ++i)
      if (std::abs(analytic[k][i]) > 1e-6) pool.emplace_back(k, i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(count, pool.size()));
  double worst = 0.0;
  NoGradGuard guard;
  const double h = 1e-5;
  for (const auto& [k, i] : pool) {
    Tensor t = params[k].tensor;
    const double orig = t.data()[i];
    t.data()[i] = orig + h;
    const double fp = loss().item();
    t.data()[i] = orig - h;
    const double fm = loss().item();
    t.data()[i] = orig;
    worst = std::max(worst, testing::rel_error(analytic[k][i], (fp - fm) / (2 * h)));
  }
  checked = pool.size();
  return worst;
}

Outcome gradient_checks() {
  const auto t0 = clk::now();
  Checks ck;
  auto cfg = testing::tiny_config();
  auto corpus = testing::tiny_corpus(cfg);
  auto train = corpus.select(data::Split::train);
  const std::size_t T = cfg.data.frames_per_story, S = cfg.data.image_size, B = 2;
  StoryGenerator G = build_generator(cfg, train.vocab.size());
  std::mt19937_64 rng(201);
  ImageDiscriminator di(cfg.model, S, train.char_names.size(), rng);
  StoryDiscriminator ds(cfg.model, S, T, rng);
  const VideoCaptioner cap = frozen_captioner(cfg, train.vocab.size(), 202);
  const auto stories = pick(train, {0, 1});
  const CaptionBatch cb = make_caption_batch(stories);
  const Tensor real = reshape(make_image_batch(stories), {B * T, 3, S, S});
  const auto labels = make_label_batch(stories);

  auto fwd = [&] {
    std::mt19937_64 r(7);
    return G.forward(cb, r);
  };
  std::vector<std::pair<std::string, double>> results;
  std::size_t n = 0;
  auto run = [&](const std::string& name, const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params) {
    const double err = param_grad_check(loss, params, 24, 203, n);
    ck.expect(n >= 20, name + " only " + std::to_string(n) + " live coordinates");
    ck.expect(err < 1e-4, name + " rel err " + fmt(err));
    results.emplace_back(name, err);
  };

  run("KL", [&] {
    auto w = G.text.embed(cb.ids, cb.mask, cb.rows());
    std::mt19937_64 r(7);
    return kl_loss(G.text.encode_story(reshape(w.sentences, {B, T, cfg.model.d_s}), r));
  }, G.text.parameters());
  run("G_adv", [&] {
    auto out = fwd();
    Tensor h0 = reshape(expand(unsqueeze(out.cond.h0, 1), {B, T, cfg.model.d_h}), {B * T, cfg.model.d_h});
    Tensor ip = di(reshape(out.images, {B * T, 3, S, S}), out.text.sentences, h0).prob;
    Tensor sp = ds(out.images, reshape(out.sentences, {B, T * cfg.model.d_s}));
    return generator_adv_loss(ip, sp);
  }, G.parameters());
  run("dual", [&] { return cap.dual_loss(fwd().images, cb); }, G.parameters());
  run("char_BCE", [&] {
    std::mt19937_64 r(9);
    Tensor s = randn({B * T, cfg.model.d_s}, r);
    Tensor h0 = randn({B * T, cfg.model.d_h}, r);
    return char_loss(di(real, s, h0).char_logits, labels);
  }, di.parameters());

  std::string summary;
  for (const auto& [name, err] : results) summary += name + " " + fmt(err) + ", ";
  const double secs = seconds_since(t0);
  ck.expect(secs < 300.0, "runtime " + fmt(secs) + " s");
  return ck.outcome("max rel err (double, >=20 coords each): " + summary + fmt(secs) + " s");
}

// ---- 3. attention normalization ----

// rows of `beta` ([..., L]) against per-row key masks.
void check_rows(Checks& ck, const Tensor& beta, std::size_t L, const std::function<bool(std::size_t, std::size_t)>& live,
                const std::string& what, double& worst) {
  const auto& v = beta.data();
  for (std::size_t r = 0; r < v.size() / L; ++r) {
    double total = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
      const double a = v[r * L + i];
      if (!live(r, i) && a != 0.0) ck.expect(false, what + " masked weight " + fmt(a));
      total += a;
    }
    worst = std::max(worst, std::abs(total - 1.0));
  }
}

std::vector<std::uint8_t> random_mask(std::size_t B, std::size_t L, std::mt19937_64& rng) {
  std::bernoulli_distribution keep(0.6);
  std::uniform_int_distribution<std::size_t> any(0, L - 1);
  std::vector<std::uint8_t> m(B * L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < L; ++i) m[b * L + i] = keep(rng);
    m[b * L + any(rng)] = 1;
  }
  return m;
}

Outcome attention_normalization() {
  Checks ck;
  auto cfg = testing::tiny_config();
  std::mt19937_64 rng(301);
  ImageGenerator img(cfg.model, cfg.data.image_size, rng);
  const std::size_t H = cfg.model.mart.hidden_size, D = img.channels(), N = img.regions_count();
  std::uniform_int_distribution<std::size_t> bd(1, 3), ld(1, 8);
  std::uniform_real_distribution<double> scale(0.1, 20.0);
  double w_pool = 0.0, w_copy = 0.0, w_word = 0.0;
  for (int it = 0; it < 1000; ++it) {
    const std::size_t B = bd(rng), L = ld(rng);
    const auto mask = random_mask(B, L, rng);
    const double sc = scale(rng);
    // attention_pool: [B, L] over positions.
    auto pool = attention_pool(randn({B, L, H}, rng, sc), mask, randn({H}, rng));
    check_rows(ck, pool.alpha, L, [&](std::size_t r, std::size_t i) { return mask[r * L + i]; }, "pool", w_pool);
    // copy_transform: [B, N, L] for every previous-frame region.
    Tensor m = randn({B, L, H}, rng, sc);
    const bool first = it % 10 == 0;
    auto copy = img.copy_transform(m, mask, first ? Tensor::zeros({B, D, N}) : randn({B, D, N}, rng, sc));
    auto live = [&](std::size_t r, std::size_t i) { return mask[(r / N) * L + i]; };
    check_rows(ck, copy.beta, L, live, "copy", w_copy);
    // stage-2 word attention against the current features.
    auto s1 = img.stage1(randn({B, cfg.model.c_out}, rng));
    auto st = img.stage2(s1.features, m, mask, copy.context);
    check_rows(ck, st.beta, L, live, "word", w_word);
  }
  ck.expect(w_pool <= 1e-6, "pool sum err " + fmt(w_pool));
  ck.expect(w_copy <= 1e-6, "copy sum err " + fmt(w_copy));
  ck.expect(w_word <= 1e-6, "word sum err " + fmt(w_word));
  return ck.outcome("1000 instances; max |sum-1|: attention_pool " + fmt(w_pool) + ", copy_transform " + fmt(w_copy) +
                    ", stage-2 word " + fmt(w_word) + "; masked weights exactly 0");
}

// ---- 4. recurrence contracts ----

Outcome recurrence_contracts() {
  Checks ck;
  auto cfg = testing::tiny_config();
  auto corpus = testing::tiny_corpus(cfg);
  auto train = corpus.select(data::Split::train);
  const std::size_t T = cfg.data.frames_per_story, L = cfg.data.max_len;
  std::mt19937_64 rng(401);

  // Context encoder: perturbing caption k leaves o_1..o_{k-1} bit-identical.
  ContextEncoder enc(cfg.model, rng);
  TextEncoder text(train.vocab.size(), cfg.model.d_w, cfg.model.d_s, cfg.model.d_h, T, rng);
  const auto base = make_caption_batch(pick(train, {0, 1}));
  const Tensor h0 = randn({2, cfg.model.d_h}, rng);
  auto run_ctx = [&](const CaptionBatch& cb) {
    auto w = text.embed(cb.ids, cb.mask, cb.rows());
    std::mt19937_64 r(5);
    return enc.encode(w.words, reshape(w.sentences, {2, T, cfg.model.d_s}), cb.mask, h0, r);
  };
  const auto ref = run_ctx(base);
  std::size_t ctx_cases = 0;
  for (std::size_t k = 1; k < T; ++k) {
    auto cb = base;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = k; j < T; ++j) {
        const std::size_t row = b * T + j;
        for (std::size_t i = 0; i < L; ++i)
          if (cb.mask[row * L + i]) cb.ids[row * L + i] = 3 + (cb.ids[row * L + i] + 7) % (train.vocab.size() - 3);
      }
    const auto got = run_ctx(cb);
    for (std::size_t j = 0; j < k; ++j)
      ck.expect(values(got[j].o) == values(ref[j].o) && values(got[j].q) == values(ref[j].q),
                "context prefix moved at frame " + std::to_string(j + 1) + " for suffix from " + std::to_string(k + 1));
    ck.expect(values(got[k].o) != values(ref[k].o), "context frame " + std::to_string(k + 1) + " ignored its caption");
    ++ctx_cases;
  }

  // Captioner: perturbing frames/captions k.. leaves earlier distributions bit-identical.
  std::mt19937_64 crng(402);
  VideoCaptioner cap(cfg.captioner, train.vocab.size(), T, L, cfg.data.image_size, crng);
  cap.set_training(false);
  const auto st = pick(train, {2, 3});
  const Tensor images = make_image_batch(st);
  const auto cb = make_caption_batch(st);
  std::mt19937_64 r0(3);
  const auto cref = cap.teacher_forced(images, cb, r0);
  const std::size_t frame = 3 * cfg.data.image_size * cfg.data.image_size;
  for (std::size_t k = 1; k < T; ++k) {
    Tensor pert = images.clone();
    auto cb2 = cb;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = k; j < T; ++j) {
        for (std::size_t i = 0; i < frame; ++i) pert.data()[(b * T + j) * frame + i] *= -0.7;
        cb2.ids[(b * T + j) * L] = 3 + (cb2.ids[(b * T + j) * L] + 1) % (train.vocab.size() - 3);
      }
    std::mt19937_64 r1(3);
    const auto got = cap.teacher_forced(pert, cb2, r1);
    for (std::size_t j = 0; j < k; ++j)
      ck.expect(values(got[j]) == values(cref[j]), "captioner prefix moved at frame " + std::to_string(j + 1));
    ck.expect(values(got[k]) != values(cref[k]), "captioner frame " + std::to_string(k + 1) + " ignored its input");
  }

  // MemoryState serialize/restore mid-sequence.
  const auto& mc = cfg.model.mart;
  Mart mart(mc, 7, rng);
  const std::size_t B = 2, Lx = 4;
  const std::vector<std::uint8_t> mask(B * Lx, 1);
  std::vector<Tensor> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(randn({B, Lx, 7}, rng));
  std::mt19937_64 m0(1);
  MemoryState mem = mart.zero_memory(B);
  std::vector<std::vector<double>> straight;
  std::vector<double> saved;
  for (int i = 0; i < 4; ++i) {
    auto s = mart.step(xs[i], mask, mem, m0);
    straight.push_back(values(s.encodings));
    mem = s.memory;
    if (i == 1) saved = mem.flatten();
  }
  MemoryState resumed = MemoryState::unflatten(saved, mc.num_layers, B, mc.num_memory_cells, mc.hidden_size);
  for (int i = 2; i < 4; ++i) {
    auto s = mart.step(xs[i], mask, resumed, m0);
    ck.expect(values(s.encodings) == straight[i], "MART continuation differs at step " + std::to_string(i + 1));
    resumed = s.memory;
  }
  ck.expect(resumed.flatten() == mem.flatten(), "MART final memory differs after restore");
  return ck.outcome("context encoder " + std::to_string(ctx_cases) + " suffix perturbations, captioner " +
                    std::to_string(T - 1) + ", prefixes bit-exact; MART restore after step 2 continues bit-exactly");
}

// ---- 5. freeze contracts ----

Outcome freeze_contracts() {
  Checks ck;
  auto cfg = testing::tiny_config();
  auto corpus = testing::tiny_corpus(cfg);
  auto train = corpus.select(data::Split::train);
  const VideoCaptioner cap = frozen_captioner(cfg, train.vocab.size(), 501);
  std::mt19937_64 rng(502);
  CharClassifier clf(cfg.classifier, cfg.data.image_size, train.char_names.size(), rng);
  HDamsm dm(cfg.damsm, train.vocab.size(), cfg.data.frames_per_story, cfg.data.image_size, rng);
  clf.freeze();
  dm.freeze();
  const auto c0 = cap.checksum(), k0 = clf.checksum(), d0 = dm.checksum();

  Trainer trainer(cfg, train, &cap);
  const auto g0 = trainer.generator().checksum();
  for (int i = 0; i < 100; ++i) {
    const auto rec = trainer.step();
    ck.expect(rec.finite(), "non-finite loss at step " + std::to_string(i));
    if (i % 25 == 24) {
      // The metric models score generated frames between steps, as during validation.
      auto cb = testing::first_stories(train, 2);
      auto out = trainer.generator().generate(cb, 3);
      NoGradGuard guard;
      clf.predict(reshape(out.images, {10, 3, cfg.data.image_size, cfg.data.image_size}), 0.5);
      dm.encode_images(out.images);
      cap.greedy(out.images);
    }
  }
  ck.expect(cap.checksum() == c0, "captioner checksum changed");
  ck.expect(clf.checksum() == k0, "classifier checksum changed");
  ck.expect(dm.checksum() == d0, "H-DAMSM checksum changed");
  ck.expect(trainer.generator().checksum() != g0, "generator did not train");
  return ck.outcome("100 GAN steps: captioner/classifier/H-DAMSM checksums unchanged, generator checksum moved");
}

// ---- 6. metric oracles ----

Outcome metric_oracles() {
  Checks ck;
  struct Case {
    std::vector<std::uint8_t> p, y;
    std::size_t C;
  };
  const std::vector<Case> cases{
      {{1, 0, 1, 1, 0, 0, 1, 1, 0}, {1, 0, 1, 0, 0, 1, 1, 1, 1}, 3},
      {{1, 1, 0, 0, 1, 0, 1, 0, 1}, {1, 1, 0, 0, 1, 0, 1, 0, 1}, 9},
      {{0, 0, 0, 0, 0, 0}, {0, 1, 0, 1, 0, 0}, 2},
      {{1, 1, 1, 1, 0, 1, 1, 1}, {0, 1, 0, 1, 0, 0, 0, 1}, 4},
      {{0, 1, 1, 0, 1, 1, 0, 0, 1, 0, 1, 1}, {1, 1, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1}, 3},
  };
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto& cs = cases[c];
    std::size_t tp = 0, fp = 0, fn = 0, em = 0;
    const std::size_t F = cs.p.size() / cs.C;
    for (std::size_t f = 0; f < F; ++f) {
      bool same = true;
      for (std::size_t j = 0; j < cs.C; ++j) {
        const auto a = cs.p[f * cs.C + j], b = cs.y[f * cs.C + j];
        tp += a & b;
        fp += a & !b;
        fn += !a & b;
        same &= a == b;
      }
      em += same;
    }
    const double f1 = 2 * tp + fp + fn == 0 ? 100.0 : 100.0 * 2 * tp / (2 * tp + fp + fn);
    const auto got = metrics::score_characters(cs.p, cs.y, cs.C);
    ck.expect(got.micro_f1 == f1 && got.exact_match == 100.0 * em / F && got.tp == tp && got.fp == fp && got.fn == fn,
              "F1 case " + std::to_string(c + 1));
  }

  std::vector<std::vector<std::string>> refs{{"sly", "fox", "runs", "past", "the", "red", "barn"},
                                             {"a", "tiny", "blue", "circle", "waves"},
                                             {"star", "and", "moon", "play", "in", "the", "park", "today"}};
  const double b2 = metrics::corpus_bleu(refs, refs, 2), b3 = metrics::corpus_bleu(refs, refs, 3);
  ck.expect(b2 == 100.0 && b3 == 100.0, "BLEU identical " + fmt(b2) + "/" + fmt(b3));

  std::mt19937_64 rng(601);
  std::normal_distribution<double> nd;
  auto unit = [&](std::size_t d) {
    std::vector<double> v(d);
    double n = 0;
    for (auto& x : v) n += (x = nd(rng)) * x;
    for (auto& x : v) x /= std::sqrt(n);
    return v;
  };
  std::vector<metrics::RankingQuery> qs;
  for (int s = 0; s < 10000; ++s) {
    metrics::RankingQuery q;
    for (int c = 0; c < 5; ++c) q.candidates.push_back(unit(32));
    q.query = unit(32);
    q.answer = rng() % 5;
    qs.push_back(std::move(q));
  }
  const auto acc = metrics::ranking_accuracy(qs);
  ck.expect(std::abs(acc.top1 - 20.0) <= 2.0 && std::abs(acc.top2 - 40.0) <= 2.0,
            "ranking " + fmt(acc.top1) + "/" + fmt(acc.top2));

  std::vector<std::vector<double>> v, t;
  for (int i = 0; i < 1000; ++i) {
    v.push_back(unit(24));
    t.push_back(unit(24));
  }
  const auto rnd = metrics::r_precision(v, t, 10, 100, 602);
  ck.expect(std::abs(rnd.mean - 1.0) <= 0.5, "random R-precision " + fmt(rnd.mean));
  const auto ident = metrics::r_precision(v, v, 10, 100, 603);
  ck.expect(ident.mean == 100.0 && ident.std == 0.0, "identity R-precision " + fmt(ident.mean));
  return ck.outcome("5 F1 cases exact; BLEU2/3 identical " + fmt(b2) + "/" + fmt(b3) + "; top1/top2 " + fmt(acc.top1, 4) +
                    "/" + fmt(acc.top2, 4) + " (10k sets); R-prec random " + fmt(rnd.mean) + ", identity " +
                    fmt(ident.mean) + " +- " + fmt(ident.std));
}

// ---- 7. schedule conformance ----

Outcome schedule_conformance() {
  Checks ck;
  const auto paper = preset_config("paper");
  ck.expect(paper.train.g_updates == 2 && paper.train.lr_decay_every == 20 && paper.train.lr_decay_factor == 0.5 &&
                paper.train.checkpoint_every == 10,
            "paper preset schedule values");
  // The paper-preset schedule on a corpus small enough that one step is one epoch.
  auto cfg = testing::tiny_config();
  cfg.data.num_stories = 10;
  cfg.train.g_updates = paper.train.g_updates;
  cfg.train.lr_decay_every = paper.train.lr_decay_every;
  cfg.train.lr_decay_factor = paper.train.lr_decay_factor;
  cfg.train.checkpoint_every = paper.train.checkpoint_every;
  cfg.train.lr_g = paper.train.lr_g;
  cfg.train.lr_d = paper.train.lr_d;
  auto corpus = testing::tiny_corpus(cfg);
  auto train = corpus.select(data::Split::train);
  cfg.train.story_batch = train.stories.size();
  const VideoCaptioner cap = frozen_captioner(cfg, train.vocab.size(), 701);
  Trainer trainer(cfg, train, &cap);
  ck.expect(trainer.steps_per_epoch() == 1, "steps per epoch " + std::to_string(trainer.steps_per_epoch()));

  const fs::path dir = fs::temp_directory_path() / "duco_acceptance_schedule";
  fs::remove_all(dir);
  std::vector<LossRecord> recs;
  Trainer::RunOptions opts;
  opts.out_dir = dir;
  opts.max_steps = 61;
  opts.on_step = [&](const LossRecord& r) { recs.push_back(r); };
  trainer.run(opts);
  const auto& c = trainer.counters();
  ck.expect(c.g == 2 * c.d_img && c.g == 2 * c.d_story && c.d_img == 61,
            "counters g=" + std::to_string(c.g) + " d_img=" + std::to_string(c.d_img));
  for (const auto& r : recs) {
    const double want = paper.train.lr_g * std::pow(0.5, static_cast<double>(r.epoch / 20));
    ck.expect(r.lr_g == want && r.lr_d == paper.train.lr_d * std::pow(0.5, static_cast<double>(r.epoch / 20)),
              "lr at epoch " + std::to_string(r.epoch));
  }
  ck.expect(recs.at(19).lr_g == paper.train.lr_g && recs.at(20).lr_g == paper.train.lr_g / 2 &&
                recs.at(40).lr_g == paper.train.lr_g / 4 && recs.at(60).lr_g == paper.train.lr_g / 8,
            "lr halving at 20/40/60");
  std::set<std::string> ckpts;
  for (const auto& e : fs::directory_iterator(dir / "checkpoints")) ckpts.insert(e.path().filename().string());
  for (int e = 1; e <= 61; ++e) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.ckpt", e);
    ck.expect(ckpts.count(name) == (e % 10 == 0 ? 1u : 0u), std::string("checkpoint presence ") + name);
  }
  fs::remove_all(dir);
  return ck.outcome("61 epochs: " + std::to_string(c.g) + " G / " + std::to_string(c.d_img) + " D_img / " +
                    std::to_string(c.d_story) + " D_story updates; lr_g " + fmt(recs[0].lr_g) + " -> " +
                    fmt(recs[20].lr_g) + " -> " + fmt(recs[40].lr_g) + " -> " + fmt(recs[60].lr_g) +
                    "; checkpoints at epochs 10..60 only");
}

// ---- 8. determinism ----

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism() {
  Checks ck;
  const auto t0 = clk::now();
  auto cfg = preset_config("desk");
  data::SynthConfig sc;
  sc.num_stories = cfg.data.num_stories;
  const auto corpus = data::generate_shape_stories(sc, cfg.seed);
  const auto train = corpus.select(data::Split::train);
  const VideoCaptioner cap = [&] {
    std::mt19937_64 r(801);
    VideoCaptioner c(cfg.captioner, train.vocab.size(), 5, cfg.data.max_len, cfg.data.image_size, r);
    c.freeze_for_inference();
    return c;
  }();
  const fs::path root = fs::temp_directory_path() / "duco_acceptance_determinism";
  fs::remove_all(root);
  auto run = [&](const std::string& name) {
    Trainer t(cfg, train, &cap);
    Trainer::RunOptions o;
    o.out_dir = root / name;
    o.max_steps = 50;
    t.run(o);
  };
  run("a");
  run("b");
  const auto la = slurp(root / "a" / "loss_log.jsonl"), lb = slurp(root / "b" / "loss_log.jsonl");
  const auto lines = std::count(la.begin(), la.end(), '\n');
  ck.expect(lines == 50, "log has " + std::to_string(lines) + " lines");
  ck.expect(la == lb, "loss logs differ");
  ck.expect(slurp(root / "a" / "checkpoints" / "last.ckpt") == slurp(root / "b" / "checkpoints" / "last.ckpt"),
            "checkpoints differ");

  // Generation from the checkpoint, twice, against the live trainer state.
  Trainer live(cfg, train, &cap);
  live.load_checkpoint(root / "a" / "checkpoints" / "last.ckpt");
  StoryGenerator g1 = build_generator(cfg, train.vocab.size()), g2 = build_generator(cfg, train.vocab.size());
  load_generator(root / "a" / "checkpoints" / "last.ckpt", cfg, g1);
  load_generator(root / "b" / "checkpoints" / "last.ckpt", cfg, g2);
  const auto cb = testing::first_stories(train, 4);
  const auto a = values(g1.generate(cb, 99).images);
  ck.expect(a == values(g2.generate(cb, 99).images), "generation differs across checkpoints");
  ck.expect(a == values(g1.generate(cb, 99).images), "generation differs across calls");
  ck.expect(a == values(live.generator().generate(cb, 99).images), "generation differs from the resumed trainer");
  fs::remove_all(root);
  return ck.outcome("desk preset, 2 runs x 50 steps: loss logs and checkpoints byte-identical; generate_story "
                    "bit-exact from checkpoint; " +
                    fmt(seconds_since(t0)) + " s");
}

// ---- 9 / 10. CLI pipeline ----

struct Pipeline {
  fs::path cli, work;
  double seconds = 0.0;  // wall time of the commands that make up the desk run

  bool cmd(const std::string& args, const std::string& log, bool counted = true) {
    const auto t = clk::now();
    const std::string line = cli.string() + " --out " + (work / "run").string() + " " + args + " >> " +
                             (work / log).string() + " 2>&1";
    std::cout << "  $ duco " << args << std::flush;
    const int rc = std::system(line.c_str());
    const double s = seconds_since(t);
    if (counted) seconds += s;
    std::cout << "  [" << fmt(s, 4) << " s, exit " << rc << "]" << std::endl;
    return rc == 0;
  }
};

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  auto j = nlohmann::json::parse(in, nullptr, false);
  return j.is_discarded() ? nlohmann::json() : j;
}

Outcome pipeline_integrity(Pipeline& pl, bool& ready) {
  Checks ck;
  ready = false;
  fs::remove_all(pl.work);
  fs::create_directories(pl.work);
  bool ok = pl.cmd("gen-data", "gen.log");
  for (const char* w : {"classifier", "damsm", "captioner"}) ok = ok && pl.cmd(std::string("pretrain ") + w, "pretrain.log");
  ok = ok && pl.cmd("train --max-steps 300", "train.log");
  ck.expect(ok, "a pipeline command exited nonzero (see " + pl.work.string() + ")");
  if (!ok) return ck.outcome("");
  ready = true;
  const bool eval_ok = pl.cmd("eval --checkpoint last", "eval.log", false);
  ck.expect(eval_ok, "eval exited nonzero");
  const auto report = read_json(pl.work / "run" / "eval" / "last_val.json");
  const auto problems = validate_metric_report(report);
  for (const auto& p : problems) ck.expect(false, p);
  if (eval_ok) fs::copy_file(pl.work / "run" / "eval" / "last_val.json", pl.work / "step300_val.json",
                             fs::copy_options::overwrite_existing);
  return ck.outcome("gen-data -> pretrain x3 -> train 300 steps -> eval all exit 0; MetricReport schema-valid (char_f1 " +
                    fmt(report.value("char_f1", -1.0), 4) + ", BLEU2 " + fmt(report.value("bleu2", -1.0), 4) + ")");
}

Outcome end_to_end(Pipeline& pl) {
  Checks ck;
  bool ok = pl.cmd("train --resume", "train.log");
  ok = ok && pl.cmd("eval --checkpoint init", "eval.log");
  ok = ok && pl.cmd("eval --checkpoint last", "eval.log");
  ck.expect(ok, "a pipeline command exited nonzero");
  if (!ok) return ck.outcome("");

  std::ifstream log(pl.work / "run" / "train" / "loss_log.jsonl");
  std::string line;
  std::size_t steps = 0, nonfinite = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line, nullptr, false);
    ++steps;
    for (const char* k : {"L_KL", "L_G_adv", "L_dual", "L_D_img", "L_D_story", "L_char"})
      if (j.is_discarded() || !j.contains(k) || !j[k].is_number() || !std::isfinite(j[k].get<double>())) {
        ++nonfinite;
        break;
      }
  }
  ck.expect(steps >= 2000, "only " + std::to_string(steps) + " logged steps");
  ck.expect(nonfinite == 0, std::to_string(nonfinite) + " steps with a non-finite loss");

  const auto init = read_json(pl.work / "run" / "eval" / "init_val.json");
  const auto last = read_json(pl.work / "run" / "eval" / "last_val.json");
  const double f0 = init.value("char_f1", 0.0), f1 = last.value("char_f1", 0.0);
  const double b0 = init.value("bleu2", 0.0), b1 = last.value("bleu2", 0.0);
  ck.expect(f1 - f0 >= 10.0, "char F1 gain " + fmt(f1 - f0, 4) + " < 10");
  ck.expect(b1 > b0, "BLEU2 " + fmt(b1, 4) + " <= untrained " + fmt(b0, 4));
  ck.expect(pl.seconds <= 3600.0, "desk run took " + fmt(pl.seconds / 60, 3) + " min");
  return ck.outcome(std::to_string(steps) + " steps all finite; char F1 " + fmt(f0, 4) + " -> " + fmt(f1, 4) +
                    "; BLEU2 " + fmt(b0, 4) + " -> " + fmt(b1, 4) + "; desk run wall time " +
                    fmt(pl.seconds / 60, 3) + " min");
}

int report(int id, const std::string& name, const Outcome& o) {
  std::cout << (o.ok ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail << std::endl;
  return o.ok ? 0 : 1;
}

Outcome guarded(const std::function<Outcome()>& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  bool e2e = false;
  fs::path cli, work;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--e2e") e2e = true;
    else if (a == "--cli" && i + 1 < argc) cli = argv[++i];
    else if (a == "--work" && i + 1 < argc) work = argv[++i];
    else if (a == "--only" && i + 1 < argc) only.insert(std::stoi(argv[++i]));
    else {
      std::cerr << "usage: acceptance [--only N]... | --e2e --cli PATH --work DIR" << std::endl;
      return 2;
    }
  }

  int failures = 0;
  if (e2e) {
    if (cli.empty() || work.empty()) {
      std::cerr << "--e2e needs --cli and --work" << std::endl;
      return 2;
    }
    Pipeline pl{fs::absolute(cli), fs::absolute(work)};
    bool ready = false;
    failures += report(10, "pipeline integrity", guarded([&] { return pipeline_integrity(pl, ready); }));
    if (ready)
      failures += report(9, "end-to-end desk run", guarded([&] { return end_to_end(pl); }));
    else
      failures += report(9, "end-to-end desk run", {false, "pipeline did not reach training"});
    return failures ? 1 : 0;
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"analytic loss oracles", analytic_oracles},
      {"gradient checks", gradient_checks},
      {"attention normalization", attention_normalization},
      {"recurrence contracts", recurrence_contracts},
      {"freeze contracts", freeze_contracts},
      {"metric oracles", metric_oracles},
      {"schedule conformance", schedule_conformance},
      {"determinism", determinism},
  };
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    failures += report(id, criteria[i].first, guarded(criteria[i].second));
  }
  return failures ? 1 : 0;
}
