#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "duco/context_encoder.hpp"
#include "duco/discriminators.hpp"
#include "duco/generator.hpp"
#include "duco/mart.hpp"
#include "duco/text_encoder.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

namespace duco {
namespace {

using testing::grad_check;
using testing::tiny_config;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor randn(Shape s, std::mt19937_64& rng, double scale = 1.0, bool grad = false) {
  return normal_tensor(std::move(s), scale, rng, grad);
}

Tensor project(const Tensor& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(x * normal_tensor(x.shape(), 1.0, rng, false));
}

// ---- KL and reparameterization ----

// KL(N(mu, s2) || N(0, 1)) by Simpson integration of p log(p/q).
double kl_quadrature(double mu, double s2) {
  const double sd = std::sqrt(s2);
  const double a = mu - 14 * sd, b = mu + 14 * sd;
  const int n = 20000;
  const double h = (b - a) / n;
  auto f = [&](double x) {
    const double logp = -0.5 * std::log(2 * M_PI * s2) - (x - mu) * (x - mu) / (2 * s2);
    const double logq = -0.5 * std::log(2 * M_PI) - x * x / 2;
    return std::exp(logp) * (logp - logq);
  };
  double acc = f(a) + f(b);
  for (int i = 1; i < n; ++i) acc += f(a + i * h) * (i % 2 ? 4 : 2);
  return acc * h / 3;
}

TEST(TextEncoder, KlClosedFormCases) {
  EXPECT_NEAR(kl_loss(Tensor::zeros({1, 4}), Tensor::full({1, 4}, 1.0)).item(), 0.0, 1e-15);
  EXPECT_NEAR(kl_loss(Tensor::full({1, 1}, 1.0), Tensor::full({1, 1}, 1.0)).item(), 0.5, 1e-15);
  EXPECT_THROW(kl_loss(Tensor::zeros({1, 2}), Tensor::from({1, 2}, {1.0, 0.0})), std::domain_error);
}

TEST(TextEncoder, KlMatchesQuadrature) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.2, 3.0);
  std::vector<double> mu(8), s2(8);
  double expected = 0.0;
  for (int i = 0; i < 8; ++i) {
    mu[i] = nd(rng);
    s2[i] = ud(rng);
    expected += kl_quadrature(mu[i], s2[i]);
  }
  EXPECT_NEAR(kl_loss(Tensor::from({1, 8}, mu), Tensor::from({1, 8}, s2)).item(), expected, 1e-4);
}

TEST(TextEncoder, KlGradientClosedForm) {
  std::mt19937_64 rng(4);
  const std::size_t B = 3, d = 5;
  Tensor mu = randn({B, d}, rng, 1.0, true);
  std::vector<double> v(B * d);
  std::uniform_real_distribution<double> ud(0.3, 2.5);
  for (auto& x : v) x = ud(rng);
  Tensor s2 = Tensor::from({B, d}, v, true);
  kl_loss(mu, s2).backward();
  for (std::size_t i = 0; i < B * d; ++i) {
    EXPECT_NEAR(mu.grad()[i], mu.data()[i] / B, 1e-12);
    EXPECT_NEAR(s2.grad()[i], 0.5 * (1.0 - 1.0 / v[i]) / B, 1e-12);
  }
}

TEST(TextEncoder, ReparameterizationIdentities) {
  std::mt19937_64 rng(5);
  Tensor mu = randn({2, 4}, rng), logvar = randn({2, 4}, rng);
  auto st = reparameterize(mu, logvar, Tensor::zeros({2, 4}));
  EXPECT_EQ(values(st.h0), values(mu));
  Tensor e = randn({2, 4}, rng);
  auto st1 = reparameterize(mu, Tensor::zeros({2, 4}), e);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(st1.h0.data()[i], mu.data()[i] + e.data()[i]);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(st.sigma2.data()[i], std::exp(logvar.data()[i]), 1e-15);
}

TEST(TextEncoder, ReparameterizationGradient) {
  std::mt19937_64 rng(6);
  Tensor mu = randn({2, 4}, rng, 1.0, true), logvar = randn({2, 4}, rng, 0.5, true);
  Tensor e = randn({2, 4}, rng);
  auto f = [&] { return project(tanh(reparameterize(mu, logvar, e).h0)); };
  EXPECT_LT(grad_check(f, {mu, logvar}, 8, 1).max_rel_error, 1e-3);
}

TEST(TextEncoder, SentenceEmbedding) {
  std::mt19937_64 rng(7);
  TextEncoder enc(20, 6, 5, 4, 5, rng);
  // Single token: the projection of that word vector.
  auto one = enc.embed({7, 0, 0}, {1, 0, 0}, 1);
  Tensor expected = enc.sentence_proj(reshape(slice(enc.embedding.table, 0, 7, 1), {1, 6}));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(one.sentences.data()[i], expected.data()[i], 1e-12);
  for (std::size_t i = 6; i < 18; ++i) EXPECT_EQ(one.words.data()[i], 0.0);

  EXPECT_THROW(enc.embed({0, 0, 0}, {0, 0, 0}, 1), std::invalid_argument);

  // Same tokens, padding in different places.
  auto a = enc.embed({3, 9, 0, 0}, {1, 1, 0, 0}, 1);
  auto b = enc.embed({3, 0, 9, 0}, {1, 0, 1, 0}, 1);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(a.sentences.data()[i], b.sentences.data()[i], 1e-14);
}

TEST(TextEncoder, StoryPosteriorShapes) {
  std::mt19937_64 rng(8);
  TextEncoder enc(20, 6, 5, 4, 3, rng);
  Tensor s = randn({2, 3, 5}, rng);
  auto st = enc.encode_story(s, rng, Tensor::zeros({2, 4}));
  EXPECT_EQ(st.mu.shape(), (Shape{2, 4}));
  EXPECT_EQ(values(st.h0), values(st.mu));
}

// ---- MART ----

MartConfig small_mart() { return tiny_config().model.mart; }

TEST(Mart, MemoryInitMatchesMatmul) {
  std::mt19937_64 rng(10);
  const auto mc = small_mart();
  MemoryInit init(4, mc, rng);
  const std::size_t M = mc.num_memory_cells, H = mc.hidden_size;
  auto zero = init(Tensor::zeros({1, 4}));
  for (const auto& c : zero.cells)
    for (double v : c.data()) EXPECT_EQ(v, 0.0);

  Tensor h0 = randn({2, 4}, rng);
  auto mem = init(h0);
  auto other = init(randn({2, 4}, rng));
  EXPECT_NE(mem.flatten(), other.flatten());
  for (std::size_t l = 0; l < mc.num_layers; ++l) {
    ASSERT_EQ(mem.cells[l].shape(), (Shape{2, M, H}));
    const auto& w = init.proj[l].weight;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = 0; j < M * H; ++j) {
        double acc = init.proj[l].bias.data()[j];
        for (std::size_t i = 0; i < 4; ++i) acc += h0.data()[b * 4 + i] * w.data()[i * M * H + j];
        EXPECT_NEAR(mem.cells[l].data()[b * M * H + j], acc, 1e-12);
      }
  }
}

TEST(Mart, MaskedPositionsNeverLeak) {
  std::mt19937_64 rng(11);
  Mart mart(small_mart(), 6, rng);
  const std::size_t B = 2, L = 5;
  std::vector<std::uint8_t> mask{1, 1, 1, 0, 0, 1, 1, 1, 1, 0};
  Tensor x = randn({B, L, 6}, rng);
  Tensor y = x.clone();
  for (std::size_t i = 0; i < B * L; ++i)
    if (!mask[i])
      for (std::size_t d = 0; d < 6; ++d) y.data()[i * 6 + d] = 0.0;
  auto mem = mart.zero_memory(B);
  mem.cells[0].data()[0] = 0.3;
  auto a = mart.step(x, mask, mem, rng);
  auto b = mart.step(y, mask, mem, rng);
  const std::size_t H = small_mart().hidden_size;
  for (std::size_t i = 0; i < B * L; ++i)
    if (mask[i])
      for (std::size_t d = 0; d < H; ++d) EXPECT_EQ(a.encodings.data()[i * H + d], b.encodings.data()[i * H + d]);
  EXPECT_EQ(a.memory.flatten(), b.memory.flatten());
}

TEST(Mart, ZeroGateKeepsMemory) {
  std::mt19937_64 rng(12);
  Mart mart(small_mart(), 6, rng);
  MemoryInit init(4, small_mart(), rng);
  auto mem = init(randn({2, 4}, rng));
  auto st = mart.step(randn({2, 3, 6}, rng), std::vector<std::uint8_t>(6, 1), mem, rng, nullptr, 0.0);
  EXPECT_EQ(st.memory.flatten(), mem.flatten());
  auto moved = mart.step(randn({2, 3, 6}, rng), std::vector<std::uint8_t>(6, 1), mem, rng);
  EXPECT_NE(moved.memory.flatten(), mem.flatten());
}

TEST(Mart, StepsAreCausalAndResumable) {
  std::mt19937_64 rng(13);
  const auto mc = small_mart();
  Mart mart(mc, 6, rng);
  const std::vector<std::uint8_t> mask(2 * 4, 1);
  Tensor x1 = randn({2, 4, 6}, rng), x2 = randn({2, 4, 6}, rng), x2b = randn({2, 4, 6}, rng);
  auto m0 = mart.zero_memory(2);

  auto a1 = mart.step(x1, mask, m0, rng);
  auto a2 = mart.step(x2, mask, a1.memory, rng);
  auto b1 = mart.step(x1, mask, m0, rng);
  auto b2 = mart.step(x2b, mask, b1.memory, rng);
  EXPECT_EQ(values(a1.encodings), values(b1.encodings));
  EXPECT_NE(values(a2.encodings), values(b2.encodings));

  // Serialize after step 1, restore, continue.
  const auto flat = a1.memory.flatten();
  auto restored = MemoryState::unflatten(flat, mc.num_layers, 2, mc.num_memory_cells, mc.hidden_size);
  auto c2 = mart.step(x2, mask, restored, rng);
  EXPECT_EQ(values(c2.encodings), values(a2.encodings));
  EXPECT_EQ(c2.memory.flatten(), a2.memory.flatten());
}

TEST(Mart, GradientFlowsThroughMemory) {
  std::mt19937_64 rng(14);
  Mart mart(small_mart(), 6, rng);
  const std::vector<std::uint8_t> mask(4, 1);
  Tensor x1 = randn({1, 4, 6}, rng, 1.0, true), x2 = randn({1, 4, 6}, rng);
  auto f = [&] {
    std::mt19937_64 r(0);
    auto s1 = mart.step(x1, mask, mart.zero_memory(1), r);
    return project(mart.step(x2, mask, s1.memory, r).encodings);
  };
  auto res = grad_check(f, {x1}, 10, 2);
  EXPECT_LT(res.max_rel_error, 1e-4);
  f().backward();
  double norm = 0.0;
  for (double g : x1.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Mart, AllMaskedRowRejected) {
  std::mt19937_64 rng(15);
  Mart mart(small_mart(), 6, rng);
  EXPECT_THROW(mart.step(randn({1, 2, 6}, rng), {0, 0}, mart.zero_memory(1), rng), std::invalid_argument);
}

TEST(AttentionPool, Cases) {
  std::mt19937_64 rng(16);
  const std::size_t H = 4;
  Tensor enc = randn({1, 3, H}, rng), u = randn({H}, rng);
  auto single = attention_pool(enc, {0, 1, 0}, u);
  EXPECT_EQ(single.alpha.data()[1], 1.0);
  EXPECT_EQ(single.alpha.data()[0], 0.0);
  for (std::size_t d = 0; d < H; ++d) EXPECT_NEAR(single.pooled.data()[d], enc.data()[H + d], 1e-15);

  // Identical encodings give identical logits.
  Tensor same = Tensor::from({1, 3, H}, std::vector<double>(3 * H, 0.7));
  auto uni = attention_pool(same, {1, 1, 0}, u);
  EXPECT_NEAR(uni.alpha.data()[0], 0.5, 1e-15);
  EXPECT_NEAR(uni.alpha.data()[1], 0.5, 1e-15);
  EXPECT_EQ(uni.alpha.data()[2], 0.0);

  Tensor big = randn({2, 5, H}, rng);
  std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 1, 0, 1, 1, 0};
  auto r = attention_pool(big, mask, u);
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> logits(5);
    double mx = -1e300, total = 0.0, asum = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      logits[i] = 0.0;
      for (std::size_t d = 0; d < H; ++d) logits[i] += big.data()[(b * 5 + i) * H + d] * u.data()[d];
      if (mask[b * 5 + i]) mx = std::max(mx, logits[i]);
    }
    for (std::size_t i = 0; i < 5; ++i)
      if (mask[b * 5 + i]) total += std::exp(logits[i] - mx);
    for (std::size_t i = 0; i < 5; ++i) {
      const double want = mask[b * 5 + i] ? std::exp(logits[i] - mx) / total : 0.0;
      EXPECT_NEAR(r.alpha.data()[b * 5 + i], want, 1e-12);
      asum += r.alpha.data()[b * 5 + i];
    }
    EXPECT_NEAR(asum, 1.0, 1e-12);
  }
}

// ---- Context encoder ----

TEST(ContextEncoder, GruMatchesEquations) {
  std::mt19937_64 rng(20);
  const std::size_t in = 5, h = 3, B = 2;
  GRUCell cell(in, h, rng);
  Tensor x = randn({B, in}, rng), q = randn({B, h}, rng);
  Tensor out = cell(x, q);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const auto& Wi = cell.w_input.data();
  const auto& Wh = cell.w_hidden.data();
  const auto& bi = cell.b_input.data();
  const auto& bh = cell.b_hidden.data();
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> xi(3 * h, 0.0), hh(3 * h, 0.0);
    for (std::size_t j = 0; j < 3 * h; ++j) {
      xi[j] = bi[j];
      hh[j] = bh[j];
      for (std::size_t i = 0; i < in; ++i) xi[j] += x.data()[b * in + i] * Wi[i * 3 * h + j];
      for (std::size_t i = 0; i < h; ++i) hh[j] += q.data()[b * h + i] * Wh[i * 3 * h + j];
    }
    for (std::size_t j = 0; j < h; ++j) {
      const double r = sig(xi[j] + hh[j]);
      const double z = sig(xi[h + j] + hh[h + j]);
      const double n = std::tanh(xi[2 * h + j] + r * hh[2 * h + j]);
      const double want = (1 - z) * q.data()[b * h + j] + z * n;
      EXPECT_NEAR(out.data()[b * h + j], want, 1e-12);
    }
  }
  EXPECT_EQ(values(cell(x, q, 0.0)), values(q));
}

TEST(ContextEncoder, GistCases) {
  Tensor hand = gist(Tensor::from({1, 1, 2}, {1, 1}), Tensor::from({1, 2}, {0.5, -0.5}));
  EXPECT_EQ(hand.data()[0], 0.0);
  std::mt19937_64 rng(21);
  Tensor zero = gist(Tensor::zeros({2, 4, 8}), randn({2, 8}, rng));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);

  Tensor F = randn({3, 4, 8}, rng), p = randn({3, 8}, rng);
  Tensor o = gist(F, p);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < 4; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < 8; ++j) acc += F.data()[(b * 4 + c) * 8 + j] * p.data()[b * 8 + j];
      EXPECT_NEAR(o.data()[b * 4 + c], acc, 1e-12);
    }
}

struct ContextFixture {
  RunConfig cfg = tiny_config();
  std::mt19937_64 rng{22};
  ContextEncoder enc{cfg.model, rng};
  TextEncoder text{40, cfg.model.d_w, cfg.model.d_s, cfg.model.d_h, 5, rng};

  std::vector<FrameContext> run(const std::vector<std::int64_t>& ids, const std::vector<std::uint8_t>& mask,
                                std::size_t T, const Tensor& h0, std::uint64_t seed) {
    auto w = text.embed(ids, mask, T);
    std::mt19937_64 r(seed);
    return enc.encode(w.words, reshape(w.sentences, {1, T, cfg.model.d_s}), mask, h0, r);
  }
};

TEST(ContextEncoder, SwapIsCausal) {
  ContextFixture fx;
  const std::size_t T = 5, L = 3;
  std::vector<std::int64_t> ids{4, 5, 6, 7, 8, 0, 9, 10, 11, 12, 13, 14, 15, 16, 0};
  std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0};
  auto swapped_ids = ids;
  auto swapped_mask = mask;
  for (std::size_t i = 0; i < L; ++i) {
    std::swap(swapped_ids[L + i], swapped_ids[2 * L + i]);
    std::swap(swapped_mask[L + i], swapped_mask[2 * L + i]);
  }
  std::mt19937_64 r(1);
  Tensor h0 = randn({1, fx.cfg.model.d_h}, r);
  auto a = fx.run(ids, mask, T, h0, 5);
  auto b = fx.run(swapped_ids, swapped_mask, T, h0, 5);
  ASSERT_EQ(a.size(), T);
  EXPECT_EQ(values(a[0].o), values(b[0].o));
  for (std::size_t k = 1; k < T; ++k) EXPECT_NE(values(a[k].o), values(b[k].o)) << "frame " << k;

  auto again = fx.run(ids, mask, T, h0, 5);
  for (std::size_t k = 0; k < T; ++k) {
    EXPECT_EQ(values(a[k].o), values(again[k].o));
    EXPECT_EQ(values(a[k].q), values(again[k].q));
  }
}

TEST(ContextEncoder, SingleFrame) {
  ContextFixture fx;
  std::mt19937_64 r(2);
  auto out = fx.run({4, 5, 0}, {1, 1, 0}, 1, randn({1, fx.cfg.model.d_h}, r), 3);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].o.shape(), (Shape{1, fx.cfg.model.c_out}));
  EXPECT_EQ(values(out[0].g), values(out[0].q));
}

// ---- Generator ----

struct GeneratorFixture {
  RunConfig cfg = tiny_config();
  data::StoryCorpus corpus = testing::tiny_corpus(cfg);
  data::StoryDataset train = corpus.select(data::Split::train);
  std::mt19937_64 rng{30};
  StoryGenerator G{cfg.model, train.vocab.size(), 5, cfg.data.image_size, rng};
};

TEST(Generator, Stage1ShapeRangeAndZeroResponse) {
  GeneratorFixture fx;
  const auto& img = fx.G.image;
  std::mt19937_64 rng(1);
  auto s1 = img.stage1(randn({3, fx.cfg.model.c_out}, rng));
  const std::size_t half = fx.cfg.data.image_size / 2;
  EXPECT_EQ(s1.features.shape(), (Shape{3, fx.cfg.model.image_channels, half, half}));
  for (double v : s1.lowres.data()) EXPECT_LE(std::abs(v), 1.0);

  std::mt19937_64 r2(2);
  ImageGenerator zeroed(fx.cfg.model, fx.cfg.data.image_size, r2);
  for (const auto& p : zeroed.parameters())
    if (p.name.ends_with("bias")) std::fill(const_cast<Tensor&>(p.tensor).data().begin(),
                                            const_cast<Tensor&>(p.tensor).data().end(), 0.0);
  auto z = zeroed.stage1(Tensor::zeros({2, fx.cfg.model.c_out}));
  for (double v : z.features.data()) EXPECT_EQ(v, 0.0);
  for (double v : z.lowres.data()) EXPECT_EQ(v, 0.0);
}

TEST(Generator, Stage1GradientWrtGist) {
  GeneratorFixture fx;
  std::mt19937_64 rng(3);
  Tensor o = randn({2, fx.cfg.model.c_out}, rng, 1.0, true);
  auto f = [&] { return mean(fx.G.image.stage1(o).features); };
  EXPECT_LT(grad_check(f, {o}, 16, 4).max_rel_error, 1e-3);
}

TEST(Generator, CopyTransformCases) {
  GeneratorFixture fx;
  const auto& img = fx.G.image;
  const std::size_t H = fx.cfg.model.mart.hidden_size, D = img.channels(), N = img.regions_count();
  std::mt19937_64 rng(4);
  Tensor m = randn({1, 3, H}, rng);
  Tensor prev = randn({1, D, N}, rng);
  Tensor mp = img.copy_u(m);  // [1, 3, D]

  auto single = img.copy_transform(m, {0, 1, 0}, prev);
  for (std::size_t j = 0; j < N; ++j)
    for (std::size_t d = 0; d < D; ++d) EXPECT_NEAR(single.context.data()[d * N + j], mp.data()[D + d], 1e-12);

  auto first = img.copy_transform(m, {1, 1, 0}, Tensor::zeros({1, D, N}));
  for (std::size_t j = 0; j < N; ++j) {
    EXPECT_NEAR(first.beta.data()[j * 3 + 0], 0.5, 1e-15);
    EXPECT_NEAR(first.beta.data()[j * 3 + 1], 0.5, 1e-15);
    EXPECT_EQ(first.beta.data()[j * 3 + 2], 0.0);
    for (std::size_t d = 0; d < D; ++d)
      EXPECT_NEAR(first.context.data()[d * N + j], 0.5 * (mp.data()[d] + mp.data()[D + d]), 1e-12);
  }
}

TEST(Generator, RegionWordAttentionMatchesDense) {
  std::mt19937_64 rng(5);
  const std::size_t L = 3, D = 6, N = 4;
  Tensor words = randn({1, L, D}, rng), regions = randn({1, D, N}, rng);
  auto att = region_word_attention(words, {1, 1, 1}, regions);
  for (std::size_t j = 0; j < N; ++j) {
    std::vector<double> logit(L);
    for (std::size_t i = 0; i < L; ++i) {
      logit[i] = 0.0;
      for (std::size_t d = 0; d < D; ++d) logit[i] += regions.data()[d * N + j] * words.data()[i * D + d];
    }
    const double mx = *std::max_element(logit.begin(), logit.end());
    double z = 0.0;
    for (double v : logit) z += std::exp(v - mx);
    for (std::size_t d = 0; d < D; ++d) {
      double ctx = 0.0;
      for (std::size_t i = 0; i < L; ++i) ctx += std::exp(logit[i] - mx) / z * words.data()[i * D + d];
      EXPECT_NEAR(att.context.data()[d * N + j], ctx, 1e-12);
    }
    for (std::size_t i = 0; i < L; ++i) EXPECT_NEAR(att.beta.data()[j * L + i], std::exp(logit[i] - mx) / z, 1e-12);
  }
}

TEST(Generator, Stage2ShapeLivenessAndNormalization) {
  GeneratorFixture fx;
  const auto& img = fx.G.image;
  const std::size_t H = fx.cfg.model.mart.hidden_size, D = img.channels(), N = img.regions_count();
  const std::size_t S = fx.cfg.data.image_size;
  std::mt19937_64 rng(6);
  auto s1 = img.stage1(randn({2, fx.cfg.model.c_out}, rng));
  Tensor m = randn({2, 4, H}, rng);
  std::vector<std::uint8_t> mask{1, 1, 1, 0, 1, 1, 0, 0};
  Tensor copy = randn({2, D, N}, rng);
  auto st = img.stage2(s1.features, m, mask, copy);
  EXPECT_EQ(st.image.shape(), (Shape{2, 3, S, S}));
  for (double v : st.image.data()) EXPECT_LE(std::abs(v), 1.0);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < N; ++j) {
      double total = 0.0;
      for (std::size_t i = 0; i < 4; ++i) {
        const double v = st.beta.data()[(b * N + j) * 4 + i];
        if (!mask[b * 4 + i]) EXPECT_EQ(v, 0.0);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  auto dead = img.stage2(s1.features, m, mask, Tensor::zeros({2, D, N}));
  EXPECT_NE(values(dead.image), values(st.image));
}

TEST(Generator, StoryShapesDeterminismAndCausality) {
  GeneratorFixture fx;
  const std::size_t S = fx.cfg.data.image_size;
  auto cb = testing::first_stories(fx.train, 2);
  auto a = fx.G.generate(cb, 11);
  auto b = fx.G.generate(cb, 11);
  EXPECT_EQ(a.images.shape(), (Shape{2, 5, 3, S, S}));
  EXPECT_EQ(values(a.images), values(b.images));

  // Perturb caption 3 (index 2) of story 0 while holding h0 fixed.
  auto perturbed = cb;
  const std::size_t L = cb.max_len, row = 2;
  for (std::size_t i = 0; i < L; ++i)
    if (perturbed.mask[row * L + i]) perturbed.ids[row * L + i] = 3 + (perturbed.ids[row * L + i] + 5) % 20;
  NoGradGuard guard;
  fx.G.set_training(false);
  std::mt19937_64 r0(8), r1(9), r2(9);
  const auto cond = fx.G.forward(cb, r0).cond;
  auto base = fx.G.forward(cb, r1, cond);
  auto moved = fx.G.forward(perturbed, r2, cond);
  const std::size_t frame = 3 * S * S;
  for (std::size_t k = 0; k < 5; ++k) {
    const auto x = values(base.images), y = values(moved.images);
    const bool same = std::equal(x.begin() + k * frame, x.begin() + (k + 1) * frame, y.begin() + k * frame);
    if (k < 2)
      EXPECT_TRUE(same) << "frame " << k;
    else
      EXPECT_FALSE(same) << "frame " << k;
  }
}

TEST(Generator, RejectsWrongFrameCount) {
  GeneratorFixture fx;
  auto cb = testing::first_stories(fx.train, 1);
  cb.frames = 4;
  std::mt19937_64 r(1);
  EXPECT_THROW(fx.G.forward(cb, r), std::invalid_argument);
}

// ---- Discriminators ----

TEST(Discriminators, ImageDiscriminatorContracts) {
  auto cfg = tiny_config();
  std::mt19937_64 rng(40);
  const std::size_t S = cfg.data.image_size;
  ImageDiscriminator D(cfg.model, S, 9, rng);
  Tensor x = uniform_tensor({3, 3, S, S}, 1.0, rng, false);
  Tensor s = randn({3, cfg.model.d_s}, rng), h0 = randn({3, cfg.model.d_h}, rng);
  auto out = D(x, s, h0);
  EXPECT_EQ(out.char_logits.shape(), (Shape{3, 9}));
  for (double p : out.prob.data()) {
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
  auto other = D(x, randn({3, cfg.model.d_s}, rng), h0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NE(out.prob.data()[i], other.prob.data()[i]);
}

TEST(Discriminators, StoryDiscriminatorContracts) {
  auto cfg = tiny_config();
  std::mt19937_64 rng(41);
  const std::size_t S = cfg.data.image_size;
  StoryDiscriminator D(cfg.model, S, 5, rng);
  Tensor X = uniform_tensor({2, 5, 3, S, S}, 1.0, rng, false);
  Tensor story = randn({2, 5 * cfg.model.d_s}, rng);
  Tensor p = D(X, story);
  for (double v : p.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  // Reverse the frame order of every story.
  Tensor rev = X.clone();
  const std::size_t frame = 3 * S * S;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < 5; ++k)
      std::copy_n(X.data().begin() + (b * 5 + k) * frame, frame, rev.data().begin() + (b * 5 + 4 - k) * frame);
  Tensor q = D(rev, story);
  for (std::size_t b = 0; b < 2; ++b) EXPECT_NE(p.data()[b], q.data()[b]);

  EXPECT_THROW(D(uniform_tensor({2, 4, 3, S, S}, 1.0, rng, false), story), std::invalid_argument);
}

TEST(Discriminators, LossHandValues) {
  auto half = Tensor::full({4}, 0.5);
  EXPECT_NEAR(generator_adv_loss(half, half).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(discriminator_loss(half, half).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(generator_adv_loss(Tensor::full({2}, 0.9), Tensor::full({2}, 0.25)).item(), 0.7458, 1e-4);
  EXPECT_NEAR(generator_adv_loss(Tensor::full({2}, 0.9), Tensor::full({2}, 0.25)).item(),
              0.5 * -std::log(0.9) + 0.5 * -std::log(0.25), 1e-12);
  EXPECT_NEAR(discriminator_loss(Tensor::full({3}, 0.9), Tensor::full({3}, 0.1)).item(), 0.1054, 1e-4);
  EXPECT_LT(generator_adv_loss(Tensor::full({2}, 1.0 - 1e-12), Tensor::full({2}, 1.0 - 1e-12)).item(), 1e-9);
  // Clamped: probabilities of exactly 0 stay finite.
  EXPECT_TRUE(std::isfinite(generator_adv_loss(Tensor::zeros({2}), Tensor::zeros({2})).item()));
}

TEST(Discriminators, CharLossOracle) {
  std::vector<double> labels{1, 0, 1, 0, 0, 1, 1, 1, 0};
  std::vector<double> perfect(9);
  for (std::size_t i = 0; i < 9; ++i) perfect[i] = labels[i] > 0.5 ? 10.0 : -10.0;
  EXPECT_LT(char_loss(Tensor::from({3, 3}, perfect), labels).item(), 1e-3);
  EXPECT_NEAR(char_loss(Tensor::zeros({3, 3}), labels).item(), std::log(2.0), 1e-12);
}

}  // namespace
}  // namespace duco
