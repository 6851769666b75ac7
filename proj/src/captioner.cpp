#include "duco/captioner.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "duco/errors.hpp"
#include "duco/optim.hpp"

namespace duco {

RegionExtractor::RegionExtractor(std::size_t image_size, std::size_t region_dim, std::mt19937_64& rng) {
  if (image_size % 8) throw std::invalid_argument("RegionExtractor: image size must be a multiple of 8");
  const std::size_t c1 = std::max<std::size_t>(32, region_dim / 16), c2 = std::max<std::size_t>(64, region_dim / 4);
  convs.emplace_back(3, c1, 3, 2, 1, rng);
  convs.emplace_back(c1, c2, 3, 2, 1, rng);
  convs.emplace_back(c2, region_dim, 3, 2, 1, rng);
  for (std::size_t i = 0; i < convs.size(); ++i) register_module("conv" + std::to_string(i), convs[i]);
}

Tensor RegionExtractor::operator()(const Tensor& images) const {
  Tensor h = images;
  for (const auto& conv : convs) h = relu(conv(h));
  const std::size_t R = h.dim(0), D = h.dim(1), N = h.dim(2) * h.dim(3);
  return transpose(reshape(h, {R, D, N}), 1, 2);
}

Tensor mean_nll(const Tensor& log_probs, const std::vector<std::int64_t>& targets,
                const std::vector<std::uint8_t>& mask) {
  if (log_probs.rank() != 2 || targets.size() != log_probs.dim(0) || mask.size() != targets.size())
    throw std::invalid_argument("mean_nll: expects [R, V] log-probs with R targets and mask entries");
  std::size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  if (n == 0) throw std::invalid_argument("mean_nll: no scored positions");
  std::vector<double> w(mask.begin(), mask.end());
  Tensor picked = gather_last(log_probs, targets);
  return -sum(picked * Tensor::from({targets.size()}, std::move(w))) * (1.0 / static_cast<double>(n));
}

CaptionTargets make_caption_targets(const CaptionBatch& cb) {
  const std::size_t L = cb.max_len, L1 = L + 1;
  CaptionTargets t;
  t.inputs.assign(cb.rows() * L1, data::kPad);
  t.targets.assign(cb.rows() * L1, data::kPad);
  t.mask.assign(cb.rows() * L1, 0);
  for (std::size_t r = 0; r < cb.rows(); ++r) {
    const std::size_t n = cb.lengths[r];
    t.inputs[r * L1] = data::kBos;
    for (std::size_t i = 0; i < n; ++i) {
      t.inputs[r * L1 + i + 1] = cb.ids[r * L + i];
      t.targets[r * L1 + i] = cb.ids[r * L + i];
      t.mask[r * L1 + i] = 1;
    }
    t.targets[r * L1 + n] = data::kEos;
    t.mask[r * L1 + n] = 1;
  }
  return t;
}

VideoCaptioner::VideoCaptioner(const CaptionerConfig& cfg, std::size_t vocab_size, std::size_t frames,
                               std::size_t max_len, std::size_t image_size, std::mt19937_64& rng)
    : extractor(image_size, cfg.region_dim, rng),
      region_in(cfg.region_dim, cfg.word_dim, rng),
      embedding(vocab_size, cfg.word_dim, rng),
      mart(cfg.mart, cfg.word_dim, rng),
      vocab_head(cfg.mart.hidden_size, vocab_size, rng),
      cfg_(cfg),
      vocab_(vocab_size),
      frames_(frames),
      max_len_(max_len) {
  const std::size_t grid = image_size / 8;
  if (grid != cfg.region_grid) throw ConfigError("captioner.region_grid must equal image_size / 8");
  regions_ = grid * grid;
  if (regions_ + max_len + 1 > cfg.mart.max_seq_len)
    throw ConfigError("captioner.mart.max_seq_len must cover regions + max_len + 1");
  register_module("extractor", extractor);
  register_module("region_in", region_in);
  register_module("embedding", embedding);
  register_module("mart", mart);
  memory0 = register_param("memory0", normal_tensor({cfg.mart.num_layers, cfg.mart.num_memory_cells,
                                                     cfg.mart.hidden_size},
                                                    0.1, rng, true));
  register_module("vocab_head", vocab_head);
}

MemoryState VideoCaptioner::initial_memory(std::size_t batch) const {
  const auto& mc = mart.config();
  MemoryState m;
  for (std::size_t l = 0; l < mc.num_layers; ++l)
    m.cells.push_back(expand(slice(memory0, 0, l, 1), {batch, mc.num_memory_cells, mc.hidden_size}));
  return m;
}

VideoCaptioner::FrameStep VideoCaptioner::step(const Tensor& regions, const std::vector<std::int64_t>& text,
                                               const std::vector<std::size_t>& text_len, const MemoryState& memory,
                                               std::mt19937_64& rng) const {
  const std::size_t B = regions.dim(0), N = regions.dim(1), L1 = max_len_ + 1, S = N + L1;
  if (text.size() != B * L1 || text_len.size() != B) throw std::invalid_argument("VideoCaptioner::step: text shape");
  Tensor tokens = concat({region_in(regions), reshape(embedding(text), {B, L1, cfg_.word_dim})}, 1);
  std::vector<std::uint8_t> key(B * S, 0), attn(B * S * S, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < N; ++i) key[b * S + i] = 1;
    for (std::size_t i = 0; i < text_len[b] && i < L1; ++i) key[b * S + N + i] = 1;
    for (std::size_t q = 0; q < S; ++q)
      for (std::size_t k = 0; k < S; ++k) attn[(b * S + q) * S + k] = k < N || (q >= N && k <= q);
  }
  auto st = mart.step(tokens, key, memory, rng, &attn);
  Tensor text_enc = slice(st.encodings, 1, N, L1);
  return {log_softmax(vocab_head(text_enc)), st.memory};
}

std::vector<Tensor> VideoCaptioner::teacher_forced(const Tensor& images, const CaptionBatch& captions,
                                                   std::mt19937_64& rng) const {
  if (images.rank() != 5 || images.dim(0) != captions.stories || images.dim(1) != captions.frames)
    throw std::invalid_argument("VideoCaptioner: images " + shape_str(images.shape()) + " do not match captions");
  if (captions.max_len != max_len_) throw std::invalid_argument("VideoCaptioner: caption length mismatch");
  const std::size_t B = captions.stories, T = captions.frames, L1 = max_len_ + 1;
  const CaptionTargets tg = make_caption_targets(captions);
  Tensor regions = extractor(reshape(images, {B * T, 3, images.dim(3), images.dim(4)}));
  Tensor r4 = reshape(regions, {B, T, regions.dim(1), regions.dim(2)});
  MemoryState mem = initial_memory(B);
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < T; ++k) {
    std::vector<std::int64_t> text;
    std::vector<std::size_t> len;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t r = b * T + k;
      text.insert(text.end(), tg.inputs.begin() + r * L1, tg.inputs.begin() + (r + 1) * L1);
      len.push_back(captions.lengths[r] + 1);
    }
    auto st = step(reshape(slice(r4, 1, k, 1), {B, regions.dim(1), regions.dim(2)}), text, len, mem, rng);
    mem = st.memory;
    out.push_back(st.log_probs);
  }
  return out;
}

Tensor VideoCaptioner::caption_loss(const Tensor& images, const CaptionBatch& captions, std::mt19937_64& rng) const {
  const std::size_t B = captions.stories, T = captions.frames, L1 = max_len_ + 1;
  const auto per_frame = teacher_forced(images, captions, rng);
  const CaptionTargets tg = make_caption_targets(captions);
  // [B, T, L+1, V] is story-major, matching the target layout.
  Tensor lp = reshape(stack(per_frame, 1), {B * T * L1, vocab_});
  return mean_nll(lp, tg.targets, tg.mask);
}

Tensor VideoCaptioner::dual_loss(const Tensor& images, const CaptionBatch& captions) const {
  if (!frozen()) throw ContractError("dual loss requires a frozen captioner; load or pretrain it first");
  std::mt19937_64 rng(0);
  return caption_loss(images, captions, rng);
}

std::vector<std::vector<std::vector<std::int64_t>>> VideoCaptioner::greedy(const Tensor& images) const {
  if (images.rank() != 5 || images.dim(1) != frames_) throw std::invalid_argument("VideoCaptioner::greedy: images");
  NoGradGuard guard;
  std::mt19937_64 rng(0);
  const std::size_t B = images.dim(0), T = images.dim(1), L1 = max_len_ + 1;
  Tensor regions = extractor(reshape(images, {B * T, 3, images.dim(3), images.dim(4)}));
  Tensor r4 = reshape(regions, {B, T, regions.dim(1), regions.dim(2)});
  MemoryState mem = initial_memory(B);
  std::vector<std::vector<std::vector<std::int64_t>>> out(B, std::vector<std::vector<std::int64_t>>(T));
  for (std::size_t k = 0; k < T; ++k) {
    Tensor rk = reshape(slice(r4, 1, k, 1), {B, regions.dim(1), regions.dim(2)});
    std::vector<std::int64_t> text(B * L1, data::kPad);
    std::vector<std::size_t> len(B, 1);
    std::vector<bool> done(B, false);
    for (std::size_t b = 0; b < B; ++b) text[b * L1] = data::kBos;
    for (std::size_t pos = 0; pos < L1; ++pos) {
      auto st = step(rk, text, len, mem, rng);
      const auto lp = st.log_probs.data();
      bool all_done = true;
      for (std::size_t b = 0; b < B; ++b) {
        if (done[b]) continue;
        const double* row = lp.data() + (b * L1 + pos) * vocab_;
        // Never emit <pad> or <bos>.
        std::int64_t best = data::kEos;
        for (std::size_t v = data::kEos; v < vocab_; ++v)
          if (row[v] > row[best]) best = static_cast<std::int64_t>(v);
        if (best == data::kEos || pos + 1 >= L1) {
          done[b] = true;
          if (best != data::kEos) out[b][k].push_back(best);
        } else {
          out[b][k].push_back(best);
          text[b * L1 + pos + 1] = best;
          len[b] = pos + 2;
        }
        all_done = all_done && done[b];
      }
      if (all_done) break;
    }
    mem = step(rk, text, len, mem, rng).memory;
  }
  return out;
}

double token_accuracy(const std::vector<std::vector<std::int64_t>>& hyps,
                      const std::vector<std::vector<std::int64_t>>& refs) {
  if (hyps.size() != refs.size()) throw std::invalid_argument("token_accuracy: hypothesis/reference count mismatch");
  std::size_t total = 0, hit = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    auto r = refs[i];
    auto h = hyps[i];
    r.push_back(data::kEos);
    h.push_back(data::kEos);
    for (std::size_t j = 0; j < r.size(); ++j) {
      ++total;
      hit += j < h.size() && h[j] == r[j];
    }
  }
  return total ? 100.0 * static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

namespace {

double validation_loss(VideoCaptioner& cap, const data::StoryDataset& val, std::size_t limit, std::size_t batch) {
  NoGradGuard guard;
  std::mt19937_64 rng(0);
  const std::size_t n = std::min(limit, val.stories.size());
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t i = 0; i < n; i += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(n, i + batch); ++j) idx.push_back(j);
    const auto stories = pick(val, idx);
    total += cap.caption_loss(make_image_batch(stories), make_caption_batch(stories), rng).item();
    ++batches;
  }
  return total / static_cast<double>(batches);
}

}  // namespace

CaptionerReport pretrain_captioner(VideoCaptioner& cap, const data::StoryDataset& train,
                                   const data::StoryDataset& val, const CaptionerConfig& cfg, std::uint64_t seed,
                                   const ProgressFn& progress) {
  if (train.stories.empty()) throw DataIntegrityError("captioner pretraining needs a non-empty training split");
  const data::StoryDataset& held = val.stories.empty() ? train : val;
  std::mt19937_64 rng(seed);
  Adam opt(cap.parameters(), cfg.lr, 0.9, 0.999);
  CaptionerReport rep;
  rep.best_val_loss = std::numeric_limits<double>::infinity();
  auto best = copy_values(cap.parameters());
  std::size_t stale = 0;
  std::vector<std::size_t> order(train.stories.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    cap.set_training(true);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); i += cfg.batch) {
      std::vector<std::size_t> idx(order.begin() + i, order.begin() + std::min(order.size(), i + cfg.batch));
      const auto stories = pick(train, idx);
      Tensor loss = cap.caption_loss(make_image_batch(stories), make_caption_batch(stories), rng);
      loss.backward();
      opt.step();
    }
    cap.set_training(false);
    const double vl = validation_loss(cap, held, 200, 25);
    rep.val_history.push_back(vl);
    rep.epochs = epoch + 1;
    if (progress) progress("captioner epoch " + std::to_string(epoch + 1) + " val_loss " + std::to_string(vl));
    if (vl < rep.best_val_loss - 1e-4) {
      rep.best_val_loss = vl;
      best = copy_values(cap.parameters());
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  assign_values(cap.parameters(), best);
  cap.freeze_for_inference();

  std::vector<std::vector<std::int64_t>> hyps, refs;
  const std::size_t n = std::min<std::size_t>(200, held.stories.size());
  for (std::size_t i = 0; i < n; i += 25) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(n, i + 25); ++j) idx.push_back(j);
    const auto stories = pick(held, idx);
    const auto dec = cap.greedy(make_image_batch(stories));
    for (std::size_t b = 0; b < stories.size(); ++b)
      for (std::size_t k = 0; k < stories[b]->length(); ++k) {
        hyps.push_back(dec[b][k]);
        const auto& c = stories[b]->captions[k];
        refs.emplace_back(c.ids.begin(), c.ids.begin() + static_cast<std::ptrdiff_t>(c.length));
      }
  }
  rep.token_accuracy = token_accuracy(hyps, refs);
  return rep;
}

}  // namespace duco
