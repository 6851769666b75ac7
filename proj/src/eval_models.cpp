#include "duco/eval_models.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "duco/errors.hpp"
#include "duco/metrics.hpp"
#include "duco/optim.hpp"

namespace duco {

CharClassifier::CharClassifier(const ClassifierConfig& cfg, std::size_t image_size, std::size_t num_characters,
                               std::mt19937_64& rng) {
  const std::size_t c = cfg.base_channels, g = image_size / 8;
  convs.emplace_back(3, c, 3, 2, 1, rng);
  convs.emplace_back(c, 2 * c, 3, 2, 1, rng);
  convs.emplace_back(2 * c, 4 * c, 3, 2, 1, rng);
  for (std::size_t i = 0; i < convs.size(); ++i) register_module("conv" + std::to_string(i), convs[i]);
  feature = Linear(4 * c * g * g, cfg.feature_dim, rng);
  head = Linear(cfg.feature_dim, num_characters, rng);
  register_module("feature", feature);
  register_module("head", head);
}

Tensor CharClassifier::features(const Tensor& images) const {
  Tensor h = images;
  for (const auto& conv : convs) h = relu(conv(h));
  const std::size_t R = h.dim(0);
  return relu(feature(reshape(h, {R, h.numel() / R})));
}

Tensor CharClassifier::logits(const Tensor& images) const { return head(features(images)); }

std::vector<std::uint8_t> CharClassifier::predict(const Tensor& images, double threshold) const {
  NoGradGuard guard;
  Tensor p = sigmoid(logits(images));
  std::vector<std::uint8_t> out;
  for (double v : p.data()) out.push_back(v >= threshold);
  return out;
}

namespace {

struct FrameSet {
  std::vector<const data::Image*> images;
  std::vector<const std::vector<std::uint8_t>*> labels;
};

FrameSet frames_of(const data::StoryDataset& ds) {
  FrameSet f;
  for (const auto& s : ds.stories)
    for (std::size_t k = 0; k < s.length(); ++k) {
      f.images.push_back(&s.frames[k]);
      f.labels.push_back(&s.char_labels[k]);
    }
  return f;
}

Tensor image_tensor(const std::vector<const data::Image*>& ims) {
  const std::size_t H = ims.front()->height, W = ims.front()->width;
  std::vector<double> v;
  v.reserve(ims.size() * 3 * H * W);
  for (const auto* im : ims) v.insert(v.end(), im->pixels.begin(), im->pixels.end());
  return Tensor::from({ims.size(), 3, H, W}, std::move(v));
}

metrics::CharScores score_frames(const CharClassifier& clf, const FrameSet& fs, double threshold) {
  std::vector<std::uint8_t> pred, labels;
  for (std::size_t i = 0; i < fs.images.size(); i += 256) {
    const std::size_t end = std::min(fs.images.size(), i + 256);
    std::vector<const data::Image*> chunk(fs.images.begin() + i, fs.images.begin() + end);
    const auto p = clf.predict(image_tensor(chunk), threshold);
    pred.insert(pred.end(), p.begin(), p.end());
    for (std::size_t j = i; j < end; ++j) labels.insert(labels.end(), fs.labels[j]->begin(), fs.labels[j]->end());
  }
  return metrics::score_characters(pred, labels, fs.labels.front()->size());
}

}  // namespace

ClassifierReport train_char_classifier(CharClassifier& clf, const data::StoryDataset& train,
                                       const data::StoryDataset& val, const ClassifierConfig& cfg,
                                       std::uint64_t seed, double threshold, const ProgressFn& progress) {
  if (train.stories.empty()) throw DataIntegrityError("classifier training needs a non-empty training split");
  const FrameSet tr = frames_of(train);
  const FrameSet held = frames_of(val.stories.empty() ? train : val);
  std::mt19937_64 rng(seed);
  Adam opt(clf.parameters(), cfg.lr, 0.9, 0.999);
  std::vector<std::size_t> order(tr.images.size());
  std::iota(order.begin(), order.end(), 0);
  ClassifierReport rep;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    clf.set_training(true);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); i += cfg.batch) {
      std::vector<const data::Image*> ims;
      std::vector<double> labels;
      for (std::size_t j = i; j < std::min(order.size(), i + cfg.batch); ++j) {
        ims.push_back(tr.images[order[j]]);
        for (auto b : *tr.labels[order[j]]) labels.push_back(b);
      }
      Tensor loss = bce_with_logits(clf.logits(image_tensor(ims)), labels);
      loss.backward();
      opt.step();
    }
    clf.set_training(false);
    rep.epochs = epoch + 1;
    if (progress) {
      const auto s = score_frames(clf, held, threshold);
      progress("classifier epoch " + std::to_string(epoch + 1) + " held-out micro-F1 " + std::to_string(s.micro_f1));
    }
  }
  clf.set_training(false);
  clf.freeze();
  const auto s = score_frames(clf, held, threshold);
  rep.precision = s.precision;
  rep.recall = s.recall;
  rep.micro_f1 = s.micro_f1;
  rep.exact_match = s.exact_match;
  return rep;
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) { return matmul(l2_normalize(a), transpose(l2_normalize(b), 0, 1)); }

Tensor diagonal_cross_entropy(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(0) != logits.dim(1))
    throw std::invalid_argument("diagonal_cross_entropy expects a square matrix");
  std::vector<std::int64_t> idx(logits.dim(0));
  std::iota(idx.begin(), idx.end(), 0);
  return -mean(gather_last(log_softmax(logits), idx));
}

Tensor story_matching_loss(const Tensor& visual, const Tensor& text, double gamma) {
  if (visual.dim(0) < 2) throw std::invalid_argument("story matching loss needs a batch of at least 2");
  Tensor sim = cosine_matrix(visual, text) * gamma;
  return diagonal_cross_entropy(sim) + diagonal_cross_entropy(transpose(sim, 0, 1));
}

HDamsm::HDamsm(const DamsmConfig& cfg, std::size_t vocab_size, std::size_t frames, std::size_t image_size,
               std::mt19937_64& rng)
    : embedding(vocab_size, cfg.word_dim, rng),
      word_rnn(cfg.word_dim, cfg.dim / 2, rng),
      story_rnn(cfg.dim, cfg.dim / 2, rng),
      cfg_(cfg),
      frames_(frames) {
  if (cfg.dim % 2) throw ConfigError("damsm.dim must be even");
  if (image_size % 8) throw ConfigError("image size must be a multiple of 8");
  register_module("embedding", embedding);
  register_module("word_rnn", word_rnn);
  register_module("story_rnn", story_rnn);
  convs.emplace_back(3, 32, 3, 2, 1, rng);
  convs.emplace_back(32, 64, 3, 2, 1, rng);
  convs.emplace_back(64, cfg.dim, 3, 2, 1, rng);
  for (std::size_t i = 0; i < convs.size(); ++i) register_module("conv" + std::to_string(i), convs[i]);
  global = Linear(cfg.dim, cfg.dim, rng);
  register_module("global", global);
}

HDamsm::Text HDamsm::encode_text(const CaptionBatch& cb) const {
  const std::size_t R = cb.rows(), L = cb.max_len, B = cb.stories, T = cb.frames;
  if (T != frames_) throw std::invalid_argument("HDamsm: frame count mismatch");
  Tensor x = reshape(embedding(cb.ids), {R, L, cfg_.word_dim});
  auto wr = word_rnn(x, cb.lengths);
  Text t;
  t.words = wr.outputs;
  t.sentences = wr.final;
  auto sr = story_rnn(reshape(wr.final, {B, T, cfg_.dim}), std::vector<std::size_t>(B, T));
  t.story = sr.final;
  return t;
}

HDamsm::Visual HDamsm::encode_images(const Tensor& images) const {
  if (images.rank() != 5 || images.dim(1) != frames_) throw std::invalid_argument("HDamsm: images must be [B, T, 3, H, W]");
  const std::size_t B = images.dim(0), R = B * frames_;
  Tensor h = reshape(images, {R, 3, images.dim(3), images.dim(4)});
  for (std::size_t i = 0; i < convs.size(); ++i) h = i + 1 < convs.size() ? relu(convs[i](h)) : convs[i](h);
  const std::size_t N = h.dim(2) * h.dim(3);
  Visual v;
  v.local = transpose(reshape(h, {R, cfg_.dim, N}), 1, 2);
  v.global = global(mean(v.local, 1));
  v.story = mean(reshape(v.global, {B, frames_, cfg_.dim}), 1);
  return v;
}

HDamsm::Losses HDamsm::losses(const Tensor& images, const CaptionBatch& cb) const {
  if (cb.stories < 2) throw std::invalid_argument("H-DAMSM losses need at least 2 stories per batch");
  const Text t = encode_text(cb);
  const Visual v = encode_images(images);
  const std::size_t R = cb.rows(), L = cb.max_len, N = v.local.dim(1), d = cfg_.dim;

  // Word-level matching for every (image i, caption j) pair.
  Tensor words = expand(unsqueeze(t.words, 0), {R, R, L, d});
  Tensor regions = expand(unsqueeze(v.local, 1), {R, R, N, d});
  Tensor s = matmul(words, transpose(regions, 2, 3));  // [R, R, L, N]
  std::vector<std::uint8_t> word_mask(R * R * N * L);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < R; ++j)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t l = 0; l < L; ++l) word_mask[((i * R + j) * N + n) * L + l] = cb.mask[j * L + l];
  Tensor s_norm = transpose(masked_softmax(transpose(s, 2, 3), word_mask), 2, 3);
  Tensor alpha = softmax(s_norm * cfg_.gamma1);
  Tensor ctx = matmul(alpha, regions);  // [R, R, L, d]
  Tensor cos = sum(l2_normalize(ctx) * l2_normalize(words), 3);  // [R, R, L]
  std::vector<double> wmask(R * R * L);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < R; ++j)
      for (std::size_t l = 0; l < L; ++l) wmask[(i * R + j) * L + l] = cb.mask[j * L + l];
  Tensor agg = log(sum(exp(cos * cfg_.gamma2) * Tensor::from({R, R, L}, std::move(wmask)), 2)) * (1.0 / cfg_.gamma2);
  Tensor word_scores = agg * cfg_.gamma3;  // rows: images, cols: captions

  Losses out;
  out.word = diagonal_cross_entropy(word_scores) + diagonal_cross_entropy(transpose(word_scores, 0, 1));
  Tensor sent = cosine_matrix(v.global, t.sentences) * cfg_.gamma3;
  out.sentence = diagonal_cross_entropy(sent) + diagonal_cross_entropy(transpose(sent, 0, 1));
  out.story = story_matching_loss(v.story, t.story, cfg_.gamma_story);
  out.total = out.word + out.sentence + out.story;
  return out;
}

StoryEmbeddings embed_stories(const HDamsm& model, const data::StoryDataset& ds, const Tensor* images) {
  NoGradGuard guard;
  StoryEmbeddings out;
  const std::size_t S = ds.stories.size();
  for (std::size_t i = 0; i < S; i += 50) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(S, i + 50); ++j) idx.push_back(j);
    const auto stories = pick(ds, idx);
    Tensor ims = images ? slice(*images, 0, i, idx.size()) : make_image_batch(stories);
    const auto vis = model.encode_images(ims).story;
    const auto txt = model.encode_text(make_caption_batch(stories)).story;
    const std::size_t d = vis.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      out.visual.emplace_back(vis.data().begin() + b * d, vis.data().begin() + (b + 1) * d);
      out.text.emplace_back(txt.data().begin() + b * d, txt.data().begin() + (b + 1) * d);
    }
  }
  return out;
}

DamsmReport train_h_damsm(HDamsm& model, const data::StoryDataset& train, const data::StoryDataset& val,
                          const DamsmConfig& cfg, std::uint64_t seed, const ProgressFn& progress) {
  if (train.stories.size() < 2) throw DataIntegrityError("H-DAMSM training needs at least 2 stories");
  if (cfg.batch < 2) throw ConfigError("damsm.batch must be >= 2");
  std::mt19937_64 rng(seed);
  Adam opt(model.parameters(), cfg.lr, 0.9, 0.999);
  std::vector<std::size_t> order(train.stories.size());
  std::iota(order.begin(), order.end(), 0);
  DamsmReport rep;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    model.set_training(true);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t i = 0; i + cfg.batch <= order.size(); i += cfg.batch) {
      std::vector<std::size_t> idx(order.begin() + i, order.begin() + i + cfg.batch);
      const auto stories = pick(train, idx);
      auto l = model.losses(make_image_batch(stories), make_caption_batch(stories));
      total += l.total.item();
      ++batches;
      l.total.backward();
      opt.step();
    }
    rep.epochs = epoch + 1;
    rep.final_loss = batches ? total / static_cast<double>(batches) : 0.0;
    if (progress) progress("h-damsm epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(rep.final_loss));
  }
  model.set_training(false);
  model.freeze();
  if (val.stories.size() >= 100) {
    const auto e = embed_stories(model, val);
    rep.val_r_precision = metrics::r_precision(e.visual, e.text, 10, 100, seed).mean;
  }
  return rep;
}

}  // namespace duco
