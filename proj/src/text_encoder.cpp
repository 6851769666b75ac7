#include "duco/text_encoder.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "duco/errors.hpp"

namespace duco {

ConditioningState reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& eps) {
  ConditioningState s;
  s.mu = mu;
  s.logvar = logvar;
  s.sigma2 = exp(logvar);
  s.eps = eps;
  s.h0 = mu + exp(logvar * 0.5) * eps;
  return s;
}

Tensor kl_loss(const Tensor& mu, const Tensor& sigma2) {
  if (mu.shape() != sigma2.shape()) throw std::invalid_argument("kl_loss: mu and sigma2 shapes differ");
  for (double v : sigma2.data())
    if (!(v > 0.0)) throw std::domain_error("kl_loss: variance must be positive");
  const std::size_t rows = mu.rank() > 1 ? mu.numel() / mu.dim(-1) : 1;
  Tensor terms = square(mu) + sigma2 - log(sigma2) - 1.0;
  return sum(terms) * (0.5 / static_cast<double>(rows));
}

TextEncoder::TextEncoder(std::size_t vocab_size, std::size_t d_w, std::size_t d_s, std::size_t d_h,
                         std::size_t frames, std::mt19937_64& rng)
    : embedding(vocab_size, d_w, rng),
      sentence_proj(d_w, d_s, rng),
      mu_head(frames * d_s, d_h, rng),
      logvar_head(frames * d_s, d_h, rng),
      frames_(frames),
      d_s_(d_s),
      d_h_(d_h) {
  // Start the posterior close to the prior.
  for (auto& w : logvar_head.weight.data()) w *= 0.1;
  register_module("embedding", embedding);
  register_module("sentence", sentence_proj);
  register_module("mu", mu_head);
  register_module("logvar", logvar_head);
}

TextEncoder::Words TextEncoder::embed(const std::vector<std::int64_t>& ids, const std::vector<std::uint8_t>& mask,
                                      std::size_t rows) const {
  if (rows == 0 || ids.size() % rows || ids.size() != mask.size())
    throw std::invalid_argument("TextEncoder::embed: ids/mask do not form rows");
  const std::size_t L = ids.size() / rows;
  const std::size_t d = embedding.table.dim(1);
  std::vector<double> maskf(mask.begin(), mask.end());
  std::vector<double> inv_len(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < L; ++i) n += mask[r * L + i] ? 1 : 0;
    if (n == 0) throw std::invalid_argument("TextEncoder::embed: caption has no unmasked tokens");
    inv_len[r] = 1.0 / static_cast<double>(n);
  }
  Tensor m = Tensor::from({rows, L, 1}, std::move(maskf));
  Tensor w = reshape(embedding(ids), {rows, L, d}) * m;
  Tensor avg = sum(w, 1) * Tensor::from({rows, 1}, std::move(inv_len));
  return {w, sentence_proj(avg)};
}

ConditioningState TextEncoder::encode_story(const Tensor& sentences, std::mt19937_64& rng,
                                            const std::optional<Tensor>& eps) const {
  if (sentences.rank() != 3 || sentences.dim(1) != frames_ || sentences.dim(2) != d_s_)
    throw std::invalid_argument("encode_story expects [B, " + std::to_string(frames_) + ", " + std::to_string(d_s_) +
                                "] sentences, got " + shape_str(sentences.shape()));
  const std::size_t B = sentences.dim(0);
  Tensor S = reshape(sentences, {B, frames_ * d_s_});
  Tensor mu = mu_head(S);
  Tensor logvar = logvar_head(S);
  Tensor e;
  if (eps) {
    if (eps->shape() != mu.shape()) throw std::invalid_argument("encode_story: eps shape mismatch");
    e = *eps;
  } else {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(B * d_h_);
    for (auto& x : v) x = n(rng);
    e = Tensor::from({B, d_h_}, std::move(v));
  }
  return reparameterize(mu, logvar, e);
}

std::size_t TextEncoder::load_pretrained(const std::filesystem::path& path, const data::Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw DependencyError("cannot open pretrained embeddings " + path.string());
  const std::size_t d = embedding.table.dim(1);
  auto table = embedding.table.data();
  std::size_t copied = 0;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tok;
    if (!(ss >> tok) || !vocab.contains(tok)) continue;
    std::vector<double> v;
    double x;
    while (ss >> x) v.push_back(x);
    if (v.size() != d) throw DataIntegrityError("pretrained vector for '" + tok + "' has " + std::to_string(v.size()) +
                                                " values, expected " + std::to_string(d));
    std::copy(v.begin(), v.end(), table.begin() + vocab.id(tok) * d);
    ++copied;
  }
  return copied;
}

}  // namespace duco
