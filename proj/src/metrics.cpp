#include "duco/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

namespace duco::metrics {

namespace {

double f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom ? 100.0 * 2.0 * static_cast<double>(tp) / static_cast<double>(denom) : 100.0;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

}  // namespace

CharScores score_characters(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& labels,
                            std::size_t C) {
  if (C == 0 || pred.size() != labels.size() || labels.size() % C)
    throw std::invalid_argument("score_characters: prediction/label count mismatch");
  CharScores s;
  s.frames = labels.size() / C;
  std::vector<std::size_t> tp(C, 0), fp(C, 0), fn(C, 0);
  std::size_t exact = 0;
  for (std::size_t f = 0; f < s.frames; ++f) {
    bool all = true;
    for (std::size_t c = 0; c < C; ++c) {
      const bool p = pred[f * C + c] != 0, l = labels[f * C + c] != 0;
      tp[c] += p && l;
      fp[c] += p && !l;
      fn[c] += !p && l;
      all = all && p == l;
    }
    exact += all;
  }
  for (std::size_t c = 0; c < C; ++c) {
    s.tp += tp[c];
    s.fp += fp[c];
    s.fn += fn[c];
    s.per_character_f1.push_back(f1(tp[c], fp[c], fn[c]));
  }
  s.micro_f1 = f1(s.tp, s.fp, s.fn);
  s.precision = s.tp + s.fp ? 100.0 * static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp) : 100.0;
  s.recall = s.tp + s.fn ? 100.0 * static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn) : 100.0;
  s.exact_match = s.frames ? 100.0 * static_cast<double>(exact) / static_cast<double>(s.frames) : 0.0;
  return s;
}

double corpus_bleu(const std::vector<std::vector<std::string>>& hyps, const std::vector<std::vector<std::string>>& refs,
                   std::size_t max_n, double epsilon) {
  if (hyps.size() != refs.size()) throw std::invalid_argument("corpus_bleu: hypothesis/reference count mismatch");
  if (max_n == 0) throw std::invalid_argument("corpus_bleu: max_n must be >= 1");
  std::vector<double> matched(max_n, 0.0), total(max_n, 0.0);
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    hyp_len += hyps[i].size();
    ref_len += refs[i].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto h = ngram_counts(hyps[i], n);
      const auto r = ngram_counts(refs[i], n);
      for (const auto& [g, c] : h) {
        total[n - 1] += static_cast<double>(c);
        auto it = r.find(g);
        if (it != r.end()) matched[n - 1] += static_cast<double>(std::min(c, it->second));
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (total[n] == 0.0) return 0.0;  // hypotheses too short for this order
    const double m = matched[n] > 0.0 ? matched[n] : epsilon;
    log_p += std::log(m / total[n]) / static_cast<double>(max_n);
  }
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_p);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0.0 ? dot / denom : 0.0;
}

std::vector<std::size_t> rank_by_cosine(const std::vector<double>& query,
                                        const std::vector<std::vector<double>>& candidates) {
  std::vector<double> sims;
  for (const auto& c : candidates) sims.push_back(cosine(query, c));
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  return order;
}

RankAccuracy ranking_accuracy(const std::vector<RankingQuery>& queries) {
  RankAccuracy acc;
  std::size_t t1 = 0, t2 = 0;
  for (const auto& q : queries) {
    const auto order = rank_by_cosine(q.query, q.candidates);
    t1 += !order.empty() && order[0] == q.answer;
    t2 += (!order.empty() && order[0] == q.answer) || (order.size() > 1 && order[1] == q.answer);
  }
  acc.sets = queries.size();
  if (acc.sets) {
    acc.top1 = 100.0 * static_cast<double>(t1) / static_cast<double>(acc.sets);
    acc.top2 = 100.0 * static_cast<double>(t2) / static_cast<double>(acc.sets);
  }
  return acc;
}

RPrecision r_precision(const std::vector<std::vector<double>>& visual, const std::vector<std::vector<double>>& text,
                       std::size_t runs, std::size_t candidates, std::uint64_t seed) {
  const std::size_t S = visual.size();
  if (text.size() != S) throw std::invalid_argument("r_precision: visual/text count mismatch");
  if (candidates < 2) throw std::invalid_argument("r_precision: need at least 2 candidates");
  if (S < candidates)
    throw std::invalid_argument("r_precision: " + std::to_string(S) + " stories cannot supply " +
                                std::to_string(candidates - 1) + " distinct mismatches");
  if (runs == 0) throw std::invalid_argument("r_precision: runs must be >= 1");
  std::vector<std::vector<double>> sim(S, std::vector<double>(S));
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j) sim[i][j] = cosine(visual[i], text[j]);
  RPrecision out;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> pool(S - 1);
  for (std::size_t r = 0; r < runs; ++r) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < S; ++i) {
      for (std::size_t j = 0, w = 0; j < S; ++j)
        if (j != i) pool[w++] = j;
      // Partial Fisher-Yates: the first candidates-1 entries are the draw.
      bool hit = true;
      for (std::size_t d = 0; d + 1 < candidates; ++d) {
        std::uniform_int_distribution<std::size_t> pickd(d, pool.size() - 1);
        std::swap(pool[d], pool[pickd(rng)]);
        if (sim[i][pool[d]] > sim[i][i]) hit = false;
      }
      hits += hit;
    }
    out.runs.push_back(100.0 * static_cast<double>(hits) / static_cast<double>(S));
  }
  out.mean = std::accumulate(out.runs.begin(), out.runs.end(), 0.0) / static_cast<double>(runs);
  double var = 0.0;
  for (double v : out.runs) var += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(var / static_cast<double>(runs));
  return out;
}

}  // namespace duco::metrics
