#pragma once

// Model-free metric arithmetic: character F1 / exact match, corpus BLEU,
// cosine-ranking accuracy and R-precision.

#include <cstdint>
#include <string>
#include <vector>

namespace duco::metrics {

struct CharScores {
  double micro_f1 = 0.0;     // percent
  double exact_match = 0.0;  // percent of frames with all labels right
  double precision = 0.0;
  double recall = 0.0;
  std::vector<double> per_character_f1;
  std::size_t tp = 0, fp = 0, fn = 0, frames = 0;
};

// predictions and labels: [frames * num_characters] 0/1.
CharScores score_characters(const std::vector<std::uint8_t>& predictions, const std::vector<std::uint8_t>& labels,
                            std::size_t num_characters);

// Corpus BLEU-n (uniform weights, brevity penalty) in percent, one reference
// per hypothesis. Zero n-gram match counts are replaced by `epsilon`.
double corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references, std::size_t max_n, double epsilon = 0.1);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

// Candidate indices ordered by descending cosine to the query; ties go to
// the lower index.
std::vector<std::size_t> rank_by_cosine(const std::vector<double>& query,
                                        const std::vector<std::vector<double>>& candidates);

struct RankAccuracy {
  double top1 = 0.0;  // percent
  double top2 = 0.0;
  std::size_t sets = 0;
};

struct RankingQuery {
  std::vector<double> query;
  std::vector<std::vector<double>> candidates;
  std::size_t answer = 0;
};
RankAccuracy ranking_accuracy(const std::vector<RankingQuery>& queries);

struct RPrecision {
  double mean = 0.0;  // percent
  double std = 0.0;   // population std over runs
  std::vector<double> runs;
};

// visual[i] and text[i] belong to story i. Each run ranks the true text of
// every story against (candidates - 1) mismatched texts sampled without
// replacement; a hit is the truth ranking first (ties favour the truth).
RPrecision r_precision(const std::vector<std::vector<double>>& visual, const std::vector<std::vector<double>>& text,
                       std::size_t runs, std::size_t candidates, std::uint64_t seed);

}  // namespace duco::metrics
