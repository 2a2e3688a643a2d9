#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "nbrew/corpus.hpp"
#include "nbrew/words.hpp"

namespace nbrew::metrics {

// Levenshtein-minimal alignment counts with unit costs.
struct EditStats {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t ref_len = 0;

  std::size_t distance() const { return substitutions + insertions + deletions; }
};

EditStats edit_stats(std::span<const std::string> hyp, std::span<const std::string> ref);

// (S+I+D)/|ref|, uncapped. An empty reference gives 0 for an empty
// hypothesis and 1 otherwise.
double wer(std::span<const std::string> hyp, std::span<const std::string> ref);

// (1 - min(wer, 1))^2, in [0, 1].
double query_similarity_from_wer(double wer_value);
double query_similarity(std::span<const std::string> hyp, std::span<const std::string> ref);

// Accumulates edit errors and reference words across a corpus.
struct ErrorTally {
  std::size_t errors = 0;
  std::size_t ref_words = 0;
  std::size_t sentences = 0;

  void add(const EditStats& s);
  // errors / ref_words; follows the empty-reference convention of wer().
  double rate() const;
};

using HypRefPair = std::pair<Words, Words>;

double corpus_wer(std::span<const HypRefPair> pairs);

// Index of the hypothesis with the fewest word errors (lowest rank on ties).
std::size_t oracle_index(const NBestRecord& record);
double oracle_wer(std::span<const NBestRecord> records);

// Corpus WER of the ASR 1-best (hypotheses[0]) of every record.
double first_best_wer(std::span<const NBestRecord> records);

}  // namespace nbrew::metrics
