#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nbrew/words.hpp"

namespace nbrew::ngram {

inline const std::string kBos = "<s>";
inline const std::string kEos = "</s>";
inline const std::string kUnk = "<unk>";

// log10 stand-in for probability zero, as ARPA files write it.
inline constexpr double kLogZero = -99.0;

using Ngram = std::vector<std::string>;

struct CountTable {
  std::size_t order = 0;
  bool boundaries = true;
  std::vector<std::map<Ngram, std::size_t>> counts;  // counts[k]: (k+1)-grams
  // Raw statistics, fixed at counting time and kept through cutoffs.
  std::vector<std::map<std::size_t, std::size_t>> count_of_counts;  // per order: r -> N_r
  std::vector<std::map<Ngram, std::size_t>> context_totals;         // per order: context -> sum of counts

  std::size_t count(const Ngram& gram) const;
};

// Sliding-window counts for orders 1..order. With boundaries, every sentence
// is wrapped in one <s> and one </s>.
CountTable count(std::span<const Words> corpus, std::size_t order = 4, bool boundaries = true);

// Drops n-grams of order >= min_order whose count is below min_count.
CountTable apply_cutoffs(CountTable table, std::size_t min_order = 3, std::size_t min_count = 2);

// r* = (r+1) N_{r+1} / N_r
double good_turing_count(std::size_t r, const std::map<std::size_t, std::size_t>& count_of_counts);

struct Discounts {
  std::size_t max_count = 7;
  std::vector<std::vector<double>> ratio;  // ratio[k][r] for 1 <= r <= max_count; 1 outside
  std::vector<bool> smoothed;              // order k used regression-smoothed N_r

  double at(std::size_t order_index, std::size_t r) const;
  static Discounts none(std::size_t order);
};

// Katz-normalized Good-Turing ratios for orders 2..n (unigrams stay at 1).
// Any N_r = 0 for r <= max_count + 1 switches that order to N_r smoothed by a
// log-log linear fit; ratios outside (0, 1] are replaced by 1.
Discounts good_turing_discount(const CountTable& table, std::size_t max_count = 7);

struct NgramEntry {
  double log10_prob = kLogZero;
  std::optional<double> log10_backoff;
};

class BackoffModel {
 public:
  BackoffModel() = default;
  explicit BackoffModel(std::size_t order);

  std::size_t order() const { return grams_.size(); }
  const std::map<Ngram, NgramEntry>& entries(std::size_t order_index) const { return grams_.at(order_index); }
  std::map<Ngram, NgramEntry>& mutable_entries(std::size_t order_index) { return grams_.at(order_index); }
  bool boundaries() const { return boundaries_; }
  void set_boundaries(bool flag) { boundaries_ = flag; }

  const NgramEntry* find(const Ngram& gram) const;
  bool in_vocabulary(const std::string& word) const;
  // Words a distribution ranges over: every unigram except <s>.
  std::vector<std::string> predicted_words() const;

  // log10 p(word | context); the context is truncated to order-1 words and
  // unknown words map to <unk>.
  double conditional_log10(std::span<const std::string> context, const std::string& word) const;

  // Sum of per-word conditionals, plus </s> when the model has boundaries.
  double sentence_log10(const Words& words) const;

 private:
  std::string map_word(const std::string& w) const;

  std::vector<std::map<Ngram, NgramEntry>> grams_;
  bool boundaries_ = true;
};

BackoffModel estimate(const CountTable& table, const Discounts& discounts);

// count -> discounts (raw counts) -> cutoffs -> estimate
BackoffModel train_katz(std::span<const Words> corpus, std::size_t order = 4, std::size_t max_count = 7);

double logprob(const BackoffModel& model, const Words& words);

std::string to_arpa(const BackoffModel& model);
BackoffModel parse_arpa(const std::string& text);
void export_arpa(const BackoffModel& model, const std::filesystem::path& path);
BackoffModel import_arpa(const std::filesystem::path& path);

}  // namespace nbrew::ngram
