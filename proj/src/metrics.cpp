#include "nbrew/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <limits>

#include "nbrew/error.hpp"

namespace nbrew {

Words split_words(std::string_view text) {
  Words out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string join_words(const Words& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

}  // namespace nbrew

namespace nbrew::metrics {

EditStats edit_stats(std::span<const std::string> hyp, std::span<const std::string> ref) {
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  // cost[i][j]: distance between ref[0,i) and hyp[0,j).
  std::vector<std::size_t> cost((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return cost[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }

  EditStats stats;
  stats.ref_len = n;
  std::size_t i = n;
  std::size_t j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      if (at(i, j) == at(i - 1, j - 1) + (same ? 0 : 1)) {
        if (!same) ++stats.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++stats.deletions;
      --i;
    } else {
      ++stats.insertions;
      --j;
    }
  }
  return stats;
}

double wer(std::span<const std::string> hyp, std::span<const std::string> ref) {
  if (ref.empty()) return hyp.empty() ? 0.0 : 1.0;
  return static_cast<double>(edit_stats(hyp, ref).distance()) / static_cast<double>(ref.size());
}

double query_similarity_from_wer(double wer_value) {
  const double capped = std::min(wer_value, 1.0);
  return (1.0 - capped) * (1.0 - capped);
}

double query_similarity(std::span<const std::string> hyp, std::span<const std::string> ref) {
  return query_similarity_from_wer(wer(hyp, ref));
}

void ErrorTally::add(const EditStats& s) {
  // Empty references count one error for a non-empty hypothesis.
  if (s.ref_len == 0)
    errors += s.insertions > 0 ? 1 : 0;
  else
    errors += s.distance();
  ref_words += s.ref_len;
  ++sentences;
}

double ErrorTally::rate() const {
  if (sentences == 0) throw InputError("error rate over an empty corpus");
  if (ref_words == 0) return errors == 0 ? 0.0 : 1.0;
  return static_cast<double>(errors) / static_cast<double>(ref_words);
}

double corpus_wer(std::span<const HypRefPair> pairs) {
  if (pairs.empty()) throw InputError("corpus_wer: empty input");
  ErrorTally tally;
  for (const auto& [hyp, ref] : pairs) tally.add(edit_stats(hyp, ref));
  return tally.rate();
}

std::size_t oracle_index(const NBestRecord& record) {
  if (record.hypotheses.empty()) throw InputError("oracle_index: record " + record.query_id + " has no hypotheses");
  std::size_t best = 0;
  std::size_t best_errors = std::numeric_limits<std::size_t>::max();
  for (std::size_t i = 0; i < record.hypotheses.size(); ++i) {
    const std::size_t e = edit_stats(record.hypotheses[i].words, record.reference).distance();
    if (e < best_errors) {
      best_errors = e;
      best = i;
    }
  }
  return best;
}

double oracle_wer(std::span<const NBestRecord> records) {
  if (records.empty()) throw InputError("oracle_wer: empty input");
  ErrorTally tally;
  for (const auto& r : records)
    tally.add(edit_stats(r.hypotheses[oracle_index(r)].words, r.reference));
  return tally.rate();
}

double first_best_wer(std::span<const NBestRecord> records) {
  if (records.empty()) throw InputError("first_best_wer: empty input");
  ErrorTally tally;
  for (const auto& r : records) {
    if (r.hypotheses.empty()) throw InputError("record " + r.query_id + " has no hypotheses");
    tally.add(edit_stats(r.hypotheses.front().words, r.reference));
  }
  return tally.rate();
}

}  // namespace nbrew::metrics
