#pragma once

#include <cmath>
#include <vector>

#include "nbrew/corpus.hpp"
#include "nbrew/ngram.hpp"

namespace fixture {

// Frozen from tests/fixtures/katz_worksheet.py (exact fractions): order 3,
// discounts for r <= 2, 3-grams seen once dropped.
struct KatzRow {
  nbrew::ngram::Ngram gram;
  double prob;
  double backoff;  // NAN: none
};

inline std::vector<nbrew::Words> katz_worksheet_corpus() {
  return {nbrew::split_words("a c c a c c"), nbrew::split_words("c a b c a c a"), nbrew::split_words("b b c c c c c")};
}

inline constexpr std::size_t kKatzWorksheetOrder = 3;
inline constexpr std::size_t kKatzWorksheetMaxCount = 2;

inline std::vector<KatzRow> katz_worksheet_rows() {
  const double none = std::nan("");
  return {
      {{"</s>"}, -0.884606581298, none},
      {{"<s>"}, -99.0, 0.708515322242},
      {{"<unk>"}, -99.0, none},
      {{"a"}, -0.662757831682, 0.088726563954},
      {{"b"}, -0.884606581298, 0.203365343922},
      {{"c"}, -0.282546589970, -0.194574664750},
      {{"<s>", "a"}, -0.954242509439, none},
      {{"<s>", "b"}, -0.954242509439, none},
      {{"<s>", "c"}, -0.954242509439, none},
      {{"a", "</s>"}, -1.176091259056, none},
      {{"a", "b"}, -1.176091259056, none},
      {{"a", "c"}, -0.221848749616, 0.199572354905},
      {{"b", "b"}, -0.954242509439, none},
      {{"b", "c"}, -0.477121254720, none},
      {{"c", "</s>"}, -1.079181246048, none},
      {{"c", "a"}, -0.477121254720, 0.324153794511},
      {{"c", "c"}, -0.301029995664, -0.022276394711},
      {{"a", "c", "c"}, -0.681241237376, none},
      {{"c", "a", "c"}, -0.806179973984, none},
      {{"c", "c", "</s>"}, -0.982271233040, none},
      {{"c", "c", "c"}, -0.301029995664, none},
  };
}

struct KatzSentence {
  const char* text;
  double log10_prob;
};

inline std::vector<KatzSentence> katz_worksheet_sentences() {
  return {{"a b c", -3.686636269262}, {"c c a", -2.606607619079}, {"b a d", -101.209515014543}};
}

}  // namespace fixture
