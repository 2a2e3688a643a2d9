#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "nbrew/error.hpp"
#include "nbrew/ngram.hpp"
#include "katz_fixture.hpp"
#include "oracles.hpp"

using namespace nbrew;
using ngram::Ngram;

namespace {

std::vector<Words> lines(std::initializer_list<const char*> text) {
  std::vector<Words> out;
  for (const char* t : text) out.push_back(split_words(t));
  return out;
}

std::vector<Words> random_corpus(std::uint64_t seed, std::size_t count) {
  std::mt19937_64 rng(seed);
  const std::vector<std::string> alphabet{"a", "b", "c", "d", "e"};
  std::vector<Words> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(oracle::random_words(rng, 8, alphabet, 1));
  return out;
}

// Sum over every predicted word of p(w | context).
double mass(const ngram::BackoffModel& lm, const Words& context) {
  double total = 0.0;
  for (const auto& w : lm.predicted_words()) total += std::pow(10.0, lm.conditional_log10(context, w));
  return total;
}

}  // namespace

TEST_SUITE("ngram") {

TEST_CASE("counting") {
  const auto t = ngram::count(lines({"a a b"}));
  CHECK(t.count({"a"}) == 2);
  CHECK(t.count({"b"}) == 1);
  CHECK(t.count({"<s>", "a", "a", "b"}) == 1);
  std::size_t unigram_total = 0;
  for (const auto& [g, c] : t.counts[0]) unigram_total += c;
  CHECK(unigram_total == 3 + 2);

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto corpus = random_corpus(seed, 30);
    for (bool boundaries : {true, false}) {
      const auto table = ngram::count(corpus, 4, boundaries);
      for (std::size_t n = 1; n <= 4; ++n) {
        const auto brute = oracle::ngram_counts(corpus, n, boundaries);
        CHECK(table.counts[n - 1] == brute);
      }
    }
  }
}

TEST_CASE("cutoffs") {
  const auto raw = ngram::count(lines({"a b c d", "a b c d", "a b x y"}));
  const auto cut = ngram::apply_cutoffs(raw);
  CHECK(raw.count({"b", "x", "y", "</s>"}) == 1);
  CHECK(cut.count({"b", "x", "y", "</s>"}) == 0);
  CHECK(cut.count({"a", "b", "x"}) == 0);
  CHECK(cut.count({"a", "b", "c", "d"}) == 2);
  CHECK(cut.count({"a", "b", "c"}) == 2);
  CHECK(cut.count({"b", "x"}) == 1);  // bigrams keep singletons
  CHECK(cut.count({"y"}) == 1);
  CHECK(ngram::apply_cutoffs(cut).counts == cut.counts);
  CHECK(cut.count_of_counts == raw.count_of_counts);
}

TEST_CASE("Good-Turing counts and ratios") {
  const std::map<std::size_t, std::size_t> coc{{1, 4}, {2, 2}};
  CHECK(ngram::good_turing_count(1, coc) == 1.0);
  CHECK_THROWS_AS(ngram::good_turing_count(3, coc), UsageError);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto table = ngram::count(random_corpus(seed, 20 + seed * 40));
    const auto d = ngram::good_turing_discount(table);
    for (std::size_t k = 0; k < 4; ++k) {
      for (std::size_t r = 1; r <= 7; ++r) {
        CHECK(d.at(k, r) > 0.0);
        CHECK(d.at(k, r) <= 1.0);
      }
      CHECK(d.at(k, 8) == 1.0);
      CHECK(d.at(k, 100) == 1.0);
    }
    for (std::size_t r = 1; r <= 7; ++r) CHECK(d.at(0, r) == 1.0);
  }
}

TEST_CASE("unigram ML") {
  ngram::CountTable t = ngram::count(lines({"a a b"}), 1, false);
  const auto lm = ngram::estimate(t, ngram::Discounts::none(1));
  CHECK(std::pow(10.0, lm.conditional_log10({}, "a")) == doctest::Approx(2.0 / 3.0));
  CHECK(lm.conditional_log10({}, "zzz") == ngram::kLogZero);
}

TEST_CASE("worksheet model") {
  const auto lm = ngram::train_katz(fixture::katz_worksheet_corpus(), fixture::kKatzWorksheetOrder,
                                    fixture::kKatzWorksheetMaxCount);
  const auto expected = fixture::katz_worksheet_rows();
  std::size_t total = 0;
  for (std::size_t k = 0; k < lm.order(); ++k) total += lm.entries(k).size();
  CHECK(total == expected.size());
  for (const auto& row : expected) {
    CAPTURE(join_words(row.gram));
    const auto* e = lm.find(row.gram);
    REQUIRE(e != nullptr);
    CHECK(e->log10_prob == doctest::Approx(row.prob).epsilon(1e-11));
    if (std::isnan(row.backoff)) {
      CHECK_FALSE(e->log10_backoff.has_value());
    } else {
      REQUIRE(e->log10_backoff.has_value());
      CHECK(*e->log10_backoff == doctest::Approx(row.backoff).epsilon(1e-11));
    }
  }
  for (const auto& s : fixture::katz_worksheet_sentences())
    CHECK(ngram::logprob(lm, split_words(s.text)) == doctest::Approx(s.log10_prob).epsilon(1e-11));
}

TEST_CASE("distributions normalize") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto corpus = random_corpus(seed + 100, 100);
    const auto lm = ngram::train_katz(corpus);
    // Every context seen in the corpus, at every length.
    for (const auto& sentence : corpus) {
      Words toks{ngram::kBos};
      toks.insert(toks.end(), sentence.begin(), sentence.end());
      for (std::size_t end = 1; end <= toks.size(); ++end)
        for (std::size_t len = 0; len <= std::min<std::size_t>(3, end); ++len) {
          const Words ctx(toks.begin() + static_cast<long>(end - len), toks.begin() + static_cast<long>(end));
          CHECK(std::abs(mass(lm, ctx) - 1.0) < 1e-6);
        }
    }
  }
}

TEST_CASE("without discounting the model is maximum likelihood") {
  const auto corpus = random_corpus(7, 40);
  const auto table = ngram::count(corpus, 3);
  const auto lm = ngram::estimate(table, ngram::Discounts::none(3));
  const auto trigrams = oracle::ngram_counts(corpus, 3, true);
  const auto bigrams = oracle::ngram_counts(corpus, 2, true);
  for (const auto& [g, c] : trigrams) {
    const double ml = static_cast<double>(c) / static_cast<double>(bigrams.at({g[0], g[1]}));
    CHECK(std::pow(10.0, lm.conditional_log10(std::vector<std::string>{g[0], g[1]}, g[2])) == doctest::Approx(ml));
  }
}

TEST_CASE("more occurrences never lower an n-gram's probability") {
  // Counts stay above the discount range so only the ML part moves.
  std::vector<Words> corpus;
  for (int i = 0; i < 10; ++i) {
    corpus.push_back(split_words("a b c"));
    corpus.push_back(split_words("a b d"));
  }
  double prev = -1e9;
  for (int extra = 0; extra < 5; ++extra) {
    const auto lm = ngram::train_katz(corpus);
    const double lp = lm.conditional_log10(std::vector<std::string>{"a", "b"}, "c");
    CHECK(lp >= prev);
    prev = lp;
    corpus.push_back(split_words("a b c"));
  }
}

TEST_CASE("ARPA round trip") {
  const auto lm = ngram::train_katz(random_corpus(9, 100));
  const std::string text = ngram::to_arpa(lm);
  const auto back = ngram::parse_arpa(text);
  REQUIRE(back.order() == lm.order());
  for (std::size_t k = 0; k < lm.order(); ++k) {
    REQUIRE(back.entries(k).size() == lm.entries(k).size());
    CHECK(text.find("ngram " + std::to_string(k + 1) + "=" + std::to_string(lm.entries(k).size())) != std::string::npos);
    for (const auto& [g, e] : lm.entries(k)) {
      const auto* b = back.find(g);
      REQUIRE(b);
      CHECK(std::abs(b->log10_prob - e.log10_prob) < 1e-6);
      CHECK(b->log10_backoff.has_value() == e.log10_backoff.has_value());
      if (e.log10_backoff) CHECK(std::abs(*b->log10_backoff - *e.log10_backoff) < 1e-6);
    }
  }
  for (const auto& s : random_corpus(10, 50)) CHECK(std::abs(ngram::logprob(back, s) - ngram::logprob(lm, s)) < 1e-6);
  CHECK(ngram::to_arpa(back) == text);

  const auto path = std::filesystem::temp_directory_path() / "nbrew_tests" / "toy.arpa";
  std::filesystem::create_directories(path.parent_path());
  ngram::export_arpa(lm, path);
  CHECK(ngram::to_arpa(ngram::import_arpa(path)) == text);
}

TEST_CASE("malformed ARPA") {
  CHECK_THROWS_AS(ngram::parse_arpa("hello\n"), ParseError);
  const std::string good = "\\data\\\nngram 1=2\n\n\\1-grams:\n-0.3\ta\n-0.3\tb\n\n\\end\\\n";
  CHECK_NOTHROW(ngram::parse_arpa(good));
  try {
    ngram::parse_arpa("\\data\\\nngram 1=2\n\n\\1-grams:\n-0.3\ta\nxyz\tb\n\\end\\\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 6);
  }
  CHECK_THROWS_AS(ngram::parse_arpa("\\data\\\nngram 1=3\n\n\\1-grams:\n-0.3\ta\n-0.3\tb\n\n\\end\\\n"), ParseError);
  CHECK_THROWS_AS(ngram::parse_arpa("\\data\\\nngram 1=1\n\n\\1-grams:\n-0.3\ta b\n\\end\\\n"), ParseError);
}

TEST_CASE("unknown words") {
  const auto lm = ngram::train_katz(lines({"a b", "b a"}));
  CHECK(lm.conditional_log10(std::vector<std::string>{"a"}, "zebra") == lm.conditional_log10(std::vector<std::string>{"a"}, ngram::kUnk));
  CHECK_THROWS_AS(ngram::estimate(ngram::CountTable{}, ngram::Discounts::none(1)), InputError);
}

}  // TEST_SUITE
