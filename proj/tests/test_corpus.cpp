#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "nbrew/corpus.hpp"
#include "nbrew/desk_domain.hpp"
#include "nbrew/error.hpp"
#include "nbrew/metrics.hpp"
#include "oracles.hpp"

using namespace nbrew;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "nbrew_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

ErrorChannelConfig noisy_channel(std::uint64_t seed) {
  ErrorChannelConfig cfg;
  cfg.p_sub = 0.1;
  cfg.p_del = 0.05;
  cfg.p_ins = 0.05;
  cfg.vocabulary = {"xa", "xb", "xc", "xd", "xe", "xf"};
  cfg.nbest_size_max = 10;
  cfg.noise_scale = 1.0;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("single template substitution") {
  const auto t = QueryTemplate::from_pattern("play {song} by {artist}");
  CHECK(t.slot_names == std::vector<std::string>{"song", "artist"});
  Catalog catalog{{"song", {{"yesterday"}}}, {"artist", {{"the", "beatles"}}}};
  const auto q = corpus::generate_queries(std::span(&t, 1), catalog, 1, 3);
  REQUIRE(q.size() == 1);
  CHECK(join_words(q[0]) == "play yesterday by the beatles");
  CHECK(corpus::generate_queries(std::span(&t, 1), catalog, 0, 3).empty());
}

TEST_CASE("generation is seeded") {
  const auto music = desk::music_domain(11);
  const auto a = corpus::generate_queries(music.templates, music.catalog, 50, 5);
  const auto b = corpus::generate_queries(music.templates, music.catalog, 50, 5);
  const auto c = corpus::generate_queries(music.templates, music.catalog, 50, 6);
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("missing slot names the slot") {
  const auto t = QueryTemplate::from_pattern("call {contact}");
  Catalog catalog{{"song", {{"x"}}}};
  try {
    corpus::generate_queries(std::span(&t, 1), catalog, 1, 0);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("contact") != std::string::npos);
  }
  CHECK_THROWS_AS(QueryTemplate::from_pattern(""), ConfigError);
  CHECK_THROWS_AS(QueryTemplate::from_pattern("play {song"), ConfigError);
  QueryTemplate bad{"play {song}", {}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("noiseless channel returns the reference") {
  ErrorChannelConfig cfg;
  cfg.nbest_size_max = 5;
  const Words ref = split_words("wake me up at seven");
  const auto r = corpus::corrupt("q-1", ref, cfg, 5, 0);
  REQUIRE(r.nbest_size() == 1);
  CHECK(r.hypotheses[0].words == ref);
  CHECK(metrics::oracle_wer(std::span(&r, 1)) == 0.0);
}

TEST_CASE("n=1 gives one hypothesis") {
  const auto r = corpus::corrupt("q-1", split_words("a b c d"), noisy_channel(1), 1, 0);
  CHECK(r.nbest_size() == 1);
}

TEST_CASE("channel errors") {
  CHECK_THROWS_AS(corpus::corrupt("q-1", {}, noisy_channel(1), 1, 0), InputError);
  CHECK_THROWS_AS(corpus::corrupt("q-1", {"a"}, noisy_channel(1), 11, 0), InputError);
  CHECK_THROWS_AS(corpus::corrupt("q-1", {"a"}, noisy_channel(1), 0, 0), InputError);
  auto cfg = noisy_channel(1);
  cfg.p_sub = 0.7;
  cfg.p_del = 0.4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = noisy_channel(1);
  cfg.p_ins = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("records are distinct, ranked and normalized") {
  const auto cfg = noisy_channel(9);
  for (std::uint64_t stream = 0; stream < 200; ++stream) {
    const auto r = corpus::corrupt("q-" + std::to_string(stream), split_words("one two three four five"), cfg, 10,
                                   stream, [](const Words& w) { return -0.5 * static_cast<double>(w.size()); });
    REQUIRE(r.nbest_size() >= 1);
    REQUIRE(r.nbest_size() <= 10);
    std::set<Words> seen;
    for (std::size_t i = 0; i < r.nbest_size(); ++i) {
      CHECK(seen.insert(r.hypotheses[i].words).second);
      CHECK(std::isfinite(r.hypotheses[i].acoustic_logp));
      CHECK(r.hypotheses[i].acoustic_logp <= 0.0);
      CHECK(r.hypotheses[i].firstpass_lm_logp <= 0.0);
      if (i > 0) CHECK(r.hypotheses[i].acoustic_logp <= r.hypotheses[i - 1].acoustic_logp);
    }
  }
}

TEST_CASE("streams are independent and reproducible") {
  const auto cfg = noisy_channel(4);
  const Words ref = split_words("set a timer for ten minutes");
  CHECK(corpus::corrupt("q", ref, cfg, 5, 17) == corpus::corrupt("q", ref, cfg, 5, 17));
  bool differs = false;
  for (std::uint64_t s = 0; s < 10 && !differs; ++s)
    differs = corpus::corrupt("q", ref, cfg, 5, s) != corpus::corrupt("q", ref, cfg, 5, s + 100);
  CHECK(differs);
}

TEST_CASE("1-best WER tracks the channel's error mass") {
  // Vocabulary disjoint from the reference: every substitution is an error.
  const auto cfg = noisy_channel(21);
  const Words ref = split_words("r1 r2 r3 r4 r5 r6");
  const double L = static_cast<double>(ref.size());
  const double expected = cfg.p_sub + cfg.p_del + cfg.p_ins * (L + 1.0) / L;
  metrics::ErrorTally tally;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const auto r = corpus::corrupt("q", ref, cfg, 1, s);
    tally.add(metrics::edit_stats(r.hypotheses[0].words, ref));
  }
  CHECK(tally.rate() == doctest::Approx(expected).epsilon(0.15));
}

TEST_CASE("jsonl round trip") {
  std::mt19937_64 rng(5);
  const std::vector<std::string> alphabet{"play", "the", "song", "call", "mom", "naïve"};
  std::vector<NBestRecord> records;
  for (int i = 0; i < 30; ++i) {
    NBestRecord r;
    r.query_id = "music-" + std::to_string(i);
    r.reference = oracle::random_words(rng, 6, alphabet, 1);
    const std::size_t n = i == 0 ? 10 : 1 + rng() % 10;
    std::normal_distribution<double> score(-5.0, 3.0);
    for (std::size_t k = 0; k < n; ++k)
      r.hypotheses.push_back({oracle::random_words(rng, 6, alphabet), std::min(0.0, score(rng)), -1.0 / 3.0});
    records.push_back(std::move(r));
  }
  const auto path = temp_path("roundtrip.jsonl");
  corpus::write_jsonl(records, path);
  CHECK(corpus::read_jsonl(path) == records);

  corpus::write_jsonl({}, path);
  CHECK(std::filesystem::file_size(path) == 0);
  CHECK(corpus::read_jsonl(path).empty());
}

TEST_CASE("malformed jsonl reports the line") {
  const auto path = temp_path("bad.jsonl");
  {
    std::ofstream out(path);
    out << R"({"id":"a-1","ref":"x","nbest":[{"text":"x","am":0,"lm":0}]})" << "\n";
    out << R"({"id":"a-2","ref":"x","nbest":[{"text":"x","am":0}]})" << "\n";
  }
  try {
    corpus::read_jsonl(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  {
    std::ofstream out(path);
    out << "not json\n";
  }
  CHECK_THROWS_AS(corpus::read_jsonl(path), ParseError);
  CHECK_THROWS_AS(corpus::read_jsonl(temp_path("missing.jsonl")), InputError);
}

TEST_CASE("domain from query id") {
  NBestRecord r;
  r.query_id = "music-train00012";
  CHECK(corpus::domain_of(r) == "music");
  r.query_id = "plain";
  CHECK(corpus::domain_of(r).empty());
}

TEST_CASE("synthetic desk corpus") {
  desk::SynthConfig cfg;
  cfg.train = 200;
  cfg.dev = 40;
  cfg.eval = 40;
  cfg.firstpass_sentences = 300;
  const auto data = desk::synthesize(cfg);
  CHECK(data.train.size() == 200);
  CHECK(data.dev.size() == 40);
  std::size_t music = 0;
  for (const auto& r : data.dev) music += corpus::domain_of(r) == desk::kInDomain;
  CHECK(music == 20);
  for (const auto& r : data.train) {
    CHECK(r.nbest_size() <= cfg.nbest_max);
    for (const auto& h : r.hypotheses) CHECK(h.firstpass_lm_logp <= 0.0);
  }
  const auto again = desk::synthesize(cfg);
  CHECK(again.train == data.train);
  CHECK(again.eval == data.eval);

  const auto confusions = desk::build_confusion_map(data.vocabulary);
  for (const auto& [word, alts] : confusions) {
    CHECK(alts.size() <= 4);
    for (const auto& a : alts) {
      CHECK(a != word);
      CHECK(desk::char_distance(a, word) <= 3);
    }
  }
  CHECK(desk::char_distance("kitten", "sitting") == 3);
}

}  // TEST_SUITE
