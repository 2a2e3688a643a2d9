#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nbrew/config.hpp"
#include "nbrew/corpus.hpp"
#include "nbrew/ngram.hpp"

namespace nbrew::desk {

// Query templates plus the catalog that fills their slots.
struct Domain {
  std::string name;
  std::vector<QueryTemplate> templates;
  Catalog catalog;
};

// Music requests over procedurally composed song titles and artist names.
Domain music_domain(std::uint64_t seed);
// Calls, alarms, weather, timers, reminders, navigation, smart home.
Domain assistant_domain();

// Every word any template or catalog entry can produce, sorted.
Words vocabulary(const std::vector<Domain>& domains);

// Levenshtein distance over characters.
std::size_t char_distance(const std::string& a, const std::string& b);

// For each word, up to `k` other vocabulary words at character distance
// <= max_distance, nearest first (ties: alphabetical).
std::map<std::string, Words> build_confusion_map(const Words& vocab, std::size_t k = 4, std::size_t max_distance = 3);

struct SynthConfig {
  std::size_t train = 5000;
  std::size_t dev = 500;
  std::size_t eval = 500;
  double train_in_domain = 0.95;  // music share of the training split
  double test_in_domain = 0.5;    // music share of dev and eval
  std::size_t nbest_max = 5;
  double p_sub = 0.14;
  double p_del = 0.02;
  double p_ins = 0.02;
  double noise_scale = 6.0;
  std::size_t firstpass_sentences = 4000;
  std::uint64_t seed = 7;

  void validate() const;
  KeyValueConfig to_kv() const;
  static SynthConfig from_kv(const KeyValueConfig& kv);
};

struct SynthCorpus {
  std::vector<NBestRecord> train, dev, eval;
  Words vocabulary;
  ngram::BackoffModel firstpass_lm;
};

inline const std::string kInDomain = "music";
inline const std::string kOtherDomain = "assistant";

// Generic sentences for the first-pass LM: the templates' carrier phrases
// with slots filled by random vocabulary words.
std::vector<Words> generic_corpus(const std::vector<Domain>& domains, const Words& vocab, std::size_t count,
                                  std::uint64_t seed);

SynthCorpus synthesize(const SynthConfig& cfg);

}  // namespace nbrew::desk
