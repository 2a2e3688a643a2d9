#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nbrew/words.hpp"

namespace nbrew {

// A query pattern with named `{slot}` placeholders.
struct QueryTemplate {
  std::string pattern;
  std::vector<std::string> slot_names;

  // Builds a template from a pattern, collecting slot names in order of
  // first appearance. Throws ConfigError on an empty pattern or unbalanced
  // braces.
  static QueryTemplate from_pattern(std::string pattern);
  void validate() const;
};

// Slot name -> candidate fillers.
using Catalog = std::map<std::string, std::vector<Words>>;

struct ErrorChannelConfig {
  double p_sub = 0.0;  // per reference word
  double p_del = 0.0;  // per reference word
  double p_ins = 0.0;  // per gap (|ref| + 1 gaps)
  std::map<std::string, Words> confusion_map;
  // Fallback substitution alphabet and insertion alphabet.
  Words vocabulary;
  std::size_t nbest_size_max = 10;
  double noise_scale = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Hypothesis {
  Words words;
  double acoustic_logp = 0.0;
  double firstpass_lm_logp = 0.0;

  bool operator==(const Hypothesis&) const = default;
};

// One query: the reference and its ASR-ranked N-best list.
struct NBestRecord {
  std::string query_id;
  Words reference;
  std::vector<Hypothesis> hypotheses;

  std::size_t nbest_size() const { return hypotheses.size(); }
  bool operator==(const NBestRecord&) const = default;
};

// Natural-log score of a word sequence under a first-pass language model.
using FirstPassScorer = std::function<double(const Words&)>;

namespace corpus {

std::vector<Words> generate_queries(std::span<const QueryTemplate> templates, const Catalog& catalog,
                                    std::size_t count, std::uint64_t seed);

// Samples `n` corruptions of `reference` from the error channel. Duplicate
// texts are merged keeping the highest score; the result is sorted by
// acoustic score, best first. `stream` selects an independent random stream
// under cfg.seed so callers can parallelize over queries.
NBestRecord corrupt(std::string query_id, const Words& reference, const ErrorChannelConfig& cfg,
                    std::size_t n, std::uint64_t stream, const FirstPassScorer& firstpass = {});

void write_jsonl(std::span<const NBestRecord> records, const std::filesystem::path& path);
std::vector<NBestRecord> read_jsonl(const std::filesystem::path& path);

// Single-line JSON encoding used by the JSONL files.
std::string to_json_line(const NBestRecord& record);
NBestRecord from_json_line(const std::string& line, std::size_t lineno);

// Domain label encoded as the query-id prefix before the first '-'; empty
// when the id has none.
std::string domain_of(const NBestRecord& record);

}  // namespace corpus
}  // namespace nbrew
