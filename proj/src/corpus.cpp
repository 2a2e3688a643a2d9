#include "nbrew/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "nbrew/error.hpp"

namespace nbrew {

QueryTemplate QueryTemplate::from_pattern(std::string pattern) {
  QueryTemplate t;
  t.pattern = std::move(pattern);
  std::size_t pos = 0;
  while ((pos = t.pattern.find('{', pos)) != std::string::npos) {
    const auto close = t.pattern.find('}', pos);
    if (close == std::string::npos) throw ConfigError("unbalanced '{' in template: " + t.pattern);
    std::string name = t.pattern.substr(pos + 1, close - pos - 1);
    if (std::find(t.slot_names.begin(), t.slot_names.end(), name) == t.slot_names.end())
      t.slot_names.push_back(std::move(name));
    pos = close + 1;
  }
  t.validate();
  return t;
}

void QueryTemplate::validate() const {
  if (pattern.empty()) throw ConfigError("empty query template");
  std::size_t pos = 0;
  while ((pos = pattern.find('{', pos)) != std::string::npos) {
    const auto close = pattern.find('}', pos);
    if (close == std::string::npos) throw ConfigError("unbalanced '{' in template: " + pattern);
    const std::string name = pattern.substr(pos + 1, close - pos - 1);
    if (name.empty()) throw ConfigError("empty slot name in template: " + pattern);
    if (std::find(slot_names.begin(), slot_names.end(), name) == slot_names.end())
      throw ConfigError("slot '" + name + "' missing from slot_names of template: " + pattern);
    pos = close + 1;
  }
}

void ErrorChannelConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
  };
  prob(p_sub, "p_sub");
  prob(p_del, "p_del");
  prob(p_ins, "p_ins");
  if (p_sub + p_del > 1.0) throw ConfigError("p_sub + p_del must not exceed 1");
  if (nbest_size_max < 1) throw ConfigError("nbest_size_max must be at least 1");
  if (!(noise_scale >= 0.0)) throw ConfigError("noise_scale must be non-negative");
  if ((p_ins > 0.0 || p_sub > 0.0) && vocabulary.empty())
    throw ConfigError("error channel needs a vocabulary for insertions and fallback substitutions");
}

namespace corpus {

namespace {

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

template <typename T>
const T& pick(const std::vector<T>& items, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dist(0, items.size() - 1);
  return items[dist(rng)];
}

}  // namespace

std::vector<Words> generate_queries(std::span<const QueryTemplate> templates, const Catalog& catalog,
                                    std::size_t count, std::uint64_t seed) {
  for (const auto& t : templates) {
    t.validate();
    for (const auto& slot : t.slot_names) {
      auto it = catalog.find(slot);
      if (it == catalog.end() || it->second.empty())
        throw ConfigError("catalog has no entries for slot '" + slot + "'");
    }
  }
  std::vector<Words> out;
  if (count == 0) return out;
  if (templates.empty()) throw ConfigError("generate_queries: no templates");
  out.reserve(count);

  std::mt19937_64 rng = stream_rng(seed, 0);
  std::uniform_int_distribution<std::size_t> pick_template(0, templates.size() - 1);
  for (std::size_t q = 0; q < count; ++q) {
    const QueryTemplate& t = templates[pick_template(rng)];
    std::map<std::string, const Words*> filled;
    for (const auto& slot : t.slot_names) filled[slot] = &pick(catalog.at(slot), rng);

    Words query;
    for (const auto& token : split_words(t.pattern)) {
      if (token.size() > 2 && token.front() == '{' && token.back() == '}') {
        const Words& filler = *filled.at(token.substr(1, token.size() - 2));
        query.insert(query.end(), filler.begin(), filler.end());
      } else {
        query.push_back(token);
      }
    }
    out.push_back(std::move(query));
  }
  return out;
}

NBestRecord corrupt(std::string query_id, const Words& reference, const ErrorChannelConfig& cfg,
                    std::size_t n, std::uint64_t stream, const FirstPassScorer& firstpass) {
  if (reference.empty()) throw InputError("corrupt: empty reference for " + query_id);
  cfg.validate();
  if (n < 1 || n > cfg.nbest_size_max)
    throw InputError("corrupt: n must lie in [1, nbest_size_max]");

  std::mt19937_64 rng = stream_rng(cfg.seed, stream);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 1.0);

  const double p_keep = 1.0 - cfg.p_sub - cfg.p_del;
  const double log_no_ins = std::log1p(-cfg.p_ins);
  const double vocab_size = static_cast<double>(std::max<std::size_t>(cfg.vocabulary.size(), 1));

  // Distinct text -> best score seen.
  std::map<Words, double> best;
  std::vector<const Words*> order;  // first-seen order for stable ties
  for (std::size_t draw = 0; draw < n; ++draw) {
    Words hyp;
    double loglik = 0.0;
    auto maybe_insert = [&] {
      if (cfg.p_ins > 0.0 && unit(rng) < cfg.p_ins) {
        hyp.push_back(pick(cfg.vocabulary, rng));
        loglik += std::log(cfg.p_ins) - std::log(vocab_size);
      } else {
        loglik += log_no_ins;
      }
    };
    maybe_insert();
    for (const auto& word : reference) {
      const double u = unit(rng);
      if (u < cfg.p_sub) {
        auto it = cfg.confusion_map.find(word);
        const Words& choices =
            (it != cfg.confusion_map.end() && !it->second.empty()) ? it->second : cfg.vocabulary;
        hyp.push_back(pick(choices, rng));
        loglik += std::log(cfg.p_sub) - std::log(static_cast<double>(choices.size()));
      } else if (u < cfg.p_sub + cfg.p_del) {
        loglik += std::log(cfg.p_del);
      } else {
        hyp.push_back(word);
        loglik += std::log(p_keep);
      }
      maybe_insert();
    }
    const double score = loglik + cfg.noise_scale * jitter(rng);
    auto [it, inserted] = best.try_emplace(std::move(hyp), score);
    if (inserted)
      order.push_back(&it->first);
    else
      it->second = std::max(it->second, score);
  }

  NBestRecord record;
  record.query_id = std::move(query_id);
  record.reference = reference;
  double top = -std::numeric_limits<double>::infinity();
  for (const Words* w : order) {
    Hypothesis h;
    h.words = *w;
    h.acoustic_logp = best.at(*w);
    top = std::max(top, h.acoustic_logp);
    record.hypotheses.push_back(std::move(h));
  }
  // Jitter can push scores above zero; shift the list so the best is <= 0.
  const double shift = std::max(0.0, top);
  for (auto& h : record.hypotheses) {
    h.acoustic_logp -= shift;
    h.firstpass_lm_logp = firstpass ? std::min(0.0, firstpass(h.words)) : 0.0;
  }
  std::stable_sort(record.hypotheses.begin(), record.hypotheses.end(),
                   [](const Hypothesis& a, const Hypothesis& b) { return a.acoustic_logp > b.acoustic_logp; });
  return record;
}

std::string to_json_line(const NBestRecord& record) {
  nlohmann::json j;
  j["id"] = record.query_id;
  j["ref"] = join_words(record.reference);
  nlohmann::json nbest = nlohmann::json::array();
  for (const auto& h : record.hypotheses)
    nbest.push_back({{"text", join_words(h.words)}, {"am", h.acoustic_logp}, {"lm", h.firstpass_lm_logp}});
  j["nbest"] = std::move(nbest);
  return j.dump();
}

NBestRecord from_json_line(const std::string& line, std::size_t lineno) {
  NBestRecord r;
  try {
    const auto j = nlohmann::json::parse(line);
    r.query_id = j.at("id").get<std::string>();
    r.reference = split_words(j.at("ref").get<std::string>());
    for (const auto& h : j.at("nbest")) {
      Hypothesis hyp;
      hyp.words = split_words(h.at("text").get<std::string>());
      hyp.acoustic_logp = h.at("am").get<double>();
      hyp.firstpass_lm_logp = h.at("lm").get<double>();
      r.hypotheses.push_back(std::move(hyp));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed N-best record: ") + e.what(), lineno);
  }
  if (r.reference.empty()) throw ParseError("record has an empty reference", lineno);
  if (r.hypotheses.empty()) throw ParseError("record has no hypotheses", lineno);
  return r;
}

void write_jsonl(std::span<const NBestRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& r : records) out << to_json_line(r) << '\n';
  if (!out) throw InputError("write failed: " + path.string());
}

std::vector<NBestRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<NBestRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    out.push_back(from_json_line(line, lineno));
  }
  return out;
}

std::string domain_of(const NBestRecord& record) {
  const auto dash = record.query_id.find('-');
  return dash == std::string::npos ? std::string() : record.query_id.substr(0, dash);
}

}  // namespace corpus
}  // namespace nbrew
