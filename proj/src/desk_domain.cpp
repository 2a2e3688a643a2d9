#include "nbrew/desk_domain.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <fmt/format.h>

#include "nbrew/error.hpp"

namespace nbrew::desk {

namespace {

const Words kTitleAdjectives = {"blue",    "golden",   "silent", "broken", "electric", "wild",   "lonely",
                                "burning", "sweet",    "little", "dark",   "bright",   "crazy",  "secret",
                                "summer",  "midnight", "velvet", "silver", "fading",   "endless", "hollow",
                                "restless", "frozen",  "gentle", "purple", "lucky", "quiet", "wicked", "sunny",
                                "cosmic", "savage", "tender", "heavy", "neon"};
const Words kTitleNouns = {"heart",  "river",  "night",   "fire",    "dream",    "road",    "rain",
                           "sky",    "moon",   "light",   "shadow",  "ocean",    "star",    "storm",
                           "garden", "city",   "window",  "mountain", "letter",  "echo",    "highway",
                           "mirror", "flower", "thunder", "island",  "morning",  "paradise", "kingdom",
                           "diamond", "desert", "valley", "angel",   "winter",   "summit",  "harbor",
                           "canyon", "meadow", "lantern"};
const Words kFirstNames = {"john",  "maria", "alex",  "david", "emma", "lucas", "sofia", "marcus", "nina", "oscar",
                           "laura", "victor", "clara", "felix", "diana", "leon", "iris",  "hugo",   "mila", "ruby",
                           "ethan", "grace", "omar",  "julia", "noah", "zara",  "pablo", "ingrid"};
const Words kLastNames = {"stone", "rivers", "knight", "carter", "hayes", "monroe", "fox",   "wells", "brooks", "lane",
                          "cruz",  "reed",   "grant",  "shaw",   "vale",  "moss",   "ford",  "price", "quinn",  "marsh",
                          "bennett", "walsh", "ortega", "harper", "doyle", "sutton"};
const Words kGenres = {"rock", "jazz", "pop", "blues", "country", "classical", "soul", "metal", "reggae", "folk"};

std::vector<Words> singles(const Words& words) {
  std::vector<Words> out;
  for (const auto& w : words) out.push_back({w});
  return out;
}

std::vector<Words> phrases(std::initializer_list<const char*> items) {
  std::vector<Words> out;
  for (const char* s : items) out.push_back(split_words(s));
  return out;
}

std::vector<QueryTemplate> templates(std::initializer_list<const char*> patterns) {
  std::vector<QueryTemplate> out;
  for (const char* p : patterns) out.push_back(QueryTemplate::from_pattern(p));
  return out;
}

}  // namespace

Domain music_domain(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](const Words& pool) -> const std::string& {
    return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  };
  std::set<Words> titles;
  while (titles.size() < 160) {
    switch (std::uniform_int_distribution<int>(0, 4)(rng)) {
      case 0: titles.insert({pick(kTitleAdjectives), pick(kTitleNouns)}); break;
      case 1: titles.insert({"the", pick(kTitleAdjectives), pick(kTitleNouns)}); break;
      case 2: titles.insert({pick(kTitleNouns), "of", "the", pick(kTitleNouns)}); break;
      case 3: titles.insert({pick(kTitleAdjectives), pick(kTitleNouns), "in", "the", pick(kTitleNouns)}); break;
      default: titles.insert({"my", pick(kTitleAdjectives), pick(kTitleNouns)}); break;
    }
  }
  std::set<Words> artists;
  while (artists.size() < 90) artists.insert({pick(kFirstNames), pick(kLastNames)});
  while (artists.size() < 120) artists.insert({"the", pick(kTitleAdjectives), pick(kTitleNouns)});

  Domain d;
  d.name = kInDomain;
  d.templates = templates({"play {song} by {artist}", "play {song}", "play the song {song}", "play some {genre}",
                           "play {genre} music", "play something by {artist}", "put on {song} by {artist}",
                           "i want to hear {song}", "shuffle songs by {artist}", "play the latest album by {artist}",
                           "add {song} to my playlist", "skip to {song}", "who sings {song}"});
  d.catalog["song"] = std::vector<Words>(titles.begin(), titles.end());
  d.catalog["artist"] = std::vector<Words>(artists.begin(), artists.end());
  d.catalog["genre"] = singles(kGenres);
  return d;
}

Domain assistant_domain() {
  Domain d;
  d.name = kOtherDomain;
  d.templates = templates({"call {contact}", "call {contact} on mobile", "send a message to {contact} saying {message}",
                           "set an alarm for {hour} {ampm}", "wake me up at {hour} {ampm} {day}",
                           "what is the weather in {city}", "will it rain in {city} {day}",
                           "set a timer for {number} minutes", "turn on the {device}", "turn off the {device}",
                           "remind me to {task} {day}", "navigate to {city}", "how far is {city}"});
  std::vector<Words> contacts = singles(kFirstNames);
  contacts.push_back({"mom"});
  contacts.push_back({"dad"});
  d.catalog["contact"] = contacts;
  d.catalog["message"] = phrases({"i am running late", "see you soon", "call me back", "on my way",
                                  "happy birthday", "i will be home soon", "where are you"});
  d.catalog["hour"] = singles({"one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
                               "eleven", "twelve"});
  d.catalog["ampm"] = singles({"am", "pm"});
  d.catalog["day"] = singles({"today", "tomorrow", "tonight", "monday", "tuesday", "wednesday", "thursday",
                              "friday", "saturday", "sunday"});
  d.catalog["city"] = singles({"paris", "london", "boston", "denver", "chicago", "seattle", "austin", "dallas",
                               "miami", "tokyo", "berlin", "madrid", "dublin", "rome", "sydney", "oslo", "lisbon",
                               "vienna", "toronto", "phoenix", "atlanta", "houston", "prague"});
  d.catalog["number"] = singles({"five", "ten", "fifteen", "twenty", "thirty", "forty", "sixty"});
  d.catalog["device"] = phrases({"lights", "fan", "heater", "tv", "radio", "kitchen lights", "bedroom lights"});
  d.catalog["task"] = phrases({"buy milk", "call the bank", "water the plants", "pick up the kids", "pay rent",
                               "book a table", "feed the cat"});
  return d;
}

Words vocabulary(const std::vector<Domain>& domains) {
  std::set<std::string> words;
  for (const auto& d : domains) {
    for (const auto& t : d.templates)
      for (const auto& w : split_words(t.pattern))
        if (!(w.front() == '{' && w.back() == '}')) words.insert(w);
    for (const auto& [slot, entries] : d.catalog)
      for (const auto& e : entries) words.insert(e.begin(), e.end());
  }
  return Words(words.begin(), words.end());
}

std::size_t char_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::map<std::string, Words> build_confusion_map(const Words& vocab, std::size_t k, std::size_t max_distance) {
  std::map<std::string, Words> out;
  for (const auto& w : vocab) {
    std::vector<std::pair<std::size_t, std::string>> near;
    for (const auto& v : vocab) {
      if (v == w) continue;
      const std::size_t dist = char_distance(w, v);
      if (dist <= max_distance) near.emplace_back(dist, v);
    }
    std::sort(near.begin(), near.end());
    Words& list = out[w];
    for (std::size_t i = 0; i < near.size() && i < k; ++i) list.push_back(near[i].second);
  }
  return out;
}

void SynthConfig::validate() const {
  if (train == 0 || dev == 0 || eval == 0) throw ConfigError("every split needs at least one record");
  if (!(train_in_domain >= 0.0 && train_in_domain <= 1.0) || !(test_in_domain >= 0.0 && test_in_domain <= 1.0))
    throw ConfigError("domain shares must lie in [0, 1]");
  if (nbest_max < 1 || nbest_max > 10) throw ConfigError("nbest_max must lie in [1, 10]");
  if (firstpass_sentences == 0) throw ConfigError("firstpass_sentences must be positive");
  ErrorChannelConfig ch;
  ch.p_sub = p_sub;
  ch.p_del = p_del;
  ch.p_ins = p_ins;
  ch.noise_scale = noise_scale;
  ch.vocabulary = {"x"};
  ch.validate();
}

KeyValueConfig SynthConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("train", std::to_string(train));
  kv.set("dev", std::to_string(dev));
  kv.set("eval", std::to_string(eval));
  kv.set("train_in_domain", fmt::format("{}", train_in_domain));
  kv.set("test_in_domain", fmt::format("{}", test_in_domain));
  kv.set("nbest_max", std::to_string(nbest_max));
  kv.set("p_sub", fmt::format("{}", p_sub));
  kv.set("p_del", fmt::format("{}", p_del));
  kv.set("p_ins", fmt::format("{}", p_ins));
  kv.set("noise_scale", fmt::format("{}", noise_scale));
  kv.set("firstpass_sentences", std::to_string(firstpass_sentences));
  kv.set("seed", std::to_string(seed));
  return kv;
}

SynthConfig SynthConfig::from_kv(const KeyValueConfig& kv) {
  auto size = [&](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  SynthConfig c;
  c.train = size("train", c.train);
  c.dev = size("dev", c.dev);
  c.eval = size("eval", c.eval);
  c.train_in_domain = kv.get_double("train_in_domain", c.train_in_domain);
  c.test_in_domain = kv.get_double("test_in_domain", c.test_in_domain);
  c.nbest_max = size("nbest_max", c.nbest_max);
  c.p_sub = kv.get_double("p_sub", c.p_sub);
  c.p_del = kv.get_double("p_del", c.p_del);
  c.p_ins = kv.get_double("p_ins", c.p_ins);
  c.noise_scale = kv.get_double("noise_scale", c.noise_scale);
  c.firstpass_sentences = size("firstpass_sentences", c.firstpass_sentences);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(c.seed)));
  c.validate();
  return c;
}

std::vector<Words> generic_corpus(const std::vector<Domain>& domains, const Words& vocab, std::size_t count,
                                  std::uint64_t seed) {
  std::vector<QueryTemplate> all;
  for (const auto& d : domains) all.insert(all.end(), d.templates.begin(), d.templates.end());
  if (all.empty() || vocab.empty()) throw ConfigError("generic corpus needs templates and a vocabulary");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_template(0, all.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_word(0, vocab.size() - 1);
  std::uniform_int_distribution<std::size_t> filler_len(1, 3);
  std::vector<Words> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Words s;
    for (const auto& token : split_words(all[pick_template(rng)].pattern)) {
      if (token.front() == '{' && token.back() == '}') {
        for (std::size_t k = filler_len(rng); k > 0; --k) s.push_back(vocab[pick_word(rng)]);
      } else {
        s.push_back(token);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

SynthCorpus synthesize(const SynthConfig& cfg) {
  cfg.validate();
  const std::vector<Domain> domains = {music_domain(cfg.seed), assistant_domain()};
  SynthCorpus out;
  out.vocabulary = vocabulary(domains);
  out.firstpass_lm = ngram::train_katz(generic_corpus(domains, out.vocabulary, cfg.firstpass_sentences, cfg.seed + 1));

  ErrorChannelConfig channel;
  channel.p_sub = cfg.p_sub;
  channel.p_del = cfg.p_del;
  channel.p_ins = cfg.p_ins;
  channel.confusion_map = build_confusion_map(out.vocabulary);
  channel.vocabulary = out.vocabulary;
  channel.nbest_size_max = cfg.nbest_max;
  channel.noise_scale = cfg.noise_scale;
  channel.seed = cfg.seed;

  const ngram::BackoffModel& lm = out.firstpass_lm;
  const FirstPassScorer firstpass = [&lm](const Words& w) { return std::log(10.0) * lm.sentence_log10(w); };

  std::uint64_t stream = 0;
  std::uint64_t query_seed = cfg.seed * 1000 + 11;
  auto make_split = [&](const std::string& split, std::size_t total, double in_share) {
    const auto n_in = static_cast<std::size_t>(std::llround(static_cast<double>(total) * in_share));
    std::vector<NBestRecord> records;
    std::size_t serial = 0;
    for (std::size_t d = 0; d < domains.size(); ++d) {
      const std::size_t count = d == 0 ? n_in : total - n_in;
      const auto refs = corpus::generate_queries(domains[d].templates, domains[d].catalog, count, query_seed++);
      for (const auto& ref : refs) {
        records.push_back(corpus::corrupt(fmt::format("{}-{}{:05}", domains[d].name, split, serial++), ref,
                                          channel, cfg.nbest_max, stream++, firstpass));
      }
    }
    // Interleave domains deterministically so files are not sorted by domain.
    std::mt19937_64 rng(query_seed++);
    std::shuffle(records.begin(), records.end(), rng);
    return records;
  };
  out.train = make_split("train", cfg.train, cfg.train_in_domain);
  out.dev = make_split("dev", cfg.dev, cfg.test_in_domain);
  out.eval = make_split("eval", cfg.eval, cfg.test_in_domain);
  return out;
}

}  // namespace nbrew::desk
