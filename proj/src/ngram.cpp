#include "nbrew/ngram.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "nbrew/error.hpp"

namespace nbrew::ngram {

namespace {

double to_log10(double p) { return p > 0.0 ? std::log10(p) : kLogZero; }

double from_log10(double lp) { return lp <= kLogZero ? 0.0 : std::pow(10.0, lp); }

}  // namespace

std::size_t CountTable::count(const Ngram& gram) const {
  if (gram.empty() || gram.size() > counts.size()) return 0;
  const auto& m = counts[gram.size() - 1];
  const auto it = m.find(gram);
  return it == m.end() ? 0 : it->second;
}

CountTable count(std::span<const Words> corpus, std::size_t order, bool boundaries) {
  if (corpus.empty()) throw InputError("cannot count n-grams of an empty corpus");
  if (order < 1) throw ConfigError("n-gram order must be at least 1");
  CountTable table;
  table.order = order;
  table.boundaries = boundaries;
  table.counts.resize(order);
  table.count_of_counts.resize(order);
  table.context_totals.resize(order);
  Words seq;
  for (const auto& sentence : corpus) {
    seq.clear();
    if (boundaries) seq.push_back(kBos);
    seq.insert(seq.end(), sentence.begin(), sentence.end());
    if (boundaries) seq.push_back(kEos);
    for (std::size_t k = 0; k < order; ++k) {
      for (std::size_t i = 0; i + k < seq.size(); ++i) {
        ++table.counts[k][Ngram(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                seq.begin() + static_cast<std::ptrdiff_t>(i + k + 1))];
      }
    }
  }
  for (std::size_t k = 0; k < order; ++k) {
    for (const auto& [gram, c] : table.counts[k]) {
      ++table.count_of_counts[k][c];
      table.context_totals[k][Ngram(gram.begin(), gram.end() - 1)] += c;
    }
  }
  return table;
}

CountTable apply_cutoffs(CountTable table, std::size_t min_order, std::size_t min_count) {
  for (std::size_t k = 0; k < table.counts.size(); ++k) {
    if (k + 1 < min_order) continue;
    std::erase_if(table.counts[k], [&](const auto& kv) { return kv.second < min_count; });
  }
  return table;
}

double good_turing_count(std::size_t r, const std::map<std::size_t, std::size_t>& count_of_counts) {
  const auto nr = count_of_counts.find(r);
  if (nr == count_of_counts.end() || nr->second == 0)
    throw UsageError(fmt::format("Good-Turing count undefined: N_{} is zero", r));
  const auto next = count_of_counts.find(r + 1);
  const double n_next = next == count_of_counts.end() ? 0.0 : static_cast<double>(next->second);
  return static_cast<double>(r + 1) * n_next / static_cast<double>(nr->second);
}

double Discounts::at(std::size_t order_index, std::size_t r) const {
  if (r == 0 || r > max_count || order_index >= ratio.size()) return 1.0;
  return ratio[order_index][r];
}

Discounts Discounts::none(std::size_t order) {
  Discounts d;
  d.ratio.assign(order, std::vector<double>(d.max_count + 1, 1.0));
  d.smoothed.assign(order, false);
  return d;
}

Discounts good_turing_discount(const CountTable& table, std::size_t max_count) {
  Discounts d;
  d.max_count = max_count;
  d.ratio.assign(table.order, std::vector<double>(max_count + 1, 1.0));
  d.smoothed.assign(table.order, false);
  for (std::size_t k = 1; k < table.order; ++k) {
    const auto& coc = table.count_of_counts[k];
    std::vector<double> n(max_count + 2, 0.0);
    bool sparse = false;
    for (std::size_t r = 1; r <= max_count + 1; ++r) {
      const auto it = coc.find(r);
      n[r] = it == coc.end() ? 0.0 : static_cast<double>(it->second);
      sparse = sparse || n[r] == 0.0;
    }
    if (sparse) {
      // log N_r = a + b log r over every observed r
      double sx = 0, sy = 0, sxx = 0, sxy = 0, m = 0;
      for (const auto& [r, nr] : coc) {
        if (nr == 0) continue;
        const double x = std::log(static_cast<double>(r));
        const double y = std::log(static_cast<double>(nr));
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        m += 1;
      }
      const double denom = m * sxx - sx * sx;
      if (m < 2 || denom <= 0.0) continue;  // nothing to fit: leave this order undiscounted
      const double b = (m * sxy - sx * sy) / denom;
      const double a = (sy - b * sx) / m;
      for (std::size_t r = 1; r <= max_count + 1; ++r) n[r] = std::exp(a + b * std::log(static_cast<double>(r)));
      d.smoothed[k] = true;
    }
    const double common = static_cast<double>(max_count + 1) * n[max_count + 1] / n[1];
    if (!(1.0 - common > 0.0)) continue;
    for (std::size_t r = 1; r <= max_count; ++r) {
      const double r_star = static_cast<double>(r + 1) * n[r + 1] / n[r];
      const double ratio = (r_star / static_cast<double>(r) - common) / (1.0 - common);
      d.ratio[k][r] = (ratio > 0.0 && ratio <= 1.0) ? ratio : 1.0;
    }
  }
  return d;
}

BackoffModel::BackoffModel(std::size_t order) : grams_(order) {
  if (order < 1) throw ConfigError("n-gram order must be at least 1");
}

const NgramEntry* BackoffModel::find(const Ngram& gram) const {
  if (gram.empty() || gram.size() > grams_.size()) return nullptr;
  const auto& m = grams_[gram.size() - 1];
  const auto it = m.find(gram);
  return it == m.end() ? nullptr : &it->second;
}

bool BackoffModel::in_vocabulary(const std::string& word) const {
  return !grams_.empty() && grams_[0].count(Ngram{word}) != 0;
}

std::vector<std::string> BackoffModel::predicted_words() const {
  std::vector<std::string> out;
  for (const auto& [gram, entry] : grams_.at(0))
    if (gram.front() != kBos) out.push_back(gram.front());
  return out;
}

std::string BackoffModel::map_word(const std::string& w) const { return in_vocabulary(w) ? w : kUnk; }

double BackoffModel::conditional_log10(std::span<const std::string> context, const std::string& word) const {
  const std::size_t keep = std::min(context.size(), grams_.size() - 1);
  Ngram gram;
  for (std::size_t i = context.size() - keep; i < context.size(); ++i) gram.push_back(map_word(context[i]));
  gram.push_back(map_word(word));
  double backoff = 0.0;
  while (true) {
    if (const NgramEntry* e = find(gram)) return backoff + e->log10_prob;
    if (gram.size() == 1) return backoff + kLogZero;
    const Ngram history(gram.begin(), gram.end() - 1);
    if (const NgramEntry* h = find(history); h && h->log10_backoff) backoff += *h->log10_backoff;
    gram.erase(gram.begin());
  }
}

double BackoffModel::sentence_log10(const Words& words) const {
  Words context;
  if (boundaries_) context.push_back(kBos);
  double total = 0.0;
  for (const auto& w : words) {
    total += conditional_log10(context, w);
    context.push_back(w);
  }
  if (boundaries_) total += conditional_log10(context, kEos);
  return total;
}

BackoffModel estimate(const CountTable& table, const Discounts& discounts) {
  if (table.counts.empty() || table.counts[0].empty()) throw InputError("cannot estimate from an empty count table");
  BackoffModel model(table.order);
  model.set_boundaries(table.boundaries);

  double total = 0.0;
  for (const auto& [gram, c] : table.counts[0])
    if (gram.front() != kBos) total += static_cast<double>(c);
  auto& unigrams = model.mutable_entries(0);
  for (const auto& [gram, c] : table.counts[0])
    unigrams[gram].log10_prob = gram.front() == kBos ? kLogZero : to_log10(static_cast<double>(c) / total);
  unigrams.try_emplace(Ngram{kUnk});  // gets the (zero) mass unigrams leave over

  for (std::size_t k = 1; k < table.order; ++k) {
    auto& level = model.mutable_entries(k);
    // context -> (seen probability mass, lower-order mass of the same words)
    std::map<Ngram, std::pair<double, double>> mass;
    for (const auto& [gram, c] : table.counts[k]) {
      const Ngram context(gram.begin(), gram.end() - 1);
      const double ctx_total = static_cast<double>(table.context_totals[k].at(context));
      const double p = discounts.at(k, c) * static_cast<double>(c) / ctx_total;
      level[gram].log10_prob = to_log10(p);
      auto& [seen, lower] = mass[context];
      seen += p;
      lower += from_log10(model.conditional_log10(std::span(context).subspan(1), gram.back()));
    }
    auto& contexts = model.mutable_entries(k - 1);
    for (const auto& [context, sums] : mass) {
      const auto [seen, lower] = sums;
      auto it = contexts.find(context);
      if (it == contexts.end())
        throw UsageError("n-gram context '" + join_words(context) + "' is missing from the lower order");
      const double left = 1.0 - seen;
      const double lower_left = 1.0 - lower;
      if (left <= 1e-12) {
        it->second.log10_backoff = kLogZero;
      } else if (lower_left <= 1e-12) {
        // The lower order has nothing left to hand out: renormalize instead.
        for (auto& [gram, entry] : level)
          if (std::equal(context.begin(), context.end(), gram.begin()))
            entry.log10_prob = to_log10(from_log10(entry.log10_prob) / seen);
        it->second.log10_backoff = kLogZero;
      } else {
        it->second.log10_backoff = std::log10(left / lower_left);
      }
    }
  }
  return model;
}

BackoffModel train_katz(std::span<const Words> corpus, std::size_t order, std::size_t max_count) {
  const CountTable raw = count(corpus, order);
  const Discounts discounts = good_turing_discount(raw, max_count);
  return estimate(apply_cutoffs(raw), discounts);
}

double logprob(const BackoffModel& model, const Words& words) { return model.sentence_log10(words); }

std::string to_arpa(const BackoffModel& model) {
  std::string out = "\\data\\\n";
  for (std::size_t k = 0; k < model.order(); ++k) out += fmt::format("ngram {}={}\n", k + 1, model.entries(k).size());
  for (std::size_t k = 0; k < model.order(); ++k) {
    out += fmt::format("\n\\{}-grams:\n", k + 1);
    for (const auto& [gram, entry] : model.entries(k)) {
      out += fmt::format("{:.8f}\t{}", entry.log10_prob, join_words(gram));
      if (entry.log10_backoff) out += fmt::format("\t{:.8f}", *entry.log10_backoff);
      out += '\n';
    }
  }
  out += "\n\\end\\\n";
  return out;
}

namespace {

double parse_number(const std::string& token, std::size_t lineno) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(token, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != token.size()) throw ParseError("ARPA: bad number '" + token + "'", lineno);
  return v;
}

}  // namespace

BackoffModel parse_arpa(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  enum class Stage { Start, Header, Body, Done } stage = Stage::Start;
  std::map<std::size_t, std::size_t> declared;
  std::size_t section = 0;
  BackoffModel model;

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const Words fields = split_words(line);
    if (fields.empty()) continue;
    if (stage == Stage::Done) throw ParseError("ARPA: content after \\end\\", lineno);
    if (stage == Stage::Start) {
      if (fields.size() != 1 || fields[0] != "\\data\\") throw ParseError("ARPA: expected \\data\\", lineno);
      stage = Stage::Header;
      continue;
    }
    if (fields[0] == "\\end\\") {
      if (section == 0) throw ParseError("ARPA: \\end\\ before any n-gram section", lineno);
      stage = Stage::Done;
      continue;
    }
    if (fields[0].front() == '\\') {
      std::size_t n = 0;
      if (std::sscanf(fields[0].c_str(), "\\%zu-grams:", &n) != 1 || fields.size() != 1 || n == 0 ||
          !declared.count(n))
        throw ParseError("ARPA: unexpected section header '" + line + "'", lineno);
      if (stage == Stage::Header) model = BackoffModel(declared.rbegin()->first);
      if (n != section + 1) throw ParseError(fmt::format("ARPA: section \\{}-grams: out of order", n), lineno);
      if (section > 0 && model.entries(section - 1).size() != declared[section])
        throw ParseError(fmt::format("ARPA: \\{}-grams: has {} entries, header says {}", section,
                                     model.entries(section - 1).size(), declared[section]),
                         lineno);
      section = n;
      stage = Stage::Body;
      continue;
    }
    if (stage == Stage::Header) {
      std::size_t n = 0, c = 0;
      if (fields.size() != 2 || fields[0] != "ngram" || std::sscanf(fields[1].c_str(), "%zu=%zu", &n, &c) != 2 ||
          n == 0)
        throw ParseError("ARPA: bad header line '" + line + "'", lineno);
      if (n != declared.size() + 1) throw ParseError("ARPA: header orders must be consecutive from 1", lineno);
      declared[n] = c;
      continue;
    }
    if (fields.size() != section + 1 && fields.size() != section + 2)
      throw ParseError(fmt::format("ARPA: \\{}-grams: expected {} or {} fields, got {}", section, section + 1,
                                   section + 2, fields.size()),
                       lineno);
    NgramEntry entry;
    entry.log10_prob = parse_number(fields[0], lineno);
    if (fields.size() == section + 2) entry.log10_backoff = parse_number(fields.back(), lineno);
    Ngram gram(fields.begin() + 1, fields.begin() + 1 + static_cast<std::ptrdiff_t>(section));
    if (!model.mutable_entries(section - 1).emplace(std::move(gram), entry).second)
      throw ParseError(fmt::format("ARPA: duplicate entry in \\{}-grams:", section), lineno);
  }
  if (stage != Stage::Done) throw ParseError("ARPA: missing \\end\\", lineno);
  if (section != declared.size())
    throw ParseError(fmt::format("ARPA: header declares {} orders, body has {}", declared.size(), section), lineno);
  if (model.entries(section - 1).size() != declared[section])
    throw ParseError(fmt::format("ARPA: \\{}-grams: has {} entries, header says {}", section,
                                 model.entries(section - 1).size(), declared[section]),
                     lineno);
  model.set_boundaries(model.in_vocabulary(kBos) || model.in_vocabulary(kEos));
  return model;
}

void export_arpa(const BackoffModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << to_arpa(model);
  if (!out) throw InputError("failed writing " + path.string());
}

BackoffModel import_arpa(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_arpa(buf.str());
}

}  // namespace nbrew::ngram
