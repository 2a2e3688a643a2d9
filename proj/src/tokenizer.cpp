#include "nbrew/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "nbrew/error.hpp"

namespace nbrew {

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) add_token(t);
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw InputError("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocabulary::find(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::add_token(const std::string& token) {
  auto [it, inserted] = ids_.try_emplace(token, static_cast<int>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

void Vocabulary::add_merge(std::string left, std::string right) {
  merge_rank_.try_emplace({left, right}, merges_.size());
  merges_.emplace_back(std::move(left), std::move(right));
}

std::optional<std::size_t> Vocabulary::merge_rank(const std::string& left, const std::string& right) const {
  auto it = merge_rank_.find({left, right});
  if (it == merge_rank_.end()) return std::nullopt;
  return it->second;
}

std::string Vocabulary::serialize() const {
  std::string out = "nbrew-bpe 1\n";
  out += "merges " + std::to_string(merges_.size()) + "\n";
  for (const auto& [l, r] : merges_) out += l + "\t" + r + "\n";
  out += "tokens " + std::to_string(tokens_.size()) + "\n";
  for (std::size_t i = 0; i < tokens_.size(); ++i) out += tokens_[i] + "\t" + std::to_string(i) + "\n";
  return out;
}

Vocabulary Vocabulary::deserialize(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> std::string& {
    if (!std::getline(in, line)) throw ParseError("vocabulary file truncated", lineno + 1);
    ++lineno;
    return line;
  };
  auto count_after = [&](const std::string& keyword) {
    const std::string& l = next();
    if (l.rfind(keyword + " ", 0) != 0) throw ParseError("expected '" + keyword + " <count>'", lineno);
    try {
      return static_cast<std::size_t>(std::stoull(l.substr(keyword.size() + 1)));
    } catch (const std::exception&) {
      throw ParseError("bad count after '" + keyword + "'", lineno);
    }
  };
  if (next() != "nbrew-bpe 1") throw ParseError("not an nbrew-bpe vocabulary", lineno);

  Vocabulary v;
  v.tokens_.clear();
  v.ids_.clear();
  const std::size_t n_merges = count_after("merges");
  for (std::size_t i = 0; i < n_merges; ++i) {
    const std::string& l = next();
    const auto tab = l.find('\t');
    if (tab == std::string::npos) throw ParseError("merge line needs two tab-separated symbols", lineno);
    v.add_merge(l.substr(0, tab), l.substr(tab + 1));
  }
  const std::size_t n_tokens = count_after("tokens");
  for (std::size_t i = 0; i < n_tokens; ++i) {
    const std::string& l = next();
    const auto tab = l.rfind('\t');
    if (tab == std::string::npos) throw ParseError("token line needs token<TAB>id", lineno);
    std::size_t id = 0;
    try {
      id = std::stoull(l.substr(tab + 1));
    } catch (const std::exception&) {
      throw ParseError("bad token id", lineno);
    }
    if (id != i) throw ParseError("token ids must be dense and ordered", lineno);
    if (v.find(l.substr(0, tab))) throw ParseError("duplicate token", lineno);
    v.add_token(l.substr(0, tab));
  }
  if (v.size() < kReserved || v.tokens_[kPad] != "<pad>" || v.tokens_[kBos] != "<s>" ||
      v.tokens_[kEos] != "</s>" || v.tokens_[kUnk] != "<unk>")
    throw ParseError("reserved tokens missing or out of place", lineno);
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << serialize();
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

namespace tokenizer {

namespace {

std::string lowercase(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Initial symbols of a word before any merge; the first carries the marker.
std::vector<std::string> base_symbols(const std::string& word) {
  std::vector<std::string> syms = code_points(lowercase(word));
  if (!syms.empty()) syms.front() = Vocabulary::kWordMarker + syms.front();
  return syms;
}

void apply_merges(std::vector<std::string>& syms, const Vocabulary& vocab) {
  while (syms.size() > 1) {
    std::size_t best_pos = syms.size();
    std::size_t best_rank = 0;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto rank = vocab.merge_rank(syms[i], syms[i + 1]);
      if (rank && (best_pos == syms.size() || *rank < best_rank)) {
        best_pos = i;
        best_rank = *rank;
      }
    }
    if (best_pos == syms.size()) break;
    syms[best_pos] += syms[best_pos + 1];
    syms.erase(syms.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
  }
}

}  // namespace

std::vector<std::string> code_points(const std::string& word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, word.size() - i);
    out.push_back(word.substr(i, len));
    i += len;
  }
  return out;
}

Vocabulary train_bpe(std::span<const Words> corpus, std::size_t vocab_budget) {
  if (corpus.empty()) throw InputError("train_bpe: empty corpus");

  // Word types (as symbol sequences) with frequencies.
  std::map<std::vector<std::string>, std::size_t> types;
  std::set<std::string> chars;
  for (const auto& line : corpus) {
    for (const auto& word : line) {
      for (const auto& cp : code_points(lowercase(word))) chars.insert(cp);
      ++types[base_symbols(word)];
    }
  }
  // Every character both word-initial and word-internal, so any text over
  // the training characters encodes without unk.
  std::set<std::string> alphabet;
  for (const auto& c : chars) {
    alphabet.insert(c);
    alphabet.insert(Vocabulary::kWordMarker + c);
  }
  if (alphabet.size() + Vocabulary::kReserved > vocab_budget)
    throw ConfigError("vocabulary budget " + std::to_string(vocab_budget) + " cannot hold the " +
                      std::to_string(alphabet.size()) + "-symbol base alphabet + 4 reserved tokens");
  Vocabulary vocab;
  for (const auto& s : alphabet) vocab.add_token(s);

  std::vector<std::pair<std::vector<std::string>, std::size_t>> words(types.begin(), types.end());
  while (vocab.size() < vocab_budget) {
    std::map<std::pair<std::string, std::string>, std::size_t> pairs;
    for (const auto& [syms, freq] : words)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pairs[{syms[i], syms[i + 1]}] += freq;

    // std::map iterates pairs in lexicographic order, so the first maximum wins ties.
    const std::pair<std::string, std::string>* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [p, c] : pairs) {
      if (c > best_count) {
        best = &p;
        best_count = c;
      }
    }
    if (!best || best_count < 2) break;

    const auto [left, right] = *best;
    vocab.add_merge(left, right);
    vocab.add_token(left + right);
    for (auto& [syms, _] : words) {
      for (std::size_t i = 0; i + 1 < syms.size();) {
        if (syms[i] == left && syms[i + 1] == right) {
          syms[i] += syms[i + 1];
          syms.erase(syms.begin() + static_cast<std::ptrdiff_t>(i) + 1);
        } else {
          ++i;
        }
      }
    }
  }
  return vocab;
}

std::vector<int> encode(const Words& text, const Vocabulary& vocab) {
  std::vector<int> ids{Vocabulary::kBos};
  for (const auto& word : text) {
    auto syms = base_symbols(word);
    apply_merges(syms, vocab);
    for (const auto& s : syms) ids.push_back(vocab.find(s).value_or(Vocabulary::kUnk));
  }
  ids.push_back(Vocabulary::kEos);
  return ids;
}

Words decode(std::span<const int> ids, const Vocabulary& vocab) {
  static const std::string marker = Vocabulary::kWordMarker;
  Words out;
  for (int id : ids) {
    const std::string& tok = vocab.token(id);
    if (static_cast<std::size_t>(id) < Vocabulary::kReserved) continue;
    if (tok.rfind(marker, 0) == 0) {
      out.push_back(tok.substr(marker.size()));
    } else if (out.empty()) {
      out.push_back(tok);
    } else {
      out.back() += tok;
    }
  }
  return out;
}

}  // namespace tokenizer
}  // namespace nbrew
