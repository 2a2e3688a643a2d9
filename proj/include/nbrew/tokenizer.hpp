#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nbrew/words.hpp"

namespace nbrew {

// Subword vocabulary learned by byte-pair merging over characters.
//
// Words after the first in a sequence carry a leading "▁" on their first
// symbol, so a token either continues the current word or starts a new one.
//
// File layout (UTF-8, '\n' line ends):
//   nbrew-bpe 1
//   merges <M>
//   <left>\t<right>          M lines, in merge order
//   tokens <T>
//   <token>\t<id>            T lines, ids 0..T-1 in order
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr std::size_t kReserved = 4;
  static constexpr const char* kWordMarker = "\xE2\x96\x81";  // U+2581

  Vocabulary();

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const;
  std::optional<int> find(const std::string& token) const;
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  // Appends a token if absent; returns its id.
  int add_token(const std::string& token);
  void add_merge(std::string left, std::string right);

  std::string serialize() const;
  static Vocabulary deserialize(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && merges_ == other.merges_;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::map<std::pair<std::string, std::string>, std::size_t> merge_rank_;

 public:
  // Rank of a merge, or nullopt when the pair was never merged.
  std::optional<std::size_t> merge_rank(const std::string& left, const std::string& right) const;
};

namespace tokenizer {

// Learns merges greedily by pair frequency (ties: lexicographically
// smallest pair) until the vocabulary reaches `vocab_budget` or no pair
// occurs at least twice. Text is lowercased first.
Vocabulary train_bpe(std::span<const Words> corpus, std::size_t vocab_budget);

// [bos, subword ids..., eos]; symbols outside the vocabulary become unk.
std::vector<int> encode(const Words& text, const Vocabulary& vocab);

// Inverse of encode on in-alphabet text. Reserved ids are dropped wherever
// they occur; out-of-range ids throw InputError.
Words decode(std::span<const int> ids, const Vocabulary& vocab);

// Splits a word into UTF-8 code points.
std::vector<std::string> code_points(const std::string& word);

}  // namespace tokenizer
}  // namespace nbrew
