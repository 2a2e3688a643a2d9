#pragma once

// Reference implementations used only by tests. They share no code with the
// library paths they check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nbrew/tensor.hpp"

namespace oracle {

// Plain exhaustive recursion over match/substitute, insert and delete.
inline std::size_t edit_distance(std::span<const std::string> a, std::span<const std::string> b) {
  if (a.empty()) return b.size();
  if (b.empty()) return a.size();
  const std::size_t diag = edit_distance(a.subspan(1), b.subspan(1)) + (a[0] == b[0] ? 0 : 1);
  const std::size_t drop_a = edit_distance(a.subspan(1), b) + 1;
  const std::size_t drop_b = edit_distance(a, b.subspan(1)) + 1;
  return std::min({diag, drop_a, drop_b});
}

// Sliding-window n-gram counter with optional sentence boundaries.
inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::vector<std::string>>& corpus,
                                                                    std::size_t n, bool boundaries) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (const auto& sentence : corpus) {
    std::vector<std::string> toks;
    if (boundaries) toks.push_back("<s>");
    toks.insert(toks.end(), sentence.begin(), sentence.end());
    if (boundaries) toks.push_back("</s>");
    for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
  }
  return out;
}

inline double softmax_entropy(std::span<const double> s) {
  const double m = *std::max_element(s.begin(), s.end());
  double z = 0.0;
  for (double v : s) z += std::exp(v - m);
  double h = 0.0;
  for (double v : s) {
    const double p = std::exp(v - m) / z;
    h -= p * std::log(p);
  }
  return h;
}

struct GradCheck {
  double worst_rel_error = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
};

// Central differences with step h on every entry of every tensor, compared to
// the analytic gradient. Relative error per tensor is
// ||analytic - numeric|| / max(||analytic||, ||numeric||, floor).
inline GradCheck check_gradients(const std::function<nbrew::Tensor()>& loss_fn, std::vector<nbrew::NamedTensor> params,
                                 double h = 1e-5, double floor = 1e-6) {
  for (auto& p : params) p.tensor.zero_grad();
  loss_fn().backward();
  GradCheck out;
  for (auto& p : params) {
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    std::vector<double> numeric(analytic.size());
    auto values = p.tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double plus = 0.0, minus = 0.0;
      {
        nbrew::NoGradGuard guard;
        values[i] = saved + h;
        plus = loss_fn().item();
        values[i] = saved - h;
        minus = loss_fn().item();
      }
      values[i] = saved;
      numeric[i] = (plus - minus) / (2.0 * h);
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
    if (rel >= out.worst_rel_error) {
      out.worst_rel_error = rel;
      out.worst_name = p.name;
    }
    ++out.checked;
  }
  return out;
}

inline std::vector<std::string> random_words(std::mt19937_64& rng, std::size_t max_len, const std::vector<std::string>& alphabet,
                                             std::size_t min_len = 0) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::vector<std::string> out(len(rng));
  for (auto& w : out) w = alphabet[pick(rng)];
  return out;
}

}  // namespace oracle
