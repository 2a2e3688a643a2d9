#include "nbrew/losses.hpp"

#include <cmath>
#include <numeric>
#include <vector>

#include <fmt/format.h>

#include "nbrew/error.hpp"

namespace nbrew::losses {

using namespace ops;

Tensor ce_loss(const Tensor& token_logps, std::span<const std::uint8_t> pad_mask) {
  if (token_logps.cols() != 1) throw UsageError("ce_loss expects a column of token log-probs");
  if (pad_mask.empty()) {
    if (token_logps.rows() == 0) throw UsageError("ce_loss: no target tokens");
    return neg(mean(token_logps));
  }
  if (pad_mask.size() != token_logps.rows()) throw UsageError("ce_loss: pad mask length mismatch");
  std::vector<double> keep(pad_mask.size());
  std::size_t count = 0;
  for (std::size_t i = 0; i < pad_mask.size(); ++i) {
    keep[i] = pad_mask[i] ? 0.0 : 1.0;
    count += pad_mask[i] ? 0 : 1;
  }
  if (count == 0) throw UsageError("ce_loss: every target position is padding");
  const Tensor weights = Tensor::from_values(pad_mask.size(), 1, std::move(keep));
  return scale(sum(mul(token_logps, weights)), -1.0 / static_cast<double>(count));
}

Tensor mwer_loss(const Tensor& p, std::span<const double> word_errors) {
  if (p.rows() != 1 || p.cols() != word_errors.size() || word_errors.empty())
    throw UsageError(fmt::format("mwer_loss: {}x{} probabilities for {} hypotheses", p.rows(), p.cols(),
                                 word_errors.size()));
  double total = 0.0;
  for (double v : p.values()) total += v;
  if (std::abs(total - 1.0) > 1e-6)
    throw UsageError(fmt::format("mwer_loss: probabilities sum to {}, expected 1", total));
  const double mean_errors =
      std::accumulate(word_errors.begin(), word_errors.end(), 0.0) / static_cast<double>(word_errors.size());
  std::vector<double> centred(word_errors.begin(), word_errors.end());
  for (double& w : centred) w -= mean_errors;
  const std::size_t n = centred.size();
  return sum(mul(p, Tensor::from_values(1, n, std::move(centred))));
}

Tensor mqsd_loss(std::span<const double> similarity, const Tensor& s_hat) {
  if (s_hat.rows() != 1 || s_hat.cols() != similarity.size() || similarity.empty())
    throw UsageError(fmt::format("mqsd_loss: {}x{} predictions for {} similarity scores", s_hat.rows(),
                                 s_hat.cols(), similarity.size()));
  const Tensor target =
      softmax(Tensor::from_values(1, similarity.size(), std::vector<double>(similarity.begin(), similarity.end())), 1);
  return neg(sum(mul(target, log_softmax(s_hat, 1))));
}

LossBreakdown combined(const Tensor& ce, const Tensor& aux, double weight) {
  if (weight < 0.0) throw UsageError("loss weight must be non-negative");
  LossBreakdown out;
  out.ce = ce;
  out.aux = aux;
  out.weight = weight;
  out.combined = add(aux, scale(ce, weight));
  return out;
}

}  // namespace nbrew::losses
