#pragma once

#include <cstdint>
#include <span>

#include "nbrew/tensor.hpp"

namespace nbrew::losses {

// Mean negative log-probability over the non-pad entries of a column of
// token log-probs. pad_mask (optional) has one entry per row; non-zero = pad.
Tensor ce_loss(const Tensor& token_logps, std::span<const std::uint8_t> pad_mask = {});

// sum_i p_i (W_i - mean(W)). p is 1 x N and must sum to 1 within 1e-6.
Tensor mwer_loss(const Tensor& p, std::span<const double> word_errors);

// -sum_i softmax(s)_i log softmax(s_hat)_i, with s_hat 1 x N.
Tensor mqsd_loss(std::span<const double> similarity, const Tensor& s_hat);

struct LossBreakdown {
  Tensor ce;
  Tensor aux;  // MWER or MQSD
  Tensor combined;
  double weight = 0.0;
};

// aux + weight * ce
LossBreakdown combined(const Tensor& ce, const Tensor& aux, double weight);

}  // namespace nbrew::losses
