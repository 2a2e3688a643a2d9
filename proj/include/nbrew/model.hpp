#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nbrew/config.hpp"
#include "nbrew/corpus.hpp"
#include "nbrew/tensor.hpp"

namespace nbrew {

enum class Variant { TR, TRA };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct ModelConfig {
  std::size_t enc_layers = 4;
  std::size_t dec_layers = 1;
  std::size_t heads = 8;
  std::size_t d_model = 512;
  std::size_t ff_dim = 2048;
  std::size_t vocab_size = 16000;
  std::size_t max_len = 64;  // tokens per hypothesis / decoded target, bos and eos included
  std::size_t nbest_max = 10;
  double dropout = 0.1;
  Variant variant = Variant::TRA;
  // Initial gain of the normalization in the rescore-attention layer. The
  // block sums feed a sigmoid directly, so unit gain saturates it at init.
  double rescore_gain_init = 0.01;
  // Reduce the rescore attention block and the target embedding by their
  // row means instead of row sums before the dot product.
  bool rescore_mean_pool = false;
  // TR sequence score fed to the sigmoid: mean token log-prob (true) or the
  // summed log-prob (false).
  bool tr_length_normalize = true;

  void validate() const;
  KeyValueConfig to_kv() const;
  static ModelConfig from_kv(const KeyValueConfig& kv);
  static ModelConfig from_kv(const KeyValueConfig& kv, const ModelConfig& defaults);
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct NormParams {
  Tensor gain, bias;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayerParams {
  AttentionParams self_attn;
  NormParams norm1;
  FeedForwardParams ff;
  NormParams norm2;
};

struct DecoderLayerParams {
  AttentionParams self_attn;
  NormParams norm1;
  AttentionParams cross_attn;
  NormParams norm2;
  FeedForwardParams ff;
  NormParams norm3;
};

// Query/key/value projections of the rescore-attention layer (d x d each,
// split across heads) and its output normalization.
struct RescoreParams {
  Tensor query, key, value;
  NormParams norm;
};

struct ModelParams {
  Tensor embedding;  // vocab x d, shared by encoder input, decoder input and H^t
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  Tensor out_w, out_b;
  std::optional<RescoreParams> rescore;  // TRA only

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

  // Every parameter with a stable name, in a fixed order.
  std::vector<NamedTensor> named() const;
  std::vector<Tensor> tensors() const;
  // Overwrites values from a checkpoint; names and shapes must match.
  void assign(std::span<const NamedTensor> values);
  ModelParams deep_copy() const;
};

// N hypotheses padded with Vocabulary::kPad to a common length.
struct PaddedNBest {
  std::size_t n = 0;
  std::size_t len = 0;
  std::vector<int> ids;              // n x len, row-major
  std::vector<std::size_t> lengths;  // unpadded length of each row

  std::span<const int> row(std::size_t i) const { return {ids.data() + i * len, len}; }
  std::span<const int> unpadded(std::size_t i) const { return {ids.data() + i * len, lengths[i]}; }
};

// Pads rows to `len` (or to the longest row when len == 0).
PaddedNBest pad_nbest(const std::vector<std::vector<int>>& rows, std::size_t len = 0);

// [h_1; ...; h_N] along the sequence axis. pad_mask[k] != 0 marks row k as
// padding.
struct ContextAggregate {
  Tensor stacked;  // (N*l) x d
  std::vector<std::uint8_t> pad_mask;
};

ContextAggregate aggregate_context(std::span<const Tensor> embedded, std::span<const std::size_t> lengths);

struct EncodedNBest {
  Tensor states;  // H^w, (N*l) x d
  std::vector<std::uint8_t> pad_mask;
  std::size_t n = 0;
  std::size_t len = 0;
  std::vector<std::size_t> lengths;
};

struct DecodeResult {
  std::vector<int> tokens;  // predicted target, ends in eos unless truncated
  std::vector<double> token_logps;
  double mean_logp = 0.0;
};

struct RescoreOutput {
  std::vector<double> scores;  // one sigmoid score per hypothesis
};

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
};

// Transformer encoder-decoder over a concatenated N-best list, with the
// optional rescore-attention head (variant TRA).
class NBestTransformer {
 public:
  NBestTransformer(ModelConfig cfg, std::uint64_t seed);
  NBestTransformer(ModelConfig cfg, ModelParams params);

  const ModelConfig& config() const { return cfg_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  // Scaled embedding plus sinusoidal positions starting at 0.
  Tensor embed(std::span<const int> ids) const;

  EncodedNBest encode(const PaddedNBest& input, const ForwardOptions& opts = {}) const;

  // Log-probability of target[1..] given target[..-1]; shape (|target|-1) x 1.
  Tensor teacher_force_logps(const EncodedNBest& enc, std::span<const int> target,
                             const ForwardOptions& opts = {}) const;

  // Full log-softmax rows for a decoder input sequence; shape |input| x vocab.
  Tensor decoder_log_probs(const EncodedNBest& enc, std::span<const int> decoder_input,
                           const ForwardOptions& opts = {}) const;

  DecodeResult decode_greedy(const EncodedNBest& enc) const;

  // H^t: embedding-layer output of the target tokens (bos excluded).
  Tensor target_states(std::span<const int> target_tokens) const;

  // Pre-sigmoid rescore logits, 1 x N.
  Tensor rescore_logits(const EncodedNBest& enc, const Tensor& target_states,
                        const ForwardOptions& opts = {}) const;
  // sigmoid(rescore_logits), 1 x N.
  Tensor rescore_attention(const EncodedNBest& enc, const Tensor& target_states,
                           const ForwardOptions& opts = {}) const;

  // Teacher-forced sequence scores turned into normalized probabilities:
  // q_i = sigmoid(mean token log-prob of hypothesis i), p_i = q_i / sum q.
  // With tr_length_normalize off the summed log-prob is used instead.
  Tensor score_nbest_tr(const EncodedNBest& enc, const PaddedNBest& input, const ForwardOptions& opts = {}) const;

  void save(const std::filesystem::path& path) const;  // writes path and path + ".config"
  static NBestTransformer load(const std::filesystem::path& path);

 private:
  Tensor attention(const Tensor& query_in, const Tensor& kv_in, const AttentionParams& p,
                   const std::vector<std::uint8_t>& mask, const ForwardOptions& opts) const;
  Tensor feed_forward(const Tensor& x, const FeedForwardParams& p, const ForwardOptions& opts) const;
  Tensor decoder_states(const EncodedNBest& enc, std::span<const int> decoder_input, const ForwardOptions& opts) const;
  Tensor project(const Tensor& states) const;

  ModelConfig cfg_;
  ModelParams params_;
  std::vector<double> positions_;  // max_len x d sinusoid table
};

enum class RewriteAction { KeepAsr, Rescore, Rewrite };

std::string to_string(RewriteAction a);

struct RewriteDecision {
  RewriteAction action = RewriteAction::KeepAsr;
  std::size_t chosen_index = 0;  // hypothesis picked by rescoring (0 when kept)
  Words text;                    // final 1-best
};

// Threshold logic for TRA inference:
//   mean_logp <= threshold_r           -> keep the ASR order
//   otherwise                          -> pick argmax score (ties: ASR rank)
//   mean_logp > threshold_w and N > 1  -> output the decoded text instead
// Requires threshold_w > threshold_r unless both are +infinity.
RewriteDecision rewrite_decide(const DecodeResult& decode, const Words& decoded_text, const RescoreOutput& scores,
                               const NBestRecord& record, double threshold_r, double threshold_w);

// Index of the maximum score; the earliest index wins ties.
std::size_t argmax_first(std::span<const double> scores);

}  // namespace nbrew
