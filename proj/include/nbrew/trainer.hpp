#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nbrew/config.hpp"
#include "nbrew/corpus.hpp"
#include "nbrew/losses.hpp"
#include "nbrew/model.hpp"
#include "nbrew/tokenizer.hpp"

namespace nbrew {

struct TrainConfig {
  std::int64_t max_steps = 5000;
  std::int64_t eval_every = 200;
  std::size_t batch_token_budget = 30000;
  std::int64_t warmup = 400;
  std::int64_t patience = 5;
  std::uint64_t seed = 1;
  double aux_weight = 0.01;  // alpha (TR) or lambda (TRA)
  double clip_norm = 1.0;
  double lr_scale = 1.0;  // multiplier on the inverse-sqrt schedule

  void validate() const;
  KeyValueConfig to_kv() const;
  static TrainConfig from_kv(const KeyValueConfig& kv);
};

// A record in token-id form, with the supervision both objectives need.
struct TokenizedRecord {
  std::vector<std::vector<int>> hypotheses;  // each [bos .. eos]
  std::vector<int> target;                   // reference, [bos .. eos]
  std::vector<double> similarity;            // s_i
  std::vector<double> word_errors;           // W_i, raw edit counts

  std::size_t n() const { return hypotheses.size(); }
  std::size_t max_hyp_len() const;
};

TokenizedRecord tokenize_record(const NBestRecord& record, const Vocabulary& vocab);

// Tokens a record occupies when its hypotheses are padded to `pad_len`.
std::size_t record_tokens(const TokenizedRecord& record, std::size_t pad_len);

struct Batch {
  std::size_t n = 0;        // shared N-best size
  std::size_t pad_len = 0;  // hypotheses padded to this length
  std::vector<std::size_t> indices;
};

struct BatchPlan {
  std::vector<Batch> batches;
  std::size_t skipped = 0;  // records that alone exceed the budget
};

// Groups records by N, packs each group greedily under the token budget in a
// seed-determined order, then shuffles the batch order.
BatchPlan make_batches(std::span<const TokenizedRecord> records, std::size_t token_budget, std::uint64_t seed);

// Loss of one record: MQSD + w*ce for TRA, MWER + w*ce for TR.
losses::LossBreakdown record_loss(const NBestTransformer& model, const TokenizedRecord& record,
                                  std::size_t pad_len, double aux_weight, const ForwardOptions& opts = {});

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainHooks {
  std::function<void(const std::string&)> on_log;
  // Replaces the dev combined loss as the early-stopping metric (lower is better).
  std::function<double(const NBestTransformer&, std::int64_t step)> dev_metric;
};

struct TrainResult {
  NBestTransformer model;  // best-dev parameters
  std::vector<std::string> log;
  std::int64_t steps = 0;
  std::int64_t best_step = 0;
  double best_dev = 0.0;
  bool early_stopped = false;
  std::size_t skipped = 0;  // over budget, too long for the model, or N too large
};

double dev_loss(const NBestTransformer& model, std::span<const TokenizedRecord> dev, double aux_weight);

TrainResult train(const ModelConfig& model_cfg, std::span<const TokenizedRecord> train_records,
                  std::span<const TokenizedRecord> dev_records, const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace nbrew
