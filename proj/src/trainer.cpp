#include "nbrew/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "nbrew/error.hpp"
#include "nbrew/metrics.hpp"

namespace nbrew {

using namespace ops;

void TrainConfig::validate() const {
  if (max_steps < 1) throw ConfigError("max_steps must be at least 1");
  if (eval_every < 1 || eval_every > max_steps) throw ConfigError("eval_every must lie in [1, max_steps]");
  if (warmup < 1) throw ConfigError("warmup must be at least 1");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  if (batch_token_budget < 1) throw ConfigError("batch_token_budget must be at least 1");
  if (aux_weight < 0.0) throw ConfigError("aux_weight must be non-negative");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (!(lr_scale > 0.0)) throw ConfigError("lr_scale must be positive");
}

KeyValueConfig TrainConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("max_steps", std::to_string(max_steps));
  kv.set("eval_every", std::to_string(eval_every));
  kv.set("batch_token_budget", std::to_string(batch_token_budget));
  kv.set("warmup", std::to_string(warmup));
  kv.set("patience", std::to_string(patience));
  kv.set("seed", std::to_string(seed));
  kv.set("aux_weight", fmt::format("{}", aux_weight));
  kv.set("clip_norm", fmt::format("{}", clip_norm));
  kv.set("lr_scale", fmt::format("{}", lr_scale));
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv) {
  TrainConfig c;
  c.max_steps = kv.get_int("max_steps", c.max_steps);
  c.eval_every = kv.get_int("eval_every", c.eval_every);
  const auto budget = kv.get_int("batch_token_budget", static_cast<std::int64_t>(c.batch_token_budget));
  if (budget < 1) throw ConfigError("batch_token_budget must be at least 1");
  c.batch_token_budget = static_cast<std::size_t>(budget);
  c.warmup = kv.get_int("warmup", c.warmup);
  c.patience = kv.get_int("patience", c.patience);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(c.seed)));
  c.aux_weight = kv.get_double("aux_weight", c.aux_weight);
  c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
  c.lr_scale = kv.get_double("lr_scale", c.lr_scale);
  c.validate();
  return c;
}

std::size_t TokenizedRecord::max_hyp_len() const {
  std::size_t l = 0;
  for (const auto& h : hypotheses) l = std::max(l, h.size());
  return l;
}

TokenizedRecord tokenize_record(const NBestRecord& record, const Vocabulary& vocab) {
  if (record.hypotheses.empty()) throw InputError("record " + record.query_id + " has no hypotheses");
  TokenizedRecord out;
  out.target = tokenizer::encode(record.reference, vocab);
  for (const auto& h : record.hypotheses) {
    out.hypotheses.push_back(tokenizer::encode(h.words, vocab));
    out.similarity.push_back(metrics::query_similarity(h.words, record.reference));
    out.word_errors.push_back(static_cast<double>(metrics::edit_stats(h.words, record.reference).distance()));
  }
  return out;
}

std::size_t record_tokens(const TokenizedRecord& record, std::size_t pad_len) {
  return record.n() * pad_len + record.target.size();
}

BatchPlan make_batches(std::span<const TokenizedRecord> records, std::size_t token_budget, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  BatchPlan plan;
  std::map<std::size_t, std::vector<std::size_t>> by_n;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (record_tokens(records[i], records[i].max_hyp_len()) > token_budget) {
      ++plan.skipped;
      continue;
    }
    by_n[records[i].n()].push_back(i);
  }
  for (auto& [n, indices] : by_n) {
    std::shuffle(indices.begin(), indices.end(), rng);
    Batch current;
    current.n = n;
    std::size_t target_tokens = 0;
    for (std::size_t idx : indices) {
      const auto& r = records[idx];
      const std::size_t pad = std::max(current.pad_len, r.max_hyp_len());
      const std::size_t tokens = (current.indices.size() + 1) * n * pad + target_tokens + r.target.size();
      if (!current.indices.empty() && tokens > token_budget) {
        plan.batches.push_back(std::move(current));
        current = Batch{};
        current.n = n;
        target_tokens = 0;
      }
      current.pad_len = std::max(current.pad_len, r.max_hyp_len());
      current.indices.push_back(idx);
      target_tokens += r.target.size();
    }
    if (!current.indices.empty()) plan.batches.push_back(std::move(current));
  }
  std::shuffle(plan.batches.begin(), plan.batches.end(), rng);
  return plan;
}

losses::LossBreakdown record_loss(const NBestTransformer& model, const TokenizedRecord& record, std::size_t pad_len,
                                  double aux_weight, const ForwardOptions& opts) {
  const PaddedNBest input = pad_nbest(record.hypotheses, pad_len);
  const EncodedNBest enc = model.encode(input, opts);
  const Tensor ce = losses::ce_loss(model.teacher_force_logps(enc, record.target, opts));
  Tensor aux;
  if (model.config().variant == Variant::TRA) {
    const std::span<const int> target(record.target);
    const Tensor ht = model.target_states(target.subspan(1));
    aux = losses::mqsd_loss(record.similarity, model.rescore_attention(enc, ht, opts));
  } else {
    aux = losses::mwer_loss(model.score_nbest_tr(enc, input, opts), record.word_errors);
  }
  return losses::combined(ce, aux, aux_weight);
}

double dev_loss(const NBestTransformer& model, std::span<const TokenizedRecord> dev, double aux_weight) {
  if (dev.empty()) throw InputError("dev split is empty");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& r : dev) total += record_loss(model, r, r.max_hyp_len(), aux_weight).combined.item();
  return total / static_cast<double>(dev.size());
}

namespace {

bool fits_model(const TokenizedRecord& r, const ModelConfig& cfg) {
  return r.n() >= 1 && r.n() <= cfg.nbest_max && r.max_hyp_len() <= cfg.max_len && r.target.size() <= cfg.max_len;
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, std::span<const TokenizedRecord> train_records,
                  std::span<const TokenizedRecord> dev_records, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  model_cfg.validate();

  std::vector<TokenizedRecord> usable;
  std::size_t skipped = 0;
  for (const auto& r : train_records) {
    if (fits_model(r, model_cfg)) {
      usable.push_back(r);
    } else {
      ++skipped;
    }
  }
  std::vector<TokenizedRecord> dev;
  for (const auto& r : dev_records)
    if (fits_model(r, model_cfg)) dev.push_back(r);
  if (usable.empty()) throw InputError("no training record fits the model limits");
  if (dev.empty() && !hooks.dev_metric) throw InputError("no dev record fits the model limits");

  NBestTransformer model(model_cfg, cfg.seed);
  std::vector<Tensor> params = model.params().tensors();
  AdamState adam;
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  ForwardOptions opts{true, &dropout_rng};

  TrainResult result{model, {}, 0, 0, std::numeric_limits<double>::infinity(), false, 0};
  auto emit = [&](std::string line) {
    if (hooks.on_log) hooks.on_log(line);
    result.log.push_back(std::move(line));
  };
  auto evaluate = [&](std::int64_t step) {
    return hooks.dev_metric ? hooks.dev_metric(model, step) : dev_loss(model, dev, cfg.aux_weight);
  };

  ModelParams best = model.params().deep_copy();
  std::int64_t rounds_without_gain = 0;
  std::int64_t step = 0;
  std::uint64_t epoch = 0;
  std::size_t epoch_skipped = 0;
  double ce_acc = 0.0, aux_acc = 0.0, loss_acc = 0.0;
  std::int64_t acc_steps = 0;

  while (step < cfg.max_steps && !result.early_stopped) {
    const BatchPlan plan = make_batches(usable, cfg.batch_token_budget, cfg.seed + epoch++);
    epoch_skipped = plan.skipped;
    if (plan.batches.empty()) throw InputError("every training record exceeds the batch token budget");
    for (const Batch& batch : plan.batches) {
      if (step >= cfg.max_steps) break;
      ++step;
      double ce_sum = 0.0, aux_sum = 0.0, loss_sum = 0.0;
      const double inv = 1.0 / static_cast<double>(batch.indices.size());
      for (std::size_t idx : batch.indices) {
        const auto parts = record_loss(model, usable[idx], batch.pad_len, cfg.aux_weight, opts);
        const double value = parts.combined.item();
        if (!std::isfinite(value))
          throw TrainingDiverged(fmt::format("non-finite loss {} at step {} (ce={}, aux={})", value, step,
                                             parts.ce.item(), parts.aux.item()));
        scale(parts.combined, inv).backward();
        ce_sum += parts.ce.item();
        aux_sum += parts.aux.item();
        loss_sum += value;
      }
      clip_grad_norm(params, cfg.clip_norm);
      const double lr = cfg.lr_scale * lr_schedule(step, model_cfg.d_model, cfg.warmup);
      adam_step(params, adam, lr);
      ce_acc += ce_sum * inv;
      aux_acc += aux_sum * inv;
      loss_acc += loss_sum * inv;
      ++acc_steps;

      if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
        const double dev_metric = evaluate(step);
        const double n = static_cast<double>(acc_steps);
        emit(fmt::format("step={} lr={:.6g} ce={:.6f} aux={:.6f} loss={:.6f} dev={:.6f}", step, lr, ce_acc / n,
                         aux_acc / n, loss_acc / n, dev_metric));
        ce_acc = aux_acc = loss_acc = 0.0;
        acc_steps = 0;
        if (!std::isfinite(dev_metric)) throw TrainingDiverged(fmt::format("non-finite dev metric at step {}", step));
        if (dev_metric < result.best_dev) {
          result.best_dev = dev_metric;
          result.best_step = step;
          best = model.params().deep_copy();
          rounds_without_gain = 0;
        } else if (++rounds_without_gain >= cfg.patience) {
          result.early_stopped = true;
          emit(fmt::format("early_stop step={} best_step={} best_dev={:.6f}", step, result.best_step,
                           result.best_dev));
          break;
        }
      }
    }
  }
  result.steps = step;
  result.skipped = skipped + epoch_skipped;
  result.model = NBestTransformer(model_cfg, std::move(best));
  return result;
}

}  // namespace nbrew
