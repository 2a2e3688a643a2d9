#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nbrew/config.hpp"
#include "nbrew/corpus.hpp"
#include "nbrew/desk_domain.hpp"
#include "nbrew/interpolate.hpp"
#include "nbrew/model.hpp"
#include "nbrew/ngram.hpp"
#include "nbrew/tokenizer.hpp"
#include "nbrew/trainer.hpp"

namespace nbrew::pipeline {

// BPE over the training references and hypotheses.
Vocabulary train_tokenizer(std::span<const NBestRecord> train, std::size_t budget);

std::vector<TokenizedRecord> tokenize_all(std::span<const NBestRecord> records, const Vocabulary& vocab);

// Reference text of the training split, the 4-gram rescorer's corpus.
std::vector<Words> reference_corpus(std::span<const NBestRecord> records);

// Model outputs for one record.
struct ScoredRecord {
  NBestRecord record;
  std::vector<double> scores;  // TRA: s_hat per hypothesis; TR: p per hypothesis
  DecodeResult decode;         // greedy decode (TRA only)
  Words decoded_text;
};

ScoredRecord score_record(const NBestTransformer& model, const Vocabulary& vocab, const NBestRecord& record);
std::vector<ScoredRecord> score_records(const NBestTransformer& model, const Vocabulary& vocab,
                                        std::span<const NBestRecord> records);

// Model outputs without the record itself, one JSON object per line:
// {"id","scores":[...],"decoded","token_logps":[...],"mean_logp"}
void write_scored(std::span<const ScoredRecord> scored, const std::filesystem::path& path);
// Re-attaches each line to the record with the same id.
std::vector<ScoredRecord> read_scored(const std::filesystem::path& path, std::span<const NBestRecord> records);

interp::ThresholdCase threshold_case(const ScoredRecord& scored);
std::vector<interp::ThresholdCase> threshold_cases(std::span<const ScoredRecord> scored);

// Records of one domain (by query-id prefix).
template <class T, class Get>
std::vector<T> filter_domain(std::span<const T> items, const std::string& domain, Get record_of) {
  std::vector<T> out;
  for (const auto& item : items)
    if (corpus::domain_of(record_of(item)) == domain) out.push_back(item);
  return out;
}

// Candidate rows with the ASR signals and the given rescorer log-score per
// hypothesis (rescorer_logp) and no rewrite row.
interp::RecordSignals base_signals(const NBestRecord& record, std::span<const double> rescorer_logp);

std::vector<interp::RecordSignals> ngram_signals(std::span<const NBestRecord> records, const ngram::BackoffModel& lm);
// ln s_hat (TRA) or ln p (TR).
std::vector<interp::RecordSignals> model_signals(std::span<const ScoredRecord> scored);
// TRA signals plus the decoded text as an extra row (0, 0, 0, summed token
// log-prob) when it is new and N > 1.
std::vector<interp::RecordSignals> rewrite_signals(std::span<const ScoredRecord> scored);

// Smallest power of ten M >= 1 such that (1, 0, 0, M) never selects an
// injected row on `dev`.
double rewrite_weight_scale(std::span<const interp::RecordSignals> dev);

double selected_wer(std::span<const interp::RecordSignals> records, std::span<const double> w);

// Desk-scale experiment, end to end in one process.
struct ExperimentConfig {
  desk::SynthConfig synth;
  ModelConfig model;
  TrainConfig train;
  std::size_t bpe_budget = 512;
  bool train_tr = false;
  std::vector<double> threshold_grid = interp::default_threshold_grid();

  static ExperimentConfig desk_defaults();
  void apply(const KeyValueConfig& kv);  // keys prefixed synth./model./train.
  KeyValueConfig to_kv() const;
};

struct WerRow {
  std::string system;
  double all = 0.0;        // whole eval split
  double in_domain = 0.0;  // music slice
  double other = 0.0;      // assistant slice
};

struct ExperimentReport {
  std::vector<WerRow> standalone;    // ASR, TR?, TRA-R, TRA-RW, oracle
  std::vector<WerRow> interpolated;  // ASR, 4-gram+W*, TR+W*?, TRA-R+W*, TRA-RW+W*
  interp::ThresholdSearchResult thresholds;
  interp::WeightVector w_ngram, w_tra_r, w_tra_rw, w_tr;
  double ngram_dev_wer_initial = 0.0, ngram_dev_wer_tuned = 0.0;
  double tra_r_dev_wer_initial = 0.0, tra_r_dev_wer_tuned = 0.0;
  double train_seconds = 0.0;
  std::int64_t train_steps = 0;
  std::vector<std::string> log;

  const WerRow& standalone_row(const std::string& name) const;
  const WerRow& interpolated_row(const std::string& name) const;
};

WerRow wer_row(const std::string& system, std::span<const NBestRecord> records, std::span<const Words> outputs);

ExperimentReport run_experiment(const ExperimentConfig& cfg,
                                const std::function<void(const std::string&)>& progress = {});

// Aligned text table: WER (%) and relative change vs the first row.
std::string format_table(const std::string& title, std::span<const WerRow> rows);
std::string format_tsv(const std::string& table_name, std::span<const WerRow> rows);

}  // namespace nbrew::pipeline
