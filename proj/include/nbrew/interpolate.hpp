#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "nbrew/config.hpp"
#include "nbrew/corpus.hpp"
#include "nbrew/model.hpp"

namespace nbrew::interp {

inline constexpr std::size_t kSignals = 4;

struct SignalVector {
  double acoustic_logp = 0.0;
  double firstpass_lm_logp = 0.0;
  double rescorer_logp = 0.0;
  double lm_cost_plus = 0.0;  // 0 for original hypotheses

  std::array<double, kSignals> values() const { return {acoustic_logp, firstpass_lm_logp, rescorer_logp, lm_cost_plus}; }
};

using WeightVector = std::vector<double>;

// The pure-ASR starting point (1, 0, 0, 0).
WeightVector asr_weights();

struct CandidateRow {
  Words text;
  SignalVector signals;
  bool injected = false;  // rewrite candidate with zeroed ASR signals
};

// Candidate rows in ASR rank order; an injected rewrite row comes last.
struct RecordSignals {
  std::string query_id;
  Words reference;
  std::vector<CandidateRow> rows;
};

double combine(const SignalVector& signals, std::span<const double> w);
// argmax of combine(); ties go to the lower row index (ASR rank).
std::size_t select(const RecordSignals& record, std::span<const double> w);
double corpus_wer(std::span<const RecordSignals> records, std::span<const double> w);

struct PowellOptions {
  double tol = 1e-10;            // stop once an iteration improves the objective by no more than this
  std::size_t max_iters = 200;   // outer iterations
  std::size_t max_evals = 100000;
  // When non-empty, each line search first scans these step lengths along the
  // direction and then refines the best one with Brent; suited to piecewise
  // constant objectives. Otherwise a golden-section bracket is grown from 0.
  std::vector<double> coarse_steps;
};

struct PowellResult {
  WeightVector w;
  double value = 0.0;
  double initial_value = 0.0;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  bool hit_limit = false;  // max_iters or max_evals exhausted
  std::vector<double> trace;  // objective after each iteration
};

using Objective = std::function<double(std::span<const double>)>;

PowellResult powell_optimize(const Objective& objective, const WeightVector& w0, const PowellOptions& options = {});

// Symmetric log-spaced step lengths suitable for PowellOptions::coarse_steps.
std::vector<double> log_spaced_steps(double smallest, double largest, std::size_t per_sign);

struct TuneResult {
  WeightVector w;
  double initial_wer = 0.0;
  double wer = 0.0;
  PowellResult powell;
};

// Minimizes dev corpus WER over the weights, starting from w0.
TuneResult tune_weights(std::span<const RecordSignals> dev, const WeightVector& w0, PowellOptions options = {});

// Inputs for one record of the threshold search, produced by the TRA model.
struct ThresholdCase {
  NBestRecord record;
  DecodeResult decode;
  Words decoded_text;
  RescoreOutput scores;
};

double threshold_wer(std::span<const ThresholdCase> cases, double threshold_r, double threshold_w);

struct ThresholdSearchResult {
  double threshold_r = std::numeric_limits<double>::infinity();
  double threshold_w = std::numeric_limits<double>::infinity();
  double in_domain_wer = 0.0;
  double all_domain_wer = 0.0;
  double baseline_in_domain_wer = 0.0;
  double baseline_all_domain_wer = 0.0;
  bool feasible = false;  // false: nothing in the grid kept all-domain WER at baseline
};

// Picks threshold_R with threshold_W = +inf, then threshold_W > threshold_R,
// minimizing in-domain WER while all-domain WER stays at or below the
// no-rescoring baseline. Ties go to the larger threshold.
ThresholdSearchResult grid_search_thresholds(std::span<const ThresholdCase> in_domain,
                                             std::span<const ThresholdCase> all_domain, std::span<const double> grid);

// -3.0, -2.9, ..., 0.0
std::vector<double> default_threshold_grid();

// One JSON object per line: {"id","ref","rows":[{"text","am","lm","resc","lmc","injected"}]}
void write_signals(std::span<const RecordSignals> records, const std::filesystem::path& path);
std::vector<RecordSignals> read_signals(const std::filesystem::path& path);

KeyValueConfig weights_to_kv(std::span<const double> w);
WeightVector weights_from_kv(const KeyValueConfig& kv);

}  // namespace nbrew::interp
