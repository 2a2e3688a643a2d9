#include "nbrew/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "nbrew/error.hpp"
#include "nbrew/metrics.hpp"

namespace nbrew::pipeline {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<int> encode_fitted(const Words& text, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<int> ids = tokenizer::encode(text, vocab);
  if (ids.size() > max_len) {
    ids.resize(max_len);
    ids.back() = Vocabulary::kEos;
  }
  return ids;
}

}  // namespace

Vocabulary train_tokenizer(std::span<const NBestRecord> train, std::size_t budget) {
  std::vector<Words> text;
  for (const auto& r : train) {
    text.push_back(r.reference);
    for (const auto& h : r.hypotheses) text.push_back(h.words);
  }
  return tokenizer::train_bpe(text, budget);
}

std::vector<TokenizedRecord> tokenize_all(std::span<const NBestRecord> records, const Vocabulary& vocab) {
  std::vector<TokenizedRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(tokenize_record(r, vocab));
  return out;
}

std::vector<Words> reference_corpus(std::span<const NBestRecord> records) {
  std::vector<Words> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.reference);
  return out;
}

ScoredRecord score_record(const NBestTransformer& model, const Vocabulary& vocab, const NBestRecord& record) {
  const ModelConfig& cfg = model.config();
  if (record.hypotheses.empty()) throw InputError("record " + record.query_id + " has no hypotheses");
  if (record.hypotheses.size() > cfg.nbest_max)
    throw InputError(fmt::format("record {} has {} hypotheses, model accepts {}", record.query_id,
                                 record.hypotheses.size(), cfg.nbest_max));
  std::vector<std::vector<int>> rows;
  for (const auto& h : record.hypotheses) rows.push_back(encode_fitted(h.words, vocab, cfg.max_len));
  const PaddedNBest input = pad_nbest(rows);

  NoGradGuard no_grad;
  ScoredRecord out;
  out.record = record;
  const EncodedNBest enc = model.encode(input);
  if (cfg.variant == Variant::TRA) {
    out.decode = model.decode_greedy(enc);
    out.decoded_text = tokenizer::decode(out.decode.tokens, vocab);
    const Tensor s = model.rescore_attention(enc, model.target_states(out.decode.tokens));
    out.scores.assign(s.values().begin(), s.values().end());
  } else {
    const Tensor p = model.score_nbest_tr(enc, input);
    out.scores.assign(p.values().begin(), p.values().end());
  }
  return out;
}

std::vector<ScoredRecord> score_records(const NBestTransformer& model, const Vocabulary& vocab,
                                        std::span<const NBestRecord> records) {
  std::vector<ScoredRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(score_record(model, vocab, r));
  return out;
}

void write_scored(std::span<const ScoredRecord> scored, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& s : scored) {
    const nlohmann::json j = {{"id", s.record.query_id},
                              {"scores", s.scores},
                              {"decoded", join_words(s.decoded_text)},
                              {"tokens", s.decode.tokens},
                              {"token_logps", s.decode.token_logps},
                              {"mean_logp", s.decode.mean_logp}};
    out << j.dump() << '\n';
  }
  if (!out) throw InputError("failed writing " + path.string());
}

std::vector<ScoredRecord> read_scored(const std::filesystem::path& path, std::span<const NBestRecord> records) {
  std::map<std::string, const NBestRecord*> by_id;
  for (const auto& r : records) by_id[r.query_id] = &r;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<ScoredRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto id = j.at("id").get<std::string>();
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw ParseError("scored record '" + id + "' has no matching input record", lineno);
      ScoredRecord s;
      s.record = *it->second;
      s.scores = j.at("scores").get<std::vector<double>>();
      s.decoded_text = split_words(j.at("decoded").get<std::string>());
      s.decode.tokens = j.at("tokens").get<std::vector<int>>();
      s.decode.token_logps = j.at("token_logps").get<std::vector<double>>();
      s.decode.mean_logp = j.at("mean_logp").get<double>();
      if (s.scores.size() != s.record.hypotheses.size())
        throw ParseError("scored record '" + id + "' has the wrong number of scores", lineno);
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("scored file: ") + e.what(), lineno);
    }
  }
  return out;
}

interp::ThresholdCase threshold_case(const ScoredRecord& scored) {
  interp::ThresholdCase c;
  c.record = scored.record;
  c.decode = scored.decode;
  c.decoded_text = scored.decoded_text;
  c.scores.scores = scored.scores;
  return c;
}

std::vector<interp::ThresholdCase> threshold_cases(std::span<const ScoredRecord> scored) {
  std::vector<interp::ThresholdCase> out;
  out.reserve(scored.size());
  for (const auto& s : scored) out.push_back(threshold_case(s));
  return out;
}

interp::RecordSignals base_signals(const NBestRecord& record, std::span<const double> rescorer_logp) {
  if (rescorer_logp.size() != record.hypotheses.size())
    throw UsageError("base_signals: one rescorer score per hypothesis required");
  interp::RecordSignals out;
  out.query_id = record.query_id;
  out.reference = record.reference;
  for (std::size_t i = 0; i < record.hypotheses.size(); ++i) {
    const auto& h = record.hypotheses[i];
    interp::CandidateRow row;
    row.text = h.words;
    row.signals.acoustic_logp = h.acoustic_logp;
    row.signals.firstpass_lm_logp = h.firstpass_lm_logp;
    row.signals.rescorer_logp = rescorer_logp[i];
    out.rows.push_back(std::move(row));
  }
  return out;
}

std::vector<interp::RecordSignals> ngram_signals(std::span<const NBestRecord> records, const ngram::BackoffModel& lm) {
  std::vector<interp::RecordSignals> out;
  out.reserve(records.size());
  const double ln10 = std::log(10.0);
  for (const auto& r : records) {
    std::vector<double> scores;
    for (const auto& h : r.hypotheses) scores.push_back(ln10 * lm.sentence_log10(h.words));
    out.push_back(base_signals(r, scores));
  }
  return out;
}

std::vector<interp::RecordSignals> model_signals(std::span<const ScoredRecord> scored) {
  std::vector<interp::RecordSignals> out;
  out.reserve(scored.size());
  for (const auto& s : scored) {
    std::vector<double> logs;
    for (double v : s.scores) logs.push_back(std::log(std::max(v, std::numeric_limits<double>::min())));
    out.push_back(base_signals(s.record, logs));
  }
  return out;
}

std::vector<interp::RecordSignals> rewrite_signals(std::span<const ScoredRecord> scored) {
  std::vector<interp::RecordSignals> out = model_signals(scored);
  for (std::size_t k = 0; k < scored.size(); ++k) {
    const auto& s = scored[k];
    if (s.record.hypotheses.size() < 2 || s.decoded_text.empty()) continue;
    const bool known = std::any_of(s.record.hypotheses.begin(), s.record.hypotheses.end(),
                                   [&](const Hypothesis& h) { return h.words == s.decoded_text; });
    if (known) continue;
    interp::CandidateRow row;
    row.text = s.decoded_text;
    row.injected = true;
    for (double lp : s.decode.token_logps) row.signals.lm_cost_plus += lp;
    out[k].rows.push_back(std::move(row));
  }
  return out;
}

double rewrite_weight_scale(std::span<const interp::RecordSignals> dev) {
  for (double m = 1.0; m <= 1e12; m *= 10.0) {
    const interp::WeightVector w = {1.0, 0.0, 0.0, m};
    const bool clean = std::none_of(dev.begin(), dev.end(),
                                    [&](const interp::RecordSignals& r) { return r.rows[interp::select(r, w)].injected; });
    if (clean) return m;
  }
  throw InputError("no lm_cost_plus weight keeps injected rows out of the starting selection");
}

double selected_wer(std::span<const interp::RecordSignals> records, std::span<const double> w) {
  return interp::corpus_wer(records, w);
}

// ---------------------------------------------------------------------------

ExperimentConfig ExperimentConfig::desk_defaults() {
  ExperimentConfig c;
  c.model.enc_layers = 2;
  c.model.dec_layers = 1;
  c.model.heads = 4;
  c.model.d_model = 64;
  c.model.ff_dim = 256;
  c.model.max_len = 32;
  c.model.nbest_max = c.synth.nbest_max;
  c.model.dropout = 0.1;
  c.model.rescore_mean_pool = true;
  c.model.variant = Variant::TRA;
  c.train.max_steps = 4000;
  c.train.eval_every = 200;
  c.train.batch_token_budget = 2000;
  c.train.warmup = 400;
  c.train.patience = 5;
  return c;
}

void ExperimentConfig::apply(const KeyValueConfig& kv) {
  KeyValueConfig s = synth.to_kv(), m = model.to_kv(), t = train.to_kv();
  for (const auto& [key, value] : kv.entries()) {
    auto strip = [&](const std::string& prefix) { return key.rfind(prefix, 0) == 0 ? key.substr(prefix.size()) : ""; };
    auto put = [&](KeyValueConfig& section, const std::string& sub) {
      if (!section.contains(sub)) throw ConfigError("unknown config key '" + key + "'");
      section.set(sub, value);
    };
    if (auto k = strip("synth."); !k.empty()) {
      put(s, k);
    } else if (auto k2 = strip("model."); !k2.empty()) {
      put(m, k2);
    } else if (auto k3 = strip("train."); !k3.empty()) {
      put(t, k3);
    } else if (key != "bpe_budget" && key != "train_tr" && key != "threshold_min" && key != "threshold_max" &&
               key != "threshold_step") {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  synth = desk::SynthConfig::from_kv(s);
  model = ModelConfig::from_kv(m, model);
  train = TrainConfig::from_kv(t);
  const auto budget = kv.get_int("bpe_budget", static_cast<std::int64_t>(bpe_budget));
  if (budget < 1) throw ConfigError("bpe_budget must be positive");
  bpe_budget = static_cast<std::size_t>(budget);
  train_tr = kv.get_bool("train_tr", train_tr);
  if (kv.contains("threshold_min") || kv.contains("threshold_max") || kv.contains("threshold_step")) {
    const double lo = kv.get_double("threshold_min", -3.0);
    const double hi = kv.get_double("threshold_max", 0.0);
    const double step = kv.get_double("threshold_step", 0.1);
    if (!(step > 0.0) || !(hi >= lo)) throw ConfigError("threshold grid needs min <= max and a positive step");
    threshold_grid.clear();
    const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
    for (std::size_t i = 0; i <= count; ++i) threshold_grid.push_back(lo + static_cast<double>(i) * step);
  }
}

KeyValueConfig ExperimentConfig::to_kv() const {
  KeyValueConfig kv;
  const KeyValueConfig s = synth.to_kv(), m = model.to_kv(), t = train.to_kv();
  for (const auto& [k, v] : s.entries()) kv.set("synth." + k, v);
  for (const auto& [k, v] : m.entries()) kv.set("model." + k, v);
  for (const auto& [k, v] : t.entries()) kv.set("train." + k, v);
  kv.set("bpe_budget", std::to_string(bpe_budget));
  kv.set("train_tr", train_tr ? "true" : "false");
  if (!threshold_grid.empty()) {
    kv.set("threshold_min", fmt::format("{}", threshold_grid.front()));
    kv.set("threshold_max", fmt::format("{}", threshold_grid.back()));
    if (threshold_grid.size() > 1)
      kv.set("threshold_step", fmt::format("{:.6g}", threshold_grid[1] - threshold_grid[0]));
  }
  return kv;
}

const WerRow& ExperimentReport::standalone_row(const std::string& name) const {
  for (const auto& r : standalone)
    if (r.system == name) return r;
  throw UsageError("no standalone row named " + name);
}

const WerRow& ExperimentReport::interpolated_row(const std::string& name) const {
  for (const auto& r : interpolated)
    if (r.system == name) return r;
  throw UsageError("no interpolated row named " + name);
}

WerRow wer_row(const std::string& system, std::span<const NBestRecord> records, std::span<const Words> outputs) {
  if (records.size() != outputs.size()) throw UsageError("wer_row: one output per record required");
  metrics::ErrorTally all, in, other;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto stats = metrics::edit_stats(outputs[i], records[i].reference);
    all.add(stats);
    (corpus::domain_of(records[i]) == desk::kInDomain ? in : other).add(stats);
  }
  return {system, all.rate(), in.rate(), other.rate()};
}

namespace {

std::vector<Words> selections(std::span<const interp::RecordSignals> signals, std::span<const double> w) {
  std::vector<Words> out;
  out.reserve(signals.size());
  for (const auto& r : signals) out.push_back(r.rows[interp::select(r, w)].text);
  return out;
}

std::string weights_text(std::span<const double> w) {
  return fmt::format("({:.4g}, {:.4g}, {:.4g}, {:.4g})", w[0], w[1], w[2], w[3]);
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, const std::function<void(const std::string&)>& progress) {
  ExperimentReport report;
  auto note = [&](std::string line) {
    if (progress) progress(line);
    report.log.push_back(std::move(line));
  };

  const desk::SynthCorpus data = desk::synthesize(cfg.synth);
  note(fmt::format("synth train={} dev={} eval={} vocab={} asr_eval_wer={:.4f} oracle_eval_wer={:.4f}",
                   data.train.size(), data.dev.size(), data.eval.size(), data.vocabulary.size(),
                   metrics::first_best_wer(data.eval), metrics::oracle_wer(data.eval)));

  const Vocabulary vocab = train_tokenizer(data.train, cfg.bpe_budget);
  ModelConfig model_cfg = cfg.model;
  model_cfg.vocab_size = vocab.size();
  model_cfg.nbest_max = std::max(model_cfg.nbest_max, cfg.synth.nbest_max);
  model_cfg.variant = Variant::TRA;
  note(fmt::format("tokenizer vocab={}", vocab.size()));

  const auto train_tok = tokenize_all(data.train, vocab);
  const auto dev_tok = tokenize_all(data.dev, vocab);

  TrainHooks hooks;
  hooks.on_log = [&](const std::string& line) { note("tra " + line); };
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult tra = train(model_cfg, train_tok, dev_tok, cfg.train, hooks);
  report.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.train_steps = tra.steps;
  note(fmt::format("tra trained steps={} best_step={} seconds={:.1f}", tra.steps, tra.best_step,
                   report.train_seconds));

  const auto dev_scored = score_records(tra.model, vocab, data.dev);
  const auto eval_scored = score_records(tra.model, vocab, data.eval);

  const auto dev_cases = threshold_cases(dev_scored);
  const auto dev_in_cases =
      filter_domain<interp::ThresholdCase>(dev_cases, desk::kInDomain, [](const auto& c) -> const NBestRecord& { return c.record; });
  report.thresholds = interp::grid_search_thresholds(dev_in_cases, dev_cases, cfg.threshold_grid);
  note(fmt::format("thresholds R={} W={} feasible={} dev_in={:.4f} dev_all={:.4f}", report.thresholds.threshold_r,
                   report.thresholds.threshold_w, report.thresholds.feasible, report.thresholds.in_domain_wer,
                   report.thresholds.all_domain_wer));

  std::vector<Words> asr_out, oracle_out, tra_r_out, tra_rw_out;
  for (const auto& s : eval_scored) {
    asr_out.push_back(s.record.hypotheses.front().words);
    oracle_out.push_back(s.record.hypotheses[metrics::oracle_index(s.record)].words);
    const auto c = threshold_case(s);
    tra_r_out.push_back(rewrite_decide(c.decode, c.decoded_text, c.scores, c.record, report.thresholds.threshold_r,
                                       kInf)
                            .text);
    tra_rw_out.push_back(rewrite_decide(c.decode, c.decoded_text, c.scores, c.record, report.thresholds.threshold_r,
                                        report.thresholds.threshold_w)
                             .text);
  }
  report.standalone.push_back(wer_row("ASR", data.eval, asr_out));

  // 4-gram rescorer on the training references.
  const ngram::BackoffModel lm = ngram::train_katz(reference_corpus(data.train));
  const auto ng_dev = ngram_signals(data.dev, lm);
  const auto ng_eval = ngram_signals(data.eval, lm);
  const auto ng_tune = interp::tune_weights(ng_dev, interp::asr_weights());
  report.w_ngram = ng_tune.w;
  report.ngram_dev_wer_initial = ng_tune.initial_wer;
  report.ngram_dev_wer_tuned = ng_tune.wer;
  note(fmt::format("4-gram weights {} dev {:.4f} -> {:.4f}", weights_text(ng_tune.w), ng_tune.initial_wer,
                   ng_tune.wer));

  report.interpolated.push_back(wer_row("ASR", data.eval, asr_out));
  report.interpolated.push_back(wer_row("4-gram+W*", data.eval, selections(ng_eval, ng_tune.w)));

  if (cfg.train_tr) {
    ModelConfig tr_cfg = model_cfg;
    tr_cfg.variant = Variant::TR;
    TrainHooks tr_hooks;
    tr_hooks.on_log = [&](const std::string& line) { note("tr " + line); };
    const TrainResult tr = train(tr_cfg, train_tok, dev_tok, cfg.train, tr_hooks);
    const auto tr_dev = score_records(tr.model, vocab, data.dev);
    const auto tr_eval = score_records(tr.model, vocab, data.eval);
    std::vector<Words> tr_out;
    for (const auto& s : tr_eval) tr_out.push_back(s.record.hypotheses[argmax_first(s.scores)].words);
    report.standalone.push_back(wer_row("TR", data.eval, tr_out));
    const auto tr_sig_dev = model_signals(tr_dev);
    const auto tr_tune = interp::tune_weights(tr_sig_dev, interp::asr_weights());
    report.w_tr = tr_tune.w;
    report.interpolated.push_back(wer_row("TR+W*", data.eval, selections(model_signals(tr_eval), tr_tune.w)));
  }

  report.standalone.push_back(wer_row("TRA-R", data.eval, tra_r_out));
  report.standalone.push_back(wer_row("TRA-RW", data.eval, tra_rw_out));
  report.standalone.push_back(wer_row("Oracle", data.eval, oracle_out));

  const auto tra_dev = model_signals(dev_scored);
  const auto tra_tune = interp::tune_weights(tra_dev, interp::asr_weights());
  report.w_tra_r = tra_tune.w;
  report.tra_r_dev_wer_initial = tra_tune.initial_wer;
  report.tra_r_dev_wer_tuned = tra_tune.wer;
  note(fmt::format("TRA-R weights {} dev {:.4f} -> {:.4f}", weights_text(tra_tune.w), tra_tune.initial_wer,
                   tra_tune.wer));
  report.interpolated.push_back(wer_row("TRA-R+W*", data.eval, selections(model_signals(eval_scored), tra_tune.w)));

  const auto rw_dev = rewrite_signals(dev_scored);
  const double m = rewrite_weight_scale(rw_dev);
  const auto rw_tune = interp::tune_weights(rw_dev, {1.0, 0.0, 0.0, m});
  report.w_tra_rw = rw_tune.w;
  note(fmt::format("TRA-RW weights {} dev {:.4f} -> {:.4f}", weights_text(rw_tune.w), rw_tune.initial_wer,
                   rw_tune.wer));
  report.interpolated.push_back(wer_row("TRA-RW+W*", data.eval, selections(rewrite_signals(eval_scored), rw_tune.w)));
  return report;
}

std::string format_table(const std::string& title, std::span<const WerRow> rows) {
  if (rows.empty()) return title + "\n(no rows)\n";
  const WerRow& base = rows.front();
  auto cell = [](double wer, double base_wer, bool is_base) {
    if (is_base || base_wer == 0.0) return fmt::format("{:6.2f}", 100.0 * wer);
    return fmt::format("{:6.2f} [{:+.1f}%]", 100.0 * wer, 100.0 * (base_wer - wer) / base_wer);
  };
  std::string out = fmt::format("{}\n{:<12} {:>18} {:>18} {:>18}\n", title, "system", "all", desk::kInDomain,
                                desk::kOtherDomain);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const bool is_base = i == 0;
    out += fmt::format("{:<12} {:>18} {:>18} {:>18}\n", r.system, cell(r.all, base.all, is_base),
                       cell(r.in_domain, base.in_domain, is_base), cell(r.other, base.other, is_base));
  }
  return out;
}

std::string format_tsv(const std::string& table_name, std::span<const WerRow> rows) {
  std::string out;
  if (rows.empty()) return out;
  const WerRow& base = rows.front();
  auto rel = [](double wer, double base_wer) {
    return base_wer == 0.0 ? std::string("nan") : fmt::format("{:.6f}", (base_wer - wer) / base_wer);
  };
  for (const auto& r : rows) {
    out += fmt::format("{}\t{}\tall\t{:.6f}\t{}\n", table_name, r.system, r.all, rel(r.all, base.all));
    out += fmt::format("{}\t{}\t{}\t{:.6f}\t{}\n", table_name, r.system, desk::kInDomain, r.in_domain,
                       rel(r.in_domain, base.in_domain));
    out += fmt::format("{}\t{}\t{}\t{:.6f}\t{}\n", table_name, r.system, desk::kOtherDomain, r.other,
                       rel(r.other, base.other));
  }
  return out;
}

}  // namespace nbrew::pipeline
