// nbrew: command-line driver for synthesizing N-best data, training the
// rescorers, scoring, weight/threshold tuning and WER reporting.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "nbrew/config.hpp"
#include "nbrew/corpus.hpp"
#include "nbrew/desk_domain.hpp"
#include "nbrew/error.hpp"
#include "nbrew/interpolate.hpp"
#include "nbrew/metrics.hpp"
#include "nbrew/model.hpp"
#include "nbrew/ngram.hpp"
#include "nbrew/pipeline.hpp"
#include "nbrew/tokenizer.hpp"
#include "nbrew/trainer.hpp"

namespace fs = std::filesystem;
using namespace nbrew;

namespace {

constexpr const char* kToolVersion = "nbrew 0.1.0";
constexpr double kInf = std::numeric_limits<double>::infinity();

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
  std::string out;
};

struct RunContext {
  KeyValueConfig kv;
  pipeline::ExperimentConfig cfg;
};

RunContext load_context(const Common& c) {
  RunContext ctx;
  if (!c.config_path.empty()) ctx.kv = KeyValueConfig::load(c.config_path);
  for (const auto& o : c.overrides) ctx.kv.set_override(o);
  if (c.seed >= 0) {
    // One root seed drives every random stream.
    ctx.kv.set("synth.seed", std::to_string(c.seed));
    ctx.kv.set("train.seed", std::to_string(c.seed));
  }
  ctx.cfg = pipeline::ExperimentConfig::desk_defaults();
  ctx.cfg.apply(ctx.kv);
  return ctx;
}

std::string file_digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return fnv1a_hex(buf.str());
}

// Written next to the outputs; lists what produced them.
void write_manifest(const fs::path& path, const std::string& command, const RunContext& ctx,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
  KeyValueConfig m;
  m.set("command", command);
  m.set("tool_version", kToolVersion);
  m.set("config_digest", ctx.cfg.to_kv().digest());
  m.set("seed.synth", std::to_string(ctx.cfg.synth.seed));
  m.set("seed.train", std::to_string(ctx.cfg.train.seed));
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    m.set(fmt::format("input.{}", i), inputs[i].string());
    if (fs::exists(inputs[i]) && fs::is_regular_file(inputs[i]))
      m.set(fmt::format("input.{}.digest", i), file_digest(inputs[i]));
  }
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    m.set(fmt::format("output.{}", i), outputs[i].filename().string());
    m.set(fmt::format("output.{}.digest", i), file_digest(outputs[i]));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << m.to_string();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

fs::path prepare_dir(const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  fs::create_directories(out);
  return fs::path(out);
}

void require_file(const std::string& path, const char* flag) {
  if (path.empty()) throw ConfigError(std::string(flag) + " is required");
  if (!fs::is_regular_file(path)) throw InputError(std::string(flag) + ": no such file " + path);
}

// ---------------------------------------------------------------------------

int cmd_synth(const Common& c) {
  const RunContext ctx = load_context(c);
  const fs::path dir = prepare_dir(c.out);
  const desk::SynthCorpus data = desk::synthesize(ctx.cfg.synth);
  corpus::write_jsonl(data.train, dir / "train.jsonl");
  corpus::write_jsonl(data.dev, dir / "dev.jsonl");
  corpus::write_jsonl(data.eval, dir / "eval.jsonl");
  ngram::export_arpa(data.firstpass_lm, dir / "firstpass.arpa");
  write_manifest(dir / "manifest.txt", "synth", ctx, {},
                 {dir / "train.jsonl", dir / "dev.jsonl", dir / "eval.jsonl", dir / "firstpass.arpa"});
  fmt::print("train={} dev={} eval={} vocab={} eval_1best_wer={:.4f} eval_oracle_wer={:.4f}\n", data.train.size(),
             data.dev.size(), data.eval.size(), data.vocabulary.size(), metrics::first_best_wer(data.eval),
             metrics::oracle_wer(data.eval));
  return 0;
}

int cmd_tokenize(const Common& c, const std::string& train_path) {
  require_file(train_path, "--train");
  const RunContext ctx = load_context(c);
  const fs::path dir = prepare_dir(c.out);
  const auto train = corpus::read_jsonl(train_path);
  const Vocabulary vocab = pipeline::train_tokenizer(train, ctx.cfg.bpe_budget);
  vocab.save(dir / "bpe.vocab");
  write_manifest(dir / "manifest.txt", "tokenize", ctx, {train_path}, {dir / "bpe.vocab"});
  fmt::print("vocab={} merges={}\n", vocab.size(), vocab.merges().size());
  return 0;
}

int cmd_train(const Common& c, const std::string& variant, const std::string& train_path, const std::string& dev_path,
              const std::string& vocab_path) {
  require_file(train_path, "--train");
  const RunContext ctx = load_context(c);
  const fs::path dir = prepare_dir(c.out);
  const auto train = corpus::read_jsonl(train_path);

  if (variant == "ngram") {
    const auto lm = ngram::train_katz(pipeline::reference_corpus(train));
    ngram::export_arpa(lm, dir / "lm.arpa");
    write_manifest(dir / "manifest.txt", "train", ctx, {train_path}, {dir / "lm.arpa"});
    fmt::print("4-gram entries: {} {} {} {}\n", lm.entries(0).size(), lm.entries(1).size(), lm.entries(2).size(),
               lm.entries(3).size());
    return 0;
  }
  require_file(dev_path, "--dev");
  require_file(vocab_path, "--vocab");
  const auto dev = corpus::read_jsonl(dev_path);
  const Vocabulary vocab = Vocabulary::load(vocab_path);
  ModelConfig model_cfg = ctx.cfg.model;
  model_cfg.variant = parse_variant(variant);
  model_cfg.vocab_size = vocab.size();
  const auto train_tok = pipeline::tokenize_all(train, vocab);
  const auto dev_tok = pipeline::tokenize_all(dev, vocab);

  std::ofstream log(dir / "train.log", std::ios::binary);
  TrainHooks hooks;
  hooks.on_log = [&](const std::string& line) {
    log << line << '\n';
    log.flush();
    fmt::print(stderr, "{}\n", line);
  };
  const TrainResult result = nbrew::train(model_cfg, train_tok, dev_tok, ctx.cfg.train, hooks);
  result.model.save(dir / "model.ckpt");
  log.close();
  write_manifest(dir / "manifest.txt", "train", ctx, {train_path, dev_path, vocab_path},
                 {dir / "model.ckpt", dir / "model.ckpt.config", dir / "train.log"});
  fmt::print("variant={} steps={} best_step={} best_dev={:.6f} skipped={}\n", variant, result.steps,
             result.best_step, result.best_dev, result.skipped);
  return 0;
}

int cmd_score(const Common& c, const std::string& input_path, const std::string& model_path,
              const std::string& vocab_path, const std::string& arpa_path) {
  require_file(input_path, "--input");
  const RunContext ctx = load_context(c);
  const fs::path dir = prepare_dir(c.out);
  const auto records = corpus::read_jsonl(input_path);
  if (!arpa_path.empty()) {
    require_file(arpa_path, "--arpa");
    const auto lm = ngram::import_arpa(arpa_path);
    interp::write_signals(pipeline::ngram_signals(records, lm), dir / "signals.jsonl");
    write_manifest(dir / "manifest.txt", "score", ctx, {input_path, arpa_path}, {dir / "signals.jsonl"});
    return 0;
  }
  require_file(model_path, "--model");
  require_file(vocab_path, "--vocab");
  const NBestTransformer model = NBestTransformer::load(model_path);
  const Vocabulary vocab = Vocabulary::load(vocab_path);
  const auto scored = pipeline::score_records(model, vocab, records);
  pipeline::write_scored(scored, dir / "scored.jsonl");
  interp::write_signals(pipeline::model_signals(scored), dir / "signals.jsonl");
  std::vector<fs::path> outputs = {dir / "scored.jsonl", dir / "signals.jsonl"};
  if (model.config().variant == Variant::TRA) {
    interp::write_signals(pipeline::rewrite_signals(scored), dir / "signals_rw.jsonl");
    outputs.push_back(dir / "signals_rw.jsonl");
  }
  write_manifest(dir / "manifest.txt", "score", ctx, {input_path, model_path, vocab_path}, outputs);
  return 0;
}

int cmd_tune(const Common& c, const std::string& signals_path, bool rewrite_start, const std::string& scored_path,
             const std::string& records_path) {
  const RunContext ctx = load_context(c);
  const fs::path dir = prepare_dir(c.out);
  if (!scored_path.empty()) {
    require_file(scored_path, "--scored");
    require_file(records_path, "--records");
    const auto records = corpus::read_jsonl(records_path);
    const auto cases = pipeline::threshold_cases(pipeline::read_scored(scored_path, records));
    const auto in_domain = pipeline::filter_domain<interp::ThresholdCase>(
        cases, desk::kInDomain, [](const auto& x) -> const NBestRecord& { return x.record; });
    if (in_domain.empty()) throw InputError("dev records contain no in-domain (" + desk::kInDomain + ") queries");
    const auto t = interp::grid_search_thresholds(in_domain, cases, ctx.cfg.threshold_grid);
    KeyValueConfig kv;
    kv.set("threshold_r", fmt::format("{}", t.threshold_r));
    kv.set("threshold_w", fmt::format("{}", t.threshold_w));
    kv.set("feasible", t.feasible ? "true" : "false");
    kv.set("dev_in_domain_wer", fmt::format("{:.6f}", t.in_domain_wer));
    kv.set("dev_all_domain_wer", fmt::format("{:.6f}", t.all_domain_wer));
    write_text(dir / "thresholds.txt", kv.to_string());
    write_manifest(dir / "manifest.txt", "tune", ctx, {scored_path, records_path}, {dir / "thresholds.txt"});
    fmt::print("threshold_r={} threshold_w={} feasible={}\n", t.threshold_r, t.threshold_w, t.feasible);
    return 0;
  }
  require_file(signals_path, "--signals");
  const auto dev = interp::read_signals(signals_path);
  interp::WeightVector w0 = interp::asr_weights();
  if (rewrite_start) w0 = {1.0, 0.0, 0.0, pipeline::rewrite_weight_scale(dev)};
  const auto tuned = interp::tune_weights(dev, w0);
  write_text(dir / "weights.txt", interp::weights_to_kv(tuned.w).to_string());
  write_manifest(dir / "manifest.txt", "tune", ctx, {signals_path}, {dir / "weights.txt"});
  fmt::print("dev_wer {:.6f} -> {:.6f} evaluations={}\n", tuned.initial_wer, tuned.wer, tuned.powell.evaluations);
  return 0;
}

struct EvalInputs {
  std::string records;
  std::string ngram_signals, ngram_weights;
  std::string tr_signals, tr_weights;
  std::string tra_scored, thresholds;
  std::string tra_signals, tra_weights;
  std::string tra_rw_signals, tra_rw_weights;
};

std::vector<Words> select_all(const std::vector<interp::RecordSignals>& signals, const interp::WeightVector& w,
                              const std::vector<NBestRecord>& records) {
  if (signals.size() != records.size()) throw InputError("signals file and records file differ in length");
  std::vector<Words> out;
  for (std::size_t i = 0; i < signals.size(); ++i) {
    if (signals[i].query_id != records[i].query_id)
      throw InputError("signals file is not aligned with the records file at " + records[i].query_id);
    out.push_back(signals[i].rows[interp::select(signals[i], w)].text);
  }
  return out;
}

int cmd_eval(const Common& c, const EvalInputs& in) {
  require_file(in.records, "--records");
  const RunContext ctx = load_context(c);
  const fs::path dir = prepare_dir(c.out);
  const auto records = corpus::read_jsonl(in.records);
  std::vector<fs::path> inputs = {in.records};

  std::vector<Words> asr, oracle;
  for (const auto& r : records) {
    asr.push_back(r.hypotheses.front().words);
    oracle.push_back(r.hypotheses[metrics::oracle_index(r)].words);
  }
  std::vector<pipeline::WerRow> standalone = {pipeline::wer_row("ASR", records, asr)};
  std::vector<pipeline::WerRow> interpolated = {pipeline::wer_row("ASR", records, asr)};

  auto weighted = [&](const std::string& name, const std::string& sig, const std::string& wts) {
    if (sig.empty() && wts.empty()) return;
    require_file(sig, ("signals for " + name).c_str());
    require_file(wts, ("weights for " + name).c_str());
    inputs.push_back(sig);
    inputs.push_back(wts);
    const auto w = interp::weights_from_kv(KeyValueConfig::load(wts));
    interpolated.push_back(pipeline::wer_row(name, records, select_all(interp::read_signals(sig), w, records)));
  };
  weighted("4-gram+W*", in.ngram_signals, in.ngram_weights);

  if (!in.tr_signals.empty()) {
    require_file(in.tr_signals, "--tr-signals");
    const auto sig = interp::read_signals(in.tr_signals);
    standalone.push_back(pipeline::wer_row("TR", records, select_all(sig, {0.0, 0.0, 1.0, 0.0}, records)));
  }
  weighted("TR+W*", in.tr_signals, in.tr_weights);

  if (!in.tra_scored.empty()) {
    require_file(in.tra_scored, "--tra-scored");
    double r = kInf, w = kInf;
    if (!in.thresholds.empty()) {
      require_file(in.thresholds, "--thresholds");
      const auto kv = KeyValueConfig::load(in.thresholds);
      r = kv.get_double("threshold_r", kInf);
      w = kv.get_double("threshold_w", kInf);
      inputs.push_back(in.thresholds);
    }
    inputs.push_back(in.tra_scored);
    const auto scored = pipeline::read_scored(in.tra_scored, records);
    std::vector<Words> tra_r, tra_rw;
    for (const auto& s : scored) {
      const auto tc = pipeline::threshold_case(s);
      tra_r.push_back(rewrite_decide(tc.decode, tc.decoded_text, tc.scores, tc.record, r, kInf).text);
      tra_rw.push_back(rewrite_decide(tc.decode, tc.decoded_text, tc.scores, tc.record, r, w).text);
    }
    std::vector<NBestRecord> ordered;
    for (const auto& s : scored) ordered.push_back(s.record);
    standalone.push_back(pipeline::wer_row("TRA-R", ordered, tra_r));
    standalone.push_back(pipeline::wer_row("TRA-RW", ordered, tra_rw));
  }
  standalone.push_back(pipeline::wer_row("Oracle", records, oracle));
  weighted("TRA-R+W*", in.tra_signals, in.tra_weights);
  weighted("TRA-RW+W*", in.tra_rw_signals, in.tra_rw_weights);

  const std::string text = pipeline::format_table("Standalone WER (%) [relative change vs ASR]", standalone) + "\n" +
                           pipeline::format_table("Interpolated WER (%) [relative change vs ASR]", interpolated);
  fmt::print("{}", text);
  write_text(dir / "eval.txt", text);
  write_text(dir / "eval.tsv", "table\tsystem\tslice\twer\trel_change\n" +
                                   pipeline::format_tsv("standalone", standalone) +
                                   pipeline::format_tsv("interpolated", interpolated));
  write_manifest(dir / "manifest.txt", "eval", ctx, inputs, {dir / "eval.txt", dir / "eval.tsv"});
  return 0;
}

int cmd_run(const Common& c) {
  const RunContext ctx = load_context(c);
  const fs::path dir = prepare_dir(c.out);
  const auto report = pipeline::run_experiment(ctx.cfg, [](const std::string& line) { fmt::print(stderr, "{}\n", line); });
  const std::string text =
      pipeline::format_table("Standalone WER (%) [relative change vs ASR]", report.standalone) + "\n" +
      pipeline::format_table("Interpolated WER (%) [relative change vs ASR]", report.interpolated);
  fmt::print("{}", text);
  write_text(dir / "eval.txt", text);
  write_text(dir / "eval.tsv", "table\tsystem\tslice\twer\trel_change\n" +
                                   pipeline::format_tsv("standalone", report.standalone) +
                                   pipeline::format_tsv("interpolated", report.interpolated));
  std::string log;
  for (const auto& l : report.log) log += l + "\n";
  write_text(dir / "run.log", log);
  write_manifest(dir / "manifest.txt", "run", ctx, {}, {dir / "eval.txt", dir / "eval.tsv", dir / "run.log"});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"N-best rescoring and rewriting toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "key=value config file");
    sub->add_option("--set", common.overrides, "override a config key (key=value)")->take_all();
    sub->add_option("--seed", common.seed, "root seed for every random stream");
    sub->add_option("--out", common.out, "output directory")->required();
  };

  auto* synth = app.add_subcommand("synth", "synthesize train/dev/eval N-best records");
  add_common(synth);

  std::string train_path, dev_path, vocab_path, variant = "tra", input_path, model_path, arpa_path;
  auto* tokenize = app.add_subcommand("tokenize", "learn the BPE vocabulary");
  add_common(tokenize);
  tokenize->add_option("--train", train_path, "training records (JSONL)")->required();

  auto* train = app.add_subcommand("train", "train a rescorer");
  add_common(train);
  train->add_option("--variant", variant, "tra, tr or ngram")->check(CLI::IsMember({"tra", "tr", "ngram"}));
  train->add_option("--train", train_path, "training records (JSONL)")->required();
  train->add_option("--dev", dev_path, "dev records (JSONL)");
  train->add_option("--vocab", vocab_path, "BPE vocabulary");

  auto* score = app.add_subcommand("score", "score records with a trained rescorer");
  add_common(score);
  score->add_option("--input", input_path, "records to score (JSONL)")->required();
  score->add_option("--model", model_path, "model checkpoint (tra/tr)");
  score->add_option("--vocab", vocab_path, "BPE vocabulary (tra/tr)");
  score->add_option("--arpa", arpa_path, "4-gram ARPA file (instead of a model)");

  std::string signals_path, scored_path, records_path;
  bool rewrite_start = false;
  auto* tune = app.add_subcommand("tune", "tune interpolation weights or rescore/rewrite thresholds");
  add_common(tune);
  tune->add_option("--signals", signals_path, "dev signals (JSONL) for weight tuning");
  tune->add_flag("--rewrite-start", rewrite_start, "start from (1,0,0,M) for signals with rewrite rows");
  tune->add_option("--scored", scored_path, "TRA dev outputs (JSONL) for threshold search");
  tune->add_option("--records", records_path, "dev records matching --scored");

  EvalInputs ev;
  auto* eval = app.add_subcommand("eval", "print standalone and interpolated WER tables");
  add_common(eval);
  eval->add_option("--records", ev.records, "eval records (JSONL)")->required();
  eval->add_option("--ngram-signals", ev.ngram_signals);
  eval->add_option("--ngram-weights", ev.ngram_weights);
  eval->add_option("--tr-signals", ev.tr_signals);
  eval->add_option("--tr-weights", ev.tr_weights);
  eval->add_option("--tra-scored", ev.tra_scored);
  eval->add_option("--thresholds", ev.thresholds);
  eval->add_option("--tra-signals", ev.tra_signals);
  eval->add_option("--tra-weights", ev.tra_weights);
  eval->add_option("--tra-rw-signals", ev.tra_rw_signals);
  eval->add_option("--tra-rw-weights", ev.tra_rw_weights);

  auto* run = app.add_subcommand("run", "whole desk experiment in one process");
  add_common(run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(common);
    if (tokenize->parsed()) return cmd_tokenize(common, train_path);
    if (train->parsed()) return cmd_train(common, variant, train_path, dev_path, vocab_path);
    if (score->parsed()) return cmd_score(common, input_path, model_path, vocab_path, arpa_path);
    if (tune->parsed()) return cmd_tune(common, signals_path, rewrite_start, scored_path, records_path);
    if (eval->parsed()) return cmd_eval(common, ev);
    if (run->parsed()) return cmd_run(common);
  } catch (const ParseError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  } catch (const ConfigError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  } catch (const InputError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    fmt::print(stderr, "internal error: {}\n", e.what());
    return 2;
  }
  return 2;
}
