#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "doctest.h"
#include "model_fixtures.hpp"
#include "nbrew/error.hpp"
#include "nbrew/trainer.hpp"

using namespace nbrew;

namespace {

std::vector<TokenizedRecord> random_corpus(std::uint64_t seed, std::size_t count, std::size_t max_total) {
  std::mt19937_64 rng(seed);
  std::vector<TokenizedRecord> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(fixture::random_record(rng, 1 + rng() % 5, max_total, 20));
  return out;
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.max_steps = 40;
  cfg.eval_every = 10;
  cfg.batch_token_budget = 120;
  cfg.warmup = 10;
  cfg.patience = 100;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config validation") {
  auto cfg = quick_config();
  cfg.validate();
  cfg.eval_every = 41;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config();
  cfg.aux_weight = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(TrainConfig::from_kv(quick_config().to_kv()).to_kv().to_string() == quick_config().to_kv().to_string());
}

TEST_CASE("record supervision") {
  const auto vocab = tokenizer::train_bpe(std::vector<Words>{split_words("call mom now"), split_words("call tom")}, 30);
  NBestRecord r;
  r.query_id = "assistant-1";
  r.reference = split_words("call mom now");
  r.hypotheses = {{split_words("call tom now"), -1.0, 0.0}, {split_words("call mom now"), -2.0, 0.0},
                  {split_words("x y z w v u"), -3.0, 0.0}};
  const auto t = tokenize_record(r, vocab);
  CHECK(t.n() == 3);
  CHECK(t.similarity[0] == doctest::Approx(4.0 / 9.0));
  CHECK(t.similarity[1] == 1.0);
  CHECK(t.similarity[2] == 0.0);
  CHECK(t.word_errors == std::vector<double>{1.0, 0.0, 6.0});
  CHECK(t.target == tokenizer::encode(r.reference, vocab));
}

TEST_CASE("batches are N-homogeneous and within budget") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto records = random_corpus(seed, 60, 10);
    const std::size_t budget = 40 + seed * 7;
    const auto plan = make_batches(records, budget, seed);
    std::multiset<std::size_t> seen;
    for (const auto& b : plan.batches) {
      REQUIRE_FALSE(b.indices.empty());
      std::size_t targets = 0, pad = 0;
      for (auto i : b.indices) {
        CHECK(records[i].n() == b.n);
        targets += records[i].target.size();
        pad = std::max(pad, records[i].max_hyp_len());
        seen.insert(i);
      }
      CHECK(pad == b.pad_len);
      CHECK(b.indices.size() * b.n * b.pad_len + targets <= budget);
    }
    std::size_t over = 0;
    for (const auto& r : records) over += record_tokens(r, r.max_hyp_len()) > budget;
    CHECK(plan.skipped == over);
    CHECK(seen.size() == records.size() - plan.skipped);
    CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == seen.size());

    const auto again = make_batches(records, budget, seed);
    REQUIRE(again.batches.size() == plan.batches.size());
    for (std::size_t k = 0; k < plan.batches.size(); ++k) CHECK(again.batches[k].indices == plan.batches[k].indices);
  }
}

TEST_CASE("training is reproducible and keeps the best checkpoint") {
  const auto train_set = random_corpus(1, 40, 7);
  const auto dev_set = random_corpus(2, 10, 7);
  for (auto variant : {Variant::TRA, Variant::TR}) {
    const auto cfg = fixture::tiny_config(variant);
    const auto a = train(cfg, train_set, dev_set, quick_config());
    const auto b = train(cfg, train_set, dev_set, quick_config());
    CHECK(a.log == b.log);
    CHECK(a.steps == 40);
    REQUIRE(a.log.size() == 4);
    CHECK(a.log[0].rfind("step=10 lr=", 0) == 0);

    double lowest = std::numeric_limits<double>::infinity();
    for (const auto& line : a.log) lowest = std::min(lowest, std::stod(line.substr(line.find("dev=") + 4)));
    CHECK(a.best_dev == doctest::Approx(lowest).epsilon(1e-6));
    CHECK(dev_loss(a.model, dev_set, 0.01) == doctest::Approx(a.best_dev).epsilon(1e-12));
  }
}

TEST_CASE("early stopping on a worsening dev metric") {
  const auto train_set = random_corpus(3, 30, 7);
  auto cfg = quick_config();
  cfg.max_steps = 200;
  cfg.eval_every = 5;
  cfg.patience = 3;
  TrainHooks hooks;
  std::vector<std::int64_t> evaluated;
  hooks.dev_metric = [&](const NBestTransformer&, std::int64_t step) {
    evaluated.push_back(step);
    return static_cast<double>(step);  // worse every round
  };
  const auto r = train(fixture::tiny_config(Variant::TRA), train_set, {}, cfg, hooks);
  CHECK(r.early_stopped);
  CHECK(r.best_step == 5);
  CHECK(r.steps == 20);
  CHECK(evaluated == std::vector<std::int64_t>{5, 10, 15, 20});
  CHECK(r.log.back().rfind("early_stop step=20 best_step=5", 0) == 0);
}

TEST_CASE("overfits a small corpus") {
  // Copy task: the target is the first hypothesis.
  std::mt19937_64 rng(4);
  std::vector<TokenizedRecord> records;
  for (int i = 0; i < 50; ++i) {
    auto r = fixture::random_record(rng, 1 + rng() % 3, 6, 20);
    r.target = r.hypotheses[0];
    records.push_back(std::move(r));
  }
  auto mcfg = fixture::tiny_config(Variant::TRA);
  mcfg.d_model = 32;
  mcfg.ff_dim = 64;
  auto cfg = quick_config();
  cfg.max_steps = 1500;
  cfg.eval_every = 100;
  cfg.warmup = 50;
  cfg.lr_scale = 1.0;
  cfg.aux_weight = 1.0;  // equal footing for the token loss
  cfg.batch_token_budget = 200;
  auto mean_ce = [&](const NBestTransformer& m) {
    NoGradGuard guard;
    double ce = 0.0;
    for (const auto& r : records) ce += record_loss(m, r, r.max_hyp_len(), 0.01).ce.item();
    return ce / static_cast<double>(records.size());
  };
  TrainHooks hooks;
  hooks.dev_metric = [&](const NBestTransformer& m, std::int64_t) { return mean_ce(m); };
  const auto result = train(mcfg, records, records, cfg, hooks);
  CHECK(mean_ce(result.model) < 0.1);
}

TEST_CASE("divergence aborts") {
  const auto train_set = random_corpus(5, 10, 6);
  auto cfg = quick_config();
  cfg.lr_scale = 1e300;
  cfg.clip_norm = 1e300;
  CHECK_THROWS_AS(train(fixture::tiny_config(Variant::TR), train_set, train_set, cfg), TrainingDiverged);
}

TEST_CASE("input errors") {
  auto cfg = quick_config();
  CHECK_THROWS_AS(train(fixture::tiny_config(Variant::TRA), {}, random_corpus(1, 3, 6), cfg), InputError);
  cfg.batch_token_budget = 3;
  CHECK_THROWS_AS(train(fixture::tiny_config(Variant::TRA), random_corpus(1, 5, 6), random_corpus(1, 3, 6), cfg),
                  InputError);
}

}  // TEST_SUITE
