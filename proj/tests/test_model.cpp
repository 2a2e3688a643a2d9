#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>

#include "doctest.h"
#include "model_fixtures.hpp"
#include "nbrew/error.hpp"
#include "nbrew/model.hpp"
#include "oracles.hpp"

using namespace nbrew;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> as_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

NBestRecord text_record(std::vector<std::string> hyps, std::string ref = "call mom") {
  NBestRecord r;
  r.query_id = "music-1";
  r.reference = split_words(ref);
  double am = 0.0;
  for (auto& h : hyps) r.hypotheses.push_back({split_words(h), am -= 1.0, 0.0});
  return r;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation and round trip") {
  auto cfg = fixture::tiny_config(Variant::TRA);
  cfg.validate();
  const auto back = ModelConfig::from_kv(cfg.to_kv());
  CHECK(back.to_kv().to_string() == cfg.to_kv().to_string());
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(parse_variant("lstm"), ConfigError);
  CHECK(parse_variant("tr") == Variant::TR);
}

TEST_CASE("context aggregation") {
  std::mt19937_64 rng(1);
  std::vector<Tensor> single{normal_init(4, 8, 1.0, rng)};
  const std::vector<std::size_t> len1{3};
  const auto one = aggregate_context(single, len1);
  CHECK(as_vector(one.stacked) == as_vector(single[0]));
  CHECK(one.pad_mask == std::vector<std::uint8_t>{0, 0, 0, 1});

  std::vector<Tensor> three{normal_init(4, 8, 1.0, rng), normal_init(4, 8, 1.0, rng), normal_init(4, 8, 1.0, rng)};
  const std::vector<std::size_t> lens{4, 2, 3};
  const auto agg = aggregate_context(three, lens);
  CHECK(agg.stacked.rows() == 12);
  CHECK(agg.stacked.cols() == 8);
  for (std::size_t k = 0; k < 12; ++k) {
    for (std::size_t c = 0; c < 8; ++c) CHECK(agg.stacked(k, c) == three[k / 4](k % 4, c));
    CHECK(agg.pad_mask[k] == (k % 4 >= lens[k / 4] ? 1 : 0));
  }
  std::vector<Tensor> uneven{normal_init(4, 8, 1.0, rng), normal_init(3, 8, 1.0, rng)};
  const std::vector<std::size_t> lens2{4, 3};
  CHECK_THROWS_AS(aggregate_context(uneven, lens2), UsageError);
}

TEST_CASE("encoder shape and pad isolation") {
  std::mt19937_64 rng(2);
  NBestTransformer model(fixture::tiny_config(Variant::TRA), 3);
  const auto rec = fixture::random_record(rng, 3, 7, 20);
  const auto input = pad_nbest(rec.hypotheses, 7);
  const auto enc = model.encode(input);
  CHECK(enc.states.rows() == 21);
  CHECK(enc.states.cols() == 16);
  CHECK(as_vector(model.encode(input).states) == as_vector(enc.states));

  // Rewrite the pad embedding row: only pad rows of the output may move.
  auto perturbed = model;
  perturbed.params() = model.params().deep_copy();
  auto table = perturbed.params().embedding.mutable_values();
  for (std::size_t c = 0; c < 16; ++c) table[static_cast<std::size_t>(Vocabulary::kPad) * 16 + c] += 5.0;
  const auto enc2 = perturbed.encode(input);
  bool pad_moved = false;
  for (std::size_t k = 0; k < 21; ++k) {
    for (std::size_t c = 0; c < 16; ++c) {
      if (enc.pad_mask[k]) {
        pad_moved = pad_moved || enc2.states(k, c) != enc.states(k, c);
      } else {
        CHECK(enc2.states(k, c) == enc.states(k, c));
      }
    }
  }
  CHECK(pad_moved);

  std::vector<std::vector<int>> too_long{fixture::random_sequence(rng, 12, 20)};
  CHECK_THROWS_AS(model.encode(pad_nbest(too_long)), InputError);
}

TEST_CASE("teacher forcing") {
  std::mt19937_64 rng(4);
  NBestTransformer model(fixture::tiny_config(Variant::TRA), 5);
  const auto rec = fixture::random_record(rng, 3, 6, 20);
  const auto enc = model.encode(pad_nbest(rec.hypotheses));
  const auto logps = model.teacher_force_logps(enc, rec.target);
  CHECK(logps.rows() == rec.target.size() - 1);

  const std::span<const int> input(rec.target.data(), rec.target.size() - 1);
  const auto full = model.decoder_log_probs(enc, input);
  for (std::size_t r = 0; r < full.rows(); ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < full.cols(); ++c) z += std::exp(full(r, c));
    CHECK(std::abs(z - 1.0) < 1e-9);
  }

  // Causality: changing target token t leaves log-probs of positions <= t alone.
  for (std::size_t t = 1; t + 1 < rec.target.size(); ++t) {
    auto changed = rec.target;
    changed[t] = changed[t] == 5 ? 6 : 5;
    const auto other = model.teacher_force_logps(enc, changed);
    for (std::size_t p = 0; p + 1 < t; ++p) CHECK(other(p, 0) == logps(p, 0));
    const auto other_full = model.decoder_log_probs(enc, std::span<const int>(changed.data(), changed.size() - 1));
    for (std::size_t p = 0; p < t; ++p)
      for (std::size_t c = 0; c < 20; ++c) CHECK(other_full(p, c) == full(p, c));
  }

  std::vector<int> no_bos(rec.target.begin() + 1, rec.target.end());
  CHECK_THROWS_AS(model.teacher_force_logps(enc, no_bos), InputError);
  CHECK_THROWS_AS(model.teacher_force_logps(enc, fixture::random_sequence(rng, 12, 20)), InputError);
}

TEST_CASE("greedy decoding") {
  std::mt19937_64 rng(6);
  NBestTransformer model(fixture::tiny_config(Variant::TRA), 7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto rec = fixture::random_record(rng, 1 + trial % 4, 8, 20);
    const auto enc = model.encode(pad_nbest(rec.hypotheses));
    const auto d = model.decode_greedy(enc);
    REQUIRE(d.tokens.size() == d.token_logps.size());
    CHECK(d.tokens.size() + 1 <= model.config().max_len);
    double sum = 0.0;
    for (double lp : d.token_logps) {
      CHECK(std::isfinite(lp));
      CHECK(lp <= 0.0);
      sum += lp;
    }
    CHECK(d.mean_logp == doctest::Approx(sum / static_cast<double>(d.token_logps.size())));

    // Feeding the decode back reproduces its log-probs.
    std::vector<int> target{Vocabulary::kBos};
    target.insert(target.end(), d.tokens.begin(), d.tokens.end());
    if (target.back() != Vocabulary::kEos) continue;
    const auto tf = model.teacher_force_logps(enc, target);
    for (std::size_t i = 0; i < d.token_logps.size(); ++i) CHECK(tf(i, 0) == doctest::Approx(d.token_logps[i]).epsilon(1e-12));
  }
}

TEST_CASE("decoding stops at max_len when eos never wins") {
  auto cfg = fixture::tiny_config(Variant::TR);
  cfg.vocab_size = 5;  // one non-reserved symbol
  cfg.max_len = 6;
  NBestTransformer model(cfg, 1);
  // Make eos unreachable.
  model.params().out_b.mutable_values()[Vocabulary::kEos] = -1e6;
  const std::vector<std::vector<int>> hyps{{Vocabulary::kBos, 4, Vocabulary::kEos}};
  const auto d = model.decode_greedy(model.encode(pad_nbest(hyps)));
  CHECK(d.tokens.size() == cfg.max_len - 1);
  CHECK(d.tokens.back() != Vocabulary::kEos);
}

TEST_CASE("TR probabilities") {
  std::mt19937_64 rng(8);
  NBestTransformer model(fixture::tiny_config(Variant::TR), 9);
  {
    const std::vector<std::vector<int>> one{fixture::random_sequence(rng, 3, 20)};
    const auto input = pad_nbest(one);
    CHECK(model.score_nbest_tr(model.encode(input), input).item() == doctest::Approx(1.0).epsilon(1e-15));
  }
  {
    const auto h = fixture::random_sequence(rng, 4, 20);
    const std::vector<std::vector<int>> same{h, h, h, h};
    const auto input = pad_nbest(same);
    const auto probs = model.score_nbest_tr(model.encode(input), input);
    for (double p : probs.values()) CHECK(p == doctest::Approx(0.25));
  }
  for (int trial = 0; trial < 30; ++trial) {
    const auto rec = fixture::random_record(rng, 1 + trial % 5, 9, 20);
    const auto input = pad_nbest(rec.hypotheses);
    const auto p = model.score_nbest_tr(model.encode(input), input);
    const double total = std::accumulate(p.values().begin(), p.values().end(), 0.0);
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("rescore attention range and equivariance") {
  std::mt19937_64 rng(10);
  NBestTransformer model(fixture::tiny_config(Variant::TRA), 11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto rec = fixture::random_record(rng, 2 + trial % 4, 8, 20);
    const auto ht = model.target_states(std::span<const int>(rec.target).subspan(1));
    const auto s = model.rescore_attention(model.encode(pad_nbest(rec.hypotheses, 8)), ht);
    REQUIRE(s.cols() == rec.n());
    for (double v : s.values()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
    std::vector<std::size_t> perm(rec.n());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<int>> shuffled;
    for (auto i : perm) shuffled.push_back(rec.hypotheses[i]);
    const auto s2 = model.rescore_attention(model.encode(pad_nbest(shuffled, 8)), ht);
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(std::abs(s2.values()[i] - s.values()[perm[i]]) <= 1e-12);

    // Argmax is unchanged by a strictly monotone map of the logits.
    const auto logits = as_vector(model.rescore_logits(model.encode(pad_nbest(rec.hypotheses, 8)), ht));
    std::vector<double> mapped;
    for (double x : logits) mapped.push_back(std::cbrt(x) * 3.0 - 7.0);
    CHECK(argmax_first(mapped) == argmax_first(as_vector(s)));
  }
  NBestTransformer tr(fixture::tiny_config(Variant::TR), 11);
  const auto rec = fixture::random_record(rng, 2, 6, 20);
  CHECK_THROWS_AS(tr.rescore_attention(tr.encode(pad_nbest(rec.hypotheses)), tr.target_states(rec.target)), UsageError);
}

TEST_CASE("model gradients match central differences") {
  std::mt19937_64 rng(12);
  for (auto variant : {Variant::TRA, Variant::TR}) {
    auto cfg = fixture::tiny_config(variant);
    cfg.d_model = 8;
    cfg.ff_dim = 8;
    cfg.enc_layers = 1;
    cfg.vocab_size = 10;
    NBestTransformer model(cfg, 13);
    const auto rec = fixture::random_record(rng, 3, 5, 10);
    const auto r = oracle::check_gradients(
        [&] { return record_loss(model, rec, 5, 0.01).combined; }, model.params().named());
    CAPTURE(to_string(variant));
    CAPTURE(r.worst_name);
    CHECK(r.worst_rel_error < 1e-4);
  }
}

TEST_CASE("rewrite decisions") {
  const auto rec = text_record({"call tom", "call mom", "tall mom"});
  DecodeResult d;
  const Words decoded = split_words("call mom please");
  RescoreOutput scores{{0.2, 0.9, 0.4}};

  d.mean_logp = -0.3;
  auto r = rewrite_decide(d, decoded, scores, rec, -1.0, -0.5);
  CHECK(r.action == RewriteAction::Rewrite);
  CHECK(r.text == decoded);

  d.mean_logp = -0.7;
  r = rewrite_decide(d, decoded, scores, rec, -1.0, -0.5);
  CHECK(r.action == RewriteAction::Rescore);
  CHECK(r.chosen_index == 1);
  CHECK(r.text == split_words("call mom"));

  d.mean_logp = -1.2;
  r = rewrite_decide(d, decoded, scores, rec, -1.0, -0.5);
  CHECK(r.action == RewriteAction::KeepAsr);
  CHECK(r.text == split_words("call tom"));

  d.mean_logp = -1.0;  // at the threshold: keep
  CHECK(rewrite_decide(d, decoded, scores, rec, -1.0, -0.5).action == RewriteAction::KeepAsr);

  const auto single = text_record({"call tom"});
  d.mean_logp = -0.1;
  r = rewrite_decide(d, decoded, RescoreOutput{{0.5}}, single, -1.0, -0.5);
  CHECK(r.action != RewriteAction::Rewrite);
  CHECK(r.text == split_words("call tom"));

  // R = +inf is the ASR system; W = +inf never rewrites.
  for (double m : {-5.0, -0.5, 0.0}) {
    d.mean_logp = m;
    CHECK(rewrite_decide(d, decoded, scores, rec, kInf, kInf).text == split_words("call tom"));
    CHECK(rewrite_decide(d, decoded, scores, rec, -10.0, kInf).action != RewriteAction::Rewrite);
  }

  // Score ties go to the better ASR rank.
  d.mean_logp = -0.7;
  CHECK(rewrite_decide(d, decoded, RescoreOutput{{0.5, 0.9, 0.9}}, rec, -1.0, -0.5).chosen_index == 1);

  CHECK_THROWS_AS(rewrite_decide(d, decoded, scores, rec, -0.5, -1.0), UsageError);
  CHECK_THROWS_AS(rewrite_decide(d, decoded, scores, rec, -0.5, -0.5), UsageError);
  CHECK_THROWS_AS(rewrite_decide(d, decoded, RescoreOutput{{0.1}}, rec, -1.0, -0.5), UsageError);
}

TEST_CASE("save and load") {
  const auto dir = std::filesystem::temp_directory_path() / "nbrew_tests";
  std::filesystem::create_directories(dir);
  NBestTransformer model(fixture::tiny_config(Variant::TRA), 14);
  model.save(dir / "tiny.ckpt");
  const auto back = NBestTransformer::load(dir / "tiny.ckpt");
  CHECK(back.config().to_kv().to_string() == model.config().to_kv().to_string());
  const auto a = model.params().named();
  const auto b = back.params().named();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(as_vector(a[i].tensor) == as_vector(b[i].tensor));
  }
  const auto names = [&] {
    std::vector<std::string> n;
    for (const auto& t : a) n.push_back(t.name);
    return n;
  }();
  CHECK(std::find(names.begin(), names.end(), "rescore.query") != names.end());
  CHECK(std::find(names.begin(), names.end(), "rescore.key") != names.end());
  CHECK(std::find(names.begin(), names.end(), "rescore.value") != names.end());
}

}  // TEST_SUITE
