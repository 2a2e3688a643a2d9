#include "nbrew/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <fmt/format.h>

#include "nbrew/error.hpp"
#include "nbrew/tokenizer.hpp"

namespace nbrew {

using namespace ops;

namespace {

constexpr double kMaskValue = -1e9;

}  // namespace

std::string to_string(Variant v) { return v == Variant::TR ? "tr" : "tra"; }

Variant parse_variant(const std::string& s) {
  if (s == "tr" || s == "TR") return Variant::TR;
  if (s == "tra" || s == "TRA") return Variant::TRA;
  throw ConfigError("unknown model variant '" + s + "' (expected tr or tra)");
}

void ModelConfig::validate() const {
  if (enc_layers < 1 || dec_layers < 1 || heads < 1 || d_model < 1 || ff_dim < 1 || vocab_size < 1 ||
      max_len < 1 || nbest_max < 1)
    throw ConfigError("model dimensions must all be at least 1");
  if (d_model % heads != 0)
    throw ConfigError(fmt::format("d_model {} is not divisible by heads {}", d_model, heads));
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

KeyValueConfig ModelConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("enc_layers", std::to_string(enc_layers));
  kv.set("dec_layers", std::to_string(dec_layers));
  kv.set("heads", std::to_string(heads));
  kv.set("d_model", std::to_string(d_model));
  kv.set("ff_dim", std::to_string(ff_dim));
  kv.set("vocab_size", std::to_string(vocab_size));
  kv.set("max_len", std::to_string(max_len));
  kv.set("nbest_max", std::to_string(nbest_max));
  kv.set("dropout", fmt::format("{}", dropout));
  kv.set("variant", to_string(variant));
  kv.set("rescore_gain_init", fmt::format("{}", rescore_gain_init));
  kv.set("rescore_mean_pool", rescore_mean_pool ? "true" : "false");
  kv.set("tr_length_normalize", tr_length_normalize ? "true" : "false");
  return kv;
}

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv) { return from_kv(kv, ModelConfig{}); }

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv, const ModelConfig& d) {
  auto size = [&](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  ModelConfig c;
  c.enc_layers = size("enc_layers", d.enc_layers);
  c.dec_layers = size("dec_layers", d.dec_layers);
  c.heads = size("heads", d.heads);
  c.d_model = size("d_model", d.d_model);
  c.ff_dim = size("ff_dim", d.ff_dim);
  c.vocab_size = size("vocab_size", d.vocab_size);
  c.max_len = size("max_len", d.max_len);
  c.nbest_max = size("nbest_max", d.nbest_max);
  c.dropout = kv.get_double("dropout", d.dropout);
  c.variant = parse_variant(kv.get_string("variant", to_string(d.variant)));
  c.rescore_gain_init = kv.get_double("rescore_gain_init", d.rescore_gain_init);
  c.rescore_mean_pool = kv.get_bool("rescore_mean_pool", d.rescore_mean_pool);
  c.tr_length_normalize = kv.get_bool("tr_length_normalize", d.tr_length_normalize);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

AttentionParams init_attention(std::size_t d, std::mt19937_64& rng) {
  AttentionParams p;
  p.wq = xavier_uniform(d, d, rng);
  p.bq = Tensor::zeros(1, d, true);
  p.wk = xavier_uniform(d, d, rng);
  p.bk = Tensor::zeros(1, d, true);
  p.wv = xavier_uniform(d, d, rng);
  p.bv = Tensor::zeros(1, d, true);
  p.wo = xavier_uniform(d, d, rng);
  p.bo = Tensor::zeros(1, d, true);
  return p;
}

NormParams init_norm(std::size_t d, double gain = 1.0) {
  return {Tensor::full(1, d, gain, true), Tensor::zeros(1, d, true)};
}

FeedForwardParams init_ff(std::size_t d, std::size_t ff, std::mt19937_64& rng) {
  FeedForwardParams p;
  p.w1 = xavier_uniform(d, ff, rng);
  p.b1 = Tensor::zeros(1, ff, true);
  p.w2 = xavier_uniform(ff, d, rng);
  p.b2 = Tensor::zeros(1, d, true);
  return p;
}

void push_attention(std::vector<NamedTensor>& out, const std::string& prefix, const AttentionParams& p) {
  out.push_back({prefix + ".wq", p.wq});
  out.push_back({prefix + ".bq", p.bq});
  out.push_back({prefix + ".wk", p.wk});
  out.push_back({prefix + ".bk", p.bk});
  out.push_back({prefix + ".wv", p.wv});
  out.push_back({prefix + ".bv", p.bv});
  out.push_back({prefix + ".wo", p.wo});
  out.push_back({prefix + ".bo", p.bo});
}

void push_norm(std::vector<NamedTensor>& out, const std::string& prefix, const NormParams& p) {
  out.push_back({prefix + ".gain", p.gain});
  out.push_back({prefix + ".bias", p.bias});
}

void push_ff(std::vector<NamedTensor>& out, const std::string& prefix, const FeedForwardParams& p) {
  out.push_back({prefix + ".w1", p.w1});
  out.push_back({prefix + ".b1", p.b1});
  out.push_back({prefix + ".w2", p.w2});
  out.push_back({prefix + ".b2", p.b2});
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.d_model;
  ModelParams p;
  p.embedding = normal_init(cfg.vocab_size, d, std::pow(static_cast<double>(d), -0.5), rng);
  for (std::size_t l = 0; l < cfg.enc_layers; ++l) {
    EncoderLayerParams layer;
    layer.self_attn = init_attention(d, rng);
    layer.norm1 = init_norm(d);
    layer.ff = init_ff(d, cfg.ff_dim, rng);
    layer.norm2 = init_norm(d);
    p.encoder.push_back(std::move(layer));
  }
  for (std::size_t l = 0; l < cfg.dec_layers; ++l) {
    DecoderLayerParams layer;
    layer.self_attn = init_attention(d, rng);
    layer.norm1 = init_norm(d);
    layer.cross_attn = init_attention(d, rng);
    layer.norm2 = init_norm(d);
    layer.ff = init_ff(d, cfg.ff_dim, rng);
    layer.norm3 = init_norm(d);
    p.decoder.push_back(std::move(layer));
  }
  p.out_w = xavier_uniform(d, cfg.vocab_size, rng);
  p.out_b = Tensor::zeros(1, cfg.vocab_size, true);
  if (cfg.variant == Variant::TRA) {
    RescoreParams r;
    r.query = xavier_uniform(d, d, rng);
    r.key = xavier_uniform(d, d, rng);
    r.value = xavier_uniform(d, d, rng);
    r.norm = init_norm(d, cfg.rescore_gain_init);
    p.rescore = std::move(r);
  }
  return p;
}

std::vector<NamedTensor> ModelParams::named() const {
  std::vector<NamedTensor> out;
  out.push_back({"embedding", embedding});
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    const std::string pre = fmt::format("encoder.{}", l);
    push_attention(out, pre + ".self_attn", encoder[l].self_attn);
    push_norm(out, pre + ".norm1", encoder[l].norm1);
    push_ff(out, pre + ".ff", encoder[l].ff);
    push_norm(out, pre + ".norm2", encoder[l].norm2);
  }
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    const std::string pre = fmt::format("decoder.{}", l);
    push_attention(out, pre + ".self_attn", decoder[l].self_attn);
    push_norm(out, pre + ".norm1", decoder[l].norm1);
    push_attention(out, pre + ".cross_attn", decoder[l].cross_attn);
    push_norm(out, pre + ".norm2", decoder[l].norm2);
    push_ff(out, pre + ".ff", decoder[l].ff);
    push_norm(out, pre + ".norm3", decoder[l].norm3);
  }
  out.push_back({"output.w", out_w});
  out.push_back({"output.b", out_b});
  if (rescore) {
    out.push_back({"rescore.query", rescore->query});
    out.push_back({"rescore.key", rescore->key});
    out.push_back({"rescore.value", rescore->value});
    push_norm(out, "rescore.norm", rescore->norm);
  }
  return out;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& nt : named()) out.push_back(nt.tensor);
  return out;
}

void ModelParams::assign(std::span<const NamedTensor> values) {
  auto mine = named();
  if (mine.size() != values.size())
    throw InputError(fmt::format("checkpoint has {} tensors, model expects {}", values.size(), mine.size()));
  for (std::size_t k = 0; k < mine.size(); ++k) {
    const auto& src = values[k];
    auto& dst = mine[k];
    if (src.name != dst.name || src.tensor.rows() != dst.tensor.rows() || src.tensor.cols() != dst.tensor.cols())
      throw InputError(fmt::format("checkpoint tensor {} ({}x{}) does not match model tensor {} ({}x{})", src.name,
                                   src.tensor.rows(), src.tensor.cols(), dst.name, dst.tensor.rows(),
                                   dst.tensor.cols()));
    auto v = dst.tensor.mutable_values();
    std::copy(src.tensor.values().begin(), src.tensor.values().end(), v.begin());
  }
}

ModelParams ModelParams::deep_copy() const {
  ModelParams copy = *this;  // shares nodes; replace each with a clone below
  auto clone_attention = [](AttentionParams& a) {
    for (Tensor* t : {&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo}) *t = t->clone();
  };
  auto clone_norm = [](NormParams& n) {
    n.gain = n.gain.clone();
    n.bias = n.bias.clone();
  };
  auto clone_ff = [](FeedForwardParams& f) {
    for (Tensor* t : {&f.w1, &f.b1, &f.w2, &f.b2}) *t = t->clone();
  };
  copy.embedding = embedding.clone();
  for (auto& l : copy.encoder) {
    clone_attention(l.self_attn);
    clone_norm(l.norm1);
    clone_ff(l.ff);
    clone_norm(l.norm2);
  }
  for (auto& l : copy.decoder) {
    clone_attention(l.self_attn);
    clone_norm(l.norm1);
    clone_attention(l.cross_attn);
    clone_norm(l.norm2);
    clone_ff(l.ff);
    clone_norm(l.norm3);
  }
  copy.out_w = out_w.clone();
  copy.out_b = out_b.clone();
  if (copy.rescore) {
    copy.rescore->query = rescore->query.clone();
    copy.rescore->key = rescore->key.clone();
    copy.rescore->value = rescore->value.clone();
    clone_norm(copy.rescore->norm);
  }
  return copy;
}

// ---------------------------------------------------------------------------
// Inputs

PaddedNBest pad_nbest(const std::vector<std::vector<int>>& rows, std::size_t len) {
  if (rows.empty()) throw InputError("pad_nbest: no hypotheses");
  std::size_t longest = 0;
  for (const auto& r : rows) longest = std::max(longest, r.size());
  if (len == 0) len = longest;
  if (longest > len) throw InputError(fmt::format("pad_nbest: row of {} tokens exceeds pad length {}", longest, len));
  PaddedNBest out;
  out.n = rows.size();
  out.len = len;
  out.ids.assign(out.n * len, Vocabulary::kPad);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end(), out.ids.begin() + static_cast<std::ptrdiff_t>(i * len));
    out.lengths.push_back(rows[i].size());
  }
  return out;
}

ContextAggregate aggregate_context(std::span<const Tensor> embedded, std::span<const std::size_t> lengths) {
  if (embedded.empty()) throw UsageError("aggregate_context: no hypotheses");
  if (lengths.size() != embedded.size()) throw UsageError("aggregate_context: one length per hypothesis required");
  const std::size_t l = embedded.front().rows();
  ContextAggregate out;
  for (std::size_t i = 0; i < embedded.size(); ++i) {
    if (embedded[i].rows() != l)
      throw UsageError(fmt::format("aggregate_context: hypothesis {} has length {}, expected {}", i,
                                   embedded[i].rows(), l));
    if (lengths[i] > l) throw UsageError("aggregate_context: length exceeds padded length");
    for (std::size_t k = 0; k < l; ++k) out.pad_mask.push_back(k >= lengths[i] ? 1 : 0);
  }
  out.stacked = concat(embedded, 0);
  return out;
}

// ---------------------------------------------------------------------------
// Network

NBestTransformer::NBestTransformer(ModelConfig cfg, std::uint64_t seed)
    : NBestTransformer(cfg, ModelParams::init(cfg, seed)) {}

NBestTransformer::NBestTransformer(ModelConfig cfg, ModelParams params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  if ((cfg_.variant == Variant::TRA) != params_.rescore.has_value())
    throw UsageError("model parameters do not match the configured variant");
  const std::size_t d = cfg_.d_model;
  positions_.assign(cfg_.max_len * d, 0.0);
  for (std::size_t pos = 0; pos < cfg_.max_len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      positions_[pos * d + i] = std::sin(angle);
      if (i + 1 < d) positions_[pos * d + i + 1] = std::cos(angle);
    }
  }
}

Tensor NBestTransformer::embed(std::span<const int> ids) const {
  const std::size_t d = cfg_.d_model;
  if (ids.size() > cfg_.max_len)
    throw InputError(fmt::format("sequence of {} tokens exceeds max_len {}", ids.size(), cfg_.max_len));
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
      throw InputError(fmt::format("token id {} outside vocabulary of {}", id, cfg_.vocab_size));
  Tensor pe = Tensor::from_values(ids.size(), d,
                                  std::vector<double>(positions_.begin(),
                                                      positions_.begin() + static_cast<std::ptrdiff_t>(ids.size() * d)));
  return add(scale(embedding_lookup(params_.embedding, ids), std::sqrt(static_cast<double>(d))), pe);
}

Tensor NBestTransformer::attention(const Tensor& query_in, const Tensor& kv_in, const AttentionParams& p,
                                   const std::vector<std::uint8_t>& mask, const ForwardOptions& opts) const {
  const std::size_t heads = cfg_.heads;
  const std::size_t dh = cfg_.d_model / heads;
  const Tensor q = add(matmul(query_in, p.wq), p.bq);
  const Tensor k = add(matmul(kv_in, p.wk), p.bk);
  const Tensor v = add(matmul(kv_in, p.wv), p.bv);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : slice(q, 1, h * dh, (h + 1) * dh);
    const Tensor kh = heads == 1 ? k : slice(k, 1, h * dh, (h + 1) * dh);
    const Tensor vh = heads == 1 ? v : slice(v, 1, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (!mask.empty()) scores = masked_fill(scores, mask, kMaskValue);
    Tensor attn = softmax(scores, 1);
    if (opts.training && cfg_.dropout > 0.0) attn = dropout(attn, cfg_.dropout, true, *opts.rng);
    outs.push_back(matmul(attn, vh));
  }
  const Tensor merged = heads == 1 ? outs.front() : concat(outs, 1);
  return add(matmul(merged, p.wo), p.bo);
}

Tensor NBestTransformer::feed_forward(const Tensor& x, const FeedForwardParams& p, const ForwardOptions& opts) const {
  Tensor h = relu(add(matmul(x, p.w1), p.b1));
  if (opts.training && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, true, *opts.rng);
  return add(matmul(h, p.w2), p.b2);
}

EncodedNBest NBestTransformer::encode(const PaddedNBest& input, const ForwardOptions& opts) const {
  if (input.n == 0) throw InputError("encode: empty N-best list");
  if (input.n > cfg_.nbest_max)
    throw InputError(fmt::format("encode: N = {} exceeds nbest_max {}", input.n, cfg_.nbest_max));
  if (input.len > cfg_.max_len)
    throw InputError(fmt::format("encode: padded length {} exceeds max_len {}", input.len, cfg_.max_len));
  if (opts.training && cfg_.dropout > 0.0 && !opts.rng) throw UsageError("training forward pass needs an rng");

  std::vector<Tensor> embedded;
  embedded.reserve(input.n);
  for (std::size_t i = 0; i < input.n; ++i) embedded.push_back(embed(input.row(i)));
  ContextAggregate agg = aggregate_context(embedded, input.lengths);

  const std::size_t total = input.n * input.len;
  // Key mask only: pad keys are hidden from every query.
  std::vector<std::uint8_t> mask(total * total, 0);
  for (std::size_t r = 0; r < total; ++r)
    for (std::size_t c = 0; c < total; ++c) mask[r * total + c] = agg.pad_mask[c];

  Tensor x = agg.stacked;
  for (const auto& layer : params_.encoder) {
    x = layer_norm(add(x, attention(x, x, layer.self_attn, mask, opts)), layer.norm1.gain, layer.norm1.bias);
    x = layer_norm(add(x, feed_forward(x, layer.ff, opts)), layer.norm2.gain, layer.norm2.bias);
  }
  EncodedNBest enc;
  enc.states = x;
  enc.pad_mask = std::move(agg.pad_mask);
  enc.n = input.n;
  enc.len = input.len;
  enc.lengths = input.lengths;
  return enc;
}

Tensor NBestTransformer::decoder_states(const EncodedNBest& enc, std::span<const int> decoder_input,
                                        const ForwardOptions& opts) const {
  if (decoder_input.empty()) throw InputError("decoder input is empty");
  if (opts.training && cfg_.dropout > 0.0 && !opts.rng) throw UsageError("training forward pass needs an rng");
  const std::size_t t = decoder_input.size();
  const std::size_t src = enc.pad_mask.size();
  std::vector<std::uint8_t> causal(t * t, 0);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = r + 1; c < t; ++c) causal[r * t + c] = 1;
  std::vector<std::uint8_t> cross(t * src, 0);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < src; ++c) cross[r * src + c] = enc.pad_mask[c];

  Tensor x = embed(decoder_input);
  for (const auto& layer : params_.decoder) {
    x = layer_norm(add(x, attention(x, x, layer.self_attn, causal, opts)), layer.norm1.gain, layer.norm1.bias);
    x = layer_norm(add(x, attention(x, enc.states, layer.cross_attn, cross, opts)), layer.norm2.gain,
                   layer.norm2.bias);
    x = layer_norm(add(x, feed_forward(x, layer.ff, opts)), layer.norm3.gain, layer.norm3.bias);
  }
  return x;
}

Tensor NBestTransformer::project(const Tensor& states) const {
  return log_softmax(add(matmul(states, params_.out_w), params_.out_b), 1);
}

Tensor NBestTransformer::decoder_log_probs(const EncodedNBest& enc, std::span<const int> decoder_input,
                                           const ForwardOptions& opts) const {
  return project(decoder_states(enc, decoder_input, opts));
}

Tensor NBestTransformer::teacher_force_logps(const EncodedNBest& enc, std::span<const int> target,
                                             const ForwardOptions& opts) const {
  if (target.size() < 2 || target.front() != Vocabulary::kBos || target.back() != Vocabulary::kEos)
    throw InputError("teacher forcing target must start with bos and end with eos");
  if (target.size() > cfg_.max_len)
    throw InputError(fmt::format("target of {} tokens exceeds max_len {}", target.size(), cfg_.max_len));
  const Tensor logp = decoder_log_probs(enc, target.first(target.size() - 1), opts);
  return pick(logp, target.subspan(1));
}

DecodeResult NBestTransformer::decode_greedy(const EncodedNBest& enc) const {
  NoGradGuard no_grad;
  DecodeResult out;
  std::vector<int> prefix{Vocabulary::kBos};
  // prefix (bos + generated) never exceeds max_len tokens
  while (prefix.size() < cfg_.max_len) {
    const Tensor states = decoder_states(enc, prefix, {});
    const Tensor logp = project(slice(states, 0, states.rows() - 1, states.rows()));
    const auto row = logp.values();
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    out.tokens.push_back(best);
    out.token_logps.push_back(row[static_cast<std::size_t>(best)]);
    prefix.push_back(best);
    if (best == Vocabulary::kEos) break;
  }
  double total = 0.0;
  for (double lp : out.token_logps) total += lp;
  out.mean_logp = out.token_logps.empty() ? 0.0 : total / static_cast<double>(out.token_logps.size());
  return out;
}

Tensor NBestTransformer::target_states(std::span<const int> target_tokens) const {
  if (target_tokens.empty()) throw InputError("target_states: empty target");
  return embed(target_tokens);
}

Tensor NBestTransformer::rescore_logits(const EncodedNBest& enc, const Tensor& ht, const ForwardOptions& opts) const {
  if (!params_.rescore) throw UsageError("rescore attention requires the TRA variant");
  if (enc.n == 0 || enc.states.rows() % enc.n != 0)
    throw UsageError(fmt::format("rescore attention: {} rows do not split into {} blocks", enc.states.rows(), enc.n));
  const RescoreParams& r = *params_.rescore;
  const std::size_t heads = cfg_.heads;
  const std::size_t dh = cfg_.d_model / heads;
  const Tensor q = matmul(enc.states, r.query);
  const Tensor k = matmul(ht, r.key);
  const Tensor v = matmul(ht, r.value);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : slice(q, 1, h * dh, (h + 1) * dh);
    const Tensor kh = heads == 1 ? k : slice(k, 1, h * dh, (h + 1) * dh);
    const Tensor vh = heads == 1 ? v : slice(v, 1, h * dh, (h + 1) * dh);
    Tensor attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_d), 1);
    if (opts.training && cfg_.dropout > 0.0) attn = dropout(attn, cfg_.dropout, true, *opts.rng);
    outs.push_back(matmul(attn, vh));
  }
  const Tensor a = layer_norm(heads == 1 ? outs.front() : concat(outs, 1), r.norm.gain, r.norm.bias);
  const bool mean = cfg_.rescore_mean_pool;
  const Tensor target_sum = mean ? scale(reduce_sum(ht, 0), 1.0 / static_cast<double>(ht.rows())) : reduce_sum(ht, 0);
  const std::size_t l = enc.states.rows() / enc.n;
  std::vector<Tensor> logits;
  logits.reserve(enc.n);
  for (std::size_t i = 0; i < enc.n; ++i) {
    // Only the hypothesis' own (non-pad) rows contribute to its block sum.
    const Tensor block = slice(a, 0, i * l, i * l + enc.lengths[i]);
    const Tensor pooled = mean ? scale(reduce_sum(block, 0), 1.0 / static_cast<double>(enc.lengths[i])) : reduce_sum(block, 0);
    logits.push_back(sum(mul(pooled, target_sum)));
  }
  return concat(logits, 1);
}

Tensor NBestTransformer::rescore_attention(const EncodedNBest& enc, const Tensor& ht, const ForwardOptions& opts) const {
  return sigmoid(rescore_logits(enc, ht, opts));
}

Tensor NBestTransformer::score_nbest_tr(const EncodedNBest& enc, const PaddedNBest& input,
                                        const ForwardOptions& opts) const {
  if (input.n == 0) throw InputError("score_nbest_tr: empty record");
  std::vector<Tensor> q;
  q.reserve(input.n);
  for (std::size_t i = 0; i < input.n; ++i) {
    const Tensor logps = teacher_force_logps(enc, input.unpadded(i), opts);
    q.push_back(sigmoid(cfg_.tr_length_normalize ? mean(logps) : sum(logps)));
  }
  const Tensor qs = concat(q, 1);
  return div(qs, sum(qs));
}

void NBestTransformer::save(const std::filesystem::path& path) const {
  const auto named = params_.named();
  save_checkpoint(path, named);
  std::ofstream cfg(path.string() + ".config", std::ios::binary);
  if (!cfg) throw InputError("cannot write " + path.string() + ".config");
  cfg << cfg_.to_kv().to_string();
}

NBestTransformer NBestTransformer::load(const std::filesystem::path& path) {
  const ModelConfig cfg = ModelConfig::from_kv(KeyValueConfig::load(path.string() + ".config"));
  ModelParams params = ModelParams::init(cfg, 0);
  params.assign(load_checkpoint(path));
  return NBestTransformer(cfg, std::move(params));
}

// ---------------------------------------------------------------------------
// Rescore / rewrite decision

std::string to_string(RewriteAction a) {
  switch (a) {
    case RewriteAction::KeepAsr: return "keep_asr";
    case RewriteAction::Rescore: return "rescore";
    case RewriteAction::Rewrite: return "rewrite";
  }
  return "?";
}

std::size_t argmax_first(std::span<const double> scores) {
  if (scores.empty()) throw UsageError("argmax of an empty score list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

RewriteDecision rewrite_decide(const DecodeResult& decode, const Words& decoded_text, const RescoreOutput& scores,
                               const NBestRecord& record, double threshold_r, double threshold_w) {
  const bool both_disabled = std::isinf(threshold_r) && threshold_r > 0 && std::isinf(threshold_w) && threshold_w > 0;
  if (!(threshold_w > threshold_r) && !both_disabled)
    throw UsageError(fmt::format("threshold_W ({}) must exceed threshold_R ({})", threshold_w, threshold_r));
  if (record.hypotheses.empty()) throw InputError("rewrite_decide: record has no hypotheses");
  if (scores.scores.size() != record.hypotheses.size())
    throw UsageError("rewrite_decide: one score per hypothesis required");

  RewriteDecision out;
  if (!(decode.mean_logp > threshold_r)) {
    out.text = record.hypotheses.front().words;
    return out;
  }
  out.action = RewriteAction::Rescore;
  out.chosen_index = argmax_first(scores.scores);
  out.text = record.hypotheses[out.chosen_index].words;
  if (decode.mean_logp > threshold_w && record.hypotheses.size() > 1) {
    out.action = RewriteAction::Rewrite;
    out.text = decoded_text;
  }
  return out;
}

}  // namespace nbrew
