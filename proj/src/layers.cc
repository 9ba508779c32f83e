#include "tet/layers.h"

#include <cmath>
#include <random>

namespace tet {

using ad::Tensor;

void ModelDims::validate() const {
  if (d_model == 0 || d_ff == 0 || n_heads == 0)
    throw ConfigError("model dims must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model (" + std::to_string(d_model) +
                      ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  if (vocab_size < 2) throw ConfigError("vocabulary must include BLANK and PAD");
  if (!(ln_eps > 0)) throw ConfigError("layer-norm eps must be positive");
}

void init_scaled_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out,
                         std::uint64_t seed) {
  const double a = std::sqrt(6.0 / double(fan_in + fan_out));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-a, a);
  for (Real& v : t.values()) v = Real(dist(rng));
}

namespace {

Tensor param(ad::Shape shape) { return Tensor::zeros(std::move(shape), true); }

void fill(Tensor& t, Real v) {
  for (Real& x : t.values()) x = v;
}

}  // namespace

EncoderLayerParams EncoderLayerParams::zeros(const ModelDims& dims) {
  const std::size_t d = dims.d_model;
  const std::size_t f = dims.d_ff;
  EncoderLayerParams p;
  p.ln1_gain = param({d});
  p.ln1_bias = param({d});
  p.wq = param({d, d});
  p.bq = param({d});
  p.wk = param({d, d});
  p.bk = param({d});
  p.wv = param({d, d});
  p.bv = param({d});
  p.wo = param({d, d});
  p.bo = param({d});
  p.ln2_gain = param({d});
  p.ln2_bias = param({d});
  p.w1 = param({d, f});
  p.b1 = param({f});
  p.w2 = param({f, d});
  p.b2 = param({d});
  return p;
}

void EncoderLayerParams::initialize(std::uint64_t seed) {
  const std::size_t d = wq.dim(0);
  const std::size_t f = w1.dim(1);
  fill(ln1_gain, 1);
  fill(ln2_gain, 1);
  for (Tensor* b : {&ln1_bias, &ln2_bias, &bq, &bk, &bv, &bo, &b1, &b2}) fill(*b, 0);
  init_scaled_uniform(wq, d, d, mix_seed(seed, 1));
  init_scaled_uniform(wk, d, d, mix_seed(seed, 2));
  init_scaled_uniform(wv, d, d, mix_seed(seed, 3));
  init_scaled_uniform(wo, d, d, mix_seed(seed, 4));
  init_scaled_uniform(w1, d, f, mix_seed(seed, 5));
  init_scaled_uniform(w2, f, d, mix_seed(seed, 6));
}

void EncoderLayerParams::for_each(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".ln1.gain", ln1_gain);
  fn(prefix + ".ln1.bias", ln1_bias);
  fn(prefix + ".attn.wq", wq);
  fn(prefix + ".attn.bq", bq);
  fn(prefix + ".attn.wk", wk);
  fn(prefix + ".attn.bk", bk);
  fn(prefix + ".attn.wv", wv);
  fn(prefix + ".attn.bv", bv);
  fn(prefix + ".attn.wo", wo);
  fn(prefix + ".attn.bo", bo);
  fn(prefix + ".ln2.gain", ln2_gain);
  fn(prefix + ".ln2.bias", ln2_bias);
  fn(prefix + ".ffn.w1", w1);
  fn(prefix + ".ffn.b1", b1);
  fn(prefix + ".ffn.w2", w2);
  fn(prefix + ".ffn.b2", b2);
}

std::size_t EncoderLayerParams::parameter_count() const {
  std::size_t n = 0;
  const_cast<EncoderLayerParams*>(this)->for_each(
      "", [&](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

LeafHead LeafHead::zeros(const ModelDims& dims) {
  return {param({dims.d_model, dims.vocab_size}), param({dims.vocab_size})};
}

void LeafHead::initialize(std::uint64_t seed) {
  init_scaled_uniform(w, w.dim(0), w.dim(1), mix_seed(seed, 1));
  fill(b, 0);
}

void LeafHead::for_each(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".w", w);
  fn(prefix + ".b", b);
}

Embedding Embedding::zeros(const ModelDims& dims) {
  Embedding e;
  e.tokens = param({dims.vocab_size, dims.d_model});
  if (dims.positional == PositionalKind::kLearned)
    e.positions = param({dims.max_positions, dims.d_model});
  return e;
}

void Embedding::initialize(std::uint64_t seed) {
  init_scaled_uniform(tokens, tokens.dim(0), tokens.dim(1), mix_seed(seed, 1));
  if (positions.defined())
    init_scaled_uniform(positions, positions.dim(0), positions.dim(1), mix_seed(seed, 2));
}

void Embedding::for_each(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".tokens", tokens);
  if (positions.defined()) fn(prefix + ".positions", positions);
}

std::vector<Real> sinusoidal_table(std::size_t length, std::size_t d) {
  std::vector<Real> pe(length * d);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -double(i - i % 2) / double(d));
      const double angle = double(pos) * rate;
      pe[pos * d + i] = Real(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

Tensor embed(ad::Tape& tape, std::span<const TokenId> tokens, std::size_t rows,
             std::size_t width, const Embedding& emb, const ModelDims& dims) {
  if (tokens.size() != rows * width)
    throw DimensionError("embed: " + std::to_string(tokens.size()) +
                         " ids do not form a " + std::to_string(rows) + "x" +
                         std::to_string(width) + " matrix");
  const std::size_t d = dims.d_model;
  Tensor x = ad::embedding(tape, emb.tokens, tokens);
  x = ad::reshape(tape, x, {rows, width, d});
  if (dims.positional == PositionalKind::kLearned) {
    if (width > dims.max_positions)
      throw ContractError("embed: width " + std::to_string(width) +
                          " exceeds learned positions (" +
                          std::to_string(dims.max_positions) + ")");
    std::vector<TokenId> pos(width);
    for (std::size_t t = 0; t < width; ++t) pos[t] = TokenId(t);
    return ad::add(tape, x, ad::embedding(tape, emb.positions, pos));
  }
  Tensor pe = Tensor::from({width, d}, sinusoidal_table(width, d));
  return ad::add(tape, x, pe);
}

Tensor encoder_layer(ad::Tape& tape, const Tensor& x, const EncoderLayerParams& p,
                     const ModelDims& dims) {
  const std::size_t d = dims.d_model;
  if (x.rank() != 3 || x.dim(2) != d || p.wq.dim(0) != d)
    throw DimensionError("encoder_layer: input " + ad::shape_str(x.shape()) +
                         " does not match d_model " + std::to_string(d));
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.dim(1);
  const std::size_t heads = dims.n_heads;
  const std::size_t dh = d / heads;
  const std::size_t n = rows * width;

  auto linear = [&](const Tensor& in2d, const Tensor& w, const Tensor& b) {
    return ad::add(tape, ad::matmul(tape, in2d, w), b);
  };
  // [n, d] -> [rows*heads, width, dh]
  auto split_heads = [&](const Tensor& t) {
    Tensor r = ad::reshape(tape, t, {rows, width, heads, dh});
    r = ad::permute(tape, r, {0, 2, 1, 3});
    return ad::reshape(tape, r, {rows * heads, width, dh});
  };

  Tensor flat = ad::reshape(tape, x, {n, d});
  Tensor h = ad::layer_norm(tape, flat, p.ln1_gain, p.ln1_bias, dims.ln_eps);
  Tensor q = split_heads(linear(h, p.wq, p.bq));
  Tensor k = split_heads(linear(h, p.wk, p.bk));
  Tensor v = split_heads(linear(h, p.wv, p.bv));
  Tensor scores = ad::matmul(tape, q, ad::transpose(tape, k));
  scores = ad::scale(tape, scores, Real{1} / std::sqrt(Real(dh)));
  Tensor attn = ad::softmax_rows(tape, scores);
  Tensor ctx = ad::matmul(tape, attn, v);  // [rows*heads, width, dh]
  ctx = ad::reshape(tape, ctx, {rows, heads, width, dh});
  ctx = ad::permute(tape, ctx, {0, 2, 1, 3});
  ctx = ad::reshape(tape, ctx, {n, d});
  Tensor res1 = ad::add(tape, flat, linear(ctx, p.wo, p.bo));

  Tensor h2 = ad::layer_norm(tape, res1, p.ln2_gain, p.ln2_bias, dims.ln_eps);
  Tensor ff = linear(ad::gelu(tape, linear(h2, p.w1, p.b1)), p.w2, p.b2);
  Tensor out = ad::add(tape, res1, ff);
  return ad::reshape(tape, out, {rows, width, d});
}

Tensor project_head(ad::Tape& tape, const Tensor& x, const LeafHead& head) {
  if (x.rank() != 3 || x.dim(2) != head.w.dim(0))
    throw DimensionError("project_head: input " + ad::shape_str(x.shape()) +
                         " does not match head " + ad::shape_str(head.w.shape()));
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.dim(1);
  Tensor flat = ad::reshape(tape, x, {rows * width, x.dim(2)});
  Tensor logits = ad::add(tape, ad::matmul(tape, flat, head.w), head.b);
  return ad::reshape(tape, logits, {rows, width, head.w.dim(1)});
}

}  // namespace tet
