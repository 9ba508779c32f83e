#include <cmath>

#include "doctest.h"
#include "support.h"
#include "tet/layers.h"

using namespace tet;
using ad::Tape;
using ad::Tensor;
using tet::testing::random_tensor;
using tet::testing::small_dims;

namespace {

ModelDims dims_with_vocab(std::size_t d, std::size_t ff, std::size_t heads, std::size_t vocab) {
  auto dims = small_dims(d, ff, heads);
  dims.vocab_size = vocab;
  return dims;
}

// Plain-loop layer norm of one row (gain 1, bias 0).
std::vector<double> ln_row(const std::vector<double>& x, double eps) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= double(x.size());
  for (double v : x) var += (v - mu) * (v - mu);
  var /= double(x.size());
  std::vector<double> out;
  for (double v : x) out.push_back((v - mu) / std::sqrt(var + eps));
  return out;
}

}  // namespace

TEST_CASE("sinusoidal table at position zero") {
  auto pe = sinusoidal_table(3, 4);
  REQUIRE(pe.size() == 12);
  CHECK(pe[0] == 0);
  CHECK(pe[1] == 1);
  CHECK(pe[2] == 0);
  CHECK(pe[3] == 1);
  // pos 1: sin(1), cos(1), sin(1/100), cos(1/100) for d = 4
  CHECK(std::abs(pe[4] - std::sin(1.0)) <= 1e-15);
  CHECK(std::abs(pe[5] - std::cos(1.0)) <= 1e-15);
  CHECK(std::abs(pe[6] - std::sin(0.01)) <= 1e-15);
  CHECK(std::abs(pe[7] - std::cos(0.01)) <= 1e-15);
}

TEST_CASE("embedding of an empty sequence") {
  auto dims = dims_with_vocab(8, 16, 2, 5);
  auto emb = Embedding::zeros(dims);
  emb.initialize(1);
  Tape tape = Tape::inference();
  auto x = embed(tape, std::vector<TokenId>{}, 3, 0, emb, dims);
  CHECK(x.shape() == ad::Shape{3, 0, 8});
}

TEST_CASE("same token at two positions differs by the positional term only") {
  auto dims = dims_with_vocab(8, 16, 2, 5);
  auto emb = Embedding::zeros(dims);
  emb.initialize(1);
  Tape tape = Tape::inference();
  std::vector<TokenId> ids{3, 3};
  auto x = embed(tape, ids, 1, 2, emb, dims);
  auto pe = sinusoidal_table(2, 8);
  for (std::size_t k = 0; k < 8; ++k) {
    CHECK(x.values()[k] == emb.tokens.values()[3 * 8 + k] + pe[k]);
    CHECK(std::abs((x.values()[8 + k] - x.values()[k]) - (pe[8 + k] - pe[k])) <= 1e-15);
  }
  std::vector<TokenId> bad{5, 0};
  CHECK_THROWS_AS(embed(tape, bad, 1, 2, emb, dims), ContractError);
  CHECK_THROWS_AS(embed(tape, ids, 2, 2, emb, dims), DimensionError);
}

TEST_CASE("learned positions") {
  auto dims = dims_with_vocab(4, 8, 2, 5);
  dims.positional = PositionalKind::kLearned;
  dims.max_positions = 3;
  auto emb = Embedding::zeros(dims);
  emb.initialize(2);
  Tape tape = Tape::inference();
  std::vector<TokenId> ids{2, 2};
  auto x = embed(tape, ids, 1, 2, emb, dims);
  for (std::size_t k = 0; k < 4; ++k)
    CHECK(x.values()[4 + k] == emb.tokens.values()[2 * 4 + k] + emb.positions.values()[4 + k]);
  std::vector<TokenId> long_ids(4, 2);
  CHECK_THROWS_AS(embed(tape, long_ids, 1, 4, emb, dims), ContractError);
}

TEST_CASE("zeroed output projections make the layer an identity") {
  auto dims = dims_with_vocab(8, 16, 2, 5);
  auto p = EncoderLayerParams::zeros(dims);
  p.initialize(3);
  for (auto* t : {&p.wo, &p.bo, &p.w2, &p.b2})
    for (Real& v : t->values()) v = 0;
  Tape tape = Tape::inference();
  auto x = random_tensor({2, 5, 8}, 4, false);
  auto y = encoder_layer(tape, x, p, dims);
  CHECK(tet::testing::bitwise_equal(y.values(), x.values()));
}

TEST_CASE("output shape equals input shape") {
  for (auto [d, heads] : std::vector<std::pair<std::size_t, std::size_t>>{{4, 1}, {8, 2}, {12, 3}, {16, 4}}) {
    auto dims = dims_with_vocab(d, 2 * d, heads, 5);
    auto p = EncoderLayerParams::zeros(dims);
    p.initialize(d);
    Tape tape = Tape::inference();
    auto x = random_tensor({3, 7, d}, 1, false);
    CHECK(encoder_layer(tape, x, p, dims).shape() == x.shape());
  }
  auto dims = dims_with_vocab(8, 16, 2, 5);
  auto p = EncoderLayerParams::zeros(dims);
  Tape tape = Tape::inference();
  CHECK_THROWS_AS(encoder_layer(tape, random_tensor({2, 3, 4}, 1), p, dims), DimensionError);
}

TEST_CASE("d_model must divide into heads") {
  auto dims = dims_with_vocab(10, 16, 4, 5);
  CHECK_THROWS_AS(dims.validate(), ConfigError);
}

TEST_CASE("single-head attention matches a hand computation") {
  const std::size_t d = 2, T = 2;
  auto dims = dims_with_vocab(d, 4, 1, 5);
  auto p = EncoderLayerParams::zeros(dims);
  for (Real& v : p.ln1_gain.values()) v = 1;
  for (Real& v : p.ln2_gain.values()) v = 1;
  // Hand-set projections; FFN output zeroed so only attention contributes.
  const std::vector<double> wq{0.5, -1.0, 0.25, 2.0}, wk{1.5, 0.0, -0.5, 1.0},
      wv{1.0, 2.0, -1.0, 0.5}, wo{0.3, -0.7, 1.1, 0.2};
  std::copy(wq.begin(), wq.end(), p.wq.values().begin());
  std::copy(wk.begin(), wk.end(), p.wk.values().begin());
  std::copy(wv.begin(), wv.end(), p.wv.values().begin());
  std::copy(wo.begin(), wo.end(), p.wo.values().begin());
  p.bq.values()[0] = 0.1;
  p.bv.values()[1] = -0.2;

  const std::vector<double> xin{0.3, -1.2, 2.0, 0.7};
  auto x = Tensor::from({1, T, d}, {xin.begin(), xin.end()});

  auto mat = [](const std::vector<double>& a, const std::vector<double>& w, std::size_t n) {
    std::vector<double> out(n * 2, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t k = 0; k < 2; ++k) out[i * 2 + j] += a[i * 2 + k] * w[k * 2 + j];
    return out;
  };
  std::vector<double> h;
  for (std::size_t t = 0; t < T; ++t) {
    auto r = ln_row({xin[2 * t], xin[2 * t + 1]}, 1e-5);
    h.insert(h.end(), r.begin(), r.end());
  }
  auto Q = mat(h, wq, T), K = mat(h, wk, T), V = mat(h, wv, T);
  for (std::size_t t = 0; t < T; ++t) {
    Q[t * 2] += 0.1;
    V[t * 2 + 1] += -0.2;
  }
  std::vector<double> ctx(T * 2, 0);
  for (std::size_t i = 0; i < T; ++i) {
    double s[2], z = 0;
    for (std::size_t j = 0; j < T; ++j) {
      s[j] = (Q[i * 2] * K[j * 2] + Q[i * 2 + 1] * K[j * 2 + 1]) / std::sqrt(2.0);
    }
    const double m = std::max(s[0], s[1]);
    for (std::size_t j = 0; j < T; ++j) z += std::exp(s[j] - m);
    for (std::size_t j = 0; j < T; ++j)
      for (std::size_t k = 0; k < 2; ++k) ctx[i * 2 + k] += std::exp(s[j] - m) / z * V[j * 2 + k];
  }
  auto attn_out = mat(ctx, wo, T);

  Tape tape = Tape::inference();
  auto y = encoder_layer(tape, x, p, dims);
  for (std::size_t i = 0; i < T * d; ++i) CHECK(std::abs(y.values()[i] - (xin[i] + attn_out[i])) <= 1e-10);
}

TEST_CASE("encoder layer gradients match finite differences") {
  auto dims = dims_with_vocab(4, 6, 2, 5);
  auto p = EncoderLayerParams::zeros(dims);
  p.initialize(9);
  for (auto* t : {&p.bq, &p.bk, &p.bv, &p.bo, &p.b1, &p.b2, &p.ln1_bias, &p.ln2_bias})
    for (Real& v : t->values()) v = Real(0.1);
  auto x = random_tensor({2, 3, 4}, 10);
  std::vector<Tensor> params{x};
  // The key bias shifts every score in a softmax row equally, so its true
  // gradient is zero and central differences only see rounding noise.
  p.for_each("", [&](const std::string& name, Tensor& t) {
    if (name != ".attn.bk") params.push_back(t);
  });
  auto w = random_tensor({2, 3, 4}, 11, false);
  auto f = [&](Tape& tape) { return ad::sum(tape, ad::mul(tape, encoder_layer(tape, x, p, dims), w)); };
  auto rep = ad::finite_diff_check(f, params);
  CHECK_MESSAGE(rep.passed, rep.failure);

  p.bk.zero_grad();
  p.bk.set_requires_grad(true);
  Tape tape;
  ad::backward(f(tape), tape);
  for (Real g : p.bk.grad()) CHECK(std::abs(g) <= 1e-12);
}

TEST_CASE("head projection") {
  auto dims = dims_with_vocab(4, 8, 2, 6);
  auto head = LeafHead::zeros(dims);
  head.initialize(1);
  CHECK(head.w.shape() == ad::Shape{4, 6});
  Tape tape = Tape::inference();
  auto x = random_tensor({2, 3, 4}, 1, false);
  auto logits = project_head(tape, x, head);
  CHECK(logits.shape() == ad::Shape{2, 3, 6});
  auto probs = ad::softmax_rows(tape, logits);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < 6; ++k) s += probs.values()[r * 6 + k];
    CHECK(std::abs(s - 1) <= 1e-12);
  }
}

TEST_CASE("parameter counts") {
  auto dims = dims_with_vocab(8, 16, 2, 5);
  auto p = EncoderLayerParams::zeros(dims);
  // 4 attention projections with bias, FFN in/out, two layer norms.
  CHECK(p.parameter_count() == 4 * (8 * 8 + 8) + (8 * 16 + 16) + (16 * 8 + 8) + 4 * 8);
  std::size_t visited = 0;
  p.for_each("n", [&](const std::string& name, Tensor& t) {
    CHECK(name.starts_with("n"));
    visited += t.numel();
  });
  CHECK(visited == p.parameter_count());
}
