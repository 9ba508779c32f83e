#pragma once

// Parameter sets and single-layer forward passes of the encoder: token
// embedding with positional encoding, the pre-norm transformer encoder layer,
// and the per-leaf output projection.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tet/autodiff.h"

namespace tet {

enum class PositionalKind { kSinusoidal, kLearned };

struct ModelDims {
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 0;
  PositionalKind positional = PositionalKind::kSinusoidal;
  std::size_t max_positions = 1024;  // learned positions only
  Real ln_eps = Real(1e-5);

  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

using ParamVisitor = std::function<void(const std::string& name, ad::Tensor& t)>;

struct EncoderLayerParams {
  ad::Tensor ln1_gain, ln1_bias;
  ad::Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // [d,d] / [d]
  ad::Tensor ln2_gain, ln2_bias;
  ad::Tensor w1, b1, w2, b2;  // [d,d_ff] [d_ff] [d_ff,d] [d]

  static EncoderLayerParams zeros(const ModelDims& dims);
  // Scaled-uniform projections, zero biases, unit gains.
  void initialize(std::uint64_t seed);
  void for_each(const std::string& prefix, const ParamVisitor& fn);
  std::size_t parameter_count() const;
};

struct LeafHead {
  ad::Tensor w, b;  // [d,|V|], [|V|]

  static LeafHead zeros(const ModelDims& dims);
  void initialize(std::uint64_t seed);
  void for_each(const std::string& prefix, const ParamVisitor& fn);
};

struct Embedding {
  ad::Tensor tokens;     // [|V|, d]
  ad::Tensor positions;  // [max_positions, d], learned positions only

  static Embedding zeros(const ModelDims& dims);
  void initialize(std::uint64_t seed);
  void for_each(const std::string& prefix, const ParamVisitor& fn);
};

// Xavier/Glorot uniform: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
void init_scaled_uniform(ad::Tensor& t, std::size_t fan_in, std::size_t fan_out,
                         std::uint64_t seed);

// Standard sinusoid table [length, d]: sin on even dims, cos on odd dims.
std::vector<Real> sinusoidal_table(std::size_t length, std::size_t d);

// tokens is rows x width (row-major). Returns [rows, width, d].
ad::Tensor embed(ad::Tape& tape, std::span<const TokenId> tokens, std::size_t rows,
                 std::size_t width, const Embedding& emb, const ModelDims& dims);

// x + SelfAttn(LN(x)), then + FFN(LN(.)). Full bidirectional attention.
ad::Tensor encoder_layer(ad::Tape& tape, const ad::Tensor& x,
                         const EncoderLayerParams& p, const ModelDims& dims);

// [rows, width, d] -> [rows, width, |V|] logits.
ad::Tensor project_head(ad::Tape& tape, const ad::Tensor& x, const LeafHead& head);

}  // namespace tet
