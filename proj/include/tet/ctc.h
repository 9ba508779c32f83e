#pragma once

// Connectionist temporal classification: log-space forward/backward over the
// blank-interleaved target, best-path decoding and the collapse mapping.

#include <cstdint>
#include <span>
#include <vector>

#include "tet/autodiff.h"

namespace tet::ctc {

// Stand-in for log(0). logsumexp treats anything at or below it as zero
// probability, so sums of "impossible" terms stay at the sentinel.
inline constexpr Real kLogZero = Real(-1e30);

Real log_sum_exp(Real a, Real b);

enum class Status { kOk, kInfeasible };

// Fewest frames that can emit `target`: its length plus one blank between
// each pair of equal neighbours.
std::size_t min_frames(std::span<const TokenId> target);

struct AlignmentLattice {
  std::size_t frames = 0;
  std::size_t vocab = 0;
  std::vector<TokenId> extended;   // blank, y1, blank, y2, ..., blank
  std::vector<Real> alpha;         // frames x extended.size(), log space
  std::vector<Real> log_probs;     // frames x vocab (copy of the input)
  Real log_likelihood = kLogZero;
  Status status = Status::kOk;

  Real alpha_at(std::size_t t, std::size_t s) const { return alpha[t * extended.size() + s]; }
};

// log_probs is frames x vocab, row-major.
AlignmentLattice build_lattice(std::span<const Real> log_probs, std::size_t frames,
                               std::size_t vocab, std::span<const TokenId> target,
                               TokenId blank);

struct LossResult {
  Real loss = 0;  // +inf when infeasible
  Status status = Status::kOk;
};

// -log P(target | log_probs).
LossResult ctc_loss(std::span<const Real> log_probs, std::size_t frames, std::size_t vocab,
                    std::span<const TokenId> target, TokenId blank);
// log_probs: [T, |V|].
LossResult ctc_loss(const ad::Tensor& log_probs, std::span<const TokenId> target,
                    TokenId blank);

// d loss / d log_probs, frames x vocab; zero for infeasible lattices.
std::vector<Real> ctc_grad(const AlignmentLattice& lattice);

struct BatchLossStats {
  std::size_t rows_used = 0;
  std::size_t rows_infeasible = 0;
  std::vector<Real> row_losses;  // NaN for masked rows, +inf for infeasible
};

// Mean CTC loss over rows with mask[r] != 0 and a feasible lattice, recorded
// on the tape. log_probs: [rows, T, |V|]. Returns +inf (not recorded) when no
// row qualifies.
ad::Tensor ctc_loss_batch(ad::Tape& tape, const ad::Tensor& log_probs,
                          const std::vector<std::vector<TokenId>>& targets,
                          std::span<const std::uint8_t> mask, TokenId blank,
                          BatchLossStats* stats = nullptr);

// Frame-wise argmax; ties go to the lowest id.
std::vector<TokenId> greedy_decode(std::span<const Real> log_probs, std::size_t frames,
                                   std::size_t vocab);
std::vector<TokenId> greedy_decode(const ad::Tensor& log_probs);

// Merge adjacent duplicates, then drop blanks.
std::vector<TokenId> collapse(std::span<const TokenId> raw, TokenId blank);

}  // namespace tet::ctc
