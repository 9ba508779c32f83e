#include "tet/ctc.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace tet::ctc {

Real log_sum_exp(Real a, Real b) {
  if (a <= kLogZero) return b <= kLogZero ? kLogZero : b;
  if (b <= kLogZero) return a;
  const Real m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

std::size_t min_frames(std::span<const TokenId> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

namespace {

Real clamp_log(Real v) { return v < kLogZero ? kLogZero : v; }

}  // namespace

AlignmentLattice build_lattice(std::span<const Real> log_probs, std::size_t frames,
                               std::size_t vocab, std::span<const TokenId> target,
                               TokenId blank) {
  if (log_probs.size() != frames * vocab)
    throw DimensionError("ctc: log_probs hold " + std::to_string(log_probs.size()) +
                         " values, expected " + std::to_string(frames) + "x" +
                         std::to_string(vocab));
  for (TokenId id : target)
    if (id < 0 || std::size_t(id) >= vocab || id == blank)
      throw ContractError("ctc: target id " + std::to_string(id) + " is blank or out of range");
  AlignmentLattice lat;
  lat.frames = frames;
  lat.vocab = vocab;
  lat.log_probs.assign(log_probs.begin(), log_probs.end());
  lat.extended.reserve(2 * target.size() + 1);
  lat.extended.push_back(blank);
  for (TokenId id : target) {
    lat.extended.push_back(id);
    lat.extended.push_back(blank);
  }
  const std::size_t S = lat.extended.size();
  if (frames == 0) {
    lat.log_likelihood = target.empty() ? Real{0} : kLogZero;
    lat.status = target.empty() ? Status::kOk : Status::kInfeasible;
    return lat;
  }
  if (frames < min_frames(target)) {
    lat.status = Status::kInfeasible;
    return lat;
  }
  // NaN inputs must surface as a NaN loss, not pass for impossible paths.
  if (std::any_of(lat.log_probs.begin(), lat.log_probs.end(),
                  [](Real v) { return std::isnan(v); })) {
    lat.log_likelihood = std::numeric_limits<Real>::quiet_NaN();
    return lat;
  }
  const auto& z = lat.extended;
  auto lp = [&](std::size_t t, std::size_t s) { return lat.log_probs[t * vocab + std::size_t(z[s])]; };
  lat.alpha.assign(frames * S, kLogZero);
  auto A = [&](std::size_t t, std::size_t s) -> Real& { return lat.alpha[t * S + s]; };
  A(0, 0) = clamp_log(lp(0, 0));
  if (S > 1) A(0, 1) = clamp_log(lp(0, 1));
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      Real a = A(t - 1, s);
      if (s >= 1) a = log_sum_exp(a, A(t - 1, s - 1));
      if (s >= 2 && z[s] != blank && z[s] != z[s - 2]) a = log_sum_exp(a, A(t - 1, s - 2));
      A(t, s) = a <= kLogZero ? kLogZero : clamp_log(a + lp(t, s));
    }
  }
  Real ll = A(frames - 1, S - 1);
  if (S > 1) ll = log_sum_exp(ll, A(frames - 1, S - 2));
  lat.log_likelihood = ll;
  if (ll <= kLogZero) lat.status = Status::kInfeasible;
  return lat;
}

LossResult ctc_loss(std::span<const Real> log_probs, std::size_t frames, std::size_t vocab,
                    std::span<const TokenId> target, TokenId blank) {
  const auto lat = build_lattice(log_probs, frames, vocab, target, blank);
  if (lat.status != Status::kOk)
    return {std::numeric_limits<Real>::infinity(), Status::kInfeasible};
  return {-lat.log_likelihood, Status::kOk};
}

LossResult ctc_loss(const ad::Tensor& log_probs, std::span<const TokenId> target,
                    TokenId blank) {
  if (log_probs.rank() != 2)
    throw DimensionError("ctc_loss: expected [T,|V|], got " + ad::shape_str(log_probs.shape()));
  return ctc_loss(log_probs.values(), log_probs.dim(0), log_probs.dim(1), target, blank);
}

std::vector<Real> ctc_grad(const AlignmentLattice& lat) {
  std::vector<Real> grad(lat.frames * lat.vocab, Real{0});
  if (lat.status != Status::kOk || lat.frames == 0) return grad;
  if (std::isnan(lat.log_likelihood)) {
    std::fill(grad.begin(), grad.end(), std::numeric_limits<Real>::quiet_NaN());
    return grad;
  }
  const std::size_t T = lat.frames;
  const std::size_t V = lat.vocab;
  const std::size_t S = lat.extended.size();
  const auto& z = lat.extended;
  const TokenId blank = z[0];
  auto lp = [&](std::size_t t, std::size_t s) { return lat.log_probs[t * V + std::size_t(z[s])]; };

  std::vector<Real> beta(T * S, kLogZero);
  auto B = [&](std::size_t t, std::size_t s) -> Real& { return beta[t * S + s]; };
  B(T - 1, S - 1) = clamp_log(lp(T - 1, S - 1));
  if (S > 1) B(T - 1, S - 2) = clamp_log(lp(T - 1, S - 2));
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      Real b = B(t + 1, s);
      if (s + 1 < S) b = log_sum_exp(b, B(t + 1, s + 1));
      if (s + 2 < S && z[s + 2] != blank && z[s + 2] != z[s]) b = log_sum_exp(b, B(t + 1, s + 2));
      B(t, s) = b <= kLogZero ? kLogZero : clamp_log(b + lp(t, s));
    }
  }
  // alpha and beta both include the emission at t; remove one copy.
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      const Real a = lat.alpha_at(t, s);
      const Real b = B(t, s);
      if (a <= kLogZero || b <= kLogZero) continue;
      const Real occupancy = std::exp(a + b - lp(t, s) - lat.log_likelihood);
      grad[t * V + std::size_t(z[s])] -= occupancy;
    }
  return grad;
}

ad::Tensor ctc_loss_batch(ad::Tape& tape, const ad::Tensor& log_probs,
                          const std::vector<std::vector<TokenId>>& targets,
                          std::span<const std::uint8_t> mask, TokenId blank,
                          BatchLossStats* stats) {
  if (log_probs.rank() != 3)
    throw DimensionError("ctc_loss_batch: expected [rows,T,|V|], got " +
                         ad::shape_str(log_probs.shape()));
  const std::size_t rows = log_probs.dim(0);
  const std::size_t T = log_probs.dim(1);
  const std::size_t V = log_probs.dim(2);
  if (targets.size() != rows || mask.size() != rows)
    throw DimensionError("ctc_loss_batch: " + std::to_string(rows) + " rows but " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  ad::count_forward();
  auto lattices = std::make_shared<std::vector<std::pair<std::size_t, AlignmentLattice>>>();
  BatchLossStats local;
  local.row_losses.assign(rows, std::numeric_limits<Real>::quiet_NaN());
  Real total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    auto lat = build_lattice(log_probs.values().subspan(r * T * V, T * V), T, V, targets[r], blank);
    if (lat.status != Status::kOk) {
      ++local.rows_infeasible;
      local.row_losses[r] = std::numeric_limits<Real>::infinity();
      continue;
    }
    local.row_losses[r] = -lat.log_likelihood;
    total += -lat.log_likelihood;
    ++local.rows_used;
    lattices->emplace_back(r, std::move(lat));
  }
  const std::size_t used = local.rows_used;
  if (stats) *stats = local;
  if (used == 0) return ad::Tensor::scalar(std::numeric_limits<Real>::infinity());
  ad::Tensor out = ad::Tensor::scalar(total / Real(used));
  if (tape.wants({&log_probs})) {
    tape.record("ctc_loss_batch", {log_probs}, out, [log_probs, out, lattices, used, T, V] {
      const Real g = out.grad()[0] / Real(used);
      auto gl = log_probs.grad();
      for (const auto& [r, lat] : *lattices) {
        const auto rg = ctc_grad(lat);
        for (std::size_t i = 0; i < T * V; ++i) gl[r * T * V + i] += g * rg[i];
      }
    });
  }
  return out;
}

std::vector<TokenId> greedy_decode(std::span<const Real> log_probs, std::size_t frames,
                                   std::size_t vocab) {
  if (log_probs.size() != frames * vocab)
    throw DimensionError("greedy_decode: size mismatch");
  std::vector<TokenId> out(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const Real* row = log_probs.data() + t * vocab;
    out[t] = TokenId(std::max_element(row, row + vocab) - row);
  }
  return out;
}

std::vector<TokenId> greedy_decode(const ad::Tensor& log_probs) {
  if (log_probs.rank() != 2)
    throw DimensionError("greedy_decode: expected [T,|V|], got " + ad::shape_str(log_probs.shape()));
  return greedy_decode(log_probs.values(), log_probs.dim(0), log_probs.dim(1));
}

std::vector<TokenId> collapse(std::span<const TokenId> raw, TokenId blank) {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (i > 0 && raw[i] == raw[i - 1]) continue;
    if (raw[i] != blank) out.push_back(raw[i]);
  }
  return out;
}

}  // namespace tet::ctc
