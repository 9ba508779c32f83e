#include "tet/autodiff.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace tet::ad {
namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

#if defined(__GLIBC__)
// Activations of a few MB are freed and reallocated on every step. Keep them
// on the heap instead of mapping fresh, zeroed pages from the kernel each time.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 512 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

std::atomic<std::uint64_t> g_forward{0};
std::atomic<std::uint64_t> g_backward{0};

void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

// Output tensor for a primitive: counts the forward call.
Tensor make_output(Shape shape) {
  count_forward();
  return Tensor::empty(std::move(shape));
}

std::size_t last_dim(const Tensor& x) {
  require(x.rank() >= 1, "expected rank >= 1, got scalar");
  return x.shape().back();
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->values.assign(ad::numel(shape), Real{0});
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (ad::numel(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values.assign(values.begin(), values.end());
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::empty(Shape shape) {
  auto impl = std::make_shared<TensorImpl>();
  impl->values.resize(ad::numel(shape));
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Real v, bool requires_grad) {
  return from({}, {v}, requires_grad);
}

Real Tensor::item() const {
  if (numel() != 1)
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->values[0];
}

std::span<Real> Tensor::grad() const {
  if (impl_->grad.size() != impl_->values.size())
    impl_->grad.assign(impl_->values.size(), Real{0});
  return impl_->grad;
}

void Tensor::zero_grad() const {
  std::fill(impl_->grad.begin(), impl_->grad.end(), Real{0});
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>(*impl_);
  impl->produced_on_tape = false;
  return Tensor(std::move(impl));
}

bool Tape::wants(std::initializer_list<const Tensor*> inputs) const {
  if (!enabled_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

void Tape::record(const char* op, std::vector<Tensor> inputs, Tensor& output,
                  BackwardRule rule) {
  output.set_requires_grad(true);
  output.impl()->produced_on_tape = true;
  entries_.push_back({op, std::move(inputs), output, std::move(rule)});
}

OpCounters op_counters() { return {g_forward.load(), g_backward.load()}; }

void reset_op_counters() {
  g_forward = 0;
  g_backward = 0;
}

void count_forward() { g_forward.fetch_add(1, std::memory_order_relaxed); }

void backward(const Tensor& loss, Tape& tape) {
  if (loss.numel() != 1 || loss.rank() != 0)
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  for (auto& e : tape.entries()) e.output.zero_grad();
  loss.grad()[0] = Real{1};
  const auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->rule();
    g_backward.fetch_add(1, std::memory_order_relaxed);
  }
  // Leaves that were never reached still get a populated buffer.
  for (auto& e : entries)
    for (auto& in : e.inputs)
      if (in.requires_grad()) (void)in.grad();
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  const bool batched = a.rank() == 3;
  const bool ok = (a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0)) ||
                  (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                   a.dim(2) == b.dim(1));
  require(ok, "matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                  shape_str(b.shape()));
  const std::size_t batch = batched ? a.dim(0) : 1;
  const auto m = static_cast<Eigen::Index>(a.dim(a.rank() - 2));
  const auto k = static_cast<Eigen::Index>(a.dim(a.rank() - 1));
  const auto n = static_cast<Eigen::Index>(b.dim(b.rank() - 1));
  Tensor out = make_output(batched ? Shape{batch, std::size_t(m), std::size_t(n)}
                                   : Shape{std::size_t(m), std::size_t(n)});
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMatMap am(a.values().data() + i * m * k, m, k);
    ConstMatMap bm(b.values().data() + i * k * n, k, n);
    MatMap cm(out.values().data() + i * m * n, m, n);
    cm.noalias() = am * bm;
  }
  if (tape.wants({&a, &b})) {
    tape.record("matmul", {a, b}, out, [a, b, out, batch, m, k, n] {
      for (std::size_t i = 0; i < batch; ++i) {
        ConstMatMap gc(out.grad().data() + i * m * n, m, n);
        if (a.requires_grad()) {
          ConstMatMap bm(b.values().data() + i * k * n, k, n);
          MatMap ga(a.grad().data() + i * m * k, m, k);
          ga.noalias() += gc * bm.transpose();
        }
        if (b.requires_grad()) {
          ConstMatMap am(a.values().data() + i * m * k, m, k);
          MatMap gb(b.grad().data() + i * k * n, k, n);
          gb.noalias() += am.transpose() * gc;
        }
      }
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const bool suffix = bs.size() <= as.size() &&
                      std::equal(bs.begin(), bs.end(), as.end() - bs.size());
  require(suffix, "add: shape " + shape_str(bs) + " does not broadcast onto " +
                      shape_str(as));
  Tensor out = make_output(as);
  const std::size_t nb = b.numel();
  const std::size_t reps = nb == 0 ? 0 : a.numel() / nb;
  {
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values();
    for (std::size_t r = 0; r < reps; ++r)
      for (std::size_t j = 0; j < nb; ++j) ov[r * nb + j] = av[r * nb + j] + bv[j];
  }
  if (tape.wants({&a, &b})) {
    tape.record("add", {a, b}, out, [a, b, out, reps, nb] {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t r = 0; r < reps; ++r)
          for (std::size_t j = 0; j < nb; ++j) gb[j] += go[r * nb + j];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shapes " + shape_str(a.shape()) +
                                      " and " + shape_str(b.shape()) + " differ");
  Tensor out = make_output(a.shape());
  {
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  }
  if (tape.wants({&a, &b})) {
    tape.record("mul", {a, b}, out, [a, b, out] {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        auto bv = b.values();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        auto av = a.values();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, Real s) {
  Tensor out = make_output(a.shape());
  {
    auto av = a.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
  }
  if (tape.wants({&a})) {
    tape.record("scale", {a}, out, [a, out, s] {
      auto go = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
    });
  }
  return out;
}

Tensor softmax_rows(Tape& tape, const Tensor& x) {
  const std::size_t n = last_dim(x);
  const std::size_t rows = n == 0 ? 0 : x.numel() / n;
  Tensor out = make_output(x.shape());
  {
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* in = xv.data() + r * n;
      Real* o = ov.data() + r * n;
      const Real mx = *std::max_element(in, in + n);
      Real z = 0;
      for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
      for (std::size_t j = 0; j < n; ++j) o[j] /= z;
    }
  }
  if (tape.wants({&x})) {
    tape.record("softmax_rows", {x}, out, [x, out, rows, n] {
      auto go = out.grad();
      auto yv = out.values();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t o = r * n;
        Real dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += go[o + j] * yv[o + j];
        for (std::size_t j = 0; j < n; ++j) gx[o + j] += yv[o + j] * (go[o + j] - dot);
      }
    });
  }
  return out;
}

Tensor log_softmax_rows(Tape& tape, const Tensor& x) {
  const std::size_t n = last_dim(x);
  const std::size_t rows = n == 0 ? 0 : x.numel() / n;
  Tensor out = make_output(x.shape());
  {
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* in = xv.data() + r * n;
      Real* o = ov.data() + r * n;
      const Real mx = *std::max_element(in, in + n);
      Real z = 0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
      const Real lz = mx + std::log(z);
      for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - lz;
    }
  }
  if (tape.wants({&x})) {
    tape.record("log_softmax_rows", {x}, out, [x, out, rows, n] {
      auto go = out.grad();
      auto yv = out.values();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t o = r * n;
        Real total = 0;
        for (std::size_t j = 0; j < n; ++j) total += go[o + j];
        for (std::size_t j = 0; j < n; ++j)
          gx[o + j] += go[o + j] - std::exp(yv[o + j]) * total;
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, Real eps) {
  const std::size_t d = last_dim(x);
  require(gain.shape() == Shape{d} && bias.shape() == Shape{d},
          "layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
              shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  Tensor out = make_output(x.shape());
  auto xhat = std::make_shared<std::vector<Real>>(x.numel());
  auto inv_std = std::make_shared<std::vector<Real>>(rows);
  {
    auto xv = x.values();
    auto ov = out.values();
    auto gv = gain.values();
    auto bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* in = xv.data() + r * d;
      Real mu = 0;
      for (std::size_t j = 0; j < d; ++j) mu += in[j];
      mu /= Real(d);
      Real var = 0;
      for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
      var /= Real(d);
      const Real is = Real{1} / std::sqrt(var + eps);
      (*inv_std)[r] = is;
      for (std::size_t j = 0; j < d; ++j) {
        const Real h = (in[j] - mu) * is;
        (*xhat)[r * d + j] = h;
        ov[r * d + j] = h * gv[j] + bv[j];
      }
    }
  }
  if (tape.wants({&x, &gain, &bias})) {
    tape.record("layer_norm", {x, gain, bias}, out,
                [x, gain, bias, out, xhat, inv_std, rows, d] {
      auto go = out.grad();
      auto gv = gain.values();
      const auto& h = *xhat;
      if (gain.requires_grad() || bias.requires_grad()) {
        auto gg = gain.grad();
        auto gb = bias.grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) {
            gg[j] += go[r * d + j] * h[r * d + j];
            gb[j] += go[r * d + j];
          }
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        std::vector<Real> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          Real mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = go[r * d + j] * gv[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[r * d + j];
          }
          mean_dh /= Real(d);
          mean_dh_h /= Real(d);
          const Real is = (*inv_std)[r];
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] += is * (dh[j] - mean_dh - h[r * d + j] * mean_dh_h);
        }
      }
    });
  }
  return out;
}

namespace {
constexpr Real kGeluC = Real(0.7978845608028654);  // sqrt(2/pi)
constexpr Real kGeluA = Real(0.044715);
}  // namespace

Tensor gelu(Tape& tape, const Tensor& x) {
  Tensor out = make_output(x.shape());
  const bool taped = tape.wants({&x});
  auto tanh_cache = taped ? std::make_shared<Buffer>(x.numel()) : nullptr;
  {
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
      const Real v = xv[i];
      const Real t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      if (tanh_cache) (*tanh_cache)[i] = t;
      ov[i] = Real(0.5) * v * (Real{1} + t);
    }
  }
  if (taped) {
    tape.record("gelu", {x}, out, [x, out, tanh_cache] {
      auto go = out.grad();
      auto xv = x.values();
      auto gx = x.grad();
      const auto& tc = *tanh_cache;
      for (std::size_t i = 0; i < go.size(); ++i) {
        const Real v = xv[i];
        const Real t = tc[i];
        const Real dt = (Real{1} - t * t) * kGeluC * (Real{1} + 3 * kGeluA * v * v);
        gx[i] += go[i] * (Real(0.5) * (Real{1} + t) + Real(0.5) * v * dt);
      }
    });
  }
  return out;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const TokenId> ids) {
  require(table.rank() == 2, "embedding: table must be [V,d], got " +
                                 shape_str(table.shape()));
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  for (TokenId id : ids)
    if (id < 0 || std::size_t(id) >= vocab)
      throw ContractError("embedding: id " + std::to_string(id) +
                          " out of range for vocabulary of " + std::to_string(vocab));
  Tensor out = make_output({ids.size(), d});
  auto tv = table.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + std::size_t(ids[i]) * d, d, ov.data() + i * d);
  if (tape.wants({&table})) {
    tape.record("embedding", {table}, out,
                [table, out, idv = std::vector<TokenId>(ids.begin(), ids.end()), d] {
      auto go = out.grad();
      auto gt = table.grad();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
          gt[std::size_t(idv[i]) * d + j] += go[i * d + j];
    });
  }
  return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  require(numel(shape) == x.numel(), "reshape: cannot view " +
                                         shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor out = make_output(std::move(shape));
  std::copy(x.values().begin(), x.values().end(), out.values().begin());
  if (tape.wants({&x})) {
    tape.record("reshape", {x}, out, [x, out] {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

namespace {

// Visits (output offset, source offset) pairs of a permutation in output
// order. The innermost output axis is handled as a strided run.
template <typename F>
void for_each_permuted(const Shape& out_shape, const std::vector<std::size_t>& src_stride,
                       F&& f) {
  const std::size_t r = out_shape.size();
  const std::size_t total = numel(out_shape);
  if (total == 0) return;
  if (r == 0) {
    f(0, 0, 1, 1);
    return;
  }
  const std::size_t inner = out_shape[r - 1];
  const std::size_t inner_stride = src_stride[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    f(o, src, inner, inner_stride);
    for (std::size_t i = r - 1; i-- > 0;) {
      if (++idx[i] < out_shape[i]) {
        src += src_stride[i];
        break;
      }
      src -= src_stride[i] * (out_shape[i] - 1);
      idx[i] = 0;
    }
  }
}

}  // namespace

Tensor permute(Tape& tape, const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  bool valid = axes.size() == r;
  for (std::size_t a : axes) {
    if (!valid || a >= r || seen[a]) { valid = false; break; }
    seen[a] = true;
  }
  require(valid, "permute: invalid axes for shape " + shape_str(x.shape()));
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(axes[i]);
  Tensor out = make_output(out_shape);

  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_stride[axes[i]];
  {
    const Real* xv = x.values().data();
    Real* ov = out.values().data();
    for_each_permuted(out_shape, src_stride,
                      [&](std::size_t o, std::size_t s, std::size_t n, std::size_t st) {
                        for (std::size_t j = 0; j < n; ++j) ov[o + j] = xv[s + j * st];
                      });
  }
  if (tape.wants({&x})) {
    tape.record("permute", {x}, out, [x, out, out_shape, src_stride] {
      const Real* go = out.grad().data();
      Real* gx = x.grad().data();
      for_each_permuted(out_shape, src_stride,
                        [&](std::size_t o, std::size_t s, std::size_t n, std::size_t st) {
                          for (std::size_t j = 0; j < n; ++j) gx[s + j * st] += go[o + j];
                        });
    });
  }
  return out;
}

Tensor transpose(Tape& tape, const Tensor& x) {
  require(x.rank() >= 2, "transpose: rank must be >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(tape, x, axes);
}

Tensor log(Tape& tape, const Tensor& x) {
  Tensor out = make_output(x.shape());
  {
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(xv[i]);
  }
  if (tape.wants({&x})) {
    tape.record("log", {x}, out, [x, out] {
      auto go = out.grad();
      auto xv = x.values();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] / xv[i];
    });
  }
  return out;
}

Tensor exp(Tape& tape, const Tensor& x) {
  Tensor out = make_output(x.shape());
  {
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(xv[i]);
  }
  if (tape.wants({&x})) {
    tape.record("exp", {x}, out, [x, out] {
      auto go = out.grad();
      auto ov = out.values();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * ov[i];
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  Tensor out = make_output({});
  Real s = 0;
  for (Real v : x.values()) s += v;
  out.values()[0] = s;
  if (tape.wants({&x})) {
    tape.record("sum", {x}, out, [x, out] {
      const Real g = out.grad()[0];
      for (Real& gx : x.grad()) gx += g;
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
  require(x.numel() > 0, "mean: empty tensor");
  return scale(tape, sum(tape, x), Real{1} / Real(x.numel()));
}

Real GradCheckReport::max_rel_error() const {
  Real m = 0;
  for (const auto& p : params) m = std::max(m, p.max_rel_error);
  return m;
}

GradCheckReport finite_diff_check(const ScalarFn& f, std::span<Tensor> params,
                                  const GradCheckOptions& opts) {
  if (!(opts.h > 0)) throw ContractError("finite_diff_check: h must be positive");
  GradCheckReport report;

  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = f(tape);
    backward(loss, tape);
  }
  std::vector<std::vector<Real>> analytic;
  for (auto& p : params) {
    auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  auto eval = [&] {
    Tape tape = Tape::inference();
    return f(tape).item();
  };

  std::mt19937_64 rng(opts.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opts.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    ParamCheck check{pi, 0, 0, 0};
    auto v = p.values();
    for (std::size_t c : coords) {
      const Real saved = v[c];
      v[c] = saved + opts.h;
      const Real up = eval();
      v[c] = saved - opts.h;
      const Real down = eval();
      v[c] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.passed = false;
        if (report.failure.empty())
          report.failure = "non-finite objective at param " + std::to_string(pi) +
                           " coord " + std::to_string(c);
        continue;
      }
      const Real numeric = (up - down) / (2 * opts.h);
      const Real a = analytic[pi][c];
      const Real denom = std::max({std::abs(a), std::abs(numeric), opts.denom_floor});
      const Real rel = std::abs(a - numeric) / denom;
      ++check.coords_checked;
      if (rel > check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_coord = c;
      }
    }
    if (check.max_rel_error > opts.tol) {
      report.passed = false;
      if (report.failure.empty()) {
        std::ostringstream os;
        os << "param " << pi << " coord " << check.worst_coord
           << " relative error " << check.max_rel_error << " > " << opts.tol;
        report.failure = os.str();
      }
    }
    report.params.push_back(check);
  }
  return report;
}

}  // namespace tet::ad
