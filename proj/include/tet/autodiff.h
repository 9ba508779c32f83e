#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// Every primitive takes the Tape it records onto as its first argument. A
// disabled tape (Tape::inference()) records nothing and never mutates, so a
// single one may be shared by concurrent forward passes.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tet/common.h"

namespace tet::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Leaves elements uninitialized on resize; primitives overwrite every output
// element anyway.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  using std::allocator<T>::allocator;
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};
using Buffer = std::vector<Real, DefaultInitAllocator<Real>>;

struct TensorImpl {
  Shape shape;
  Buffer values;
  std::vector<Real> grad;  // empty until first touched
  bool requires_grad = false;
  bool produced_on_tape = false;
};

// Shared handle to a tensor. Copies alias the same storage; use clone() for a
// deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values,
                     bool requires_grad = false);
  static Tensor scalar(Real v, bool requires_grad = false);
  // Contents unspecified; for outputs that are fully overwritten.
  static Tensor empty(Shape shape);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->values.size(); }

  std::span<Real> values() { return impl_->values; }
  std::span<const Real> values() const { return impl_->values; }
  Real item() const;

  // Allocates a zero buffer on first access.
  std::span<Real> grad() const;
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  Tensor clone() const;
  bool same(const Tensor& other) const { return impl_ == other.impl_; }
  TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

class Tape {
 public:
  using BackwardRule = std::function<void()>;

  struct Entry {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardRule rule;
  };

  Tape() = default;
  explicit Tape(bool enabled) : enabled_(enabled) {}
  static Tape inference() { return Tape(false); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool enabled() const { return enabled_; }

  // True when an op over these inputs must be recorded.
  bool wants(std::initializer_list<const Tensor*> inputs) const;

  // Records an op. Marks the output as requiring grad. Primitives outside this
  // file (e.g. the CTC loss) use this to attach their own backward rule.
  void record(const char* op, std::vector<Tensor> inputs, Tensor& output,
              BackwardRule rule);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

 private:
  bool enabled_ = true;
  std::vector<Entry> entries_;
};

// Counts primitive forward evaluations and backward-rule executions.
struct OpCounters {
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;
};
OpCounters op_counters();
void reset_op_counters();
void count_forward();

// Accumulates (+=) d loss / d leaf into every requires_grad leaf reachable on
// the tape. Intermediate grads are reset first, so a second call without
// zeroing leaves doubles their gradients.
void backward(const Tensor& loss, Tape& tape);

// --- primitives -------------------------------------------------------------

// [m,k]x[k,n] or batched [b,m,k]x[b,k,n].
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// Elementwise; b may also be a trailing-suffix broadcast of a (bias rows,
// positional tables).
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, Real s);
// Over the last dimension.
Tensor softmax_rows(Tape& tape, const Tensor& x);
Tensor log_softmax_rows(Tape& tape, const Tensor& x);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, Real eps = 1e-5);
// tanh approximation.
Tensor gelu(Tape& tape, const Tensor& x);
// Rows of table [V,d] selected by ids -> [ids.size(), d].
Tensor embedding(Tape& tape, const Tensor& table, std::span<const TokenId> ids);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor permute(Tape& tape, const Tensor& x, const std::vector<std::size_t>& axes);
// Swaps the last two dimensions.
Tensor transpose(Tape& tape, const Tensor& x);
Tensor log(Tape& tape, const Tensor& x);
Tensor exp(Tape& tape, const Tensor& x);
Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

// --- gradient checking ------------------------------------------------------

struct GradCheckOptions {
  Real h = 1e-5;
  Real tol = 1e-6;
  // Coordinates per parameter; larger tensors are sampled (seeded).
  std::size_t max_coords = 64;
  std::uint64_t seed = 0;
  // Relative error is |a - n| / max(|a|, |n|, denom_floor).
  Real denom_floor = 1e-8;
};

struct ParamCheck {
  std::size_t param = 0;
  std::size_t coords_checked = 0;
  Real max_rel_error = 0;
  std::size_t worst_coord = 0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  bool passed = true;
  std::string failure;  // empty when passed
  Real max_rel_error() const;
};

using ScalarFn = std::function<Tensor(Tape&)>;

// Compares backward() against central differences of f for every parameter.
GradCheckReport finite_diff_check(const ScalarFn& f, std::span<Tensor> params,
                                  const GradCheckOptions& opts = {});

}  // namespace tet::ad
