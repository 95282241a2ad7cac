#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fedsim {

// Global numeric mode. In f32 mode every stored value is rounded to the
// nearest float after each operation, so checkpoints and transmission
// accounting see genuine 32-bit values; accumulations still run in double.
// Gradient tests switch to f64. Set before building any graph; not meant to
// be flipped while tensors are live.
enum class Precision { f32, f64 };

void set_precision(Precision p);
Precision precision();

struct ScopedPrecision {
  explicit ScopedPrecision(Precision p) : saved(precision()) { set_precision(p); }
  ~ScopedPrecision() { set_precision(saved); }
  Precision saved;
};

// Disables graph recording within scope; forward values are still computed.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

bool grad_enabled();

class Tensor;

namespace detail {
struct TensorImpl;
Tensor make_from_impl(std::shared_ptr<TensorImpl> impl);
const std::shared_ptr<TensorImpl>& share(const Tensor& t);
}  // namespace detail

// Dense row-major tensor with reverse-mode autodiff. Copying a Tensor copies
// the handle, not the storage; clone() deep-copies. Graphs are per-thread by
// construction (nodes only reference their inputs), so distinct clients may
// train concurrently as long as no tensor is mutated while shared.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int64_t> shape, std::vector<double> data,
                          bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const;
  int64_t dim(int i) const { return shape()[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape().size()); }
  int64_t numel() const;

  std::span<const double> data() const;
  // Leaf-only in spirit: intended for optimizer updates and initialization.
  // Writes are quantized to the active precision via apply_values().
  std::span<double> raw_data();
  // Overwrites all values (quantized, finiteness-checked).
  void apply_values(std::span<const double> values);

  bool requires_grad() const;
  void set_requires_grad(bool v);  // leaves only

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Deep copy of values only; result is a leaf with the given requires_grad.
  Tensor clone(bool requires_grad) const;

  double item() const;  // scalar tensors

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend Tensor detail::make_from_impl(std::shared_ptr<detail::TensorImpl> impl);
  friend const std::shared_ptr<detail::TensorImpl>& detail::share(const Tensor& t);
};

std::string shape_string(const std::vector<int64_t>& shape);

// ---- operations -----------------------------------------------------------
// Backward rules: matmul dA = G.B^T, dB = A^T.G; the rest are the standard
// derivations, each implemented directly in tensor.cpp.

Tensor matmul(const Tensor& a, const Tensor& b);       // [m,k]x[k,n]
Tensor bmm(const Tensor& a, const Tensor& b);          // [g,m,k]x[g,k,n]
Tensor transpose_last2(const Tensor& x);               // 2D or 3D
// x [..., in] times w [in, out] plus optional bias [out]; x may be 2D or 3D.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias);

Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& x, double c);
Tensor sum_all(const Tensor& x);                       // -> scalar

Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-6);
Tensor gelu(const Tensor& x);                          // tanh approximation
// Mean over rows of (logsumexp(row) - row[label]).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Token-sequence helpers for [batch, tokens, dim] activations.
Tensor split_heads(const Tensor& x, int heads);        // -> [b*h, t, d/h]
Tensor merge_heads(const Tensor& x, int heads);        // inverse of split_heads
Tensor slice_lastdim(const Tensor& x, int64_t start, int64_t len);
// Broadcasts tokens [p, d] over the batch and prepends: -> [b, p+t, d].
Tensor prepend_tokens(const Tensor& tokens, const Tensor& x);
Tensor drop_tokens(const Tensor& x, int64_t count);    // remove first tokens
Tensor take_token(const Tensor& x, int64_t index);     // -> [b, d]
Tensor add_position_embedding(const Tensor& x, const Tensor& pos);  // pos [t, d]

// Populates grads of every requires_grad leaf reachable from loss (scalar).
// A second call on the same graph without re-running forward is an error.
void backward(const Tensor& loss);

}  // namespace fedsim
