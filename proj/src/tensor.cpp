#include "fedsim/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace fedsim {

namespace {

Precision g_precision = Precision::f32;
thread_local bool t_grad_enabled = true;

constexpr double kGeluCoeff = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

}  // namespace

void set_precision(Precision p) { g_precision = p; }
Precision precision() { return g_precision; }

NoGradGuard::NoGradGuard() : saved_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = saved_; }
bool grad_enabled() { return t_grad_enabled; }

std::string shape_string(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

struct TensorImpl {
  std::vector<int64_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::unique_ptr<std::vector<double>> grad;
  // Graph edges; empty for leaves and for values computed under NoGradGuard.
  // Parents are owned here, which is what keeps a live graph reachable.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;
  const char* op = "leaf";
  bool backward_done = false;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }

  std::vector<double>& grad_buf() {
    if (!grad) grad = std::make_unique<std::vector<double>>(data.size(), 0.0);
    return *grad;
  }
};

Tensor make_from_impl(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }
const std::shared_ptr<TensorImpl>& share(const Tensor& t) { return t.impl_; }

}  // namespace detail

using detail::TensorImpl;

namespace {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one dimension");
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) {
      throw std::invalid_argument("tensor dimensions must be positive, got " + shape_string(shape));
    }
    n *= d;
  }
  return n;
}

// Rounds to f32 storage in f32 mode and rejects non-finite forward values.
void finalize_values(std::vector<double>& v, const char* op) {
  if (g_precision == Precision::f32) {
    for (double& x : v) {
      x = static_cast<double>(static_cast<float>(x));
      if (!std::isfinite(x)) throw std::runtime_error(std::string(op) + " produced a non-finite value");
    }
  } else {
    for (double x : v) {
      if (!std::isfinite(x)) throw std::runtime_error(std::string(op) + " produced a non-finite value");
    }
  }
}

std::shared_ptr<TensorImpl> new_impl(std::vector<int64_t> shape, std::vector<double> data,
                                     const char* op) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = op;
  return impl;
}

// C[m,n] += A[m,k] * B[k,n]
void mm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double aip = arow[p];
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
void mm_acc_nt(const double* a, const double* b, double* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[p] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void mm_acc_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double aip = arow[p];
      double* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// Builds the output node and wires parent edges when gradients are flowing.
// Backward closures capture raw TensorImpl pointers; the child's parents
// vector owns them, and parameter values must not be mutated between forward
// and backward (the engine updates weights only after backward).
void accumulate_into(TensorImpl* t, const std::vector<double>& g) {
  auto& buf = t->grad_buf();
  for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

Tensor make_node(const char* op, std::vector<int64_t> shape, std::vector<double> data,
                 std::initializer_list<const Tensor*> inputs,
                 std::function<void(TensorImpl&)> backward_fn) {
  finalize_values(data, op);
  auto impl = new_impl(std::move(shape), std::move(data), op);
  bool track = false;
  if (t_grad_enabled) {
    for (const Tensor* t : inputs) {
      if (t && t->defined() && t->impl()->requires_grad) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    impl->requires_grad = true;
    for (const Tensor* t : inputs) {
      if (t && t->defined()) impl->parents.push_back(detail::share(*t));
    }
    impl->backward_fn = std::move(backward_fn);
  }
  return detail::make_from_impl(std::move(impl));
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

namespace {

Tensor make_leaf(std::vector<int64_t> shape, std::vector<double> data, bool requires_grad) {
  auto impl = new_impl(std::move(shape), std::move(data), "leaf");
  impl->requires_grad = requires_grad;
  return detail::make_from_impl(std::move(impl));
}

}  // namespace

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
  int64_t n = shape_numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, bool requires_grad) {
  int64_t n = shape_numel(shape);
  std::vector<double> data(static_cast<size_t>(n), value);
  finalize_values(data, "full");
  return make_leaf(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> data, bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_string(shape));
  }
  finalize_values(data, "from_data");
  return make_leaf(std::move(shape), std::move(data), requires_grad);
}

const std::vector<int64_t>& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::numel() const { return impl_->numel(); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::raw_data() { return impl_->data; }

void Tensor::apply_values(std::span<const double> values) {
  if (static_cast<int64_t>(values.size()) != numel()) {
    throw std::invalid_argument("apply_values length mismatch");
  }
  std::copy(values.begin(), values.end(), impl_->data.begin());
  finalize_values(impl_->data, "apply_values");
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  if (!impl_->parents.empty()) throw std::logic_error("set_requires_grad is for leaf tensors");
  impl_->requires_grad = v;
}

bool Tensor::has_grad() const { return impl_->grad != nullptr; }

std::span<const double> Tensor::grad() const {
  if (!impl_->grad) throw std::logic_error("tensor has no gradient");
  return *impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.reset(); }

Tensor Tensor::clone(bool requires_grad) const {
  return make_leaf(impl_->shape, impl_->data, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() requires a scalar tensor, got " + shape_string(shape()));
  return impl_->data[0];
}

// ---- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
  }
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  mm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_node("matmul", {m, n}, std::move(out), {&a, &b}, [ai, bi, m, k, n](TensorImpl& self) {
    const double* g = self.grad->data();
    if (ai->requires_grad) mm_acc_nt(g, bi->data.data(), ai->grad_buf().data(), m, n, k);
    if (bi->requires_grad) mm_acc_tn(ai->data.data(), g, bi->grad_buf().data(), m, k, n);
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw std::invalid_argument("bmm shape mismatch: " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
  }
  int64_t gdim = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(static_cast<size_t>(gdim * m * n), 0.0);
  for (int64_t s = 0; s < gdim; ++s) {
    mm_acc(a.data().data() + s * m * k, b.data().data() + s * k * n, out.data() + s * m * n, m, k, n);
  }
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_node("bmm", {gdim, m, n}, std::move(out), {&a, &b},
                   [ai, bi, gdim, m, k, n](TensorImpl& self) {
                     const double* g = self.grad->data();
                     for (int64_t s = 0; s < gdim; ++s) {
                       const double* gs = g + s * m * n;
                       if (ai->requires_grad) {
                         mm_acc_nt(gs, bi->data.data() + s * k * n, ai->grad_buf().data() + s * m * k, m, n, k);
                       }
                       if (bi->requires_grad) {
                         mm_acc_tn(ai->data.data() + s * m * k, gs, bi->grad_buf().data() + s * k * n, m, k, n);
                       }
                     }
                   });
}

namespace {

void transpose2d(const double* src, double* dst, int64_t rows, int64_t cols) {
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

}  // namespace

Tensor transpose_last2(const Tensor& x) {
  if (x.ndim() != 2 && x.ndim() != 3) {
    throw std::invalid_argument("transpose_last2 expects 2D or 3D, got " + shape_string(x.shape()));
  }
  int64_t batch = x.ndim() == 3 ? x.dim(0) : 1;
  int64_t rows = x.dim(x.ndim() - 2), cols = x.dim(x.ndim() - 1);
  std::vector<double> out(static_cast<size_t>(x.numel()));
  for (int64_t s = 0; s < batch; ++s) {
    transpose2d(x.data().data() + s * rows * cols, out.data() + s * rows * cols, rows, cols);
  }
  std::vector<int64_t> oshape = x.shape();
  std::swap(oshape[oshape.size() - 1], oshape[oshape.size() - 2]);
  TensorImpl* xi = x.impl();
  return make_node("transpose_last2", std::move(oshape), std::move(out), {&x},
                   [xi, batch, rows, cols](TensorImpl& self) {
                     if (!xi->requires_grad) return;
                     auto& gx = xi->grad_buf();
                     const double* g = self.grad->data();
                     for (int64_t s = 0; s < batch; ++s) {
                       const double* gs = g + s * rows * cols;
                       double* dst = gx.data() + s * rows * cols;
                       // grad of transpose is the transpose of grad
                       for (int64_t i = 0; i < cols; ++i) {
                         for (int64_t j = 0; j < rows; ++j) dst[j * cols + i] += gs[i * rows + j];
                       }
                     }
                   });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias) {
  if ((x.ndim() != 2 && x.ndim() != 3) || w.ndim() != 2 || x.dim(x.ndim() - 1) != w.dim(0)) {
    throw std::invalid_argument("linear shape mismatch: " + shape_string(x.shape()) + " x " +
                                shape_string(w.shape()));
  }
  int64_t in = w.dim(0), out_dim = w.dim(1);
  int64_t rows = x.numel() / in;
  if (bias && (bias->ndim() != 1 || bias->dim(0) != out_dim)) {
    throw std::invalid_argument("linear bias shape " + shape_string(bias->shape()) +
                                " does not match output dim " + std::to_string(out_dim));
  }
  std::vector<double> out(static_cast<size_t>(rows * out_dim), 0.0);
  mm_acc(x.data().data(), w.data().data(), out.data(), rows, in, out_dim);
  if (bias) {
    const double* b = bias->data().data();
    for (int64_t r = 0; r < rows; ++r) {
      double* orow = out.data() + r * out_dim;
      for (int64_t j = 0; j < out_dim; ++j) orow[j] += b[j];
    }
  }
  std::vector<int64_t> oshape = x.shape();
  oshape.back() = out_dim;
  TensorImpl* xi = x.impl();
  TensorImpl* wi = w.impl();
  TensorImpl* bi = bias ? bias->impl() : nullptr;
  return make_node("linear", std::move(oshape), std::move(out), {&x, &w, bias},
                   [xi, wi, bi, rows, in, out_dim](TensorImpl& self) {
                     const double* g = self.grad->data();
                     if (xi->requires_grad) mm_acc_nt(g, wi->data.data(), xi->grad_buf().data(), rows, out_dim, in);
                     if (wi->requires_grad) mm_acc_tn(xi->data.data(), g, wi->grad_buf().data(), rows, in, out_dim);
                     if (bi && bi->requires_grad) {
                       auto& gb = bi->grad_buf();
                       for (int64_t r = 0; r < rows; ++r) {
                         const double* grow = g + r * out_dim;
                         for (int64_t j = 0; j < out_dim; ++j) gb[j] += grow[j];
                       }
                     }
                   });
}

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + " shape mismatch: " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> out(a.data().begin(), a.data().end());
  const double* bd = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_node("add", a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl& self) {
    const auto& g = *self.grad;
    if (ai->requires_grad) accumulate_into(ai, g);
    if (bi->requires_grad) accumulate_into(bi, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<double> out(a.data().begin(), a.data().end());
  const double* bd = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_node("sub", a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl& self) {
    const auto& g = *self.grad;
    if (ai->requires_grad) accumulate_into(ai, g);
    if (bi->requires_grad) {
      auto& gb = bi->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<double> out(a.data().begin(), a.data().end());
  const double* bd = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_node("mul", a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl& self) {
    const auto& g = *self.grad;
    if (ai->requires_grad) {
      auto& ga = ai->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& gb = bi->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
    }
  });
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v *= c;
  TensorImpl* xi = x.impl();
  return make_node("scale", x.shape(), std::move(out), {&x}, [xi, c](TensorImpl& self) {
    if (!xi->requires_grad) return;
    auto& gx = xi->grad_buf();
    const auto& g = *self.grad;
    for (size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

Tensor sum_all(const Tensor& x) {
  // Sequential accumulation over the flat index keeps reductions deterministic.
  double s = 0.0;
  for (double v : x.data()) s += v;
  TensorImpl* xi = x.impl();
  return make_node("sum_all", {1}, {s}, {&x}, [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    double g = (*self.grad)[0];
    auto& gx = xi->grad_buf();
    for (double& v : gx) v += g;
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  int64_t d = x.dim(x.ndim() - 1);
  int64_t rows = x.numel() / d;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* xd = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xd + r * d;
    double* orow = out.data() + r * d;
    double mx = row[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    for (int64_t j = 0; j < d; ++j) orow[j] /= s;
  }
  TensorImpl* xi = x.impl();
  return make_node("softmax", x.shape(), std::move(out), {&x}, [xi, rows, d](TensorImpl& self) {
    if (!xi->requires_grad) return;
    auto& gx = xi->grad_buf();
    const double* g = self.grad->data();
    const double* y = self.data.data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* grow = g + r * d;
      const double* yrow = y + r * d;
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += grow[j] * yrow[j];
      double* gxrow = gx.data() + r * d;
      for (int64_t j = 0; j < d; ++j) gxrow[j] += yrow[j] * (grow[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  int64_t d = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d) {
    throw std::invalid_argument("layer_norm affine shape mismatch for input " + shape_string(x.shape()));
  }
  int64_t rows = x.numel() / d;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* xd = x.data().data();
  const double* gd = gain.data().data();
  const double* bd = bias.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xd + r * d;
    double* orow = out.data() + r * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j) orow[j] = (row[j] - mean) * inv * gd[j] + bd[j];
  }
  TensorImpl* xi = x.impl();
  TensorImpl* gi = gain.impl();
  TensorImpl* bi = bias.impl();
  return make_node("layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
                   [xi, gi, bi, rows, d, eps](TensorImpl& self) {
                     const double* g = self.grad->data();
                     const double* xd2 = xi->data.data();
                     const double* gd2 = gi->data.data();
                     std::vector<double> xhat(static_cast<size_t>(d));
                     for (int64_t r = 0; r < rows; ++r) {
                       const double* row = xd2 + r * d;
                       const double* grow = g + r * d;
                       double mean = 0.0;
                       for (int64_t j = 0; j < d; ++j) mean += row[j];
                       mean /= static_cast<double>(d);
                       double var = 0.0;
                       for (int64_t j = 0; j < d; ++j) {
                         double c = row[j] - mean;
                         var += c * c;
                       }
                       var /= static_cast<double>(d);
                       double inv = 1.0 / std::sqrt(var + eps);
                       for (int64_t j = 0; j < d; ++j) xhat[static_cast<size_t>(j)] = (row[j] - mean) * inv;
                       if (gi->requires_grad) {
                         auto& gg = gi->grad_buf();
                         for (int64_t j = 0; j < d; ++j) gg[j] += grow[j] * xhat[static_cast<size_t>(j)];
                       }
                       if (bi->requires_grad) {
                         auto& gb = bi->grad_buf();
                         for (int64_t j = 0; j < d; ++j) gb[j] += grow[j];
                       }
                       if (xi->requires_grad) {
                         double mean_gh = 0.0, mean_ghx = 0.0;
                         for (int64_t j = 0; j < d; ++j) {
                           double gh = grow[j] * gd2[j];
                           mean_gh += gh;
                           mean_ghx += gh * xhat[static_cast<size_t>(j)];
                         }
                         mean_gh /= static_cast<double>(d);
                         mean_ghx /= static_cast<double>(d);
                         auto& gx = xi->grad_buf();
                         double* gxrow = gx.data() + r * d;
                         for (int64_t j = 0; j < d; ++j) {
                           double gh = grow[j] * gd2[j];
                           gxrow[j] += inv * (gh - mean_gh - xhat[static_cast<size_t>(j)] * mean_ghx);
                         }
                       }
                     }
                   });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* xd = x.data().data();
  for (size_t i = 0; i < out.size(); ++i) {
    double v = xd[i];
    double u = kGeluCoeff * (v + kGeluCubic * v * v * v);
    out[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  TensorImpl* xi = x.impl();
  return make_node("gelu", x.shape(), std::move(out), {&x}, [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    auto& gx = xi->grad_buf();
    const auto& g = *self.grad;
    const double* xd2 = xi->data.data();
    for (size_t i = 0; i < g.size(); ++i) {
      double v = xd2[i];
      double u = kGeluCoeff * (v + kGeluCubic * v * v * v);
      double t = std::tanh(u);
      double sech2 = 1.0 - t * t;
      double du = kGeluCoeff * (1.0 + 3.0 * kGeluCubic * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) {
    throw std::invalid_argument("cross_entropy expects 2D logits, got " + shape_string(logits.shape()));
  }
  int64_t b = logits.dim(0), c = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != b) {
    throw std::invalid_argument("cross_entropy labels length " + std::to_string(labels.size()) +
                                " does not match batch " + std::to_string(b));
  }
  for (int v : labels) {
    if (v < 0 || v >= c) {
      throw std::invalid_argument("cross_entropy label " + std::to_string(v) + " out of range [0, " +
                                  std::to_string(c) + ")");
    }
  }
  const double* z = logits.data().data();
  double total = 0.0;
  for (int64_t r = 0; r < b; ++r) {
    const double* row = z + r * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    total += std::log(s) + mx - row[labels[static_cast<size_t>(r)]];
  }
  double loss = total / static_cast<double>(b);
  TensorImpl* zi = logits.impl();
  std::vector<int> saved_labels = labels;
  return make_node("cross_entropy", {1}, {loss}, {&logits},
                   [zi, b, c, saved_labels = std::move(saved_labels)](TensorImpl& self) {
                     if (!zi->requires_grad) return;
                     double go = (*self.grad)[0] / static_cast<double>(b);
                     auto& gz = zi->grad_buf();
                     const double* z2 = zi->data.data();
                     for (int64_t r = 0; r < b; ++r) {
                       const double* row = z2 + r * c;
                       double mx = row[0];
                       for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                       double s = 0.0;
                       for (int64_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
                       double* grow = gz.data() + r * c;
                       for (int64_t j = 0; j < c; ++j) {
                         double p = std::exp(row[j] - mx) / s;
                         grow[j] += go * (p - (j == saved_labels[static_cast<size_t>(r)] ? 1.0 : 0.0));
                       }
                     }
                   });
}

Tensor split_heads(const Tensor& x, int heads) {
  if (x.ndim() != 3 || x.dim(2) % heads != 0) {
    throw std::invalid_argument("split_heads: input " + shape_string(x.shape()) +
                                " not divisible into " + std::to_string(heads) + " heads");
  }
  int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  int64_t dh = d / heads;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* xd = x.data().data();
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t ti = 0; ti < t; ++ti) {
        const double* src = xd + (bi * t + ti) * d + h * dh;
        double* dst = out.data() + ((bi * heads + h) * t + ti) * dh;
        std::copy(src, src + dh, dst);
      }
    }
  }
  TensorImpl* xi = x.impl();
  return make_node("split_heads", {b * heads, t, dh}, std::move(out), {&x},
                   [xi, b, t, d, dh, heads](TensorImpl& self) {
                     if (!xi->requires_grad) return;
                     auto& gx = xi->grad_buf();
                     const double* g = self.grad->data();
                     for (int64_t bi = 0; bi < b; ++bi) {
                       for (int64_t h = 0; h < heads; ++h) {
                         for (int64_t ti = 0; ti < t; ++ti) {
                           const double* src = g + ((bi * heads + h) * t + ti) * dh;
                           double* dst = gx.data() + (bi * t + ti) * d + h * dh;
                           for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                         }
                       }
                     }
                   });
}

Tensor merge_heads(const Tensor& x, int heads) {
  if (x.ndim() != 3 || x.dim(0) % heads != 0) {
    throw std::invalid_argument("merge_heads: input " + shape_string(x.shape()) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  int64_t b = x.dim(0) / heads, t = x.dim(1), dh = x.dim(2);
  int64_t d = dh * heads;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* xd = x.data().data();
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t ti = 0; ti < t; ++ti) {
        const double* src = xd + ((bi * heads + h) * t + ti) * dh;
        double* dst = out.data() + (bi * t + ti) * d + h * dh;
        std::copy(src, src + dh, dst);
      }
    }
  }
  TensorImpl* xi = x.impl();
  return make_node("merge_heads", {b, t, d}, std::move(out), {&x},
                   [xi, b, t, d, dh, heads](TensorImpl& self) {
                     if (!xi->requires_grad) return;
                     auto& gx = xi->grad_buf();
                     const double* g = self.grad->data();
                     for (int64_t bi = 0; bi < b; ++bi) {
                       for (int64_t h = 0; h < heads; ++h) {
                         for (int64_t ti = 0; ti < t; ++ti) {
                           const double* src = g + (bi * t + ti) * d + h * dh;
                           double* dst = gx.data() + ((bi * heads + h) * t + ti) * dh;
                           for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                         }
                       }
                     }
                   });
}

Tensor slice_lastdim(const Tensor& x, int64_t start, int64_t len) {
  int64_t d = x.dim(x.ndim() - 1);
  if (start < 0 || len < 1 || start + len > d) {
    throw std::invalid_argument("slice_lastdim [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of range for " +
                                shape_string(x.shape()));
  }
  int64_t rows = x.numel() / d;
  std::vector<double> out(static_cast<size_t>(rows * len));
  const double* xd = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(xd + r * d + start, xd + r * d + start + len, out.data() + r * len);
  }
  std::vector<int64_t> oshape = x.shape();
  oshape.back() = len;
  TensorImpl* xi = x.impl();
  return make_node("slice_lastdim", std::move(oshape), std::move(out), {&x},
                   [xi, rows, d, start, len](TensorImpl& self) {
                     if (!xi->requires_grad) return;
                     auto& gx = xi->grad_buf();
                     const double* g = self.grad->data();
                     for (int64_t r = 0; r < rows; ++r) {
                       double* dst = gx.data() + r * d + start;
                       const double* src = g + r * len;
                       for (int64_t j = 0; j < len; ++j) dst[j] += src[j];
                     }
                   });
}

Tensor prepend_tokens(const Tensor& tokens, const Tensor& x) {
  if (tokens.ndim() != 2 || x.ndim() != 3 || tokens.dim(1) != x.dim(2)) {
    throw std::invalid_argument("prepend_tokens shape mismatch: " + shape_string(tokens.shape()) +
                                " onto " + shape_string(x.shape()));
  }
  int64_t p = tokens.dim(0), d = tokens.dim(1);
  int64_t b = x.dim(0), t = x.dim(1);
  std::vector<double> out(static_cast<size_t>(b * (p + t) * d));
  const double* td = tokens.data().data();
  const double* xd = x.data().data();
  for (int64_t bi = 0; bi < b; ++bi) {
    double* dst = out.data() + bi * (p + t) * d;
    std::copy(td, td + p * d, dst);
    std::copy(xd + bi * t * d, xd + (bi + 1) * t * d, dst + p * d);
  }
  TensorImpl* ti = tokens.impl();
  TensorImpl* xi = x.impl();
  return make_node("prepend_tokens", {b, p + t, d}, std::move(out), {&tokens, &x},
                   [ti, xi, p, d, b, t](TensorImpl& self) {
                     const double* g = self.grad->data();
                     if (ti->requires_grad) {
                       auto& gt = ti->grad_buf();
                       for (int64_t bi = 0; bi < b; ++bi) {
                         const double* src = g + bi * (p + t) * d;
                         for (int64_t j = 0; j < p * d; ++j) gt[j] += src[j];
                       }
                     }
                     if (xi->requires_grad) {
                       auto& gx = xi->grad_buf();
                       for (int64_t bi = 0; bi < b; ++bi) {
                         const double* src = g + bi * (p + t) * d + p * d;
                         double* dst = gx.data() + bi * t * d;
                         for (int64_t j = 0; j < t * d; ++j) dst[j] += src[j];
                       }
                     }
                   });
}

Tensor drop_tokens(const Tensor& x, int64_t count) {
  if (x.ndim() != 3 || count < 0 || count >= x.dim(1)) {
    throw std::invalid_argument("drop_tokens: cannot drop " + std::to_string(count) +
                                " tokens from " + shape_string(x.shape()));
  }
  int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  int64_t keep = t - count;
  std::vector<double> out(static_cast<size_t>(b * keep * d));
  const double* xd = x.data().data();
  for (int64_t bi = 0; bi < b; ++bi) {
    std::copy(xd + (bi * t + count) * d, xd + (bi + 1) * t * d, out.data() + bi * keep * d);
  }
  TensorImpl* xi = x.impl();
  return make_node("drop_tokens", {b, keep, d}, std::move(out), {&x},
                   [xi, b, t, d, count, keep](TensorImpl& self) {
                     if (!xi->requires_grad) return;
                     auto& gx = xi->grad_buf();
                     const double* g = self.grad->data();
                     for (int64_t bi = 0; bi < b; ++bi) {
                       double* dst = gx.data() + (bi * t + count) * d;
                       const double* src = g + bi * keep * d;
                       for (int64_t j = 0; j < keep * d; ++j) dst[j] += src[j];
                     }
                   });
}

Tensor take_token(const Tensor& x, int64_t index) {
  if (x.ndim() != 3 || index < 0 || index >= x.dim(1)) {
    throw std::invalid_argument("take_token index " + std::to_string(index) + " out of range for " +
                                shape_string(x.shape()));
  }
  int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  std::vector<double> out(static_cast<size_t>(b * d));
  const double* xd = x.data().data();
  for (int64_t bi = 0; bi < b; ++bi) {
    std::copy(xd + (bi * t + index) * d, xd + (bi * t + index + 1) * d, out.data() + bi * d);
  }
  TensorImpl* xi = x.impl();
  return make_node("take_token", {b, d}, std::move(out), {&x},
                   [xi, b, t, d, index](TensorImpl& self) {
                     if (!xi->requires_grad) return;
                     auto& gx = xi->grad_buf();
                     const double* g = self.grad->data();
                     for (int64_t bi = 0; bi < b; ++bi) {
                       double* dst = gx.data() + (bi * t + index) * d;
                       const double* src = g + bi * d;
                       for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                     }
                   });
}

Tensor add_position_embedding(const Tensor& x, const Tensor& pos) {
  if (x.ndim() != 3 || pos.ndim() != 2 || pos.dim(0) != x.dim(1) || pos.dim(1) != x.dim(2)) {
    throw std::invalid_argument("add_position_embedding shape mismatch: " + shape_string(x.shape()) +
                                " + " + shape_string(pos.shape()));
  }
  int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  std::vector<double> out(x.data().begin(), x.data().end());
  const double* pd = pos.data().data();
  for (int64_t bi = 0; bi < b; ++bi) {
    double* dst = out.data() + bi * t * d;
    for (int64_t j = 0; j < t * d; ++j) dst[j] += pd[j];
  }
  TensorImpl* xi = x.impl();
  TensorImpl* pi = pos.impl();
  return make_node("add_position_embedding", x.shape(), std::move(out), {&x, &pos},
                   [xi, pi, b, t, d](TensorImpl& self) {
                     const double* g = self.grad->data();
                     if (xi->requires_grad) {
                       auto& gx = xi->grad_buf();
                       for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                     }
                     if (pi->requires_grad) {
                       auto& gp = pi->grad_buf();
                       for (int64_t bi = 0; bi < b; ++bi) {
                         const double* src = g + bi * t * d;
                         for (int64_t j = 0; j < t * d; ++j) gp[j] += src[j];
                       }
                     }
                   });
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got " + shape_string(loss.shape()));
  }
  TensorImpl* root = loss.impl();
  if (root->backward_done) {
    throw std::logic_error("backward already called on this graph; rerun forward first");
  }
  if (!root->requires_grad) {
    throw std::logic_error("backward on a tensor that does not require grad");
  }

  // Post-order DFS gives a topological order; reverse iteration then visits
  // every node after all of its consumers.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* parent = node->parents[next].get();
      ++next;
      if (parent->backward_fn || !parent->parents.empty()) {
        if (seen.insert(parent).second) stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buf()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && node->grad) node->backward_fn(*node);
  }
  // Release the graph; a second backward without re-forward is detectable.
  for (TensorImpl* node : order) {
    node->backward_fn = nullptr;
    node->parents.clear();
    node->backward_done = true;
  }
}

}  // namespace fedsim
