#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "percap/error.hpp"
#include "percap/rng.hpp"

namespace percap {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  int node = -1;  // id on the active tape, -1 when unregistered
};

}  // namespace detail

template <typename T>
class Tape;

// Dense row-major tensor handle. Copies share storage; shapes are fixed
// at creation. Gradients live next to the values and accumulate until
// zero_grad().
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->value.assign(numel(shape), T(0));
    t.impl_->shape = std::move(shape);
    return t;
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (numel(shape) != data.size())
      throw ContractError("tensor: data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->value = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->value.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }

  T* data() { return impl_->value.data(); }
  const T* data() const { return impl_->value.data(); }
  std::vector<T>& values() { return impl_->value; }
  const std::vector<T>& values() const { return impl_->value; }

  T item() const {
    if (size() != 1)
      throw ContractError("tensor: item() on non-scalar shape " + shape_str(shape()));
    return impl_->value[0];
  }

  T& at(std::size_t i) { return impl_->value[i]; }
  T at(std::size_t i) const { return impl_->value[i]; }
  T& at(std::size_t i, std::size_t j) { return impl_->value[i * impl_->shape[1] + j]; }
  T at(std::size_t i, std::size_t j) const { return impl_->value[i * impl_->shape[1] + j]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    impl_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  void ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), T(0));
  }
  T* grad_data() {
    ensure_grad();
    return impl_->grad.data();
  }
  const std::vector<T>& grad() const { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  detail::TensorImpl<T>* impl() const { return impl_.get(); }
  std::shared_ptr<detail::TensorImpl<T>> impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Reverse-mode tape: ops append records in execution order, so the record
// list is already topologically sorted. backward() replays the suffix of
// records that feed the loss, each exactly once.
template <typename T>
class Tape {
 public:
  Tape() = default;
  ~Tape() { clear(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_slot(); }

  int ensure_node(Tensor<T> t) {
    auto* impl = t.impl();
    int id = impl->node;
    if (id >= 0 && static_cast<std::size_t>(id) < nodes_.size() && nodes_[id].get() == impl)
      return id;
    id = static_cast<int>(nodes_.size());
    nodes_.push_back(t.impl_ptr());
    impl->node = id;
    return id;
  }

  void record(std::vector<int> inputs, int output, std::function<void()> fn) {
    records_.push_back({std::move(inputs), output, std::move(fn)});
  }

  void backward(Tensor<T> loss) {
    if (loss.size() != 1)
      throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    auto* impl = loss.impl();
    int ln = impl->node;
    if (ln < 0 || static_cast<std::size_t>(ln) >= nodes_.size() || nodes_[ln].get() != impl)
      throw ContractError("backward: loss is not on this tape");

    std::vector<char> needed(nodes_.size(), 0);
    needed[ln] = 1;
    std::vector<char> run(records_.size(), 0);
    for (std::size_t r = records_.size(); r-- > 0;) {
      const Record& rec = records_[r];
      if (!needed[rec.output]) continue;
      run[r] = 1;
      for (int in : rec.inputs) needed[in] = 1;
    }

    // Intermediates get a fresh gradient each pass; only leaves (never an
    // output) accumulate across repeated backward calls.
    for (std::size_t r = 0; r < records_.size(); ++r)
      if (run[r]) {
        auto& g = nodes_[records_[r].output]->grad;
        std::fill(g.begin(), g.end(), T(0));
      }
    loss.impl()->grad.resize(1, T(0));
    loss.impl()->grad[0] += T(1);
    for (std::size_t r = records_.size(); r-- > 0;)
      if (run[r]) records_[r].fn();
  }

  std::size_t num_records() const { return records_.size(); }

  void clear() {
    for (auto& n : nodes_) n->node = -1;
    nodes_.clear();
    records_.clear();
  }

  static Tape*& active_slot() {
    static thread_local Tape* slot = nullptr;
    return slot;
  }

 private:
  struct Record {
    std::vector<int> inputs;
    int output;
    std::function<void()> fn;
  };
  std::vector<Record> records_;
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> nodes_;
};

template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active_slot()) {
    Tape<T>::active_slot() = &tape;
  }
  ~TapeScope() { Tape<T>::active_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

namespace detail {

template <typename T>
inline bool recording(std::initializer_list<Tensor<T>> inputs) {
  if (!Tape<T>::active()) return false;
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

template <typename T>
inline void mark_output(Tensor<T>& out, std::vector<Tensor<T>> ins, std::function<void()> fn) {
  Tape<T>* tape = Tape<T>::active();
  out.set_requires_grad(true);
  std::vector<int> in_ids;
  in_ids.reserve(ins.size());
  for (auto& t : ins) in_ids.push_back(tape->ensure_node(t));
  tape->record(std::move(in_ids), tape->ensure_node(out), std::move(fn));
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// outer/mid/inner decomposition for slice-wise ops along one axis
struct AxisSplit {
  std::size_t outer, mid, inner;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size())
    throw ContractError(std::string(op) + ": axis " + std::to_string(axis) +
                        " out of range for shape " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// C[m x n] (+)= A[m x k] * B[k x n]
template <typename T>
inline void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B^T where B is [n x k]
template <typename T>
inline void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k x n] += A^T * B where A is [m x k], B is [m x n]
template <typename T>
inline void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// differentiable kernels

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  if (detail::recording<T>({a, b})) {
    detail::mark_output(out, {a, b}, [a, b, out]() mutable {
      const T* g = out.grad_data();
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        for (std::size_t i = 0; i < out.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        for (std::size_t i = 0; i < out.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] - pb[i];
  if (detail::recording<T>({a, b})) {
    detail::mark_output(out, {a, b}, [a, b, out]() mutable {
      const T* g = out.grad_data();
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        for (std::size_t i = 0; i < out.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        for (std::size_t i = 0; i < out.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
  if (detail::recording<T>({a, b})) {
    detail::mark_output(out, {a, b}, [a, b, out]() mutable {
      const T* g = out.grad_data();
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        const T* pb2 = b.data();
        for (std::size_t i = 0; i < out.size(); ++i) ga[i] += g[i] * pb2[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        const T* pa2 = a.data();
        for (std::size_t i = 0; i < out.size(); ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tensor<T> a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * c;
  if (detail::recording<T>({a})) {
    detail::mark_output(out, {a}, [a, out, c]() mutable {
      const T* g = out.grad_data();
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < out.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

// x[... x d] + b[d], the one sanctioned broadcast
template <typename T>
Tensor<T> add_bias(Tensor<T> x, Tensor<T> b) {
  if (b.rank() != 1 || x.rank() < 1 || x.shape().back() != b.dim(0))
    throw ContractError("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " +
                        shape_str(b.shape()));
  std::size_t d = b.dim(0);
  std::size_t rows = x.size() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
  if (detail::recording<T>({x, b})) {
    detail::mark_output(out, {x, b}, [x, b, out, rows, d]() mutable {
      const T* g = out.grad_data();
      if (x.requires_grad()) {
        T* gx = x.grad_data();
        for (std::size_t i = 0; i < rows * d; ++i) gx[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ContractError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n, true);
  if (detail::recording<T>({a, b})) {
    detail::mark_output(out, {a, b}, [a, b, out, m, k, n]() mutable {
      const T* g = out.grad_data();
      if (a.requires_grad()) detail::gemm_nt(g, b.data(), a.grad_data(), m, n, k);
      if (b.requires_grad()) detail::gemm_tn(a.data(), g, b.grad_data(), m, k, n);
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(Tensor<T> a) {
  if (a.rank() != 2)
    throw ContractError("transpose: expected rank-2, got " + shape_str(a.shape()));
  std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros({n, m});
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  if (detail::recording<T>({a})) {
    detail::mark_output(out, {a}, [a, out, m, n]() mutable {
      const T* g = out.grad_data();
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Tensor<T> a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
  if (detail::recording<T>({a})) {
    detail::mark_output(out, {a}, [a, out]() mutable {
      const T* g = out.grad_data();
      const T* pa2 = a.data();
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < out.size(); ++i)
        if (pa2[i] > T(0)) ga[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> tanh(Tensor<T> a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = std::tanh(pa[i]);
  if (detail::recording<T>({a})) {
    detail::mark_output(out, {a}, [a, out]() mutable {
      const T* g = out.grad_data();
      const T* y = out.data();
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < out.size(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Tensor<T> a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = T(1) / (T(1) + std::exp(-pa[i]));
  if (detail::recording<T>({a})) {
    detail::mark_output(out, {a}, [a, out]() mutable {
      const T* g = out.grad_data();
      const T* y = out.data();
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < out.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(Tensor<T> x, std::size_t axis) {
  auto sp = detail::split_axis(x.shape(), axis, "softmax");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t base = o * sp.mid * sp.inner + i;
      T mx = px[base];
      for (std::size_t m = 1; m < sp.mid; ++m)
        mx = std::max(mx, px[base + m * sp.inner]);
      T z = T(0);
      for (std::size_t m = 0; m < sp.mid; ++m) {
        T e = std::exp(px[base + m * sp.inner] - mx);
        po[base + m * sp.inner] = e;
        z += e;
      }
      for (std::size_t m = 0; m < sp.mid; ++m) po[base + m * sp.inner] /= z;
    }
  if (detail::recording<T>({x})) {
    detail::mark_output(out, {x}, [x, out, sp]() mutable {
      const T* g = out.grad_data();
      const T* y = out.data();
      T* gx = x.grad_data();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          std::size_t base = o * sp.mid * sp.inner + i;
          T dotgy = T(0);
          for (std::size_t m = 0; m < sp.mid; ++m)
            dotgy += g[base + m * sp.inner] * y[base + m * sp.inner];
          for (std::size_t m = 0; m < sp.mid; ++m) {
            std::size_t k = base + m * sp.inner;
            gx[k] += y[k] * (g[k] - dotgy);
          }
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax(Tensor<T> x, std::size_t axis) {
  auto sp = detail::split_axis(x.shape(), axis, "log_softmax");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t base = o * sp.mid * sp.inner + i;
      T mx = px[base];
      for (std::size_t m = 1; m < sp.mid; ++m)
        mx = std::max(mx, px[base + m * sp.inner]);
      T z = T(0);
      for (std::size_t m = 0; m < sp.mid; ++m) z += std::exp(px[base + m * sp.inner] - mx);
      T lz = std::log(z) + mx;
      for (std::size_t m = 0; m < sp.mid; ++m)
        po[base + m * sp.inner] = px[base + m * sp.inner] - lz;
    }
  if (detail::recording<T>({x})) {
    detail::mark_output(out, {x}, [x, out, sp]() mutable {
      const T* g = out.grad_data();
      const T* y = out.data();
      T* gx = x.grad_data();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          std::size_t base = o * sp.mid * sp.inner + i;
          T gsum = T(0);
          for (std::size_t m = 0; m < sp.mid; ++m) gsum += g[base + m * sp.inner];
          for (std::size_t m = 0; m < sp.mid; ++m) {
            std::size_t k = base + m * sp.inner;
            gx[k] += g[k] - std::exp(y[k]) * gsum;
          }
        }
    });
  }
  return out;
}

// Normalizes the last dimension to mean 0 / variance 1, then applies the
// per-channel affine. eps guards zero-variance rows.
template <typename T>
Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gain, Tensor<T> bias,
                     T eps = T(1e-5)) {
  if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1 ||
      x.shape().back() != gain.dim(0) || gain.dim(0) != bias.dim(0))
    throw ContractError("layer_norm: shape mismatch " + shape_str(x.shape()) + " gain " +
                        shape_str(gain.shape()) + " bias " + shape_str(bias.shape()));
  std::size_t d = gain.dim(0);
  std::size_t rows = x.size() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> inv_std(rows), xhat(x.size());
  const T* px = x.data();
  const T* pg = gain.data();
  const T* pb = bias.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      T c = row[j] - mean;
      var += c * c;
    }
    var /= T(d);
    T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      T h = (row[j] - mean) * is;
      xhat[r * d + j] = h;
      po[r * d + j] = h * pg[j] + pb[j];
    }
  }
  if (detail::recording<T>({x, gain, bias})) {
    auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
    auto istd = std::make_shared<std::vector<T>>(std::move(inv_std));
    detail::mark_output(out, {x, gain, bias}, [x, gain, bias, out, xh, istd, rows, d]() mutable {
      const T* g = out.grad_data();
      const T* pg2 = gain.data();
      if (gain.requires_grad()) {
        T* gg = gain.grad_data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xh)[r * d + j];
      }
      if (bias.requires_grad()) {
        T* gb = bias.grad_data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
      if (x.requires_grad()) {
        T* gx = x.grad_data();
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dy = T(0), mean_dyxh = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            T dy = g[r * d + j] * pg2[j];
            mean_dy += dy;
            mean_dyxh += dy * (*xh)[r * d + j];
          }
          mean_dy /= T(d);
          mean_dyxh /= T(d);
          for (std::size_t j = 0; j < d; ++j) {
            T dy = g[r * d + j] * pg2[j];
            gx[r * d + j] += ((dy - mean_dy) - (*xh)[r * d + j] * mean_dyxh) * (*istd)[r];
          }
        }
      }
    });
  }
  return out;
}

// Row gather; duplicate ids scatter-add their gradients back.
template <typename T>
Tensor<T> embedding_lookup(Tensor<T> table, const std::vector<int>& ids) {
  if (table.rank() != 2)
    throw ContractError("embedding_lookup: table must be rank-2, got " + shape_str(table.shape()));
  std::size_t v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(v) + ")");
  Tensor<T> out = Tensor<T>::zeros({ids.size(), d});
  const T* pt = table.data();
  T* po = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(pt + ids[i] * d, pt + (ids[i] + 1) * d, po + i * d);
  if (detail::recording<T>({table})) {
    detail::mark_output(out, {table}, [table, out, ids, d]() mutable {
      const T* g = out.grad_data();
      T* gt = table.grad_data();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(std::vector<Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size())
    throw ContractError("concat: axis " + std::to_string(axis) + " out of range for " +
                        shape_str(shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size())
      throw ContractError("concat: rank mismatch " + shape_str(shape) + " vs " +
                          shape_str(p.shape()));
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (i != axis && p.dim(i) != shape[i])
        throw ContractError("concat: shape mismatch " + shape_str(shape) + " vs " +
                            shape_str(p.shape()));
    total += p.dim(axis);
  }
  Shape out_shape = shape;
  out_shape[axis] = total;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  auto sp = detail::split_axis(out_shape, axis, "concat");
  T* po = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::size_t mid = p.dim(axis);
    const T* pp = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy(pp + o * mid * sp.inner, pp + (o + 1) * mid * sp.inner,
                po + (o * sp.mid + offset) * sp.inner);
    offset += mid;
  }
  bool rec = Tape<T>::active() != nullptr;
  if (rec) {
    rec = false;
    for (const auto& p : parts)
      if (p.requires_grad()) rec = true;
  }
  if (rec) {
    detail::mark_output(out, parts, [parts, out, sp, axis]() mutable {
      const T* g = out.grad_data();
      std::size_t offset = 0;
      for (auto& p : parts) {
        std::size_t mid = p.dim(axis);
        if (p.requires_grad()) {
          T* gp = p.grad_data();
          for (std::size_t o = 0; o < sp.outer; ++o) {
            const T* src = g + (o * sp.mid + offset) * sp.inner;
            T* dst = gp + o * mid * sp.inner;
            for (std::size_t i = 0; i < mid * sp.inner; ++i) dst[i] += src[i];
          }
        }
        offset += mid;
      }
    });
  }
  return out;
}

// Stacks rank-1 tensors of equal length into a matrix, one per row.
template <typename T>
Tensor<T> stack_rows(std::vector<Tensor<T>> rows) {
  if (rows.empty()) throw ContractError("stack_rows: no inputs");
  std::size_t d = rows[0].size();
  for (const auto& r : rows)
    if (r.rank() != 1 || r.size() != d)
      throw ContractError("stack_rows: expected rank-1 length " + std::to_string(d) + ", got " +
                          shape_str(r.shape()));
  Tensor<T> out = Tensor<T>::zeros({rows.size(), d});
  T* po = out.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(rows[i].data(), rows[i].data() + d, po + i * d);
  bool rec = Tape<T>::active() != nullptr;
  if (rec) {
    rec = false;
    for (const auto& r : rows)
      if (r.requires_grad()) rec = true;
  }
  if (rec) {
    detail::mark_output(out, rows, [rows, out, d]() mutable {
      const T* g = out.grad_data();
      for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].requires_grad()) {
          T* gr = rows[i].grad_data();
          for (std::size_t j = 0; j < d; ++j) gr[j] += g[i * d + j];
        }
    });
  }
  return out;
}

// Copying slice along one axis, [start, end).
template <typename T>
Tensor<T> slice(Tensor<T> x, std::size_t axis, std::size_t start, std::size_t end) {
  auto sp = detail::split_axis(x.shape(), axis, "slice");
  if (start >= end || end > sp.mid)
    throw ContractError("slice: range [" + std::to_string(start) + ", " + std::to_string(end) +
                        ") invalid for axis size " + std::to_string(sp.mid));
  Shape out_shape = x.shape();
  out_shape[axis] = end - start;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::size_t mid = end - start;
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy(px + (o * sp.mid + start) * sp.inner, px + (o * sp.mid + end) * sp.inner,
              po + o * mid * sp.inner);
  if (detail::recording<T>({x})) {
    detail::mark_output(out, {x}, [x, out, sp, start, mid]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        T* dst = gx + (o * sp.mid + start) * sp.inner;
        const T* src = g + o * mid * sp.inner;
        for (std::size_t i = 0; i < mid * sp.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tensor<T> x, Shape new_shape) {
  if (numel(new_shape) != x.size())
    throw ContractError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                        shape_str(new_shape));
  Tensor<T> out = Tensor<T>::from_data(std::move(new_shape),
                                       std::vector<T>(x.data(), x.data() + x.size()));
  if (detail::recording<T>({x})) {
    detail::mark_output(out, {x}, [x, out]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (std::size_t i = 0; i < out.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tensor<T> x) {
  T acc = T(0);
  const T* px = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc += px[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::recording<T>({x})) {
    detail::mark_output(out, {x}, [x, out]() mutable {
      T g = out.grad_data()[0];
      T* gx = x.grad_data();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tensor<T> x) {
  T acc = T(0);
  const T* px = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc += px[i];
  T inv = T(1) / T(x.size());
  Tensor<T> out = Tensor<T>::scalar(acc * inv);
  if (detail::recording<T>({x})) {
    detail::mark_output(out, {x}, [x, out, inv]() mutable {
      T g = out.grad_data()[0] * inv;
      T* gx = x.grad_data();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_axis(Tensor<T> x, std::size_t axis) {
  auto sp = detail::split_axis(x.shape(), axis, "sum_axis");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t m = 0; m < sp.mid; ++m)
      for (std::size_t i = 0; i < sp.inner; ++i)
        po[o * sp.inner + i] += px[(o * sp.mid + m) * sp.inner + i];
  if (detail::recording<T>({x})) {
    detail::mark_output(out, {x}, [x, out, sp]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t m = 0; m < sp.mid; ++m)
          for (std::size_t i = 0; i < sp.inner; ++i)
            gx[(o * sp.mid + m) * sp.inner + i] += g[o * sp.inner + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_axis(Tensor<T> x, std::size_t axis) {
  auto sp = detail::split_axis(x.shape(), axis, "mean_axis");
  Tensor<T> s = sum_axis(x, axis);
  return scale(s, T(1) / T(sp.mid));
}

// out[i] = x[i, ids[i]]; the NLL gather.
template <typename T>
Tensor<T> pick(Tensor<T> x, const std::vector<int>& ids) {
  if (x.rank() != 2 || ids.size() != x.dim(0))
    throw ContractError("pick: need rank-2 input with one id per row, got " +
                        shape_str(x.shape()) + " and " + std::to_string(ids.size()) + " ids");
  std::size_t n = x.dim(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= n)
      throw IndexError("pick: id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(n) + ")");
  Tensor<T> out = Tensor<T>::zeros({ids.size()});
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) po[i] = px[i * n + ids[i]];
  if (detail::recording<T>({x})) {
    detail::mark_output(out, {x}, [x, out, ids, n]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (std::size_t i = 0; i < ids.size(); ++i) gx[i * n + ids[i]] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> dot(Tensor<T> a, Tensor<T> b) {
  if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size())
    throw ContractError("dot: incompatible shapes " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  T acc = T(0);
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += pa[i] * pb[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::recording<T>({a, b})) {
    detail::mark_output(out, {a, b}, [a, b, out]() mutable {
      T g = out.grad_data()[0];
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        const T* pb2 = b.data();
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g * pb2[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        const T* pa2 = a.data();
        for (std::size_t i = 0; i < a.size(); ++i) gb[i] += g * pa2[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// initialization

template <typename T>
Tensor<T> init_matrix(std::size_t in, std::size_t out, Rng& rng) {
  Tensor<T> w = Tensor<T>::zeros({in, out});
  T bound = T(1) / std::sqrt(T(in));
  T* p = w.data();
  for (std::size_t i = 0; i < w.size(); ++i)
    p[i] = static_cast<T>(rng.uniform(-double(bound), double(bound)));
  return w;
}

template <typename T>
Tensor<T> init_bias(std::size_t n) {
  return Tensor<T>::zeros({n});
}

template <typename T>
Tensor<T> init_embedding(std::size_t rows, std::size_t d, Rng& rng) {
  Tensor<T> w = Tensor<T>::zeros({rows, d});
  T* p = w.data();
  for (std::size_t i = 0; i < w.size(); ++i) p[i] = static_cast<T>(rng.normal(0.0, 0.02));
  return w;
}

template <typename T>
Tensor<T> init_ones(std::size_t n) {
  return Tensor<T>::full({n}, T(1));
}

// ---------------------------------------------------------------------------
// optimizers

enum class OptKind { sgd, adam };

template <typename T>
struct OptimizerConfig {
  OptKind kind = OptKind::adam;
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T clip = T(0);  // global-norm clip; 0 disables
};

template <typename T, typename U>
OptimizerConfig<T> optimizer_config_as(const OptimizerConfig<U>& o) {
  OptimizerConfig<T> c;
  c.kind = o.kind;
  c.lr = static_cast<T>(o.lr);
  c.beta1 = static_cast<T>(o.beta1);
  c.beta2 = static_cast<T>(o.beta2);
  c.eps = static_cast<T>(o.eps);
  c.clip = static_cast<T>(o.clip);
  return c;
}

template <typename T>
class Optimizer {
 public:
  Optimizer(std::vector<Tensor<T>> params, OptimizerConfig<T> cfg)
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].size(), T(0));
      v_[i].assign(params_[i].size(), T(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Parameters with requires_grad == false are skipped (frozen phases).
  void step() {
    T sq = T(0);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.requires_grad() || !p.has_grad()) continue;
      const auto& g = p.grad();
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (!std::isfinite(static_cast<double>(g[j])))
          throw ContractError("optimizer: non-finite gradient in parameter " + std::to_string(i) +
                              " at coordinate " + std::to_string(j));
        sq += g[j] * g[j];
      }
    }
    if (cfg_.clip > T(0)) {
      T norm = std::sqrt(sq);
      if (norm > cfg_.clip) {
        T s = cfg_.clip / norm;
        for (auto& p : params_) {
          if (!p.requires_grad() || !p.has_grad()) continue;
          T* g = p.grad_data();
          for (std::size_t j = 0; j < p.size(); ++j) g[j] *= s;
        }
      }
    }
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.requires_grad() || !p.has_grad()) continue;
      T* w = p.data();
      const T* g = p.grad().data();
      if (cfg_.kind == OptKind::sgd) {
        for (std::size_t j = 0; j < p.size(); ++j) w[j] -= cfg_.lr * g[j];
      } else {
        T bc1 = T(1) - std::pow(cfg_.beta1, T(t_));
        T bc2 = T(1) - std::pow(cfg_.beta2, T(t_));
        T* m = m_[i].data();
        T* v = v_[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
          m[j] = cfg_.beta1 * m[j] + (T(1) - cfg_.beta1) * g[j];
          v[j] = cfg_.beta2 * v[j] + (T(1) - cfg_.beta2) * g[j] * g[j];
          T mhat = m[j] / bc1;
          T vhat = v[j] / bc2;
          w[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
      }
    }
  }

  long steps_taken() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  long t_ = 0;
  OptimizerConfig<T> cfg_;
};

// ---------------------------------------------------------------------------
// finite-difference oracle

template <typename T>
struct GradCheckResult {
  T max_rel_err = T(0);
  std::size_t worst_coord = 0;
  T analytic = T(0);
  T numeric = T(0);
  bool pass = true;
};

namespace detail {

// Relative error with an absolute fallback for near-zero gradients.
template <typename T>
inline T rel_err(T a, T n) {
  T denom = std::max(std::abs(a), std::abs(n));
  if (denom < T(1e-3)) denom = T(1);
  return std::abs(a - n) / denom;
}

}  // namespace detail

// Central finite differences on a single input tensor. f must be a pure
// scalar-valued function of x.
template <typename T, typename F>
GradCheckResult<T> grad_check(F f, Tensor<T> x, T h = T(1e-5), T tol = T(1e-4)) {
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<T> analytic;
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> loss = f(x);
    tape.backward(loss);
    analytic.assign(x.grad().begin(), x.grad().end());
  }
  GradCheckResult<T> res;
  T* px = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    T keep = px[i];
    px[i] = keep + h;
    T fp = f(x).item();
    px[i] = keep - h;
    T fm = f(x).item();
    px[i] = keep;
    T num = (fp - fm) / (T(2) * h);
    T err = detail::rel_err(analytic[i], num);
    if (err >= res.max_rel_err) {
      res.max_rel_err = err;
      res.worst_coord = i;
      res.analytic = analytic[i];
      res.numeric = num;
    }
  }
  res.pass = res.max_rel_err <= tol;
  return res;
}

// Same oracle over a set of parameter tensors and a loss closure that
// reads them. The closure must be deterministic given the parameters.
template <typename T, typename F>
GradCheckResult<T> grad_check_params(F loss_fn, std::vector<Tensor<T>> params, T h = T(1e-5),
                                     T tol = T(1e-4)) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  std::vector<std::vector<T>> analytic(params.size());
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> loss = loss_fn();
    tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i].ensure_grad();
      analytic[i].assign(params[i].grad().begin(), params[i].grad().end());
    }
  }
  GradCheckResult<T> res;
  std::size_t flat = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* pw = params[i].data();
    for (std::size_t j = 0; j < params[i].size(); ++j, ++flat) {
      T keep = pw[j];
      pw[j] = keep + h;
      T fp = loss_fn().item();
      pw[j] = keep - h;
      T fm = loss_fn().item();
      pw[j] = keep;
      T num = (fp - fm) / (T(2) * h);
      T err = detail::rel_err(analytic[i][j], num);
      if (err >= res.max_rel_err) {
        res.max_rel_err = err;
        res.worst_coord = flat;
        res.analytic = analytic[i][j];
        res.numeric = num;
      }
    }
  }
  res.pass = res.max_rel_err <= tol;
  return res;
}

}  // namespace percap
