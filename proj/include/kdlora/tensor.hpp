#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "kdlora/common.hpp"
#include "kdlora/rng.hpp"

namespace kdlora {

namespace detail {

template <typename T>
struct TensorStorage {
  std::vector<std::size_t> shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until backward reaches this tensor
  bool requires_grad = false;

  std::size_t size() const { return values.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), T(0));
  }
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace detail

/// Dense row-major tensor with shared storage. Copies alias the same buffer;
/// use clone() for a deep copy. Values are written only at creation and by
/// optimizer steps; op outputs are fresh tensors.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
      : storage_(std::make_shared<detail::TensorStorage<T>>()) {
    validate_shape(shape);
    storage_->shape = std::move(shape);
    storage_->values.assign(detail::shape_numel(storage_->shape), fill);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<T> values)
      : storage_(std::make_shared<detail::TensorStorage<T>>()) {
    validate_shape(shape);
    if (detail::shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " elements");
    }
    storage_->shape = std::move(shape);
    storage_->values = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  bool defined() const { return storage_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t dim(std::size_t i) const { return storage_->shape[i]; }
  std::size_t size() const { return storage_->values.size(); }

  T* data() { return storage_->values.data(); }
  const T* data() const { return storage_->values.data(); }
  std::vector<T>& values() { return storage_->values; }
  const std::vector<T>& values() const { return storage_->values; }
  T& operator[](std::size_t i) { return storage_->values[i]; }
  T operator[](std::size_t i) const { return storage_->values[i]; }

  /// Scalar extraction; throws unless the tensor holds exactly one element.
  T value() const {
    if (size() != 1) {
      throw ShapeError("value(): tensor has shape " + shape_str(shape()) +
                       ", expected a scalar");
    }
    return storage_->values[0];
  }

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool v) { storage_->requires_grad = v; }

  bool has_grad() const { return !storage_->grad.empty(); }
  const std::vector<T>& grad() const { return storage_->grad; }
  std::vector<T>& grad_buffer() {
    storage_->ensure_grad();
    return storage_->grad;
  }
  void zero_grad() {
    if (!storage_->grad.empty()) {
      std::fill(storage_->grad.begin(), storage_->grad.end(), T(0));
    }
  }
  void drop_grad() { storage_->grad.clear(); }

  Tensor clone() const {
    Tensor out(storage_->shape, storage_->values);
    out.set_requires_grad(storage_->requires_grad);
    return out;
  }

  std::shared_ptr<detail::TensorStorage<T>> storage() const { return storage_; }

 private:
  static void validate_shape(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw ShapeError("tensor: rank-0 shapes are not supported");
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor: zero dimension in shape " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::TensorStorage<T>> storage_;
};

/// Ordered record of the backward rules of every op executed under a
/// TapeScope. Replaying in reverse visits each rule exactly once.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  std::size_t size() const { return nodes_.size(); }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

template <typename T>
inline Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// Activates a tape for the current thread; ops record while one is active.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(active_tape<T>()) {
    active_tape<T>() = &tape;
  }
  ~TapeScope() { active_tape<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

namespace detail {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (const T& v : t.values()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw DataError(std::string(op) + ": produced a non-finite value");
    }
  }
}

/// Row-partitioned parallel loop. Each row is written by exactly one thread,
/// so results are bitwise independent of the thread count.
template <typename Body>
void parallel_rows(std::size_t rows, std::size_t work_per_row, const Body& body) {
  const std::size_t threads =
      std::min(math_threads(), rows == 0 ? std::size_t{1} : rows);
  if (threads <= 1 || rows * work_per_row < (std::size_t{1} << 16)) {
    body(0, rows);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const std::size_t chunk = (rows + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(rows, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

// c[m,n] = a[m,k] * b[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c, c + m * n, T(0));
  parallel_rows(m, k * n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = a[i * k + p];
        const T* brow = b + p * n;
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  });
}

// out[m,k] += g[m,n] * b[k,n]^T
template <typename T>
void gemm_nt_acc(const T* g, const T* b, T* out, std::size_t m, std::size_t n, std::size_t k) {
  parallel_rows(m, n * k, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const T* grow = g + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * n;
        T acc = T(0);
        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
        out[i * k + p] += acc;
      }
    }
  });
}

// out[k,n] += a[m,k]^T * g[m,n]
template <typename T>
void gemm_tn_acc(const T* a, const T* g, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T(0)) continue;
      T* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * grow[j];
    }
  }
}

template <typename T>
bool grad_wanted(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

/// 2-D matrix product. Backward accumulates dA += dOut*B^T, dB += A^T*dOut.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n);
  detail::check_finite(out, "matmul");
  if (detail::grad_wanted<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    active_tape<T>()->record([as, bs, os, m, k, n] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        as->ensure_grad();
        detail::gemm_nt_acc(os->grad.data(), bs->values.data(), as->grad.data(), m, n, k);
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        detail::gemm_tn_acc(as->values.data(), os->grad.data(), bs->grad.data(), m, k, n);
      }
    });
  }
  return out;
}

/// Batched matrix product over matching leading dimension:
/// [b,m,k] x [b,k,n] -> [b,m,n].
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("batched_matmul: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<T> out({nb, m, n});
  for (std::size_t i = 0; i < nb; ++i) {
    detail::gemm_nn(a.data() + i * m * k, b.data() + i * k * n, out.data() + i * m * n,
                    m, k, n);
  }
  detail::check_finite(out, "batched_matmul");
  if (detail::grad_wanted<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    active_tape<T>()->record([as, bs, os, nb, m, k, n] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        as->ensure_grad();
        for (std::size_t i = 0; i < nb; ++i) {
          detail::gemm_nt_acc(os->grad.data() + i * m * n, bs->values.data() + i * k * n,
                              as->grad.data() + i * m * k, m, n, k);
        }
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (std::size_t i = 0; i < nb; ++i) {
          detail::gemm_tn_acc(as->values.data() + i * m * k, os->grad.data() + i * m * n,
                              bs->grad.data() + i * k * n, m, k, n);
        }
      }
    });
  }
  return out;
}

/// Elementwise sum; shapes must match exactly (no broadcasting).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  detail::check_finite(out, "add");
  if (detail::grad_wanted<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    active_tape<T>()->record([as, bs, os, n] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        as->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) as->grad[i] += os->grad[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) bs->grad[i] += os->grad[i];
      }
    });
  }
  return out;
}

/// Adds a bias vector over the last axis (the only broadcast supported).
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t d = x.dim(x.rank() - 1);
  if (bias.rank() != 1 || bias.dim(0) != d) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) +
                     " does not match last axis of " + shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + bias[i % d];
  detail::check_finite(out, "add_bias");
  if (detail::grad_wanted<T>({&x, &bias})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), bs = bias.storage(), os = out.storage();
    active_tape<T>()->record([xs, bs, os, n, d] {
      if (os->grad.empty()) return;
      if (xs->requires_grad) {
        xs->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) xs->grad[i] += os->grad[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) bs->grad[i % d] += os->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = factor * x[i];
  detail::check_finite(out, "scale");
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    active_tape<T>()->record([xs, os, n, factor] {
      if (os->grad.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) xs->grad[i] += factor * os->grad[i];
    });
  }
  return out;
}

/// Copies into a new shape with the same element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<std::size_t> shape) {
  if (detail::shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor<T> out(std::move(shape), x.values());
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    const std::size_t n = x.size();
    active_tape<T>()->record([xs, os, n] {
      if (os->grad.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) xs->grad[i] += os->grad[i];
    });
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> row_major_strides(const std::vector<std::size_t>& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// flat index mapping for an axis permutation: out[map(i)] = in[i]
template <typename Fn>
void for_each_permuted(const std::vector<std::size_t>& in_shape,
                       const std::vector<std::size_t>& perm, Fn&& fn) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[perm[i]];
  const auto in_strides = row_major_strides(in_shape);
  const auto out_strides = row_major_strides(out_shape);
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t total = shape_numel(in_shape);
  for (std::size_t flat_in = 0; flat_in < total; ++flat_in) {
    std::size_t flat_out = 0;
    for (std::size_t a = 0; a < rank; ++a) flat_out += idx[perm[a]] * out_strides[a];
    fn(flat_in, flat_out);
    for (std::size_t a = rank; a-- > 0;) {
      if (++idx[a] < in_shape[a]) break;
      idx[a] = 0;
    }
  }
}

}  // namespace detail

/// General axis permutation (materialized). Backward applies the inverse.
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  std::vector<bool> seen(rank, false);
  if (axes.size() != rank) {
    throw ShapeError("permute: axes count " + std::to_string(axes.size()) +
                     " does not match rank " + std::to_string(rank));
  }
  for (std::size_t a : axes) {
    if (a >= rank || seen[a]) throw ShapeError("permute: invalid axis permutation");
    seen[a] = true;
  }
  std::vector<std::size_t> out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(axes[i]);
  Tensor<T> out(out_shape);
  detail::for_each_permuted(x.shape(), axes,
                            [&](std::size_t fi, std::size_t fo) { out[fo] = x[fi]; });
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    const std::vector<std::size_t> in_shape = x.shape();
    active_tape<T>()->record([xs, os, in_shape, axes] {
      if (os->grad.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      detail::for_each_permuted(in_shape, axes, [&](std::size_t fi, std::size_t fo) {
        xs->grad[fi] += os->grad[fo];
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank must be >= 2");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

/// Numerically stable softmax along `axis` (negative counts from the back).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError("softmax: axis out of range for shape " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(static_cast<std::size_t>(axis));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(static_cast<std::size_t>(i));
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(static_cast<std::size_t>(i));

  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      T sum = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= sum;
    }
  }
  detail::check_finite(out, "softmax");
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    active_tape<T>()->record([xs, os, outer, inner, n] {
      if (os->grad.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          T dot = T(0);
          for (std::size_t j = 0; j < n; ++j) {
            dot += os->grad[base + j * inner] * os->values[base + j * inner];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = base + j * inner;
            xs->grad[k] += os->values[k] * (os->grad[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

/// Layer normalization over the last axis with affine gain/bias. Uses the
/// population variance.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                    T eps) {
  const std::size_t d = x.dim(x.rank() - 1);
  if (d < 2) throw ShapeError("layernorm: last axis must have length >= 2");
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw ShapeError("layernorm: gain/bias must be length-" + std::to_string(d) +
                     " vectors");
  }
  if (eps < T(0)) throw ParameterError("layernorm: eps must be non-negative");
  const std::size_t rows = x.size() / d;
  Tensor<T> out(x.shape());
  // normalized values and inverse stddev are needed again in backward
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += x[base + j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = x[base + j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (x[base + j] - mean) * is;
      (*xhat)[base + j] = h;
      out[base + j] = h * gain[j] + bias[j];
    }
  }
  detail::check_finite(out, "layernorm");
  if (detail::grad_wanted<T>({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), gs = gain.storage(), bs = bias.storage(), os = out.storage();
    active_tape<T>()->record([xs, gs, bs, os, xhat, inv_std, rows, d] {
      if (os->grad.empty()) return;
      if (gs->requires_grad) gs->ensure_grad();
      if (bs->requires_grad) bs->ensure_grad();
      if (xs->requires_grad) xs->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * d;
        if (gs->requires_grad || bs->requires_grad) {
          for (std::size_t j = 0; j < d; ++j) {
            const T g = os->grad[base + j];
            if (gs->requires_grad) gs->grad[j] += g * (*xhat)[base + j];
            if (bs->requires_grad) bs->grad[j] += g;
          }
        }
        if (xs->requires_grad) {
          T mean_gh = T(0), mean_ghx = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = os->grad[base + j] * gs->values[j];
            mean_gh += gh;
            mean_ghx += gh * (*xhat)[base + j];
          }
          mean_gh /= static_cast<T>(d);
          mean_ghx /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = os->grad[base + j] * gs->values[j];
            xs->grad[base + j] +=
                (*inv_std)[r] * (gh - mean_gh - (*xhat)[base + j] * mean_ghx);
          }
        }
      }
    });
  }
  return out;
}

/// Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Tensor<T> out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  detail::check_finite(out, "gelu");
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    active_tape<T>()->record([xs, os, n] {
      if (os->grad.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(xs->values[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        xs->grad[i] += os->grad[i] * static_cast<T>(cdf + v * pdf);
      }
    });
  }
  return out;
}

/// Inverted dropout: zeroes with probability p and rescales survivors by
/// 1/(1-p) in training mode; identity (same tensor) otherwise.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ParameterError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const std::size_t n = x.size();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(n);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T f = rng.bernoulli(p) ? T(0) : keep_scale;
    (*mask)[i] = f;
    out[i] = x[i] * f;
  }
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    active_tape<T>()->record([xs, os, mask, n] {
      if (os->grad.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) xs->grad[i] += os->grad[i] * (*mask)[i];
    });
  }
  return out;
}

/// Row gather: table[ids] -> [rows, cols, d]. Backward scatter-adds into the
/// table. Out-of-range ids name the offending position.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids,
                    std::size_t rows, std::size_t cols) {
  if (table.rank() != 2) {
    throw ShapeError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  }
  if (ids.size() != rows * cols) {
    throw ShapeError("embedding: id count " + std::to_string(ids.size()) +
                     " does not match " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DataError("embedding: id " + std::to_string(ids[i]) + " out of range [0, " +
                      std::to_string(vocab) + ") at row " + std::to_string(i / cols) +
                      ", position " + std::to_string(i % cols));
    }
  }
  Tensor<T> out({rows, cols, d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const T* src = table.data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  if (detail::grad_wanted<T>({&table})) {
    out.set_requires_grad(true);
    auto ts = table.storage(), os = out.storage();
    auto ids_copy = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
    active_tape<T>()->record([ts, os, ids_copy, d] {
      if (os->grad.empty() || !ts->requires_grad) return;
      ts->ensure_grad();
      for (std::size_t i = 0; i < ids_copy->size(); ++i) {
        T* dst = ts->grad.data() + static_cast<std::size_t>((*ids_copy)[i]) * d;
        const T* src = os->grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

/// Picks one sequence position from [B, L, d] -> [B, d].
template <typename T>
Tensor<T> select_position(const Tensor<T>& x, std::size_t pos) {
  if (x.rank() != 3) {
    throw ShapeError("select_position: expected rank-3 input, got " +
                     shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (pos >= l) throw ShapeError("select_position: position out of range");
  Tensor<T> out({b, d});
  for (std::size_t i = 0; i < b; ++i) {
    const T* src = x.data() + (i * l + pos) * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    active_tape<T>()->record([xs, os, b, l, d, pos] {
      if (os->grad.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      for (std::size_t i = 0; i < b; ++i) {
        T* dst = xs->grad.data() + (i * l + pos) * d;
        const T* src = os->grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (const T& v : x.values()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::check_finite(out, "sum_all");
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    const std::size_t n = x.size();
    active_tape<T>()->record([xs, os, n] {
      if (os->grad.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) xs->grad[i] += os->grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), static_cast<T>(1.0 / static_cast<double>(x.size())));
}

/// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Every
/// requires_grad tensor reachable from the loss ends up with a grad buffer;
/// frozen tensors are never touched.
template <typename T>
void backward(Tensor<T>& loss, Tape<T>& tape) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw StateError("backward: loss was not recorded on the active tape");
  }
  loss.grad_buffer().assign(1, T(1));
  tape.run_backward();
}

/// Central finite-difference check. Returns the max over coordinates of
/// |analytic - numeric| / max(1, |analytic|). `f` must be a pure function of
/// the current tensor values.
template <typename T>
double grad_check(const std::function<Tensor<T>()>& f, Tensor<T>& x, double h) {
  const bool prev = x.requires_grad();
  x.set_requires_grad(true);
  x.drop_grad();
  std::vector<double> analytic(x.size(), 0.0);
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> loss = f();
    backward(loss, tape);
    if (x.has_grad()) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        analytic[i] = static_cast<double>(x.grad()[i]);
      }
    }
  }
  x.drop_grad();
  double max_rel = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = x[i];
    x[i] = orig + static_cast<T>(h);
    const double up = static_cast<double>(f().value());
    x[i] = orig - static_cast<T>(h);
    const double down = static_cast<double>(f().value());
    x[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double rel =
        std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    max_rel = std::max(max_rel, rel);
  }
  x.set_requires_grad(prev);
  return max_rel;
}

}  // namespace kdlora
