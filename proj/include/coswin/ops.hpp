#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <string>
#include <vector>

#include "coswin/tensor.hpp"

namespace coswin {
namespace detail {

constexpr std::int64_t kParallelCutoff = 1 << 14;

inline std::size_t wrap_index(std::int64_t i, std::int64_t n) {
  i %= n;
  if (i < 0) i += n;
  return static_cast<std::size_t>(i);
}

template <typename T>
void axpy(std::span<T> dst, std::span<const T> src, T alpha = T(1)) {
  const std::int64_t n = static_cast<std::int64_t>(dst.size());
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i) dst[i] += alpha * src[i];
}

// out[bt] = A[bt] (m x k) * B[bt] (k x n), row-major, out zero-initialized.
template <typename T>
void matmul_kernel(const T* a, const T* b, T* out, std::size_t batch, std::size_t m,
                   std::size_t k, std::size_t n) {
  const std::int64_t rows = static_cast<std::int64_t>(batch * m);
  const std::int64_t work = rows * static_cast<std::int64_t>(k * n);
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::size_t bi = static_cast<std::size_t>(r) / m;
    const T* ar = a + static_cast<std::size_t>(r) * k;
    const T* bb = b + bi * k * n;
    T* cr = out + static_cast<std::size_t>(r) * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = ar[kk];
      const T* br = bb + kk * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// da[bt] += g[bt] * B[bt]^T
template <typename T>
void matmul_grad_a(const T* g, const T* b, T* da, std::size_t batch, std::size_t m,
                   std::size_t k, std::size_t n) {
  const std::int64_t rows = static_cast<std::int64_t>(batch * m);
  const std::int64_t work = rows * static_cast<std::int64_t>(k * n);
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::size_t bi = static_cast<std::size_t>(r) / m;
    const T* gr = g + static_cast<std::size_t>(r) * n;
    const T* bb = b + bi * k * n;
    T* dar = da + static_cast<std::size_t>(r) * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T* br = bb + kk * n;
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) s += gr[j] * br[j];
      dar[kk] += s;
    }
  }
}

// db[bt] += A[bt]^T * g[bt]
template <typename T>
void matmul_grad_b(const T* g, const T* a, T* db, std::size_t batch, std::size_t m,
                   std::size_t k, std::size_t n) {
  const std::int64_t rows = static_cast<std::int64_t>(batch * k);
  const std::int64_t work = rows * static_cast<std::int64_t>(m * n);
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::size_t bi = static_cast<std::size_t>(r) / k;
    const std::size_t kk = static_cast<std::size_t>(r) % k;
    const T* ab = a + bi * m * k;
    const T* gb = g + bi * m * n;
    T* dbr = db + static_cast<std::size_t>(r) * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = ab[i * k + kk];
      const T* gr = gb + i * n;
      for (std::size_t j = 0; j < n; ++j) dbr[j] += av * gr[j];
    }
  }
}

// Raw permute on buffers; out must hold numel elements.
template <typename T>
void permute_kernel(const T* in, const Shape& in_shape, const std::vector<int>& perm,
                    T* out) {
  const int nd = static_cast<int>(in_shape.size());
  std::vector<std::size_t> in_strides(static_cast<std::size_t>(nd), 1);
  for (int i = nd - 2; i >= 0; --i) {
    in_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(i + 1)] * in_shape[static_cast<std::size_t>(i + 1)];
  }
  Shape out_shape(static_cast<std::size_t>(nd));
  std::vector<std::size_t> src_stride(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    src_stride[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const std::size_t last = out_shape[static_cast<std::size_t>(nd - 1)];
  const bool fast = src_stride[static_cast<std::size_t>(nd - 1)] == 1;
  std::size_t rows = 1;
  for (int i = 0; i < nd - 1; ++i) rows *= out_shape[static_cast<std::size_t>(i)];
  const std::int64_t rows_i = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (rows_i * static_cast<std::int64_t>(last) > kParallelCutoff)
  for (std::int64_t r = 0; r < rows_i; ++r) {
    // decode row index into leading output coordinates -> source offset
    std::size_t rem = static_cast<std::size_t>(r);
    std::size_t src = 0;
    for (int i = nd - 2; i >= 0; --i) {
      const std::size_t d = out_shape[static_cast<std::size_t>(i)];
      src += (rem % d) * src_stride[static_cast<std::size_t>(i)];
      rem /= d;
    }
    T* dst = out + static_cast<std::size_t>(r) * last;
    if (fast) {
      std::memcpy(dst, in + src, last * sizeof(T));
    } else {
      const std::size_t st = src_stride[static_cast<std::size_t>(nd - 1)];
      for (std::size_t j = 0; j < last; ++j) dst[j] = in[src + j * st];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  {
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.mutable_data();
    const std::int64_t n = static_cast<std::int64_t>(ov.size());
#pragma omp parallel for schedule(static) if (n > detail::kParallelCutoff)
    for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  }
  detail::ensure_finite(out.data(), "add");
  if (auto* tape = detail::common_tape<T>({&a, &b})) {
    const int na = a.node(), nb = b.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [na, nb, no](GradTape<T>& tp) {
      auto g = tp.grad_of(no);
      if (na >= 0) detail::axpy(tp.grad_acc(na), g);
      if (nb >= 0) detail::axpy(tp.grad_acc(nb), g);
    });
    out.bind(tape, no);
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  {
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.mutable_data();
    const std::int64_t n = static_cast<std::int64_t>(ov.size());
#pragma omp parallel for schedule(static) if (n > detail::kParallelCutoff)
    for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
  }
  detail::ensure_finite(out.data(), "mul");
  if (auto* tape = detail::common_tape<T>({&a, &b})) {
    const int na = a.node(), nb = b.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [na, nb, no, a, b](GradTape<T>& tp) {
      auto g = tp.grad_of(no);
      const std::int64_t n = static_cast<std::int64_t>(g.size());
      if (na >= 0) {
        auto ga = tp.grad_acc(na);
        auto bv = b.data();
#pragma omp parallel for schedule(static) if (n > detail::kParallelCutoff)
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
      }
      if (nb >= 0) {
        auto gb = tp.grad_acc(nb);
        auto av = a.data();
#pragma omp parallel for schedule(static) if (n > detail::kParallelCutoff)
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
      }
    });
    out.bind(tape, no);
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    auto xv = x.data();
    auto ov = out.mutable_data();
    const T cv = static_cast<T>(c);
    const std::int64_t n = static_cast<std::int64_t>(ov.size());
#pragma omp parallel for schedule(static) if (n > detail::kParallelCutoff)
    for (std::int64_t i = 0; i < n; ++i) ov[i] = cv * xv[i];
  }
  detail::ensure_finite(out.data(), "scale");
  if (auto* tape = detail::common_tape<T>({&x})) {
    const int nx = x.node();
    const int no = tape->add_node(out.numel());
    const T cv = static_cast<T>(c);
    tape->set_backward(no, [nx, no, cv](GradTape<T>& tp) {
      if (nx >= 0) detail::axpy(tp.grad_acc(nx), tp.grad_of(no), cv);
    });
    out.bind(tape, no);
  }
  return out;
}

// x * s where s is a learnable one-element tensor (the fusion weight path).
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) {
    throw ShapeError("mul_scalar: scalar operand has shape " + shape_str(s.shape()));
  }
  const T sv = s.data()[0];
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    auto xv = x.data();
    auto ov = out.mutable_data();
    const std::int64_t n = static_cast<std::int64_t>(ov.size());
#pragma omp parallel for schedule(static) if (n > detail::kParallelCutoff)
    for (std::int64_t i = 0; i < n; ++i) ov[i] = sv * xv[i];
  }
  detail::ensure_finite(out.data(), "mul_scalar");
  if (auto* tape = detail::common_tape<T>({&x, &s})) {
    const int nx = x.node(), ns = s.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nx, ns, no, sv, x](GradTape<T>& tp) {
      auto g = tp.grad_of(no);
      if (nx >= 0) detail::axpy(tp.grad_acc(nx), g, sv);
      if (ns >= 0) {
        auto xv = x.data();
        T acc = 0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
        tp.grad_acc(ns)[0] += acc;
      }
    });
    out.bind(tape, no);
  }
  return out;
}

// Per-leading-slice constant factors; used for stochastic depth over a batch.
template <typename T>
Tensor<T> scale_rows0(const Tensor<T>& x, const std::vector<double>& factors) {
  if (x.ndim() < 1 || x.dim(0) != factors.size()) {
    throw ShapeError("scale_rows0: " + std::to_string(factors.size()) +
                     " factors for shape " + shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0);
  const std::size_t inner = x.numel() / rows;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T f = static_cast<T>(factors[r]);
      const std::size_t base = r * inner;
      for (std::size_t i = 0; i < inner; ++i) ov[base + i] = f * xv[base + i];
    }
  }
  detail::ensure_finite(out.data(), "scale_rows0");
  if (auto* tape = detail::common_tape<T>({&x})) {
    const int nx = x.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nx, no, factors, rows, inner](GradTape<T>& tp) {
      if (nx < 0) return;
      auto g = tp.grad_of(no);
      auto gx = tp.grad_acc(nx);
      for (std::size_t r = 0; r < rows; ++r) {
        const T f = static_cast<T>(factors[r]);
        const std::size_t base = r * inner;
        for (std::size_t i = 0; i < inner; ++i) gx[base + i] += f * g[base + i];
      }
    });
    out.bind(tape, no);
  }
  return out;
}

// x[..., d] + b[d]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.ndim() < 1 || b.ndim() != 1 || x.dim(x.ndim() - 1) != b.dim(0)) {
    throw ShapeError("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t d = b.dim(0);
  const std::size_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    auto xv = x.data();
    auto bv = b.data();
    auto ov = out.mutable_data();
    const std::int64_t rows_i = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (rows_i * static_cast<std::int64_t>(d) > detail::kParallelCutoff)
    for (std::int64_t r = 0; r < rows_i; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * d;
      for (std::size_t j = 0; j < d; ++j) ov[base + j] = xv[base + j] + bv[j];
    }
  }
  detail::ensure_finite(out.data(), "add_bias");
  if (auto* tape = detail::common_tape<T>({&x, &b})) {
    const int nx = x.node(), nb = b.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nx, nb, no, rows, d](GradTape<T>& tp) {
      auto g = tp.grad_of(no);
      if (nx >= 0) detail::axpy(tp.grad_acc(nx), g);
      if (nb >= 0) {
        auto gb = tp.grad_acc(nb);
        const std::int64_t d_i = static_cast<std::int64_t>(d);
#pragma omp parallel for schedule(static) if (d_i * static_cast<std::int64_t>(rows) > detail::kParallelCutoff)
        for (std::int64_t j = 0; j < d_i; ++j) {
          T s = 0;
          for (std::size_t r = 0; r < rows; ++r) s += g[r * d + static_cast<std::size_t>(j)];
          gb[static_cast<std::size_t>(j)] += s;
        }
      }
    });
    out.bind(tape, no);
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// a[..., m, k] x b[..., k, n]; leading batch dimensions must match exactly.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() < 2 || a.ndim() != b.ndim()) {
    throw ShapeError("matmul: rank mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const int nd = a.ndim();
  for (int i = 0; i < nd - 2; ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw ShapeError("matmul: batch dims differ " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
  }
  const std::size_t m = a.dim(nd - 2), k = a.dim(nd - 1);
  const std::size_t kb = b.dim(nd - 2), n = b.dim(nd - 1);
  if (k != kb) {
    throw ShapeError("matmul: inner dims disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::size_t batch = 1;
  for (int i = 0; i < nd - 2; ++i) batch *= a.dim(i);
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(nd - 1)] = n;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  detail::matmul_kernel(a.data().data(), b.data().data(), out.mutable_data().data(), batch,
                        m, k, n);
  detail::ensure_finite(out.data(), "matmul");
  if (auto* tape = detail::common_tape<T>({&a, &b})) {
    const int na = a.node(), nb = b.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [na, nb, no, a, b, batch, m, k, n](GradTape<T>& tp) {
      auto g = tp.grad_of(no);
      if (na >= 0) {
        detail::matmul_grad_a(g.data(), b.data().data(), tp.grad_acc(na).data(), batch, m,
                              k, n);
      }
      if (nb >= 0) {
        detail::matmul_grad_b(g.data(), a.data().data(), tp.grad_acc(nb).data(), batch, m,
                              k, n);
      }
    });
    out.bind(tape, no);
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax / activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_last_dim(const Tensor<T>& x) {
  if (x.ndim() < 1 || x.dim(x.ndim() - 1) < 1) {
    throw ShapeError("softmax_last_dim: bad shape " + shape_str(x.shape()));
  }
  const std::size_t d = x.dim(x.ndim() - 1);
  const std::size_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    auto xv = x.data();
    auto ov = out.mutable_data();
    const std::int64_t rows_i = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (rows_i * static_cast<std::int64_t>(d) > detail::kParallelCutoff)
    for (std::int64_t r = 0; r < rows_i; ++r) {
      const T* in = xv.data() + static_cast<std::size_t>(r) * d;
      T* o = ov.data() + static_cast<std::size_t>(r) * d;
      T maxv = in[0];
      for (std::size_t j = 1; j < d; ++j) maxv = std::max(maxv, in[j]);
      T sum = 0;
      for (std::size_t j = 0; j < d; ++j) {
        o[j] = std::exp(in[j] - maxv);
        sum += o[j];
      }
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j < d; ++j) o[j] *= inv;
    }
  }
  detail::ensure_finite(out.data(), "softmax_last_dim");
  if (auto* tape = detail::common_tape<T>({&x})) {
    const int nx = x.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nx, no, out, rows, d](GradTape<T>& tp) {
      if (nx < 0) return;
      auto g = tp.grad_of(no);
      auto gx = tp.grad_acc(nx);
      auto yv = out.data();
      const std::int64_t rows_i = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (rows_i * static_cast<std::int64_t>(d) > detail::kParallelCutoff)
      for (std::int64_t r = 0; r < rows_i; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * d;
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += g[base + j] * yv[base + j];
        for (std::size_t j = 0; j < d; ++j) {
          gx[base + j] += yv[base + j] * (g[base + j] - dot);
        }
      }
    });
    out.bind(tape, no);
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    auto xv = x.data();
    auto ov = out.mutable_data();
    const std::int64_t n = static_cast<std::int64_t>(ov.size());
#pragma omp parallel for schedule(static) if (n > detail::kParallelCutoff)
    for (std::int64_t i = 0; i < n; ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  }
  if (auto* tape = detail::common_tape<T>({&x})) {
    const int nx = x.node();
    const int no = tape->add_node(out.numel());
    // relu'(0) := 0
    tape->set_backward(no, [nx, no, x](GradTape<T>& tp) {
      if (nx < 0) return;
      auto g = tp.grad_of(no);
      auto gx = tp.grad_acc(nx);
      auto xv = x.data();
      const std::int64_t n = static_cast<std::int64_t>(g.size());
#pragma omp parallel for schedule(static) if (n > detail::kParallelCutoff)
      for (std::int64_t i = 0; i < n; ++i) {
        if (xv[i] > T(0)) gx[i] += g[i];
      }
    });
    out.bind(tape, no);
  }
  return out;
}

namespace detail {
inline double gelu_fwd(double v) {
  constexpr double s = 0.7978845608028653558798921198687;  // sqrt(2/pi)
  return 0.5 * v * (1.0 + std::tanh(s * (v + 0.044715 * v * v * v)));
}
inline double gelu_grad(double v) {
  constexpr double s = 0.7978845608028653558798921198687;
  const double u = s * (v + 0.044715 * v * v * v);
  const double t = std::tanh(u);
  const double sech2 = 1.0 - t * t;
  return 0.5 * (1.0 + t) + 0.5 * v * sech2 * s * (1.0 + 3.0 * 0.044715 * v * v);
}
}  // namespace detail

// tanh approximation
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    auto xv = x.data();
    auto ov = out.mutable_data();
    const std::int64_t n = static_cast<std::int64_t>(ov.size());
#pragma omp parallel for schedule(static) if (n > detail::kParallelCutoff)
    for (std::int64_t i = 0; i < n; ++i) {
      ov[i] = static_cast<T>(detail::gelu_fwd(static_cast<double>(xv[i])));
    }
  }
  detail::ensure_finite(out.data(), "gelu");
  if (auto* tape = detail::common_tape<T>({&x})) {
    const int nx = x.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nx, no, x](GradTape<T>& tp) {
      if (nx < 0) return;
      auto g = tp.grad_of(no);
      auto gx = tp.grad_acc(nx);
      auto xv = x.data();
      const std::int64_t n = static_cast<std::int64_t>(g.size());
#pragma omp parallel for schedule(static) if (n > detail::kParallelCutoff)
      for (std::int64_t i = 0; i < n; ++i) {
        gx[i] += g[i] * static_cast<T>(detail::gelu_grad(static_cast<double>(xv[i])));
      }
    });
    out.bind(tape, no);
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-5) {
  if (x.ndim() < 1 || gain.ndim() != 1 || bias.ndim() != 1 ||
      gain.dim(0) != x.dim(x.ndim() - 1) || bias.dim(0) != gain.dim(0)) {
    throw ShapeError("layer_norm: shape mismatch " + shape_str(x.shape()) + ", gain " +
                     shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t d = gain.dim(0);
  const std::size_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    auto xv = x.data();
    auto gv = gain.data();
    auto bv = bias.data();
    auto ov = out.mutable_data();
    const std::int64_t rows_i = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (rows_i * static_cast<std::int64_t>(d) > detail::kParallelCutoff)
    for (std::int64_t r = 0; r < rows_i; ++r) {
      const T* in = xv.data() + static_cast<std::size_t>(r) * d;
      T* o = ov.data() + static_cast<std::size_t>(r) * d;
      T mean = 0;
      for (std::size_t j = 0; j < d; ++j) mean += in[j];
      mean /= static_cast<T>(d);
      T var = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const T c = in[j] - mean;
        var += c * c;
      }
      var /= static_cast<T>(d);
      const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
      for (std::size_t j = 0; j < d; ++j) {
        o[j] = (in[j] - mean) * rstd * gv[j] + bv[j];
      }
    }
  }
  detail::ensure_finite(out.data(), "layer_norm");
  if (auto* tape = detail::common_tape<T>({&x, &gain, &bias})) {
    const int nx = x.node(), ng = gain.node(), nb = bias.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nx, ng, nb, no, x, gain, rows, d, eps](GradTape<T>& tp) {
      auto g = tp.grad_of(no);
      auto xv = x.data();
      auto gv = gain.data();
      // row statistics recomputed once, shared by all three grads
      std::vector<T> means(rows), rstds(rows);
      const std::int64_t rows_i = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (rows_i * static_cast<std::int64_t>(d) > detail::kParallelCutoff)
      for (std::int64_t r = 0; r < rows_i; ++r) {
        const T* in = xv.data() + static_cast<std::size_t>(r) * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const T c = in[j] - mean;
          var += c * c;
        }
        var /= static_cast<T>(d);
        means[static_cast<std::size_t>(r)] = mean;
        rstds[static_cast<std::size_t>(r)] = T(1) / std::sqrt(var + static_cast<T>(eps));
      }
      if (nx >= 0) {
        auto gx = tp.grad_acc(nx);
#pragma omp parallel for schedule(static) if (rows_i * static_cast<std::int64_t>(d) > detail::kParallelCutoff)
        for (std::int64_t r = 0; r < rows_i; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * d;
          const T mean = means[static_cast<std::size_t>(r)];
          const T rstd = rstds[static_cast<std::size_t>(r)];
          T m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat * xhat)
          for (std::size_t j = 0; j < d; ++j) {
            const T xh = (xv[base + j] - mean) * rstd;
            const T dxh = g[base + j] * gv[j];
            m1 += dxh;
            m2 += dxh * xh;
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T xh = (xv[base + j] - mean) * rstd;
            const T dxh = g[base + j] * gv[j];
            gx[base + j] += rstd * (dxh - m1 - xh * m2);
          }
        }
      }
      if (ng >= 0 || nb >= 0) {
        std::span<T> gg = ng >= 0 ? tp.grad_acc(ng) : std::span<T>{};
        std::span<T> gb = nb >= 0 ? tp.grad_acc(nb) : std::span<T>{};
        const std::int64_t d_i = static_cast<std::int64_t>(d);
#pragma omp parallel for schedule(static) if (d_i * static_cast<std::int64_t>(rows) > detail::kParallelCutoff)
        for (std::int64_t j = 0; j < d_i; ++j) {
          T sg = 0, sb = 0;
          for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t idx = r * d + static_cast<std::size_t>(j);
            const T xh = (xv[idx] - means[r]) * rstds[r];
            sg += g[idx] * xh;
            sb += g[idx];
          }
          if (ng >= 0) gg[static_cast<std::size_t>(j)] += sg;
          if (nb >= 0) gb[static_cast<std::size_t>(j)] += sb;
        }
      }
    });
    out.bind(tape, no);
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d 3x3, stride 1, zero padding 1 (spatial dims preserved)
// ---------------------------------------------------------------------------

// input [h, w, c_in] or [batch, h, w, c_in]; weight [3, 3, c_in, c_out].
template <typename T>
Tensor<T> conv2d_3x3(const Tensor<T>& input, const Tensor<T>& weight,
                     const Tensor<T>& bias) {
  const bool batched = input.ndim() == 4;
  if (input.ndim() != 3 && input.ndim() != 4) {
    throw ShapeError("conv2d_3x3: input must be [h,w,c] or [b,h,w,c], got " +
                     shape_str(input.shape()));
  }
  if (weight.ndim() != 4 || weight.dim(0) != 3 || weight.dim(1) != 3) {
    throw ShapeError("conv2d_3x3: weight must be [3,3,c_in,c_out], got " +
                     shape_str(weight.shape()));
  }
  const std::size_t b = batched ? input.dim(0) : 1;
  const std::size_t h = input.dim(batched ? 1 : 0);
  const std::size_t w = input.dim(batched ? 2 : 1);
  const std::size_t ci = input.dim(batched ? 3 : 2);
  const std::size_t co = weight.dim(3);
  if (weight.dim(2) != ci) {
    throw ShapeError("conv2d_3x3: channel mismatch, input " + shape_str(input.shape()) +
                     " vs weight " + shape_str(weight.shape()));
  }
  if (bias.ndim() != 1 || bias.dim(0) != co) {
    throw ShapeError("conv2d_3x3: bias shape " + shape_str(bias.shape()) + " wants [" +
                     std::to_string(co) + "]");
  }
  Shape out_shape = input.shape();
  out_shape[static_cast<std::size_t>(input.ndim() - 1)] = co;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  {
    const T* in = input.data().data();
    const T* wt = weight.data().data();
    const T* bi = bias.data().data();
    T* ov = out.mutable_data().data();
    const std::int64_t rows = static_cast<std::int64_t>(b * h);
#pragma omp parallel for schedule(static) if (rows * static_cast<std::int64_t>(w* ci* co) > detail::kParallelCutoff)
    for (std::int64_t r = 0; r < rows; ++r) {
      const std::size_t bb = static_cast<std::size_t>(r) / h;
      const std::size_t y = static_cast<std::size_t>(r) % h;
      for (std::size_t x = 0; x < w; ++x) {
        T* opx = ov + ((bb * h + y) * w + x) * co;
        for (std::size_t o = 0; o < co; ++o) opx[o] = bi[o];
        for (std::size_t dy = 0; dy < 3; ++dy) {
          const std::int64_t yy = static_cast<std::int64_t>(y) + static_cast<std::int64_t>(dy) - 1;
          if (yy < 0 || yy >= static_cast<std::int64_t>(h)) continue;
          for (std::size_t dx = 0; dx < 3; ++dx) {
            const std::int64_t xx = static_cast<std::int64_t>(x) + static_cast<std::int64_t>(dx) - 1;
            if (xx < 0 || xx >= static_cast<std::int64_t>(w)) continue;
            const T* ipx = in + ((bb * h + static_cast<std::size_t>(yy)) * w +
                                 static_cast<std::size_t>(xx)) * ci;
            const T* wrow = wt + (dy * 3 + dx) * ci * co;
            for (std::size_t c = 0; c < ci; ++c) {
              const T v = ipx[c];
              const T* wr = wrow + c * co;
              for (std::size_t o = 0; o < co; ++o) opx[o] += v * wr[o];
            }
          }
        }
      }
    }
  }
  detail::ensure_finite(out.data(), "conv2d_3x3");
  if (auto* tape = detail::common_tape<T>({&input, &weight, &bias})) {
    const int ni = input.node(), nw = weight.node(), nb = bias.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [ni, nw, nb, no, input, weight, b, h, w, ci, co](GradTape<T>& tp) {
      auto g = tp.grad_of(no);
      const T* gv = g.data();
      if (ni >= 0) {
        T* din = tp.grad_acc(ni).data();
        const T* wt = weight.data().data();
        const std::int64_t rows = static_cast<std::int64_t>(b * h);
#pragma omp parallel for schedule(static) if (rows * static_cast<std::int64_t>(w* ci* co) > detail::kParallelCutoff)
        for (std::int64_t r = 0; r < rows; ++r) {
          const std::size_t bb = static_cast<std::size_t>(r) / h;
          const std::size_t iy = static_cast<std::size_t>(r) % h;
          for (std::size_t ix = 0; ix < w; ++ix) {
            T* dpx = din + ((bb * h + iy) * w + ix) * ci;
            for (std::size_t dy = 0; dy < 3; ++dy) {
              const std::int64_t oy = static_cast<std::int64_t>(iy) + 1 - static_cast<std::int64_t>(dy);
              if (oy < 0 || oy >= static_cast<std::int64_t>(h)) continue;
              for (std::size_t dx = 0; dx < 3; ++dx) {
                const std::int64_t ox = static_cast<std::int64_t>(ix) + 1 - static_cast<std::int64_t>(dx);
                if (ox < 0 || ox >= static_cast<std::int64_t>(w)) continue;
                const T* gpx = gv + ((bb * h + static_cast<std::size_t>(oy)) * w +
                                     static_cast<std::size_t>(ox)) * co;
                const T* wrow = wt + (dy * 3 + dx) * ci * co;
                for (std::size_t c = 0; c < ci; ++c) {
                  const T* wr = wrow + c * co;
                  T s = 0;
                  for (std::size_t o = 0; o < co; ++o) s += gpx[o] * wr[o];
                  dpx[c] += s;
                }
              }
            }
          }
        }
      }
      if (nw >= 0) {
        T* dw = tp.grad_acc(nw).data();
        const T* in = input.data().data();
        const std::int64_t taps = static_cast<std::int64_t>(9 * ci);
#pragma omp parallel for schedule(static) if (taps * static_cast<std::int64_t>(b* h* w* co) > detail::kParallelCutoff)
        for (std::int64_t t = 0; t < taps; ++t) {
          const std::size_t tap = static_cast<std::size_t>(t) / ci;
          const std::size_t c = static_cast<std::size_t>(t) % ci;
          const std::size_t dy = tap / 3, dx = tap % 3;
          T* dwr = dw + (tap * ci + c) * co;
          const std::size_t oy_lo = dy == 0 ? 1 : 0;
          const std::size_t oy_hi = dy == 2 ? h - 1 : h;
          const std::size_t ox_lo = dx == 0 ? 1 : 0;
          const std::size_t ox_hi = dx == 2 ? w - 1 : w;
          for (std::size_t bb = 0; bb < b; ++bb) {
            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
              const std::size_t iy = oy + dy - 1;
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                const std::size_t ix = ox + dx - 1;
                const T v = in[((bb * h + iy) * w + ix) * ci + c];
                const T* gpx = gv + ((bb * h + oy) * w + ox) * co;
                for (std::size_t o = 0; o < co; ++o) dwr[o] += v * gpx[o];
              }
            }
          }
        }
      }
      if (nb >= 0) {
        auto db = tp.grad_acc(nb);
        const std::size_t pixels = b * h * w;
        for (std::size_t p = 0; p < pixels; ++p) {
          const T* gpx = gv + p * co;
          for (std::size_t o = 0; o < co; ++o) db[o] += gpx[o];
        }
      }
    });
    out.bind(tape, no);
  }
  return out;
}

// ---------------------------------------------------------------------------
// data movement
// ---------------------------------------------------------------------------

// View: shares the buffer and the tape node.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  }
  return x.aliased_as(std::move(shape));
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int nd = x.ndim();
  if (static_cast<int>(perm.size()) != nd) {
    throw ContractError("permute: axis list size " + std::to_string(perm.size()) +
                        " vs rank " + std::to_string(nd));
  }
  std::vector<bool> seen(static_cast<std::size_t>(nd), false);
  for (int p : perm) {
    if (p < 0 || p >= nd || seen[static_cast<std::size_t>(p)]) {
      throw ContractError("permute: invalid axis permutation");
    }
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    out_shape[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);
  }
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  detail::permute_kernel(x.data().data(), x.shape(), perm, out.mutable_data().data());
  if (auto* tape = detail::common_tape<T>({&x})) {
    const int nx = x.node();
    const int no = tape->add_node(out.numel());
    std::vector<int> inv(perm.size());
    for (int i = 0; i < nd; ++i) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
    tape->set_backward(no, [nx, no, inv, out_shape](GradTape<T>& tp) {
      if (nx < 0) return;
      auto g = tp.grad_of(no);
      std::vector<T> tmp(g.size());
      detail::permute_kernel(g.data(), out_shape, inv, tmp.data());
      detail::axpy(tp.grad_acc(nx), std::span<const T>{tmp.data(), tmp.size()});
    });
    out.bind(tape, no);
  }
  return out;
}

// out(i, j) = in((i + dy) mod h, (j + dx) mod w); inverse is (-dy, -dx).
// grid [h, w, c] or [batch, h, w, c].
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& grid, std::int64_t dy, std::int64_t dx) {
  const bool batched = grid.ndim() == 4;
  if (grid.ndim() != 3 && grid.ndim() != 4) {
    throw ShapeError("cyclic_shift: grid must be [h,w,c] or [b,h,w,c], got " +
                     shape_str(grid.shape()));
  }
  const std::size_t b = batched ? grid.dim(0) : 1;
  const std::size_t h = grid.dim(batched ? 1 : 0);
  const std::size_t w = grid.dim(batched ? 2 : 1);
  const std::size_t c = grid.dim(batched ? 3 : 2);
  Tensor<T> out = Tensor<T>::zeros(grid.shape());
  {
    const T* in = grid.data().data();
    T* ov = out.mutable_data().data();
    const std::int64_t rows = static_cast<std::int64_t>(b * h);
#pragma omp parallel for schedule(static) if (rows * static_cast<std::int64_t>(w* c) > detail::kParallelCutoff)
    for (std::int64_t r = 0; r < rows; ++r) {
      const std::size_t bb = static_cast<std::size_t>(r) / h;
      const std::size_t i = static_cast<std::size_t>(r) % h;
      const std::size_t si = detail::wrap_index(static_cast<std::int64_t>(i) + dy,
                                                static_cast<std::int64_t>(h));
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t sj = detail::wrap_index(static_cast<std::int64_t>(j) + dx,
                                                  static_cast<std::int64_t>(w));
        std::memcpy(ov + ((bb * h + i) * w + j) * c, in + ((bb * h + si) * w + sj) * c,
                    c * sizeof(T));
      }
    }
  }
  if (auto* tape = detail::common_tape<T>({&grid})) {
    const int nx = grid.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nx, no, dy, dx, b, h, w, c](GradTape<T>& tp) {
      if (nx < 0) return;
      auto g = tp.grad_of(no);
      auto gx = tp.grad_acc(nx);
      const std::int64_t rows = static_cast<std::int64_t>(b * h);
#pragma omp parallel for schedule(static) if (rows * static_cast<std::int64_t>(w* c) > detail::kParallelCutoff)
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::size_t bb = static_cast<std::size_t>(r) / h;
        const std::size_t i = static_cast<std::size_t>(r) % h;  // row of d(in)
        const std::size_t oi = detail::wrap_index(static_cast<std::int64_t>(i) - dy,
                                                  static_cast<std::int64_t>(h));
        for (std::size_t j = 0; j < w; ++j) {
          const std::size_t oj = detail::wrap_index(static_cast<std::int64_t>(j) - dx,
                                                    static_cast<std::int64_t>(w));
          const T* gpx = g.data() + ((bb * h + oi) * w + oj) * c;
          T* dpx = gx.data() + ((bb * h + i) * w + j) * c;
          for (std::size_t ch = 0; ch < c; ++ch) dpx[ch] += gpx[ch];
        }
      }
    });
    out.bind(tape, no);
  }
  return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
  if (axis < 0 || axis >= x.ndim()) {
    throw ContractError("mean_axis: axis " + std::to_string(axis) + " out of range for " +
                        shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Shape out_shape;
  for (int i = 0; i < x.ndim(); ++i) {
    if (i != axis) out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  {
    auto xv = x.data();
    auto ov = out.mutable_data();
    const T invn = T(1) / static_cast<T>(n);
    for (std::size_t o = 0; o < outer; ++o) {
      T* orow = ov.data() + o * inner;
      for (std::size_t a = 0; a < n; ++a) {
        const T* xrow = xv.data() + (o * n + a) * inner;
        for (std::size_t i = 0; i < inner; ++i) orow[i] += xrow[i];
      }
      for (std::size_t i = 0; i < inner; ++i) orow[i] *= invn;
    }
  }
  detail::ensure_finite(out.data(), "mean_axis");
  if (auto* tape = detail::common_tape<T>({&x})) {
    const int nx = x.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nx, no, outer, inner, n](GradTape<T>& tp) {
      if (nx < 0) return;
      auto g = tp.grad_of(no);
      auto gx = tp.grad_acc(nx);
      const T invn = T(1) / static_cast<T>(n);
      const std::int64_t rows = static_cast<std::int64_t>(outer * n);
#pragma omp parallel for schedule(static) if (rows * static_cast<std::int64_t>(inner) > detail::kParallelCutoff)
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::size_t o = static_cast<std::size_t>(r) / n;
        const T* grow = g.data() + o * inner;
        T* gxr = gx.data() + static_cast<std::size_t>(r) * inner;
        for (std::size_t i = 0; i < inner; ++i) gxr[i] += grow[i] * invn;
      }
    });
    out.bind(tape, no);
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ContractError("concat: empty tensor list");
  const int nd = xs[0].ndim();
  if (axis < 0 || axis >= nd) {
    throw ContractError("concat: axis " + std::to_string(axis) + " out of range");
  }
  Shape out_shape = xs[0].shape();
  std::size_t axis_total = 0;
  for (const auto& t : xs) {
    if (t.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < nd; ++i) {
      if (i != axis && t.dim(i) != xs[0].dim(i)) {
        throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                         shape_str(xs[0].shape()));
      }
    }
    axis_total += t.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= xs[0].dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= xs[0].dim(i);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  {
    auto ov = out.mutable_data();
    std::size_t off = 0;
    for (const auto& t : xs) {
      const std::size_t len = t.dim(axis) * inner;
      auto tv = t.data();
      for (std::size_t o = 0; o < outer; ++o) {
        std::memcpy(ov.data() + o * axis_total * inner + off, tv.data() + o * len,
                    len * sizeof(T));
      }
      off += len;
    }
  }
  std::vector<const Tensor<T>*> ptrs;
  for (const auto& t : xs) ptrs.push_back(&t);
  GradTape<T>* tape = nullptr;
  for (const auto* p : ptrs) {
    if (auto* tt = p->tape()) {
      if (tape && tape != tt) throw ContractError("op inputs belong to different tapes");
      tape = tt;
    }
  }
  if (tape) {
    std::vector<int> in_nodes;
    std::vector<std::size_t> in_lens;
    for (const auto& t : xs) {
      in_nodes.push_back(t.node());
      in_lens.push_back(t.dim(axis) * inner);
    }
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [no, in_nodes, in_lens, outer, axis_total, inner](GradTape<T>& tp) {
      auto g = tp.grad_of(no);
      std::size_t off = 0;
      for (std::size_t t = 0; t < in_nodes.size(); ++t) {
        const std::size_t len = in_lens[t];
        if (in_nodes[t] >= 0) {
          auto gx = tp.grad_acc(in_nodes[t]);
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = g.data() + o * axis_total * inner + off;
            T* dst = gx.data() + o * len;
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
          }
        }
        off += len;
      }
    });
    out.bind(tape, no);
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t len) {
  if (axis < 0 || axis >= x.ndim()) {
    throw ContractError("slice: axis " + std::to_string(axis) + " out of range");
  }
  if (start + len > x.dim(axis) || len == 0) {
    throw ContractError("slice: range [" + std::to_string(start) + ", " +
                        std::to_string(start + len) + ") out of bounds for axis size " +
                        std::to_string(x.dim(axis)));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  {
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(ov.data() + o * len * inner, xv.data() + (o * n + start) * inner,
                  len * inner * sizeof(T));
    }
  }
  if (auto* tape = detail::common_tape<T>({&x})) {
    const int nx = x.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nx, no, outer, inner, n, start, len](GradTape<T>& tp) {
      if (nx < 0) return;
      auto g = tp.grad_of(no);
      auto gx = tp.grad_acc(nx);
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = g.data() + o * len * inner;
        T* dst = gx.data() + (o * n + start) * inner;
        for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
    out.bind(tape, no);
  }
  return out;
}

// Row gather: out[i] = table[idx[i]]; used for the relative-bias lookup.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& table, const std::vector<std::int32_t>& idx) {
  if (table.ndim() != 2) {
    throw ShapeError("take_rows: table must be 2-d, got " + shape_str(table.shape()));
  }
  const std::size_t rows = table.dim(0), cols = table.dim(1);
  Tensor<T> out = Tensor<T>::zeros({idx.size(), cols});
  {
    auto tv = table.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto r = idx[i];
      if (r < 0 || static_cast<std::size_t>(r) >= rows) {
        throw ContractError("take_rows: index " + std::to_string(r) + " out of range [0, " +
                            std::to_string(rows) + ")");
      }
      std::memcpy(ov.data() + i * cols, tv.data() + static_cast<std::size_t>(r) * cols,
                  cols * sizeof(T));
    }
  }
  if (auto* tape = detail::common_tape<T>({&table})) {
    const int nt = table.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nt, no, idx, cols](GradTape<T>& tp) {
      if (nt < 0) return;
      auto g = tp.grad_of(no);
      auto gt = tp.grad_acc(nt);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const T* src = g.data() + i * cols;
        T* dst = gt.data() + static_cast<std::size_t>(idx[i]) * cols;
        for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
      }
    });
    out.bind(tape, no);
  }
  return out;
}

// out = [x, x, ..., x] stacked along a new leading axis of size reps.
template <typename T>
Tensor<T> tile_leading(const Tensor<T>& x, std::size_t reps) {
  if (reps == 0) throw ContractError("tile_leading: zero repetitions");
  Shape out_shape;
  out_shape.push_back(reps);
  for (int i = 0; i < x.ndim(); ++i) out_shape.push_back(x.dim(i));
  const std::size_t inner = x.numel();
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  {
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (std::size_t r = 0; r < reps; ++r) {
      std::memcpy(ov.data() + r * inner, xv.data(), inner * sizeof(T));
    }
  }
  if (auto* tape = detail::common_tape<T>({&x})) {
    const int nx = x.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nx, no, reps, inner](GradTape<T>& tp) {
      if (nx < 0) return;
      auto g = tp.grad_of(no);
      auto gx = tp.grad_acc(nx);
      const std::int64_t inner_i = static_cast<std::int64_t>(inner);
#pragma omp parallel for schedule(static) if (inner_i * static_cast<std::int64_t>(reps) > detail::kParallelCutoff)
      for (std::int64_t j = 0; j < inner_i; ++j) {
        T s = 0;
        for (std::size_t r = 0; r < reps; ++r) s += g[r * inner + static_cast<std::size_t>(j)];
        gx[static_cast<std::size_t>(j)] += s;
      }
    });
    out.bind(tape, no);
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (const T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::ensure_finite(out.data(), "sum");
  if (auto* tape = detail::common_tape<T>({&x})) {
    const int nx = x.node();
    const int no = tape->add_node(1);
    tape->set_backward(no, [nx, no](GradTape<T>& tp) {
      if (nx < 0) return;
      const T g = tp.grad_of(no)[0];
      auto gx = tp.grad_acc(nx);
      for (auto& v : gx) v += g;
    });
    out.bind(tape, no);
  }
  return out;
}

// Mean over the batch of -log softmax(logits)[label]; log-sum-exp stable.
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) {
    throw ShapeError("cross_entropy_mean: logits must be [batch, classes], got " +
                     shape_str(logits.shape()));
  }
  const std::size_t bsz = logits.dim(0), k = logits.dim(1);
  if (labels.size() != bsz) {
    throw ContractError("cross_entropy_mean: " + std::to_string(labels.size()) +
                        " labels for batch " + std::to_string(bsz));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ContractError("cross_entropy_mean: label " + std::to_string(y) +
                          " out of range [0, " + std::to_string(k) + ")");
    }
  }
  auto lv = logits.data();
  T total = 0;
  for (std::size_t r = 0; r < bsz; ++r) {
    const T* row = lv.data() + r * k;
    T maxv = row[0];
    for (std::size_t j = 1; j < k; ++j) maxv = std::max(maxv, row[j]);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - maxv);
    const T lse = maxv + std::log(s);
    total += lse - row[static_cast<std::size_t>(labels[r])];
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(bsz));
  detail::ensure_finite(out.data(), "cross_entropy_mean");
  if (auto* tape = detail::common_tape<T>({&logits})) {
    const int nl = logits.node();
    const int no = tape->add_node(1);
    tape->set_backward(no, [nl, no, logits, labels, bsz, k](GradTape<T>& tp) {
      if (nl < 0) return;
      const T g = tp.grad_of(no)[0] / static_cast<T>(bsz);
      auto gl = tp.grad_acc(nl);
      auto lv = logits.data();
      const std::int64_t bsz_i = static_cast<std::int64_t>(bsz);
#pragma omp parallel for schedule(static) if (bsz_i * static_cast<std::int64_t>(k) > detail::kParallelCutoff)
      for (std::int64_t r = 0; r < bsz_i; ++r) {
        const T* row = lv.data() + static_cast<std::size_t>(r) * k;
        T* grow = gl.data() + static_cast<std::size_t>(r) * k;
        T maxv = row[0];
        for (std::size_t j = 1; j < k; ++j) maxv = std::max(maxv, row[j]);
        T s = 0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - maxv);
        const T inv = T(1) / s;
        for (std::size_t j = 0; j < k; ++j) {
          T p = std::exp(row[j] - maxv) * inv;
          if (j == static_cast<std::size_t>(labels[static_cast<std::size_t>(r)])) p -= T(1);
          grow[j] += g * p;
        }
      }
    });
    out.bind(tape, no);
  }
  return out;
}

// ---------------------------------------------------------------------------
// small non-autodiff helpers
// ---------------------------------------------------------------------------

// Ties broken toward the lowest class index.
template <typename T>
std::size_t argmax_row(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

}  // namespace coswin
