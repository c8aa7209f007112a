#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <thread>

#include "invcoss/tensor.hpp"

namespace invcoss {

// ---------------------------------------------------------------------------
// Optional batch parallelism. Reference mode is one worker; INVCOSS_THREADS
// raises the cap. Reductions always combine worker partials in index order,
// so results are deterministic for a fixed worker count.
// ---------------------------------------------------------------------------

inline size_t worker_count() {
  static size_t n = [] {
    const char* env = std::getenv("INVCOSS_THREADS");
    if (!env) return size_t{1};
    long v = std::strtol(env, nullptr, 10);
    if (v < 1) v = 1;
    if (v > 64) v = 64;
    return static_cast<size_t>(v);
  }();
  return n;
}

template <typename F>
void parallel_chunks(size_t n, F body) {  // body(chunk_index, begin, end)
  size_t w = std::min(worker_count(), n == 0 ? size_t{1} : n);
  if (w <= 1) {
    body(size_t{0}, size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(w);
  for (size_t c = 0; c < w; ++c) {
    size_t lo = n * c / w, hi = n * (c + 1) / w;
    pool.emplace_back([&, c, lo, hi] { body(c, lo, hi); });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// GEMM kernel (row-major). Eigen backs the inner product loops.
// ---------------------------------------------------------------------------

template <typename T>
void gemm(size_t m, size_t n, size_t k, const T* a, const T* b, T* c,
          bool accumulate = false, bool trans_a = false, bool trans_b = false) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Idx = Eigen::Index;
  Eigen::Map<Mat> mc(c, static_cast<Idx>(m), static_cast<Idx>(n));
  Eigen::Map<const Mat> ma(a, static_cast<Idx>(trans_a ? k : m), static_cast<Idx>(trans_a ? m : k));
  Eigen::Map<const Mat> mb(b, static_cast<Idx>(trans_b ? n : k), static_cast<Idx>(trans_b ? k : n));
  auto run = [&](const auto& x, const auto& y) {
    if (accumulate)
      mc.noalias() += x * y;
    else
      mc.noalias() = x * y;
  };
  if (!trans_a && !trans_b)
    run(ma, mb);
  else if (trans_a && !trans_b)
    run(ma.transpose(), mb);
  else if (!trans_a && trans_b)
    run(ma, mb.transpose());
  else
    run(ma.transpose(), mb.transpose());
}

namespace detail {

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void accum(std::vector<T>& dst, const std::vector<T>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  auto pa = a.node(), pb = b.node();
  return detail::op_result<T>("add", a.shape(), std::move(v), {pa, pb}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      detail::accum(pa->grad, self.grad);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      detail::accum(pb->grad, self.grad);
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  auto pa = a.node(), pb = b.node();
  return detail::op_result<T>("sub", a.shape(), std::move(v), {pa, pb}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      detail::accum(pa->grad, self.grad);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  auto pa = a.node(), pb = b.node();
  return detail::op_result<T>("mul", a.shape(), std::move(v), {pa, pb}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("div", a, b);
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] / b.data()[i];
  auto pa = a.node(), pb = b.node();
  return detail::op_result<T>("div", a.shape(), std::move(v), {pa, pb}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] / pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        pb->grad[i] -= self.grad[i] * pa->value[i] / (pb->value[i] * pb->value[i]);
      }
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + s;
  auto pa = a.node();
  return detail::op_result<T>("add_scalar", a.shape(), std::move(v), {pa}, [pa](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    detail::accum(pa->grad, self.grad);
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * s;
  auto pa = a.node();
  return detail::op_result<T>("mul_scalar", a.shape(), std::move(v), {pa}, [pa, s](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += s * self.grad[i];
  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

// abs with subgradient 0 at 0, so total variation stays defined on flats.
template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::abs(a.data()[i]);
  auto pa = a.node();
  return detail::op_result<T>("abs", a.shape(), std::move(v), {pa}, [pa](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      T x = pa->value[i];
      pa->grad[i] += self.grad[i] * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
    }
  });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * a.data()[i];
  auto pa = a.node();
  return detail::op_result<T>("square", a.shape(), std::move(v), {pa}, [pa](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += T(2) * pa->value[i] * self.grad[i];
  });
}

// sqrt with subgradient 0 at 0 (keeps exact-match norm terms finite).
template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(a.data()[i]);
  auto pa = a.node();
  return detail::op_result<T>("sqrt", a.shape(), std::move(v), {pa}, [pa](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      T y = self.value[i];
      if (y > T(0)) pa->grad[i] += self.grad[i] * (T(0.5) / y);
    }
  });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = T(1) / a.data()[i];
  auto pa = a.node();
  return detail::op_result<T>("reciprocal", a.shape(), std::move(v), {pa}, [pa](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      pa->grad[i] -= self.grad[i] * self.value[i] * self.value[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  auto pa = a.node();
  return detail::op_result<T>("relu", a.shape(), std::move(v), {pa}, [pa](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (pa->value[i] > T(0)) pa->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) {
    v[i] = a.data()[i] > T(0) ? a.data()[i] : slope * a.data()[i];
  }
  auto pa = a.node();
  return detail::op_result<T>("leaky_relu", a.shape(), std::move(v), {pa},
                              [pa, slope](Node<T>& self) {
                                if (!pa->requires_grad) return;
                                pa->ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i) {
                                  pa->grad[i] +=
                                      self.grad[i] * (pa->value[i] > T(0) ? T(1) : slope);
                                }
                              });
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) {
    double x = static_cast<double>(a.data()[i]);
    v[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  auto pa = a.node();
  return detail::op_result<T>("gelu", a.shape(), std::move(v), {pa}, [pa](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double x = static_cast<double>(pa->value[i]);
      double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      pa->grad[i] += self.grad[i] * static_cast<T>(cdf + x * pdf);
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) {
    double x = static_cast<double>(a.data()[i]);
    v[i] = static_cast<T>(1.0 / (1.0 + std::exp(-x)));
  }
  auto pa = a.node();
  return detail::op_result<T>("sigmoid", a.shape(), std::move(v), {pa}, [pa](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      T y = self.value[i];
      pa->grad[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a.data()[i]);
  auto pa = a.node();
  return detail::op_result<T>("tanh", a.shape(), std::move(v), {pa}, [pa](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      T y = self.value[i];
      pa->grad[i] += self.grad[i] * (T(1) - y * y);
    }
  });
}

// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.ndim() == 0) throw ShapeError("softmax: scalar input");
  size_t d = a.shape().back();
  size_t rows = a.numel() / d;
  std::vector<T> v(a.numel());
  for (size_t r = 0; r < rows; ++r) {
    const T* x = a.data() + r * d;
    T* y = v.data() + r * d;
    T mx = x[0];
    for (size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    double denom = 0;
    for (size_t j = 0; j < d; ++j) {
      double e = std::exp(static_cast<double>(x[j] - mx));
      y[j] = static_cast<T>(e);
      denom += e;
    }
    T inv = static_cast<T>(1.0 / denom);
    for (size_t j = 0; j < d; ++j) y[j] *= inv;
  }
  auto pa = a.node();
  return detail::op_result<T>("softmax", a.shape(), std::move(v), {pa}, [pa, d](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    size_t rows = self.value.size() / d;
    for (size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * d;
      const T* g = self.grad.data() + r * d;
      T* dx = pa->grad.data() + r * d;
      T dot = T(0);
      for (size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      for (size_t j = 0; j < d; ++j) dx[j] += y[j] * (g[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

// Per-input-axis output stride; reduced axes get stride 0.
template <typename T>
struct ReducePlan {
  Shape out_shape;
  std::vector<size_t> out_stride;  // indexed by input axis
  size_t count = 1;                // elements folded into each output cell

  ReducePlan(const Shape& in, std::vector<size_t> axes) {
    std::sort(axes.begin(), axes.end());
    for (size_t i = 1; i < axes.size(); ++i) {
      if (axes[i] == axes[i - 1]) throw ShapeError("reduce: duplicate axis");
    }
    std::vector<bool> reduced(in.size(), false);
    for (size_t ax : axes) {
      if (ax >= in.size()) throw ShapeError("reduce: axis out of range for " + shape_str(in));
      reduced[ax] = true;
      count *= in[ax];
    }
    for (size_t i = 0; i < in.size(); ++i) {
      if (!reduced[i]) out_shape.push_back(in[i]);
    }
    std::vector<size_t> strides = row_major_strides(out_shape);
    out_stride.assign(in.size(), 0);
    size_t k = 0;
    for (size_t i = 0; i < in.size(); ++i) {
      if (!reduced[i]) out_stride[i] = strides[k++];
    }
  }

  // Iterates input linear index together with its output linear index.
  template <typename F>
  void for_each(const Shape& in, F f) const {
    size_t n = shape_numel(in);
    std::vector<size_t> coord(in.size(), 0);
    size_t out = 0;
    for (size_t i = 0; i < n; ++i) {
      f(i, out);
      for (size_t ax = in.size(); ax-- > 0;) {
        if (++coord[ax] < in[ax]) {
          out += out_stride[ax];
          break;
        }
        coord[ax] = 0;
        out -= out_stride[ax] * (in[ax] - 1);
      }
    }
  }
};

}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& a, const std::vector<size_t>& axes) {
  detail::ReducePlan<T> plan(a.shape(), axes);
  std::vector<T> v(shape_numel(plan.out_shape), T(0));
  plan.for_each(a.shape(), [&](size_t i, size_t o) { v[o] += a.data()[i]; });
  auto pa = a.node();
  Shape in_shape = a.shape();
  return detail::op_result<T>(
      "sum", plan.out_shape, std::move(v), {pa},
      [pa, plan, in_shape](Node<T>& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        plan.for_each(in_shape, [&](size_t i, size_t o) { pa->grad[i] += self.grad[o]; });
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  std::vector<size_t> axes(a.ndim());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return sum(a, axes);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, const std::vector<size_t>& axes) {
  detail::ReducePlan<T> plan(a.shape(), axes);
  T scale = T(1) / static_cast<T>(plan.count);
  std::vector<T> v(shape_numel(plan.out_shape), T(0));
  plan.for_each(a.shape(), [&](size_t i, size_t o) { v[o] += a.data()[i]; });
  for (auto& x : v) x *= scale;
  auto pa = a.node();
  Shape in_shape = a.shape();
  return detail::op_result<T>(
      "mean", plan.out_shape, std::move(v), {pa},
      [pa, plan, in_shape, scale](Node<T>& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        plan.for_each(in_shape, [&](size_t i, size_t o) { pa->grad[i] += self.grad[o] * scale; });
      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  std::vector<size_t> axes(a.ndim());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return mean(a, axes);
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " has " + std::to_string(a.numel()) +
                     " elements, target " + shape_str(shape));
  }
  auto pa = a.node();
  return detail::op_result<T>("reshape", std::move(shape), a.values(), {pa}, [pa](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    detail::accum(pa->grad, self.grad);
  });
}

namespace detail {

template <typename T>
void permute_copy(const T* src, const Shape& in, const std::vector<size_t>& perm, T* dst,
                  bool accumulate) {
  Shape out(in.size());
  for (size_t i = 0; i < perm.size(); ++i) out[i] = in[perm[i]];
  std::vector<size_t> in_strides = row_major_strides(in);
  std::vector<size_t> out_strides = row_major_strides(out);
  // src stride per output axis
  std::vector<size_t> stride(in.size());
  for (size_t i = 0; i < perm.size(); ++i) stride[i] = in_strides[perm[i]];
  size_t n = shape_numel(in);
  std::vector<size_t> coord(in.size(), 0);
  size_t si = 0;
  for (size_t o = 0; o < n; ++o) {
    if (accumulate)
      dst[si] += src[o];
    else
      dst[o] = src[si];
    for (size_t ax = out.size(); ax-- > 0;) {
      if (++coord[ax] < out[ax]) {
        si += stride[ax];
        break;
      }
      coord[ax] = 0;
      si -= stride[ax] * (out[ax] - 1);
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, const std::vector<size_t>& perm) {
  if (perm.size() != a.ndim()) throw ShapeError("transpose: perm rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  Shape out(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= a.ndim() || seen[perm[i]]) throw ShapeError("transpose: invalid permutation");
    seen[perm[i]] = true;
    out[i] = a.shape()[perm[i]];
  }
  std::vector<T> v(a.numel());
  detail::permute_copy(a.data(), a.shape(), perm, v.data(), false);
  auto pa = a.node();
  Shape in_shape = a.shape();
  return detail::op_result<T>("transpose", out, std::move(v), {pa},
                              [pa, perm, in_shape](Node<T>& self) {
                                if (!pa->requires_grad) return;
                                pa->ensure_grad();
                                detail::permute_copy(self.grad.data(), in_shape, perm,
                                                     pa->grad.data(), true);
                              });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  size_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < s0.size(); ++i) {
      if (i != axis && p.shape()[i] != s0[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(s0));
      }
    }
    axis_total += p.shape()[axis];
  }
  Shape out = s0;
  out[axis] = axis_total;
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  std::vector<T> v(shape_numel(out));
  std::vector<size_t> chunk(parts.size());
  for (size_t p = 0; p < parts.size(); ++p) chunk[p] = parts[p].shape()[axis] * inner;
  size_t out_row = axis_total * inner;
  for (size_t o = 0; o < outer; ++o) {
    size_t off = o * out_row;
    for (size_t p = 0; p < parts.size(); ++p) {
      std::memcpy(v.data() + off, parts[p].data() + o * chunk[p], chunk[p] * sizeof(T));
      off += chunk[p];
    }
  }
  std::vector<std::shared_ptr<Node<T>>> pn;
  pn.reserve(parts.size());
  for (const auto& p : parts) pn.push_back(p.node());
  return detail::op_result<T>(
      "concat", out, std::move(v), pn, [pn, chunk, outer, out_row](Node<T>& self) {
        for (size_t o = 0; o < outer; ++o) {
          size_t off = o * out_row;
          for (size_t p = 0; p < pn.size(); ++p) {
            if (pn[p]->requires_grad) {
              pn[p]->ensure_grad();
              T* dst = pn[p]->grad.data() + o * chunk[p];
              const T* g = self.grad.data() + off;
              for (size_t i = 0; i < chunk[p]; ++i) dst[i] += g[i];
            }
            off += chunk[p];
          }
        }
      });
}

// Gathers elements where mask is nonzero into a 1-D tensor.
template <typename T>
Tensor<T> masked_select(const Tensor<T>& a, const Tensor<T>& mask) {
  detail::check_same_shape("masked_select", a, mask);
  std::vector<size_t> idx;
  for (size_t i = 0; i < mask.numel(); ++i) {
    if (mask.data()[i] != T(0)) idx.push_back(i);
  }
  std::vector<T> v(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) v[i] = a.data()[idx[i]];
  auto pa = a.node();
  return detail::op_result<T>("masked_select", {idx.size()}, std::move(v), {pa},
                              [pa, idx](Node<T>& self) {
                                if (!pa->requires_grad) return;
                                pa->ensure_grad();
                                for (size_t i = 0; i < idx.size(); ++i) {
                                  pa->grad[idx[i]] += self.grad[i];
                                }
                              });
}

// ---------------------------------------------------------------------------
// Suffix broadcasting (bias adds, fixed masks, per-row scales)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_suffix(const char* op, const Tensor<T>& x, const Tensor<T>& s) {
  if (s.ndim() > x.ndim()) {
    throw ShapeError(std::string(op) + ": operand " + shape_str(s.shape()) +
                     " has higher rank than " + shape_str(x.shape()));
  }
  size_t off = x.ndim() - s.ndim();
  for (size_t i = 0; i < s.ndim(); ++i) {
    if (x.shape()[off + i] != s.shape()[i]) {
      throw ShapeError(std::string(op) + ": " + shape_str(s.shape()) + " is not a suffix of " +
                       shape_str(x.shape()));
    }
  }
}

}  // namespace detail

// x + b where b's shape is a suffix of x's (bias over leading axes).
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  detail::check_suffix("add_bias", x, b);
  size_t bn = b.numel();
  size_t lead = x.numel() / bn;
  std::vector<T> v(x.numel());
  for (size_t l = 0; l < lead; ++l) {
    const T* xp = x.data() + l * bn;
    T* vp = v.data() + l * bn;
    for (size_t j = 0; j < bn; ++j) vp[j] = xp[j] + b.data()[j];
  }
  auto px = x.node(), pb = b.node();
  return detail::op_result<T>("add_bias", x.shape(), std::move(v), {px, pb},
                              [px, pb, lead, bn](Node<T>& self) {
                                if (px->requires_grad) {
                                  px->ensure_grad();
                                  detail::accum(px->grad, self.grad);
                                }
                                if (pb->requires_grad) {
                                  pb->ensure_grad();
                                  for (size_t l = 0; l < lead; ++l) {
                                    const T* g = self.grad.data() + l * bn;
                                    for (size_t j = 0; j < bn; ++j) pb->grad[j] += g[j];
                                  }
                                }
                              });
}

// x * m with m's shape a suffix of x's.
template <typename T>
Tensor<T> mul_bcast(const Tensor<T>& x, const Tensor<T>& m) {
  detail::check_suffix("mul_bcast", x, m);
  size_t bn = m.numel();
  size_t lead = x.numel() / bn;
  std::vector<T> v(x.numel());
  for (size_t l = 0; l < lead; ++l) {
    const T* xp = x.data() + l * bn;
    T* vp = v.data() + l * bn;
    for (size_t j = 0; j < bn; ++j) vp[j] = xp[j] * m.data()[j];
  }
  auto px = x.node(), pm = m.node();
  return detail::op_result<T>(
      "mul_bcast", x.shape(), std::move(v), {px, pm}, [px, pm, lead, bn](Node<T>& self) {
        if (px->requires_grad) {
          px->ensure_grad();
          for (size_t l = 0; l < lead; ++l) {
            const T* g = self.grad.data() + l * bn;
            T* d = px->grad.data() + l * bn;
            for (size_t j = 0; j < bn; ++j) d[j] += g[j] * pm->value[j];
          }
        }
        if (pm->requires_grad) {
          pm->ensure_grad();
          for (size_t l = 0; l < lead; ++l) {
            const T* g = self.grad.data() + l * bn;
            const T* xv = px->value.data() + l * bn;
            for (size_t j = 0; j < bn; ++j) pm->grad[j] += g[j] * xv[j];
          }
        }
      });
}

// Multiplies row r of x (first axis) by s[r].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& s) {
  if (x.ndim() < 1 || s.numel() != x.shape()[0]) {
    throw ShapeError("scale_rows: scale " + shape_str(s.shape()) + " does not match rows of " +
                     shape_str(x.shape()));
  }
  size_t rows = x.shape()[0];
  size_t rowsize = x.numel() / rows;
  std::vector<T> v(x.numel());
  for (size_t r = 0; r < rows; ++r) {
    const T* xp = x.data() + r * rowsize;
    T* vp = v.data() + r * rowsize;
    for (size_t j = 0; j < rowsize; ++j) vp[j] = xp[j] * s.data()[r];
  }
  auto px = x.node(), ps = s.node();
  return detail::op_result<T>(
      "scale_rows", x.shape(), std::move(v), {px, ps}, [px, ps, rows, rowsize](Node<T>& self) {
        if (px->requires_grad) {
          px->ensure_grad();
          for (size_t r = 0; r < rows; ++r) {
            const T* g = self.grad.data() + r * rowsize;
            T* d = px->grad.data() + r * rowsize;
            for (size_t j = 0; j < rowsize; ++j) d[j] += g[j] * ps->value[r];
          }
        }
        if (ps->requires_grad) {
          ps->ensure_grad();
          for (size_t r = 0; r < rows; ++r) {
            const T* g = self.grad.data() + r * rowsize;
            const T* xv = px->value.data() + r * rowsize;
            T acc = T(0);
            for (size_t j = 0; j < rowsize; ++j) acc += g[j] * xv[j];
            ps->grad[r] += acc;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> v(m * n);
  gemm(m, n, k, a.data(), b.data(), v.data());
  auto pa = a.node(), pb = b.node();
  return detail::op_result<T>("matmul", {m, n}, std::move(v), {pa, pb},
                              [pa, pb, m, k, n](Node<T>& self) {
                                if (pa->requires_grad) {
                                  pa->ensure_grad();
                                  gemm(m, k, n, self.grad.data(), pb->value.data(),
                                       pa->grad.data(), true, false, true);
                                }
                                if (pb->requires_grad) {
                                  pb->ensure_grad();
                                  gemm(k, n, m, pa->value.data(), self.grad.data(),
                                       pb->grad.data(), true, true, false);
                                }
                              });
}

// Batched matmul over leading axis: [B,m,k] x [B,k,n] -> [B,m,n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] ||
      a.shape()[2] != b.shape()[1]) {
    throw ShapeError("bmm: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  size_t bs = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  std::vector<T> v(bs * m * n);
  parallel_chunks(bs, [&](size_t, size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      gemm(m, n, k, a.data() + i * m * k, b.data() + i * k * n, v.data() + i * m * n);
    }
  });
  auto pa = a.node(), pb = b.node();
  return detail::op_result<T>(
      "bmm", {bs, m, n}, std::move(v), {pa, pb}, [pa, pb, bs, m, k, n](Node<T>& self) {
        if (pa->requires_grad) pa->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        parallel_chunks(bs, [&](size_t, size_t lo, size_t hi) {
          for (size_t i = lo; i < hi; ++i) {
            const T* g = self.grad.data() + i * m * n;
            if (pa->requires_grad) {
              gemm(m, k, n, g, pb->value.data() + i * k * n, pa->grad.data() + i * m * k, true,
                   false, true);
            }
            if (pb->requires_grad) {
              gemm(k, n, m, pa->value.data() + i * m * k, g, pb->grad.data() + i * k * n, true,
                   true, false);
            }
          }
        });
      });
}

// ---------------------------------------------------------------------------
// 2D convolution, stride 1, zero padding
// ---------------------------------------------------------------------------

namespace detail {

// col layout: [Cin*kh*kw, H2*W2]
template <typename T>
void im2col(const T* x, size_t cin, size_t h, size_t w, size_t kh, size_t kw, size_t pad,
            size_t h2, size_t w2, T* col) {
  for (size_t c = 0; c < cin; ++c) {
    const T* xc = x + c * h * w;
    for (size_t ki = 0; ki < kh; ++ki) {
      for (size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * h2 * w2;
        for (size_t oy = 0; oy < h2; ++oy) {
          long iy = static_cast<long>(oy + ki) - static_cast<long>(pad);
          T* dst = row + oy * w2;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + w2, T(0));
            continue;
          }
          // valid ox range where ix = ox + kj - pad lands inside [0, w)
          long shift = static_cast<long>(kj) - static_cast<long>(pad);
          size_t ox_lo = shift < 0 ? static_cast<size_t>(-shift) : 0;
          long hi = static_cast<long>(w) - shift;
          size_t ox_hi = hi < 0 ? 0 : std::min<size_t>(w2, static_cast<size_t>(hi));
          if (ox_lo > 0) std::fill(dst, dst + std::min(ox_lo, w2), T(0));
          if (ox_hi > ox_lo) {
            std::memcpy(dst + ox_lo, xc + iy * w + (static_cast<long>(ox_lo) + shift),
                        (ox_hi - ox_lo) * sizeof(T));
          }
          if (ox_hi < w2) std::fill(dst + ox_hi, dst + w2, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, size_t cin, size_t h, size_t w, size_t kh, size_t kw, size_t pad,
                size_t h2, size_t w2, T* dx) {
  for (size_t c = 0; c < cin; ++c) {
    T* xc = dx + c * h * w;
    for (size_t ki = 0; ki < kh; ++ki) {
      for (size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * h2 * w2;
        for (size_t oy = 0; oy < h2; ++oy) {
          long iy = static_cast<long>(oy + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          long shift = static_cast<long>(kj) - static_cast<long>(pad);
          size_t ox_lo = shift < 0 ? static_cast<size_t>(-shift) : 0;
          long hi = static_cast<long>(w) - shift;
          size_t ox_hi = hi < 0 ? 0 : std::min<size_t>(w2, static_cast<size_t>(hi));
          const T* src = row + oy * w2;
          T* dst = xc + iy * w + shift;
          for (size_t ox = ox_lo; ox < ox_hi; ++ox) dst[ox] += src[ox];
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, size_t pad) {
  if (x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1]) {
    throw ShapeError("conv2d: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  }
  size_t b = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], ww = x.shape()[3];
  size_t cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (bias.defined() && bias.numel() != cout) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " vs cout " +
                     std::to_string(cout));
  }
  if (h + 2 * pad < kh || ww + 2 * pad < kw) {
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  size_t h2 = h + 2 * pad - kh + 1, w2 = ww + 2 * pad - kw + 1;
  size_t k = cin * kh * kw, m = h2 * w2;
  std::vector<T> v(b * cout * m);
  parallel_chunks(b, [&](size_t, size_t lo, size_t hi) {
    std::vector<T> col(k * m);
    for (size_t i = lo; i < hi; ++i) {
      detail::im2col(x.data() + i * cin * h * ww, cin, h, ww, kh, kw, pad, h2, w2, col.data());
      T* y = v.data() + i * cout * m;
      gemm(cout, m, k, w.data(), col.data(), y);
      if (bias.defined()) {
        for (size_t c = 0; c < cout; ++c) {
          T bv = bias.data()[c];
          T* yc = y + c * m;
          for (size_t j = 0; j < m; ++j) yc[j] += bv;
        }
      }
    }
  });
  auto px = x.node(), pw = w.node();
  auto pbias = bias.defined() ? bias.node() : nullptr;
  std::vector<std::shared_ptr<Node<T>>> parents{px, pw};
  if (pbias) parents.push_back(pbias);
  return detail::op_result<T>(
      "conv2d", {b, cout, h2, w2}, std::move(v), parents,
      [px, pw, pbias, b, cin, h, ww, cout, kh, kw, pad, h2, w2, k, m](Node<T>& self) {
        if (px->requires_grad) px->ensure_grad();
        if (pw->requires_grad) pw->ensure_grad();
        size_t chunks = std::min(worker_count(), b);
        std::vector<std::vector<T>> dw_parts;
        if (pw->requires_grad) dw_parts.assign(chunks, std::vector<T>(cout * k, T(0)));
        parallel_chunks(b, [&](size_t ci, size_t lo, size_t hi) {
          std::vector<T> col(k * m), dcol(k * m);
          for (size_t i = lo; i < hi; ++i) {
            const T* g = self.grad.data() + i * cout * m;
            if (pw->requires_grad || px->requires_grad) {
              detail::im2col(px->value.data() + i * cin * h * ww, cin, h, ww, kh, kw, pad, h2,
                             w2, col.data());
            }
            if (pw->requires_grad) {
              gemm(cout, k, m, g, col.data(), dw_parts[ci].data(), true, false, true);
            }
            if (px->requires_grad) {
              gemm(k, m, cout, pw->value.data(), g, dcol.data(), false, true, false);
              detail::col2im_add(dcol.data(), cin, h, ww, kh, kw, pad, h2, w2,
                                 px->grad.data() + i * cin * h * ww);
            }
          }
        });
        if (pw->requires_grad) {
          for (const auto& part : dw_parts) detail::accum(pw->grad, part);
        }
        if (pbias && pbias->requires_grad) {
          pbias->ensure_grad();
          for (size_t i = 0; i < b; ++i) {
            const T* g = self.grad.data() + i * cout * m;
            for (size_t c = 0; c < cout; ++c) {
              T acc = T(0);
              const T* gc = g + c * m;
              for (size_t j = 0; j < m; ++j) acc += gc[j];
              pbias->grad[c] += acc;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// 2x spatial upsampling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
  if (x.ndim() != 4) throw ShapeError("upsample2x_nearest: expected [B,C,H,W], got " +
                                      shape_str(x.shape()));
  size_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  size_t h2 = h * 2, w2 = w * 2;
  std::vector<T> v(b * c * h2 * w2);
  for (size_t bc = 0; bc < b * c; ++bc) {
    const T* src = x.data() + bc * h * w;
    T* dst = v.data() + bc * h2 * w2;
    for (size_t y = 0; y < h2; ++y) {
      const T* srow = src + (y / 2) * w;
      T* drow = dst + y * w2;
      for (size_t z = 0; z < w2; ++z) drow[z] = srow[z / 2];
    }
  }
  auto px = x.node();
  return detail::op_result<T>("upsample2x_nearest", {b, c, h2, w2}, std::move(v), {px},
                              [px, b, c, h, w](Node<T>& self) {
                                if (!px->requires_grad) return;
                                px->ensure_grad();
                                size_t h2 = h * 2, w2 = w * 2;
                                for (size_t bc = 0; bc < b * c; ++bc) {
                                  const T* g = self.grad.data() + bc * h2 * w2;
                                  T* d = px->grad.data() + bc * h * w;
                                  for (size_t y = 0; y < h2; ++y) {
                                    T* drow = d + (y / 2) * w;
                                    const T* grow = g + y * w2;
                                    for (size_t z = 0; z < w2; ++z) drow[z / 2] += grow[z];
                                  }
                                }
                              });
}

namespace detail {

struct LerpIdx {
  size_t i0, i1;
  double w0, w1;
};

// Half-pixel mapping for scale factor 2 (align_corners = false).
inline std::vector<LerpIdx> lerp_table(size_t in, size_t out) {
  std::vector<LerpIdx> t(out);
  for (size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    double f = std::floor(src);
    double frac = src - f;
    long i0 = static_cast<long>(f);
    long i1 = i0 + 1;
    i0 = std::clamp<long>(i0, 0, static_cast<long>(in) - 1);
    i1 = std::clamp<long>(i1, 0, static_cast<long>(in) - 1);
    t[o] = {static_cast<size_t>(i0), static_cast<size_t>(i1), 1.0 - frac, frac};
  }
  return t;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample2x_bilinear(const Tensor<T>& x) {
  if (x.ndim() != 4) throw ShapeError("upsample2x_bilinear: expected [B,C,H,W], got " +
                                      shape_str(x.shape()));
  size_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  size_t h2 = h * 2, w2 = w * 2;
  auto ty = detail::lerp_table(h, h2);
  auto tx = detail::lerp_table(w, w2);
  std::vector<T> v(b * c * h2 * w2);
  for (size_t bc = 0; bc < b * c; ++bc) {
    const T* src = x.data() + bc * h * w;
    T* dst = v.data() + bc * h2 * w2;
    for (size_t y = 0; y < h2; ++y) {
      const T* r0 = src + ty[y].i0 * w;
      const T* r1 = src + ty[y].i1 * w;
      T* drow = dst + y * w2;
      for (size_t z = 0; z < w2; ++z) {
        double top = ty[y].w0 * (tx[z].w0 * r0[tx[z].i0] + tx[z].w1 * r0[tx[z].i1]);
        double bot = ty[y].w1 * (tx[z].w0 * r1[tx[z].i0] + tx[z].w1 * r1[tx[z].i1]);
        drow[z] = static_cast<T>(top + bot);
      }
    }
  }
  auto px = x.node();
  return detail::op_result<T>(
      "upsample2x_bilinear", {b, c, h2, w2}, std::move(v), {px},
      [px, b, c, h, w, ty, tx](Node<T>& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        size_t h2 = h * 2, w2 = w * 2;
        for (size_t bc = 0; bc < b * c; ++bc) {
          const T* g = self.grad.data() + bc * h2 * w2;
          T* d = px->grad.data() + bc * h * w;
          for (size_t y = 0; y < h2; ++y) {
            const T* grow = g + y * w2;
            for (size_t z = 0; z < w2; ++z) {
              double gv = static_cast<double>(grow[z]);
              d[ty[y].i0 * w + tx[z].i0] += static_cast<T>(gv * ty[y].w0 * tx[z].w0);
              d[ty[y].i0 * w + tx[z].i1] += static_cast<T>(gv * ty[y].w0 * tx[z].w1);
              d[ty[y].i1 * w + tx[z].i0] += static_cast<T>(gv * ty[y].w1 * tx[z].w0);
              d[ty[y].i1 * w + tx[z].i1] += static_cast<T>(gv * ty[y].w1 * tx[z].w1);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization layers
// ---------------------------------------------------------------------------

namespace detail {

// Shared normalization backward for one group of `n` strided elements.
// Handles dgamma/dbeta accumulation at the call sites.
template <typename T>
struct NormGroup {
  double mu, inv;
};

}  // namespace detail

// Layer normalization over the last axis; gamma/beta shaped [D].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5) {
  if (x.ndim() == 0) throw ShapeError("layer_norm: scalar input");
  size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine shape " + shape_str(gamma.shape()) +
                     " does not match last dim of " + shape_str(x.shape()));
  }
  size_t rows = x.numel() / d;
  std::vector<T> v(x.numel());
  auto stats = std::make_shared<std::vector<detail::NormGroup<T>>>(rows);
  for (size_t r = 0; r < rows; ++r) {
    const T* xp = x.data() + r * d;
    double mu = 0;
    for (size_t j = 0; j < d; ++j) mu += xp[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (size_t j = 0; j < d; ++j) {
      double t = xp[j] - mu;
      var += t * t;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[r] = {mu, inv};
    T* vp = v.data() + r * d;
    for (size_t j = 0; j < d; ++j) {
      vp[j] = static_cast<T>((xp[j] - mu) * inv * gamma.data()[j] + beta.data()[j]);
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return detail::op_result<T>(
      "layer_norm", x.shape(), std::move(v), {px, pg, pb}, [px, pg, pb, d, stats](Node<T>& self) {
        size_t rows = self.value.size() / d;
        if (px->requires_grad) px->ensure_grad();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        std::vector<double> dxhat(d);
        for (size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * d;
          const T* xp = px->value.data() + r * d;
          double mu = (*stats)[r].mu, inv = (*stats)[r].inv;
          double m1 = 0, m2 = 0;
          for (size_t j = 0; j < d; ++j) {
            double xh = (xp[j] - mu) * inv;
            double dh = static_cast<double>(g[j]) * pg->value[j];
            dxhat[j] = dh;
            m1 += dh;
            m2 += dh * xh;
            if (pg->requires_grad) pg->grad[j] += static_cast<T>(g[j] * xh);
            if (pb->requires_grad) pb->grad[j] += g[j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          if (px->requires_grad) {
            T* dx = px->grad.data() + r * d;
            for (size_t j = 0; j < d; ++j) {
              double xh = (xp[j] - mu) * inv;
              dx[j] += static_cast<T>(inv * (dxhat[j] - m1 - xh * m2));
            }
          }
        }
      });
}

namespace detail {

// Normalizes `groups` disjoint element sets of x, each listed as (offset
// run pattern): group g covers `runs` runs of length `run` starting at
// base(g) with stride `stride` between runs. Covers batch-norm (per
// channel across batch+space) and instance-norm (per sample-channel).
template <typename T>
Tensor<T> norm_groups(const char* opname, const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, double eps, size_t groups, size_t runs, size_t run,
                      std::function<size_t(size_t, size_t)> base,
                      std::function<size_t(size_t)> affine_of_group) {
  std::vector<T> v(x.numel());
  auto stats = std::make_shared<std::vector<NormGroup<T>>>(groups);
  double n = static_cast<double>(runs * run);
  for (size_t gidx = 0; gidx < groups; ++gidx) {
    double mu = 0;
    for (size_t rr = 0; rr < runs; ++rr) {
      const T* p = x.data() + base(gidx, rr);
      for (size_t j = 0; j < run; ++j) mu += p[j];
    }
    mu /= n;
    double var = 0;
    for (size_t rr = 0; rr < runs; ++rr) {
      const T* p = x.data() + base(gidx, rr);
      for (size_t j = 0; j < run; ++j) {
        double t = p[j] - mu;
        var += t * t;
      }
    }
    var /= n;
    double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[gidx] = {mu, inv};
    size_t a = affine_of_group(gidx);
    double gm = gamma.data()[a], bt = beta.data()[a];
    for (size_t rr = 0; rr < runs; ++rr) {
      const T* p = x.data() + base(gidx, rr);
      T* out = v.data() + base(gidx, rr);
      for (size_t j = 0; j < run; ++j) out[j] = static_cast<T>((p[j] - mu) * inv * gm + bt);
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return op_result<T>(
      opname, x.shape(), std::move(v), {px, pg, pb},
      [px, pg, pb, stats, groups, runs, run, base, affine_of_group, n](Node<T>& self) {
        if (px->requires_grad) px->ensure_grad();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (size_t gidx = 0; gidx < groups; ++gidx) {
          double mu = (*stats)[gidx].mu, inv = (*stats)[gidx].inv;
          size_t a = affine_of_group(gidx);
          double gm = pg->value[a];
          double m1 = 0, m2 = 0, dg = 0, db = 0;
          for (size_t rr = 0; rr < runs; ++rr) {
            const T* g = self.grad.data() + base(gidx, rr);
            const T* xp = px->value.data() + base(gidx, rr);
            for (size_t j = 0; j < run; ++j) {
              double xh = (xp[j] - mu) * inv;
              double dh = static_cast<double>(g[j]) * gm;
              m1 += dh;
              m2 += dh * xh;
              dg += static_cast<double>(g[j]) * xh;
              db += g[j];
            }
          }
          if (pg->requires_grad) pg->grad[a] += static_cast<T>(dg);
          if (pb->requires_grad) pb->grad[a] += static_cast<T>(db);
          m1 /= n;
          m2 /= n;
          if (px->requires_grad) {
            for (size_t rr = 0; rr < runs; ++rr) {
              const T* g = self.grad.data() + base(gidx, rr);
              const T* xp = px->value.data() + base(gidx, rr);
              T* dx = px->grad.data() + base(gidx, rr);
              for (size_t j = 0; j < run; ++j) {
                double xh = (xp[j] - mu) * inv;
                double dh = static_cast<double>(g[j]) * gm;
                dx[j] += static_cast<T>(inv * (dh - m1 - xh * m2));
              }
            }
          }
        }
      });
}

}  // namespace detail

// Training-mode batch normalization on [B,C,H,W]: per-channel statistics
// over batch and space.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       double eps = 1e-5) {
  if (x.ndim() != 4) throw ShapeError("batch_norm2d: expected [B,C,H,W], got " +
                                      shape_str(x.shape()));
  size_t b = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("batch_norm2d: affine shape " + shape_str(gamma.shape()) + " vs channels " +
                     std::to_string(c));
  }
  return detail::norm_groups<T>(
      "batch_norm2d", x, gamma, beta, eps, c, b, hw,
      [c, hw](size_t ch, size_t img) { return (img * c + ch) * hw; },
      [](size_t ch) { return ch; });
}

// Instance normalization on [B,C,H,W]: per (sample, channel) statistics.
template <typename T>
Tensor<T> instance_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          double eps = 1e-5) {
  if (x.ndim() != 4) throw ShapeError("instance_norm2d: expected [B,C,H,W], got " +
                                      shape_str(x.shape()));
  size_t b = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("instance_norm2d: affine shape " + shape_str(gamma.shape()) +
                     " vs channels " + std::to_string(c));
  }
  return detail::norm_groups<T>(
      "instance_norm2d", x, gamma, beta, eps, b * c, 1, hw,
      [hw](size_t g, size_t) { return g * hw; }, [c](size_t g) { return g % c; });
}

// ---------------------------------------------------------------------------
// Patch flattening for token models: [B,c,H,W] <-> [B,L,p*p*c]
// Token order is row-major over the patch grid; within a token the layout
// is (channel, py, px).
// ---------------------------------------------------------------------------

namespace detail {

struct PatchDims {
  size_t b, c, h, w, p, gh, gw, tok;
};

template <typename T, typename F>
void patch_walk(const PatchDims& d, F f) {  // f(img_index, token_index)
  for (size_t i = 0; i < d.b; ++i) {
    for (size_t gy = 0; gy < d.gh; ++gy) {
      for (size_t gx = 0; gx < d.gw; ++gx) {
        size_t tbase = (i * d.gh * d.gw + gy * d.gw + gx) * d.tok;
        for (size_t c = 0; c < d.c; ++c) {
          for (size_t py = 0; py < d.p; ++py) {
            size_t irow = ((i * d.c + c) * d.h + gy * d.p + py) * d.w + gx * d.p;
            size_t trow = tbase + (c * d.p + py) * d.p;
            for (size_t px = 0; px < d.p; ++px) f(irow + px, trow + px);
          }
        }
      }
    }
  }
}

template <typename T>
void img_to_tokens(const T* img, T* tokens, const PatchDims& d, bool accumulate) {
  patch_walk<T>(d, [&](size_t ii, size_t ti) {
    if (accumulate)
      tokens[ti] += img[ii];
    else
      tokens[ti] = img[ii];
  });
}

template <typename T>
void tokens_to_img(const T* tokens, T* img, const PatchDims& d, bool accumulate) {
  patch_walk<T>(d, [&](size_t ii, size_t ti) {
    if (accumulate)
      img[ii] += tokens[ti];
    else
      img[ii] = tokens[ti];
  });
}

}  // namespace detail

template <typename T>
Tensor<T> patchify(const Tensor<T>& x, size_t p) {
  if (x.ndim() != 4) throw ShapeError("patchify: expected [B,c,H,W], got " + shape_str(x.shape()));
  size_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (p == 0 || h % p || w % p) {
    throw ShapeError("patchify: patch " + std::to_string(p) + " does not tile " +
                     shape_str(x.shape()));
  }
  detail::PatchDims d{b, c, h, w, p, h / p, w / p, p * p * c};
  std::vector<T> v(x.numel());
  detail::img_to_tokens(x.data(), v.data(), d, false);
  auto px = x.node();
  return detail::op_result<T>("patchify", {b, d.gh * d.gw, d.tok}, std::move(v), {px},
                              [px, d](Node<T>& self) {
                                if (!px->requires_grad) return;
                                px->ensure_grad();
                                detail::tokens_to_img(self.grad.data(), px->grad.data(), d, true);
                              });
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& t, size_t c, size_t h, size_t w, size_t p) {
  if (t.ndim() != 3) throw ShapeError("unpatchify: expected [B,L,tok], got " +
                                      shape_str(t.shape()));
  size_t b = t.shape()[0];
  detail::PatchDims d{b, c, h, w, p, h / p, w / p, p * p * c};
  if (t.shape()[1] != d.gh * d.gw || t.shape()[2] != d.tok || h % p || w % p) {
    throw ShapeError("unpatchify: " + shape_str(t.shape()) + " does not form [" +
                     std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + "]");
  }
  std::vector<T> v(t.numel());
  detail::tokens_to_img(t.data(), v.data(), d, false);
  auto pt = t.node();
  return detail::op_result<T>("unpatchify", {b, c, h, w}, std::move(v), {pt},
                              [pt, d](Node<T>& self) {
                                if (!pt->requires_grad) return;
                                pt->ensure_grad();
                                detail::img_to_tokens(self.grad.data(), pt->grad.data(), d, true);
                              });
}

// Linear layer helper: y = x W + b for x [rows, in], W [in, out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Tensor<T> y = matmul(x, w);
  return b.defined() ? add_bias(y, b) : y;
}

}  // namespace invcoss
