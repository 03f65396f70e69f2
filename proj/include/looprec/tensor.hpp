#pragma once

// Reverse-mode autodiff on dense row-major tensors, f32 or f64.
//
// Ops record backward closures onto an ambient per-thread tape (see TapeScope).
// Design rules kept throughout:
//   - fixed primitive set, no implicit type promotion, no views (every op copies)
//   - broadcasting only between identical shapes, a trailing-shape operand, or a
//     single-element operand
//   - every primitive validates shapes and checks its output for non-finite values
//   - gradients accumulate by summation; repeated backward() on one tape is an error
//   - single-threaded; identical seeds give identical results across runs
//
// Matrix products are backed by OpenBLAS. The two attention-shaped products
// (matmul_nt, matmul_segmented) use custom kernels whose per-element accumulation
// pattern does not depend on row position, so that reordering independent row
// blocks permutes the output bitwise; see the notes at those ops.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <cblas.h>

#include "looprec/common.hpp"

extern "C" void openblas_set_num_threads(int);

namespace looprec {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

namespace detail {

inline const bool blas_serial = [] {
  openblas_set_num_threads(1);
  return true;
}();

inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha,
                 const float* a, int64_t lda, const float* b, int64_t ldb, float beta,
                 float* c, int64_t ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              (int)m, (int)n, (int)k, alpha, a, (int)lda, b, (int)ldb, beta, c, (int)ldc);
}

inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha,
                 const double* a, int64_t lda, const double* b, int64_t ldb, double beta,
                 double* c, int64_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              (int)m, (int)n, (int)k, alpha, a, (int)lda, b, (int)ldb, beta, c, (int)ldc);
}

// Total order on floats: by value, ties broken by bit pattern (handles -0 vs +0).
// Sorting partial sums into this order before folding makes the fold a pure
// function of the multiset of partials.
template <typename T>
void sort_total(T* v, int n) {
  std::sort(v, v + n, [](T a, T b) {
    if (a < b) return true;
    if (b < a) return false;
    if constexpr (sizeof(T) == 4) {
      uint32_t ua, ub;
      std::memcpy(&ua, &a, 4);
      std::memcpy(&ub, &b, 4);
      return ua < ub;
    } else {
      uint64_t ua, ub;
      std::memcpy(&ua, &a, 8);
      std::memcpy(&ub, &b, 8);
      return ua < ub;
    }
  });
}

}  // namespace detail

template <typename T>
class Tape;

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> v;
  std::vector<T> g;  // allocated on first gradient contribution
  bool requires_grad = false;
  uint64_t producer = 0;  // id of the tape that recorded the producing op, 0 for leaves

  int64_t numel() const { return (int64_t)v.size(); }
  void ensure_grad() {
    if (g.empty()) g.assign(v.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData<T>> d) : d_(std::move(d)) {}

  static Tensor constant(Shape shape, std::vector<T> vals) {
    check(shape_numel(shape) == (int64_t)vals.size(),
          cat("tensor: ", vals.size(), " values for shape ", shape_str(shape)));
    auto d = std::make_shared<TensorData<T>>();
    d->shape = std::move(shape);
    d->v = std::move(vals);
    return Tensor(std::move(d));
  }
  static Tensor full(Shape shape, T value) {
    std::vector<T> v((size_t)shape_numel(shape), value);
    return constant(std::move(shape), std::move(v));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static Tensor scalar(T value) { return constant({1}, {value}); }
  static Tensor param(Shape shape, std::vector<T> vals) {
    Tensor t = constant(std::move(shape), std::move(vals));
    t.d_->requires_grad = true;
    return t;
  }

  bool defined() const { return (bool)d_; }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return (int)d_->shape.size(); }
  int64_t numel() const { return d_->numel(); }
  int64_t dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    check(i >= 0 && i < r, cat("dim index ", i, " out of range for ", shape_str(shape())));
    return d_->shape[(size_t)i];
  }
  const std::vector<T>& values() const { return d_->v; }
  std::vector<T>& mut_values() { return d_->v; }
  const std::vector<T>& grad() const { return d_->g; }
  void clear_grad() { d_->g.clear(); }
  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool r) { d_->requires_grad = r; }
  T item() const {
    check(numel() == 1, cat("item() on tensor of shape ", shape_str(shape())));
    return d_->v[0];
  }

  std::shared_ptr<TensorData<T>> d_;
};

template <typename T>
class Tape {
 public:
  Tape() : id_(next_id().fetch_add(1, std::memory_order_relaxed)) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  uint64_t id() const { return id_; }
  size_t size() const { return records_.size(); }
  void push(std::function<void()> fn) { records_.push_back(std::move(fn)); }

  void backward(const Tensor<T>& loss) {
    check(!consumed_, "tape: backward() called twice");
    check(loss.defined() && loss.numel() == 1, "tape: backward target must be a scalar");
    check(loss.d_->producer == id_ || loss.d_->requires_grad,
          "tape: backward target was not produced under this tape");
    consumed_ = true;
    loss.d_->ensure_grad();
    loss.d_->g[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    records_.clear();
  }

  static Tape*& active() {
    thread_local Tape* t = nullptr;
    return t;
  }

 private:
  static std::atomic<uint64_t>& next_id() {
    static std::atomic<uint64_t> id{1};
    return id;
  }
  uint64_t id_;
  bool consumed_ = false;
  std::vector<std::function<void()>> records_;
};

// Makes a tape the recording target for the current thread while in scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& t) : prev_(Tape<T>::active()) { Tape<T>::active() = &t; }
  ~TapeScope() { Tape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      fail(cat(op, ": non-finite value (", (double)v[i], ") at flat index ", i));
}

template <typename T>
struct Rec {
  Tape<T>* tape = nullptr;
  bool any = false;
};

// Decides whether an op must record, and validates tape confinement: a tensor
// produced under one tape may not feed an op while a different tape (or none)
// is active.
template <typename T>
Rec<T> recording(std::initializer_list<const Tensor<T>*> inputs, const char* op) {
  Rec<T> r;
  r.tape = Tape<T>::active();
  for (const Tensor<T>* in : inputs) {
    check(in->defined(), cat(op, ": undefined input tensor"));
    uint64_t p = in->d_->producer;
    if (p != 0) {
      check(r.tape != nullptr, cat(op, ": graph tensor used outside any tape scope"));
      check(p == r.tape->id(), cat(op, ": input belongs to a different tape"));
    }
    if (in->d_->requires_grad || p != 0) r.any = true;
  }
  if (!r.tape) r.any = false;
  return r;
}

template <typename T>
bool tracked(const Tensor<T>& t) {
  return t.d_->requires_grad || t.d_->producer != 0;
}

template <typename T>
Tensor<T> make_out(Shape shape, std::vector<T> vals, const Rec<T>& rec, const char* op) {
  check_finite(vals, op);
  auto d = std::make_shared<TensorData<T>>();
  d->shape = std::move(shape);
  d->v = std::move(vals);
  if (rec.any) d->producer = rec.tape->id();
  return Tensor<T>(std::move(d));
}

inline int norm_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  check(a >= 0 && a < rank, cat(op, ": axis ", axis, " out of range for rank ", rank));
  return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops with restricted broadcasting
// ---------------------------------------------------------------------------

namespace detail {

// b may equal a's shape, be a trailing suffix of it, or be a single element.
// Returns the repeat period (numel of the smaller side) or -1 if incompatible.
inline int64_t bcast_period(const Shape& big, const Shape& small) {
  if (shape_numel(small) == 1) return 1;
  if (small.size() > big.size()) return -1;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (big[off + i] != small[i]) return -1;
  return shape_numel(small);
}

// fv(a, b) -> out;  fga(g, a, b, out) -> da contribution;  fgb likewise.
template <typename T, typename FV, typename FGA, typename FGB>
Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b, FV fv, FGA fga,
                    FGB fgb) {
  auto rec = recording<T>({&a, &b}, op);
  const Tensor<T>* big = &a;
  bool b_small = true;
  int64_t period = bcast_period(a.shape(), b.shape());
  if (period < 0) {
    period = bcast_period(b.shape(), a.shape());
    check(period >= 0, cat(op, ": shapes ", shape_str(a.shape()), " and ",
                           shape_str(b.shape()), " do not broadcast"));
    big = &b;
    b_small = false;
  }
  int64_t n = big->numel();
  std::vector<T> out((size_t)n);
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  if (b_small) {
    for (int64_t i = 0; i < n; ++i) out[(size_t)i] = fv(pa[i], pb[i % period]);
  } else {
    for (int64_t i = 0; i < n; ++i) out[(size_t)i] = fv(pa[i % period], pb[i]);
  }
  Tensor<T> res = make_out(big->shape(), std::move(out), rec, op);
  if (rec.any) {
    bool ga = tracked(a), gb = tracked(b);
    auto ad = a.d_, bd = b.d_, od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      const T* g = od->g.data();
      const T* pa2 = ad->v.data();
      const T* pb2 = bd->v.data();
      const T* po = od->v.data();
      int64_t nn = od->numel();
      if (ga) {
        ad->ensure_grad();
        T* da = ad->g.data();
        if (b_small)
          for (int64_t i = 0; i < nn; ++i) da[i] += fga(g[i], pa2[i], pb2[i % period], po[i]);
        else
          for (int64_t i = 0; i < nn; ++i)
            da[i % period] += fga(g[i], pa2[i % period], pb2[i], po[i]);
      }
      if (gb) {
        bd->ensure_grad();
        T* db = bd->g.data();
        if (b_small)
          for (int64_t i = 0; i < nn; ++i)
            db[i % period] += fgb(g[i], pa2[i], pb2[i % period], po[i]);
        else
          for (int64_t i = 0; i < nn; ++i) db[i] += fgb(g[i], pa2[i % period], pb2[i], po[i]);
      }
    });
  }
  return res;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T, T) { return g; },
      [](T g, T, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T, T) { return g; },
      [](T g, T, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y, T) { return g * y; },
      [](T g, T x, T, T) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (T y : b.values()) check(y != T(0), "div: zero divisor");
  return detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T g, T, T y, T) { return g / y; },
      [](T g, T, T y, T o) { return -g * o / y; });
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename FV, typename FG>
Tensor<T> unary_op(const char* op, const Tensor<T>& x, FV fv, FG fg) {
  auto rec = recording<T>({&x}, op);
  int64_t n = x.numel();
  std::vector<T> out((size_t)n);
  const T* px = x.values().data();
  for (int64_t i = 0; i < n; ++i) out[(size_t)i] = fv(px[i]);
  Tensor<T> res = make_out(x.shape(), std::move(out), rec, op);
  if (rec.any) {
    auto xd = x.d_, od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      xd->ensure_grad();
      const T* g = od->g.data();
      const T* px2 = xd->v.data();
      const T* po = od->v.data();
      T* dx = xd->g.data();
      int64_t nn = od->numel();
      for (int64_t i = 0; i < nn; ++i) dx[i] += fg(g[i], px2[i], po[i]);
    });
  }
  return res;
}

}  // namespace detail

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "neg", x, [](T v) { return -v; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T g, T, T o) { return g * o; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.values()) check(v > T(0), cat("log: non-positive input ", (double)v));
  return detail::unary_op<T>(
      "log", x, [](T v) { return std::log(v); }, [](T g, T v, T) { return g / v; });
}

// Backward at exactly 0 returns 0 (one-sided subgradient) so that norms built
// as sqrt(sum of squares) are differentiable-in-practice at zero residual.
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  for (T v : x.values()) check(v >= T(0), cat("sqrt: negative input ", (double)v));
  return detail::unary_op<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); },
      [](T g, T, T o) { return o == T(0) ? T(0) : g / (T(2) * o); });
}

template <typename T>
Tensor<T> sin(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "sin", x, [](T v) { return std::sin(v); }, [](T g, T v, T) { return g * std::cos(v); });
}

template <typename T>
Tensor<T> cos(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "cos", x, [](T v) { return std::cos(v); }, [](T g, T v, T) { return -g * std::sin(v); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.7071067811865475244);
  constexpr T kInvSqrt2Pi = T(0.3989422804014326779);
  return detail::unary_op<T>(
      "gelu", x,
      [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T g, T v, T) {
        T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
        T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
        return g * (cdf + v * pdf);
      });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "softplus", x,
      [](T v) { return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T g, T v, T) {
        T s = v > T(0) ? T(1) / (T(1) + std::exp(-v)) : T(1) - T(1) / (T(1) + std::exp(v));
        return g * s;
      });
}

// x^p with scalar exponent. Negative bases require an integral exponent;
// x == 0 requires p >= 1 for a finite gradient (the subgradient 0 is used
// when p > 1, and p == 1 gives 1).
template <typename T>
Tensor<T> power(const Tensor<T>& x, double p) {
  for (T v : x.values()) {
    if (v < T(0)) check(p == std::nearbyint(p), "power: negative base with fractional exponent");
    if (v == T(0)) check(p >= 1.0 || p == 0.0, "power: zero base with exponent < 1");
  }
  return detail::unary_op<T>(
      "power", x, [p](T v) { return (T)std::pow((double)v, p); },
      [p](T g, T v, T) {
        if (p == 0.0) return T(0);
        if (v == T(0)) return p == 1.0 ? g : T(0);
        return g * (T)(p * std::pow((double)v, p - 1.0));
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary_op<T>(
      "add_scalar", x, [c](T v) { return v + c; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  return detail::unary_op<T>(
      "mul_scalar", x, [c](T v) { return v * c; }, [c](T g, T, T) { return g * c; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return mul(x, x);
}

// |x| as sqrt(x^2): exact values, and gradient 0 at x == 0 via the sqrt convention.
template <typename T>
Tensor<T> absval(const Tensor<T>& x) {
  return sqrt(square(x));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void axis_spans(const Tensor<T>& x, int axis, int64_t& outer, int64_t& len, int64_t& inner) {
  outer = 1;
  inner = 1;
  len = x.shape()[(size_t)axis];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[(size_t)i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[(size_t)i];
}

inline Shape reduced_shape(const Shape& s, int axis, bool keepdim) {
  Shape r = s;
  if (keepdim) {
    r[(size_t)axis] = 1;
  } else {
    r.erase(r.begin() + axis);
    if (r.empty()) r = {1};
  }
  return r;
}

}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false) {
  axis = detail::norm_axis(axis, x.rank(), "sum");
  auto rec = detail::recording<T>({&x}, "sum");
  int64_t outer, len, inner;
  detail::axis_spans(x, axis, outer, len, inner);
  std::vector<T> out((size_t)(outer * inner), T(0));
  const T* px = x.values().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t l = 0; l < len; ++l)
      for (int64_t i = 0; i < inner; ++i)
        out[(size_t)(o * inner + i)] += px[(o * len + l) * inner + i];
  Tensor<T> res =
      detail::make_out(detail::reduced_shape(x.shape(), axis, keepdim), std::move(out), rec, "sum");
  if (rec.any) {
    auto xd = x.d_, od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      xd->ensure_grad();
      const T* g = od->g.data();
      T* dx = xd->g.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t l = 0; l < len; ++l)
          for (int64_t i = 0; i < inner; ++i)
            dx[(o * len + l) * inner + i] += g[o * inner + i];
    });
  }
  return res;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false) {
  int a = detail::norm_axis(axis, x.rank(), "mean");
  return mul_scalar(sum(x, a, keepdim), T(1) / (T)x.shape()[(size_t)a]);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto rec = detail::recording<T>({&x}, "sum_all");
  double s = 0;
  for (T v : x.values()) s += (double)v;
  Tensor<T> res = detail::make_out({1}, {(T)s}, rec, "sum_all");
  if (rec.any) {
    auto xd = x.d_, od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      xd->ensure_grad();
      T g = od->g[0];
      for (auto& dv : xd->g) dv += g;
    });
  }
  return res;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return mul_scalar(sum_all(x), T(1) / (T)x.numel());
}

template <typename T>
Tensor<T> max_axis(const Tensor<T>& x, int axis, bool keepdim = false) {
  axis = detail::norm_axis(axis, x.rank(), "max_axis");
  auto rec = detail::recording<T>({&x}, "max_axis");
  int64_t outer, len, inner;
  detail::axis_spans(x, axis, outer, len, inner);
  check(len > 0, "max_axis: empty axis");
  std::vector<T> out((size_t)(outer * inner));
  auto argmax = std::make_shared<std::vector<int64_t>>((size_t)(outer * inner));
  const T* px = x.values().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      T best = px[(o * len) * inner + i];
      int64_t bl = 0;
      for (int64_t l = 1; l < len; ++l) {
        T v = px[(o * len + l) * inner + i];
        if (v > best) {
          best = v;
          bl = l;
        }
      }
      out[(size_t)(o * inner + i)] = best;
      (*argmax)[(size_t)(o * inner + i)] = bl;
    }
  Tensor<T> res = detail::make_out(detail::reduced_shape(x.shape(), axis, keepdim),
                                   std::move(out), rec, "max_axis");
  if (rec.any) {
    auto xd = x.d_, od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      xd->ensure_grad();
      const T* g = od->g.data();
      T* dx = xd->g.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          int64_t l = (*argmax)[(size_t)(o * inner + i)];
          dx[(o * len + l) * inner + i] += g[o * inner + i];
        }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  check(shape_numel(shape) == x.numel(),
        cat("reshape: ", shape_str(x.shape()), " to ", shape_str(shape)));
  auto rec = detail::recording<T>({&x}, "reshape");
  Tensor<T> res = detail::make_out(std::move(shape), x.values(), rec, "reshape");
  if (rec.any) {
    auto xd = x.d_, od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      xd->ensure_grad();
      for (size_t i = 0; i < od->g.size(); ++i) xd->g[i] += od->g[i];
    });
  }
  return res;
}

namespace detail {

template <typename T>
void permute_copy(const Shape& in_shape, const std::vector<int>& perm, const T* src, T* dst,
                  bool invert) {
  int r = (int)in_shape.size();
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[(size_t)i] = in_shape[(size_t)perm[(size_t)i]];
  std::vector<int64_t> in_stride(r, 1), out_stride(r, 1);
  for (int i = r - 2; i >= 0; --i) {
    in_stride[(size_t)i] = in_stride[(size_t)i + 1] * in_shape[(size_t)i + 1];
    out_stride[(size_t)i] = out_stride[(size_t)i + 1] * out_shape[(size_t)i + 1];
  }
  int64_t n = shape_numel(in_shape);
  std::vector<int64_t> idx(r, 0);
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t src_off = 0, dst_off = 0;
    for (int i = 0; i < r; ++i) {
      dst_off += idx[(size_t)i] * out_stride[(size_t)i];
      src_off += idx[(size_t)i] * in_stride[(size_t)perm[(size_t)i]];
    }
    if (invert)
      dst[src_off] += src[dst_off];
    else
      dst[dst_off] = src[src_off];
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[(size_t)i] < out_shape[(size_t)i]) break;
      idx[(size_t)i] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::vector<int> perm) {
  int r = x.rank();
  check((int)perm.size() == r, "transpose: perm rank mismatch");
  std::vector<int> seen(r, 0);
  for (int p : perm) {
    check(p >= 0 && p < r && !seen[(size_t)p], "transpose: invalid permutation");
    seen[(size_t)p] = 1;
  }
  auto rec = detail::recording<T>({&x}, "transpose");
  Shape out_shape((size_t)r);
  for (int i = 0; i < r; ++i) out_shape[(size_t)i] = x.shape()[(size_t)perm[(size_t)i]];
  std::vector<T> out((size_t)x.numel());
  detail::permute_copy(x.shape(), perm, x.values().data(), out.data(), false);
  Tensor<T> res = detail::make_out(std::move(out_shape), std::move(out), rec, "transpose");
  if (rec.any) {
    auto xd = x.d_, od = res.d_;
    Shape in_shape = x.shape();
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      xd->ensure_grad();
      detail::permute_copy(in_shape, perm, od->g.data(), xd->g.data(), true);
    });
  }
  return res;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  check(!xs.empty(), "concat: no inputs");
  int r = xs[0].rank();
  axis = detail::norm_axis(axis, r, "concat");
  Shape out_shape = xs[0].shape();
  int64_t total = 0;
  for (const auto& x : xs) {
    check(x.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis)
        check(x.shape()[(size_t)i] == out_shape[(size_t)i],
              cat("concat: shape mismatch on non-concat axis ", i));
    total += x.shape()[(size_t)axis];
  }
  out_shape[(size_t)axis] = total;

  std::vector<const Tensor<T>*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x);
  detail::Rec<T> rec;
  rec.tape = Tape<T>::active();
  for (const auto& x : xs) {
    auto one = detail::recording<T>({&x}, "concat");
    rec.any = rec.any || one.any;
  }

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[(size_t)i];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[(size_t)i];
  std::vector<T> out((size_t)(outer * total * inner));
  int64_t off = 0;
  for (const auto& x : xs) {
    int64_t len = x.shape()[(size_t)axis];
    const T* px = x.values().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * total + off) * inner, px + o * len * inner,
                  (size_t)(len * inner) * sizeof(T));
    off += len;
  }
  Tensor<T> res = detail::make_out(std::move(out_shape), std::move(out), rec, "concat");
  if (rec.any) {
    std::vector<std::shared_ptr<TensorData<T>>> ins;
    std::vector<char> want;
    for (const auto& x : xs) {
      ins.push_back(x.d_);
      want.push_back(detail::tracked(x) ? 1 : 0);
    }
    auto od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      const T* g = od->g.data();
      int64_t off2 = 0;
      for (size_t j = 0; j < ins.size(); ++j) {
        int64_t len = ins[j]->shape[(size_t)axis];
        if (want[j]) {
          ins[j]->ensure_grad();
          T* dx = ins[j]->g.data();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < len * inner; ++i)
              dx[o * len * inner + i] += g[(o * total + off2) * inner + i];
        }
        off2 += len;
      }
    });
  }
  return res;
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<int64_t>& sizes, int axis) {
  axis = detail::norm_axis(axis, x.rank(), "split");
  int64_t total = 0;
  for (int64_t s : sizes) {
    check(s > 0, "split: non-positive piece size");
    total += s;
  }
  check(total == x.shape()[(size_t)axis],
        cat("split: sizes sum ", total, " != axis extent ", x.shape()[(size_t)axis]));
  auto rec = detail::recording<T>({&x}, "split");
  int64_t outer, len, inner;
  detail::axis_spans(x, axis, outer, len, inner);
  const T* px = x.values().data();
  std::vector<Tensor<T>> pieces;
  int64_t off = 0;
  for (int64_t s : sizes) {
    Shape ps = x.shape();
    ps[(size_t)axis] = s;
    std::vector<T> pv((size_t)(outer * s * inner));
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(pv.data() + o * s * inner, px + (o * len + off) * inner,
                  (size_t)(s * inner) * sizeof(T));
    Tensor<T> piece = detail::make_out(std::move(ps), std::move(pv), rec, "split");
    if (rec.any) {
      auto xd = x.d_, od = piece.d_;
      int64_t off_c = off, s_c = s;
      rec.tape->push([=]() {
        if (od->g.empty()) return;
        xd->ensure_grad();
        const T* g = od->g.data();
        T* dx = xd->g.data();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < s_c * inner; ++i)
            dx[(o * len + off_c) * inner + i] += g[o * s_c * inner + i];
      });
    }
    pieces.push_back(std::move(piece));
    off += s;
  }
  return pieces;
}

// Indexed selection along an axis; duplicate indices are allowed and their
// gradient contributions accumulate.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, int axis, const std::vector<int64_t>& indices) {
  axis = detail::norm_axis(axis, x.rank(), "gather");
  auto rec = detail::recording<T>({&x}, "gather");
  int64_t outer, len, inner;
  detail::axis_spans(x, axis, outer, len, inner);
  for (int64_t ix : indices)
    check(ix >= 0 && ix < len, cat("gather: index ", ix, " out of range [0,", len, ")"));
  int64_t m = (int64_t)indices.size();
  Shape out_shape = x.shape();
  out_shape[(size_t)axis] = m;
  std::vector<T> out((size_t)(outer * m * inner));
  const T* px = x.values().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < m; ++j)
      std::memcpy(out.data() + (o * m + j) * inner, px + (o * len + indices[(size_t)j]) * inner,
                  (size_t)inner * sizeof(T));
  Tensor<T> res = detail::make_out(std::move(out_shape), std::move(out), rec, "gather");
  if (rec.any) {
    auto xd = x.d_, od = res.d_;
    auto idx = std::make_shared<std::vector<int64_t>>(indices);
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      xd->ensure_grad();
      const T* g = od->g.data();
      T* dx = xd->g.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < m; ++j) {
          const T* gs = g + (o * m + j) * inner;
          T* dd = dx + (o * len + (*idx)[(size_t)j]) * inner;
          for (int64_t i = 0; i < inner; ++i) dd[i] += gs[i];
        }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void matmul_dims(const Tensor<T>& a, const Tensor<T>& b, const char* op, int64_t& m, int64_t& k,
                 int64_t& n, int64_t& batch_a, int64_t& batch_b) {
  check(a.rank() >= 2 && b.rank() >= 2, cat(op, ": inputs must have rank >= 2"));
  m = a.dim(-2);
  k = a.dim(-1);
  n = b.dim(-1);
  check(b.dim(-2) == k, cat(op, ": inner dims ", k, " vs ", b.dim(-2), " for ",
                            shape_str(a.shape()), " x ", shape_str(b.shape())));
  batch_a = a.numel() / (m * k);
  batch_b = b.numel() / (k * n);
  if (a.rank() > 2 && b.rank() > 2) {
    check(std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(),
                     b.shape().end() - 2),
          cat(op, ": batch dims differ: ", shape_str(a.shape()), " x ", shape_str(b.shape())));
  }
}

inline Shape matmul_out_shape(const Shape& a, const Shape& b, int64_t m, int64_t n) {
  const Shape& lead = a.size() > 2 ? a : b;
  Shape out(lead.begin(), lead.end() - 2);
  out.push_back(m);
  out.push_back(n);
  return out;
}

}  // namespace detail

// a [.., m, k] x b [.., k, n]. Batch dims must match exactly, or either side
// may be rank-2 and is then shared across the other side's batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  int64_t m, k, n, ba, bb;
  detail::matmul_dims(a, b, "matmul", m, k, n, ba, bb);
  auto rec = detail::recording<T>({&a, &b}, "matmul");
  int64_t batch = std::max(ba, bb);
  std::vector<T> out((size_t)(batch * m * n));
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  for (int64_t i = 0; i < batch; ++i)
    detail::gemm(false, false, m, n, k, T(1), pa + (ba == 1 ? 0 : i * m * k), k,
                 pb + (bb == 1 ? 0 : i * k * n), n, T(0), out.data() + i * m * n, n);
  Tensor<T> res = detail::make_out(detail::matmul_out_shape(a.shape(), b.shape(), m, n),
                                   std::move(out), rec, "matmul");
  if (rec.any) {
    bool ga = detail::tracked(a), gb = detail::tracked(b);
    auto ad = a.d_, bd = b.d_, od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      const T* g = od->g.data();
      const T* pa2 = ad->v.data();
      const T* pb2 = bd->v.data();
      if (ga) {
        ad->ensure_grad();
        for (int64_t i = 0; i < batch; ++i)
          detail::gemm(false, true, m, k, n, T(1), g + i * m * n, n,
                       pb2 + (bb == 1 ? 0 : i * k * n), n, T(1),
                       ad->g.data() + (ba == 1 ? 0 : i * m * k), k);
      }
      if (gb) {
        bd->ensure_grad();
        for (int64_t i = 0; i < batch; ++i)
          detail::gemm(true, false, k, n, m, T(1), pa2 + (ba == 1 ? 0 : i * m * k), k,
                       g + i * m * n, n, T(1), bd->g.data() + (bb == 1 ? 0 : i * k * n), n);
      }
    });
  }
  return res;
}

// a [.., m, d] x b [.., n, d]^T -> [.., m, n], i.e. rows of a dotted with rows
// of b. Forward uses a fixed-pattern kernel (accumulation order over d depends
// only on d, never on row position), so permuting rows of a or b permutes the
// output bitwise. Used for attention logits.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.rank() >= 2 && b.rank() >= 2, "matmul_nt: inputs must have rank >= 2");
  int64_t m = a.dim(-2), d = a.dim(-1), n = b.dim(-2);
  check(b.dim(-1) == d, cat("matmul_nt: inner dims ", d, " vs ", b.dim(-1)));
  int64_t ba = a.numel() / (m * d), bb = b.numel() / (n * d);
  check(ba == bb || a.rank() == 2 || b.rank() == 2, "matmul_nt: batch dims differ");
  if (a.rank() > 2 && b.rank() > 2)
    check(std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(),
                     b.shape().end() - 2),
          "matmul_nt: batch dims differ");
  auto rec = detail::recording<T>({&a, &b}, "matmul_nt");
  int64_t batch = std::max(ba, bb);
  std::vector<T> out((size_t)(batch * m * n), T(0));
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  std::vector<T> bt((size_t)(d * n));
  for (int64_t bi = 0; bi < batch; ++bi) {
    const T* as = pa + (ba == 1 ? 0 : bi * m * d);
    const T* bs = pb + (bb == 1 ? 0 : bi * n * d);
    for (int64_t j = 0; j < n; ++j)
      for (int64_t t = 0; t < d; ++t) bt[(size_t)(t * n + j)] = bs[j * d + t];
    T* os = out.data() + bi * m * n;
    for (int64_t i = 0; i < m; ++i) {
      T* row = os + i * n;
      for (int64_t t = 0; t < d; ++t) {
        T s = as[i * d + t];
        const T* br = bt.data() + t * n;
        for (int64_t j = 0; j < n; ++j) row[j] += s * br[j];
      }
    }
  }
  Shape lead = a.rank() > 2 ? Shape(a.shape().begin(), a.shape().end() - 2)
                            : Shape(b.shape().begin(), b.shape().end() - 2);
  lead.push_back(m);
  lead.push_back(n);
  Tensor<T> res = detail::make_out(std::move(lead), std::move(out), rec, "matmul_nt");
  if (rec.any) {
    bool ga = detail::tracked(a), gb = detail::tracked(b);
    auto ad = a.d_, bd = b.d_, od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      const T* g = od->g.data();
      const T* pa2 = ad->v.data();
      const T* pb2 = bd->v.data();
      if (ga) {
        ad->ensure_grad();
        for (int64_t i = 0; i < batch; ++i)
          detail::gemm(false, false, m, d, n, T(1), g + i * m * n, n,
                       pb2 + (bb == 1 ? 0 : i * n * d), d, T(1),
                       ad->g.data() + (ba == 1 ? 0 : i * m * d), d);
      }
      if (gb) {
        bd->ensure_grad();
        for (int64_t i = 0; i < batch; ++i)
          detail::gemm(true, false, n, d, m, T(1), g + i * m * n, n,
                       pa2 + (ba == 1 ? 0 : i * m * d), d, T(1),
                       bd->g.data() + (bb == 1 ? 0 : i * n * d), d);
      }
    });
  }
  return res;
}

// a [.., m, k] x b [.., k, n] where `segments` partitions k into contiguous
// blocks. Each output element is formed by summing per-segment partial sums in
// value-sorted order, so permuting whole segments (jointly in a's columns and
// b's rows) leaves the output bitwise unchanged. Used for attention value
// mixing, where k indexes tokens grouped by view.
template <typename T>
Tensor<T> matmul_segmented(const Tensor<T>& a, const Tensor<T>& b,
                           const std::vector<int64_t>& segments) {
  int64_t m, k, n, ba, bb;
  detail::matmul_dims(a, b, "matmul_segmented", m, k, n, ba, bb);
  check(ba == bb, "matmul_segmented: batch dims must match");
  int64_t seg_total = 0;
  for (int64_t s : segments) {
    check(s > 0, "matmul_segmented: non-positive segment");
    seg_total += s;
  }
  check(seg_total == k, cat("matmul_segmented: segments sum ", seg_total, " != k ", k));
  auto rec = detail::recording<T>({&a, &b}, "matmul_segmented");
  int64_t batch = ba;
  int64_t nseg = (int64_t)segments.size();
  std::vector<T> out((size_t)(batch * m * n));
  std::vector<T> parts((size_t)(nseg * n));
  std::vector<T> fold((size_t)nseg);
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  for (int64_t bi = 0; bi < batch; ++bi) {
    const T* as = pa + bi * m * k;
    const T* bs = pb + bi * k * n;
    T* os = out.data() + bi * m * n;
    for (int64_t i = 0; i < m; ++i) {
      std::fill(parts.begin(), parts.end(), T(0));
      int64_t off = 0;
      for (int64_t s = 0; s < nseg; ++s) {
        T* prow = parts.data() + s * n;
        for (int64_t j = off; j < off + segments[(size_t)s]; ++j) {
          T av = as[i * k + j];
          const T* br = bs + j * n;
          for (int64_t c = 0; c < n; ++c) prow[c] += av * br[c];
        }
        off += segments[(size_t)s];
      }
      for (int64_t c = 0; c < n; ++c) {
        for (int64_t s = 0; s < nseg; ++s) fold[(size_t)s] = parts[(size_t)(s * n + c)];
        detail::sort_total(fold.data(), (int)nseg);
        T acc = T(0);
        for (int64_t s = 0; s < nseg; ++s) acc += fold[(size_t)s];
        os[i * n + c] = acc;
      }
    }
  }
  Tensor<T> res = detail::make_out(detail::matmul_out_shape(a.shape(), b.shape(), m, n),
                                   std::move(out), rec, "matmul_segmented");
  if (rec.any) {
    bool ga = detail::tracked(a), gb = detail::tracked(b);
    auto ad = a.d_, bd = b.d_, od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      const T* g = od->g.data();
      const T* pa2 = ad->v.data();
      const T* pb2 = bd->v.data();
      if (ga) {
        ad->ensure_grad();
        for (int64_t i = 0; i < batch; ++i)
          detail::gemm(false, true, m, k, n, T(1), g + i * m * n, n, pb2 + i * k * n, n, T(1),
                       ad->g.data() + i * m * k, k);
      }
      if (gb) {
        bd->ensure_grad();
        for (int64_t i = 0; i < batch; ++i)
          detail::gemm(true, false, k, n, m, T(1), pa2 + i * m * k, k, g + i * m * n, n, T(1),
                       bd->g.data() + i * k * n, n);
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// softmax / layer_norm
// ---------------------------------------------------------------------------

namespace detail {

// Shared forward for plain and segmented softmax over the last axis. With
// segments, the denominator is a value-sorted fold of per-segment partials
// (segment-permutation invariant); without, a single in-order sum.
template <typename T>
Tensor<T> softmax_impl(const Tensor<T>& x, const std::vector<int64_t>* segments,
                       const char* op) {
  check(x.rank() >= 1, cat(op, ": rank >= 1 required"));
  int64_t len = x.dim(-1);
  int64_t rows = x.numel() / len;
  if (segments) {
    int64_t t = 0;
    for (int64_t s : *segments) {
      check(s > 0, cat(op, ": non-positive segment"));
      t += s;
    }
    check(t == len, cat(op, ": segments sum ", t, " != last axis ", len));
  }
  auto rec = recording<T>({&x}, op);
  std::vector<T> out((size_t)x.numel());
  const T* px = x.values().data();
  int64_t nseg = segments ? (int64_t)segments->size() : 0;
  std::vector<T> fold((size_t)std::max<int64_t>(nseg, 1));
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * len;
    T* yr = out.data() + r * len;
    T mx = xr[0];
    for (int64_t j = 1; j < len; ++j) mx = std::max(mx, xr[j]);
    for (int64_t j = 0; j < len; ++j) yr[j] = std::exp(xr[j] - mx);
    T denom;
    if (segments) {
      int64_t off = 0;
      for (int64_t s = 0; s < nseg; ++s) {
        T part = T(0);
        for (int64_t j = off; j < off + (*segments)[(size_t)s]; ++j) part += yr[j];
        fold[(size_t)s] = part;
        off += (*segments)[(size_t)s];
      }
      sort_total(fold.data(), (int)nseg);
      denom = T(0);
      for (int64_t s = 0; s < nseg; ++s) denom += fold[(size_t)s];
    } else {
      denom = T(0);
      for (int64_t j = 0; j < len; ++j) denom += yr[j];
    }
    for (int64_t j = 0; j < len; ++j) yr[j] /= denom;
  }
  Tensor<T> res = make_out(x.shape(), std::move(out), rec, op);
  if (rec.any) {
    auto xd = x.d_, od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      xd->ensure_grad();
      const T* g = od->g.data();
      const T* y = od->v.data();
      T* dx = xd->g.data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = g + r * len;
        const T* yr = y + r * len;
        T dot = T(0);
        for (int64_t j = 0; j < len; ++j) dot += gr[j] * yr[j];
        for (int64_t j = 0; j < len; ++j) dx[r * len + j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return res;
}

}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  return detail::softmax_impl(x, nullptr, "softmax");
}

template <typename T>
Tensor<T> softmax_segmented(const Tensor<T>& x, const std::vector<int64_t>& segments) {
  return detail::softmax_impl(x, &segments, "softmax_segmented");
}

// Normalization over the last axis with affine gain/bias of shape [last].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-6)) {
  check(x.rank() >= 1, "layer_norm: rank >= 1 required");
  int64_t len = x.dim(-1);
  check(gain.rank() == 1 && gain.dim(0) == len, "layer_norm: gain shape mismatch");
  check(bias.rank() == 1 && bias.dim(0) == len, "layer_norm: bias shape mismatch");
  int64_t rows = x.numel() / len;
  auto rec = detail::recording<T>({&x, &gain, &bias}, "layer_norm");
  std::vector<T> out((size_t)x.numel());
  auto rstd = std::make_shared<std::vector<T>>((size_t)rows);
  auto xhat = std::make_shared<std::vector<T>>((size_t)x.numel());
  const T* px = x.values().data();
  const T* pg = gain.values().data();
  const T* pb = bias.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * len;
    T mu = T(0);
    for (int64_t j = 0; j < len; ++j) mu += xr[j];
    mu /= (T)len;
    T var = T(0);
    for (int64_t j = 0; j < len; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= (T)len;
    T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[(size_t)r] = rs;
    for (int64_t j = 0; j < len; ++j) {
      T xh = (xr[j] - mu) * rs;
      (*xhat)[(size_t)(r * len + j)] = xh;
      out[(size_t)(r * len + j)] = xh * pg[j] + pb[j];
    }
  }
  Tensor<T> res = detail::make_out(x.shape(), std::move(out), rec, "layer_norm");
  if (rec.any) {
    bool gx = detail::tracked(x), gg = detail::tracked(gain), gb = detail::tracked(bias);
    auto xd = x.d_, gd = gain.d_, bd = bias.d_, od = res.d_;
    rec.tape->push([=]() {
      if (od->g.empty()) return;
      const T* g = od->g.data();
      const T* pg2 = gd->v.data();
      if (gg) gd->ensure_grad();
      if (gb) bd->ensure_grad();
      if (gx) xd->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = g + r * len;
        const T* xh = xhat->data() + r * len;
        if (gg || gb) {
          for (int64_t j = 0; j < len; ++j) {
            if (gg) gd->g[(size_t)j] += gr[j] * xh[j];
            if (gb) bd->g[(size_t)j] += gr[j];
          }
        }
        if (gx) {
          T rs = (*rstd)[(size_t)r];
          T mean_gh = T(0), mean_ghx = T(0);
          for (int64_t j = 0; j < len; ++j) {
            T gh = gr[j] * pg2[j];
            mean_gh += gh;
            mean_ghx += gh * xh[j];
          }
          mean_gh /= (T)len;
          mean_ghx /= (T)len;
          for (int64_t j = 0; j < len; ++j) {
            T gh = gr[j] * pg2[j];
            xd->g[(size_t)(r * len + j)] += rs * (gh - mean_gh - xh[j] * mean_ghx);
          }
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

// Draws in double regardless of T so float and double builds consume the
// engine identically.
template <typename T>
Tensor<T> randn(Shape shape, std::mt19937_64& rng, double stdev = 1.0) {
  std::normal_distribution<double> dist(0.0, stdev);
  std::vector<T> v((size_t)shape_numel(shape));
  for (auto& x : v) x = (T)dist(rng);
  return Tensor<T>::constant(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v((size_t)shape_numel(shape));
  for (auto& x : v) x = (T)dist(rng);
  return Tensor<T>::constant(std::move(shape), std::move(v));
}

}  // namespace looprec
