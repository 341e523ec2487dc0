#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "blockrank/error.hpp"
#include "blockrank/util.hpp"

namespace blockrank {

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

// Process-wide high-water meter over tensor payload bytes. The bench reads
// its peak; everything else can ignore it.
struct MemMeter {
  static std::atomic<int64_t>& live() {
    static std::atomic<int64_t> v{0};
    return v;
  }
  static std::atomic<int64_t>& peak() {
    static std::atomic<int64_t> v{0};
    return v;
  }
  static void add(int64_t bytes) {
    int64_t now = live().fetch_add(bytes) + bytes;
    int64_t prev = peak().load();
    while (now > prev && !peak().compare_exchange_weak(prev, now)) {
    }
  }
  static void sub(int64_t bytes) { live().fetch_sub(bytes); }
  static void reset_peak() { peak().store(live().load()); }
};

template <class T>
struct CountingAlloc {
  using value_type = T;
  CountingAlloc() = default;
  template <class U>
  CountingAlloc(const CountingAlloc<U>&) {}
  T* allocate(size_t n) {
    MemMeter::add(static_cast<int64_t>(n * sizeof(T)));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, size_t n) {
    MemMeter::sub(static_cast<int64_t>(n * sizeof(T)));
    ::operator delete(p);
  }
  bool operator==(const CountingAlloc&) const { return true; }
};

// Dense row-major array. Immutable by convention once published: ops return
// fresh tensors instead of mutating inputs.
template <class T>
struct Tensor {
  static_assert(std::is_floating_point_v<T>);
  std::vector<int64_t> shape;
  std::vector<T, CountingAlloc<T>> data;

  Tensor() = default;

  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(check_shape(shape)), T(0));
  }

  Tensor(std::vector<int64_t> s, std::vector<T> values) : shape(std::move(s)) {
    int64_t n = check_shape(shape);
    if (static_cast<int64_t>(values.size()) != n) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape product " + std::to_string(n));
    }
    data.assign(values.begin(), values.end());
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int64_t> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static constexpr Dtype dtype() { return sizeof(T) == 4 ? Dtype::f32 : Dtype::f64; }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }

  int64_t rows() const {
    require_2d();
    return shape[0];
  }
  int64_t cols() const {
    require_2d();
    return shape[1];
  }

  T& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  T at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  T operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
  }

 private:
  void require_2d() const {
    if (shape.size() != 2) throw DimensionError("expected 2-D tensor, got " + shape_str());
  }
  static int64_t check_shape(const std::vector<int64_t>& s) {
    if (s.empty()) throw DimensionError("tensor shape must have at least one dimension");
    int64_t n = 1;
    for (int64_t d : s) {
      if (d <= 0) throw DimensionError("tensor dimensions must be positive");
      n *= d;
    }
    return n;
  }
};

template <class T>
inline bool all_finite(const Tensor<T>& t) {
  for (T v : t.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Published operations surface NaN/Inf immediately instead of propagating.
template <class T>
inline const Tensor<T>& ensure_finite(const Tensor<T>& t, const char* op) {
  if (!all_finite(t)) throw NumericError(std::string(op) + " produced a non-finite value");
  return t;
}

// C[m x n] = A[m x k] * B[k x n]. ikj order, fixed accumulation sequence.
template <class T>
inline void matmul_into(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  int64_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul inner dimensions disagree: " + a.shape_str() + " vs " +
                         b.shape_str());
  }
  c = Tensor<T>({m, n});
  const T* pa = a.data.data();
  const T* pb = b.data.data();
  T* pc = c.data.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t t = 0; t < k; ++t) {
      T av = pa[i * k + t];
      if (av == T(0)) continue;
      const T* brow = pb + t * n;
      T* crow = pc + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
inline Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> c;
  matmul_into(a, b, c);
  ensure_finite(c, "matmul");
  return c;
}

// C[m x n] = A[m x k] * B[n x k]^T
template <class T>
inline Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  int64_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt inner dimensions disagree: " + a.shape_str() + " vs " +
                         b.shape_str());
  }
  Tensor<T> c({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      const T* ra = a.data.data() + i * k;
      const T* rb = b.data.data() + j * k;
      for (int64_t t = 0; t < k; ++t) acc += ra[t] * rb[t];
      c.at(i, j) = acc;
    }
  }
  return c;
}

// C[k x n] = A[m x k]^T * B[m x n]
template <class T>
inline Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  int64_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != m) {
    throw DimensionError("matmul_tn outer dimensions disagree: " + a.shape_str() + " vs " +
                         b.shape_str());
  }
  Tensor<T> c({k, n});
  for (int64_t t = 0; t < m; ++t) {
    for (int64_t i = 0; i < k; ++i) {
      T av = a.at(t, i);
      if (av == T(0)) continue;
      for (int64_t j = 0; j < n; ++j) c.at(i, j) += av * b.at(t, j);
    }
  }
  return c;
}

// Softmax along `axis` with max subtraction. Reduction order is sequential
// along the axis, so results are deterministic.
template <class T>
inline Tensor<T> stable_softmax(const Tensor<T>& x, int axis) {
  int nd = x.ndim();
  if (axis < 0 || axis >= nd) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " +
                         x.shape_str());
  }
  int64_t axis_len = x.shape[static_cast<size_t>(axis)];
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= x.shape[static_cast<size_t>(i)];
  for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<size_t>(i)];

  Tensor<T> out(x.shape);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * axis_len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t a = 0; a < axis_len; ++a) mx = std::max(mx, x[base + a * inner]);
      T denom = 0;
      for (int64_t a = 0; a < axis_len; ++a) {
        T e = std::exp(x[base + a * inner] - mx);
        out[base + a * inner] = e;
        denom += e;
      }
      for (int64_t a = 0; a < axis_len; ++a) out[base + a * inner] /= denom;
    }
  }
  ensure_finite(out, "stable_softmax");
  return out;
}

// Normalizes the last axis: (x - mean) / sqrt(var + eps) * gamma + beta.
// Population variance (divide by d).
template <class T>
inline Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                            T eps) {
  if (eps <= T(0)) throw ContractError("layer_norm eps must be positive");
  int64_t d = x.shape.back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm gamma/beta length must equal last axis " + std::to_string(d));
  }
  int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const T* px = x.data.data() + r * d;
    T* po = out.data.data() + r * d;
    T mean = 0;
    for (int64_t i = 0; i < d; ++i) mean += px[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (int64_t i = 0; i < d; ++i) {
      T c = px[i] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T rstd = T(1) / std::sqrt(var + eps);
    for (int64_t i = 0; i < d; ++i) po[i] = (px[i] - mean) * rstd * gamma[i] + beta[i];
  }
  ensure_finite(out, "layer_norm");
  return out;
}

template <class T>
inline T gelu_scalar(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  T inner = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(inner));
}

// d/dx of the tanh-approximation GELU.
template <class T>
inline T gelu_grad_scalar(T x) {
  const T c = T(0.7978845608028654);
  T x3 = x * x * x;
  T inner = c * (x + T(0.044715) * x3);
  T th = std::tanh(inner);
  T sech2 = T(1) - th * th;
  return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * c * (T(1) + T(3) * T(0.044715) * x * x);
}

template <class T>
inline Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = gelu_scalar(x[i]);
  ensure_finite(out, "gelu");
  return out;
}

template <class T>
inline T dot(const Tensor<T>& u, const Tensor<T>& v) {
  if (u.numel() != v.numel()) throw DimensionError("dot: length mismatch");
  T acc = 0;
  for (int64_t i = 0; i < u.numel(); ++i) acc += u[i] * v[i];
  return acc;
}

template <class T>
inline T norm(const Tensor<T>& u) {
  return std::sqrt(dot(u, u));
}

template <class T>
inline T cosine_similarity(const Tensor<T>& u, const Tensor<T>& v) {
  if (u.numel() != v.numel()) throw DimensionError("cosine_similarity: length mismatch");
  T nu = norm(u), nv = norm(v);
  if (nu == T(0) || nv == T(0)) {
    throw DegenerateVectorError("cosine_similarity: zero-norm input");
  }
  T c = dot(u, v) / (nu * nv);
  if (!std::isfinite(c)) throw NumericError("cosine_similarity produced a non-finite value");
  // Clamp rounding spill outside [-1, 1].
  return std::max(T(-1), std::min(T(1), c));
}

template <class T>
inline Tensor<T> transpose(const Tensor<T>& a) {
  int64_t m = a.rows(), n = a.cols();
  Tensor<T> out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

template <class T>
inline Tensor<T> random_uniform(std::vector<int64_t> shape, T lo, T hi, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace blockrank
