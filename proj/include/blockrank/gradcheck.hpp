#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "blockrank/autodiff.hpp"
#include "blockrank/util.hpp"

namespace blockrank {

template <class T>
struct GradCheckReport {
  struct Entry {
    std::string name;
    T max_rel_err;
  };
  std::vector<Entry> per_param;
  T max_rel_err = 0;
  bool pass = false;
  T eps = 0;
};

// A differentiable scalar function of named parameter tensors. The builder
// is used twice: recorded (to query backward()) and unrecorded (for the
// plain evaluations the central differences need).
template <class T>
struct ParametricScalarFn {
  std::vector<std::string> names;
  std::vector<Tensor<T>> params;
  std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)> build;
};

namespace detail {

template <class T>
inline T eval_plain(const ParametricScalarFn<T>& f) {
  Tape<T> tape(false);
  std::vector<Var<T>> vars;
  vars.reserve(f.params.size());
  for (const auto& p : f.params) vars.push_back(tape.leaf_external(&p));
  Var<T> out = f.build(tape, vars);
  if (out.v().numel() != 1) throw ContractError("gradient check: function must return a scalar");
  return out.v()[0];
}

}  // namespace detail

// Central-difference check of backward() for `f`. `max_probes_per_param`
// bounds the probed coordinates per tensor (0 = all), chosen deterministically.
template <class T>
inline GradCheckReport<T> finite_diff_check(ParametricScalarFn<T> f, T eps, T tol = T(1e-4),
                                            int64_t max_probes_per_param = 0) {
  if (!(eps > T(0)) || eps > T(1e-2)) throw ContractError("finite_diff_check: eps must be in (0, 1e-2]");
  if (f.names.size() != f.params.size()) throw ContractError("finite_diff_check: name/param mismatch");

  // Determinism gate: two evaluations must agree bit-for-bit.
  T v1 = detail::eval_plain(f);
  T v2 = detail::eval_plain(f);
  if (std::memcmp(&v1, &v2, sizeof(T)) != 0) {
    throw DeterminismError("finite_diff_check: function is not deterministic");
  }

  // Analytic gradients via one recorded pass.
  std::vector<Tensor<T>> analytic;
  {
    Tape<T> tape(true);
    std::vector<Var<T>> vars;
    vars.reserve(f.params.size());
    for (const auto& p : f.params) vars.push_back(tape.leaf_external(&p));
    Var<T> out = f.build(tape, vars);
    if (out.v().numel() != 1) throw ContractError("gradient check: function must return a scalar");
    tape.backward(out);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckReport<T> report;
  report.eps = eps;
  Rng probe_rng(0x9e3779b97f4a7c15ull);
  const T floor = T(1e-8);

  for (size_t p = 0; p < f.params.size(); ++p) {
    Tensor<T>& theta = f.params[p];
    int64_t n = theta.numel();
    std::vector<int64_t> idx;
    if (max_probes_per_param > 0 && n > max_probes_per_param) {
      for (int64_t k = 0; k < max_probes_per_param; ++k)
        idx.push_back(static_cast<int64_t>(probe_rng.uniform_u64(static_cast<uint64_t>(n))));
    } else {
      idx.resize(static_cast<size_t>(n));
      for (int64_t k = 0; k < n; ++k) idx[static_cast<size_t>(k)] = k;
    }

    T worst = 0;
    for (int64_t i : idx) {
      T saved = theta[i];
      theta[i] = saved + eps;
      T fp = detail::eval_plain(f);
      theta[i] = saved - eps;
      T fm = detail::eval_plain(f);
      theta[i] = saved;
      T numeric = (fp - fm) / (T(2) * eps);
      T a = analytic[p][i];
      T rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, rel);
    }
    report.per_param.push_back({f.names[p], worst});
    report.max_rel_err = std::max(report.max_rel_err, worst);
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace blockrank
