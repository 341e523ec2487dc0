#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "blockrank/tensor.hpp"

namespace blockrank {

// Live/peak element counts of everything a tape (and any inner tapes spawned
// during checkpointed backward) keeps alive. Shared by pointer so recompute
// spikes register against the same high-water mark.
struct TapeMeter {
  int64_t live = 0;
  int64_t peak = 0;
  void add(int64_t n) {
    live += n;
    if (live > peak) peak = live;
  }
  void sub(int64_t n) { live -= n; }
};

template <class T>
class Tape;

// Value handle. Always carries the computed tensor; carries a tape id only
// when the producing op was recorded.
template <class T>
struct Var {
  std::shared_ptr<const Tensor<T>> val;
  Tape<T>* tape = nullptr;
  int id = -1;

  Var() = default;
  explicit Var(std::shared_ptr<const Tensor<T>> v) : val(std::move(v)) {}

  const Tensor<T>& v() const { return *val; }
  bool tracked() const { return tape != nullptr && id >= 0; }
};

template <class T>
inline Var<T> constant(Tensor<T> t) {
  return Var<T>(std::make_shared<const Tensor<T>>(std::move(t)));
}

// Ordered record of executed differentiable ops. backward() replays the node
// list in exact reverse execution order; gradients accumulate additively when
// a value feeds multiple consumers.
template <class T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int)>;

  explicit Tape(bool recording = true, TapeMeter* meter = nullptr)
      : recording_(recording), meter_(meter) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ~Tape() { release_meter(); }

  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }
  TapeMeter* meter() const { return meter_; }

  size_t node_count() const { return nodes_.size(); }

  // Registers a gradient-receiving input. Tracked even while recording is
  // off so parameters keep stable ids on a live tape.
  Var<T> leaf(Tensor<T> value) {
    return leaf_ptr(std::make_shared<const Tensor<T>>(std::move(value)));
  }

  // Non-owning leaf over externally owned storage (model parameters). The
  // storage must outlive the tape.
  Var<T> leaf_external(const Tensor<T>* value) {
    return leaf_ptr(std::shared_ptr<const Tensor<T>>(std::shared_ptr<void>(), value));
  }

  Var<T> leaf_ptr(std::shared_ptr<const Tensor<T>> p) {
    Var<T> v(std::move(p));
    v.tape = this;
    v.id = new_var(v.val, /*count=*/false);
    return v;
  }

  void backward(const Var<T>& loss) {
    if (!loss.tracked() || loss.tape != this) {
      throw ContractError("backward: loss was not produced under this tape");
    }
    if (loss.v().numel() != 1) {
      throw ContractError("backward: loss must be a scalar, got " + loss.v().shape_str());
    }
    backward_seeded(loss, Tensor<T>::full(loss.v().shape, T(1)));
  }

  void backward_seeded(const Var<T>& out, Tensor<T> seed) {
    if (!out.tracked() || out.tape != this) {
      throw ContractError("backward_seeded: output is not tracked by this tape");
    }
    if (seed.shape != out.v().shape) throw DimensionError("backward_seeded: seed shape mismatch");
    set_grad(out.id, std::move(seed));
    for (size_t i = nodes_.size(); i-- > 0;) {
      if (has_grad(nodes_[i].out)) nodes_[i].backprop(*this, nodes_[i].out);
    }
  }

  bool has_grad(int id) const {
    return id >= 0 && static_cast<size_t>(id) < grads_.size() && !grads_[id].shape.empty();
  }

  // Gradient of a tracked var; zeros when unreachable from the loss.
  Tensor<T> grad(const Var<T>& v) const {
    if (!v.tracked() || v.tape != this) {
      throw ContractError("grad: var is not tracked by this tape");
    }
    if (has_grad(v.id)) return grads_[v.id];
    return Tensor<T>::zeros(v.v().shape);
  }

  const Tensor<T>& grad_of(int id) const { return grads_[id]; }

  void add_grad(int id, const Tensor<T>& g) {
    Tensor<T>& buf = grad_buf(id);
    for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
  }

  Tensor<T>& grad_buf(int id) {
    if (!has_grad(id)) {
      meter_add(vals_[id]->numel());
      grads_[id] = Tensor<T>::zeros(vals_[id]->shape);
    }
    return grads_[id];
  }

  const Tensor<T>& value_of(int id) const { return *vals_[id]; }

  // Drops all recorded state (and its meter contribution).
  void reset() {
    release_meter();
    vals_.clear();
    grads_.clear();
    nodes_.clear();
  }

  int new_var(std::shared_ptr<const Tensor<T>> v, bool count = true) {
    if (count) meter_add(v->numel());
    vals_.push_back(std::move(v));
    grads_.emplace_back();
    return static_cast<int>(vals_.size()) - 1;
  }

  void push_node(int out, BackFn backprop) { nodes_.push_back(Node{out, std::move(backprop)}); }

 private:
  struct Node {
    int out;
    BackFn backprop;
  };

  void set_grad(int id, Tensor<T> g) {
    if (!has_grad(id)) meter_add(g.numel());
    grads_[id] = std::move(g);
  }

  void meter_add(int64_t n) {
    metered_ += n;
    if (meter_) meter_->add(n);
  }

  void release_meter() {
    if (meter_) meter_->sub(metered_);
    metered_ = 0;
  }

  bool recording_;
  TapeMeter* meter_;
  int64_t metered_ = 0;
  std::vector<std::shared_ptr<const Tensor<T>>> vals_;
  std::vector<Tensor<T>> grads_;
  std::vector<Node> nodes_;
};

namespace detail {

template <class T>
inline Tape<T>* op_tape(std::initializer_list<const Var<T>*> ins) {
  Tape<T>* t = nullptr;
  for (const Var<T>* v : ins) {
    if (!v->tracked()) continue;
    if (t == nullptr) {
      t = v->tape;
    } else if (t != v->tape) {
      throw ContractError("operands belong to different tapes");
    }
  }
  return (t != nullptr && t->recording()) ? t : nullptr;
}

template <class T>
inline Var<T> finish(Tape<T>* t, Tensor<T> out, typename Tape<T>::BackFn backprop) {
  Var<T> r(std::make_shared<const Tensor<T>>(std::move(out)));
  if (t != nullptr) {
    r.tape = t;
    r.id = t->new_var(r.val);
    t->push_node(r.id, std::move(backprop));
  }
  return r;
}

// Input id if tracked, else -1 (gradient dropped).
template <class T>
inline int gid(const Var<T>& v) {
  return v.tracked() ? v.id : -1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops (same shape)
// ---------------------------------------------------------------------------

template <class T>
inline Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (!a.v().same_shape(b.v())) throw DimensionError("add: shape mismatch");
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.v()[i];
  Tape<T>* t = detail::op_tape<T>({&a, &b});
  int ia = detail::gid(a), ib = detail::gid(b);
  return detail::finish<T>(t, std::move(out), [ia, ib](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) tp.add_grad(ia, g);
    if (ib >= 0) tp.add_grad(ib, g);
  });
}

template <class T>
inline Var<T> sub(const Var<T>& a, const Var<T>& b) {
  if (!a.v().same_shape(b.v())) throw DimensionError("sub: shape mismatch");
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.v()[i];
  Tape<T>* t = detail::op_tape<T>({&a, &b});
  int ia = detail::gid(a), ib = detail::gid(b);
  return detail::finish<T>(t, std::move(out), [ia, ib](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) tp.add_grad(ia, g);
    if (ib >= 0) {
      Tensor<T>& buf = tp.grad_buf(ib);
      for (int64_t i = 0; i < g.numel(); ++i) buf[i] -= g[i];
    }
  });
}

template <class T>
inline Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (!a.v().same_shape(b.v())) throw DimensionError("mul: shape mismatch");
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.v()[i];
  Tape<T>* t = detail::op_tape<T>({&a, &b});
  int ia = detail::gid(a), ib = detail::gid(b);
  auto pa = a.val, pb = b.val;
  return detail::finish<T>(t, std::move(out), [ia, ib, pa, pb](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] * (*pb)[i];
    }
    if (ib >= 0) {
      Tensor<T>& buf = tp.grad_buf(ib);
      for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] * (*pa)[i];
    }
  });
}

template <class T>
inline Var<T> div(const Var<T>& a, const Var<T>& b) {
  if (!a.v().same_shape(b.v())) throw DimensionError("div: shape mismatch");
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b.v()[i];
  Tape<T>* t = detail::op_tape<T>({&a, &b});
  int ia = detail::gid(a), ib = detail::gid(b);
  auto pa = a.val, pb = b.val;
  return detail::finish<T>(t, std::move(out), [ia, ib, pa, pb](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] / (*pb)[i];
    }
    if (ib >= 0) {
      Tensor<T>& buf = tp.grad_buf(ib);
      for (int64_t i = 0; i < g.numel(); ++i)
        buf[i] -= g[i] * (*pa)[i] / ((*pb)[i] * (*pb)[i]);
    }
  });
}

template <class T>
inline Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  if (!a.v().same_shape(b.v())) throw DimensionError("maximum: shape mismatch");
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], b.v()[i]);
  Tape<T>* t = detail::op_tape<T>({&a, &b});
  int ia = detail::gid(a), ib = detail::gid(b);
  auto pa = a.val, pb = b.val;
  return detail::finish<T>(t, std::move(out), [ia, ib, pa, pb](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    // Ties route to the first operand.
    for (int64_t i = 0; i < g.numel(); ++i) {
      bool first = (*pa)[i] >= (*pb)[i];
      if (first && ia >= 0) tp.grad_buf(ia)[i] += g[i];
      if (!first && ib >= 0) tp.grad_buf(ib)[i] += g[i];
    }
  });
}

template <class T>
inline Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  return detail::finish<T>(t, std::move(out), [ia, s](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] * s;
    }
  });
}

template <class T>
inline Var<T> add_const(const Var<T>& a, T s) {
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  return detail::finish<T>(t, std::move(out), [ia](Tape<T>& tp, int o) {
    if (ia >= 0) tp.add_grad(ia, tp.grad_of(o));
  });
}

template <class T>
inline Var<T> exp(const Var<T>& a) {
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  return detail::finish<T>(t, std::move(out), [ia](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    const Tensor<T>& y = tp.value_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] * y[i];
    }
  });
}

template <class T>
inline Var<T> log(const Var<T>& a) {
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  auto pa = a.val;
  return detail::finish<T>(t, std::move(out), [ia, pa](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] / (*pa)[i];
    }
  });
}

template <class T>
inline Var<T> sqrt(const Var<T>& a) {
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  return detail::finish<T>(t, std::move(out), [ia](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    const Tensor<T>& y = tp.value_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] / (T(2) * y[i]);
    }
  });
}

template <class T>
inline Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], T(0));
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  auto pa = a.val;
  return detail::finish<T>(t, std::move(out), [ia, pa](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < g.numel(); ++i) {
        if ((*pa)[i] > T(0)) buf[i] += g[i];
      }
    }
  });
}

template <class T>
inline Var<T> gelu(const Var<T>& a) {
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = gelu_scalar(out[i]);
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  auto pa = a.val;
  return detail::finish<T>(t, std::move(out), [ia, pa](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] * gelu_grad_scalar((*pa)[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <class T>
inline Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = matmul(a.v(), b.v());
  Tape<T>* t = detail::op_tape<T>({&a, &b});
  int ia = detail::gid(a), ib = detail::gid(b);
  auto pa = a.val, pb = b.val;
  return detail::finish<T>(t, std::move(out), [ia, ib, pa, pb](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) tp.add_grad(ia, matmul_nt(g, *pb));  // g . B^T
    if (ib >= 0) tp.add_grad(ib, matmul_tn(*pa, g));  // A^T . g
  });
}

// C = A . B^T with B given as [n x k].
template <class T>
inline Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = matmul_nt(a.v(), b.v());
  Tape<T>* t = detail::op_tape<T>({&a, &b});
  int ia = detail::gid(a), ib = detail::gid(b);
  auto pa = a.val, pb = b.val;
  return detail::finish<T>(t, std::move(out), [ia, ib, pa, pb](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) tp.add_grad(ia, matmul(g, *pb));     // g . B
    if (ib >= 0) tp.add_grad(ib, matmul_tn(g, *pa));  // g^T . A
  });
}

// ---------------------------------------------------------------------------
// Broadcast ops over rows/columns of a 2-D tensor
// ---------------------------------------------------------------------------

// a[m x n] + r[1 x n] (or flat [n])
template <class T>
inline Var<T> add_row(const Var<T>& a, const Var<T>& r) {
  int64_t m = a.v().rows(), n = a.v().cols();
  if (r.v().numel() != n) throw DimensionError("add_row: row length mismatch");
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(i, j) += r.v()[j];
  Tape<T>* t = detail::op_tape<T>({&a, &r});
  int ia = detail::gid(a), ir = detail::gid(r);
  return detail::finish<T>(t, std::move(out), [ia, ir, m, n](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) tp.add_grad(ia, g);
    if (ir >= 0) {
      Tensor<T>& buf = tp.grad_buf(ir);
      for (int64_t j = 0; j < n; ++j) {
        T acc = 0;
        for (int64_t i = 0; i < m; ++i) acc += g.at(i, j);
        buf[j] += acc;
      }
    }
  });
}

// a[m x n] * r[1 x n] broadcast over rows
template <class T>
inline Var<T> mul_row(const Var<T>& a, const Var<T>& r) {
  int64_t m = a.v().rows(), n = a.v().cols();
  if (r.v().numel() != n) throw DimensionError("mul_row: row length mismatch");
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(i, j) *= r.v()[j];
  Tape<T>* t = detail::op_tape<T>({&a, &r});
  int ia = detail::gid(a), ir = detail::gid(r);
  auto pa = a.val, pr = r.val;
  return detail::finish<T>(t, std::move(out), [ia, ir, pa, pr, m, n](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) buf.at(i, j) += g.at(i, j) * (*pr)[j];
    }
    if (ir >= 0) {
      Tensor<T>& buf = tp.grad_buf(ir);
      for (int64_t j = 0; j < n; ++j) {
        T acc = 0;
        for (int64_t i = 0; i < m; ++i) acc += g.at(i, j) * pa->at(i, j);
        buf[j] += acc;
      }
    }
  });
}

// a[m x n] - c[m x 1] broadcast over columns
template <class T>
inline Var<T> sub_col(const Var<T>& a, const Var<T>& c) {
  int64_t m = a.v().rows(), n = a.v().cols();
  if (c.v().numel() != m) throw DimensionError("sub_col: column length mismatch");
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(i, j) -= c.v()[i];
  Tape<T>* t = detail::op_tape<T>({&a, &c});
  int ia = detail::gid(a), ic = detail::gid(c);
  return detail::finish<T>(t, std::move(out), [ia, ic, m, n](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) tp.add_grad(ia, g);
    if (ic >= 0) {
      Tensor<T>& buf = tp.grad_buf(ic);
      for (int64_t i = 0; i < m; ++i) {
        T acc = 0;
        for (int64_t j = 0; j < n; ++j) acc += g.at(i, j);
        buf[i] -= acc;
      }
    }
  });
}

// a[m x n] * c[m x 1] broadcast over columns
template <class T>
inline Var<T> mul_col(const Var<T>& a, const Var<T>& c) {
  int64_t m = a.v().rows(), n = a.v().cols();
  if (c.v().numel() != m) throw DimensionError("mul_col: column length mismatch");
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(i, j) *= c.v()[i];
  Tape<T>* t = detail::op_tape<T>({&a, &c});
  int ia = detail::gid(a), ic = detail::gid(c);
  auto pa = a.val, pc = c.val;
  return detail::finish<T>(t, std::move(out), [ia, ic, pa, pc, m, n](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) buf.at(i, j) += g.at(i, j) * (*pc)[i];
    }
    if (ic >= 0) {
      Tensor<T>& buf = tp.grad_buf(ic);
      for (int64_t i = 0; i < m; ++i) {
        T acc = 0;
        for (int64_t j = 0; j < n; ++j) acc += g.at(i, j) * pa->at(i, j);
        buf[i] += acc;
      }
    }
  });
}

// a[m x n] / c[m x 1] broadcast over columns
template <class T>
inline Var<T> div_col(const Var<T>& a, const Var<T>& c) {
  int64_t m = a.v().rows(), n = a.v().cols();
  if (c.v().numel() != m) throw DimensionError("div_col: column length mismatch");
  Tensor<T> out = a.v();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(i, j) /= c.v()[i];
  Tape<T>* t = detail::op_tape<T>({&a, &c});
  int ia = detail::gid(a), ic = detail::gid(c);
  auto pc = c.val;
  return detail::finish<T>(t, std::move(out), [ia, ic, pc, m, n](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    const Tensor<T>& y = tp.value_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) buf.at(i, j) += g.at(i, j) / (*pc)[i];
    }
    if (ic >= 0) {
      Tensor<T>& buf = tp.grad_buf(ic);
      for (int64_t i = 0; i < m; ++i) {
        T acc = 0;
        for (int64_t j = 0; j < n; ++j) acc += g.at(i, j) * y.at(i, j);
        buf[i] -= acc / (*pc)[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and indexing
// ---------------------------------------------------------------------------

template <class T>
inline Var<T> rowmax(const Var<T>& a) {
  int64_t m = a.v().rows(), n = a.v().cols();
  Tensor<T> out({m, 1});
  auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    T best = a.v().at(i, 0);
    int64_t bj = 0;
    for (int64_t j = 1; j < n; ++j) {
      if (a.v().at(i, j) > best) {
        best = a.v().at(i, j);
        bj = j;
      }
    }
    out[i] = best;
    (*arg)[static_cast<size_t>(i)] = bj;
  }
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  return detail::finish<T>(t, std::move(out), [ia, arg, m](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < m; ++i) buf.at(i, (*arg)[static_cast<size_t>(i)]) += g[i];
    }
  });
}

template <class T>
inline Var<T> rowsum(const Var<T>& a) {
  int64_t m = a.v().rows(), n = a.v().cols();
  Tensor<T> out({m, 1});
  for (int64_t i = 0; i < m; ++i) {
    T acc = 0;
    for (int64_t j = 0; j < n; ++j) acc += a.v().at(i, j);
    out[i] = acc;
  }
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  return detail::finish<T>(t, std::move(out), [ia, m, n](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) buf.at(i, j) += g[i];
    }
  });
}

template <class T>
inline Var<T> sum_all(const Var<T>& a) {
  T acc = 0;
  for (int64_t i = 0; i < a.v().numel(); ++i) acc += a.v()[i];
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  return detail::finish<T>(t, Tensor<T>::scalar(acc), [ia](Tape<T>& tp, int o) {
    T g = tp.grad_of(o)[0];
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < buf.numel(); ++i) buf[i] += g;
    }
  });
}

template <class T>
inline Var<T> pick(const Var<T>& a, int64_t i, int64_t j) {
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  return detail::finish<T>(t, Tensor<T>::scalar(a.v().at(i, j)), [ia, i, j](Tape<T>& tp, int o) {
    if (ia >= 0) tp.grad_buf(ia).at(i, j) += tp.grad_of(o)[0];
  });
}

template <class T>
inline Var<T> dot(const Var<T>& a, const Var<T>& b) {
  if (a.v().numel() != b.v().numel()) throw DimensionError("dot: length mismatch");
  T acc = 0;
  for (int64_t i = 0; i < a.v().numel(); ++i) acc += a.v()[i] * b.v()[i];
  Tape<T>* t = detail::op_tape<T>({&a, &b});
  int ia = detail::gid(a), ib = detail::gid(b);
  auto pa = a.val, pb = b.val;
  return detail::finish<T>(t, Tensor<T>::scalar(acc), [ia, ib, pa, pb](Tape<T>& tp, int o) {
    T g = tp.grad_of(o)[0];
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < buf.numel(); ++i) buf[i] += g * (*pb)[i];
    }
    if (ib >= 0) {
      Tensor<T>& buf = tp.grad_buf(ib);
      for (int64_t i = 0; i < buf.numel(); ++i) buf[i] += g * (*pa)[i];
    }
  });
}

// Same data, new shape (products must agree).
template <class T>
inline Var<T> reshape(const Var<T>& a, std::vector<int64_t> shape) {
  Tensor<T> out(std::move(shape));
  if (out.numel() != a.v().numel()) throw DimensionError("reshape: element count mismatch");
  std::copy(a.v().data.begin(), a.v().data.end(), out.data.begin());
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  auto in_shape = a.v().shape;
  return detail::finish<T>(t, std::move(out), [ia](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
    }
  });
}

// Rows [r0, r1) of a.
template <class T>
inline Var<T> slice_rows(const Var<T>& a, int64_t r0, int64_t r1) {
  int64_t m = a.v().rows(), n = a.v().cols();
  if (r0 < 0 || r1 <= r0 || r1 > m) throw RangeError("slice_rows: bad range");
  Tensor<T> out({r1 - r0, n});
  std::copy(a.v().data.begin() + r0 * n, a.v().data.begin() + r1 * n, out.data.begin());
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  return detail::finish<T>(t, std::move(out), [ia, r0, r1, n](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < r1 - r0; ++i)
        for (int64_t j = 0; j < n; ++j) buf.at(r0 + i, j) += g.at(i, j);
    }
  });
}

// Stacks 2-D parts with equal column counts.
template <class T>
inline Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  int64_t n = parts[0].v().cols();
  int64_t m = 0;
  for (const auto& p : parts) {
    if (p.v().cols() != n) throw DimensionError("concat_rows: column mismatch");
    m += p.v().rows();
  }
  Tensor<T> out({m, n});
  int64_t r = 0;
  std::vector<int> ids;
  std::vector<int64_t> offs, lens;
  Tape<T>* t = nullptr;
  for (const auto& p : parts) {
    std::copy(p.v().data.begin(), p.v().data.end(), out.data.begin() + r * n);
    ids.push_back(detail::gid(p));
    offs.push_back(r);
    lens.push_back(p.v().rows());
    r += p.v().rows();
    if (p.tracked()) {
      if (t != nullptr && t != p.tape) throw ContractError("concat_rows: mixed tapes");
      t = p.tape;
    }
  }
  if (t != nullptr && !t->recording()) t = nullptr;
  return detail::finish<T>(t, std::move(out), [ids, offs, lens, n](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    for (size_t p = 0; p < ids.size(); ++p) {
      if (ids[p] < 0) continue;
      Tensor<T>& buf = tp.grad_buf(ids[p]);
      for (int64_t i = 0; i < lens[p]; ++i)
        for (int64_t j = 0; j < n; ++j) buf.at(i, j) += g.at(offs[p] + i, j);
    }
  });
}

// Embedding lookup: rows of table selected by ids. Backward scatter-adds in
// sequence order, so accumulation is deterministic.
template <class T>
inline Var<T> gather_rows(const Var<T>& table, const std::vector<int32_t>& ids) {
  int64_t v = table.v().rows(), d = table.v().cols();
  Tensor<T> out({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v) throw RangeError("gather_rows: id out of range");
    std::copy(table.v().data.begin() + ids[i] * d, table.v().data.begin() + (ids[i] + 1) * d,
              out.data.begin() + static_cast<int64_t>(i) * d);
  }
  Tape<T>* t = detail::op_tape<T>({&table});
  int it = detail::gid(table);
  auto idcopy = std::make_shared<std::vector<int32_t>>(ids);
  return detail::finish<T>(t, std::move(out), [it, idcopy, d](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (it >= 0) {
      Tensor<T>& buf = tp.grad_buf(it);
      for (size_t i = 0; i < idcopy->size(); ++i)
        for (int64_t j = 0; j < d; ++j)
          buf.at((*idcopy)[i], j) += g.at(static_cast<int64_t>(i), j);
    }
  });
}

// Mean of the rows where valid[i] != 0, as a [1 x d] tensor.
template <class T>
inline Var<T> masked_mean_rows(const Var<T>& a, const std::vector<uint8_t>& valid) {
  int64_t m = a.v().rows(), d = a.v().cols();
  if (static_cast<int64_t>(valid.size()) != m) throw DimensionError("masked_mean_rows: mask size");
  int64_t cnt = 0;
  for (uint8_t f : valid) cnt += (f != 0);
  if (cnt == 0) throw ContractError("masked_mean_rows: no valid rows");
  Tensor<T> out({1, d});
  for (int64_t i = 0; i < m; ++i) {
    if (!valid[static_cast<size_t>(i)]) continue;
    for (int64_t j = 0; j < d; ++j) out[j] += a.v().at(i, j);
  }
  for (int64_t j = 0; j < d; ++j) out[j] /= static_cast<T>(cnt);
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  auto vm = std::make_shared<std::vector<uint8_t>>(valid);
  return detail::finish<T>(t, std::move(out), [ia, vm, m, d, cnt](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    if (ia >= 0) {
      Tensor<T>& buf = tp.grad_buf(ia);
      for (int64_t i = 0; i < m; ++i) {
        if (!(*vm)[static_cast<size_t>(i)]) continue;
        for (int64_t j = 0; j < d; ++j) buf.at(i, j) += g[j] / static_cast<T>(cnt);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Fused layers
// ---------------------------------------------------------------------------

// Row softmax with max subtraction. dx = (g - sum(g*y)) * y per row.
template <class T>
inline Var<T> softmax_rows(const Var<T>& a) {
  Tensor<T> out = stable_softmax(a.v(), 1);
  Tape<T>* t = detail::op_tape<T>({&a});
  int ia = detail::gid(a);
  return detail::finish<T>(t, std::move(out), [ia](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    const Tensor<T>& y = tp.value_of(o);
    if (ia < 0) return;
    Tensor<T>& buf = tp.grad_buf(ia);
    int64_t m = y.rows(), n = y.cols();
    for (int64_t i = 0; i < m; ++i) {
      T s = 0;
      for (int64_t j = 0; j < n; ++j) s += g.at(i, j) * y.at(i, j);
      for (int64_t j = 0; j < n; ++j) buf.at(i, j) += (g.at(i, j) - s) * y.at(i, j);
    }
  });
}

// Layer norm over the last axis; mean/rstd recomputed during backward.
template <class T>
inline Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  Tensor<T> out = layer_norm(x.v(), gamma.v(), beta.v(), eps);
  Tape<T>* t = detail::op_tape<T>({&x, &gamma, &beta});
  int ix = detail::gid(x), ig = detail::gid(gamma), ibt = detail::gid(beta);
  auto px = x.val, pg = gamma.val;
  return detail::finish<T>(t, std::move(out), [ix, ig, ibt, px, pg, eps](Tape<T>& tp, int o) {
    const Tensor<T>& g = tp.grad_of(o);
    int64_t d = px->shape.back();
    int64_t rows = px->numel() / d;
    std::vector<T> xhat(static_cast<size_t>(d));
    for (int64_t r = 0; r < rows; ++r) {
      const T* prow = px->data.data() + r * d;
      const T* grow = g.data.data() + r * d;
      T mean = 0;
      for (int64_t i = 0; i < d; ++i) mean += prow[i];
      mean /= static_cast<T>(d);
      T var = 0;
      for (int64_t i = 0; i < d; ++i) {
        T c = prow[i] - mean;
        var += c * c;
      }
      var /= static_cast<T>(d);
      T rstd = T(1) / std::sqrt(var + eps);
      for (int64_t i = 0; i < d; ++i) xhat[static_cast<size_t>(i)] = (prow[i] - mean) * rstd;

      if (ig >= 0) {
        Tensor<T>& bg = tp.grad_buf(ig);
        for (int64_t i = 0; i < d; ++i) bg[i] += grow[i] * xhat[static_cast<size_t>(i)];
      }
      if (ibt >= 0) {
        Tensor<T>& bb = tp.grad_buf(ibt);
        for (int64_t i = 0; i < d; ++i) bb[i] += grow[i];
      }
      if (ix >= 0) {
        Tensor<T>& bx = tp.grad_buf(ix);
        T sum_gdy = 0, sum_gdy_xhat = 0;
        for (int64_t i = 0; i < d; ++i) {
          T gdy = grow[i] * (*pg)[i];
          sum_gdy += gdy;
          sum_gdy_xhat += gdy * xhat[static_cast<size_t>(i)];
        }
        T inv_d = T(1) / static_cast<T>(d);
        for (int64_t i = 0; i < d; ++i) {
          T gdy = grow[i] * (*pg)[i];
          bx.data[static_cast<size_t>(r * d + i)] +=
              rstd * (gdy - inv_d * sum_gdy - xhat[static_cast<size_t>(i)] * inv_d * sum_gdy_xhat);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Checkpointed subgraphs (activation recompute)
// ---------------------------------------------------------------------------

// Runs `body` over `inputs`. With recompute set and recording active, the
// body executes unrecorded (block intermediates are dropped as soon as each
// value dies) and a single node replays it on an inner tape during backward.
// The body must reach every gradient-carrying value through `inputs`.
template <class T>
inline Var<T> checkpoint(
    Tape<T>& tape, const std::vector<Var<T>>& inputs,
    const std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>& body, bool recompute) {
  if (!tape.recording() || !recompute) {
    return body(tape, inputs);
  }

  // Forward pass with recording suppressed: same kernels, same order, no
  // retained intermediates.
  tape.set_recording(false);
  Var<T> out = body(tape, inputs);
  tape.set_recording(true);

  std::vector<std::shared_ptr<const Tensor<T>>> saved_in;
  std::vector<int> in_ids;
  saved_in.reserve(inputs.size());
  for (const auto& v : inputs) {
    saved_in.push_back(v.val);
    in_ids.push_back(detail::gid(v));
  }

  Var<T> r(out.val);
  r.tape = &tape;
  r.id = tape.new_var(r.val);
  tape.push_node(r.id, [saved_in, in_ids, body](Tape<T>& tp, int o) {
    Tape<T> inner(true, tp.meter());
    std::vector<Var<T>> leaves;
    leaves.reserve(saved_in.size());
    for (const auto& p : saved_in) leaves.push_back(inner.leaf_ptr(p));
    // Seed inner leaf gradients with the outer running totals and copy the
    // results back, so accumulation order matches the unrecorded path
    // bit for bit even when an input contributes several times.
    for (size_t i = 0; i < leaves.size(); ++i) {
      if (in_ids[i] >= 0 && tp.has_grad(in_ids[i])) {
        inner.grad_buf(leaves[i].id) = tp.grad_of(in_ids[i]);
      }
    }
    Var<T> replay = body(inner, leaves);
    inner.backward_seeded(replay, tp.grad_of(o));
    for (size_t i = 0; i < leaves.size(); ++i) {
      if (in_ids[i] >= 0 && inner.has_grad(leaves[i].id)) {
        tp.grad_buf(in_ids[i]) = inner.grad_of(leaves[i].id);
      }
    }
  });
  return r;
}

}  // namespace blockrank
