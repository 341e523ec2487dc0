#pragma once

#include <atomic>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "blockrank/autodiff.hpp"
#include "blockrank/tensor.hpp"
#include "blockrank/util.hpp"

namespace blockrank {

struct AttentionConfig {
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t q_chunk = 32;
  int64_t kv_chunk = 32;
  double rope_base = 10000.0;
  int64_t max_seq_len = 1024;

  int64_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || q_chunk <= 0 || kv_chunk <= 0 || max_seq_len <= 0) {
      throw ContractError("attention config: dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ContractError("attention config: d_model must be divisible by n_heads");
    }
    if (head_dim() % 2 != 0) {
      throw ContractError("attention config: head_dim must be even for rotary embedding");
    }
    if (q_chunk > max_seq_len || kv_chunk > max_seq_len) {
      throw ContractError("attention config: chunk sizes must not exceed max_seq_len");
    }
    if (rope_base <= 0) throw ContractError("attention config: rope_base must be positive");
  }
};

// Precomputed rotation tables, angle(m, i) = m * base^(-2i / head_dim).
template <class T>
struct RopeCache {
  int64_t max_seq_len = 0;
  int64_t half_dim = 0;
  std::shared_ptr<const Tensor<T>> cos_tab;  // [max_seq_len x half_dim]
  std::shared_ptr<const Tensor<T>> sin_tab;

  static RopeCache build(int64_t max_seq_len, int64_t head_dim, double base) {
    if (head_dim % 2 != 0) throw ContractError("rope cache: head_dim must be even");
    RopeCache c;
    c.max_seq_len = max_seq_len;
    c.half_dim = head_dim / 2;
    Tensor<T> cos_t({max_seq_len, c.half_dim});
    Tensor<T> sin_t({max_seq_len, c.half_dim});
    for (int64_t m = 0; m < max_seq_len; ++m) {
      for (int64_t i = 0; i < c.half_dim; ++i) {
        double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        double ang = static_cast<double>(m) * freq;
        cos_t.at(m, i) = static_cast<T>(std::cos(ang));
        sin_t.at(m, i) = static_cast<T>(std::sin(ang));
      }
    }
    c.cos_tab = std::make_shared<const Tensor<T>>(std::move(cos_t));
    c.sin_tab = std::make_shared<const Tensor<T>>(std::move(sin_t));
    return c;
  }
};

// High-water mark over live attention scratch elements. Kernels report the
// buffers they hold; inputs and outputs are not scratch.
struct AttnScratchMeter {
  std::atomic<int64_t> live{0};
  std::atomic<int64_t> peak{0};

  void alloc(int64_t n) {
    int64_t now = live.fetch_add(n) + n;
    int64_t prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
  }
  void release(int64_t n) { live.fetch_sub(n); }
  void reset() {
    live.store(0);
    peak.store(0);
  }
};

namespace detail {

struct Block {
  int64_t start;
  int64_t len;
};

// Ragged chunking: the final block is shortened, never padded.
inline std::vector<Block> chunk_ranges(int64_t total, int64_t chunk) {
  std::vector<Block> out;
  for (int64_t s = 0; s < total; s += chunk) out.push_back({s, std::min(chunk, total - s)});
  return out;
}

}  // namespace detail

// Optional attention mask: keep[i*L + j] != 0 means query i may attend key j.
using AttentionMask = std::vector<uint8_t>;

// ---------------------------------------------------------------------------
// Plain kernels
// ---------------------------------------------------------------------------

// Rotates feature pairs (x[2i], x[2i+1]) of each row by its position angle.
template <class T>
inline Tensor<T> rope_apply(const Tensor<T>& x, std::span<const int64_t> positions,
                            const RopeCache<T>& cache) {
  int64_t L = x.rows(), dh = x.cols();
  if (dh % 2 != 0) throw ContractError("rope_apply: head_dim must be even");
  if (dh / 2 != cache.half_dim) throw DimensionError("rope_apply: cache built for another head_dim");
  if (static_cast<int64_t>(positions.size()) != L) {
    throw DimensionError("rope_apply: positions must cover every row");
  }
  Tensor<T> out({L, dh});
  const Tensor<T>& ct = *cache.cos_tab;
  const Tensor<T>& st = *cache.sin_tab;
  for (int64_t r = 0; r < L; ++r) {
    int64_t m = positions[static_cast<size_t>(r)];
    if (m < 0 || m >= cache.max_seq_len) {
      throw RangeError("rope_apply: position " + std::to_string(m) + " outside cache of length " +
                       std::to_string(cache.max_seq_len));
    }
    for (int64_t i = 0; i < dh / 2; ++i) {
      T c = ct.at(m, i), s = st.at(m, i);
      T x0 = x.at(r, 2 * i), x1 = x.at(r, 2 * i + 1);
      out.at(r, 2 * i) = x0 * c - x1 * s;
      out.at(r, 2 * i + 1) = x0 * s + x1 * c;
    }
  }
  return out;
}

// Reference kernel: softmax(Q K^T / sqrt(dh) + mask) V with the full L x L
// score matrix materialized.
template <class T>
inline Tensor<T> vanilla_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                   const AttentionMask* mask = nullptr,
                                   AttnScratchMeter* meter = nullptr) {
  int64_t L = q.rows(), dh = q.cols();
  if (k.rows() != L || k.cols() != dh || v.rows() != L || v.cols() != dh) {
    throw DimensionError("vanilla_attention: Q/K/V shapes disagree");
  }
  if (mask != nullptr && static_cast<int64_t>(mask->size()) != L * L) {
    throw DimensionError("vanilla_attention: mask must be L x L");
  }
  const T neg_inf = -std::numeric_limits<T>::infinity();
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  if (meter) meter->alloc(L * L);
  Tensor<T> scores({L, L});
  for (int64_t i = 0; i < L; ++i) {
    for (int64_t j = 0; j < L; ++j) {
      if (mask != nullptr && !(*mask)[static_cast<size_t>(i * L + j)]) {
        scores.at(i, j) = neg_inf;
        continue;
      }
      T acc = 0;
      for (int64_t t = 0; t < dh; ++t) acc += q.at(i, t) * k.at(j, t);
      scores.at(i, j) = acc * inv_sqrt;
    }
  }
  // Row softmax in place.
  for (int64_t i = 0; i < L; ++i) {
    T mx = neg_inf;
    for (int64_t j = 0; j < L; ++j) mx = std::max(mx, scores.at(i, j));
    if (mx == neg_inf) {
      if (meter) meter->release(L * L);
      throw DegenerateRowError("vanilla_attention: row " + std::to_string(i) +
                               " has every key masked");
    }
    T denom = 0;
    for (int64_t j = 0; j < L; ++j) {
      T e = scores.at(i, j) == neg_inf ? T(0) : std::exp(scores.at(i, j) - mx);
      scores.at(i, j) = e;
      denom += e;
    }
    for (int64_t j = 0; j < L; ++j) scores.at(i, j) /= denom;
  }
  Tensor<T> out({L, dh});
  for (int64_t i = 0; i < L; ++i) {
    for (int64_t j = 0; j < L; ++j) {
      T w = scores.at(i, j);
      if (w == T(0)) continue;
      for (int64_t t = 0; t < dh; ++t) out.at(i, t) += w * v.at(j, t);
    }
  }
  if (meter) meter->release(L * L);
  return out;
}

// Blockwise attention with online softmax: per query block, stream key/value
// blocks keeping a running row max, denominator and weighted value sum. Peak
// scratch is q_chunk*(kv_chunk + head_dim + 2) elements per worker, never
// O(L^2). Results are identical for any worker count.
template <class T>
inline Tensor<T> blockwise_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                     const AttentionMask* mask, int64_t q_chunk, int64_t kv_chunk,
                                     AttnScratchMeter* meter = nullptr, int workers = 1) {
  int64_t L = q.rows(), dh = q.cols();
  if (k.rows() != L || k.cols() != dh || v.rows() != L || v.cols() != dh) {
    throw DimensionError("blockwise_attention: Q/K/V shapes disagree");
  }
  if (q_chunk < 1 || kv_chunk < 1 || q_chunk > L || kv_chunk > L) {
    throw ContractError("blockwise_attention: chunk sizes must be in [1, L]");
  }
  if (mask != nullptr && static_cast<int64_t>(mask->size()) != L * L) {
    throw DimensionError("blockwise_attention: mask must be L x L");
  }
  const T neg_inf = -std::numeric_limits<T>::infinity();
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  auto qblocks = detail::chunk_ranges(L, q_chunk);
  auto kblocks = detail::chunk_ranges(L, kv_chunk);
  Tensor<T> out({L, dh});
  std::atomic<int64_t> bad_row{-1};

  parallel_for(qblocks.size(), workers, [&](size_t qb) {
    int64_t q0 = qblocks[qb].start, qr = qblocks[qb].len;
    int64_t scratch = qr * kv_chunk + qr * dh + 2 * qr;
    if (meter) meter->alloc(scratch);
    std::vector<T> scores(static_cast<size_t>(qr * kv_chunk));
    std::vector<T> acc(static_cast<size_t>(qr * dh), T(0));
    std::vector<T> run_max(static_cast<size_t>(qr), neg_inf);
    std::vector<T> denom(static_cast<size_t>(qr), T(0));

    for (const auto& kb : kblocks) {
      int64_t k0 = kb.start, kr = kb.len;
      for (int64_t i = 0; i < qr; ++i) {
        for (int64_t j = 0; j < kr; ++j) {
          if (mask != nullptr && !(*mask)[static_cast<size_t>((q0 + i) * L + (k0 + j))]) {
            scores[static_cast<size_t>(i * kv_chunk + j)] = neg_inf;
            continue;
          }
          T s = 0;
          for (int64_t t = 0; t < dh; ++t) s += q.at(q0 + i, t) * k.at(k0 + j, t);
          scores[static_cast<size_t>(i * kv_chunk + j)] = s * inv_sqrt;
        }
      }
      for (int64_t i = 0; i < qr; ++i) {
        T bm = neg_inf;
        for (int64_t j = 0; j < kr; ++j)
          bm = std::max(bm, scores[static_cast<size_t>(i * kv_chunk + j)]);
        if (bm == neg_inf) continue;  // nothing visible in this block for row i
        T m_new = std::max(run_max[static_cast<size_t>(i)], bm);
        T corr = run_max[static_cast<size_t>(i)] == neg_inf
                     ? T(0)
                     : std::exp(run_max[static_cast<size_t>(i)] - m_new);
        T sum_p = 0;
        for (int64_t j = 0; j < kr; ++j) {
          T sv = scores[static_cast<size_t>(i * kv_chunk + j)];
          T p = sv == neg_inf ? T(0) : std::exp(sv - m_new);
          scores[static_cast<size_t>(i * kv_chunk + j)] = p;
          sum_p += p;
        }
        denom[static_cast<size_t>(i)] = denom[static_cast<size_t>(i)] * corr + sum_p;
        for (int64_t t = 0; t < dh; ++t) {
          T wsum = 0;
          for (int64_t j = 0; j < kr; ++j)
            wsum += scores[static_cast<size_t>(i * kv_chunk + j)] * v.at(k0 + j, t);
          acc[static_cast<size_t>(i * dh + t)] = acc[static_cast<size_t>(i * dh + t)] * corr + wsum;
        }
        run_max[static_cast<size_t>(i)] = m_new;
      }
    }
    for (int64_t i = 0; i < qr; ++i) {
      if (denom[static_cast<size_t>(i)] == T(0)) {
        bad_row.store(q0 + i);
        continue;
      }
      for (int64_t t = 0; t < dh; ++t)
        out.at(q0 + i, t) = acc[static_cast<size_t>(i * dh + t)] / denom[static_cast<size_t>(i)];
    }
    if (meter) meter->release(scratch);
  });

  if (bad_row.load() >= 0) {
    throw DegenerateRowError("blockwise_attention: row " + std::to_string(bad_row.load()) +
                             " has every key masked");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Taped building blocks (training path)
// ---------------------------------------------------------------------------

// Differentiable rotary embedding; backward rotates gradients by -angle.
template <class T>
inline Var<T> rope_apply(const Var<T>& x, std::shared_ptr<const std::vector<int64_t>> positions,
                         const RopeCache<T>& cache) {
  Tensor<T> out = rope_apply(x.v(), std::span<const int64_t>(*positions), cache);
  Tape<T>* t = detail::op_tape<T>({&x});
  int ix = detail::gid(x);
  auto ct = cache.cos_tab, st = cache.sin_tab;
  return detail::finish<T>(t, std::move(out), [ix, positions, ct, st](Tape<T>& tp, int o) {
    if (ix < 0) return;
    const Tensor<T>& g = tp.grad_of(o);
    Tensor<T>& buf = tp.grad_buf(ix);
    int64_t L = g.rows(), dh = g.cols();
    for (int64_t r = 0; r < L; ++r) {
      int64_t m = (*positions)[static_cast<size_t>(r)];
      for (int64_t i = 0; i < dh / 2; ++i) {
        T c = ct->at(m, i), s = st->at(m, i);
        T g0 = g.at(r, 2 * i), g1 = g.at(r, 2 * i + 1);
        buf.at(r, 2 * i) += g0 * c + g1 * s;
        buf.at(r, 2 * i + 1) += -g0 * s + g1 * c;
      }
    }
  });
}

// Taped blockwise attention over one head. `key_valid` marks key positions a
// query may attend (uniform across rows; pass empty for none masked). The
// arithmetic mirrors the plain kernel block for block.
template <class T>
inline Var<T> blockwise_attention_taped(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                                        const std::vector<uint8_t>& key_valid, int64_t q_chunk,
                                        int64_t kv_chunk) {
  int64_t L = q.v().rows(), dh = q.v().cols();
  if (!key_valid.empty() && static_cast<int64_t>(key_valid.size()) != L) {
    throw DimensionError("blockwise_attention_taped: key_valid must have one flag per position");
  }
  bool any_valid = key_valid.empty();
  for (uint8_t f : key_valid) any_valid |= (f != 0);
  if (!any_valid) throw DegenerateRowError("blockwise_attention_taped: every key masked");

  const T neg_inf = -std::numeric_limits<T>::infinity();
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  auto qblocks = detail::chunk_ranges(L, std::min(q_chunk, L));
  auto kblocks = detail::chunk_ranges(L, std::min(kv_chunk, L));

  std::vector<Var<T>> out_blocks;
  out_blocks.reserve(qblocks.size());
  for (const auto& qb : qblocks) {
    Var<T> q_blk = slice_rows(q, qb.start, qb.start + qb.len);
    Var<T> run_max, denom, acc;
    bool started = false;
    for (const auto& kb : kblocks) {
      // A fully masked key block contributes nothing; skip it structurally.
      if (!key_valid.empty()) {
        bool block_valid = false;
        for (int64_t j = 0; j < kb.len; ++j)
          block_valid |= (key_valid[static_cast<size_t>(kb.start + j)] != 0);
        if (!block_valid) continue;
      }
      Var<T> k_blk = slice_rows(k, kb.start, kb.start + kb.len);
      Var<T> v_blk = slice_rows(v, kb.start, kb.start + kb.len);
      Var<T> scores = scale(matmul_nt(q_blk, k_blk), inv_sqrt);
      if (!key_valid.empty()) {
        Tensor<T> mrow({1, kb.len});
        for (int64_t j = 0; j < kb.len; ++j)
          mrow[j] = key_valid[static_cast<size_t>(kb.start + j)] ? T(0) : neg_inf;
        scores = add_row(scores, constant(std::move(mrow)));
      }
      Var<T> bm = rowmax(scores);
      if (!started) {
        Var<T> p = exp(sub_col(scores, bm));
        denom = rowsum(p);
        acc = matmul(p, v_blk);
        run_max = bm;
        started = true;
      } else {
        Var<T> m_new = maximum(run_max, bm);
        Var<T> p = exp(sub_col(scores, m_new));
        Var<T> corr = exp(sub(run_max, m_new));
        denom = add(mul(denom, corr), rowsum(p));
        acc = add(mul_col(acc, corr), matmul(p, v_blk));
        run_max = m_new;
      }
    }
    out_blocks.push_back(div_col(acc, denom));
  }
  return out_blocks.size() == 1 ? out_blocks[0] : concat_rows(out_blocks);
}

// Parameters of one transformer layer: per-head projections, output
// projection, two layer norms and the block-applied feed-forward.
template <class T>
struct BptLayerParams {
  std::vector<Tensor<T>> wq, bq, wk, bk, wv, bv;  // per head: [d x dh], [dh]
  std::vector<Tensor<T>> wo;                      // per head: [dh x d]
  Tensor<T> bo;                                   // [d]
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;           // [d]
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  static BptLayerParams init(const AttentionConfig& cfg, int64_t ffn_hidden, Rng& rng) {
    BptLayerParams p;
    int64_t d = cfg.d_model, dh = cfg.head_dim();
    T g = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
      p.wq.push_back(random_uniform<T>({d, dh}, -g, g, rng));
      p.bq.push_back(Tensor<T>::zeros({dh}));
      p.wk.push_back(random_uniform<T>({d, dh}, -g, g, rng));
      p.bk.push_back(Tensor<T>::zeros({dh}));
      p.wv.push_back(random_uniform<T>({d, dh}, -g, g, rng));
      p.bv.push_back(Tensor<T>::zeros({dh}));
      p.wo.push_back(random_uniform<T>({dh, d}, -g, g, rng));
    }
    p.bo = Tensor<T>::zeros({d});
    p.ln1_g = Tensor<T>::full({d}, T(1));
    p.ln1_b = Tensor<T>::zeros({d});
    p.ln2_g = Tensor<T>::full({d}, T(1));
    p.ln2_b = Tensor<T>::zeros({d});
    p.ffn_w1 = random_uniform<T>({d, ffn_hidden}, -g, g, rng);
    p.ffn_b1 = Tensor<T>::zeros({ffn_hidden});
    p.ffn_w2 = random_uniform<T>({ffn_hidden, d}, -g, g, rng);
    p.ffn_b2 = Tensor<T>::zeros({d});
    return p;
  }

  // Stable flattening order; bpt_layer unpacks by the same walk.
  template <class F>
  void for_each(F&& f) {
    int64_t heads = static_cast<int64_t>(wq.size());
    for (int64_t h = 0; h < heads; ++h) {
      f("wq" + std::to_string(h), wq[static_cast<size_t>(h)]);
      f("bq" + std::to_string(h), bq[static_cast<size_t>(h)]);
      f("wk" + std::to_string(h), wk[static_cast<size_t>(h)]);
      f("bk" + std::to_string(h), bk[static_cast<size_t>(h)]);
      f("wv" + std::to_string(h), wv[static_cast<size_t>(h)]);
      f("bv" + std::to_string(h), bv[static_cast<size_t>(h)]);
      f("wo" + std::to_string(h), wo[static_cast<size_t>(h)]);
    }
    f("bo", bo);
    f("ln1_g", ln1_g);
    f("ln1_b", ln1_b);
    f("ln2_g", ln2_g);
    f("ln2_b", ln2_b);
    f("ffn_w1", ffn_w1);
    f("ffn_b1", ffn_b1);
    f("ffn_w2", ffn_w2);
    f("ffn_b2", ffn_b2);
  }
};

namespace detail {

// View over the flat var list [x, params...] a layer body receives.
template <class T>
struct LayerVarView {
  const std::vector<Var<T>>* vars;
  int64_t heads;
  const Var<T>& x() const { return (*vars)[0]; }
  const Var<T>& wq(int64_t h) const { return (*vars)[1 + static_cast<size_t>(7 * h + 0)]; }
  const Var<T>& bq(int64_t h) const { return (*vars)[1 + static_cast<size_t>(7 * h + 1)]; }
  const Var<T>& wk(int64_t h) const { return (*vars)[1 + static_cast<size_t>(7 * h + 2)]; }
  const Var<T>& bk(int64_t h) const { return (*vars)[1 + static_cast<size_t>(7 * h + 3)]; }
  const Var<T>& wv(int64_t h) const { return (*vars)[1 + static_cast<size_t>(7 * h + 4)]; }
  const Var<T>& bv(int64_t h) const { return (*vars)[1 + static_cast<size_t>(7 * h + 5)]; }
  const Var<T>& wo(int64_t h) const { return (*vars)[1 + static_cast<size_t>(7 * h + 6)]; }
  const Var<T>& tail(int64_t i) const {
    return (*vars)[1 + static_cast<size_t>(7 * heads + i)];
  }
  const Var<T>& bo() const { return tail(0); }
  const Var<T>& ln1_g() const { return tail(1); }
  const Var<T>& ln1_b() const { return tail(2); }
  const Var<T>& ln2_g() const { return tail(3); }
  const Var<T>& ln2_b() const { return tail(4); }
  const Var<T>& ffn_w1() const { return tail(5); }
  const Var<T>& ffn_b1() const { return tail(6); }
  const Var<T>& ffn_w2() const { return tail(7); }
  const Var<T>& ffn_b2() const { return tail(8); }
};

}  // namespace detail

inline constexpr double kLayerNormEps = 1e-5;

// One transformer layer: per query block, rotary multi-head blockwise
// attention -> residual -> norm -> feed-forward -> residual -> norm, with the
// feed-forward applied block by block so no full-sequence hidden tensor is
// ever built. With `recompute` the whole body is checkpointed: intermediates
// are dropped in forward and regenerated during backward.
template <class T>
inline Var<T> bpt_layer(Tape<T>& tape, const Var<T>& x, const std::vector<Var<T>>& layer_params,
                        const AttentionConfig& cfg, const RopeCache<T>& rope,
                        std::shared_ptr<const std::vector<int64_t>> positions,
                        const std::vector<uint8_t>& key_valid, bool recompute) {
  cfg.validate();
  int64_t heads = cfg.n_heads;
  if (static_cast<int64_t>(layer_params.size()) != 7 * heads + 9) {
    throw ContractError("bpt_layer: wrong parameter count for config");
  }
  std::vector<Var<T>> inputs;
  inputs.reserve(layer_params.size() + 1);
  inputs.push_back(x);
  for (const auto& p : layer_params) inputs.push_back(p);

  auto kv = std::make_shared<const std::vector<uint8_t>>(key_valid);
  auto body = [cfg, rope, positions, kv, heads](Tape<T>& tp,
                                                const std::vector<Var<T>>& in) -> Var<T> {
    detail::LayerVarView<T> view{&in, heads};
    const Var<T>& xin = view.x();
    int64_t L = xin.v().rows();
    const T eps = static_cast<T>(kLayerNormEps);

    Var<T> attn_sum;
    for (int64_t h = 0; h < heads; ++h) {
      Var<T> qh = rope_apply(add_row(matmul(xin, view.wq(h)), view.bq(h)), positions, rope);
      Var<T> kh = rope_apply(add_row(matmul(xin, view.wk(h)), view.bk(h)), positions, rope);
      Var<T> vh = add_row(matmul(xin, view.wv(h)), view.bv(h));
      Var<T> ah = blockwise_attention_taped(qh, kh, vh, *kv, cfg.q_chunk, cfg.kv_chunk);
      Var<T> contrib = matmul(ah, view.wo(h));
      attn_sum = (h == 0) ? contrib : add(attn_sum, contrib);
    }
    Var<T> h1 = layer_norm(add(xin, add_row(attn_sum, view.bo())), view.ln1_g(), view.ln1_b(), eps);

    auto qblocks = detail::chunk_ranges(L, std::min(cfg.q_chunk, L));
    std::vector<Var<T>> out_blocks;
    out_blocks.reserve(qblocks.size());
    for (const auto& qb : qblocks) {
      Var<T> blk = slice_rows(h1, qb.start, qb.start + qb.len);
      Var<T> hidden = gelu(add_row(matmul(blk, view.ffn_w1()), view.ffn_b1()));
      Var<T> f = add_row(matmul(hidden, view.ffn_w2()), view.ffn_b2());
      out_blocks.push_back(layer_norm(add(blk, f), view.ln2_g(), view.ln2_b(), eps));
    }
    return out_blocks.size() == 1 ? out_blocks[0] : concat_rows(out_blocks);
  };

  return checkpoint<T>(tape, inputs, body, recompute);
}

}  // namespace blockrank
