#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "blockrank/mining.hpp"
#include "blockrank/model.hpp"

namespace blockrank {

struct TrainConfig {
  double learning_rate = 5e-5;
  int64_t epochs = 10;
  int64_t batch_size = 512;  // micro-batch size; one update spans grad_accum_steps of these
  int64_t grad_accum_steps = 2;
  std::string scheduler = "cosine";
  double margin = 1.0;
  int64_t memory_bank_size = 512;
  double memory_bank_weight = 0.5;
  uint64_t seed = 0;
  bool recompute_activations = true;

  void validate() const {
    if (learning_rate <= 0) throw ContractError("train config: learning_rate must be positive");
    if (epochs <= 0) throw ContractError("train config: epochs must be positive");
    if (batch_size <= 0) throw ContractError("train config: batch_size must be positive");
    if (grad_accum_steps < 1) throw ContractError("train config: grad_accum_steps must be >= 1");
    if (margin < 0) throw ContractError("train config: margin must be nonnegative");
    if (scheduler != "cosine") throw ContractError("train config: unknown scheduler");
    if (memory_bank_size <= 0) throw ContractError("train config: memory_bank_size must be positive");
    if (memory_bank_weight < 0 || memory_bank_weight > 1) {
      throw ContractError("train config: memory_bank_weight must be in [0, 1]");
    }
  }

  // Published hyperparameter block.
  static TrainConfig paper() {
    TrainConfig c;
    c.learning_rate = 5e-5;
    c.epochs = 10;
    c.batch_size = 512;
    c.grad_accum_steps = 2;
    c.scheduler = "cosine";
    c.memory_bank_size = 512;
    c.recompute_activations = true;
    return c;
  }

  // Desk-scale run: plain SGD from scratch wants a far larger step than the
  // fine-tuning rate, and the bank term stays off here because its
  // cross-entropy has a floor of ln(1 + (|queue|-1)/e) that would cap how far
  // the total loss can fall.
  static TrainConfig toy() {
    TrainConfig c;
    c.learning_rate = 0.5;
    c.epochs = 16;
    c.batch_size = 8;
    c.grad_accum_steps = 1;
    c.scheduler = "cosine";
    c.margin = 1.0;
    c.memory_bank_size = 64;
    c.memory_bank_weight = 0.0;
    c.recompute_activations = false;
    return c;
  }
};

// Hinge ranking loss on a single (positive, negative) score pair.
template <class T>
inline T triplet_loss(T s_pos, T s_neg, T margin) {
  if (margin < T(0)) throw ContractError("triplet_loss: margin must be nonnegative");
  return std::max(T(0), margin - s_pos + s_neg);
}

// Bounded queue of detached embeddings, newest first. Insertion prepends a
// whole batch; overflow truncates from the tail.
template <class T>
struct MemoryBank {
  int64_t capacity = 512;
  std::vector<Tensor<T>> queue;

  explicit MemoryBank(int64_t cap = 512) : capacity(cap) {
    if (cap <= 0) throw ContractError("memory bank: capacity must be positive");
  }

  int64_t size() const { return static_cast<int64_t>(queue.size()); }

  void push_front_batch(const std::vector<Tensor<T>>& batch) {
    queue.insert(queue.begin(), batch.begin(), batch.end());
    if (static_cast<int64_t>(queue.size()) > capacity) {
      queue.resize(static_cast<size_t>(capacity));
    }
  }
};

namespace detail {

template <class T>
inline void check_nonzero_norm(const Tensor<T>& v, const char* what) {
  T n = 0;
  for (int64_t i = 0; i < v.numel(); ++i) n += v[i] * v[i];
  if (n == T(0)) throw DegenerateVectorError(std::string(what) + ": zero-norm embedding");
}

}  // namespace detail

// One contrastive step over the queue: prepend the detached positives, trim
// to capacity, score every anchor against the whole queue with cosine
// similarity and take cross-entropy with anchor i targeting queue slot i
// (its own positive after prepending). Returns the mean loss and mutates the
// bank.
template <class T>
inline T memory_bank_step(const std::vector<Tensor<T>>& anchors,
                          const std::vector<Tensor<T>>& positives, MemoryBank<T>& bank) {
  int64_t batch = static_cast<int64_t>(anchors.size());
  if (batch == 0) throw ContractError("memory_bank_step: empty batch");
  if (batch != static_cast<int64_t>(positives.size())) {
    throw ContractError("memory_bank_step: anchors and positives must align by index");
  }
  if (batch > bank.capacity) {
    throw ContractError("memory_bank_step: batch exceeds bank capacity");
  }
  for (const auto& a : anchors) detail::check_nonzero_norm(a, "memory_bank_step anchor");
  for (const auto& p : positives) detail::check_nonzero_norm(p, "memory_bank_step positive");

  bank.push_front_batch(positives);
  int64_t q = bank.size();

  T total = 0;
  for (int64_t i = 0; i < batch; ++i) {
    std::vector<T> row(static_cast<size_t>(q));
    for (int64_t j = 0; j < q; ++j) {
      row[static_cast<size_t>(j)] =
          cosine_similarity(anchors[static_cast<size_t>(i)], bank.queue[static_cast<size_t>(j)]);
    }
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    T denom = 0;
    for (T v : row) denom += std::exp(v - mx);
    T lse = mx + std::log(denom);
    total += lse - row[static_cast<size_t>(i)];
  }
  T loss = total / static_cast<T>(batch);
  if (!std::isfinite(loss)) throw NumericError("memory_bank_step produced a non-finite loss");
  return loss;
}

// Cosine schedule without warmup: peak * 0.5 * (1 + cos(pi * step/total)).
inline double cosine_lr(int64_t step, int64_t total_steps, double peak) {
  if (total_steps < 1) throw ContractError("cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) throw ContractError("cosine_lr: step out of range");
  return peak * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                      static_cast<double>(total_steps)));
}

struct TraceRow {
  int64_t step = 0;
  double lr = 0;
  double triplet_loss = 0;
  double bank_loss = 0;
  double total = 0;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  int64_t macro_steps = 0;
  std::vector<double> epoch_mean_loss;
};

inline void write_loss_trace(const std::vector<TraceRow>& trace, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingInputError("cannot open '" + path + "' for writing");
  f << "step,lr,triplet_loss,bank_loss,total\n";
  f.setf(std::ios::scientific);
  f.precision(17);
  for (const auto& r : trace) {
    f << r.step << ',' << r.lr << ',' << r.triplet_loss << ',' << r.bank_loss << ',' << r.total
      << '\n';
  }
}

namespace detail {

// Taped mirror of memory_bank_step's loss over an already-updated queue;
// gradient flows into the anchors only.
template <class T>
inline Var<T> bank_loss_taped(const std::vector<Var<T>>& anchors, const MemoryBank<T>& bank) {
  int64_t batch = static_cast<int64_t>(anchors.size());
  int64_t q = bank.size();
  int64_t d = anchors[0].v().numel();

  Tensor<T> queue_mat({q, d});
  Tensor<T> inv_qnorm({1, q});
  for (int64_t j = 0; j < q; ++j) {
    const Tensor<T>& e = bank.queue[static_cast<size_t>(j)];
    T n = 0;
    for (int64_t t = 0; t < d; ++t) {
      queue_mat.at(j, t) = e[t];
      n += e[t] * e[t];
    }
    if (n == T(0)) throw DegenerateVectorError("bank loss: zero-norm queue entry");
    inv_qnorm[j] = T(1) / std::sqrt(n);
  }

  Var<T> a_mat = concat_rows(anchors);                         // [B x d]
  Var<T> raw = matmul_nt(a_mat, constant(std::move(queue_mat)));  // [B x q]
  Var<T> anorm = sqrt(rowsum(mul(a_mat, a_mat)));              // [B x 1]
  Var<T> cosines = mul_row(div_col(raw, anorm), constant(std::move(inv_qnorm)));

  Var<T> mx = rowmax(cosines);
  Var<T> lse = add(mx, log(rowsum(exp(sub_col(cosines, mx)))));  // [B x 1]
  Var<T> total;
  for (int64_t i = 0; i < batch; ++i) {
    Var<T> li = sub(pick(lse, i, 0), pick(cosines, i, i));
    total = (i == 0) ? li : add(total, li);
  }
  return scale(total, T(1) / static_cast<T>(batch));
}

}  // namespace detail

// Full training loop: per macro-step, gradients accumulate over
// grad_accum_steps micro-batches and one scheduled SGD update is applied.
// total loss = (1-w) * triplet + w * bank. Deterministic under the seed.
template <class T>
inline TrainResult train(CrossEncoder<T>& model, const std::vector<TripletRecord>& records,
                         const TrainConfig& cfg, TapeMeter* meter = nullptr) {
  cfg.validate();
  if (records.empty()) throw ContractError("train: empty triplet stream");
  for (size_t i = 0; i < records.size(); ++i) {
    try {
      records[i].validate();
    } catch (const ValidationError& e) {
      throw ValidationError("train: record " + std::to_string(i) + ": " + e.what());
    }
    if (records[i].neg.empty()) {
      throw ValidationError("train: record " + std::to_string(i) + " has no negatives");
    }
  }
  const double w = cfg.memory_bank_weight;
  if (w > 0 && cfg.batch_size > cfg.memory_bank_size) {
    throw ContractError("train: batch_size must not exceed memory_bank_size when the bank is on");
  }

  // Tokenized views, computed once.
  struct Tokenized {
    std::vector<int32_t> query;
    std::vector<std::vector<int32_t>> pos, neg;
  };
  std::vector<Tokenized> toks(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    toks[i].query = tokenize(records[i].query, model.vocab);
    for (const auto& p : records[i].pos) toks[i].pos.push_back(tokenize(p, model.vocab));
    for (const auto& n : records[i].neg) toks[i].neg.push_back(tokenize(n, model.vocab));
  }

  const int64_t n = static_cast<int64_t>(records.size());
  const int64_t macro_span = cfg.batch_size * cfg.grad_accum_steps;
  const int64_t steps_per_epoch = (n + macro_span - 1) / macro_span;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;

  std::vector<Tensor<T>*> params;
  model.for_each_param([&](const std::string&, Tensor<T>& t) { params.push_back(&t); });
  std::vector<Tensor<T>> accum;
  accum.reserve(params.size());
  for (auto* p : params) accum.push_back(Tensor<T>::zeros(p->shape));

  MemoryBank<T> bank(cfg.memory_bank_size);
  Rng order_rng(cfg.seed);
  std::vector<int64_t> indices(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) indices[static_cast<size_t>(i)] = i;

  TrainResult result;
  int64_t macro_step = 0;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(indices);
    double epoch_loss_sum = 0;
    int64_t epoch_rows = 0;

    for (int64_t start = 0; start < n; start += macro_span, ++macro_step) {
      double lr = cosine_lr(macro_step, total_steps, cfg.learning_rate);
      for (auto& a : accum) std::fill(a.data.begin(), a.data.end(), T(0));

      double sum_triplet = 0, sum_bank = 0, sum_total = 0;
      int64_t micro_count = 0;

      for (int64_t micro = 0; micro < cfg.grad_accum_steps; ++micro) {
        int64_t lo = start + micro * cfg.batch_size;
        int64_t hi = std::min(lo + cfg.batch_size, n);
        if (lo >= hi) break;
        int64_t bsize = hi - lo;

        Tape<T> tape(true, meter);
        ModelVars<T> mv = ModelVars<T>::bind(tape, model);

        Var<T> triplet_sum;
        std::vector<Var<T>> anchors;
        std::vector<Tensor<T>> positives_detached;

        for (int64_t r = lo; r < hi; ++r) {
          const Tokenized& tk = toks[static_cast<size_t>(indices[static_cast<size_t>(r)])];
          Var<T> pair_sum;
          int64_t pairs = 0;
          std::vector<Var<T>> pos_scores;
          for (const auto& p : tk.pos) {
            pos_scores.push_back(
                score_taped(tape, model, mv, tk.query, p, cfg.recompute_activations));
          }
          for (const auto& ng : tk.neg) {
            Var<T> s_neg = score_taped(tape, model, mv, tk.query, ng, cfg.recompute_activations);
            for (const auto& s_pos : pos_scores) {
              Var<T> hinge =
                  relu(add_const(sub(s_neg, s_pos), static_cast<T>(cfg.margin)));
              pair_sum = (pairs == 0) ? hinge : add(pair_sum, hinge);
              ++pairs;
            }
          }
          Var<T> rec_loss = scale(pair_sum, T(1) / static_cast<T>(pairs));
          triplet_sum = (r == lo) ? rec_loss : add(triplet_sum, rec_loss);

          if (w > 0) {
            Var<T> anchor =
                embed_taped(tape, model, mv, tk.query, cfg.recompute_activations);
            Var<T> positive =
                embed_taped(tape, model, mv, tk.pos[0], cfg.recompute_activations);
            detail::check_nonzero_norm(anchor.v(), "train anchor");
            detail::check_nonzero_norm(positive.v(), "train positive");
            anchors.push_back(anchor);
            Tensor<T> snapshot({positive.v().numel()});
            for (int64_t t = 0; t < positive.v().numel(); ++t) snapshot[t] = positive.v()[t];
            positives_detached.push_back(std::move(snapshot));
          }
        }

        Var<T> micro_triplet = scale(triplet_sum, T(1) / static_cast<T>(bsize));
        Var<T> micro_total;
        double bank_loss_value = 0;
        if (w > 0) {
          bank.push_front_batch(positives_detached);
          Var<T> micro_bank = detail::bank_loss_taped(anchors, bank);
          bank_loss_value = static_cast<double>(micro_bank.v()[0]);
          micro_total = add(scale(micro_triplet, static_cast<T>(1.0 - w)),
                            scale(micro_bank, static_cast<T>(w)));
        } else {
          micro_total = micro_triplet;
        }

        double triplet_value = static_cast<double>(micro_triplet.v()[0]);
        double total_value = static_cast<double>(micro_total.v()[0]);
        if (!std::isfinite(total_value)) {
          std::string ids;
          for (int64_t r = lo; r < hi; ++r) {
            if (!ids.empty()) ids += ',';
            ids += std::to_string(indices[static_cast<size_t>(r)]);
          }
          throw TrainingAbort("train: non-finite loss at macro step " +
                              std::to_string(macro_step) + " (records " + ids + ")");
        }

        tape.backward(micro_total);
        // Gradients are read through the ModelVars in bind order, which
        // matches for_each_param / accum order.
        {
          size_t idx = 0;
          auto take = [&](const Var<T>& v) {
            if (tape.has_grad(v.id)) {
              const Tensor<T>& g = tape.grad_of(v.id);
              Tensor<T>& a = accum[idx];
              for (int64_t t = 0; t < g.numel(); ++t) a[t] += g[t];
            }
            ++idx;
          };
          take(mv.embedding);
          for (const auto& lv : mv.layer_vars) {
            for (const auto& v : lv) take(v);
          }
          for (size_t i = 0; i < mv.head_w.size(); ++i) {
            take(mv.head_w[i]);
            take(mv.head_b[i]);
          }
        }

        sum_triplet += triplet_value;
        sum_bank += bank_loss_value;
        sum_total += total_value;
        ++micro_count;
      }

      T step_scale = static_cast<T>(lr / static_cast<double>(micro_count));
      for (size_t p = 0; p < params.size(); ++p) {
        Tensor<T>& theta = *params[p];
        const Tensor<T>& g = accum[p];
        for (int64_t t = 0; t < theta.numel(); ++t) theta[t] -= step_scale * g[t];
      }

      TraceRow row;
      row.step = macro_step;
      row.lr = lr;
      row.triplet_loss = sum_triplet / static_cast<double>(micro_count);
      row.bank_loss = sum_bank / static_cast<double>(micro_count);
      row.total = sum_total / static_cast<double>(micro_count);
      result.trace.push_back(row);
      epoch_loss_sum += row.total;
      ++epoch_rows;
    }
    result.epoch_mean_loss.push_back(epoch_loss_sum / static_cast<double>(epoch_rows));
  }
  result.macro_steps = macro_step;
  return result;
}

}  // namespace blockrank
