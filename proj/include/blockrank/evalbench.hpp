#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "blockrank/model.hpp"
#include "blockrank/util.hpp"

namespace blockrank {

// ---------------------------------------------------------------------------
// Relevance judgments
// ---------------------------------------------------------------------------

struct Qrels {
  // query_id -> chunk_id -> grade (>= 0)
  std::map<std::string, std::map<std::string, int64_t>> rows;

  const std::map<std::string, int64_t>& row(const std::string& query_id) const {
    auto it = rows.find(query_id);
    if (it == rows.end()) throw ValidationError("qrels: no judgments for query '" + query_id + "'");
    return it->second;
  }
};

inline Qrels read_qrels_tsv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingInputError("cannot open qrels '" + path + "'");
  Qrels q;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    size_t t1 = line.find('\t');
    size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw ParseError("qrels: expected three tab-separated fields", lineno);
    std::string qid = line.substr(0, t1);
    std::string cid = line.substr(t1 + 1, t2 - t1 - 1);
    int64_t grade = 0;
    try {
      grade = std::stoll(line.substr(t2 + 1));
    } catch (...) {
      throw ParseError("qrels: grade is not an integer", lineno);
    }
    if (grade < 0) throw ParseError("qrels: grade must be nonnegative", lineno);
    q.rows[qid][cid] = grade;
  }
  return q;
}

inline void write_qrels_tsv(const Qrels& q, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingInputError("cannot open '" + path + "' for writing");
  for (const auto& [qid, row] : q.rows) {
    for (const auto& [cid, grade] : row) f << qid << '\t' << cid << '\t' << grade << '\n';
  }
}

// ---------------------------------------------------------------------------
// Rankings
// ---------------------------------------------------------------------------

struct RunRanking {
  // query_id -> (chunk_id, score) descending by score, ties ascending by id
  std::map<std::string, std::vector<std::pair<std::string, double>>> rankings;
};

// Orders candidates by score descending, chunk id ascending on ties;
// duplicate candidate ids are rejected.
inline std::vector<std::pair<std::string, double>> rank_candidates(
    std::vector<std::pair<std::string, double>> scored) {
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (size_t i = 1; i < scored.size(); ++i) {
    if (scored[i].first == scored[i - 1].first) {
      throw ValidationError("ranking: duplicate chunk id '" + scored[i].first + "'");
    }
  }
  return scored;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace detail {

inline void require_positive_row(const std::map<std::string, int64_t>& row) {
  for (const auto& [id, grade] : row) {
    if (grade > 0) return;
  }
  throw UndefinedMetricError("metric undefined: qrels row has no positive grade");
}

}  // namespace detail

// DCG@k with gain 2^rel - 1 and log2(i+1) discount, normalized by the ideal
// ordering of the row's grades.
inline double ndcg_at_k(const std::vector<std::string>& ranking,
                        const std::map<std::string, int64_t>& qrel_row, int64_t k) {
  if (k < 1) throw ContractError("ndcg_at_k: k must be >= 1");
  detail::require_positive_row(qrel_row);
  double dcg = 0;
  for (int64_t i = 0; i < std::min<int64_t>(k, static_cast<int64_t>(ranking.size())); ++i) {
    auto it = qrel_row.find(ranking[static_cast<size_t>(i)]);
    int64_t rel = it == qrel_row.end() ? 0 : it->second;
    if (rel > 0) {
      dcg += (std::pow(2.0, static_cast<double>(rel)) - 1.0) /
             std::log2(static_cast<double>(i) + 2.0);
    }
  }
  std::vector<int64_t> grades;
  for (const auto& [id, g] : qrel_row) {
    if (g > 0) grades.push_back(g);
  }
  std::sort(grades.rbegin(), grades.rend());
  double idcg = 0;
  for (int64_t i = 0; i < std::min<int64_t>(k, static_cast<int64_t>(grades.size())); ++i) {
    idcg += (std::pow(2.0, static_cast<double>(grades[static_cast<size_t>(i)])) - 1.0) /
            std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg / idcg;
}

// Reciprocal rank of the first relevant item within the top k, else 0.
inline double mrr_at_k(const std::vector<std::string>& ranking,
                       const std::map<std::string, int64_t>& qrel_row, int64_t k) {
  if (k < 1) throw ContractError("mrr_at_k: k must be >= 1");
  detail::require_positive_row(qrel_row);
  for (int64_t i = 0; i < std::min<int64_t>(k, static_cast<int64_t>(ranking.size())); ++i) {
    auto it = qrel_row.find(ranking[static_cast<size_t>(i)]);
    if (it != qrel_row.end() && it->second > 0) {
      return 1.0 / (static_cast<double>(i) + 1.0);
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

struct EvalCase {
  std::string query_id;
  std::string query;
  std::vector<std::string> candidate_ids;
};

inline void write_candidates_jsonl(const std::vector<EvalCase>& cases, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingInputError("cannot open '" + path + "' for writing");
  for (const auto& c : cases) {
    nlohmann::ordered_json j;
    j["query_id"] = c.query_id;
    j["query"] = c.query;
    j["candidates"] = c.candidate_ids;
    f << j.dump() << '\n';
  }
}

inline std::vector<EvalCase> read_candidates_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingInputError("cannot open candidates '" + path + "'");
  std::vector<EvalCase> cases;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw ParseError("candidates: malformed JSON", lineno);
    for (const char* key : {"query_id", "query", "candidates"}) {
      if (!j.contains(key)) {
        throw ValidationError("candidates: missing key '" + std::string(key) + "' (line " +
                              std::to_string(lineno) + ")");
      }
    }
    cases.push_back({j["query_id"].get<std::string>(), j["query"].get<std::string>(),
                     j["candidates"].get<std::vector<std::string>>()});
  }
  return cases;
}

// Plain id -> text store used by the harness to resolve candidates.
inline void write_text_store(const std::map<std::string, std::string>& store,
                             const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingInputError("cannot open '" + path + "' for writing");
  for (const auto& [id, text] : store) {
    nlohmann::ordered_json j;
    j["id"] = id;
    j["text"] = text;
    f << j.dump() << '\n';
  }
}

inline std::map<std::string, std::string> read_text_store(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingInputError("cannot open text store '" + path + "'");
  std::map<std::string, std::string> store;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("id") || !j.contains("text")) {
      throw ParseError("text store: malformed line", lineno);
    }
    store[j["id"].get<std::string>()] = j["text"].get<std::string>();
  }
  return store;
}

// Scores one (case, candidate) pair. Seed-specific scorers come from the
// factory below, so evaluation itself stays deterministic.
using Scorer = std::function<double(const EvalCase&, const std::string& chunk_id)>;
using ScorerFactory = std::function<Scorer(uint64_t seed)>;

struct MetricReport {
  std::string model_name;
  std::vector<int64_t> ks;
  std::vector<uint64_t> seeds;
  // metric -> k -> one value per seed
  std::map<std::string, std::map<int64_t, std::vector<double>>> per_seed;
  std::map<std::string, std::map<int64_t, double>> mean;
  int64_t query_count = 0;
};

inline MetricReport evaluate(const std::vector<EvalCase>& cases, const Qrels& qrels,
                             const std::vector<int64_t>& ks, const std::vector<uint64_t>& seeds,
                             const ScorerFactory& scorer_for_seed, const std::string& model_name,
                             int threads = 1) {
  if (cases.empty()) throw ValidationError("evaluate: no queries");
  if (ks.empty() || seeds.empty()) throw ContractError("evaluate: ks and seeds must be nonempty");
  for (const auto& c : cases) {
    if (c.candidate_ids.empty()) {
      throw ValidationError("evaluate: query '" + c.query_id + "' has no candidates");
    }
    qrels.row(c.query_id);  // throws if missing
  }

  MetricReport report;
  report.model_name = model_name;
  report.ks = ks;
  report.seeds = seeds;
  report.query_count = static_cast<int64_t>(cases.size());

  for (uint64_t seed : seeds) {
    Scorer scorer = scorer_for_seed(seed);
    // Per-query metric values land in slots; aggregation is a sequential sum,
    // so the result is independent of the thread count.
    std::vector<std::map<std::string, std::map<int64_t, double>>> slots(cases.size());
    parallel_for(cases.size(), threads, [&](size_t i) {
      const EvalCase& c = cases[i];
      std::vector<std::pair<std::string, double>> scored;
      scored.reserve(c.candidate_ids.size());
      for (const auto& cid : c.candidate_ids) scored.emplace_back(cid, scorer(c, cid));
      auto ranked = rank_candidates(std::move(scored));
      std::vector<std::string> ids;
      ids.reserve(ranked.size());
      for (auto& [cid, s] : ranked) ids.push_back(cid);
      const auto& row = qrels.row(c.query_id);
      for (int64_t k : ks) {
        slots[i]["ndcg"][k] = ndcg_at_k(ids, row, k);
        slots[i]["mrr"][k] = mrr_at_k(ids, row, k);
      }
    });
    for (const char* metric : {"ndcg", "mrr"}) {
      for (int64_t k : ks) {
        double sum = 0;
        for (const auto& slot : slots) sum += slot.at(metric).at(k);
        report.per_seed[metric][k].push_back(sum / static_cast<double>(cases.size()));
      }
    }
  }
  for (const auto& [metric, by_k] : report.per_seed) {
    for (const auto& [k, values] : by_k) {
      double sum = 0;
      for (double v : values) sum += v;
      report.mean[metric][k] = sum / static_cast<double>(values.size());
    }
  }
  return report;
}

// Aligned text table, one row per model, columns metric@k.
inline std::string metrics_table(const std::vector<MetricReport>& reports) {
  if (reports.empty()) return "";
  std::ostringstream os;
  os << std::left << std::setw(28) << "Model";
  for (const char* metric : {"NDCG", "MRR"}) {
    for (int64_t k : reports[0].ks) {
      os << std::right << std::setw(10) << (std::string(metric) + "@" + std::to_string(k));
    }
  }
  os << '\n';
  for (const auto& r : reports) {
    os << std::left << std::setw(28) << r.model_name;
    for (const char* metric : {"ndcg", "mrr"}) {
      for (int64_t k : r.ks) {
        os << std::right << std::setw(10) << std::fixed << std::setprecision(4)
           << r.mean.at(metric).at(k);
      }
    }
    os << '\n';
  }
  return os.str();
}

inline nlohmann::ordered_json metrics_json(const std::vector<MetricReport>& reports) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["model"] = r.model_name;
    j["query_count"] = r.query_count;
    nlohmann::ordered_json seeds = nlohmann::ordered_json::array();
    for (uint64_t s : r.seeds) seeds.push_back(s);
    j["seeds"] = seeds;
    for (const char* metric : {"ndcg", "mrr"}) {
      for (int64_t k : r.ks) {
        std::string key = std::string(metric) + "@" + std::to_string(k);
        j["mean"][key] = r.mean.at(metric).at(k);
        j["per_seed"][key] = r.per_seed.at(metric).at(k);
      }
    }
    out.push_back(j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference bench
// ---------------------------------------------------------------------------

struct BenchReport {
  std::string hardware;
  int64_t batch = 0;
  double latency_ms = 0;   // median per-query wall time
  int64_t peak_bytes = 0;  // tensor allocation high-water mark
  double qps = 0;

  static std::string csv_header() { return "Hardware,Batch,LatencyMs,PeakBytes,QPS"; }

  std::string csv_row() const {
    std::ostringstream os;
    os << hardware << ',' << batch << ',' << std::fixed << std::setprecision(4) << latency_ms
       << ',' << peak_bytes << ',' << std::setprecision(2) << qps;
    return os.str();
  }

  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << "Hardware" << std::right << std::setw(8) << "Batch"
       << std::setw(14) << "LatencyMs" << std::setw(16) << "PeakBytes" << std::setw(12) << "QPS"
       << '\n';
    os << std::left << std::setw(16) << hardware << std::right << std::setw(8) << batch
       << std::setw(14) << std::fixed << std::setprecision(4) << latency_ms << std::setw(16)
       << peak_bytes << std::setw(12) << std::setprecision(2) << qps << '\n';
    return os.str();
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["hardware"] = hardware;
    j["batch"] = batch;
    j["latency_ms"] = latency_ms;
    j["peak_bytes"] = peak_bytes;
    j["qps"] = qps;
    return j;
  }
};

// Batched scoring bench: one warm-up batch excluded, median per-query latency
// over the timed batches, allocator high-water mark for peak memory.
template <class T>
inline BenchReport bench(CrossEncoder<T>& model, int64_t batch_size, int64_t n_queries,
                         const std::string& hardware_label, uint64_t seed = 0,
                         int64_t query_len = 8, int64_t doc_len = 48) {
  if (batch_size < 1) throw ContractError("bench: batch_size must be positive");
  if (n_queries < 100) throw ContractError("bench: need at least 100 queries for stable numbers");

  Rng rng(seed);
  auto draw = [&](int64_t len) {
    std::vector<int32_t> ids(static_cast<size_t>(len));
    int32_t lo = 4, hi = std::max<int32_t>(5, model.vocab.size());
    for (auto& id : ids) id = lo + static_cast<int32_t>(rng.index(static_cast<size_t>(hi - lo)));
    return ids;
  };
  std::vector<std::pair<std::vector<int32_t>, std::vector<int32_t>>> work;
  work.reserve(static_cast<size_t>(n_queries + batch_size));
  for (int64_t i = 0; i < n_queries + batch_size; ++i) {
    work.emplace_back(draw(query_len), draw(doc_len));
  }

  // Warm-up batch, excluded from every statistic.
  for (int64_t i = 0; i < batch_size; ++i) {
    volatile T sink = score(model, work[static_cast<size_t>(i)].first,
                            work[static_cast<size_t>(i)].second);
    (void)sink;
  }

  MemMeter::reset_peak();

  using Clock = std::chrono::steady_clock;
  std::vector<double> per_query_ms;
  double total_seconds = 0;
  int64_t done = 0;
  auto bench_begin = Clock::now();
  while (done < n_queries) {
    int64_t take = std::min(batch_size, n_queries - done);
    auto t0 = Clock::now();
    for (int64_t i = 0; i < take; ++i) {
      const auto& [q, d] = work[static_cast<size_t>(batch_size + done + i)];
      volatile T sink = score(model, q, d);
      (void)sink;
    }
    auto t1 = Clock::now();
    double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    per_query_ms.push_back(ms / static_cast<double>(take));
    done += take;
  }
  total_seconds = std::chrono::duration<double>(Clock::now() - bench_begin).count();

  bool all_zero = true;
  for (double v : per_query_ms) all_zero &= (v == 0.0);
  if (all_zero) throw MeasurementError("bench: timer resolution insufficient, all samples zero");

  std::sort(per_query_ms.begin(), per_query_ms.end());
  double median = per_query_ms[per_query_ms.size() / 2];

  BenchReport r;
  r.hardware = hardware_label;
  r.batch = batch_size;
  r.latency_ms = median;
  r.peak_bytes = MemMeter::peak().load();
  r.qps = static_cast<double>(n_queries) / total_seconds;
  return r;
}

}  // namespace blockrank
