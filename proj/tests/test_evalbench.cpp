#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "blockrank/evalbench.hpp"

using namespace blockrank;

namespace {

std::map<std::string, int64_t> binary_row(std::initializer_list<std::string> relevant) {
  std::map<std::string, int64_t> row;
  for (const auto& id : relevant) row[id] = 1;
  return row;
}

}  // namespace

TEST_CASE("ndcg of an ideal ordering is exactly one") {
  auto row = binary_row({"a", "b"});
  CHECK(ndcg_at_k({"a", "b", "c"}, row, 3) == Catch::Approx(1.0).margin(1e-15));

  std::map<std::string, int64_t> graded = {{"a", 3}, {"b", 1}, {"c", 0}};
  CHECK(ndcg_at_k({"a", "b", "c"}, graded, 3) == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("ndcg hand-computed fixture [1,0,1]") {
  // DCG = 1 + 0 + 1/2 = 1.5; IDCG = 1 + 1/log2(3) = 1.63092975...;
  // NDCG = 0.91972078...
  auto row = binary_row({"a", "c"});
  double got = ndcg_at_k({"a", "b", "c"}, row, 3);
  double idcg = 1.0 + 1.0 / std::log2(3.0);
  CHECK(got == Catch::Approx(1.5 / idcg).margin(1e-12));
  CHECK(got == Catch::Approx(0.9197207891481876).margin(1e-9));
}

TEST_CASE("ndcg is zero when the only relevant doc sits past the cutoff") {
  auto row = binary_row({"d"});
  CHECK(ndcg_at_k({"a", "b", "c", "d"}, row, 3) == 0.0);
}

TEST_CASE("metrics reject all-zero qrels rows and bad k") {
  std::map<std::string, int64_t> zero = {{"a", 0}};
  CHECK_THROWS_AS(ndcg_at_k({"a"}, zero, 3), UndefinedMetricError);
  CHECK_THROWS_AS(mrr_at_k({"a"}, zero, 3), UndefinedMetricError);
  auto row = binary_row({"a"});
  CHECK_THROWS_AS(ndcg_at_k({"a"}, row, 0), ContractError);
}

TEST_CASE("mrr basic and cutoff boundary") {
  auto row = binary_row({"x"});
  CHECK(mrr_at_k({"x", "a", "b"}, row, 3) == 1.0);
  CHECK(mrr_at_k({"a", "x", "b"}, row, 3) == 0.5);
  CHECK(mrr_at_k({"a", "b", "x"}, row, 3) == Catch::Approx(1.0 / 3.0).margin(1e-15));
  CHECK(mrr_at_k({"a", "b", "x"}, row, 2) == 0.0);
}

TEST_CASE("metrics are invariant under monotone score transforms") {
  Rng rng(50);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<std::pair<std::string, double>> scored;
    std::map<std::string, int64_t> row;
    for (int i = 0; i < 8; ++i) {
      std::string id = "c" + std::to_string(i);
      scored.emplace_back(id, rng.uniform(-2, 2));
      if (rng.uniform() < 0.4) row[id] = 1 + static_cast<int64_t>(rng.index(3));
    }
    if (row.empty()) row["c0"] = 1;
    auto transformed = scored;
    for (auto& [id, s] : transformed) s = 2.0 * s + 1.0;

    auto ids_of = [](std::vector<std::pair<std::string, double>> v) {
      auto ranked = rank_candidates(std::move(v));
      std::vector<std::string> ids;
      for (auto& [id, s] : ranked) ids.push_back(id);
      return ids;
    };
    auto a = ids_of(scored);
    auto b = ids_of(transformed);
    for (int64_t k : {1, 3, 5, 8}) {
      CHECK(ndcg_at_k(a, row, k) == ndcg_at_k(b, row, k));
      CHECK(mrr_at_k(a, row, k) == mrr_at_k(b, row, k));
    }
  }
}

TEST_CASE("mrr is non-decreasing in k; both metrics stay in [0,1]") {
  // NDCG with a top-k-truncated ideal (the form that makes an ideal ordering
  // score exactly 1.0 at every k) can drop when k grows past a lone
  // early hit, so monotonicity is asserted for MRR only.
  Rng rng(51);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<std::string> ranking;
    std::map<std::string, int64_t> row;
    for (int i = 0; i < 10; ++i) {
      std::string id = "d" + std::to_string(i);
      ranking.push_back(id);
      if (rng.uniform() < 0.3) row[id] = 1;
    }
    if (row.empty()) row["d7"] = 1;
    rng.shuffle(ranking);
    double prev_mrr = 0;
    for (int64_t k = 1; k <= 10; ++k) {
      double n = ndcg_at_k(ranking, row, k);
      double m = mrr_at_k(ranking, row, k);
      CHECK(m >= prev_mrr - 1e-15);
      CHECK(n >= 0.0);
      CHECK(n <= 1.0 + 1e-12);
      CHECK(m >= 0.0);
      CHECK(m <= 1.0);
      prev_mrr = m;
    }
  }
}

namespace {

std::vector<EvalCase> fixture_cases() {
  return {
      {"q1", "câu hỏi một", {"c1", "c2", "c3"}},
      {"q2", "câu hỏi hai", {"c2", "c4", "c5", "c6"}},
      {"q3", "câu hỏi ba", {"c7", "c8", "c9"}},
  };
}

Qrels fixture_qrels() {
  Qrels q;
  q.rows["q1"] = {{"c2", 1}};
  q.rows["q2"] = {{"c5", 2}};
  q.rows["q3"] = {{"c7", 1}};
  return q;
}

}  // namespace

TEST_CASE("oracle scorer reaches 1.0 on every metric at every k") {
  auto cases = fixture_cases();
  auto qrels = fixture_qrels();
  ScorerFactory oracle = [&](uint64_t) {
    return [&](const EvalCase& c, const std::string& cid) {
      const auto& row = qrels.row(c.query_id);
      auto it = row.find(cid);
      return it == row.end() ? 0.0 : static_cast<double>(it->second);
    };
  };
  auto report = evaluate(cases, qrels, {3, 5, 10}, {1, 2, 3}, oracle, "oracle");
  for (const char* metric : {"ndcg", "mrr"}) {
    for (int64_t k : {3, 5, 10}) {
      CHECK(report.mean.at(metric).at(k) == Catch::Approx(1.0).margin(1e-15));
    }
  }
  CHECK(report.query_count == 3);
}

TEST_CASE("constant scorer falls back to the chunk-id baseline") {
  // All scores equal: ranking is id order. Hand-computed:
  // q1: relevant c2 at rank 2 -> ndcg@3 = 1/log2(3), mrr@3 = 1/2
  // q2: relevant c5 at rank 3 -> ndcg@3 = 1/2, mrr@3 = 1/3
  // q3: relevant c7 at rank 1 -> both 1.
  auto cases = fixture_cases();
  auto qrels = fixture_qrels();
  ScorerFactory constant = [](uint64_t) {
    return [](const EvalCase&, const std::string&) { return 0.25; };
  };
  auto report = evaluate(cases, qrels, {3}, {7}, constant, "constant");
  double want_ndcg = (1.0 / std::log2(3.0) + 0.5 + 1.0) / 3.0;
  double want_mrr = (0.5 + 1.0 / 3.0 + 1.0) / 3.0;
  CHECK(report.mean.at("ndcg").at(3) == Catch::Approx(want_ndcg).margin(1e-12));
  CHECK(report.mean.at("mrr").at(3) == Catch::Approx(want_mrr).margin(1e-12));
}

TEST_CASE("identical seeds produce zero variance across seeds") {
  auto cases = fixture_cases();
  auto qrels = fixture_qrels();
  ScorerFactory seeded = [](uint64_t seed) {
    return [seed](const EvalCase& c, const std::string& cid) {
      return static_cast<double>(fnv1a(cid + c.query_id) % 1000) + static_cast<double>(seed);
    };
  };
  auto report = evaluate(cases, qrels, {3}, {5, 5, 5}, seeded, "fixed-seed");
  const auto& vals = report.per_seed.at("ndcg").at(3);
  REQUIRE(vals.size() == 3);
  CHECK(vals[0] == vals[1]);
  CHECK(vals[1] == vals[2]);
  CHECK(report.mean.at("ndcg").at(3) == vals[0]);
}

TEST_CASE("evaluate validates inputs") {
  auto cases = fixture_cases();
  auto qrels = fixture_qrels();
  ScorerFactory trivial = [](uint64_t) {
    return [](const EvalCase&, const std::string&) { return 0.0; };
  };
  qrels.rows.erase("q2");
  try {
    evaluate(cases, qrels, {3}, {1}, trivial, "x");
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("q2") != std::string::npos);
  }

  auto bad_cases = fixture_cases();
  bad_cases[1].candidate_ids.clear();
  auto full = fixture_qrels();
  CHECK_THROWS_AS(evaluate(bad_cases, full, {3}, {1}, trivial, "x"), ValidationError);
}

TEST_CASE("evaluation is independent of the thread count") {
  Rng rng(12);
  std::vector<EvalCase> cases;
  Qrels qrels;
  for (int q = 0; q < 24; ++q) {
    EvalCase c;
    c.query_id = "q" + std::to_string(q);
    c.query = "query " + std::to_string(q);
    for (int i = 0; i < 8; ++i) c.candidate_ids.push_back("c" + std::to_string(q * 8 + i));
    qrels.rows[c.query_id][c.candidate_ids[rng.index(8)]] = 1;
    cases.push_back(c);
  }
  ScorerFactory scorer = [](uint64_t) {
    return [](const EvalCase& c, const std::string& cid) {
      return static_cast<double>(fnv1a(c.query_id + "|" + cid) % 100000);
    };
  };
  auto one = evaluate(cases, qrels, {3, 5}, {1, 2}, scorer, "m", 1);
  auto four = evaluate(cases, qrels, {3, 5}, {1, 2}, scorer, "m", 4);
  CHECK(one.per_seed == four.per_seed);
  CHECK(one.mean == four.mean);
}

TEST_CASE("metric report table and JSON carry every metric at every k") {
  auto cases = fixture_cases();
  auto qrels = fixture_qrels();
  ScorerFactory constant = [](uint64_t) {
    return [](const EvalCase&, const std::string&) { return 1.0; };
  };
  auto r = evaluate(cases, qrels, {3, 5, 10}, {1}, constant, "toy-model");
  std::string table = metrics_table({r});
  CHECK(table.find("toy-model") != std::string::npos);
  CHECK(table.find("NDCG@3") != std::string::npos);
  CHECK(table.find("MRR@10") != std::string::npos);
  auto j = metrics_json({r});
  CHECK(j[0]["model"] == "toy-model");
  CHECK(j[0]["mean"].contains("ndcg@3"));
  CHECK(j[0]["per_seed"]["mrr@5"].size() == 1);
}

TEST_CASE("qrels TSV round trip") {
  Qrels q;
  q.rows["q1"] = {{"c1", 1}, {"c2", 0}};
  q.rows["q2"] = {{"c3", 2}};
  write_qrels_tsv(q, "/tmp/blockrank_qrels_test.tsv");
  auto back = read_qrels_tsv("/tmp/blockrank_qrels_test.tsv");
  CHECK(back.rows == q.rows);

  std::ofstream f("/tmp/blockrank_qrels_test.tsv", std::ios::trunc);
  f << "q1\tc1\n";
  f.close();
  CHECK_THROWS_AS(read_qrels_tsv("/tmp/blockrank_qrels_test.tsv"), ParseError);
}

TEST_CASE("candidates JSONL round trip") {
  auto cases = fixture_cases();
  write_candidates_jsonl(cases, "/tmp/blockrank_cands_test.jsonl");
  auto back = read_candidates_jsonl("/tmp/blockrank_cands_test.jsonl");
  REQUIRE(back.size() == cases.size());
  for (size_t i = 0; i < cases.size(); ++i) {
    CHECK(back[i].query_id == cases[i].query_id);
    CHECK(back[i].candidate_ids == cases[i].candidate_ids);
  }
}

namespace {

CrossEncoder<float> bench_model() {
  ModelConfig cfg;
  cfg.attn.d_model = 32;
  cfg.attn.n_heads = 2;
  cfg.attn.q_chunk = 16;
  cfg.attn.kv_chunk = 16;
  cfg.attn.max_seq_len = 128;
  cfg.n_layers = 2;
  cfg.ffn_multiplier = 2;
  cfg.mlp_head_dims = {16, 1};
  std::vector<std::string> words;
  for (int i = 0; i < 60; ++i) words.push_back("tu" + std::to_string(i));
  return CrossEncoder<float>::init(cfg, Vocab::from_tokens(words), 9);
}

}  // namespace

TEST_CASE("bench report columns and accounting identity") {
  auto model = bench_model();
  auto report = bench(model, 8, 128, "cpu-test", 3);

  CHECK(BenchReport::csv_header() == "Hardware,Batch,LatencyMs,PeakBytes,QPS");
  std::string row = report.csv_row();
  CHECK(row.substr(0, 9) == "cpu-test,");
  CHECK(report.batch == 8);
  CHECK(report.peak_bytes > 0);
  CHECK(report.latency_ms > 0.0);

  // Throughput vs per-query latency within 20%.
  double implied_qps = 1000.0 / report.latency_ms;
  CHECK(report.qps > 0.8 * implied_qps);
  CHECK(report.qps < 1.2 * implied_qps);

  CHECK_THROWS_AS(bench(model, 8, 50, "cpu-test"), ContractError);
}

TEST_CASE("bench latency is stationary when the query count doubles") {
  auto model = bench_model();
  auto a = bench(model, 8, 128, "cpu-test", 3);
  auto b = bench(model, 8, 256, "cpu-test", 3);
  double rel = std::abs(a.latency_ms - b.latency_ms) / std::max(a.latency_ms, b.latency_ms);
  CHECK(rel < 0.10);
}
