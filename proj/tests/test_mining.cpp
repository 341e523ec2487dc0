#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <map>

#include "blockrank/mining.hpp"

using namespace blockrank;

namespace {

Chunk make_chunk(const std::string& id, std::vector<std::string> sentences) {
  Chunk c;
  c.id = id;
  c.doc_id = id.substr(0, id.find('#'));
  c.sentences = std::move(sentences);
  c.token_len = token_count(c.text());
  return c;
}

// 20 chunks over a handful of topic word pools.
std::vector<Chunk> fixture_chunks() {
  const char* pools[4][6] = {
      {"song", "nui", "rung", "bien", "dao", "thac"},
      {"pho", "cho", "quan", "com", "bun", "mi"},
      {"sach", "bao", "van", "tho", "truyen", "chu"},
      {"may", "tinh", "phan", "mem", "chip", "code"},
  };
  std::vector<Chunk> chunks;
  Rng rng(12345);
  for (int i = 0; i < 20; ++i) {
    int topic = i % 4;
    char id[32];
    std::snprintf(id, sizeof(id), "c%03d#000", i);
    std::vector<std::string> sents;
    for (int s = 0; s < 3; ++s) {
      std::string sent;
      for (int w = 0; w < 6; ++w) {
        sent += pools[topic][rng.index(6)];
        sent += ' ';
      }
      sent += "chung" + std::to_string(rng.index(4));  // shared filler
      sents.push_back(sent);
    }
    chunks.push_back(make_chunk(id, sents));
  }
  return chunks;
}

// Independent BM25 scorer straight from token lists.
struct BruteBm25 {
  std::vector<std::string> ids;
  std::vector<std::vector<std::string>> docs;
  double k1, b;

  double idf(const std::string& term) const {
    double df = 0;
    for (const auto& d : docs) {
      for (const auto& t : d) {
        if (t == term) {
          df += 1;
          break;
        }
      }
    }
    double n = static_cast<double>(docs.size());
    return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
  }

  double avgdl() const {
    double total = 0;
    for (const auto& d : docs) total += static_cast<double>(d.size());
    return total / static_cast<double>(docs.size());
  }

  double score(const std::set<std::string>& terms, size_t di) const {
    double s = 0;
    for (const auto& term : terms) {
      double tf = 0;
      for (const auto& t : docs[di]) tf += (t == term);
      if (tf == 0) continue;
      double len_norm = 1.0 - b + b * static_cast<double>(docs[di].size()) / avgdl();
      s += idf(term) * tf * (k1 + 1.0) / (tf + k1 * len_norm);
    }
    return s;
  }

  // Full ranking of docs matching at least one term.
  std::vector<std::pair<std::string, double>> rank(const std::string& query) const {
    std::set<std::string> terms;
    for (auto& t : lowercase_tokens(query)) terms.insert(t);
    std::vector<std::pair<std::string, double>> out;
    for (size_t i = 0; i < docs.size(); ++i) {
      bool matches = false;
      for (const auto& term : terms) {
        for (const auto& t : docs[i]) {
          if (t == term) {
            matches = true;
            break;
          }
        }
        if (matches) break;
      }
      if (matches) out.emplace_back(ids[i], score(terms, i));
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b2) {
      if (a.second != b2.second) return a.second > b2.second;
      return a.first < b2.first;
    });
    return out;
  }
};

BruteBm25 brute_from(const std::vector<Chunk>& chunks, double k1, double b) {
  BruteBm25 brute;
  brute.k1 = k1;
  brute.b = b;
  std::vector<const Chunk*> sorted;
  for (const auto& c : chunks) sorted.push_back(&c);
  std::sort(sorted.begin(), sorted.end(),
            [](const Chunk* a, const Chunk* b2) { return a->id < b2->id; });
  for (const Chunk* c : sorted) {
    brute.ids.push_back(c->id);
    brute.docs.push_back(lowercase_tokens(c->text()));
  }
  return brute;
}

EmbeddingMap random_embeddings(const std::vector<std::string>& ids, int dim, uint64_t seed) {
  EmbeddingMap m;
  Rng rng(seed);
  for (const auto& id : ids) {
    Embedding e(static_cast<size_t>(dim));
    for (auto& v : e) v = rng.uniform(-1, 1);
    m[id] = e;
  }
  return m;
}

}  // namespace

TEST_CASE("bm25_build on a single chunk") {
  std::vector<Chunk> one = {make_chunk("a#000", {"mot hai ba", "bon nam"})};
  auto index = bm25_build(one);
  CHECK(index.total_docs == 1);
  CHECK(index.avgdl == 5.0);
}

TEST_CASE("bm25 idf stays positive even for ubiquitous terms") {
  auto chunks = fixture_chunks();
  for (auto& c : chunks) c.sentences.push_back("moi doan deu co tukhoanay");
  auto index = bm25_build(chunks);
  double idf = index.idf("tukhoanay");
  CHECK(idf == Catch::Approx(std::log(1.0 + 0.5 / (20.0 + 0.5))).margin(1e-15));
  CHECK(idf > 0.0);
}

TEST_CASE("bm25_build rejects duplicate chunk ids") {
  std::vector<Chunk> dup = {make_chunk("a#000", {"x y", "z w"}),
                            make_chunk("a#000", {"p q", "r s"})};
  CHECK_THROWS_AS(bm25_build(dup), IngestionError);
  CHECK_THROWS_AS(bm25_build({}), IngestionError);
}

TEST_CASE("bm25 document frequencies and idf match a brute recount") {
  auto chunks = fixture_chunks();
  auto index = bm25_build(chunks);
  auto brute = brute_from(chunks, 1.2, 0.75);
  CHECK(index.avgdl == Catch::Approx(brute.avgdl()).margin(1e-12));
  for (const auto& [term, plist] : index.postings) {
    CHECK(index.idf(term) == Catch::Approx(brute.idf(term)).margin(1e-12));
  }
}

TEST_CASE("bm25_search ranks the unique matching document first") {
  auto chunks = fixture_chunks();
  chunks[7].sentences.push_back("doc nhat tukhoahiem xuat hien");
  chunks[7].token_len = token_count(chunks[7].text());
  auto index = bm25_build(chunks);
  auto hits = bm25_search(index, "tukhoahiem");
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].chunk_id == chunks[7].id);
}

TEST_CASE("bm25_search breaks exact ties by ascending id") {
  std::vector<Chunk> twins = {make_chunk("b#000", {"giong het nhau", "van ban nay"}),
                              make_chunk("a#000", {"giong het nhau", "van ban nay"})};
  auto index = bm25_build(twins);
  auto hits = bm25_search(index, "giong van");
  REQUIRE(hits.size() == 2);
  CHECK(hits[0].chunk_id == "a#000");
  CHECK(hits[0].bm25_score == hits[1].bm25_score);
}

TEST_CASE("bm25_search equals exhaustive scoring, and top-k is its prefix") {
  auto chunks = fixture_chunks();
  auto index = bm25_build(chunks);
  auto brute = brute_from(chunks, 1.2, 0.75);
  std::vector<std::string> queries = {"song nui chung1", "pho com bun chung2", "may code",
                                      "sach van tho chung0 chung3"};
  for (const auto& q : queries) {
    auto want = brute.rank(q);
    auto got = bm25_search(index, q, static_cast<int64_t>(chunks.size()));
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].chunk_id == want[i].first);
      CHECK(got[i].bm25_score == Catch::Approx(want[i].second).margin(1e-12));
    }
    auto top5 = bm25_search(index, q, 5);
    for (size_t i = 0; i < top5.size(); ++i) CHECK(top5[i].chunk_id == want[i].first);
  }
  CHECK(bm25_search(index, "khongtontai").empty());
}

TEST_CASE("dense_rerank orders by recomputed cosines") {
  auto chunks = fixture_chunks();
  std::vector<std::string> ids;
  for (const auto& c : chunks) ids.push_back(c.id);
  auto embs = random_embeddings(ids, 8, 77);
  Embedding query(8);
  Rng rng(5);
  for (auto& v : query) v = rng.uniform(-1, 1);

  std::vector<Candidate> cands;
  for (const auto& id : ids) cands.push_back({id, 1.0, std::nullopt, 0});

  auto got = dense_rerank(cands, query, embs);
  // Independent recompute-and-sort.
  std::vector<std::pair<double, std::string>> want;
  for (const auto& id : ids) want.emplace_back(-cosine_vec(query, embs[id]), id);
  std::sort(want.begin(), want.end());
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].chunk_id == want[i].second);
    CHECK(got[i].dense_score.value() == Catch::Approx(-want[i].first).margin(1e-15));
  }

  std::vector<Candidate> single = {{ids[0], 1.0, std::nullopt, 0}};
  auto one = dense_rerank(single, query, embs);
  CHECK(one[0].chunk_id == ids[0]);

  // A candidate colinear with the query lands first with score 1.
  embs[ids[3]] = query;
  auto boosted = dense_rerank(cands, query, embs);
  CHECK(boosted[0].chunk_id == ids[3]);
  CHECK(boosted[0].dense_score.value() == Catch::Approx(1.0).margin(1e-12));

  EmbeddingMap missing = embs;
  missing.erase(ids[5]);
  try {
    dense_rerank(cands, query, missing);
    FAIL("expected LookupError");
  } catch (const LookupError& e) {
    CHECK(std::string(e.what()).find(ids[5]) != std::string::npos);
  }
}

namespace {

// Independent greedy MMR evaluation (reverse iteration, explicit tie pass).
std::vector<std::string> mmr_oracle(const std::vector<std::string>& ids, const Embedding& query,
                                    const EmbeddingMap& embs, double lambda, int64_t m) {
  std::vector<std::string> selected;
  std::set<std::string> remaining(ids.begin(), ids.end());
  while (static_cast<int64_t>(selected.size()) < m) {
    double best_score = -1e300;
    for (auto it = remaining.rbegin(); it != remaining.rend(); ++it) {
      double rel = cosine_vec(query, embs.at(*it));
      double red = -1e300;
      for (const auto& s : selected) red = std::max(red, cosine_vec(embs.at(*it), embs.at(s)));
      double sc = selected.empty() ? lambda * rel : lambda * rel - (1.0 - lambda) * red;
      best_score = std::max(best_score, sc);
    }
    // Tie pass: smallest id achieving the best score (set iterates ascending).
    for (const auto& id : remaining) {
      double rel = cosine_vec(query, embs.at(id));
      double red = -1e300;
      for (const auto& s : selected) red = std::max(red, cosine_vec(embs.at(id), embs.at(s)));
      double sc = selected.empty() ? lambda * rel : lambda * rel - (1.0 - lambda) * red;
      if (sc == best_score) {
        selected.push_back(id);
        remaining.erase(id);
        break;
      }
    }
  }
  return selected;
}

}  // namespace

TEST_CASE("mmr with lambda=1 equals dense top-m") {
  std::vector<std::string> ids = {"a", "b", "c", "d", "e", "f"};
  auto embs = random_embeddings(ids, 6, 31);
  Embedding query(6);
  Rng rng(9);
  for (auto& v : query) v = rng.uniform(-1, 1);

  std::vector<Candidate> cands;
  for (const auto& id : ids) cands.push_back({id, 0, std::nullopt, 0});
  auto dense = dense_rerank(cands, query, embs);
  auto picks = mmr_select(dense, query, embs, 1.0, 3);
  REQUIRE(picks.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(picks[static_cast<size_t>(i)].chunk_id == dense[static_cast<size_t>(i)].chunk_id);
}

TEST_CASE("mmr never takes an exact duplicate while alternatives remain") {
  std::vector<std::string> ids = {"a", "b", "c"};
  EmbeddingMap embs;
  embs["a"] = {1.0, 0.0, 0.0};
  embs["b"] = {1.0, 0.0, 0.0};  // duplicate of a
  embs["c"] = {0.0, 1.0, 0.1};
  Embedding query = {0.9, 0.3, 0.0};
  std::vector<Candidate> cands = {{"a", 0, std::nullopt, 0},
                                  {"b", 0, std::nullopt, 0},
                                  {"c", 0, std::nullopt, 0}};
  auto picks = mmr_select(cands, query, embs, 0.5, 2);
  REQUIRE(picks.size() == 2);
  CHECK(picks[0].chunk_id == "a");
  CHECK(picks[1].chunk_id == "c");
}

TEST_CASE("mmr matches the brute-force recurrence on a 6-candidate fixture") {
  std::vector<std::string> ids = {"c1", "c2", "c3", "c4", "c5", "c6"};
  auto embs = random_embeddings(ids, 5, 2024);
  Embedding query(5);
  Rng rng(77);
  for (auto& v : query) v = rng.uniform(-1, 1);
  std::vector<Candidate> cands;
  for (const auto& id : ids) cands.push_back({id, 0, std::nullopt, 0});

  for (double lambda : {0.5, 0.0, 0.25, 0.75}) {
    auto picks = mmr_select(cands, query, embs, lambda, 3);
    auto want = mmr_oracle(ids, query, embs, lambda, 3);
    REQUIRE(picks.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i) CHECK(picks[i].chunk_id == want[i]);
  }
}

TEST_CASE("mmr with lambda=0 maximizes distance to the selected set") {
  std::vector<std::string> ids = {"a", "b", "c", "d", "e", "f", "g", "h"};
  auto embs = random_embeddings(ids, 4, 555);
  Embedding query(4, 0.5);
  std::vector<Candidate> cands;
  for (const auto& id : ids) cands.push_back({id, 0, std::nullopt, 0});
  auto picks = mmr_select(cands, query, embs, 0.0, 4);

  std::vector<std::string> chosen;
  for (size_t step = 1; step < picks.size(); ++step) {
    chosen.clear();
    for (size_t i = 0; i < step; ++i) chosen.push_back(picks[i].chunk_id);
    // Every not-yet-picked candidate has redundancy >= the pick's.
    double pick_red = -1e300;
    for (const auto& s : chosen) {
      pick_red = std::max(pick_red, cosine_vec(embs[picks[step].chunk_id], embs[s]));
    }
    for (const auto& id : ids) {
      bool already = false;
      for (size_t i = 0; i <= step; ++i) already |= (picks[i].chunk_id == id);
      if (already) continue;
      double red = -1e300;
      for (const auto& s : chosen) red = std::max(red, cosine_vec(embs[id], embs[s]));
      CHECK(red >= pick_red - 1e-12);
    }
  }
}

TEST_CASE("mmr rejects m beyond the candidate count") {
  std::vector<std::string> ids = {"a", "b"};
  auto embs = random_embeddings(ids, 4, 1);
  Embedding query(4, 1.0);
  std::vector<Candidate> cands = {{"a", 0, std::nullopt, 0}, {"b", 0, std::nullopt, 0}};
  CHECK_THROWS_AS(mmr_select(cands, query, embs, 0.5, 3), ContractError);
  CHECK_THROWS_AS(mmr_select(cands, query, embs, 1.5, 1), ContractError);
}

namespace {

TextEmbedder hash_embedder(int dim = 12) {
  return [dim](const std::string& text) {
    Embedding e(static_cast<size_t>(dim), 0.0);
    for (auto& tok : lowercase_tokens(text)) {
      uint64_t h = fnv1a(tok);
      e[h % static_cast<uint64_t>(dim)] += 1.0;
      e[(h >> 17) % static_cast<uint64_t>(dim)] += 0.5;
    }
    e[0] += 0.01;  // never zero-norm
    return e;
  };
}

}  // namespace

TEST_CASE("mine_triplets on a single-chunk corpus yields only a skip entry") {
  std::vector<Chunk> one = {make_chunk("a#000", {"mot hai ba bon", "nam sau bay tam"})};
  auto index = bm25_build(one);
  MiningConfig cfg;
  cfg.m = 3;
  auto res = mine_triplets(one, index, hash_embedder(), cfg);
  CHECK(res.records.empty());
  REQUIRE(res.skip_log.size() == 1);
  CHECK(res.skip_log[0].find("a#000") != std::string::npos);
}

TEST_CASE("mined records carry exactly three negatives, none equal to pos") {
  auto chunks = fixture_chunks();
  auto index = bm25_build(chunks);
  MiningConfig cfg;
  cfg.seed = 99;
  auto res = mine_triplets(chunks, index, hash_embedder(), cfg);
  CHECK(!res.records.empty());
  for (const auto& r : res.records) {
    CHECK(r.neg.size() == 3);
    CHECK(!r.query.empty());
    REQUIRE(r.pos.size() == 1);
    for (const auto& n : r.neg) CHECK(n != r.pos[0]);
    // The pseudo-query never appears verbatim inside its positive.
    CHECK(r.pos[0].find(r.query) == std::string::npos);
  }
}

TEST_CASE("mining is deterministic: same seed, byte-identical files") {
  auto chunks = fixture_chunks();
  auto index = bm25_build(chunks);
  MiningConfig cfg;
  cfg.seed = 7;

  auto run_once = [&](const std::string& path) {
    auto res = mine_triplets(chunks, index, hash_embedder(), cfg);
    write_triplets(res.records, path);
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  CHECK(run_once("/tmp/blockrank_mine_a.jsonl") == run_once("/tmp/blockrank_mine_b.jsonl"));

  cfg.seed = 8;
  auto other = mine_triplets(chunks, index, hash_embedder(), cfg);
  write_triplets(other.records, "/tmp/blockrank_mine_c.jsonl");
  std::ifstream f1("/tmp/blockrank_mine_a.jsonl", std::ios::binary);
  std::ifstream f2("/tmp/blockrank_mine_c.jsonl", std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 != s2);
}

TEST_CASE("both selection modes produce valid records") {
  auto chunks = fixture_chunks();
  auto index = bm25_build(chunks);
  MiningConfig cfg;
  cfg.selection = "dense_after_mmr";
  cfg.mmr_pool = 6;
  auto res = mine_triplets(chunks, index, hash_embedder(), cfg);
  CHECK(!res.records.empty());
  for (const auto& r : res.records) CHECK(r.neg.size() == 3);
  cfg.selection = "nonsense";
  CHECK_THROWS_AS(mine_triplets(chunks, index, hash_embedder(), cfg), ContractError);
}

TEST_CASE("embedder failures surface the chunk id") {
  auto chunks = fixture_chunks();
  auto index = bm25_build(chunks);
  MiningConfig cfg;
  TextEmbedder broken = [](const std::string&) -> Embedding {
    throw NumericError("embedding blew up");
  };
  try {
    mine_triplets(chunks, index, broken, cfg);
    FAIL("expected LookupError");
  } catch (const LookupError& e) {
    CHECK(std::string(e.what()).find("c000#000") != std::string::npos);
  }
}

TEST_CASE("triplet files round-trip losslessly") {
  std::string path = "/tmp/blockrank_triplets_test.jsonl";
  write_triplets({}, path);
  CHECK(read_triplets(path).empty());

  std::vector<TripletRecord> recs;
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    TripletRecord r;
    r.query = "câu hỏi số " + std::to_string(i);
    r.pos = {"đoạn dương " + std::to_string(i)};
    for (int n = 0; n < 3; ++n) r.neg.push_back("đoạn âm " + std::to_string(i * 3 + n));
    recs.push_back(r);
  }
  write_triplets(recs, path);
  auto back = read_triplets(path);
  REQUIRE(back.size() == recs.size());
  for (size_t i = 0; i < recs.size(); ++i) CHECK(back[i] == recs[i]);
}

TEST_CASE("triplet reader rejects malformed and invalid lines precisely") {
  std::string path = "/tmp/blockrank_triplets_bad.jsonl";
  {
    std::ofstream f(path, std::ios::trunc);
    f << R"({"query":"q","pos":["p"],"neg":["n1","n2","n3"]})" << "\n";
    f << R"({"query":"q","pos":["p"]})" << "\n";
  }
  try {
    read_triplets(path);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    std::string msg = e.what();
    CHECK(msg.find("neg") != std::string::npos);
    CHECK(msg.find("line 2") != std::string::npos);
  }

  {
    std::ofstream f(path, std::ios::trunc);
    f << "{{{" << "\n";
  }
  try {
    read_triplets(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line_number == 1);
  }

  {
    std::ofstream f(path, std::ios::trunc);
    f << R"({"query":"q","pos":["same"],"neg":["same","n2","n3"]})" << "\n";
  }
  CHECK_THROWS_AS(read_triplets(path), ValidationError);

  {
    std::ofstream f(path, std::ios::trunc);
    f << R"({"query":"q","pos":["p"],"neg":["n"],"extra":1})" << "\n";
  }
  CHECK_THROWS_AS(read_triplets(path), ValidationError);
}

TEST_CASE("embedding cache round trip") {
  EmbeddingMap embs;
  Rng rng(8);
  for (int i = 0; i < 10; ++i) {
    Embedding e(16);
    for (auto& v : e) v = rng.uniform(-2, 2);
    embs["chunk" + std::to_string(i)] = e;
  }
  std::string path = "/tmp/blockrank_embcache_test.bin";
  write_embedding_cache(embs, path);
  auto back = read_embedding_cache(path);
  REQUIRE(back.size() == embs.size());
  for (const auto& [id, e] : embs) {
    REQUIRE(back.count(id) == 1);
    CHECK(back[id] == e);
  }

  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  f << "GARBAGE!";
  f.close();
  CHECK_THROWS_AS(read_embedding_cache(path), FormatError);
}
