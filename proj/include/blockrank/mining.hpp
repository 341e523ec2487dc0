#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "blockrank/corpus.hpp"
#include "blockrank/text.hpp"

namespace blockrank {

// ---------------------------------------------------------------------------
// BM25
// ---------------------------------------------------------------------------

struct Bm25Index {
  struct Posting {
    int32_t doc;  // index into chunk_ids
    int32_t tf;
  };

  std::vector<std::string> chunk_ids;  // ascending; doc indexes follow this order
  std::vector<int64_t> doc_len;
  std::map<std::string, std::vector<Posting>> postings;  // postings sorted by doc
  double avgdl = 0;
  int64_t total_docs = 0;
  double k1 = 1.2;
  double b = 0.75;

  // +1-inside-log variant, nonnegative for every document frequency.
  double idf(const std::string& term) const {
    auto it = postings.find(term);
    double df = it == postings.end() ? 0.0 : static_cast<double>(it->second.size());
    double n = static_cast<double>(total_docs);
    return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
  }

  int32_t doc_index(const std::string& chunk_id) const {
    auto it = std::lower_bound(chunk_ids.begin(), chunk_ids.end(), chunk_id);
    if (it == chunk_ids.end() || *it != chunk_id) {
      throw LookupError("bm25: unknown chunk id '" + chunk_id + "'");
    }
    return static_cast<int32_t>(it - chunk_ids.begin());
  }

  double term_doc_score(const std::string& term, int32_t doc) const {
    auto it = postings.find(term);
    if (it == postings.end()) return 0.0;
    const auto& plist = it->second;
    auto pit = std::lower_bound(plist.begin(), plist.end(), doc,
                                [](const Posting& p, int32_t d) { return p.doc < d; });
    if (pit == plist.end() || pit->doc != doc) return 0.0;
    double tf = static_cast<double>(pit->tf);
    double len_norm = 1.0 - b + b * static_cast<double>(doc_len[static_cast<size_t>(doc)]) / avgdl;
    return idf(term) * tf * (k1 + 1.0) / (tf + k1 * len_norm);
  }

  // Score of one query against one document; duplicate query terms count once.
  double score_doc(const std::string& query, const std::string& chunk_id) const {
    std::set<std::string> terms;
    for (auto& t : lowercase_tokens(query)) terms.insert(t);
    int32_t doc = doc_index(chunk_id);
    double s = 0;
    for (const auto& t : terms) s += term_doc_score(t, doc);
    return s;
  }
};

inline Bm25Index bm25_build(const std::vector<Chunk>& chunks, double k1 = 1.2, double b = 0.75) {
  if (chunks.empty()) throw IngestionError("bm25_build: empty chunk stream");
  Bm25Index index;
  index.k1 = k1;
  index.b = b;

  std::vector<const Chunk*> sorted;
  sorted.reserve(chunks.size());
  for (const auto& c : chunks) sorted.push_back(&c);
  std::sort(sorted.begin(), sorted.end(),
            [](const Chunk* a, const Chunk* b2) { return a->id < b2->id; });
  for (size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->id == sorted[i - 1]->id) {
      throw IngestionError("bm25_build: duplicate chunk id '" + sorted[i]->id + "'");
    }
  }

  int64_t total_len = 0;
  for (const Chunk* c : sorted) {
    int32_t doc = static_cast<int32_t>(index.chunk_ids.size());
    index.chunk_ids.push_back(c->id);
    std::map<std::string, int32_t> tf;
    int64_t len = 0;
    for (auto& tok : lowercase_tokens(c->text())) {
      ++tf[tok];
      ++len;
    }
    index.doc_len.push_back(len);
    total_len += len;
    for (auto& [term, count] : tf) index.postings[term].push_back({doc, count});
  }
  index.total_docs = static_cast<int64_t>(index.chunk_ids.size());
  index.avgdl = static_cast<double>(total_len) / static_cast<double>(index.total_docs);
  return index;
}

struct Candidate {
  std::string chunk_id;
  double bm25_score = 0;
  std::optional<double> dense_score;
  double mmr_score = 0;
};

// Top-k by BM25 score, ties broken by ascending chunk id. Only documents
// sharing at least one query term appear; an unmatched query yields an empty
// result.
inline std::vector<Candidate> bm25_search(const Bm25Index& index, const std::string& query,
                                          int64_t k = 20) {
  std::set<std::string> terms;
  for (auto& t : lowercase_tokens(query)) terms.insert(t);
  std::unordered_map<int32_t, double> scores;
  for (const auto& term : terms) {
    auto it = index.postings.find(term);
    if (it == index.postings.end()) continue;
    double idf = index.idf(term);
    for (const auto& p : it->second) {
      double tf = static_cast<double>(p.tf);
      double len_norm =
          1.0 - index.b + index.b * static_cast<double>(index.doc_len[static_cast<size_t>(p.doc)]) /
                              index.avgdl;
      scores[p.doc] += idf * tf * (index.k1 + 1.0) / (tf + index.k1 * len_norm);
    }
  }
  std::vector<std::pair<int32_t, double>> hits(scores.begin(), scores.end());
  std::sort(hits.begin(), hits.end(), [&](const auto& a, const auto& b2) {
    if (a.second != b2.second) return a.second > b2.second;
    return a.first < b2.first;  // chunk_ids is sorted, so index order is id order
  });
  if (static_cast<int64_t>(hits.size()) > k) hits.resize(static_cast<size_t>(k));
  std::vector<Candidate> out;
  out.reserve(hits.size());
  for (auto& [doc, s] : hits) {
    out.push_back({index.chunk_ids[static_cast<size_t>(doc)], s, std::nullopt, 0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense rerank and MMR
// ---------------------------------------------------------------------------

using Embedding = std::vector<double>;
using EmbeddingMap = std::unordered_map<std::string, Embedding>;

inline double cosine_vec(const Embedding& u, const Embedding& v) {
  if (u.size() != v.size()) throw DimensionError("cosine_vec: length mismatch");
  double uv = 0, uu = 0, vv = 0;
  for (size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0 || vv == 0) throw DegenerateVectorError("cosine_vec: zero-norm input");
  return std::max(-1.0, std::min(1.0, uv / (std::sqrt(uu) * std::sqrt(vv))));
}

inline const Embedding& lookup_embedding(const EmbeddingMap& embs, const std::string& id) {
  auto it = embs.find(id);
  if (it == embs.end()) throw LookupError("no embedding stored for chunk '" + id + "'");
  return it->second;
}

// Cosine rerank against the query embedding; stable sort preserves the BM25
// order among exact ties.
inline std::vector<Candidate> dense_rerank(std::vector<Candidate> candidates,
                                           const Embedding& query_emb, const EmbeddingMap& embs) {
  for (auto& c : candidates) {
    c.dense_score = cosine_vec(query_emb, lookup_embedding(embs, c.chunk_id));
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) {
                     return a.dense_score.value() > b.dense_score.value();
                   });
  return candidates;
}

// Greedy maximal-marginal-relevance selection:
//   argmax over remaining c of lambda*cos(query,c) - (1-lambda)*max_s cos(c,s)
// with the first pick reducing to the pure relevance term. Ties break by
// ascending chunk id. Returns picks in selection order, mmr_score recorded.
inline std::vector<Candidate> mmr_select(const std::vector<Candidate>& candidates,
                                         const Embedding& query_emb, const EmbeddingMap& embs,
                                         double lambda, int64_t m = 3) {
  if (lambda < 0.0 || lambda > 1.0) throw ContractError("mmr_select: lambda must be in [0, 1]");
  if (m > static_cast<int64_t>(candidates.size())) {
    throw ContractError("mmr_select: m exceeds candidate count");
  }
  std::vector<bool> taken(candidates.size(), false);
  std::vector<Candidate> picked;
  picked.reserve(static_cast<size_t>(m));
  while (static_cast<int64_t>(picked.size()) < m) {
    int64_t best = -1;
    double best_score = 0;
    for (size_t i = 0; i < candidates.size(); ++i) {
      if (taken[i]) continue;
      const Embedding& ce = lookup_embedding(embs, candidates[i].chunk_id);
      double rel = cosine_vec(query_emb, ce);
      double redundancy = 0;
      if (!picked.empty()) {
        redundancy = -1.0;
        for (const auto& s : picked) {
          redundancy = std::max(redundancy, cosine_vec(ce, lookup_embedding(embs, s.chunk_id)));
        }
      }
      double sc = picked.empty() ? lambda * rel : lambda * rel - (1.0 - lambda) * redundancy;
      if (best < 0 || sc > best_score ||
          (sc == best_score && candidates[i].chunk_id < candidates[static_cast<size_t>(best)].chunk_id)) {
        best = static_cast<int64_t>(i);
        best_score = sc;
      }
    }
    Candidate c = candidates[static_cast<size_t>(best)];
    c.mmr_score = best_score;
    taken[static_cast<size_t>(best)] = true;
    picked.push_back(std::move(c));
  }
  return picked;
}

// ---------------------------------------------------------------------------
// Triplet records
// ---------------------------------------------------------------------------

struct TripletRecord {
  std::string query;
  std::vector<std::string> pos;
  std::vector<std::string> neg;

  void validate() const {
    if (query.empty()) throw ValidationError("triplet: query is empty");
    if (pos.empty()) throw ValidationError("triplet: pos must hold at least one passage");
    for (const auto& n : neg) {
      for (const auto& p : pos) {
        if (n == p) throw ValidationError("triplet: neg equals a pos passage");
      }
    }
  }

  bool operator==(const TripletRecord& o) const {
    return query == o.query && pos == o.pos && neg == o.neg;
  }
};

struct MiningConfig {
  int64_t k = 20;          // first-stage depth
  double lambda = 0.5;     // MMR relevance/diversity trade-off
  int64_t m = 3;           // negatives per record
  uint64_t seed = 0;       // drives the pseudo-query draw
  // Which score makes the final cut: "mmr" picks the m MMR winners;
  // "dense_after_mmr" lets MMR shortlist `mmr_pool` and takes the top m of
  // those by dense score.
  std::string selection = "mmr";
  int64_t mmr_pool = 6;
};

struct MiningResult {
  std::vector<TripletRecord> records;
  std::vector<std::string> skip_log;
};

using TextEmbedder = std::function<Embedding(const std::string& text)>;

// Full pipeline per chunk: pseudo-query via the Inverse Cloze Task, BM25
// top-k, self/positive filtering, dense rerank, MMR, record assembly.
// Chunks are processed in ascending id order; per-chunk seeds keep the
// output independent of scheduling.
inline MiningResult mine_triplets(const std::vector<Chunk>& chunks, const Bm25Index& index,
                                  const TextEmbedder& embedder, const MiningConfig& cfg) {
  if (cfg.selection != "mmr" && cfg.selection != "dense_after_mmr") {
    throw ContractError("mine_triplets: unknown selection mode '" + cfg.selection + "'");
  }
  std::vector<const Chunk*> sorted;
  sorted.reserve(chunks.size());
  std::unordered_map<std::string, const Chunk*> by_id;
  for (const auto& c : chunks) {
    sorted.push_back(&c);
    by_id[c.id] = &c;
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const Chunk* a, const Chunk* b) { return a->id < b->id; });

  // Chunk embeddings once, reused across queries.
  EmbeddingMap chunk_embs;
  for (const Chunk* c : sorted) {
    try {
      chunk_embs[c->id] = embedder(c->text());
    } catch (const Error& e) {
      throw LookupError("embedding failed for chunk '" + c->id + "': " + e.what());
    }
  }

  MiningResult out;
  for (const Chunk* c : sorted) {
    Rng rng(cfg.seed ^ fnv1a(c->id));
    auto [query, positive] = ict_seed(*c, rng);

    auto candidates = bm25_search(index, query, cfg.k);
    std::vector<Candidate> filtered;
    for (auto& cand : candidates) {
      if (cand.chunk_id == c->id) continue;
      auto it = by_id.find(cand.chunk_id);
      if (it != by_id.end() && it->second->text() == positive) continue;
      filtered.push_back(std::move(cand));
    }
    if (static_cast<int64_t>(filtered.size()) < cfg.m) {
      out.skip_log.push_back("chunk=" + c->id + " reason=too-few-candidates have=" +
                             std::to_string(filtered.size()) + " need=" + std::to_string(cfg.m));
      continue;
    }

    Embedding query_emb;
    try {
      query_emb = embedder(query);
    } catch (const Error& e) {
      throw LookupError("embedding failed for query of chunk '" + c->id + "': " + e.what());
    }
    auto reranked = dense_rerank(std::move(filtered), query_emb, chunk_embs);

    std::vector<Candidate> selected;
    if (cfg.selection == "mmr") {
      selected = mmr_select(reranked, query_emb, chunk_embs, cfg.lambda, cfg.m);
    } else {
      int64_t pool = std::min<int64_t>(std::max(cfg.mmr_pool, cfg.m),
                                       static_cast<int64_t>(reranked.size()));
      auto shortlist = mmr_select(reranked, query_emb, chunk_embs, cfg.lambda, pool);
      std::stable_sort(shortlist.begin(), shortlist.end(), [](const auto& a, const auto& b) {
        return a.dense_score.value() > b.dense_score.value();
      });
      shortlist.resize(static_cast<size_t>(cfg.m));
      selected = std::move(shortlist);
    }

    TripletRecord rec;
    rec.query = query;
    rec.pos = {positive};
    for (const auto& s : selected) rec.neg.push_back(by_id.at(s.chunk_id)->text());
    rec.validate();
    out.records.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Triplet file format: one JSON object per line, keys query/pos/neg exactly.
// ---------------------------------------------------------------------------

inline void write_triplets(const std::vector<TripletRecord>& records, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingInputError("cannot open '" + path + "' for writing");
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["query"] = r.query;
    j["pos"] = r.pos;
    j["neg"] = r.neg;
    f << j.dump() << '\n';
  }
}

inline std::vector<TripletRecord> read_triplets(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingInputError("cannot open triplets '" + path + "'");
  std::vector<TripletRecord> records;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw ParseError("triplets: malformed JSON", lineno);
    for (const char* key : {"query", "pos", "neg"}) {
      if (!j.contains(key)) {
        throw ValidationError("triplets: missing key '" + std::string(key) + "' (line " +
                              std::to_string(lineno) + ")");
      }
    }
    if (j.size() != 3) {
      throw ValidationError("triplets: unexpected extra keys (line " + std::to_string(lineno) +
                            ")");
    }
    TripletRecord r;
    try {
      r.query = j["query"].get<std::string>();
      r.pos = j["pos"].get<std::vector<std::string>>();
      r.neg = j["neg"].get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception&) {
      throw ParseError("triplets: wrong field type", lineno);
    }
    try {
      r.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(std::string(e.what()) + " (line " + std::to_string(lineno) + ")");
    }
    records.push_back(std::move(r));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Embedding cache: {chunk_id, vector} pairs, little-endian binary.
// ---------------------------------------------------------------------------

inline void write_embedding_cache(const EmbeddingMap& embs, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingInputError("cannot open '" + path + "' for writing");
  const char magic[8] = {'B', 'R', 'E', 'M', 'B', 'C', '0', '1'};
  f.write(magic, 8);
  std::vector<std::string> ids;
  ids.reserve(embs.size());
  for (auto& [id, e] : embs) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  uint32_t count = static_cast<uint32_t>(ids.size());
  f.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& id : ids) {
    uint32_t len = static_cast<uint32_t>(id.size());
    f.write(reinterpret_cast<const char*>(&len), 4);
    f.write(id.data(), len);
    const Embedding& e = embs.at(id);
    uint32_t dim = static_cast<uint32_t>(e.size());
    f.write(reinterpret_cast<const char*>(&dim), 4);
    f.write(reinterpret_cast<const char*>(e.data()), static_cast<std::streamsize>(dim * 8));
  }
}

inline EmbeddingMap read_embedding_cache(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInputError("cannot open embedding cache '" + path + "'");
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "BREMBC01", 8) != 0) {
    throw FormatError("embedding cache: bad magic");
  }
  uint32_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 4);
  EmbeddingMap out;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 4);
    if (!f || len > (1u << 20)) throw FormatError("embedding cache: bad id length");
    std::string id(len, '\0');
    f.read(id.data(), len);
    uint32_t dim = 0;
    f.read(reinterpret_cast<char*>(&dim), 4);
    if (!f || dim == 0 || dim > (1u << 20)) throw FormatError("embedding cache: bad dimension");
    Embedding e(dim);
    f.read(reinterpret_cast<char*>(e.data()), static_cast<std::streamsize>(dim * 8));
    if (!f) throw FormatError("embedding cache: truncated payload");
    out.emplace(std::move(id), std::move(e));
  }
  return out;
}

}  // namespace blockrank
