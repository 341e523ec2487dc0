#pragma once

#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "blockrank/config.hpp"
#include "blockrank/evalbench.hpp"
#include "blockrank/toy_corpus.hpp"

namespace blockrank {

// Embeds raw text with the model's tokenizer; mining's embedding interface.
template <class T>
inline Embedding embed_text(CrossEncoder<T>& model, const std::string& text) {
  auto ids = tokenize(text, model.vocab);
  if (ids.empty()) ids.push_back(Vocab::kUnk);
  Tensor<T> e = embed(model, ids);
  Embedding out(static_cast<size_t>(e.numel()));
  for (int64_t i = 0; i < e.numel(); ++i) out[static_cast<size_t>(i)] = static_cast<double>(e[i]);
  return out;
}

// Abbreviation list override: one entry per line.
inline std::vector<std::string> load_abbreviations(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingInputError("cannot open abbreviation list '" + path + "'");
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line[0] != '#') out.push_back(line);
  }
  return out;
}

// Stage runners shared by the CLI and the end-to-end tests. Every stage
// reads its predecessor's artifact from the output directory and is
// deterministic under the configured seed.
class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, std::string outdir)
      : cfg_(std::move(cfg)), outdir_(std::move(outdir)) {
    std::filesystem::create_directories(outdir_);
  }

  const PipelineConfig& cfg() const { return cfg_; }
  std::string path(const std::string& name) const { return outdir_ + "/" + name; }

  // corpus.jsonl -> normalized.jsonl
  std::vector<std::string> run_normalize() {
    auto docs = read_documents_jsonl(cfg_.corpus_path);
    RewriteTable table = cfg_.rewrite_table == "builtin" ? default_rewrite_table()
                                                         : load_rewrite_table(cfg_.rewrite_table);
    for (auto& d : docs) d.text = normalize_text(d.text, table);
    write_documents_jsonl(docs, path("normalized.jsonl"));
    return {path("normalized.jsonl")};
  }

  // normalized.jsonl -> chunks.jsonl + discards.log
  std::vector<std::string> run_chunk() {
    auto docs = read_documents_jsonl(path("normalized.jsonl"));
    auto abbrevs = cfg_.abbreviations == "builtin" ? default_abbreviations()
                                                   : load_abbreviations(cfg_.abbreviations);
    std::vector<Chunk> chunks;
    std::vector<std::string> discards;
    for (const auto& doc : docs) {
      auto seg = segment_sentences(doc.text, abbrevs);
      auto res = chunk_segments(doc.id, seg.sentences, cfg_.chunk_min_tokens,
                                cfg_.chunk_max_tokens);
      chunks.insert(chunks.end(), res.chunks.begin(), res.chunks.end());
      discards.insert(discards.end(), res.discard_log.begin(), res.discard_log.end());
    }
    write_chunks_jsonl(chunks, path("chunks.jsonl"));
    write_lines(discards, path("discards.log"));
    return {path("chunks.jsonl"), path("discards.log")};
  }

  // Deterministic holdout split by chunk id hash.
  void split_chunks(const std::vector<Chunk>& all, std::vector<Chunk>* train_out,
                    std::vector<Chunk>* eval_out) const {
    uint64_t threshold = static_cast<uint64_t>(cfg_.holdout_fraction * 1000.0);
    for (const auto& c : all) {
      uint64_t h = fnv1a(c.id) ^ cfg_.seed;
      h = fnv1a(to_hex(h));
      if (h % 1000 < threshold) {
        eval_out->push_back(c);
      } else {
        train_out->push_back(c);
      }
    }
  }

  CrossEncoder<float> init_model(const std::vector<Chunk>& vocab_chunks) const {
    std::vector<std::string> texts;
    texts.reserve(vocab_chunks.size());
    for (const auto& c : vocab_chunks) texts.push_back(c.text());
    Vocab vocab = build_vocab(texts, static_cast<size_t>(cfg_.vocab_max));
    ModelConfig mc = cfg_.model;
    return CrossEncoder<float>::init(mc, std::move(vocab), cfg_.seed);
  }

  // chunks.jsonl -> triplets.jsonl + skips.log + embedding_cache.bin
  std::vector<std::string> run_mine() {
    auto all = read_chunks_jsonl(path("chunks.jsonl"));
    std::vector<Chunk> train_chunks, eval_chunks;
    split_chunks(all, &train_chunks, &eval_chunks);
    if (train_chunks.empty()) throw IngestionError("mine: no chunks left after the holdout split");

    auto model = init_model(train_chunks);
    auto index = bm25_build(train_chunks, cfg_.bm25_k1, cfg_.bm25_b);

    // Chunk embeddings once; queries embed on demand.
    EmbeddingMap by_id;
    std::map<std::string, Embedding> by_text;
    for (const auto& c : train_chunks) {
      Embedding e = embed_text(model, c.text());
      by_id[c.id] = e;
      by_text[c.text()] = std::move(e);
    }
    write_embedding_cache(by_id, path("embedding_cache.bin"));

    TextEmbedder embedder = [&](const std::string& text) {
      auto it = by_text.find(text);
      if (it != by_text.end()) return it->second;
      return embed_text(model, text);
    };

    MiningConfig mc = cfg_.mining;
    auto result = mine_triplets(train_chunks, index, embedder, mc);
    write_triplets(result.records, path("triplets.jsonl"));
    write_lines(result.skip_log, path("skips.log"));
    return {path("triplets.jsonl"), path("skips.log"), path("embedding_cache.bin")};
  }

  // chunks.jsonl + triplets.jsonl -> checkpoint.bin + loss_trace.csv
  TrainResult run_train() {
    auto all = read_chunks_jsonl(path("chunks.jsonl"));
    std::vector<Chunk> train_chunks, eval_chunks;
    split_chunks(all, &train_chunks, &eval_chunks);
    auto records = read_triplets(path("triplets.jsonl"));

    auto model = init_model(train_chunks);
    TrainConfig tc = cfg_.train;
    auto result = train(model, records, tc);
    save_checkpoint_file(model, path("checkpoint.bin"));
    write_loss_trace(result.trace, path("loss_trace.csv"));
    return result;
  }

  struct EvalOutcome {
    std::vector<MetricReport> reports;  // trained, untrained, bm25
  };

  // chunks.jsonl + checkpoint.bin -> eval fixtures + metrics.{txt,json}
  EvalOutcome run_eval() {
    auto all = read_chunks_jsonl(path("chunks.jsonl"));
    std::vector<Chunk> train_chunks, eval_chunks;
    split_chunks(all, &train_chunks, &eval_chunks);
    if (eval_chunks.empty()) throw IngestionError("eval: holdout split left no evaluation chunks");

    auto trained = load_checkpoint_file<float>(path("checkpoint.bin"));
    auto untrained = init_model(train_chunks);

    // Candidate store: every chunk's full text, plus one "@pos" entry per
    // evaluation chunk holding the chunk minus the sampled pseudo-query.
    std::map<std::string, std::string> store;
    for (const auto& c : all) store[c.id] = c.text();

    std::sort(eval_chunks.begin(), eval_chunks.end(),
              [](const Chunk& a, const Chunk& b) { return a.id < b.id; });
    std::vector<EvalCase> cases;
    Qrels qrels;
    for (const auto& c : eval_chunks) {
      Rng rng(fnv1a(c.id + "#eval") ^ cfg_.seed);
      auto [query, positive] = ict_seed(c, rng);
      std::string pos_id = c.id + "@pos";
      store[pos_id] = positive;

      std::set<std::string> pos_tokens;
      for (auto& t : lowercase_tokens(positive)) pos_tokens.insert(t);
      std::vector<const Chunk*> pool;
      for (const auto& other : all) {
        if (other.doc_id == c.doc_id) continue;
        std::set<std::string> other_tokens;
        for (auto& t : lowercase_tokens(other.text())) other_tokens.insert(t);
        int64_t inter = 0;
        for (const auto& t : other_tokens) inter += pos_tokens.count(t);
        double uni = static_cast<double>(pos_tokens.size() + other_tokens.size() -
                                         static_cast<size_t>(inter));
        if (static_cast<double>(inter) / uni > cfg_.distractor_max_overlap) continue;
        pool.push_back(&other);
      }
      std::vector<size_t> order(pool.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
      EvalCase ec;
      ec.query_id = "q-" + c.id;
      ec.query = query;
      ec.candidate_ids.push_back(pos_id);
      for (size_t i = 0; i < order.size() &&
                         static_cast<int64_t>(ec.candidate_ids.size()) < cfg_.candidates_per_query;
           ++i) {
        ec.candidate_ids.push_back(pool[order[i]]->id);
      }
      std::sort(ec.candidate_ids.begin(), ec.candidate_ids.end());
      cases.push_back(std::move(ec));
      qrels.rows["q-" + c.id][pos_id] = 1;
    }

    write_candidates_jsonl(cases, path("eval_candidates.jsonl"));
    write_qrels_tsv(qrels, path("eval_qrels.tsv"));
    write_text_store(store, path("eval_chunks.jsonl"));

    std::vector<uint64_t> seeds = cfg_.eval_seeds.empty()
                                      ? std::vector<uint64_t>{cfg_.seed}
                                      : cfg_.eval_seeds;

    auto model_scorer = [&store](CrossEncoder<float>& m) {
      return [&store, &m](const EvalCase& c, const std::string& cid) {
        auto it = store.find(cid);
        if (it == store.end()) throw LookupError("eval: no text for candidate '" + cid + "'");
        return static_cast<double>(score(m, tokenize(c.query, m.vocab),
                                         tokenize(it->second, m.vocab)));
      };
    };

    std::vector<Chunk> store_chunks;
    for (const auto& [id, text] : store) {
      Chunk sc;
      sc.id = id;
      sc.doc_id = id;
      sc.sentences = {text};
      sc.token_len = token_count(text);
      store_chunks.push_back(std::move(sc));
    }
    auto bm25_index = bm25_build(store_chunks, cfg_.bm25_k1, cfg_.bm25_b);

    EvalOutcome out;
    out.reports.push_back(evaluate(
        cases, qrels, cfg_.eval_ks, seeds,
        [&](uint64_t) { return model_scorer(trained); }, "trained", cfg_.workers));
    out.reports.push_back(evaluate(
        cases, qrels, cfg_.eval_ks, seeds,
        [&](uint64_t) { return model_scorer(untrained); }, "untrained", cfg_.workers));
    out.reports.push_back(evaluate(
        cases, qrels, cfg_.eval_ks, seeds,
        [&](uint64_t) {
          return [&bm25_index](const EvalCase& c, const std::string& cid) {
            return bm25_index.score_doc(c.query, cid);
          };
        },
        "bm25-only", cfg_.workers));

    std::ofstream t(path("metrics.txt"), std::ios::trunc);
    t << metrics_table(out.reports);
    std::ofstream j(path("metrics.json"), std::ios::trunc);
    j << metrics_json(out.reports).dump(2) << '\n';
    return out;
  }

  // Reranks explicit candidate lists with the trained model; prints and
  // writes one "rank chunk_id score" block per query.
  std::string run_rerank(const std::string& candidates_path, const std::string& store_path,
                         const std::string& checkpoint_path) {
    auto cases = read_candidates_jsonl(candidates_path);
    auto store = read_text_store(store_path);
    auto model = load_checkpoint_file<float>(checkpoint_path);
    std::ostringstream os;
    for (const auto& c : cases) {
      std::vector<std::pair<std::string, double>> scored;
      for (const auto& cid : c.candidate_ids) {
        auto it = store.find(cid);
        if (it == store.end()) throw LookupError("rerank: no text for candidate '" + cid + "'");
        scored.emplace_back(cid, static_cast<double>(score(model, tokenize(c.query, model.vocab),
                                                           tokenize(it->second, model.vocab))));
      }
      auto ranked = rank_candidates(std::move(scored));
      os << "query " << c.query_id << ": " << c.query << '\n';
      for (size_t i = 0; i < ranked.size(); ++i) {
        os << "  " << (i + 1) << ". " << ranked[i].first << "  " << std::fixed
           << std::setprecision(6) << ranked[i].second << '\n';
      }
    }
    std::ofstream f(path("rerank.txt"), std::ios::trunc);
    f << os.str();
    return os.str();
  }

  BenchReport run_bench() {
    CrossEncoder<float> model = std::filesystem::exists(path("checkpoint.bin"))
                                    ? load_checkpoint_file<float>(path("checkpoint.bin"))
                                    : fallback_bench_model();
    auto report = bench(model, cfg_.bench_batch, cfg_.bench_queries, cfg_.bench_hardware,
                        cfg_.seed, cfg_.bench_query_len, cfg_.bench_doc_len);
    std::ofstream t(path("bench.txt"), std::ios::trunc);
    t << BenchReport::csv_header() << '\n' << report.csv_row() << '\n' << '\n' << report.table();
    std::ofstream j(path("bench.json"), std::ios::trunc);
    j << report.to_json().dump(2) << '\n';
    return report;
  }

 private:
  CrossEncoder<float> fallback_bench_model() const {
    std::vector<std::string> words;
    for (int i = 0; i < 512; ++i) words.push_back("w" + std::to_string(i));
    ModelConfig mc = cfg_.model;
    return CrossEncoder<float>::init(mc, Vocab::from_tokens(words), cfg_.seed);
  }

  PipelineConfig cfg_;
  std::string outdir_;
};

}  // namespace blockrank
