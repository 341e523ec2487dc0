#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "blockrank/mining.hpp"
#include "blockrank/model.hpp"
#include "blockrank/training.hpp"
#include "blockrank/util.hpp"

namespace blockrank {

// Flat key-value configuration with one section per module, resolved from a
// named preset, an optional file, and repeatable key overrides, in that
// order. Unknown keys are rejected with their full path.
class PipelineConfig {
 public:
  // -- resolved typed view --
  uint64_t seed = 42;
  std::string corpus_path = "data/toy_corpus.jsonl";
  double holdout_fraction = 0.15;
  int64_t candidates_per_query = 8;
  double distractor_max_overlap = 0.2;
  int workers = 1;

  int64_t chunk_min_tokens = 32;
  int64_t chunk_max_tokens = 64;
  std::string rewrite_table = "builtin";
  std::string abbreviations = "builtin";

  ModelConfig model;
  int64_t vocab_max = 4000;

  TrainConfig train;

  MiningConfig mining;
  double bm25_k1 = 1.2;
  double bm25_b = 0.75;

  std::vector<int64_t> eval_ks = {3, 5, 10};
  std::vector<uint64_t> eval_seeds;  // empty: use the pipeline seed

  int64_t bench_batch = 8;
  int64_t bench_queries = 128;
  std::string bench_hardware = "cpu";
  int64_t bench_query_len = 8;
  int64_t bench_doc_len = 48;

  std::string preset_name = "toy";

  const std::map<std::string, std::string>& resolved() const { return kv_; }

  std::string canonical_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : kv_) os << k << '=' << v << '\n';
    return os.str();
  }

  std::string hash() const { return to_hex(fnv1a(canonical_text())); }

  static std::map<std::string, std::string> preset(const std::string& name) {
    std::map<std::string, std::string> kv = {
        {"pipeline.seed", "42"},
        {"pipeline.corpus", "data/toy_corpus.jsonl"},
        {"pipeline.holdout_fraction", "0.15"},
        {"pipeline.candidates_per_query", "8"},
        {"pipeline.distractor_max_overlap", "0.2"},
        {"pipeline.workers", "1"},
        {"corpus.chunk_min_tokens", "32"},
        {"corpus.chunk_max_tokens", "64"},
        {"corpus.rewrite_table", "builtin"},
        {"corpus.abbreviations", "builtin"},
        {"model.d_model", "64"},
        {"model.n_heads", "4"},
        {"model.n_layers", "2"},
        {"model.ffn_multiplier", "2"},
        {"model.q_chunk", "32"},
        {"model.kv_chunk", "32"},
        {"model.rope_base", "10000"},
        {"model.max_seq_len", "256"},
        {"model.vocab_max", "4000"},
        {"model.mlp_head_dims", "32,1"},
        {"train.learning_rate", "0.5"},
        {"train.epochs", "16"},
        {"train.batch_size", "8"},
        {"train.grad_accum_steps", "1"},
        {"train.scheduler", "cosine"},
        {"train.margin", "1"},
        {"train.memory_bank_size", "64"},
        {"train.memory_bank_weight", "0"},
        {"train.recompute_activations", "false"},
        {"mining.k", "20"},
        {"mining.lambda", "0.5"},
        {"mining.m", "3"},
        {"mining.selection", "mmr"},
        {"mining.mmr_pool", "6"},
        {"mining.bm25_k1", "1.2"},
        {"mining.bm25_b", "0.75"},
        {"eval.ks", "3,5,10"},
        {"eval.seeds", ""},
        {"bench.batch_size", "8"},
        {"bench.n_queries", "128"},
        {"bench.hardware_label", "cpu"},
        {"bench.query_len", "8"},
        {"bench.doc_len", "48"},
    };
    if (name == "toy") return kv;
    if (name == "paper") {
      kv["corpus.chunk_min_tokens"] = "512";
      kv["corpus.chunk_max_tokens"] = "1024";
      kv["model.d_model"] = "256";
      kv["model.n_heads"] = "32";
      kv["model.n_layers"] = "4";
      kv["model.q_chunk"] = "32";
      kv["model.kv_chunk"] = "32";
      kv["model.max_seq_len"] = "1024";
      kv["model.vocab_max"] = "50000";
      kv["model.mlp_head_dims"] = "128,1";
      kv["train.learning_rate"] = "5e-05";
      kv["train.epochs"] = "10";
      kv["train.batch_size"] = "512";
      kv["train.grad_accum_steps"] = "2";
      kv["train.memory_bank_size"] = "512";
      kv["train.memory_bank_weight"] = "0.5";
      kv["train.recompute_activations"] = "true";
      kv["bench.batch_size"] = "32";
      kv["bench.doc_len"] = "960";
      return kv;
    }
    throw ConfigError("unknown preset '" + name + "'", "preset");
  }

  static PipelineConfig resolve(const std::string& preset_name,
                                const std::optional<std::string>& config_path,
                                const std::vector<std::string>& overrides,
                                std::optional<uint64_t> seed_flag = std::nullopt,
                                std::optional<std::string> out_dir = std::nullopt) {
    (void)out_dir;
    std::map<std::string, std::string> kv = preset(preset_name);
    if (config_path) apply_file(kv, *config_path);
    for (const auto& ov : overrides) apply_override(kv, ov);
    if (seed_flag) kv["pipeline.seed"] = std::to_string(*seed_flag);
    PipelineConfig cfg;
    cfg.preset_name = preset_name;
    cfg.kv_ = std::move(kv);
    cfg.materialize();
    return cfg;
  }

 private:
  std::map<std::string, std::string> kv_;

  static void require_known(const std::map<std::string, std::string>& base,
                            const std::string& key) {
    if (!base.count(key)) throw ConfigError("unknown config key '" + key + "'", key);
  }

  static void apply_file(std::map<std::string, std::string>& kv, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingInputError("cannot open config '" + path + "'");
    std::string line, section;
    size_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      std::string s = line;
      size_t hash = s.find_first_of("#;");
      if (hash != std::string::npos) s.resize(hash);
      auto trim = [](std::string& t) {
        t.erase(0, t.find_first_not_of(" \t\r"));
        t.erase(t.find_last_not_of(" \t\r") + 1);
      };
      trim(s);
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']') {
          throw ConfigError("bad section header at line " + std::to_string(lineno),
                            "line:" + std::to_string(lineno));
        }
        section = s.substr(1, s.size() - 2);
        continue;
      }
      size_t eq = s.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("expected key=value at line " + std::to_string(lineno),
                          "line:" + std::to_string(lineno));
      }
      std::string key = s.substr(0, eq);
      std::string value = s.substr(eq + 1);
      trim(key);
      trim(value);
      std::string full = section.empty() ? key : section + "." + key;
      require_known(kv, full);
      kv[full] = value;
    }
  }

  static void apply_override(std::map<std::string, std::string>& kv, const std::string& ov) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("override must look like section.key=value, got '" + ov + "'", ov);
    }
    std::string key = ov.substr(0, eq);
    require_known(kv, key);
    kv[key] = ov.substr(eq + 1);
  }

  int64_t get_i64(const std::string& key) const {
    try {
      size_t used = 0;
      int64_t v = std::stoll(kv_.at(key), &used);
      if (used != kv_.at(key).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (...) {
      throw ConfigError("config key '" + key + "' must be an integer, got '" + kv_.at(key) + "'",
                        key);
    }
  }

  double get_f64(const std::string& key) const {
    try {
      size_t used = 0;
      double v = std::stod(kv_.at(key), &used);
      if (used != kv_.at(key).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (...) {
      throw ConfigError("config key '" + key + "' must be a number, got '" + kv_.at(key) + "'",
                        key);
    }
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = kv_.at(key);
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("config key '" + key + "' must be a boolean, got '" + v + "'", key);
  }

  template <class V>
  std::vector<V> get_list(const std::string& key) const {
    std::vector<V> out;
    std::stringstream ss(kv_.at(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      try {
        out.push_back(static_cast<V>(std::stoll(item)));
      } catch (...) {
        throw ConfigError("config key '" + key + "' must be a comma list of integers", key);
      }
    }
    return out;
  }

  void materialize() {
    seed = static_cast<uint64_t>(get_i64("pipeline.seed"));
    corpus_path = kv_.at("pipeline.corpus");
    holdout_fraction = get_f64("pipeline.holdout_fraction");
    candidates_per_query = get_i64("pipeline.candidates_per_query");
    distractor_max_overlap = get_f64("pipeline.distractor_max_overlap");
    workers = static_cast<int>(get_i64("pipeline.workers"));
    if (holdout_fraction <= 0 || holdout_fraction >= 1) {
      throw ConfigError("pipeline.holdout_fraction must be in (0, 1)", "pipeline.holdout_fraction");
    }
    if (candidates_per_query < 2) {
      throw ConfigError("pipeline.candidates_per_query must be at least 2",
                        "pipeline.candidates_per_query");
    }

    chunk_min_tokens = get_i64("corpus.chunk_min_tokens");
    chunk_max_tokens = get_i64("corpus.chunk_max_tokens");
    if (chunk_min_tokens >= chunk_max_tokens) {
      throw ConfigError("corpus.chunk_min_tokens must be below corpus.chunk_max_tokens",
                        "corpus.chunk_min_tokens");
    }
    rewrite_table = kv_.at("corpus.rewrite_table");
    abbreviations = kv_.at("corpus.abbreviations");

    model.attn.d_model = get_i64("model.d_model");
    model.attn.n_heads = get_i64("model.n_heads");
    model.n_layers = get_i64("model.n_layers");
    model.ffn_multiplier = get_i64("model.ffn_multiplier");
    model.attn.q_chunk = get_i64("model.q_chunk");
    model.attn.kv_chunk = get_i64("model.kv_chunk");
    model.attn.rope_base = get_f64("model.rope_base");
    model.attn.max_seq_len = get_i64("model.max_seq_len");
    vocab_max = get_i64("model.vocab_max");
    model.mlp_head_dims = get_list<int64_t>("model.mlp_head_dims");
    try {
      model.attn.validate();
      if (model.mlp_head_dims.empty() || model.mlp_head_dims.back() != 1) {
        throw ContractError("mlp_head_dims must end in 1");
      }
    } catch (const ContractError& e) {
      throw ConfigError(std::string("model config invalid: ") + e.what(), "model");
    }

    train.learning_rate = get_f64("train.learning_rate");
    train.epochs = get_i64("train.epochs");
    train.batch_size = get_i64("train.batch_size");
    train.grad_accum_steps = get_i64("train.grad_accum_steps");
    train.scheduler = kv_.at("train.scheduler");
    train.margin = get_f64("train.margin");
    train.memory_bank_size = get_i64("train.memory_bank_size");
    train.memory_bank_weight = get_f64("train.memory_bank_weight");
    train.recompute_activations = get_bool("train.recompute_activations");
    train.seed = seed;
    try {
      train.validate();
    } catch (const ContractError& e) {
      throw ConfigError(std::string("train config invalid: ") + e.what(), "train");
    }

    mining.k = get_i64("mining.k");
    mining.lambda = get_f64("mining.lambda");
    mining.m = get_i64("mining.m");
    mining.selection = kv_.at("mining.selection");
    mining.mmr_pool = get_i64("mining.mmr_pool");
    mining.seed = seed;
    bm25_k1 = get_f64("mining.bm25_k1");
    bm25_b = get_f64("mining.bm25_b");
    if (mining.selection != "mmr" && mining.selection != "dense_after_mmr") {
      throw ConfigError("mining.selection must be mmr or dense_after_mmr", "mining.selection");
    }

    eval_ks = get_list<int64_t>("eval.ks");
    if (eval_ks.empty()) throw ConfigError("eval.ks must not be empty", "eval.ks");
    eval_seeds = get_list<uint64_t>("eval.seeds");

    bench_batch = get_i64("bench.batch_size");
    bench_queries = get_i64("bench.n_queries");
    bench_hardware = kv_.at("bench.hardware_label");
    bench_query_len = get_i64("bench.query_len");
    bench_doc_len = get_i64("bench.doc_len");
  }
};

// Run manifest: resolved configuration, its hash, and the artifacts a
// command produced.
inline void write_manifest(const PipelineConfig& cfg, const std::string& command,
                           const std::vector<std::string>& artifacts, const std::string& path) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["preset"] = cfg.preset_name;
  j["config_hash"] = cfg.hash();
  nlohmann::ordered_json resolved;
  for (const auto& [k, v] : cfg.resolved()) resolved[k] = v;
  j["config"] = resolved;
  j["artifacts"] = artifacts;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingInputError("cannot open '" + path + "' for writing");
  f << j.dump(2) << '\n';
}

}  // namespace blockrank
