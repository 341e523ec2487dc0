#pragma once

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "blockrank/attention.hpp"
#include "blockrank/text.hpp"

namespace blockrank {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

struct Vocab {
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kUnk = 1;
  static constexpr int32_t kCls = 2;
  static constexpr int32_t kSep = 3;

  std::vector<std::string> id_to_token;  // ids 0..3 are the reserved markers
  std::unordered_map<std::string, int32_t> token_to_id;

  int32_t size() const { return static_cast<int32_t>(id_to_token.size()); }

  int32_t lookup(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }

  static Vocab from_tokens(const std::vector<std::string>& content_tokens) {
    Vocab v;
    v.id_to_token = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
    for (const auto& t : content_tokens) v.id_to_token.push_back(t);
    for (size_t i = 0; i < v.id_to_token.size(); ++i) {
      if (!v.token_to_id.emplace(v.id_to_token[i], static_cast<int32_t>(i)).second) {
        throw ContractError("vocab: duplicate token '" + v.id_to_token[i] + "'");
      }
    }
    return v;
  }
};

// Most-frequent lowercased whitespace tokens, ties broken lexicographically.
// `max_size` bounds the content tokens; reserved markers ride on top.
inline Vocab build_vocab(const std::vector<std::string>& texts, size_t max_size) {
  std::map<std::string, int64_t> counts;
  for (const auto& text : texts) {
    for (auto& tok : lowercase_tokens(text)) ++counts[tok];
  }
  if (counts.empty()) throw IngestionError("build_vocab: corpus has no tokens");
  std::vector<std::pair<std::string, int64_t>> sorted(counts.begin(), counts.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (sorted.size() > max_size) sorted.resize(max_size);
  std::vector<std::string> kept;
  kept.reserve(sorted.size());
  for (auto& [tok, cnt] : sorted) kept.push_back(tok);
  return Vocab::from_tokens(kept);
}

inline std::vector<int32_t> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<int32_t> ids;
  for (auto& tok : lowercase_tokens(text)) ids.push_back(vocab.lookup(tok));
  return ids;
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  AttentionConfig attn;
  int64_t n_layers = 2;
  int64_t ffn_multiplier = 4;
  int64_t vocab_size = 0;  // filled when the model is built
  std::vector<int64_t> mlp_head_dims = {32, 1};

  int64_t ffn_hidden() const { return attn.d_model * ffn_multiplier; }

  void validate() const {
    attn.validate();
    if (n_layers <= 0) throw ContractError("model config: n_layers must be positive");
    if (ffn_multiplier <= 0) throw ContractError("model config: ffn_multiplier must be positive");
    if (mlp_head_dims.empty() || mlp_head_dims.back() != 1) {
      throw ContractError("model config: mlp_head_dims must end in 1");
    }
    for (int64_t w : mlp_head_dims) {
      if (w <= 0) throw ContractError("model config: head widths must be positive");
    }
  }

  // Small preset used by tests and the bundled end-to-end run.
  static ModelConfig toy() {
    ModelConfig c;
    c.attn.d_model = 64;
    c.attn.n_heads = 4;
    c.attn.q_chunk = 32;
    c.attn.kv_chunk = 32;
    c.attn.max_seq_len = 256;
    c.n_layers = 2;
    c.ffn_multiplier = 2;
    c.mlp_head_dims = {32, 1};
    return c;
  }

  // Published hyperparameters; model width/depth stay desk-scale.
  static ModelConfig paper() {
    ModelConfig c;
    c.attn.d_model = 256;
    c.attn.n_heads = 32;
    c.attn.q_chunk = 32;
    c.attn.kv_chunk = 32;
    c.attn.max_seq_len = 1024;
    c.n_layers = 4;
    c.ffn_multiplier = 4;
    c.mlp_head_dims = {128, 1};
    return c;
  }
};

// ---------------------------------------------------------------------------
// Cross-encoder
// ---------------------------------------------------------------------------

template <class T>
struct CrossEncoder {
  ModelConfig cfg;
  Vocab vocab;
  Tensor<T> embedding;  // [vocab_size x d_model]
  std::vector<BptLayerParams<T>> layers;
  std::vector<Tensor<T>> head_w;
  std::vector<Tensor<T>> head_b;
  RopeCache<T> rope;
  bool recompute_activations = false;

  static CrossEncoder init(ModelConfig cfg, Vocab vocab, uint64_t seed) {
    cfg.vocab_size = vocab.size();
    cfg.validate();
    CrossEncoder m;
    m.cfg = cfg;
    m.vocab = std::move(vocab);
    Rng rng(seed);
    T g = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.attn.d_model)));
    m.embedding = random_uniform<T>({cfg.vocab_size, cfg.attn.d_model}, -g, g, rng);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      m.layers.push_back(BptLayerParams<T>::init(cfg.attn, cfg.ffn_hidden(), rng));
    }
    int64_t in = cfg.attn.d_model;
    for (int64_t w : cfg.mlp_head_dims) {
      m.head_w.push_back(random_uniform<T>({in, w}, -g, g, rng));
      m.head_b.push_back(Tensor<T>::zeros({w}));
      in = w;
    }
    m.rope = RopeCache<T>::build(cfg.attn.max_seq_len, cfg.attn.head_dim(), cfg.attn.rope_base);
    return m;
  }

  // Fixed walk over every parameter tensor, used by binding, checkpointing
  // and the optimizer.
  template <class F>
  void for_each_param(F&& f) {
    f("embedding", embedding);
    for (size_t l = 0; l < layers.size(); ++l) {
      std::string prefix = "layer" + std::to_string(l) + ".";
      layers[l].for_each([&](const std::string& name, Tensor<T>& t) { f(prefix + name, t); });
    }
    for (size_t i = 0; i < head_w.size(); ++i) {
      f("head_w" + std::to_string(i), head_w[i]);
      f("head_b" + std::to_string(i), head_b[i]);
    }
  }

  int64_t param_count() {
    int64_t n = 0;
    for_each_param([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }

  // [CLS] query [SEP] doc [SEP]; the document is truncated from the end,
  // never the query.
  std::vector<int32_t> pack(const std::vector<int32_t>& query,
                            const std::vector<int32_t>& doc) const {
    int64_t overhead = 3;
    int64_t max_len = cfg.attn.max_seq_len;
    if (static_cast<int64_t>(query.size()) + overhead > max_len) {
      throw LengthError("pack: query alone exceeds max_seq_len " + std::to_string(max_len));
    }
    int64_t doc_budget = max_len - overhead - static_cast<int64_t>(query.size());
    int64_t doc_len = std::min<int64_t>(doc_budget, static_cast<int64_t>(doc.size()));
    std::vector<int32_t> out;
    out.reserve(query.size() + static_cast<size_t>(doc_len) + 3);
    out.push_back(Vocab::kCls);
    out.insert(out.end(), query.begin(), query.end());
    out.push_back(Vocab::kSep);
    out.insert(out.end(), doc.begin(), doc.begin() + doc_len);
    out.push_back(Vocab::kSep);
    return out;
  }
};

// Parameter leaves bound to one tape, in for_each_param order.
template <class T>
struct ModelVars {
  Var<T> embedding;
  std::vector<std::vector<Var<T>>> layer_vars;
  std::vector<Var<T>> head_w, head_b;

  static ModelVars bind(Tape<T>& tape, CrossEncoder<T>& model) {
    ModelVars mv;
    mv.embedding = tape.leaf_external(&model.embedding);
    for (auto& layer : model.layers) {
      std::vector<Var<T>> vars;
      layer.for_each(
          [&](const std::string&, Tensor<T>& t) { vars.push_back(tape.leaf_external(&t)); });
      mv.layer_vars.push_back(std::move(vars));
    }
    for (auto& w : model.head_w) mv.head_w.push_back(tape.leaf_external(&w));
    for (auto& b : model.head_b) mv.head_b.push_back(tape.leaf_external(&b));
    return mv;
  }
};

namespace detail {

template <class T>
struct ForwardOut {
  Var<T> hidden;  // [L x d]
  Var<T> pooled;  // [1 x d]
  std::vector<uint8_t> valid;
};

// Shared trunk: embeddings -> stacked layers -> masked mean pool.
template <class T>
inline ForwardOut<T> forward_trunk(Tape<T>& tape, const CrossEncoder<T>& model_cfg_only,
                                   const ModelVars<T>& mv, const std::vector<int32_t>& ids,
                                   bool recompute) {
  const ModelConfig& cfg = model_cfg_only.cfg;
  int64_t L = static_cast<int64_t>(ids.size());
  if (L == 0) throw LengthError("forward: empty token sequence");
  if (L > cfg.attn.max_seq_len) {
    throw LengthError("forward: sequence length " + std::to_string(L) + " exceeds max_seq_len");
  }
  std::vector<uint8_t> valid(ids.size());
  bool any = false;
  for (size_t i = 0; i < ids.size(); ++i) {
    valid[i] = ids[i] != Vocab::kPad;
    any |= (valid[i] != 0);
  }
  if (!any) throw LengthError("forward: sequence contains only padding");

  auto positions = std::make_shared<const std::vector<int64_t>>([&] {
    std::vector<int64_t> p(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) p[i] = static_cast<int64_t>(i);
    return p;
  }());

  Var<T> x = gather_rows(mv.embedding, ids);
  for (const auto& lv : mv.layer_vars) {
    x = bpt_layer(tape, x, lv, cfg.attn, model_cfg_only.rope, positions, valid, recompute);
  }
  ForwardOut<T> out;
  out.hidden = x;
  out.pooled = masked_mean_rows(x, valid);
  out.valid = std::move(valid);
  return out;
}

template <class T>
inline Var<T> head_apply(const ModelVars<T>& mv, Var<T> h) {
  for (size_t i = 0; i < mv.head_w.size(); ++i) {
    h = add_row(matmul(h, mv.head_w[i]), mv.head_b[i]);
    if (i + 1 < mv.head_w.size()) h = gelu(h);
  }
  return h;
}

}  // namespace detail

// Taped relevance score of a packed (query, doc) pair; scalar var.
template <class T>
inline Var<T> score_taped(Tape<T>& tape, CrossEncoder<T>& model, const ModelVars<T>& mv,
                          const std::vector<int32_t>& query, const std::vector<int32_t>& doc,
                          bool recompute) {
  auto packed = model.pack(query, doc);
  auto trunk = detail::forward_trunk(tape, model, mv, packed, recompute);
  Var<T> s = reshape(detail::head_apply(mv, trunk.pooled), {1});
  ensure_finite(s.v(), "score");
  return s;
}

// Taped sequence embedding ([CLS] text [SEP], mean-pooled final hidden).
template <class T>
inline Var<T> embed_taped(Tape<T>& tape, CrossEncoder<T>& model, const ModelVars<T>& mv,
                          const std::vector<int32_t>& text, bool recompute) {
  if (text.empty()) throw LengthError("embed: empty token sequence");
  if (static_cast<int64_t>(text.size()) + 2 > model.cfg.attn.max_seq_len) {
    throw LengthError("embed: sequence exceeds max_seq_len");
  }
  std::vector<int32_t> packed;
  packed.reserve(text.size() + 2);
  packed.push_back(Vocab::kCls);
  packed.insert(packed.end(), text.begin(), text.end());
  packed.push_back(Vocab::kSep);
  auto trunk = detail::forward_trunk(tape, model, mv, packed, recompute);
  ensure_finite(trunk.pooled.v(), "embed");
  return trunk.pooled;
}

// Inference-path score over token ids (no recording, reentrant).
template <class T>
inline T score(CrossEncoder<T>& model, const std::vector<int32_t>& query,
               const std::vector<int32_t>& doc) {
  Tape<T> tape(false);
  ModelVars<T> mv = ModelVars<T>::bind(tape, model);
  return score_taped(tape, model, mv, query, doc, false).v()[0];
}

template <class T>
inline Tensor<T> embed(CrossEncoder<T>& model, const std::vector<int32_t>& text) {
  Tape<T> tape(false);
  ModelVars<T> mv = ModelVars<T>::bind(tape, model);
  return embed_taped(tape, model, mv, text, false).v();
}

// Hidden states + pooled vector on the inference path (pooling contract is
// testable against a direct average of the returned rows).
template <class T>
inline std::pair<Tensor<T>, Tensor<T>> forward_states(CrossEncoder<T>& model,
                                                      const std::vector<int32_t>& packed) {
  Tape<T> tape(false);
  ModelVars<T> mv = ModelVars<T>::bind(tape, model);
  auto trunk = detail::forward_trunk(tape, model, mv, packed, false);
  return {trunk.hidden.v(), trunk.pooled.v()};
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: versioned, little-endian, bit-exact round trip.
// Layout: magic, version, dtype, config block, vocab block, tensor records
// {name, shape, dtype, raw values}.
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kCkptMagic[8] = {'B', 'R', 'C', 'K', 'P', 'T', '0', '1'};
constexpr uint32_t kCkptVersion = 1;

struct ByteWriter {
  std::string out;
  void raw(const void* p, size_t n) { out.append(static_cast<const char*>(p), n); }
  void u8(uint8_t v) { raw(&v, 1); }
  void u32(uint32_t v) { raw(&v, 4); }
  void i64(int64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

struct ByteReader {
  const std::string& in;
  size_t pos = 0;
  explicit ByteReader(const std::string& s) : in(s) {}
  void raw(void* p, size_t n) {
    if (pos + n > in.size()) throw FormatError("checkpoint: truncated payload");
    std::memcpy(p, in.data() + pos, n);
    pos += n;
  }
  uint8_t u8() {
    uint8_t v;
    raw(&v, 1);
    return v;
  }
  uint32_t u32() {
    uint32_t v;
    raw(&v, 4);
    return v;
  }
  int64_t i64() {
    int64_t v;
    raw(&v, 8);
    return v;
  }
  double f64() {
    double v;
    raw(&v, 8);
    return v;
  }
  std::string str(size_t limit = 1u << 20) {
    uint32_t n = u32();
    if (n > limit || pos + n > in.size()) throw FormatError("checkpoint: bad string length");
    std::string s(in.data() + pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

template <class T>
inline std::string save_checkpoint(CrossEncoder<T>& model) {
  detail::ByteWriter w;
  w.raw(detail::kCkptMagic, 8);
  w.u32(detail::kCkptVersion);
  w.u8(static_cast<uint8_t>(Tensor<T>::dtype()));
  const ModelConfig& c = model.cfg;
  w.i64(c.attn.d_model);
  w.i64(c.attn.n_heads);
  w.i64(c.attn.q_chunk);
  w.i64(c.attn.kv_chunk);
  w.f64(c.attn.rope_base);
  w.i64(c.attn.max_seq_len);
  w.i64(c.n_layers);
  w.i64(c.ffn_multiplier);
  w.i64(c.vocab_size);
  w.u32(static_cast<uint32_t>(c.mlp_head_dims.size()));
  for (int64_t d : c.mlp_head_dims) w.i64(d);

  w.u32(static_cast<uint32_t>(model.vocab.id_to_token.size()));
  for (const auto& tok : model.vocab.id_to_token) w.str(tok);

  uint32_t tensor_count = 0;
  model.for_each_param([&](const std::string&, Tensor<T>&) { ++tensor_count; });
  w.u32(tensor_count);
  model.for_each_param([&](const std::string& name, Tensor<T>& t) {
    w.str(name);
    w.u8(static_cast<uint8_t>(t.shape.size()));
    for (int64_t d : t.shape) w.i64(d);
    w.u8(static_cast<uint8_t>(Tensor<T>::dtype()));
    w.raw(t.data.data(), t.data.size() * sizeof(T));
  });
  return std::move(w.out);
}

template <class T>
inline CrossEncoder<T> load_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, detail::kCkptMagic, 8) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  uint32_t version = r.u32();
  if (version != detail::kCkptVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  uint8_t dtype = r.u8();
  if (dtype != static_cast<uint8_t>(Tensor<T>::dtype())) {
    throw FormatError(std::string("checkpoint: dtype is ") +
                      dtype_name(static_cast<Dtype>(dtype)) + ", expected " +
                      dtype_name(Tensor<T>::dtype()));
  }
  ModelConfig cfg;
  cfg.attn.d_model = r.i64();
  cfg.attn.n_heads = r.i64();
  cfg.attn.q_chunk = r.i64();
  cfg.attn.kv_chunk = r.i64();
  cfg.attn.rope_base = r.f64();
  cfg.attn.max_seq_len = r.i64();
  cfg.n_layers = r.i64();
  cfg.ffn_multiplier = r.i64();
  cfg.vocab_size = r.i64();
  uint32_t nhd = r.u32();
  if (nhd == 0 || nhd > 16) throw FormatError("checkpoint: bad head layout");
  cfg.mlp_head_dims.clear();
  for (uint32_t i = 0; i < nhd; ++i) cfg.mlp_head_dims.push_back(r.i64());
  cfg.validate();

  uint32_t vocab_count = r.u32();
  if (vocab_count < 4 || static_cast<int64_t>(vocab_count) != cfg.vocab_size) {
    throw FormatError("checkpoint: vocab size disagrees with config");
  }
  std::vector<std::string> tokens;
  tokens.reserve(vocab_count);
  for (uint32_t i = 0; i < vocab_count; ++i) tokens.push_back(r.str());
  Vocab vocab;
  vocab.id_to_token = std::move(tokens);
  for (size_t i = 0; i < vocab.id_to_token.size(); ++i) {
    if (!vocab.token_to_id.emplace(vocab.id_to_token[i], static_cast<int32_t>(i)).second) {
      throw FormatError("checkpoint: duplicate vocab token");
    }
  }

  CrossEncoder<T> model = CrossEncoder<T>::init(cfg, std::move(vocab), 0);
  uint32_t tensor_count = r.u32();
  uint32_t expected = 0;
  model.for_each_param([&](const std::string&, Tensor<T>&) { ++expected; });
  if (tensor_count != expected) throw FormatError("checkpoint: tensor count mismatch");

  std::unordered_map<std::string, Tensor<T>*> slots;
  model.for_each_param([&](const std::string& name, Tensor<T>& t) { slots[name] = &t; });
  for (uint32_t i = 0; i < tensor_count; ++i) {
    std::string name = r.str();
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("checkpoint: unknown tensor '" + name + "'");
    uint8_t ndim = r.u8();
    if (ndim == 0 || ndim > 4) throw FormatError("checkpoint: bad rank for '" + name + "'");
    std::vector<int64_t> shape;
    for (uint8_t d = 0; d < ndim; ++d) {
      int64_t dim = r.i64();
      if (dim <= 0 || dim > (int64_t(1) << 32)) {
        throw FormatError("checkpoint: corrupt shape for '" + name + "'");
      }
      shape.push_back(dim);
    }
    if (shape != it->second->shape) {
      throw FormatError("checkpoint: shape mismatch for '" + name + "'");
    }
    uint8_t td = r.u8();
    if (td != static_cast<uint8_t>(Tensor<T>::dtype())) {
      throw FormatError("checkpoint: tensor dtype mismatch for '" + name + "'");
    }
    r.raw(it->second->data.data(), it->second->data.size() * sizeof(T));
    if (!all_finite(*it->second)) {
      throw FormatError("checkpoint: non-finite values in '" + name + "'");
    }
  }
  return model;
}

template <class T>
inline void save_checkpoint_file(CrossEncoder<T>& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingInputError("cannot open '" + path + "' for writing");
  std::string bytes = save_checkpoint(model);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("short write to '" + path + "'");
}

template <class T>
inline CrossEncoder<T> load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInputError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return load_checkpoint<T>(bytes);
}

}  // namespace blockrank
