#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "blockrank/error.hpp"
#include "blockrank/text.hpp"
#include "blockrank/util.hpp"

namespace blockrank {

struct RawDocument {
  std::string id;
  std::string source;  // wiki | repo | book | other
  std::string text;
};

inline bool valid_source(const std::string& s) {
  return s == "wiki" || s == "repo" || s == "book" || s == "other";
}

struct Chunk {
  std::string id;
  std::string doc_id;
  std::vector<std::string> sentences;
  int64_t token_len = 0;

  std::string text() const {
    std::string out;
    for (size_t i = 0; i < sentences.size(); ++i) {
      if (i) out += ' ';
      out += sentences[i];
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

using RewriteTable = std::vector<std::pair<std::string, std::string>>;

// Old-style tone placement on oa/oe/uy clusters rewritten to the modern
// convention ("hoà" -> "hòa").
inline RewriteTable default_rewrite_table() {
  RewriteTable t = {
      {"oà", "òa"}, {"oá", "óa"}, {"oả", "ỏa"}, {"oã", "õa"}, {"oạ", "ọa"},
      {"oè", "òe"}, {"oé", "óe"}, {"oẻ", "ỏe"}, {"oẽ", "õe"}, {"oẹ", "ọe"},
      {"uỳ", "ùy"}, {"uý", "úy"}, {"uỷ", "ủy"}, {"uỹ", "ũy"}, {"uỵ", "ụy"},
  };
  RewriteTable upper;
  for (const auto& [from, to] : t) {
    std::string fu, tu;
    for (uint32_t cp : utf8_decode_all(from)) utf8_append(fu, to_upper_cp(cp));
    for (uint32_t cp : utf8_decode_all(to)) utf8_append(tu, to_upper_cp(cp));
    upper.emplace_back(fu, tu);
  }
  t.insert(t.end(), upper.begin(), upper.end());
  return t;
}

// Tab-separated "from<TAB>to" pairs, one per line, '#' comments allowed.
inline RewriteTable load_rewrite_table(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingInputError("cannot open rewrite table '" + path + "'");
  RewriteTable t;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("rewrite table: missing tab", lineno);
    t.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return t;
}

// Canonical composition first, then table rewrites applied longest-match-
// first in a single left-to-right pass. Idempotent: rewrite outputs never
// match a rewrite source again.
inline std::string normalize_text(const std::string& text, const RewriteTable& table) {
  utf8_validate(text);
  std::string composed = compose_nfc_vi(text);

  std::vector<size_t> order(table.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (table[a].first.size() != table[b].first.size()) {
      return table[a].first.size() > table[b].first.size();
    }
    return table[a].first < table[b].first;
  });

  std::string out;
  out.reserve(composed.size());
  size_t i = 0;
  while (i < composed.size()) {
    bool rewritten = false;
    for (size_t oi : order) {
      const auto& [from, to] = table[oi];
      if (from.empty() || from.size() > composed.size() - i) continue;
      if (composed.compare(i, from.size(), from) == 0) {
        out += to;
        i += from.size();
        rewritten = true;
        break;
      }
    }
    if (!rewritten) {
      size_t j = i;
      utf8_decode(composed, j);
      out.append(composed, i, j - i);
      i = j;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sentence segmentation
// ---------------------------------------------------------------------------

inline std::vector<std::string> default_abbreviations() {
  return {"TP.", "TS.", "GS.", "PGS.", "ThS.", "BS.", "KS.", "Tr.", "St.",
          "Mr.", "Mrs.", "Dr.", "v.v.", "T.Ư.", "Q.", "P.", "tr."};
}

struct Segmentation {
  std::vector<std::string> sentences;
  // gaps[0] + sentences[0] + gaps[1] + ... + sentences[n-1] + gaps[n]
  // reconstructs the input exactly.
  std::vector<std::string> gaps;

  std::string reconstruct() const {
    std::string out = gaps.empty() ? std::string() : gaps[0];
    for (size_t i = 0; i < sentences.size(); ++i) {
      out += sentences[i];
      out += gaps[i + 1];
    }
    return out;
  }
};

// Splits on '.', '!', '?', '…' followed by whitespace and an uppercase letter
// or digit; words on the abbreviation list suppress the split.
inline Segmentation segment_sentences(const std::string& text,
                                      const std::vector<std::string>& abbreviations =
                                          default_abbreviations()) {
  std::set<std::string> guard(abbreviations.begin(), abbreviations.end());

  struct Cp {
    uint32_t cp;
    size_t begin;
    size_t end;
  };
  std::vector<Cp> cps;
  {
    size_t i = 0;
    while (i < text.size()) {
      size_t b = i;
      uint32_t cp = utf8_decode(text, i);
      cps.push_back({cp, b, i});
    }
  }

  auto is_terminator = [](uint32_t cp) {
    return cp == '.' || cp == '!' || cp == '?' || cp == 0x2026 /* … */;
  };

  Segmentation seg;
  size_t n = cps.size();
  size_t sent_begin = 0;  // codepoint index of current sentence start
  // Leading whitespace is the first gap.
  while (sent_begin < n && is_space_cp(cps[sent_begin].cp)) ++sent_begin;
  seg.gaps.push_back(text.substr(0, sent_begin == 0 ? 0 : cps[sent_begin - 1].end));
  if (sent_begin >= n) {
    if (!text.empty() && seg.gaps[0].empty()) seg.gaps[0] = text;
    return seg;
  }

  for (size_t i = sent_begin; i < n; ++i) {
    if (!is_terminator(cps[i].cp)) continue;
    // Trailing run of terminators ("...", "?!") ends at the last one.
    if (i + 1 < n && is_terminator(cps[i + 1].cp)) continue;
    // Whitespace then uppercase/digit required after the terminator.
    size_t j = i + 1;
    while (j < n && is_space_cp(cps[j].cp)) ++j;
    if (j == i + 1) continue;  // no whitespace after the terminator
    if (j >= n) break;         // trailing gap handled at the end
    if (!is_upper_cp(cps[j].cp) && !is_digit_cp(cps[j].cp)) continue;
    // Abbreviation guard: the word ending at a '.' may be a known shorthand.
    if (cps[i].cp == '.') {
      size_t w = i;
      while (w > sent_begin && !is_space_cp(cps[w - 1].cp)) --w;
      std::string word = text.substr(cps[w].begin, cps[i].end - cps[w].begin);
      if (guard.count(word)) continue;
    }
    seg.sentences.push_back(text.substr(cps[sent_begin].begin, cps[i].end - cps[sent_begin].begin));
    seg.gaps.push_back(text.substr(cps[i].end, cps[j].begin - cps[i].end));
    sent_begin = j;
    i = j - 1;
  }
  // Final sentence: up to the last non-space character.
  size_t last = n;
  while (last > sent_begin && is_space_cp(cps[last - 1].cp)) --last;
  if (last > sent_begin) {
    seg.sentences.push_back(
        text.substr(cps[sent_begin].begin, cps[last - 1].end - cps[sent_begin].begin));
    seg.gaps.push_back(text.substr(cps[last - 1].end));
  } else {
    seg.gaps.back() += text.substr(cps[sent_begin].begin);
  }
  return seg;
}

// ---------------------------------------------------------------------------
// Chunk construction
// ---------------------------------------------------------------------------

struct ChunkResult {
  std::vector<Chunk> chunks;
  std::vector<std::string> discard_log;
};

// Greedy forward merge: sentences accumulate while token_len stays within
// max_len; a closing chunk below min_len (or with fewer than two sentences)
// is discarded and logged, as is any single sentence longer than max_len.
inline ChunkResult chunk_segments(const std::string& doc_id,
                                  const std::vector<std::string>& sentences, int64_t min_len,
                                  int64_t max_len) {
  if (min_len >= max_len) throw ContractError("chunk_segments: min_len must be below max_len");
  ChunkResult res;
  std::vector<std::string> cur;
  int64_t cur_len = 0;
  int ordinal = 0;

  auto flush = [&](const char* why) {
    if (cur.empty()) return;
    if (cur_len >= min_len && cur.size() >= 2) {
      Chunk c;
      char suffix[16];
      std::snprintf(suffix, sizeof(suffix), "#%03d", ordinal++);
      c.id = doc_id + suffix;
      c.doc_id = doc_id;
      c.sentences = cur;
      c.token_len = cur_len;
      res.chunks.push_back(std::move(c));
    } else {
      const char* reason = cur_len < min_len ? "below-min" : "single-sentence";
      res.discard_log.push_back("doc=" + doc_id + " reason=" + reason +
                                " tokens=" + std::to_string(cur_len) +
                                " sentences=" + std::to_string(cur.size()) + " at=" + why);
    }
    cur.clear();
    cur_len = 0;
  };

  for (const auto& s : sentences) {
    int64_t ts = token_count(s);
    if (ts > max_len) {
      res.discard_log.push_back("doc=" + doc_id + " reason=oversize-sentence tokens=" +
                                std::to_string(ts));
      continue;
    }
    if (cur_len + ts > max_len) flush("overflow");
    cur.push_back(s);
    cur_len += ts;
  }
  flush("end");
  return res;
}

// Inverse Cloze Task seed: one sentence sampled uniformly as the pseudo-
// query, the remaining sentences joined in order as the positive.
inline std::pair<std::string, std::string> ict_seed(const Chunk& chunk, Rng& rng) {
  if (chunk.sentences.size() < 2) {
    throw ContractError("ict_seed: chunk must hold at least two sentences");
  }
  size_t pick = rng.index(chunk.sentences.size());
  std::string positive;
  for (size_t i = 0; i < chunk.sentences.size(); ++i) {
    if (i == pick) continue;
    if (!positive.empty()) positive += ' ';
    positive += chunk.sentences[i];
  }
  return {chunk.sentences[pick], positive};
}

// ---------------------------------------------------------------------------
// JSONL input/output
// ---------------------------------------------------------------------------

inline std::vector<RawDocument> read_documents_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingInputError("cannot open corpus '" + path + "'");
  std::vector<RawDocument> docs;
  std::set<std::string> seen;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw ParseError("corpus: malformed JSON", lineno);
    if (!j.contains("id") || !j.contains("source") || !j.contains("text")) {
      throw ParseError("corpus: record needs id/source/text", lineno);
    }
    RawDocument d{j["id"].get<std::string>(), j["source"].get<std::string>(),
                  j["text"].get<std::string>()};
    if (!valid_source(d.source)) {
      throw IngestionError("corpus: unknown source '" + d.source + "' in doc '" + d.id + "'");
    }
    std::string trimmed = d.text;
    trimmed.erase(0, trimmed.find_first_not_of(" \t\r\n"));
    if (trimmed.empty()) throw IngestionError("corpus: doc '" + d.id + "' is empty");
    if (!seen.insert(d.id).second) throw IngestionError("corpus: duplicate doc id '" + d.id + "'");
    docs.push_back(std::move(d));
  }
  return docs;
}

inline void write_documents_jsonl(const std::vector<RawDocument>& docs, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingInputError("cannot open '" + path + "' for writing");
  for (const auto& d : docs) {
    nlohmann::ordered_json j;
    j["id"] = d.id;
    j["source"] = d.source;
    j["text"] = d.text;
    f << j.dump() << '\n';
  }
}

inline void write_chunks_jsonl(const std::vector<Chunk>& chunks, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingInputError("cannot open '" + path + "' for writing");
  for (const auto& c : chunks) {
    nlohmann::ordered_json j;
    j["id"] = c.id;
    j["doc_id"] = c.doc_id;
    j["sentences"] = c.sentences;
    j["token_len"] = c.token_len;
    f << j.dump() << '\n';
  }
}

inline std::vector<Chunk> read_chunks_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingInputError("cannot open chunks '" + path + "'");
  std::vector<Chunk> chunks;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw ParseError("chunks: malformed JSON", lineno);
    for (const char* key : {"id", "doc_id", "sentences", "token_len"}) {
      if (!j.contains(key)) {
        throw ValidationError("chunks: missing key '" + std::string(key) + "' (line " +
                              std::to_string(lineno) + ")");
      }
    }
    Chunk c;
    c.id = j["id"].get<std::string>();
    c.doc_id = j["doc_id"].get<std::string>();
    c.sentences = j["sentences"].get<std::vector<std::string>>();
    c.token_len = j["token_len"].get<int64_t>();
    chunks.push_back(std::move(c));
  }
  return chunks;
}

inline void write_lines(const std::vector<std::string>& lines, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingInputError("cannot open '" + path + "' for writing");
  for (const auto& l : lines) f << l << '\n';
}

}  // namespace blockrank
