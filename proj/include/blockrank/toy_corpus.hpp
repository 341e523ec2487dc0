#pragma once

#include <string>
#include <vector>

#include "blockrank/corpus.hpp"
#include "blockrank/text.hpp"
#include "blockrank/util.hpp"

namespace blockrank {

// Bundled synthetic corpus: 200 short topic-coherent documents with
// Vietnamese-style vocabulary. Each topic owns six content words plus three
// rarer alias words that appear in alias-only sentences; a handful of words
// are emitted in old-style tone spelling so the normalization stage has real
// work to do.
namespace toycorpus {

struct Topic {
  const char* content[6];
  const char* alias[3];
};

inline const std::vector<Topic>& topics() {
  static const std::vector<Topic> t = {
      {{"sông", "núi", "rừng", "thác", "suối", "đèo"}, {"ngọn", "dòng", "vách"}},
      {{"phố", "chợ", "quán", "ngõ", "tiệm", "vỉa"}, {"sạp", "gánh", "hẻm"}},
      {{"sách", "báo", "truyện", "thơ", "văn", "chữ"}, {"trang", "bìa", "mực"}},
      {{"máy", "mạng", "chip", "lệnh", "phím", "chuột"}, {"mã", "web", "tệp"}},
      {{"bóng", "sân", "gôn", "lưới", "đội", "giải"}, {"trận", "thắng", "thua"}},
      {{"nhạc", "đàn", "hát", "ca", "loa", "trống"}, {"giai", "điệu", "nốt"}},
      {{"cơm", "phở", "bún", "nêm", "chảo", "nồi"}, {"món", "bếp", "vị"}},
      {{"thuốc", "bệnh", "viện", "khám", "tim", "phổi"}, {"y", "tá", "liều"}},
      {{"trường", "lớp", "thầy", "cô", "trò", "bài"}, {"vở", "phấn", "bảng"}},
      {{"mưa", "nắng", "gió", "bão", "mây", "sương"}, {"nhiệt", "ẩm", "hạn"}},
      {{"du", "khách", "vé", "tour", "đảo", "vịnh"}, {"hành", "lý", "trạm"}},
      {{"lúa", "ruộng", "trâu", "cày", "gặt", "thóc"}, {"vụ", "phân", "giống"}},
      {{"xe", "tàu", "cầu", "bến", "ga", "xăng"}, {"lái", "bánh", "còi"}},
      {{"lễ", "hội", "tết", "pháo", "đình", "chùa"}, {"rước", "kiệu", "cỗ"}},
  };
  return t;
}

inline const std::vector<std::string>& fillers() {
  static const std::vector<std::string> f = {
      "và",  "của",  "là",   "có",  "được", "trong", "với", "cho",
      "đã",  "sẽ",   "này",  "đó",  "rất",  "nhiều", "người", "ngày",
      "năm", "khi",  "vì",   "nên", "còn",  "cũng",  "về",  "theo"};
  return f;
}

// Pairs written old-style part of the time; normalization folds them.
struct SpellPair {
  const char* modern;
  const char* old_style;
};

inline const std::vector<SpellPair>& spell_pairs() {
  static const std::vector<SpellPair> p = {
      {"hòa", "hoà"}, {"khỏe", "khoẻ"}, {"thủy", "thuỷ"}, {"lũy", "luỹ"}};
  return p;
}

// Name-like tokens; each document owns two, sprinkled through its content
// sentences as its anchor entities.
inline std::vector<std::string> entity_bank() {
  const char* first[] = {"minh", "lan",  "hùng", "sơn",  "thu",  "hải", "phúc",
                         "tâm",  "quang", "ngọc", "dũng", "trang", "việt", "hạnh",
                         "khang", "nhung", "tuấn", "diễm", "bảo",  "oanh"};
  const char* second[] = {"an",  "bình", "cát",  "dương", "em",  "giang", "hà",
                          "khê", "linh", "my",   "nam",   "oai", "phương", "quyên",
                          "ry",  "sa",   "thi",  "uyên",  "vy",  "xuân"};
  std::vector<std::string> out;
  for (const char* a : first) {
    for (const char* b : second) out.push_back(std::string(a) + b);
  }
  return out;
}

}  // namespace toycorpus

// Deterministic 200-document corpus. Sentences come in two flavors: content
// sentences mixing the topic's main words with fillers, and alias sentences
// built only from the topic's alias words and fillers (no main words), so
// lexical overlap alone cannot resolve alias-flavored pseudo-queries.
inline std::vector<RawDocument> make_toy_corpus(uint64_t seed = 2024, int64_t n_docs = 200) {
  const auto& topics = toycorpus::topics();
  const auto& fill = toycorpus::fillers();
  const auto& spells = toycorpus::spell_pairs();
  auto entities = toycorpus::entity_bank();
  Rng rng(seed);
  rng.shuffle(entities);

  const char* sources[4] = {"wiki", "repo", "book", "other"};

  auto capitalize = [](std::string word) {
    size_t i = 0;
    uint32_t cp = utf8_decode(word, i);
    std::string out;
    utf8_append(out, to_upper_cp(cp));
    out += word.substr(i);
    return out;
  };

  std::vector<RawDocument> docs;
  docs.reserve(static_cast<size_t>(n_docs));
  for (int64_t d = 0; d < n_docs; ++d) {
    size_t topic_idx = static_cast<size_t>(d) % topics.size();
    const auto& topic = topics[topic_idx];

    int n_sentences = 16 + static_cast<int>(rng.index(9));
    // Alias sentences are spaced out so a chunk rarely holds more than one:
    // its alias words then never recur in the chunk remainder.
    std::set<int> alias_at;
    for (int at = 1 + static_cast<int>(rng.index(3)); at < n_sentences;
         at += 5 + static_cast<int>(rng.index(3))) {
      alias_at.insert(at);
    }
    std::vector<std::string> sentences;
    std::set<std::string> seen;
    // Anchor entities rotate every few sentences so neighboring chunks of
    // the same document end up with distinct name pairs.
    std::string ent_a, ent_b;
    while (static_cast<int>(sentences.size()) < n_sentences) {
      if (sentences.size() % 5 == 0 || ent_a.empty()) {
        ent_a = entities[rng.index(entities.size())];
        ent_b = entities[rng.index(entities.size())];
      }
      bool alias_sentence = alias_at.count(static_cast<int>(sentences.size())) > 0;
      int n_words = 7 + static_cast<int>(rng.index(7));
      std::vector<std::string> words;
      for (int w = 0; w < n_words; ++w) {
        double roll = rng.uniform();
        if (alias_sentence) {
          // Alias sentences carry no content or entity words at all.
          if (roll < 0.50) {
            words.push_back(topic.alias[rng.index(3)]);
          } else if (roll < 0.55) {
            const auto& sp = spells[rng.index(spells.size())];
            words.push_back(rng.uniform() < 0.5 ? sp.old_style : sp.modern);
          } else {
            words.push_back(fill[rng.index(fill.size())]);
          }
        } else {
          if (roll < 0.48) {
            words.push_back(topic.content[rng.index(6)]);
          } else if (roll < 0.60) {
            words.push_back(rng.uniform() < 0.5 ? ent_a : ent_b);
          } else if (roll < 0.64) {
            const auto& sp = spells[rng.index(spells.size())];
            words.push_back(rng.uniform() < 0.5 ? sp.old_style : sp.modern);
          } else {
            words.push_back(fill[rng.index(fill.size())]);
          }
        }
      }
      std::string sent = capitalize(words[0]);
      for (size_t w = 1; w < words.size(); ++w) {
        sent += ' ';
        sent += words[w];
      }
      double endroll = rng.uniform();
      sent += endroll < 0.82 ? "." : (endroll < 0.92 ? "?" : "!");
      if (!seen.insert(sent).second) continue;  // regenerate duplicates
      sentences.push_back(sent);
    }

    RawDocument doc;
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "d%04d", static_cast<int>(d));
    doc.id = idbuf;
    doc.source = sources[d % 4];
    std::string text;
    for (size_t s = 0; s < sentences.size(); ++s) {
      if (s) text += ' ';
      text += sentences[s];
    }
    doc.text = text;
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace blockrank
