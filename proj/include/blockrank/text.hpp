#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "blockrank/error.hpp"

namespace blockrank {

// UTF-8 and Vietnamese-alphabet helpers. Composition and case mapping cover
// ASCII plus the full Vietnamese letter inventory (the Latin-1/Extended-A/
// Extended-Additional ranges it draws from); other scripts pass through.

inline uint32_t utf8_decode(const std::string& s, size_t& i) {
  auto fail = [&](const char* why) -> uint32_t {
    throw EncodingError(std::string("invalid UTF-8: ") + why, i);
  };
  unsigned char c0 = static_cast<unsigned char>(s[i]);
  if (c0 < 0x80) {
    i += 1;
    return c0;
  }
  int extra;
  uint32_t cp;
  if ((c0 & 0xE0) == 0xC0) {
    extra = 1;
    cp = c0 & 0x1F;
  } else if ((c0 & 0xF0) == 0xE0) {
    extra = 2;
    cp = c0 & 0x0F;
  } else if ((c0 & 0xF8) == 0xF0) {
    extra = 3;
    cp = c0 & 0x07;
  } else {
    return fail("bad lead byte");
  }
  if (i + static_cast<size_t>(extra) >= s.size()) return fail("truncated sequence");
  for (int k = 1; k <= extra; ++k) {
    unsigned char cc = static_cast<unsigned char>(s[i + static_cast<size_t>(k)]);
    if ((cc & 0xC0) != 0x80) return fail("bad continuation byte");
    cp = (cp << 6) | (cc & 0x3F);
  }
  // Reject overlong forms and surrogates.
  if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) || (extra == 3 && cp < 0x10000)) {
    return fail("overlong encoding");
  }
  if (cp >= 0xD800 && cp <= 0xDFFF) return fail("surrogate code point");
  if (cp > 0x10FFFF) return fail("code point out of range");
  i += static_cast<size_t>(extra) + 1;
  return cp;
}

inline void utf8_append(std::string& out, uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::vector<uint32_t> utf8_decode_all(const std::string& s) {
  std::vector<uint32_t> cps;
  cps.reserve(s.size());
  size_t i = 0;
  while (i < s.size()) cps.push_back(utf8_decode(s, i));
  return cps;
}

inline std::string utf8_encode_all(const std::vector<uint32_t>& cps) {
  std::string out;
  out.reserve(cps.size() * 2);
  for (uint32_t cp : cps) utf8_append(out, cp);
  return out;
}

inline void utf8_validate(const std::string& s) {
  size_t i = 0;
  while (i < s.size()) utf8_decode(s, i);
}

inline uint32_t to_lower_cp(uint32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 32;
  if (cp >= 0x00C0 && cp <= 0x00DE && cp != 0x00D7) return cp + 0x20;
  if (cp >= 0x0100 && cp <= 0x017F) return (cp % 2 == 0) ? cp + 1 : cp;
  if (cp == 0x01A0 || cp == 0x01AF) return cp + 1;
  if (cp >= 0x1E00 && cp <= 0x1EFF) return (cp % 2 == 0) ? cp + 1 : cp;
  return cp;
}

inline uint32_t to_upper_cp(uint32_t cp) {
  if (cp >= 'a' && cp <= 'z') return cp - 32;
  if (cp >= 0x00E0 && cp <= 0x00FE && cp != 0x00F7) return cp - 0x20;
  if (cp >= 0x0100 && cp <= 0x017F) return (cp % 2 == 1) ? cp - 1 : cp;
  if (cp == 0x01A1 || cp == 0x01B0) return cp - 1;
  if (cp >= 0x1E00 && cp <= 0x1EFF) return (cp % 2 == 1) ? cp - 1 : cp;
  return cp;
}

inline bool is_upper_cp(uint32_t cp) { return cp != to_lower_cp(cp); }
inline bool is_digit_cp(uint32_t cp) { return cp >= '0' && cp <= '9'; }
inline bool is_space_cp(uint32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\v' || cp == '\f';
}

namespace detail {

// Pairwise canonical composition table for the Vietnamese alphabet:
// (starter, combining mark) -> composed letter.
inline const std::unordered_map<uint64_t, uint32_t>& vi_compose_table() {
  static const std::unordered_map<uint64_t, uint32_t> table = [] {
    std::unordered_map<uint64_t, uint32_t> t;
    auto key = [](uint32_t base, uint32_t mark) {
      return (static_cast<uint64_t>(base) << 32) | mark;
    };
    auto put = [&](uint32_t base, uint32_t mark, uint32_t composed) {
      t[key(base, mark)] = composed;
      t[key(to_upper_cp(base), mark)] = to_upper_cp(composed);
    };
    // Tone marks in the order grave, acute, tilde, hook above, dot below.
    const uint32_t tones[5] = {0x0300, 0x0301, 0x0303, 0x0309, 0x0323};
    auto tone_row = [&](uint32_t base, std::initializer_list<uint32_t> composed) {
      int k = 0;
      for (uint32_t c : composed) put(base, tones[k++], c);
    };
    tone_row(U'a', {0x00E0, 0x00E1, 0x00E3, 0x1EA3, 0x1EA1});
    tone_row(0x0103 /*ă*/, {0x1EB1, 0x1EAF, 0x1EB5, 0x1EB3, 0x1EB7});
    tone_row(0x00E2 /*â*/, {0x1EA7, 0x1EA5, 0x1EAB, 0x1EA9, 0x1EAD});
    tone_row(U'e', {0x00E8, 0x00E9, 0x1EBD, 0x1EBB, 0x1EB9});
    tone_row(0x00EA /*ê*/, {0x1EC1, 0x1EBF, 0x1EC5, 0x1EC3, 0x1EC7});
    tone_row(U'i', {0x00EC, 0x00ED, 0x0129, 0x1EC9, 0x1ECB});
    tone_row(U'o', {0x00F2, 0x00F3, 0x00F5, 0x1ECF, 0x1ECD});
    tone_row(0x00F4 /*ô*/, {0x1ED3, 0x1ED1, 0x1ED7, 0x1ED5, 0x1ED9});
    tone_row(0x01A1 /*ơ*/, {0x1EDD, 0x1EDB, 0x1EE1, 0x1EDF, 0x1EE3});
    tone_row(U'u', {0x00F9, 0x00FA, 0x0169, 0x1EE7, 0x1EE5});
    tone_row(0x01B0 /*ư*/, {0x1EEB, 0x1EE9, 0x1EEF, 0x1EED, 0x1EF1});
    tone_row(U'y', {0x1EF3, 0x00FD, 0x1EF9, 0x1EF7, 0x1EF5});
    // Shape modifiers.
    put(U'a', 0x0302, 0x00E2);  // circumflex
    put(U'a', 0x0306, 0x0103);  // breve
    put(U'e', 0x0302, 0x00EA);
    put(U'o', 0x0302, 0x00F4);
    put(U'o', 0x031B, 0x01A1);  // horn
    put(U'u', 0x031B, 0x01B0);
    return t;
  }();
  return table;
}

}  // namespace detail

// Canonical composition over the Vietnamese table: combining marks following
// a known starter are folded into precomposed letters, applied repeatedly so
// "a + circumflex + acute" lands on a single code point.
inline std::string compose_nfc_vi(const std::string& s) {
  std::vector<uint32_t> cps = utf8_decode_all(s);
  const auto& table = detail::vi_compose_table();
  std::vector<uint32_t> out;
  out.reserve(cps.size());
  for (uint32_t cp : cps) {
    if (!out.empty()) {
      uint64_t k = (static_cast<uint64_t>(out.back()) << 32) | cp;
      auto it = table.find(k);
      if (it != table.end()) {
        out.back() = it->second;
        continue;
      }
    }
    out.push_back(cp);
  }
  return utf8_encode_all(out);
}

inline std::string lowercase(const std::string& s) {
  std::vector<uint32_t> cps = utf8_decode_all(s);
  for (auto& cp : cps) cp = to_lower_cp(cp);
  return utf8_encode_all(cps);
}

// Whitespace-delimited, lowercased tokens; the single token convention used
// everywhere chunk-length rules apply.
inline std::vector<std::string> lowercase_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  size_t i = 0;
  while (i < text.size()) {
    size_t before = i;
    uint32_t cp = utf8_decode(text, i);
    if (is_space_cp(cp)) {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    } else {
      (void)before;
      utf8_append(cur, to_lower_cp(cp));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline int64_t token_count(const std::string& text) {
  int64_t n = 0;
  bool in_tok = false;
  size_t i = 0;
  while (i < text.size()) {
    uint32_t cp = utf8_decode(text, i);
    if (is_space_cp(cp)) {
      in_tok = false;
    } else if (!in_tok) {
      in_tok = true;
      ++n;
    }
  }
  return n;
}

}  // namespace blockrank
