#pragma once

// Canonical 24-letter Greek alphabet and transcription canonicalization.
// The canonical label space is lowercase alpha..omega in alphabetical order,
// final sigma folded into sigma. Everything label-related (presence vectors,
// head assignment, per-letter metrics) indexes into this order.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "neuropapyri/common.hpp"

namespace npap::greek {

inline constexpr int kNumLetters = 24;
inline constexpr const char* kCharsetVersion = "greek24-v1";

// UTF-8 spellings, canonical order.
inline const std::array<std::string, kNumLetters>& letters() {
    static const std::array<std::string, kNumLetters> l = {
        "α", "β", "γ", "δ", "ε", "ζ", "η", "θ", "ι", "κ", "λ", "μ",
        "ν", "ξ", "ο", "π", "ρ", "σ", "τ", "υ", "φ", "χ", "ψ", "ω"};
    return l;
}

// Codepoint of canonical letter k (lowercase; sigma is U+03C3, never U+03C2).
inline uint32_t letter_codepoint(int k) {
    return k < 17 ? 0x3B1u + static_cast<uint32_t>(k) : 0x3B2u + static_cast<uint32_t>(k);
}

// Canonical lowercase codepoint -> index 0..23, or -1.
inline int letter_index(uint32_t cp) {
    if (cp >= 0x3B1 && cp <= 0x3C1) return static_cast<int>(cp - 0x3B1);   // alpha..rho
    if (cp >= 0x3C3 && cp <= 0x3C9) return static_cast<int>(cp - 0x3B2);   // sigma..omega
    return -1;
}

inline int letter_index(std::string_view utf8_letter) {
    for (int k = 0; k < kNumLetters; ++k)
        if (letters()[static_cast<size_t>(k)] == utf8_letter) return k;
    return -1;
}

namespace detail {

// Maps an arbitrary codepoint to a canonical lowercase letter codepoint,
// or 0 when it is not a Greek letter.
inline uint32_t to_canonical_cp(uint32_t cp) {
    // Lowercase Greek, with final sigma folded.
    if (cp >= 0x3B1 && cp <= 0x3C9) return cp == 0x3C2 ? 0x3C3 : cp;
    // Uppercase Greek (0x3A2 is unassigned).
    if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) return cp + 0x20;
    // Monotonic accented forms.
    switch (cp) {
        case 0x386: return 0x3B1;  // Ά
        case 0x388: return 0x3B5;  // Έ
        case 0x389: return 0x3B7;  // Ή
        case 0x38A: return 0x3B9;  // Ί
        case 0x38C: return 0x3BF;  // Ό
        case 0x38E: return 0x3C5;  // Ύ
        case 0x38F: return 0x3C9;  // Ώ
        case 0x390: return 0x3B9;  // ΐ
        case 0x3AC: return 0x3B1;  // ά
        case 0x3AD: return 0x3B5;  // έ
        case 0x3AE: return 0x3B7;  // ή
        case 0x3AF: return 0x3B9;  // ί
        case 0x3B0: return 0x3C5;  // ΰ
        case 0x3CA: return 0x3B9;  // ϊ
        case 0x3CB: return 0x3C5;  // ϋ
        case 0x3CC: return 0x3BF;  // ό
        case 0x3CD: return 0x3C5;  // ύ
        case 0x3CE: return 0x3C9;  // ώ
        default: break;
    }
    // Polytonic (Greek Extended). Each run shares one base letter.
    struct Range { uint32_t lo, hi, base; };
    static constexpr Range kExt[] = {
        {0x1F00, 0x1F0F, 0x3B1}, {0x1F10, 0x1F1D, 0x3B5}, {0x1F20, 0x1F2F, 0x3B7},
        {0x1F30, 0x1F3F, 0x3B9}, {0x1F40, 0x1F4D, 0x3BF}, {0x1F50, 0x1F5F, 0x3C5},
        {0x1F60, 0x1F6F, 0x3C9}, {0x1F70, 0x1F71, 0x3B1}, {0x1F72, 0x1F73, 0x3B5},
        {0x1F74, 0x1F75, 0x3B7}, {0x1F76, 0x1F77, 0x3B9}, {0x1F78, 0x1F79, 0x3BF},
        {0x1F7A, 0x1F7B, 0x3C5}, {0x1F7C, 0x1F7D, 0x3C9}, {0x1F80, 0x1F8F, 0x3B1},
        {0x1F90, 0x1F9F, 0x3B7}, {0x1FA0, 0x1FAF, 0x3C9}, {0x1FB0, 0x1FBC, 0x3B1},
        {0x1FC2, 0x1FC7, 0x3B7}, {0x1FC8, 0x1FC9, 0x3B5}, {0x1FCA, 0x1FCC, 0x3B7},
        {0x1FD0, 0x1FDB, 0x3B9}, {0x1FE0, 0x1FE3, 0x3C5}, {0x1FE4, 0x1FE5, 0x3C1},
        {0x1FE6, 0x1FEB, 0x3C5}, {0x1FEC, 0x1FEC, 0x3C1}, {0x1FF2, 0x1FF7, 0x3C9},
        {0x1FF8, 0x1FF9, 0x3BF}, {0x1FFA, 0x1FFC, 0x3C9},
    };
    for (const auto& r : kExt)
        if (cp >= r.lo && cp <= r.hi) return r.base;
    // Latin capital homoglyphs: transcriptions of papyri routinely type the
    // visually identical Latin capital for a Greek one (e.g. "O" for omicron).
    switch (cp) {
        case 'A': return 0x3B1;
        case 'B': return 0x3B2;
        case 'E': return 0x3B5;
        case 'Z': return 0x3B6;
        case 'H': return 0x3B7;
        case 'I': return 0x3B9;
        case 'K': return 0x3BA;
        case 'M': return 0x3BC;
        case 'N': return 0x3BD;
        case 'O': return 0x3BF;
        case 'P': return 0x3C1;
        case 'T': return 0x3C4;
        case 'Y': return 0x3C5;
        case 'X': return 0x3C7;
        default: break;
    }
    return 0;
}

// Diacritics are stripped silently (they modify a letter, they are not
// free-standing symbols and do not count as removed).
inline bool is_diacritic(uint32_t cp) {
    if (cp >= 0x300 && cp <= 0x36F) return true;             // combining marks
    if (cp == 0x37A || cp == 0x384 || cp == 0x385) return true;
    if (cp >= 0x1FBD && cp <= 0x1FC1) return true;           // Greek spacing breathings/accents
    if (cp >= 0x1FCD && cp <= 0x1FCF) return true;
    if (cp >= 0x1FDD && cp <= 0x1FDF) return true;
    if (cp >= 0x1FED && cp <= 0x1FEF) return true;
    if (cp == 0x1FFD || cp == 0x1FFE) return true;
    return false;
}

// Decodes one UTF-8 codepoint at s[i]; advances i. Invalid bytes yield
// 0xFFFD and advance by one.
inline uint32_t decode_utf8(std::string_view s, size_t& i) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    auto cont = [&](size_t k) {
        return i + k < s.size() && (static_cast<unsigned char>(s[i + k]) & 0xC0) == 0x80;
    };
    if (b0 < 0x80) {
        ++i;
        return b0;
    }
    if ((b0 & 0xE0) == 0xC0 && cont(1)) {
        uint32_t cp = (b0 & 0x1Fu) << 6 | (static_cast<unsigned char>(s[i + 1]) & 0x3Fu);
        i += 2;
        return cp;
    }
    if ((b0 & 0xF0) == 0xE0 && cont(1) && cont(2)) {
        uint32_t cp = (b0 & 0x0Fu) << 12 | (static_cast<unsigned char>(s[i + 1]) & 0x3Fu) << 6 |
                      (static_cast<unsigned char>(s[i + 2]) & 0x3Fu);
        i += 3;
        return cp;
    }
    if ((b0 & 0xF8) == 0xF0 && cont(1) && cont(2) && cont(3)) {
        uint32_t cp = (b0 & 0x07u) << 18 | (static_cast<unsigned char>(s[i + 1]) & 0x3Fu) << 12 |
                      (static_cast<unsigned char>(s[i + 2]) & 0x3Fu) << 6 |
                      (static_cast<unsigned char>(s[i + 3]) & 0x3Fu);
        i += 4;
        return cp;
    }
    ++i;
    return 0xFFFD;
}

}  // namespace detail

struct CanonResult {
    std::vector<uint8_t> letters;  // canonical letter indices, in order
    int64_t removed = 0;           // non-letter, non-diacritic codepoints dropped
};

// Lossy mapping of a raw transcription into the canonical letter sequence:
// uppercase -> lowercase, final sigma -> sigma, diacritics stripped,
// Latin capital homoglyphs transliterated, everything else removed (counted).
inline CanonResult canonicalize_transcription(std::string_view raw) {
    CanonResult out;
    size_t i = 0;
    while (i < raw.size()) {
        const uint32_t cp = detail::decode_utf8(raw, i);
        const uint32_t canon = detail::to_canonical_cp(cp);
        if (canon != 0) {
            out.letters.push_back(static_cast<uint8_t>(letter_index(canon)));
        } else if (!detail::is_diacritic(cp)) {
            ++out.removed;
        }
    }
    return out;
}

inline std::string to_utf8(const std::vector<uint8_t>& letter_seq) {
    std::string s;
    for (uint8_t k : letter_seq) s += letters()[k];
    return s;
}

// 24-slot binary presence vector, indexed by canonical letter order.
using PresenceVector = std::array<uint8_t, kNumLetters>;

inline PresenceVector presence_vector(const std::vector<uint8_t>& transcription) {
    PresenceVector v{};
    for (uint8_t k : transcription) {
        if (k >= kNumLetters) throw DataError("presence_vector: letter index out of range");
        v[k] = 1;
    }
    return v;
}

}  // namespace npap::greek
