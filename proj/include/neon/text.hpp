#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include "neon/error.hpp"

namespace neon::text {

inline bool is_space(char c) noexcept
{
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline bool is_punct(char c) noexcept
{
    auto u = static_cast<unsigned char>(c);
    return u < 0x80 && std::ispunct(u);
}

inline bool is_alnum(char c) noexcept
{
    auto u = static_cast<unsigned char>(c);
    // Non-ASCII bytes are treated as word characters so UTF-8 text stays intact.
    return u >= 0x80 || std::isalnum(u);
}

inline std::string to_lower(std::string_view s)
{
    std::string out(s);
    for (char& c : out) {
        auto u = static_cast<unsigned char>(c);
        if (u < 0x80) c = static_cast<char>(std::tolower(u));
    }
    return out;
}

inline std::string_view trim(std::string_view s) noexcept
{
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

/// Collapses whitespace runs to one space and trims.
inline std::string normalize_ws(std::string_view s)
{
    std::string out;
    out.reserve(s.size());
    bool pending = false;
    for (char c : s) {
        if (is_space(c)) {
            pending = !out.empty();
        } else {
            if (pending) out.push_back(' ');
            pending = false;
            out.push_back(c);
        }
    }
    return out;
}

/// Language-model tokenizer shared by the gateway and the mock backend:
/// whitespace separates tokens, and every ASCII punctuation character is a
/// token of its own.
inline std::vector<std::string> lm_tokenize(std::string_view s)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (is_space(c)) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else if (is_punct(c)) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
            out.emplace_back(1, c);
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline std::size_t count_lm_tokens(std::string_view s)
{
    std::size_t n = 0;
    bool in_word = false;
    for (char c : s) {
        if (is_space(c)) {
            in_word = false;
        } else if (is_punct(c)) {
            ++n;
            in_word = false;
        } else if (!in_word) {
            ++n;
            in_word = true;
        }
    }
    return n;
}

/// Metric tokenizer for BLEU and ROUGE: lowercase, then the LM split.
inline std::vector<std::string> metric_tokenize(std::string_view s)
{
    return lm_tokenize(to_lower(s));
}

/// Retrieval tokenizer: lowercase, split on non-alphanumerics, no stemming.
inline std::vector<std::string> bm25_tokenize(std::string_view s)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (is_alnum(c)) {
            auto u = static_cast<unsigned char>(c);
            cur.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : c);
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline bool attaches_left(std::string_view tok) noexcept
{
    return tok.size() == 1 && (tok[0] == '.' || tok[0] == ',' || tok[0] == '!' || tok[0] == '?' ||
                               tok[0] == ';' || tok[0] == ':' || tok[0] == ')');
}

/// Inverse of lm_tokenize up to spacing: closing punctuation attaches to the
/// previous token.
inline std::string detokenize(std::span<const std::string> tokens)
{
    std::string out;
    for (const auto& t : tokens) {
        if (!out.empty() && !attaches_left(t) && out.back() != '(') out.push_back(' ');
        out += t;
    }
    return out;
}

/// Drops trailing whitespace and trailing periods.
inline std::string strip_trailing_period(std::string_view s)
{
    s = trim(s);
    while (!s.empty() && s.back() == '.') {
        s.remove_suffix(1);
        s = trim(s);
    }
    return std::string(s);
}

/// Key used for duplicate detection: whitespace-collapsed and lowercased.
inline std::string dedup_key(std::string_view s)
{
    return to_lower(normalize_ws(s));
}

inline std::string sha256_hex(std::string_view data)
{
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

inline std::vector<std::string> split(std::string_view s, char sep)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto pos = s.find(sep, start);
        out.emplace_back(s.substr(start, pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

}  // namespace neon::text
