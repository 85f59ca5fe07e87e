#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace samlab {

using Vec = std::vector<double>;

inline constexpr double kProbTol = 1e-12;

/// FNV-1a over raw bytes. Used for config hashes and checkpoint checksums;
/// stable across platforms, unlike std::hash.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline std::string hex64(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

namespace detail {
inline const char* b64_alphabet() {
    return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}
}  // namespace detail

inline std::string base64_encode(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    const char* tab = detail::b64_alphabet();
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= n; i += 3) {
        std::uint32_t v = (p[i] << 16) | (p[i + 1] << 8) | p[i + 2];
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back(tab[v & 63]);
    }
    if (i + 1 == n) {
        std::uint32_t v = p[i] << 16;
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out += "==";
    } else if (i + 2 == n) {
        std::uint32_t v = (p[i] << 16) | (p[i + 1] << 8);
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& s) {
    int lut[256];
    for (int i = 0; i < 256; ++i) lut[i] = -1;
    const char* tab = detail::b64_alphabet();
    for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(tab[i])] = i;
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    std::uint32_t buf = 0;
    int bits = 0;
    for (char c : s) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        int v = lut[static_cast<unsigned char>(c)];
        if (v < 0) throw std::invalid_argument("base64_decode: invalid character");
        buf = (buf << 6) | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((buf >> bits) & 0xff));
        }
    }
    return out;
}

/// Little-endian f64 block encoding used by checkpoints.
inline std::string encode_doubles(const std::vector<double>& v) {
    static_assert(sizeof(double) == 8);
    std::vector<unsigned char> bytes(v.size() * 8);
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &v[i], 8);
        for (int b = 0; b < 8; ++b) bytes[i * 8 + static_cast<std::size_t>(b)] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
    }
    return base64_encode(bytes.data(), bytes.size());
}

inline std::vector<double> decode_doubles(const std::string& s) {
    auto bytes = base64_decode(s);
    if (bytes.size() % 8 != 0) throw std::invalid_argument("decode_doubles: truncated block");
    std::vector<double> v(bytes.size() / 8);
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 7; b >= 0; --b) bits = (bits << 8) | bytes[i * 8 + static_cast<std::size_t>(b)];
        std::memcpy(&v[i], &bits, 8);
    }
    return v;
}

}  // namespace samlab
