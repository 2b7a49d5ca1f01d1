#pragma once

// Small byte-level encodings shared by the remote segmentation wire format and
// the report writers.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "amx/errors.hpp"

namespace amx::codec {

inline std::string base64_encode(const std::uint8_t *data, std::size_t n) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < n; i += 3) {
    const std::uint32_t v = (std::uint32_t(data[i]) << 16) | (std::uint32_t(data[i + 1]) << 8) | data[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i < n) {
    std::uint32_t v = std::uint32_t(data[i]) << 16;
    if (i + 1 < n) v |= std::uint32_t(data[i + 1]) << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += i + 1 < n ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::string base64_encode(const std::vector<std::uint8_t> &bytes) {
  return base64_encode(bytes.data(), bytes.size());
}

inline std::vector<std::uint8_t> base64_decode(std::string_view s) {
  static const auto table = [] {
    std::array<int, 256> t{};
    t.fill(-1);
    const std::string_view a = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    for (std::size_t i = 0; i < a.size(); ++i) t[static_cast<unsigned char>(a[i])] = static_cast<int>(i);
    return t;
  }();
  if (s.size() % 4 != 0) throw SchemaError("base64 payload length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i < s.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = s[i + k];
      if (c == '=' && i + 4 == s.size() && k >= 2) {
        v[k] = 0;
        ++pad;
        continue;
      }
      if (pad) throw SchemaError("base64 padding in the middle of a quantum");
      v[k] = table[static_cast<unsigned char>(c)];
      if (v[k] < 0) throw SchemaError("invalid base64 character");
    }
    const std::uint32_t w = (std::uint32_t(v[0]) << 18) | (std::uint32_t(v[1]) << 12) | (std::uint32_t(v[2]) << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((w >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(w & 0xff));
  }
  return out;
}

// Run lengths of a binary sequence, alternating false/true and starting with
// false (so the first run may be zero).
inline std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t> &bits) {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t len = 0;
  for (auto b : bits) {
    const std::uint8_t v = b ? 1 : 0;
    if (v != current) {
      runs.push_back(len);
      current = v;
      len = 0;
    }
    ++len;
  }
  runs.push_back(len);
  return runs;
}

inline std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t> &runs, std::size_t expected) {
  std::vector<std::uint8_t> bits;
  bits.reserve(expected);
  std::uint8_t current = 0;
  for (auto r : runs) {
    if (bits.size() + r > expected) throw SchemaError("run-length mask longer than the image");
    bits.insert(bits.end(), r, current);
    current ^= 1;
  }
  if (bits.size() != expected)
    throw SchemaError("run-length mask covers " + std::to_string(bits.size()) + " pixels, expected " +
                      std::to_string(expected));
  return bits;
}

}  // namespace amx::codec
