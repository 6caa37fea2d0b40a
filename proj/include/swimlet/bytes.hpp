// Copyright 2026 The Swimlet Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef SWIMLET_BYTES_HPP
#define SWIMLET_BYTES_HPP

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

// Low-level byte helpers shared by the value codec, wire frames, and the
// store: big-endian integers, LEB128 varints, zig-zag, CRC-32, and the
// 64-bit mixing hash used for ring placement.

namespace swimlet {

inline void put_u8(std::string& out, uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u32_be(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v >> 24));
  out.push_back(static_cast<char>(v >> 16));
  out.push_back(static_cast<char>(v >> 8));
  out.push_back(static_cast<char>(v));
}

inline void put_u64_be(std::string& out, uint64_t v) {
  put_u32_be(out, static_cast<uint32_t>(v >> 32));
  put_u32_be(out, static_cast<uint32_t>(v));
}

inline void put_varint(std::string& out, uint64_t v) {
  while (v >= 0x80) {
    out.push_back(static_cast<char>((v & 0x7F) | 0x80));
    v >>= 7;
  }
  out.push_back(static_cast<char>(v));
}

inline uint64_t zigzag_encode(int64_t v) {
  return (static_cast<uint64_t>(v) << 1) ^ static_cast<uint64_t>(v >> 63);
}

inline int64_t zigzag_decode(uint64_t v) {
  return static_cast<int64_t>((v >> 1) ^ (~(v & 1) + 1));
}

// Cursor over an immutable byte buffer. Reads fail soft: callers check ok().
class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  bool ok() const { return ok_; }
  size_t pos() const { return pos_; }
  size_t remaining() const { return data_.size() - pos_; }

  uint8_t u8() {
    if (pos_ >= data_.size()) return fail_u8();
    return static_cast<uint8_t>(data_[pos_++]);
  }

  uint8_t peek_u8() {
    if (pos_ >= data_.size()) return fail_u8();
    return static_cast<uint8_t>(data_[pos_]);
  }

  uint32_t u32_be() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | u8();
    return v;
  }

  uint64_t u64_be() {
    uint64_t v = u32_be();
    return (v << 32) | u32_be();
  }

  // LEB128, at most 10 bytes. Overflow or truncation clears ok().
  uint64_t varint() {
    uint64_t v = 0;
    int shift = 0;
    for (int i = 0; i < 10; ++i) {
      uint8_t b = u8();
      if (!ok_) return 0;
      if (i == 9 && (b & 0xFE)) {  // only the low bit fits in bits 63..
        ok_ = false;
        return 0;
      }
      v |= static_cast<uint64_t>(b & 0x7F) << shift;
      if (!(b & 0x80)) return v;
      shift += 7;
    }
    ok_ = false;
    return 0;
  }

  std::string_view bytes(size_t n) {
    if (remaining() < n) {
      ok_ = false;
      return {};
    }
    std::string_view v = data_.substr(pos_, n);
    pos_ += n;
    return v;
  }

 private:
  uint8_t fail_u8() {
    ok_ = false;
    return 0;
  }

  std::string_view data_;
  size_t pos_ = 0;
  bool ok_ = true;
};

// CRC-32 (ISO-HDLC polynomial 0xEDB88320, the zlib/PNG variant).
inline uint32_t crc32(std::string_view data, uint32_t seed = 0) {
  static const auto table = [] {
    struct {
      uint32_t t[256];
    } tb{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      tb.t[i] = c;
    }
    return tb;
  }();
  uint32_t c = seed ^ 0xFFFFFFFFu;
  for (char ch : data)
    c = table.t[(c ^ static_cast<uint8_t>(ch)) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

// Running-hash variant: folds `data` into an accumulator so an event
// stream can be fingerprinted incrementally. Start from kHashBasis.
inline constexpr uint64_t kHashBasis = 0xcbf29ce484222325ull;

inline uint64_t hash64_mix(uint64_t h, std::string_view data) {
  for (char ch : data) {
    h ^= static_cast<uint8_t>(ch);
    h *= 0x100000001b3ull;
  }
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  h ^= h >> 31;
  return h;
}

// FNV-1a with a splitmix64 finalizer. Placement hashing needs good
// avalanche on short URI strings; plain FNV clusters on them.
inline uint64_t hash64(std::string_view data) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char ch : data) {
    h ^= static_cast<uint8_t>(ch);
    h *= 0x100000001b3ull;
  }
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  h ^= h >> 31;
  return h;
}

}  // namespace swimlet

#endif  // SWIMLET_BYTES_HPP
