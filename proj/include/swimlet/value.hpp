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

#ifndef SWIMLET_VALUE_HPP
#define SWIMLET_VALUE_HPP

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "swimlet/bytes.hpp"

// The universal datum: every lane state, replication op, frame body, and
// log record is a Value. Values are immutable once shared between threads;
// the builder-style mutators (add/set) are for construction only.
//
// Canonical binary encoding (one byte tag, then payload):
//   0x00 Absent       no payload
//   0x01 Null         no payload
//   0x02 Bool false   no payload
//   0x03 Bool true    no payload
//   0x04 Int          zig-zag LEB128 varint
//   0x05 Float        8 bytes, IEEE-754 big-endian
//   0x06 Text         varint byte count, UTF-8 bytes
//   0x07 Record       varint item count, then items
//   0x08 Slot         (inside records only) key encoding, value encoding
//
// Equal values encode to identical bytes; wire frames and the store rely
// on that for convergence checks.

namespace swimlet {

class Value;
struct Item;

enum class DecodeError : uint8_t {
  None = 0,
  BadTag,        // unknown or misplaced tag byte
  Truncated,     // input ended inside a payload
  BadUtf8,       // Text payload is not valid UTF-8
  BadVarint,     // varint longer than 10 bytes or overflowing 64 bits
  BadSlotKey,    // slot key decoded to Absent
  TooDeep,       // nesting beyond kMaxDepth
};

inline const char* decode_error_name(DecodeError e) {
  switch (e) {
    case DecodeError::None: return "none";
    case DecodeError::BadTag: return "bad-tag";
    case DecodeError::Truncated: return "truncated";
    case DecodeError::BadUtf8: return "bad-utf8";
    case DecodeError::BadVarint: return "bad-varint";
    case DecodeError::BadSlotKey: return "bad-slot-key";
    case DecodeError::TooDeep: return "too-deep";
  }
  return "?";
}

class Value {
 public:
  enum class Kind : uint8_t { Absent = 0, Null, Bool, Int, Float, Text, Record };

  static constexpr int kMaxDepth = 64;

  Value() : repr_(AbsentRepr{}) {}

  static Value absent() { return Value(); }
  static Value null() {
    Value v;
    v.repr_ = NullRepr{};
    return v;
  }
  static Value of(bool b) {
    Value v;
    v.repr_ = b;
    return v;
  }
  static Value of(int64_t i) {
    Value v;
    v.repr_ = i;
    return v;
  }
  static Value of(int i) { return of(static_cast<int64_t>(i)); }
  static Value of(uint32_t i) { return of(static_cast<int64_t>(i)); }
  static Value of(double d) {
    Value v;
    v.repr_ = d;
    return v;
  }
  static Value of(std::string s) {
    Value v;
    v.repr_ = std::move(s);
    return v;
  }
  static Value of(std::string_view s) { return of(std::string(s)); }
  static Value of(const char* s) { return of(std::string(s)); }
  static Value record();

  Kind kind() const { return static_cast<Kind>(repr_.index()); }
  bool is_absent() const { return kind() == Kind::Absent; }
  bool is_null() const { return kind() == Kind::Null; }
  bool is_bool() const { return kind() == Kind::Bool; }
  bool is_int() const { return kind() == Kind::Int; }
  bool is_float() const { return kind() == Kind::Float; }
  bool is_text() const { return kind() == Kind::Text; }
  bool is_record() const { return kind() == Kind::Record; }
  bool is_defined() const { return !is_absent(); }

  bool as_bool(bool dflt = false) const { return is_bool() ? std::get<bool>(repr_) : dflt; }
  int64_t as_int(int64_t dflt = 0) const { return is_int() ? std::get<int64_t>(repr_) : dflt; }
  double as_float(double dflt = 0.0) const {
    if (is_float()) return std::get<double>(repr_);
    if (is_int()) return static_cast<double>(std::get<int64_t>(repr_));
    return dflt;
  }
  const std::string& as_text() const {
    static const std::string empty;
    return is_text() ? std::get<std::string>(repr_) : empty;
  }

  // Record access. All are safe on non-records (empty / Absent results).
  size_t size() const;
  const std::vector<Item>& items() const;
  const Value& get(const Value& key) const;
  const Value& get(std::string_view key) const;
  int64_t get_int(std::string_view key, int64_t dflt = 0) const { return get(key).as_int(dflt); }
  const std::string& get_text(std::string_view key) const { return get(key).as_text(); }

  // Builders. add() appends a plain item, set() writes a slot, replacing
  // in place when the key is already present. Both convert this value to
  // a record if it is not one yet.
  Value& add(Value v);
  Value& set(Value key, Value v);
  Value& set(std::string_view key, Value v) { return set(Value::of(key), std::move(v)); }
  bool remove(const Value& key);  // true if a slot was removed

  void encode(std::string& out) const;
  std::string encode() const {
    std::string out;
    encode(out);
    return out;
  }

  struct Decoded;  // { value, consumed, error } — defined below
  static Decoded decode(std::string_view bytes);

  // Total order: by kind rank, then payload. Float NaN sorts greatest
  // among floats; exact numeric ties fall back to the IEEE total-order
  // bit pattern so that compare()==0 iff the encodings are identical.
  static int compare(const Value& a, const Value& b);

  bool operator==(const Value& o) const { return compare(*this, o) == 0; }
  bool operator!=(const Value& o) const { return compare(*this, o) != 0; }
  bool operator<(const Value& o) const { return compare(*this, o) < 0; }

  // Non-canonical debug rendering, e.g. {lat:37.2,lon:-122.1,"n":3}.
  std::string to_text() const;

 private:
  struct AbsentRepr {};
  struct NullRepr {};
  using Repr = std::variant<AbsentRepr, NullRepr, bool, int64_t, double, std::string,
                            std::vector<Item>>;

  static bool valid_utf8(std::string_view s);
  static Decoded decode_at(ByteReader& r, int depth);
  void encode_value(std::string& out) const;
  void render(std::ostringstream& os) const;

  Repr repr_;
};

struct Item {
  Value key;  // Absent for plain items
  Value value;

  bool is_slot() const { return key.is_defined(); }
};

struct Value::Decoded {
  Value value;
  size_t consumed = 0;
  DecodeError error = DecodeError::None;
  bool ok() const { return error == DecodeError::None; }
};

struct ValueLess {
  bool operator()(const Value& a, const Value& b) const { return Value::compare(a, b) < 0; }
};

// ---------------------------------------------------------------------------

inline Value Value::record() {
  Value v;
  v.repr_ = std::vector<Item>{};
  return v;
}

inline size_t Value::size() const {
  return is_record() ? std::get<std::vector<Item>>(repr_).size() : 0;
}

inline const std::vector<Item>& Value::items() const {
  static const std::vector<Item> empty;
  return is_record() ? std::get<std::vector<Item>>(repr_) : empty;
}

inline const Value& Value::get(const Value& key) const {
  static const Value absent;
  if (!is_record()) return absent;
  for (const Item& it : std::get<std::vector<Item>>(repr_)) {
    if (it.is_slot() && it.key == key) return it.value;
  }
  return absent;
}

inline const Value& Value::get(std::string_view key) const { return get(Value::of(key)); }

inline Value& Value::add(Value v) {
  if (!is_record()) repr_ = std::vector<Item>{};
  std::get<std::vector<Item>>(repr_).push_back(Item{Value::absent(), std::move(v)});
  return *this;
}

inline Value& Value::set(Value key, Value v) {
  if (key.is_absent()) throw std::invalid_argument("slot key must not be absent");
  if (!is_record()) repr_ = std::vector<Item>{};
  auto& items = std::get<std::vector<Item>>(repr_);
  for (Item& it : items) {
    if (it.is_slot() && it.key == key) {
      it.value = std::move(v);
      return *this;
    }
  }
  items.push_back(Item{std::move(key), std::move(v)});
  return *this;
}

inline bool Value::remove(const Value& key) {
  if (!is_record()) return false;
  auto& items = std::get<std::vector<Item>>(repr_);
  for (auto it = items.begin(); it != items.end(); ++it) {
    if (it->is_slot() && it->key == key) {
      items.erase(it);
      return true;
    }
  }
  return false;
}

inline void Value::encode_value(std::string& out) const {
  switch (kind()) {
    case Kind::Absent:
      put_u8(out, 0x00);
      break;
    case Kind::Null:
      put_u8(out, 0x01);
      break;
    case Kind::Bool:
      put_u8(out, std::get<bool>(repr_) ? 0x03 : 0x02);
      break;
    case Kind::Int:
      put_u8(out, 0x04);
      put_varint(out, zigzag_encode(std::get<int64_t>(repr_)));
      break;
    case Kind::Float:
      put_u8(out, 0x05);
      put_u64_be(out, std::bit_cast<uint64_t>(std::get<double>(repr_)));
      break;
    case Kind::Text: {
      const std::string& s = std::get<std::string>(repr_);
      put_u8(out, 0x06);
      put_varint(out, s.size());
      out.append(s);
      break;
    }
    case Kind::Record: {
      const auto& items = std::get<std::vector<Item>>(repr_);
      put_u8(out, 0x07);
      put_varint(out, items.size());
      for (const Item& it : items) {
        if (it.is_slot()) {
          put_u8(out, 0x08);
          it.key.encode_value(out);
        }
        it.value.encode_value(out);
      }
      break;
    }
  }
}

inline void Value::encode(std::string& out) const { encode_value(out); }

inline Value::Decoded Value::decode_at(ByteReader& r, int depth) {
  Decoded d;
  if (depth > kMaxDepth) {
    d.error = DecodeError::TooDeep;
    return d;
  }
  uint8_t tag = r.u8();
  if (!r.ok()) {
    d.error = DecodeError::Truncated;
    return d;
  }
  switch (tag) {
    case 0x00:
      d.value = Value::absent();
      return d;
    case 0x01:
      d.value = Value::null();
      return d;
    case 0x02:
      d.value = Value::of(false);
      return d;
    case 0x03:
      d.value = Value::of(true);
      return d;
    case 0x04: {
      uint64_t z = r.varint();
      if (!r.ok()) {
        d.error = r.remaining() == 0 ? DecodeError::Truncated : DecodeError::BadVarint;
        return d;
      }
      d.value = Value::of(zigzag_decode(z));
      return d;
    }
    case 0x05: {
      uint64_t bits = r.u64_be();
      if (!r.ok()) {
        d.error = DecodeError::Truncated;
        return d;
      }
      d.value = Value::of(std::bit_cast<double>(bits));
      return d;
    }
    case 0x06: {
      uint64_t n = r.varint();
      if (!r.ok() || n > r.remaining()) {
        d.error = r.ok() ? DecodeError::Truncated : DecodeError::BadVarint;
        return d;
      }
      std::string_view s = r.bytes(static_cast<size_t>(n));
      if (!valid_utf8(s)) {
        d.error = DecodeError::BadUtf8;
        return d;
      }
      d.value = Value::of(std::string(s));
      return d;
    }
    case 0x07: {
      uint64_t n = r.varint();
      if (!r.ok() || n > r.remaining()) {  // every item takes >= 1 byte
        d.error = r.ok() ? DecodeError::Truncated : DecodeError::BadVarint;
        return d;
      }
      Value rec = Value::record();
      for (uint64_t i = 0; i < n; ++i) {
        if (r.peek_u8() == 0x08 && r.ok()) {
          r.u8();
          Decoded key = decode_at(r, depth + 1);
          if (!key.ok()) return key;
          if (key.value.is_absent()) {
            d.error = DecodeError::BadSlotKey;
            return d;
          }
          Decoded val = decode_at(r, depth + 1);
          if (!val.ok()) return val;
          rec.set(std::move(key.value), std::move(val.value));
        } else {
          Decoded val = decode_at(r, depth + 1);
          if (!val.ok()) return val;
          rec.add(std::move(val.value));
        }
      }
      d.value = std::move(rec);
      return d;
    }
    default:
      d.error = DecodeError::BadTag;
      return d;
  }
}

inline Value::Decoded Value::decode(std::string_view bytes) {
  ByteReader r(bytes);
  Decoded d = decode_at(r, 0);
  d.consumed = r.pos();
  return d;
}

inline bool Value::valid_utf8(std::string_view s) {
  size_t i = 0;
  while (i < s.size()) {
    uint8_t c = static_cast<uint8_t>(s[i]);
    size_t need;
    uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c >> 5) == 0x6) {
      need = 1;
      cp = c & 0x1F;
    } else if ((c >> 4) == 0xE) {
      need = 2;
      cp = c & 0x0F;
    } else if ((c >> 3) == 0x1E) {
      need = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + need >= s.size()) return false;
    for (size_t k = 1; k <= need; ++k) {
      uint8_t cc = static_cast<uint8_t>(s[i + k]);
      if ((cc >> 6) != 0x2) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    // reject overlong forms, surrogates, and out-of-range code points
    if ((need == 1 && cp < 0x80) || (need == 2 && cp < 0x800) || (need == 3 && cp < 0x10000))
      return false;
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += need + 1;
  }
  return true;
}

namespace detail {
inline uint64_t float_order_key(double d) {
  uint64_t b = std::bit_cast<uint64_t>(d);
  return (b & 0x8000000000000000ull) ? ~b : (b | 0x8000000000000000ull);
}
inline int cmp3(uint64_t a, uint64_t b) { return a < b ? -1 : (a > b ? 1 : 0); }
}  // namespace detail

inline int Value::compare(const Value& a, const Value& b) {
  if (a.kind() != b.kind())
    return static_cast<int>(a.kind()) < static_cast<int>(b.kind()) ? -1 : 1;
  switch (a.kind()) {
    case Kind::Absent:
    case Kind::Null:
      return 0;
    case Kind::Bool: {
      bool av = std::get<bool>(a.repr_), bv = std::get<bool>(b.repr_);
      return av == bv ? 0 : (av ? 1 : -1);
    }
    case Kind::Int: {
      int64_t av = std::get<int64_t>(a.repr_), bv = std::get<int64_t>(b.repr_);
      return av < bv ? -1 : (av > bv ? 1 : 0);
    }
    case Kind::Float: {
      double av = std::get<double>(a.repr_), bv = std::get<double>(b.repr_);
      bool na = std::isnan(av), nb = std::isnan(bv);
      if (na != nb) return na ? 1 : -1;  // NaN greatest among floats
      if (!na) {
        if (av < bv) return -1;
        if (av > bv) return 1;
      }
      return detail::cmp3(detail::float_order_key(av), detail::float_order_key(bv));
    }
    case Kind::Text: {
      int c = std::get<std::string>(a.repr_).compare(std::get<std::string>(b.repr_));
      return c < 0 ? -1 : (c > 0 ? 1 : 0);
    }
    case Kind::Record: {
      const auto& ai = std::get<std::vector<Item>>(a.repr_);
      const auto& bi = std::get<std::vector<Item>>(b.repr_);
      size_t n = std::min(ai.size(), bi.size());
      for (size_t i = 0; i < n; ++i) {
        int c = compare(ai[i].key, bi[i].key);
        if (c) return c;
        c = compare(ai[i].value, bi[i].value);
        if (c) return c;
      }
      return ai.size() < bi.size() ? -1 : (ai.size() > bi.size() ? 1 : 0);
    }
  }
  return 0;
}

inline void Value::render(std::ostringstream& os) const {
  switch (kind()) {
    case Kind::Absent:
      os << "absent";
      break;
    case Kind::Null:
      os << "null";
      break;
    case Kind::Bool:
      os << (std::get<bool>(repr_) ? "true" : "false");
      break;
    case Kind::Int:
      os << std::get<int64_t>(repr_);
      break;
    case Kind::Float: {
      double d = std::get<double>(repr_);
      if (std::isnan(d))
        os << "nan";
      else
        os << d;
      break;
    }
    case Kind::Text: {
      os << '"';
      for (char c : std::get<std::string>(repr_)) {
        if (c == '"' || c == '\\') os << '\\';
        os << c;
      }
      os << '"';
      break;
    }
    case Kind::Record: {
      os << '{';
      bool first = true;
      for (const Item& it : std::get<std::vector<Item>>(repr_)) {
        if (!first) os << ',';
        first = false;
        if (it.is_slot()) {
          it.key.render(os);
          os << ':';
        }
        it.value.render(os);
      }
      os << '}';
      break;
    }
  }
}

inline std::string Value::to_text() const {
  std::ostringstream os;
  render(os);
  return os.str();
}

}  // namespace swimlet

#endif  // SWIMLET_VALUE_HPP
