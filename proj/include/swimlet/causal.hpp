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

#ifndef SWIMLET_CAUSAL_HPP
#define SWIMLET_CAUSAL_HPP

#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include "swimlet/value.hpp"

// Causal metadata for replication: dots, vector clocks, and the tag
// carried by every op. A replica line is identified by the instance id;
// counters on a line increase by one per generated op.

namespace swimlet {

struct Dot {
  std::string replica;
  uint64_t counter = 0;

  bool valid() const { return counter > 0 && !replica.empty(); }
  bool operator==(const Dot& o) const { return counter == o.counter && replica == o.replica; }
  bool operator!=(const Dot& o) const { return !(*this == o); }

  // The deterministic tie-break order for concurrent ops: greatest
  // (counter, replica) wins.
  bool tie_wins_over(const Dot& o) const {
    if (counter != o.counter) return counter > o.counter;
    return replica > o.replica;
  }

  std::string str() const { return "(" + replica + "," + std::to_string(counter) + ")"; }
};

class VersionVector {
 public:
  uint64_t get(const std::string& replica) const {
    auto it = entries_.find(replica);
    return it == entries_.end() ? 0 : it->second;
  }

  void put(const std::string& replica, uint64_t counter) {
    if (counter == 0) return;
    uint64_t& slot = entries_[replica];
    if (counter > slot) slot = counter;
  }

  void bump(const std::string& replica) { ++entries_[replica]; }

  bool contains(const Dot& dot) const { return get(dot.replica) >= dot.counter; }

  // Pointwise comparison; vectors form a partial order.
  bool leq(const VersionVector& o) const {
    for (const auto& [r, c] : entries_)
      if (c > o.get(r)) return false;
    return true;
  }

  void merge(const VersionVector& o) {
    for (const auto& [r, c] : o.entries_) put(r, c);
  }

  // Pointwise minimum over the union of replica lines; lines absent on
  // either side floor at zero.
  static VersionVector pointwise_min(const VersionVector& a, const VersionVector& b) {
    VersionVector out;
    for (const auto& [r, c] : a.entries_) {
      uint64_t m = std::min(c, b.get(r));
      if (m > 0) out.entries_[r] = m;
    }
    return out;
  }

  uint64_t total() const {
    uint64_t t = 0;
    for (const auto& [r, c] : entries_) t += c;
    return t;
  }

  bool empty() const { return entries_.empty(); }
  const std::map<std::string, uint64_t>& entries() const { return entries_; }

  bool operator==(const VersionVector& o) const { return entries_ == o.entries_; }

  Value to_value() const {
    Value rec = Value::record();
    for (const auto& [r, c] : entries_) rec.set(Value::of(r), Value::of(static_cast<int64_t>(c)));
    return rec;
  }

  static VersionVector from_value(const Value& v) {
    VersionVector vv;
    for (const Item& it : v.items()) {
      if (it.is_slot() && it.key.is_text() && it.value.is_int())
        vv.put(it.key.as_text(), static_cast<uint64_t>(it.value.as_int()));
    }
    return vv;
  }

  std::string str() const { return to_value().to_text(); }

 private:
  std::map<std::string, uint64_t> entries_;
};

struct CausalTag {
  Dot dot;
  VersionVector clock;  // causal past including the dot itself

  bool operator==(const CausalTag& o) const { return dot == o.dot && clock == o.clock; }

  // t happened-before o iff o's causal past contains t's dot.
  bool before(const CausalTag& o) const { return !(dot == o.dot) && o.clock.contains(dot); }
  bool concurrent_with(const CausalTag& o) const {
    return !(dot == o.dot) && !before(o) && !o.before(*this);
  }

  Value to_value() const {
    Value rec = Value::record();
    rec.set("replica", Value::of(dot.replica));
    rec.set("counter", Value::of(static_cast<int64_t>(dot.counter)));
    rec.set("clock", clock.to_value());
    return rec;
  }

  static CausalTag from_value(const Value& v) {
    CausalTag t;
    t.dot.replica = v.get_text("replica");
    t.dot.counter = static_cast<uint64_t>(v.get_int("counter"));
    t.clock = VersionVector::from_value(v.get("clock"));
    return t;
  }
};

}  // namespace swimlet

#endif  // SWIMLET_CAUSAL_HPP
