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

#ifndef SWIMLET_CRDT_HPP
#define SWIMLET_CRDT_HPP

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "swimlet/causal.hpp"
#include "swimlet/value.hpp"

// Pure op-based replication for lane state. Every mutation is a tagged op;
// a replica holds a partially ordered log of the ops that are not yet
// causally stable, plus a compacted base for the ops that are. Queries
// evaluate over base + log and are independent of delivery order for
// concurrent ops, which is what makes any two replicas with the same op
// set byte-identical.
//
// Rules, in brief:
//  - delivery is causal; out-of-order arrivals are buffered, duplicates
//    are dropped without effect.
//  - at insertion, ops prune older ops they causally dominate on the same
//    target (a set dominates earlier sets; a map op on key k dominates
//    earlier ops on k; a clear dominates all earlier map ops). A clear
//    is never pruned by a later single-key op since it still masks other
//    keys.
//  - eval picks, per target, the greatest (counter, replica) dot among the
//    causally maximal ops. Candidates dominated by a clear are filtered
//    first, so updates concurrent with a clear survive (add-wins).
//  - stabilize folds every op whose full causal past is inside the cut
//    into the base. Base entries keep their dot — and removals keep a
//    dotted tombstone — so late ops that were concurrent with folded ones
//    still tie-break exactly as they would have against the live op.

namespace swimlet {

enum class LaneDataKind : uint8_t { Value = 0, Map = 1 };

class LaneOp {
 public:
  enum class Kind : uint8_t { ValueSet = 0, MapUpdate, MapRemove, MapClear };

  LaneOp() : LaneOp(Kind::ValueSet, Value::absent(), Value::absent()) {}

  static LaneOp value_set(Value v) { return LaneOp(Kind::ValueSet, Value::absent(), std::move(v)); }
  static LaneOp map_update(Value k, Value v) { return LaneOp(Kind::MapUpdate, std::move(k), std::move(v)); }
  static LaneOp map_remove(Value k) { return LaneOp(Kind::MapRemove, std::move(k), Value::absent()); }
  static LaneOp map_clear() { return LaneOp(Kind::MapClear, Value::absent(), Value::absent()); }

  Kind kind() const { return kind_; }
  const Value& key() const { return key_; }
  const Value& value() const { return value_; }
  bool is_map_op() const { return kind_ != Kind::ValueSet; }

  Value to_value() const {
    Value rec = Value::record();
    switch (kind_) {
      case Kind::ValueSet:
        rec.set("op", Value::of("set"));
        rec.set("value", value_);
        break;
      case Kind::MapUpdate:
        rec.set("op", Value::of("update"));
        rec.set("key", key_);
        rec.set("value", value_);
        break;
      case Kind::MapRemove:
        rec.set("op", Value::of("remove"));
        rec.set("key", key_);
        break;
      case Kind::MapClear:
        rec.set("op", Value::of("clear"));
        break;
    }
    return rec;
  }

  static std::optional<LaneOp> from_value(const Value& v) {
    const std::string& k = v.get_text("op");
    if (k == "set") return value_set(v.get("value"));
    if (k == "update") return map_update(v.get("key"), v.get("value"));
    if (k == "remove") return map_remove(v.get("key"));
    if (k == "clear") return map_clear();
    return std::nullopt;
  }

 private:
  LaneOp(Kind kind, Value key, Value value)
      : kind_(kind), key_(std::move(key)), value_(std::move(value)) {}

  Kind kind_;
  Value key_;
  Value value_;
};

// One replicated unit: a causally tagged op.
struct OpEvent {
  CausalTag tag;
  LaneOp op;

  Value to_value() const {
    Value rec = Value::record();
    rec.set("tag", tag.to_value());
    rec.set("op", op.to_value());
    return rec;
  }

  static std::optional<OpEvent> from_value(const Value& v) {
    auto op = LaneOp::from_value(v.get("op"));
    if (!op) return std::nullopt;
    return OpEvent{CausalTag::from_value(v.get("tag")), *op};
  }
};

enum class DeliverStatus : uint8_t {
  Applied,
  Buffered,        // causal predecessors missing; held back
  Duplicate,       // dot already delivered; no effect
  BufferOverflow,  // buffer cap hit; caller should reset the link
  KindMismatch,    // map op on a value lane or vice versa
};

struct DeliverResult {
  DeliverStatus status = DeliverStatus::Applied;
  bool changed = false;             // effective state changed
  std::vector<Value> changed_keys;  // map lanes: keys whose entry changed
};

// One op actually applied to the log, with what it changed. A deliver
// call can apply several ops (the new one plus buffered successors); the
// observer sees each in application order — this is what drives lane
// callbacks and uplink broadcasts exactly once per op.
struct AppliedChange {
  CausalTag tag;
  LaneOp op;
  bool changed = false;
  Value old_value;                  // value lanes: eval before this op
  std::vector<Value> changed_keys;  // map lanes
  std::vector<Value> old_values;    // parallel: prior entry, Absent if none
};

class PoLog {
 public:
  static constexpr size_t kDefaultBufferCap = 4096;

  explicit PoLog(LaneDataKind kind) : kind_(kind) {}

  LaneDataKind data_kind() const { return kind_; }

  // Mint the next dot on `replica_id`, apply locally, return the event to
  // stream. The clock snapshot is the delivered clock plus the new dot.
  OpEvent generate(const std::string& replica_id, LaneOp op) {
    CausalTag tag;
    tag.dot.replica = replica_id;
    tag.dot.counter = delivered_.get(replica_id) + 1;
    tag.clock = delivered_;
    tag.clock.put(replica_id, tag.dot.counter);
    OpEvent ev{tag, std::move(op)};
    DeliverResult r = deliver(ev.tag, ev.op);
    assert(r.status == DeliverStatus::Applied);
    (void)r;
    return ev;
  }

  DeliverResult deliver(const CausalTag& tag, const LaneOp& op) {
    DeliverResult out;
    if (op.is_map_op() != (kind_ == LaneDataKind::Map)) {
      out.status = DeliverStatus::KindMismatch;
      return out;
    }
    if (!tag.dot.valid()) {
      out.status = DeliverStatus::KindMismatch;
      return out;
    }
    if ((op.kind() == LaneOp::Kind::MapUpdate || op.kind() == LaneOp::Kind::MapRemove) &&
        op.key().is_absent()) {
      out.status = DeliverStatus::KindMismatch;
      return out;
    }
    if (tag.dot.counter <= delivered_.get(tag.dot.replica)) {
      ++duplicate_count_;
      out.status = DeliverStatus::Duplicate;
      return out;
    }
    if (!deliverable(tag)) {
      for (const auto& b : buffer_)
        if (b.tag.dot == tag.dot) {  // already waiting
          out.status = DeliverStatus::Buffered;
          return out;
        }
      if (buffer_.size() >= buffer_cap_) {
        out.status = DeliverStatus::BufferOverflow;
        return out;
      }
      buffer_.push_back(OpEvent{tag, op});
      out.status = DeliverStatus::Buffered;
      return out;
    }
    apply(tag, op, out);
    drain_buffer(out);
    return out;
  }

  // Effective state. Value lanes: the winning value. Map lanes: a record
  // of slots in key order.
  const Value& eval() const {
    refresh();
    return eval_cache_;
  }

  const std::map<Value, Value, ValueLess>& eval_map() const {
    refresh();
    return map_cache_;
  }

  // Fold everything whose causal past is inside `cut` into the base.
  // eval() is unchanged by construction. The stable clock advances only
  // over dots actually folded, so a cut that is not causally closed
  // still leaves the snapshot consistent.
  void stabilize(const VersionVector& cut) {
    VersionVector c = VersionVector::pointwise_min(cut, delivered_);
    std::vector<Entry> fold;
    for (auto it = entries_.begin(); it != entries_.end();) {
      if (it->tag.clock.leq(c)) {
        fold.push_back(std::move(*it));
        it = entries_.erase(it);
      } else {
        ++it;
      }
    }
    if (fold.empty()) return;
    std::sort(fold.begin(), fold.end(), causal_extension_less);
    VersionVector coverage;
    for (const Entry& e : fold) {
      if (e.tag.dot.counter > coverage.get(e.tag.dot.replica))
        coverage.put(e.tag.dot.replica, e.tag.dot.counter);
      fold_into_base(e);
    }
    stable_.merge(coverage);
    dirty_ = true;
  }

  const VersionVector& delivered() const { return delivered_; }
  const VersionVector& stable() const { return stable_; }
  size_t live_size() const { return entries_.size(); }

  // Unstable ops minted on `replica` with counter > after, in counter
  // order. After a state transfer this is what the transferred cut did
  // not cover and must be replayed and re-sent.
  std::vector<OpEvent> pending_on_line(const std::string& replica, uint64_t after) const {
    std::vector<OpEvent> out;
    for (const Entry& e : entries_)
      if (e.tag.dot.replica == replica && e.tag.dot.counter > after)
        out.push_back(OpEvent{e.tag, e.op});
    std::sort(out.begin(), out.end(),
              [](const OpEvent& a, const OpEvent& b) { return a.tag.dot.counter < b.tag.dot.counter; });
    return out;
  }

  void set_observer(std::function<void(const AppliedChange&)> fn) { observer_ = std::move(fn); }
  size_t buffered_size() const { return buffer_.size(); }
  uint64_t duplicate_count() const { return duplicate_count_; }
  uint64_t applied_count() const { return applied_count_; }
  void set_buffer_cap(size_t cap) { buffer_cap_ = cap; }

  struct BaseEntry {
    Value key;  // Absent for the value-lane base
    Dot dot;
    Value value;
    bool tombstone = false;
  };

  struct Snapshot {
    LaneDataKind kind = LaneDataKind::Value;
    VersionVector stable;
    VersionVector delivered;
    std::vector<BaseEntry> base;
    std::vector<OpEvent> live;  // causal-extension order

    Value to_value() const {
      Value rec = Value::record();
      rec.set("kind", Value::of(kind == LaneDataKind::Map ? "map" : "value"));
      rec.set("stable", stable.to_value());
      rec.set("delivered", delivered.to_value());
      Value b = Value::record();
      for (const BaseEntry& e : base) {
        Value item = Value::record();
        if (e.key.is_defined()) item.set("key", e.key);
        item.set("replica", Value::of(e.dot.replica));
        item.set("counter", Value::of(static_cast<int64_t>(e.dot.counter)));
        if (e.tombstone)
          item.set("tombstone", Value::of(true));
        else
          item.set("value", e.value);
        b.add(std::move(item));
      }
      rec.set("base", std::move(b));
      Value l = Value::record();
      for (const OpEvent& ev : live) l.add(ev.to_value());
      rec.set("live", std::move(l));
      return rec;
    }

    static std::optional<Snapshot> from_value(const Value& v) {
      Snapshot s;
      s.kind = v.get_text("kind") == "map" ? LaneDataKind::Map : LaneDataKind::Value;
      s.stable = VersionVector::from_value(v.get("stable"));
      s.delivered = VersionVector::from_value(v.get("delivered"));
      for (const Item& it : v.get("base").items()) {
        BaseEntry e;
        e.key = it.value.get("key");
        e.dot.replica = it.value.get_text("replica");
        e.dot.counter = static_cast<uint64_t>(it.value.get_int("counter"));
        e.tombstone = it.value.get("tombstone").as_bool();
        e.value = it.value.get("value");
        if (!e.dot.valid()) return std::nullopt;
        s.base.push_back(std::move(e));
      }
      for (const Item& it : v.get("live").items()) {
        auto ev = OpEvent::from_value(it.value);
        if (!ev) return std::nullopt;
        s.live.push_back(std::move(*ev));
      }
      return s;
    }
  };

  // A minimal op sequence that rebuilds this replica: the base rendered
  // as synthetic ops at the stable cut, then the unstable ops.
  Snapshot snapshot() const {
    Snapshot s;
    s.kind = kind_;
    s.stable = stable_;
    s.delivered = delivered_;
    if (kind_ == LaneDataKind::Value) {
      if (value_base_.dot.valid())
        s.base.push_back(BaseEntry{Value::absent(), value_base_.dot, value_base_.value, false});
    } else {
      for (const auto& [k, b] : map_base_)
        s.base.push_back(BaseEntry{k, b.dot, b.value, b.tombstone});
    }
    std::vector<Entry> live = entries_;
    std::sort(live.begin(), live.end(), causal_extension_less);
    for (const Entry& e : live) s.live.push_back(OpEvent{e.tag, e.op});
    return s;
  }

  static PoLog from_snapshot(const Snapshot& s) {
    PoLog log(s.kind);
    for (const BaseEntry& e : s.base) log.install_base(e);
    for (const OpEvent& ev : s.live) log.install_live(ev);
    log.finish_install(s.delivered, s.stable);
    return log;
  }

  // Streaming-sync path: base entries and unstable ops arrive one by one
  // and are installed verbatim — not re-checked for causal readiness,
  // because ops the source pruned leave per-line gaps that would never
  // fill. The clocks land last; ordinary deliveries resume after that.
  void install_base(const BaseEntry& e) {
    assert(delivered_.empty());
    if (kind_ == LaneDataKind::Value) {
      value_base_.dot = e.dot;
      value_base_.value = e.value;
    } else {
      map_base_[e.key] = MapBase{e.dot, e.value, e.tombstone};
    }
    dirty_ = true;
  }

  void install_live(const OpEvent& ev) {
    assert(delivered_.empty());
    entries_.push_back(Entry{ev.tag, ev.op});
    dirty_ = true;
  }

  void finish_install(const VersionVector& delivered_cut, const VersionVector& stable_cut) {
    delivered_ = delivered_cut;
    stable_ = stable_cut;
    dirty_ = true;
  }

 private:
  struct Entry {
    CausalTag tag;
    LaneOp op;
  };

  struct ValueBase {
    Dot dot;  // invalid until the first fold
    Value value;
  };

  struct MapBase {
    Dot dot;
    Value value;
    bool tombstone = false;
  };

  static bool causal_extension_less(const Entry& a, const Entry& b) {
    uint64_t ta = a.tag.clock.total(), tb = b.tag.clock.total();
    if (ta != tb) return ta < tb;
    if (a.tag.dot.counter != b.tag.dot.counter) return a.tag.dot.counter < b.tag.dot.counter;
    return a.tag.dot.replica < b.tag.dot.replica;
  }

  bool deliverable(const CausalTag& tag) const {
    if (tag.dot.counter != delivered_.get(tag.dot.replica) + 1) return false;
    for (const auto& [r, c] : tag.clock.entries()) {
      if (r == tag.dot.replica) continue;
      if (c > delivered_.get(r)) return false;
    }
    return true;
  }

  // Does a new op on `nk`/`nkey` subsume an older entry's target?
  static bool subsumes(const LaneOp& n, const LaneOp& e) {
    switch (n.kind()) {
      case LaneOp::Kind::ValueSet:
        return e.kind() == LaneOp::Kind::ValueSet;
      case LaneOp::Kind::MapClear:
        return e.is_map_op();
      case LaneOp::Kind::MapUpdate:
      case LaneOp::Kind::MapRemove:
        return (e.kind() == LaneOp::Kind::MapUpdate || e.kind() == LaneOp::Kind::MapRemove) &&
               e.key() == n.key();
    }
    return false;
  }

  void apply(const CausalTag& tag, const LaneOp& op, DeliverResult& out) {
    // capture the affected region for change detection
    Value old_value;
    std::vector<Value> affected;
    std::vector<std::pair<bool, Value>> old_at;  // (present, value)
    if (kind_ == LaneDataKind::Value) {
      old_value = eval();
    } else {
      refresh();
      if (op.kind() == LaneOp::Kind::MapClear) {
        for (const auto& [k, v] : map_cache_) affected.push_back(k);
      } else {
        affected.push_back(op.key());
      }
      for (const Value& k : affected) {
        auto it = map_cache_.find(k);
        if (it == map_cache_.end())
          old_at.emplace_back(false, Value::absent());
        else
          old_at.emplace_back(true, it->second);
      }
    }

    for (auto it = entries_.begin(); it != entries_.end();) {
      if (tag.clock.contains(it->tag.dot) && it->tag.dot != tag.dot && subsumes(op, it->op))
        it = entries_.erase(it);
      else
        ++it;
    }
    entries_.push_back(Entry{tag, op});
    delivered_.put(tag.dot.replica, tag.dot.counter);
    ++applied_count_;
    dirty_ = true;

    AppliedChange note;
    if (kind_ == LaneDataKind::Value) {
      out.changed = eval() != old_value;
      if (observer_) {
        note.changed = out.changed;
        note.old_value = std::move(old_value);
      }
    } else {
      refresh();
      for (size_t i = 0; i < affected.size(); ++i) {
        auto it = map_cache_.find(affected[i]);
        bool present = it != map_cache_.end();
        if (present != old_at[i].first || (present && !(it->second == old_at[i].second))) {
          out.changed_keys.push_back(affected[i]);
          if (observer_) {
            note.changed_keys.push_back(affected[i]);
            note.old_values.push_back(old_at[i].first ? old_at[i].second : Value::absent());
          }
        }
      }
      out.changed = !out.changed_keys.empty();
      note.changed = out.changed;
    }
    if (observer_) {
      note.tag = tag;
      note.op = op;
      observer_(note);
    }
  }

  void drain_buffer(DeliverResult& out) {
    bool progressed = true;
    while (progressed) {
      progressed = false;
      for (auto it = buffer_.begin(); it != buffer_.end(); ++it) {
        if (it->tag.dot.counter <= delivered_.get(it->tag.dot.replica)) {
          buffer_.erase(it);  // superseded while buffered
          progressed = true;
          break;
        }
        if (deliverable(it->tag)) {
          OpEvent ev = std::move(*it);
          buffer_.erase(it);
          DeliverResult r;
          apply(ev.tag, ev.op, r);
          if (r.changed) out.changed = true;
          for (Value& k : r.changed_keys) out.changed_keys.push_back(std::move(k));
          progressed = true;
          break;
        }
      }
    }
  }

  void fold_into_base(const Entry& e) {
    switch (e.op.kind()) {
      case LaneOp::Kind::ValueSet: {
        if (!value_base_.dot.valid() || e.tag.clock.contains(value_base_.dot) ||
            e.tag.dot.tie_wins_over(value_base_.dot)) {
          value_base_.dot = e.tag.dot;
          value_base_.value = e.op.value();
        }
        break;
      }
      case LaneOp::Kind::MapUpdate:
      case LaneOp::Kind::MapRemove: {
        bool tomb = e.op.kind() == LaneOp::Kind::MapRemove;
        auto it = map_base_.find(e.op.key());
        if (it == map_base_.end() || e.tag.clock.contains(it->second.dot) ||
            e.tag.dot.tie_wins_over(it->second.dot)) {
          map_base_[e.op.key()] =
              MapBase{e.tag.dot, tomb ? Value::absent() : e.op.value(), tomb};
        }
        break;
      }
      case LaneOp::Kind::MapClear: {
        for (auto it = map_base_.begin(); it != map_base_.end();) {
          if (e.tag.clock.contains(it->second.dot))
            it = map_base_.erase(it);
          else
            ++it;
        }
        break;
      }
    }
  }

  void refresh() const {
    if (!dirty_) return;
    dirty_ = false;
    if (kind_ == LaneDataKind::Value) {
      // candidates: live sets (pairwise concurrent) plus the folded base
      const Dot* win_dot = nullptr;
      const Value* win_val = nullptr;
      if (value_base_.dot.valid()) {
        bool dominated = false;
        for (const Entry& e : entries_)
          if (e.tag.clock.contains(value_base_.dot)) {
            dominated = true;
            break;
          }
        if (!dominated) {
          win_dot = &value_base_.dot;
          win_val = &value_base_.value;
        }
      }
      for (const Entry& e : entries_) {
        if (!win_dot || e.tag.dot.tie_wins_over(*win_dot)) {
          win_dot = &e.tag.dot;
          win_val = &e.op.value();
        }
      }
      eval_cache_ = win_val ? *win_val : value_base_.value;
      return;
    }

    map_cache_.clear();
    struct Candidate {
      const Dot* dot;
      const Value* value;
      bool remove;
    };
    std::map<Value, std::vector<Candidate>, ValueLess> per_key;
    for (const auto& [k, b] : map_base_) {
      bool filtered = false;
      for (const Entry& e : entries_) {
        if (e.tag.clock.contains(b.dot) &&
            (e.op.kind() == LaneOp::Kind::MapClear ||
             ((e.op.kind() == LaneOp::Kind::MapUpdate || e.op.kind() == LaneOp::Kind::MapRemove) &&
              e.op.key() == k))) {
          filtered = true;  // dominated by a live op on the same target
          break;
        }
      }
      if (!filtered) per_key[k].push_back(Candidate{&b.dot, &b.value, b.tombstone});
    }
    for (const Entry& e : entries_) {
      if (e.op.kind() == LaneOp::Kind::MapUpdate)
        per_key[e.op.key()].push_back(Candidate{&e.tag.dot, &e.op.value(), false});
      else if (e.op.kind() == LaneOp::Kind::MapRemove)
        per_key[e.op.key()].push_back(Candidate{&e.tag.dot, nullptr, true});
    }
    for (auto& [k, cands] : per_key) {
      const Candidate* win = nullptr;
      for (const Candidate& c : cands)
        if (!win || c.dot->tie_wins_over(*win->dot)) win = &c;
      if (win && !win->remove) map_cache_.emplace(k, *win->value);
    }
    eval_cache_ = Value::record();
    for (const auto& [k, v] : map_cache_) eval_cache_.set(k, v);
  }

  LaneDataKind kind_;
  std::vector<Entry> entries_;
  std::vector<OpEvent> buffer_;
  size_t buffer_cap_ = kDefaultBufferCap;
  VersionVector delivered_;
  VersionVector stable_;
  ValueBase value_base_;
  std::map<Value, MapBase, ValueLess> map_base_;
  uint64_t duplicate_count_ = 0;
  uint64_t applied_count_ = 0;
  std::function<void(const AppliedChange&)> observer_;

  mutable bool dirty_ = true;
  mutable Value eval_cache_;
  mutable std::map<Value, Value, ValueLess> map_cache_;
};

}  // namespace swimlet

#endif  // SWIMLET_CRDT_HPP
