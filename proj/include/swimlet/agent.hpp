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

#ifndef SWIMLET_AGENT_HPP
#define SWIMLET_AGENT_HPP

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "swimlet/crdt.hpp"
#include "swimlet/stream.hpp"
#include "swimlet/uri.hpp"
#include "swimlet/value.hpp"

// Web agents: stateful actors addressed by node URI, mutated only through
// lanes, scheduled one activation at a time. An agent owns a StreamHub —
// its mailbox and priority delivery queues — and the runtime drives it
// through the activation state machine below, which guarantees that at
// most one execution context ever runs the agent's callbacks while still
// letting any thread wake it.

namespace swimlet {

enum class LinkMode : uint8_t { ReadOnly, WriteOnly, ReadWrite, ObserveOnly };

inline const char* link_mode_name(LinkMode m) {
  switch (m) {
    case LinkMode::ReadOnly: return "read-only";
    case LinkMode::WriteOnly: return "write-only";
    case LinkMode::ReadWrite: return "read-write";
    case LinkMode::ObserveOnly: return "observe-only";
  }
  return "?";
}

inline std::optional<LinkMode> link_mode_from(std::string_view s) {
  if (s == "read-only") return LinkMode::ReadOnly;
  if (s == "write-only") return LinkMode::WriteOnly;
  if (s == "read-write") return LinkMode::ReadWrite;
  if (s == "observe-only") return LinkMode::ObserveOnly;
  return std::nullopt;
}

// May this endpoint push ops toward the owner?
inline bool mode_writes(LinkMode m) {
  return m == LinkMode::ReadWrite || m == LinkMode::WriteOnly;
}
// Does this endpoint receive state updates?
inline bool mode_reads(LinkMode m) { return m != LinkMode::WriteOnly; }

enum class LaneKind : uint8_t { Value, Map, JoinValue, JoinMap, DemandValue, DemandMap };

inline const char* lane_kind_name(LaneKind k) {
  switch (k) {
    case LaneKind::Value: return "value";
    case LaneKind::Map: return "map";
    case LaneKind::JoinValue: return "join-value";
    case LaneKind::JoinMap: return "join-map";
    case LaneKind::DemandValue: return "demand-value";
    case LaneKind::DemandMap: return "demand-map";
  }
  return "?";
}

inline std::optional<LaneKind> lane_kind_from(std::string_view s) {
  if (s == "value") return LaneKind::Value;
  if (s == "map") return LaneKind::Map;
  if (s == "join-value") return LaneKind::JoinValue;
  if (s == "join-map") return LaneKind::JoinMap;
  if (s == "demand-value") return LaneKind::DemandValue;
  if (s == "demand-map") return LaneKind::DemandMap;
  return std::nullopt;
}

inline bool lane_kind_is_demand(LaneKind k) {
  return k == LaneKind::DemandValue || k == LaneKind::DemandMap;
}
inline bool lane_kind_is_map_shaped(LaneKind k) {
  return k == LaneKind::Map || k == LaneKind::JoinValue || k == LaneKind::JoinMap;
}

class Agent;
class Lane;

// One subscriber attached to a lane, as the lane sees it. The link layer
// adapts these onto actor streams (remote) or sibling hubs (local); for
// observe-only endpoints the adapter must mask causal metadata, which is
// why it receives the full change note and the current value.
class LaneUplink {
 public:
  virtual ~LaneUplink() = default;
  virtual LinkMode mode() const = 0;
  // An applied op. `current` is the lane's value after the op. Returning
  // false reports overflow; the adapter owns the consequences (reset).
  virtual bool offer(const AppliedChange& note, const Value& current) = 0;
  // A demand-lane product (also used to prime demand downlinks).
  virtual void offer_demand(const Value& product) = 0;
};

// Services an agent gets from its hosting runtime. All optional: with no
// post function agents run their turns inline (single-threaded tests),
// and without a persist hook nothing is logged.
struct AgentServices {
  std::string replica_id = "local";
  std::function<void(std::function<void()>)> post;
  std::function<void(Agent&, Lane&, const OpEvent&)> persist;
  // join-lane membership hooks: the runtime opens/closes the member
  // downlink and routes its events back into the join lane
  std::function<void(Agent&, Lane&, const Value& key, const NodeUri&, const std::string&)>
      member_added;
  std::function<void(Agent&, Lane&, const Value& key)> member_removed;
};

class Lane {
 public:
  Lane(Agent* agent, std::string name, LaneKind kind)
      : agent_(agent),
        name_(std::move(name)),
        kind_(kind),
        log_(lane_kind_is_demand(kind)
                 ? nullptr
                 : std::make_unique<PoLog>(lane_kind_is_map_shaped(kind) ? LaneDataKind::Map
                                                                         : LaneDataKind::Value)) {
    if (log_) log_->set_observer([this](const AppliedChange& n) { applied(n); });
  }

  Lane(const Lane&) = delete;
  Lane& operator=(const Lane&) = delete;

  const std::string& name() const { return name_; }
  LaneKind kind() const { return kind_; }
  bool is_demand() const { return lane_kind_is_demand(kind_); }
  Agent& agent() { return *agent_; }

  // ---- state ------------------------------------------------------------

  // Current value: eval for logged lanes, last product for demand lanes.
  // Never blocks.
  const Value& read() const { return log_ ? log_->eval() : last_product_; }

  PoLog& log() {
    if (!log_) throw std::logic_error("demand lane has no log: " + name_);
    return *log_;
  }
  const PoLog* log_if_any() const { return log_.get(); }

  // Replace the log wholesale — recovery and relocation install state
  // this way. Must run in the agent's context before traffic flows.
  void adopt_log(PoLog&& restored) {
    if (!log_) throw std::logic_error("demand lane has no log: " + name_);
    *log_ = std::move(restored);
    log_->set_observer([this](const AppliedChange& n) { applied(n); });
  }

  // ---- owner-side mutation ------------------------------------------------

  void set(Value v) {
    require_kind(LaneKind::Value);
    generate(LaneOp::value_set(std::move(v)));
  }
  void update(Value key, Value v) {
    require_map();
    generate(LaneOp::map_update(std::move(key), std::move(v)));
  }
  void remove(Value key) {
    require_map();
    generate(LaneOp::map_remove(std::move(key)));
  }
  void clear() {
    require_map();
    generate(LaneOp::map_clear());
  }

  // Remote op entry (link layer): `via` is suppressed from the fan-out so
  // the sender does not hear its own op back.
  DeliverResult deliver(const CausalTag& tag, const LaneOp& op, const LaneUplink* via = nullptr) {
    if (!log_) return DeliverResult{DeliverStatus::KindMismatch, false, {}};
    via_ = via;
    DeliverResult r = log_->deliver(tag, op);
    via_ = nullptr;
    return r;
  }

  // ---- join membership ------------------------------------------------------

  // Insert a member: the runtime opens a downlink to (node, lane) and
  // mirrors its state into this map under `key`; removing the key closes
  // the downlink and drops the entry.
  void add_member(Value key, const NodeUri& node, const std::string& lane_name);
  void remove_member(Value key);

  // ---- demand ----------------------------------------------------------------

  void on_cue(std::function<Value()> producer) { producer_ = std::move(producer); }
  bool has_producer() const { return static_cast<bool>(producer_); }

  // Ask for a fresh product on the next activation. Bursts coalesce: any
  // number of cues between activations yields one production.
  void cue();

  // Produce immediately (single-shot reads and sync priming).
  Value demand_value();

  uint64_t produce_count() const { return produce_count_; }

  // ---- callbacks -------------------------------------------------------------

  void did_set(std::function<void(const Value& now, const Value& was)> fn) {
    did_set_ = std::move(fn);
  }
  void did_update(std::function<void(const Value& key, const Value& now, const Value& was)> fn) {
    did_update_ = std::move(fn);
  }
  void did_remove(std::function<void(const Value& key, const Value& was)> fn) {
    did_remove_ = std::move(fn);
  }

  // ---- uplink registry ---------------------------------------------------------

  void add_uplink(LaneUplink* u) { uplinks_.push_back(u); }
  void remove_uplink(LaneUplink* u) {
    for (auto it = uplinks_.begin(); it != uplinks_.end(); ++it)
      if (*it == u) {
        uplinks_.erase(it);
        return;
      }
  }
  size_t uplink_count() const { return uplinks_.size(); }
  uint64_t uplink_overflows() const { return uplink_overflows_; }

 private:
  friend class Agent;

  void require_kind(LaneKind k) {
    if (kind_ != k)
      throw std::logic_error("lane " + name_ + " is " + lane_kind_name(kind_) + ", not " +
                             lane_kind_name(k));
  }
  void require_map() {
    if (!lane_kind_is_map_shaped(kind_))
      throw std::logic_error("lane " + name_ + " is not map-shaped");
  }

  void generate(LaneOp op);
  void applied(const AppliedChange& note);
  void flush_cue();

  Agent* agent_;
  std::string name_;
  LaneKind kind_;
  std::unique_ptr<PoLog> log_;
  const LaneUplink* via_ = nullptr;

  std::function<Value()> producer_;
  Value last_product_;
  bool cued_ = false;
  uint64_t produce_count_ = 0;

  std::function<void(const Value&, const Value&)> did_set_;
  std::function<void(const Value&, const Value&, const Value&)> did_update_;
  std::function<void(const Value&, const Value&)> did_remove_;

  std::vector<LaneUplink*> uplinks_;
  uint64_t uplink_overflows_ = 0;
};

class Agent {
 public:
  enum class LifeState : uint8_t { Created, Started, Stopped };

  explicit Agent(NodeUri node, const StreamConfig& cfg = StreamConfig{})
      : node_(std::move(node)), hub_(cfg, [this] { activate(); }) {}

  virtual ~Agent() = default;
  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  const NodeUri& node() const { return node_; }
  StreamHub& hub() { return hub_; }
  LifeState life_state() const { return life_; }

  // attach runtime services; must happen before start()
  void bind(AgentServices* services) { services_ = services; }
  AgentServices* services() { return services_; }

  void start() {
    if (life_ != LifeState::Created) return;
    life_ = LifeState::Started;
    guard([&] { did_start(); });
  }
  void stop() {
    if (life_ == LifeState::Stopped) return;
    life_ = LifeState::Stopped;
    guard([&] { did_stop(); });
  }

  // ---- lanes ---------------------------------------------------------------

  Lane& value_lane(const std::string& name) { return lane_of(name, LaneKind::Value); }
  Lane& map_lane(const std::string& name) { return lane_of(name, LaneKind::Map); }
  Lane& join_value_lane(const std::string& name) { return lane_of(name, LaneKind::JoinValue); }
  Lane& join_map_lane(const std::string& name) { return lane_of(name, LaneKind::JoinMap); }
  Lane& demand_value_lane(const std::string& name) { return lane_of(name, LaneKind::DemandValue); }
  Lane& demand_map_lane(const std::string& name) { return lane_of(name, LaneKind::DemandMap); }

  Lane* find_lane(const std::string& name) {
    auto it = lanes_.find(name);
    return it == lanes_.end() ? nullptr : it->second.get();
  }
  const std::map<std::string, std::unique_ptr<Lane>>& lanes() const { return lanes_; }

  // ---- scheduling ------------------------------------------------------------

  // Run a closure inside this agent's execution context on its next
  // activation. Safe from any thread. This is how the runtime touches
  // lanes — attach/detach subscribers, apply routed writes, snapshot for
  // relocation — without racing the agent's own callbacks.
  void enqueue_task(std::function<void()> fn) {
    {
      std::lock_guard lk(tasks_mu_);
      tasks_.push_back(std::move(fn));
    }
    activate();
  }

  // Wake the agent. Safe from any thread; collapses into the current or
  // already-pending activation when one exists.
  void activate() {
    int s = sched_.load(std::memory_order_relaxed);
    for (;;) {
      if (s == kIdle) {
        if (sched_.compare_exchange_weak(s, kScheduled, std::memory_order_acq_rel)) {
          post_turn();
          return;
        }
      } else if (s == kRunning) {
        if (sched_.compare_exchange_weak(s, kRunningAgain, std::memory_order_acq_rel)) return;
      } else {
        return;  // scheduled or running-again: a wake is already owed
      }
    }
  }

  // One activation: drain per stream/mailbox limits, run handlers, flush
  // coalesced demand cues. Returns whether more work remains.
  bool run_turn() {
    ++turns_;
    std::vector<std::function<void()>> tasks;
    {
      std::lock_guard lk(tasks_mu_);
      tasks.swap(tasks_);
    }
    for (auto& t : tasks) guard(t);
    bool more = hub_.run_turn();
    for (auto& [name, lane] : lanes_)
      if (lane->cued_) lane->flush_cue();
    return more;
  }

  uint64_t turns() const { return turns_; }
  uint64_t callback_errors() const { return callback_errors_; }

  // run `fn`, isolating exceptions so one bad callback cannot poison the
  // agent or the runtime
  template <typename Fn>
  void guard(Fn&& fn) {
    try {
      fn();
    } catch (...) {
      ++callback_errors_;
    }
  }

  // instrumentation for atomicity checks: how many contexts are inside
  // run_turn right now (must never exceed 1)
  int concurrent_entries() const { return entries_.load(std::memory_order_acquire); }

 protected:
  virtual void did_start() {}
  virtual void did_stop() {}

 private:
  friend class Lane;

  static constexpr int kIdle = 0, kScheduled = 1, kRunning = 2, kRunningAgain = 3;

  Lane& lane_of(const std::string& name, LaneKind kind) {
    auto it = lanes_.find(name);
    if (it != lanes_.end()) {
      if (it->second->kind() != kind)
        throw std::logic_error("lane " + name + " already exists with kind " +
                               lane_kind_name(it->second->kind()));
      return *it->second;
    }
    auto lane = std::make_unique<Lane>(this, name, kind);
    return *lanes_.emplace(name, std::move(lane)).first->second;
  }

  void post_turn() {
    if (services_ && services_->post) {
      services_->post([this] { turn_task(); });
    } else {
      turn_task();
    }
  }

  void turn_task() {
    for (;;) {
      sched_.store(kRunning, std::memory_order_release);
      entries_.fetch_add(1, std::memory_order_acq_rel);
      bool more = false;
      guard([&] { more = run_turn(); });
      entries_.fetch_sub(1, std::memory_order_acq_rel);

      int expect = kRunningAgain;
      if (!sched_.compare_exchange_strong(expect, kScheduled, std::memory_order_acq_rel)) {
        // still kRunning: nothing poked us mid-turn
        if (!more) {
          expect = kRunning;
          if (sched_.compare_exchange_strong(expect, kIdle, std::memory_order_acq_rel)) return;
          // lost the race to a late wake; fall through and go again
          sched_.store(kScheduled, std::memory_order_release);
        } else {
          sched_.store(kScheduled, std::memory_order_release);
        }
      }
      if (services_ && services_->post) {
        services_->post([this] { turn_task(); });
        return;  // yield the worker between turns
      }
    }
  }

  NodeUri node_;
  StreamHub hub_;
  AgentServices* services_ = nullptr;
  LifeState life_ = LifeState::Created;
  std::mutex tasks_mu_;
  std::vector<std::function<void()>> tasks_;
  std::map<std::string, std::unique_ptr<Lane>> lanes_;
  std::atomic<int> sched_{kIdle};
  std::atomic<int> entries_{0};
  uint64_t turns_ = 0;
  std::atomic<uint64_t> callback_errors_{0};
};

// ---- Lane methods that need the full Agent type ---------------------------

inline void Lane::generate(LaneOp op) {
  const std::string& replica =
      agent_->services() ? agent_->services()->replica_id : std::string("local");
  log_->generate(replica, std::move(op));  // observer fires applied()
}

inline void Lane::applied(const AppliedChange& note) {
  // fan out to subscribers first: state streams to links strictly before
  // it is persisted, keeping storage off the propagation path
  for (LaneUplink* u : uplinks_) {
    if (u == via_ || !mode_reads(u->mode())) continue;
    if (!u->offer(note, log_->eval())) ++uplink_overflows_;
  }
  if (agent_->services() && agent_->services()->persist)
    agent_->services()->persist(*agent_, *this, OpEvent{note.tag, note.op});

  if (!note.changed) return;
  if (kind_ == LaneKind::Value) {
    if (did_set_) agent_->guard([&] { did_set_(log_->eval(), note.old_value); });
  } else {
    const auto& now = log_->eval_map();
    for (size_t i = 0; i < note.changed_keys.size(); ++i) {
      const Value& key = note.changed_keys[i];
      auto it = now.find(key);
      if (it != now.end()) {
        if (did_update_) agent_->guard([&] { did_update_(key, it->second, note.old_values[i]); });
      } else {
        if (did_remove_) agent_->guard([&] { did_remove_(key, note.old_values[i]); });
      }
    }
  }
}

inline void Lane::add_member(Value key, const NodeUri& node, const std::string& lane_name) {
  if (kind_ != LaneKind::JoinValue && kind_ != LaneKind::JoinMap)
    throw std::logic_error("lane " + name_ + " is not a join lane");
  if (agent_->services() && agent_->services()->member_added)
    agent_->services()->member_added(*agent_, *this, key, node, lane_name);
}

inline void Lane::remove_member(Value key) {
  if (kind_ != LaneKind::JoinValue && kind_ != LaneKind::JoinMap)
    throw std::logic_error("lane " + name_ + " is not a join lane");
  if (agent_->services() && agent_->services()->member_removed)
    agent_->services()->member_removed(*agent_, *this, key);
  remove(std::move(key));
}

inline void Lane::cue() {
  if (!producer_) throw std::logic_error("demand lane " + name_ + " has no producer");
  cued_ = true;
  agent_->activate();
}

inline Value Lane::demand_value() {
  if (!producer_) throw std::logic_error("demand lane " + name_ + " has no producer");
  Value v;
  agent_->guard([&] { v = producer_(); });
  ++produce_count_;
  last_product_ = v;
  return v;
}

inline void Lane::flush_cue() {
  cued_ = false;
  if (uplinks_.empty()) return;  // demand-driven: nobody is listening
  Value product = demand_value();
  for (LaneUplink* u : uplinks_)
    if (mode_reads(u->mode())) u->offer_demand(product);
}

// Pattern → factory registration: agents come into being the first time
// their node URI is resolved. An optional affinity key makes a family of
// nodes hash as one unit for placement.
class AgentRegistry {
 public:
  using Factory = std::function<std::unique_ptr<Agent>(const NodeUri&)>;
  using AffinityKey = std::function<std::string(const NodeUri&)>;

  void register_type(const std::string& pattern, Factory factory, AffinityKey affinity = nullptr) {
    NodePattern p = NodePattern::of(pattern);
    // two patterns that differ only in the wildcard's label match the
    // same node set, so they collide
    NodeUri shape = NodeUri::of(pattern);
    std::string canon;
    for (const auto& seg : shape.segments()) {
      canon += '/';
      canon += seg[0] == ':' ? std::string(":") : seg;
    }
    for (const auto& e : entries_)
      if (e.canon == canon) throw std::invalid_argument("duplicate pattern: " + pattern);
    entries_.push_back(
        TypeEntry{std::move(p), std::move(canon), std::move(factory), std::move(affinity)});
  }

  bool known(const NodeUri& node) const {
    for (const auto& e : entries_)
      if (e.pattern.matches(node)) return true;
    return false;
  }

  std::unique_ptr<Agent> create(const NodeUri& node) const {
    for (const auto& e : entries_)
      if (e.pattern.matches(node)) return e.factory(node);
    return nullptr;
  }

  // what the placement layer hashes for this node
  std::string placement_key(const NodeUri& node) const {
    for (const auto& e : entries_)
      if (e.pattern.matches(node)) return e.affinity ? e.affinity(node) : node.str();
    return node.str();
  }

 private:
  struct TypeEntry {
    NodePattern pattern;
    std::string canon;
    Factory factory;
    AffinityKey affinity;
  };
  std::vector<TypeEntry> entries_;
};

}  // namespace swimlet

#endif  // SWIMLET_AGENT_HPP
