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
//
// One mesh instance: hosts the agents it owns, replicates lanes it links
// to, and speaks the framed protocol to its peers. The control plane —
// peer table, link registries, replica cache, placement — lives on a
// strand; agents run their turns wherever the kernel puts them and are
// reached only through their own task queues and stream hubs.
//
// Placement is a consistent-hash ring over all configured instances plus
// relocation overrides; an instance that finds a node in its local agent
// table serves it regardless of the ring, which keeps routing stable in
// the window between an install and the override broadcast.

#ifndef SWIMLET_INSTANCE_HPP
#define SWIMLET_INSTANCE_HPP

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "swimlet/agent.hpp"
#include "swimlet/connection.hpp"
#include "swimlet/crdt.hpp"
#include "swimlet/kernel.hpp"
#include "swimlet/ring.hpp"
#include "swimlet/store.hpp"
#include "swimlet/strand.hpp"
#include "swimlet/stream.hpp"
#include "swimlet/transport.hpp"
#include "swimlet/wire.hpp"

namespace swimlet {

struct InstanceConfig {
  std::string instance_id;
  std::string listen_address;  // defaults to instance_id
  std::vector<std::pair<std::string, std::string>> peers;  // id → address
  std::string data_dir;        // empty: volatile instance

  StreamConfig stream;
  FsyncPolicy fsync = FsyncPolicy::Interval;
  int64_t fsync_interval_ms = 10;
  size_t segment_bytes = 64ull << 20;
  double compact_ratio = 4.0;
  size_t compact_floor = 64;

  int virtual_nodes = 64;
  int64_t ping_period_ms = 500;
  int ping_misses = 3;
  int64_t reconnect_min_ms = 500;
  int64_t reconnect_max_ms = 30'000;
  int64_t stability_period_ms = 100;
  int64_t compaction_period_ms = 1'000;
  int64_t install_timeout_ms = 5'000;

  std::string auth_token;
  bool require_token = false;
};

struct InstanceMetrics {
  std::atomic<uint64_t> ops_ingested{0};
  std::atomic<uint64_t> commands_forwarded{0};
  std::atomic<uint64_t> commands_applied{0};
  std::atomic<uint64_t> commands_parked{0};
  std::atomic<uint64_t> commands_dropped{0};
  std::atomic<uint64_t> events_sent{0};
  std::atomic<uint64_t> events_received{0};
  std::atomic<uint64_t> links_opened{0};
  std::atomic<uint64_t> links_accepted{0};
  std::atomic<uint64_t> links_rejected{0};
  std::atomic<uint64_t> syncs_served{0};
  std::atomic<uint64_t> syncs_completed{0};
  std::atomic<uint64_t> resets_sent{0};
  std::atomic<uint64_t> resets_received{0};
  std::atomic<uint64_t> partitions_detected{0};
  std::atomic<uint64_t> reconnects{0};
  std::atomic<uint64_t> relocations{0};
  std::atomic<uint64_t> gets_served{0};
  std::atomic<uint64_t> overrides_applied{0};
  std::atomic<uint64_t> stability_broadcasts{0};

  std::string text() const {
    std::string out;
    auto line = [&](const char* k, const std::atomic<uint64_t>& v) {
      out += k;
      out += ' ';
      out += std::to_string(v.load(std::memory_order_relaxed));
      out += '\n';
    };
    line("commands.applied", commands_applied);
    line("commands.dropped", commands_dropped);
    line("commands.forwarded", commands_forwarded);
    line("commands.parked", commands_parked);
    line("events.received", events_received);
    line("events.sent", events_sent);
    line("gets.served", gets_served);
    line("links.accepted", links_accepted);
    line("links.opened", links_opened);
    line("links.rejected", links_rejected);
    line("ops.ingested", ops_ingested);
    line("overrides.applied", overrides_applied);
    line("partitions.detected", partitions_detected);
    line("reconnects", reconnects);
    line("relocations", relocations);
    line("resets.received", resets_received);
    line("resets.sent", resets_sent);
    line("stability.broadcasts", stability_broadcasts);
    line("syncs.completed", syncs_completed);
    line("syncs.served", syncs_served);
    return out;
  }
};

class Instance {
 public:
  Instance(Kernel& kernel, Transport& transport, InstanceConfig cfg)
      : kernel_(kernel), transport_(transport), cfg_(std::move(cfg)), strand_(kernel) {
    if (cfg_.listen_address.empty()) cfg_.listen_address = cfg_.instance_id;
    services_.replica_id = cfg_.instance_id;
    services_.post = [this](std::function<void()> fn) { kernel_.post(std::move(fn)); };
    services_.persist = [this](Agent& a, Lane& l, const OpEvent& ev) {
      if (store_) store_->append_op(a.node().str(), l.name(), ev);
    };
    services_.member_added = [this](Agent& a, Lane& l, const Value& key, const NodeUri& node,
                                    const std::string& lane) {
      Agent* ap = &a;
      Lane* lp = &l;
      strand_.post([this, ap, lp, key, node, lane] { join_member(ap, lp, key, node, lane); });
    };
    services_.member_removed = [this](Agent& a, Lane& l, const Value& key) {
      Agent* ap = &a;
      Lane* lp = &l;
      strand_.post([this, ap, lp, key] { drop_member(ap, lp, key); });
    };
  }

  ~Instance() { stop(); }
  Instance(const Instance&) = delete;
  Instance& operator=(const Instance&) = delete;

  const std::string& id() const { return cfg_.instance_id; }
  const InstanceConfig& config() const { return cfg_; }
  AgentRegistry& registry() { return registry_; }
  InstanceMetrics& metrics() { return metrics_; }
  Strand& strand() { return strand_; }
  Kernel& kernel() { return kernel_; }
  LogStore* store() { return store_.get(); }
  Placement& placement() { return placement_; }

  // ---- lifecycle ------------------------------------------------------------

  void start() {
    if (started_) return;
    started_ = true;
    placement_ = Placement(cfg_.virtual_nodes);
    placement_.ring().add_instance(cfg_.instance_id);
    for (auto& [pid, addr] : cfg_.peers) {
      placement_.ring().add_instance(pid);
      PeerState& p = peers_[pid];
      p.id = pid;
      p.address = addr;
      p.backoff_ms = cfg_.reconnect_min_ms;
    }
    if (!cfg_.data_dir.empty()) open_store();
    transport_.on_accept = [this](ConduitPtr c) {
      auto shared = std::make_shared<ConduitPtr>(std::move(c));
      strand_.post([this, shared] { adopt_connection(std::move(*shared), false); });
    };
    transport_.listen(cfg_.listen_address);
    strand_.post([this] {
      for (auto& [pid, p] : peers_)
        if (cfg_.instance_id < pid) schedule_dial(p, 0);
    });
    arm_timer(cfg_.ping_period_ms, [this] { ping_sweep(); });
    arm_timer(cfg_.stability_period_ms, [this] { stability_sweep(); });
    if (store_) {
      arm_timer(cfg_.compaction_period_ms, [this] { compaction_sweep(); });
      if (cfg_.fsync == FsyncPolicy::Interval)
        arm_timer(cfg_.fsync_interval_ms, [this] { flush_sweep(); });
    }
  }

  void stop() {
    if (!started_ || stopped_.exchange(true)) return;
    {
      std::lock_guard lk(timers_mu_);
      for (uint64_t t : timers_) kernel_.cancel(t);
      timers_.clear();
    }
    strand_.post([this] {
      std::vector<ConnectionPtr> open;
      for (auto& [c, st] : conns_) open.push_back(st->conn);
      for (auto& c : open) c->close("instance stopping");
      for (auto& [n, a] : agents_) {
        Agent* raw = a.get();
        raw->enqueue_task([raw] { raw->stop(); });
      }
      if (store_) store_->flush();
    });
    transport_.shutdown();
  }

  // ---- data plane -----------------------------------------------------------

  // Exogenous write: applied locally when this instance owns the node,
  // otherwise forwarded as one COMMAND toward the owner.
  void ingest(const NodeUri& node, const std::string& lane, wire::Write w) {
    metrics_.ops_ingested.fetch_add(1, std::memory_order_relaxed);
    strand_.post([this, node, lane, w = std::move(w)] { do_ingest(node, lane, w); });
  }

  using GetCallback = std::function<void(bool ok, Value value, std::string error)>;

  // One-shot read. The callback may run on an agent context (local reads)
  // or on the strand (proxied reads and errors).
  void get(const NodeUri& node, const std::string& lane, GetCallback cb) {
    strand_.post([this, node, lane, cb = std::move(cb)] { do_get(node, lane, std::move(cb)); });
  }

  using DoneCallback = std::function<void(bool ok, std::string error)>;

  // Move a node's agent to another instance: park writes, quiesce, ship
  // snapshots, broadcast the override, then reset subscriber links so
  // they re-route. Aborts cleanly if the target cannot confirm.
  void relocate(const NodeUri& node, const std::string& target, DoneCallback done = nullptr) {
    strand_.post([this, node, target, done = std::move(done)] {
      do_relocate(node, target, std::move(done));
    });
  }

  // ---- downlink surface (in-process consumers: tools, tests) -----------------

  class Downlink;

  Downlink* open_downlink(const NodeUri& node, const std::string& lane,
                          LinkMode mode = LinkMode::ReadOnly, int priority = 0) {
    auto core = std::make_shared<DownCore>();
    auto handle = std::make_unique<Downlink>(this, node, lane, mode, core);
    Downlink* raw = handle.get();
    {
      std::lock_guard lk(handles_mu_);
      handles_.push_back(std::move(handle));
    }
    strand_.post([this, node, lane, mode, priority, core] {
      ReplicaSession* s = ensure_session(node, lane, mode, priority);
      s->cores.push_back(core);
      if (s->synced_flag.load()) {
        {
          std::lock_guard lk(core->mu);
          core->published = s->published;
        }
        core->synced.store(true);
        core->stale.store(s->stale_flag.load());
      }
    });
    return raw;
  }

  // ---- introspection (drive from the owning thread or a settled sim) ---------

  Agent* local_agent(const NodeUri& node) {
    auto it = agents_.find(node.str());
    return it == agents_.end() ? nullptr : it->second.get();
  }
  size_t local_agent_count() const { return agents_.size(); }
  std::vector<std::string> local_agent_nodes() const {
    std::vector<std::string> out;
    for (auto& [n, a] : agents_) out.push_back(n);
    return out;
  }
  std::string route_of(const NodeUri& node) { return resolve(node); }
  bool peer_connected(const std::string& pid) {
    auto it = peers_.find(pid);
    return it != peers_.end() && it->second.connected;
  }
  std::string metrics_text() const {
    std::string out = "instance " + cfg_.instance_id + "\n";
    out += "agents " + std::to_string(agents_.size()) + "\n";
    out += metrics_.text();
    return out;
  }

  // =============================================================================
  // internals (public types so the nested classes can interoperate)
  // =============================================================================

  struct DownCore {
    std::mutex mu;
    Value published;
    std::atomic<bool> stale{false};
    std::atomic<bool> synced{false};
    std::atomic<uint64_t> resets{0};
    std::atomic<uint64_t> events{0};
  };

  class ReplicaSession;

  // Owner side of one subscriber stream. Attached either to a local lane
  // (this instance owns the node) or to a replica session (this instance
  // mediates for a client). Events ride an actor stream whose permits are
  // granted by the subscriber's CREDIT frames; a state transfer buffers
  // through `backlog` so it interleaves correctly with live ops.
  class OwnerUplink final : public LaneUplink {
   public:
    Instance* inst = nullptr;
    ConnectionPtr conn;
    uint32_t sid = 0;
    NodeUri node;
    std::string lane_name;
    LinkMode link_mode = LinkMode::ReadOnly;
    int priority = 0;
    wire::WireKind kind = wire::WireKind::Value;
    bool lane_attached = false;
    Agent* agent = nullptr;
    Lane* lane = nullptr;
    ReplicaSession* source = nullptr;
    bool linked_sent = false;

    StreamPtr out;  // events toward the subscriber
    StreamPtr in;   // writes from the subscriber (lane-attached RW/WO)

    std::mutex mu;
    std::deque<Value> backlog;
    bool syncing = false;
    bool synced_pending = false;
    Value synced_body;
    std::atomic<bool> synced_done{false};
    std::atomic<bool> failed{false};
    bool has_ack = false;
    VersionVector acked;

    LinkMode mode() const override { return link_mode; }

    bool offer(const AppliedChange& note, const Value& current) override {
      Value body = link_mode == LinkMode::ObserveOnly
                       ? wire::event_masked(note, current)
                       : wire::event_op(OpEvent{note.tag, note.op});
      return push(std::move(body), false);
    }

    void offer_demand(const Value& product) override {
      push(wire::event_product(product), false);
    }

    // Send or queue one event body, preserving order. A bounded backlog
    // smooths bursts past the stream window; a subscriber that stays
    // behind longer than that gets its link reset and must resync.
    bool push(Value body, bool unbounded) {
      if (failed.load(std::memory_order_relaxed)) return false;
      std::unique_lock lk(mu);
      if (!unbounded && !syncing && backlog.size() >= kBacklogCap) return fail_locked();
      backlog.push_back(std::move(body));
      drain_locked(lk);
      return !failed.load(std::memory_order_relaxed);
    }

    // State transfer. Runs in the source's context (agent for lanes, the
    // strand for replicas), which is the same context its ops apply in,
    // so backlog order is exact: everything applied before the snapshot
    // went out ahead of it; everything after lands behind it.
    void begin_sync_logged(const PoLog& log) {
      PoLog::Snapshot snap = log.snapshot();
      std::vector<Value> items;
      if (link_mode == LinkMode::ObserveOnly) {
        items.push_back(masked_state(log));
      } else {
        items.reserve(snap.base.size() + snap.live.size());
        for (const PoLog::BaseEntry& e : snap.base) items.push_back(wire::event_base(e));
        for (const OpEvent& ev : snap.live) items.push_back(wire::event_live(ev));
      }
      Value done = link_mode == LinkMode::ObserveOnly
                       ? Value::record()
                       : wire::synced({snap.delivered, snap.stable});
      std::unique_lock lk(mu);
      syncing = true;
      for (Value& v : items) backlog.push_back(std::move(v));
      synced_body = std::move(done);
      synced_pending = true;
      drain_locked(lk);
    }

    void begin_sync_demand(const Value& last_product, bool have_product) {
      std::unique_lock lk(mu);
      syncing = true;
      if (have_product) backlog.push_back(wire::event_product(last_product));
      synced_body = Value::record();
      synced_pending = true;
      drain_locked(lk);
    }

    void on_credit(const wire::Credit& c) {
      if (c.has_ack) {
        std::lock_guard lk(mu);
        acked = c.ack;
        has_ack = true;
      }
      if (c.n > 0) out->grant(c.n);
      std::unique_lock lk(mu);
      drain_locked(lk);
    }

    std::optional<VersionVector> ack_clock() {
      std::lock_guard lk(mu);
      if (!has_ack) return std::nullopt;
      return acked;
    }

    static Value masked_state(const PoLog& log) {
      Value b = Value::record();
      if (log.data_kind() == LaneDataKind::Value) {
        b.set("set", log.eval());
        return b;
      }
      Value delta = Value::record();
      for (const auto& [k, v] : log.eval_map()) {
        Value item = Value::record();
        item.set("key", k);
        item.set("value", v);
        delta.add(std::move(item));
      }
      b.set("delta", std::move(delta));
      return b;
    }

   private:
    static constexpr size_t kBacklogCap = 256;

    bool fail_locked() {
      backlog.clear();
      if (!failed.exchange(true)) {
        Instance* i = inst;
        Connection* c = conn.get();
        uint32_t s = sid;
        i->strand_.post([i, c, s] { i->reset_uplink(c, s); });
      }
      return false;
    }

    void drain_locked(std::unique_lock<std::mutex>& lk) {
      while (!backlog.empty()) {
        if (out->try_enqueue(backlog.front()) != EnqueueResult::Ok) return;
        inst->metrics_.events_sent.fetch_add(1, std::memory_order_relaxed);
        backlog.pop_front();
      }
      if (synced_pending) {
        synced_pending = false;
        syncing = false;
        Value body = synced_body;
        bool was_synced = synced_done.exchange(true);
        lk.unlock();
        conn->send(FrameType::Synced, sid, body);
        if (!was_synced) inst->metrics_.syncs_completed.fetch_add(1, std::memory_order_relaxed);
        lk.lock();
      }
    }
  };

  using UplinkPtr = std::shared_ptr<OwnerUplink>;

  // A local reader the runtime attaches to a lane it also owns, feeding a
  // replica session without any frames on the wire.
  class LocalTap final : public LaneUplink {
   public:
    Instance* inst = nullptr;
    ReplicaSession* session = nullptr;

    LinkMode mode() const override { return LinkMode::ReadOnly; }

    bool offer(const AppliedChange& note, const Value& current) override {
      ReplicaSession* s = session;
      Instance* i = inst;
      i->strand_.post([i, s, note, current] { i->session_local_event(s, note, current); });
      return true;
    }

    void offer_demand(const Value& product) override {
      ReplicaSession* s = session;
      Instance* i = inst;
      i->strand_.post([i, s, product] { i->session_local_product(s, product); });
    }
  };

  // Subscriber side of one lane: this instance's replica of remote state,
  // shared by every local consumer (join lanes, downlink handles, watch
  // callbacks) and by mediated client links. Owned by the strand; never
  // erased, so raw pointers to it stay valid for the instance lifetime.
  class ReplicaSession {
   public:
    enum class LState { Unlinked, Linking, Linked, Syncing, Synced, Local };

    Instance* inst = nullptr;
    NodeUri node;
    std::string lane_name;
    LinkMode link_mode = LinkMode::ReadOnly;
    int priority = 0;
    wire::WireKind kind = wire::WireKind::Value;
    bool kind_known = false;
    LState lstate = LState::Unlinked;
    std::string failed_reason;

    Connection* conn = nullptr;
    uint32_t sid = 0;

    std::unique_ptr<PoLog> replica;
    std::unique_ptr<PoLog> staging;
    std::deque<OpEvent> during_sync;

    StreamPtr write_out;
    std::deque<Value> write_backlog;
    int consumed_since_grant = 0;

    struct JoinSub {
      uint64_t id = 0;
      StreamPtr stream;
      Agent* owner = nullptr;
      std::optional<Value> pending;  // latest value awaiting permits
    };
    std::vector<JoinSub> subs;
    std::vector<OwnerUplink*> mediated;
    std::vector<OwnerUplink*> pending_syncs;
    std::vector<std::function<void(const Value&)>> watchers;
    std::vector<std::shared_ptr<DownCore>> cores;
    uint64_t next_sub_id = 1;

    Value published;
    std::atomic<bool> stale_flag{false};
    std::atomic<bool> synced_flag{false};
    std::atomic<uint64_t> reset_count{0};
    std::atomic<uint64_t> event_count{0};
    bool ever_synced = false;

    std::unique_ptr<LocalTap> tap;
    Agent* local_agent = nullptr;
    Lane* local_lane = nullptr;

    bool logged() const { return kind != wire::WireKind::Demand; }
  };

  // Public read handle over a replica session.
  class Downlink {
   public:
    Downlink(Instance* inst, NodeUri node, std::string lane, LinkMode mode,
             std::shared_ptr<DownCore> core)
        : inst_(inst), node_(std::move(node)), lane_(std::move(lane)), mode_(mode),
          core_(std::move(core)) {}

    const NodeUri& node() const { return node_; }
    const std::string& lane() const { return lane_; }

    Value read() const {
      std::lock_guard lk(core_->mu);
      return core_->published;
    }
    bool stale() const { return core_->stale.load(std::memory_order_acquire); }
    bool synced() const { return core_->synced.load(std::memory_order_acquire); }
    uint64_t resets() const { return core_->resets.load(std::memory_order_relaxed); }
    uint64_t events() const { return core_->events.load(std::memory_order_relaxed); }

    // Callback on every state change, run on the instance's control
    // strand. Keep it light.
    void on_event(std::function<void(const Value& now)> fn) {
      Instance* inst = inst_;
      NodeUri node = node_;
      std::string lane = lane_;
      LinkMode mode = mode_;
      inst->strand_.post([inst, node, lane, mode, fn = std::move(fn)]() mutable {
        ReplicaSession* s = inst->ensure_session(node, lane, mode, 0);
        s->watchers.push_back(std::move(fn));
      });
    }

    void set(Value v) { write(wire::Write{wire::Write::Set, Value::absent(), std::move(v)}); }
    void update(Value key, Value v) {
      write(wire::Write{wire::Write::Update, std::move(key), std::move(v)});
    }
    void remove(Value key) {
      write(wire::Write{wire::Write::Remove, std::move(key), Value::absent()});
    }
    void clear_map() { write(wire::Write{wire::Write::Clear, Value::absent(), Value::absent()}); }

   private:
    void write(wire::Write w) {
      mode_ = mode_writes(mode_) ? mode_ : LinkMode::ReadWrite;
      LinkMode m = mode_;
      inst_->strand_.post([inst = inst_, node = node_, lane = lane_, m, w = std::move(w)] {
        ReplicaSession* s = inst->ensure_session(node, lane, m, 0);
        inst->session_local_write(s, w);
      });
    }

    Instance* inst_;
    NodeUri node_;
    std::string lane_;
    LinkMode mode_;
    std::shared_ptr<DownCore> core_;
    friend class Instance;
  };

 private:
  using LinkKey = std::pair<std::string, std::string>;

  struct PeerState {
    std::string id;
    std::string address;
    ConnectionPtr conn;
    bool connected = false;
    bool ever_connected = false;
    int64_t disconnected_since = 0;
    int64_t backoff_ms = 500;
    bool dialing = false;
    bool dial_scheduled = false;
  };

  struct ConnState {
    ConnectionPtr conn;
    std::string peer;
    bool is_peer = false;
    std::map<uint32_t, UplinkPtr> uplinks;
    std::map<uint32_t, ReplicaSession*> downlinks;
  };

  struct GetWait {
    bool to_conn = false;
    ConnectionPtr reply_conn;
    uint32_t reply_sid = 0;
    GetCallback cb;
    NodeUri node;
    std::string lane;
  };

  struct AdminWait {
    ConnectionPtr reply_conn;
    uint32_t reply_sid = 0;
  };

  struct InstallWait {
    NodeUri node;
    std::string target;
    DoneCallback done;
    uint64_t timer = 0;
  };

  struct ParkedWrite {
    NodeUri node;
    std::string lane;
    wire::Write w;
  };

  // Held writes per unreachable owner; beyond this they count as drops.
  static constexpr size_t kIngestParkCap = 4096;

  struct JoinRef {
    LinkKey session_key;
    uint64_t sub_id = 0;
  };

  // ---- storage ----------------------------------------------------------------

  void open_store() {
    io_ = std::make_unique<FileIo>();
    StoreConfig sc;
    sc.dir = cfg_.data_dir;
    sc.fsync = cfg_.fsync;
    sc.segment_bytes = cfg_.segment_bytes;
    sc.compact_ratio = cfg_.compact_ratio;
    sc.compact_floor = cfg_.compact_floor;
    store_ = std::make_unique<LogStore>(sc, *io_);
    RecoveredState rec = store_->recover();
    for (auto& [key, log] : rec.lanes) {
      NodeUri node = NodeUri::of(key.first);
      Agent* agent = nullptr;
      auto it = agents_.find(node.str());
      if (it != agents_.end()) {
        agent = it->second.get();
      } else {
        auto a = registry_.create(node);
        if (!a) continue;  // pattern no longer registered; leave on disk
        a->bind(&services_);
        agent = a.get();
        agents_.emplace(node.str(), std::move(a));
      }
      Lane* lane = agent->find_lane(key.second);
      if (!lane) {
        lane = log.data_kind() == LaneDataKind::Map ? &agent->map_lane(key.second)
                                                    : &agent->value_lane(key.second);
      }
      if (!lane->log_if_any()) continue;  // kind drifted to demand; skip
      lane->adopt_log(std::move(log));
    }
    for (auto& [n, a] : agents_) {
      Agent* raw = a.get();
      raw->enqueue_task([raw] { raw->start(); });
    }
  }

  // ---- routing ------------------------------------------------------------------

  std::string resolve(const NodeUri& node) {
    if (agents_.count(node.str())) return cfg_.instance_id;
    return placement_.route(node, registry_.placement_key(node));
  }

  Agent* ensure_local_agent(const NodeUri& node) {
    auto it = agents_.find(node.str());
    if (it != agents_.end()) return it->second.get();
    auto a = registry_.create(node);
    if (!a) return nullptr;
    a->bind(&services_);
    Agent* raw = a.get();
    agents_.emplace(node.str(), std::move(a));
    raw->enqueue_task([raw] { raw->start(); });
    return raw;
  }

  static void apply_write(Lane& lane, const wire::Write& w) {
    switch (w.kind) {
      case wire::Write::Set:
        lane.set(w.value);
        break;
      case wire::Write::Update:
        lane.update(w.key, w.value);
        break;
      case wire::Write::Remove:
        lane.remove(w.key);
        break;
      case wire::Write::Clear:
        lane.clear();
        break;
    }
  }

  void do_ingest(const NodeUri& node, const std::string& lane, const wire::Write& w) {
    if (relocating_.count(node.str())) {
      parked_.push_back(ParkedWrite{node, lane, w});
      metrics_.commands_parked.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    std::string target = resolve(node);
    if (target == cfg_.instance_id) {
      Agent* agent = ensure_local_agent(node);
      if (!agent) {
        metrics_.commands_dropped.fetch_add(1, std::memory_order_relaxed);
        return;
      }
      agent->enqueue_task([agent, lane, w] {
        Lane* l = agent->find_lane(lane);
        if (l) apply_write(*l, w);
      });
      metrics_.commands_applied.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    auto pit = peers_.find(target);
    if (pit != peers_.end() && pit->second.connected && pit->second.conn->ready()) {
      pit->second.conn->send(FrameType::Command, 0, wire::command(node, lane, w));
      metrics_.commands_forwarded.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    // Owner unreachable: hold the write and retry when the peer returns.
    // The cap is the would-block signal — past it the adapter is losing
    // events and the drop counter says so.
    std::deque<ParkedWrite>& q = peer_parked_[target];
    if (q.size() < kIngestParkCap) {
      q.push_back(ParkedWrite{node, lane, w});
      metrics_.commands_parked.fetch_add(1, std::memory_order_relaxed);
    } else {
      metrics_.commands_dropped.fetch_add(1, std::memory_order_relaxed);
    }
  }

  void do_get(const NodeUri& node, const std::string& lane, GetCallback cb) {
    std::string target = resolve(node);
    if (target == cfg_.instance_id) {
      Agent* agent = ensure_local_agent(node);
      if (!agent) {
        cb(false, Value::absent(), "unknown-node");
        return;
      }
      agent->enqueue_task([agent, lane, cb = std::move(cb)] {
        Lane* l = agent->find_lane(lane);
        if (!l) {
          cb(false, Value::absent(), "unknown-lane");
          return;
        }
        Value v = (l->is_demand() && l->has_producer()) ? l->demand_value() : l->read();
        cb(true, std::move(v), "");
      });
      metrics_.gets_served.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    auto pit = peers_.find(target);
    if (pit == peers_.end() || !pit->second.connected || !pit->second.conn->ready()) {
      cb(false, Value::absent(), "unreachable");
      return;
    }
    Connection* up = pit->second.conn.get();
    uint32_t sid = up->alloc_stream_id();
    GetWait wait;
    wait.cb = std::move(cb);
    wait.node = node;
    wait.lane = lane;
    gets_.emplace(std::make_pair(up, sid), std::move(wait));
    up->send(FrameType::Get, sid, wire::get(node, lane));
  }

  // ---- connections -----------------------------------------------------------

  void adopt_connection(ConduitPtr c, bool initiator) {
    auto conn = std::make_shared<Connection>(strand_, std::move(c), initiator, cfg_.instance_id,
                                             cfg_.auth_token, cfg_.require_token);
    Connection* raw = conn.get();
    auto st = std::make_unique<ConnState>();
    st->conn = conn;
    conns_.emplace(raw, std::move(st));
    conn->on_ready = [this, raw](const std::string& peer) { on_conn_ready(raw, peer); };
    conn->on_frame = [this, raw](Frame&& f) { handle_frame(raw, std::move(f)); };
    conn->on_down = [this, raw](const std::string& reason) { on_conn_down(raw, reason); };
    conn->start();
  }

  void on_conn_ready(Connection* c, const std::string& peer) {
    auto cit = conns_.find(c);
    if (cit == conns_.end()) return;
    ConnState& st = *cit->second;
    st.peer = peer;
    auto pit = peers_.find(peer);
    if (pit == peers_.end()) return;  // a client connection
    PeerState& p = pit->second;
    if (p.connected && p.conn && p.conn.get() != c) {
      c->close("duplicate connection");
      return;
    }
    st.is_peer = true;
    p.conn = st.conn;
    bool was_down = p.ever_connected;
    p.connected = true;
    p.ever_connected = true;
    p.dialing = false;
    p.backoff_ms = cfg_.reconnect_min_ms;
    if (was_down) metrics_.reconnects.fetch_add(1, std::memory_order_relaxed);
    kernel_.trace("mesh:" + cfg_.instance_id, "up " + peer);
    relink_peer(peer);
    auto qit = peer_parked_.find(peer);
    if (qit != peer_parked_.end()) {
      std::deque<ParkedWrite> held = std::move(qit->second);
      peer_parked_.erase(qit);
      // routes may have shifted while the peer was away, so resolve again
      for (ParkedWrite& pw : held) do_ingest(pw.node, pw.lane, pw.w);
    }
  }

  void on_conn_down(Connection* c, const std::string& reason) {
    auto cit = conns_.find(c);
    if (cit == conns_.end()) return;
    std::unique_ptr<ConnState> st = std::move(cit->second);
    conns_.erase(cit);

    for (auto& [sid, up] : st->uplinks) detach_uplink_ptr(up);
    st->uplinks.clear();
    for (auto& [sid, session] : st->downlinks) {
      session_reset(session);
      relink(session);  // usually a no-op until the peer is back
    }
    st->downlinks.clear();

    for (auto it = gets_.begin(); it != gets_.end();) {
      if (it->first.first == c) {
        GetWait w = std::move(it->second);
        it = gets_.erase(it);
        answer_get(w, false, Value::absent(), "unreachable");
      } else {
        ++it;
      }
    }
    for (auto it = installs_.begin(); it != installs_.end();) {
      if (it->first.first == c) {
        InstallWait w = std::move(it->second);
        kernel_.cancel(w.timer);
        it = installs_.erase(it);
        finish_relocation_failure(w, "target connection lost");
      } else {
        ++it;
      }
    }

    if (st->is_peer) {
      auto pit = peers_.find(st->peer);
      if (pit != peers_.end() && pit->second.conn.get() == c) {
        PeerState& p = pit->second;
        p.connected = false;
        p.conn.reset();
        p.disconnected_since = kernel_.now_nanos();
        metrics_.partitions_detected.fetch_add(1, std::memory_order_relaxed);
        kernel_.trace("mesh:" + cfg_.instance_id, "down " + st->peer + " (" + reason + ")");
        if (cfg_.instance_id < p.id && !stopped_.load()) schedule_dial(p, p.backoff_ms);
      }
    }
    // hold the last reference until in-flight strand work drains, so the
    // connection never destructs inside one of its own callbacks
    strand_.post([keep = st->conn] { (void)keep; });
  }

  void schedule_dial(PeerState& p, int64_t delay_ms) {
    if (p.dial_scheduled || p.connected || stopped_.load()) return;
    p.dial_scheduled = true;
    std::string pid = p.id;
    kernel_.schedule(delay_ms * kMillis, [this, pid] {
      strand_.post([this, pid] {
        auto it = peers_.find(pid);
        if (it == peers_.end()) return;
        PeerState& p2 = it->second;
        p2.dial_scheduled = false;
        if (p2.connected || p2.dialing || stopped_.load()) return;
        p2.dialing = true;
        transport_.dial(
            p2.address,
            [this, pid](ConduitPtr c) {
              auto shared = std::make_shared<ConduitPtr>(std::move(c));
              strand_.post([this, pid, shared] {
                auto it2 = peers_.find(pid);
                if (it2 != peers_.end()) it2->second.dialing = false;
                adopt_connection(std::move(*shared), true);
              });
            },
            [this, pid](const std::string&) {
              strand_.post([this, pid] {
                auto it2 = peers_.find(pid);
                if (it2 == peers_.end()) return;
                PeerState& p3 = it2->second;
                p3.dialing = false;
                p3.backoff_ms = std::min<int64_t>(p3.backoff_ms * 2, cfg_.reconnect_max_ms);
                schedule_dial(p3, p3.backoff_ms);
              });
            });
      });
    });
  }

  // ---- timers ------------------------------------------------------------------

  void arm_timer(int64_t period_ms, std::function<void()> fn) {
    std::lock_guard lk(timers_mu_);
    if (stopped_.load()) return;
    timers_.push_back(kernel_.schedule(period_ms * kMillis, std::move(fn)));
  }

  void ping_sweep() {
    if (stopped_.load()) return;
    strand_.post([this] {
      for (auto& [pid, p] : peers_) {
        if (!p.connected || !p.conn || !p.conn->ready()) continue;
        if (p.conn->outstanding_pings() >= cfg_.ping_misses)
          p.conn->close("peer unresponsive");
        else
          p.conn->send_ping();
      }
    });
    arm_timer(cfg_.ping_period_ms, [this] { ping_sweep(); });
  }

  void flush_sweep() {
    if (stopped_.load()) return;
    if (store_) store_->flush();
    arm_timer(cfg_.fsync_interval_ms, [this] { flush_sweep(); });
  }

  // ---- frame dispatch ----------------------------------------------------------

  void handle_frame(Connection* c, Frame&& f) {
    auto cit = conns_.find(c);
    if (cit == conns_.end()) return;
    ConnState& st = *cit->second;
    switch (f.type) {
      case FrameType::Link: handle_link(c, st, f); break;
      case FrameType::Linked: handle_linked(st, f); break;
      case FrameType::Sync: handle_sync(st, f); break;
      case FrameType::Synced: handle_synced(st, f); break;
      case FrameType::Event: handle_event(c, st, f); break;
      case FrameType::Command: handle_command(c, st, f); break;
      case FrameType::Credit: handle_credit(st, f); break;
      case FrameType::Reset: handle_reset(st, f); break;
      case FrameType::Unlink: handle_unlink(c, st, f); break;
      case FrameType::Unlinked: handle_unlinked(st, f); break;
      case FrameType::Get: handle_get(c, f); break;
      case FrameType::State: handle_state(c, f); break;
      default: break;
    }
  }

  // ---- owner side -----------------------------------------------------------------

  void handle_link(Connection* c, ConnState& st, const Frame& f) {
    auto req = wire::parse_link(f.body);
    if (!req) {
      c->send(FrameType::Unlinked, f.stream_id, wire::unlinked("unknown-node"));
      metrics_.links_rejected.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    std::string target = resolve(req->node);
    if (target == cfg_.instance_id) {
      accept_link(st, f.stream_id, *req);
      return;
    }
    if (!registry_.known(req->node)) {
      c->send(FrameType::Unlinked, f.stream_id, wire::unlinked("unknown-node"));
      metrics_.links_rejected.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    mediate_link(st, f.stream_id, *req);
  }

  void accept_link(ConnState& st, uint32_t sid, const wire::LinkRequest& req) {
    ConnectionPtr conn = st.conn;
    Agent* agent = ensure_local_agent(req.node);
    if (!agent) {
      conn->send(FrameType::Unlinked, sid, wire::unlinked("unknown-node"));
      metrics_.links_rejected.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    Lane* lane = agent->find_lane(req.lane);
    if (!lane) {
      conn->send(FrameType::Unlinked, sid, wire::unlinked("unknown-lane"));
      metrics_.links_rejected.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    auto up = std::make_shared<OwnerUplink>();
    OwnerUplink* u = up.get();
    u->inst = this;
    u->conn = conn;
    u->sid = sid;
    u->node = req.node;
    u->lane_name = req.lane;
    u->link_mode = req.mode;
    u->priority = req.priority;
    u->kind = wire::wire_kind_of(lane->kind());
    u->lane_attached = true;
    u->agent = agent;
    u->lane = lane;
    u->out = std::make_shared<ActorStream>(sid, req.priority, cfg_.stream);
    u->out->set_transfer([conn, sid](Value v) { conn->send(FrameType::Event, sid, v); });
    if (mode_writes(req.mode) && u->kind != wire::WireKind::Demand) {
      u->in = std::make_shared<ActorStream>(sid, req.priority, cfg_.stream);
      Lane* lp = lane;
      agent->hub().register_stream(
          u->in,
          [lp, u](const StreamPtr&, Value v) {
            auto ev = OpEvent::from_value(v);
            if (ev) lp->deliver(ev->tag, ev->op, u);
          },
          [conn, sid](const StreamPtr&, int n) {
            conn->send(FrameType::Credit, sid, wire::credit(n));
          });
    }
    st.uplinks.emplace(sid, std::move(up));
    agent->enqueue_task([lane, u] { lane->add_uplink(u); });
    u->linked_sent = true;
    conn->send(FrameType::Linked, sid, wire::linked({req.node, req.lane, u->kind}));
    metrics_.links_accepted.fetch_add(1, std::memory_order_relaxed);
  }

  void mediate_link(ConnState& st, uint32_t sid, const wire::LinkRequest& req) {
    ConnectionPtr conn = st.conn;
    LinkMode upstream = mode_writes(req.mode) ? LinkMode::ReadWrite : LinkMode::ReadOnly;
    ReplicaSession* s = ensure_session(req.node, req.lane, upstream, req.priority);
    auto up = std::make_shared<OwnerUplink>();
    OwnerUplink* u = up.get();
    u->inst = this;
    u->conn = conn;
    u->sid = sid;
    u->node = req.node;
    u->lane_name = req.lane;
    u->link_mode = req.mode;
    u->priority = req.priority;
    u->source = s;
    u->out = std::make_shared<ActorStream>(sid, req.priority, cfg_.stream);
    u->out->set_transfer([conn, sid](Value v) { conn->send(FrameType::Event, sid, v); });
    st.uplinks.emplace(sid, std::move(up));
    s->mediated.push_back(u);
    metrics_.links_accepted.fetch_add(1, std::memory_order_relaxed);
    if (session_live(s)) {
      u->kind = s->kind;
      u->linked_sent = true;
      conn->send(FrameType::Linked, sid, wire::linked({req.node, req.lane, s->kind}));
    }
    // otherwise LINKED goes out when the upstream link comes up
  }

  bool session_live(ReplicaSession* s) {
    return s->lstate == ReplicaSession::LState::Synced ||
           s->lstate == ReplicaSession::LState::Local;
  }

  void handle_sync(ConnState& st, const Frame& f) {
    auto it = st.uplinks.find(f.stream_id);
    if (it == st.uplinks.end()) return;
    metrics_.syncs_served.fetch_add(1, std::memory_order_relaxed);
    serve_sync(it->second.get());
  }

  void serve_sync(OwnerUplink* u) {
    if (u->lane_attached) {
      Lane* lane = u->lane;
      u->agent->enqueue_task([lane, u] {
        if (lane->is_demand()) {
          bool have = lane->has_producer();
          u->begin_sync_demand(have ? lane->demand_value() : Value::absent(), have);
        } else {
          u->begin_sync_logged(lane->log());
        }
      });
      return;
    }
    ReplicaSession* s = u->source;
    if (!session_live(s)) {
      s->pending_syncs.push_back(u);
      return;
    }
    serve_mediated_sync(u, s);
  }

  void serve_mediated_sync(OwnerUplink* u, ReplicaSession* s) {
    if (s->lstate == ReplicaSession::LState::Local) {
      Lane* lane = s->local_lane;
      s->local_agent->enqueue_task([lane, u] {
        if (lane->is_demand()) {
          bool have = lane->has_producer();
          u->begin_sync_demand(have ? lane->demand_value() : Value::absent(), have);
        } else {
          u->begin_sync_logged(lane->log());
        }
      });
      return;
    }
    if (!s->logged()) {
      u->begin_sync_demand(s->published, s->published.is_defined());
      return;
    }
    u->begin_sync_logged(*s->replica);
  }

  void handle_event(Connection* c, ConnState& st, Frame& f) {
    metrics_.events_received.fetch_add(1, std::memory_order_relaxed);
    auto dit = st.downlinks.find(f.stream_id);
    if (dit != st.downlinks.end()) {
      session_wire_event(dit->second, f.body);
      return;
    }
    auto uit = st.uplinks.find(f.stream_id);
    if (uit != st.uplinks.end()) {
      OwnerUplink* u = uit->second.get();
      if (!u->lane_attached || !u->in || !mode_writes(u->link_mode)) {
        reset_uplink(c, f.stream_id);  // events are illegal on this stream
        return;
      }
      if (!u->in->push_recv(std::move(f.body))) {
        reset_uplink(c, f.stream_id);  // permit violation
        return;
      }
      u->agent->hub().ready(u->in);
    }
  }

  void handle_credit(ConnState& st, const Frame& f) {
    wire::Credit cr = wire::parse_credit(f.body);
    auto uit = st.uplinks.find(f.stream_id);
    if (uit != st.uplinks.end()) {
      uit->second->on_credit(cr);
      return;
    }
    auto dit = st.downlinks.find(f.stream_id);
    if (dit != st.downlinks.end()) {
      ReplicaSession* s = dit->second;
      if (s->write_out && cr.n > 0) {
        s->write_out->grant(cr.n);
        drain_session_writes(s);
      }
    }
  }

  void handle_command(Connection* c, ConnState& st, const Frame& f) {
    const Value& b = f.body;
    if (b.get("override").is_defined()) {
      const Value& o = b.get("override");
      auto node = NodeUri::parse(o.get_text("node"));
      if (!node) return;
      apply_override(*node, o.get_text("instance"));
      reroute_sessions(node->str());
      return;
    }
    if (b.get("install").is_defined()) {
      handle_install(c, f.stream_id, b);
      return;
    }
    if (b.get("relocate").is_defined()) {
      const Value& r = b.get("relocate");
      auto node = NodeUri::parse(r.get_text("node"));
      std::string target{r.get_text("instance")};
      if (!node || target.empty()) {
        c->send(FrameType::State, f.stream_id, wire::state_error("bad relocate"));
        return;
      }
      handle_admin_relocate(st.conn, f.stream_id, *node, target, b.get("forwarded").as_bool());
      return;
    }
    if (b.get("node").is_defined()) {
      auto node = NodeUri::parse(b.get_text("node"));
      auto w = wire::parse_write(b);
      std::string lane = b.get_text("lane");
      if (!node || !w || lane.empty()) return;
      do_ingest(*node, lane, *w);
      return;
    }
    // stream-scoped client write
    auto uit = st.uplinks.find(f.stream_id);
    if (uit == st.uplinks.end()) return;
    OwnerUplink* u = uit->second.get();
    auto w = wire::parse_write(b);
    if (!w) return;
    if (u->link_mode == LinkMode::ObserveOnly) {
      c->send(FrameType::Unlinked, f.stream_id, wire::unlinked("unauthorized"));
      detach_uplink(st, f.stream_id, false);
      metrics_.links_rejected.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    if (u->lane_attached) {
      Agent* agent = u->agent;
      Lane* lane = u->lane;
      agent->enqueue_task([lane, w2 = *w] { apply_write(*lane, w2); });
    } else {
      session_local_write(u->source, *w);
    }
    metrics_.commands_applied.fetch_add(1, std::memory_order_relaxed);
  }

  void handle_unlink(Connection* c, ConnState& st, const Frame& f) {
    detach_uplink(st, f.stream_id, false);
    c->send(FrameType::Unlinked, f.stream_id, wire::unlinked("unlinked"));
  }

  void handle_get(Connection* c, const Frame& f) {
    auto cit = conns_.find(c);
    if (cit == conns_.end()) return;
    ConnectionPtr reply = cit->second->conn;
    auto node = NodeUri::parse(f.body.get_text("node"));
    std::string lane = f.body.get_text("lane");
    uint32_t sid = f.stream_id;
    if (!node || lane.empty()) {
      reply->send(FrameType::State, sid, wire::state_error("unknown-node"));
      return;
    }
    NodeUri n = *node;
    do_get(n, lane, [reply, sid, n, lane](bool ok, Value v, std::string err) {
      // may run on an agent context; connection sends are thread-safe
      if (ok)
        reply->send(FrameType::State, sid, wire::state(n, lane, v));
      else
        reply->send(FrameType::State, sid, wire::state_error(err));
    });
  }

  void handle_state(Connection* c, const Frame& f) {
    auto git = gets_.find(std::make_pair(c, f.stream_id));
    if (git != gets_.end()) {
      GetWait w = std::move(git->second);
      gets_.erase(git);
      if (f.body.get("error").is_defined())
        answer_get(w, false, Value::absent(), f.body.get_text("error"));
      else
        answer_get(w, true, f.body.get("value"), "");
      return;
    }
    auto iit = installs_.find(std::make_pair(c, f.stream_id));
    if (iit != installs_.end()) {
      InstallWait w = std::move(iit->second);
      installs_.erase(iit);
      kernel_.cancel(w.timer);
      if (f.body.get("ok").as_bool())
        finish_relocation_success(w);
      else
        finish_relocation_failure(w, f.body.get_text("error"));
      return;
    }
    auto ait = admin_waits_.find(std::make_pair(c, f.stream_id));
    if (ait != admin_waits_.end()) {
      AdminWait w = std::move(ait->second);
      admin_waits_.erase(ait);
      if (w.reply_conn) w.reply_conn->send(FrameType::State, w.reply_sid, f.body);
      return;
    }
  }

  void answer_get(GetWait& w, bool ok, Value v, const std::string& err) {
    if (w.to_conn && w.reply_conn) {
      if (ok)
        w.reply_conn->send(FrameType::State, w.reply_sid, wire::state(w.node, w.lane, v));
      else
        w.reply_conn->send(FrameType::State, w.reply_sid, wire::state_error(err));
      return;
    }
    if (w.cb) w.cb(ok, std::move(v), err);
  }

  void handle_reset(ConnState& st, const Frame& f) {
    metrics_.resets_received.fetch_add(1, std::memory_order_relaxed);
    auto dit = st.downlinks.find(f.stream_id);
    if (dit != st.downlinks.end()) {
      ReplicaSession* s = dit->second;
      st.downlinks.erase(dit);
      session_reset(s);
      relink(s);  // re-resolves; the owner may have moved
      return;
    }
    detach_uplink(st, f.stream_id, false);
  }

  void handle_unlinked(ConnState& st, const Frame& f) {
    auto dit = st.downlinks.find(f.stream_id);
    if (dit == st.downlinks.end()) return;
    ReplicaSession* s = dit->second;
    st.downlinks.erase(dit);
    std::string reason = f.body.get_text("reason");
    session_reset(s);
    s->failed_reason = reason;
    kernel_.trace("mesh:" + cfg_.instance_id, "unlinked " + s->node.str() + "#" + s->lane_name +
                              " (" + reason + ")");
    // a terminal rejection propagates to mediated consumers
    std::vector<OwnerUplink*> meds = s->mediated;
    s->mediated.clear();
    s->pending_syncs.clear();
    for (OwnerUplink* u : meds) {
      u->conn->send(FrameType::Unlinked, u->sid, wire::unlinked(reason));
      auto cit = conns_.find(u->conn.get());
      if (cit == conns_.end()) continue;
      auto uit = cit->second->uplinks.find(u->sid);
      if (uit == cit->second->uplinks.end() || uit->second.get() != u) continue;
      UplinkPtr keep = uit->second;
      cit->second->uplinks.erase(uit);
      keep->out->mark_reset();
    }
  }

  // ---- subscriber side ------------------------------------------------------------

  ReplicaSession* ensure_session(const NodeUri& node, const std::string& lane, LinkMode mode,
                                 int priority) {
    LinkKey key{node.str(), lane};
    auto it = replicas_.find(key);
    if (it == replicas_.end()) {
      auto s = std::make_unique<ReplicaSession>();
      s->inst = this;
      s->node = node;
      s->lane_name = lane;
      s->link_mode = mode;
      s->priority = priority;
      it = replicas_.emplace(std::move(key), std::move(s)).first;
      relink(it->second.get());
      return it->second.get();
    }
    ReplicaSession* s = it->second.get();
    if (mode_writes(mode) && !mode_writes(s->link_mode)) {
      // upgrade: tear the link down and reopen it read-write
      s->link_mode = LinkMode::ReadWrite;
      if (s->lstate != ReplicaSession::LState::Unlinked &&
          s->lstate != ReplicaSession::LState::Local) {
        if (s->conn && s->conn->ready())
          s->conn->send(FrameType::Unlink, s->sid, Value::record());
        forget_session_stream(s);
        session_reset(s);
      }
    }
    if (s->lstate == ReplicaSession::LState::Unlinked) relink(s);
    return s;
  }

  void forget_session_stream(ReplicaSession* s) {
    if (!s->conn) return;
    auto cit = conns_.find(s->conn);
    if (cit != conns_.end()) cit->second->downlinks.erase(s->sid);
  }

  void relink(ReplicaSession* s) {
    if (stopped_.load() || s->lstate != ReplicaSession::LState::Unlinked) return;
    if (!s->failed_reason.empty()) return;  // terminal rejection; no auto-retry
    std::string target = resolve(s->node);
    if (target == cfg_.instance_id) {
      attach_local(s);
      return;
    }
    auto pit = peers_.find(target);
    if (pit == peers_.end() || !pit->second.connected || !pit->second.conn->ready())
      return;  // relink_peer fires when the peer comes up
    open_link(s, pit->second.conn);
  }

  void open_link(ReplicaSession* s, const ConnectionPtr& conn) {
    uint32_t sid = conn->alloc_stream_id();
    s->conn = conn.get();
    s->sid = sid;
    s->lstate = ReplicaSession::LState::Linking;
    auto cit = conns_.find(conn.get());
    if (cit != conns_.end()) cit->second->downlinks[sid] = s;
    if (mode_writes(s->link_mode)) {
      s->write_out = std::make_shared<ActorStream>(sid, s->priority, cfg_.stream);
      s->write_out->set_transfer([this, conn, sid](Value v) {
        metrics_.events_sent.fetch_add(1, std::memory_order_relaxed);
        conn->send(FrameType::Event, sid, v);
      });
    }
    metrics_.links_opened.fetch_add(1, std::memory_order_relaxed);
    conn->send(FrameType::Link, sid, wire::link({s->node, s->lane_name, s->link_mode, s->priority}));
  }

  void relink_peer(const std::string& peer) {
    for (auto& [key, s] : replicas_) {
      if (s->lstate != ReplicaSession::LState::Unlinked || !s->failed_reason.empty()) continue;
      if (resolve(s->node) == peer) relink(s.get());
    }
  }

  // placement changed for a node; any session pointed at the old owner
  // must re-resolve
  void reroute_sessions(const std::string& node_str) {
    for (auto& [key, s] : replicas_) {
      if (key.first != node_str) continue;
      if (s->lstate == ReplicaSession::LState::Unlinked) {
        relink(s.get());
        continue;
      }
      // if the link already points at the new owner, leave it alone
      std::string target = resolve(s->node);
      if (s->lstate == ReplicaSession::LState::Local) {
        if (target == cfg_.instance_id) continue;
      } else if (s->conn) {
        auto cit = conns_.find(s->conn);
        if (cit != conns_.end() && cit->second->peer == target) continue;
      }
      forget_session_stream(s.get());
      session_reset(s.get());
      relink(s.get());
    }
  }

  void attach_local(ReplicaSession* s) {
    Agent* agent = ensure_local_agent(s->node);
    if (!agent) {
      s->failed_reason = "unknown-node";
      return;
    }
    Lane* lane = agent->find_lane(s->lane_name);
    if (!lane) {
      s->failed_reason = "unknown-lane";
      return;
    }
    s->local_agent = agent;
    s->local_lane = lane;
    s->kind = wire::wire_kind_of(lane->kind());
    s->kind_known = true;
    s->lstate = ReplicaSession::LState::Local;
    s->stale_flag.store(false);
    s->synced_flag.store(true);
    s->ever_synced = true;
    if (!s->tap) {
      s->tap = std::make_unique<LocalTap>();
      s->tap->inst = this;
      s->tap->session = s;
    }
    LocalTap* tap = s->tap.get();
    ReplicaSession* sp = s;
    agent->enqueue_task([this, lane, tap, sp] {
      lane->add_uplink(tap);
      Value v = lane->read();
      strand_.post([this, sp, v] { session_publish(sp, v); });
    });
    flush_pending_syncs(s);
  }

  void detach_local(ReplicaSession* s) {
    if (!s->local_agent || !s->tap) return;
    Agent* agent = s->local_agent;
    Lane* lane = s->local_lane;
    LocalTap* tap = s->tap.get();
    agent->enqueue_task([lane, tap] { lane->remove_uplink(tap); });
    s->local_agent = nullptr;
    s->local_lane = nullptr;
  }

  void session_wire_event(ReplicaSession* s, const Value& body) {
    s->event_count.fetch_add(1, std::memory_order_relaxed);
    bump_grant(s);
    switch (wire::event_shape(body)) {
      case wire::EventShape::Op: {
        auto ev = OpEvent::from_value(body);
        if (!ev) return;
        if (s->lstate == ReplicaSession::LState::Syncing) {
          // concurrent live op during state transfer: the install cut
          // either covers it (duplicate, dropped at delivery) or it
          // genuinely extends the cut; apply it after the swap
          s->during_sync.push_back(std::move(*ev));
          return;
        }
        if (s->replica) s->replica->deliver(ev->tag, ev->op);
        return;
      }
      case wire::EventShape::Base: {
        if (s->staging) {
          auto e = wire::base_entry_from_value(body.get("base"));
          if (e) s->staging->install_base(*e);
        }
        return;
      }
      case wire::EventShape::Live: {
        if (s->staging) {
          auto ev = OpEvent::from_value(body.get("live"));
          if (ev) s->staging->install_live(*ev);
        }
        return;
      }
      case wire::EventShape::Stable: {
        if (s->replica) s->replica->stabilize(VersionVector::from_value(body.get("stable")));
        return;
      }
      case wire::EventShape::Masked: {
        session_masked(s, body);
        return;
      }
      case wire::EventShape::Invalid:
        return;
    }
  }

  void handle_linked(ConnState& st, const Frame& f) {
    auto dit = st.downlinks.find(f.stream_id);
    if (dit == st.downlinks.end()) return;
    ReplicaSession* s = dit->second;
    auto l = wire::parse_linked(f.body);
    if (!l) return;
    s->kind = l->kind;
    s->kind_known = true;
    s->lstate = ReplicaSession::LState::Linked;
    if (s->logged() && s->link_mode != LinkMode::ObserveOnly) {
      LaneDataKind dk = s->kind == wire::WireKind::Map ? LaneDataKind::Map : LaneDataKind::Value;
      if (s->replica && s->replica->data_kind() != dk) s->replica.reset();
      if (!s->replica) init_replica(s, dk);
      s->staging = std::make_unique<PoLog>(dk);
    }
    s->conn->send(FrameType::Sync, s->sid, Value::record());
    s->lstate = ReplicaSession::LState::Syncing;
    // mediated consumers were waiting for the lane kind
    for (OwnerUplink* u : s->mediated) {
      if (u->linked_sent) continue;
      u->kind = s->kind;
      u->linked_sent = true;
      u->conn->send(FrameType::Linked, u->sid, wire::linked({s->node, s->lane_name, s->kind}));
    }
  }

  void init_replica(ReplicaSession* s, LaneDataKind dk) {
    s->replica = std::make_unique<PoLog>(dk);
    ReplicaSession* sp = s;
    s->replica->set_observer([this, sp](const AppliedChange& note) { session_applied(sp, note); });
  }

  void handle_synced(ConnState& st, const Frame& f) {
    auto dit = st.downlinks.find(f.stream_id);
    if (dit == st.downlinks.end()) return;
    ReplicaSession* s = dit->second;
    if (s->lstate != ReplicaSession::LState::Syncing) return;
    if (s->logged() && s->link_mode != LinkMode::ObserveOnly && s->staging) {
      wire::Synced cut = wire::parse_synced(f.body);
      s->staging->finish_install(cut.delivered, cut.stable);
      // ops minted here while the owner was unreachable survive the swap:
      // replay them into the fresh log, which re-offers them to the owner
      std::vector<OpEvent> pending;
      if (s->replica)
        pending = s->replica->pending_on_line(cfg_.instance_id,
                                              s->staging->delivered().get(cfg_.instance_id));
      s->replica = std::move(s->staging);
      ReplicaSession* sp = s;
      s->replica->set_observer(
          [this, sp](const AppliedChange& note) { session_applied(sp, note); });
      s->write_backlog.clear();
      s->lstate = ReplicaSession::LState::Synced;  // writes may flow again
      for (OpEvent& ev : s->during_sync) s->replica->deliver(ev.tag, ev.op);
      s->during_sync.clear();
      for (OpEvent& ev : pending) s->replica->deliver(ev.tag, ev.op);
    }
    s->lstate = ReplicaSession::LState::Synced;
    s->stale_flag.store(false);
    s->synced_flag.store(true);
    s->ever_synced = true;
    metrics_.syncs_completed.fetch_add(1, std::memory_order_relaxed);
    kernel_.trace("mesh:" + cfg_.instance_id, "synced " + s->node.str() + "#" + s->lane_name);
    session_publish(s, s->replica ? s->replica->eval() : s->published);
    send_session_ack(s);
    flush_pending_syncs(s);
  }

  void flush_pending_syncs(ReplicaSession* s) {
    for (OwnerUplink* u : s->mediated) {
      if (u->linked_sent) continue;
      u->kind = s->kind;
      u->linked_sent = true;
      u->conn->send(FrameType::Linked, u->sid, wire::linked({s->node, s->lane_name, s->kind}));
    }
    std::vector<OwnerUplink*> waiting;
    waiting.swap(s->pending_syncs);
    for (OwnerUplink* u : waiting) serve_mediated_sync(u, s);
  }

  // every applied op on the replica: publish, fan out, and push writes
  // minted here toward the owner
  void session_applied(ReplicaSession* s, const AppliedChange& note) {
    const Value& now = s->replica->eval();
    if (note.tag.dot.replica == cfg_.instance_id &&
        s->lstate == ReplicaSession::LState::Synced && s->write_out) {
      s->write_backlog.push_back(wire::event_op(OpEvent{note.tag, note.op}));
      drain_session_writes(s);
    }
    session_publish(s, now);
    for (OwnerUplink* u : s->mediated)
      if (mode_reads(u->link_mode)) u->offer(note, now);
  }

  void drain_session_writes(ReplicaSession* s) {
    if (!s->write_out) return;
    while (!s->write_backlog.empty()) {
      if (s->write_out->try_enqueue(s->write_backlog.front()) != EnqueueResult::Ok) return;
      s->write_backlog.pop_front();
    }
  }

  void session_masked(ReplicaSession* s, const Value& body) {
    if (body.get("set").is_defined()) {
      session_publish(s, body.get("set"));
    } else if (body.get("product").is_defined()) {
      session_publish(s, body.get("product"));
      for (OwnerUplink* u : s->mediated)
        if (mode_reads(u->link_mode)) u->offer_demand(body.get("product"));
    } else if (body.get("delta").is_defined()) {
      Value next = s->published.is_record() ? s->published : Value::record();
      for (const Item& it : body.get("delta").items()) {
        const Value& key = it.value.get("key");
        if (it.value.get("removed").as_bool())
          next.remove(key);
        else
          next.set(key, it.value.get("value"));
      }
      session_publish(s, next);
    }
  }

  void session_local_event(ReplicaSession* s, const AppliedChange& note, const Value& current) {
    s->event_count.fetch_add(1, std::memory_order_relaxed);
    session_publish(s, current);
    for (OwnerUplink* u : s->mediated)
      if (mode_reads(u->link_mode)) u->offer(note, current);
  }

  void session_local_product(ReplicaSession* s, const Value& product) {
    s->event_count.fetch_add(1, std::memory_order_relaxed);
    session_publish(s, product);
    for (OwnerUplink* u : s->mediated)
      if (mode_reads(u->link_mode)) u->offer_demand(product);
  }

  void session_publish(ReplicaSession* s, const Value& now) {
    s->published = now;
    for (auto& core : s->cores) {
      {
        std::lock_guard lk(core->mu);
        core->published = now;
      }
      core->stale.store(s->stale_flag.load(), std::memory_order_release);
      core->synced.store(s->synced_flag.load(), std::memory_order_release);
      core->events.fetch_add(1, std::memory_order_relaxed);
    }
    for (auto& fn : s->watchers) fn(now);
    for (auto& sub : s->subs) sub_send(sub, now);
  }

  void sub_send(ReplicaSession::JoinSub& sub, const Value& now) {
    if (sub.pending) {
      sub.pending = now;  // coalesce: only the latest state matters
      return;
    }
    if (sub.stream->try_enqueue(now) != EnqueueResult::Ok) sub.pending = now;
  }

  void session_local_write(ReplicaSession* s, const wire::Write& w) {
    if (s->lstate == ReplicaSession::LState::Local) {
      Agent* agent = s->local_agent;
      Lane* lane = s->local_lane;
      if (!agent || !lane) return;
      agent->enqueue_task([lane, w2 = w] { apply_write(*lane, w2); });
      return;
    }
    if (!s->replica) {
      // offline-first: a write creates the replica before the first link
      LaneDataKind dk = w.kind == wire::Write::Set ? LaneDataKind::Value : LaneDataKind::Map;
      init_replica(s, dk);
    }
    LaneOp op = w.kind == wire::Write::Set      ? LaneOp::value_set(w.value)
                : w.kind == wire::Write::Update ? LaneOp::map_update(w.key, w.value)
                : w.kind == wire::Write::Remove ? LaneOp::map_remove(w.key)
                                                : LaneOp::map_clear();
    s->replica->generate(cfg_.instance_id, std::move(op));
  }

  void bump_grant(ReplicaSession* s) {
    if (++s->consumed_since_grant < std::max(1, cfg_.stream.initial_window / 2)) return;
    send_session_ack(s);
  }

  void send_session_ack(ReplicaSession* s) {
    if (!s->conn || !s->conn->ready()) return;
    int n = s->consumed_since_grant;
    s->consumed_since_grant = 0;
    if (s->replica && s->link_mode != LinkMode::ObserveOnly)
      s->conn->send(FrameType::Credit, s->sid, wire::credit(n, s->replica->delivered()));
    else
      s->conn->send(FrameType::Credit, s->sid, wire::credit(n));
  }

  void session_reset(ReplicaSession* s) {
    s->reset_count.fetch_add(1, std::memory_order_relaxed);
    if (s->lstate == ReplicaSession::LState::Local) detach_local(s);
    if (!s->mediated.empty() || !s->pending_syncs.empty()) {
      // mediated client streams fail with the upstream; they must relink
      Value rb = Value::record();
      if (s->ever_synced) rb.set("stale", Value::of(true));
      std::vector<OwnerUplink*> meds(s->mediated.begin(), s->mediated.end());
      meds.insert(meds.end(), s->pending_syncs.begin(), s->pending_syncs.end());
      for (OwnerUplink* u : meds) {
        auto cit = conns_.find(u->conn.get());
        if (cit != conns_.end()) detach_uplink(*cit->second, u->sid, true, rb);
      }
      s->mediated.clear();
      s->pending_syncs.clear();
    }
    s->conn = nullptr;
    s->sid = 0;
    if (s->write_out) {
      s->write_out->mark_reset();
      s->write_out.reset();
    }
    s->write_backlog.clear();
    s->staging.reset();
    s->during_sync.clear();
    s->lstate = ReplicaSession::LState::Unlinked;
    s->consumed_since_grant = 0;
    if (s->ever_synced) s->stale_flag.store(true, std::memory_order_release);
    s->synced_flag.store(false, std::memory_order_release);
    for (auto& core : s->cores) {
      core->resets.fetch_add(1, std::memory_order_relaxed);
      core->stale.store(s->stale_flag.load(), std::memory_order_release);
      core->synced.store(false, std::memory_order_release);
    }
  }

  // ---- join-lane membership ----------------------------------------------------

  void join_member(Agent* agent, Lane* lane, const Value& key, const NodeUri& node,
                   const std::string& member_lane) {
    ReplicaSession* s = ensure_session(node, member_lane, LinkMode::ReadOnly, 0);
    uint64_t id = s->next_sub_id++;
    auto stream = std::make_shared<ActorStream>(next_local_sid_++, 0, cfg_.stream);
    std::weak_ptr<ActorStream> wp = stream;
    Agent* ap = agent;
    stream->set_transfer([ap, wp](Value v) {
      StreamPtr sp = wp.lock();
      if (sp && sp->push_recv(std::move(v))) ap->hub().ready(sp);
    });
    Lane* lp = lane;
    Value k = key;
    agent->hub().register_stream(
        stream, [lp, k](const StreamPtr&, Value v) { lp->update(k, std::move(v)); },
        [this, s, id](const StreamPtr& st, int n) {
          st->grant(n);  // self-granting loop: sender and receiver are in-process
          strand_.post([this, s, id] { flush_sub(s, id); });
        });
    ReplicaSession::JoinSub sub;
    sub.id = id;
    sub.stream = stream;
    sub.owner = agent;
    s->subs.push_back(std::move(sub));
    join_refs_[join_key(agent, lane, key)] = JoinRef{{node.str(), member_lane}, id};
    if (s->synced_flag.load() && s->published.is_defined()) sub_send(s->subs.back(), s->published);
  }

  void flush_sub(ReplicaSession* s, uint64_t id) {
    for (auto& sub : s->subs) {
      if (sub.id != id || !sub.pending) continue;
      Value v = std::move(*sub.pending);
      sub.pending.reset();
      if (sub.stream->try_enqueue(std::move(v)) != EnqueueResult::Ok)
        sub.pending = s->published;  // still no permits; keep the latest
      return;
    }
  }

  void drop_member(Agent* agent, Lane* lane, const Value& key) {
    auto it = join_refs_.find(join_key(agent, lane, key));
    if (it == join_refs_.end()) return;
    JoinRef ref = it->second;
    join_refs_.erase(it);
    auto rit = replicas_.find(ref.session_key);
    if (rit == replicas_.end()) return;
    ReplicaSession* s = rit->second.get();
    for (auto sit = s->subs.begin(); sit != s->subs.end(); ++sit) {
      if (sit->id != ref.sub_id) continue;
      StreamPtr stream = sit->stream;
      Agent* owner = sit->owner;
      s->subs.erase(sit);
      stream->mark_reset();
      owner->enqueue_task([owner, stream] { owner->hub().unregister_stream(stream); });
      return;
    }
  }

  static std::string join_key(Agent* agent, Lane* lane, const Value& key) {
    return agent->node().str() + "#" + lane->name() + "#" + key.encode();
  }

  // ---- uplink teardown -----------------------------------------------------------

  void detach_uplink(ConnState& st, uint32_t sid, bool send_reset_frame,
                     const Value& reset_body = Value::record()) {
    auto it = st.uplinks.find(sid);
    if (it == st.uplinks.end()) return;
    UplinkPtr up = it->second;
    st.uplinks.erase(it);
    if (send_reset_frame && st.conn->ready()) {
      st.conn->send(FrameType::Reset, sid, reset_body);
      metrics_.resets_sent.fetch_add(1, std::memory_order_relaxed);
    }
    detach_uplink_ptr(up);
  }

  void detach_uplink_ptr(const UplinkPtr& up) {
    up->failed.store(true, std::memory_order_relaxed);
    up->out->mark_reset();
    if (up->in) up->in->mark_reset();
    if (up->lane_attached) {
      Agent* agent = up->agent;
      Lane* lane = up->lane;
      agent->enqueue_task([agent, lane, up] {
        lane->remove_uplink(up.get());
        if (up->in) agent->hub().unregister_stream(up->in);
      });
      return;
    }
    if (ReplicaSession* s = up->source) {
      OwnerUplink* raw = up.get();
      auto drop = [raw](std::vector<OwnerUplink*>& v) {
        v.erase(std::remove(v.begin(), v.end(), raw), v.end());
      };
      drop(s->mediated);
      drop(s->pending_syncs);
    }
  }

  void reset_uplink(Connection* c, uint32_t sid) {
    auto cit = conns_.find(c);
    if (cit == conns_.end()) return;
    detach_uplink(*cit->second, sid, true);
  }

  // ---- stability ------------------------------------------------------------------

  void stability_sweep() {
    if (stopped_.load()) return;
    strand_.post([this] {
      for (auto& [nstr, agent] : agents_) sweep_agent_stability(agent.get());
    });
    arm_timer(cfg_.stability_period_ms, [this] { stability_sweep(); });
  }

  // The stability cut for a lane is the pointwise minimum of the owner's
  // delivered clock and every log-holding subscriber's acked clock. An
  // accepted-but-unsynced subscriber blocks the cut; an observe-only or
  // write-only link never holds a log and is ignored. The broadcast rides
  // the uplink backlog unbounded: the cut only covers ops every replica
  // has acked, so it can never outrun an undelivered op.
  void sweep_agent_stability(Agent* agent) {
    struct LanePlan {
      Lane* lane = nullptr;
      std::vector<UplinkPtr> replicas;
      bool blocked = false;
    };
    std::map<std::string, LanePlan> plans;
    for (auto& [name, lane] : agent->lanes()) {
      if (!lane->log_if_any()) continue;
      plans[name].lane = lane.get();
    }
    if (plans.empty()) return;
    for (auto& [cptr, st] : conns_) {
      for (auto& [sid, up] : st->uplinks) {
        if (!up->lane_attached || up->agent != agent) continue;
        if (up->link_mode == LinkMode::ObserveOnly || up->link_mode == LinkMode::WriteOnly)
          continue;
        auto pit = plans.find(up->lane_name);
        if (pit == plans.end()) continue;
        if (!up->synced_done.load(std::memory_order_acquire)) {
          pit->second.blocked = true;
          continue;
        }
        pit->second.replicas.push_back(up);
      }
    }
    for (auto& [name, plan] : plans) {
      if (plan.blocked) continue;
      std::vector<VersionVector> acks;
      bool ok = true;
      for (const UplinkPtr& u : plan.replicas) {
        auto a = u->ack_clock();
        if (!a) {
          ok = false;
          break;
        }
        acks.push_back(std::move(*a));
      }
      if (!ok) continue;
      Lane* lane = plan.lane;
      std::string node_lane = agent->node().str() + "#" + name;
      agent->enqueue_task([this, lane, acks = std::move(acks), node_lane,
                           targets = std::move(plan.replicas)] {
        VersionVector cut = lane->log().delivered();
        for (const VersionVector& a : acks) cut = VersionVector::pointwise_min(cut, a);
        if (cut.total() == 0) return;
        {
          std::lock_guard lk(stable_mu_);
          VersionVector& last = stable_sent_[node_lane];
          if (cut == last || !last.leq(cut)) return;  // no news, or regression
          last = cut;
        }
        lane->log().stabilize(cut);
        Value body = wire::event_stable(cut);
        for (const UplinkPtr& u : targets) u->push(body, true);
        metrics_.stability_broadcasts.fetch_add(1, std::memory_order_relaxed);
      });
    }
  }

  // ---- compaction --------------------------------------------------------------

  void compaction_sweep() {
    if (stopped_.load()) return;
    strand_.post([this] {
      if (!store_ || !store_->wants_compaction() || compacting_ || agents_.empty()) return;
      compacting_ = true;
      auto items = std::make_shared<std::vector<std::tuple<std::string, std::string, Value>>>();
      auto remaining = std::make_shared<size_t>(agents_.size());
      for (auto& [nstr, agent] : agents_) {
        Agent* raw = agent.get();
        raw->enqueue_task([this, raw, items, remaining] {
          std::vector<std::tuple<std::string, std::string, Value>> mine;
          for (auto& [name, lane] : raw->lanes()) {
            if (!lane->log_if_any()) continue;
            mine.emplace_back(raw->node().str(), name, lane->log().snapshot().to_value());
          }
          strand_.post([this, items, remaining, mine = std::move(mine)] {
            for (auto& m : mine) items->push_back(std::move(m));
            if (--*remaining == 0) {
              if (store_) store_->compact(*items);
              compacting_ = false;
            }
          });
        });
      }
    });
    arm_timer(cfg_.compaction_period_ms, [this] { compaction_sweep(); });
  }

  // ---- relocation ----------------------------------------------------------------------

  // Wire-triggered relocate: run it here if this instance owns the node,
  // else forward one hop to the owner and bridge the STATE reply back.
  void handle_admin_relocate(const ConnectionPtr& reply, uint32_t sid, const NodeUri& node,
                             const std::string& target, bool forwarded) {
    std::string owner = resolve(node);
    if (owner == cfg_.instance_id) {
      ConnectionPtr rc = reply;
      uint32_t rs = sid;
      do_relocate(node, target, [rc, rs](bool ok, std::string e) {
        rc->send(FrameType::State, rs, ok ? wire::state_ok() : wire::state_error(e));
      });
      return;
    }
    auto pit = peers_.find(owner);
    if (forwarded || pit == peers_.end() || !pit->second.connected ||
        !pit->second.conn->ready()) {
      reply->send(FrameType::State, sid,
                  wire::state_error(forwarded ? "not the owner" : "unreachable"));
      return;
    }
    Connection* up = pit->second.conn.get();
    uint32_t usid = up->alloc_stream_id();
    admin_waits_.emplace(std::make_pair(up, usid), AdminWait{reply, sid});
    up->send(FrameType::Command, usid, wire::command_relocate(node, target, true));
  }

  void do_relocate(const NodeUri& node, const std::string& target, DoneCallback done) {
    auto fail = [&](const std::string& why) {
      if (done) done(false, why);
    };
    if (target == cfg_.instance_id) return fail("target is this instance");
    if (resolve(node) != cfg_.instance_id) return fail("not the owner");
    auto pit = peers_.find(target);
    if (pit == peers_.end() || !pit->second.connected || !pit->second.conn->ready())
      return fail("target unreachable");
    auto ait = agents_.find(node.str());
    if (ait == agents_.end()) {
      // no state to move; just shift future placement
      apply_override(node, target);
      broadcast_override(node, target);
      metrics_.relocations.fetch_add(1, std::memory_order_relaxed);
      if (done) done(true, "");
      return;
    }
    if (relocating_.count(node.str())) return fail("relocation in progress");
    relocating_.insert(node.str());
    kernel_.trace("mesh:" + cfg_.instance_id, "relocate " + node.str() + " > " + target);
    quiesce_then_snapshot(ait->second.get(), 0,
                          [this, node, target, done = std::move(done)](
                              std::vector<wire::LaneSnapshot> lanes) mutable {
                            send_install(node, target, std::move(lanes), std::move(done));
                          });
  }

  void quiesce_then_snapshot(Agent* agent, int tries,
                             std::function<void(std::vector<wire::LaneSnapshot>)> next) {
    agent->enqueue_task([this, agent, tries, next = std::move(next)]() mutable {
      if (!agent->hub().idle() && tries < 64) {
        strand_.post([this, agent, tries, next = std::move(next)]() mutable {
          quiesce_then_snapshot(agent, tries + 1, std::move(next));
        });
        return;
      }
      std::vector<wire::LaneSnapshot> lanes;
      for (auto& [name, lane] : agent->lanes()) {
        if (lane->log_if_any())
          lanes.push_back({name, lane->kind(), lane->log().snapshot().to_value()});
        else
          lanes.push_back({name, lane->kind(), Value::absent()});
      }
      strand_.post([next = std::move(next), lanes = std::move(lanes)]() mutable {
        next(std::move(lanes));
      });
    });
  }

  void send_install(const NodeUri& node, const std::string& target,
                    std::vector<wire::LaneSnapshot> lanes, DoneCallback done) {
    auto pit = peers_.find(target);
    if (pit == peers_.end() || !pit->second.connected || !pit->second.conn->ready()) {
      relocating_.erase(node.str());
      unpark(node, "");
      if (done) done(false, "target unreachable");
      return;
    }
    Connection* c = pit->second.conn.get();
    uint32_t sid = c->alloc_stream_id();
    InstallWait w;
    w.node = node;
    w.target = target;
    w.done = std::move(done);
    w.timer = kernel_.schedule(cfg_.install_timeout_ms * kMillis, [this, c, sid] {
      strand_.post([this, c, sid] {
        auto it = installs_.find(std::make_pair(c, sid));
        if (it == installs_.end()) return;
        InstallWait w2 = std::move(it->second);
        installs_.erase(it);
        finish_relocation_failure(w2, "install timed out");
      });
    });
    installs_.emplace(std::make_pair(c, sid), std::move(w));
    c->send(FrameType::Command, sid, wire::command_install({node, std::move(lanes)}));
  }

  void handle_install(Connection* c, uint32_t sid, const Value& body) {
    auto ins = wire::parse_install(body);
    if (!ins) {
      c->send(FrameType::State, sid, wire::state_error("bad install"));
      return;
    }
    if (agents_.count(ins->node.str())) {
      c->send(FrameType::State, sid, wire::state_error("exists"));
      return;
    }
    auto a = registry_.create(ins->node);
    if (!a) {
      c->send(FrameType::State, sid, wire::state_error("unknown-node"));
      return;
    }
    a->bind(&services_);
    for (wire::LaneSnapshot& ls : ins->lanes) {
      Lane* lane = a->find_lane(ls.lane);
      if (!lane) continue;  // agents declare their lanes; skip strays
      if (!lane->log_if_any() || !ls.snapshot.is_defined()) continue;
      auto snap = PoLog::Snapshot::from_value(ls.snapshot);
      if (!snap) {
        c->send(FrameType::State, sid, wire::state_error("bad snapshot"));
        return;
      }
      lane->adopt_log(PoLog::from_snapshot(*snap));
    }
    Agent* raw = a.get();
    agents_.emplace(ins->node.str(), std::move(a));
    raw->enqueue_task([raw] { raw->start(); });
    apply_override(ins->node, cfg_.instance_id);
    reroute_sessions(ins->node.str());  // local consumers follow the move
    c->send(FrameType::State, sid, wire::state_ok());
  }

  void finish_relocation_success(InstallWait& w) {
    apply_override(w.node, w.target);
    broadcast_override(w.node, w.target);
    // subscribers must re-route: reset every stream serving this node.
    // the override reached each peer first (same connection, in order),
    // so their relink resolves to the new owner
    for (auto& [cptr, st] : conns_) {
      std::vector<uint32_t> sids;
      for (auto& [sid, up] : st->uplinks)
        if (up->node.str() == w.node.str()) sids.push_back(sid);
      for (uint32_t sid : sids) detach_uplink(*st, sid, true);
    }
    auto ait = agents_.find(w.node.str());
    if (ait != agents_.end()) {
      std::unique_ptr<Agent> agent = std::move(ait->second);
      agents_.erase(ait);
      Agent* raw = agent.get();
      raw->enqueue_task([raw] { raw->stop(); });
      // parked in the graveyard: queued tasks and callbacks may still
      // hold pointers into the agent, so it is never freed mid-flight
      retired_.push_back(std::move(agent));
    }
    reroute_sessions(w.node.str());
    relocating_.erase(w.node.str());
    unpark(w.node, w.target);
    metrics_.relocations.fetch_add(1, std::memory_order_relaxed);
    kernel_.trace("mesh:" + cfg_.instance_id, "relocated " + w.node.str());
    if (w.done) w.done(true, "");
  }

  void finish_relocation_failure(InstallWait& w, const std::string& why) {
    relocating_.erase(w.node.str());
    unpark(w.node, "");
    kernel_.trace("mesh:" + cfg_.instance_id, "relocation failed " + w.node.str());
    if (w.done) w.done(false, why);
  }

  void unpark(const NodeUri& node, const std::string& forward_to) {
    std::vector<ParkedWrite> mine;
    for (auto it = parked_.begin(); it != parked_.end();) {
      if (it->node.str() == node.str()) {
        mine.push_back(std::move(*it));
        it = parked_.erase(it);
      } else {
        ++it;
      }
    }
    for (ParkedWrite& p : mine) {
      if (!forward_to.empty()) {
        auto pit = peers_.find(forward_to);
        if (pit != peers_.end() && pit->second.connected && pit->second.conn->ready()) {
          pit->second.conn->send(FrameType::Command, 0, wire::command(p.node, p.lane, p.w));
          metrics_.commands_forwarded.fetch_add(1, std::memory_order_relaxed);
          continue;
        }
      }
      do_ingest(p.node, p.lane, p.w);
    }
  }

  void apply_override(const NodeUri& node, const std::string& instance) {
    placement_.set_override(node, instance);
    metrics_.overrides_applied.fetch_add(1, std::memory_order_relaxed);
  }

  void broadcast_override(const NodeUri& node, const std::string& instance) {
    for (auto& [pid, p] : peers_) {
      if (!p.connected || !p.conn->ready()) continue;
      p.conn->send(FrameType::Command, 0, wire::command_override(node, instance));
    }
  }

  // ---- members ------------------------------------------------------------------------

  Kernel& kernel_;
  Transport& transport_;
  InstanceConfig cfg_;
  Strand strand_;
  AgentRegistry registry_;
  AgentServices services_;
  Placement placement_;
  InstanceMetrics metrics_;

  std::map<std::string, std::unique_ptr<Agent>> agents_;
  std::vector<std::unique_ptr<Agent>> retired_;
  std::map<std::string, PeerState> peers_;
  std::map<Connection*, std::unique_ptr<ConnState>> conns_;
  std::map<LinkKey, std::unique_ptr<ReplicaSession>> replicas_;
  std::map<std::string, JoinRef> join_refs_;
  std::set<std::string> relocating_;
  std::vector<ParkedWrite> parked_;
  std::map<std::string, std::deque<ParkedWrite>> peer_parked_;
  std::map<std::pair<Connection*, uint32_t>, GetWait> gets_;
  std::map<std::pair<Connection*, uint32_t>, InstallWait> installs_;
  std::map<std::pair<Connection*, uint32_t>, AdminWait> admin_waits_;

  std::mutex stable_mu_;
  std::map<std::string, VersionVector> stable_sent_;

  std::unique_ptr<StorageIo> io_;
  std::unique_ptr<LogStore> store_;

  std::mutex handles_mu_;
  std::vector<std::unique_ptr<Downlink>> handles_;

  std::mutex timers_mu_;
  std::vector<uint64_t> timers_;
  uint32_t next_local_sid_ = 1;
  bool started_ = false;
  std::atomic<bool> stopped_{false};
  bool compacting_ = false;
};

}  // namespace swimlet

#endif  // SWIMLET_INSTANCE_HPP
