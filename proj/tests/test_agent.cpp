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

#include <atomic>
#include <chrono>
#include <deque>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "swimlet/agent.hpp"
#include "swimlet/kernel.hpp"

using namespace swimlet;

namespace {

// Uplink double that records everything it is offered.
class RecordingUplink final : public LaneUplink {
 public:
  RecordingUplink(LinkMode m, std::vector<std::string>* journal = nullptr, std::string tag = "")
      : mode_(m), journal_(journal), tag_(std::move(tag)) {}

  LinkMode mode() const override { return mode_; }

  bool offer(const AppliedChange& note, const Value&) override {
    ops.push_back(OpEvent{note.tag, note.op});
    if (journal_) journal_->push_back("offer:" + tag_);
    return !reject;
  }
  void offer_demand(const Value& product) override { demands.push_back(product); }

  std::vector<OpEvent> ops;
  std::vector<Value> demands;
  bool reject = false;

 private:
  LinkMode mode_;
  std::vector<std::string>* journal_;
  std::string tag_;
};

// Deferred executor: collects posted tasks for manual pumping.
struct ManualExecutor {
  std::deque<std::function<void()>> tasks;
  void pump() {
    while (!tasks.empty()) {
      auto fn = std::move(tasks.front());
      tasks.pop_front();
      fn();
    }
  }
};

}  // namespace

TEST_CASE("value lane fires didSet exactly once per effective change") {
  Agent a(NodeUri::of("/vehicle/1"));
  Lane& lane = a.value_lane("speed");
  std::vector<std::pair<Value, Value>> sets;
  lane.did_set([&](const Value& now, const Value& was) { sets.emplace_back(now, was); });

  lane.set(Value::of(int64_t{10}));
  lane.set(Value::of(int64_t{20}));
  lane.set(Value::of(int64_t{20}));  // applied, but no effective change

  REQUIRE(sets.size() == 2);
  REQUIRE(sets[0].first.as_int() == 10);
  REQUIRE(sets[0].second.is_absent());
  REQUIRE(sets[1].first.as_int() == 20);
  REQUIRE(sets[1].second.as_int() == 10);
  REQUIRE(lane.read().as_int() == 20);
}

TEST_CASE("map lane callbacks carry key, new, and old values") {
  Agent a(NodeUri::of("/region/east"));
  Lane& lane = a.map_lane("vehicles");
  std::vector<std::string> trace;
  lane.did_update([&](const Value& k, const Value& now, const Value& was) {
    trace.push_back("u:" + k.as_text() + "=" + std::to_string(now.as_int()) +
                    (was.is_absent() ? "<new" : "<" + std::to_string(was.as_int())));
  });
  lane.did_remove([&](const Value& k, const Value& was) {
    trace.push_back("r:" + k.as_text() + "<" + std::to_string(was.as_int()));
  });

  lane.update(Value::of("v1"), Value::of(int64_t{5}));
  lane.update(Value::of("v1"), Value::of(int64_t{6}));
  lane.update(Value::of("v2"), Value::of(int64_t{9}));
  lane.update(Value::of("v2"), Value::of(int64_t{9}));  // no change, no callback
  lane.remove(Value::of("v1"));
  lane.clear();  // one remove callback for the surviving key

  REQUIRE(trace == std::vector<std::string>{"u:v1=5<new", "u:v1=6<5", "u:v2=9<new", "r:v1<6",
                                            "r:v2<9"});
}

TEST_CASE("lane kinds are enforced at the mutation surface") {
  Agent a(NodeUri::of("/x/1"));
  Lane& v = a.value_lane("v");
  Lane& m = a.map_lane("m");
  REQUIRE_THROWS_AS(v.update(Value::of("k"), Value::of(int64_t{1})), std::logic_error);
  REQUIRE_THROWS_AS(m.set(Value::of(int64_t{1})), std::logic_error);
  REQUIRE_THROWS_AS(a.map_lane("v"), std::logic_error);  // name taken by another kind
  REQUIRE(&a.value_lane("v") == &v);                     // same-kind lookup is idempotent
  REQUIRE_THROWS_AS(a.value_lane("m").set(Value::of(int64_t{1})), std::logic_error);
}

TEST_CASE("remote delivery drives callbacks in causal order, including drains") {
  Agent a(NodeUri::of("/vehicle/2"));
  Lane& lane = a.value_lane("speed");
  std::vector<int64_t> seen;
  lane.did_set([&](const Value& now, const Value&) { seen.push_back(now.as_int()); });

  PoLog src(LaneDataKind::Value);
  OpEvent e1 = src.generate("r", LaneOp::value_set(Value::of(int64_t{1})));
  OpEvent e2 = src.generate("r", LaneOp::value_set(Value::of(int64_t{2})));
  OpEvent e3 = src.generate("r", LaneOp::value_set(Value::of(int64_t{3})));

  REQUIRE(lane.deliver(e3.tag, e3.op).status == DeliverStatus::Buffered);
  REQUIRE(lane.deliver(e2.tag, e2.op).status == DeliverStatus::Buffered);
  REQUIRE(lane.deliver(e1.tag, e1.op).status == DeliverStatus::Applied);  // drains 2 and 3
  REQUIRE(seen == std::vector<int64_t>{1, 2, 3});
  REQUIRE(lane.deliver(e2.tag, e2.op).status == DeliverStatus::Duplicate);
  REQUIRE(seen.size() == 3);  // duplicates never re-fire callbacks
}

TEST_CASE("applied ops stream to uplinks before they are persisted") {
  Agent a(NodeUri::of("/vehicle/3"));
  std::vector<std::string> journal;
  AgentServices services;
  services.replica_id = "i1";
  services.persist = [&](Agent&, Lane&, const OpEvent&) { journal.push_back("persist"); };
  a.bind(&services);

  Lane& lane = a.value_lane("speed");
  RecordingUplink ro(LinkMode::ReadOnly, &journal, "ro");
  RecordingUplink oo(LinkMode::ObserveOnly, &journal, "oo");
  RecordingUplink wo(LinkMode::WriteOnly, &journal, "wo");
  lane.add_uplink(&ro);
  lane.add_uplink(&oo);
  lane.add_uplink(&wo);

  for (int i = 0; i < 5; ++i) lane.set(Value::of(int64_t{i}));

  // per op: both reading uplinks offered, then exactly one persist
  REQUIRE(journal.size() == 15);
  for (size_t i = 0; i < journal.size(); i += 3) {
    REQUIRE(journal[i] == "offer:ro");
    REQUIRE(journal[i + 1] == "offer:oo");
    REQUIRE(journal[i + 2] == "persist");
  }
  REQUIRE(ro.ops.size() == 5);
  REQUIRE(wo.ops.empty());  // write-only endpoints receive no state
  REQUIRE(ro.ops[0].tag.dot.replica == "i1");
}

TEST_CASE("the uplink that delivered an op does not hear it back") {
  Agent a(NodeUri::of("/vehicle/4"));
  Lane& lane = a.value_lane("speed");
  RecordingUplink writer(LinkMode::ReadWrite);
  RecordingUplink watcher(LinkMode::ReadOnly);
  lane.add_uplink(&writer);
  lane.add_uplink(&watcher);

  PoLog remote(LaneDataKind::Value);
  OpEvent ev = remote.generate("rw-peer", LaneOp::value_set(Value::of(int64_t{9})));
  REQUIRE(lane.deliver(ev.tag, ev.op, &writer).status == DeliverStatus::Applied);

  REQUIRE(writer.ops.empty());
  REQUIRE(watcher.ops.size() == 1);
  REQUIRE(lane.uplink_overflows() == 0);

  watcher.reject = true;
  lane.set(Value::of(int64_t{10}));
  REQUIRE(lane.uplink_overflows() == 1);
}

TEST_CASE("a throwing callback is isolated and counted") {
  Agent a(NodeUri::of("/vehicle/5"));
  Lane& lane = a.value_lane("speed");
  int fired = 0;
  lane.did_set([&](const Value& now, const Value&) {
    ++fired;
    if (now.as_int() == 1) throw std::runtime_error("boom");
  });
  for (int i = 0; i < 3; ++i) lane.set(Value::of(int64_t{i}));
  REQUIRE(fired == 3);
  REQUIRE(a.callback_errors() == 1);
  REQUIRE(lane.read().as_int() == 2);
}

TEST_CASE("events flow from a hub stream into lane callbacks in order") {
  Agent a(NodeUri::of("/vehicle/6"));
  Lane& lane = a.value_lane("speed");
  std::vector<int64_t> seen;
  lane.did_set([&](const Value& now, const Value&) { seen.push_back(now.as_int()); });

  StreamConfig cfg;
  auto s = std::make_shared<ActorStream>(1, 0, cfg);
  s->set_transfer([&, sp = s.get()](Value v) {
    sp->push_recv(std::move(v));
    a.hub().ready(s);
  });
  a.hub().register_stream(
      s,
      [&](const StreamPtr&, Value v) {
        auto ev = OpEvent::from_value(v);
        REQUIRE(ev);
        lane.deliver(ev->tag, ev->op);
      },
      [](const StreamPtr& st, int n) { st->grant(n); });

  PoLog src(LaneDataKind::Value);
  std::vector<int64_t> sent;
  for (int i = 0; i < 50; ++i) {
    OpEvent ev = src.generate("r", LaneOp::value_set(Value::of(int64_t{i * 3})));
    for (;;) {
      EnqueueResult r = s->try_enqueue(ev.to_value());
      if (r == EnqueueResult::Ok) break;
      REQUIRE(r == EnqueueResult::WouldBlock);
      // inline turns already ran; granting happens inside them
    }
    sent.push_back(i * 3);
  }
  while (a.run_turn()) {
  }
  REQUIRE(seen == sent);
  REQUIRE(a.turns() > 0);
}

TEST_CASE("demand cues coalesce to one production per activation") {
  Agent a(NodeUri::of("/region/west"));
  ManualExecutor exec;
  AgentServices services;
  services.post = [&](std::function<void()> fn) { exec.tasks.push_back(std::move(fn)); };
  a.bind(&services);

  Lane& lane = a.demand_value_lane("summary");
  int produced = 0;
  lane.on_cue([&] {
    ++produced;
    return Value::of(int64_t{produced});
  });
  RecordingUplink sub(LinkMode::ReadOnly);
  lane.add_uplink(&sub);

  for (int i = 0; i < 100; ++i) lane.cue();
  exec.pump();
  REQUIRE(produced >= 1);
  REQUIRE(produced <= 100);
  REQUIRE(produced == 1);  // all 100 cues landed before the turn ran
  REQUIRE(sub.demands.size() == 1);
  REQUIRE(lane.read().as_int() == 1);
  REQUIRE(lane.produce_count() == 1);
}

TEST_CASE("demand lanes with no subscribers never invoke the producer") {
  Agent a(NodeUri::of("/region/north"));
  Lane& lane = a.demand_value_lane("summary");
  int produced = 0;
  lane.on_cue([&] {
    ++produced;
    return Value::of(int64_t{0});
  });
  lane.cue();
  while (a.run_turn()) {
  }
  REQUIRE(produced == 0);

  Lane& bare = a.demand_map_lane("detail");
  REQUIRE_THROWS_AS(bare.cue(), std::logic_error);  // no producer registered
}

TEST_CASE("agent lifecycle hooks fire once and are isolated") {
  struct Counting : Agent {
    using Agent::Agent;
    int starts = 0;
    void did_start() override {
      ++starts;
      throw std::runtime_error("flaky start");
    }
  };
  Counting a(NodeUri::of("/x/9"));
  REQUIRE(a.life_state() == Agent::LifeState::Created);
  a.start();
  a.start();
  REQUIRE(a.starts == 1);
  REQUIRE(a.callback_errors() == 1);
  REQUIRE(a.life_state() == Agent::LifeState::Started);
  a.stop();
  REQUIRE(a.life_state() == Agent::LifeState::Stopped);
}

TEST_CASE("join lanes drive membership hooks and mirror member state") {
  Agent a(NodeUri::of("/region/east"));
  std::vector<std::string> hooks;
  AgentServices services;
  services.member_added = [&](Agent&, Lane& l, const Value& key, const NodeUri& node,
                              const std::string& lane_name) {
    hooks.push_back("add:" + l.name() + ":" + key.as_text() + "->" + node.str() + "#" + lane_name);
  };
  services.member_removed = [&](Agent&, Lane& l, const Value& key) {
    hooks.push_back("del:" + l.name() + ":" + key.as_text());
  };
  a.bind(&services);

  Lane& join = a.join_value_lane("vehicles");
  std::vector<std::string> updates;
  join.did_update([&](const Value& k, const Value& now, const Value&) {
    updates.push_back(k.as_text() + "=" + std::to_string(now.as_int()));
  });

  join.add_member(Value::of("v7"), NodeUri::of("/vehicle/7"), "speed");
  REQUIRE(hooks == std::vector<std::string>{"add:vehicles:v7->/vehicle/7#speed"});
  // the runtime would route the member downlink's didSet back in here:
  join.update(Value::of("v7"), Value::of(int64_t{42}));
  REQUIRE(updates == std::vector<std::string>{"v7=42"});
  REQUIRE(join.read().get_int("v7") == 42);

  join.remove_member(Value::of("v7"));
  REQUIRE(hooks.back() == "del:vehicles:v7");
  REQUIRE(join.read().get("v7").is_absent());

  Lane& plain = a.map_lane("not-a-join");
  REQUIRE_THROWS_AS(plain.add_member(Value::of("x"), NodeUri::of("/v/1"), "l"), std::logic_error);
}

TEST_CASE("the registry creates agents from patterns with one wildcard") {
  AgentRegistry reg;
  int made = 0;
  reg.register_type("/vehicle/:id", [&](const NodeUri& n) {
    ++made;
    return std::make_unique<Agent>(n);
  });
  REQUIRE_THROWS_AS(reg.register_type("/vehicle/:other",
                                      [](const NodeUri& n) { return std::make_unique<Agent>(n); }),
                    std::invalid_argument);

  REQUIRE(reg.known(NodeUri::of("/vehicle/7")));
  REQUIRE_FALSE(reg.known(NodeUri::of("/region/1")));
  auto agent = reg.create(NodeUri::of("/vehicle/7"));
  REQUIRE(agent);
  REQUIRE(agent->node().str() == "/vehicle/7");
  REQUIRE(made == 1);
  REQUIRE(reg.create(NodeUri::of("/region/1")) == nullptr);

  reg.register_type(
      "/sensor/:id", [](const NodeUri& n) { return std::make_unique<Agent>(n); },
      [](const NodeUri&) { return std::string("/sensor"); });
  REQUIRE(reg.placement_key(NodeUri::of("/sensor/3")) == "/sensor");
  REQUIRE(reg.placement_key(NodeUri::of("/vehicle/3")) == "/vehicle/3");
}

TEST_CASE("agent turns never overlap under a thread pool") {
  ThreadKernel kernel(4);
  AgentServices services;
  services.post = [&](std::function<void()> fn) { kernel.post(std::move(fn)); };

  Agent a(NodeUri::of("/vehicle/stress"));
  a.bind(&services);
  Lane& lane = a.value_lane("speed");
  std::atomic<int> max_entries{0};
  std::atomic<int> handled{0};

  StreamConfig cfg;
  constexpr int kProducers = 4;
  constexpr int kPerProducer = 300;
  std::vector<StreamPtr> streams;
  for (int p = 0; p < kProducers; ++p) {
    auto s = std::make_shared<ActorStream>(static_cast<uint32_t>(p + 1), 0, cfg);
    s->set_transfer([&, sp = s.get(), sh = s](Value v) {
      sp->push_recv(std::move(v));
      a.hub().ready(sh);
    });
    a.hub().register_stream(
        s,
        [&](const StreamPtr&, Value v) {
          auto ev = OpEvent::from_value(v);
          if (ev) lane.deliver(ev->tag, ev->op);
          int inside = a.concurrent_entries();
          int prev = max_entries.load();
          while (inside > prev && !max_entries.compare_exchange_weak(prev, inside)) {
          }
          handled.fetch_add(1);
          std::this_thread::sleep_for(std::chrono::microseconds(50));
        },
        [](const StreamPtr& st, int n) { st->grant(n); });
    streams.push_back(std::move(s));
  }

  std::vector<std::thread> producers;
  for (int p = 0; p < kProducers; ++p) {
    producers.emplace_back([&, p] {
      PoLog src(LaneDataKind::Value);
      std::string line = "p" + std::to_string(p);
      for (int i = 0; i < kPerProducer; ++i) {
        OpEvent ev = src.generate(line, LaneOp::value_set(Value::of(int64_t{p * 100000 + i})));
        Value payload = ev.to_value();
        while (streams[p]->try_enqueue(payload) == EnqueueResult::WouldBlock)
          std::this_thread::yield();
      }
    });
  }
  for (auto& t : producers) t.join();
  for (int spin = 0; spin < 20000 && handled.load() < kProducers * kPerProducer; ++spin)
    std::this_thread::sleep_for(std::chrono::milliseconds(1));

  REQUIRE(handled.load() == kProducers * kPerProducer);
  REQUIRE(max_entries.load() == 1);  // atomicity: one context at a time
  kernel.shutdown();
}

TEST_CASE("independent agents run in parallel up to the worker count") {
  constexpr int kWorkers = 4;
  constexpr int kAgents = 4;
  ThreadKernel kernel(kWorkers);
  AgentServices services;
  services.post = [&](std::function<void()> fn) { kernel.post(std::move(fn)); };

  std::atomic<int> inside{0};
  std::atomic<int> peak{0};
  std::atomic<int> done{0};
  std::vector<std::unique_ptr<Agent>> agents;
  for (int i = 0; i < kAgents; ++i) {
    auto a = std::make_unique<Agent>(NodeUri::of("/par/" + std::to_string(i)));
    a->bind(&services);
    Lane& lane = a->value_lane("v");
    lane.did_set([&](const Value&, const Value&) {
      int now = inside.fetch_add(1) + 1;
      int prev = peak.load();
      while (now > prev && !peak.compare_exchange_weak(prev, now)) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(120));
      inside.fetch_sub(1);
      done.fetch_add(1);
    });
    agents.push_back(std::move(a));
  }
  // one local set per agent; each runs on its own worker
  for (auto& a : agents) {
    Agent* ap = a.get();
    kernel.post([ap] { ap->value_lane("v").set(Value::of(int64_t{1})); });
  }
  for (int spin = 0; spin < 20000 && done.load() < kAgents; ++spin)
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  REQUIRE(done.load() == kAgents);
  REQUIRE(peak.load() == std::min(kAgents, kWorkers));
  kernel.shutdown();
}
