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
// Frame body schemas. A frame is [len][type][streamId][body] (frame.hpp);
// this header defines what goes inside the body for each type, as plain
// build/parse helpers over structured values. Everything here is pure, so
// the schemas can be tested without a transport.
//
// Stream 0 is the connection channel. The first exchange on it is a
// session hello: LINK {instance, token} answered by LINKED {instance} or
// UNLINKED {reason: "unauthorized"}. PING/PONG, node-addressed COMMANDs,
// and placement override broadcasts also ride stream 0. Every other
// stream belongs to one link (or one GET/STATE round trip).

#ifndef SWIMLET_WIRE_HPP
#define SWIMLET_WIRE_HPP

#include <optional>
#include <string>
#include <vector>

#include "swimlet/agent.hpp"
#include "swimlet/crdt.hpp"
#include "swimlet/uri.hpp"
#include "swimlet/value.hpp"

namespace swimlet {
namespace wire {

// ---------------------------------------------------------------------------
// Session hello (stream 0).

inline Value hello(const std::string& instance, const std::string& token) {
  Value b = Value::record();
  b.set("instance", Value::of(instance));
  if (!token.empty()) b.set("token", Value::of(token));
  return b;
}

inline Value welcome(const std::string& instance) {
  Value b = Value::record();
  b.set("instance", Value::of(instance));
  return b;
}

// ---------------------------------------------------------------------------
// Link lifecycle.

struct LinkRequest {
  NodeUri node;
  std::string lane;
  LinkMode mode = LinkMode::ReadOnly;
  int priority = 0;
};

inline Value link(const LinkRequest& req) {
  Value b = Value::record();
  b.set("node", Value::of(req.node.str()));
  b.set("lane", Value::of(req.lane));
  b.set("mode", Value::of(link_mode_name(req.mode)));
  if (req.priority != 0) b.set("priority", Value::of(int64_t{req.priority}));
  return b;
}

inline std::optional<LinkRequest> parse_link(const Value& b) {
  auto node = NodeUri::parse(b.get_text("node"));
  auto mode = link_mode_from(b.get_text("mode"));
  std::string lane{b.get_text("lane")};
  if (!node || !mode || !valid_lane_uri(lane)) return std::nullopt;
  return LinkRequest{*node, lane, *mode, static_cast<int>(b.get_int("priority"))};
}

// Replicated shape of the lane, as the downlink needs to see it. Join
// lanes replicate as maps; demand lanes carry no log at all.
enum class WireKind { Value, Map, Demand };

inline const char* wire_kind_name(WireKind k) {
  switch (k) {
    case WireKind::Value: return "value";
    case WireKind::Map: return "map";
    case WireKind::Demand: return "demand";
  }
  return "value";
}

inline std::optional<WireKind> wire_kind_from(std::string_view s) {
  if (s == "value") return WireKind::Value;
  if (s == "map") return WireKind::Map;
  if (s == "demand") return WireKind::Demand;
  return std::nullopt;
}

inline WireKind wire_kind_of(LaneKind k) {
  if (lane_kind_is_demand(k)) return WireKind::Demand;
  return lane_kind_is_map_shaped(k) ? WireKind::Map : WireKind::Value;
}

struct Linked {
  NodeUri node;
  std::string lane;
  WireKind kind = WireKind::Value;
};

inline Value linked(const Linked& l) {
  Value b = Value::record();
  b.set("node", Value::of(l.node.str()));
  b.set("lane", Value::of(l.lane));
  b.set("kind", Value::of(wire_kind_name(l.kind)));
  return b;
}

inline std::optional<Linked> parse_linked(const Value& b) {
  auto node = NodeUri::parse(b.get_text("node"));
  auto kind = wire_kind_from(b.get_text("kind"));
  if (!node || !kind) return std::nullopt;
  return Linked{*node, std::string{b.get_text("lane")}, *kind};
}

// UNLINKED rejection reasons are a closed set.
inline Value unlinked(const std::string& reason) {
  Value b = Value::record();
  b.set("reason", Value::of(reason));
  return b;
}

// ---------------------------------------------------------------------------
// Sync. SYNC has an empty body. The owner answers with the current state
// rendered as EVENT frames — base entries first, then unstable ops — and
// closes with SYNCED carrying the clocks of the transferred cut.

struct Synced {
  VersionVector delivered;
  VersionVector stable;
};

inline Value synced(const Synced& s) {
  Value b = Value::record();
  b.set("delivered", s.delivered.to_value());
  b.set("stable", s.stable.to_value());
  return b;
}

inline Synced parse_synced(const Value& b) {
  return Synced{VersionVector::from_value(b.get("delivered")),
                VersionVector::from_value(b.get("stable"))};
}

// ---------------------------------------------------------------------------
// EVENT bodies. One frame type, several shapes, discriminated by their
// top-level field:
//
//   {tag, op}      op event on the replicated log (OpEvent encoding)
//   {base: {...}}  one folded base entry, only during state transfer
//   {live: {...}}  one unstable op event, only during state transfer
//   {stable: {..}} causal-stability broadcast (a clock)
//   {set | delta | product}  masked state for observe-only links; carries
//                  no replica ids, counters, or clocks
//
// Masked map updates use a delta list so one frame can carry everything a
// single op changed: [{key, value} | {key, removed: true}, ...].

enum class EventShape { Op, Base, Live, Stable, Masked, Invalid };

inline EventShape event_shape(const Value& b) {
  if (b.get("tag").is_defined() && b.get("op").is_defined()) return EventShape::Op;
  if (b.get("base").is_defined()) return EventShape::Base;
  if (b.get("live").is_defined()) return EventShape::Live;
  if (b.get("stable").is_defined()) return EventShape::Stable;
  if (b.get("set").is_defined() || b.get("delta").is_defined() ||
      b.get("product").is_defined())
    return EventShape::Masked;
  return EventShape::Invalid;
}

inline Value event_op(const OpEvent& ev) { return ev.to_value(); }

inline Value base_entry_to_value(const PoLog::BaseEntry& e) {
  Value item = Value::record();
  if (e.key.is_defined()) item.set("key", e.key);
  item.set("replica", Value::of(e.dot.replica));
  item.set("counter", Value::of(static_cast<int64_t>(e.dot.counter)));
  if (e.tombstone)
    item.set("tombstone", Value::of(true));
  else
    item.set("value", e.value);
  return item;
}

inline std::optional<PoLog::BaseEntry> base_entry_from_value(const Value& v) {
  PoLog::BaseEntry e;
  e.key = v.get("key");
  e.dot.replica = v.get_text("replica");
  e.dot.counter = static_cast<uint64_t>(v.get_int("counter"));
  e.tombstone = v.get("tombstone").as_bool();
  e.value = v.get("value");
  if (!e.dot.valid()) return std::nullopt;
  return e;
}

inline Value event_base(const PoLog::BaseEntry& e) {
  Value b = Value::record();
  b.set("base", base_entry_to_value(e));
  return b;
}

inline Value event_live(const OpEvent& ev) {
  Value b = Value::record();
  b.set("live", ev.to_value());
  return b;
}

inline Value event_stable(const VersionVector& clock) {
  Value b = Value::record();
  b.set("stable", clock.to_value());
  return b;
}

// Masked rendering of an applied change for observe-only subscribers.
// `now` is the lane state after the change.
inline Value event_masked(const AppliedChange& note, const Value& now) {
  Value b = Value::record();
  if (!note.op.is_map_op()) {
    b.set("set", now);
    return b;
  }
  Value delta = Value::record();
  for (size_t i = 0; i < note.changed_keys.size(); ++i) {
    const Value& key = note.changed_keys[i];
    Value item = Value::record();
    item.set("key", key);
    const Value& live = now.get(key);
    if (live.is_defined())
      item.set("value", live);
    else
      item.set("removed", Value::of(true));
    delta.add(std::move(item));
  }
  b.set("delta", std::move(delta));
  return b;
}

inline Value event_product(const Value& product) {
  Value b = Value::record();
  b.set("product", product);
  return b;
}

// ---------------------------------------------------------------------------
// CREDIT: permits for the peer's send budget on this stream, with the
// receiver's delivered clock piggybacked so owners can advance stability.

struct Credit {
  int n = 0;
  VersionVector ack;
  bool has_ack = false;
};

inline Value credit(int n) {
  Value b = Value::record();
  b.set("n", Value::of(int64_t{n}));
  return b;
}

inline Value credit(int n, const VersionVector& ack) {
  Value b = credit(n);
  b.set("ack", ack.to_value());
  return b;
}

inline Credit parse_credit(const Value& b) {
  Credit c;
  c.n = static_cast<int>(b.get_int("n"));
  if (b.get("ack").is_defined()) {
    c.ack = VersionVector::from_value(b.get("ack"));
    c.has_ack = true;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Writes. A write names one mutation; it appears inside node-addressed
// COMMANDs (stream 0), inside link-scoped COMMANDs from clients (their
// stream implies node and lane), and inside the ingest path.

struct Write {
  enum Kind { Set, Update, Remove, Clear } kind = Set;
  Value key;
  Value value;
};

inline void write_into(Value& b, const Write& w) {
  switch (w.kind) {
    case Write::Set:
      b.set("set", w.value);
      break;
    case Write::Update: {
      Value u = Value::record();
      u.set("key", w.key);
      u.set("value", w.value);
      b.set("update", std::move(u));
      break;
    }
    case Write::Remove:
      b.set("remove", w.key);
      break;
    case Write::Clear:
      b.set("clear", Value::of(true));
      break;
  }
}

inline std::optional<Write> parse_write(const Value& b) {
  if (b.get("set").is_defined()) return Write{Write::Set, Value::absent(), b.get("set")};
  if (b.get("update").is_defined()) {
    const Value& u = b.get("update");
    if (!u.get("key").is_defined()) return std::nullopt;
    return Write{Write::Update, u.get("key"), u.get("value")};
  }
  if (b.get("remove").is_defined())
    return Write{Write::Remove, b.get("remove"), Value::absent()};
  if (b.get("clear").as_bool()) return Write{Write::Clear, Value::absent(), Value::absent()};
  return std::nullopt;
}

// COMMAND bodies:
//   {node, lane, <write>}        node-addressed one-shot (stream 0)
//   {<write>}                    client write on a linked stream
//   {install: {...}}             agent relocation transfer (own stream)
//   {override: {node, instance}} placement override broadcast (stream 0)

inline Value command(const NodeUri& node, const std::string& lane, const Write& w) {
  Value b = Value::record();
  b.set("node", Value::of(node.str()));
  b.set("lane", Value::of(lane));
  write_into(b, w);
  return b;
}

inline Value command(const Write& w) {
  Value b = Value::record();
  write_into(b, w);
  return b;
}

struct LaneSnapshot {
  std::string lane;
  LaneKind kind = LaneKind::Value;
  Value snapshot;  // absent for demand lanes
};

struct Install {
  NodeUri node;
  std::vector<LaneSnapshot> lanes;
};

inline Value command_install(const Install& ins) {
  Value lanes = Value::record();
  for (const LaneSnapshot& ls : ins.lanes) {
    Value item = Value::record();
    item.set("lane", Value::of(ls.lane));
    item.set("kind", Value::of(lane_kind_name(ls.kind)));
    if (ls.snapshot.is_defined()) item.set("snapshot", ls.snapshot);
    lanes.add(std::move(item));
  }
  Value body = Value::record();
  body.set("node", Value::of(ins.node.str()));
  body.set("lanes", std::move(lanes));
  Value b = Value::record();
  b.set("install", std::move(body));
  return b;
}

inline std::optional<Install> parse_install(const Value& b) {
  const Value& body = b.get("install");
  auto node = NodeUri::parse(body.get_text("node"));
  if (!node) return std::nullopt;
  Install ins;
  ins.node = *node;
  for (const Item& it : body.get("lanes").items()) {
    auto kind = lane_kind_from(it.value.get_text("kind"));
    std::string lane{it.value.get_text("lane")};
    if (!kind || lane.empty()) return std::nullopt;
    ins.lanes.push_back(LaneSnapshot{lane, *kind, it.value.get("snapshot")});
  }
  return ins;
}

// Admin: move a node's agent to another instance. Answered with STATE
// ok/error on the same stream; any instance accepts it and forwards one
// hop to the owner when needed.
inline Value command_relocate(const NodeUri& node, const std::string& instance,
                              bool forwarded = false) {
  Value r = Value::record();
  r.set("node", Value::of(node.str()));
  r.set("instance", Value::of(instance));
  Value b = Value::record();
  b.set("relocate", std::move(r));
  if (forwarded) b.set("forwarded", Value::of(true));
  return b;
}

inline Value command_override(const NodeUri& node, const std::string& instance) {
  Value o = Value::record();
  o.set("node", Value::of(node.str()));
  o.set("instance", Value::of(instance));
  Value b = Value::record();
  b.set("override", std::move(o));
  return b;
}

// ---------------------------------------------------------------------------
// GET / STATE: a one-shot read on a fresh stream id. STATE doubles as the
// generic acknowledgement for stream-scoped COMMANDs that expect one.

inline Value get(const NodeUri& node, const std::string& lane) {
  Value b = Value::record();
  b.set("node", Value::of(node.str()));
  b.set("lane", Value::of(lane));
  return b;
}

inline Value state(const NodeUri& node, const std::string& lane, const Value& v) {
  Value b = Value::record();
  b.set("node", Value::of(node.str()));
  b.set("lane", Value::of(lane));
  b.set("value", v);
  return b;
}

inline Value state_ok() {
  Value b = Value::record();
  b.set("ok", Value::of(true));
  return b;
}

inline Value state_error(const std::string& reason) {
  Value b = Value::record();
  b.set("error", Value::of(reason));
  return b;
}

// ---------------------------------------------------------------------------
// PING / PONG (stream 0).

inline Value ping(int64_t seq) {
  Value b = Value::record();
  b.set("seq", Value::of(seq));
  return b;
}

inline Value pong(int64_t seq) { return ping(seq); }

}  // namespace wire
}  // namespace swimlet

#endif  // SWIMLET_WIRE_HPP
