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

#ifndef SWIMLET_RING_HPP
#define SWIMLET_RING_HPP

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

#include "swimlet/bytes.hpp"
#include "swimlet/uri.hpp"

// Consistent-hash placement of node URIs onto instances. Each instance
// contributes a fixed number of virtual points on a 64-bit ring; a node
// lands on the clockwise successor of its hash. Every instance computes
// the same answer from the same membership, so there is no placement
// coordination beyond sharing the member list. Relocations are explicit
// per-node overrides consulted before the ring.

namespace swimlet {

class HashRing {
 public:
  explicit HashRing(int virtual_nodes = 64) : virtual_nodes_(virtual_nodes) {}

  void add_instance(const std::string& id) {
    if (!members_.insert(id).second) return;
    for (int i = 0; i < virtual_nodes_; ++i)
      points_.emplace(hash64(id + "#" + std::to_string(i)), id);
  }

  void remove_instance(const std::string& id) {
    if (members_.erase(id) == 0) return;
    for (auto it = points_.begin(); it != points_.end();)
      it = it->second == id ? points_.erase(it) : std::next(it);
  }

  bool has_instance(const std::string& id) const { return members_.count(id) > 0; }
  bool empty() const { return points_.empty(); }
  size_t size() const { return members_.size(); }
  const std::set<std::string>& members() const { return members_; }

  // Clockwise successor of the key's hash, wrapping at the top.
  const std::string& route_key(const std::string& key) const {
    if (points_.empty()) throw std::runtime_error("hash ring is empty");
    auto it = points_.upper_bound(hash64(key));
    if (it == points_.end()) it = points_.begin();
    return it->second;
  }

 private:
  int virtual_nodes_;
  std::set<std::string> members_;
  std::map<uint64_t, std::string> points_;
};

// A complete routing view: ring plus relocation overrides. Instances
// publish immutable snapshots of this to their data paths, so routing
// reads never contend with membership or relocation changes.
class Placement {
 public:
  explicit Placement(int virtual_nodes = 64) : ring_(virtual_nodes) {}

  HashRing& ring() { return ring_; }
  const HashRing& ring() const { return ring_; }

  void set_override(const NodeUri& node, const std::string& instance) {
    overrides_[node.str()] = instance;
  }
  void clear_override(const NodeUri& node) { overrides_.erase(node.str()); }
  const std::map<std::string, std::string>& overrides() const { return overrides_; }

  // Overrides first, then the ring. `placement_key` is what gets hashed;
  // it defaults to the canonical node string but agent types may supply
  // an affinity key so related nodes land together.
  const std::string& route(const NodeUri& node) const { return route(node, node.str()); }

  const std::string& route(const NodeUri& node, const std::string& placement_key) const {
    auto it = overrides_.find(node.str());
    if (it != overrides_.end() && ring_.has_instance(it->second)) return it->second;
    return ring_.route_key(placement_key);
  }

 private:
  HashRing ring_;
  std::map<std::string, std::string> overrides_;
};

}  // namespace swimlet

#endif  // SWIMLET_RING_HPP
