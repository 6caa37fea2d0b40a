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
// A simulated network over the virtual-time kernel. Hosts are names;
// edges carry a latency range and a partition flag. Message order per
// direction is preserved (a pipe is reliable and ordered while the edge
// is up); a partitioned edge silently drops everything, including dial
// attempts and close notifications — peers find out by timing out, the
// same way they would on a dead cable.
//
// All delays and latency draws come from the kernel, so one seed and one
// script reproduce the exact same event order, byte for byte.

#ifndef SWIMLET_SIM_HPP
#define SWIMLET_SIM_HPP

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>

#include "swimlet/kernel.hpp"
#include "swimlet/transport.hpp"

namespace swimlet {

class SimNet {
 public:
  explicit SimNet(SimKernel& kernel) : kernel_(kernel) {}

  SimNet(const SimNet&) = delete;
  SimNet& operator=(const SimNet&) = delete;

  // Transport endpoint for a host. The endpoint listens on the host's
  // own name; dial addresses are host names.
  Transport* host(const std::string& name) {
    auto it = hosts_.find(name);
    if (it == hosts_.end())
      it = hosts_.emplace(name, std::make_unique<HostTransport>(this, name)).first;
    return it->second.get();
  }

  void set_latency(const std::string& a, const std::string& b, int64_t min_ms,
                   int64_t max_ms) {
    Edge& e = edge(a, b);
    e.min_nanos = min_ms * kMillis;
    e.max_nanos = max_ms < min_ms ? min_ms * kMillis : max_ms * kMillis;
  }

  void partition(const std::string& a, const std::string& b) {
    edge(a, b).partitioned = true;
    kernel_.trace("net", "partition " + edge_name(a, b));
  }

  void heal(const std::string& a, const std::string& b) {
    edge(a, b).partitioned = false;
    kernel_.trace("net", "heal " + edge_name(a, b));
  }

  bool partitioned(const std::string& a, const std::string& b) {
    return edge(a, b).partitioned;
  }

  // Messages that actually arrived, per directed pair.
  uint64_t delivered(const std::string& from, const std::string& to) const {
    auto it = delivered_.find(std::make_pair(from, to));
    return it == delivered_.end() ? 0 : it->second;
  }

  int64_t dial_timeout_ms = 1000;

 private:
  struct Edge {
    int64_t min_nanos = 1 * kMillis;
    int64_t max_nanos = 5 * kMillis;
    bool partitioned = false;
  };

  struct Pipe;

  class SimConduit final : public Conduit {
   public:
    SimConduit(SimNet* net, std::shared_ptr<Pipe> pipe, bool a_side)
        : net_(net), pipe_(std::move(pipe)), a_side_(a_side) {}

    ~SimConduit() override {
      (a_side_ ? pipe_->closed_a : pipe_->closed_b) = true;
      (a_side_ ? pipe_->end_a : pipe_->end_b) = nullptr;
    }

    bool send(std::string_view bytes) override {
      return net_->transmit(pipe_, a_side_, std::string(bytes));
    }

    void close() override { net_->close_pipe(pipe_, a_side_); }

    SimNet* net_;
    std::shared_ptr<Pipe> pipe_;
    bool a_side_;
  };

  struct Pipe {
    std::string host_a, host_b;
    SimConduit* end_a = nullptr;  // borrowed; cleared on destruction
    SimConduit* end_b = nullptr;
    bool closed_a = false;  // local close per side
    bool closed_b = false;
    int64_t clear_a2b = 0;  // earliest delivery time keeping order
    int64_t clear_b2a = 0;
  };

  class HostTransport final : public Transport {
   public:
    HostTransport(SimNet* net, std::string name) : net_(net), name_(std::move(name)) {}

    void listen(const std::string& address) override { listen_as_ = address; }

    void dial(const std::string& address, std::function<void(ConduitPtr)> on_ok,
              std::function<void(const std::string&)> on_fail) override {
      net_->dial(name_, address, std::move(on_ok), std::move(on_fail));
    }

    void shutdown() override { listen_as_.clear(); }

    SimNet* net_;
    std::string name_;
    std::string listen_as_;
  };

  Edge& edge(const std::string& a, const std::string& b) {
    return edges_[a < b ? std::make_pair(a, b) : std::make_pair(b, a)];
  }

  static std::string edge_name(const std::string& a, const std::string& b) {
    return a < b ? a + "|" + b : b + "|" + a;
  }

  int64_t draw_latency(const Edge& e) {
    if (e.max_nanos <= e.min_nanos) return e.min_nanos;
    uint64_t span = static_cast<uint64_t>(e.max_nanos - e.min_nanos) + 1;
    return e.min_nanos + static_cast<int64_t>(kernel_.random() % span);
  }

  bool transmit(const std::shared_ptr<Pipe>& pipe, bool a_side, std::string bytes) {
    if (a_side ? pipe->closed_a : pipe->closed_b) return false;
    const std::string& from = a_side ? pipe->host_a : pipe->host_b;
    const std::string& to = a_side ? pipe->host_b : pipe->host_a;
    Edge& e = edge(from, to);
    if (e.partitioned) return true;  // accepted, then lost on the wire
    int64_t& clear = a_side ? pipe->clear_a2b : pipe->clear_b2a;
    int64_t at = kernel_.now_nanos() + draw_latency(e);
    if (at < clear) at = clear;
    clear = at;
    kernel_.schedule(at - kernel_.now_nanos(),
                     [this, pipe, a_side, data = std::move(bytes), from, to] {
                       SimConduit* dst = a_side ? pipe->end_b : pipe->end_a;
                       bool dst_closed = a_side ? pipe->closed_b : pipe->closed_a;
                       if (!dst || dst_closed || edge(from, to).partitioned) return;
                       ++delivered_[std::make_pair(from, to)];
                       if (dst->on_bytes) dst->on_bytes(data);
                     });
    return true;
  }

  void close_pipe(const std::shared_ptr<Pipe>& pipe, bool a_side) {
    bool& local = a_side ? pipe->closed_a : pipe->closed_b;
    if (local) return;
    local = true;
    const std::string& from = a_side ? pipe->host_a : pipe->host_b;
    const std::string& to = a_side ? pipe->host_b : pipe->host_a;
    Edge& e = edge(from, to);
    if (e.partitioned) return;  // the FIN is lost too
    kernel_.schedule(draw_latency(e), [pipe, a_side] {
      SimConduit* dst = a_side ? pipe->end_b : pipe->end_a;
      bool& dst_closed = a_side ? pipe->closed_b : pipe->closed_a;
      if (!dst || dst_closed) return;
      dst_closed = true;
      if (dst->on_closed) dst->on_closed();
    });
  }

  void dial(const std::string& from, const std::string& to,
            std::function<void(ConduitPtr)> on_ok,
            std::function<void(const std::string&)> on_fail) {
    auto settled = std::make_shared<bool>(false);
    kernel_.schedule(dial_timeout_ms * kMillis, [settled, on_fail] {
      if (*settled) return;
      *settled = true;
      if (on_fail) on_fail("dial timed out");
    });
    Edge& e = edge(from, to);
    if (e.partitioned) return;  // the attempt never arrives
    int64_t out = draw_latency(e);
    kernel_.schedule(out, [this, from, to, settled, on_ok = std::move(on_ok)] {
      if (edge(from, to).partitioned) return;
      auto it = hosts_.find(to);
      if (it == hosts_.end() || it->second->listen_as_.empty() || !it->second->on_accept)
        return;  // connection refused looks like silence; the timeout reports it
      // The accept ack has to survive the return trip before either side
      // speaks. Build the pipe when it lands.
      int64_t back = draw_latency(edge(from, to));
      kernel_.schedule(back, [this, from, to, settled, on_ok] {
        if (*settled || edge(from, to).partitioned) return;
        auto it2 = hosts_.find(to);
        if (it2 == hosts_.end() || it2->second->listen_as_.empty() || !it2->second->on_accept)
          return;
        *settled = true;
        auto pipe = std::make_shared<Pipe>();
        pipe->host_a = from;
        pipe->host_b = to;
        auto ca = std::make_unique<SimConduit>(this, pipe, true);
        auto cb = std::make_unique<SimConduit>(this, pipe, false);
        pipe->end_a = ca.get();
        pipe->end_b = cb.get();
        kernel_.trace("net", "connect " + from + ">" + to);
        it2->second->on_accept(std::move(cb));
        on_ok(std::move(ca));
      });
    });
  }

  SimKernel& kernel_;
  std::map<std::string, std::unique_ptr<HostTransport>> hosts_;
  std::map<std::pair<std::string, std::string>, Edge> edges_;
  std::map<std::pair<std::string, std::string>, uint64_t> delivered_;
};

}  // namespace swimlet

#endif  // SWIMLET_SIM_HPP
