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
// A connection frames one conduit and runs the session handshake on
// stream 0: the dialer sends LINK {instance, token}, the acceptor answers
// LINKED {instance} (or UNLINKED {reason: "unauthorized"} and closes).
// After that, stream-0 PING/PONG is handled here; every other frame is
// handed to the owner.
//
// Threading: all connection state changes happen on the owner's strand.
// Transport callbacks hop there. send() is the one exception — it is
// thread-safe so event streams can flush straight from agent contexts
// without a strand round trip; frame encoding is pure and the conduit
// write is serialized by a mutex.

#ifndef SWIMLET_CONNECTION_HPP
#define SWIMLET_CONNECTION_HPP

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <utility>

#include "swimlet/frame.hpp"
#include "swimlet/strand.hpp"
#include "swimlet/transport.hpp"
#include "swimlet/wire.hpp"

namespace swimlet {

class Connection {
 public:
  Connection(Strand& strand, ConduitPtr conduit, bool initiator,
             std::string local_instance, std::string token, bool require_token)
      : strand_(strand),
        conduit_(std::move(conduit)),
        initiator_(initiator),
        local_(std::move(local_instance)),
        token_(std::move(token)),
        require_token_(require_token),
        next_stream_id_(initiator ? 1 : 2) {}

  // All three run on the strand. on_down fires at most once.
  std::function<void(Frame&&)> on_frame;
  std::function<void(const std::string& peer)> on_ready;
  std::function<void(const std::string& reason)> on_down;

  // Install conduit hooks and, on the dialer side, send the hello.
  // Strand context.
  void start() {
    conduit_->on_bytes = [this](std::string_view bytes) {
      strand_.post([this, data = std::string(bytes)] { feed(data); });
    };
    conduit_->on_closed = [this] {
      strand_.post([this] { close("transport closed"); });
    };
    conduit_->begin();
    if (initiator_) {
      raw_send({FrameType::Link, 0, wire::hello(local_, token_)});
    }
  }

  // Thread-safe. False once the connection is down or still in handshake.
  bool send(FrameType type, uint32_t stream_id, const Value& body) {
    if (!ready_.load(std::memory_order_acquire)) return false;
    return raw_send({type, stream_id, body});
  }

  // Strand context only.
  uint32_t alloc_stream_id() {
    uint32_t id = next_stream_id_;
    next_stream_id_ += 2;
    return id;
  }

  bool is_initiator() const { return initiator_; }
  bool ready() const { return ready_.load(std::memory_order_acquire); }
  bool down() const { return down_.load(std::memory_order_acquire); }
  const std::string& peer() const { return peer_; }

  // Heartbeat, driven by the owner's timer (strand context). A reply —
  // or any inbound frame — clears the outstanding count.
  void send_ping() {
    ++outstanding_pings_;
    raw_send({FrameType::Ping, 0, wire::ping(++ping_seq_)});
  }
  int outstanding_pings() const { return outstanding_pings_; }

  // Strand context. Idempotent.
  void close(const std::string& reason) {
    if (down_.exchange(true)) return;
    ready_.store(false, std::memory_order_release);
    conduit_->close();
    if (on_down) on_down(reason);
  }

  uint64_t frames_sent() const { return frames_sent_.load(std::memory_order_relaxed); }
  uint64_t frames_received() const { return frames_received_; }

 private:
  bool raw_send(const Frame& f) {
    std::string bytes = encode_frame(f);
    std::lock_guard lk(send_mu_);
    if (down_.load(std::memory_order_acquire)) return false;
    if (!conduit_->send(bytes)) {
      // Tear down from the strand; the caller may be an agent worker.
      strand_.post([this] { close("transport write failed"); });
      return false;
    }
    frames_sent_.fetch_add(1, std::memory_order_relaxed);
    return true;
  }

  void feed(const std::string& data) {
    if (down_.load(std::memory_order_acquire)) return;
    decoder_.append(data);
    for (;;) {
      auto f = decoder_.next();
      if (!f) break;
      ++frames_received_;
      outstanding_pings_ = 0;
      if (!ready_.load(std::memory_order_acquire)) {
        handshake(*f);
        if (down_.load(std::memory_order_acquire)) return;
        continue;
      }
      dispatch(std::move(*f));
      if (down_.load(std::memory_order_acquire)) return;
    }
    if (decoder_.error() != FrameError::None)
      close(frame_error_name(decoder_.error()));
  }

  void handshake(Frame& f) {
    if (f.stream_id != 0) {
      close("frame before session hello");
      return;
    }
    if (initiator_) {
      if (f.type == FrameType::Linked) {
        peer_ = f.body.get_text("instance");
        if (peer_.empty()) {
          close("hello reply without instance");
          return;
        }
        become_ready();
      } else if (f.type == FrameType::Unlinked) {
        close("rejected: " + std::string(f.body.get_text("reason")));
      } else {
        close("unexpected frame during handshake");
      }
      return;
    }
    if (f.type != FrameType::Link) {
      close("expected session hello");
      return;
    }
    if (require_token_ && f.body.get_text("token") != token_) {
      raw_send({FrameType::Unlinked, 0, wire::unlinked("unauthorized")});
      close("unauthorized");
      return;
    }
    peer_ = f.body.get_text("instance");
    if (peer_.empty()) {
      close("hello without instance");
      return;
    }
    raw_send({FrameType::Linked, 0, wire::welcome(local_)});
    become_ready();
  }

  void become_ready() {
    ready_.store(true, std::memory_order_release);
    if (on_ready) on_ready(peer_);
  }

  void dispatch(Frame&& f) {
    if (f.stream_id == 0 && f.type == FrameType::Ping) {
      raw_send({FrameType::Pong, 0, wire::pong(f.body.get_int("seq"))});
      return;
    }
    if (f.stream_id == 0 && f.type == FrameType::Pong) return;
    if (on_frame) on_frame(std::move(f));
  }

  Strand& strand_;
  ConduitPtr conduit_;
  const bool initiator_;
  const std::string local_;
  const std::string token_;
  const bool require_token_;

  FrameDecoder decoder_;
  std::string peer_;
  std::atomic<bool> ready_{false};
  std::atomic<bool> down_{false};
  uint32_t next_stream_id_;
  int outstanding_pings_ = 0;
  int64_t ping_seq_ = 0;

  std::mutex send_mu_;
  std::atomic<uint64_t> frames_sent_{0};
  uint64_t frames_received_ = 0;
};

using ConnectionPtr = std::shared_ptr<Connection>;

}  // namespace swimlet

#endif  // SWIMLET_CONNECTION_HPP
