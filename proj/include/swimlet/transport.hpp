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

#ifndef SWIMLET_TRANSPORT_HPP
#define SWIMLET_TRANSPORT_HPP

#include <functional>
#include <memory>
#include <string>
#include <string_view>

namespace swimlet {

// One end of a reliable, ordered byte pipe. The transport owns delivery;
// the connection layer owns framing. Callbacks may fire from any transport
// context — owners hop onto their own executor before touching state.
class Conduit {
 public:
  virtual ~Conduit() = default;

  // Queue bytes for the peer. Returns false once the pipe is closed or
  // broken; delivery of previously accepted bytes is not guaranteed then.
  virtual bool send(std::string_view bytes) = 0;
  virtual void close() = 0;

  // Called once after on_bytes/on_closed are wired. Transports that read
  // from their own threads hold delivery until this point so no bytes
  // race the callback assignment.
  virtual void begin() {}

  std::function<void(std::string_view)> on_bytes;
  std::function<void()> on_closed;
};

using ConduitPtr = std::unique_ptr<Conduit>;

// Per-instance transport endpoint: accepts inbound conduits on a listen
// address and dials peers. Implementations: an in-process simulated
// network (deterministic, virtual time) and TCP sockets.
class Transport {
 public:
  virtual ~Transport() = default;

  std::function<void(ConduitPtr)> on_accept;

  virtual void listen(const std::string& address) = 0;
  virtual void dial(const std::string& address,
                    std::function<void(ConduitPtr)> on_ok,
                    std::function<void(const std::string& reason)> on_fail) = 0;
  virtual void shutdown() = 0;
};

}  // namespace swimlet

#endif  // SWIMLET_TRANSPORT_HPP
