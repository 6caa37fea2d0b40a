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

#ifndef SWIMLET_FRAME_HPP
#define SWIMLET_FRAME_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "swimlet/bytes.hpp"
#include "swimlet/value.hpp"

// Multiplexed wire framing. Every frame is
//
//   [ length u32 BE | type u8 | stream id u32 BE | body ]
//
// where length counts everything after itself and the body is one value
// in canonical encoding. Stream id 0 is the connection-level channel;
// ids opened by the connection initiator are odd, by the acceptor even.

namespace swimlet {

enum class FrameType : uint8_t {
  Link = 0x01,      // open a downlink to node/lane
  Linked = 0x02,    // downlink accepted
  Sync = 0x03,      // request state transfer
  Synced = 0x04,    // state transfer complete
  Event = 0x05,     // lane op or masked state update
  Command = 0x06,   // one-shot write
  Unlink = 0x07,    // close the downlink
  Unlinked = 0x08,  // downlink closed
  Credit = 0x09,    // flow-control permits, piggybacked ack clock
  Reset = 0x0A,     // drop stream state; relink required
  Get = 0x0B,       // one-shot read
  State = 0x0C,     // one-shot read reply
  Ping = 0x0D,      // liveness probe (stream 0)
  Pong = 0x0E,      // liveness reply (stream 0)
};

inline bool valid_frame_type(uint8_t t) { return t >= 0x01 && t <= 0x0E; }

inline const char* frame_type_name(FrameType t) {
  switch (t) {
    case FrameType::Link: return "LINK";
    case FrameType::Linked: return "LINKED";
    case FrameType::Sync: return "SYNC";
    case FrameType::Synced: return "SYNCED";
    case FrameType::Event: return "EVENT";
    case FrameType::Command: return "COMMAND";
    case FrameType::Unlink: return "UNLINK";
    case FrameType::Unlinked: return "UNLINKED";
    case FrameType::Credit: return "CREDIT";
    case FrameType::Reset: return "RESET";
    case FrameType::Get: return "GET";
    case FrameType::State: return "STATE";
    case FrameType::Ping: return "PING";
    case FrameType::Pong: return "PONG";
  }
  return "?";
}

struct Frame {
  FrameType type = FrameType::Ping;
  uint32_t stream_id = 0;
  Value body = Value::record();
};

// Frames above this size indicate a broken or hostile peer.
inline constexpr size_t kMaxFrameLen = 1 << 20;

inline std::string encode_frame(const Frame& f) {
  std::string body = f.body.encode();
  std::string out;
  out.reserve(9 + body.size());
  put_u32_be(out, static_cast<uint32_t>(5 + body.size()));
  put_u8(out, static_cast<uint8_t>(f.type));
  put_u32_be(out, f.stream_id);
  out.append(body);
  return out;
}

enum class FrameError : uint8_t {
  None = 0,
  TooLarge,   // length field beyond the cap
  Undersize,  // length field can't hold the fixed header
  BadType,    // unknown frame type byte
  BadBody,    // body failed to decode or had trailing bytes
};

inline const char* frame_error_name(FrameError e) {
  switch (e) {
    case FrameError::None: return "none";
    case FrameError::TooLarge: return "frame too large";
    case FrameError::Undersize: return "frame undersize";
    case FrameError::BadType: return "unknown frame type";
    case FrameError::BadBody: return "malformed frame body";
  }
  return "?";
}

// Incremental decoder for a byte stream. Feed arbitrary chunks, poll
// frames out. Any error is terminal for the connection.
class FrameDecoder {
 public:
  explicit FrameDecoder(size_t max_len = kMaxFrameLen) : max_len_(max_len) {}

  void append(std::string_view bytes) { buf_.append(bytes); }

  // One decoded frame, or nullopt when more bytes are needed or an error
  // was hit (check error()).
  std::optional<Frame> next() {
    if (err_ != FrameError::None) return std::nullopt;
    compact();
    if (buf_.size() - pos_ < 4) return std::nullopt;
    ByteReader head(std::string_view(buf_).substr(pos_));
    uint32_t len = head.u32_be();
    if (len < 5) {
      err_ = FrameError::Undersize;
      return std::nullopt;
    }
    if (len > max_len_) {
      err_ = FrameError::TooLarge;
      return std::nullopt;
    }
    if (buf_.size() - pos_ < 4 + static_cast<size_t>(len)) return std::nullopt;
    uint8_t type = head.u8();
    uint32_t stream_id = head.u32_be();
    if (!valid_frame_type(type)) {
      err_ = FrameError::BadType;
      return std::nullopt;
    }
    std::string_view body_bytes = std::string_view(buf_).substr(pos_ + 9, len - 5);
    auto d = Value::decode(body_bytes);
    if (!d.ok() || d.consumed != body_bytes.size()) {
      err_ = FrameError::BadBody;
      return std::nullopt;
    }
    pos_ += 4 + static_cast<size_t>(len);
    Frame f;
    f.type = static_cast<FrameType>(type);
    f.stream_id = stream_id;
    f.body = std::move(d.value);
    return f;
  }

  FrameError error() const { return err_; }
  size_t buffered() const { return buf_.size() - pos_; }

 private:
  void compact() {
    if (pos_ > 4096 && pos_ * 2 > buf_.size()) {
      buf_.erase(0, pos_);
      pos_ = 0;
    }
  }

  std::string buf_;
  size_t pos_ = 0;
  size_t max_len_;
  FrameError err_ = FrameError::None;
};

}  // namespace swimlet

#endif  // SWIMLET_FRAME_HPP
