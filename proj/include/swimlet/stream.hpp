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

#ifndef SWIMLET_STREAM_HPP
#define SWIMLET_STREAM_HPP

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "swimlet/value.hpp"

// Actor streams: the buffered, credit-regulated pipes every event takes
// between two agents, local or remote. A stream has a bounded send queue
// on the producing side and a bounded receive queue on the consuming
// side; producing costs a permit, and the consumer hands permits back as
// it drains. The consuming agent fans many streams into one mailbox via
// two delivery queues (normal and high priority) with round-robin
// batching, so one hot stream cannot starve the rest.

namespace swimlet {

struct StreamConfig {
  size_t send_cap = 64;          // Qs
  size_t recv_cap = 64;          // Qr
  int initial_window = 32;       // starting permits
  size_t per_stream_limit = 8;   // events moved per dequeue
  size_t mailbox_cap = 256;      // owner mailbox bound
  int priority_threshold = 4;    // >= this goes to the high queue
};

enum class EnqueueResult : uint8_t { Ok, WouldBlock, ResetStream };

class ActorStream {
 public:
  ActorStream(uint32_t id, int priority, const StreamConfig& cfg)
      : id_(id), priority_(priority), cfg_(cfg), credits_(cfg.initial_window) {}

  uint32_t id() const { return id_; }
  int priority() const { return priority_; }
  const StreamConfig& config() const { return cfg_; }

  // ---- producing side -------------------------------------------------

  // Where the send queue drains: directly into our own receive queue for
  // local streams, or onto the wire for remote ones.
  void set_transfer(std::function<void(Value)> fn) { transfer_ = std::move(fn); }

  // Non-blocking, thread-safe. Costs one permit; the permit debit and the
  // enqueue happen in one indivisible step.
  EnqueueResult try_enqueue(Value payload) {
    std::vector<Value> drained;
    {
      std::lock_guard lk(send_mu_);
      if (reset_.load(std::memory_order_acquire)) return EnqueueResult::ResetStream;
      if (credits_ <= 0 || send_q_.size() >= cfg_.send_cap) return EnqueueResult::WouldBlock;
      --credits_;
      ++enqueued_total_;
      send_q_.push_back(std::move(payload));
      if (send_q_.size() > max_send_seen_) max_send_seen_ = send_q_.size();
      if (transfer_) {
        drained.assign(std::make_move_iterator(send_q_.begin()),
                       std::make_move_iterator(send_q_.end()));
        send_q_.clear();
      }
    }
    for (Value& v : drained) transfer_(std::move(v));
    return EnqueueResult::Ok;
  }

  // Permits coming back from the consumer. Clamped to the window; the
  // clamp is counted, not an error.
  void grant(int n) {
    std::function<void()> notify;
    {
      std::lock_guard lk(send_mu_);
      int room = cfg_.initial_window - credits_;
      int applied = n < room ? n : room;
      if (applied < n) overflow_grants_ += n - applied;
      credits_ += applied;
      granted_total_ += applied;
      if (applied > 0) notify = on_credit_;
    }
    if (notify) notify();
  }

  void set_on_credit(std::function<void()> fn) {
    std::lock_guard lk(send_mu_);
    on_credit_ = std::move(fn);
  }

  int credits() const {
    std::lock_guard lk(send_mu_);
    return credits_;
  }

  // Permit ledger, for conservation checks: at any quiescent point,
  // initial_window + granted_total == credits + enqueued_total.
  uint64_t enqueued_total() const {
    std::lock_guard lk(send_mu_);
    return enqueued_total_;
  }
  uint64_t granted_total() const {
    std::lock_guard lk(send_mu_);
    return granted_total_;
  }
  uint64_t overflow_grants() const {
    std::lock_guard lk(send_mu_);
    return overflow_grants_;
  }
  size_t max_send_seen() const {
    std::lock_guard lk(send_mu_);
    return max_send_seen_;
  }

  // ---- consuming side --------------------------------------------------

  // Arrival from the transfer path. False means the producer overran its
  // permits: a protocol violation the caller must treat as fatal.
  bool push_recv(Value payload) {
    std::lock_guard lk(recv_mu_);
    if (reset_.load(std::memory_order_acquire)) return true;  // discarded
    if (recv_q_.size() >= cfg_.recv_cap) return false;
    recv_q_.push_back(std::move(payload));
    if (recv_q_.size() > max_recv_seen_) max_recv_seen_ = recv_q_.size();
    return true;
  }

  // Move up to `limit` events out. Returns the drained events; sets
  // `left` to what remains queued.
  std::vector<Value> drain(size_t limit, size_t& left) {
    std::lock_guard lk(recv_mu_);
    std::vector<Value> out;
    while (!recv_q_.empty() && out.size() < limit) {
      out.push_back(std::move(recv_q_.front()));
      recv_q_.pop_front();
    }
    left = recv_q_.size();
    return out;
  }

  size_t recv_size() const {
    std::lock_guard lk(recv_mu_);
    return recv_q_.size();
  }
  size_t max_recv_seen() const {
    std::lock_guard lk(recv_mu_);
    return max_recv_seen_;
  }

  // ---- reset -----------------------------------------------------------

  // Indivisible and idempotent. Queued events on both sides are dropped;
  // each endpoint's on_reset hook fires exactly once.
  void mark_reset() {
    if (reset_.exchange(true, std::memory_order_acq_rel)) return;
    std::function<void()> a, b;
    {
      std::lock_guard lk(send_mu_);
      send_q_.clear();
      a = std::move(on_reset_sender_);
    }
    {
      std::lock_guard lk(recv_mu_);
      recv_q_.clear();
      b = std::move(on_reset_receiver_);
    }
    if (a) a();
    if (b) b();
  }

  bool is_reset() const { return reset_.load(std::memory_order_acquire); }

  void set_on_reset_sender(std::function<void()> fn) {
    std::lock_guard lk(send_mu_);
    on_reset_sender_ = std::move(fn);
  }
  void set_on_reset_receiver(std::function<void()> fn) {
    std::lock_guard lk(recv_mu_);
    on_reset_receiver_ = std::move(fn);
  }

 private:
  friend class StreamHub;

  const uint32_t id_;
  const int priority_;
  const StreamConfig cfg_;

  mutable std::mutex send_mu_;
  std::deque<Value> send_q_;
  int credits_;
  uint64_t enqueued_total_ = 0;
  uint64_t granted_total_ = 0;
  uint64_t overflow_grants_ = 0;
  size_t max_send_seen_ = 0;
  std::function<void(Value)> transfer_;
  std::function<void()> on_credit_;
  std::function<void()> on_reset_sender_;

  mutable std::mutex recv_mu_;
  std::deque<Value> recv_q_;
  size_t max_recv_seen_ = 0;
  std::function<void()> on_reset_receiver_;

  std::atomic<bool> reset_{false};

  // StreamHub bookkeeping (owner side).
  std::atomic<bool> registered_{false};
  std::atomic<bool> in_delivery_queue_{false};
  uint64_t consumed_since_grant_ = 0;  // guarded by hub mutex
};

using StreamPtr = std::shared_ptr<ActorStream>;

// Owner-side fan-in: delivery queues, the shared mailbox, and the drain
// loop. One hub per agent; run_turn() is only ever entered by one thread
// at a time (the agent's activation), while registration, ready pokes
// and resets may come from anywhere.
class StreamHub {
 public:
  // handler(stream, event): invoked once per consumed event.
  using Handler = std::function<void(const StreamPtr&, Value)>;
  // grant sink: how permits travel back to the producer (direct call for
  // local streams, a CREDIT frame for remote ones).
  using GrantSink = std::function<void(const StreamPtr&, int)>;
  // reset sink: owner-side cleanup once a reset is observed.
  using ResetSink = std::function<void(const StreamPtr&)>;

  StreamHub(StreamConfig cfg, std::function<void()> poke)
      : cfg_(cfg), poke_(std::move(poke)) {}

  // Bind a stream to this hub. The handshake hand-off happens at the
  // link layer; the hub only tracks consumption machinery.
  void register_stream(const StreamPtr& s, Handler handler, GrantSink grant_sink,
                       ResetSink reset_sink = nullptr) {
    if (s->registered_.exchange(true)) throw std::logic_error("stream already registered");
    {
      std::lock_guard lk(mu_);
      Entry& e = entries_[s.get()];
      e.stream = s;
      e.handler = std::move(handler);
      e.grant_sink = std::move(grant_sink);
      e.reset_sink = std::move(reset_sink);
    }
    ready(s);
  }

  void unregister_stream(const StreamPtr& s) {
    std::lock_guard lk(mu_);
    entries_.erase(s.get());
    s->registered_.store(false);
  }

  // Mark the stream as having deliverable events (or a reset) and wake
  // the owner. Deduplicated: a stream sits in at most one queue once.
  void ready(const StreamPtr& s) {
    if (s->in_delivery_queue_.exchange(true)) return;
    {
      std::lock_guard lk(mu_);
      if (s->priority() >= cfg_.priority_threshold)
        high_.push_back(s);
      else
        normal_.push_back(s);
    }
    poke_();
  }

  // One activation: move events into the mailbox under the per-stream
  // and mailbox limits, then run handlers for everything in the mailbox.
  // Returns false when there is nothing left to do.
  bool run_turn() {
    size_t moved = move_phase();
    size_t processed = process_phase();
    std::lock_guard lk(mu_);
    bool more = !high_.empty() || !normal_.empty() || !mailbox_.empty();
    return moved + processed > 0 || more;
  }

  bool idle() const {
    std::lock_guard lk(mu_);
    return high_.empty() && normal_.empty() && mailbox_.empty();
  }

  size_t mailbox_size() const {
    std::lock_guard lk(mu_);
    return mailbox_.size();
  }
  size_t max_mailbox_seen() const {
    std::lock_guard lk(mu_);
    return max_mailbox_seen_;
  }
  // Trace of which queue each dequeued stream came from ('H'/'N'),
  // consumed by priority-precedence checks.
  const std::string& dequeue_trace() const { return dequeue_trace_; }
  void record_dequeues(bool on) { record_dequeues_ = on; }

 private:
  struct Entry {
    StreamPtr stream;
    Handler handler;
    GrantSink grant_sink;
    ResetSink reset_sink;
  };

  size_t move_phase() {
    size_t moved = 0;
    for (;;) {
      StreamPtr s;
      bool from_high = false;
      {
        std::lock_guard lk(mu_);
        if (mailbox_.size() >= cfg_.mailbox_cap) break;
        bool high_waiting = !high_.empty(), normal_waiting = !normal_.empty();
        if (high_waiting) {
          s = std::move(high_.front());
          high_.pop_front();
          from_high = true;
        } else if (normal_waiting) {
          s = std::move(normal_.front());
          normal_.pop_front();
        } else {
          break;
        }
        if (record_dequeues_)
          dequeue_trace_.push_back(from_high ? (normal_waiting ? 'P' : 'H')
                                             : (high_waiting ? 'V' : 'N'));
      }

      if (s->is_reset()) {
        handle_reset(s);
        continue;
      }

      size_t room;
      {
        std::lock_guard lk(mu_);
        room = cfg_.mailbox_cap - mailbox_.size();
      }
      size_t budget = room < cfg_.per_stream_limit ? room : cfg_.per_stream_limit;
      size_t left = 0;
      std::vector<Value> batch = s->drain(budget, left);
      moved += batch.size();

      {
        std::lock_guard lk(mu_);
        for (Value& v : batch) mailbox_.emplace_back(s, std::move(v));
        if (mailbox_.size() > max_mailbox_seen_) max_mailbox_seen_ = mailbox_.size();
        s->consumed_since_grant_ += batch.size();
      }

      // permits go back once occupancy falls below half
      maybe_grant(s);

      if (left > 0) {
        // still loaded: back to the tail of its queue
        std::lock_guard lk(mu_);
        if (s->priority() >= cfg_.priority_threshold)
          high_.push_back(s);
        else
          normal_.push_back(s);
      } else {
        s->in_delivery_queue_.store(false);
        // arrivals may have raced the flag clear
        if (s->recv_size() > 0 || s->is_reset()) ready(s);
      }
    }
    return moved;
  }

  size_t process_phase() {
    size_t processed = 0;
    for (;;) {
      StreamPtr s;
      Value v;
      Handler* handler = nullptr;
      {
        std::lock_guard lk(mu_);
        if (mailbox_.empty()) break;
        s = std::move(mailbox_.front().first);
        v = std::move(mailbox_.front().second);
        mailbox_.pop_front();
        auto it = entries_.find(s.get());
        if (it != entries_.end()) handler = &it->second.handler;
      }
      if (s->is_reset() || !handler || !*handler) continue;  // dropped, not delivered
      (*handler)(s, std::move(v));
      ++processed;
    }
    return processed;
  }

  void maybe_grant(const StreamPtr& s) {
    uint64_t grant_now = 0;
    GrantSink sink;
    {
      std::lock_guard lk(mu_);
      auto it = entries_.find(s.get());
      if (it == entries_.end()) return;
      if (s->recv_size() < cfg_.recv_cap / 2 && s->consumed_since_grant_ > 0) {
        grant_now = s->consumed_since_grant_;
        s->consumed_since_grant_ = 0;
        sink = it->second.grant_sink;
      }
    }
    if (grant_now > 0 && sink) sink(s, static_cast<int>(grant_now));
  }

  void handle_reset(const StreamPtr& s) {
    ResetSink sink;
    {
      std::lock_guard lk(mu_);
      auto it = entries_.find(s.get());
      if (it != entries_.end()) {
        sink = std::move(it->second.reset_sink);
        entries_.erase(it);
      }
      // purge any mailbox remnants for this stream
      std::deque<std::pair<StreamPtr, Value>> keep;
      for (auto& [ms, mv] : mailbox_)
        if (ms.get() != s.get()) keep.emplace_back(std::move(ms), std::move(mv));
      mailbox_ = std::move(keep);
    }
    s->in_delivery_queue_.store(false);
    if (sink) sink(s);
  }

  const StreamConfig cfg_;
  std::function<void()> poke_;

  mutable std::mutex mu_;
  std::map<const ActorStream*, Entry> entries_;
  std::deque<StreamPtr> high_, normal_;
  std::deque<std::pair<StreamPtr, Value>> mailbox_;
  size_t max_mailbox_seen_ = 0;
  bool record_dequeues_ = false;
  std::string dequeue_trace_;
};

}  // namespace swimlet

#endif  // SWIMLET_STREAM_HPP
