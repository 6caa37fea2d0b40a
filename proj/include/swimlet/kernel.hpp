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

#ifndef SWIMLET_KERNEL_HPP
#define SWIMLET_KERNEL_HPP

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <queue>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "swimlet/bytes.hpp"

// Execution substrate. Everything time- or concurrency-dependent in the
// runtime goes through a Kernel, so the same code runs on a thread pool
// against the wall clock or single-threaded against a seeded virtual
// clock with reproducible interleavings.

namespace swimlet {

inline constexpr int64_t kMillis = 1'000'000;  // nanos per millisecond

class Kernel {
 public:
  virtual ~Kernel() = default;

  // Run as soon as possible.
  virtual void post(std::function<void()> fn) = 0;
  // Run once after `delay_nanos`. Returns a handle usable with cancel().
  virtual uint64_t schedule(int64_t delay_nanos, std::function<void()> fn) = 0;
  virtual void cancel(uint64_t timer) = 0;
  virtual int64_t now_nanos() = 0;
  // Deterministic per-kernel randomness (seeded in sim, random otherwise).
  virtual uint64_t random() = 0;

  // Trace hook: ordered per-label event streams, used by the simulation
  // harness to compare runs. No-op on real-time kernels.
  virtual void trace(const std::string& label, const std::string& event) {
    (void)label;
    (void)event;
  }
};

// ---------------------------------------------------------------------------
// Deterministic single-threaded kernel over virtual time. Tasks run in
// (time, insertion) order; identical seeds and stimuli yield identical
// traces, byte for byte.
// ---------------------------------------------------------------------------

class SimKernel final : public Kernel {
 public:
  explicit SimKernel(uint64_t seed = 1) : rng_state_(seed ? seed : 1) {}

  void post(std::function<void()> fn) override { schedule(0, std::move(fn)); }

  uint64_t schedule(int64_t delay_nanos, std::function<void()> fn) override {
    uint64_t id = next_id_++;
    tasks_.emplace(Task{now_ + (delay_nanos < 0 ? 0 : delay_nanos), seq_++, id, std::move(fn)});
    return id;
  }

  void cancel(uint64_t timer) override { cancelled_.insert(timer); }

  int64_t now_nanos() override { return now_; }

  uint64_t random() override {
    // splitmix64 stream
    rng_state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = rng_state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  void trace(const std::string& label, const std::string& event) override {
    auto& t = traces_[label];
    t.hash = hash64_mix(t.hash, event);
    if (keep_trace_text_) t.lines.push_back(event);
    ++t.count;
  }

  // Run everything due, advancing virtual time, until the queue is empty
  // or `deadline_nanos` (absolute) is passed. Returns executed task count.
  size_t run(int64_t deadline_nanos = INT64_MAX) {
    size_t n = 0;
    while (!tasks_.empty()) {
      const Task& top = tasks_.top();
      if (top.at > deadline_nanos) break;
      Task t = std::move(const_cast<Task&>(top));
      tasks_.pop();
      if (cancelled_.erase(t.id)) continue;
      now_ = t.at;
      t.fn();
      ++n;
    }
    if (deadline_nanos != INT64_MAX && now_ < deadline_nanos) now_ = deadline_nanos;
    return n;
  }

  size_t run_for(int64_t duration_nanos) { return run(now_ + duration_nanos); }

  // Step until `done` returns true. False on timeout.
  bool run_until(const std::function<bool()>& done, int64_t timeout_nanos) {
    int64_t deadline = now_ + timeout_nanos;
    while (!done()) {
      if (tasks_.empty() || tasks_.top().at > deadline) return done();
      Task t = std::move(const_cast<Task&>(tasks_.top()));
      tasks_.pop();
      if (cancelled_.erase(t.id)) continue;
      now_ = t.at;
      t.fn();
    }
    return true;
  }

  bool idle() const { return tasks_.empty(); }
  size_t pending() const { return tasks_.size(); }

  uint64_t trace_hash(const std::string& label) const {
    auto it = traces_.find(label);
    return it == traces_.end() ? kHashBasis : it->second.hash;
  }
  size_t trace_count(const std::string& label) const {
    auto it = traces_.find(label);
    return it == traces_.end() ? 0 : it->second.count;
  }
  void keep_trace_text(bool on) { keep_trace_text_ = on; }
  const std::vector<std::string>& trace_lines(const std::string& label) {
    return traces_[label].lines;
  }

 private:
  struct Task {
    int64_t at;
    uint64_t seq;
    uint64_t id;
    std::function<void()> fn;
    bool operator>(const Task& o) const {
      if (at != o.at) return at > o.at;
      return seq > o.seq;
    }
  };
  struct TraceStream {
    uint64_t hash = kHashBasis;
    size_t count = 0;
    std::vector<std::string> lines;
  };

  std::priority_queue<Task, std::vector<Task>, std::greater<>> tasks_;
  std::set<uint64_t> cancelled_;
  int64_t now_ = 0;
  uint64_t seq_ = 0;
  uint64_t next_id_ = 1;
  uint64_t rng_state_;
  bool keep_trace_text_ = false;
  std::map<std::string, TraceStream> traces_;
};

// ---------------------------------------------------------------------------
// Real-time kernel: a worker pool for tasks plus one timer thread.
// ---------------------------------------------------------------------------

class ThreadKernel final : public Kernel {
 public:
  explicit ThreadKernel(size_t workers = std::thread::hardware_concurrency()) {
    if (workers == 0) workers = 1;
    start_ = std::chrono::steady_clock::now();
    rng_state_ = std::chrono::high_resolution_clock::now().time_since_epoch().count() | 1;
    for (size_t i = 0; i < workers; ++i)
      workers_.emplace_back([this] { worker_loop(); });
    timer_thread_ = std::thread([this] { timer_loop(); });
  }

  ~ThreadKernel() override { shutdown(); }

  void shutdown() {
    {
      std::lock_guard lk(mu_);
      if (stopping_) return;
      stopping_ = true;
    }
    cv_.notify_all();
    timer_cv_.notify_all();
    for (auto& w : workers_) w.join();
    timer_thread_.join();
  }

  void post(std::function<void()> fn) override {
    {
      std::lock_guard lk(mu_);
      if (stopping_) return;
      tasks_.push_back(std::move(fn));
    }
    cv_.notify_one();
  }

  uint64_t schedule(int64_t delay_nanos, std::function<void()> fn) override {
    uint64_t id = next_id_.fetch_add(1);
    {
      std::lock_guard lk(timer_mu_);
      if (stopping_) return id;
      timers_.emplace(now_nanos() + delay_nanos, TimerEntry{id, std::move(fn)});
    }
    timer_cv_.notify_all();
    return id;
  }

  void cancel(uint64_t timer) override {
    std::lock_guard lk(timer_mu_);
    for (auto it = timers_.begin(); it != timers_.end(); ++it) {
      if (it->second.id == timer) {
        timers_.erase(it);
        return;
      }
    }
  }

  int64_t now_nanos() override {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(
               std::chrono::steady_clock::now() - start_)
        .count();
  }

  uint64_t random() override {
    uint64_t s = rng_state_.fetch_add(0x9E3779B97F4A7C15ull) + 0x9E3779B97F4A7C15ull;
    uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  struct TimerEntry {
    uint64_t id;
    std::function<void()> fn;
  };

  void worker_loop() {
    for (;;) {
      std::function<void()> fn;
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [this] { return stopping_ || !tasks_.empty(); });
        if (stopping_ && tasks_.empty()) return;
        fn = std::move(tasks_.front());
        tasks_.pop_front();
      }
      fn();
    }
  }

  void timer_loop() {
    std::unique_lock lk(timer_mu_);
    for (;;) {
      if (stopping_) return;
      if (timers_.empty()) {
        timer_cv_.wait(lk);
        continue;
      }
      int64_t due = timers_.begin()->first;
      int64_t now = now_nanos();
      if (now < due) {
        timer_cv_.wait_for(lk, std::chrono::nanoseconds(due - now));
        continue;
      }
      TimerEntry e = std::move(timers_.begin()->second);
      timers_.erase(timers_.begin());
      lk.unlock();
      post(std::move(e.fn));
      lk.lock();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> tasks_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;

  std::mutex timer_mu_;
  std::condition_variable timer_cv_;
  std::multimap<int64_t, TimerEntry> timers_;
  std::thread timer_thread_;

  std::atomic<uint64_t> next_id_{1};
  std::atomic<uint64_t> rng_state_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace swimlet

#endif  // SWIMLET_KERNEL_HPP
