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

#include <catch2/catch_amalgamated.hpp>

#include <atomic>

#include "swimlet/kernel.hpp"

using swimlet::SimKernel;
using swimlet::ThreadKernel;

TEST_CASE("sim kernel runs tasks in time order with stable ties") {
  SimKernel k(42);
  std::vector<int> order;
  k.schedule(30, [&] { order.push_back(3); });
  k.schedule(10, [&] { order.push_back(1); });
  k.schedule(10, [&] { order.push_back(2); });  // same instant: insertion order
  k.post([&] { order.push_back(0); });
  k.run();
  CHECK(order == std::vector<int>{0, 1, 2, 3});
  CHECK(k.now_nanos() == 30);
}

TEST_CASE("sim kernel cancellation and deadlines") {
  SimKernel k(1);
  int fired = 0;
  uint64_t t = k.schedule(100, [&] { ++fired; });
  k.schedule(200, [&] { ++fired; });
  k.cancel(t);
  k.run_for(150);
  CHECK(fired == 0);
  CHECK(k.now_nanos() == 150);  // time advances to the deadline
  k.run();
  CHECK(fired == 1);
}

TEST_CASE("sim kernel tasks can reschedule themselves") {
  SimKernel k(1);
  int ticks = 0;
  std::function<void()> tick = [&] {
    if (++ticks < 5) k.schedule(10, tick);
  };
  k.schedule(10, tick);
  bool done = k.run_until([&] { return ticks == 5; }, 1'000);
  CHECK(done);
  CHECK(k.now_nanos() == 50);
}

TEST_CASE("identical seeds replay identical traces") {
  auto run = [](uint64_t seed) {
    SimKernel k(seed);
    for (int i = 0; i < 50; ++i) {
      k.schedule(static_cast<int64_t>(k.random() % 1000), [&k, i] {
        k.trace("node", "event " + std::to_string(i) + "@" + std::to_string(k.now_nanos()));
      });
    }
    k.run();
    return k.trace_hash("node");
  };
  CHECK(run(7) == run(7));
  CHECK(run(7) != run(8));
}

TEST_CASE("thread kernel executes posts and timers") {
  ThreadKernel k(2);
  std::atomic<int> ran{0};
  for (int i = 0; i < 100; ++i) k.post([&] { ran.fetch_add(1); });
  k.schedule(1'000'000, [&] { ran.fetch_add(100); });
  uint64_t cancelled = k.schedule(50'000'000, [&] { ran.fetch_add(1000); });
  k.cancel(cancelled);
  auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
  while (ran.load() < 200 && std::chrono::steady_clock::now() < deadline)
    std::this_thread::yield();
  CHECK(ran.load() == 200);
  k.shutdown();
  CHECK(ran.load() == 200);
}
