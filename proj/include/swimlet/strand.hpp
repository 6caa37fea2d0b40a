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

#ifndef SWIMLET_STRAND_HPP
#define SWIMLET_STRAND_HPP

#include <deque>
#include <functional>
#include <mutex>

#include "swimlet/kernel.hpp"

namespace swimlet {

// Serial executor: tasks posted here run one at a time, in order, on the
// underlying kernel. Control-plane state (routing, link registries, peer
// tables) is owned by a strand so it needs no further locking, while the
// kernel stays free to run agents in parallel.
class Strand {
 public:
  explicit Strand(Kernel& kernel) : kernel_(kernel) {}

  void post(std::function<void()> fn) {
    bool launch = false;
    {
      std::lock_guard lk(mu_);
      queue_.push_back(std::move(fn));
      if (!draining_) {
        draining_ = true;
        launch = true;
      }
    }
    if (launch) kernel_.post([this] { drain(); });
  }

  Kernel& kernel() { return kernel_; }

 private:
  void drain() {
    for (;;) {
      std::function<void()> fn;
      {
        std::lock_guard lk(mu_);
        if (queue_.empty()) {
          draining_ = false;
          return;
        }
        fn = std::move(queue_.front());
        queue_.pop_front();
      }
      fn();
    }
  }

  Kernel& kernel_;
  std::mutex mu_;
  std::deque<std::function<void()>> queue_;
  bool draining_ = false;
};

}  // namespace swimlet

#endif  // SWIMLET_STRAND_HPP
