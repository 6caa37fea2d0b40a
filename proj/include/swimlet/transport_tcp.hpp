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
// TCP flavor of the transport: one reader thread per conduit, blocking
// writes, one acceptor thread per listener, and a single dialer thread
// working a queue so callers never block on connect. Addresses are
// "host:port"; listen also accepts ":port" for all interfaces.

#ifndef SWIMLET_TRANSPORT_TCP_HPP
#define SWIMLET_TRANSPORT_TCP_HPP

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <utility>

#include "swimlet/transport.hpp"

namespace swimlet {

class TcpConduit final : public Conduit {
 public:
  explicit TcpConduit(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    reader_ = std::thread([this] { read_loop(); });
  }

  ~TcpConduit() override {
    shut_down();
    {
      std::lock_guard lk(cb_mu_);
      deliver_ = false;  // the reader must not touch callbacks past here
    }
    begin_cv_.notify_all();
    if (reader_.joinable()) reader_.join();
    ::close(fd_);
  }

  void begin() override {
    {
      std::lock_guard lk(cb_mu_);
      begun_ = true;
    }
    begin_cv_.notify_all();
  }

  bool send(std::string_view bytes) override {
    std::lock_guard lk(write_mu_);
    if (closed_.load(std::memory_order_acquire)) return false;
    size_t off = 0;
    while (off < bytes.size()) {
      ssize_t n = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        shut_down();
        return false;
      }
      off += static_cast<size_t>(n);
    }
    return true;
  }

  void close() override { shut_down(); }

 private:
  void shut_down() {
    if (!closed_.exchange(true)) ::shutdown(fd_, SHUT_RDWR);
  }

  void read_loop() {
    {
      std::unique_lock lk(cb_mu_);
      begin_cv_.wait(lk, [this] { return begun_ || !deliver_; });
      if (!deliver_) return;
    }
    char buf[64 * 1024];
    for (;;) {
      ssize_t n = ::recv(fd_, buf, sizeof(buf), 0);
      if (n > 0) {
        std::lock_guard lk(cb_mu_);
        if (!deliver_) return;
        if (on_bytes) on_bytes(std::string_view(buf, static_cast<size_t>(n)));
        continue;
      }
      if (n < 0 && errno == EINTR) continue;
      break;
    }
    std::lock_guard lk(cb_mu_);
    if (deliver_ && on_closed) on_closed();
  }

  int fd_;
  std::mutex write_mu_;
  std::atomic<bool> closed_{false};

  // guards callback delivery against conduit teardown
  std::mutex cb_mu_;
  std::condition_variable begin_cv_;
  bool begun_ = false;
  bool deliver_ = true;
  std::thread reader_;
};

class TcpTransport final : public Transport {
 public:
  explicit TcpTransport(int64_t dial_timeout_ms = 5'000) : dial_timeout_ms_(dial_timeout_ms) {
    dialer_ = std::thread([this] { dial_loop(); });
  }

  ~TcpTransport() override { shutdown(); }

  void listen(const std::string& address) override {
    std::string host, port;
    if (!split_address(address, host, port)) return;
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return;
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(std::stoi(port)));
    if (host.empty() || host == "0.0.0.0") {
      addr.sin_addr.s_addr = htonl(INADDR_ANY);
    } else if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      return;
    }
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(fd, 64) != 0) {
      ::close(fd);
      return;
    }
    sockaddr_in got{};
    socklen_t glen = sizeof(got);
    if (::getsockname(fd, reinterpret_cast<sockaddr*>(&got), &glen) == 0)
      bound_port_ = ntohs(got.sin_port);
    listen_fd_ = fd;
    listening_.store(true, std::memory_order_release);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  // Nonzero after listen(); reflects the kernel's pick for port 0.
  uint16_t bound_port() const { return bound_port_; }
  bool listening() const { return listening_.load(std::memory_order_acquire); }

  void dial(const std::string& address, std::function<void(ConduitPtr)> on_ok,
            std::function<void(const std::string&)> on_fail) override {
    {
      std::lock_guard lk(mu_);
      if (!stopping_) {
        dials_.push_back(DialJob{address, std::move(on_ok), std::move(on_fail)});
        cv_.notify_one();
        return;
      }
    }
    on_fail("transport shut down");
  }

  void shutdown() override {
    {
      std::lock_guard lk(mu_);
      if (stopping_) return;
      stopping_ = true;
    }
    cv_.notify_all();
    if (listen_fd_ >= 0) {
      ::shutdown(listen_fd_, SHUT_RDWR);
      ::close(listen_fd_);
    }
    if (acceptor_.joinable()) acceptor_.join();
    if (dialer_.joinable()) dialer_.join();
    listening_.store(false, std::memory_order_release);
  }

 private:
  struct DialJob {
    std::string address;
    std::function<void(ConduitPtr)> on_ok;
    std::function<void(const std::string&)> on_fail;
  };

  static bool split_address(const std::string& address, std::string& host, std::string& port) {
    size_t colon = address.rfind(':');
    if (colon == std::string::npos || colon + 1 >= address.size()) return false;
    host = address.substr(0, colon);
    port = address.substr(colon + 1);
    for (char c : port)
      if (c < '0' || c > '9') return false;
    return true;
  }

  void accept_loop() {
    for (;;) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        return;
      }
      {
        std::lock_guard lk(mu_);
        if (stopping_) {
          ::close(fd);
          return;
        }
      }
      if (on_accept)
        on_accept(std::make_unique<TcpConduit>(fd));
      else
        ::close(fd);
    }
  }

  void dial_loop() {
    for (;;) {
      DialJob job;
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [this] { return stopping_ || !dials_.empty(); });
        if (dials_.empty()) return;  // stopping with nothing left
        job = std::move(dials_.front());
        dials_.pop_front();
        if (stopping_) {
          lk.unlock();
          job.on_fail("transport shut down");
          continue;
        }
      }
      std::string reason;
      int fd = connect_with_timeout(job.address, reason);
      if (fd >= 0)
        job.on_ok(std::make_unique<TcpConduit>(fd));
      else
        job.on_fail(reason);
    }
  }

  int connect_with_timeout(const std::string& address, std::string& reason) {
    std::string host, port;
    if (!split_address(address, host, port)) {
      reason = "bad address: " + address;
      return -1;
    }
    if (host.empty()) host = "127.0.0.1";
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res);
    if (rc != 0 || !res) {
      reason = "resolve failed: " + host;
      return -1;
    }
    int fd = -1;
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
      fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_NONBLOCK, ai->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
      if (errno == EINPROGRESS) {
        pollfd pfd{fd, POLLOUT, 0};
        int pr = ::poll(&pfd, 1, static_cast<int>(dial_timeout_ms_));
        int err = 0;
        socklen_t elen = sizeof(err);
        if (pr == 1 && ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &elen) == 0 && err == 0)
          break;
        reason = pr == 0 ? "dial timed out" : std::string("connect failed: ") + strerror(err);
      } else {
        reason = std::string("connect failed: ") + strerror(errno);
      }
      ::close(fd);
      fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd >= 0) {
      // back to blocking mode: writes are intentionally synchronous
      int flags = ::fcntl(fd, F_GETFL, 0);
      ::fcntl(fd, F_SETFL, flags & ~O_NONBLOCK);
      if (reason.empty()) reason.clear();
    } else if (reason.empty()) {
      reason = "connect failed";
    }
    return fd;
  }

  int64_t dial_timeout_ms_;
  int listen_fd_ = -1;
  uint16_t bound_port_ = 0;
  std::atomic<bool> listening_{false};
  std::thread acceptor_;
  std::thread dialer_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<DialJob> dials_;
  bool stopping_ = false;
};

}  // namespace swimlet

#endif  // SWIMLET_TRANSPORT_TCP_HPP
