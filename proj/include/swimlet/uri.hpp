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

#ifndef SWIMLET_URI_HPP
#define SWIMLET_URI_HPP

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

// Host-independent agent addresses. A node URI is an ordered list of
// non-empty path segments ("/vehicle/1234"); it never names the instance
// the agent currently lives on. Lane names are plain non-empty strings.

namespace swimlet {

class NodeUri {
 public:
  NodeUri() = default;

  static std::optional<NodeUri> parse(std::string_view s) {
    if (s.empty() || s[0] != '/') return std::nullopt;
    NodeUri uri;
    size_t i = 1;
    while (i <= s.size()) {
      size_t j = s.find('/', i);
      if (j == std::string_view::npos) j = s.size();
      if (j == i) return std::nullopt;  // empty segment
      uri.segments_.emplace_back(s.substr(i, j - i));
      i = j + 1;
    }
    if (uri.segments_.empty()) return std::nullopt;
    return uri;
  }

  static NodeUri of(std::string_view s) {
    auto u = parse(s);
    if (!u) throw std::invalid_argument("bad node uri: " + std::string(s));
    return *u;
  }

  const std::vector<std::string>& segments() const { return segments_; }
  size_t size() const { return segments_.size(); }
  bool empty() const { return segments_.empty(); }

  std::string str() const {
    std::string out;
    for (const auto& seg : segments_) {
      out += '/';
      out += seg;
    }
    return out;
  }

  bool operator==(const NodeUri& o) const { return segments_ == o.segments_; }
  bool operator!=(const NodeUri& o) const { return segments_ != o.segments_; }
  bool operator<(const NodeUri& o) const { return segments_ < o.segments_; }

 private:
  std::vector<std::string> segments_;
};

inline bool valid_lane_uri(std::string_view s) {
  return !s.empty() && s.find('/') == std::string_view::npos;
}

// Registration pattern with at most one ":name" wildcard segment, e.g.
// "/vehicle/:id". A literal pattern (no wildcard) matches exactly one node.
class NodePattern {
 public:
  static std::optional<NodePattern> parse(std::string_view s) {
    auto uri = NodeUri::parse(s);
    if (!uri) return std::nullopt;
    NodePattern p;
    p.segments_ = uri->segments();
    int wildcards = 0;
    for (size_t i = 0; i < p.segments_.size(); ++i) {
      if (p.segments_[i][0] == ':') {
        if (p.segments_[i].size() < 2) return std::nullopt;
        ++wildcards;
        p.wildcard_ = static_cast<int>(i);
      }
    }
    if (wildcards > 1) return std::nullopt;
    return p;
  }

  static NodePattern of(std::string_view s) {
    auto p = parse(s);
    if (!p) throw std::invalid_argument("bad node pattern: " + std::string(s));
    return *p;
  }

  bool matches(const NodeUri& node) const {
    if (node.size() != segments_.size()) return false;
    for (size_t i = 0; i < segments_.size(); ++i) {
      if (static_cast<int>(i) == wildcard_) continue;
      if (node.segments()[i] != segments_[i]) return false;
    }
    return true;
  }

  std::string str() const {
    std::string out;
    for (const auto& seg : segments_) {
      out += '/';
      out += seg;
    }
    return out;
  }

  bool operator==(const NodePattern& o) const { return segments_ == o.segments_; }

 private:
  std::vector<std::string> segments_;
  int wildcard_ = -1;
};

}  // namespace swimlet

#endif  // SWIMLET_URI_HPP
