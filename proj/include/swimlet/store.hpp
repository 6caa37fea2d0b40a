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

#ifndef SWIMLET_STORE_HPP
#define SWIMLET_STORE_HPP

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#if defined(__unix__) || defined(__APPLE__)
#include <unistd.h>
#endif

#include "swimlet/bytes.hpp"
#include "swimlet/crdt.hpp"
#include "swimlet/value.hpp"

// Local durability: one segmented append-only log per instance. Writes
// are fast and sequential; compaction is lazy, rewriting the state as a
// snapshot segment once the op tail outgrows it. Recovery replays the
// newest complete snapshot plus the op tail, truncating a torn final
// record. The log is strictly write-behind: an op reaches the log only
// after it has been offered to every uplink, so persistence never delays
// propagation.

namespace swimlet {

// ---------------------------------------------------------------------------
// I/O seam. The real implementation talks to the filesystem; the fault
// implementation keeps everything in memory and can simulate a crash in
// which unsynced bytes (the page cache) are lost mid-write.
// ---------------------------------------------------------------------------

class StorageIo {
 public:
  virtual ~StorageIo() = default;
  virtual bool append(const std::string& path, std::string_view bytes) = 0;
  virtual bool sync(const std::string& path) = 0;
  virtual bool truncate(const std::string& path, size_t size) = 0;
  virtual std::optional<std::string> read(const std::string& path) = 0;
  virtual std::vector<std::string> list(const std::string& dir) = 0;
  virtual bool remove(const std::string& path) = 0;
  virtual bool mkdirs(const std::string& dir) = 0;
};

class FileIo final : public StorageIo {
 public:
  bool append(const std::string& path, std::string_view bytes) override {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    if (!f) return false;
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    return f.good();
  }

  bool sync(const std::string& path) override {
    // ofstream has no fsync; reopen through stdio and flush to disk
    FILE* f = std::fopen(path.c_str(), "ab");
    if (!f) return false;
    bool ok = std::fflush(f) == 0;
#if defined(__unix__) || defined(__APPLE__)
    ok = ok && ::fsync(fileno(f)) == 0;
#endif
    std::fclose(f);
    return ok;
  }

  bool truncate(const std::string& path, size_t size) override {
    std::error_code ec;
    std::filesystem::resize_file(path, size, ec);
    return !ec;
  }

  std::optional<std::string> read(const std::string& path) override {
    std::ifstream f(path, std::ios::binary);
    if (!f) return std::nullopt;
    std::string out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return out;
  }

  std::vector<std::string> list(const std::string& dir) override {
    std::vector<std::string> names;
    std::error_code ec;
    for (const auto& e : std::filesystem::directory_iterator(dir, ec))
      if (e.is_regular_file()) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
  }

  bool remove(const std::string& path) override {
    std::error_code ec;
    return std::filesystem::remove(path, ec);
  }

  bool mkdirs(const std::string& dir) override {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    return std::filesystem::is_directory(dir);
  }
};

// In-memory filesystem with crash semantics: everything written is
// visible to reads, but a crash() keeps only the synced prefix of each
// file plus a random-length fragment of the unsynced tail (a torn
// write), which is what a power cut does to a page cache.
class FaultIo final : public StorageIo {
 public:
  explicit FaultIo(uint64_t seed = 1) : rng_(seed ? seed : 1) {}

  bool append(const std::string& path, std::string_view bytes) override {
    if (fail_writes_) return false;
    File& f = files_[path];
    f.data.append(bytes);
    ++writes_;
    return true;
  }

  bool sync(const std::string& path) override {
    if (fail_writes_) return false;
    auto it = files_.find(path);
    if (it == files_.end()) return true;
    it->second.synced = it->second.data.size();
    ++syncs_;
    return true;
  }

  bool truncate(const std::string& path, size_t size) override {
    if (fail_writes_) return false;
    auto it = files_.find(path);
    if (it == files_.end()) return false;
    File& f = it->second;
    if (size < f.data.size()) f.data.resize(size);
    f.synced = std::min(f.synced, f.data.size());
    return true;
  }

  std::optional<std::string> read(const std::string& path) override {
    auto it = files_.find(path);
    if (it == files_.end()) return std::nullopt;
    return it->second.data;
  }

  std::vector<std::string> list(const std::string& dir) override {
    std::vector<std::string> names;
    std::string prefix = dir;
    if (!prefix.empty() && prefix.back() != '/') prefix += '/';
    for (const auto& [path, f] : files_) {
      if (path.rfind(prefix, 0) == 0) {
        std::string rest = path.substr(prefix.size());
        if (rest.find('/') == std::string::npos) names.push_back(rest);
      }
    }
    std::sort(names.begin(), names.end());
    return names;
  }

  bool remove(const std::string& path) override { return files_.erase(path) > 0; }

  bool mkdirs(const std::string&) override { return true; }

  // Lose the page cache: each file keeps its synced prefix plus a random
  // prefix of whatever was written but not yet synced.
  void crash() {
    for (auto& [path, f] : files_) {
      size_t unsynced = f.data.size() - f.synced;
      size_t kept = unsynced == 0 ? 0 : next_random() % (unsynced + 1);
      f.data.resize(f.synced + kept);
      f.synced = f.data.size();
    }
  }

  void set_fail_writes(bool on) { fail_writes_ = on; }
  uint64_t writes() const { return writes_; }
  uint64_t syncs() const { return syncs_; }

 private:
  struct File {
    std::string data;
    size_t synced = 0;
  };

  uint64_t next_random() {
    rng_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = rng_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::map<std::string, File> files_;
  uint64_t rng_;
  bool fail_writes_ = false;
  uint64_t writes_ = 0;
  uint64_t syncs_ = 0;
};

// ---------------------------------------------------------------------------
// Log records and segments
// ---------------------------------------------------------------------------

enum class LogKind : uint8_t { Op = 1, SnapBegin = 2, SnapEntry = 3, SnapEnd = 4 };

struct LogRecord {
  uint64_t seq = 0;
  LogKind kind = LogKind::Op;
  std::string node;
  std::string lane;
  OpEvent op;       // Op records
  Value snapshot;   // SnapEntry records

  Value to_value() const {
    Value rec = Value::record();
    rec.set("seq", Value::of(static_cast<int64_t>(seq)));
    rec.set("kind", Value::of(static_cast<int64_t>(kind)));
    switch (kind) {
      case LogKind::Op:
        rec.set("node", Value::of(node));
        rec.set("lane", Value::of(lane));
        rec.set("ev", op.to_value());
        break;
      case LogKind::SnapEntry:
        rec.set("node", Value::of(node));
        rec.set("lane", Value::of(lane));
        rec.set("snap", snapshot);
        break;
      case LogKind::SnapBegin:
      case LogKind::SnapEnd:
        break;
    }
    return rec;
  }

  static std::optional<LogRecord> from_value(const Value& v) {
    LogRecord r;
    r.seq = static_cast<uint64_t>(v.get_int("seq"));
    int64_t k = v.get_int("kind");
    if (k < 1 || k > 4) return std::nullopt;
    r.kind = static_cast<LogKind>(k);
    r.node = v.get_text("node");
    r.lane = v.get_text("lane");
    if (r.kind == LogKind::Op) {
      auto ev = OpEvent::from_value(v.get("ev"));
      if (!ev) return std::nullopt;
      r.op = std::move(*ev);
    } else if (r.kind == LogKind::SnapEntry) {
      r.snapshot = v.get("snap");
    }
    return r;
  }
};

inline constexpr char kSegmentMagic[4] = {'S', 'W', 'L', '1'};

enum class FsyncPolicy : uint8_t { PerRecord, Interval, OnRotation };

struct StoreConfig {
  std::string dir;
  FsyncPolicy fsync = FsyncPolicy::Interval;
  size_t segment_bytes = 64ull << 20;
  double compact_ratio = 4.0;     // op tail vs snapshot size
  size_t compact_floor = 64;      // never compact below this many tail ops
  bool salvage = false;           // skip unreadable non-tail segments
};

struct RecoveredState {
  // (node, lane) → rebuilt replica state
  std::map<std::pair<std::string, std::string>, PoLog> lanes;
  uint64_t last_seq = 0;
  bool corrupt = false;           // unreadable interior segment, salvage off
  std::vector<std::string> notes;
};

// ---------------------------------------------------------------------------
// The store proper. One writer at a time (the runtime serializes appends
// through its persistence task); a mutex keeps misuse safe.
// ---------------------------------------------------------------------------

class LogStore {
 public:
  LogStore(StoreConfig cfg, StorageIo& io) : cfg_(std::move(cfg)), io_(io) {
    io_.mkdirs(cfg_.dir);
    scan_segments();
  }

  // Append one op record. Returns false (and flips to degraded) on I/O
  // failure. Fsync per policy; callers get their durable-by-policy ack
  // when this returns.
  bool append_op(const std::string& node, const std::string& lane, const OpEvent& ev) {
    std::lock_guard lk(mu_);
    if (degraded_) return false;
    LogRecord r;
    r.seq = ++seq_;
    r.kind = LogKind::Op;
    r.node = node;
    r.lane = lane;
    r.op = ev;
    if (!write_record(r)) return false;
    ++tail_ops_;
    if (cfg_.fsync == FsyncPolicy::PerRecord) return sync_active();
    dirty_ = true;
    return true;
  }

  // Interval policy: the runtime calls this from a timer; other policies
  // treat it as a no-op unless dirty.
  bool flush() {
    std::lock_guard lk(mu_);
    if (degraded_ || !dirty_) return !degraded_;
    return sync_active();
  }

  // Does the op tail justify rewriting the snapshot?
  bool wants_compaction() const {
    std::lock_guard lk(mu_);
    if (tail_ops_ < cfg_.compact_floor) return false;
    size_t snap = last_snapshot_entries_ ? last_snapshot_entries_ : 1;
    return static_cast<double>(tail_ops_) / static_cast<double>(snap) > cfg_.compact_ratio;
  }

  // Write a full snapshot (one entry per lane) into a fresh segment and
  // drop the older segments. On any failure the old segments remain and
  // recovery is unaffected.
  bool compact(const std::vector<std::tuple<std::string, std::string, Value>>& lane_snapshots) {
    std::lock_guard lk(mu_);
    if (degraded_) return false;
    std::vector<std::string> old_segments = segments_;
    if (!rotate()) return false;

    LogRecord begin;
    begin.seq = ++seq_;
    begin.kind = LogKind::SnapBegin;
    if (!write_record(begin)) return false;
    for (const auto& [node, lane, snap] : lane_snapshots) {
      LogRecord e;
      e.seq = ++seq_;
      e.kind = LogKind::SnapEntry;
      e.node = node;
      e.lane = lane;
      e.snapshot = snap;
      if (!write_record(e)) return false;
    }
    LogRecord end;
    end.seq = ++seq_;
    end.kind = LogKind::SnapEnd;
    if (!write_record(end)) return false;
    if (!sync_active()) return false;  // snapshot durable before anything is deleted

    for (const std::string& s : old_segments) io_.remove(path_of(s));
    segments_.erase(segments_.begin(), segments_.end() - 1);
    tail_ops_ = 0;
    last_snapshot_entries_ = lane_snapshots.size();
    return true;
  }

  // Read every segment, pick the newest complete snapshot, replay the op
  // tail through fresh replicas.
  RecoveredState recover() {
    std::lock_guard lk(mu_);
    RecoveredState out;
    std::vector<LogRecord> records;
    for (size_t i = 0; i < segments_.size(); ++i) {
      bool tail_segment = i + 1 == segments_.size();
      if (!read_segment(segments_[i], tail_segment, records, out)) break;
    }

    // locate the last complete snapshot
    std::optional<size_t> snap_begin, snap_end;
    for (size_t i = records.size(); i-- > 0;) {
      if (records[i].kind == LogKind::SnapEnd && !snap_end) snap_end = i;
      if (records[i].kind == LogKind::SnapBegin && snap_end) {
        snap_begin = i;
        break;
      }
    }

    size_t replay_from = 0;
    if (snap_begin && snap_end && *snap_begin < *snap_end) {
      for (size_t i = *snap_begin + 1; i < *snap_end; ++i) {
        const LogRecord& r = records[i];
        if (r.kind != LogKind::SnapEntry) continue;
        auto snap = PoLog::Snapshot::from_value(r.snapshot);
        if (!snap) {
          out.notes.push_back("unreadable snapshot entry for " + r.node + "#" + r.lane);
          continue;
        }
        out.lanes.emplace(std::make_pair(r.node, r.lane), PoLog::from_snapshot(*snap));
      }
      replay_from = *snap_end + 1;
    }

    for (size_t i = replay_from; i < records.size(); ++i) {
      const LogRecord& r = records[i];
      if (r.kind != LogKind::Op) continue;
      auto key = std::make_pair(r.node, r.lane);
      auto it = out.lanes.find(key);
      if (it == out.lanes.end()) {
        LaneDataKind kind =
            r.op.op.is_map_op() ? LaneDataKind::Map : LaneDataKind::Value;
        it = out.lanes.emplace(key, PoLog(kind)).first;
      }
      it->second.deliver(r.op.tag, r.op.op);
    }
    if (!records.empty()) out.last_seq = records.back().seq;
    return out;
  }

  bool degraded() const {
    std::lock_guard lk(mu_);
    return degraded_;
  }
  uint64_t last_seq() const {
    std::lock_guard lk(mu_);
    return seq_;
  }
  size_t segment_count() const {
    std::lock_guard lk(mu_);
    return segments_.size();
  }
  void set_on_alert(std::function<void(const std::string&)> fn) { on_alert_ = std::move(fn); }

  // Rotation boundary fsync for the OnRotation policy happens inside
  // rotate(); expose rotation for tests.
  bool rotate_now() {
    std::lock_guard lk(mu_);
    return rotate();
  }

 private:
  std::string path_of(const std::string& name) const { return cfg_.dir + "/" + name; }

  static std::string segment_name(uint64_t n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "seg-%012llu.swl", static_cast<unsigned long long>(n));
    return buf;
  }

  void scan_segments() {
    segments_.clear();
    for (const std::string& name : io_.list(cfg_.dir))
      if (name.rfind("seg-", 0) == 0 && name.size() > 8 && name.substr(name.size() - 4) == ".swl")
        segments_.push_back(name);
    std::sort(segments_.begin(), segments_.end());
    if (!segments_.empty()) {
      segment_counter_ = std::strtoull(segments_.back().c_str() + 4, nullptr, 10);
      // continue after the highest valid seq present
      RecoveredState probe;
      std::vector<LogRecord> records;
      size_t tail_valid = 0;
      bool reached_tail = false;
      for (size_t i = 0; i < segments_.size(); ++i) {
        bool is_tail = i + 1 == segments_.size();
        if (!read_segment(segments_[i], is_tail, records, probe, is_tail ? &tail_valid : nullptr))
          break;
        reached_tail = is_tail;
      }
      seq_ = records.empty() ? 0 : records.back().seq;
      if (reached_tail) {
        // only the crashed active segment can carry torn bytes; cut them
        // off now so later scans see clean interior segments
        std::string tail_path = path_of(segments_.back());
        if (tail_valid < 4) {
          io_.remove(tail_path);
          segments_.pop_back();
        } else if (auto data = io_.read(tail_path); data && data->size() > tail_valid) {
          io_.truncate(tail_path, tail_valid);
        }
      }
      size_t run = 0;
      for (const LogRecord& r : records) {
        if (r.kind == LogKind::Op) ++tail_ops_;
        if (r.kind == LogKind::SnapBegin) run = 0;
        if (r.kind == LogKind::SnapEntry) ++run;
        if (r.kind == LogKind::SnapEnd) {
          tail_ops_ = 0;
          last_snapshot_entries_ = run;
        }
      }
    }
    // A recovered segment may end in torn bytes from a crash, so appends
    // always start a fresh segment; readers truncate the torn tail.
    open_fresh_segment();
  }

  bool open_fresh_segment() {
    std::string name = segment_name(++segment_counter_);
    while (std::find(segments_.begin(), segments_.end(), name) != segments_.end())
      name = segment_name(++segment_counter_);
    if (!io_.append(path_of(name), std::string_view(kSegmentMagic, 4))) return fail("open");
    segments_.push_back(name);
    active_size_ = 4;
    return true;
  }

  bool rotate() {
    if (!segments_.empty()) {
      if (!sync_active()) return false;  // rotation always seals the old segment
    }
    return open_fresh_segment();
  }

  bool write_record(const LogRecord& r) {
    std::string payload = r.to_value().encode();
    std::string framed;
    framed.reserve(8 + payload.size());
    put_u32_be(framed, static_cast<uint32_t>(payload.size()));
    put_u32_be(framed, crc32(payload));
    framed.append(payload);
    if (!io_.append(path_of(segments_.back()), framed)) return fail("append");
    active_size_ += framed.size();
    if (active_size_ >= cfg_.segment_bytes) {
      if (!rotate()) return false;
    }
    return true;
  }

  bool sync_active() {
    if (!io_.sync(path_of(segments_.back()))) return fail("fsync");
    dirty_ = false;
    return true;
  }

  bool fail(const std::string& what) {
    degraded_ = true;
    if (on_alert_) on_alert_("storage " + what + " failed; instance degraded");
    return false;
  }

  // Parse one segment. Returns false to stop the scan (corruption in an
  // interior segment with salvage off). valid_len, when asked for, gets
  // the byte length of the parseable prefix.
  bool read_segment(const std::string& name, bool tail_segment, std::vector<LogRecord>& out,
                    RecoveredState& state, size_t* valid_len = nullptr) {
    size_t good = 0;
    auto finish = [&](bool keep_scanning) {
      if (valid_len) *valid_len = good;
      return keep_scanning;
    };
    auto data = io_.read(path_of(name));
    if (!data || data->size() < 4 ||
        std::string_view(*data).substr(0, 4) != std::string_view(kSegmentMagic, 4)) {
      if (tail_segment) {
        state.notes.push_back("torn segment header: " + name);
        return finish(true);
      }
      state.notes.push_back("unreadable segment: " + name);
      if (cfg_.salvage) return finish(true);
      state.corrupt = true;
      return finish(false);
    }
    good = 4;
    std::string_view rest = std::string_view(*data).substr(4);
    while (!rest.empty()) {
      if (rest.size() < 8) return finish(torn(name, tail_segment, state));
      ByteReader head(rest);
      uint32_t len = head.u32_be();
      uint32_t crc = head.u32_be();
      if (rest.size() < 8 + static_cast<size_t>(len))
        return finish(torn(name, tail_segment, state));
      std::string_view payload = rest.substr(8, len);
      if (crc32(payload) != crc) return finish(torn(name, tail_segment, state));
      auto v = Value::decode(payload);
      if (!v.ok() || v.consumed != payload.size())
        return finish(torn(name, tail_segment, state));
      auto rec = LogRecord::from_value(v.value);
      if (!rec) return finish(torn(name, tail_segment, state));
      out.push_back(std::move(*rec));
      good += 8 + len;
      rest = rest.substr(8 + len);
    }
    return finish(true);
  }

  bool torn(const std::string& name, bool tail_segment, RecoveredState& state) {
    if (tail_segment) {
      state.notes.push_back("torn tail truncated: " + name);
      return true;  // nothing after the tail anyway
    }
    state.notes.push_back("corrupt record inside " + name);
    if (cfg_.salvage) return true;  // skip the rest of this segment
    state.corrupt = true;
    return false;
  }

  const StoreConfig cfg_;
  StorageIo& io_;
  mutable std::mutex mu_;
  std::vector<std::string> segments_;
  uint64_t segment_counter_ = 0;
  uint64_t seq_ = 0;
  size_t active_size_ = 0;
  size_t tail_ops_ = 0;
  size_t last_snapshot_entries_ = 0;
  bool dirty_ = false;
  bool degraded_ = false;
  std::function<void(const std::string&)> on_alert_;
};

}  // namespace swimlet

#endif  // SWIMLET_STORE_HPP
