#pragma once

// Dataset persistence: records are framed, packed into fixed-budget shards,
// each shard compressed as a single zstd frame and checksummed; a JSON
// manifest indexes the shards. Reading streams records back in exact write
// order, optionally decompressing ahead of the consumer on a background
// thread, or as a seeded two-level shuffle for training epochs.

#include <zlib.h>

#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fuselm/common.hpp"
#include "fuselm/zstd_abi.hpp"

namespace fuselm {

constexpr uint64_t kMinShardTargetBytes = 1ull << 20;  // 1 MiB
constexpr int kShardCompressionLevel = 3;
constexpr int kShardFormatVersion = 1;

struct ShardRecord {
  std::vector<uint8_t> meta;   // one JSON object
  std::vector<uint8_t> audio;  // PCM16 LE mono bytes

  bool operator==(const ShardRecord&) const = default;
};

inline void validate_record(const ShardRecord& r) {
  if (r.audio.size() % 2 != 0)
    fail(ErrorKind::invalid, "record: audio byte length ", r.audio.size(), " is odd (PCM16 expected)");
  nlohmann::json j = nlohmann::json::parse(r.meta.begin(), r.meta.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object())
    fail(ErrorKind::invalid, "record: meta is not a single JSON object");
}

// Framed size of one record inside a shard payload.
inline uint64_t record_framed_bytes(const ShardRecord& r) {
  return 8 + static_cast<uint64_t>(r.meta.size()) + static_cast<uint64_t>(r.audio.size());
}

struct ShardEntry {
  std::string file_name;
  uint64_t record_count = 0;
  uint64_t compressed_bytes = 0;
  uint64_t uncompressed_bytes = 0;
  uint32_t checksum = 0;  // CRC32 of the compressed shard bytes
};

struct ShardManifest {
  int format_version = kShardFormatVersion;
  std::vector<ShardEntry> shards;
  std::string dir;  // runtime only, not serialized

  uint64_t total_records() const {
    uint64_t n = 0;
    for (const auto& s : shards) n += s.record_count;
    return n;
  }
};

namespace detail {

inline void append_u32le(std::vector<uint8_t>& buf, uint32_t v) {
  buf.push_back(static_cast<uint8_t>(v & 0xff));
  buf.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  buf.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  buf.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

inline uint32_t crc32_of(const std::vector<uint8_t>& bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  if (!bytes.empty()) crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<uint32_t>(crc);
}

}  // namespace detail

// Appends records in order, sealing a shard whenever the next record would
// push the uncompressed payload past target_bytes. Desk-scale tests may pass
// allow_small_shards to drop below the 1 MiB floor.
class ShardWriter {
 public:
  ShardWriter(std::string out_dir, uint64_t target_bytes, bool allow_small_shards = false)
      : dir_(std::move(out_dir)), target_(target_bytes) {
    if (target_ < kMinShardTargetBytes && !allow_small_shards)
      fail(ErrorKind::config, "shard target of ", target_, " bytes is below the ", kMinShardTargetBytes,
           "-byte floor (pass the small-shard override for tests)");
    if (target_ == 0) fail(ErrorKind::config, "shard target of zero bytes");
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) fail(ErrorKind::io, "cannot create shard directory '", dir_, "': ", ec.message());
  }

  void add(const ShardRecord& r) {
    validate_record(r);
    uint64_t framed = record_framed_bytes(r);
    if (framed > target_)
      fail(ErrorKind::capacity, "record of ", framed, " framed bytes exceeds the whole shard target of ",
           target_, " bytes");
    if (!payload_.empty() && payload_.size() + framed > target_) seal();
    detail::append_u32le(payload_, static_cast<uint32_t>(r.meta.size()));
    payload_.insert(payload_.end(), r.meta.begin(), r.meta.end());
    detail::append_u32le(payload_, static_cast<uint32_t>(r.audio.size()));
    payload_.insert(payload_.end(), r.audio.begin(), r.audio.end());
    ++pending_records_;
  }

  // Seals any pending shard and writes manifest.json atomically.
  ShardManifest finish() {
    seal();
    manifest_.dir = dir_;
    nlohmann::json j;
    j["format_version"] = manifest_.format_version;
    j["shards"] = nlohmann::json::array();
    for (const auto& s : manifest_.shards)
      j["shards"].push_back({{"file_name", s.file_name},
                             {"record_count", s.record_count},
                             {"compressed_bytes", s.compressed_bytes},
                             {"uncompressed_bytes", s.uncompressed_bytes},
                             {"checksum", s.checksum}});
    auto tmp = std::filesystem::path(dir_) / "manifest.json.tmp";
    auto final_path = std::filesystem::path(dir_) / "manifest.json";
    {
      std::ofstream f(tmp, std::ios::binary);
      if (!f) fail(ErrorKind::io, "cannot write '", tmp.string(), "'");
      f << j.dump(2) << '\n';
    }
    std::error_code ec;
    std::filesystem::rename(tmp, final_path, ec);
    if (ec) fail(ErrorKind::io, "cannot move manifest into place: ", ec.message());
    return manifest_;
  }

 private:
  void seal() {
    if (payload_.empty()) return;
    std::vector<uint8_t> compressed(ZSTD_compressBound(payload_.size()));
    size_t n = ZSTD_compress(compressed.data(), compressed.size(), payload_.data(), payload_.size(),
                             kShardCompressionLevel);
    if (ZSTD_isError(n)) fail(ErrorKind::io, "zstd compression failed: ", ZSTD_getErrorName(n));
    compressed.resize(n);

    ShardEntry entry;
    char name[32];
    std::snprintf(name, sizeof(name), "shard-%06zu.zst", manifest_.shards.size());
    entry.file_name = name;
    entry.record_count = pending_records_;
    entry.compressed_bytes = compressed.size();
    entry.uncompressed_bytes = payload_.size();
    entry.checksum = detail::crc32_of(compressed);

    auto path = std::filesystem::path(dir_) / entry.file_name;
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::io, "cannot open shard '", entry.file_name, "' for writing");
    f.write(reinterpret_cast<const char*>(compressed.data()), static_cast<std::streamsize>(compressed.size()));
    if (!f) fail(ErrorKind::io, "short write to shard '", entry.file_name, "'");
    f.close();

    manifest_.shards.push_back(std::move(entry));
    payload_.clear();
    pending_records_ = 0;
  }

  std::string dir_;
  uint64_t target_;
  std::vector<uint8_t> payload_;
  uint64_t pending_records_ = 0;
  ShardManifest manifest_;
};

inline ShardManifest write_shards(const std::vector<ShardRecord>& records, uint64_t target_bytes,
                                  const std::string& out_dir, bool allow_small_shards = false) {
  ShardWriter w(out_dir, target_bytes, allow_small_shards);
  for (const auto& r : records) w.add(r);
  return w.finish();
}

inline ShardManifest load_manifest(const std::string& dir) {
  auto path = std::filesystem::path(dir) / "manifest.json";
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open '", path.string(), "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "manifest.json: ", e.what());
  }
  ShardManifest m;
  m.dir = dir;
  m.format_version = j.value("format_version", -1);
  if (m.format_version != kShardFormatVersion)
    fail(ErrorKind::format, "manifest format_version ", m.format_version, ", this reader understands ",
         kShardFormatVersion);
  for (const auto& s : j.at("shards")) {
    ShardEntry e;
    e.file_name = s.at("file_name").get<std::string>();
    e.record_count = s.at("record_count").get<uint64_t>();
    e.compressed_bytes = s.at("compressed_bytes").get<uint64_t>();
    e.uncompressed_bytes = s.at("uncompressed_bytes").get<uint64_t>();
    e.checksum = s.at("checksum").get<uint32_t>();
    if (e.record_count < 1)
      fail(ErrorKind::format, "manifest lists shard '", e.file_name, "' with zero records");
    m.shards.push_back(std::move(e));
  }
  return m;
}

// Loads, integrity-checks, and decodes one whole shard.
inline std::vector<ShardRecord> read_shard(const ShardManifest& m, size_t shard_index) {
  const ShardEntry& entry = m.shards.at(shard_index);
  auto path = std::filesystem::path(m.dir) / entry.file_name;
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open shard '", entry.file_name, "'");
  std::vector<uint8_t> compressed((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (compressed.size() != entry.compressed_bytes)
    fail(ErrorKind::corruption, "shard '", entry.file_name, "': ", compressed.size(),
         " bytes on disk, manifest says ", entry.compressed_bytes);
  if (detail::crc32_of(compressed) != entry.checksum)
    fail(ErrorKind::corruption, "shard '", entry.file_name, "': checksum mismatch");

  std::vector<uint8_t> payload(entry.uncompressed_bytes);
  size_t n = ZSTD_decompress(payload.data(), payload.size(),
                             compressed.empty() ? nullptr : compressed.data(), compressed.size());
  if (ZSTD_isError(n) || n != entry.uncompressed_bytes)
    fail(ErrorKind::corruption, "shard '", entry.file_name, "': frame does not decompress to ",
         entry.uncompressed_bytes, " bytes");

  std::vector<ShardRecord> records;
  records.reserve(entry.record_count);
  size_t off = 0;
  auto take_u32 = [&](const char* what) -> uint32_t {
    if (off + 4 > payload.size())
      fail(ErrorKind::corruption, "shard '", entry.file_name, "': truncated ", what);
    uint32_t v = static_cast<uint32_t>(payload[off]) | (static_cast<uint32_t>(payload[off + 1]) << 8) |
                 (static_cast<uint32_t>(payload[off + 2]) << 16) |
                 (static_cast<uint32_t>(payload[off + 3]) << 24);
    off += 4;
    return v;
  };
  auto take_bytes = [&](size_t len, const char* what) {
    if (off + len > payload.size())
      fail(ErrorKind::corruption, "shard '", entry.file_name, "': truncated ", what);
    std::vector<uint8_t> out(payload.begin() + static_cast<long>(off),
                             payload.begin() + static_cast<long>(off + len));
    off += len;
    return out;
  };
  for (uint64_t i = 0; i < entry.record_count; ++i) {
    ShardRecord r;
    r.meta = take_bytes(take_u32("meta length"), "meta");
    r.audio = take_bytes(take_u32("audio length"), "audio");
    records.push_back(std::move(r));
  }
  if (off != payload.size())
    fail(ErrorKind::corruption, "shard '", entry.file_name, "': ", payload.size() - off,
         " trailing bytes after the last record");
  return records;
}

// Streams records shard by shard. With prefetch_depth == 0 shards are loaded
// synchronously on demand; otherwise a background thread keeps up to
// prefetch_depth decompressed shards queued ahead of the consumer. Order,
// multiplicity, and bytes are identical at every depth.
class ShardStream {
 public:
  ShardStream(ShardManifest manifest, int prefetch_depth,
              std::vector<size_t> shard_order = {},
              std::vector<std::vector<size_t>> record_orders = {})
      : manifest_(std::move(manifest)),
        depth_(prefetch_depth),
        shard_order_(std::move(shard_order)),
        record_orders_(std::move(record_orders)) {
    if (depth_ < 0) fail(ErrorKind::config, "prefetch depth must be >= 0, got ", depth_);
    if (shard_order_.empty())
      for (size_t i = 0; i < manifest_.shards.size(); ++i) shard_order_.push_back(i);
    if (depth_ > 0) fetcher_ = std::thread([this] { fetch_loop(); });
  }

  ~ShardStream() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    if (fetcher_.joinable()) fetcher_.join();
  }

  ShardStream(const ShardStream&) = delete;
  ShardStream& operator=(const ShardStream&) = delete;

  // Yields the next record; false at end of stream. Integrity failures in a
  // shard surface here before any record of that shard is yielded.
  bool next(ShardRecord& out) {
    while (cursor_ >= current_.size()) {
      if (!advance_shard()) return false;
    }
    out = std::move(current_[cursor_++]);
    return true;
  }

  std::vector<ShardRecord> drain() {
    std::vector<ShardRecord> all;
    ShardRecord r;
    while (next(r)) all.push_back(std::move(r));
    return all;
  }

 private:
  using Slot = std::variant<std::vector<ShardRecord>, std::exception_ptr>;

  std::vector<ShardRecord> load(size_t position) {
    size_t shard_index = shard_order_[position];
    std::vector<ShardRecord> recs = read_shard(manifest_, shard_index);
    if (position < record_orders_.size() && !record_orders_[position].empty()) {
      const auto& order = record_orders_[position];
      if (order.size() != recs.size())
        fail(ErrorKind::contract, "record order for shard ", shard_index, " lists ", order.size(),
             " entries for ", recs.size(), " records");
      std::vector<ShardRecord> shuffled;
      shuffled.reserve(recs.size());
      for (size_t idx : order) shuffled.push_back(std::move(recs.at(idx)));
      recs = std::move(shuffled);
    }
    return recs;
  }

  bool advance_shard() {
    cursor_ = 0;
    current_.clear();
    if (depth_ == 0) {
      if (next_position_ >= shard_order_.size()) return false;
      current_ = load(next_position_++);
      return true;
    }
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [this] { return !queue_.empty() || done_; });
    if (queue_.empty()) return false;
    Slot slot = std::move(queue_.front());
    queue_.pop_front();
    lk.unlock();
    cv_.notify_all();
    if (std::holds_alternative<std::exception_ptr>(slot))
      std::rethrow_exception(std::get<std::exception_ptr>(slot));
    current_ = std::move(std::get<std::vector<ShardRecord>>(slot));
    return true;
  }

  void fetch_loop() {
    for (size_t pos = 0; pos < shard_order_.size(); ++pos) {
      Slot slot;
      try {
        slot = load(pos);
      } catch (...) {
        slot = std::current_exception();
      }
      bool had_error = std::holds_alternative<std::exception_ptr>(slot);
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [this] { return queue_.size() < static_cast<size_t>(depth_) || stop_; });
        if (stop_) return;
        queue_.push_back(std::move(slot));
      }
      cv_.notify_all();
      if (had_error) break;  // nothing after a failed shard can be trusted in order
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      done_ = true;
    }
    cv_.notify_all();
  }

  ShardManifest manifest_;
  int depth_;
  std::vector<size_t> shard_order_;
  std::vector<std::vector<size_t>> record_orders_;

  std::vector<ShardRecord> current_;
  size_t cursor_ = 0;
  size_t next_position_ = 0;  // depth 0 only

  std::thread fetcher_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Slot> queue_;
  bool done_ = false;
  bool stop_ = false;
};

inline ShardStream stream_records(const ShardManifest& manifest, int prefetch_depth) {
  return ShardStream(manifest, prefetch_depth);
}

namespace detail {

inline std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  for (size_t i = n; i > 1; --i) {
    auto j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i)));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace detail

// One training epoch: deterministic seeded shuffle of shard order and of the
// records within each shard; every record appears exactly once.
inline ShardStream shuffled_epoch(const ShardManifest& manifest, uint64_t seed, int prefetch_depth = 0) {
  Rng shard_rng(derive_seed(seed, 0xE90C11));
  std::vector<size_t> shard_order = detail::shuffled_indices(manifest.shards.size(), shard_rng);
  std::vector<std::vector<size_t>> record_orders;
  record_orders.reserve(shard_order.size());
  for (size_t pos = 0; pos < shard_order.size(); ++pos) {
    size_t shard_index = shard_order[pos];
    Rng rec_rng(derive_seed(seed, 1 + shard_index));
    record_orders.push_back(
        detail::shuffled_indices(manifest.shards[shard_index].record_count, rec_rng));
  }
  return ShardStream(manifest, prefetch_depth, std::move(shard_order), std::move(record_orders));
}

}  // namespace fuselm
