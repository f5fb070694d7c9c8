#pragma once

// Line-delimited JSON objects, each carrying a trailing CRC-32 field over
// its own bytes. Shared by the memory log, the extraction cache and the
// control file.
//
//   {"k":v,...,"crc":"<8 hex>"}\n
//
// The checksum covers every byte of the line before the `"crc"` key,
// including the comma that precedes it.

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "featureloop/core.hpp"

namespace featureloop {

class StorageError : public Error {
 public:
  enum class Kind { StorageUnavailable, CorruptTail, InvalidRecord };
  StorageError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

namespace log_detail {

inline constexpr std::string_view kCrcKey = "\"crc\":\"";

inline std::string crc_hex(std::string_view bytes) {
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
  char buf[9];
  std::snprintf(buf, sizeof(buf), "%08x", crc);
  return buf;
}

inline std::string errno_text(const std::string& what, const std::filesystem::path& p) {
  return what + " " + p.string() + ": " + std::strerror(errno);
}

// Owns a file descriptor.
class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Fd() { reset(); }
  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

}  // namespace log_detail

// `body` is an unterminated JSON object prefix such as `{"a":1,"b":"x"`.
inline std::string seal_line(std::string body) {
  body += ',';
  const std::string crc = log_detail::crc_hex(body);
  body += log_detail::kCrcKey;
  body += crc;
  body += "\"}\n";
  return body;
}

// Returns the parsed object when `line` (without the newline) is a
// well-formed sealed line with a matching checksum.
inline std::optional<nlohmann::json> unseal_line(std::string_view line) {
  const auto pos = line.rfind(log_detail::kCrcKey);
  if (pos == std::string_view::npos || pos == 0 || line[pos - 1] != ',') return std::nullopt;
  const std::string_view tail = line.substr(pos + log_detail::kCrcKey.size());
  if (tail.size() != 10 || tail.substr(8) != "\"}") return std::nullopt;
  if (log_detail::crc_hex(line.substr(0, pos)) != tail.substr(0, 8)) return std::nullopt;
  auto obj = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (obj.is_discarded() || !obj.is_object()) return std::nullopt;
  return obj;
}

inline std::string json_string(std::string_view s) {
  return nlohmann::json(std::string(s)).dump(-1, ' ', false,
                                             nlohmann::json::error_handler_t::replace);
}

inline std::string json_number(double v) { return nlohmann::json(v).dump(); }

// An append-only file of sealed lines with a sidecar lock file
// (`<path>.lock`) serializing writers across threads and processes.
class SealedLog {
 public:
  struct Entry {
    nlohmann::json object;
    std::uint64_t end_offset;  // byte offset just past this line
  };

  struct Scan {
    std::vector<Entry> entries;
    std::uint64_t file_size = 0;
    bool missing = false;
  };

  explicit SealedLog(std::filesystem::path path, bool durable = true)
      : path_(std::move(path)), durable_(durable) {}

  const std::filesystem::path& path() const { return path_; }

  // Reads complete lines from `offset`, stopping at the first line that is
  // unterminated or fails its checksum. Lock-free.
  Scan scan(std::uint64_t offset) const {
    Scan out;
    log_detail::Fd fd(::open(path_.c_str(), O_RDONLY | O_CLOEXEC));
    if (!fd) {
      if (errno == ENOENT) {
        out.missing = true;
        return out;
      }
      throw StorageError(StorageError::Kind::StorageUnavailable,
                         log_detail::errno_text("cannot open", path_));
    }
    struct stat st{};
    if (::fstat(fd.get(), &st) != 0) {
      throw StorageError(StorageError::Kind::StorageUnavailable,
                         log_detail::errno_text("cannot stat", path_));
    }
    out.file_size = static_cast<std::uint64_t>(st.st_size);
    if (out.file_size <= offset) return out;

    std::string buf(out.file_size - offset, '\0');
    std::size_t got = 0;
    while (got < buf.size()) {
      const ssize_t n = ::pread(fd.get(), buf.data() + got, buf.size() - got,
                                static_cast<off_t>(offset + got));
      if (n < 0) {
        if (errno == EINTR) continue;
        throw StorageError(StorageError::Kind::StorageUnavailable,
                           log_detail::errno_text("cannot read", path_));
      }
      if (n == 0) break;
      got += static_cast<std::size_t>(n);
    }
    buf.resize(got);

    std::size_t start = 0;
    while (start < buf.size()) {
      const auto nl = buf.find('\n', start);
      if (nl == std::string::npos) break;
      auto obj = unseal_line(std::string_view(buf).substr(start, nl - start));
      if (!obj) break;
      out.entries.push_back(Entry{std::move(*obj), offset + nl + 1});
      start = nl + 1;
    }
    return out;
  }

  // Runs `fn` while holding the writer lock.
  template <class Fn>
  decltype(auto) with_lock(Fn&& fn) const {
    std::lock_guard guard(mutex_);
    const auto lock_path = path_.string() + ".lock";
    log_detail::Fd fd(::open(lock_path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644));
    if (!fd) {
      throw StorageError(StorageError::Kind::StorageUnavailable,
                         log_detail::errno_text("cannot open lock", lock_path));
    }
    while (::flock(fd.get(), LOCK_EX) != 0) {
      if (errno != EINTR) {
        throw StorageError(StorageError::Kind::StorageUnavailable,
                           log_detail::errno_text("cannot lock", lock_path));
      }
    }
    struct Unlock {
      int fd;
      ~Unlock() { ::flock(fd, LOCK_UN); }
    } unlock{fd.get()};
    return fn();
  }

  // Caller must hold the lock. Writes the line with one append.
  void write_line(std::string_view line) const {
    log_detail::Fd fd(::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644));
    if (!fd) {
      throw StorageError(StorageError::Kind::StorageUnavailable,
                         log_detail::errno_text("cannot open for append", path_));
    }
    std::size_t done = 0;
    while (done < line.size()) {
      const ssize_t n = ::write(fd.get(), line.data() + done, line.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw StorageError(StorageError::Kind::StorageUnavailable,
                           log_detail::errno_text("cannot append to", path_));
      }
      done += static_cast<std::size_t>(n);
    }
    if (durable_) ::fdatasync(fd.get());
  }

  // Caller must hold the lock.
  void truncate(std::uint64_t size) const {
    if (::truncate(path_.c_str(), static_cast<off_t>(size)) != 0) {
      throw StorageError(StorageError::Kind::StorageUnavailable,
                         log_detail::errno_text("cannot truncate", path_));
    }
  }

 private:
  std::filesystem::path path_;
  bool durable_;
  mutable std::mutex mutex_;
};

}  // namespace featureloop
