#pragma once

// Append-only event log. Each event is one JSON object stored in its own file
// under <dir>/events/, named by a zero-padded sequence number. A file is
// written to a temporary name, fsynced, renamed into place and the directory
// fsynced, so an event is either fully present or absent after a crash.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmtdesk/error.hpp"
#include "nmtdesk/corpus.hpp"

namespace nmtdesk::afeval {

class EventLog {
 public:
  explicit EventLog(std::filesystem::path dir) : dir_(std::move(dir)), events_(dir_ / "events") {
    std::error_code ec;
    std::filesystem::create_directories(events_, ec);
    if (ec) fail(ErrorKind::kIo, "cannot create log directory " + events_.string() + ": " + ec.message());
    next_ = list().size() + 1;
  }

  const std::filesystem::path& dir() const { return dir_; }
  std::uint64_t size() const { return next_ - 1; }

  /// Reads every event in sequence order. Leftover temporary files from an
  /// interrupted append are ignored; a gap in the sequence is a format error.
  std::vector<nlohmann::json> read_all() const {
    std::vector<nlohmann::json> out;
    const std::vector<std::filesystem::path> files = list();
    for (std::size_t i = 0; i < files.size(); ++i) {
      if (files[i].filename().string() != file_name(i + 1)) {
        fail(ErrorKind::kFormat, "event log gap: expected " + file_name(i + 1) + ", found " + files[i].filename().string());
      }
      try {
        out.push_back(nlohmann::json::parse(nmtdesk::read_file(files[i].string())));
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::kFormat, "corrupt event " + files[i].string() + ": " + e.what());
      }
    }
    return out;
  }

  /// Durably stores the event; returns its sequence number. Not thread-safe:
  /// callers serialize appends.
  std::uint64_t append(const nlohmann::ordered_json& event) {
    const std::uint64_t seq = next_;
    const std::filesystem::path final_path = events_ / file_name(seq);
    const std::filesystem::path tmp_path = events_ / (file_name(seq) + ".tmp");
    write_synced(tmp_path, event.dump() + "\n");
    if (std::rename(tmp_path.c_str(), final_path.c_str()) != 0) {
      fail(ErrorKind::kIo, "cannot rename " + tmp_path.string() + ": " + std::strerror(errno));
    }
    sync_directory(events_);
    ++next_;
    return seq;
  }

  static std::string file_name(std::uint64_t seq) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%012llu.json", static_cast<unsigned long long>(seq));
    return buf;
  }

 private:
  std::vector<std::filesystem::path> list() const {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(events_)) {
      if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    return files;
  }

  static void write_synced(const std::filesystem::path& path, const std::string& body) {
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) fail(ErrorKind::kIo, "cannot open " + path.string() + ": " + std::strerror(errno));
    std::size_t done = 0;
    while (done < body.size()) {
      const ssize_t n = ::write(fd, body.data() + done, body.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        const std::string msg = std::strerror(errno);
        ::close(fd);
        fail(ErrorKind::kIo, "cannot write " + path.string() + ": " + msg);
      }
      done += static_cast<std::size_t>(n);
    }
    if (::fsync(fd) != 0) {
      const std::string msg = std::strerror(errno);
      ::close(fd);
      fail(ErrorKind::kIo, "fsync failed for " + path.string() + ": " + msg);
    }
    ::close(fd);
  }

  static void sync_directory(const std::filesystem::path& dir) {
    const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
    if (fd < 0) return;
    ::fsync(fd);
    ::close(fd);
  }

  std::filesystem::path dir_;
  std::filesystem::path events_;
  std::uint64_t next_ = 1;
};

}  // namespace nmtdesk::afeval
