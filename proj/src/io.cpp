#include "feddet/io.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace feddet {

namespace fs = std::filesystem;

namespace {

void write_then_rename(const fs::path& path, const char* data, std::size_t size) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(data, static_cast<std::streamsize>(size));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

void atomic_write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  write_then_rename(path, reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

void atomic_write_text(const fs::path& path, const std::string& text) {
  write_then_rename(path, text.data(), text.size());
}

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

std::string read_file_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string to_hex(const std::vector<std::uint8_t>& bytes) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (std::uint8_t b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 0xf]);
  }
  return s;
}

std::vector<std::uint8_t> from_hex(const std::string& hex) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw std::runtime_error("invalid hex digit");
  };
  if (hex.size() % 2 != 0) throw std::runtime_error("odd-length hex string");
  std::vector<std::uint8_t> bytes(hex.size() / 2);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
  }
  return bytes;
}

std::string format_detections(const DetectionFile& dets) {
  std::string out = "# image_id class_id x1 y1 x2 y2 confidence model_id\n";
  char line[256];
  for (const auto& [image_id, boxes] : dets) {
    for (const BBox& b : boxes) {
      std::snprintf(line, sizeof(line), "%s %d %.12g %.12g %.12g %.12g %.12g %d\n",
                    image_id.c_str(), b.class_id, b.x1, b.y1, b.x2, b.y2, b.confidence,
                    b.model_id);
      out += line;
    }
  }
  return out;
}

DetectionFile parse_detections(const std::string& text) {
  DetectionFile dets;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string image_id;
    BBox b;
    if (!(ls >> image_id >> b.class_id >> b.x1 >> b.y1 >> b.x2 >> b.y2 >> b.confidence >>
          b.model_id)) {
      throw std::runtime_error("bad detection record at line " + std::to_string(lineno));
    }
    dets[image_id].push_back(b);
  }
  return dets;
}

void write_detections(const fs::path& path, const DetectionFile& dets) {
  atomic_write_text(path, format_detections(dets));
}

DetectionFile read_detections(const fs::path& path) {
  return parse_detections(read_file_text(path));
}

DirLock::DirLock(const fs::path& dir) {
  fs::create_directories(dir);
  lock_path_ = dir / ".feddet.lock";
  const int fd = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw std::runtime_error("output directory is locked by another run: " +
                             lock_path_.string());
  }
  ::close(fd);
}

DirLock::~DirLock() {
  std::error_code ec;
  fs::remove(lock_path_, ec);
}

}  // namespace feddet
