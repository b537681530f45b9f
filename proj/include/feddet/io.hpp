#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "feddet/boxes.hpp"

namespace feddet {

// Writes to a temp file in the same directory, then renames into place so
// readers never observe partial output.
void atomic_write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void atomic_write_text(const std::filesystem::path& path, const std::string& text);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_file_text(const std::filesystem::path& path);

std::string to_hex(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> from_hex(const std::string& hex);

// Line-oriented detection records grouped by image id:
//   image_id class_id x1 y1 x2 y2 confidence model_id
using DetectionFile = std::map<std::string, DetectionSet>;

std::string format_detections(const DetectionFile& dets);
DetectionFile parse_detections(const std::string& text);
void write_detections(const std::filesystem::path& path, const DetectionFile& dets);
DetectionFile read_detections(const std::filesystem::path& path);

// Exclusive-create lock file guarding an output directory. Throws if the
// lock is already held; removes it on destruction.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path lock_path_;
};

}  // namespace feddet
