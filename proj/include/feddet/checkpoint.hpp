#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "feddet/detector.hpp"

namespace feddet {

// Binary checkpoint: magic, architecture descriptor (JSON), then
// (name, shape, raw float64 data) per parameter. Round trips are
// byte-identical; loading validates the architecture.
std::vector<std::uint8_t> serialize_model(const DetectorModel& model);
DetectorModel deserialize_model(const std::vector<std::uint8_t>& bytes);

void save_model(const std::filesystem::path& path, const DetectorModel& model);
DetectorModel load_model(const std::filesystem::path& path);

std::string config_to_json(const DetectorConfig& cfg);
DetectorConfig config_from_json(const std::string& text);

}  // namespace feddet
