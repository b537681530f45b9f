#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace feddet {

// Minimal grouped-bar SVG: one bar per label, values annotated. Enough for
// report plots without pulling in a plotting dependency.
std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values);

void write_bar_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::string>& labels, const std::vector<double>& values);

}  // namespace feddet
