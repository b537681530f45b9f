#include "feddet/svg.hpp"

#include <algorithm>
#include <cstdio>

#include "feddet/io.hpp"

namespace feddet {

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values) {
  const int bar_w = 46, gap = 18, left = 60, top = 40, plot_h = 220, bottom = 70;
  const int n = static_cast<int>(values.size());
  const int width = left + n * (bar_w + gap) + gap + 20;
  const int height = top + plot_h + bottom;
  double vmax = 1e-9;
  for (double v : values) vmax = std::max(vmax, v);

  char buf[512];
  std::string svg;
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\">\n",
                width, height);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%d\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">%s</text>\n",
                left, title.c_str());
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"#333\"/>\n", left,
                top + plot_h, width - 20, top + plot_h);
  svg += buf;

  for (int i = 0; i < n; ++i) {
    const double v = values[static_cast<std::size_t>(i)];
    const int h = static_cast<int>(v / vmax * plot_h);
    const int x = left + gap + i * (bar_w + gap);
    const int y = top + plot_h - h;
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"#4878a8\"/>\n", x, y,
                  bar_w, h);
    svg += buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"11\" "
                  "text-anchor=\"middle\">%.3f</text>\n",
                  x + bar_w / 2, y - 4, v);
    svg += buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"11\" "
                  "text-anchor=\"middle\" transform=\"rotate(30 %d %d)\">%s</text>\n",
                  x + bar_w / 2, top + plot_h + 16, x + bar_w / 2, top + plot_h + 16,
                  labels[static_cast<std::size_t>(i)].c_str());
    svg += buf;
  }
  svg += "</svg>\n";
  return svg;
}

void write_bar_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::string>& labels, const std::vector<double>& values) {
  atomic_write_text(path, bar_chart_svg(title, labels, values));
}

}  // namespace feddet
