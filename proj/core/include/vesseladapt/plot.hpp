#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace vesseladapt {

namespace plot {

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::vector<double> yerr;  // optional, same length as y
};

// Minimal deterministic PNG line plot (axes, ticks, error bars, legend).
void write_line_plot(const std::filesystem::path& path,
                     const std::string& title, const std::string& xlabel,
                     const std::string& ylabel,
                     const std::vector<Series>& series, int width = 720,
                     int height = 480);

// 8-bit RGB PNG writer (zlib-compressed, no ancillary chunks, so output
// bytes are a pure function of the pixels).
void write_png(const std::filesystem::path& path, int width, int height,
               const std::vector<unsigned char>& rgb);

}  // namespace plot

}  // namespace vesseladapt
