#pragma once

// Minimal SVG line plots.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace pideq::plot {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  /// Optional shaded band; both empty or both the size of x.
  std::vector<double> lower;
  std::vector<double> upper;
  bool dashed = false;
};

struct Figure {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;
  int width = 720;
  int height = 440;
  std::vector<Series> series;
};

/// Throws std::invalid_argument on mismatched series lengths.
void write_svg(std::ostream& os, const Figure& figure);
void write_svg(const std::filesystem::path& path, const Figure& figure);

}  // namespace pideq::plot
