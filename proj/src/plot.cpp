#include "pideq/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace pideq::plot {

namespace {

constexpr std::array<const char*, 8> kPalette{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                              "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) {
      lo = 0.0;
      hi = 1.0;
    } else if (hi - lo <= 0.0) {
      const double pad = lo == 0.0 ? 1.0 : std::abs(lo) * 0.1;
      lo -= pad;
      hi += pad;
    }
  }
};

double nice_step(double span, int ticks) {
  const double raw = span / ticks;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double f = raw / mag;
  return (f <= 1.0 ? 1.0 : f <= 2.0 ? 2.0 : f <= 5.0 ? 5.0 : 10.0) * mag;
}

// Widens the range to multiples of a round step and returns the tick count.
int round_range(Range& r, int ticks) {
  const double step = nice_step(r.hi - r.lo, ticks);
  r.lo = std::floor(r.lo / step + 1e-9) * step;
  r.hi = std::ceil(r.hi / step - 1e-9) * step;
  return std::max(1, static_cast<int>(std::lround((r.hi - r.lo) / step)));
}

}  // namespace

void write_svg(std::ostream& os, const Figure& fig) {
  for (const auto& s : fig.series) {
    if (s.y.size() != s.x.size()) throw std::invalid_argument("series '" + s.label + "' has mismatched x and y");
    if (s.lower.size() != s.upper.size() || (!s.lower.empty() && s.lower.size() != s.x.size())) {
      throw std::invalid_argument("series '" + s.label + "' has a mismatched band");
    }
  }
  auto ty = [&](double v) { return fig.log_y ? (v > 0.0 ? std::log10(v) : std::nan("")) : v; };

  Range xr, yr;
  for (const auto& s : fig.series) {
    for (double v : s.x) xr.add(v);
    for (double v : s.y) yr.add(ty(v));
    for (double v : s.lower) yr.add(ty(v));
    for (double v : s.upper) yr.add(ty(v));
  }
  xr.finish();
  yr.finish();
  constexpr int kTicks = 5;
  const int x_ticks = round_range(xr, kTicks);
  int y_ticks = kTicks;
  if (!fig.log_y) y_ticks = round_range(yr, kTicks);
  if (fig.log_y) {
    yr.lo = std::floor(yr.lo);
    yr.hi = std::ceil(yr.hi);
    if (yr.hi <= yr.lo) yr.hi = yr.lo + 1.0;
  }

  const double left = 70, right = 160, top = 40, bottom = 50;
  const double pw = fig.width - left - right;
  const double ph = fig.height - top - bottom;
  auto px = [&](double x) { return left + (x - xr.lo) / (xr.hi - xr.lo) * pw; };
  auto py = [&](double y) { return top + ph - (y - yr.lo) / (yr.hi - yr.lo) * ph; };

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fig.width << "\" height=\"" << fig.height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << num(left + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
     << escape(fig.title) << "</text>\n";
  os << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(pw) << "\" height=\"" << num(ph)
     << "\" fill=\"none\" stroke=\"black\"/>\n";

  for (int i = 0; i <= x_ticks; ++i) {
    double xv = xr.lo + (xr.hi - xr.lo) * i / x_ticks;
    if (std::abs(xv) < 1e-9 * (xr.hi - xr.lo)) xv = 0.0;
    os << "<line x1=\"" << num(px(xv)) << "\" y1=\"" << num(top + ph) << "\" x2=\"" << num(px(xv)) << "\" y2=\""
       << num(top + ph + 5) << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << num(px(xv)) << "\" y=\"" << num(top + ph + 18) << "\" text-anchor=\"middle\">"
       << tick_label(xv) << "</text>\n";
  }
  if (fig.log_y) y_ticks = static_cast<int>(yr.hi - yr.lo);
  for (int i = 0; i <= y_ticks; ++i) {
    double yv = yr.lo + (yr.hi - yr.lo) * i / y_ticks;
    if (std::abs(yv) < 1e-9 * (yr.hi - yr.lo)) yv = 0.0;
    const std::string label = fig.log_y ? "1e" + tick_label(yv) : tick_label(yv);
    os << "<line x1=\"" << num(left - 5) << "\" y1=\"" << num(py(yv)) << "\" x2=\"" << num(left + pw) << "\" y2=\""
       << num(py(yv)) << "\" stroke=\"#dddddd\"/>\n";
    os << "<text x=\"" << num(left - 8) << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">" << label
       << "</text>\n";
  }
  os << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(fig.height - 10.0) << "\" text-anchor=\"middle\">"
     << escape(fig.x_label) << "</text>\n";
  os << "<text transform=\"translate(16," << num(top + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(fig.y_label) << "</text>\n";

  for (std::size_t k = 0; k < fig.series.size(); ++k) {
    const auto& s = fig.series[k];
    const char* color = kPalette[k % kPalette.size()];
    if (!s.lower.empty()) {
      std::string pts;
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        const double v = ty(s.upper[i]);
        if (std::isfinite(v)) pts += num(px(s.x[i])) + "," + num(py(v)) + " ";
      }
      for (std::size_t i = s.x.size(); i-- > 0;) {
        const double v = ty(s.lower[i]);
        if (std::isfinite(v)) pts += num(px(s.x[i])) + "," + num(py(v)) + " ";
      }
      os << "<polygon points=\"" << pts << "\" fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
    }
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double v = ty(s.y[i]);
      if (std::isfinite(v) && std::isfinite(s.x[i])) pts += num(px(s.x[i])) + "," + num(py(v)) + " ";
    }
    os << "<polyline points=\"" << pts << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\""
       << (s.dashed ? " stroke-dasharray=\"6,4\"" : "") << "/>\n";
    const double ly = top + 12 + 18.0 * static_cast<double>(k);
    os << "<line x1=\"" << num(left + pw + 12) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(left + pw + 36)
       << "\" y2=\"" << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\""
       << (s.dashed ? " stroke-dasharray=\"6,4\"" : "") << "/>\n";
    os << "<text x=\"" << num(left + pw + 42) << "\" y=\"" << num(ly + 4) << "\">" << escape(s.label) << "</text>\n";
  }
  os << "</svg>\n";
}

void write_svg(const std::filesystem::path& path, const Figure& figure) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_svg(out, figure);
}

}  // namespace pideq::plot
