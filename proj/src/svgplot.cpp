#include "iterthink/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace iterthink {

namespace {

constexpr double kWidth = 860, kHeight = 520;
constexpr double kLeft = 70, kRight = 30, kTop = 40, kBottom = 55;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Round tick spacing to 1/2/5 times a power of ten.
std::vector<double> ticks(double lo, double hi, int target = 6) {
  if (!(hi > lo)) return {lo};
  const double raw = (hi - lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (mag * m >= raw) {
      step = mag * m;
      break;
    }
  std::vector<double> out;
  const double first = std::ceil(lo / step) * step;
  for (double t = first; t <= hi + 0.5 * step; t += step) {
    double v = t;
    if (std::abs(v) < step * 1e-9) v = 0.0;
    out.push_back(v);
  }
  return out;
}

}  // namespace

std::string render_line_chart(const std::vector<PlotSeries>& series, const std::string& x_label,
                              const std::string& y_label, const std::string& title) {
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (!any) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        any = true;
      } else {
        xmin = std::min(xmin, s.x[i]);
        xmax = std::max(xmax, s.x[i]);
        ymin = std::min(ymin, s.y[i]);
        ymax = std::max(ymax, s.y[i]);
      }
    }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  const double pw = kWidth - kLeft - kRight;
  const double ph = kHeight - kTop - kBottom;
  auto sx = [&](double v) { return kLeft + (v - xmin) / (xmax - xmin) * pw; };
  auto sy = [&](double v) { return kTop + ph - (v - ymin) / (ymax - ymin) * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kWidth) << "\" height=\""
      << num(kHeight) << "\" viewBox=\"0 0 " << num(kWidth) << " " << num(kHeight) << "\">\n";
  svg << "<rect width=\"" << num(kWidth) << "\" height=\"" << num(kHeight)
      << "\" fill=\"white\"/>\n";
  if (!title.empty())
    svg << "<text x=\"" << num(kWidth / 2) << "\" y=\"24\" font-family=\"sans-serif\" "
        << "font-size=\"16\" text-anchor=\"middle\">" << xml_escape(title) << "</text>\n";

  // gridlines + tick labels
  for (double t : ticks(xmin, xmax)) {
    const double px = sx(t);
    svg << "<line x1=\"" << num(px) << "\" y1=\"" << num(kTop) << "\" x2=\"" << num(px)
        << "\" y2=\"" << num(kTop + ph) << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg << "<text x=\"" << num(px) << "\" y=\"" << num(kTop + ph + 18)
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" << num(t)
        << "</text>\n";
  }
  for (double t : ticks(ymin, ymax)) {
    const double py = sy(t);
    svg << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(py) << "\" x2=\""
        << num(kLeft + pw) << "\" y2=\"" << num(py)
        << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg << "<text x=\"" << num(kLeft - 8) << "\" y=\"" << num(py + 4)
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << num(t)
        << "</text>\n";
  }
  svg << "<rect x=\"" << num(kLeft) << "\" y=\"" << num(kTop) << "\" width=\"" << num(pw)
      << "\" height=\"" << num(ph) << "\" fill=\"none\" stroke=\"#333333\"/>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % (sizeof kPalette / sizeof kPalette[0])];
    std::ostringstream pts;
    bool open = false;
    auto flush = [&]() {
      if (open)
        svg << "<polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\"" << color
            << "\" stroke-width=\"1.5\"/>\n";
      pts.str("");
      open = false;
    };
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        flush();
        continue;
      }
      if (open) pts << " ";
      pts << num(sx(s.x[i])) << "," << num(sy(s.y[i]));
      open = true;
    }
    flush();
  }

  // legend
  if (series.size() > 1) {
    double ly = kTop + 14;
    for (std::size_t si = 0; si < series.size() && si < 10; ++si) {
      const char* color = kPalette[si % (sizeof kPalette / sizeof kPalette[0])];
      svg << "<line x1=\"" << num(kLeft + pw - 150) << "\" y1=\"" << num(ly - 4) << "\" x2=\""
          << num(kLeft + pw - 128) << "\" y2=\"" << num(ly - 4) << "\" stroke=\"" << color
          << "\" stroke-width=\"2\"/>\n";
      svg << "<text x=\"" << num(kLeft + pw - 122) << "\" y=\"" << num(ly)
          << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(series[si].name)
          << "</text>\n";
      ly += 16;
    }
  }

  svg << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"" << num(kHeight - 14)
      << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">"
      << xml_escape(x_label) << "</text>\n";
  svg << "<text x=\"18\" y=\"" << num(kTop + ph / 2)
      << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" "
      << "transform=\"rotate(-90 18 " << num(kTop + ph / 2) << ")\">" << xml_escape(y_label)
      << "</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

void write_line_chart(const std::string& path, const std::vector<PlotSeries>& series,
                      const std::string& x_label, const std::string& y_label,
                      const std::string& title) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << render_line_chart(series, x_label, y_label, title);
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

}  // namespace iterthink
