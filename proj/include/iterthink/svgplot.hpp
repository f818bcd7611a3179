#pragma once

#include <string>
#include <vector>

namespace iterthink {

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
};

// Deterministic SVG line chart: fixed canvas, fixed palette, snprintf-formatted
// coordinates. Identical input yields byte-identical output. Non-finite points
// break the polyline.
std::string render_line_chart(const std::vector<PlotSeries>& series, const std::string& x_label,
                              const std::string& y_label, const std::string& title);

void write_line_chart(const std::string& path, const std::vector<PlotSeries>& series,
                      const std::string& x_label, const std::string& y_label,
                      const std::string& title);

}  // namespace iterthink
