#pragma once

#include <string>
#include <vector>

namespace iterthink {

// Minimal CSV handling for the fixed-schema metrics and sweep files. Values
// are formatted with %.10g so files are deterministic for given inputs.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // -1 when absent
};

std::string format_cell(double v);

void write_csv(const std::string& path, const CsvTable& table);
CsvTable read_csv(const std::string& path);

}  // namespace iterthink
