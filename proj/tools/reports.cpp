#include "reports.hpp"

#include "iterthink/csvio.hpp"

#include <cmath>
#include <fstream>

namespace iterthink {

using nlohmann::json;

json spectral_to_json(const SpectralAudit& audit) {
  json arr = json::array();
  for (const auto& e : audit.entries)
    arr.push_back({{"layer", e.layer}, {"norm", e.norm}, {"constrained", e.constrained}});
  return arr;
}

json certificate_to_json(const LipschitzCertificate& cert) {
  json stages = json::array();
  for (const auto& s : cert.stages)
    stages.push_back({{"rule", s.rule}, {"label", s.label}, {"value", s.value}});
  return json{{"K", cert.K}, {"stages", stages}};
}

json fixedpoint_to_json(const FixedPointReport& r) {
  json distances = json::array();
  for (double d : r.pairwise_distances) distances.push_back(d);
  return json{{"starts", static_cast<int>(r.starts.size())},
              {"distances", distances},
              {"decay", r.decay_estimate},
              {"converged", r.converged}};
}

json growth_to_json(const std::vector<double>& ratios) {
  json arr = json::array();
  bool overflow = false;
  for (double r : ratios) {
    if (std::isinf(r)) {
      arr.push_back(nullptr);  // JSON has no infinity literal
      overflow = true;
    } else {
      arr.push_back(r);
    }
  }
  return json{{"ratios", arr}, {"overflow", overflow}};
}

json contraction_to_json(double max_ratio, int pairs, double certified_k) {
  return json{{"max_ratio", max_ratio}, {"pairs", pairs}, {"certified_K", certified_k}};
}

json overthink_to_json(const OverthinkReport& r) {
  json table = json::array();
  for (const auto& [m, acc] : r.table) table.push_back({{"M", m}, {"accuracy", acc}});
  return json{{"table", table},
              {"peak_accuracy", r.peak_accuracy},
              {"final_accuracy", r.final_accuracy},
              {"drop_threshold", r.drop_threshold},
              {"flagged", r.flagged}};
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& records) {
  CsvTable t;
  t.header = {"epoch", "train_loss", "val_loss", "val_acc", "lr", "diverged"};
  for (const auto& r : records)
    t.rows.push_back({std::to_string(r.epoch), format_cell(r.train_loss),
                      format_cell(r.val_loss), format_cell(r.val_acc), format_cell(r.lr),
                      r.diverged ? "1" : "0"});
  write_csv(path, t);
}

void write_sweep_csv(const std::string& path, const std::vector<std::pair<int, double>>& sweep,
                     std::size_t count, int bits) {
  CsvTable t;
  t.header = {"M", "accuracy", "count", "bits"};
  for (const auto& [m, acc] : sweep)
    t.rows.push_back({std::to_string(m), format_cell(acc), std::to_string(count),
                      std::to_string(bits)});
  write_csv(path, t);
}

}  // namespace iterthink
