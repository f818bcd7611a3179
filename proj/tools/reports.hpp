#pragma once

#include "iterthink/analysis.hpp"
#include "iterthink/training.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace iterthink {

// JSON schemas for the analysis reports; kept in one place so the CLI and the
// golden-schema tests agree.
nlohmann::json spectral_to_json(const SpectralAudit& audit);
nlohmann::json certificate_to_json(const LipschitzCertificate& cert);
nlohmann::json fixedpoint_to_json(const FixedPointReport& report);
nlohmann::json growth_to_json(const std::vector<double>& ratios);
nlohmann::json contraction_to_json(double max_ratio, int pairs, double certified_k);
nlohmann::json overthink_to_json(const OverthinkReport& report);

void write_json_file(const std::string& path, const nlohmann::json& j);

// metrics.csv and sweep.csv writers (exact column contract).
void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& records);
void write_sweep_csv(const std::string& path, const std::vector<std::pair<int, double>>& sweep,
                     std::size_t count, int bits);

}  // namespace iterthink
