#pragma once

#include "iterthink/model.hpp"
#include "iterthink/training.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace iterthink {

// Flat experiment configuration, the on-disk contract of the CLI. Parsing is
// strict: unknown keys are rejected, every key has an Appendix-recipe default.
struct RunConfig {
  std::string variant = "DTL";
  int width = 32;
  std::string activation = "elu";
  bool use_batchnorm = true;
  bool final_bias = true;
  bool recall_bias = true;
  double epsilon = 1e-3;
  std::string precision = "f64";
  int epochs = 150;
  int batch_size = 500;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0002;
  double ipt_alpha = 0.5;
  double warmup_period = 3.0;
  std::string milestone_ratio = "8:4:2:1";
  double milestone_multiplier = 0.1;
  int m_train = 30;
  int train_bits = 32;
  int dataset_size = 10000;
  std::uint64_t seed = 1;
};

// Parses "8:4:2:1" into {8,4,2,1}.
std::vector<int> parse_ratio(const std::string& s);

// Strict parse of a JSON document; key-level errors name the offending key.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Canonical serialization (sorted keys, stable formatting); save -> load ->
// save is byte-identical.
std::string run_config_to_json(const RunConfig& cfg);

ModelSpec to_model_spec(const RunConfig& cfg);
TrainConfig to_train_config(const RunConfig& cfg);

}  // namespace iterthink
