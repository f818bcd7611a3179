#include "iterthink/runconfig.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace iterthink {

using nlohmann::json;

std::vector<int> parse_ratio(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ':')) {
    try {
      std::size_t pos = 0;
      const int v = std::stoi(part, &pos);
      if (pos != part.size() || v < 1) throw std::invalid_argument("");
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("milestone_ratio: bad component '" + part + "' in '" + s + "'");
    }
  }
  if (out.size() < 2) throw ConfigError("milestone_ratio: need at least two components");
  return out;
}

namespace {

const std::set<std::string> kKeys = {
    "variant",        "width",
    "activation",     "use_batchnorm",
    "final_bias",     "recall_bias",
    "epsilon",        "precision",
    "epochs",         "batch_size",
    "lr",             "beta1",
    "beta2",          "weight_decay",
    "ipt_alpha",      "warmup_period",
    "milestone_ratio", "milestone_multiplier",
    "m_train",        "train_bits",
    "dataset_size",   "seed"};

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!kKeys.count(key)) throw ConfigError("unknown config key '" + key + "'");

  RunConfig c;
  read_key(j, "variant", c.variant);
  read_key(j, "width", c.width);
  read_key(j, "activation", c.activation);
  read_key(j, "use_batchnorm", c.use_batchnorm);
  read_key(j, "final_bias", c.final_bias);
  read_key(j, "recall_bias", c.recall_bias);
  read_key(j, "epsilon", c.epsilon);
  read_key(j, "precision", c.precision);
  read_key(j, "epochs", c.epochs);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "lr", c.lr);
  read_key(j, "beta1", c.beta1);
  read_key(j, "beta2", c.beta2);
  read_key(j, "weight_decay", c.weight_decay);
  read_key(j, "ipt_alpha", c.ipt_alpha);
  read_key(j, "warmup_period", c.warmup_period);
  read_key(j, "milestone_ratio", c.milestone_ratio);
  read_key(j, "milestone_multiplier", c.milestone_multiplier);
  read_key(j, "m_train", c.m_train);
  read_key(j, "train_bits", c.train_bits);
  read_key(j, "dataset_size", c.dataset_size);
  read_key(j, "seed", c.seed);

  // validation with key-level messages
  variant_from_name(c.variant);
  activation_from_name(c.activation);
  if (c.width < 2) throw ConfigError("config key 'width' must be >= 2");
  if (c.epsilon <= 0) throw ConfigError("config key 'epsilon' must be > 0");
  if (c.precision != "f64" && c.precision != "f32")
    throw ConfigError("config key 'precision' must be f64 or f32");
  if (c.epochs < 1) throw ConfigError("config key 'epochs' must be >= 1");
  if (c.batch_size < 1) throw ConfigError("config key 'batch_size' must be >= 1");
  if (c.ipt_alpha < 0 || c.ipt_alpha > 1)
    throw ConfigError("config key 'ipt_alpha' must be in [0,1]");
  if (c.warmup_period <= 0) throw ConfigError("config key 'warmup_period' must be > 0");
  if (c.m_train < 1) throw ConfigError("config key 'm_train' must be >= 1");
  if (c.train_bits < 1) throw ConfigError("config key 'train_bits' must be >= 1");
  if (c.dataset_size < 5) throw ConfigError("config key 'dataset_size' must be >= 5");
  parse_ratio(c.milestone_ratio);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_to_json(const RunConfig& c) {
  json j;
  j["variant"] = c.variant;
  j["width"] = c.width;
  j["activation"] = c.activation;
  j["use_batchnorm"] = c.use_batchnorm;
  j["final_bias"] = c.final_bias;
  j["recall_bias"] = c.recall_bias;
  j["epsilon"] = c.epsilon;
  j["precision"] = c.precision;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["weight_decay"] = c.weight_decay;
  j["ipt_alpha"] = c.ipt_alpha;
  j["warmup_period"] = c.warmup_period;
  j["milestone_ratio"] = c.milestone_ratio;
  j["milestone_multiplier"] = c.milestone_multiplier;
  j["m_train"] = c.m_train;
  j["train_bits"] = c.train_bits;
  j["dataset_size"] = c.dataset_size;
  j["seed"] = c.seed;
  return j.dump(2) + "\n";
}

ModelSpec to_model_spec(const RunConfig& c) {
  ModelSpec s;
  s.variant = variant_from_name(c.variant);
  s.width = c.width;
  s.activation = activation_from_name(c.activation);
  s.use_batchnorm = c.use_batchnorm;
  s.final_bias = c.final_bias;
  s.recall_bias = c.recall_bias;
  s.epsilon = c.epsilon;
  return s;
}

TrainConfig to_train_config(const RunConfig& c) {
  TrainConfig t;
  t.epochs = c.epochs;
  t.batch_size = static_cast<std::size_t>(c.batch_size);
  t.learning_rate = c.lr;
  t.beta1 = c.beta1;
  t.beta2 = c.beta2;
  t.weight_decay = c.weight_decay;
  t.ipt_alpha = c.ipt_alpha;
  t.warmup_period = c.warmup_period;
  t.milestone_ratio = parse_ratio(c.milestone_ratio);
  t.milestone_multiplier = c.milestone_multiplier;
  t.m_train = c.m_train;
  t.train_bits = c.train_bits;
  t.dataset_size = static_cast<std::size_t>(c.dataset_size);
  t.seed = c.seed;
  return t;
}

}  // namespace iterthink
