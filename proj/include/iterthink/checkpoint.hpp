#pragma once

#include "iterthink/model.hpp"
#include "iterthink/runconfig.hpp"
#include "iterthink/training.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace iterthink {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Scalar-agnostic checkpoint contents; tensors are stored as 64-bit floats
// (f32 models round-trip exactly since every float is representable).
struct CheckpointData {
  RunConfig config;
  std::string topology;
  std::string precision;  // "f64" | "f32"
  std::int64_t best_epoch = -1;
  std::uint64_t param_version = 0;
  StateDict state;
  std::int64_t adam_t = 0;
  std::vector<std::pair<std::string, std::vector<double>>> adam_m, adam_v;
};

namespace ckpt_detail {

constexpr char kMagic[4] = {'I', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void i64(std::int64_t v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void doubles(const std::vector<double>& d) {
    u64(d.size());
    raw(d.data(), d.size() * sizeof(double));
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size) : data_(data), size_(size) {}
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  std::int64_t i64() { return get<std::int64_t>(); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles() {
    const auto n = u64();
    need(n * sizeof(double));
    std::vector<double> d(n);
    std::memcpy(d.data(), data_ + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return d;
  }
  bool at_end() const { return pos_ == size_; }

 private:
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) {
    if (pos_ + n > size_) throw CheckpointError("checkpoint truncated");
  }
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline void write_checkpoint(const std::string& path, const CheckpointData& d) {
  using ckpt_detail::Writer;
  Writer meta;
  meta.str(d.precision);
  meta.i64(d.best_epoch);
  meta.u64(d.param_version);
  meta.str(d.topology);

  Writer state;
  state.u32(static_cast<std::uint32_t>(d.state.size()));
  for (const auto& e : d.state) {
    state.str(e.name);
    state.u32(static_cast<std::uint32_t>(e.dims.size()));
    for (auto dim : e.dims) state.i64(static_cast<std::int64_t>(dim));
    state.doubles(e.data);
  }

  Writer adam;
  adam.i64(d.adam_t);
  adam.u32(static_cast<std::uint32_t>(d.adam_m.size()));
  for (std::size_t i = 0; i < d.adam_m.size(); ++i) {
    adam.str(d.adam_m[i].first);
    adam.doubles(d.adam_m[i].second);
    adam.doubles(d.adam_v[i].second);
  }

  const std::string config = run_config_to_json(d.config);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  out.write(ckpt_detail::kMagic, 4);
  const std::uint32_t ver = ckpt_detail::kVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof ver);
  auto section = [&out](const std::string& name, const char* data, std::size_t size) {
    const std::uint32_t nl = static_cast<std::uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&nl), sizeof nl);
    out.write(name.data(), nl);
    const std::uint64_t sz = size;
    out.write(reinterpret_cast<const char*>(&sz), sizeof sz);
    out.write(data, static_cast<std::streamsize>(size));
  };
  section("meta", meta.bytes().data(), meta.bytes().size());
  section("config", config.data(), config.size());
  section("state", state.bytes().data(), state.bytes().size());
  section("adam", adam.bytes().data(), adam.bytes().size());
  if (!out) throw CheckpointError("write to '" + path + "' failed");
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), ckpt_detail::kMagic, 4) != 0)
    throw CheckpointError("'" + path + "' is not a checkpoint file");
  std::uint32_t ver;
  std::memcpy(&ver, bytes.data() + 4, 4);
  if (ver != ckpt_detail::kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(ver));

  CheckpointData d;
  std::size_t pos = 8;
  while (pos < bytes.size()) {
    ckpt_detail::Reader head(bytes.data() + pos, bytes.size() - pos);
    const std::string name = head.str();
    const std::uint64_t size = head.u64();
    const std::size_t header = 4 + name.size() + 8;
    if (pos + header + size > bytes.size()) throw CheckpointError("checkpoint truncated");
    ckpt_detail::Reader r(bytes.data() + pos + header, size);
    if (name == "meta") {
      d.precision = r.str();
      d.best_epoch = r.i64();
      d.param_version = r.u64();
      d.topology = r.str();
    } else if (name == "config") {
      d.config = parse_run_config(std::string(bytes.data() + pos + header, size));
    } else if (name == "state") {
      const auto n = r.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        StateEntry e;
        e.name = r.str();
        const auto nd = r.u32();
        for (std::uint32_t k = 0; k < nd; ++k) e.dims.push_back(r.i64());
        e.data = r.doubles();
        d.state.push_back(std::move(e));
      }
    } else if (name == "adam") {
      d.adam_t = r.i64();
      const auto n = r.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        std::string pname = r.str();
        auto m = r.doubles();
        auto v = r.doubles();
        d.adam_m.emplace_back(pname, std::move(m));
        d.adam_v.emplace_back(std::move(pname), std::move(v));
      }
    } else {
      throw CheckpointError("unknown checkpoint section '" + name + "'");
    }
    pos += header + size;
  }
  return d;
}

template <typename S>
CheckpointData make_checkpoint(Model<S>& model, const StateDict& state,
                               const AdamState<S>& adam, const RunConfig& config,
                               std::int64_t best_epoch, std::uint64_t param_version) {
  CheckpointData d;
  d.config = config;
  d.topology = model.topology_description();
  d.precision = std::is_same_v<S, double> ? "f64" : "f32";
  d.best_epoch = best_epoch;
  d.param_version = param_version;
  d.state = state;
  d.adam_t = adam.t;
  auto params = model.parameters();
  if (adam.m.size() != params.size())
    throw CheckpointError("make_checkpoint: optimizer state does not match model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double> m(adam.m[i].size()), v(adam.v[i].size());
    for (Eigen::Index k = 0; k < adam.m[i].size(); ++k) m[k] = static_cast<double>(adam.m[i][k]);
    for (Eigen::Index k = 0; k < adam.v[i].size(); ++k) v[k] = static_cast<double>(adam.v[i][k]);
    d.adam_m.emplace_back(params[i].name, std::move(m));
    d.adam_v.emplace_back(params[i].name, std::move(v));
  }
  return d;
}

// Rebuilds the model and optimizer from checkpoint contents.
template <typename S>
std::pair<Model<S>, AdamState<S>> restore_checkpoint(const CheckpointData& d) {
  Model<S> model(to_model_spec(d.config), d.config.seed);
  model.load_state_dict(d.state);
  auto params = model.parameters();
  AdamState<S> adam = AdamState<S>::init(params);
  adam.t = d.adam_t;
  if (d.adam_m.size() != params.size())
    throw CheckpointError("checkpoint optimizer state does not match model parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (d.adam_m[i].first != params[i].name)
      throw CheckpointError("checkpoint optimizer entry '" + d.adam_m[i].first +
                            "' does not match parameter '" + params[i].name + "'");
    if (static_cast<Eigen::Index>(d.adam_m[i].second.size()) != adam.m[i].size())
      throw CheckpointError("checkpoint optimizer entry '" + d.adam_m[i].first + "' has wrong size");
    for (Eigen::Index k = 0; k < adam.m[i].size(); ++k) {
      adam.m[i][k] = static_cast<S>(d.adam_m[i].second[k]);
      adam.v[i][k] = static_cast<S>(d.adam_v[i].second[k]);
    }
  }
  return {std::move(model), std::move(adam)};
}

}  // namespace iterthink
