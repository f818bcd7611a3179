#pragma once

#include "iterthink/layers.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <sstream>
#include <vector>

namespace iterthink {

enum class Variant { DT, DTR, DTL };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::DT: return "DT";
    case Variant::DTR: return "DTR";
    case Variant::DTL: return "DTL";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "DT" || s == "dt") return Variant::DT;
  if (s == "DTR" || s == "dtr") return Variant::DTR;
  if (s == "DTL" || s == "dtl") return Variant::DTL;
  throw ConfigError("unknown variant '" + s + "' (expected DT|DTR|DTL)");
}

// Architecture description. Kernel size is 3 throughout; input is a single
// bit channel and the output has two logit channels.
struct ModelSpec {
  Variant variant = Variant::DTL;
  int width = 32;
  Activation activation = Activation::elu;
  bool use_batchnorm = true;
  bool final_bias = true;
  bool recall_bias = true;
  double epsilon = 1e-3;

  static constexpr int kernel_size = 3;
  static constexpr int input_channels = 1;
  static constexpr int output_channels = 2;

  int mid_channels() const { return std::max(2, width / 2); }

  // Each variant as its source paper configures it: DT/DTR with ReLU and no
  // normalization or biases, DTL with ELU, batch norm and the bias terms.
  static ModelSpec paper_defaults(Variant v, int width) {
    ModelSpec s;
    s.variant = v;
    s.width = width;
    if (v == Variant::DTL) {
      s.activation = Activation::elu;
      s.use_batchnorm = true;
      s.final_bias = true;
      s.recall_bias = true;
    } else {
      s.activation = Activation::relu;
      s.use_batchnorm = false;
      s.final_bias = false;
      s.recall_bias = false;
    }
    return s;
  }
};

enum class Phase { train, eval };

enum class ParamKind {
  conv_kernel_unconstrained,
  conv_kernel_constrained,
  bias,
  bn_weight,
  bn_bias,
  gamma_raw,
};

template <typename S>
struct ParamRef {
  std::string name;
  Tensor<S>* tensor;
  ParamKind kind;
};

// The iteration state phi^(m).
template <typename S>
struct Scratchpad {
  Tensor<S> phi;
  int iteration = 0;
};

struct DivergenceInfo {
  int iteration = 0;
  double last_norm = 0.0;
};

struct Trajectory {
  std::vector<double> norms;       // ||phi(m)||, m = 0..M
  std::vector<double> step_diffs;  // ||phi(m) - phi(m-1)||, m = 1..M
};

template <typename S>
struct RunResult {
  Tensor<S> logits;  // undefined when the run diverged
  Trajectory trajectory;
  std::optional<DivergenceInfo> divergence;
};

struct StateEntry {
  std::string name;
  std::vector<Eigen::Index> dims;
  std::vector<double> data;
};
using StateDict = std::vector<StateEntry>;

// DT / DTR / DTL network over [B,1,L] bit inputs. The recurrent block is one
// merge stage plus a three-convolution residual sub-block, every convolution
// followed by the configured activation; DTL constrains all phi-path kernels
// and combines the residual with a per-channel interpolation.
template <typename S>
class Model {
 public:
  Model() = default;

  Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
    if (spec.width < 2) throw ConfigError("model: width must be >= 2");
    if (spec.variant == Variant::DTL) check_activation_admissible(spec.activation, true);
    Rng rng(mix_seed(seed, 0x6d6f64656cull));
    const int w = spec.width;
    const int k = ModelSpec::kernel_size;
    const S eps = static_cast<S>(spec.epsilon);
    const bool dtl = spec.variant == Variant::DTL;

    if (spec.use_batchnorm) f_bn_in_.emplace("f.bn_in", 1);
    f_conv_ = ConvLayer<S>("f.conv", 1, w, k, /*bias=*/!spec.use_batchnorm,
                           /*constrained=*/false, eps, rng);
    if (spec.use_batchnorm) f_bn_out_.emplace("f.bn_out", w);

    switch (spec.variant) {
      case Variant::DT:
        g_merge_ = ConvLayer<S>("g.merge", w, w, k, false, false, eps, rng);
        break;
      case Variant::DTR:
        g_merge_ = ConvLayer<S>("g.merge", w + 1, w, k, false, false, eps, rng);
        break;
      case Variant::DTL:
        g_merge_ = ConvLayer<S>("g.merge", w, w, k, false, true, eps, rng);
        g_recall_.emplace("g.recall", 1, w, k, spec.recall_bias, false, eps, rng);
        break;
    }
    for (int i = 0; i < 3; ++i)
      g_block_[i] = ConvLayer<S>("g.block" + std::to_string(i + 1), w, w, k, false, dtl, eps, rng);
    if (dtl) g_combiner_.emplace("g.combine", w);

    const int mid = spec.mid_channels();
    h_conv1_ = ConvLayer<S>("h.conv1", w, w, k, false, false, eps, rng);
    if (spec.use_batchnorm) h_bn1_.emplace("h.bn1", w);
    h_conv2_ = ConvLayer<S>("h.conv2", w, mid, k, false, false, eps, rng);
    if (spec.use_batchnorm) h_bn2_.emplace("h.bn2", mid);
    h_conv3_ = ConvLayer<S>("h.conv3", mid, 2, k, spec.final_bias, false, eps, rng);
  }

  const ModelSpec& spec() const { return spec_; }
  int width() const { return spec_.width; }

  // phi(0) = F(x)
  Scratchpad<S> forward_init(const Tensor<S>& x, Phase phase) {
    detail::expect_3d(x.shape(), "forward_init");
    if (x.dim(1) != 1)
      throw ShapeError("forward_init: input must have 1 channel, got C=" + std::to_string(x.dim(1)));
    Tensor<S> t = x;
    const bool train = phase == Phase::train;
    if (f_bn_in_) t = f_bn_in_->forward(t, train);
    t = f_conv_.forward(t);
    t = act(t);
    if (f_bn_out_) t = f_bn_out_->forward(t, train);
    return Scratchpad<S>{t, 0};
  }

  // phi(m+1) = G(phi(m), x)
  Scratchpad<S> step(const Scratchpad<S>& s, const Tensor<S>& x, Phase phase) {
    Tensor<S> recall;
    if (spec_.variant == Variant::DTL) recall = g_recall_->forward(x);
    return step_with_recall(s, x, recall, phase);
  }

  // Same map with the DTL recall term precomputed; run() hoists it out of the
  // loop since x does not change between iterations.
  Scratchpad<S> step_with_recall(const Scratchpad<S>& s, const Tensor<S>& x,
                                 const Tensor<S>& recall, Phase) {
    if (s.phi.dim(2) != x.dim(2) && spec_.variant != Variant::DT)
      throw ShapeError("step: scratchpad length " + std::to_string(s.phi.dim(2)) +
                       " does not match input length " + std::to_string(x.dim(2)));
    Tensor<S> z;
    switch (spec_.variant) {
      case Variant::DT:
        z = g_merge_.forward(s.phi);
        break;
      case Variant::DTR:
        z = g_merge_.forward(concat_channels(s.phi, x));
        break;
      case Variant::DTL:
        z = add(g_merge_.forward(s.phi), recall);
        break;
    }
    z = act(z);
    Tensor<S> b = z;
    for (auto& conv : g_block_) b = act(conv.forward(b));
    Tensor<S> out = g_combiner_ ? g_combiner_->combine(z, b) : add(z, b);
    return Scratchpad<S>{out, s.iteration + 1};
  }

  // y = H(phi(M))
  Tensor<S> readout(const Scratchpad<S>& s, Phase phase) {
    const bool train = phase == Phase::train;
    Tensor<S> t = act(h_conv1_.forward(s.phi));
    if (h_bn1_) t = h_bn1_->forward(t, train);
    t = act(h_conv2_.forward(t));
    if (h_bn2_) t = h_bn2_->forward(t, train);
    return h_conv3_.forward(t);
  }

  // Full iteration loop. Numeric overflow is reported, not thrown, so f32
  // replication runs can log the failure pattern.
  RunResult<S> run(const Tensor<S>& x, int M, Phase phase, bool record = false) {
    if (M < 1) throw ConfigError("run: M must be >= 1");
    RunResult<S> r;
    Scratchpad<S> s = forward_init(x, phase);
    Tensor<S> recall;
    if (spec_.variant == Variant::DTL) recall = g_recall_->forward(x);
    if (record) r.trajectory.norms.push_back(static_cast<double>(l2_norm(s.phi)));
    if (!all_finite(s.phi)) {
      r.divergence = DivergenceInfo{0, static_cast<double>(l2_norm(s.phi))};
      return r;
    }
    for (int m = 1; m <= M; ++m) {
      Scratchpad<S> next = step_with_recall(s, x, recall, phase);
      if (record) {
        r.trajectory.norms.push_back(static_cast<double>(l2_norm(next.phi)));
        r.trajectory.step_diffs.push_back(static_cast<double>(l2_distance(next.phi, s.phi)));
      }
      s = next;
      if (!all_finite(s.phi)) {
        r.divergence = DivergenceInfo{m, static_cast<double>(l2_norm(s.phi))};
        return r;
      }
    }
    r.logits = readout(s, phase);
    if (!all_finite(r.logits)) {
      r.divergence = DivergenceInfo{M, static_cast<double>(l2_norm(r.logits))};
      r.logits = Tensor<S>{};
    }
    return r;
  }

  Tensor<S> act(const Tensor<S>& t) { return apply_activation(spec_.activation, t); }

  // ---- parameter access -----------------------------------------------------

  std::vector<ParamRef<S>> parameters() {
    std::vector<ParamRef<S>> out;
    auto add_conv = [&out](ConvLayer<S>& c) {
      out.push_back({c.name() + ".kernel", &c.kernel(),
                     c.constrained() ? ParamKind::conv_kernel_constrained
                                     : ParamKind::conv_kernel_unconstrained});
      if (c.has_bias()) out.push_back({c.name() + ".bias", &c.bias(), ParamKind::bias});
    };
    auto add_bn = [&out](std::optional<BatchNorm1d<S>>& bn) {
      if (!bn) return;
      out.push_back({bn->name() + ".weight", &bn->weight(), ParamKind::bn_weight});
      out.push_back({bn->name() + ".bias", &bn->bias(), ParamKind::bn_bias});
    };
    add_bn(f_bn_in_);
    add_conv(f_conv_);
    add_bn(f_bn_out_);
    add_conv(g_merge_);
    if (g_recall_) add_conv(*g_recall_);
    for (auto& c : g_block_) add_conv(c);
    if (g_combiner_)
      out.push_back({"g.combine.gamma_raw", &g_combiner_->gamma_raw(), ParamKind::gamma_raw});
    add_conv(h_conv1_);
    add_bn(h_bn1_);
    add_conv(h_conv2_);
    add_bn(h_bn2_);
    add_conv(h_conv3_);
    return out;
  }

  // Convolution layers of the recurrent function G, merge first.
  std::vector<ConvLayer<S>*> g_conv_layers() {
    std::vector<ConvLayer<S>*> out{&g_merge_};
    if (g_recall_) out.push_back(&*g_recall_);
    for (auto& c : g_block_) out.push_back(&c);
    return out;
  }

  std::vector<ConvLayer<S>*> all_conv_layers() {
    std::vector<ConvLayer<S>*> out{&f_conv_, &g_merge_};
    if (g_recall_) out.push_back(&*g_recall_);
    for (auto& c : g_block_) out.push_back(&c);
    out.push_back(&h_conv1_);
    out.push_back(&h_conv2_);
    out.push_back(&h_conv3_);
    return out;
  }

  std::vector<ConvLayer<S>*> constrained_layers() {
    std::vector<ConvLayer<S>*> out;
    for (auto* c : all_conv_layers())
      if (c->constrained()) out.push_back(c);
    return out;
  }

  std::vector<BatchNorm1d<S>*> batchnorms() {
    std::vector<BatchNorm1d<S>*> out;
    for (auto* bn : {&f_bn_in_, &f_bn_out_, &h_bn1_, &h_bn2_})
      if (*bn) out.push_back(&**bn);
    return out;
  }

  ConvLayer<S>& g_merge() { return g_merge_; }
  std::optional<ConvLayer<S>>& g_recall() { return g_recall_; }
  std::array<ConvLayer<S>, 3>& g_block() { return g_block_; }
  std::optional<ResidualCombiner<S>>& g_combiner() { return g_combiner_; }
  ConvLayer<S>& f_conv() { return f_conv_; }

  // After any optimizer mutation of parameter values.
  void invalidate_caches() {
    ++param_version_;
    for (auto* c : all_conv_layers()) c->bump_version();
  }

  std::uint64_t param_version() const { return param_version_; }
  void set_param_version(std::uint64_t v) { param_version_ = v; }

  // Reconverges every constrained layer's spectral estimate and materializes
  // the normalized-weight caches; the model is then read-only shareable for
  // evaluation and analysis.
  void prepare_eval(int max_iters = 100, S tol = S(1e-10)) {
    for (auto* c : constrained_layers()) {
      c->reconverge(max_iters, tol);
      c->normalized_kernel();
    }
  }

  // ---- state ------------------------------------------------------------------

  StateDict state_dict() {
    StateDict sd;
    auto put_tensor = [&sd](const std::string& name, const Tensor<S>& t) {
      StateEntry e;
      e.name = name;
      e.dims.assign(t.shape().begin(), t.shape().end());
      e.data.resize(static_cast<std::size_t>(t.numel()));
      for (Eigen::Index i = 0; i < t.numel(); ++i) e.data[i] = static_cast<double>(t.values()[i]);
      sd.push_back(std::move(e));
    };
    auto put_array = [&sd](const std::string& name, const Eigen::Array<S, Eigen::Dynamic, 1>& a) {
      StateEntry e;
      e.name = name;
      e.dims = {a.size()};
      e.data.resize(static_cast<std::size_t>(a.size()));
      for (Eigen::Index i = 0; i < a.size(); ++i) e.data[i] = static_cast<double>(a[i]);
      sd.push_back(std::move(e));
    };
    for (auto& p : parameters()) put_tensor(p.name, *p.tensor);
    for (auto* bn : batchnorms()) {
      put_array(bn->name() + ".running_mean", bn->running_mean());
      put_array(bn->name() + ".running_var", bn->running_var());
    }
    for (auto* c : constrained_layers()) put_array(c->name() + ".power_u", c->power_u().array());
    return sd;
  }

  void load_state_dict(const StateDict& sd) {
    std::size_t used = 0;
    auto find = [&sd, &used](const std::string& name) -> const StateEntry& {
      for (const auto& e : sd)
        if (e.name == name) {
          ++used;
          return e;
        }
      throw ConfigError("state dict: missing entry '" + name + "'");
    };
    auto get_tensor = [&find](const std::string& name, Tensor<S>& t) {
      const auto& e = find(name);
      if (static_cast<Eigen::Index>(e.data.size()) != t.numel())
        throw ConfigError("state dict: entry '" + name + "' has wrong size");
      for (Eigen::Index i = 0; i < t.numel(); ++i) t.values()[i] = static_cast<S>(e.data[i]);
    };
    auto get_array = [&find](const std::string& name, Eigen::Array<S, Eigen::Dynamic, 1>& a) {
      const auto& e = find(name);
      if (static_cast<Eigen::Index>(e.data.size()) != a.size())
        throw ConfigError("state dict: entry '" + name + "' has wrong size");
      for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = static_cast<S>(e.data[i]);
    };
    for (auto& p : parameters()) get_tensor(p.name, *p.tensor);
    for (auto* bn : batchnorms()) {
      get_array(bn->name() + ".running_mean", bn->running_mean());
      get_array(bn->name() + ".running_var", bn->running_var());
    }
    for (auto* c : constrained_layers()) {
      const auto& e = find(c->name() + ".power_u");
      if (static_cast<Eigen::Index>(e.data.size()) != c->power_u().size())
        throw ConfigError("state dict: entry '" + c->name() + ".power_u' has wrong size");
      for (Eigen::Index i = 0; i < c->power_u().size(); ++i)
        c->power_u()[i] = static_cast<S>(e.data[i]);
    }
    if (used != sd.size()) throw ConfigError("state dict: unused entries present");
    invalidate_caches();
  }

  // Text form of the wiring, stored in checkpoints so results are
  // self-describing.
  std::string topology_description() const {
    std::ostringstream os;
    const int w = spec_.width;
    const char* a = activation_name(spec_.activation);
    const bool bn = spec_.use_batchnorm;
    os << variant_name(spec_.variant) << " w=" << w << " k=3; ";
    os << "F: " << (bn ? "bn(1) -> " : "") << "conv(1->" << w << (bn ? "" : ",bias") << ") -> "
       << a << (bn ? " -> bn" : "") << "; ";
    os << "G: ";
    switch (spec_.variant) {
      case Variant::DT: os << "conv(" << w << "->" << w << ")"; break;
      case Variant::DTR: os << "conv(concat[phi,x]:" << w + 1 << "->" << w << ")"; break;
      case Variant::DTL:
        os << "snconv(" << w << "->" << w << ") + conv(x:1->" << w
           << (spec_.recall_bias ? ",bias" : "") << ")";
        break;
    }
    const char* c = spec_.variant == Variant::DTL ? "snconv" : "conv";
    os << " -> " << a << " -> [" << c << " -> " << a << "] x3 -> "
       << (spec_.variant == Variant::DTL ? "interp(gamma)" : "add") << "; ";
    os << "H: conv(" << w << "->" << w << ") -> " << a << (bn ? " -> bn" : "") << " -> conv("
       << w << "->" << spec_.mid_channels() << ") -> " << a << (bn ? " -> bn" : "") << " -> conv("
       << spec_.mid_channels() << "->2" << (spec_.final_bias ? ",bias" : "") << ")";
    return os.str();
  }

 private:
  ModelSpec spec_;
  std::uint64_t param_version_ = 0;
  std::optional<BatchNorm1d<S>> f_bn_in_;
  ConvLayer<S> f_conv_;
  std::optional<BatchNorm1d<S>> f_bn_out_;
  ConvLayer<S> g_merge_;
  std::optional<ConvLayer<S>> g_recall_;
  std::array<ConvLayer<S>, 3> g_block_;
  std::optional<ResidualCombiner<S>> g_combiner_;
  ConvLayer<S> h_conv1_;
  std::optional<BatchNorm1d<S>> h_bn1_;
  ConvLayer<S> h_conv2_;
  std::optional<BatchNorm1d<S>> h_bn2_;
  ConvLayer<S> h_conv3_;
};

template <typename S>
Model<S> build_model(const ModelSpec& spec, std::uint64_t seed) {
  return Model<S>(spec, seed);
}

// Argmax over the two logit channels; exact ties resolve to bit 0.
template <typename S>
std::vector<std::uint8_t> predict_bits(const Tensor<S>& logits) {
  detail::expect_3d(logits.shape(), "predict_bits");
  const Eigen::Index B = logits.dim(0), L = logits.dim(2);
  if (logits.dim(1) != 2)
    throw ShapeError("predict_bits: expected 2 channels, got " + std::to_string(logits.dim(1)));
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(B * L));
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index l = 0; l < L; ++l) {
      const S l0 = logits.values()[(b * 2 + 0) * L + l];
      const S l1 = logits.values()[(b * 2 + 1) * L + l];
      bits[b * L + l] = l1 > l0 ? 1 : 0;
    }
  return bits;
}

}  // namespace iterthink
