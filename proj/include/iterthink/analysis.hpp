#pragma once

#include "iterthink/model.hpp"
#include "iterthink/training.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace iterthink {

// ---- spectral audit -----------------------------------------------------------

struct SpectralEntry {
  std::string layer;
  double norm = 0.0;  // exact reshaped spectral norm, post-normalization if constrained
  bool constrained = false;
};

struct SpectralAudit {
  std::string variant;
  int width = 0;
  std::vector<SpectralEntry> entries;  // one per convolution in G
};

template <typename S>
SpectralAudit audit_spectral_norms(Model<S>& model) {
  model.prepare_eval();
  SpectralAudit audit;
  audit.variant = variant_name(model.spec().variant);
  audit.width = model.spec().width;
  for (auto* c : model.g_conv_layers()) {
    SpectralEntry e;
    e.layer = c->name();
    e.constrained = c->constrained();
    Tensor<S> kernel = c->constrained() ? c->normalized_kernel() : c->kernel();
    e.norm = static_cast<double>(exact_spectral_norm<S>(reshape_conv_weights(kernel)));
    audit.entries.push_back(std::move(e));
  }
  return audit;
}

// ---- Lipschitz certificate ------------------------------------------------------

// One element of a sequential composition; residual stages recurse into the
// block they wrap. The calculus mirrors the usual composition rules: linear
// stages multiply by their operator-norm bound, activations by their global
// Lipschitz constant, constant offsets contribute nothing, an additive
// residual wraps its block as 1 + K_block, an interpolated residual as
// max_c((1-gamma_c) + gamma_c * K_block), and eval-mode batch norm acts as a
// per-channel linear map with gain max_c |w_c| / sqrt(var_c + eps).
struct CertStage {
  enum class Kind { linear, activation, batchnorm, offset, residual_additive, residual_interp };
  Kind kind = Kind::linear;
  std::string label;
  double norm = 1.0;                 // linear / activation / batchnorm gain
  std::vector<double> gammas;        // residual_interp
  std::vector<CertStage> inner;      // residual blocks

  static CertStage linear(std::string label, double norm) {
    return {Kind::linear, std::move(label), norm, {}, {}};
  }
  static CertStage activation(Activation a) {
    return {Kind::activation, std::string("activation:") + activation_name(a),
            activation_lipschitz(a), {}, {}};
  }
  static CertStage batchnorm(std::string label, const std::vector<double>& weight,
                             const std::vector<double>& var, double eps) {
    double gain = 0.0;
    for (std::size_t c = 0; c < weight.size(); ++c)
      gain = std::max(gain, std::abs(weight[c]) / std::sqrt(var[c] + eps));
    return {Kind::batchnorm, std::move(label), gain, {}, {}};
  }
  static CertStage offset(std::string label) {
    return {Kind::offset, std::move(label), 1.0, {}, {}};
  }
  static CertStage residual_additive(std::string label, std::vector<CertStage> block) {
    return {Kind::residual_additive, std::move(label), 0.0, {}, std::move(block)};
  }
  static CertStage residual_interp(std::string label, std::vector<double> gammas,
                                   std::vector<CertStage> block) {
    return {Kind::residual_interp, std::move(label), 0.0, std::move(gammas), std::move(block)};
  }
};

struct CertTraceEntry {
  std::string rule;   // which composition rule applied
  std::string label;
  double value = 1.0; // this stage's factor in the product
};

struct LipschitzCertificate {
  double K = 0.0;
  std::vector<CertTraceEntry> stages;
};

inline double stage_bound(const CertStage& s, std::vector<CertTraceEntry>* trace);

inline double compose_bound(const std::vector<CertStage>& stages,
                            std::vector<CertTraceEntry>* trace) {
  double k = 1.0;
  for (const auto& s : stages) k *= stage_bound(s, trace);
  return k;
}

inline double stage_bound(const CertStage& s, std::vector<CertTraceEntry>* trace) {
  using Kind = CertStage::Kind;
  double v = 1.0;
  const char* rule = "";
  switch (s.kind) {
    case Kind::linear:
      v = s.norm;
      rule = "linear:spectral-norm";
      break;
    case Kind::activation:
      v = s.norm;
      rule = "activation:lipschitz-constant";
      break;
    case Kind::batchnorm:
      v = s.norm;
      rule = "batchnorm:eval-affine-gain";
      break;
    case Kind::offset:
      v = 1.0;
      rule = "offset:constant-ignored";
      break;
    case Kind::residual_additive: {
      const double kb = compose_bound(s.inner, nullptr);
      v = 1.0 + kb;
      rule = "residual:add(1+K_block)";
      break;
    }
    case Kind::residual_interp: {
      const double kb = compose_bound(s.inner, nullptr);
      v = 0.0;
      for (double g : s.gammas) v = std::max(v, (1.0 - g) + g * kb);
      rule = "residual:interp(max_c (1-g)+g*K_block)";
      break;
    }
  }
  if (trace) trace->push_back({rule, s.label, v});
  return v;
}

inline LipschitzCertificate certify_stages(const std::vector<CertStage>& stages) {
  LipschitzCertificate cert;
  cert.K = compose_bound(stages, &cert.stages);
  return cert;
}

namespace detail {

// Exact reshaped norm of the map the layer applies at evaluation time.
template <typename S>
double layer_eval_norm(ConvLayer<S>& c) {
  Tensor<S> kernel = c.constrained() ? c.normalized_kernel() : c.kernel();
  return static_cast<double>(exact_spectral_norm<S>(reshape_conv_weights(kernel)));
}

// For the DTR merge conv the recall channel is constant across iterations, so
// the stage norm is taken over the phi-channel columns only.
template <typename S>
double merge_phi_slice_norm(ConvLayer<S>& c, int width) {
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> m = reshape_conv_weights(c.kernel());
  const Eigen::Index k = c.kernel_size();
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> slice = m.leftCols(width * k);
  return static_cast<double>(exact_spectral_norm<S>(slice));
}

}  // namespace detail

// Composes a bound for phi -> G(phi, x), treating every x-derived term as a
// constant offset. Requires converged normalization (prepare_eval).
template <typename S>
LipschitzCertificate certify_lipschitz(Model<S>& model) {
  model.prepare_eval();
  const auto& spec = model.spec();
  std::vector<CertStage> stages;

  switch (spec.variant) {
    case Variant::DT:
      stages.push_back(CertStage::linear("g.merge", detail::layer_eval_norm(model.g_merge())));
      break;
    case Variant::DTR:
      stages.push_back(CertStage::linear(
          "g.merge[phi-slice]", detail::merge_phi_slice_norm(model.g_merge(), spec.width)));
      stages.push_back(CertStage::offset("g.merge[x-slice]"));
      break;
    case Variant::DTL:
      stages.push_back(CertStage::linear("g.merge", detail::layer_eval_norm(model.g_merge())));
      stages.push_back(CertStage::offset("g.recall(x)+bias"));
      break;
  }
  stages.push_back(CertStage::activation(spec.activation));

  std::vector<CertStage> block;
  for (auto& c : model.g_block()) {
    block.push_back(CertStage::linear(c.name(), detail::layer_eval_norm(c)));
    block.push_back(CertStage::activation(spec.activation));
  }
  if (model.g_combiner()) {
    const auto g = model.g_combiner()->gamma();
    std::vector<double> gammas(g.data(), g.data() + g.size());
    stages.push_back(CertStage::residual_interp("g.combine", std::move(gammas), std::move(block)));
  } else {
    stages.push_back(CertStage::residual_additive("g.residual", std::move(block)));
  }
  return certify_stages(stages);
}

// ---- empirical contraction ------------------------------------------------------

// Max ||step(a)-step(b)|| / ||a-b|| over sampled pairs: half isotropic
// Gaussian states, half pairs drawn from `anchor_states` when provided.
template <typename S, typename StepFn>
double max_difference_ratio(StepFn&& step, const Shape& state_shape, int pair_count,
                            std::uint64_t seed, const std::vector<Tensor<S>>& anchor_states = {}) {
  if (pair_count < 1) throw ConfigError("max_difference_ratio: pair_count must be >= 1");
  Rng rng(mix_seed(seed, 0x636f6e74ull));
  auto gaussian_state = [&]() {
    typename Tensor<S>::Array a(numel_of(state_shape));
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = static_cast<S>(rng.normal());
    return Tensor<S>(state_shape, std::move(a));
  };
  double max_ratio = 0.0;
  for (int i = 0; i < pair_count; ++i) {
    Tensor<S> a, b;
    if (i % 2 == 0 || anchor_states.size() < 2) {
      a = gaussian_state();
      b = gaussian_state();
    } else {
      const auto n = static_cast<std::int64_t>(anchor_states.size());
      const auto ia = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
      auto ib = ia;
      while (ib == ia) ib = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
      a = anchor_states[ia];
      b = anchor_states[ib];
    }
    const double d0 = static_cast<double>(l2_distance(a, b));
    if (d0 == 0.0) continue;
    const double d1 = static_cast<double>(l2_distance(step(a), step(b)));
    max_ratio = std::max(max_ratio, d1 / d0);
  }
  return max_ratio;
}

// Model wrapper: measures phi -> G(phi, x) with trajectory states mixed into
// the sampling (where the interesting dynamics live).
template <typename S>
double verify_contraction(Model<S>& model, const Tensor<S>& x, int pair_count,
                          std::uint64_t seed) {
  model.prepare_eval();
  NoGradGuard ng;
  std::vector<Tensor<S>> traj;
  {
    Scratchpad<S> s = model.forward_init(x, Phase::eval);
    traj.push_back(s.phi);
    for (int m = 0; m < 24; ++m) {
      s = model.step(s, x, Phase::eval);
      traj.push_back(s.phi);
    }
  }
  const Shape state_shape{x.dim(0), model.spec().width, x.dim(2)};
  auto step = [&](const Tensor<S>& phi) {
    return model.step(Scratchpad<S>{phi, 0}, x, Phase::eval).phi;
  };
  return max_difference_ratio<S>(step, state_shape, pair_count, seed, traj);
}

// ---- fixed-point probe -----------------------------------------------------------

struct FixedPointStart {
  int iterations = 0;
  double final_norm = 0.0;
  bool converged = false;
};

struct FixedPointReport {
  std::vector<FixedPointStart> starts;
  std::vector<double> pairwise_distances;  // upper triangle, row-major
  double max_pairwise_distance = 0.0;
  double decay_estimate = 0.0;  // geometric mean of the last 10 step ratios
  bool converged = false;       // all starts hit the tolerance
};

// Iterates phi <- step(phi) from several random starts until
// ||delta|| < tol * (1 + ||phi||) or max_iters. Under a certified K < 1 all
// starts must meet at the unique fixed point.
template <typename S, typename StepFn>
FixedPointReport probe_fixed_point(StepFn&& step, const Shape& state_shape, int start_count,
                                   double tol, int max_iters, std::uint64_t seed) {
  if (tol <= 0) throw ConfigError("fixed_point_probe: tol must be > 0");
  Rng rng(mix_seed(seed, 0x66697870ull));
  FixedPointReport report;
  std::vector<Tensor<S>> finals;
  std::vector<double> last_ratios;
  for (int si = 0; si < start_count; ++si) {
    typename Tensor<S>::Array a(numel_of(state_shape));
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = static_cast<S>(rng.normal());
    Tensor<S> phi(state_shape, std::move(a));
    FixedPointStart fs;
    std::vector<double> diffs;
    for (int it = 0; it < max_iters; ++it) {
      Tensor<S> next = step(phi);
      const double d = static_cast<double>(l2_distance(next, phi));
      phi = next;
      fs.iterations = it + 1;
      diffs.push_back(d);
      if (!all_finite(phi)) break;
      if (d < tol * (1.0 + static_cast<double>(l2_norm(phi)))) {
        fs.converged = true;
        break;
      }
    }
    fs.final_norm = static_cast<double>(l2_norm(phi));
    report.starts.push_back(fs);
    finals.push_back(phi);
    // geometric decay from the last up-to-10 successive ratios of this start
    const std::size_t nratio = diffs.size() >= 2 ? std::min<std::size_t>(10, diffs.size() - 1) : 0;
    for (std::size_t i = diffs.size() - nratio; i < diffs.size(); ++i)
      if (diffs[i - 1] > 0.0) last_ratios.push_back(diffs[i] / diffs[i - 1]);
  }

  report.converged = true;
  for (const auto& fs : report.starts) report.converged = report.converged && fs.converged;
  for (std::size_t i = 0; i < finals.size(); ++i)
    for (std::size_t j = i + 1; j < finals.size(); ++j) {
      const double d = static_cast<double>(l2_distance(finals[i], finals[j]));
      report.pairwise_distances.push_back(d);
      report.max_pairwise_distance = std::max(report.max_pairwise_distance, d);
    }
  if (!last_ratios.empty()) {
    double log_sum = 0.0;
    for (double r : last_ratios) log_sum += std::log(std::max(r, 1e-300));
    report.decay_estimate = std::exp(log_sum / static_cast<double>(last_ratios.size()));
  }
  return report;
}

template <typename S>
FixedPointReport fixed_point_probe(Model<S>& model, const Tensor<S>& x, int start_count,
                                   double tol, int max_iters, std::uint64_t seed) {
  model.prepare_eval();
  NoGradGuard ng;
  const Shape state_shape{x.dim(0), model.spec().width, x.dim(2)};
  auto step = [&](const Tensor<S>& phi) {
    return model.step(Scratchpad<S>{phi, 0}, x, Phase::eval).phi;
  };
  return probe_fixed_point<S>(step, state_shape, start_count, tol, max_iters, seed);
}

// ---- growth trace -----------------------------------------------------------------

// ||phi(m)|| / ||phi(m-1)||; a zero denominator reports +inf.
inline std::vector<double> growth_ratios(const std::vector<double>& norms) {
  std::vector<double> ratios;
  for (std::size_t m = 1; m < norms.size(); ++m)
    ratios.push_back(norms[m - 1] == 0.0 ? std::numeric_limits<double>::infinity()
                                         : norms[m] / norms[m - 1]);
  return ratios;
}

template <typename S>
std::vector<double> growth_trace(Model<S>& model, const Tensor<S>& x, int M) {
  if (M < 2) throw ConfigError("growth_trace: M must be >= 2");
  model.prepare_eval();
  NoGradGuard ng;
  auto r = model.run(x, M, Phase::eval, /*record=*/true);
  return growth_ratios(r.trajectory.norms);
}

// ---- overthinking scan --------------------------------------------------------------

struct OverthinkReport {
  std::vector<std::pair<int, double>> table;  // (M, accuracy)
  double peak_accuracy = 0.0;
  double final_accuracy = 0.0;
  double drop_threshold = 0.05;
  bool flagged = false;  // accuracy at max M fell below peak - threshold
};

inline OverthinkReport overthinking_from_table(std::vector<std::pair<int, double>> table,
                                               double drop_threshold) {
  OverthinkReport r;
  r.table = std::move(table);
  r.drop_threshold = drop_threshold;
  for (const auto& [m, acc] : r.table) r.peak_accuracy = std::max(r.peak_accuracy, acc);
  r.final_accuracy = r.table.empty() ? 0.0 : r.table.back().second;
  r.flagged = r.final_accuracy < r.peak_accuracy - drop_threshold;
  return r;
}

template <typename S>
OverthinkReport overthinking_scan(Model<S>& model, int bits_length, std::size_t count,
                                  const std::vector<int>& m_list, std::uint64_t seed,
                                  double drop_threshold = 0.05) {
  model.prepare_eval();
  return overthinking_from_table(extrapolation_sweep(model, bits_length, count, m_list, seed),
                                 drop_threshold);
}

}  // namespace iterthink
