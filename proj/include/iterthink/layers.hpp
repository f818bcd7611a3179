#pragma once

#include "iterthink/ops.hpp"
#include "iterthink/rng.hpp"
#include "iterthink/tensor.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <optional>
#include <string>

namespace iterthink {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---- activations ------------------------------------------------------------

enum class Activation { relu, elu, tanh, gelu };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::elu: return "elu";
    case Activation::tanh: return "tanh";
    case Activation::gelu: return "gelu";
  }
  return "?";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "elu") return Activation::elu;
  if (s == "tanh") return Activation::tanh;
  if (s == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + s + "' (expected relu|elu|tanh|gelu)");
}

// Global Lipschitz constant of the activation. GELU's maximum |gradient| sits
// at x = sqrt(2): Phi(sqrt 2) + sqrt(2) * phi(sqrt 2).
inline double activation_lipschitz(Activation a) {
  if (a == Activation::gelu) {
    const double cdf = 0.5 * (1.0 + std::erf(1.0));
    const double pdf = std::exp(-1.0) / std::sqrt(2.0 * 3.14159265358979323846);
    return cdf + std::sqrt(2.0) * pdf;
  }
  return 1.0;
}

// Rejects activations that would break the contraction construction when used
// inside a norm-constrained recurrent block.
inline void check_activation_admissible(Activation a, bool constrained_context) {
  if (constrained_context && activation_lipschitz(a) > 1.0)
    throw ConfigError(std::string("activation '") + activation_name(a) +
                      "' has Lipschitz constant > 1 and is not admissible inside a "
                      "norm-constrained recurrent block");
}

template <typename S>
Tensor<S> apply_activation(Activation a, const Tensor<S>& t) {
  switch (a) {
    case Activation::relu: return relu(t);
    case Activation::elu: return elu(t);
    case Activation::tanh: return tanh_act(t);
    case Activation::gelu: return gelu(t);
  }
  throw ConfigError("unhandled activation");
}

// ---- spectral-norm machinery ------------------------------------------------

// Flattens [Cout,Cin,k] weights into the [Cout, Cin*k] matrix whose largest
// singular value is the layer's spectral norm. Row c is the (Cin,k) slice of
// output channel c in row-major order, i.e. column index ci*k + t.
template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> reshape_conv_weights(const Tensor<S>& kernel) {
  detail::expect_3d(kernel.shape(), "reshape_conv_weights");
  const Eigen::Index Cout = kernel.dim(0), Cin = kernel.dim(1), k = kernel.dim(2);
  return Eigen::Map<const RowMat<S>>(kernel.values().data(), Cout, Cin * k);
}

template <typename S>
Tensor<S> unreshape_conv_weights(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& m,
                                 Eigen::Index Cin, Eigen::Index k) {
  RowMat<S> rm = m;
  typename Tensor<S>::Array a =
      Eigen::Map<const typename Tensor<S>::Array>(rm.data(), rm.size());
  return Tensor<S>(Shape{m.rows(), Cin, k}, std::move(a));
}

// Largest singular value; the audit/test oracle for the power iteration.
template <typename S>
S exact_spectral_norm(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& m) {
  if (m.size() == 0) return S(0);
  Eigen::BDCSVD<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>> svd(m);
  return svd.singularValues()[0];
}

// One-sided power iteration on M M^T with persistent left vector u.
// Returns sigma_hat = ||M v|| with v = normalize(M^T u); this is a Rayleigh
// lower bound on the true norm up to roundoff. Zero matrices report 0.
template <typename S>
S spectral_norm_power_iteration(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& m,
                                int iters, Eigen::Matrix<S, Eigen::Dynamic, 1>& u) {
  if (iters < 1) throw ConfigError("spectral_norm_power_iteration: iters must be >= 1");
  if (u.size() != m.rows())
    throw ShapeError("power iteration: u has length " + std::to_string(u.size()) +
                     ", matrix has " + std::to_string(m.rows()) + " rows");
  S sigma = 0;
  for (int it = 0; it < iters; ++it) {
    Eigen::Matrix<S, Eigen::Dynamic, 1> v = m.transpose() * u;
    const S nv = v.norm();
    if (nv == S(0)) return S(0);
    v /= nv;
    Eigen::Matrix<S, Eigen::Dynamic, 1> un = m * v;
    const S nu = un.norm();
    if (nu == S(0)) return S(0);
    u = un / nu;
    sigma = nu;  // = u^T M v for the updated u
  }
  return sigma;
}

// ---- layers -----------------------------------------------------------------

// 1D convolution layer, optionally spectrally normalized ("constrained").
// Constrained layers divide the kernel by (sigma_hat + epsilon) before use;
// sigma_hat comes from the persistent power-iteration state. The normalized
// weights are cached per parameter version for gradient-free passes.
template <typename S>
class ConvLayer {
 public:
  using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  ConvLayer() = default;

  ConvLayer(std::string name, Eigen::Index in_ch, Eigen::Index out_ch, Eigen::Index k,
            bool with_bias, bool constrained, S epsilon, Rng& rng)
      : name_(std::move(name)), constrained_(constrained), epsilon_(epsilon) {
    if (constrained && with_bias)
      throw ConfigError("conv layer '" + name_ + "': constrained layers carry no bias");
    if (epsilon <= S(0)) throw ConfigError("conv layer '" + name_ + "': epsilon must be > 0");
    // Uniform fan-in init keeps pre-normalization norms moderate.
    const S bound = S(1) / std::sqrt(static_cast<S>(in_ch * k));
    typename Tensor<S>::Array kv(out_ch * in_ch * k);
    for (Eigen::Index i = 0; i < kv.size(); ++i)
      kv[i] = static_cast<S>(rng.uniform(-bound, bound));
    kernel_ = Tensor<S>(Shape{out_ch, in_ch, k}, std::move(kv), true);
    if (with_bias) bias_ = Tensor<S>::zeros(Shape{out_ch}, true);
    u_ = Vector(out_ch);
    for (Eigen::Index i = 0; i < out_ch; ++i) u_[i] = static_cast<S>(rng.normal());
    u_.normalize();
  }

  const std::string& name() const { return name_; }
  bool constrained() const { return constrained_; }
  bool has_bias() const { return bias_.defined(); }
  S epsilon() const { return epsilon_; }
  Eigen::Index out_channels() const { return kernel_.dim(0); }
  Eigen::Index in_channels() const { return kernel_.dim(1); }
  Eigen::Index kernel_size() const { return kernel_.dim(2); }

  Tensor<S>& kernel() { return kernel_; }
  const Tensor<S>& kernel() const { return kernel_; }
  Tensor<S>& bias() { return bias_; }
  const Tensor<S>& bias() const { return bias_; }
  Vector& power_u() { return u_; }
  const Vector& power_u() const { return u_; }

  std::uint64_t version() const { return version_; }
  // Any parameter or power-state mutation must be followed by this.
  void bump_version() { ++version_; }

  // One power-iteration refinement of the persistent u, computed without
  // mutation. sigma = sum(W .* outer(u_next, v)) so the value-level and
  // graph-level normalization paths agree bit for bit.
  struct SigmaParts {
    Vector u_next, v;
    S sigma;
  };

  SigmaParts sigma_parts() const {
    Matrix m = reshape_conv_weights(kernel_);
    SigmaParts p;
    p.v = m.transpose() * u_;
    const S nv = p.v.norm();
    if (nv == S(0)) {  // zero kernel (or u in the left null space)
      p.v.setZero();
      p.u_next = u_;
      p.sigma = S(0);
      return p;
    }
    p.v /= nv;
    p.u_next = m * p.v;
    p.u_next /= p.u_next.norm();
    RowMat<S> uv = p.u_next * p.v.transpose();
    p.sigma = (Eigen::Map<const typename Tensor<S>::Array>(uv.data(), uv.size()) *
               kernel_.values())
                  .sum();
    return p;
  }

  // Current estimate without mutating u.
  S sigma_estimate() const { return sigma_parts().sigma; }

  // One Miyato-style update of the persistent u, once per optimizer step.
  void power_step() {
    u_ = sigma_parts().u_next;
    bump_version();
  }

  // Runs the power iteration to convergence (or max_iters); required before
  // any evaluation, certification, or checkpoint.
  S reconverge(int max_iters = 100, S tol = S(1e-10)) {
    S prev = S(-1);
    S sigma = S(0);
    for (int it = 0; it < max_iters; ++it) {
      auto p = sigma_parts();
      u_ = p.u_next;
      sigma = p.sigma;
      if (prev >= S(0) && std::abs(sigma - prev) < tol) break;
      prev = sigma;
    }
    bump_version();
    return sigma;
  }

  // Normalized kernel, value-level, cached per parameter version.
  Tensor<S> normalized_kernel() {
    if (!constrained_)
      throw ConfigError("conv layer '" + name_ + "': normalized_kernel on unconstrained layer");
    if (!cache_ || cache_version_ != version_) {
      const S denom = sigma_estimate() + epsilon_;
      cache_ = kernel_.values() / denom;
      cache_version_ = version_;
    }
    return Tensor<S>(kernel_.shape(), *cache_, false);
  }

  // The kernel the forward pass actually applies. With grad recording on, the
  // normalization is built into the graph (gradient flows through sigma_hat
  // via u^T W v with u, v held constant); otherwise values come from the cache.
  Tensor<S> effective_kernel() {
    if (!constrained_) return kernel_;
    if (!grad_mode() || !kernel_.requires_grad()) return normalized_kernel();
    auto p = sigma_parts();
    RowMat<S> uv = p.u_next * p.v.transpose();
    Tensor<S> uv_t(kernel_.shape(),
                   Eigen::Map<const typename Tensor<S>::Array>(uv.data(), uv.size()));
    Tensor<S> sigma = dot(kernel_, uv_t);
    return div_scalar(kernel_, add_scalar(sigma, epsilon_));
  }

  Tensor<S> forward(const Tensor<S>& x) {
    const Eigen::Index pad = (kernel_size() - 1) / 2;
    return conv1d(x, effective_kernel(), bias_, pad);
  }

 private:
  std::string name_;
  Tensor<S> kernel_;
  Tensor<S> bias_;  // undefined when absent
  bool constrained_ = false;
  S epsilon_ = S(1e-3);
  Vector u_;
  std::uint64_t version_ = 0;
  std::optional<typename Tensor<S>::Array> cache_;
  std::uint64_t cache_version_ = 0;
};

// Learnable per-channel batch normalization with running statistics.
template <typename S>
class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  explicit BatchNorm1d(std::string name, Eigen::Index channels, S momentum = S(0.1),
                       S eps = S(1e-5))
      : name_(std::move(name)),
        weight_(Tensor<S>::full(Shape{channels}, S(1), true)),
        bias_(Tensor<S>::zeros(Shape{channels}, true)),
        running_mean_(Eigen::Array<S, Eigen::Dynamic, 1>::Zero(channels)),
        running_var_(Eigen::Array<S, Eigen::Dynamic, 1>::Ones(channels)),
        momentum_(momentum),
        eps_(eps) {}

  Tensor<S> forward(const Tensor<S>& x, bool train_mode) {
    return batchnorm1d(x, weight_, bias_, running_mean_, running_var_, train_mode, momentum_,
                       eps_);
  }

  const std::string& name() const { return name_; }
  Tensor<S>& weight() { return weight_; }
  Tensor<S>& bias() { return bias_; }
  Eigen::Array<S, Eigen::Dynamic, 1>& running_mean() { return running_mean_; }
  Eigen::Array<S, Eigen::Dynamic, 1>& running_var() { return running_var_; }
  const Eigen::Array<S, Eigen::Dynamic, 1>& running_mean() const { return running_mean_; }
  const Eigen::Array<S, Eigen::Dynamic, 1>& running_var() const { return running_var_; }
  S momentum() const { return momentum_; }
  S eps() const { return eps_; }

 private:
  std::string name_;
  Tensor<S> weight_, bias_;
  Eigen::Array<S, Eigen::Dynamic, 1> running_mean_, running_var_;
  S momentum_ = S(0.1);
  S eps_ = S(1e-5);
};

// Per-channel parametric interpolation between identity and block output.
// gamma = logistic(gamma_raw) stays in (0,1), so the combined map keeps a
// Lipschitz bound max_c((1-gamma_c) + gamma_c * K_block).
template <typename S>
class ResidualCombiner {
 public:
  ResidualCombiner() = default;
  explicit ResidualCombiner(std::string name, Eigen::Index channels)
      : name_(std::move(name)), gamma_raw_(Tensor<S>::zeros(Shape{channels}, true)) {}

  Tensor<S> combine(const Tensor<S>& identity_in, const Tensor<S>& block_out) const {
    return residual_combine(identity_in, block_out, gamma_raw_);
  }

  Eigen::Array<S, Eigen::Dynamic, 1> gamma() const {
    return S(1) / (S(1) + (-gamma_raw_.values()).exp());
  }

  const std::string& name() const { return name_; }
  Tensor<S>& gamma_raw() { return gamma_raw_; }
  const Tensor<S>& gamma_raw() const { return gamma_raw_; }

 private:
  std::string name_;
  Tensor<S> gamma_raw_;
};

}  // namespace iterthink
