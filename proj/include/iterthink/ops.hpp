#pragma once

#include "iterthink/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace iterthink {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline void expect_3d(const Shape& s, const char* op) {
  if (s.size() != 3) throw ShapeError(std::string(op) + ": expected [B,C,L] tensor, got " + shape_str(s));
}

inline void expect_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": operand shapes differ, " + shape_str(a) + " vs " + shape_str(b));
}

// Gathers one instance's conv patches: col(ci*k + t, l) = in_b[ci, l + t - p],
// zero outside the sequence. col is a caller-owned reusable buffer so the
// working set stays cache-resident across the batch.
template <typename S>
void im2col_one(const S* in_b, Eigen::Index Cin, Eigen::Index L, Eigen::Index k, Eigen::Index p,
                Eigen::Index Lout, RowMat<S>& col) {
  for (Eigen::Index ci = 0; ci < Cin; ++ci) {
    for (Eigen::Index t = 0; t < k; ++t) {
      const Eigen::Index lo = std::max<Eigen::Index>(0, p - t);
      const Eigen::Index hi = std::min<Eigen::Index>(Lout - 1, L - 1 + p - t);
      S* dst = col.data() + (ci * k + t) * Lout;
      if (lo > 0) std::fill(dst, dst + lo, S(0));
      if (hi < Lout - 1) std::fill(dst + hi + 1, dst + Lout, S(0));
      if (hi < lo) continue;
      const Eigen::Index len = hi - lo + 1;
      Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(dst + lo, len) =
          Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(in_b + ci * L + (lo + t - p), len);
    }
  }
}

// Scatter-add transpose of im2col_one.
template <typename S>
void col2im_add_one(const RowMat<S>& col, S* out_b, Eigen::Index Cin, Eigen::Index L,
                    Eigen::Index k, Eigen::Index p, Eigen::Index Lout) {
  for (Eigen::Index ci = 0; ci < Cin; ++ci) {
    for (Eigen::Index t = 0; t < k; ++t) {
      const Eigen::Index lo = std::max<Eigen::Index>(0, p - t);
      const Eigen::Index hi = std::min<Eigen::Index>(Lout - 1, L - 1 + p - t);
      if (hi < lo) continue;
      const Eigen::Index len = hi - lo + 1;
      const S* src = col.data() + (ci * k + t) * Lout;
      Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(out_b + ci * L + (lo + t - p), len) +=
          Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(src + lo, len);
    }
  }
}

}  // namespace detail

// 1D convolution, stride 1, zero padding p. Output length L + 2p - k + 1.
template <typename S>
Tensor<S> conv1d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias,
                 Eigen::Index padding) {
  detail::expect_3d(input.shape(), "conv1d(input)");
  detail::expect_3d(kernel.shape(), "conv1d(kernel)");
  const Eigen::Index B = input.dim(0), Cin = input.dim(1), L = input.dim(2);
  const Eigen::Index Cout = kernel.dim(0), Kin = kernel.dim(1), k = kernel.dim(2);
  if (k % 2 == 0) throw ShapeError("conv1d: kernel size must be odd, got k=" + std::to_string(k));
  if (Kin != Cin)
    throw ShapeError("conv1d: input channels Cin=" + std::to_string(Cin) +
                     " do not match kernel Cin=" + std::to_string(Kin));
  if (bias.defined() && (bias.shape().size() != 1 || bias.dim(0) != Cout))
    throw ShapeError("conv1d: bias must be [Cout=" + std::to_string(Cout) + "], got " +
                     shape_str(bias.shape()));
  const Eigen::Index Lout = L + 2 * padding - k + 1;
  if (Lout < 1) throw ShapeError("conv1d: output length " + std::to_string(Lout) + " < 1");

  // Per-instance GEMM: each [Cout,Lout] output slice is contiguous, so the
  // product lands in place and the column buffer stays cache-resident.
  typename Tensor<S>::Array out(B * Cout * Lout);
  {
    Eigen::Map<const RowMat<S>> kmat(kernel.values().data(), Cout, Cin * k);
    RowMat<S> col(Cin * k, Lout);
    for (Eigen::Index b = 0; b < B; ++b) {
      detail::im2col_one<S>(input.values().data() + b * Cin * L, Cin, L, k, padding, Lout, col);
      Eigen::Map<RowMat<S>> out_b(out.data() + b * Cout * Lout, Cout, Lout);
      out_b.noalias() = kmat * col;
      if (bias.defined())
        for (Eigen::Index co = 0; co < Cout; ++co) out_b.row(co).array() += bias.values()[co];
    }
  }

  std::vector<Tensor<S>> parents{input, kernel};
  if (bias.defined()) parents.push_back(bias);
  auto in_node = input.node();
  auto k_node = kernel.node();
  auto b_node = bias.defined() ? bias.node() : nullptr;
  return make_op<S>(
      Shape{B, Cout, Lout}, std::move(out), std::move(parents),
      [=](const typename Tensor<S>::Array& g) {
        const bool need_k = k_node->requires_grad;
        const bool need_in = in_node->requires_grad;
        RowMat<S> gk;
        if (need_k) gk = RowMat<S>::Zero(Cout, Cin * k);
        typename Tensor<S>::Array gin;
        if (need_in) gin = Tensor<S>::Array::Zero(B * Cin * L);
        Eigen::Map<const RowMat<S>> km(k_node->values.data(), Cout, Cin * k);
        RowMat<S> col(Cin * k, Lout), gcol(Cin * k, Lout);
        for (Eigen::Index b = 0; b < B; ++b) {
          Eigen::Map<const RowMat<S>> g_b(g.data() + b * Cout * Lout, Cout, Lout);
          if (need_k) {
            detail::im2col_one<S>(in_node->values.data() + b * Cin * L, Cin, L, k, padding, Lout,
                                  col);
            gk.noalias() += g_b * col.transpose();
          }
          if (need_in) {
            gcol.noalias() = km.transpose() * g_b;
            detail::col2im_add_one<S>(gcol, gin.data() + b * Cin * L, Cin, L, k, padding, Lout);
          }
        }
        if (need_k)
          detail::accumulate<S>(*k_node, Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(
                                             gk.data(), gk.size()));
        if (need_in) detail::accumulate<S>(*in_node, gin);
        if (b_node && b_node->requires_grad) {
          typename Tensor<S>::Array gb = Tensor<S>::Array::Zero(Cout);
          for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index co = 0; co < Cout; ++co)
              gb[co] += g.segment((b * Cout + co) * Lout, Lout).sum();
          detail::accumulate<S>(*b_node, gb);
        }
      });
}

template <typename S>
Tensor<S> conv1d(const Tensor<S>& input, const Tensor<S>& kernel, Eigen::Index padding) {
  return conv1d(input, kernel, Tensor<S>{}, padding);
}

// ---- elementwise arithmetic -------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a.shape(), b.shape(), "add");
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>(a.shape(), a.values() + b.values(), {a, b},
                    [an, bn](const typename Tensor<S>::Array& g) {
                      detail::accumulate<S>(*an, g);
                      detail::accumulate<S>(*bn, g);
                    });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a.shape(), b.shape(), "sub");
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>(a.shape(), a.values() - b.values(), {a, b},
                    [an, bn](const typename Tensor<S>::Array& g) {
                      detail::accumulate<S>(*an, g);
                      detail::accumulate<S>(*bn, -g);
                    });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a.shape(), b.shape(), "mul");
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>(a.shape(), a.values() * b.values(), {a, b},
                    [an, bn](const typename Tensor<S>::Array& g) {
                      detail::accumulate<S>(*an, g * bn->values);
                      detail::accumulate<S>(*bn, g * an->values);
                    });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& t, S c) {
  auto tn = t.node();
  return make_op<S>(t.shape(), t.values() * c, {t},
                    [tn, c](const typename Tensor<S>::Array& g) {
                      detail::accumulate<S>(*tn, g * c);
                    });
}

// t + c with a compile-time-constant shift (gradient passes through).
template <typename S>
Tensor<S> add_scalar(const Tensor<S>& t, S c) {
  auto tn = t.node();
  return make_op<S>(t.shape(), t.values() + c, {t},
                    [tn](const typename Tensor<S>::Array& g) { detail::accumulate<S>(*tn, g); });
}

// Elementwise division by a scalar tensor (graph node); used by spectral
// normalization where the divisor is itself a function of the weights.
template <typename S>
Tensor<S> div_scalar(const Tensor<S>& t, const Tensor<S>& s) {
  if (s.numel() != 1) throw ShapeError("div_scalar: divisor must be scalar, got " + shape_str(s.shape()));
  auto tn = t.node();
  auto sn = s.node();
  const S d = s.values()[0];
  return make_op<S>(t.shape(), t.values() / d, {t, s},
                    [tn, sn, d](const typename Tensor<S>::Array& g) {
                      detail::accumulate<S>(*tn, g / d);
                      if (sn->requires_grad) {
                        typename Tensor<S>::Array gs(1);
                        gs[0] = -(g * tn->values).sum() / (d * d);
                        detail::accumulate<S>(*sn, gs);
                      }
                    });
}

// ---- activations ------------------------------------------------------------

template <typename S>
Tensor<S> relu(const Tensor<S>& t) {
  auto tn = t.node();
  return make_op<S>(t.shape(), t.values().max(S(0)), {t},
                    [tn](const typename Tensor<S>::Array& g) {
                      // right-derivative at the kink: relu'(0) = 1
                      detail::accumulate<S>(*tn, g * (tn->values >= S(0)).template cast<S>());
                    });
}

template <typename S>
Tensor<S> elu(const Tensor<S>& t) {
  // x.max(0) + exp(x.min(0)) - 1 == ELU(x); branch-free so Eigen vectorizes
  typename Tensor<S>::Array out =
      t.values().max(S(0)) + t.values().min(S(0)).exp() - S(1);
  auto tn = t.node();
  return make_op<S>(t.shape(), std::move(out), {t},
                    [tn](const typename Tensor<S>::Array& g) {
                      // elu'(x) = exp(x.min(0)): 1 for x >= 0, exp(x) below
                      detail::accumulate<S>(*tn, g * tn->values.min(S(0)).exp());
                    });
}

template <typename S>
Tensor<S> tanh_act(const Tensor<S>& t) {
  typename Tensor<S>::Array out = t.values().tanh();
  auto tn = t.node();
  auto on = out;  // derivative from the output keeps backward cheap
  return make_op<S>(t.shape(), std::move(out), {t},
                    [tn, on](const typename Tensor<S>::Array& g) {
                      detail::accumulate<S>(*tn, g * (S(1) - on.square()));
                    });
}

template <typename S>
Tensor<S> logistic(const Tensor<S>& t) {
  typename Tensor<S>::Array out = S(1) / (S(1) + (-t.values()).exp());
  auto tn = t.node();
  auto on = out;
  return make_op<S>(t.shape(), std::move(out), {t},
                    [tn, on](const typename Tensor<S>::Array& g) {
                      detail::accumulate<S>(*tn, g * on * (S(1) - on));
                    });
}

// Exact (erf-based) GELU.
template <typename S>
Tensor<S> gelu(const Tensor<S>& t) {
  const S inv_sqrt2 = S(0.70710678118654752440084436210485);
  typename Tensor<S>::Array out(t.numel());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const S x = t.values()[i];
    out[i] = x * S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
  }
  auto tn = t.node();
  return make_op<S>(t.shape(), std::move(out), {t},
                    [tn, inv_sqrt2](const typename Tensor<S>::Array& g) {
                      const S inv_sqrt2pi = S(0.39894228040143267793994605993438);
                      typename Tensor<S>::Array d(tn->values.size());
                      for (Eigen::Index i = 0; i < d.size(); ++i) {
                        const S x = tn->values[i];
                        const S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
                        const S pdf = std::exp(-x * x * S(0.5)) * inv_sqrt2pi;
                        d[i] = cdf + x * pdf;
                      }
                      detail::accumulate<S>(*tn, g * d);
                    });
}

// ---- reductions -------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& t) {
  typename Tensor<S>::Array out(1);
  out[0] = t.values().sum();
  auto tn = t.node();
  return make_op<S>(Shape{}, std::move(out), {t},
                    [tn](const typename Tensor<S>::Array& g) {
                      detail::accumulate<S>(
                          *tn, Tensor<S>::Array::Constant(tn->values.size(), g[0]));
                    });
}

template <typename S>
Tensor<S> dot(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a.shape(), b.shape(), "dot");
  typename Tensor<S>::Array out(1);
  out[0] = (a.values() * b.values()).sum();
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>(Shape{}, std::move(out), {a, b},
                    [an, bn](const typename Tensor<S>::Array& g) {
                      detail::accumulate<S>(*an, g[0] * bn->values);
                      detail::accumulate<S>(*bn, g[0] * an->values);
                    });
}

// ---- per-channel broadcasts on [B,C,L] --------------------------------------

namespace detail {
template <typename S>
void expect_channel_vec(const Tensor<S>& v, Eigen::Index C, const char* op) {
  if (v.shape().size() != 1 || v.dim(0) != C)
    throw ShapeError(std::string(op) + ": channel vector must be [" + std::to_string(C) +
                     "], got " + shape_str(v.shape()));
}
}  // namespace detail

template <typename S>
Tensor<S> mul_channel(const Tensor<S>& t, const Tensor<S>& s) {
  detail::expect_3d(t.shape(), "mul_channel");
  const Eigen::Index B = t.dim(0), C = t.dim(1), L = t.dim(2);
  detail::expect_channel_vec(s, C, "mul_channel");
  typename Tensor<S>::Array out(t.numel());
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index c = 0; c < C; ++c)
      out.segment((b * C + c) * L, L) = t.values().segment((b * C + c) * L, L) * s.values()[c];
  auto tn = t.node();
  auto sn = s.node();
  return make_op<S>(t.shape(), std::move(out), {t, s},
                    [tn, sn, B, C, L](const typename Tensor<S>::Array& g) {
                      if (tn->requires_grad) {
                        typename Tensor<S>::Array gt(g.size());
                        for (Eigen::Index b = 0; b < B; ++b)
                          for (Eigen::Index c = 0; c < C; ++c)
                            gt.segment((b * C + c) * L, L) =
                                g.segment((b * C + c) * L, L) * sn->values[c];
                        detail::accumulate<S>(*tn, gt);
                      }
                      if (sn->requires_grad) {
                        typename Tensor<S>::Array gs = Tensor<S>::Array::Zero(C);
                        for (Eigen::Index b = 0; b < B; ++b)
                          for (Eigen::Index c = 0; c < C; ++c)
                            gs[c] += (g.segment((b * C + c) * L, L) *
                                      tn->values.segment((b * C + c) * L, L))
                                         .sum();
                        detail::accumulate<S>(*sn, gs);
                      }
                    });
}

template <typename S>
Tensor<S> add_channel(const Tensor<S>& t, const Tensor<S>& v) {
  detail::expect_3d(t.shape(), "add_channel");
  const Eigen::Index B = t.dim(0), C = t.dim(1), L = t.dim(2);
  detail::expect_channel_vec(v, C, "add_channel");
  typename Tensor<S>::Array out(t.numel());
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index c = 0; c < C; ++c)
      out.segment((b * C + c) * L, L) = t.values().segment((b * C + c) * L, L) + v.values()[c];
  auto tn = t.node();
  auto vn = v.node();
  return make_op<S>(t.shape(), std::move(out), {t, v},
                    [tn, vn, B, C, L](const typename Tensor<S>::Array& g) {
                      detail::accumulate<S>(*tn, g);
                      if (vn->requires_grad) {
                        typename Tensor<S>::Array gv = Tensor<S>::Array::Zero(C);
                        for (Eigen::Index b = 0; b < B; ++b)
                          for (Eigen::Index c = 0; c < C; ++c)
                            gv[c] += g.segment((b * C + c) * L, L).sum();
                        detail::accumulate<S>(*vn, gv);
                      }
                    });
}

// ---- structural -------------------------------------------------------------

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_3d(a.shape(), "concat_channels");
  detail::expect_3d(b.shape(), "concat_channels");
  const Eigen::Index B = a.dim(0), Ca = a.dim(1), L = a.dim(2), Cb = b.dim(1);
  if (b.dim(0) != B || b.dim(2) != L)
    throw ShapeError("concat_channels: batch/length mismatch, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  typename Tensor<S>::Array out(B * (Ca + Cb) * L);
  for (Eigen::Index bi = 0; bi < B; ++bi) {
    out.segment(bi * (Ca + Cb) * L, Ca * L) = a.values().segment(bi * Ca * L, Ca * L);
    out.segment(bi * (Ca + Cb) * L + Ca * L, Cb * L) = b.values().segment(bi * Cb * L, Cb * L);
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>(Shape{B, Ca + Cb, L}, std::move(out), {a, b},
                    [an, bn, B, Ca, Cb, L](const typename Tensor<S>::Array& g) {
                      if (an->requires_grad) {
                        typename Tensor<S>::Array ga(B * Ca * L);
                        for (Eigen::Index bi = 0; bi < B; ++bi)
                          ga.segment(bi * Ca * L, Ca * L) = g.segment(bi * (Ca + Cb) * L, Ca * L);
                        detail::accumulate<S>(*an, ga);
                      }
                      if (bn->requires_grad) {
                        typename Tensor<S>::Array gb(B * Cb * L);
                        for (Eigen::Index bi = 0; bi < B; ++bi)
                          gb.segment(bi * Cb * L, Cb * L) =
                              g.segment(bi * (Ca + Cb) * L + Ca * L, Cb * L);
                        detail::accumulate<S>(*bn, gb);
                      }
                    });
}

// Per-channel convex combination (1-gamma)*identity + gamma*block with
// gamma = logistic(gamma_raw). Fused so the big intermediates are not retained.
template <typename S>
Tensor<S> residual_combine(const Tensor<S>& identity_in, const Tensor<S>& block_out,
                           const Tensor<S>& gamma_raw) {
  detail::expect_same_shape(identity_in.shape(), block_out.shape(), "residual_combine");
  detail::expect_3d(identity_in.shape(), "residual_combine");
  const Eigen::Index B = identity_in.dim(0), C = identity_in.dim(1), L = identity_in.dim(2);
  if (gamma_raw.shape().size() != 1 || gamma_raw.dim(0) != C)
    throw ShapeError("residual_combine: combiner has " + shape_str(gamma_raw.shape()) +
                     " channels, tensor has C=" + std::to_string(C));
  typename Tensor<S>::Array gamma = S(1) / (S(1) + (-gamma_raw.values()).exp());
  typename Tensor<S>::Array out(identity_in.numel());
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index c = 0; c < C; ++c) {
      const S gm = gamma[c];
      out.segment((b * C + c) * L, L) =
          (S(1) - gm) * identity_in.values().segment((b * C + c) * L, L) +
          gm * block_out.values().segment((b * C + c) * L, L);
    }
  auto idn = identity_in.node();
  auto bln = block_out.node();
  auto gn = gamma_raw.node();
  return make_op<S>(
      identity_in.shape(), std::move(out), {identity_in, block_out, gamma_raw},
      [idn, bln, gn, gamma, B, C, L](const typename Tensor<S>::Array& g) {
        typename Tensor<S>::Array gid(g.size()), gbl(g.size());
        typename Tensor<S>::Array ggam = Tensor<S>::Array::Zero(C);
        for (Eigen::Index b = 0; b < B; ++b)
          for (Eigen::Index c = 0; c < C; ++c) {
            const S gm = gamma[c];
            auto gs = g.segment((b * C + c) * L, L);
            gid.segment((b * C + c) * L, L) = gs * (S(1) - gm);
            gbl.segment((b * C + c) * L, L) = gs * gm;
            ggam[c] += (gs * (bln->values.segment((b * C + c) * L, L) -
                              idn->values.segment((b * C + c) * L, L)))
                           .sum();
          }
        detail::accumulate<S>(*idn, gid);
        detail::accumulate<S>(*bln, gbl);
        if (gn->requires_grad)
          detail::accumulate<S>(*gn, ggam * gamma * (S(1) - gamma));
      });
}

// ---- batch normalization ----------------------------------------------------

// Train mode normalizes by biased batch statistics and updates the running
// estimates in place (unbiased variance, PyTorch convention:
// running = (1-momentum)*running + momentum*batch). Eval mode is a fixed
// per-channel affine map using the running statistics.
template <typename S>
Tensor<S> batchnorm1d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                      Eigen::Array<S, Eigen::Dynamic, 1>& running_mean,
                      Eigen::Array<S, Eigen::Dynamic, 1>& running_var, bool train_mode,
                      S momentum, S eps) {
  detail::expect_3d(x.shape(), "batchnorm1d");
  const Eigen::Index B = x.dim(0), C = x.dim(1), L = x.dim(2);
  detail::expect_channel_vec(weight, C, "batchnorm1d(weight)");
  detail::expect_channel_vec(bias, C, "batchnorm1d(bias)");
  const Eigen::Index n = B * L;
  if (train_mode && n < 2)
    throw ShapeError("batchnorm1d: train mode needs B*L >= 2, got " + std::to_string(n));

  Eigen::Array<S, Eigen::Dynamic, 1> mean(C), var(C);
  if (train_mode) {
    for (Eigen::Index c = 0; c < C; ++c) {
      S m = 0;
      for (Eigen::Index b = 0; b < B; ++b) m += x.values().segment((b * C + c) * L, L).sum();
      m /= static_cast<S>(n);
      S v = 0;
      for (Eigen::Index b = 0; b < B; ++b)
        v += (x.values().segment((b * C + c) * L, L) - m).square().sum();
      mean[c] = m;
      var[c] = v / static_cast<S>(n);  // biased, used for normalization
      running_mean[c] = (S(1) - momentum) * running_mean[c] + momentum * m;
      running_var[c] =
          (S(1) - momentum) * running_var[c] + momentum * (v / static_cast<S>(n - 1));
    }
  } else {
    mean = running_mean;
    var = running_var;
  }

  typename Tensor<S>::Array xhat(x.numel()), out(x.numel());
  Eigen::Array<S, Eigen::Dynamic, 1> inv_std = (var + eps).sqrt().inverse();
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index c = 0; c < C; ++c) {
      auto xs = x.values().segment((b * C + c) * L, L);
      xhat.segment((b * C + c) * L, L) = (xs - mean[c]) * inv_std[c];
      out.segment((b * C + c) * L, L) =
          xhat.segment((b * C + c) * L, L) * weight.values()[c] + bias.values()[c];
    }

  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.node();
  return make_op<S>(
      x.shape(), std::move(out), {x, weight, bias},
      [xn, wn, bn, xhat, inv_std, train_mode, B, C, L, n](const typename Tensor<S>::Array& g) {
        if (wn->requires_grad || bn->requires_grad) {
          typename Tensor<S>::Array gw = Tensor<S>::Array::Zero(C);
          typename Tensor<S>::Array gb = Tensor<S>::Array::Zero(C);
          for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index c = 0; c < C; ++c) {
              auto gs = g.segment((b * C + c) * L, L);
              gw[c] += (gs * xhat.segment((b * C + c) * L, L)).sum();
              gb[c] += gs.sum();
            }
          detail::accumulate<S>(*wn, gw);
          detail::accumulate<S>(*bn, gb);
        }
        if (!xn->requires_grad) return;
        typename Tensor<S>::Array gx(g.size());
        if (train_mode) {
          // dx = w*inv_std * (g - mean(g) - xhat * mean(g*xhat)), means per channel
          for (Eigen::Index c = 0; c < C; ++c) {
            S sum_g = 0, sum_gx = 0;
            for (Eigen::Index b = 0; b < B; ++b) {
              auto gs = g.segment((b * C + c) * L, L);
              sum_g += gs.sum();
              sum_gx += (gs * xhat.segment((b * C + c) * L, L)).sum();
            }
            const S mg = sum_g / static_cast<S>(n);
            const S mgx = sum_gx / static_cast<S>(n);
            const S a = wn->values[c] * inv_std[c];
            for (Eigen::Index b = 0; b < B; ++b)
              gx.segment((b * C + c) * L, L) =
                  a * (g.segment((b * C + c) * L, L) - mg -
                       xhat.segment((b * C + c) * L, L) * mgx);
          }
        } else {
          for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index c = 0; c < C; ++c)
              gx.segment((b * C + c) * L, L) =
                  g.segment((b * C + c) * L, L) * wn->values[c] * inv_std[c];
        }
        detail::accumulate<S>(*xn, gx);
      });
}

// ---- loss -------------------------------------------------------------------

// Mean categorical cross-entropy over B*L positions of two-channel logits,
// stabilized by max subtraction.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const std::uint8_t> targets) {
  detail::expect_3d(logits.shape(), "cross_entropy");
  const Eigen::Index B = logits.dim(0), C = logits.dim(1), L = logits.dim(2);
  if (C != 2)
    throw ShapeError("cross_entropy: logits must have 2 channels, got C=" + std::to_string(C));
  if (static_cast<Eigen::Index>(targets.size()) != B * L)
    throw ShapeError("cross_entropy: expected " + std::to_string(B * L) + " targets, got " +
                     std::to_string(targets.size()));
  for (auto t : targets)
    if (t > 1) throw ShapeError("cross_entropy: target values must be 0 or 1");

  S total = 0;
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index l = 0; l < L; ++l) {
      const S l0 = logits.values()[(b * 2 + 0) * L + l];
      const S l1 = logits.values()[(b * 2 + 1) * L + l];
      const S m = std::max(l0, l1);
      const S lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
      const S lt = targets[b * L + l] ? l1 : l0;
      total += lse - lt;
    }
  typename Tensor<S>::Array out(1);
  out[0] = total / static_cast<S>(B * L);

  auto ln = logits.node();
  std::vector<std::uint8_t> tcopy(targets.begin(), targets.end());
  return make_op<S>(Shape{}, std::move(out), {logits},
                    [ln, tcopy, B, L](const typename Tensor<S>::Array& g) {
                      const S w = g[0] / static_cast<S>(B * L);
                      typename Tensor<S>::Array gl(ln->values.size());
                      for (Eigen::Index b = 0; b < B; ++b)
                        for (Eigen::Index l = 0; l < L; ++l) {
                          const S l0 = ln->values[(b * 2 + 0) * L + l];
                          const S l1 = ln->values[(b * 2 + 1) * L + l];
                          const S m = std::max(l0, l1);
                          const S e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
                          const S p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
                          const bool t1 = tcopy[b * L + l] != 0;
                          gl[(b * 2 + 0) * L + l] = w * (p0 - (t1 ? S(0) : S(1)));
                          gl[(b * 2 + 1) * L + l] = w * (p1 - (t1 ? S(1) : S(0)));
                        }
                      detail::accumulate<S>(*ln, gl);
                    });
}

}  // namespace iterthink
