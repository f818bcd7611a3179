#pragma once

#include "iterthink/data.hpp"
#include "iterthink/model.hpp"
#include "iterthink/parallel.hpp"

#include <atomic>
#include <cmath>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

namespace iterthink {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 150;
  std::size_t batch_size = 500;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0002;
  double ipt_alpha = 0.5;
  double warmup_period = 3.0;
  std::vector<int> milestone_ratio = {8, 4, 2, 1};
  double milestone_multiplier = 0.1;
  int m_train = 30;
  int train_bits = 32;
  std::size_t dataset_size = 10000;
  std::uint64_t seed = 1;
  bool early_stop_at_perfect_val = false;  // stop once validation accuracy reaches 1
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  bool diverged = false;
};

// Milestone epochs from a halving ratio chain r0:r1:...:rk: cumulative
// fractions of the chain sum, floored. 150 epochs at 8:4:2:1 gives 80,120,140.
inline std::vector<int> milestones(int epochs, const std::vector<int>& ratio) {
  if (ratio.size() < 2) throw ConfigError("milestones: ratio chain needs at least 2 entries");
  long total = 0;
  for (std::size_t i = 0; i < ratio.size(); ++i) {
    if (ratio[i] < 1) throw ConfigError("milestones: ratio entries must be positive");
    if (i + 1 < ratio.size() && ratio[i] != 2 * ratio[i + 1])
      throw ConfigError("milestones: ratio must be a halving chain (e.g. 8:4:2:1)");
    total += ratio[i];
  }
  std::vector<int> out;
  long cum = 0;
  for (std::size_t i = 0; i + 1 < ratio.size(); ++i) {
    cum += ratio[i];
    out.push_back(static_cast<int>(static_cast<long>(epochs) * cum / total));
  }
  return out;
}

// base_lr * (1 - exp(-(epoch+1)/T)) * multiplier^(#milestones passed)
inline double lr_at(int epoch, const TrainConfig& cfg, const std::vector<int>& ms) {
  const double warm = 1.0 - std::exp(-(static_cast<double>(epoch) + 1.0) / cfg.warmup_period);
  int passed = 0;
  for (int m : ms)
    if (m <= epoch) ++passed;
  return cfg.learning_rate * warm * std::pow(cfg.milestone_multiplier, passed);
}

inline double lr_at(int epoch, const TrainConfig& cfg) {
  return lr_at(epoch, cfg, milestones(cfg.epochs, cfg.milestone_ratio));
}

// Incremental-progress sample: n untracked then k tracked iterations with
// k >= 1 and n + k <= M.
inline std::pair<int, int> ipt_sample(int M, Rng& rng) {
  if (M < 1) throw ConfigError("ipt_sample: M must be >= 1");
  const int n = static_cast<int>(rng.uniform_int(0, M - 1));
  const int k = static_cast<int>(rng.uniform_int(1, M - n));
  return {n, k};
}

namespace detail {

// Cross-entropy after `steps` iterations, all tracked, optionally starting
// from a supplied scratchpad instead of F(x).
template <typename S>
Tensor<S> tracked_loss(Model<S>& model, const Batch<S>& batch, int steps,
                       const Tensor<S>* init_phi) {
  Scratchpad<S> s;
  if (init_phi)
    s = Scratchpad<S>{*init_phi, 0};
  else
    s = model.forward_init(batch.x, Phase::train);
  Tensor<S> recall;
  if (model.spec().variant == Variant::DTL) recall = model.g_recall()->forward(batch.x);
  for (int i = 0; i < steps; ++i) s = model.step_with_recall(s, batch.x, recall, Phase::train);
  return cross_entropy(model.readout(s, Phase::train), batch.targets);
}

}  // namespace detail

// L = (1-alpha) * L_full + alpha * L_prog. The progressive term runs n
// iterations with gradient tracking disabled, then k tracked iterations from
// the detached state; with n = 0 it shares the full-graph path through F.
template <typename S>
Tensor<S> training_loss(Model<S>& model, const Batch<S>& batch, int M, double alpha, Rng& rng) {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("training_loss: alpha must be in [0,1]");
  Tensor<S> l_full = detail::tracked_loss<S>(model, batch, M, nullptr);
  if (alpha == 0.0) return l_full;
  const auto [n, k] = ipt_sample(M, rng);
  Tensor<S> l_prog;
  if (n == 0) {
    l_prog = detail::tracked_loss<S>(model, batch, k, nullptr);
  } else {
    Tensor<S> detached;
    {
      NoGradGuard ng;
      Scratchpad<S> s = model.forward_init(batch.x, Phase::train);
      Tensor<S> recall;
      if (model.spec().variant == Variant::DTL) recall = model.g_recall()->forward(batch.x);
      for (int i = 0; i < n; ++i) s = model.step_with_recall(s, batch.x, recall, Phase::train);
      detached = s.phi;
    }
    l_prog = detail::tracked_loss<S>(model, batch, k, &detached);
  }
  return add(scale(l_full, static_cast<S>(1.0 - alpha)), scale(l_prog, static_cast<S>(alpha)));
}

template <typename S>
struct AdamState {
  std::vector<typename Tensor<S>::Array> m, v;
  std::int64_t t = 0;

  static AdamState init(std::vector<ParamRef<S>>& params) {
    AdamState st;
    for (auto& p : params) {
      st.m.push_back(Tensor<S>::Array::Zero(p.tensor->numel()));
      st.v.push_back(Tensor<S>::Array::Zero(p.tensor->numel()));
    }
    return st;
  }
};

// Bias-corrected Adam. The weight-decay term is added to the gradient and
// reaches only unconstrained convolution kernels; constrained kernels, biases,
// batch-norm parameters and the combiner stay decay-free. Returns false (f32)
// or throws (f64) when a gradient is non-finite; parameters are untouched in
// that case.
template <typename S>
bool adam_step(std::vector<ParamRef<S>>& params, AdamState<S>& st, S lr, S beta1, S beta2,
               S weight_decay, S eps = S(1e-8)) {
  if (st.m.size() != params.size()) throw ConfigError("adam_step: state/parameter mismatch");
  std::vector<typename Tensor<S>::Array> grads(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    grads[i] = p.tensor->has_grad() ? p.tensor->grad()
                                    : Tensor<S>::Array::Zero(p.tensor->numel());
    if (p.kind == ParamKind::conv_kernel_unconstrained && weight_decay != S(0))
      grads[i] += weight_decay * p.tensor->values();
    if (!grads[i].isFinite().all()) {
      if constexpr (std::is_same_v<S, double>)
        throw NumericError("adam_step: non-finite gradient in '" + p.name + "'");
      else
        return false;
    }
  }
  ++st.t;
  const S bc1 = S(1) - std::pow(beta1, static_cast<S>(st.t));
  const S bc2 = S(1) - std::pow(beta2, static_cast<S>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = beta1 * st.m[i] + (S(1) - beta1) * grads[i];
    st.v[i] = beta2 * st.v[i] + (S(1) - beta2) * grads[i].square();
    params[i].tensor->values() -= lr * (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + eps);
  }
  return true;
}

// ---- evaluation ---------------------------------------------------------------

// Exact-match accuracy on freshly generated instances. Instances are fixed by
// the seed; evaluation may fan out across workers, the match count is
// order-independent. Assumes prepare_eval() has been called.
// Exact-match rule: an instance counts only when every predicted bit equals
// the target. `bits` holds the predictions for instances [lo, hi).
inline std::size_t count_exact_matches(const std::vector<Instance>& insts, std::size_t lo,
                                       std::size_t hi, const std::vector<std::uint8_t>& bits) {
  std::size_t matched = 0;
  const std::size_t n = insts[lo].bits.size();
  for (std::size_t i = lo; i < hi; ++i) {
    bool ok = true;
    for (std::size_t j = 0; j < n && ok; ++j)
      if (bits[(i - lo) * n + j] != insts[i].target[j]) ok = false;
    if (ok) ++matched;
  }
  return matched;
}

// Checkpoint selection rule: highest validation score, ties to the earliest
// epoch.
inline int best_epoch_index(const std::vector<double>& scores) {
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > best_score) {
      best_score = scores[i];
      best = static_cast<int>(i);
    }
  return best;
}

// Accuracy at each listed M over one fixed instance set. One trajectory per
// chunk is iterated to max(m_list) with a readout at every listed M, so a
// sweep costs max(M) iterations, not their sum.
template <typename S>
std::vector<std::pair<int, double>> sweep_accuracies(Model<S>& model,
                                                     const std::vector<Instance>& insts,
                                                     const std::vector<int>& m_list) {
  if (m_list.empty() || m_list.front() < 1)
    throw ConfigError("sweep: M values must be >= 1");
  for (std::size_t i = 1; i < m_list.size(); ++i)
    if (m_list[i] <= m_list[i - 1]) throw ConfigError("sweep: M list must ascend");
  constexpr std::size_t kChunk = 256;
  const std::size_t n_chunks = (insts.size() + kChunk - 1) / kChunk;
  const int max_m = m_list.back();
  std::vector<std::atomic<std::size_t>> matches(m_list.size());
  parallel_chunks(n_chunks, [&](std::size_t cb, std::size_t ce) {
    NoGradGuard ng;
    std::vector<std::size_t> local(m_list.size(), 0);
    for (std::size_t c = cb; c < ce; ++c) {
      const std::size_t lo = c * kChunk;
      const std::size_t hi = std::min(insts.size(), lo + kChunk);
      std::vector<std::size_t> idx(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) idx[i - lo] = i;
      Tensor<S> x = instances_to_tensor<S>(insts, idx);
      Scratchpad<S> s = model.forward_init(x, Phase::eval);
      Tensor<S> recall;
      if (model.spec().variant == Variant::DTL) recall = model.g_recall()->forward(x);
      std::size_t mi = 0;
      for (int m = 1; m <= max_m && mi < m_list.size(); ++m) {
        s = model.step_with_recall(s, x, recall, Phase::eval);
        if (!all_finite(s.phi)) break;  // diverged: remaining M values score 0
        if (m != m_list[mi]) continue;
        Tensor<S> logits = model.readout(s, Phase::eval);
        if (!all_finite(logits)) break;
        local[mi] += count_exact_matches(insts, lo, hi, predict_bits(logits));
        ++mi;
      }
    }
    for (std::size_t i = 0; i < local.size(); ++i) matches[i] += local[i];
  });
  std::vector<std::pair<int, double>> out;
  for (std::size_t i = 0; i < m_list.size(); ++i)
    out.emplace_back(m_list[i],
                     static_cast<double>(matches[i].load()) / static_cast<double>(insts.size()));
  return out;
}

template <typename S>
double evaluate_accuracy(Model<S>& model, const std::vector<Instance>& insts, int M) {
  return sweep_accuracies(model, insts, {M})[0].second;
}

template <typename S>
double evaluate_accuracy(Model<S>& model, int bits_length, std::size_t count, int M,
                         std::uint64_t seed);

inline std::vector<Instance> fresh_instances(int bits_length, std::size_t count,
                                             std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6576616cull));
  std::vector<Instance> insts(count);
  for (auto& inst : insts) {
    inst.bits.resize(static_cast<std::size_t>(bits_length));
    for (auto& b : inst.bits) b = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
    inst.target = oracle_prefix_parity(inst.bits);
  }
  return insts;
}

// Accuracy at each M over one fixed instance set.
template <typename S>
std::vector<std::pair<int, double>> extrapolation_sweep(Model<S>& model, int bits_length,
                                                        std::size_t count,
                                                        const std::vector<int>& m_list,
                                                        std::uint64_t seed) {
  const auto insts = fresh_instances(bits_length, count, seed);
  return sweep_accuracies(model, insts, m_list);
}

template <typename S>
double evaluate_accuracy(Model<S>& model, int bits_length, std::size_t count, int M,
                         std::uint64_t seed) {
  const auto insts = fresh_instances(bits_length, count, seed);
  return evaluate_accuracy(model, insts, M);
}

// ---- training loop -------------------------------------------------------------

template <typename S>
struct TrainOutcome {
  ModelSpec spec;
  StateDict best_state;
  AdamState<S> best_adam;
  int best_epoch = -1;
  double best_val_acc = -1.0;
  StateDict final_state;
  AdamState<S> final_adam;
  std::vector<EpochRecord> records;
};

namespace detail {

template <typename S>
std::pair<double, double> validate(Model<S>& model, const Dataset& data,
                                   const TrainConfig& cfg) {
  NoGradGuard ng;
  double loss_sum = 0;
  std::size_t n_batches = 0, matched = 0, total = 0;
  for (auto& b : batches<S>(data, Split::val, cfg.batch_size, cfg.seed, 0)) {
    auto r = model.run(b.x, cfg.m_train, Phase::eval);
    ++n_batches;
    total += b.size;
    if (r.divergence) {
      loss_sum += std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    loss_sum += static_cast<double>(cross_entropy(r.logits, b.targets).item());
    const auto bits = predict_bits(r.logits);
    const std::size_t n = static_cast<std::size_t>(data.n_bits);
    for (std::size_t i = 0; i < b.size; ++i) {
      bool ok = true;
      for (std::size_t j = 0; j < n && ok; ++j)
        if (bits[i * n + j] != b.targets[i * n + j]) ok = false;
      if (ok) ++matched;
    }
  }
  return {loss_sum / static_cast<double>(n_batches),
          static_cast<double>(matched) / static_cast<double>(total)};
}

}  // namespace detail

// Appendix-style pipeline: per-epoch shuffled batches, IPT loss, Adam with
// selective decay, one power-iteration step per optimizer step, re-converged
// estimates before every validation, best-validation-accuracy snapshotting
// (ties keep the earliest epoch). In f64 a non-finite loss throws; in f32 it
// latches the divergence flag and the run keeps logging.
template <typename S>
TrainOutcome<S> train(const ModelSpec& spec, const TrainConfig& cfg,
                      const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  Model<S> model(spec, cfg.seed);
  Dataset data = generate_dataset(cfg.train_bits, cfg.dataset_size, cfg.seed);
  auto params = model.parameters();
  AdamState<S> adam = AdamState<S>::init(params);
  Rng ipt_rng(mix_seed(cfg.seed, 0x697074ull));
  const auto ms = milestones(cfg.epochs, cfg.milestone_ratio);
  auto constrained = model.constrained_layers();

  TrainOutcome<S> out;
  out.spec = spec;
  bool diverged_latch = false;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg, ms);
    double loss_sum = 0;
    std::size_t n_batches = 0;
    for (auto& b : batches<S>(data, Split::train, cfg.batch_size, cfg.seed, epoch)) {
      ++n_batches;
      Tensor<S> loss = training_loss(model, b, cfg.m_train, cfg.ipt_alpha, ipt_rng);
      const double lv = static_cast<double>(loss.item());
      loss_sum += lv;
      if (!std::isfinite(lv)) {
        if constexpr (std::is_same_v<S, double>)
          throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
        diverged_latch = true;
        continue;  // keep logging the failure pattern
      }
      for (auto& p : params) p.tensor->zero_grad();
      backward(loss);
      const bool ok = adam_step(params, adam, static_cast<S>(lr), static_cast<S>(cfg.beta1),
                                static_cast<S>(cfg.beta2), static_cast<S>(cfg.weight_decay));
      if (!ok) {
        diverged_latch = true;
        continue;
      }
      model.invalidate_caches();
      for (auto* c : constrained) c->power_step();
    }

    model.prepare_eval();
    const auto [val_loss, val_acc] = detail::validate(model, data, cfg);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(n_batches), val_loss, val_acc, lr,
                    diverged_latch};
    out.records.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (val_acc > out.best_val_acc) {
      out.best_val_acc = val_acc;
      out.best_epoch = epoch;
      out.best_state = model.state_dict();
      out.best_adam = adam;
    }
    if (cfg.early_stop_at_perfect_val && val_acc >= 1.0) break;
  }

  model.prepare_eval();
  out.final_state = model.state_dict();
  out.final_adam = adam;
  if (out.best_epoch < 0) {  // every epoch diverged; keep the final state
    out.best_state = out.final_state;
    out.best_adam = adam;
    out.best_epoch = cfg.epochs - 1;
    out.best_val_acc = 0.0;
  }
  return out;
}

}  // namespace iterthink
