#pragma once

#include "iterthink/rng.hpp"
#include "iterthink/tensor.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace iterthink {

// One prefix-sums problem: target[i] = (sum of bits[0..i]) mod 2.
struct Instance {
  std::vector<std::uint8_t> bits;
  std::vector<std::uint8_t> target;
};

// Running XOR of the input bits.
inline std::vector<std::uint8_t> oracle_prefix_parity(const std::vector<std::uint8_t>& bits) {
  std::vector<std::uint8_t> target(bits.size());
  std::uint8_t acc = 0;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] > 1) throw std::invalid_argument("oracle_prefix_parity: bits must be 0 or 1");
    acc ^= bits[i];
    target[i] = acc;
  }
  return target;
}

struct Dataset {
  std::vector<Instance> instances;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
  std::uint64_t seed = 0;
  int n_bits = 0;
};

// iid uniform bit strings with oracle targets, split 80/20.
inline Dataset generate_dataset(int n_bits, std::size_t count, std::uint64_t seed) {
  if (count < 5) throw std::invalid_argument("generate_dataset: count must be >= 5");
  Dataset d;
  d.seed = seed;
  d.n_bits = n_bits;
  Rng rng(mix_seed(seed, 0x64617461ull));
  d.instances.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Instance inst;
    inst.bits.resize(static_cast<std::size_t>(n_bits));
    for (auto& b : inst.bits) b = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
    inst.target = oracle_prefix_parity(inst.bits);
    d.instances.push_back(std::move(inst));
  }
  const std::size_t n_train = count * 8 / 10;
  for (std::size_t i = 0; i < count; ++i)
    (i < n_train ? d.train_idx : d.val_idx).push_back(i);
  return d;
}

enum class Split { train, val };

template <typename S>
struct Batch {
  Tensor<S> x;                        // [B,1,n]
  std::vector<std::uint8_t> targets;  // [B*n]
  std::size_t size = 0;
};

template <typename S>
Tensor<S> instances_to_tensor(const std::vector<Instance>& insts,
                              const std::vector<std::size_t>& idx) {
  const Eigen::Index B = static_cast<Eigen::Index>(idx.size());
  const Eigen::Index n = static_cast<Eigen::Index>(insts[idx[0]].bits.size());
  typename Tensor<S>::Array vals(B * n);
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index i = 0; i < n; ++i)
      vals[b * n + i] = static_cast<S>(insts[idx[static_cast<std::size_t>(b)]].bits[i]);
  return Tensor<S>(Shape{B, 1, n}, std::move(vals));
}

// One epoch's batches over a split; order is a seeded Fisher-Yates shuffle of
// the split indices, different per epoch, the last batch may be short.
template <typename S>
std::vector<Batch<S>> batches(const Dataset& d, Split split, std::size_t batch_size,
                              std::uint64_t shuffle_seed, std::uint64_t epoch) {
  if (batch_size < 1) throw std::invalid_argument("batches: batch_size must be >= 1");
  const auto& idx = split == Split::train ? d.train_idx : d.val_idx;
  std::vector<std::size_t> order = idx;
  Rng rng(mix_seed(shuffle_seed, 0x62617463ull + epoch));
  rng.shuffle(order);
  std::vector<Batch<S>> out;
  const Eigen::Index n = d.n_bits;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    std::vector<std::size_t> sel(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(stop));
    Batch<S> b;
    b.size = sel.size();
    b.x = instances_to_tensor<S>(d.instances, sel);
    b.targets.resize(sel.size() * static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < sel.size(); ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        b.targets[i * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)] =
            d.instances[sel[i]].target[static_cast<std::size_t>(j)];
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace iterthink
