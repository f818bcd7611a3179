#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "iterthink/ops.hpp"
#include "iterthink/parallel.hpp"
#include "testutil.hpp"

#include <cmath>

using namespace iterthink;
using namespace iterthink::testutil;
using T = Tensor<double>;

int main(int argc, char** argv) {
  tune_allocator();
  doctest::Context ctx(argc, argv);
  return ctx.run();
}

TEST_CASE("conv1d identity kernel passes input through") {
  auto x = T::from({1, 1, 4}, {1, 2, 3, 4});
  auto k = T::from({1, 1, 3}, {0, 1, 0});
  auto y = conv1d(x, k, 1);
  REQUIRE(y.shape() == Shape{1, 1, 4});
  for (int i = 0; i < 4; ++i) CHECK(y.values()[i] == doctest::Approx(i + 1).epsilon(1e-15));
}

TEST_CASE("conv1d box kernel matches hand computation") {
  auto x = T::from({1, 1, 4}, {1, 2, 3, 4});
  auto k = T::from({1, 1, 3}, {1, 1, 1});
  auto y = conv1d(x, k, 1);
  const double expect[] = {3, 6, 9, 7};
  for (int i = 0; i < 4; ++i) CHECK(y.values()[i] == doctest::Approx(expect[i]).epsilon(1e-14));
}

TEST_CASE("conv1d shape law") {
  Rng rng(1);
  auto x = random_tensor({2, 3, 8}, rng);
  auto k = random_tensor({5, 3, 3}, rng);
  CHECK(conv1d(x, k, 1).shape() == Shape{2, 5, 8});
}

TEST_CASE("conv1d rejects mismatched channels with a dimension-naming error") {
  Rng rng(2);
  auto x = random_tensor({1, 3, 8}, rng);
  auto k = random_tensor({2, 4, 3}, rng);
  CHECK_THROWS_WITH_AS(conv1d(x, k, 1),
                       doctest::Contains("Cin"), ShapeError);
  auto keven = random_tensor({2, 3, 4}, rng);
  CHECK_THROWS_AS(conv1d(x, keven, 1), ShapeError);
}

TEST_CASE("conv1d matches the nested-loop oracle on random cases") {
  Rng rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    const Eigen::Index B = rng.uniform_int(1, 3), Cin = rng.uniform_int(1, 4);
    const Eigen::Index Cout = rng.uniform_int(1, 4), L = rng.uniform_int(3, 9);
    const Eigen::Index k = 2 * rng.uniform_int(0, 2) + 1, p = (k - 1) / 2;
    auto x = random_tensor({B, Cin, L}, rng);
    auto kern = random_tensor({Cout, Cin, k}, rng);
    auto bias = random_tensor({Cout}, rng);
    auto y = conv1d(x, kern, bias, p);
    std::vector<double> xi(x.values().data(), x.values().data() + x.numel());
    std::vector<double> ki(kern.values().data(), kern.values().data() + kern.numel());
    std::vector<double> bi(bias.values().data(), bias.values().data() + bias.numel());
    auto want = conv1d_oracle(xi, B, Cin, L, ki, Cout, k, p, &bi);
    for (Eigen::Index i = 0; i < y.numel(); ++i)
      CHECK(y.values()[i] == doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("conv1d without bias is linear") {
  Rng rng(4);
  auto k = random_tensor({3, 2, 3}, rng);
  auto u = random_tensor({1, 2, 6}, rng);
  auto v = random_tensor({1, 2, 6}, rng);
  const double a = 1.7, b = -0.3;
  auto lhs = conv1d(add(scale(u, a), scale(v, b)), k, 1);
  auto rhs = add(scale(conv1d(u, k, 1), a), scale(conv1d(v, k, 1), b));
  CHECK((lhs.values() - rhs.values()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("activation endpoint values") {
  auto z = T::from({3}, {0.0, -40.0, 2.0});
  auto e = elu(z);
  CHECK(e.values()[0] == 0.0);
  CHECK(e.values()[1] == doctest::Approx(-1.0).epsilon(1e-12));  // limit at -inf
  CHECK(e.values()[2] == 2.0);
  CHECK(logistic(T::scalar(0.0)).item() == doctest::Approx(0.5).epsilon(1e-15));
  auto r = relu(T::from({2}, {-2.0, 3.0}));
  CHECK(r.values()[0] == 0.0);
  CHECK(r.values()[1] == 3.0);
}

TEST_CASE("one-Lipschitz activations never expand sampled pairs") {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.uniform(-6, 6), b = rng.uniform(-6, 6);
    auto fa = [&](auto fn) { return fn(T::scalar(a)).item(); };
    auto fb = [&](auto fn) { return fn(T::scalar(b)).item(); };
    const double d = std::abs(a - b) + 1e-15;
    CHECK(std::abs(fa([](T t) { return relu(t); }) - fb([](T t) { return relu(t); })) <= d);
    CHECK(std::abs(fa([](T t) { return elu(t); }) - fb([](T t) { return elu(t); })) <= d);
    CHECK(std::abs(fa([](T t) { return tanh_act(t); }) - fb([](T t) { return tanh_act(t); })) <= d);
    CHECK(std::abs(fa([](T t) { return logistic(t); }) - fb([](T t) { return logistic(t); })) <= d);
  }
}

TEST_CASE("batchnorm eval mode with unit statistics is the identity") {
  Rng rng(6);
  auto x = random_tensor({2, 3, 4}, rng);
  auto w = T::full({3}, 1.0);
  auto b = T::zeros({3});
  Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(3), var = Eigen::ArrayXd::Ones(3);
  auto y = batchnorm1d(x, w, b, mean, var, false, 0.1, 0.0);
  CHECK((y.values() - x.values()).abs().maxCoeff() < 1e-15);
}

TEST_CASE("batchnorm train mode on constant input gives zeros before scale/shift") {
  auto x = T::full({2, 1, 3}, 5.0);
  auto w = T::full({1}, 1.0);
  auto b = T::zeros({1});
  Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(1), var = Eigen::ArrayXd::Ones(1);
  auto y = batchnorm1d(x, w, b, mean, var, true, 0.1, 1e-5);
  CHECK(y.values().abs().maxCoeff() < 1e-12);
}

TEST_CASE("batchnorm two-sample batch matches the direct formula") {
  // one channel, two positions: mean 2, biased var 1
  auto x = T::from({2, 1, 1}, {1.0, 3.0});
  auto w = T::from({1}, {1.5});
  auto b = T::from({1}, {0.25});
  Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(1), var = Eigen::ArrayXd::Ones(1);
  const double eps = 1e-5, mom = 0.1;
  auto y = batchnorm1d(x, w, b, mean, var, true, mom, eps);
  const double want0 = 1.5 * ((1.0 - 2.0) / std::sqrt(1.0 + eps)) + 0.25;
  const double want1 = 1.5 * ((3.0 - 2.0) / std::sqrt(1.0 + eps)) + 0.25;
  CHECK(std::abs(y.values()[0] - want0) < 1e-12);
  CHECK(std::abs(y.values()[1] - want1) < 1e-12);
  CHECK(mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.0).epsilon(1e-12));
  CHECK(var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 2.0).epsilon(1e-12));  // unbiased var = 2
}

TEST_CASE("batchnorm train mode requires at least two positions") {
  auto x = T::full({1, 1, 1}, 5.0);
  auto w = T::full({1}, 1.0);
  auto b = T::zeros({1});
  Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(1), var = Eigen::ArrayXd::Ones(1);
  CHECK_THROWS_AS(batchnorm1d(x, w, b, mean, var, true, 0.1, 1e-5), ShapeError);
}

TEST_CASE("cross-entropy saturation and uniform values") {
  auto eq = T::from({1, 2, 2}, {1.0, 1.0, 1.0, 1.0});
  std::vector<std::uint8_t> t01{0, 1};
  CHECK(cross_entropy(eq, t01).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  auto sat = T::from({1, 2, 1}, {10.0, -10.0});
  std::vector<std::uint8_t> t0{0};
  CHECK(cross_entropy(sat, t0).item() == doctest::Approx(2.061e-9).epsilon(0.01));

  std::vector<std::uint8_t> bad{2};
  CHECK_THROWS_AS(cross_entropy(sat, bad), ShapeError);
}

TEST_CASE("cross-entropy matches an independent softmax oracle") {
  Rng rng(7);
  auto logits = random_tensor({3, 2, 5}, rng, 2.0);
  std::vector<std::uint8_t> targets(15);
  for (auto& t : targets) t = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
  const double got = cross_entropy(logits, targets).item();
  double want = 0;
  for (int b = 0; b < 3; ++b)
    for (int l = 0; l < 5; ++l) {
      const double l0 = logits.values()[(b * 2 + 0) * 5 + l];
      const double l1 = logits.values()[(b * 2 + 1) * 5 + l];
      const double p = std::exp(l0) / (std::exp(l0) + std::exp(l1));
      want += -std::log(targets[b * 5 + l] ? 1.0 - p : p);
    }
  want /= 15.0;
  CHECK(std::abs(got - want) < 1e-10);
}

TEST_CASE("backward basics") {
  SUBCASE("sum of a constant leaves parameter grads at zero") {
    auto c = T::from({3}, {1, 2, 3});
    auto loss = sum(c);
    backward(loss);  // nothing requires grad; no-op
    CHECK_FALSE(c.has_grad());
  }
  SUBCASE("d(x^2)/dx at 3 is 6") {
    auto x = T::scalar(3.0, true);
    auto loss = mul(x, x);
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
  }
  SUBCASE("backward rejects non-scalar losses") {
    auto x = T::from({2}, {1, 2}, /*requires_grad=*/true);
    auto y = add(x, x);
    CHECK_THROWS_AS(backward(y), GraphError);
  }
  SUBCASE("diamond reuse accumulates once per path") {
    auto x = T::scalar(2.0, true);
    auto y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 5
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(5.0).epsilon(1e-12));
  }
}

TEST_CASE("two-layer conv net gradients match central finite differences") {
  Rng rng(8);
  auto x = random_tensor({2, 2, 6}, rng);
  auto k1 = random_tensor({3, 2, 3}, rng, 0.5, true);
  auto b1 = random_tensor({3}, rng, 0.5, true);
  auto k2 = random_tensor({2, 3, 3}, rng, 0.5, true);
  Rng wrng(9);
  T w;  // fixed random projection
  {
    auto probe = conv1d(elu(conv1d(x, k1, b1, 1)), k2, 1);
    w = random_tensor(probe.shape(), wrng);
  }
  auto loss_fn = [&]() {
    auto h = elu(conv1d(x, k1, b1, 1));
    return dot(conv1d(h, k2, 1), w);
  };
  for (T* p : {&k1, &b1, &k2})
    CHECK(gradcheck(*p, loss_fn, rng) < 1e-5);
}

TEST_CASE("per-op gradients match finite differences") {
  Rng rng(10);
  auto check_unary = [&rng](auto make) {
    auto x = random_tensor({2, 3, 4}, rng, 1.0, true);
    // keep relu/elu inputs away from the kink
    for (Eigen::Index i = 0; i < x.numel(); ++i)
      if (std::abs(x.values()[i]) < 1e-3) x.values()[i] = 0.1;
    auto w = random_tensor({2, 3, 4}, rng);
    auto fn = [&]() { return dot(make(x), w); };
    CHECK(gradcheck(x, fn, rng) < 1e-5);
  };
  check_unary([](const T& t) { return relu(t); });
  check_unary([](const T& t) { return elu(t); });
  check_unary([](const T& t) { return tanh_act(t); });
  check_unary([](const T& t) { return logistic(t); });
  check_unary([](const T& t) { return gelu(t); });

  auto a = random_tensor({2, 2, 3}, rng, 1.0, true);
  auto b = random_tensor({2, 2, 3}, rng, 1.0, true);
  auto w = random_tensor({2, 2, 3}, rng);
  auto fn_mul = [&]() { return dot(mul(a, b), w); };
  CHECK(gradcheck(a, fn_mul, rng) < 1e-5);
  CHECK(gradcheck(b, fn_mul, rng) < 1e-5);

  auto s = random_tensor({2}, rng, 1.0, true);
  auto t3 = random_tensor({1, 2, 3}, rng, 1.0, true);
  auto w3 = random_tensor({1, 2, 3}, rng);
  auto fn_mc = [&]() { return dot(mul_channel(t3, s), w3); };
  CHECK(gradcheck(s, fn_mc, rng) < 1e-5);
  CHECK(gradcheck(t3, fn_mc, rng) < 1e-5);
  auto fn_ac = [&]() { return dot(add_channel(t3, s), w3); };
  CHECK(gradcheck(s, fn_ac, rng) < 1e-5);

  auto denom = T::scalar(1.7, true);
  auto fn_div = [&]() { return dot(div_scalar(t3, denom), w3); };
  CHECK(gradcheck(denom, fn_div, rng) < 1e-5);
  CHECK(gradcheck(t3, fn_div, rng) < 1e-5);

  auto g = random_tensor({2}, rng, 1.0, true);
  auto blk = random_tensor({1, 2, 3}, rng, 1.0, true);
  auto fn_rc = [&]() { return dot(residual_combine(t3, blk, g), w3); };
  CHECK(gradcheck(g, fn_rc, rng) < 1e-5);
  CHECK(gradcheck(blk, fn_rc, rng) < 1e-5);
  CHECK(gradcheck(t3, fn_rc, rng) < 1e-5);

  auto c1 = random_tensor({1, 2, 3}, rng, 1.0, true);
  auto c2 = random_tensor({1, 3, 3}, rng, 1.0, true);
  auto wc = random_tensor({1, 5, 3}, rng);
  auto fn_cat = [&]() { return dot(concat_channels(c1, c2), wc); };
  CHECK(gradcheck(c1, fn_cat, rng) < 1e-5);
  CHECK(gradcheck(c2, fn_cat, rng) < 1e-5);
}

TEST_CASE("batchnorm gradients match finite differences in both modes") {
  Rng rng(11);
  for (bool train : {true, false}) {
    auto x = random_tensor({3, 2, 4}, rng, 1.0, true);
    auto w = random_tensor({2}, rng, 1.0, true);
    w.values() += 2.0;  // keep scales away from zero
    auto b = random_tensor({2}, rng, 1.0, true);
    auto proj = random_tensor({3, 2, 4}, rng);
    Eigen::ArrayXd rm = Eigen::ArrayXd::Zero(2), rv = Eigen::ArrayXd::Ones(2);
    auto fn = [&]() {
      Eigen::ArrayXd m = rm, v = rv;  // keep running stats fixed across calls
      return dot(batchnorm1d(x, w, b, m, v, train, 0.1, 1e-5), proj);
    };
    CHECK(gradcheck(x, fn, rng) < 1e-5);
    CHECK(gradcheck(w, fn, rng) < 1e-5);
    CHECK(gradcheck(b, fn, rng) < 1e-5);
  }
}

TEST_CASE("cross-entropy gradient matches finite differences") {
  Rng rng(12);
  auto logits = random_tensor({2, 2, 3}, rng, 1.0, true);
  std::vector<std::uint8_t> targets(6);
  for (auto& t : targets) t = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
  auto fn = [&]() { return cross_entropy(logits, targets); };
  CHECK(gradcheck(logits, fn, rng) < 1e-5);
}

TEST_CASE("detach preserves values and cuts gradient flow") {
  Rng rng(13);
  auto x = random_tensor({2, 2, 3}, rng, 1.0, true);
  auto d = x.detach();
  CHECK((d.values() == x.values()).all());
  CHECK_FALSE(d.requires_grad());

  x.zero_grad();
  auto w = random_tensor({2, 2, 3}, rng);
  backward(dot(elu(d), w));
  CHECK(x.grad().abs().maxCoeff() == 0.0);
}

TEST_CASE("detached iteration segment blocks upstream gradients exactly") {
  // phi2 = g_w * (g_w * (f_w * x)) per channel. Detaching after the first
  // iteration must (a) zero the f_w gradient and (b) keep exactly the second
  // path's g_w contribution, which for this bilinear chain is half the
  // full-graph gradient.
  Rng rng(14);
  auto x = random_tensor({1, 2, 3}, rng);
  auto f_w = random_tensor({2}, rng, 1.0, true);
  auto g_w = random_tensor({2}, rng, 1.0, true);
  auto w = random_tensor({1, 2, 3}, rng);

  f_w.zero_grad();
  g_w.zero_grad();
  auto phi1 = mul_channel(mul_channel(x, f_w), g_w).detach();
  backward(dot(mul_channel(phi1, g_w), w));
  CHECK(f_w.grad().abs().maxCoeff() == 0.0);  // gradient only via tracked segment
  const Eigen::ArrayXd g_detached = g_w.grad();

  f_w.zero_grad();
  g_w.zero_grad();
  backward(dot(mul_channel(mul_channel(mul_channel(x, f_w), g_w), g_w), w));
  CHECK(f_w.grad().abs().maxCoeff() > 0.0);
  CHECK((g_w.grad() - 2.0 * g_detached).abs().maxCoeff() < 1e-12);
}

TEST_CASE("forward values are deterministic for identical seeds") {
  auto build = [] {
    Rng rng(42);
    auto x = random_tensor({2, 2, 5}, rng);
    auto k = random_tensor({2, 2, 3}, rng);
    return conv1d(elu(conv1d(x, k, 1)), k, 1);
  };
  auto a = build();
  auto b = build();
  CHECK((a.values() == b.values()).all());
}
