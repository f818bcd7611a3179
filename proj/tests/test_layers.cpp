#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "iterthink/layers.hpp"
#include "iterthink/parallel.hpp"
#include "testutil.hpp"

using namespace iterthink;
using namespace iterthink::testutil;
using T = Tensor<double>;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

int main(int argc, char** argv) {
  tune_allocator();
  doctest::Context ctx(argc, argv);
  return ctx.run();
}

namespace {
Vec seeded_unit(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  Vec u(n);
  for (Eigen::Index i = 0; i < n; ++i) u[i] = rng.normal();
  u.normalize();
  return u;
}
}  // namespace

TEST_CASE("reshape_conv_weights layout and round trip") {
  auto k = T::from({2, 1, 3}, {1, 2, 3, 4, 5, 6});
  Mat m = reshape_conv_weights(k);
  REQUIRE(m.rows() == 2);
  REQUIRE(m.cols() == 3);
  CHECK(m(0, 0) == 1);
  CHECK(m(0, 2) == 3);
  CHECK(m(1, 0) == 4);

  Rng rng(1);
  auto k2 = random_tensor({4, 3, 3}, rng);
  Mat m2 = reshape_conv_weights(k2);
  CHECK(m2.rows() == 4);
  CHECK(m2.cols() == 9);
  auto back = unreshape_conv_weights<double>(m2, 3, 3);
  CHECK((back.values() == k2.values()).all());
}

TEST_CASE("power iteration on matrices with known norms") {
  Vec u3 = seeded_unit(3, 2);
  Mat id = Mat::Identity(3, 3);
  CHECK(spectral_norm_power_iteration<double>(id, 1, u3) == doctest::Approx(1.0).epsilon(1e-12));

  Vec u2 = seeded_unit(2, 3);
  Mat d(2, 2);
  d << 3, 0, 0, 1;
  CHECK(spectral_norm_power_iteration<double>(d, 50, u2) == doctest::Approx(3.0).epsilon(1e-10));

  Vec uz = seeded_unit(2, 4);
  CHECK(spectral_norm_power_iteration<double>(Mat::Zero(2, 3), 5, uz) == 0.0);
}

TEST_CASE("power iteration agrees with the SVD oracle on a random 20x12 matrix") {
  Rng rng(5);
  Mat m(20, 12);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  Vec u = seeded_unit(20, 6);
  const double sigma_hat = spectral_norm_power_iteration<double>(m, 100, u);
  const double sigma = exact_spectral_norm<double>(m);
  CHECK(std::abs(sigma_hat - sigma) / sigma < 1e-6);
}

TEST_CASE("power-iteration estimate is a lower bound up to roundoff") {
  Rng rng(7);
  for (int rep = 0; rep < 30; ++rep) {
    const Eigen::Index r = rng.uniform_int(2, 24), c = rng.uniform_int(2, 24);
    Mat m(r, c);
    for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    Vec u = seeded_unit(r, 100 + rep);
    const int iters = static_cast<int>(rng.uniform_int(1, 40));
    const double est = spectral_norm_power_iteration<double>(m, iters, u);
    CHECK(est <= exact_spectral_norm<double>(m) + 1e-9);
  }
}

TEST_CASE("exact spectral norm analytic cases") {
  CHECK(exact_spectral_norm<double>(Mat::Zero(3, 4)) == 0.0);
  Rng rng(8);
  Vec a(5), b(3);
  for (int i = 0; i < 5; ++i) a[i] = rng.normal();
  for (int i = 0; i < 3; ++i) b[i] = rng.normal();
  Mat outer = a * b.transpose();
  CHECK(exact_spectral_norm<double>(outer) ==
        doctest::Approx(a.norm() * b.norm()).epsilon(1e-12));
}

TEST_CASE("normalized kernel arithmetic") {
  Rng rng(9);
  ConvLayer<double> layer("c", 2, 3, 3, false, true, 1e-3, rng);
  // rescale so the exact norm is 2, then converge the estimate
  Mat m = reshape_conv_weights(layer.kernel());
  layer.kernel().values() *= 2.0 / exact_spectral_norm<double>(m);
  layer.bump_version();
  layer.reconverge();
  auto norm_kernel = layer.normalized_kernel();
  const double got = exact_spectral_norm<double>(reshape_conv_weights(norm_kernel));
  CHECK(got == doctest::Approx(2.0 / (2.0 + 1e-3)).epsilon(1e-8));

  // norm-1 kernel ends up at 1/(1+eps) < 1
  layer.kernel().values() *= 0.5;
  layer.bump_version();
  layer.reconverge();
  const double got1 =
      exact_spectral_norm<double>(reshape_conv_weights(layer.normalized_kernel()));
  CHECK(got1 == doctest::Approx(1.0 / (1.0 + 1e-3)).epsilon(1e-8));

  ConvLayer<double> plain("p", 2, 3, 3, false, false, 1e-3, rng);
  CHECK_THROWS_AS(plain.normalized_kernel(), ConfigError);
}

TEST_CASE("normalized layers stay strictly below norm one") {
  Rng rng(10);
  for (int rep = 0; rep < 25; ++rep) {
    const Eigen::Index c = rng.uniform_int(2, 12);
    ConvLayer<double> layer("c", c, c, 3, false, true, 1e-3, rng);
    layer.kernel().values() *= rng.uniform(0.2, 8.0);  // arbitrary scale
    layer.bump_version();
    layer.reconverge();
    const double norm =
        exact_spectral_norm<double>(reshape_conv_weights(layer.normalized_kernel()));
    CHECK(norm < 1.0);
  }
}

TEST_CASE("normalized-weight cache is version-coherent") {
  Rng rng(11);
  ConvLayer<double> layer("c", 3, 3, 3, false, true, 1e-3, rng);
  layer.reconverge();
  auto a = layer.normalized_kernel();
  auto b = layer.normalized_kernel();
  CHECK((a.values() == b.values()).all());  // repeated calls identical

  layer.kernel().values()[0] += 0.5;
  layer.bump_version();
  auto c = layer.normalized_kernel();
  CHECK(((a.values() != c.values()).any()));  // stale cache not reused
}

TEST_CASE("graph-mode and cached normalization produce identical values") {
  Rng rng(12);
  ConvLayer<double> layer("c", 3, 4, 3, false, true, 1e-3, rng);
  auto x = random_tensor({2, 3, 6}, rng);
  auto with_graph = layer.forward(x);
  T cached;
  {
    NoGradGuard ng;
    cached = layer.forward(x);
  }
  CHECK((with_graph.values() == cached.values()).all());
}

TEST_CASE("residual combiner interpolation limits") {
  Rng rng(13);
  auto id = random_tensor({1, 2, 4}, rng);
  auto blk = random_tensor({1, 2, 4}, rng);

  ResidualCombiner<double> c0("c", 2);
  c0.gamma_raw().values().setConstant(-1000.0);
  CHECK((c0.combine(id, blk).values() == id.values()).all());

  ResidualCombiner<double> c1("c", 2);
  c1.gamma_raw().values().setConstant(1000.0);
  CHECK((c1.combine(id, blk).values() == blk.values()).all());

  ResidualCombiner<double> ch("c", 2);  // gamma_raw = 0 -> elementwise mean
  auto mid = ch.combine(id, blk);
  CHECK((mid.values() - 0.5 * (id.values() + blk.values())).abs().maxCoeff() < 1e-15);

  auto bad = random_tensor({1, 3, 4}, rng);
  CHECK_THROWS_AS(ch.combine(id, bad), ShapeError);
}

TEST_CASE("gamma stays in the open unit interval") {
  // +-30 is near the edge of what f64 can represent without the logistic
  // rounding to exactly 0 or 1
  ResidualCombiner<double> c("c", 4);
  c.gamma_raw().values() << -30, -1, 1, 30;
  auto g = c.gamma();
  for (int i = 0; i < 4; ++i) {
    CHECK(g[i] > 0.0);
    CHECK(g[i] < 1.0);
  }
}

TEST_CASE("activation admissibility in constrained contexts") {
  CHECK_NOTHROW(check_activation_admissible(Activation::elu, true));
  CHECK_NOTHROW(check_activation_admissible(Activation::relu, true));
  CHECK_NOTHROW(check_activation_admissible(Activation::tanh, true));
  CHECK_THROWS_AS(check_activation_admissible(Activation::gelu, true), ConfigError);
  CHECK_NOTHROW(check_activation_admissible(Activation::gelu, false));
  CHECK(activation_lipschitz(Activation::gelu) > 1.0);
  CHECK(activation_lipschitz(Activation::elu) == 1.0);
}

TEST_CASE("gelu slope reaches its registered Lipschitz constant near sqrt 2") {
  // max |gelu'| is attained at x = sqrt(2); sample the slope there
  const double x0 = std::sqrt(2.0);
  auto t = T::from({1}, {x0}, true);
  auto y = gelu(t);
  backward(sum(y));
  CHECK(t.grad()[0] == doctest::Approx(activation_lipschitz(Activation::gelu)).epsilon(1e-12));
}

TEST_CASE("residual bounds hold empirically for constructed blocks") {
  Rng rng(14);
  // block: one conv rescaled to exact norm 0.9, relu activation
  ConvLayer<double> conv("b", 3, 3, 3, false, false, 1e-3, rng);
  conv.kernel().values() *=
      0.9 / exact_spectral_norm<double>(reshape_conv_weights(conv.kernel()));

  auto block = [&](const T& t) { return relu(conv.forward(t)); };
  const double kb = 0.9;

  double worst_add = 0.0, worst_interp = 0.0;
  ResidualCombiner<double> comb("c", 3);  // gamma = 0.5
  const double interp_bound = 0.5 + 0.5 * kb;
  for (int i = 0; i < 60; ++i) {
    auto a = random_tensor({1, 3, 8}, rng);
    auto b = random_tensor({1, 3, 8}, rng);
    const double d0 = l2_distance(a, b);
    const double d_add = l2_distance(add(a, block(a)), add(b, block(b)));
    const double d_int = l2_distance(comb.combine(a, block(a)), comb.combine(b, block(b)));
    worst_add = std::max(worst_add, d_add / d0);
    worst_interp = std::max(worst_interp, d_int / d0);
  }
  CHECK(worst_add <= 1.0 + kb + 1e-9);
  CHECK(worst_interp <= interp_bound + 1e-9);
}
