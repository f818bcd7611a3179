#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "iterthink/model.hpp"
#include "iterthink/parallel.hpp"
#include "testutil.hpp"

using namespace iterthink;
using namespace iterthink::testutil;
using T = Tensor<double>;

int main(int argc, char** argv) {
  tune_allocator();
  doctest::Context ctx(argc, argv);
  return ctx.run();
}

namespace {

T bit_input(std::initializer_list<double> bits) {
  T::Array a(static_cast<Eigen::Index>(bits.size()));
  Eigen::Index i = 0;
  for (double b : bits) a[i++] = b;
  return T(Shape{1, 1, static_cast<Eigen::Index>(bits.size())}, std::move(a));
}

}  // namespace

TEST_CASE("readout head channel table") {
  ModelSpec s32 = ModelSpec::paper_defaults(Variant::DTL, 32);
  CHECK(s32.mid_channels() == 16);  // 32 -> 16 -> 2
  ModelSpec s4 = ModelSpec::paper_defaults(Variant::DTL, 4);
  CHECK(s4.mid_channels() == 2);  // 4 -> 2 -> 2
  Model<double> m(s4, 1);
  auto x = bit_input({1, 0, 1, 1});
  auto r = m.run(x, 2, Phase::eval);
  CHECK(r.logits.shape() == Shape{1, 2, 4});
}

TEST_CASE("equal seeds build bit-identical parameters") {
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DTL, 8);
  Model<double> a(spec, 42), b(spec, 42), c(spec, 43);
  auto pa = a.parameters();
  auto pb = b.parameters();
  auto pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool all_equal = true, any_diff_seed = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    all_equal = all_equal && (pa[i].tensor->values() == pb[i].tensor->values()).all();
    any_diff_seed = any_diff_seed || (pa[i].tensor->values() != pc[i].tensor->values()).any();
  }
  CHECK(all_equal);
  CHECK(any_diff_seed);
}

TEST_CASE("gelu is rejected inside the constrained variant") {
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DTL, 4);
  spec.activation = Activation::gelu;
  CHECK_THROWS_AS(Model<double>(spec, 1), ConfigError);
  ModelSpec dtr = ModelSpec::paper_defaults(Variant::DTR, 4);
  dtr.activation = Activation::gelu;
  CHECK_NOTHROW(Model<double>(dtr, 1));
}

TEST_CASE("forward_init produces [B,w,L] for any L") {
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DTL, 6);
  Model<double> m(spec, 3);
  for (Eigen::Index L : {4, 9, 33}) {
    T x = T::zeros({2, 1, L});
    auto s = m.forward_init(x, Phase::eval);
    CHECK(s.phi.shape() == Shape{2, 6, L});
  }
}

TEST_CASE("golden regression: phi(0) and logits for the pinned seed") {
  // frozen from the first verified build (DTL paper defaults, w=4, seed 7)
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DTL, 4);
  Model<double> m(spec, 7);
  m.prepare_eval();
  NoGradGuard ng;
  auto x = bit_input({1, 0, 1, 1});
  auto s = m.forward_init(x, Phase::eval);
  const double phi0_expect[] = {
      0.055660950262506531,  0.083793621514904437, 0.23239729380806404,
      -0.036595359737777333, 0.35958033982239768,  -0.30005352635445171,
      0.12762479132708945,   0.23478411558873152,  -0.24771317646556731,
      0.19196827132910838,   -0.30160692019342261, -0.018166810944504719,
      0.30843927651232356,   -0.31515770551324157, 0.2209076462724788,
      0.017403804382251996};
  REQUIRE(s.phi.numel() == 16);
  for (int i = 0; i < 16; ++i)
    CHECK(s.phi.values()[i] == doctest::Approx(phi0_expect[i]).epsilon(1e-10));
  CHECK(l2_norm(s.phi) == doctest::Approx(0.88841527014206445).epsilon(1e-10));

  auto r = m.run(x, 3, Phase::eval);
  const double logits_expect[] = {-0.0049032357430618852, 0.0026532600460030531,
                                  -0.0069586444853096084, 0.0031673703297333483,
                                  0.0074149323486330668,  0.0024764259780776631,
                                  -0.012213265127174371,  -0.0012510923633247909};
  for (int i = 0; i < 8; ++i)
    CHECK(r.logits.values()[i] == doctest::Approx(logits_expect[i]).epsilon(1e-9));
}

TEST_CASE("step preserves scratchpad shape and increments the counter") {
  for (Variant v : {Variant::DT, Variant::DTR, Variant::DTL}) {
    ModelSpec spec = ModelSpec::paper_defaults(v, 5);
    Model<double> m(spec, 11);
    m.prepare_eval();
    NoGradGuard ng;
    auto x = bit_input({1, 1, 0, 1, 0, 0});
    auto s = m.forward_init(x, Phase::eval);
    auto s2 = m.step(s, x, Phase::eval);
    CHECK(s2.phi.shape() == s.phi.shape());
    CHECK(s2.iteration == 1);
  }
}

TEST_CASE("step rejects mismatched scratchpad and input lengths") {
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DTL, 4);
  Model<double> m(spec, 1);
  NoGradGuard ng;
  auto x = bit_input({1, 0, 1, 1});
  auto s = m.forward_init(x, Phase::eval);
  auto x_long = bit_input({1, 0, 1, 1, 0});
  CHECK_THROWS_AS(m.step(s, x_long, Phase::eval), ShapeError);
}

TEST_CASE("DT step never reads the input") {
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DT, 4);
  Model<double> m(spec, 5);
  NoGradGuard ng;
  auto xa = bit_input({1, 0, 1, 1});
  auto xb = bit_input({0, 1, 0, 0});
  auto s = m.forward_init(xa, Phase::eval);
  auto ra = m.step(s, xa, Phase::eval);
  auto rb = m.step(s, xb, Phase::eval);
  CHECK((ra.phi.values() == rb.phi.values()).all());
}

TEST_CASE("normalized DTL steps contract random state pairs") {
  Rng rng(17);
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DTL, 6);
  Model<double> m(spec, 23);
  m.prepare_eval();
  NoGradGuard ng;
  auto x = bit_input({1, 0, 0, 1, 1, 0, 1, 0});
  for (int i = 0; i < 100; ++i) {
    auto a = random_tensor({1, 6, 8}, rng);
    auto b = random_tensor({1, 6, 8}, rng);
    const double before = l2_distance(a, b);
    const double after = l2_distance(m.step(Scratchpad<double>{a, 0}, x, Phase::eval).phi,
                                     m.step(Scratchpad<double>{b, 0}, x, Phase::eval).phi);
    CHECK(after < before);
  }
}

TEST_CASE("run composes init, steps and readout") {
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DTL, 4);
  Model<double> m(spec, 9);
  m.prepare_eval();
  NoGradGuard ng;
  auto x = bit_input({1, 1, 0, 1});

  auto r1 = m.run(x, 1, Phase::eval);
  auto manual = m.readout(m.step(m.forward_init(x, Phase::eval), x, Phase::eval), Phase::eval);
  CHECK((r1.logits.values() == manual.values()).all());

  auto r5 = m.run(x, 5, Phase::eval, /*record=*/true);
  CHECK(r5.trajectory.norms.size() == 6);       // M+1
  CHECK(r5.trajectory.step_diffs.size() == 5);  // M
  CHECK_FALSE(r5.divergence.has_value());
}

TEST_CASE("DTL step differences shrink geometrically from a random start") {
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DTL, 8);
  Model<double> m(spec, 31);
  m.prepare_eval();
  NoGradGuard ng;
  auto x = bit_input({0, 1, 1, 0, 1, 0, 0, 1});
  auto r = m.run(x, 60, Phase::eval, true);
  const auto& d = r.trajectory.step_diffs;
  // geometric decay while differences are above the f64 noise floor
  CHECK(d[10] < d[0]);
  CHECK(d[20] < 0.5 * d[10]);
  CHECK(d[30] < 1e-4 * d[0]);
  CHECK(d.back() < 1e-10);
}

TEST_CASE("divergence is reported structurally, not thrown") {
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DT, 4);
  Model<float> m(spec, 3);
  // inflate the recurrent kernels so iteration overflows in f32
  for (auto* c : m.g_conv_layers()) c->kernel().values() *= 1e12f;
  m.invalidate_caches();
  NoGradGuard ng;
  auto x = Tensor<float>::from({1, 1, 4}, {1, 0, 1, 1});
  auto r = m.run(x, 50, Phase::eval, true);
  REQUIRE(r.divergence.has_value());
  CHECK(r.divergence->iteration >= 1);
  CHECK(r.divergence->iteration <= 50);
  CHECK_FALSE(r.logits.defined());
}

TEST_CASE("batch evaluation equals instance-by-instance evaluation") {
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DTL, 6);
  Model<double> m(spec, 13);
  m.prepare_eval();
  NoGradGuard ng;
  Rng rng(19);
  T::Array xs(3 * 1 * 10);
  for (Eigen::Index i = 0; i < xs.size(); ++i) xs[i] = rng.uniform_int(0, 1);
  T batch(Shape{3, 1, 10}, xs);
  auto rb = m.run(batch, 4, Phase::eval);
  for (int b = 0; b < 3; ++b) {
    T one(Shape{1, 1, 10}, xs.segment(b * 10, 10).eval());
    auto r1 = m.run(one, 4, Phase::eval);
    for (int i = 0; i < 20; ++i)
      CHECK(std::abs(r1.logits.values()[i] - rb.logits.values()[b * 20 + i]) < 1e-10);
  }
}

TEST_CASE("predict_bits argmax convention") {
  auto logits = T::from({1, 2, 3}, {2.0, 0.0, -1.0,   // channel 0
                                    5.0, 0.0, -3.0});  // channel 1
  auto bits = predict_bits(logits);
  CHECK(bits[0] == 1);  // (2,5) -> 1
  CHECK(bits[1] == 0);  // tie (0,0) -> 0
  CHECK(bits[2] == 0);  // (-1,-3) -> 0

  Rng rng(21);
  auto rl = random_tensor({2, 2, 7}, rng);
  auto got = predict_bits(rl);
  for (int b = 0; b < 2; ++b)
    for (int l = 0; l < 7; ++l) {
      const double l0 = rl.values()[(b * 2 + 0) * 7 + l];
      const double l1 = rl.values()[(b * 2 + 1) * 7 + l];
      CHECK(got[b * 7 + l] == (l1 > l0 ? 1 : 0));
    }
}

TEST_CASE("state dict round-trips through a fresh model") {
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DTL, 6);
  Model<double> a(spec, 77);
  a.prepare_eval();
  auto sd = a.state_dict();

  Model<double> b(spec, 123);  // different init, then overwritten
  b.load_state_dict(sd);
  NoGradGuard ng;
  auto x = bit_input({1, 0, 0, 1, 1, 0});
  auto ra = a.run(x, 3, Phase::eval);
  auto rb = b.run(x, 3, Phase::eval);
  CHECK((ra.logits.values() == rb.logits.values()).all());

  sd.push_back(StateEntry{"bogus", {1}, {0.0}});
  CHECK_THROWS_AS(b.load_state_dict(sd), ConfigError);
}

TEST_CASE("topology description pins the wiring") {
  ModelSpec spec = ModelSpec::paper_defaults(Variant::DTL, 32);
  Model<double> m(spec, 1);
  const std::string t = m.topology_description();
  CHECK(t.find("DTL w=32") != std::string::npos);
  CHECK(t.find("snconv") != std::string::npos);
  CHECK(t.find("32->16") != std::string::npos);
  CHECK(t.find("interp(gamma)") != std::string::npos);
}
