#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mambo/cibm.hpp"
#include "mambo/data.hpp"
#include "mambo/gradcheck.hpp"
#include "mambo/model.hpp"
#include "mambo/train.hpp"

using namespace mambo;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(const Shape& s, std::mt19937_64& rng, const std::string& name = "", bool leaf = false) {
  std::normal_distribution<double> d(0, 1);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = d(rng);
  return leaf ? T64::leaf(s, v, name) : T64::constant(s, v);
}

void set_pointwise(ChannelGate<double>& gate, double bias) {
  auto w = gate.pointwise().weight.mutable_values();
  std::fill(w.begin(), w.end(), 0.0);
  auto b = gate.pointwise().bias.mutable_values();
  std::fill(b.begin(), b.end(), bias);
}

void expect_simplex_rows(const T64& omega, double tol) {
  for (int r = 0; r < omega.dim(0); ++r) {
    double s = 0;
    for (int k = 0; k < omega.dim(1); ++k) {
      const double v = omega[r * omega.dim(1) + k];
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, tol);
  }
}

}  // namespace

TEST(Mix, SingleComponentCopiesLatent) {
  auto omega = T64::constant({3, 1}, {1, 1, 1});
  auto z = T64::constant({2, 1}, {0.5, -2.0});
  auto m = mix(omega, z);
  ASSERT_EQ(m.shape(), (Shape{2, 3}));
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(m[c], 0.5);
    EXPECT_EQ(m[3 + c], -2.0);
  }
}

TEST(Mix, OneHotRowsSelectComponents) {
  // Row c picks component (c + 1) % K.
  const int n = 4, k = 5;
  std::vector<double> w(n * k, 0.0);
  for (int c = 0; c < n; ++c) w[c * k + (c + 1) % k] = 1.0;
  std::mt19937_64 rng(1);
  auto z = random_tensor({3, k}, rng);
  auto m = mix(T64::constant({n, k}, w), z);
  for (int b = 0; b < 3; ++b)
    for (int c = 0; c < n; ++c) EXPECT_EQ(m[b * n + c], z[b * k + (c + 1) % k]);
}

TEST(Mix, UniformRowAveragesComponents) {
  MixingWeights<double> w;
  ParameterStore<double> store;
  w = MixingWeights<double>(store, "omega", 2, 4);
  auto z = T64::constant({1, 4}, {1, 2, 3, 6});
  auto m = mix(w.omega(), z);
  EXPECT_NEAR(m[0], 3.0, 1e-12);
  EXPECT_NEAR(m[1], 3.0, 1e-12);
}

TEST(Mix, RejectsMismatchedK) {
  EXPECT_THROW(mix(T64::zeros({2, 3}), T64::zeros({1, 4})), ShapeError);
  EXPECT_THROW(mix(T64::zeros({2, 3, 1}), T64::zeros({1, 3})), ShapeError);
}

TEST(MixingWeights, StartUniform) {
  ParameterStore<double> store;
  MixingWeights<double> w(store, "omega", 3, 8);
  auto o = w.omega();
  for (double v : o.values()) EXPECT_NEAR(v, 1.0 / 8, 1e-15);
}

TEST(Fuse, OpenGateWithZeroMixtureIsIdentity) {
  ParameterStore<double> store;
  Rng rng(2);
  ChannelGate<double> gate(store, rng, "gate", 4);
  set_pointwise(gate, 40.0);
  std::mt19937_64 r(3);
  auto f = random_tensor({2, 4, 6, 6}, r);
  auto out = fuse(f, T64::zeros({2, 4}), gate);
  ASSERT_EQ(out.shape(), f.shape());
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(out[i], f[i], 1e-4);
}

TEST(Fuse, OpenGateAddsMixturePlanes) {
  ParameterStore<double> store;
  Rng rng(4);
  ChannelGate<double> gate(store, rng, "gate", 3);
  set_pointwise(gate, 40.0);
  std::mt19937_64 r(5);
  auto f = random_tensor({1, 3, 4, 4}, r);
  auto m = T64::constant({1, 3}, {1.0, -0.5, 2.0});
  auto out = fuse(f, m, gate);
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 16; ++p) EXPECT_NEAR(out[c * 16 + p], f[c * 16 + p] + m[c], 1e-12);
}

TEST(Fuse, ClosedGateSuppressesFeature) {
  ParameterStore<double> store;
  Rng rng(6);
  ChannelGate<double> gate(store, rng, "gate", 2);
  set_pointwise(gate, -20.0);
  std::mt19937_64 r(7);
  auto out = fuse(random_tensor({1, 2, 4, 4}, r), random_tensor({1, 2}, r), gate);
  for (double v : out.values()) EXPECT_LT(std::abs(v), 1e-7);
}

TEST(Fuse, GateIsChannelLevelAndInUnitInterval) {
  ParameterStore<double> store;
  Rng rng(8);
  ChannelGate<double> gate(store, rng, "gate", 3);
  std::mt19937_64 r(9);
  auto s = gate(random_tensor({2, 6, 4, 4}, r));
  ASSERT_EQ(s.shape(), (Shape{2, 3}));
  for (double v : s.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Fuse, RejectsShapeMismatch) {
  ParameterStore<double> store;
  Rng rng(10);
  ChannelGate<double> gate(store, rng, "gate", 3);
  EXPECT_THROW(fuse(T64::zeros({1, 3, 4, 4}), T64::zeros({1, 4}), gate), ShapeError);
  EXPECT_THROW(fuse(T64::zeros({2, 3, 4, 4}), T64::zeros({1, 3}), gate), ShapeError);
}

TEST(Fuse, GradientMatchesFiniteDifferences) {
  ParameterStore<double> store;
  Rng rng(11);
  ChannelGate<double> gate(store, rng, "gate", 2);
  MixingWeights<double> w(store, "omega", 2, 3);
  std::mt19937_64 r(12);
  auto f = random_tensor({1, 2, 4, 4}, r, "feature", true);
  auto z = random_tensor({1, 3}, r, "z", true);
  auto logits = w.logits();
  auto vals = logits.mutable_values();
  for (auto& v : vals) v = std::normal_distribution<double>(0, 1)(r);
  auto fn = [&] { return sum(square(fuse(f, mix(w.omega(), z), gate))); };
  auto params = store.all();
  params.push_back(f);
  params.push_back(z);
  auto res = finite_diff_check<double>(fn, params, 1e-6, 300);
  EXPECT_LE(res.max_rel_error, 1e-4);
  for (const auto& p : store.all()) {
    double norm = 0;
    for (double g : p.grad()) {
      ASSERT_TRUE(std::isfinite(g));
      norm += std::abs(g);
    }
    EXPECT_GT(norm, 0.0) << p.name();
  }
}

TEST(Cibm, HookRejectsExtraStage) {
  ParameterStore<double> store;
  Rng rng(13);
  Cibm<double> cibm(store, rng, {4, 2}, 3);
  auto h = cibm.hook(T64::zeros({1, 3}));
  EXPECT_THROW(h(2, T64::zeros({1, 4, 4, 4})), ShapeError);
  EXPECT_THROW(intervention_pipeline(cibm, T64::zeros({1, 3}), {T64::zeros({1, 4, 4, 4})}), ShapeError);
}

TEST(Cibm, ParameterNamesPerStage) {
  ParameterStore<double> store;
  Rng rng(14);
  Cibm<double> cibm(store, rng, {4, 2}, 3);
  EXPECT_EQ(cibm.stages(), 2u);
  for (const char* n : {"cibm.stage0.omega_logits", "cibm.stage1.omega_logits", "cibm.stage0.gate.conv3.weight",
                        "cibm.stage1.gate.conv1.bias"})
    EXPECT_TRUE(store.contains(n)) << n;
  EXPECT_EQ(store.get("cibm.stage1.omega_logits").shape(), (Shape{2, 3}));
}

TEST(Cibm, PipelineSharesOneLatentAcrossStages) {
  ParameterStore<double> store;
  Rng rng(15);
  Cibm<double> cibm(store, rng, {4, 2}, 3);
  std::mt19937_64 r(16);
  auto z = random_tensor({1, 3}, r, "z", true);
  auto out = intervention_pipeline(cibm, z, {random_tensor({1, 4, 4, 4}, r), random_tensor({1, 2, 8, 8}, r)});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].shape(), (Shape{1, 4, 4, 4}));
  EXPECT_EQ(out[1].shape(), (Shape{1, 2, 8, 8}));
  for (const auto& o : out) EXPECT_TRUE(depends_on(o, z));
}

TEST(Cibm, DisabledModelMatchesPlainDecode) {
  ModelConfig cfg;
  cfg.components = 4;
  cfg.use_gsm = false;
  cfg.use_cibm = false;
  MamboNet<double> net(cfg, 17);
  const auto data = generate_synthetic(1, 16, 18);
  auto img = to_tensor<double>(data[0].image);
  auto noise = NoiseSource::zero();
  auto pass = net.forward(img, nullptr, Mode::inference, noise);
  auto plain = net.backbone().decode(net.backbone().encode(img), img,
                                     [](std::size_t, const T64& f) { return f; });
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_EQ(pass.logits[i], plain[i]);
  EXPECT_TRUE(pass.mixed.empty());
}

TEST(Cibm, EnabledModelChangesLogitsAndSharesLatent) {
  ModelConfig with;
  with.components = 4;
  ModelConfig without = with;
  without.use_cibm = false;
  MamboNet<double> a(with, 19), b(without, 19);
  const auto data = generate_synthetic(1, 16, 20);
  auto img = to_tensor<double>(data[0].image);
  auto mask = to_tensor<double>(data[0].mask);
  NoiseSource na(21), nb(21);
  auto pa = a.forward(img, &mask, Mode::train, na);
  auto pb = b.forward(img, &mask, Mode::train, nb);
  double diff = 0;
  for (std::size_t i = 0; i < pa.logits.size(); ++i) diff += std::abs(pa.logits[i] - pb.logits[i]);
  EXPECT_GT(diff, 0.0);
  ASSERT_TRUE(pa.latent.has_value());
  ASSERT_EQ(pa.mixed.size(), 3u);
  for (const auto& m : pa.mixed) EXPECT_TRUE(depends_on(m, pa.latent->z));
}

TEST(Cibm, OmegaStaysOnSimplexDuringTraining) {
  ModelConfig cfg;
  cfg.components = 6;
  MamboNet<double> net(cfg, 22);
  const auto data = generate_synthetic(2, 16, 23);
  auto img = to_tensor<double>({&data[0].image, &data[1].image});
  auto mask = to_tensor<double>({&data[0].mask, &data[1].mask});
  Sgd<double> sgd(0.9, 0.01);
  const auto initial = net.cibm().weights(0).logits().values();
  const std::vector<double> start(initial.begin(), initial.end());
  for (int step = 0; step < 50; ++step) {
    NoiseSource noise(100 + step);
    net.parameters().zero_grad();
    auto pass = net.forward(img, &mask, Mode::train, noise);
    backward(net.losses(pass, mask).total);
    if (step == 0) {
      double g = 0;
      for (std::size_t s = 0; s < net.cibm().stages(); ++s)
        for (double v : net.cibm().weights(s).logits().grad()) g += std::abs(v);
      EXPECT_GT(g, 0.0);
    }
    sgd.step(net.parameters(), 0.5);
    for (std::size_t s = 0; s < net.cibm().stages(); ++s) expect_simplex_rows(net.cibm().weights(s).omega(), 1e-6);
  }
  const auto now = net.cibm().weights(0).logits().values();
  EXPECT_NE(std::vector<double>(now.begin(), now.end()), start);
}
