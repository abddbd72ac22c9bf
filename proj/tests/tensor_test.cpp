#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mambo/gradcheck.hpp"
#include "mambo/nn.hpp"
#include "mambo/tensor.hpp"

using namespace mambo;
using T64 = Tensor<double>;

namespace {

std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

T64 random_leaf(Shape s, std::mt19937_64& rng, const std::string& name, double lo = -1, double hi = 1) {
  const auto n = numel(s);
  return T64::leaf(std::move(s), random_values(n, rng, lo, hi), name);
}

// Direct 4-loop cross-correlation with zero padding.
std::vector<double> brute_conv(const std::vector<double>& in, int n, int c, int h, int w,
                               const std::vector<double>& k, int o, int ks) {
  const int pad = (ks - 1) / 2;
  std::vector<double> out(static_cast<std::size_t>(n) * o * h * w, 0.0);
  for (int b = 0; b < n; ++b)
    for (int oc = 0; oc < o; ++oc)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double acc = 0;
          for (int ic = 0; ic < c; ++ic)
            for (int ky = 0; ky < ks; ++ky)
              for (int kx = 0; kx < ks; ++kx) {
                const int yy = y + ky - pad, xx = x + kx - pad;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                acc += k[((oc * c + ic) * ks + ky) * ks + kx] * in[((b * c + ic) * h + yy) * w + xx];
              }
          out[((b * o + oc) * h + y) * w + x] = acc;
        }
  return out;
}

}  // namespace

TEST(Elementwise, AddsVectors) {
  auto r = add(T64::constant({2}, {1, 2}), T64::constant({2}, {3, 4}));
  EXPECT_EQ(r[0], 4);
  EXPECT_EQ(r[1], 6);
}

TEST(Elementwise, LogInvertsExp) {
  std::mt19937_64 rng(1);
  auto x = T64::constant({64}, random_values(64, rng, 0.0, 5.0));
  auto y = log(exp(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-12);
}

TEST(Elementwise, ProductRuleGradient) {
  auto a = T64::leaf({1}, {2}, "a");
  auto b = T64::leaf({1}, {3}, "b");
  backward(mul(a, b));
  EXPECT_EQ(a.grad()[0], 3);
  EXPECT_EQ(b.grad()[0], 2);
}

TEST(Elementwise, BroadcastAlongChannelsAndPrefix) {
  auto a = T64::zeros({2, 3, 1, 2});
  auto per_channel = add(a, T64::constant({3}, {1, 2, 3}));
  EXPECT_EQ(per_channel[0], 1);
  EXPECT_EQ(per_channel[2], 2);
  EXPECT_EQ(per_channel[6], 1);
  auto per_sample = add(a, T64::constant({2}, {5, 7}));
  EXPECT_EQ(per_sample[5], 5);
  EXPECT_EQ(per_sample[6], 7);
}

TEST(Elementwise, BroadcastMismatchNamesBothShapes) {
  try {
    add(T64::zeros({2, 3}), T64::zeros({3, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3,2]"), std::string::npos);
  }
}

TEST(Elementwise, NonFiniteResultThrows) {
  EXPECT_THROW(log(T64::constant({1}, {-1.0})), NonFiniteError);
}

TEST(Elementwise, ClampPassesGradientOnlyInside) {
  auto x = T64::leaf({3}, {-2, 0.5, 2}, "x");
  backward(sum(clamp(x, -1.0, 1.0)));
  EXPECT_EQ(x.grad()[0], 0);
  EXPECT_EQ(x.grad()[1], 1);
  EXPECT_EQ(x.grad()[2], 0);
}

TEST(Conv2d, CenteredDeltaIsIdentity) {
  std::mt19937_64 rng(2);
  auto x = T64::constant({1, 1, 5, 5}, random_values(25, rng));
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  auto y = conv2d(x, T64::constant({1, 1, 3, 3}, k));
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, PointwiseScaling) {
  auto x = T64::constant({1, 1, 2, 2}, {1, -2, 3, 4});
  auto y = conv2d(x, T64::constant({1, 1, 1, 1}, {2}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], 2 * x[i]);
}

TEST(Conv2d, MatchesBruteForceLoops) {
  std::mt19937_64 rng(3);
  const auto in = random_values(25, rng);
  const auto k = random_values(9, rng);
  auto y = conv2d(T64::constant({1, 1, 5, 5}, in), T64::constant({1, 1, 3, 3}, k));
  const auto ref = brute_conv(in, 1, 1, 5, 5, k, 1, 3);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-14);

  const auto in2 = random_values(2 * 3 * 6 * 4, rng);
  const auto k2 = random_values(5 * 3 * 9, rng);
  auto y2 = conv2d(T64::constant({2, 3, 6, 4}, in2), T64::constant({5, 3, 3, 3}, k2));
  const auto ref2 = brute_conv(in2, 2, 3, 6, 4, k2, 5, 3);
  for (std::size_t i = 0; i < ref2.size(); ++i) EXPECT_NEAR(y2[i], ref2[i], 1e-13);
}

TEST(Conv2d, ChannelMismatchThrows) {
  EXPECT_THROW(conv2d(T64::zeros({1, 2, 4, 4}), T64::zeros({1, 3, 3, 3})), ShapeError);
  EXPECT_THROW(conv2d(T64::zeros({1, 2, 4, 4}), T64::zeros({1, 2, 5, 5})), ShapeError);
}

TEST(Activations, ReferencePoints) {
  EXPECT_EQ(gelu(T64::scalar(0)).item(), 0.0);
  EXPECT_EQ(sigmoid(T64::scalar(0)).item(), 0.5);
  auto s = softmax(T64::zeros({3}), 0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], 1.0 / 3.0, 1e-15);
  // Exact erf form: gelu(1) = Phi(1) = 0.841344746...
  EXPECT_NEAR(gelu(T64::scalar(1)).item(), 0.8413447460685429, 1e-15);
}

TEST(Activations, SigmoidSaturatesWithoutOverflow) {
  auto s = sigmoid(T64::constant({2}, {-800, 800}));
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[1], 1.0);
}

TEST(Activations, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = T64::constant({4, 7}, random_values(28, rng, -300, 300));
    for (int axis : {0, 1}) {
      auto s = softmax(x, axis);
      const int outer = axis == 0 ? 7 : 4, len = axis == 0 ? 4 : 7;
      for (int o = 0; o < outer; ++o) {
        double total = 0;
        for (int k = 0; k < len; ++k) total += axis == 0 ? s[k * 7 + o] : s[o * 7 + k];
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
    }
  }
}

TEST(Structure, RepeatSpatialTilesVector) {
  auto r = repeat_spatial(T64::constant({1, 2}, {1, 2}), 2, 2);
  EXPECT_EQ(r.shape(), (Shape{1, 2, 2, 2}));
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(r[i], 1);
    EXPECT_EQ(r[4 + i], 2);
  }
}

TEST(Structure, GlobalAveragePoolOfConstantPlane) {
  auto g = global_avg_pool(T64::full({1, 1, 4, 4}, 2.5));
  EXPECT_EQ(g.shape(), (Shape{1, 1}));
  EXPECT_EQ(g.item(), 2.5);
}

TEST(Structure, UpsampleThenAvgPoolIsIdentity) {
  std::mt19937_64 rng(5);
  auto x = T64::constant({2, 3, 4, 2}, random_values(48, rng));
  auto y = avgpool2(upsample2(x));
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Structure, ConcatChannelsOrdersParts) {
  auto a = T64::full({1, 1, 1, 2}, 1);
  auto b = T64::full({1, 2, 1, 2}, 2);
  auto c = concat_channels<double>({a, b});
  EXPECT_EQ(c.shape(), (Shape{1, 3, 1, 2}));
  EXPECT_EQ(c[1], 1);
  EXPECT_EQ(c[2], 2);
  EXPECT_THROW(concat_channels<double>({a, T64::zeros({1, 1, 2, 2})}), ShapeError);
}

TEST(Structure, MaxPoolPicksLargest) {
  auto m = maxpool2(T64::constant({1, 1, 2, 2}, {1, 4, 3, 2}));
  EXPECT_EQ(m.item(), 4);
}

TEST(Backward, MeanOfSquares) {
  auto x = T64::leaf({3}, {1, 2, 3}, "x");
  backward(mean(mul(x, x)));
  EXPECT_NEAR(x.grad()[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(x.grad()[1], 4.0 / 3.0, 1e-15);
  EXPECT_NEAR(x.grad()[2], 2.0, 1e-15);
}

TEST(Backward, DisconnectedParameterGetsZeros) {
  ParameterStore<double> store;
  auto used = store.create("used", {2}, {1, 2});
  auto unused = store.create("unused", {2}, {3, 4});
  store.zero_grad();
  backward(sum(used));
  EXPECT_EQ(unused.grad()[0], 0);
  EXPECT_EQ(unused.grad()[1], 0);
  EXPECT_EQ(used.grad()[0], 1);
}

TEST(Backward, RejectsNonScalar) {
  auto x = T64::leaf({2}, {1, 2}, "x");
  EXPECT_THROW(backward(mul_scalar(x, 2.0)), ShapeError);
}

TEST(Backward, ChainRuleOnScalarProbe) {
  const double x0 = 0.37;
  auto x = T64::leaf({1}, {x0}, "x");
  backward(sigmoid(gelu(x)));
  const double phi = 0.5 * std::erfc(-x0 / std::sqrt(2.0));
  const double g = x0 * phi;
  const double dg = phi + x0 * std::exp(-0.5 * x0 * x0) / std::sqrt(2 * M_PI);
  const double s = 1 / (1 + std::exp(-g));
  EXPECT_NEAR(x.grad()[0], s * (1 - s) * dg, 1e-14);
}

TEST(Backward, CompositeConvGeluMeanMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  auto x = random_leaf({2, 2, 4, 4}, rng, "x");
  auto k = random_leaf({3, 2, 3, 3}, rng, "k");
  auto b = random_leaf({3}, rng, "b");
  auto r = finite_diff_check<double>([&] { return mean(gelu(conv2d(x, k, b))); }, {x, k, b}, 1e-5, 500);
  EXPECT_LE(r.max_rel_error, 1e-4);
  EXPECT_GE(r.probes, 100u);
}

// Every differentiable op checked against central differences, >= 100 probes each.
TEST(Backward, EveryOpMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto a = random_leaf({2, 3, 4, 4}, rng, "a");
  auto pos = random_leaf({2, 3, 4, 4}, rng, "pos", 0.5, 2.0);
  auto ch = random_leaf({3}, rng, "ch");
  auto pre = random_leaf({2}, rng, "pre", 0.5, 2.0);
  auto v = random_leaf({2, 5}, rng, "v");
  auto w = random_leaf({4, 5}, rng, "w");
  auto wb = random_leaf({4}, rng, "wb");
  auto k1 = random_leaf({2, 3, 1, 1}, rng, "k1");
  auto weights = T64::constant({2, 3, 4, 4}, random_values(96, rng));
  auto probe = [&](const T64& t) { return sum(mul(t, weights)); };

  const std::vector<std::pair<const char*, std::function<T64()>>> cases = {
      {"add", [&] { return probe(add(a, ch)); }},
      {"sub", [&] { return probe(sub(a, pos)); }},
      {"mul", [&] { return probe(mul(a, pre)); }},
      {"div", [&] { return probe(div(a, pos)); }},
      {"div_prefix", [&] { return probe(div(a, pre)); }},
      {"log", [&] { return probe(log(pos)); }},
      {"exp", [&] { return probe(exp(a)); }},
      {"neg", [&] { return probe(neg(a)); }},
      {"square", [&] { return probe(square(a)); }},
      {"clamp", [&] { return probe(clamp(a, -0.5, 0.5)); }},
      {"gelu", [&] { return probe(gelu(a)); }},
      {"sigmoid", [&] { return probe(sigmoid(a)); }},
      {"softmax", [&] { return probe(softmax(a, 1)); }},
      {"conv1x1", [&] { return sum(square(conv2d(a, k1))); }},
      {"avgpool", [&] { return sum(square(avgpool2(a))); }},
      {"maxpool", [&] { return sum(square(maxpool2(a))); }},
      {"upsample", [&] { return sum(square(upsample2(a))); }},
      {"gap", [&] { return sum(square(global_avg_pool(a))); }},
      {"concat", [&] { return sum(square(concat_channels<double>({a, pos}))); }},
      {"linear", [&] { return sum(square(linear(v, w, wb))); }},
      {"repeat", [&] { return sum(mul(repeat_spatial(slice_cols(v, 0, 3), 4, 4), weights)); }},
      {"sum_per_sample", [&] { return sum(square(sum_per_sample(a))); }},
      {"reshape", [&] { return sum(square(reshape(v, {5, 2}))); }},
  };
  for (const auto& [name, f] : cases) {
    auto r = finite_diff_check<double>(f, {a, pos, ch, pre, v, w, wb, k1}, 1e-6, 150);
    EXPECT_LE(r.max_rel_error, 1e-4) << name;
    EXPECT_GE(r.probes, 100u) << name;
  }
}

TEST(FiniteDiff, SquareAtThree) {
  auto x = T64::leaf({1}, {3}, "x");
  auto r = finite_diff_check<double>([&] { return mul(x, x); }, {x});
  EXPECT_NEAR(x.grad()[0], 6.0, 0);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(FiniteDiff, ZeroFunction) {
  auto x = T64::leaf({3}, {1, 2, 3}, "x");
  auto r = finite_diff_check<double>([&] { return mul_scalar(sum(x), 0.0); }, {x});
  EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(FiniteDiff, NonFinitePerturbationThrows) {
  auto x = T64::leaf({1}, {0.0}, "x");
  // log(x + 1e-6) at x - eps goes negative.
  EXPECT_THROW(finite_diff_check<double>([&] { return log(add_scalar(x, 5e-6)); }, {x}, 1e-5), NonFiniteError);
}

TEST(Determinism, SeededGraphIsBitIdentical) {
  auto run = [] {
    ParameterStore<float> store;
    Rng rng(11);
    auto c = Conv<float>::make(store, rng, "c", 2, 3, 3);
    std::mt19937_64 data_rng(12);
    std::vector<float> xs(2 * 2 * 8 * 8);
    std::uniform_real_distribution<float> d(0, 1);
    for (auto& v : xs) v = d(data_rng);
    auto loss = mean(gelu(c(Tensor<float>::constant({2, 2, 8, 8}, xs))));
    backward(loss);
    std::vector<float> out{loss.item()};
    for (const auto& p : store.all()) out.insert(out.end(), p.grad().begin(), p.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(ParameterStore, RejectsDuplicateNames) {
  ParameterStore<float> store;
  store.zeros("w", {1});
  EXPECT_THROW(store.zeros("w", {1}), std::invalid_argument);
  EXPECT_THROW(store.get("missing"), std::out_of_range);
}
