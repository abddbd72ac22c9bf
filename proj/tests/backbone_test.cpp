#include <gtest/gtest.h>

#include "mambo/backbone.hpp"
#include "mambo/data.hpp"
#include "mambo/losses.hpp"
#include "mambo/train.hpp"

using namespace mambo;

namespace {

Backbone<float> make_backbone(ParameterStore<float>& store, std::uint64_t seed) {
  Rng rng(seed);
  return Backbone<float>(store, rng, BackboneConfig{});
}

StageHook<float> identity_hook() {
  return [](std::size_t, const Tensor<float>& f) { return f; };
}

}  // namespace

TEST(Backbone, EncoderStageShapes) {
  ParameterStore<float> store;
  auto net = make_backbone(store, 1);
  auto f = net.encode(Tensor<float>::zeros({1, 1, 32, 32}));
  ASSERT_EQ(f.stages.size(), 3u);
  EXPECT_EQ(f.stages[0].shape(), (Shape{1, 8, 16, 16}));
  EXPECT_EQ(f.stages[1].shape(), (Shape{1, 16, 8, 8}));
  EXPECT_EQ(f.stages[2].shape(), (Shape{1, 32, 4, 4}));
}

TEST(Backbone, ZeroImageGivesZeroFeatures) {
  ParameterStore<float> store;
  auto net = make_backbone(store, 2);
  auto f = net.encode(Tensor<float>::zeros({1, 1, 16, 16}));
  for (const auto& s : f.stages)
    for (float v : s.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Backbone, RejectsIndivisibleInput) {
  ParameterStore<float> store;
  auto net = make_backbone(store, 3);
  EXPECT_THROW(net.encode(Tensor<float>::zeros({1, 1, 20, 20})), ShapeError);
  EXPECT_THROW(net.encode(Tensor<float>::zeros({1, 2, 16, 16})), ShapeError);
}

TEST(Backbone, SeededFeaturesAreBitIdentical) {
  auto run = [] {
    ParameterStore<float> store;
    auto net = make_backbone(store, 4);
    const auto data = generate_synthetic(1, 32, 9);
    auto f = net.encode(to_tensor<float>(data[0].image));
    return std::vector<float>(f.stages[2].values().begin(), f.stages[2].values().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Backbone, DecodeShapeAndProbabilityRange) {
  ParameterStore<float> store;
  auto net = make_backbone(store, 5);
  const auto data = generate_synthetic(2, 32, 10);
  auto img = to_tensor<float>({&data[0].image, &data[1].image});
  auto logits = net.decode(net.encode(img), img, identity_hook());
  EXPECT_EQ(logits.shape(), (Shape{2, 1, 32, 32}));
  const auto prob = sigmoid(logits);
  for (float p : prob.values()) {
    EXPECT_GT(p, 0.0f);
    EXPECT_LT(p, 1.0f);
  }
}

TEST(Backbone, HookShapeMismatchThrows) {
  ParameterStore<float> store;
  auto net = make_backbone(store, 6);
  auto img = Tensor<float>::zeros({1, 1, 16, 16});
  StageHook<float> bad = [](std::size_t, const Tensor<float>& f) { return avgpool2(f); };
  EXPECT_THROW(net.decode(net.encode(img), img, bad), ShapeError);
}

TEST(Backbone, DecoderChannelPlan) {
  ParameterStore<float> store;
  auto net = make_backbone(store, 7);
  EXPECT_EQ(net.decoder_channels(), (std::vector<int>{16, 8, 8}));
}

TEST(Backbone, EveryParameterGetsFiniteGradient) {
  ParameterStore<float> store;
  auto net = make_backbone(store, 8);
  const auto data = generate_synthetic(2, 32, 11);
  auto img = to_tensor<float>({&data[0].image, &data[1].image});
  auto mask = to_tensor<float>({&data[0].mask, &data[1].mask});
  auto prob = sigmoid(net.decode(net.encode(img), img, identity_hook()));
  store.zero_grad();
  backward(add(bce_loss(prob, mask), dice_loss(prob, mask)));
  for (const auto& p : store.all()) {
    double norm = 0;
    for (float g : p.grad()) {
      ASSERT_TRUE(std::isfinite(g)) << p.name();
      norm += std::abs(g);
    }
    EXPECT_GT(norm, 0.0) << p.name();
  }
}

// Identity-hook network drives a single image to Dice >= 0.99 within 2000 steps.
TEST(Backbone, OverfitsSingleImage) {
  ParameterStore<float> store;
  auto net = make_backbone(store, 12);
  const auto data = generate_synthetic(1, 32, 13);
  auto img = to_tensor<float>(data[0].image);
  auto mask = to_tensor<float>(data[0].mask);
  Sgd<float> sgd(0.9, 0.0);
  double dice = 0;
  int step = 0;
  for (; step < 2000; ++step) {
    store.zero_grad();
    auto prob = sigmoid(net.decode(net.encode(img), img, identity_hook()));
    if (step % 50 == 0) {
      dice = metrics(from_tensor(prob), data[0].mask).dice;
      if (dice >= 0.99) break;
    }
    backward(add(bce_loss(prob, mask), dice_loss(prob, mask)));
    sgd.step(store, 0.1);
  }
  EXPECT_GE(dice, 0.99) << "after " << step << " steps";
}
