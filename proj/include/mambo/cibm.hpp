#pragma once

#include <string>
#include <vector>

#include "mambo/backbone.hpp"
#include "mambo/gsm.hpp"
#include "mambo/nn.hpp"
#include "mambo/tensor.hpp"

namespace mambo {

// n x K mixing matrix; rows live on the simplex by construction (row softmax
// of free logits). Logits start at zero, i.e. a uniform mixture.
template <typename T>
class MixingWeights {
 public:
  MixingWeights() = default;
  MixingWeights(ParameterStore<T>& store, const std::string& name, int channels, int components)
      : logits_(store.zeros(name, {channels, components})) {}

  Tensor<T> omega() const { return softmax(logits_, 1); }
  const Tensor<T>& logits() const { return logits_; }
  Tensor<T>& logits() { return logits_; }
  int channels() const { return logits_.dim(0); }
  int components() const { return logits_.dim(1); }

 private:
  Tensor<T> logits_;
};

// omega [n, K] times each image's z [N, K] -> [N, n].
template <typename T>
Tensor<T> mix(const Tensor<T>& omega, const Tensor<T>& z) {
  if (omega.rank() != 2 || z.rank() != 2 || omega.dim(1) != z.dim(1))
    throw ShapeError("mix: omega " + shape_str(omega.shape()) + " vs latent " + shape_str(z.shape()));
  return linear(z, omega);
}

// Channel weights S in (0,1)^n computed from the concatenated pair
// [decoder feature, repeated mixture]: conv3x3 -> gelu -> conv1x1 -> GAP -> sigmoid.
template <typename T>
class ChannelGate {
 public:
  ChannelGate() = default;
  ChannelGate(ParameterStore<T>& store, Rng& rng, const std::string& prefix, int channels)
      : spatial_(Conv<T>::make(store, rng, prefix + ".conv3", 2 * channels, channels, 3)),
        pointwise_(Conv<T>::make(store, rng, prefix + ".conv1", channels, channels, 1)) {}

  Tensor<T> operator()(const Tensor<T>& spliced) const {
    return sigmoid(global_avg_pool(pointwise_(gelu(spatial_(spliced)))));
  }

  Conv<T>& spatial() { return spatial_; }
  Conv<T>& pointwise() { return pointwise_; }

 private:
  Conv<T> spatial_;
  Conv<T> pointwise_;
};

// F = S * (F_dec + repeat(mixed)), S broadcast over H, W.
template <typename T>
Tensor<T> fuse(const Tensor<T>& decoder_feature, const Tensor<T>& mixed, const ChannelGate<T>& gate) {
  if (decoder_feature.rank() != 4 || mixed.rank() != 2 || mixed.dim(0) != decoder_feature.dim(0) ||
      mixed.dim(1) != decoder_feature.dim(1))
    throw ShapeError("fuse: decoder feature " + shape_str(decoder_feature.shape()) + " vs mixture " +
                     shape_str(mixed.shape()));
  auto planes = repeat_spatial(mixed, decoder_feature.dim(2), decoder_feature.dim(3));
  auto shifted = add(decoder_feature, planes);
  auto s = gate(concat_channels<T>({decoder_feature, planes}));
  return mul(shifted, s);
}

// One mixing matrix and gate per decoder stage; all stages consume the same z.
template <typename T>
class Cibm {
 public:
  Cibm() = default;

  Cibm(ParameterStore<T>& store, Rng& rng, const std::vector<int>& stage_channels, int components,
       const std::string& prefix = "cibm") {
    for (std::size_t s = 0; s < stage_channels.size(); ++s) {
      const std::string p = prefix + ".stage" + std::to_string(s);
      weights_.emplace_back(store, p + ".omega_logits", stage_channels[s], components);
      gates_.emplace_back(store, rng, p + ".gate", stage_channels[s]);
    }
  }

  std::size_t stages() const { return weights_.size(); }
  const MixingWeights<T>& weights(std::size_t s) const { return weights_.at(s); }
  MixingWeights<T>& weights(std::size_t s) { return weights_.at(s); }
  ChannelGate<T>& gate(std::size_t s) { return gates_.at(s); }

  // Stage hook for Backbone::decode. Each stage's mixture is appended to
  // mixed_out when given.
  StageHook<T> hook(const Tensor<T>& z, std::vector<Tensor<T>>* mixed_out = nullptr) const {
    return [this, z, mixed_out](std::size_t stage, const Tensor<T>& feature) {
      if (stage >= weights_.size())
        throw ShapeError("cibm: decoder stage " + std::to_string(stage) + " but only " +
                         std::to_string(weights_.size()) + " intervention stages");
      auto m = mix(weights_[stage].omega(), z);
      if (mixed_out) mixed_out->push_back(m);
      return fuse(feature, m, gates_[stage]);
    };
  }

 private:
  std::vector<MixingWeights<T>> weights_;
  std::vector<ChannelGate<T>> gates_;
};

// Runs every stage of the intervention on already-computed decoder features.
template <typename T>
std::vector<Tensor<T>> intervention_pipeline(const Cibm<T>& cibm, const Tensor<T>& z,
                                             const std::vector<Tensor<T>>& decoder_features) {
  if (decoder_features.size() != cibm.stages())
    throw ShapeError("intervention_pipeline: " + std::to_string(decoder_features.size()) + " features for " +
                     std::to_string(cibm.stages()) + " stages");
  auto h = cibm.hook(z);
  std::vector<Tensor<T>> out;
  for (std::size_t s = 0; s < decoder_features.size(); ++s) out.push_back(h(s, decoder_features[s]));
  return out;
}

}  // namespace mambo
