#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mambo/nn.hpp"
#include "mambo/tensor.hpp"

namespace mambo {

struct BackboneConfig {
  std::vector<int> channels{8, 16, 32};

  int depth() const { return static_cast<int>(channels.size()); }
};

// Stage s (1-based) has shape N x channels[s-1] x H/2^s x W/2^s.
template <typename T>
struct EncoderFeatures {
  std::vector<Tensor<T>> stages;
};

// Called on each decoder stage output, coarsest first. Must return a tensor
// of the same shape.
template <typename T>
using StageHook = std::function<Tensor<T>(std::size_t stage, const Tensor<T>& feature)>;

// Small U-shaped encoder-decoder standing in for a full segmentation backbone.
//
// Encoder stage: conv3x3 -> gelu -> avgpool2.
// Decoder stage: upsample2 -> concat skip -> conv3x3 -> gelu -> hook.
// The skip for stage j is the encoder stage one level finer; the finest
// decoder stage takes the input image itself. A final 1x1 conv yields one
// logit plane.
template <typename T>
class Backbone {
 public:
  Backbone() = default;

  Backbone(ParameterStore<T>& store, Rng& rng, BackboneConfig config, const std::string& prefix = "backbone")
      : config_(std::move(config)) {
    if (config_.channels.empty()) throw std::invalid_argument("backbone needs at least one stage");
    int in = 1;
    for (int s = 0; s < config_.depth(); ++s) {
      encoder_.push_back(Conv<T>::make(store, rng, prefix + ".enc" + std::to_string(s), in, config_.channels[s], 3));
      in = config_.channels[s];
    }
    for (int j = 0; j < config_.depth(); ++j) {
      const int skip = j + 1 < config_.depth() ? config_.channels[config_.depth() - 2 - j] : 1;
      const int out = decoder_channels()[j];
      decoder_.push_back(Conv<T>::make(store, rng, prefix + ".dec" + std::to_string(j), in + skip, out, 3));
      in = out;
    }
    head_ = Conv<T>::make(store, rng, prefix + ".head", in, 1, 1);
  }

  const BackboneConfig& config() const { return config_; }

  // Output channel count of each decoder stage, coarsest first.
  std::vector<int> decoder_channels() const {
    std::vector<int> out;
    const int d = config_.depth();
    for (int j = 0; j < d; ++j) out.push_back(j + 1 < d ? config_.channels[d - 2 - j] : config_.channels[0]);
    return out;
  }

  void check_input(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(1) != 1)
      throw ShapeError("backbone expects N x 1 x H x W, got " + shape_str(image.shape()));
    const int div = 1 << config_.depth();
    if (image.dim(2) % div || image.dim(3) % div)
      throw ShapeError("image dims " + shape_str(image.shape()) + " not divisible by " + std::to_string(div));
  }

  EncoderFeatures<T> encode(const Tensor<T>& image) const {
    check_input(image);
    EncoderFeatures<T> f;
    Tensor<T> x = image;
    for (const auto& conv : encoder_) {
      x = avgpool2(gelu(conv(x)));
      f.stages.push_back(x);
    }
    return f;
  }

  Tensor<T> decode(const EncoderFeatures<T>& features, const Tensor<T>& image, const StageHook<T>& hook) const {
    if (features.stages.size() != encoder_.size())
      throw ShapeError("decode: expected " + std::to_string(encoder_.size()) + " encoder stages");
    Tensor<T> x = features.stages.back();
    const int d = config_.depth();
    for (int j = 0; j < d; ++j) {
      const Tensor<T>& skip = j + 1 < d ? features.stages[d - 2 - j] : image;
      x = gelu(decoder_[j](concat_channels<T>({upsample2(x), skip})));
      if (hook) {
        Tensor<T> hooked = hook(static_cast<std::size_t>(j), x);
        if (hooked.shape() != x.shape())
          throw ShapeError("decoder hook changed stage " + std::to_string(j) + " shape from " +
                           shape_str(x.shape()) + " to " + shape_str(hooked.shape()));
        x = hooked;
      }
    }
    return head_(x);
  }

 private:
  BackboneConfig config_;
  std::vector<Conv<T>> encoder_;
  std::vector<Conv<T>> decoder_;
  Conv<T> head_;
};

}  // namespace mambo
