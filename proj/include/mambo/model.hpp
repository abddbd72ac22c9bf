#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mambo/backbone.hpp"
#include "mambo/boundary.hpp"
#include "mambo/cibm.hpp"
#include "mambo/gsm.hpp"
#include "mambo/losses.hpp"
#include "mambo/nn.hpp"
#include "mambo/raster.hpp"

namespace mambo {

struct ModelConfig {
  int components = 128;
  std::vector<int> channels{8, 16, 32};
  bool use_gsm = true;
  bool use_cibm = true;
  int band_width = 2;
  bool detach_uncertainty = false;
};

template <typename T>
struct ForwardPass {
  Tensor<T> logits;  // N x 1 x H x W
  Tensor<T> prob;    // sigmoid(logits)
  std::optional<GaussianSet<T>> prior;
  std::optional<GaussianSet<T>> posterior;
  std::optional<LatentSample<T>> latent;
  std::vector<Tensor<T>> decoder_features;  // per stage, before intervention
  std::vector<Tensor<T>> mixed;             // per stage omega x z
};

// Backbone plus the optional confounder branch.
//
//   use_gsm  use_cibm
//   false    false     plain encoder-decoder
//   true     false     prior/posterior heads trained through KL and boundary losses only
//   false    true      intervention fed by a fixed N(0,1)^K prior
//   true     true      full model
template <typename T>
class MamboNet {
 public:
  MamboNet(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    Rng rng(seed);
    backbone_ = Backbone<T>(store_, rng, BackboneConfig{config_.channels});
    if (config_.use_gsm) {
      gdeb_ = DistributionHead<T>(store_, rng, HeadRole::gdeb, config_.components, config_.channels, "gdeb");
      pcb_ = DistributionHead<T>(store_, rng, HeadRole::pcb, config_.components, config_.channels, "pcb");
    }
    if (config_.use_cibm) cibm_ = Cibm<T>(store_, rng, backbone_.decoder_channels(), config_.components);
  }

  MamboNet(const MamboNet&) = delete;
  MamboNet& operator=(const MamboNet&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  const Backbone<T>& backbone() const { return backbone_; }
  Cibm<T>& cibm() { return cibm_; }
  const Cibm<T>& cibm() const { return cibm_; }

  // masks are required in training mode when the GSm branch is on.
  ForwardPass<T> forward(const Tensor<T>& images, const Tensor<T>* masks, Mode mode, NoiseSource& noise) const {
    ForwardPass<T> out;
    const auto features = backbone_.encode(images);
    if (config_.use_gsm) {
      out.prior = extract_prior(images, gdeb_, config_.components);
      if (mode == Mode::train) {
        if (!masks) throw std::invalid_argument("training forward pass needs masks for the posterior head");
        out.posterior = extract_posterior(*masks, pcb_, mode);
      }
    }
    StageHook<T> hook;
    if (config_.use_cibm) {
      if (config_.use_gsm) {
        out.latent = sample(*out.prior, noise);
      } else {
        const Shape s{images.dim(0), config_.components};
        out.latent = sample(GaussianSet<T>{Tensor<T>::zeros(s), Tensor<T>::full(s, T(1))}, noise);
      }
      auto inner = cibm_.hook(out.latent->z, &out.mixed);
      hook = [&out, inner](std::size_t stage, const Tensor<T>& f) {
        out.decoder_features.push_back(f);
        return inner(stage, f);
      };
    } else {
      hook = [&out](std::size_t, const Tensor<T>& f) {
        out.decoder_features.push_back(f);
        return f;
      };
    }
    out.logits = backbone_.decode(features, images, hook);
    out.prob = sigmoid(out.logits);
    return out;
  }

  std::vector<BoundaryBand> bands_for(const Tensor<T>& masks) const {
    std::vector<BoundaryBand> bands;
    for (int b = 0; b < masks.dim(0); ++b) bands.push_back(boundary_band(from_tensor(masks, b), config_.band_width));
    return bands;
  }

  LossBundle<T> losses(const ForwardPass<T>& pass, const Tensor<T>& masks) const {
    auto bce = bce_loss(pass.prob, masks);
    auto dice = dice_loss(pass.prob, masks);
    Tensor<T> kl = Tensor<T>::scalar(T(0));
    Tensor<T> usd = Tensor<T>::scalar(T(0));
    if (config_.use_gsm && pass.posterior) {
      kl = kl_loss(*pass.prior, *pass.posterior);
      usd = usd_loss(pass.prob, masks, bands_for(masks), config_.detach_uncertainty);
    }
    return total_loss(bce, dice, kl, usd);
  }

 private:
  ModelConfig config_;
  ParameterStore<T> store_;
  Backbone<T> backbone_;
  DistributionHead<T> gdeb_;
  DistributionHead<T> pcb_;
  Cibm<T> cibm_;
};

}  // namespace mambo
