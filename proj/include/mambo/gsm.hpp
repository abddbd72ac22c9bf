#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambo/nn.hpp"
#include "mambo/tensor.hpp"

namespace mambo {

inline constexpr double kLogSigmaMin = -6.0;
inline constexpr double kLogSigmaMax = 3.0;

enum class Mode { train, inference };

// K independent 1-D Gaussians per image. mu and sigma are N x K.
template <typename T>
struct GaussianSet {
  Tensor<T> mu;
  Tensor<T> sigma;

  int batch() const { return mu.dim(0); }
  int components() const { return mu.dim(1); }
};

template <typename T>
struct LatentSample {
  Tensor<T> z;                 // N x K
  std::vector<T> frozen_eps;   // the standard-normal draws used for z
};

// Source of the standard-normal draws behind reparameterized sampling.
// Fresh draws are recorded so a later replay reproduces the same forward pass.
class NoiseSource {
 public:
  enum class Kind { fresh, replay, zero };

  explicit NoiseSource(std::uint64_t seed) : kind_(Kind::fresh), rng_(seed) {}

  static NoiseSource replay(std::vector<double> draws) {
    NoiseSource s(0);
    s.kind_ = Kind::replay;
    s.draws_ = std::move(draws);
    return s;
  }

  static NoiseSource zero() {
    NoiseSource s(0);
    s.kind_ = Kind::zero;
    return s;
  }

  double next() {
    switch (kind_) {
      case Kind::zero:
        return 0.0;
      case Kind::replay:
        if (cursor_ >= draws_.size()) throw std::out_of_range("noise replay exhausted");
        return draws_[cursor_++];
      case Kind::fresh:
        break;
    }
    const double e = normal_(rng_);
    draws_.push_back(e);
    return e;
  }

  Kind kind() const { return kind_; }
  const std::vector<double>& recorded() const { return draws_; }
  void rewind() { cursor_ = 0; }

 private:
  Kind kind_;
  Rng rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::vector<double> draws_;
  std::size_t cursor_ = 0;
};

enum class HeadRole { gdeb, pcb };

inline const char* role_name(HeadRole r) { return r == HeadRole::gdeb ? "gdeb" : "pcb"; }

// conv stack -> global average pool -> linear to 2K outputs (mu, log sigma).
template <typename T>
class DistributionHead {
 public:
  DistributionHead() = default;

  DistributionHead(ParameterStore<T>& store, Rng& rng, HeadRole role, int components,
                   const std::vector<int>& channels, const std::string& prefix)
      : role_(role), components_(components) {
    if (components <= 0) throw std::invalid_argument("component count must be positive");
    int in = 1;
    for (std::size_t s = 0; s < channels.size(); ++s) {
      convs_.push_back(Conv<T>::make(store, rng, prefix + ".conv" + std::to_string(s), in, channels[s], 3));
      in = channels[s];
    }
    proj_ = Linear<T>::make(store, rng, prefix + ".proj", in, 2 * components);
  }

  HeadRole role() const { return role_; }
  int components() const { return components_; }
  const Linear<T>& projection() const { return proj_; }

  GaussianSet<T> operator()(const Tensor<T>& input) const {
    Tensor<T> x = input;
    for (const auto& c : convs_) x = avgpool2(gelu(c(x)));
    Tensor<T> out = proj_(global_avg_pool(x));
    GaussianSet<T> g;
    g.mu = slice_cols(out, 0, components_);
    g.sigma = exp(clamp(slice_cols(out, components_, 2 * components_), T(kLogSigmaMin), T(kLogSigmaMax)));
    return g;
  }

 private:
  HeadRole role_ = HeadRole::gdeb;
  int components_ = 0;
  std::vector<Conv<T>> convs_;
  Linear<T> proj_;
};

// Prior over confusion factors, read from the raw image.
template <typename T>
GaussianSet<T> extract_prior(const Tensor<T>& image, const DistributionHead<T>& head, int expected_k) {
  if (head.role() != HeadRole::gdeb) throw std::invalid_argument("extract_prior needs a gdeb head");
  if (head.components() != expected_k)
    throw std::invalid_argument("head has K=" + std::to_string(head.components()) + ", config expects " +
                                std::to_string(expected_k));
  return head(image);
}

// Posterior read from the ground-truth mask. Training only.
template <typename T>
GaussianSet<T> extract_posterior(const Tensor<T>& mask, const DistributionHead<T>& head, Mode mode) {
  if (mode == Mode::inference) throw std::logic_error("posterior head is disabled at inference");
  if (head.role() != HeadRole::pcb) throw std::invalid_argument("extract_posterior needs a pcb head");
  return head(mask);
}

// z = eps * sigma + mu, one fresh eps per component per image.
template <typename T>
LatentSample<T> sample(const GaussianSet<T>& set, NoiseSource& noise) {
  std::vector<T> eps(set.mu.size());
  for (auto& e : eps) e = static_cast<T>(noise.next());
  auto eps_t = Tensor<T>::constant(set.mu.shape(), eps);
  LatentSample<T> s;
  s.z = add(mul(set.sigma, eps_t), set.mu);
  s.frozen_eps = std::move(eps);
  return s;
}

// Mean over components (and images) of KL(N(mu_p, s_p) || N(mu_q, s_q)).
template <typename T>
Tensor<T> kl_loss(const GaussianSet<T>& prior, const GaussianSet<T>& posterior) {
  if (prior.mu.shape() != posterior.mu.shape())
    throw ShapeError("kl_loss: prior " + shape_str(prior.mu.shape()) + " vs posterior " +
                     shape_str(posterior.mu.shape()));
  auto log_ratio = sub(log(posterior.sigma), log(prior.sigma));
  auto spread = add(square(prior.sigma), square(sub(prior.mu, posterior.mu)));
  auto quad = div(spread, mul_scalar(square(posterior.sigma), T(2)));
  return mean(add_scalar(add(log_ratio, quad), T(-0.5)));
}

}  // namespace mambo
