#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mambo/tensor.hpp"

namespace mambo {

using Rng = std::mt19937_64;

// Owns every named leaf of a model, in creation order.
template <typename T>
class ParameterStore {
 public:
  Tensor<T> create(const std::string& name, Shape shape, std::vector<T> values, bool learnable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto t = Tensor<T>::leaf(std::move(shape), std::move(values), name, learnable);
    index_.emplace(name, params_.size());
    params_.push_back(t);
    return t;
  }

  // Uniform in +-sqrt(1/fan_in).
  Tensor<T> uniform(const std::string& name, Shape shape, int fan_in, Rng& rng) {
    const double bound = std::sqrt(1.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> values(numel(shape));
    for (auto& v : values) v = static_cast<T>(dist(rng));
    return create(name, std::move(shape), std::move(values));
  }

  Tensor<T> zeros(const std::string& name, Shape shape) {
    const auto n = numel(shape);
    return create(name, std::move(shape), std::vector<T>(n, T(0)));
  }

  const std::vector<Tensor<T>>& all() const { return params_; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

 private:
  std::vector<Tensor<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct Conv {
  Tensor<T> weight;
  Tensor<T> bias;

  static Conv make(ParameterStore<T>& store, Rng& rng, const std::string& name, int in, int out, int k) {
    Conv c;
    c.weight = store.uniform(name + ".weight", {out, in, k, k}, in * k * k, rng);
    c.bias = store.zeros(name + ".bias", {out});
    return c;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias); }
  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }
};

template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  static Linear make(ParameterStore<T>& store, Rng& rng, const std::string& name, int in, int out) {
    Linear l;
    l.weight = store.uniform(name + ".weight", {out, in}, in, rng);
    l.bias = store.zeros(name + ".bias", {out});
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

}  // namespace mambo
