#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "mambo/tensor.hpp"

namespace mambo {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
};

// Compares backward() against central differences on sampled coordinates.
// Error per coordinate is |analytic - numeric| / max(1, |numeric|).
// f must be deterministic in the parameter values (replay any noise).
template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params,
                                  double eps = 1e-5, std::size_t max_probes = 200, std::uint64_t seed = 7) {
  for (auto& p : params) p.zero_grad();
  backward(f());

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < params[i].size(); ++j) coords.emplace_back(i, j);
  if (coords.size() > max_probes) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_probes);
  }

  GradCheckResult r;
  for (auto [i, j] : coords) {
    auto values = params[i].mutable_values();
    const T original = values[j];
    values[j] = original + static_cast<T>(eps);
    const double up = f().item();
    values[j] = original - static_cast<T>(eps);
    const double down = f().item();
    values[j] = original;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NonFiniteError("finite difference probe produced a non-finite value");
    const double numeric = (up - down) / (2 * eps);
    const double analytic = params[i].grad()[j];
    r.max_rel_error = std::max(r.max_rel_error, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
    ++r.probes;
  }
  return r;
}

}  // namespace mambo
