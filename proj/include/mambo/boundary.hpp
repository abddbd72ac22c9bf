#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mambo/raster.hpp"
#include "mambo/tensor.hpp"

namespace mambo {

inline constexpr double kProbClamp = 1e-7;

// sqrt(Gx^2 + Gy^2) with the 3x3 Sobel kernels, zero padding.
inline Raster sobel_magnitude(const Raster& mask) {
  static constexpr int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  Raster out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      double gx = 0, gy = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= mask.height || xx < 0 || xx >= mask.width) continue;
          const double v = mask.at(yy, xx);
          gx += kx[dy + 1][dx + 1] * v;
          gy += ky[dy + 1][dx + 1] * v;
        }
      out.at(y, x) = std::sqrt(gx * gx + gy * gy);
    }
  return out;
}

// Pixels within Chebyshev distance `width` of a Sobel edge of the mask.
struct BoundaryBand {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> band;  // H x W, 1 inside the band
  std::vector<double> truth;       // mask values on band pixels, raster order
  std::size_t count = 0;

  bool contains(int y, int x) const { return band[static_cast<std::size_t>(y) * width + x] != 0; }
};

inline BoundaryBand boundary_band(const Raster& mask, int band_width) {
  if (band_width < 1) throw std::invalid_argument("band width must be >= 1");
  const Raster edges = sobel_magnitude(mask);
  BoundaryBand b;
  b.height = mask.height;
  b.width = mask.width;
  b.band.assign(mask.size(), 0);

  // Separable Chebyshev dilation: rows then columns.
  std::vector<std::uint8_t> rows(mask.size(), 0);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (edges.at(y, x) <= 0) continue;
      const int x0 = std::max(0, x - band_width), x1 = std::min(mask.width - 1, x + band_width);
      for (int xx = x0; xx <= x1; ++xx) rows[static_cast<std::size_t>(y) * mask.width + xx] = 1;
    }
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!rows[static_cast<std::size_t>(y) * mask.width + x]) continue;
      const int y0 = std::max(0, y - band_width), y1 = std::min(mask.height - 1, y + band_width);
      for (int yy = y0; yy <= y1; ++yy) b.band[static_cast<std::size_t>(yy) * mask.width + x] = 1;
    }
  for (std::size_t i = 0; i < b.band.size(); ++i)
    if (b.band[i]) {
      b.truth.push_back(mask.data[i]);
      ++b.count;
    }
  return b;
}

struct UncertaintyMap {
  Raster v;                // (p_i - P)^2 on band pixels, 0 elsewhere
  double band_mean = 0.0;  // P
  bool empty = true;
};

inline UncertaintyMap uncertainty_map(const Raster& pred, const BoundaryBand& band) {
  UncertaintyMap u;
  u.v = Raster(pred.height, pred.width);
  if (band.count == 0) return u;
  double total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (band.band[i]) total += pred.data[i];
  u.band_mean = total / static_cast<double>(band.count);
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (band.band[i]) u.v.data[i] = (pred.data[i] - u.band_mean) * (pred.data[i] - u.band_mean);
  u.empty = false;
  return u;
}

namespace detail {

template <typename T>
struct BandTensors {
  Tensor<T> band;       // N x 1 x H x W, {0,1}
  Tensor<T> counts;     // [N], band sizes with empty bands mapped to 1
};

template <typename T>
BandTensors<T> band_tensors(const std::vector<BoundaryBand>& bands, const Tensor<T>& like) {
  if (like.rank() != 4 || like.dim(1) != 1 || static_cast<std::size_t>(like.dim(0)) != bands.size())
    throw ShapeError("band batch of " + std::to_string(bands.size()) + " vs prediction " + shape_str(like.shape()));
  std::vector<T> band_values;
  std::vector<T> counts;
  for (const auto& b : bands) {
    if (b.height != like.dim(2) || b.width != like.dim(3)) throw ShapeError("band size does not match prediction");
    for (auto v : b.band) band_values.push_back(static_cast<T>(v));
    counts.push_back(static_cast<T>(std::max<std::size_t>(b.count, 1)));
  }
  return {Tensor<T>::constant(like.shape(), std::move(band_values)),
          Tensor<T>::constant({like.dim(0)}, std::move(counts))};
}

}  // namespace detail

// Uncertainty weight V per pixel: squared deviation from the band mean of
// the predictions, zero outside the band. pred is N x 1 x H x W.
template <typename T>
Tensor<T> uncertainty_weights(const Tensor<T>& pred, const std::vector<BoundaryBand>& bands) {
  auto bt = detail::band_tensors(bands, pred);
  auto band_mean = div(sum_per_sample(mul(pred, bt.band)), bt.counts);
  return mul(square(sub(pred, band_mean)), bt.band);
}

// -(1/N_band) * sum over band of weight * [b log p + (1-b) log(1-p)],
// averaged over the batch. Images with an empty band contribute 0.
template <typename T>
Tensor<T> weighted_band_bce(const Tensor<T>& pred, const Tensor<T>& truth, const std::vector<BoundaryBand>& bands,
                            const Tensor<T>& weight) {
  if (truth.shape() != pred.shape())
    throw ShapeError("weighted_band_bce: pred " + shape_str(pred.shape()) + " vs truth " + shape_str(truth.shape()));
  auto bt = detail::band_tensors(bands, pred);
  std::vector<T> inv(truth.size());
  for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = T(1) - truth.values()[i];
  auto truth_neg = Tensor<T>::constant(truth.shape(), std::move(inv));
  auto p = clamp(pred, T(kProbClamp), T(1 - kProbClamp));
  auto ll = add(mul(truth, log(p)), mul(truth_neg, log(add_scalar(neg(p), T(1)))));
  auto term = mul(mul(ll, weight), bt.band);
  return neg(mean(div(sum_per_sample(term), bt.counts)));
}

// Boundary loss with uncertainty weighting (1 + V). V stays in the graph
// unless detach_uncertainty is set.
template <typename T>
Tensor<T> usd_loss(const Tensor<T>& pred, const Tensor<T>& truth, const std::vector<BoundaryBand>& bands,
                   bool detach_uncertainty = false) {
  auto v = uncertainty_weights(pred, bands);
  if (detach_uncertainty) v = detach(v);
  return weighted_band_bce(pred, truth, bands, add_scalar(v, T(1)));
}

}  // namespace mambo
