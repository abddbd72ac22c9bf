#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambo/boundary.hpp"
#include "mambo/tensor.hpp"

namespace mambo {

inline constexpr double kDiceSmooth = 1e-6;

// Pixel-wise binary cross-entropy averaged over every pixel of the batch.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& truth) {
  if (pred.shape() != truth.shape())
    throw ShapeError("bce_loss: pred " + shape_str(pred.shape()) + " vs truth " + shape_str(truth.shape()));
  std::vector<T> inv(truth.size());
  for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = T(1) - truth.values()[i];
  auto truth_neg = Tensor<T>::constant(truth.shape(), std::move(inv));
  auto p = clamp(pred, T(kProbClamp), T(1 - kProbClamp));
  return neg(mean(add(mul(truth, log(p)), mul(truth_neg, log(add_scalar(neg(p), T(1)))))));
}

// Soft Dice loss per image, averaged over the batch.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& truth) {
  if (pred.shape() != truth.shape())
    throw ShapeError("dice_loss: pred " + shape_str(pred.shape()) + " vs truth " + shape_str(truth.shape()));
  auto overlap = add_scalar(mul_scalar(sum_per_sample(mul(pred, truth)), T(2)), T(kDiceSmooth));
  auto total = add_scalar(add(sum_per_sample(truth), sum_per_sample(pred)), T(kDiceSmooth));
  return add_scalar(neg(mean(div(overlap, total))), T(1));
}

template <typename T>
struct LossBundle {
  Tensor<T> bce, dice, kl, usd, gaus, total;
};

// gaus = usd + kl; total = gaus + bce + dice.
template <typename T>
LossBundle<T> total_loss(Tensor<T> bce, Tensor<T> dice, Tensor<T> kl, Tensor<T> usd) {
  const std::pair<const char*, const Tensor<T>*> parts[] = {{"bce", &bce}, {"dice", &dice}, {"kl", &kl}, {"usd", &usd}};
  for (const auto& [name, t] : parts) {
    if (t->size() != 1) throw ShapeError(std::string("loss part ") + name + " is not scalar");
    if (!std::isfinite(t->item())) throw NonFiniteError(std::string("loss part ") + name + " is not finite");
  }
  LossBundle<T> b{bce, dice, kl, usd, {}, {}};
  b.gaus = add(usd, kl);
  b.total = add(add(b.gaus, bce), dice);
  return b;
}

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

inline ConfusionCounts confusion(std::span<const double> pred, std::span<const double> truth, double threshold = 0.5) {
  if (pred.size() != truth.size()) throw std::invalid_argument("confusion: size mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= threshold;
    const bool t = truth[i] >= 0.5;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// Empty-vs-empty scores 1 for dice and iou; fdr is 0 with no predicted positives.
inline double dice_score(const ConfusionCounts& c) {
  const double d = 2.0 * c.tp + c.fp + c.fn;
  return d == 0 ? 1.0 : 2.0 * c.tp / d;
}
inline double iou_score(const ConfusionCounts& c) {
  const double d = static_cast<double>(c.tp + c.fp + c.fn);
  return d == 0 ? 1.0 : c.tp / d;
}
inline double fdr_score(const ConfusionCounts& c) {
  const double d = static_cast<double>(c.fp + c.tp);
  return d == 0 ? 0.0 : c.fp / d;
}

struct AucResult {
  double value = 0.5;
  bool defined = false;
};

// Mann-Whitney U over pixels, average ranks for ties. Undefined (0.5) when
// truth holds a single class.
inline AucResult auc_score(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("auc: size mismatch");
  std::vector<std::size_t> order(pred.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pred[a] < pred[b]; });
  double pos_rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && pred[order[j]] == pred[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (truth[order[k]] >= 0.5) {
        pos_rank_sum += avg_rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t negc = pred.size() - pos;
  if (pos == 0 || negc == 0) return {0.5, false};
  const double u = pos_rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
  return {u / (static_cast<double>(pos) * static_cast<double>(negc)), true};
}

struct Metrics {
  double dice = 0, iou = 0, fdr = 0, auc = 0.5;
  bool auc_defined = false;
};

inline Metrics metrics(std::span<const double> pred, std::span<const double> truth, double threshold = 0.5) {
  const auto c = confusion(pred, truth, threshold);
  const auto a = auc_score(pred, truth);
  return {dice_score(c), iou_score(c), fdr_score(c), a.value, a.defined};
}

inline Metrics metrics(const Raster& pred, const Raster& truth, double threshold = 0.5) {
  if (!pred.same_shape(truth)) throw std::invalid_argument("metrics: raster shape mismatch");
  return metrics(std::span<const double>(pred.data), std::span<const double>(truth.data), threshold);
}

// Per-pixel binary entropy in bits, 0 log 0 = 0.
inline Raster entropy_map(const Raster& pred) {
  Raster out(pred.height, pred.width);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred.data[i], 0.0, 1.0);
    double h = 0;
    if (p > 0) h -= p * std::log2(p);
    if (p < 1) h -= (1 - p) * std::log2(1 - p);
    out.data[i] = h;
  }
  return out;
}

}  // namespace mambo
