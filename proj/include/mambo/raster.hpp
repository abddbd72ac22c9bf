#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambo/tensor.hpp"

namespace mambo {

// Single-channel H x W image, row-major.
struct Raster {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Raster() = default;
  Raster(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  bool same_shape(const Raster& o) const { return height == o.height && width == o.width; }
  bool operator==(const Raster&) const = default;
};

// Stacks rasters of one size into an N x 1 x H x W tensor.
template <typename T>
Tensor<T> to_tensor(const std::vector<const Raster*>& images) {
  if (images.empty()) throw ShapeError("to_tensor: empty batch");
  const int h = images[0]->height, w = images[0]->width;
  std::vector<T> values;
  values.reserve(images.size() * images[0]->size());
  for (const Raster* r : images) {
    if (r->height != h || r->width != w) throw ShapeError("to_tensor: mixed raster sizes in batch");
    for (double v : r->data) values.push_back(static_cast<T>(v));
  }
  return Tensor<T>::constant({static_cast<int>(images.size()), 1, h, w}, std::move(values));
}

template <typename T>
Tensor<T> to_tensor(const Raster& image) {
  return to_tensor<T>(std::vector<const Raster*>{&image});
}

// Image b of an N x 1 x H x W tensor.
template <typename T>
Raster from_tensor(const Tensor<T>& t, int b = 0) {
  if (t.rank() != 4 || t.dim(1) != 1) throw ShapeError("from_tensor: expected N x 1 x H x W, got " + shape_str(t.shape()));
  Raster r(t.dim(2), t.dim(3));
  const std::size_t plane = r.size();
  for (std::size_t i = 0; i < plane; ++i) r.data[i] = static_cast<double>(t.values()[b * plane + i]);
  return r;
}

}  // namespace mambo
