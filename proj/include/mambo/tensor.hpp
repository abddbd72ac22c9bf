#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

// Dense row-major arrays with reverse-mode differentiation.
//
// Every op builds a node holding its value and a closure that pushes the
// node's gradient into its parents. Tensors are cheap handles (shared
// ownership of the node), so copying a Tensor aliases the same storage.
//
// Broadcasting for binary elementwise ops is deliberately narrow. The right
// operand b may be
//   * the same shape as a,
//   * a single element,
//   * a rank-1 vector of length C when a is rank-4 NCHW (channel axis),
//   * any leading prefix of a's shape (e.g. [N] or [N,C] against [N,C,H,W]).
// Anything else is a shape error naming both shapes.

namespace mambo {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  std::string name;
  std::string op;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<T> values) {
    validate_shape(shape);
    if (numel(shape) != values.size())
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->op = "const";
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v) {
    const auto count = numel(shape);
    return constant(std::move(shape), std::vector<T>(count, v));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor scalar(T v) { return constant({1}, {v}); }

  // A named leaf that accumulates gradient when learnable.
  static Tensor leaf(Shape shape, std::vector<T> values, std::string name, bool learnable = true) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->name = std::move(name);
    t.node_->requires_grad = learnable;
    t.node_->op = "leaf";
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  const std::string& op() const { return node_->op; }
  const NodePtr& node() const { return node_; }
  std::vector<Tensor> parents() const {
    std::vector<Tensor> out;
    for (const auto& p : node_->parents) out.emplace_back(p);
    return out;
  }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (int d : shape)
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
  }

  NodePtr node_;
};

namespace detail {

template <typename T>
void check_finite(const Node<T>& n) {
  for (T v : n.value)
    if (!std::isfinite(v)) throw NonFiniteError("non-finite value produced by op '" + n.op + "'");
}

template <typename T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> parents, std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->op = std::move(op);
  n->shape = std::move(shape);
  n->value = std::move(value);
  check_finite(*n);
  for (auto& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.node());
  }
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return Tensor<T>(std::move(n));
}

// Maps a flat index of a to the flat index of b: (i / inner) % count.
struct Broadcast {
  std::size_t inner = 1;
  std::size_t count = 1;
  std::size_t operator()(std::size_t i) const { return (i / inner) % count; }
};

inline Broadcast resolve_broadcast(const Shape& a, const Shape& b, const char* op) {
  const auto na = numel(a);
  const auto nb = numel(b);
  if (a == b) return {1, na};
  if (nb == 1) return {na, 1};
  if (a.size() == 4 && b.size() == 1 && b[0] == a[1])
    return {static_cast<std::size_t>(a[2]) * static_cast<std::size_t>(a[3]), nb};
  if (b.size() < a.size() && std::equal(b.begin(), b.end(), a.begin())) return {na / nb, nb};
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  const Broadcast bc = resolve_broadcast(a.shape(), b.shape(), op);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[bc(i)]);
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(op, a.shape(), std::move(out), {a, b}, [an, bn, bc, da, db](Node<T>& self) {
    const auto& g = self.grad;
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * da(an->value[i], bn->value[bc(i)]);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const auto j = bc(i);
        bn->grad[j] += g[i] * db(an->value[i], bn->value[j]);
      }
    }
  });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  const auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  auto an = a.node();
  return make_result<T>(op, a.shape(), std::move(out), {a}, [an, deriv](Node<T>& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * deriv(an->value[i], self.value[i]);
  });
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary<T>(
      "add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return detail::unary<T>(
      "mul_scalar", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary<T>(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

// Gradient passes where lo <= x <= hi.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return detail::unary<T>(
      "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// Cuts the graph: same values, no gradient path.
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::constant(a.shape(), std::vector<T>(a.values().begin(), a.values().end()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  auto an = a.node();
  return detail::make_result<T>("reshape", std::move(shape),
                                std::vector<T>(a.values().begin(), a.values().end()), {a},
                                [an](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    an->grad[i] += self.grad[i];
                                });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary<T>(
      "sigmoid", a,
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// Exact form x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary<T>(
      "gelu", a,
      [](T x) {
        const double xd = x;
        return static_cast<T>(xd * 0.5 * std::erfc(-xd * inv_sqrt2));
      },
      [](T x, T) {
        const double xd = x;
        const double cdf = 0.5 * std::erfc(-xd * inv_sqrt2);
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
        return static_cast<T>(cdf + xd * pdf);
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const auto& s = a.shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("softmax: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = av[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, av[base + k * inner]);
      T total = 0;
      for (std::size_t k = 0; k < len; ++k) {
        out[base + k * inner] = std::exp(av[base + k * inner] - mx);
        total += out[base + k * inner];
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  auto an = a.node();
  return detail::make_result<T>("softmax", s, std::move(out), {a},
                                [an, outer, inner, len](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t in = 0; in < inner; ++in) {
                                      const std::size_t base = o * len * inner + in;
                                      T dot = 0;
                                      for (std::size_t k = 0; k < len; ++k)
                                        dot += self.grad[base + k * inner] * self.value[base + k * inner];
                                      for (std::size_t k = 0; k < len; ++k) {
                                        const auto idx = base + k * inner;
                                        an->grad[idx] += self.value[idx] * (self.grad[idx] - dot);
                                      }
                                    }
                                });
}

// ---------------------------------------------------------------------------
// Convolution

// Shape-preserving cross-correlation, stride 1, zero padding (k-1)/2.
// input N x C x H x W, kernel O x C x k x k with k in {1,3}, optional bias [O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>* bias = nullptr) {
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(kernel, 4, "conv2d kernel");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int o = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != c)
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(input.shape()) + " kernel " +
                     shape_str(kernel.shape()));
  if (kernel.dim(3) != k || (k != 1 && k != 3))
    throw ShapeError("conv2d: kernel must be 1x1 or 3x3, got " + shape_str(kernel.shape()));
  if (bias && (bias->rank() != 1 || bias->dim(0) != o))
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " for " + std::to_string(o) +
                     " output channels");
  const int pad = (k - 1) / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto in = input.values();
  const auto kv = kernel.values();
  std::vector<T> out(static_cast<std::size_t>(n) * o * plane, T(0));

  for (int b = 0; b < n; ++b)
    for (int oc = 0; oc < o; ++oc) {
      T* dst = out.data() + (static_cast<std::size_t>(b) * o + oc) * plane;
      if (bias) std::fill(dst, dst + plane, bias->values()[oc]);
      for (int ic = 0; ic < c; ++ic) {
        const T* src = in.data() + (static_cast<std::size_t>(b) * c + ic) * plane;
        const T* wk = kv.data() + (static_cast<std::size_t>(oc) * c + ic) * k * k;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const T wv = wk[ky * k + kx];
            const int dy = ky - pad, dx = kx - pad;
            const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            for (int y = y0; y < y1; ++y) {
              T* drow = dst + static_cast<std::size_t>(y) * w;
              const T* srow = src + static_cast<std::size_t>(y + dy) * w + dx;
              for (int x = x0; x < x1; ++x) drow[x] += wv * srow[x];
            }
          }
      }
    }

  std::vector<Tensor<T>> parents{input, kernel};
  if (bias) parents.push_back(*bias);
  auto inn = input.node();
  auto kn = kernel.node();
  auto bn = bias ? bias->node() : nullptr;
  return detail::make_result<T>(
      "conv2d", {n, o, h, w}, std::move(out), std::move(parents),
      [inn, kn, bn, n, c, h, w, o, k, pad, plane](Node<T>& self) {
        const T* g = self.grad.data();
        if (inn->requires_grad) inn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        if (bn && bn->requires_grad) {
          bn->ensure_grad();
          for (int b = 0; b < n; ++b)
            for (int oc = 0; oc < o; ++oc) {
              const T* gp = g + (static_cast<std::size_t>(b) * o + oc) * plane;
              T acc = 0;
              for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
              bn->grad[oc] += acc;
            }
        }
        for (int b = 0; b < n; ++b)
          for (int oc = 0; oc < o; ++oc) {
            const T* gp = g + (static_cast<std::size_t>(b) * o + oc) * plane;
            for (int ic = 0; ic < c; ++ic) {
              const std::size_t in_off = (static_cast<std::size_t>(b) * c + ic) * plane;
              const std::size_t w_off = (static_cast<std::size_t>(oc) * c + ic) * k * k;
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const int dy = ky - pad, dx = kx - pad;
                  const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                  const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                  const T wv = kn->value[w_off + ky * k + kx];
                  T wacc = 0;
                  for (int y = y0; y < y1; ++y) {
                    const T* grow = gp + static_cast<std::size_t>(y) * w;
                    const std::size_t src = in_off + static_cast<std::size_t>(y + dy) * w + dx;
                    if (inn->requires_grad) {
                      T* girow = inn->grad.data() + src;
                      for (int x = x0; x < x1; ++x) girow[x] += wv * grow[x];
                    }
                    if (kn->requires_grad) {
                      const T* irow = inn->value.data() + src;
                      for (int x = x0; x < x1; ++x) wacc += grow[x] * irow[x];
                    }
                  }
                  if (kn->requires_grad) kn->grad[w_off + ky * k + kx] += wacc;
                }
            }
          }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
  return conv2d(input, kernel, &bias);
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& p : parts) detail::require_rank(p, 4, "concat_channels");
  const int n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  int total_c = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w)
      throw ShapeError("concat_channels: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    total_c += p.dim(1);
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * total_c * plane);
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    for (int b = 0; b < n; ++b) {
      const auto src = p.values().subspan(static_cast<std::size_t>(b) * p.dim(1) * plane,
                                          static_cast<std::size_t>(p.dim(1)) * plane);
      std::copy(src.begin(), src.end(), out.begin() + (static_cast<std::size_t>(b) * total_c + off) * plane);
    }
    off += p.dim(1);
  }
  std::vector<typename Tensor<T>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result<T>("concat_channels", {n, total_c, h, w}, std::move(out), parts,
                                [nodes, offsets, n, total_c, plane](Node<T>& self) {
                                  for (std::size_t i = 0; i < nodes.size(); ++i) {
                                    auto& pn = *nodes[i];
                                    if (!pn.requires_grad) continue;
                                    pn.ensure_grad();
                                    const std::size_t chunk = static_cast<std::size_t>(pn.shape[1]) * plane;
                                    for (int b = 0; b < n; ++b) {
                                      const T* src = self.grad.data() +
                                                     (static_cast<std::size_t>(b) * total_c + offsets[i]) * plane;
                                      T* dst = pn.grad.data() + b * chunk;
                                      for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> avgpool2(const Tensor<T>& a) {
  detail::require_rank(a, 4, "avgpool2");
  const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avgpool2: odd spatial dims " + shape_str(a.shape()));
  const int oh = h / 2, ow = w / 2;
  const auto av = a.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c * oh * ow);
  for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const std::size_t s = p * h * w + static_cast<std::size_t>(2 * y) * w + 2 * x;
        out[p * oh * ow + y * ow + x] = T(0.25) * (av[s] + av[s + 1] + av[s + w] + av[s + w + 1]);
      }
  auto an = a.node();
  return detail::make_result<T>("avgpool2", {n, c, oh, ow}, std::move(out), {a},
                                [an, n, c, h, w, oh, ow](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p)
                                    for (int y = 0; y < oh; ++y)
                                      for (int x = 0; x < ow; ++x) {
                                        const T g = T(0.25) * self.grad[p * oh * ow + y * ow + x];
                                        const std::size_t s = p * h * w + static_cast<std::size_t>(2 * y) * w + 2 * x;
                                        an->grad[s] += g;
                                        an->grad[s + 1] += g;
                                        an->grad[s + w] += g;
                                        an->grad[s + w + 1] += g;
                                      }
                                });
}

// Ties resolve to the first element in row-major window order.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& a) {
  detail::require_rank(a, 4, "maxpool2");
  const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  if (h % 2 || w % 2) throw ShapeError("maxpool2: odd spatial dims " + shape_str(a.shape()));
  const int oh = h / 2, ow = w / 2;
  const auto av = a.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const std::size_t s = p * h * w + static_cast<std::size_t>(2 * y) * w + 2 * x;
        std::size_t best = s;
        for (std::size_t cand : {s + 1, s + w, s + w + 1})
          if (av[cand] > av[best]) best = cand;
        const std::size_t o = p * oh * ow + y * ow + x;
        out[o] = av[best];
        argmax[o] = best;
      }
  auto an = a.node();
  return detail::make_result<T>("maxpool2", {n, c, oh, ow}, std::move(out), {a},
                                [an, argmax = std::move(argmax)](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < argmax.size(); ++i) an->grad[argmax[i]] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& a) {
  detail::require_rank(a, 4, "upsample2");
  const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  const int oh = 2 * h, ow = 2 * w;
  const auto av = a.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c * oh * ow);
  for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        out[p * oh * ow + static_cast<std::size_t>(y) * ow + x] = av[p * h * w + static_cast<std::size_t>(y / 2) * w + x / 2];
  auto an = a.node();
  return detail::make_result<T>("upsample2", {n, c, oh, ow}, std::move(out), {a},
                                [an, n, c, h, w, oh, ow](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p)
                                    for (int y = 0; y < oh; ++y)
                                      for (int x = 0; x < ow; ++x)
                                        an->grad[p * h * w + static_cast<std::size_t>(y / 2) * w + x / 2] +=
                                            self.grad[p * oh * ow + static_cast<std::size_t>(y) * ow + x];
                                });
}

// N x C x H x W -> N x C
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& a) {
  detail::require_rank(a, 4, "global_avg_pool");
  const int n = a.dim(0), c = a.dim(1);
  const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  const auto av = a.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c);
  for (std::size_t p = 0; p < out.size(); ++p) {
    T acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += av[p * plane + i];
    out[p] = acc / static_cast<T>(plane);
  }
  auto an = a.node();
  return detail::make_result<T>("global_avg_pool", {n, c}, std::move(out), {a}, [an, plane](Node<T>& self) {
    an->ensure_grad();
    for (std::size_t p = 0; p < self.grad.size(); ++p) {
      const T g = self.grad[p] / static_cast<T>(plane);
      for (std::size_t i = 0; i < plane; ++i) an->grad[p * plane + i] += g;
    }
  });
}

// x [N, I], weight [O, I], optional bias [O] -> [N, O]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  detail::require_rank(x, 2, "linear input");
  detail::require_rank(weight, 2, "linear weight");
  const int n = x.dim(0), in = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != in)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  if (bias && (bias->rank() != 1 || bias->dim(0) != o))
    throw ShapeError("linear: bias " + shape_str(bias->shape()));
  const auto xv = x.values();
  const auto wv = weight.values();
  std::vector<T> out(static_cast<std::size_t>(n) * o);
  for (int b = 0; b < n; ++b)
    for (int r = 0; r < o; ++r) {
      T acc = bias ? bias->values()[r] : T(0);
      for (int i = 0; i < in; ++i) acc += wv[static_cast<std::size_t>(r) * in + i] * xv[static_cast<std::size_t>(b) * in + i];
      out[static_cast<std::size_t>(b) * o + r] = acc;
    }
  std::vector<Tensor<T>> parents{x, weight};
  if (bias) parents.push_back(*bias);
  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias ? bias->node() : nullptr;
  return detail::make_result<T>("linear", {n, o}, std::move(out), std::move(parents),
                                [xn, wn, bn, n, in, o](Node<T>& self) {
                                  if (xn->requires_grad) xn->ensure_grad();
                                  if (wn->requires_grad) wn->ensure_grad();
                                  if (bn && bn->requires_grad) bn->ensure_grad();
                                  for (int b = 0; b < n; ++b)
                                    for (int r = 0; r < o; ++r) {
                                      const T g = self.grad[static_cast<std::size_t>(b) * o + r];
                                      if (bn && bn->requires_grad) bn->grad[r] += g;
                                      for (int i = 0; i < in; ++i) {
                                        const auto wi = static_cast<std::size_t>(r) * in + i;
                                        const auto xi = static_cast<std::size_t>(b) * in + i;
                                        if (xn->requires_grad) xn->grad[xi] += g * wn->value[wi];
                                        if (wn->requires_grad) wn->grad[wi] += g * xn->value[xi];
                                      }
                                    }
                                });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return linear(x, weight, &bias);
}

// v [N, n] -> [N, n, H, W] with every plane constant.
template <typename T>
Tensor<T> repeat_spatial(const Tensor<T>& v, int h, int w) {
  detail::require_rank(v, 2, "repeat_spatial");
  if (h <= 0 || w <= 0) throw ShapeError("repeat_spatial: non-positive spatial size");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<T> out(v.size() * plane);
  for (std::size_t p = 0; p < v.size(); ++p) std::fill_n(out.begin() + p * plane, plane, v.values()[p]);
  auto vn = v.node();
  return detail::make_result<T>("repeat_spatial", {v.dim(0), v.dim(1), h, w}, std::move(out), {v},
                                [vn, plane](Node<T>& self) {
                                  vn->ensure_grad();
                                  for (std::size_t p = 0; p < vn->value.size(); ++p) {
                                    T acc = 0;
                                    for (std::size_t i = 0; i < plane; ++i) acc += self.grad[p * plane + i];
                                    vn->grad[p] += acc;
                                  }
                                });
}

// Columns [begin, end) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int begin, int end) {
  detail::require_rank(a, 2, "slice_cols");
  const int n = a.dim(0), m = a.dim(1);
  if (begin < 0 || end > m || begin >= end)
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     shape_str(a.shape()));
  const int width = end - begin;
  std::vector<T> out(static_cast<std::size_t>(n) * width);
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < width; ++j) out[static_cast<std::size_t>(r) * width + j] = a.values()[static_cast<std::size_t>(r) * m + begin + j];
  auto an = a.node();
  return detail::make_result<T>("slice_cols", {n, width}, std::move(out), {a},
                                [an, n, m, begin, width](Node<T>& self) {
                                  an->ensure_grad();
                                  for (int r = 0; r < n; ++r)
                                    for (int j = 0; j < width; ++j)
                                      an->grad[static_cast<std::size_t>(r) * m + begin + j] +=
                                          self.grad[static_cast<std::size_t>(r) * width + j];
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  auto an = a.node();
  return detail::make_result<T>("sum", {1}, {acc}, {a}, [an](Node<T>& self) {
    an->ensure_grad();
    for (auto& g : an->grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T count = static_cast<T>(a.size());
  T acc = 0;
  for (T v : a.values()) acc += v;
  auto an = a.node();
  return detail::make_result<T>("mean", {1}, {acc / count}, {a}, [an, count](Node<T>& self) {
    an->ensure_grad();
    for (auto& g : an->grad) g += self.grad[0] / count;
  });
}

// Sums everything except the leading axis: [N, ...] -> [N].
template <typename T>
Tensor<T> sum_per_sample(const Tensor<T>& a) {
  const int n = a.dim(0);
  const std::size_t chunk = a.size() / n;
  std::vector<T> out(n, T(0));
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < chunk; ++i) out[b] += a.values()[b * chunk + i];
  auto an = a.node();
  return detail::make_result<T>("sum_per_sample", {n}, std::move(out), {a}, [an, chunk](Node<T>& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[i / chunk];
  });
}

// ---------------------------------------------------------------------------
// Reverse pass

// Nodes reachable from root in deterministic post-order (parents before children).
template <typename T>
std::vector<Node<T>*> topological_order(const Tensor<T>& root) {
  std::vector<Node<T>*> order;
  std::unordered_set<const Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

// Accumulates d(loss)/d(leaf) into every learnable leaf reachable from loss.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  auto order = topological_order(loss);
  for (auto* n : order)
    if (n->backward_fn) n->grad.assign(n->value.size(), T(0));
  loss.node()->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// Names of the named leaves the value of root depends on.
template <typename T>
std::vector<std::string> reachable_leaf_names(const Tensor<T>& root) {
  std::vector<std::string> names;
  for (auto* n : topological_order(root))
    if (n->parents.empty() && !n->name.empty()) names.push_back(n->name);
  return names;
}

template <typename T>
bool depends_on(const Tensor<T>& root, const Tensor<T>& target) {
  for (auto* n : topological_order(root))
    if (n == target.node().get()) return true;
  return false;
}

}  // namespace mambo
