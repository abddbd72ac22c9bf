#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mambo::causal {

using Distribution = std::vector<double>;

// Three-variable model with edges C -> X, C -> Y and X -> Y.
//   p_c[c], p_x_given_c[c][x], p_y_given_xc[x][c][y]
struct DiscreteScm {
  std::vector<double> p_c;
  std::vector<std::vector<double>> p_x_given_c;
  std::vector<std::vector<std::vector<double>>> p_y_given_xc;

  std::size_t c_size() const { return p_c.size(); }
  std::size_t x_size() const { return p_x_given_c.empty() ? 0 : p_x_given_c[0].size(); }
  std::size_t y_size() const {
    return p_y_given_xc.empty() || p_y_given_xc[0].empty() ? 0 : p_y_given_xc[0][0].size();
  }

  void validate(double tol = 1e-12) const {
    auto check_row = [tol](const std::vector<double>& row, const std::string& what) {
      double s = 0;
      for (double v : row) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument(what + " has a negative or non-finite entry");
        s += v;
      }
      if (std::abs(s - 1.0) > tol) throw std::invalid_argument(what + " sums to " + std::to_string(s));
    };
    if (p_c.empty()) throw std::invalid_argument("P(C) is empty");
    check_row(p_c, "P(C)");
    if (p_x_given_c.size() != c_size()) throw std::invalid_argument("P(X|C) needs one row per value of C");
    for (std::size_t c = 0; c < c_size(); ++c) {
      if (p_x_given_c[c].size() != x_size() || x_size() == 0) throw std::invalid_argument("ragged P(X|C)");
      check_row(p_x_given_c[c], "P(X|C=" + std::to_string(c) + ")");
    }
    if (p_y_given_xc.size() != x_size()) throw std::invalid_argument("P(Y|X,C) needs one block per value of X");
    for (std::size_t x = 0; x < x_size(); ++x) {
      if (p_y_given_xc[x].size() != c_size()) throw std::invalid_argument("P(Y|X,C) needs one row per value of C");
      for (std::size_t c = 0; c < c_size(); ++c) {
        if (p_y_given_xc[x][c].size() != y_size() || y_size() == 0) throw std::invalid_argument("ragged P(Y|X,C)");
        check_row(p_y_given_xc[x][c], "P(Y|X=" + std::to_string(x) + ",C=" + std::to_string(c) + ")");
      }
    }
  }
};

namespace detail {
inline void check_x(const DiscreteScm& scm, std::size_t x) {
  if (x >= scm.x_size()) throw std::out_of_range("x=" + std::to_string(x) + " outside domain of X");
}
}  // namespace detail

// P(Y | X = x) from the full joint P(c) P(x|c) P(y|x,c).
inline Distribution observational(const DiscreteScm& scm, std::size_t x) {
  detail::check_x(scm, x);
  Distribution joint(scm.y_size(), 0.0);
  double px = 0;
  for (std::size_t c = 0; c < scm.c_size(); ++c)
    for (std::size_t xv = 0; xv < scm.x_size(); ++xv)
      for (std::size_t y = 0; y < scm.y_size(); ++y) {
        const double p = scm.p_c[c] * scm.p_x_given_c[c][xv] * scm.p_y_given_xc[xv][c][y];
        if (xv != x) continue;
        joint[y] += p;
        px += p;
      }
  if (px <= 0) throw std::domain_error("P(X=" + std::to_string(x) + ") is zero");
  for (auto& v : joint) v /= px;
  return joint;
}

// sum_c P(Y | x, c) P(c)
inline Distribution backdoor_adjust(const DiscreteScm& scm, std::size_t x) {
  detail::check_x(scm, x);
  Distribution out(scm.y_size(), 0.0);
  for (std::size_t c = 0; c < scm.c_size(); ++c)
    for (std::size_t y = 0; y < scm.y_size(); ++y) out[y] += scm.p_y_given_xc[x][c][y] * scm.p_c[c];
  return out;
}

// Graph surgery: drop C -> X, clamp X := x, enumerate the truncated joint
// over every (c, x', y) state and marginalize.
inline Distribution intervene_enumerate(const DiscreteScm& scm, std::size_t x) {
  detail::check_x(scm, x);
  Distribution out(scm.y_size(), 0.0);
  double mass = 0;
  for (std::size_t c = 0; c < scm.c_size(); ++c)
    for (std::size_t xv = 0; xv < scm.x_size(); ++xv) {
      const double px = xv == x ? 1.0 : 0.0;
      for (std::size_t y = 0; y < scm.y_size(); ++y) {
        const double p = scm.p_c[c] * px * scm.p_y_given_xc[xv][c][y];
        out[y] += p;
        mass += p;
      }
    }
  for (auto& v : out) v /= mass;
  return out;
}

inline double total_variation(const Distribution& a, const Distribution& b) {
  if (a.size() != b.size()) throw std::invalid_argument("total_variation: size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

// Confounder value used by the expectation-inside approximation:
// round(E[C]) with C embedded by its index.
inline std::size_t expected_confounder(const DiscreteScm& scm) {
  double e = 0;
  for (std::size_t c = 0; c < scm.c_size(); ++c) e += static_cast<double>(c) * scm.p_c[c];
  const auto r = static_cast<long>(std::lround(e));
  return static_cast<std::size_t>(std::clamp<long>(r, 0, static_cast<long>(scm.c_size()) - 1));
}

// TV distance between E_C[P(Y|x,C)] and P(Y | x, round(E[C])).
inline double approximation_gap(const DiscreteScm& scm, std::size_t x) {
  const auto exact = backdoor_adjust(scm, x);
  const auto& approx = scm.p_y_given_xc[x][expected_confounder(scm)];
  return total_variation(exact, approx);
}

// Uniform draw from the probability simplex (normalized unit exponentials).
template <typename Gen>
std::vector<double> random_simplex(std::size_t n, Gen& gen) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(n);
  double s = 0;
  for (auto& x : v) s += (x = e(gen));
  for (auto& x : v) x /= s;
  return v;
}

template <typename Gen>
DiscreteScm random_scm(std::size_t nc, std::size_t nx, std::size_t ny, Gen& gen) {
  DiscreteScm scm;
  scm.p_c = random_simplex(nc, gen);
  for (std::size_t c = 0; c < nc; ++c) scm.p_x_given_c.push_back(random_simplex(nx, gen));
  scm.p_y_given_xc.assign(nx, {});
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t c = 0; c < nc; ++c) scm.p_y_given_xc[x].push_back(random_simplex(ny, gen));
  return scm;
}

// Binary example used throughout the docs: P(C=1)=0.3, P(X=1|C)=(0.2, 0.9),
// P(Y=1|x,c) = {00: 0.1, 01: 0.5, 10: 0.6, 11: 0.95}.
inline DiscreteScm worked_example() {
  DiscreteScm s;
  s.p_c = {0.7, 0.3};
  s.p_x_given_c = {{0.8, 0.2}, {0.1, 0.9}};
  s.p_y_given_xc = {{{0.9, 0.1}, {0.5, 0.5}}, {{0.4, 0.6}, {0.05, 0.95}}};
  return s;
}

}  // namespace mambo::causal
