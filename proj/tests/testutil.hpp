#pragma once

#include <cmath>
#include <functional>

#include <doctest.h>

#include "feddet/rng.hpp"
#include "feddet/tensor.hpp"

namespace feddet::test {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Central finite differences on every element of x against an analytic
// gradient. `f` re-evaluates the scalar loss after x is perturbed in place.
inline void check_gradient(Tensor& x, const Tensor& analytic, const std::function<double()>& f,
                           double step = 1e-4, double tol = 1e-4, double abs_tol = 1e-9) {
  REQUIRE(analytic.same_shape(x));
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double orig = x.data[i];
    x.data[i] = orig + step;
    const double up = f();
    x.data[i] = orig - step;
    const double down = f();
    x.data[i] = orig;
    const double fd = (up - down) / (2 * step);
    const double an = analytic.data[i];
    // below abs_tol the central difference is dominated by rounding noise
    if (std::abs(an - fd) <= abs_tol) continue;
    INFO("element ", i, ": analytic ", an, " vs fd ", fd);
    CHECK(rel_err(an, fd) < tol);
  }
}

}  // namespace feddet::test
