#pragma once

#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "scsf/tensor.hpp"

// Absolute-tolerance comparison; doctest's Approx is relative-only.
#define CHECK_NEAR(a, b, tol)                                        \
  do {                                                               \
    const double check_near_a = (a);                                 \
    const double check_near_b = (b);                                 \
    INFO("|", check_near_a, " - ", check_near_b, "| <= ", (tol));    \
    CHECK(std::fabs(check_near_a - check_near_b) <= (tol));          \
  } while (0)

namespace scsf_test {

inline scsf::Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng,
                                  bool requires_grad = false, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return scsf::Tensor::from_data(std::move(shape), v, requires_grad);
}

}  // namespace scsf_test
