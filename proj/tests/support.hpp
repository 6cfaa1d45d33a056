#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

#include "sepdrop/tensor.hpp"

namespace testing_support {

using sepdrop::Buffer;
using sepdrop::Shape;
using sepdrop::Tensor;

template <typename Scalar>
Tensor<Scalar> uniform(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Buffer<Scalar> d(s.numel());
  for (auto& v : d) v = static_cast<Scalar>(u(rng));
  Tensor<Scalar> t(s, std::move(d));
  t.set_requires_grad();
  return t;
}

// Central differences of a scalar function of `x`, written independently of
// the library's gradient checker.
template <typename Scalar>
std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor<Scalar>& x, double h) {
  std::vector<double> g(x.numel());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const Scalar saved = x[i];
    x[i] = static_cast<Scalar>(saved + h);
    const double up = f();
    x[i] = static_cast<Scalar>(saved - h);
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

template <typename Scalar>
double max_relative_error(const Buffer<Scalar>& analytic, const std::vector<double>& numeric, double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
  }
  return worst;
}

template <typename Scalar>
bool bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::memcmp(a.data().data(), b.data().data(), sizeof(Scalar) * a.numel()) == 0;
}

}  // namespace testing_support
