#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "sepdrop/network.hpp"
#include "sepdrop/rng.hpp"

namespace sepdrop {

struct GradcheckOptions {
  double step = 1e-3;        // central-difference step
  double floor = 1e-3;       // denominator floor of the relative error
  int max_coordinates = 0;   // per tensor; 0 checks every element
  bool skip_kinks = false;   // skip coordinates whose step flips any relu
  std::uint64_t seed = 7;
};

struct GradientErrorStats {
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  std::int64_t skipped = 0;  // steps that crossed a relu kink
};

struct GradcheckResult {
  std::string component;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::int64_t checked = 0;
  std::int64_t skipped = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

/// A named check run by the harness; extra components (e.g. test fixtures)
/// can be appended to the standard list.
struct GradcheckComponent {
  std::string name;
  std::function<GradcheckResult()> run;
};

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Largest relative error between the autodiff gradient of `loss` and
/// central differences, over the elements of `wrt` (or a seeded sample of
/// at most max_coordinates per tensor). `loss` must rebuild its graph from
/// the current values of `wrt` on every call. With skip_kinks, coordinates
/// whose +-step changes any relu's on/off pattern are counted as skipped:
/// the loss is not differentiable across such a step.
template <typename Scalar>
GradientErrorStats gradient_error(const std::function<Tensor<Scalar>()>& loss, std::vector<Tensor<Scalar>> wrt,
                                  const GradcheckOptions& opt) {
  for (auto& t : wrt) {
    t.set_requires_grad();
    t.zero_grad();
  }
  backward(loss());
  Rng rng = derive_stream(opt.seed, {0x6763ULL});
  GradientErrorStats stats;
  NoGradGuard no_grad;
  ReluPatternProbe pattern;
  loss();
  const std::uint64_t base = pattern.take();
  for (auto& t : wrt) {
    std::vector<std::int64_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (opt.max_coordinates > 0 && std::int64_t(coords.size()) > opt.max_coordinates) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coordinates);
    }
    for (std::int64_t i : coords) {
      const Scalar saved = t[i];
      t[i] = static_cast<Scalar>(double(saved) + opt.step);
      const double hi = double(t[i]);
      const double up = double(loss().item());
      const std::uint64_t up_pattern = pattern.take();
      t[i] = static_cast<Scalar>(double(saved) - opt.step);
      const double lo = double(t[i]);
      const double down = double(loss().item());
      const std::uint64_t down_pattern = pattern.take();
      t[i] = saved;
      if (opt.skip_kinks && (up_pattern != base || down_pattern != base)) {
        ++stats.skipped;
        continue;
      }
      // divide by the step actually taken after rounding to Scalar
      const double numeric = (up - down) / (hi - lo);
      const double analytic = t.has_grad() ? double(t.grad()[i]) : 0.0;
      stats.max_rel_error = std::max(stats.max_rel_error, relative_error(analytic, numeric, opt.floor));
      ++stats.checked;
    }
  }
  return stats;
}

/// Uniform values in [lo, hi).
template <typename Scalar>
Tensor<Scalar> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Buffer<Scalar> data(shape.numel());
  for (auto& v : data) v = static_cast<Scalar>(u(rng));
  return Tensor<Scalar>(shape, std::move(data));
}

/// Uniform in [-1, 1) but at least `gap` away from zero, so kinks such as
/// relu's are never straddled by a finite-difference step.
template <typename Scalar>
Tensor<Scalar> random_tensor_off_zero(Shape shape, Rng& rng, double gap = 0.05) {
  Tensor<Scalar> t = random_tensor<Scalar>(shape, rng);
  for (auto& v : t.data())
    if (std::abs(double(v)) < gap) v = static_cast<Scalar>(v < 0 ? -gap : gap);
  return t;
}

/// Scalar probe sum(r * y) with a fixed random r, so every output element
/// carries a distinct upstream gradient.
template <typename Scalar>
Tensor<Scalar> probe(const Tensor<Scalar>& y, const Tensor<Scalar>& r) {
  return sum(mul(y, r));
}

/// Standard components: each differentiable op and layer in 64-bit, checked
/// at `layer_tol`, then a whole network of `spec` in 32-bit with gates pinned
/// open, checked at `network_tol`.
std::vector<GradcheckComponent> standard_gradcheck_components(const NetworkSpec& spec, const GradcheckOptions& layer_opts,
                                                              double layer_tol, const GradcheckOptions& network_opts,
                                                              double network_tol);

}  // namespace sepdrop
