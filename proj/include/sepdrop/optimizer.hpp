#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "sepdrop/network.hpp"

namespace sepdrop {

class MissingGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool is_bn_affine(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return name.find(".bn") != std::string::npos && (ends_with(".gamma") || ends_with(".beta"));
}

/// SGD with Nesterov momentum (dampening 0):
///   g' = g + wd * w;  v = momentum * v + g';  w -= lr * (g' + momentum * v)
template <typename Scalar>
class SgdNesterov {
 public:
  SgdNesterov(const std::vector<NamedTensor<Scalar>>& params, double momentum, double weight_decay,
              bool decay_bn_affine = true)
      : momentum_(momentum), weight_decay_(weight_decay), decay_bn_affine_(decay_bn_affine) {
    for (const auto& p : params) {
      names_.push_back(p.name);
      velocity_.push_back(Buffer<Scalar>::Zero(p.tensor.numel()));
    }
  }

  void step(std::vector<NamedTensor<Scalar>>& params, double lr) {
    if (params.size() != velocity_.size())
      throw std::invalid_argument("optimizer: parameter list does not match its state");
    for (const auto& p : params)
      if (!p.tensor.has_grad()) throw MissingGradientError("missing gradient for parameter " + p.name);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<Scalar>& t = params[i].tensor;
      Buffer<Scalar>& v = velocity_[i];
      const double wd = (decay_bn_affine_ || !is_bn_affine(params[i].name)) ? weight_decay_ : 0.0;
      for (std::int64_t j = 0; j < t.numel(); ++j) {
        const double w = t.data()[j];
        const double g = double(t.grad()[j]) + wd * w;
        const double vel = momentum_ * double(v[j]) + g;
        v[j] = static_cast<Scalar>(vel);
        t.data()[j] = static_cast<Scalar>(w - lr * (g + momentum_ * vel));
      }
    }
  }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Buffer<Scalar>>& velocities() { return velocity_; }
  const std::vector<Buffer<Scalar>>& velocities() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  bool decay_bn_affine_;
  std::vector<std::string> names_;
  std::vector<Buffer<Scalar>> velocity_;
};

}  // namespace sepdrop
