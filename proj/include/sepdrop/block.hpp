#pragma once

#include <functional>
#include <string>

#include "sepdrop/gates.hpp"
#include "sepdrop/layers.hpp"
#include "sepdrop/schedule.hpp"

namespace sepdrop {

struct BlockSpec {
  int in_channels = 16;
  int out_channels = 16;
  int stride = 1;
  VariantKind variant = VariantKind::PyramidNet;
  double survival = 1.0;
};

/// Parameter-free identity path: 2x2 average pooling when `stride` is 2,
/// then zero channels appended up to `out_channels`.
template <typename Scalar>
Tensor<Scalar> shortcut(const Tensor<Scalar>& x, std::int64_t out_channels, int stride) {
  if (stride != 1 && stride != 2) throw std::invalid_argument("shortcut: stride must be 1 or 2");
  if (out_channels < x.shape().c)
    throw ShapeError("shortcut: cannot narrow " + std::to_string(x.shape().c) + " channels to " + std::to_string(out_channels));
  Tensor<Scalar> y = stride == 2 ? avgpool2x2(x) : x;
  return out_channels == y.shape().c ? y : pad_channels(y, out_channels);
}

/// Pre-activation basic block: BN -> conv3x3 -> BN -> ReLU -> conv3x3 -> BN
/// on the branch, plus the zero-padded shortcut. Downsampling happens in the
/// first convolution.
template <typename Scalar>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  explicit ResidualBlock(const BlockSpec& spec)
      : spec_(spec),
        bn1_(spec.in_channels),
        conv1_(spec.in_channels, spec.out_channels, 3, spec.stride, 1),
        bn2_(spec.out_channels),
        conv2_(spec.out_channels, spec.out_channels, 3, 1, 1),
        bn3_(spec.out_channels) {
    if (spec.out_channels < spec.in_channels) throw ConfigError("residual block cannot narrow its input");
    if (spec.stride != 1 && spec.stride != 2) throw ConfigError("residual block stride must be 1 or 2");
    if (!(spec.survival > 0.0 && spec.survival <= 1.0)) throw ConfigError("survival probability must lie in (0, 1]");
  }

  const BlockSpec& spec() const { return spec_; }

  template <typename Rng>
  void initialize(Rng& rng) {
    conv1_.initialize(rng);
    conv2_.initialize(rng);
  }

  /// Drops the ReLU from the branch, leaving an affine map when BN uses
  /// running statistics. Used to check gate expectations exactly.
  void set_branch_activation(bool on) { branch_relu_ = on; }

  Tensor<Scalar> residual(const Tensor<Scalar>& x, Mode bn_mode) {
    Tensor<Scalar> h = conv1_(bn1_(x, bn_mode));
    h = bn2_(h, bn_mode);
    if (branch_relu_) h = relu(h);
    return bn3_(conv2_(h), bn_mode);
  }

  /// Training mode applies the gate outcomes; inference mode scales every
  /// gated part by the survival probability instead. `bn_mode` selects batch
  /// or running statistics independently of the gate semantics.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const GateDraw& gate, Mode mode, Mode bn_mode) {
    if (x.shape().c != spec_.in_channels)
      throw ShapeError("residual block expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                       x.shape().str());
    const GateKind kind = gate_kind_for(spec_.variant);
    if (mode == Mode::Training) {
      if (gate.kind != kind) throw std::invalid_argument("gate/part mismatch: gate kind does not match block variant");
      if (kind == GateKind::None && !(gate.base_gate && gate.extra_gate))
        throw std::invalid_argument("gate/part mismatch: ungated block received a closed gate");
      if (kind == GateKind::Shared && gate.base_gate != gate.extra_gate)
        throw std::invalid_argument("gate/part mismatch: shared gate with differing parts");
    }

    Tensor<Scalar> branch = residual(x, bn_mode);
    Tensor<Scalar> identity = shortcut(x, spec_.out_channels, spec_.stride);
    if (kind == GateKind::None) return add(identity, branch);

    const bool training = mode == Mode::Training;
    const auto survival = static_cast<Scalar>(spec_.survival);
    const Scalar base = training ? Scalar(gate.base_gate ? 1 : 0) : survival;
    const Scalar extra = training ? Scalar(gate.extra_gate ? 1 : 0) : survival;
    if (kind == GateKind::Shared || spec_.out_channels == spec_.in_channels) return add(identity, scale(branch, base));

    Tensor<Scalar> lower = scale(slice_channels(branch, 0, spec_.in_channels), base);
    Tensor<Scalar> upper = scale(slice_channels(branch, spec_.in_channels, spec_.out_channels), extra);
    return add(identity, concat_channels(lower, upper));
  }

  void visit_parameters(const std::string& prefix, const std::function<void(const std::string&, Tensor<Scalar>&)>& fn) {
    fn(prefix + ".bn1.gamma", bn1_.gamma);
    fn(prefix + ".bn1.beta", bn1_.beta);
    fn(prefix + ".conv1.weight", conv1_.weight);
    fn(prefix + ".bn2.gamma", bn2_.gamma);
    fn(prefix + ".bn2.beta", bn2_.beta);
    fn(prefix + ".conv2.weight", conv2_.weight);
    fn(prefix + ".bn3.gamma", bn3_.gamma);
    fn(prefix + ".bn3.beta", bn3_.beta);
  }

  void visit_buffers(const std::string& prefix, const std::function<void(const std::string&, Buffer<Scalar>&)>& fn) {
    for (auto [name, bn] : {std::pair{".bn1", &bn1_}, std::pair{".bn2", &bn2_}, std::pair{".bn3", &bn3_}}) {
      fn(prefix + name + ".running_mean", bn->running_mean);
      fn(prefix + name + ".running_var", bn->running_var);
    }
  }

 private:
  BlockSpec spec_;
  BatchNorm<Scalar> bn1_;
  Conv2d<Scalar> conv1_;
  BatchNorm<Scalar> bn2_;
  Conv2d<Scalar> conv2_;
  BatchNorm<Scalar> bn3_;
  bool branch_relu_ = true;
};

}  // namespace sepdrop
