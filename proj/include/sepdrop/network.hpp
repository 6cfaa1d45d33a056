#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sepdrop/block.hpp"
#include "sepdrop/network_spec.hpp"
#include "sepdrop/rng.hpp"

namespace sepdrop {

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar>
struct NamedBuffer {
  std::string name;
  Buffer<Scalar>* buffer;
};

/// Stem conv -> residual blocks in three stages -> BN -> ReLU -> global
/// average pool -> linear classifier.
template <typename Scalar>
class Network {
 public:
  explicit Network(const NetworkSpec& spec)
      : spec_(spec),
        channels_(channel_schedule_for(spec)),
        survival_(survival_schedule_for(spec)),
        stem_(spec.in_channels, spec.base_width, 3, 1, 1),
        head_bn_(channels_.final_width()),
        classifier_(channels_.final_width(), spec.num_classes) {
    for (const BlockSpec& b : block_specs_for(spec)) blocks_.emplace_back(b);
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  /// Constructs and MSRA-initializes every convolution and the classifier,
  /// in network order.
  static Network build(const NetworkSpec& spec, Rng& rng) {
    Network net(spec);
    net.initialize(rng);
    return net;
  }

  void initialize(Rng& rng) {
    stem_.initialize(rng);
    for (auto& b : blocks_) b.initialize(rng);
    classifier_.initialize(rng);
  }

  const NetworkSpec& spec() const { return spec_; }
  const ChannelSchedule& channels() const { return channels_; }
  const SurvivalSchedule& survival() const { return survival_; }
  int block_count() const { return static_cast<int>(blocks_.size()); }
  ResidualBlock<Scalar>& block(int i) { return blocks_.at(i); }

  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  /// Forces running statistics in every BN layer while keeping training-mode
  /// gate semantics.
  void set_batchnorm_frozen(bool frozen) { bn_frozen_ = frozen; }
  bool batchnorm_frozen() const { return bn_frozen_; }

  std::vector<GateDraw> draw_gates(Rng& rng, std::uint64_t stream = 0) const {
    return sepdrop::draw_gates(survival_, spec_.variant, rng, stream);
  }
  std::vector<GateDraw> pinned_gates(bool open) const { return sepdrop::pinned_gates(survival_, spec_.variant, open); }

  /// x: (batch, in_channels, image_size, image_size) -> logits (batch, classes).
  /// Training mode needs one gate per block; inference mode ignores gates.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, std::span<const GateDraw> gates) {
    const Shape s = x.shape();
    if (s.c != spec_.in_channels || s.h != spec_.image_size || s.w != spec_.image_size)
      throw ShapeError("network expects input (batch, " + std::to_string(spec_.in_channels) + ", " +
                       std::to_string(spec_.image_size) + ", " + std::to_string(spec_.image_size) + "), got " + s.str());
    if (mode_ == Mode::Training && gates.size() != blocks_.size())
      throw std::invalid_argument("gate count mismatch: " + std::to_string(gates.size()) + " gates for " +
                                  std::to_string(blocks_.size()) + " blocks");
    if (mode_ == Mode::Inference && !gates.empty() && gates.size() != blocks_.size())
      throw std::invalid_argument("gate count mismatch: " + std::to_string(gates.size()) + " gates for " +
                                  std::to_string(blocks_.size()) + " blocks");
    const Mode bn_mode = bn_frozen_ ? Mode::Inference : mode_;

    Tensor<Scalar> h = stem_(x);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const GateDraw gate = gates.empty() ? GateDraw{int(i), gate_kind_for(spec_.variant), true, true, survival_.survival[i], 0}
                                          : gates[i];
      h = blocks_[i].forward(h, gate, mode_, bn_mode);
    }
    h = relu(head_bn_(h, bn_mode));
    return classifier_(global_avg_pool(h));
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) { return forward(x, std::span<const GateDraw>{}); }

  /// Learnable tensors in a fixed order with stable names
  /// (stage.block.layer.role, e.g. s2.b3.conv1.weight).
  std::vector<NamedTensor<Scalar>> parameters() {
    std::vector<NamedTensor<Scalar>> out;
    visit_parameters([&](const std::string& name, Tensor<Scalar>& t) { out.push_back({name, t}); });
    return out;
  }

  /// BN running statistics, same ordering rules as parameters().
  std::vector<NamedBuffer<Scalar>> buffers() {
    std::vector<NamedBuffer<Scalar>> out;
    visit_buffers([&](const std::string& name, Buffer<Scalar>& b) { out.push_back({name, &b}); });
    return out;
  }

  std::int64_t registry_size() {
    std::int64_t n = 0;
    for (auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  /// Copies parameter values and running statistics from a network of the
  /// same spec. Gradients are cleared.
  void copy_state_from(Network& other) {
    if (!(other.spec_ == spec_)) throw std::invalid_argument("copy_state_from: network specs differ");
    auto dst = parameters();
    auto src = other.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i].tensor.data() = src[i].tensor.data();
      dst[i].tensor.zero_grad();
    }
    auto dbuf = buffers();
    auto sbuf = other.buffers();
    for (std::size_t i = 0; i < dbuf.size(); ++i) *dbuf[i].buffer = *sbuf[i].buffer;
    mode_ = other.mode_;
    bn_frozen_ = other.bn_frozen_;
  }

  /// Independent deep copy.
  Network clone() {
    Network copy(spec_);
    copy.copy_state_from(*this);
    return copy;
  }

  void visit_parameters(const std::function<void(const std::string&, Tensor<Scalar>&)>& fn) {
    fn("stem.conv.weight", stem_.weight);
    const int per_stage = spec_.blocks_per_stage();
    for (int i = 0; i < block_count(); ++i) blocks_[i].visit_parameters(block_prefix(i, per_stage), fn);
    fn("head.bn.gamma", head_bn_.gamma);
    fn("head.bn.beta", head_bn_.beta);
    fn("head.fc.weight", classifier_.weight);
    fn("head.fc.bias", classifier_.bias);
  }

  void visit_buffers(const std::function<void(const std::string&, Buffer<Scalar>&)>& fn) {
    const int per_stage = spec_.blocks_per_stage();
    for (int i = 0; i < block_count(); ++i) blocks_[i].visit_buffers(block_prefix(i, per_stage), fn);
    fn("head.bn.running_mean", head_bn_.running_mean);
    fn("head.bn.running_var", head_bn_.running_var);
  }

 private:
  static std::string block_prefix(int i, int per_stage) {
    return "s" + std::to_string(i / per_stage + 1) + ".b" + std::to_string(i % per_stage + 1);
  }

  NetworkSpec spec_;
  ChannelSchedule channels_;
  SurvivalSchedule survival_;
  Conv2d<Scalar> stem_;
  std::vector<ResidualBlock<Scalar>> blocks_;
  BatchNorm<Scalar> head_bn_;
  Linear<Scalar> classifier_;
  Mode mode_ = Mode::Training;
  bool bn_frozen_ = false;
};

}  // namespace sepdrop
