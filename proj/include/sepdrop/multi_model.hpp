#pragma once

#include <cmath>
#include <cstring>
#include <exception>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "sepdrop/checksum.hpp"
#include "sepdrop/classify.hpp"
#include "sepdrop/network.hpp"
#include "sepdrop/optimizer.hpp"

namespace sepdrop {

class ReplicaDivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
struct SubBatch {
  Tensor<Scalar> images;
  std::vector<int> labels;
};

/// Contiguous, order-preserving split of a batch into k equal parts.
template <typename Scalar>
std::vector<SubBatch<Scalar>> split_batch(const Tensor<Scalar>& images, std::span<const int> labels, int k) {
  const Shape s = images.shape();
  if (k < 1) throw std::invalid_argument("split_batch: need at least one part");
  if (std::int64_t(labels.size()) != s.n) throw ShapeError("split_batch: label count does not match the batch");
  if (s.n % k != 0)
    throw std::invalid_argument("split_batch: batch of " + std::to_string(s.n) + " is not divisible into " +
                                std::to_string(k) + " parts");
  const std::int64_t part = s.n / k;
  const std::int64_t per = s.c * s.h * s.w;
  std::vector<SubBatch<Scalar>> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) {
    Buffer<Scalar> data = images.data().segment(i * part * per, part * per);
    out.push_back({Tensor<Scalar>(Shape{part, s.c, s.h, s.w}, std::move(data)),
                   std::vector<int>(labels.begin() + i * part, labels.begin() + (i + 1) * part)});
  }
  return out;
}

/// CRC-32 over every parameter value of `net`, in registry order.
template <typename Scalar>
std::uint32_t parameter_checksum(Network<Scalar>& net) {
  std::vector<unsigned char> bytes;
  for (auto& p : net.parameters()) {
    const auto* d = reinterpret_cast<const unsigned char*>(p.tensor.data().data());
    bytes.insert(bytes.end(), d, d + p.tensor.numel() * sizeof(Scalar));
  }
  return crc32_of(bytes.data(), bytes.size());
}

/// K deep copies of one network that train on disjoint sub-batches. Each
/// replica owns its BN running statistics; parameters are kept identical by
/// the step functions below.
template <typename Scalar>
class ReplicaGroup {
 public:
  ReplicaGroup(Network<Scalar> primary, int k) {
    if (k < 1) throw std::invalid_argument("replica group needs at least one model");
    replicas_.push_back(std::move(primary));
    for (int i = 1; i < k; ++i) replicas_.push_back(replicas_.front().clone());
  }

  int size() const { return static_cast<int>(replicas_.size()); }
  Network<Scalar>& replica(int i) { return replicas_.at(i); }
  Network<Scalar>& primary() { return replicas_.front(); }

  void set_mode(Mode m) {
    for (auto& r : replicas_) r.set_mode(m);
  }
  void set_batchnorm_frozen(bool frozen) {
    for (auto& r : replicas_) r.set_batchnorm_frozen(frozen);
  }
  void zero_grad() {
    for (auto& r : replicas_) r.zero_grad();
  }

  /// Throws ReplicaDivergenceError naming the first replica whose parameter
  /// checksum differs from replica 0.
  void verify_consistent() {
    if (size() == 1) return;
    const std::uint32_t ref = parameter_checksum(replicas_.front());
    for (int i = 1; i < size(); ++i)
      if (parameter_checksum(replicas_[i]) != ref)
        throw ReplicaDivergenceError("replica " + std::to_string(i) + " parameters diverged from replica 0");
  }

  /// Largest |w_i - w_0| over all replicas and parameters.
  double max_parameter_difference() {
    double worst = 0.0;
    auto ref = replicas_.front().parameters();
    for (int i = 1; i < size(); ++i) {
      auto other = replicas_[i].parameters();
      for (std::size_t j = 0; j < ref.size(); ++j)
        worst = std::max(worst, double((ref[j].tensor.data() - other[j].tensor.data()).abs().maxCoeff()));
    }
    return worst;
  }

  /// Replica 0's gradient becomes the arithmetic mean of all replicas'
  /// gradients, summed in replica order in double precision.
  void average_gradients() {
    if (size() == 1) return;
    std::vector<std::vector<NamedTensor<Scalar>>> params;
    for (auto& r : replicas_) params.push_back(r.parameters());
    for (std::size_t j = 0; j < params[0].size(); ++j) {
      Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(params[0][j].tensor.numel());
      for (int k = 0; k < size(); ++k) {
        const Tensor<Scalar>& t = params[k][j].tensor;
        if (!t.has_grad())
          throw MissingGradientError("replica " + std::to_string(k) + " has no gradient for " + params[k][j].name);
        acc += t.grad().template cast<double>();
      }
      params[0][j].tensor.grad() = (acc / double(size())).template cast<Scalar>();
    }
  }

  /// Copies replica 0's parameter values to every other replica.
  void broadcast_parameters() {
    auto src = replicas_.front().parameters();
    for (int i = 1; i < size(); ++i) {
      auto dst = replicas_[i].parameters();
      for (std::size_t j = 0; j < src.size(); ++j) dst[j].tensor.data() = src[j].tensor.data();
    }
  }

  /// Every replica's parameters become the replica-order mean.
  void average_parameters() {
    if (size() == 1) return;
    average_each([](Network<Scalar>& n) {
      std::vector<Buffer<Scalar>*> out;
      for (auto& p : n.parameters()) out.push_back(&p.tensor.data());
      return out;
    });
  }

  /// Every replica's BN running statistics become the replica-order mean.
  void average_running_stats() {
    if (size() == 1) return;
    average_each([](Network<Scalar>& n) {
      std::vector<Buffer<Scalar>*> out;
      for (auto& b : n.buffers()) out.push_back(b.buffer);
      return out;
    });
  }

 private:
  template <typename Collect>
  void average_each(Collect collect) {
    std::vector<std::vector<Buffer<Scalar>*>> views;
    for (auto& r : replicas_) views.push_back(collect(r));
    for (std::size_t j = 0; j < views[0].size(); ++j) {
      Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(views[0][j]->size());
      for (auto& v : views) acc += v[j]->template cast<double>();
      const Buffer<Scalar> mean = (acc / double(size())).template cast<Scalar>();
      for (auto& v : views) *v[j] = mean;
    }
  }

  std::vector<Network<Scalar>> replicas_;
};

/// Supplies one replica's gates for one step.
template <typename Scalar>
using GateSource = std::function<std::vector<GateDraw>(int replica, Network<Scalar>& net)>;

struct StepSummary {
  std::vector<double> losses;  // per replica
  int errors = 0;              // top-1 mistakes over the whole batch
  int samples = 0;
  std::vector<std::vector<GateDraw>> gates;  // per replica

  double mean_loss() const {
    double s = 0.0;
    for (double l : losses) s += l;
    return losses.empty() ? 0.0 : s / double(losses.size());
  }
};

/// Forward and backward on every replica's sub-batch; gradients stay on
/// the replicas. Concurrent execution runs one thread per replica and gives
/// the same results as sequential execution.
template <typename Scalar>
StepSummary replica_pass(ReplicaGroup<Scalar>& group, std::span<const SubBatch<Scalar>> parts,
                         const GateSource<Scalar>& gates, bool concurrent = false) {
  const int k = group.size();
  if (int(parts.size()) != k)
    throw std::invalid_argument("replica pass: " + std::to_string(parts.size()) + " sub-batches for " +
                                std::to_string(k) + " replicas");
  StepSummary summary;
  summary.losses.assign(k, 0.0);
  summary.gates.resize(k);
  std::vector<int> errors(k, 0);
  // Gates are drawn up front on the calling thread so draw order never
  // depends on scheduling.
  for (int i = 0; i < k; ++i) summary.gates[i] = gates(i, group.replica(i));

  auto work = [&](int i) {
    Network<Scalar>& net = group.replica(i);
    Tensor<Scalar> logits = net.forward(parts[i].images, summary.gates[i]);
    Tensor<Scalar> loss = softmax_cross_entropy(logits, std::span<const int>(parts[i].labels));
    summary.losses[i] = double(loss.item());
    errors[i] = count_top1_errors(logits, std::span<const int>(parts[i].labels));
    backward(loss);
  };
  if (concurrent && k > 1) {
    std::vector<std::exception_ptr> failures(k);
    std::vector<std::thread> threads;
    for (int i = 0; i < k; ++i)
      threads.emplace_back([&, i] {
        try {
          work(i);
        } catch (...) {
          failures[i] = std::current_exception();
        }
      });
    for (auto& t : threads) t.join();
    for (auto& f : failures)
      if (f) std::rethrow_exception(f);
  } else {
    for (int i = 0; i < k; ++i) work(i);
  }
  for (int i = 0; i < k; ++i) {
    summary.errors += errors[i];
    summary.samples += static_cast<int>(parts[i].labels.size());
  }
  return summary;
}

/// One step of synchronous gradient averaging: verify replicas agree,
/// forward/backward per replica, average gradients into replica 0, take one
/// optimizer step there and broadcast the result.
template <typename Scalar>
StepSummary synchronized_step(ReplicaGroup<Scalar>& group, std::span<const SubBatch<Scalar>> parts,
                              const GateSource<Scalar>& gates, SgdNesterov<Scalar>& optimizer, double lr,
                              bool concurrent = false) {
  group.verify_consistent();
  group.zero_grad();
  StepSummary summary = replica_pass(group, parts, gates, concurrent);
  group.average_gradients();
  auto params = group.primary().parameters();
  optimizer.step(params, lr);
  group.broadcast_parameters();
  return summary;
}

/// Alternative reading of parameter communication: every replica steps its
/// own optimizer; parameters are averaged when `synchronize` is set.
template <typename Scalar>
StepSummary periodic_step(ReplicaGroup<Scalar>& group, std::span<const SubBatch<Scalar>> parts,
                          const GateSource<Scalar>& gates, std::vector<SgdNesterov<Scalar>>& optimizers, double lr,
                          bool synchronize, bool concurrent = false) {
  if (int(optimizers.size()) != group.size()) throw std::invalid_argument("periodic step needs one optimizer per replica");
  group.zero_grad();
  StepSummary summary = replica_pass(group, parts, gates, concurrent);
  for (int i = 0; i < group.size(); ++i) {
    auto params = group.replica(i).parameters();
    optimizers[i].step(params, lr);
  }
  if (synchronize) group.average_parameters();
  return summary;
}

}  // namespace sepdrop
