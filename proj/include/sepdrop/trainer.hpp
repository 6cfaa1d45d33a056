#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sepdrop/checkpoint.hpp"
#include "sepdrop/classify.hpp"
#include "sepdrop/data.hpp"
#include "sepdrop/multi_model.hpp"
#include "sepdrop/train_config.hpp"

namespace sepdrop {

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_err = 0.0;
  std::optional<double> test_err;
  double seconds = 0.0;
  int models = 1;
};

/// epoch,lr,train_loss,train_err,test_err,seconds[,models]
std::string metrics_header(bool with_models);
/// Six significant digits; an unevaluated test error is left empty.
std::string format_metrics_row(const EpochMetrics& m, bool with_models);

/// Copies images [first, first + count) of `set` into a (count, c, h, w) tensor.
template <typename Scalar>
Tensor<Scalar> images_to_tensor(const LabeledImageSet& set, int first, int count) {
  Buffer<Scalar> data(std::int64_t(count) * set.image_size());
  for (std::int64_t i = 0; i < data.size(); ++i) data[i] = static_cast<Scalar>(set.images[first * set.image_size() + i]);
  return Tensor<Scalar>(Shape{count, set.channels, set.height, set.width}, std::move(data));
}

/// Top-1 error of `net` in inference mode over an already normalized set.
/// The network's mode is restored afterwards.
template <typename Scalar>
double evaluate(Network<Scalar>& net, const LabeledImageSet& data, int batch = 250) {
  if (data.count == 0) throw DataError("cannot evaluate on an empty dataset");
  NoGradGuard no_grad;
  const Mode saved = net.mode();
  net.set_mode(Mode::Inference);
  int wrong = 0;
  for (int first = 0; first < data.count; first += batch) {
    const int n = std::min(batch, data.count - first);
    Tensor<Scalar> logits = net.forward(images_to_tensor<Scalar>(data, first, n));
    wrong += count_top1_errors(logits, std::span<const int>(data.labels.data() + first, n));
  }
  net.set_mode(saved);
  return double(wrong) / double(data.count);
}

struct TrainerOptions {
  int eval_every = 1;  // evaluate the test set every this many epochs; 0 = never
  std::optional<bool> pinned_gates;  // force every gate open (true) or closed
};

/// The epoch loop. Every epoch derives its shuffling, augmentation and gate
/// streams from (seed, purpose, epoch, replica), so a run restored from a
/// checkpoint continues exactly as an uninterrupted one would.
template <typename Scalar>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const LabeledImageSet& train, const LabeledImageSet* test, PreprocessSpec preprocess,
          TrainerOptions options = {})
      : cfg_(cfg), raw_train_(train), preprocess_(std::move(preprocess)), options_(options),
        group_(make_primary(cfg), cfg.model_count) {
    cfg_.validate();
    if (train.count < cfg_.batch_size)
      throw DataError("training set of " + std::to_string(train.count) + " samples is smaller than one batch of " +
                      std::to_string(cfg_.batch_size));
    if (train.num_classes != cfg_.network.num_classes) throw DataError("dataset class count does not match the network");
    train_normalized_ = normalize(raw_train_, preprocess_);
    if (test) test_ = normalize(*test, preprocess_);
    const auto params = group_.primary().parameters();
    const int optimizers = cfg_.sync == SyncPolicy::PeriodicAveraging ? cfg_.model_count : 1;
    for (int i = 0; i < optimizers; ++i) optimizers_.emplace_back(params, cfg_.momentum, cfg_.weight_decay, cfg_.decay_bn_affine);
  }

  const TrainConfig& config() const { return cfg_; }
  ReplicaGroup<Scalar>& group() { return group_; }
  Network<Scalar>& network() { return group_.primary(); }
  int epochs_completed() const { return epoch_; }
  const LabeledImageSet& normalized_train() const { return train_normalized_; }
  const std::optional<LabeledImageSet>& normalized_test() const { return test_; }

  /// Runs the next epoch and returns its metrics record.
  EpochMetrics train_epoch() {
    if (epoch_ >= cfg_.total_epochs) throw std::out_of_range("all configured epochs already ran");
    const auto start = std::chrono::steady_clock::now();
    const int epoch = epoch_;
    const int k = cfg_.model_count;
    const double lr = lr_at_epoch(cfg_, epoch);

    std::vector<int> order(raw_train_.count);
    for (int i = 0; i < raw_train_.count; ++i) order[i] = i;
    Rng shuffle = stream(StreamPurpose::Shuffle, epoch, 0);
    std::shuffle(order.begin(), order.end(), shuffle);

    std::vector<Rng> gate_rngs, augment_rngs;
    for (int r = 0; r < k; ++r) {
      gate_rngs.push_back(stream(StreamPurpose::Gates, epoch, r));
      augment_rngs.push_back(stream(StreamPurpose::Augment, epoch, r));
    }
    GateSource<Scalar> gates = [&](int r, Network<Scalar>& net) {
      if (options_.pinned_gates) return net.pinned_gates(*options_.pinned_gates);
      return net.draw_gates(gate_rngs[r], std::uint64_t(r));
    };

    group_.set_mode(Mode::Training);
    const int batches = raw_train_.count / cfg_.batch_size;  // last partial batch dropped
    const int part = cfg_.batch_size / k;
    double loss_sum = 0.0;
    int errors = 0, samples = 0;
    for (int b = 0; b < batches; ++b) {
      std::vector<SubBatch<Scalar>> parts;
      for (int r = 0; r < k; ++r)
        parts.push_back(assemble(std::span<const int>(order.data() + b * cfg_.batch_size + r * part, part), augment_rngs[r]));
      StepSummary s;
      if (cfg_.sync == SyncPolicy::GradientAveraging) {
        s = synchronized_step(group_, std::span<const SubBatch<Scalar>>(parts), gates, optimizers_.front(), lr,
                              cfg_.concurrent_replicas);
      } else {
        ++steps_;
        s = periodic_step(group_, std::span<const SubBatch<Scalar>>(parts), gates, optimizers_, lr,
                          steps_ % cfg_.sync_period == 0, cfg_.concurrent_replicas);
      }
      if (!std::isfinite(s.mean_loss())) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << epoch << " batch " << b << " (lr " << lr << ")";
        throw NonFiniteLossError(os.str());
      }
      loss_sum += s.mean_loss();
      errors += s.errors;
      samples += s.samples;
    }
    synchronize_epoch_end();
    ++epoch_;

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / batches;
    m.train_err = double(errors) / double(samples);
    m.models = k;
    if (test_ && options_.eval_every > 0 && (epoch_ % options_.eval_every == 0 || epoch_ == cfg_.total_epochs))
      m.test_err = evaluate(group_.primary(), *test_);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return m;
  }

  /// Inference-mode error on the (normalized, unaugmented) training set.
  double evaluate_train() { return evaluate(group_.primary(), train_normalized_); }

  Checkpoint checkpoint() {
    std::vector<const SgdNesterov<Scalar>*> opts;
    for (const auto& o : optimizers_) opts.push_back(&o);
    Checkpoint ckpt = capture_checkpoint(group_.primary(), epoch_, opts);
    ckpt.meta["seed"] = std::to_string(cfg_.seed);
    ckpt.meta["models"] = std::to_string(cfg_.model_count);
    ckpt.meta["steps"] = std::to_string(steps_);
    return ckpt;
  }

  /// Continues from a checkpoint written by a run with the same config.
  void restore(const Checkpoint& ckpt) {
    if (ckpt.epoch < 0 || ckpt.epoch > cfg_.total_epochs) throw CheckpointError("checkpoint epoch outside the configured run");
    if (auto it = ckpt.meta.find("models"); it != ckpt.meta.end() && it->second != std::to_string(cfg_.model_count))
      throw CheckpointError("checkpoint was written with models=" + it->second);
    restore_network(ckpt, group_.primary());
    for (std::size_t i = 0; i < optimizers_.size(); ++i) restore_optimizer(ckpt, optimizers_[i], int(i));
    for (int r = 1; r < group_.size(); ++r) group_.replica(r).copy_state_from(group_.primary());
    if (auto it = ckpt.meta.find("steps"); it != ckpt.meta.end()) steps_ = std::stoll(it->second);
    epoch_ = ckpt.epoch;
  }

 private:
  static Network<Scalar> make_primary(const TrainConfig& cfg) {
    cfg.validate();
    Rng init = derive_stream(cfg.seed, {std::uint64_t(StreamPurpose::Init)});
    return Network<Scalar>::build(cfg.network, init);
  }

  Rng stream(StreamPurpose purpose, int epoch, int replica) const {
    return derive_stream(cfg_.seed, {std::uint64_t(purpose), std::uint64_t(epoch), std::uint64_t(replica)});
  }

  // Augment (pad/crop/flip in pixel space), then normalize.
  SubBatch<Scalar> assemble(std::span<const int> indices, Rng& rng) const {
    const auto& set = raw_train_;
    const std::int64_t per = set.image_size();
    Buffer<Scalar> data(std::int64_t(indices.size()) * per);
    std::vector<int> labels;
    labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const int idx = indices[i];
      std::vector<float> img;
      if (cfg_.augment) {
        img = augment(set.image(idx), set.channels, set.height, set.width,
                      draw_augment(rng, preprocess_.random_crop, preprocess_.horizontal_flip));
        normalize_image(img, set.channels, preprocess_);
      } else {
        auto src = train_normalized_.image(idx);
        img.assign(src.begin(), src.end());
      }
      for (std::int64_t j = 0; j < per; ++j) data[std::int64_t(i) * per + j] = static_cast<Scalar>(img[j]);
      labels.push_back(set.labels[idx]);
    }
    return {Tensor<Scalar>(Shape{std::int64_t(indices.size()), set.channels, set.height, set.width}, std::move(data)),
            std::move(labels)};
  }

  // Replicas agree on parameters and BN running statistics after each epoch.
  void synchronize_epoch_end() {
    if (cfg_.sync == SyncPolicy::PeriodicAveraging) group_.average_parameters();
    group_.average_running_stats();
  }

  TrainConfig cfg_;
  LabeledImageSet raw_train_;
  LabeledImageSet train_normalized_;
  std::optional<LabeledImageSet> test_;
  PreprocessSpec preprocess_;
  TrainerOptions options_;
  ReplicaGroup<Scalar> group_;
  std::vector<SgdNesterov<Scalar>> optimizers_;
  int epoch_ = 0;
  long long steps_ = 0;
};

}  // namespace sepdrop
