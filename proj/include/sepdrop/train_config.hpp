#pragma once

#include <cstdint>
#include <vector>

#include "sepdrop/network_spec.hpp"

namespace sepdrop {

/// How replicas of a multi-model group stay consistent.
enum class SyncPolicy {
  GradientAveraging,  // average gradients every step, one shared optimizer step
  PeriodicAveraging,  // independent steps, parameters averaged every sync_period steps
};

/// Optimization recipe. Defaults are the full-scale CIFAR schedule.
struct TrainConfig {
  double initial_lr = 0.5;
  double lr_decay_factor = 0.1;
  std::vector<int> milestones{150, 225};
  int total_epochs = 300;
  double momentum = 0.9;
  double dampening = 0.0;
  double weight_decay = 1e-4;
  bool decay_bn_affine = true;
  int batch_size = 128;
  std::uint64_t seed = 0;
  int model_count = 1;
  SyncPolicy sync = SyncPolicy::GradientAveraging;
  int sync_period = 1;
  bool augment = true;
  bool concurrent_replicas = false;
  NetworkSpec network;

  /// Throws ConfigError on any violated constraint.
  void validate() const;
};

/// initial_lr * decay^(number of milestones <= epoch).
double lr_at_epoch(const TrainConfig& cfg, int epoch);

}  // namespace sepdrop
