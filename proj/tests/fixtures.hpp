#pragma once

#include <optional>

#include "sepdrop/trainer.hpp"

namespace testing_support {

// A depth-8 network on 16x16 synthetic images: small enough that a whole
// epoch takes a fraction of a second.
inline sepdrop::TrainConfig small_config(std::uint64_t seed, sepdrop::VariantKind v = sepdrop::VariantKind::PyramidSepDrop) {
  sepdrop::TrainConfig cfg;
  cfg.network.variant = v;
  cfg.network.depth = 8;
  cfg.network.alpha = 5;
  cfg.network.image_size = 16;
  cfg.initial_lr = 0.1;
  cfg.total_epochs = 4;
  cfg.milestones = {2, 3};
  cfg.batch_size = 16;
  cfg.seed = seed;
  return cfg;
}

inline sepdrop::LabeledImageSet small_data(int count, std::uint64_t seed, sepdrop::Split split = sepdrop::Split::Train) {
  return sepdrop::synthesize_dataset(10, count, 16, seed, {}, split);
}

}  // namespace testing_support

namespace testing_support {

inline sepdrop::TrainerOptions evaluate_every(int epochs, std::optional<bool> pinned_gates = std::nullopt) {
  sepdrop::TrainerOptions o;
  o.eval_every = epochs;
  o.pinned_gates = pinned_gates;
  return o;
}

}  // namespace testing_support
