#include "sepdrop/train_config.hpp"

#include <cmath>
#include <string>

namespace sepdrop {

void TrainConfig::validate() const {
  network.validate();
  if (!(initial_lr >= 0.0) || !std::isfinite(initial_lr)) throw ConfigError("lr must be finite and non-negative");
  if (!(lr_decay_factor > 0.0) || !std::isfinite(lr_decay_factor)) throw ConfigError("lr decay factor must be positive");
  if (total_epochs < 1) throw ConfigError("epochs must be at least 1");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 0 || milestones[i] >= total_epochs)
      throw ConfigError("milestone " + std::to_string(milestones[i]) + " outside [0, " + std::to_string(total_epochs) + ")");
    if (i > 0 && milestones[i] <= milestones[i - 1]) throw ConfigError("milestones must be strictly increasing");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (dampening != 0.0) throw ConfigError("only dampening 0 is supported with Nesterov momentum");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight decay must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (model_count < 1) throw ConfigError("models must be at least 1");
  if (batch_size % model_count != 0)
    throw ConfigError("batch size " + std::to_string(batch_size) + " is not divisible by models " + std::to_string(model_count));
  if (sync_period < 1) throw ConfigError("sync period must be at least 1");
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < 0 || epoch >= cfg.total_epochs)
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.total_epochs) + ")");
  // Factors that are reciprocals of integers (0.1, 0.2, ...) are applied as a
  // division so decimal schedules such as 0.5 / 0.05 / 0.005 come out exact.
  const double inverse = 1.0 / cfg.lr_decay_factor;
  const double rounded = std::round(inverse);
  const bool reciprocal = rounded >= 1.0 && std::abs(inverse - rounded) <= 1e-12 * rounded;
  double lr = cfg.initial_lr;
  for (int m : cfg.milestones)
    if (m <= epoch) lr = reciprocal ? lr / rounded : lr * cfg.lr_decay_factor;
  return lr;
}

}  // namespace sepdrop
