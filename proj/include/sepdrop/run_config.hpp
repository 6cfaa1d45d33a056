#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sepdrop/train_config.hpp"

namespace sepdrop {

enum class DatasetKind { Cifar10, Cifar100, Synthetic };

std::string_view to_string(DatasetKind d);
DatasetKind parse_dataset(std::string_view name);

/// Everything a command needs, as a flat key=value record. Unset optional
/// fields are filled by resolve(): alpha defaults to 5 (depth - 2) / 6,
/// milestones to 50% and 75% of the epochs (150 and 225 of 300).
struct RunConfig {
  // network
  VariantKind variant = VariantKind::PyramidSepDrop;
  int depth = 8;
  std::optional<double> alpha;
  double p_last = 0.5;
  int base_width = 16;

  // optimization
  int epochs = 300;
  double lr = 0.5;
  double lr_decay = 0.1;
  std::optional<std::vector<int>> milestones;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool decay_bn_affine = true;
  int batch_size = 128;
  std::uint64_t seed = 0;
  bool augment = true;

  // multi-model
  int models = 1;
  SyncPolicy sync = SyncPolicy::GradientAveraging;
  int sync_period = 1;
  bool concurrent = false;

  // data
  DatasetKind dataset = DatasetKind::Synthetic;
  std::string data_dir = "data";
  int synthetic_classes = 10;
  int synthetic_train = 512;
  int synthetic_test = 512;
  double synthetic_signal = 0.45;
  double synthetic_noise = 0.08;
  int image_size = 32;

  // run
  std::string out_dir = "run";
  int checkpoint_every = 25;
  int eval_every = 1;
  std::string resume;      // checkpoint to continue from (train)
  std::string checkpoint;  // checkpoint to evaluate (eval)
  std::string format = "text";  // inspect: text | csv
  int gradcheck_coordinates = 16;

  int num_classes() const;
  NetworkSpec network_spec() const;  // requires resolve()
  TrainConfig train_config() const;  // requires resolve()
};

/// Every accepted key, in the order the resolved config is written.
const std::vector<std::string>& run_config_keys();

/// Sets one key from its text value. Unknown keys and malformed values
/// throw ConfigError naming the key.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// Parses key=value lines; '#' starts a comment, blank lines are skipped.
/// Returns the pairs in file order; malformed lines throw ConfigError with
/// the line number.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);

RunConfig load_run_config(const std::string& path);

/// Fills defaults that depend on other keys and validates the whole record.
void resolve(RunConfig& cfg);

/// Resolved config as key=value text, one line per key; parsing it back
/// yields the same config.
std::string to_text(const RunConfig& cfg);

}  // namespace sepdrop
