#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sepdrop {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class VariantKind { ResNet, ResDrop, PyramidNet, PyramidDrop, PyramidSepDrop };

/// CLI spelling: resnet, resdrop, pyramid, pyramid-drop, pyramid-sep-drop.
std::string_view to_string(VariantKind v);
VariantKind parse_variant(std::string_view name);

constexpr bool is_pyramidal(VariantKind v) {
  return v == VariantKind::PyramidNet || v == VariantKind::PyramidDrop || v == VariantKind::PyramidSepDrop;
}
constexpr bool is_gated(VariantKind v) {
  return v == VariantKind::ResDrop || v == VariantKind::PyramidDrop || v == VariantKind::PyramidSepDrop;
}

/// Throws ConfigError unless depth = 6n + 2 with n >= 1. The message names
/// the nearest valid depths.
void validate_depth(int depth);

/// Residual blocks in a basic-block CIFAR network: (depth - 2) / 2.
int block_count_for_depth(int depth);

/// Total widening that adds 5/3 channels per basic block: 5 * (depth - 2) / 6.
double alpha_for_depth(int depth);

struct ChannelSchedule {
  int base_width = 16;
  double alpha = 0.0;
  std::vector<int> block_widths;  // output width of each residual block

  int block_count() const { return static_cast<int>(block_widths.size()); }
  int final_width() const { return block_widths.empty() ? base_width : block_widths.back(); }
};

/// Additive widening: block k (1-based) outputs floor(base + alpha * k / N).
ChannelSchedule build_channel_schedule(int depth, double alpha, int base_width = 16);

/// Stage-doubling widths (base, 2 base, 4 base) of the plain ResNet lineage.
ChannelSchedule build_doubling_schedule(int depth, int base_width = 16);

struct SurvivalSchedule {
  double p_last = 1.0;
  std::vector<double> survival;  // p_l for l = 1..N

  int block_count() const { return static_cast<int>(survival.size()); }
};

/// Linear decay p_l = 1 - (l / N) * (1 - p_last).
SurvivalSchedule build_survival_schedule(int block_count, double p_last);

}  // namespace sepdrop
