#include "sepdrop/schedule.hpp"

#include <cmath>

namespace sepdrop {

std::string_view to_string(VariantKind v) {
  switch (v) {
    case VariantKind::ResNet: return "resnet";
    case VariantKind::ResDrop: return "resdrop";
    case VariantKind::PyramidNet: return "pyramid";
    case VariantKind::PyramidDrop: return "pyramid-drop";
    case VariantKind::PyramidSepDrop: return "pyramid-sep-drop";
  }
  return "unknown";
}

VariantKind parse_variant(std::string_view name) {
  for (auto v : {VariantKind::ResNet, VariantKind::ResDrop, VariantKind::PyramidNet, VariantKind::PyramidDrop,
                 VariantKind::PyramidSepDrop})
    if (to_string(v) == name) return v;
  throw ConfigError("unknown variant '" + std::string(name) +
                    "' (expected resnet, resdrop, pyramid, pyramid-drop or pyramid-sep-drop)");
}

void validate_depth(int depth) {
  if (depth >= 8 && (depth - 2) % 6 == 0) return;
  const int below = depth < 8 ? 8 : depth - ((depth - 2) % 6 + 6) % 6;
  const int above = depth < 8 ? 8 : below + 6;
  std::string msg = "invalid depth " + std::to_string(depth) + ": depth must satisfy depth = 2 (mod 6) and depth >= 8; nearest valid ";
  msg += below == above ? "depth is " + std::to_string(below) : "depths are " + std::to_string(below) + " and " + std::to_string(above);
  throw ConfigError(msg);
}

int block_count_for_depth(int depth) {
  validate_depth(depth);
  return (depth - 2) / 2;
}

double alpha_for_depth(int depth) {
  validate_depth(depth);
  return 5.0 * (depth - 2) / 6.0;
}

ChannelSchedule build_channel_schedule(int depth, double alpha, int base_width) {
  const int n = block_count_for_depth(depth);
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and non-negative");
  if (base_width < 1) throw ConfigError("base width must be positive");
  ChannelSchedule s{base_width, alpha, {}};
  s.block_widths.reserve(n);
  for (int k = 1; k <= n; ++k) {
    const double added = k == n ? alpha : alpha * k / n;  // the last width is exactly base + alpha
    s.block_widths.push_back(static_cast<int>(std::floor(base_width + added)));
  }
  return s;
}

ChannelSchedule build_doubling_schedule(int depth, int base_width) {
  const int n = block_count_for_depth(depth);
  const int per_stage = n / 3;
  if (base_width < 1) throw ConfigError("base width must be positive");
  ChannelSchedule s{base_width, 0.0, {}};
  for (int stage = 0; stage < 3; ++stage)
    for (int b = 0; b < per_stage; ++b) s.block_widths.push_back(base_width << stage);
  s.alpha = s.final_width() - base_width;
  return s;
}

SurvivalSchedule build_survival_schedule(int block_count, double p_last) {
  if (block_count < 1) throw ConfigError("survival schedule needs at least one block");
  if (!(p_last > 0.0 && p_last <= 1.0)) throw ConfigError("p_last must lie in (0, 1], got " + std::to_string(p_last));
  SurvivalSchedule s{p_last, {}};
  s.survival.reserve(block_count);
  for (int l = 1; l < block_count; ++l)
    s.survival.push_back(1.0 - (static_cast<double>(l) / block_count) * (1.0 - p_last));
  s.survival.push_back(p_last);  // exact at the deepest block
  return s;
}

}  // namespace sepdrop
