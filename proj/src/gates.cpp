#include "sepdrop/gates.hpp"

namespace sepdrop {

GateKind gate_kind_for(VariantKind v) {
  switch (v) {
    case VariantKind::ResNet:
    case VariantKind::PyramidNet: return GateKind::None;
    case VariantKind::ResDrop:
    case VariantKind::PyramidDrop: return GateKind::Shared;
    case VariantKind::PyramidSepDrop: return GateKind::Separated;
  }
  return GateKind::None;
}

std::vector<GateDraw> draw_gates(const SurvivalSchedule& schedule, VariantKind variant, Rng& rng, std::uint64_t stream) {
  const GateKind kind = gate_kind_for(variant);
  std::vector<GateDraw> draws;
  draws.reserve(schedule.survival.size());
  for (int l = 0; l < schedule.block_count(); ++l) {
    GateDraw d{l, kind, true, true, schedule.survival[l], stream};
    if (kind == GateKind::Shared) {
      d.base_gate = d.extra_gate = bernoulli(rng, d.survival);
    } else if (kind == GateKind::Separated) {
      d.base_gate = bernoulli(rng, d.survival);
      d.extra_gate = bernoulli(rng, d.survival);
    }
    draws.push_back(d);
  }
  return draws;
}

std::vector<GateDraw> pinned_gates(const SurvivalSchedule& schedule, VariantKind variant, bool open) {
  const GateKind kind = gate_kind_for(variant);
  std::vector<GateDraw> draws;
  for (int l = 0; l < schedule.block_count(); ++l) {
    const bool v = kind == GateKind::None ? true : open;
    draws.push_back(GateDraw{l, kind, v, v, schedule.survival[l], 0});
  }
  return draws;
}

}  // namespace sepdrop
