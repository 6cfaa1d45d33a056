#pragma once

#include <cstdint>
#include <vector>

#include "sepdrop/rng.hpp"
#include "sepdrop/schedule.hpp"

namespace sepdrop {

/// How a block's residual branch is gated.
enum class GateKind : std::uint8_t {
  None,       // ResNet, PyramidNet: branch always on
  Shared,     // ResDrop, PyramidDrop: one draw on the whole branch
  Separated,  // PyramidSepDrop: independent draws on base and widened channels
};

GateKind gate_kind_for(VariantKind v);

/// Bernoulli outcomes of one block for one forward pass.
struct GateDraw {
  int block = 0;
  GateKind kind = GateKind::None;
  bool base_gate = true;   // channels [0, c_in) of the branch
  bool extra_gate = true;  // channels [c_in, c_out)
  double survival = 1.0;
  std::uint64_t stream = 0;

  friend bool operator==(const GateDraw&, const GateDraw&) = default;
};

/// One draw per block from `rng`. Shared variants use a single Bernoulli
/// for both parts; PyramidSepDrop draws the base part first, then the
/// widened part. Ungated variants consume no randomness.
std::vector<GateDraw> draw_gates(const SurvivalSchedule& schedule, VariantKind variant, Rng& rng,
                                 std::uint64_t stream = 0);

/// Gates forced to `open` for every block, with the variant's gate kind.
std::vector<GateDraw> pinned_gates(const SurvivalSchedule& schedule, VariantKind variant, bool open);

}  // namespace sepdrop
