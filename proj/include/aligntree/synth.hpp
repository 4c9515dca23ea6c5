#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aligntree/types.hpp"

namespace aligntree {

// linear: harmful and harmless differ by a shift along one unit vector at the
//   final token of the middle layer.
// shell: harmful activations lie on a sphere of radius s around a center,
//   harmless ones inside the ball of radius s/2 with the same center; both
//   classes share the mean. Planted at a position other than -1.
// mixed: both signals; every harmful record lies on the shell, every other
//   one also carries the linear shift.
enum class SynthMode { Linear, Shell, Mixed };

std::string_view to_string(SynthMode mode) noexcept;
SynthMode synth_mode_from_string(std::string_view name);

struct SynthSpec {
  SynthMode mode = SynthMode::Linear;
  std::uint32_t d_model = 64;
  std::uint32_t n_layers = 8;
  TokenPositionSet positions = TokenPositionSet::canonical();
  std::size_t n_per_class = 100;
  double separation = 12.0;  // s
  double noise = 1.0;        // isotropic Gaussian sigma on every coordinate
  std::uint64_t seed = 0;

  // Throws SpecError.
  void validate() const;
};

struct SynthTruth {
  std::optional<SvmId> linear_at;
  std::optional<SvmId> shell_at;
  std::vector<double> direction;  // unit vector of the linear shift
  std::vector<double> center;     // shell center
};

// Coordinates that carry the planted signals for this spec.
SynthTruth planted_truth(const SynthSpec& spec);

// n_per_class records of each label, alternating harmful/harmless, with
// prompt ids starting at `id_offset`. Deterministic in (spec, role, id_offset).
ActivationDataset generate(const SynthSpec& spec, Role role, std::uint64_t id_offset = 0);

// One dataset per role with disjoint prompt ids; `sizes` overrides
// n_per_class per role.
std::map<Role, ActivationDataset> generate_splits(const SynthSpec& spec,
                                                  const std::map<Role, std::size_t>& sizes);

// Spec document:
//   {"mode": "shell", "d_model": 64, "n_layers": 8, "positions": [0,1,2,-5,-4,-3,-2,-1],
//    "separation": 12, "noise": 1, "seed": 7, "n_per_class": 100,
//    "roles": {"direction_svm_train": 300, ...}}
struct SynthPlan {
  SynthSpec spec;
  std::map<Role, std::size_t> sizes;  // empty: every role at n_per_class
};

SynthPlan synth_plan_from_json_text(const std::string& text);
SynthPlan load_synth_plan(const std::filesystem::path& path);

}  // namespace aligntree
