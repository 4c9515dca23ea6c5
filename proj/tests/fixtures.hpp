#pragma once

#include <map>

#include "aligntree/pipeline.hpp"
#include "aligntree/synth.hpp"

namespace testing {

// Small mixed-signal splits that train every variant in well under a second.
inline aligntree::SynthSpec tiny_spec(std::uint64_t seed = 1, aligntree::SynthMode mode = aligntree::SynthMode::Mixed) {
  aligntree::SynthSpec spec;
  spec.mode = mode;
  spec.d_model = 8;
  spec.n_layers = 4;
  spec.positions = aligntree::TokenPositionSet({0, -2, -1});
  spec.n_per_class = 30;
  spec.separation = 6.0;
  spec.noise = 1.0;
  spec.seed = seed;
  return spec;
}

inline std::map<aligntree::Role, aligntree::ActivationDataset> tiny_splits(std::uint64_t seed = 1) {
  return aligntree::generate_splits(tiny_spec(seed), {});
}

inline aligntree::PipelineConfig tiny_config(aligntree::Variant variant, std::uint64_t seed = 1) {
  aligntree::PipelineConfig c;
  c.seed = seed;
  c.variant = variant;
  c.forest.n_estimators = 10;
  c.oof_folds = 3;
  c.grid_size = 101;
  return c;
}

inline aligntree::ModelBundle tiny_bundle(aligntree::Variant variant = aligntree::Variant::AlignTree,
                                          std::uint64_t seed = 1) {
  return aligntree::train_variant(tiny_config(variant, seed), tiny_splits(seed));
}

// Acceptance-scale plan: d=64, L=8, s=12, sigma=1 and 1000 records per class
// spread over the roles.
inline aligntree::SynthSpec reference_spec(aligntree::SynthMode mode, std::uint64_t seed) {
  aligntree::SynthSpec spec;
  spec.mode = mode;
  spec.d_model = 64;
  spec.n_layers = 8;
  spec.separation = 12.0;
  spec.noise = 1.0;
  spec.seed = seed;
  return spec;
}

inline std::map<aligntree::Role, std::size_t> reference_sizes() {
  using aligntree::Role;
  return {{Role::DirectionSvmTrain, 300}, {Role::DirectionSvmVal, 100}, {Role::ForestTrain, 300},
          {Role::ForestVal, 100}, {Role::Test, 200}};
}

}  // namespace testing
