#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aligntree/bundle.hpp"
#include "aligntree/forest.hpp"
#include "aligntree/seed.hpp"
#include "aligntree/svm.hpp"
#include "aligntree/types.hpp"

namespace aligntree {

struct PipelineConfig {
  std::uint64_t seed = 0;
  Variant variant = Variant::AlignTree;
  SvmConfig svm;  // kernel type is overridden per variant
  double beta = 0.2;
  std::uint32_t grid_size = 1001;
  ForestParams forest;
  std::uint32_t oof_folds = 5;
  std::optional<std::string> external_scores;  // path to a "layer:position" -> score document
  std::optional<std::string> manifest;
  unsigned threads = 0;

  // Keys: seed, variant, C, gamma ("scale" or a number), beta, grid_size,
  // oof_folds, svm_tolerance, svm_max_iterations, subsample_cap,
  // external_scores, manifest, threads, forest {n_estimators, max_depth,
  // min_samples_split, bootstrap}. Missing keys keep their defaults.
  static PipelineConfig from_json_text(const std::string& text);
  static PipelineConfig load(const std::filesystem::path& path);
  std::string to_json_text() const;
};

struct FeatureVector {
  std::vector<double> values;  // bundle feature order
  std::string provenance;      // fingerprint of the bundle that assembled it
};

// Throws ShapeError when sizes differ, ProvenanceError when the record comes
// from a differently-addressed position set of the same size.
FeatureVector assemble_features(const ActivationRecord& record, const TensorShape& record_shape,
                                const ModelBundle& bundle);

// (1 + b^2) P R / (b^2 P + R), 0 when P = R = 0. Throws RangeError.
double f_beta(double precision, double recall, double beta);

struct ThresholdPoint {
  double tau = 0.0;
  std::uint32_t tp = 0, fp = 0, tn = 0, fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f_beta = 0.0;
};

// Metrics at tau_k = k / (grid_size - 1), classifying p >= tau as harmful.
std::vector<ThresholdPoint> threshold_curve(std::span<const double> probabilities, std::span<const std::uint8_t> labels,
                                            double beta, std::uint32_t grid_size = 1001);

// Argmax of F_beta over the grid, ties toward the largest tau.
Threshold select_threshold(std::span<const double> probabilities, std::span<const std::uint8_t> labels,
                           double beta = 0.2, std::uint32_t grid_size = 1001);

enum class Verdict { Pass, Block };
std::string_view to_string(Verdict v) noexcept;

struct GateResult {
  Verdict verdict = Verdict::Pass;
  double p_harmful = 0.0;
  double tau = 0.0;
};

// Boundary rule: p >= tau blocks.
GateResult gate(const FeatureVector& features, const ModelBundle& bundle);
GateResult gate(const ActivationRecord& record, const TensorShape& record_shape, const ModelBundle& bundle);

// Trains one variant from already-loaded role datasets. `fingerprints`
// (role -> content hash) is copied into the bundle metadata.
ModelBundle train_variant(const PipelineConfig& config, const std::map<Role, ActivationDataset>& datasets,
                          const std::map<std::string, std::string>& fingerprints = {});

// Loads and validates the manifest's datasets, then trains.
ModelBundle train_variant(const PipelineConfig& config, const SplitManifest& manifest);

}  // namespace aligntree
