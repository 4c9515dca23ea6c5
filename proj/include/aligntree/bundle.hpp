#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "aligntree/direction.hpp"
#include "aligntree/forest.hpp"
#include "aligntree/svm.hpp"
#include "aligntree/types.hpp"

namespace aligntree {

enum class Variant : std::uint8_t {
  AlignTree,
  RefusalClassifier,
  SVMClassifier,
  MultiRefusalsClassifier,
  AlignTreeLinear,
};

std::string_view to_string(Variant v) noexcept;
Variant variant_from_string(std::string_view name);
std::vector<Variant> all_variants();

struct Threshold {
  double tau = 0.5;
  double beta = 0.2;
  double precision = 0.0;
  double recall = 0.0;
  double f_beta = 0.0;
};

struct TrainingMetadata {
  std::uint64_t seed = 0;
  std::map<std::string, std::string> dataset_fingerprints;  // role -> content hash
  std::string config_fingerprint;
  std::uint32_t svm_selected_count = 0;  // floor(L / 2)
  std::vector<BankEntry> bank;           // every trained (position, layer) with its validation accuracy
};

inline constexpr std::uint32_t kBundleVersion = 1;

struct ModelBundle {
  std::uint32_t format_version = kBundleVersion;
  Variant variant = Variant::AlignTree;
  TensorShape shape;
  std::vector<RefusalDirection> directions;  // directions[0] is r*
  std::vector<SvmModel> svms;                // the selected set, canonical order
  ForestModel forest;
  Threshold threshold;
  std::vector<FeatureSlot> feature_order;
  TrainingMetadata metadata;
  std::string fingerprint;  // content hash of the serialized document, set by seal()/load

  // Throws InvalidBundle on violated invariants.
  void validate() const;
  // Validates and computes the fingerprint.
  void seal();
};

// Derives the feature order a bundle of this composition must carry.
std::vector<FeatureSlot> expected_feature_order(const ModelBundle& bundle);

std::string bundle_to_string(const ModelBundle& bundle);
ModelBundle bundle_from_string(const std::string& text);

std::uint64_t save_bundle(const ModelBundle& bundle, std::ostream& out);
ModelBundle load_bundle(std::istream& in);
std::uint64_t save_bundle_file(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_bundle_file(const std::filesystem::path& path);

// {"scores": {"<layer>:<position>": score, ...}}
ExternalScores load_external_scores(const std::filesystem::path& path);
void save_external_scores(const ExternalScores& scores, const std::filesystem::path& path);

}  // namespace aligntree
