#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace aligntree {

// Signed token indices: non-negative count from the start of the prompt,
// negative from the end (-1 is the final token).
class TokenPositionSet {
 public:
  TokenPositionSet() = default;
  explicit TokenPositionSet(std::vector<std::int32_t> positions);

  // First 3 and last 5 tokens.
  static TokenPositionSet canonical();

  std::size_t size() const noexcept { return positions_.size(); }
  std::int32_t operator[](std::size_t i) const { return positions_[i]; }
  const std::vector<std::int32_t>& values() const noexcept { return positions_; }

  std::optional<std::size_t> index_of(std::int32_t position) const noexcept;

  bool operator==(const TokenPositionSet&) const = default;

 private:
  std::vector<std::int32_t> positions_;
};

enum class Role : std::uint8_t {
  DirectionSvmTrain = 0,
  DirectionSvmVal = 1,
  ForestTrain = 2,
  ForestVal = 3,
  Test = 4,
};

std::string_view to_string(Role role) noexcept;
Role role_from_string(std::string_view name);
Role role_from_byte(std::uint8_t value);

// Shape shared by every record of a dataset. Layers are addressed 0-based
// here; identities exposed to users (SvmId, FeatureSlot) are 1-based.
struct TensorShape {
  std::uint32_t d_model = 0;
  std::uint32_t n_layers = 0;
  TokenPositionSet positions;

  std::size_t element_count() const noexcept {
    return positions.size() * static_cast<std::size_t>(n_layers) * d_model;
  }
  std::size_t offset(std::size_t position_index, std::size_t layer0, std::size_t k = 0) const noexcept {
    return (position_index * n_layers + layer0) * d_model + k;
  }

  bool operator==(const TensorShape&) const = default;
};

struct ActivationRecord {
  std::uint64_t prompt_id = 0;
  std::uint8_t label = 0;  // 1 = harmful
  std::uint32_t n_tokens = 1;
  std::vector<float> activations;

  std::span<const float> slice(const TensorShape& shape, std::size_t position_index,
                               std::size_t layer0) const {
    return std::span<const float>(activations).subspan(shape.offset(position_index, layer0),
                                                       shape.d_model);
  }

  bool operator==(const ActivationRecord&) const = default;
};

struct ActivationDataset {
  TensorShape shape;
  Role role = Role::DirectionSvmTrain;
  std::vector<ActivationRecord> records;

  // Throws InvalidDataset on any violated invariant.
  void validate() const;

  std::size_t count_label(std::uint8_t label) const noexcept;

  bool operator==(const ActivationDataset&) const = default;
};

void validate_record(const TensorShape& shape, const ActivationRecord& record);

// (position, layer) identity of a per-coordinate model or direction. Layer is 1-based.
struct SvmId {
  std::int32_t position = -1;
  std::uint32_t layer = 1;

  bool operator==(const SvmId&) const = default;
};

std::string to_string(const SvmId& id);
SvmId svm_id_from_string(std::string_view text);  // "layer:position"

// Orders by (layer ascending, position-index-within-set ascending).
bool canonical_less(const TokenPositionSet& positions, const SvmId& a, const SvmId& b);

struct FeatureSlot {
  enum class Kind : std::uint8_t { Projection, Svm };

  Kind kind = Kind::Projection;
  std::uint32_t layer = 1;      // 1-based
  std::int32_t position = -1;   // position the feature reads from
  std::uint32_t direction = 0;  // projection slots: index into the bundle's directions

  bool operator==(const FeatureSlot&) const = default;
};

std::string to_string(const FeatureSlot& slot);

// L projection slots (layers 1..L, position -1, direction 0) followed by the
// SVM slots sorted by canonical_less.
std::vector<FeatureSlot> canonical_feature_order(std::uint32_t n_layers,
                                                 const TokenPositionSet& positions,
                                                 std::span<const SvmId> selected);

struct SplitManifest {
  std::map<Role, std::string> paths;
  std::vector<std::pair<Role, Role>> disjoint;

  // direction_svm_* versus forest_* pairs, always enforced.
  static std::vector<std::pair<Role, Role>> required_disjoint();
};

// Checks the declared and required disjointness over loaded datasets.
// Throws ManifestError on overlap.
void check_disjoint(const SplitManifest& manifest, const std::map<Role, const ActivationDataset*>& datasets);

}  // namespace aligntree
