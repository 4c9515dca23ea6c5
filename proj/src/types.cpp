#include "aligntree/types.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <unordered_set>

#include "aligntree/error.hpp"

namespace aligntree {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidSelection: return "InvalidSelection";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidDataset: return "InvalidDataset";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::TruncationError: return "TruncationError";
    case ErrorCode::InvalidBundle: return "InvalidBundle";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::KeyMismatch: return "KeyMismatch";
    case ErrorCode::MissingPosition: return "MissingPosition";
    case ErrorCode::SingleClassError: return "SingleClassError";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::StratificationError: return "StratificationError";
    case ErrorCode::InsufficientModels: return "InsufficientModels";
    case ErrorCode::EmptyTraining: return "EmptyTraining";
    case ErrorCode::RangeError: return "RangeError";
    case ErrorCode::ManifestError: return "ManifestError";
    case ErrorCode::ProvenanceError: return "ProvenanceError";
    case ErrorCode::SpecError: return "SpecError";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
  }
  return "Unknown";
}

TokenPositionSet::TokenPositionSet(std::vector<std::int32_t> positions)
    : positions_(std::move(positions)) {
  if (positions_.empty()) fail(ErrorCode::InvalidDataset, "token position set is empty");
  bool seen_negative = false;
  for (std::size_t i = 0; i < positions_.size(); ++i) {
    const auto p = positions_[i];
    if (p < 0) {
      if (seen_negative && p <= positions_[i - 1])
        fail(ErrorCode::InvalidDataset, "negative positions must be strictly increasing");
      seen_negative = true;
    } else {
      if (seen_negative) fail(ErrorCode::InvalidDataset, "non-negative position after a negative one");
      if (i > 0 && p <= positions_[i - 1])
        fail(ErrorCode::InvalidDataset, "non-negative positions must be strictly increasing");
    }
  }
}

TokenPositionSet TokenPositionSet::canonical() { return TokenPositionSet({0, 1, 2, -5, -4, -3, -2, -1}); }

std::optional<std::size_t> TokenPositionSet::index_of(std::int32_t position) const noexcept {
  auto it = std::find(positions_.begin(), positions_.end(), position);
  if (it == positions_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - positions_.begin());
}

namespace {
constexpr std::string_view kRoleNames[] = {"direction_svm_train", "direction_svm_val", "forest_train",
                                           "forest_val", "test"};
}

std::string_view to_string(Role role) noexcept { return kRoleNames[static_cast<std::size_t>(role)]; }

Role role_from_string(std::string_view name) {
  for (std::size_t i = 0; i < std::size(kRoleNames); ++i)
    if (kRoleNames[i] == name) return static_cast<Role>(i);
  fail(ErrorCode::ManifestError, "unknown role '" + std::string(name) + "'");
}

Role role_from_byte(std::uint8_t value) {
  if (value >= std::size(kRoleNames))
    fail(ErrorCode::InvalidDataset, "role enumerant " + std::to_string(value) + " out of range");
  return static_cast<Role>(value);
}

void validate_record(const TensorShape& shape, const ActivationRecord& record) {
  const auto id = std::to_string(record.prompt_id);
  if (record.label > 1) fail(ErrorCode::InvalidDataset, "record " + id + ": label must be 0 or 1");
  if (record.n_tokens < 1) fail(ErrorCode::InvalidDataset, "record " + id + ": n_tokens must be >= 1");
  if (record.activations.size() != shape.element_count())
    fail(ErrorCode::InvalidDataset, "record " + id + ": tensor has " + std::to_string(record.activations.size()) +
                                        " elements, expected " + std::to_string(shape.element_count()));
  for (float v : record.activations)
    if (!std::isfinite(v)) fail(ErrorCode::InvalidDataset, "record " + id + ": non-finite activation");
}

void ActivationDataset::validate() const {
  if (shape.d_model == 0 || shape.n_layers == 0 || shape.positions.size() == 0)
    fail(ErrorCode::InvalidDataset, "d_model, n_layers and position count must be positive");
  std::unordered_set<std::uint64_t> ids;
  ids.reserve(records.size());
  for (const auto& r : records) {
    validate_record(shape, r);
    if (!ids.insert(r.prompt_id).second)
      fail(ErrorCode::InvalidDataset, "duplicate prompt_id " + std::to_string(r.prompt_id));
  }
}

std::size_t ActivationDataset::count_label(std::uint8_t label) const noexcept {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.label == label; }));
}

std::string to_string(const SvmId& id) { return std::to_string(id.layer) + ":" + std::to_string(id.position); }

SvmId svm_id_from_string(std::string_view text) {
  const auto colon = text.find(':');
  SvmId id;
  if (colon == std::string_view::npos) fail(ErrorCode::FormatError, "expected 'layer:position', got '" + std::string(text) + "'");
  auto parse = [&](std::string_view part, auto& out) {
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), out);
    if (ec != std::errc() || ptr != part.data() + part.size())
      fail(ErrorCode::FormatError, "bad integer in '" + std::string(text) + "'");
  };
  parse(text.substr(0, colon), id.layer);
  parse(text.substr(colon + 1), id.position);
  return id;
}

bool canonical_less(const TokenPositionSet& positions, const SvmId& a, const SvmId& b) {
  if (a.layer != b.layer) return a.layer < b.layer;
  const auto ia = positions.index_of(a.position).value_or(positions.size());
  const auto ib = positions.index_of(b.position).value_or(positions.size());
  return ia < ib;
}

std::string to_string(const FeatureSlot& slot) {
  if (slot.kind == FeatureSlot::Kind::Projection) {
    auto s = "proj@" + std::to_string(slot.layer);
    if (slot.direction != 0) s += "#" + std::to_string(slot.direction);
    return s;
  }
  return "svm@(" + std::to_string(slot.position) + "," + std::to_string(slot.layer) + ")";
}

std::vector<FeatureSlot> canonical_feature_order(std::uint32_t n_layers, const TokenPositionSet& positions,
                                                 std::span<const SvmId> selected) {
  if (n_layers < 1) fail(ErrorCode::InvalidSelection, "layer count must be >= 1");
  std::vector<SvmId> sorted(selected.begin(), selected.end());
  for (const auto& id : sorted) {
    if (id.layer < 1 || id.layer > n_layers)
      fail(ErrorCode::InvalidSelection, "layer out of range in " + to_string(id));
    if (!positions.index_of(id.position)) fail(ErrorCode::InvalidSelection, "unknown position in " + to_string(id));
  }
  std::sort(sorted.begin(), sorted.end(),
            [&](const SvmId& a, const SvmId& b) { return canonical_less(positions, a, b); });
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    fail(ErrorCode::InvalidSelection, "duplicate SVM identity in selection");

  std::vector<FeatureSlot> order;
  order.reserve(n_layers + sorted.size());
  for (std::uint32_t l = 1; l <= n_layers; ++l) order.push_back({FeatureSlot::Kind::Projection, l, -1, 0});
  for (const auto& id : sorted) order.push_back({FeatureSlot::Kind::Svm, id.layer, id.position, 0});
  return order;
}

std::vector<std::pair<Role, Role>> SplitManifest::required_disjoint() {
  std::vector<std::pair<Role, Role>> pairs;
  for (auto a : {Role::DirectionSvmTrain, Role::DirectionSvmVal})
    for (auto b : {Role::ForestTrain, Role::ForestVal}) pairs.emplace_back(a, b);
  return pairs;
}

void check_disjoint(const SplitManifest& manifest, const std::map<Role, const ActivationDataset*>& datasets) {
  auto pairs = SplitManifest::required_disjoint();
  pairs.insert(pairs.end(), manifest.disjoint.begin(), manifest.disjoint.end());
  for (const auto& [a, b] : pairs) {
    auto ia = datasets.find(a);
    auto ib = datasets.find(b);
    if (ia == datasets.end() || ib == datasets.end() || !ia->second || !ib->second) continue;
    std::unordered_set<std::uint64_t> ids;
    for (const auto& r : ia->second->records) ids.insert(r.prompt_id);
    for (const auto& r : ib->second->records)
      if (ids.count(r.prompt_id))
        fail(ErrorCode::ManifestError, "prompt_id " + std::to_string(r.prompt_id) + " shared by roles " +
                                           std::string(to_string(a)) + " and " + std::string(to_string(b)));
  }
}

}  // namespace aligntree
