#pragma once

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "aligntree/types.hpp"

namespace aligntree {

struct CandidateDirection {
  std::vector<double> vector;  // mean(harmful) - mean(harmless)
  SvmId id;                    // provenance (position, layer)
  double score = 0.0;
  bool degenerate = false;     // zero norm
};

enum class SelectionMode { Proxy, External };

struct RefusalDirection {
  CandidateDirection candidate;
  SelectionMode mode = SelectionMode::Proxy;

  const std::vector<double>& vector() const noexcept { return candidate.vector; }
  double norm() const noexcept;
};

using ExternalScores = std::map<std::pair<std::uint32_t, std::int32_t>, double>;  // (layer, position) -> score

CandidateDirection difference_in_means(const ActivationDataset& harmful, const ActivationDataset& harmless, SvmId at);

// One unscored candidate per (position, layer) of a labeled training set,
// ordered by (layer, position index).
std::vector<CandidateDirection> compute_candidates(const ActivationDataset& train);

// Best balanced accuracy over every 1-D threshold "score > t => harmful",
// thresholds taken at midpoints between sorted distinct projections.
double best_balanced_accuracy(std::span<const double> projections, std::span<const std::uint8_t> labels);

// Scores each candidate on the projection of the validation activations at
// its own (position, layer). Zero-norm candidates score 0 and are flagged.
void score_candidates_proxy(std::vector<CandidateDirection>& candidates, const ActivationDataset& validation,
                            unsigned threads = 0);

RefusalDirection select_direction(std::span<const CandidateDirection> scored, const TokenPositionSet& positions,
                                  const std::optional<ExternalScores>& external = std::nullopt);

// The k best candidates by score under the same tie-break, sorted canonically.
std::vector<CandidateDirection> top_candidates(std::span<const CandidateDirection> scored,
                                               const TokenPositionSet& positions, std::size_t k);

double refusal_activation(std::span<const float> h, std::span<const double> direction);
double refusal_activation(std::span<const float> h, const RefusalDirection& direction);

// Refusal activation of the final-token state at every layer, layers 1..L.
std::vector<double> projection_features(const ActivationRecord& record, const TensorShape& shape,
                                        const RefusalDirection& direction);

}  // namespace aligntree
