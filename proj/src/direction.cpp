#include "aligntree/direction.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aligntree/error.hpp"
#include "aligntree/parallel.hpp"

namespace aligntree {
namespace {

std::vector<double> class_sum(const ActivationDataset& ds, int label, std::size_t& count) {
  std::vector<double> sum(ds.shape.element_count(), 0.0);
  count = 0;
  for (const auto& r : ds.records) {
    if (label >= 0 && r.label != label) continue;
    if (r.activations.size() != sum.size()) fail(ErrorCode::ShapeError, "record tensor size disagrees with dataset shape");
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += r.activations[k];
    ++count;
  }
  return sum;
}

double dot(std::span<const float> h, std::span<const double> r) {
  double acc = 0.0;
  for (std::size_t k = 0; k < h.size(); ++k) acc += static_cast<double>(h[k]) * r[k];
  return acc;
}

double norm2(std::span<const double> r) {
  return std::sqrt(std::inner_product(r.begin(), r.end(), r.begin(), 0.0));
}

// Higher score first; ties by (layer, position order).
bool better(const TokenPositionSet& positions, double sa, const SvmId& a, double sb, const SvmId& b) {
  if (sa != sb) return sa > sb;
  return canonical_less(positions, a, b);
}

}  // namespace

double RefusalDirection::norm() const noexcept { return norm2(candidate.vector); }

CandidateDirection difference_in_means(const ActivationDataset& harmful, const ActivationDataset& harmless, SvmId at) {
  if (!(harmful.shape == harmless.shape)) fail(ErrorCode::ShapeError, "harmful and harmless shapes differ");
  if (harmful.records.empty() || harmless.records.empty()) fail(ErrorCode::EmptyClass, "difference_in_means needs both classes");
  const auto& shape = harmful.shape;
  const auto pi = shape.positions.index_of(at.position);
  if (!pi || at.layer < 1 || at.layer > shape.n_layers) fail(ErrorCode::ShapeError, "no coordinate " + to_string(at));

  std::size_t n_pos = 0, n_neg = 0;
  const auto sum_pos = class_sum(harmful, -1, n_pos);
  const auto sum_neg = class_sum(harmless, -1, n_neg);
  CandidateDirection c;
  c.id = at;
  c.vector.resize(shape.d_model);
  const auto base = shape.offset(*pi, at.layer - 1);
  for (std::size_t k = 0; k < shape.d_model; ++k)
    c.vector[k] = sum_pos[base + k] / static_cast<double>(n_pos) - sum_neg[base + k] / static_cast<double>(n_neg);
  return c;
}

std::vector<CandidateDirection> compute_candidates(const ActivationDataset& train) {
  std::size_t n_pos = 0, n_neg = 0;
  const auto sum_pos = class_sum(train, 1, n_pos);
  const auto sum_neg = class_sum(train, 0, n_neg);
  if (n_pos == 0 || n_neg == 0) fail(ErrorCode::EmptyClass, "candidate directions need both classes in the training split");

  const auto& shape = train.shape;
  std::vector<CandidateDirection> out;
  out.reserve(shape.positions.size() * shape.n_layers);
  for (std::uint32_t l = 0; l < shape.n_layers; ++l) {
    for (std::size_t i = 0; i < shape.positions.size(); ++i) {
      CandidateDirection c;
      c.id = {shape.positions[i], l + 1};
      c.vector.resize(shape.d_model);
      const auto base = shape.offset(i, l);
      for (std::size_t k = 0; k < shape.d_model; ++k)
        c.vector[k] = sum_pos[base + k] / static_cast<double>(n_pos) - sum_neg[base + k] / static_cast<double>(n_neg);
      out.push_back(std::move(c));
    }
  }
  return out;
}

double best_balanced_accuracy(std::span<const double> projections, std::span<const std::uint8_t> labels) {
  if (projections.size() != labels.size()) fail(ErrorCode::ShapeError, "projection/label length mismatch");
  const auto n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const auto n_neg = static_cast<double>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) fail(ErrorCode::EmptyClass, "balanced accuracy needs both classes");

  std::vector<std::size_t> order(projections.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return projections[a] < projections[b]; });

  // Threshold below everything: all predicted harmful, balanced accuracy 0.5.
  double best = 0.5;
  double neg_below = 0, pos_below = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    (labels[order[k]] ? pos_below : neg_below) += 1;
    const bool boundary = k + 1 == order.size() || projections[order[k + 1]] != projections[order[k]];
    if (!boundary) continue;
    const double tnr = neg_below / n_neg;
    const double tpr = (n_pos - pos_below) / n_pos;
    best = std::max(best, 0.5 * (tnr + tpr));
  }
  return best;
}

void score_candidates_proxy(std::vector<CandidateDirection>& candidates, const ActivationDataset& validation,
                            unsigned threads) {
  const auto& shape = validation.shape;
  std::vector<std::uint8_t> labels;
  labels.reserve(validation.records.size());
  for (const auto& r : validation.records) labels.push_back(r.label);
  if (std::count(labels.begin(), labels.end(), 1) == 0 || std::count(labels.begin(), labels.end(), 0) == 0)
    fail(ErrorCode::EmptyClass, "validation split needs both classes");

  parallel_for(candidates.size(), [&](std::size_t c) {
    auto& cand = candidates[c];
    if (cand.vector.size() != shape.d_model) fail(ErrorCode::ShapeError, "candidate width differs from d_model");
    const auto pi = shape.positions.index_of(cand.id.position);
    if (!pi || cand.id.layer < 1 || cand.id.layer > shape.n_layers)
      fail(ErrorCode::ShapeError, "candidate coordinate " + to_string(cand.id) + " not in validation shape");
    const double n = norm2(cand.vector);
    if (n == 0.0 || !std::isfinite(n)) {
      cand.score = 0.0;
      cand.degenerate = true;
      return;
    }
    std::vector<double> proj;
    proj.reserve(validation.records.size());
    for (const auto& r : validation.records) proj.push_back(dot(r.slice(shape, *pi, cand.id.layer - 1), cand.vector) / n);
    cand.score = best_balanced_accuracy(proj, labels);
    cand.degenerate = false;
  }, threads);
}

RefusalDirection select_direction(std::span<const CandidateDirection> scored, const TokenPositionSet& positions,
                                  const std::optional<ExternalScores>& external) {
  if (scored.empty()) fail(ErrorCode::InvalidSelection, "no candidate directions");
  RefusalDirection out;
  if (external) {
    for (const auto& [key, value] : *external) {
      const bool known = std::any_of(scored.begin(), scored.end(), [&](const auto& c) {
        return c.id.layer == key.first && c.id.position == key.second;
      });
      if (!known)
        fail(ErrorCode::KeyMismatch, "external score for " + std::to_string(key.first) + ":" +
                                         std::to_string(key.second) + " matches no candidate");
    }
    const CandidateDirection* best = nullptr;
    double best_score = 0.0;
    for (const auto& c : scored) {
      auto it = external->find({c.id.layer, c.id.position});
      if (it == external->end()) continue;
      if (!best || better(positions, it->second, c.id, best_score, best->id)) {
        best = &c;
        best_score = it->second;
      }
    }
    if (!best) fail(ErrorCode::KeyMismatch, "external score file is empty");
    out.candidate = *best;
    out.candidate.score = best_score;
    out.mode = SelectionMode::External;
  } else {
    const CandidateDirection* best = &scored.front();
    for (const auto& c : scored)
      if (better(positions, c.score, c.id, best->score, best->id)) best = &c;
    out.candidate = *best;
    out.mode = SelectionMode::Proxy;
  }
  if (out.norm() == 0.0) fail(ErrorCode::InvalidSelection, "selected direction has zero norm");
  return out;
}

std::vector<CandidateDirection> top_candidates(std::span<const CandidateDirection> scored,
                                               const TokenPositionSet& positions, std::size_t k) {
  if (scored.size() < k) fail(ErrorCode::InsufficientModels, "fewer candidates than requested");
  std::vector<CandidateDirection> sorted(scored.begin(), scored.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [&](const auto& a, const auto& b) { return better(positions, a.score, a.id, b.score, b.id); });
  sorted.resize(k);
  std::sort(sorted.begin(), sorted.end(),
            [&](const auto& a, const auto& b) { return canonical_less(positions, a.id, b.id); });
  return sorted;
}

double refusal_activation(std::span<const float> h, std::span<const double> direction) {
  if (h.size() != direction.size())
    fail(ErrorCode::ShapeError, "hidden state has " + std::to_string(h.size()) + " elements, direction " +
                                    std::to_string(direction.size()));
  const double n = norm2(direction);
  if (n == 0.0) fail(ErrorCode::RangeError, "projection onto a zero-norm direction");
  return dot(h, direction) / n;
}

double refusal_activation(std::span<const float> h, const RefusalDirection& direction) {
  return refusal_activation(h, std::span<const double>(direction.vector()));
}

std::vector<double> projection_features(const ActivationRecord& record, const TensorShape& shape,
                                        const RefusalDirection& direction) {
  const auto last = shape.positions.index_of(-1);
  if (!last) fail(ErrorCode::MissingPosition, "position -1 is not in the position set");
  if (record.activations.size() != shape.element_count()) fail(ErrorCode::ShapeError, "record does not match shape");
  std::vector<double> out;
  out.reserve(shape.n_layers);
  for (std::uint32_t l = 0; l < shape.n_layers; ++l)
    out.push_back(refusal_activation(record.slice(shape, *last, l), direction));
  return out;
}

}  // namespace aligntree
