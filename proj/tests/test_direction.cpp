#include <cmath>
#include <random>

#include "aligntree/direction.hpp"
#include "aligntree/synth.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace aligntree;
using testing::code_of;

namespace {

ActivationDataset with_label(const ActivationDataset& ds, std::uint8_t label) {
  ActivationDataset out;
  out.shape = ds.shape;
  out.role = ds.role;
  for (const auto& r : ds.records)
    if (r.label == label) out.records.push_back(r);
  return out;
}

// Brute force over every threshold between sorted values plus both ends.
double balanced_accuracy_oracle(const std::vector<double>& x, const std::vector<std::uint8_t>& y) {
  std::vector<double> cuts = {-INFINITY, INFINITY};
  for (double a : x)
    for (double b : x) cuts.push_back(0.5 * (a + b));
  double np = 0, nn = 0;
  for (auto l : y) (l ? np : nn) += 1;
  double best = 0;
  for (double t : cuts) {
    double tp = 0, tn = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (y[i] && x[i] > t) ++tp;
      if (!y[i] && x[i] <= t) ++tn;
    }
    best = std::max(best, 0.5 * (tp / np + tn / nn));
  }
  return best;
}

}  // namespace

TEST_CASE("difference in means matches a direct per-class average") {
  std::mt19937_64 rng(20);
  for (int it = 0; it < 20; ++it) {
    const TensorShape s{5, 3, testing::random_positions(rng)};
    auto ds = testing::random_dataset(rng, s, 2 + it);
    for (std::size_t pi = 0; pi < s.positions.size(); ++pi)
      for (std::uint32_t l = 0; l < s.n_layers; ++l) {
        const SvmId id{s.positions[pi], l + 1};
        const auto c = difference_in_means(with_label(ds, 1), with_label(ds, 0), id);
        CHECK(c.id == id);
        for (std::uint32_t k = 0; k < s.d_model; ++k) {
          double mh = 0, mb = 0, nh = 0, nb = 0;
          for (const auto& r : ds.records) {
            const double v = r.activations[s.offset(pi, l, k)];
            if (r.label) mh += v, ++nh; else mb += v, ++nb;
          }
          CHECK(c.vector[k] == doctest::Approx(mh / nh - mb / nb).epsilon(1e-12));
        }
      }
  }
}

TEST_CASE("difference in means reports empty classes and shape disagreement") {
  std::mt19937_64 rng(21);
  const TensorShape s{3, 2, TokenPositionSet({0, -1})};
  auto ds = testing::random_dataset(rng, s, 6);
  auto harmful = with_label(ds, 1), harmless = with_label(ds, 0);
  ActivationDataset empty;
  empty.shape = s;
  CHECK(code_of([&] { difference_in_means(harmful, empty, {-1, 1}); }) == ErrorCode::EmptyClass);
  CHECK(code_of([&] { difference_in_means(empty, harmless, {-1, 1}); }) == ErrorCode::EmptyClass);
  auto other = testing::random_dataset(rng, {4, 2, TokenPositionSet({0, -1})}, 2);
  CHECK(code_of([&] { difference_in_means(harmful, with_label(other, 0), {-1, 1}); }) == ErrorCode::ShapeError);
}

TEST_CASE("one candidate per coordinate in (layer, position) order") {
  std::mt19937_64 rng(22);
  const TensorShape s{3, 4, TokenPositionSet::canonical()};
  const auto ds = testing::random_dataset(rng, s, 10);
  const auto cands = compute_candidates(ds);
  REQUIRE(cands.size() == 32);
  std::size_t k = 0;
  for (std::uint32_t l = 1; l <= 4; ++l)
    for (auto p : s.positions.values()) CHECK(cands[k++].id == SvmId{p, l});
}

TEST_CASE("best balanced accuracy equals the brute-force threshold search") {
  std::mt19937_64 rng(23);
  for (int it = 0; it < 300; ++it) {
    const auto n = std::uniform_int_distribution<std::size_t>(2, 14)(rng);
    std::vector<double> x(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = std::uniform_int_distribution<int>(-4, 4)(rng) * 0.5;  // many ties
      y[i] = static_cast<std::uint8_t>(i % 2);
    }
    std::shuffle(y.begin(), y.end(), rng);
    CHECK(best_balanced_accuracy(x, y) == doctest::Approx(balanced_accuracy_oracle(x, y)).epsilon(1e-12));
  }
  const std::vector<double> x = {1, 2};
  const std::vector<std::uint8_t> one_class = {1, 1};
  CHECK(code_of([&] { best_balanced_accuracy(x, one_class); }) == ErrorCode::EmptyClass);
}

TEST_CASE("refusal activation is the scalar projection and ignores direction scale") {
  std::mt19937_64 rng(24);
  std::normal_distribution<double> normal;
  for (int it = 0; it < 100; ++it) {
    const std::size_t d = 1 + it % 9;
    std::vector<float> h(d);
    std::vector<double> r(d), r_scaled(d);
    const double c = std::exp(normal(rng));
    double dot = 0, nn = 0;
    for (std::size_t k = 0; k < d; ++k) {
      h[k] = static_cast<float>(normal(rng));
      r[k] = normal(rng);
      r_scaled[k] = c * r[k];
      dot += h[k] * r[k];
      nn += r[k] * r[k];
    }
    const double want = dot / std::sqrt(nn);
    CHECK(refusal_activation(h, r) == doctest::Approx(want).epsilon(1e-12));
    CHECK(refusal_activation(h, r_scaled) == doctest::Approx(want).epsilon(1e-12));
  }
  const std::vector<float> h = {1, 2};
  const std::vector<double> zero = {0, 0}, wide = {1, 2, 3};
  CHECK(code_of([&] { refusal_activation(h, zero); }) == ErrorCode::RangeError);
  CHECK(code_of([&] { refusal_activation(h, wide); }) == ErrorCode::ShapeError);
}

TEST_CASE("proxy scoring finds the planted linear direction") {
  SynthSpec spec;
  spec.mode = SynthMode::Linear;
  spec.d_model = 16;
  spec.n_layers = 4;
  spec.n_per_class = 150;
  spec.separation = 10.0;
  spec.noise = 0.1;
  spec.seed = 3;
  const auto truth = planted_truth(spec);
  const auto train = generate(spec, Role::DirectionSvmTrain, 0);
  const auto val = generate(spec, Role::DirectionSvmVal, 10'000);
  auto cands = compute_candidates(train);
  score_candidates_proxy(cands, val);
  const auto r = select_direction(cands, spec.positions);
  CHECK(r.candidate.id == *truth.linear_at);
  CHECK(r.candidate.score >= 0.99);
  CHECK(r.mode == SelectionMode::Proxy);
  // Unplanted coordinates carry only noise.
  for (const auto& c : cands)
    if (!(c.id == *truth.linear_at)) CHECK(c.score < 0.8);
  double cos = 0;
  for (std::size_t k = 0; k < truth.direction.size(); ++k) cos += r.vector()[k] * truth.direction[k];
  CHECK(cos / r.norm() > 0.999);
}

TEST_CASE("degenerate candidates score zero and are flagged") {
  std::mt19937_64 rng(25);
  const TensorShape s{2, 1, TokenPositionSet({0, -1})};
  auto ds = testing::random_dataset(rng, s, 4);
  for (auto& r : ds.records)
    for (std::size_t k = 0; k < 2; ++k) r.activations[s.offset(0, 0, k)] = 1.0f;  // position 0 constant
  auto cands = compute_candidates(ds);
  score_candidates_proxy(cands, ds);
  CHECK(cands[0].degenerate);
  CHECK(cands[0].score == 0.0);
  CHECK_FALSE(cands[1].degenerate);
}

TEST_CASE("selection ties break toward the lowest layer, then the earliest position") {
  const auto pos = TokenPositionSet::canonical();
  std::vector<CandidateDirection> cands;
  for (std::uint32_t l = 3; l >= 1; --l)
    for (auto p : {-1, 0, -3}) cands.push_back({{1.0, 0.0}, {p, l}, 0.75, false});
  CHECK(select_direction(cands, pos).candidate.id == SvmId{0, 1});
  cands[4].score = 0.8;  // (0, 2)
  CHECK(select_direction(cands, pos).candidate.id == SvmId{0, 2});

  const auto top = top_candidates(cands, pos, 3);
  REQUIRE(top.size() == 3);
  CHECK(top[0].id == SvmId{0, 1});
  CHECK(top[1].id == SvmId{-3, 1});
  CHECK(top[2].id == SvmId{0, 2});
  CHECK(code_of([&] { top_candidates(cands, pos, 10); }) == ErrorCode::InsufficientModels);
}

TEST_CASE("external scores override the proxy and must name known candidates") {
  const auto pos = TokenPositionSet::canonical();
  std::vector<CandidateDirection> cands = {
      {{1.0}, {0, 1}, 0.9, false}, {{2.0}, {-1, 1}, 0.6, false}, {{3.0}, {-1, 2}, 0.7, false}};
  ExternalScores ext{{{1, -1}, 5.0}, {{2, -1}, 4.0}};
  const auto r = select_direction(cands, pos, ext);
  CHECK(r.candidate.id == SvmId{-1, 1});
  CHECK(r.mode == SelectionMode::External);
  CHECK(r.candidate.score == 5.0);
  ExternalScores unknown{{{7, -1}, 1.0}};
  CHECK(code_of([&] { select_direction(cands, pos, unknown); }) == ErrorCode::KeyMismatch);
  CHECK(code_of([&] { select_direction(cands, pos, ExternalScores{}); }) == ErrorCode::KeyMismatch);
}

TEST_CASE("projection features read the final token at every layer") {
  std::mt19937_64 rng(26);
  const TensorShape s{3, 4, TokenPositionSet({0, -2, -1})};
  const auto ds = testing::random_dataset(rng, s, 2);
  RefusalDirection dir;
  dir.candidate.vector = {0.0, 2.0, 0.0};
  dir.candidate.id = {-1, 1};
  const auto f = projection_features(ds.records[0], s, dir);
  REQUIRE(f.size() == 4);
  for (std::uint32_t l = 0; l < 4; ++l) CHECK(f[l] == doctest::Approx(ds.records[0].activations[s.offset(2, l, 1)]));

  const TensorShape no_final{3, 4, TokenPositionSet({0, 1})};
  const auto ds2 = testing::random_dataset(rng, no_final, 2);
  CHECK(code_of([&] { projection_features(ds2.records[0], no_final, dir); }) == ErrorCode::MissingPosition);
}
