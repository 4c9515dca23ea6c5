#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "aligntree/svm.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "platt_oracle.hpp"
#include "support.hpp"

using namespace aligntree;
using namespace testing;

namespace {

Labeled gaussian_blobs(std::mt19937_64& rng, std::size_t n, std::size_t dim, double shift) {
  std::normal_distribution<double> normal;
  Labeled d;
  d.X.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t label = i % 2;
    d.y.push_back(label);
    for (std::size_t k = 0; k < dim; ++k)
      d.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
          static_cast<float>(normal(rng) + (label && k == 0 ? shift : 0.0));
  }
  return d;
}

}  // namespace

TEST_CASE("RBF separates XOR, a linear kernel cannot") {
  std::mt19937_64 rng(30);
  const auto d = xor_clusters(rng, 30, 0.15);
  SvmConfig rbf;
  rbf.C = 10.0;
  rbf.kernel = {KernelType::Rbf, 1.0};
  const auto fit = train_svm(d.X, d.y, rbf);
  CHECK(training_accuracy(fit.model, d) == 1.0);
  CHECK(kkt_residual(fit, d.X, d.y) <= 1e-3);

  SvmConfig lin;
  lin.C = 10.0;
  lin.kernel = {KernelType::Linear, std::nullopt};
  const auto lfit = train_svm(d.X, d.y, lin);
  CHECK(training_accuracy(lfit.model, d) <= 0.75);
  CHECK(kkt_residual(lfit, d.X, d.y) <= 1e-3);
}

TEST_CASE("fits satisfy KKT, box and equality constraints, and report consistent decisions") {
  std::mt19937_64 rng(31);
  for (int it = 0; it < 24; ++it) {
    const auto n = std::uniform_int_distribution<std::size_t>(6, 80)(rng);
    const auto dim = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const auto d = gaussian_blobs(rng, n, dim, std::uniform_real_distribution<double>(0, 3)(rng));
    SvmConfig cfg;
    cfg.C = std::exp(std::uniform_real_distribution<double>(-2, 3)(rng));
    cfg.kernel.type = it % 3 == 0 ? KernelType::Linear : KernelType::Rbf;
    const auto fit = train_svm(d.X, d.y, cfg, static_cast<std::uint64_t>(it));
    CAPTURE(it);
    CHECK(fit.model.payload().converged);
    CHECK(kkt_residual(fit, d.X, d.y) <= 1e-3);

    double balance = 0;
    for (std::size_t r = 0; r < n; ++r) {
      CHECK(fit.alpha[r] >= 0.0);
      CHECK(fit.alpha[r] <= cfg.C);
      balance += fit.alpha[r] * (d.y[r] ? 1.0 : -1.0);
    }
    CHECK(std::abs(balance) <= 1e-9 * std::max(1.0, cfg.C) * static_cast<double>(n));

    // Decision values recomputed from the kernel definition.
    const auto& p = fit.model.payload();
    for (std::size_t t = 0; t < fit.rows.size(); ++t) {
      const Eigen::VectorXf xt = d.X.row(fit.rows[t]);
      double f = p.bias;
      for (std::size_t s = 0; s < fit.support.size(); ++s) {
        const Eigen::VectorXf xs = d.X.row(fit.support[s]);
        f += p.dual_coef[s] * kernel_value(p.kernel, p.gamma, {xs.data(), dim}, {xt.data(), dim});
      }
      CHECK(fit.training_decisions[t] == doctest::Approx(f).epsilon(1e-9).scale(1.0));
      // Deployed RBF decisions take their dot products in f32.
      const double eps = cfg.kernel.type == KernelType::Rbf ? 1e-5 : 1e-9;
      CHECK(fit.model.decision({xt.data(), dim}) == doctest::Approx(f).epsilon(eps).scale(1.0));
    }
  }
}

TEST_CASE("the on-demand kernel row path converges on a large training set") {
  std::mt19937_64 rng(32);
  const auto d = gaussian_blobs(rng, 4200, 2, 2.0);
  SvmConfig cfg;
  cfg.kernel = {KernelType::Rbf, 0.5};
  const auto fit = train_svm(d.X, d.y, cfg);
  CHECK(fit.model.payload().converged);
  CHECK(kkt_residual(fit, d.X, d.y) <= 1e-3);
}

TEST_CASE("scale gamma is the reciprocal of dim times mean feature variance") {
  std::mt19937_64 rng(33);
  const auto d = gaussian_blobs(rng, 50, 4, 1.0);
  double total = 0;
  for (Eigen::Index c = 0; c < 4; ++c) {
    double mean = 0;
    for (Eigen::Index r = 0; r < 50; ++r) mean += d.X(r, c);
    mean /= 50;
    double var = 0;
    for (Eigen::Index r = 0; r < 50; ++r) var += (d.X(r, c) - mean) * (d.X(r, c) - mean);
    total += var / 50;
  }
  CHECK(resolve_gamma({}, d.X) == doctest::Approx(1.0 / (4 * total / 4)).epsilon(1e-9));
  CHECK(resolve_gamma({KernelType::Rbf, 0.25}, d.X) == 0.25);
  RowMatrixF constant = RowMatrixF::Ones(5, 3);
  CHECK(resolve_gamma({}, constant) == 1.0);
  CHECK(code_of([&] { resolve_gamma({KernelType::Rbf, -1.0}, d.X); }) == ErrorCode::RangeError);
}

TEST_CASE("training rejects degenerate inputs") {
  RowMatrixF X = RowMatrixF::Random(4, 2);
  const std::vector<std::uint8_t> one = {1, 1, 1, 1};
  CHECK(code_of([&] { train_svm(X, one, {}); }) == ErrorCode::SingleClassError);
  const std::vector<std::uint8_t> wrong_len = {1, 0};
  CHECK(code_of([&] { train_svm(X, wrong_len, {}); }) == ErrorCode::ShapeError);
  RowMatrixF single = RowMatrixF::Random(1, 2);
  const std::vector<std::uint8_t> y1 = {1};
  CHECK(code_of([&] { train_svm(single, y1, {}); }) == ErrorCode::TooFewSamples);
  SvmConfig bad;
  bad.C = 0.0;
  const std::vector<std::uint8_t> y = {1, 0, 1, 0};
  CHECK(code_of([&] { train_svm(X, y, bad); }) == ErrorCode::RangeError);
}

TEST_CASE("iteration cap stops early and marks the fit unconverged") {
  std::mt19937_64 rng(34);
  const auto d = gaussian_blobs(rng, 60, 3, 0.5);
  SvmConfig cfg;
  cfg.max_iterations = 3;
  const auto fit = train_svm(d.X, d.y, cfg);
  CHECK_FALSE(fit.model.payload().converged);
  CHECK(fit.model.payload().iterations == 3);
}

TEST_CASE("subsample cap bounds the rows entering the optimization") {
  std::mt19937_64 rng(35);
  const auto d = gaussian_blobs(rng, 100, 2, 2.0);
  SvmConfig cfg;
  cfg.subsample_cap = 30;
  const auto fit = train_svm(d.X, d.y, cfg, 9);
  CHECK(fit.rows.size() == 30);
  CHECK(std::set<std::uint32_t>(fit.rows.begin(), fit.rows.end()).size() == 30);
  for (std::uint32_t r = 0; r < 100; ++r)
    if (!std::binary_search(fit.rows.begin(), fit.rows.end(), r)) CHECK(fit.alpha[r] == 0.0);
  CHECK(train_svm(d.X, d.y, cfg, 9).rows == fit.rows);
}

TEST_CASE("Platt fit agrees with a generic simplex minimizer") {
  std::mt19937_64 rng(36);
  for (int it = 0; it < 20; ++it) {
    const std::size_t n = 40 + 10 * static_cast<std::size_t>(it);
    std::normal_distribution<double> normal;
    const double sep = std::uniform_real_distribution<double>(0.3, 3.0)(rng);
    std::vector<double> f(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<std::uint8_t>(i % 3 == 0);
      f[i] = normal(rng) + (y[i] ? sep : -sep);
    }
    const auto platt = platt_calibrate(f, y);
    const auto [A, B] = platt_oracle(f, y);
    CAPTURE(it);
    CHECK(std::abs(platt.A - A) <= 0.05);
    CHECK(std::abs(platt.B - B) <= 0.05);
    CHECK(platt.A < 0);  // larger decision, larger probability
  }
}

TEST_CASE("Platt probabilities are in (0,1) and monotone; inputs are checked") {
  const PlattParams p{-2.0, 0.3};
  double last = 0.0;
  for (double f = -50; f <= 50; f += 0.5) {
    const double q = p.probability(f);
    CHECK(q >= 0.0);
    CHECK(q <= 1.0);
    CHECK(q >= last);
    last = q;
  }
  const std::vector<double> f = {1, 2};
  const std::vector<std::uint8_t> one = {1, 1};
  CHECK(code_of([&] { platt_calibrate(f, one); }) == ErrorCode::SingleClassError);
}

TEST_CASE("stratified folds partition rows and balance classes") {
  std::mt19937_64 rng(37);
  for (int it = 0; it < 100; ++it) {
    const auto k = std::uniform_int_distribution<std::uint32_t>(2, 6)(rng);
    const auto n = std::uniform_int_distribution<std::size_t>(4 * k, 60)(rng);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<std::uint8_t>(i < n / 3 + 2);
    std::shuffle(y.begin(), y.end(), rng);
    const auto folds = stratified_folds(y, k, static_cast<std::uint64_t>(it));
    REQUIRE(folds.size() == k);
    std::vector<int> seen(n, 0);
    std::size_t min_pos = n, max_pos = 0;
    for (const auto& f : folds) {
      CHECK(f.train.size() + f.held_out.size() == n);
      std::set<std::uint32_t> tr(f.train.begin(), f.train.end());
      std::size_t pos = 0;
      for (auto r : f.held_out) {
        CHECK(tr.count(r) == 0);
        ++seen[r];
        pos += y[r];
      }
      min_pos = std::min(min_pos, pos);
      max_pos = std::max(max_pos, pos);
    }
    for (int s : seen) CHECK(s == 1);
    CHECK(max_pos - min_pos <= 1);
    CHECK(stratified_folds(y, k, static_cast<std::uint64_t>(it))[0].held_out == folds[0].held_out);
  }
  const std::vector<std::uint8_t> three = {1, 0, 1};
  CHECK(code_of([&] { stratified_folds(three, 5, 0); }) == ErrorCode::TooFewSamples);
  const std::vector<std::uint8_t> lonely = {1, 0, 0, 0, 0, 0};
  CHECK(code_of([&] { stratified_folds(lonely, 2, 0); }) == ErrorCode::StratificationError);
}

TEST_CASE("out-of-fold probabilities never come from a model that saw the row") {
  std::mt19937_64 rng(38);
  // Random labels with a sharp kernel: memorizable in-sample, chance out of fold.
  Labeled d = gaussian_blobs(rng, 150, 5, 0.0);
  std::shuffle(d.y.begin(), d.y.end(), rng);
  SvmConfig cfg;
  cfg.C = 100.0;
  cfg.kernel = {KernelType::Rbf, 2.0};

  const auto full = train_calibrated_svm(d.X, d.y, cfg);
  const double in_sample = training_accuracy(full, d);

  std::vector<int> covered(150, 0);
  const auto oof = oof_probabilities(d.X, d.y, cfg, 5, 4, [&](std::uint32_t, const OofFold& fold, const SvmModel& m) {
    // Every support vector of the fold model is a training row of that fold.
    const auto& p = m.payload();
    std::set<std::uint32_t> train(fold.train.begin(), fold.train.end());
    for (std::size_t s = 0; s < m.n_support(); ++s) {
      bool found = false;
      for (auto r : fold.train) {
        const Eigen::VectorXf row = d.X.row(r);
        if (std::equal(row.data(), row.data() + 5, p.support_vectors.data() + s * 5)) {
          found = true;
          break;
        }
      }
      CHECK(found);
    }
    for (auto r : fold.held_out) {
      CHECK(train.count(r) == 0);
      ++covered[r];
    }
  });
  for (int c : covered) CHECK(c == 1);
  std::size_t ok = 0;
  for (std::size_t r = 0; r < 150; ++r) ok += static_cast<std::size_t>((oof.probabilities[r] >= 0.5) == (d.y[r] == 1));
  const double oof_acc = static_cast<double>(ok) / 150.0;
  CHECK(in_sample == 1.0);
  CHECK(oof_acc < in_sample);
  CHECK(oof_acc < 0.75);
}

TEST_CASE("top selection ranks by accuracy and breaks ties canonically") {
  const auto pos = TokenPositionSet::canonical();
  std::vector<BankEntry> e = {
      {{-1, 2}, 0.9, 1, true}, {{0, 2}, 0.9, 1, true}, {{-1, 1}, 0.7, 1, true}, {{2, 1}, 0.95, 1, true},
      {{1, 3}, 0.9, 1, true}};
  const auto top = select_top(e, pos, 3);
  REQUIRE(top.size() == 3);
  CHECK(top[0] == SvmId{2, 1});
  CHECK(top[1] == SvmId{0, 2});
  CHECK(top[2] == SvmId{-1, 2});
  CHECK(code_of([&] { select_top(e, pos, 6); }) == ErrorCode::InsufficientModels);
}

TEST_CASE("model payload invariants") {
  SvmModel::Payload p;
  p.dim = 2;
  p.C = 1.0;
  p.gamma = 0.5;
  p.support_vectors = {1, 2, 3, 4};
  p.dual_coef = {0.5, -0.5};
  CHECK_NOTHROW(SvmModel{p});
  auto over = p;
  over.dual_coef[0] = 2.0;
  CHECK(code_of([&] { SvmModel m(over); }) == ErrorCode::InvalidBundle);
  auto ragged = p;
  ragged.support_vectors.pop_back();
  CHECK(code_of([&] { SvmModel m(ragged); }) == ErrorCode::InvalidBundle);
  auto empty = p;
  empty.dual_coef.clear();
  empty.support_vectors.clear();
  CHECK(code_of([&] { SvmModel m(empty); }) == ErrorCode::InvalidBundle);
  const SvmModel m(p);
  const std::vector<float> x3 = {1, 2, 3};
  CHECK(code_of([&] { m.decision(x3); }) == ErrorCode::ShapeError);
}

TEST_CASE("bank trains every coordinate and keeps floor(L/2) calibrated models") {
  std::mt19937_64 rng(39);
  const TensorShape s{3, 5, TokenPositionSet({0, -1})};
  auto train = testing::random_dataset(rng, s, 40, Role::DirectionSvmTrain);
  auto val = testing::random_dataset(rng, s, 20, Role::DirectionSvmVal, 1000);
  for (auto* ds : {&train, &val})
    for (auto& r : ds->records)
      if (r.label)
        for (std::size_t k = 0; k < 3; ++k) r.activations[s.offset(0, 2, k)] += 4.0f;  // signal at (0, layer 3)
  const auto bank = train_bank(train, val, {}, 1);
  CHECK(bank.entries.size() == 10);
  CHECK(bank.selected_count == 2);
  REQUIRE(bank.selected.size() == 2);
  bool has_planted = false;
  for (const auto& m : bank.selected) has_planted |= m.id() == SvmId{0, 3};
  CHECK(has_planted);
  CHECK(canonical_less(s.positions, bank.selected[0].id(), bank.selected[1].id()));
  for (const auto& e : bank.entries) CHECK(e.converged);
}
