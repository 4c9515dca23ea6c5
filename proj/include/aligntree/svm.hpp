#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "aligntree/types.hpp"

namespace aligntree {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class KernelType : std::uint8_t { Rbf, Linear };

struct KernelSpec {
  KernelType type = KernelType::Rbf;
  std::optional<double> gamma;  // unset: 1 / (d * mean per-feature variance) of the training data
};

struct SvmConfig {
  double C = 1.0;
  KernelSpec kernel;
  double tolerance = 1e-3;                        // KKT violation m(a) - M(a)
  std::uint64_t max_iterations = 1'000'000;       // pair updates
  std::optional<std::size_t> subsample_cap;       // per-class-balanced random cap on training rows
};

// P(y = 1 | f) = 1 / (1 + exp(A f + B))
struct PlattParams {
  double A = 0.0;
  double B = 0.0;

  double probability(double decision) const noexcept;
};

class SvmModel {
 public:
  struct Payload {
    SvmId id;
    KernelType kernel = KernelType::Rbf;
    double gamma = 1.0;
    double C = 1.0;
    std::uint32_t dim = 0;
    std::vector<float> support_vectors;  // m x dim, row-major
    std::vector<double> dual_coef;       // alpha_j * y_j
    double bias = 0.0;
    PlattParams platt;
    bool converged = true;
    std::uint64_t iterations = 0;
  };

  SvmModel() = default;
  explicit SvmModel(Payload payload);  // validates invariants, throws InvalidBundle

  const Payload& payload() const noexcept { return p_; }
  const SvmId& id() const noexcept { return p_.id; }
  std::size_t n_support() const noexcept { return p_.dual_coef.size(); }
  std::uint32_t dim() const noexcept { return p_.dim; }

  void set_platt(PlattParams platt) noexcept { p_.platt = platt; }
  void set_id(SvmId id) noexcept { p_.id = id; }

  double decision(std::span<const float> x) const;
  double predict_proba(std::span<const float> x) const;

 private:
  Payload p_;
  Eigen::MatrixXf sv_;         // m x dim, RBF only
  Eigen::VectorXd weights_;    // sum of dual_coef * sv, linear only
  Eigen::VectorXd sv_sq_norm_;
};

double kernel_value(KernelType type, double gamma, std::span<const float> u, std::span<const float> v);

// Training output: the model plus the full dual vector, kept for audits.
struct SvmFit {
  SvmModel model;
  std::vector<double> alpha;           // per training row, in [0, C]
  std::vector<std::uint32_t> support;  // training row of each support vector
  std::vector<std::uint32_t> rows;     // rows that entered the optimization
  std::vector<double> training_decisions;  // f at each entry of `rows`
};

double resolve_gamma(const KernelSpec& spec, const RowMatrixF& X);

// Soft-margin C-SVC dual by pairwise (maximal violating pair) updates.
// Labels are 0/1; 1 maps to the +1 class. Throws SingleClassError.
SvmFit train_svm(const RowMatrixF& X, std::span<const std::uint8_t> y, const SvmConfig& config,
                 std::uint64_t seed = 0);

// Largest KKT violation of a fit measured on its training data with a freshly
// computed kernel: max over rows of margin violations given each alpha's
// bound status. +inf if any alpha leaves [0, C].
double kkt_residual(const SvmFit& fit, const RowMatrixF& X, std::span<const std::uint8_t> y);

// Regularized-target sigmoid fit (Newton with backtracking), stopping when
// the gradient norm falls below `gradient_tolerance`.
PlattParams platt_calibrate(std::span<const double> decisions, std::span<const std::uint8_t> labels,
                            double gradient_tolerance = 1e-8);

// train_svm followed by Platt on the decision values of the same rows.
SvmModel train_calibrated_svm(const RowMatrixF& X, std::span<const std::uint8_t> y, const SvmConfig& config,
                              std::uint64_t seed = 0);

struct OofFold {
  std::vector<std::uint32_t> train;
  std::vector<std::uint32_t> held_out;
};

struct OofResult {
  std::vector<double> probabilities;
  std::vector<std::uint32_t> fold;  // fold of each row
};

// Stratified folds from a seeded shuffle of each class, dealt round-robin.
std::vector<OofFold> stratified_folds(std::span<const std::uint8_t> y, std::uint32_t k, std::uint64_t seed);

OofResult oof_probabilities(const RowMatrixF& X, std::span<const std::uint8_t> y, const SvmConfig& config,
                            std::uint32_t k = 5, std::uint64_t seed = 0,
                            const std::function<void(std::uint32_t, const OofFold&, const SvmModel&)>& observer = {});

struct BankEntry {
  SvmId id;
  double validation_accuracy = 0.0;
  std::size_t n_support = 0;
  bool converged = true;
};

struct SvmBank {
  std::vector<BankEntry> entries;  // one per (position, layer), canonical order
  std::vector<SvmModel> selected;  // calibrated, canonical order
  std::uint32_t selected_count = 0;
};

// The `count` entries with highest accuracy, ties by canonical order, result
// in canonical order. Throws InsufficientModels.
std::vector<SvmId> select_top(std::span<const BankEntry> entries, const TokenPositionSet& positions,
                              std::size_t count);

// Rows of a dataset at one (position index, 0-based layer).
RowMatrixF slice_matrix(const ActivationDataset& ds, std::size_t position_index, std::uint32_t layer0);
std::vector<std::uint8_t> labels_of(const ActivationDataset& ds);

// Trains |I| x L SVMs on `train`, scores accuracy on `validation`, keeps the
// floor(L/2) best and calibrates them.
SvmBank train_bank(const ActivationDataset& train, const ActivationDataset& validation, const SvmConfig& config,
                   std::uint64_t seed, unsigned threads = 0);

}  // namespace aligntree
