#include "aligntree/svm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_map>

#include "aligntree/error.hpp"
#include "aligntree/parallel.hpp"

namespace aligntree {
namespace {

constexpr double kTau = 1e-12;                // floor on the pair curvature
constexpr std::size_t kFullGramLimit = 4096;  // rows; above this kernel rows are computed on demand
constexpr std::size_t kRowCacheSize = 512;

void require_both_classes(std::span<const std::uint8_t> y, const char* what) {
  const auto pos = std::count(y.begin(), y.end(), 1);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(y.size()))
    fail(ErrorCode::SingleClassError, std::string(what) + " needs both labels");
}

// Kernel rows over the training matrix, either from a precomputed Gram matrix
// or computed on demand with a small FIFO cache.
class KernelRows {
 public:
  KernelRows(const Eigen::MatrixXd& X, KernelType type, double gamma) : X_(X), type_(type), gamma_(gamma) {
    sq_ = X_.rowwise().squaredNorm();
    const auto n = static_cast<std::size_t>(X_.rows());
    if (n <= kFullGramLimit) {
      gram_ = X_ * X_.transpose();
      if (type_ == KernelType::Rbf) {
        for (Eigen::Index i = 0; i < gram_.rows(); ++i)
          for (Eigen::Index j = 0; j < gram_.cols(); ++j) gram_(i, j) = rbf(sq_(i) + sq_(j) - 2.0 * gram_(i, j));
      }
      full_ = true;
    }
  }

  const double* row(std::size_t i) {
    if (full_) return gram_.data() + i * static_cast<std::size_t>(gram_.cols());  // symmetric, column i == row i
    auto it = cache_.find(i);
    if (it != cache_.end()) return it->second.data();
    if (order_.size() >= kRowCacheSize) {
      cache_.erase(order_.front());
      order_.erase(order_.begin());
    }
    Eigen::VectorXd r = X_ * X_.row(static_cast<Eigen::Index>(i)).transpose();
    if (type_ == KernelType::Rbf)
      for (Eigen::Index j = 0; j < r.size(); ++j) r(j) = rbf(sq_(static_cast<Eigen::Index>(i)) + sq_(j) - 2.0 * r(j));
    order_.push_back(i);
    auto& slot = cache_[i];
    slot.assign(r.data(), r.data() + r.size());
    return slot.data();
  }

  double diag(std::size_t i) const {
    return type_ == KernelType::Rbf ? 1.0 : sq_(static_cast<Eigen::Index>(i));
  }

 private:
  double rbf(double dist2) const { return std::exp(-gamma_ * std::max(0.0, dist2)); }

  const Eigen::MatrixXd& X_;
  KernelType type_;
  double gamma_;
  Eigen::VectorXd sq_;
  Eigen::MatrixXd gram_;
  bool full_ = false;
  std::unordered_map<std::size_t, std::vector<double>> cache_;
  std::vector<std::size_t> order_;
};

double stable_sigmoid_of_neg(double z) {
  // 1 / (1 + exp(z))
  if (z >= 0) {
    const double e = std::exp(-z);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(z));
}

}  // namespace

double PlattParams::probability(double decision) const noexcept { return stable_sigmoid_of_neg(A * decision + B); }

SvmModel::SvmModel(Payload payload) : p_(std::move(payload)) {
  const auto m = p_.dual_coef.size();
  if (m < 1) fail(ErrorCode::InvalidBundle, "SVM " + to_string(p_.id) + " has no support vectors");
  if (p_.dim < 1 || p_.support_vectors.size() != m * p_.dim)
    fail(ErrorCode::InvalidBundle, "SVM " + to_string(p_.id) + " support vector block has wrong size");
  if (!(p_.C > 0) || !std::isfinite(p_.C)) fail(ErrorCode::InvalidBundle, "SVM C must be positive");
  if (p_.kernel == KernelType::Rbf && (!(p_.gamma > 0) || !std::isfinite(p_.gamma)))
    fail(ErrorCode::InvalidBundle, "RBF gamma must be positive");
  const double slack = 1e-9 * std::max(1.0, p_.C);
  for (double c : p_.dual_coef)
    if (!std::isfinite(c) || std::abs(c) > p_.C + slack) fail(ErrorCode::InvalidBundle, "dual coefficient outside [-C, C]");
  for (float v : p_.support_vectors)
    if (!std::isfinite(v)) fail(ErrorCode::InvalidBundle, "non-finite support vector");
  if (!std::isfinite(p_.bias) || !std::isfinite(p_.platt.A) || !std::isfinite(p_.platt.B))
    fail(ErrorCode::InvalidBundle, "non-finite SVM scalar");

  const Eigen::Map<const RowMatrixF> sv(p_.support_vectors.data(), static_cast<Eigen::Index>(m), p_.dim);
  const Eigen::Map<const Eigen::VectorXd> coef(p_.dual_coef.data(), static_cast<Eigen::Index>(m));
  if (p_.kernel == KernelType::Linear) {
    weights_ = sv.cast<double>().transpose() * coef;
  } else {
    sv_ = sv;
    sv_sq_norm_ = sv.cast<double>().rowwise().squaredNorm();
  }
}

double SvmModel::decision(std::span<const float> x) const {
  if (x.size() != p_.dim)
    fail(ErrorCode::ShapeError, "SVM " + to_string(p_.id) + " expects " + std::to_string(p_.dim) + " inputs, got " +
                                    std::to_string(x.size()));
  const Eigen::Map<const Eigen::VectorXf> xf(x.data(), static_cast<Eigen::Index>(x.size()));
  const Eigen::VectorXd xd = xf.cast<double>();
  if (p_.kernel == KernelType::Linear) return weights_.dot(xd) + p_.bias;
  // Dot products in f32 halve the memory traffic of the dominant product;
  // norms and the kernel stay in double.
  const Eigen::VectorXf dots = sv_ * xf;
  const double xsq = xd.squaredNorm();
  double f = 0.0;
  for (Eigen::Index j = 0; j < dots.size(); ++j)
    f += p_.dual_coef[static_cast<std::size_t>(j)] *
         std::exp(-p_.gamma * std::max(0.0, sv_sq_norm_(j) + xsq - 2.0 * static_cast<double>(dots(j))));
  return f + p_.bias;
}

double SvmModel::predict_proba(std::span<const float> x) const { return p_.platt.probability(decision(x)); }

double kernel_value(KernelType type, double gamma, std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) fail(ErrorCode::ShapeError, "kernel arguments differ in length");
  double dot = 0.0, dist2 = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    dot += static_cast<double>(u[k]) * v[k];
    const double d = static_cast<double>(u[k]) - v[k];
    dist2 += d * d;
  }
  return type == KernelType::Linear ? dot : std::exp(-gamma * dist2);
}

double resolve_gamma(const KernelSpec& spec, const RowMatrixF& X) {
  if (spec.gamma) {
    if (!(*spec.gamma > 0)) fail(ErrorCode::RangeError, "gamma must be positive");
    return *spec.gamma;
  }
  if (X.rows() < 2 || X.cols() < 1) return 1.0;
  const Eigen::MatrixXd Xd = X.cast<double>();
  const Eigen::RowVectorXd mean = Xd.colwise().mean();
  const double mean_var = (Xd.rowwise() - mean).array().square().colwise().sum().mean() / static_cast<double>(Xd.rows());
  if (!(mean_var > 0) || !std::isfinite(mean_var)) return 1.0;
  return 1.0 / (static_cast<double>(X.cols()) * mean_var);
}

SvmFit train_svm(const RowMatrixF& X, std::span<const std::uint8_t> y, const SvmConfig& config, std::uint64_t seed) {
  const auto n_all = static_cast<std::size_t>(X.rows());
  if (y.size() != n_all) fail(ErrorCode::ShapeError, "label count differs from row count");
  if (n_all < 2) fail(ErrorCode::TooFewSamples, "SVM training needs at least 2 rows");
  require_both_classes(y, "SVM training");
  if (!(config.C > 0)) fail(ErrorCode::RangeError, "C must be positive");

  std::vector<std::uint32_t> rows(n_all);
  std::iota(rows.begin(), rows.end(), 0u);
  if (config.subsample_cap && n_all > *config.subsample_cap) {
    std::mt19937_64 rng(seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(*config.subsample_cap);
    std::sort(rows.begin(), rows.end());
    std::vector<std::uint8_t> sub;
    for (auto r : rows) sub.push_back(y[r]);
    require_both_classes(sub, "subsampled SVM training");
  }
  const std::size_t n = rows.size();

  RowMatrixF Xs(static_cast<Eigen::Index>(n), X.cols());
  for (std::size_t t = 0; t < n; ++t) Xs.row(static_cast<Eigen::Index>(t)) = X.row(rows[t]);
  const double gamma = config.kernel.type == KernelType::Rbf ? resolve_gamma(config.kernel, Xs) : 1.0;
  const Eigen::MatrixXd Xd = Xs.cast<double>();
  KernelRows K(Xd, config.kernel.type, gamma);

  std::vector<double> ys(n), alpha(n, 0.0), G(n, -1.0);
  for (std::size_t t = 0; t < n; ++t) ys[t] = y[rows[t]] ? 1.0 : -1.0;
  const double C = config.C;
  auto in_up = [&](std::size_t t) { return ys[t] > 0 ? alpha[t] < C : alpha[t] > 0; };
  auto in_low = [&](std::size_t t) { return ys[t] > 0 ? alpha[t] > 0 : alpha[t] < C; };

  auto reconstruct_gradient = [&] {
    std::fill(G.begin(), G.end(), -1.0);
    for (std::size_t s = 0; s < n; ++s) {
      if (alpha[s] == 0.0) continue;
      const double* Ks = K.row(s);
      for (std::size_t t = 0; t < n; ++t) G[t] += ys[t] * ys[s] * Ks[t] * alpha[s];
    }
  };

  std::uint64_t iterations = 0;
  bool converged = false;
  bool fresh_gradient = true;
  while (true) {
    // i maximizes -y G over I_up; j is the I_low member with the largest
    // second-order decrease of the objective (libsvm's WSS2). g_min over
    // I_low gives the stopping gap.
    double g_max = -std::numeric_limits<double>::infinity();
    double g_min = std::numeric_limits<double>::infinity();
    std::ptrdiff_t i = -1, j = -1;
    for (std::size_t t = 0; t < n; ++t) {
      const double v = -ys[t] * G[t];
      if (in_up(t) && v > g_max) g_max = v, i = static_cast<std::ptrdiff_t>(t);
      if (in_low(t) && v < g_min) g_min = v;
    }
    if (i < 0 || g_min == std::numeric_limits<double>::infinity() || g_max - g_min < config.tolerance) {
      if (fresh_gradient) {
        converged = true;
        break;
      }
      reconstruct_gradient();
      fresh_gradient = true;
      continue;
    }
    if (iterations >= config.max_iterations) break;

    const auto ui = static_cast<std::size_t>(i);
    const double* Ki = K.row(ui);
    double best_gain = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
      if (!in_low(t)) continue;
      const double b = g_max + ys[t] * G[t];
      if (b <= 0) continue;
      double a = K.diag(ui) + K.diag(t) - 2.0 * Ki[t];
      if (a <= 0) a = kTau;
      const double gain = -(b * b) / a;
      if (gain < best_gain) best_gain = gain, j = static_cast<std::ptrdiff_t>(t);
    }
    const auto uj = static_cast<std::size_t>(j);
    const double* Kj = K.row(uj);
    Ki = K.row(ui);  // the row cache may have evicted it
    const double Qij = ys[ui] * ys[uj] * Ki[uj];
    const double old_ai = alpha[ui], old_aj = alpha[uj];
    double& ai = alpha[ui];
    double& aj = alpha[uj];
    if (ys[ui] != ys[uj]) {
      double quad = K.diag(ui) + K.diag(uj) + 2.0 * Qij;
      if (quad <= 0) quad = kTau;
      const double delta = (-G[ui] - G[uj]) / quad;
      const double diff = ai - aj;
      ai += delta;
      aj += delta;
      if (diff > 0) {
        if (aj < 0) aj = 0, ai = diff;
      } else if (ai < 0) {
        ai = 0, aj = -diff;
      }
      if (diff > 0) {
        if (ai > C) ai = C, aj = C - diff;
      } else if (aj > C) {
        aj = C, ai = C + diff;
      }
    } else {
      double quad = K.diag(ui) + K.diag(uj) - 2.0 * Qij;
      if (quad <= 0) quad = kTau;
      const double delta = (G[ui] - G[uj]) / quad;
      const double sum = ai + aj;
      ai -= delta;
      aj += delta;
      if (sum > C) {
        if (ai > C) ai = C, aj = sum - C;
      } else if (aj < 0) {
        aj = 0, ai = sum;
      }
      if (sum > C) {
        if (aj > C) aj = C, ai = sum - C;
      } else if (ai < 0) {
        ai = 0, aj = sum;
      }
    }
    const double dai = ai - old_ai, daj = aj - old_aj;
    for (std::size_t t = 0; t < n; ++t) G[t] += ys[t] * (ys[ui] * Ki[t] * dai + ys[uj] * Kj[t] * daj);
    ++iterations;
    fresh_gradient = false;
  }
  if (!fresh_gradient) reconstruct_gradient();

  // rho: average of y G over free vectors, else the midpoint of the feasible interval.
  double ub = std::numeric_limits<double>::infinity(), lb = -ub, sum_free = 0.0;
  std::size_t n_free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yG = ys[t] * G[t];
    if (alpha[t] >= C) {
      if (ys[t] < 0) ub = std::min(ub, yG); else lb = std::max(lb, yG);
    } else if (alpha[t] <= 0) {
      if (ys[t] > 0) ub = std::min(ub, yG); else lb = std::max(lb, yG);
    } else {
      sum_free += yG;
      ++n_free;
    }
  }
  const double rho = n_free > 0 ? sum_free / static_cast<double>(n_free) : 0.5 * (ub + lb);

  SvmFit fit;
  fit.alpha.assign(n_all, 0.0);
  SvmModel::Payload p;
  p.kernel = config.kernel.type;
  p.gamma = gamma;
  p.C = C;
  p.dim = static_cast<std::uint32_t>(X.cols());
  p.bias = -rho;
  p.converged = converged;
  p.iterations = iterations;
  for (std::size_t t = 0; t < n; ++t) {
    fit.alpha[rows[t]] = alpha[t];
    if (alpha[t] <= 0) continue;
    fit.support.push_back(rows[t]);
    p.dual_coef.push_back(alpha[t] * ys[t]);
    const auto r = Xs.row(static_cast<Eigen::Index>(t));
    p.support_vectors.insert(p.support_vectors.end(), r.data(), r.data() + r.size());
  }
  fit.rows = rows;
  fit.training_decisions.resize(n);
  for (std::size_t t = 0; t < n; ++t) fit.training_decisions[t] = ys[t] * (G[t] + 1.0) - rho;
  fit.model = SvmModel(std::move(p));
  return fit;
}

double kkt_residual(const SvmFit& fit, const RowMatrixF& X, std::span<const std::uint8_t> y) {
  const auto& p = fit.model.payload();
  double worst = 0.0;
  for (auto t : fit.rows) {
    const double a = fit.alpha[t];
    if (a < 0 || a > p.C) return std::numeric_limits<double>::infinity();
    const Eigen::VectorXf row = X.row(t);
    const double yf = (y[t] ? 1.0 : -1.0) * fit.model.decision(std::span<const float>(row.data(), row.size()));
    if (a < p.C) worst = std::max(worst, 1.0 - yf);
    if (a > 0) worst = std::max(worst, yf - 1.0);
  }
  return worst;
}

PlattParams platt_calibrate(std::span<const double> decisions, std::span<const std::uint8_t> labels,
                            double gradient_tolerance) {
  if (decisions.size() != labels.size()) fail(ErrorCode::ShapeError, "decision/label length mismatch");
  require_both_classes(labels, "Platt calibration");
  const auto n = decisions.size();
  const double prior1 = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double prior0 = static_cast<double>(n) - prior1;
  const double hi = (prior1 + 1.0) / (prior1 + 2.0);
  const double lo = 1.0 / (prior0 + 2.0);
  std::vector<double> t(n);
  for (std::size_t k = 0; k < n; ++k) t[k] = labels[k] ? hi : lo;

  auto objective = [&](double A, double B) {
    double f = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double z = decisions[k] * A + B;
      f += z >= 0 ? t[k] * z + std::log1p(std::exp(-z)) : (t[k] - 1.0) * z + std::log1p(std::exp(z));
    }
    return f;
  };

  constexpr int kMaxIter = 100;
  constexpr double kMinStep = 1e-10;
  constexpr double kSigma = 1e-12;
  double A = 0.0, B = std::log((prior0 + 1.0) / (prior1 + 1.0));
  double fval = objective(A, B);
  for (int it = 0; it < kMaxIter; ++it) {
    double h11 = kSigma, h22 = kSigma, h21 = 0.0, g1 = 0.0, g2 = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double z = decisions[k] * A + B;
      double p, q;
      if (z >= 0) {
        p = std::exp(-z) / (1.0 + std::exp(-z));
        q = 1.0 / (1.0 + std::exp(-z));
      } else {
        p = 1.0 / (1.0 + std::exp(z));
        q = std::exp(z) / (1.0 + std::exp(z));
      }
      const double d2 = p * q;
      h11 += decisions[k] * decisions[k] * d2;
      h22 += d2;
      h21 += decisions[k] * d2;
      const double d1 = t[k] - p;
      g1 += decisions[k] * d1;
      g2 += d1;
    }
    if (std::hypot(g1, g2) < gradient_tolerance) break;

    const double det = h11 * h22 - h21 * h21;
    const double dA = -(h22 * g1 - h21 * g2) / det;
    const double dB = -(-h21 * g1 + h11 * g2) / det;
    const double gd = g1 * dA + g2 * dB;
    double step = 1.0;
    while (step >= kMinStep) {
      const double nA = A + step * dA, nB = B + step * dB;
      const double nf = objective(nA, nB);
      if (nf < fval + 1e-4 * step * gd) {
        A = nA, B = nB, fval = nf;
        break;
      }
      step /= 2.0;
    }
    if (step < kMinStep) break;
  }
  return {A, B};
}

SvmModel train_calibrated_svm(const RowMatrixF& X, std::span<const std::uint8_t> y, const SvmConfig& config,
                              std::uint64_t seed) {
  auto fit = train_svm(X, y, config, seed);
  std::vector<std::uint8_t> used;
  used.reserve(fit.rows.size());
  for (auto r : fit.rows) used.push_back(y[r]);
  fit.model.set_platt(platt_calibrate(fit.training_decisions, used));
  return std::move(fit.model);
}

std::vector<OofFold> stratified_folds(std::span<const std::uint8_t> y, std::uint32_t k, std::uint64_t seed) {
  if (k < 2) fail(ErrorCode::RangeError, "fold count must be >= 2");
  if (y.size() < k) fail(ErrorCode::TooFewSamples, std::to_string(y.size()) + " rows for " + std::to_string(k) + " folds");
  std::vector<std::uint32_t> by_class[2];
  for (std::uint32_t r = 0; r < y.size(); ++r) by_class[y[r] ? 1 : 0].push_back(r);
  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> assignment(y.size());
  std::uint32_t next = 0;
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (auto r : members) assignment[r] = next++ % k;
  }
  std::vector<OofFold> folds(k);
  for (std::uint32_t r = 0; r < y.size(); ++r)
    for (std::uint32_t f = 0; f < k; ++f) (assignment[r] == f ? folds[f].held_out : folds[f].train).push_back(r);
  for (std::uint32_t f = 0; f < k; ++f) {
    const auto pos = std::count_if(folds[f].train.begin(), folds[f].train.end(), [&](auto r) { return y[r] == 1; });
    if (pos == 0 || pos == static_cast<std::ptrdiff_t>(folds[f].train.size()))
      fail(ErrorCode::StratificationError, "fold " + std::to_string(f) + " training portion lost a class");
  }
  return folds;
}

OofResult oof_probabilities(const RowMatrixF& X, std::span<const std::uint8_t> y, const SvmConfig& config,
                            std::uint32_t k, std::uint64_t seed,
                            const std::function<void(std::uint32_t, const OofFold&, const SvmModel&)>& observer) {
  if (y.size() != static_cast<std::size_t>(X.rows())) fail(ErrorCode::ShapeError, "label count differs from row count");
  const auto folds = stratified_folds(y, k, seed);
  OofResult out;
  out.probabilities.assign(y.size(), 0.0);
  out.fold.assign(y.size(), 0);
  for (std::uint32_t f = 0; f < k; ++f) {
    const auto& fold = folds[f];
    RowMatrixF Xtr(static_cast<Eigen::Index>(fold.train.size()), X.cols());
    std::vector<std::uint8_t> ytr;
    for (std::size_t t = 0; t < fold.train.size(); ++t) {
      Xtr.row(static_cast<Eigen::Index>(t)) = X.row(fold.train[t]);
      ytr.push_back(y[fold.train[t]]);
    }
    const auto model = train_calibrated_svm(Xtr, ytr, config, seed + f + 1);
    if (observer) observer(f, fold, model);
    for (auto r : fold.held_out) {
      const Eigen::VectorXf row = X.row(r);
      out.probabilities[r] = model.predict_proba(std::span<const float>(row.data(), row.size()));
      out.fold[r] = f;
    }
  }
  return out;
}

std::vector<SvmId> select_top(std::span<const BankEntry> entries, const TokenPositionSet& positions, std::size_t count) {
  std::vector<const BankEntry*> valid;
  for (const auto& e : entries)
    if (std::isfinite(e.validation_accuracy)) valid.push_back(&e);
  if (valid.size() < count)
    fail(ErrorCode::InsufficientModels, std::to_string(valid.size()) + " trained models, " + std::to_string(count) + " requested");
  std::sort(valid.begin(), valid.end(), [&](const BankEntry* a, const BankEntry* b) {
    if (a->validation_accuracy != b->validation_accuracy) return a->validation_accuracy > b->validation_accuracy;
    return canonical_less(positions, a->id, b->id);
  });
  std::vector<SvmId> out;
  for (std::size_t k = 0; k < count; ++k) out.push_back(valid[k]->id);
  std::sort(out.begin(), out.end(), [&](const SvmId& a, const SvmId& b) { return canonical_less(positions, a, b); });
  return out;
}

RowMatrixF slice_matrix(const ActivationDataset& ds, std::size_t position_index, std::uint32_t layer0) {
  const auto d = ds.shape.d_model;
  RowMatrixF X(static_cast<Eigen::Index>(ds.records.size()), d);
  for (std::size_t r = 0; r < ds.records.size(); ++r) {
    const auto s = ds.records[r].slice(ds.shape, position_index, layer0);
    std::copy(s.begin(), s.end(), X.row(static_cast<Eigen::Index>(r)).data());
  }
  return X;
}

std::vector<std::uint8_t> labels_of(const ActivationDataset& ds) {
  std::vector<std::uint8_t> y;
  y.reserve(ds.records.size());
  for (const auto& r : ds.records) y.push_back(r.label);
  return y;
}

SvmBank train_bank(const ActivationDataset& train, const ActivationDataset& validation, const SvmConfig& config,
                   std::uint64_t seed, unsigned threads) {
  if (!(train.shape == validation.shape)) fail(ErrorCode::ShapeError, "training and validation shapes differ");
  const auto& shape = train.shape;
  const auto ytr = labels_of(train);
  const auto yval = labels_of(validation);
  require_both_classes(ytr, "SVM bank training split");
  if (yval.empty()) fail(ErrorCode::EmptyDataset, "SVM validation split is empty");

  struct Slot {
    SvmFit fit;
    BankEntry entry;
  };
  const std::size_t n_pos = shape.positions.size();
  std::vector<Slot> slots(n_pos * shape.n_layers);
  parallel_for(slots.size(), [&](std::size_t idx) {
    const auto layer0 = static_cast<std::uint32_t>(idx / n_pos);
    const auto pi = idx % n_pos;
    auto& slot = slots[idx];
    slot.fit = train_svm(slice_matrix(train, pi, layer0), ytr, config, seed + idx);
    slot.fit.model.set_id({shape.positions[pi], layer0 + 1});
    std::size_t correct = 0;
    for (std::size_t r = 0; r < validation.records.size(); ++r) {
      const double f = slot.fit.model.decision(validation.records[r].slice(shape, pi, layer0));
      correct += static_cast<std::size_t>((f > 0 ? 1 : 0) == yval[r]);
    }
    slot.entry.id = slot.fit.model.id();
    slot.entry.validation_accuracy = static_cast<double>(correct) / static_cast<double>(yval.size());
    slot.entry.n_support = slot.fit.model.n_support();
    slot.entry.converged = slot.fit.model.payload().converged;
  }, threads);

  SvmBank bank;
  for (const auto& s : slots) bank.entries.push_back(s.entry);
  bank.selected_count = shape.n_layers / 2;
  const auto chosen = select_top(bank.entries, shape.positions, bank.selected_count);
  for (const auto& id : chosen) {
    const auto pi = *shape.positions.index_of(id.position);
    auto& fit = slots[(id.layer - 1) * n_pos + pi].fit;
    std::vector<std::uint8_t> used;
    for (auto r : fit.rows) used.push_back(ytr[r]);
    fit.model.set_platt(platt_calibrate(fit.training_decisions, used));
    bank.selected.push_back(std::move(fit.model));
  }
  return bank;
}

}  // namespace aligntree
