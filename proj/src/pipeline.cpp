#include "aligntree/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "aligntree/codec.hpp"
#include "aligntree/dataset_io.hpp"
#include "aligntree/direction.hpp"
#include "aligntree/error.hpp"
#include "aligntree/parallel.hpp"
#include "json.hpp"

namespace aligntree {

using json = nlohmann::json;

namespace {

constexpr double kTieTolerance = 1e-12;

const ActivationDataset& role_dataset(const std::map<Role, ActivationDataset>& datasets, Role role) {
  auto it = datasets.find(role);
  if (it == datasets.end()) fail(ErrorCode::ManifestError, "missing dataset for role " + std::string(to_string(role)));
  return it->second;
}

std::size_t position_index(const TensorShape& shape, std::int32_t position) {
  auto pi = shape.positions.index_of(position);
  if (!pi) fail(ErrorCode::MissingPosition, "position " + std::to_string(position) + " not in the record's position set");
  return *pi;
}

void check_shape(const TensorShape& record_shape, const ModelBundle& bundle) {
  const auto& want = bundle.shape;
  if (record_shape.d_model != want.d_model || record_shape.n_layers != want.n_layers ||
      record_shape.positions.size() != want.positions.size())
    fail(ErrorCode::ShapeError, "record shape (d=" + std::to_string(record_shape.d_model) +
                                    ", L=" + std::to_string(record_shape.n_layers) +
                                    ", |I|=" + std::to_string(record_shape.positions.size()) +
                                    ") differs from the bundle (d=" + std::to_string(want.d_model) +
                                    ", L=" + std::to_string(want.n_layers) +
                                    ", |I|=" + std::to_string(want.positions.size()) + ")");
  if (record_shape.positions != want.positions)
    fail(ErrorCode::ProvenanceError, "record positions are addressed differently from the bundle's");
}

std::uint32_t svm_slot_count(const std::vector<FeatureSlot>& order) {
  return static_cast<std::uint32_t>(
      std::count_if(order.begin(), order.end(), [](const auto& s) { return s.kind == FeatureSlot::Kind::Svm; }));
}

}  // namespace

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
  PipelineConfig c;
  try {
    const auto j = json::parse(text);
    if (!j.is_object()) fail(ErrorCode::FormatError, "config must be a JSON object");
    c.seed = j.value("seed", c.seed);
    if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.svm.C = j.value("C", c.svm.C);
    if (j.contains("gamma")) {
      const auto& g = j.at("gamma");
      if (g.is_string()) {
        if (g.get<std::string>() != "scale") fail(ErrorCode::FormatError, "gamma must be \"scale\" or a number");
      } else {
        c.svm.kernel.gamma = g.get<double>();
      }
    }
    c.svm.tolerance = j.value("svm_tolerance", c.svm.tolerance);
    c.svm.max_iterations = j.value("svm_max_iterations", c.svm.max_iterations);
    if (j.contains("subsample_cap") && !j.at("subsample_cap").is_null())
      c.svm.subsample_cap = j.at("subsample_cap").get<std::size_t>();
    c.beta = j.value("beta", c.beta);
    c.grid_size = j.value("grid_size", c.grid_size);
    c.oof_folds = j.value("oof_folds", c.oof_folds);
    if (j.contains("external_scores") && !j.at("external_scores").is_null())
      c.external_scores = j.at("external_scores").get<std::string>();
    if (j.contains("manifest") && !j.at("manifest").is_null()) c.manifest = j.at("manifest").get<std::string>();
    c.threads = j.value("threads", c.threads);
    if (j.contains("forest")) {
      const auto& f = j.at("forest");
      c.forest.n_estimators = f.value("n_estimators", c.forest.n_estimators);
      c.forest.max_depth = f.value("max_depth", c.forest.max_depth);
      c.forest.min_samples_split = f.value("min_samples_split", c.forest.min_samples_split);
      c.forest.bootstrap = f.value("bootstrap", c.forest.bootstrap);
      c.forest.all_features = f.value("all_features", c.forest.all_features);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("config: ") + e.what());
  }
  if (!(c.svm.C > 0) || !std::isfinite(c.svm.C)) fail(ErrorCode::RangeError, "C must be positive");
  if (c.svm.kernel.gamma && !(*c.svm.kernel.gamma > 0)) fail(ErrorCode::RangeError, "gamma must be positive");
  if (!(c.beta > 0) || !std::isfinite(c.beta)) fail(ErrorCode::RangeError, "beta must be positive");
  if (c.grid_size < 2) fail(ErrorCode::RangeError, "grid_size must be >= 2");
  if (c.oof_folds < 2) fail(ErrorCode::RangeError, "oof_folds must be >= 2");
  if (c.forest.n_estimators < 1) fail(ErrorCode::RangeError, "forest.n_estimators must be >= 1");
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string PipelineConfig::to_json_text() const {
  // Thread count and file locations do not influence the trained model and are left out.
  json j;
  j["seed"] = seed;
  j["variant"] = std::string(to_string(variant));
  j["C"] = svm.C;
  if (svm.kernel.gamma)
    j["gamma"] = *svm.kernel.gamma;
  else
    j["gamma"] = "scale";
  j["svm_tolerance"] = svm.tolerance;
  j["svm_max_iterations"] = svm.max_iterations;
  j["subsample_cap"] = svm.subsample_cap ? json(*svm.subsample_cap) : json(nullptr);
  j["beta"] = beta;
  j["grid_size"] = grid_size;
  j["oof_folds"] = oof_folds;
  j["forest"] = {{"n_estimators", forest.n_estimators},
                 {"max_depth", forest.max_depth},
                 {"min_samples_split", forest.min_samples_split},
                 {"bootstrap", forest.bootstrap},
                 {"all_features", forest.all_features}};
  return j.dump();
}

FeatureVector assemble_features(const ActivationRecord& record, const TensorShape& record_shape,
                                const ModelBundle& bundle) {
  check_shape(record_shape, bundle);
  if (record.activations.size() != record_shape.element_count())
    fail(ErrorCode::ShapeError, "record holds " + std::to_string(record.activations.size()) + " values, expected " +
                                    std::to_string(record_shape.element_count()));
  FeatureVector fv;
  fv.provenance = bundle.fingerprint;
  fv.values.reserve(bundle.feature_order.size());
  std::size_t next_svm = 0;
  for (const auto& slot : bundle.feature_order) {
    const auto pi = position_index(record_shape, slot.position);
    const auto h = record.slice(record_shape, pi, slot.layer - 1);
    if (slot.kind == FeatureSlot::Kind::Projection) {
      fv.values.push_back(refusal_activation(h, bundle.directions.at(slot.direction)));
    } else {
      fv.values.push_back(bundle.svms.at(next_svm++).predict_proba(h));
    }
  }
  return fv;
}

double f_beta(double precision, double recall, double beta) {
  if (!(precision >= 0.0 && precision <= 1.0) || !(recall >= 0.0 && recall <= 1.0))
    fail(ErrorCode::RangeError, "precision and recall must lie in [0, 1]");
  if (!(beta > 0) || !std::isfinite(beta)) fail(ErrorCode::RangeError, "beta must be positive");
  if (precision == 0.0 && recall == 0.0) return 0.0;
  const double b2 = beta * beta;
  return (1.0 + b2) * precision * recall / (b2 * precision + recall);
}

std::vector<ThresholdPoint> threshold_curve(std::span<const double> probabilities, std::span<const std::uint8_t> labels,
                                            double beta, std::uint32_t grid_size) {
  if (probabilities.size() != labels.size()) fail(ErrorCode::ShapeError, "probability and label counts differ");
  if (grid_size < 2) fail(ErrorCode::RangeError, "grid_size must be >= 2");
  if (!(beta > 0) || !std::isfinite(beta)) fail(ErrorCode::RangeError, "beta must be positive");
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!(probabilities[i] >= 0.0 && probabilities[i] <= 1.0))
      fail(ErrorCode::RangeError, "probability outside [0, 1]");
    (labels[i] ? pos : neg).push_back(probabilities[i]);
  }
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  const double b2 = beta * beta;

  std::vector<ThresholdPoint> curve(grid_size);
  for (std::uint32_t k = 0; k < grid_size; ++k) {
    auto& pt = curve[k];
    pt.tau = static_cast<double>(k) / static_cast<double>(grid_size - 1);
    pt.tp = static_cast<std::uint32_t>(pos.end() - std::lower_bound(pos.begin(), pos.end(), pt.tau));
    pt.fp = static_cast<std::uint32_t>(neg.end() - std::lower_bound(neg.begin(), neg.end(), pt.tau));
    pt.fn = static_cast<std::uint32_t>(pos.size()) - pt.tp;
    pt.tn = static_cast<std::uint32_t>(neg.size()) - pt.fp;
    pt.precision = pt.tp + pt.fp > 0 ? static_cast<double>(pt.tp) / (pt.tp + pt.fp) : 0.0;
    pt.recall = pos.empty() ? 0.0 : static_cast<double>(pt.tp) / static_cast<double>(pos.size());
    // Count form of F_beta; equal to f_beta(P, R) and exact for tied counts.
    const double tp = pt.tp;
    pt.f_beta = pt.tp == 0 ? 0.0 : (1.0 + b2) * tp / ((1.0 + b2) * tp + b2 * pt.fn + pt.fp);
  }
  return curve;
}

Threshold select_threshold(std::span<const double> probabilities, std::span<const std::uint8_t> labels, double beta,
                           std::uint32_t grid_size) {
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
  if (positives == 0 || positives == labels.size())
    fail(ErrorCode::SingleClassError, "threshold selection needs both classes");
  const auto curve = threshold_curve(probabilities, labels, beta, grid_size);
  std::size_t best = 0;
  double best_f = curve[0].f_beta;
  for (std::size_t k = 1; k < curve.size(); ++k) {
    const double f = curve[k].f_beta;
    if (f >= best_f - kTieTolerance) {
      best = k;
      best_f = std::max(best_f, f);
    }
  }
  const auto& pt = curve[best];
  return {pt.tau, beta, pt.precision, pt.recall, pt.f_beta};
}

std::string_view to_string(Verdict v) noexcept { return v == Verdict::Block ? "block" : "pass"; }

GateResult gate(const FeatureVector& features, const ModelBundle& bundle) {
  if (!features.provenance.empty() && features.provenance != bundle.fingerprint)
    fail(ErrorCode::ProvenanceError, "feature vector was assembled by a different bundle");
  if (features.values.size() != bundle.feature_order.size())
    fail(ErrorCode::ShapeError, "expected " + std::to_string(bundle.feature_order.size()) + " features, got " +
                                    std::to_string(features.values.size()));
  GateResult r;
  r.p_harmful = bundle.forest.predict_proba(features.values);
  r.tau = bundle.threshold.tau;
  r.verdict = r.p_harmful >= r.tau ? Verdict::Block : Verdict::Pass;
  return r;
}

GateResult gate(const ActivationRecord& record, const TensorShape& record_shape, const ModelBundle& bundle) {
  return gate(assemble_features(record, record_shape, bundle), bundle);
}

ModelBundle train_variant(const PipelineConfig& config, const std::map<Role, ActivationDataset>& datasets,
                          const std::map<std::string, std::string>& fingerprints) {
  const auto& dir_train = role_dataset(datasets, Role::DirectionSvmTrain);
  const auto& dir_val = role_dataset(datasets, Role::DirectionSvmVal);
  const auto& forest_train = role_dataset(datasets, Role::ForestTrain);
  const auto& forest_val = role_dataset(datasets, Role::ForestVal);
  const auto& shape = dir_train.shape;
  for (const auto* ds : {&dir_val, &forest_train, &forest_val})
    if (!(ds->shape == shape)) fail(ErrorCode::ManifestError, "datasets disagree on shape");
  if (!shape.positions.index_of(-1)) fail(ErrorCode::MissingPosition, "position set lacks the final token -1");

  const std::uint32_t half = shape.n_layers / 2;
  const Variant variant = config.variant;
  const bool wants_svms =
      variant == Variant::AlignTree || variant == Variant::AlignTreeLinear || variant == Variant::SVMClassifier;
  if ((variant == Variant::SVMClassifier || variant == Variant::MultiRefusalsClassifier) && half == 0)
    fail(ErrorCode::InvalidSelection, std::string(to_string(variant)) + " needs at least two layers");

  ModelBundle bundle;
  bundle.variant = variant;
  bundle.shape = shape;

  auto candidates = compute_candidates(dir_train);
  score_candidates_proxy(candidates, dir_val, config.threads);
  if (variant == Variant::MultiRefusalsClassifier) {
    for (auto& c : top_candidates(candidates, shape.positions, half)) {
      if (c.degenerate) fail(ErrorCode::RangeError, "top candidate " + to_string(c.id) + " has zero norm");
      bundle.directions.push_back({std::move(c), SelectionMode::Proxy});
    }
  } else {
    std::optional<ExternalScores> external;
    if (config.external_scores) external = load_external_scores(*config.external_scores);
    auto r = select_direction(candidates, shape.positions, external);
    if (r.candidate.degenerate) fail(ErrorCode::RangeError, "selected direction " + to_string(r.candidate.id) + " has zero norm");
    bundle.directions.push_back(std::move(r));
  }

  SvmConfig svm_config = config.svm;
  svm_config.kernel.type = variant == Variant::AlignTreeLinear ? KernelType::Linear : KernelType::Rbf;
  if (wants_svms) {
    auto bank = train_bank(dir_train, dir_val, svm_config, derive_seed(config.seed, 1), config.threads);
    bundle.svms = std::move(bank.selected);
    bundle.metadata.bank = std::move(bank.entries);
    bundle.metadata.svm_selected_count = bank.selected_count;
  }
  bundle.feature_order = expected_feature_order(bundle);

  // Forest training features: projections are exact, SVM probabilities are
  // out-of-fold so the forest never sees a score from a model fit on that row.
  const auto n = forest_train.records.size();
  const auto p = bundle.feature_order.size();
  RowMatrixD F(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  const auto y = labels_of(forest_train);
  std::vector<std::size_t> svm_columns;
  for (std::size_t c = 0; c < p; ++c) {
    const auto& slot = bundle.feature_order[c];
    if (slot.kind == FeatureSlot::Kind::Svm) {
      svm_columns.push_back(c);
      continue;
    }
    const auto pi = position_index(shape, slot.position);
    const auto& dir = bundle.directions.at(slot.direction);
    for (std::size_t r = 0; r < n; ++r)
      F(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          refusal_activation(forest_train.records[r].slice(shape, pi, slot.layer - 1), dir);
  }
  parallel_for(svm_columns.size(), [&](std::size_t k) {
    const auto c = svm_columns[k];
    const auto& slot = bundle.feature_order[c];
    const auto X = slice_matrix(forest_train, position_index(shape, slot.position), slot.layer - 1);
    const auto oof = oof_probabilities(X, y, svm_config, config.oof_folds, derive_seed(config.seed, 100 + k));
    for (std::size_t r = 0; r < n; ++r)
      F(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = oof.probabilities[r];
  }, config.threads);
  if (svm_slot_count(bundle.feature_order) != bundle.svms.size())
    fail(ErrorCode::InvalidSelection, "feature order and SVM set disagree");

  bundle.forest = train_forest(F, y, config.forest, derive_seed(config.seed, 2), config.threads);

  std::vector<double> val_probs(forest_val.records.size());
  parallel_for(forest_val.records.size(), [&](std::size_t r) {
    val_probs[r] = gate(forest_val.records[r], shape, bundle).p_harmful;
  }, config.threads);
  const auto val_labels = labels_of(forest_val);
  bundle.threshold = select_threshold(val_probs, val_labels, config.beta, config.grid_size);

  bundle.metadata.seed = config.seed;
  bundle.metadata.dataset_fingerprints = fingerprints;
  bundle.metadata.config_fingerprint = fingerprint_hex(config.to_json_text());
  bundle.seal();
  return bundle;
}

ModelBundle train_variant(const PipelineConfig& config, const SplitManifest& manifest) {
  const auto datasets = load_manifest_datasets(manifest);
  std::map<std::string, std::string> fingerprints;
  for (const auto& [role, path] : manifest.paths) fingerprints[std::string(to_string(role))] = file_fingerprint(path);
  return train_variant(config, datasets, fingerprints);
}

}  // namespace aligntree
