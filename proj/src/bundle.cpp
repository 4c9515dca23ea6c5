#include "aligntree/bundle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "aligntree/codec.hpp"
#include "aligntree/error.hpp"

namespace aligntree {

using nlohmann::json;

namespace {

constexpr std::string_view kVariantNames[] = {"AlignTree", "RefusalClassifier", "SVMClassifier",
                                              "MultiRefusalsClassifier", "AlignTreeLinear"};

const json& req(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) fail(ErrorCode::FormatError, std::string("bundle: missing key '") + key + "'");
  return j.at(key);
}

template <typename T>
T get(const json& j, const char* key) {
  return req(j, key).get<T>();
}

json slot_to_json(const FeatureSlot& s) {
  return {{"kind", s.kind == FeatureSlot::Kind::Projection ? "projection" : "svm"},
          {"layer", s.layer},
          {"position", s.position},
          {"direction", s.direction}};
}

FeatureSlot slot_from_json(const json& j) {
  FeatureSlot s;
  const auto kind = get<std::string>(j, "kind");
  if (kind == "projection") s.kind = FeatureSlot::Kind::Projection;
  else if (kind == "svm") s.kind = FeatureSlot::Kind::Svm;
  else fail(ErrorCode::FormatError, "bundle: unknown feature kind '" + kind + "'");
  s.layer = get<std::uint32_t>(j, "layer");
  s.position = get<std::int32_t>(j, "position");
  s.direction = get<std::uint32_t>(j, "direction");
  return s;
}

json svm_to_json(const SvmModel& m) {
  const auto& p = m.payload();
  json sv = json::array();
  for (std::size_t r = 0; r < m.n_support(); ++r)
    sv.push_back(std::vector<float>(p.support_vectors.begin() + static_cast<std::ptrdiff_t>(r * p.dim),
                                    p.support_vectors.begin() + static_cast<std::ptrdiff_t>((r + 1) * p.dim)));
  return {{"layer", p.id.layer},
          {"position", p.id.position},
          {"kernel", p.kernel == KernelType::Rbf ? "rbf" : "linear"},
          {"gamma", p.gamma},
          {"C", p.C},
          {"bias", p.bias},
          {"platt", {{"A", p.platt.A}, {"B", p.platt.B}}},
          {"converged", p.converged},
          {"iterations", p.iterations},
          {"dual_coef", p.dual_coef},
          {"support_vectors", sv}};
}

SvmModel svm_from_json(const json& j, std::uint32_t dim) {
  SvmModel::Payload p;
  p.id = {get<std::int32_t>(j, "position"), get<std::uint32_t>(j, "layer")};
  const auto kernel = get<std::string>(j, "kernel");
  if (kernel == "rbf") p.kernel = KernelType::Rbf;
  else if (kernel == "linear") p.kernel = KernelType::Linear;
  else fail(ErrorCode::FormatError, "bundle: unknown kernel '" + kernel + "'");
  p.gamma = get<double>(j, "gamma");
  p.C = get<double>(j, "C");
  p.bias = get<double>(j, "bias");
  p.platt = {get<double>(req(j, "platt"), "A"), get<double>(req(j, "platt"), "B")};
  p.converged = get<bool>(j, "converged");
  p.iterations = get<std::uint64_t>(j, "iterations");
  p.dual_coef = get<std::vector<double>>(j, "dual_coef");
  p.dim = dim;
  for (const auto& row : req(j, "support_vectors")) {
    const auto v = row.get<std::vector<float>>();
    if (v.size() != dim) fail(ErrorCode::InvalidBundle, "bundle: support vector width differs from d_model");
    p.support_vectors.insert(p.support_vectors.end(), v.begin(), v.end());
  }
  return SvmModel(std::move(p));
}

json tree_to_json(const DecisionTree& t) {
  json j = {{"feature", json::array()},  {"threshold", json::array()}, {"left", json::array()},
            {"right", json::array()},    {"negatives", json::array()}, {"positives", json::array()},
            {"impurity_decrease", json::array()}};
  for (const auto& n : t.nodes) {
    j["feature"].push_back(n.feature);
    j["threshold"].push_back(n.threshold);
    j["left"].push_back(n.left);
    j["right"].push_back(n.right);
    j["negatives"].push_back(n.negatives);
    j["positives"].push_back(n.positives);
    j["impurity_decrease"].push_back(n.impurity_decrease);
  }
  return j;
}

DecisionTree tree_from_json(const json& j) {
  const auto feature = get<std::vector<std::int32_t>>(j, "feature");
  const auto threshold = get<std::vector<double>>(j, "threshold");
  const auto left = get<std::vector<std::int32_t>>(j, "left");
  const auto right = get<std::vector<std::int32_t>>(j, "right");
  const auto negatives = get<std::vector<std::uint32_t>>(j, "negatives");
  const auto positives = get<std::vector<std::uint32_t>>(j, "positives");
  const auto decrease = get<std::vector<double>>(j, "impurity_decrease");
  const auto n = feature.size();
  if (threshold.size() != n || left.size() != n || right.size() != n || negatives.size() != n ||
      positives.size() != n || decrease.size() != n)
    fail(ErrorCode::FormatError, "bundle: tree node arrays differ in length");
  DecisionTree t;
  for (std::size_t i = 0; i < n; ++i)
    t.nodes.push_back({feature[i], threshold[i], left[i], right[i], negatives[i], positives[i], decrease[i]});
  return t;
}

json to_json(const ModelBundle& b) {
  json doc;
  doc["format"] = "aligntree-bundle";
  doc["format_version"] = b.format_version;
  doc["variant"] = std::string(to_string(b.variant));
  doc["d_model"] = b.shape.d_model;
  doc["n_layers"] = b.shape.n_layers;
  doc["positions"] = b.shape.positions.values();

  doc["directions"] = json::array();
  for (const auto& d : b.directions)
    doc["directions"].push_back({{"layer", d.candidate.id.layer},
                                 {"position", d.candidate.id.position},
                                 {"score", d.candidate.score},
                                 {"mode", d.mode == SelectionMode::Proxy ? "proxy" : "external"},
                                 {"vector", d.candidate.vector}});
  doc["svms"] = json::array();
  for (const auto& m : b.svms) doc["svms"].push_back(svm_to_json(m));

  const auto& f = b.forest;
  json forest = {{"n_estimators", f.params.n_estimators},
                 {"max_depth", f.params.max_depth},
                 {"min_samples_split", f.params.min_samples_split},
                 {"bootstrap", f.params.bootstrap},
                 {"all_features", f.params.all_features},
                 {"n_features", f.n_features},
                 {"trees", json::array()}};
  for (const auto& t : f.trees) forest["trees"].push_back(tree_to_json(t));
  doc["forest"] = std::move(forest);

  doc["threshold"] = {{"tau", b.threshold.tau},
                      {"beta", b.threshold.beta},
                      {"precision", b.threshold.precision},
                      {"recall", b.threshold.recall},
                      {"f_beta", b.threshold.f_beta}};
  doc["feature_order"] = json::array();
  for (const auto& s : b.feature_order) doc["feature_order"].push_back(slot_to_json(s));

  json bank = json::array();
  for (const auto& e : b.metadata.bank)
    bank.push_back({{"layer", e.id.layer},
                    {"position", e.id.position},
                    {"validation_accuracy", e.validation_accuracy},
                    {"n_support", e.n_support},
                    {"converged", e.converged}});
  doc["metadata"] = {{"seed", b.metadata.seed},
                     {"datasets", b.metadata.dataset_fingerprints},
                     {"config_fingerprint", b.metadata.config_fingerprint},
                     {"svm_selected_count", b.metadata.svm_selected_count},
                     {"bank", bank}};
  return doc;
}

ModelBundle from_json(const json& doc) {
  if (get<std::string>(doc, "format") != "aligntree-bundle") fail(ErrorCode::FormatError, "bundle: wrong format tag");
  ModelBundle b;
  b.format_version = get<std::uint32_t>(doc, "format_version");
  if (b.format_version != kBundleVersion)
    fail(ErrorCode::UnsupportedVersion, "bundle format_version " + std::to_string(b.format_version));
  b.variant = variant_from_string(get<std::string>(doc, "variant"));
  b.shape.d_model = get<std::uint32_t>(doc, "d_model");
  b.shape.n_layers = get<std::uint32_t>(doc, "n_layers");
  try {
    b.shape.positions = TokenPositionSet(get<std::vector<std::int32_t>>(doc, "positions"));
  } catch (const Error& e) {
    fail(ErrorCode::InvalidBundle, e.what());
  }

  for (const auto& d : req(doc, "directions")) {
    RefusalDirection dir;
    dir.candidate.id = {get<std::int32_t>(d, "position"), get<std::uint32_t>(d, "layer")};
    dir.candidate.score = get<double>(d, "score");
    dir.candidate.vector = get<std::vector<double>>(d, "vector");
    const auto mode = get<std::string>(d, "mode");
    if (mode != "proxy" && mode != "external") fail(ErrorCode::FormatError, "bundle: unknown selection mode");
    dir.mode = mode == "proxy" ? SelectionMode::Proxy : SelectionMode::External;
    b.directions.push_back(std::move(dir));
  }
  for (const auto& s : req(doc, "svms")) b.svms.push_back(svm_from_json(s, b.shape.d_model));

  const auto& f = req(doc, "forest");
  b.forest.params.n_estimators = get<std::uint32_t>(f, "n_estimators");
  b.forest.params.max_depth = get<std::uint32_t>(f, "max_depth");
  b.forest.params.min_samples_split = get<std::uint32_t>(f, "min_samples_split");
  b.forest.params.bootstrap = get<bool>(f, "bootstrap");
  b.forest.params.all_features = get<bool>(f, "all_features");
  b.forest.n_features = get<std::uint32_t>(f, "n_features");
  for (const auto& t : req(f, "trees")) b.forest.trees.push_back(tree_from_json(t));

  const auto& th = req(doc, "threshold");
  b.threshold = {get<double>(th, "tau"), get<double>(th, "beta"), get<double>(th, "precision"),
                 get<double>(th, "recall"), get<double>(th, "f_beta")};
  for (const auto& s : req(doc, "feature_order")) b.feature_order.push_back(slot_from_json(s));

  const auto& meta = req(doc, "metadata");
  b.metadata.seed = get<std::uint64_t>(meta, "seed");
  b.metadata.dataset_fingerprints = get<std::map<std::string, std::string>>(meta, "datasets");
  b.metadata.config_fingerprint = get<std::string>(meta, "config_fingerprint");
  b.metadata.svm_selected_count = get<std::uint32_t>(meta, "svm_selected_count");
  for (const auto& e : req(meta, "bank"))
    b.metadata.bank.push_back({{get<std::int32_t>(e, "position"), get<std::uint32_t>(e, "layer")},
                               get<double>(e, "validation_accuracy"),
                               get<std::size_t>(e, "n_support"),
                               get<bool>(e, "converged")});
  return b;
}

}  // namespace

std::string_view to_string(Variant v) noexcept { return kVariantNames[static_cast<std::size_t>(v)]; }

Variant variant_from_string(std::string_view name) {
  for (std::size_t i = 0; i < std::size(kVariantNames); ++i)
    if (kVariantNames[i] == name) return static_cast<Variant>(i);
  fail(ErrorCode::FormatError, "unknown variant '" + std::string(name) + "'");
}

std::vector<Variant> all_variants() {
  return {Variant::AlignTree, Variant::RefusalClassifier, Variant::SVMClassifier, Variant::MultiRefusalsClassifier,
          Variant::AlignTreeLinear};
}

std::vector<FeatureSlot> expected_feature_order(const ModelBundle& b) {
  std::vector<SvmId> ids;
  for (const auto& m : b.svms) ids.push_back(m.id());
  switch (b.variant) {
    case Variant::AlignTree:
    case Variant::AlignTreeLinear:
      return canonical_feature_order(b.shape.n_layers, b.shape.positions, ids);
    case Variant::RefusalClassifier:
      return canonical_feature_order(b.shape.n_layers, b.shape.positions, {});
    case Variant::SVMClassifier: {
      auto order = canonical_feature_order(b.shape.n_layers, b.shape.positions, ids);
      order.erase(order.begin(), order.begin() + b.shape.n_layers);
      return order;
    }
    case Variant::MultiRefusalsClassifier: {
      std::vector<FeatureSlot> order;
      for (std::uint32_t k = 0; k < b.directions.size(); ++k)
        order.push_back({FeatureSlot::Kind::Projection, b.directions[k].candidate.id.layer, -1, k});
      return order;
    }
  }
  return {};
}

void ModelBundle::validate() const {
  if (format_version != kBundleVersion) fail(ErrorCode::UnsupportedVersion, "bundle format_version");
  if (shape.d_model == 0 || shape.n_layers == 0 || shape.positions.size() == 0)
    fail(ErrorCode::InvalidBundle, "bundle shape has a zero dimension");
  if (!shape.positions.index_of(-1)) fail(ErrorCode::InvalidBundle, "bundle position set lacks -1");
  if (directions.empty()) fail(ErrorCode::InvalidBundle, "bundle has no refusal direction");
  for (const auto& d : directions) {
    if (d.candidate.vector.size() != shape.d_model) fail(ErrorCode::InvalidBundle, "direction width differs from d_model");
    for (double v : d.candidate.vector)
      if (!std::isfinite(v)) fail(ErrorCode::InvalidBundle, "non-finite direction component");
    if (!(d.norm() > 0)) fail(ErrorCode::InvalidBundle, "direction has zero norm");
    if (d.candidate.id.layer < 1 || d.candidate.id.layer > shape.n_layers ||
        !shape.positions.index_of(d.candidate.id.position))
      fail(ErrorCode::InvalidBundle, "direction provenance outside the bundle shape");
  }
  const auto want_kernel = variant == Variant::AlignTreeLinear ? KernelType::Linear : KernelType::Rbf;
  for (const auto& m : svms) {
    if (m.dim() != shape.d_model) fail(ErrorCode::InvalidBundle, "SVM width differs from d_model");
    if (m.payload().kernel != want_kernel) fail(ErrorCode::InvalidBundle, "SVM kernel does not match the variant");
  }
  if (!(threshold.tau >= 0.0 && threshold.tau <= 1.0))
    fail(ErrorCode::InvalidBundle, "threshold tau " + std::to_string(threshold.tau) + " outside [0, 1]");
  if (!(threshold.beta > 0)) fail(ErrorCode::InvalidBundle, "beta must be positive");
  std::vector<FeatureSlot> expected;
  try {
    expected = expected_feature_order(*this);
  } catch (const Error& e) {
    fail(ErrorCode::InvalidBundle, e.what());
  }
  if (feature_order != expected) fail(ErrorCode::InvalidBundle, "feature order does not match the bundle composition");
  if (forest.n_features != feature_order.size())
    fail(ErrorCode::InvalidBundle, "forest feature count differs from the feature order length");
  forest.validate();
}

void ModelBundle::seal() {
  validate();
  fingerprint = fingerprint_hex(to_json(*this).dump());
}

std::string bundle_to_string(const ModelBundle& bundle) {
  bundle.validate();
  return to_json(bundle).dump(1) + "\n";
}

ModelBundle bundle_from_string(const std::string& text) {
  ModelBundle b;
  try {
    b = from_json(json::parse(text));
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("bundle: ") + e.what());
  }
  b.seal();
  return b;
}

std::uint64_t save_bundle(const ModelBundle& bundle, std::ostream& out) {
  const auto text = bundle_to_string(bundle);
  out << text;
  out.flush();
  if (!out) fail(ErrorCode::IoError, "writing bundle failed");
  return text.size();
}

ModelBundle load_bundle(std::istream& in) {
  std::stringstream ss;
  ss << in.rdbuf();
  return bundle_from_string(ss.str());
}

std::uint64_t save_bundle_file(const ModelBundle& bundle, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  return save_bundle(bundle, out);
}

ModelBundle load_bundle_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return load_bundle(in);
}

ExternalScores load_external_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  ExternalScores out;
  try {
    const auto doc = json::parse(in);
    for (const auto& [key, value] : req(doc, "scores").items()) {
      const auto id = svm_id_from_string(key);
      const double score = value.get<double>();
      if (!std::isfinite(score)) fail(ErrorCode::FormatError, "non-finite external score for " + key);
      out[{id.layer, id.position}] = score;
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("external scores: ") + e.what());
  }
  return out;
}

void save_external_scores(const ExternalScores& scores, const std::filesystem::path& path) {
  json doc = {{"scores", json::object()}};
  for (const auto& [key, value] : scores) doc["scores"][std::to_string(key.first) + ":" + std::to_string(key.second)] = value;
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  out << doc.dump(2) << "\n";
}

}  // namespace aligntree
