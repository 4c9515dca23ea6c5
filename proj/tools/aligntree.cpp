#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "aligntree/bundle.hpp"
#include "aligntree/dataset_io.hpp"
#include "aligntree/error.hpp"
#include "aligntree/eval.hpp"
#include "aligntree/forest.hpp"
#include "aligntree/pipeline.hpp"
#include "aligntree/service.hpp"
#include "aligntree/synth.hpp"
#include "json.hpp"

namespace {

using namespace aligntree;
using json = nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;

  std::string spec, out_dir;                                  // synth
  std::string manifest, out;                                  // split, train
  std::vector<std::string> roles, disjoint;                   // split
  std::string config, variant, external_scores;               // train
  std::string bundle, record, features;                       // gate
  std::string endpoint = "stdio";                             // serve
  std::string dataset, csv, metadata;                         // eval, ablate
  std::vector<std::string> variants;                          // ablate
  std::string path;                                           // inspect
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) fail(ErrorCode::IoError, "cannot write " + path);
}

PipelineConfig load_config(const Options& o) {
  PipelineConfig c = o.config.empty() ? PipelineConfig{} : PipelineConfig::load(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.threads) c.threads = o.threads;
  if (!o.variant.empty()) c.variant = variant_from_string(o.variant);
  if (!o.external_scores.empty()) c.external_scores = o.external_scores;
  if (!o.manifest.empty()) c.manifest = o.manifest;
  return c;
}

std::string require_manifest(const PipelineConfig& c) {
  if (!c.manifest) throw UsageError("a manifest is required (--manifest or the config's \"manifest\" key)");
  return *c.manifest;
}

std::map<std::string, std::string> fingerprints_of(const SplitManifest& m) {
  std::map<std::string, std::string> out;
  for (const auto& [role, path] : m.paths) out[std::string(to_string(role))] = file_fingerprint(path);
  return out;
}

std::string bundle_path(const Options& o) {
  if (!o.bundle.empty()) return o.bundle;
  if (const char* env = std::getenv("ALIGNTREE_BUNDLE")) return env;
  throw UsageError("a bundle is required (--bundle or ALIGNTREE_BUNDLE)");
}

json report_json(const EvalReport& r) {
  return {{"variant", std::string(to_string(r.variant))},
          {"n", r.n},
          {"tp", r.tp},
          {"fp", r.fp},
          {"tn", r.tn},
          {"fn", r.fn},
          {"precision", r.precision},
          {"precision_defined", r.precision_defined},
          {"recall", r.recall},
          {"accuracy", r.accuracy},
          {"f_beta", r.f_beta},
          {"bypass_rate", r.bypass_rate},
          {"refusal_rate", r.refusal_rate},
          {"auc", std::isnan(r.auc) ? json(nullptr) : json(r.auc)},
          {"tau", r.tau},
          {"latency_median_ns", r.latency_median_ns},
          {"latency_p99_ns", r.latency_p99_ns}};
}

int cmd_synth(const Options& o) {
  auto plan = load_synth_plan(o.spec);
  if (o.seed) plan.spec.seed = *o.seed;
  const auto splits = generate_splits(plan.spec, plan.sizes);
  std::filesystem::create_directories(o.out_dir);
  SplitManifest manifest;
  manifest.disjoint = SplitManifest::required_disjoint();
  for (const auto& [role, ds] : splits) {
    const auto name = std::string(to_string(role)) + ".atac";
    write_dataset_file(ds, std::filesystem::path(o.out_dir) / name);
    manifest.paths[role] = name;
    std::cout << to_string(role) << ": " << ds.records.size() << " records\n";
  }
  for (auto r : {Role::DirectionSvmTrain, Role::DirectionSvmVal, Role::ForestTrain, Role::ForestVal})
    manifest.disjoint.emplace_back(r, Role::Test);
  save_manifest(manifest, std::filesystem::path(o.out_dir) / "manifest.json");
  const auto truth = planted_truth(plan.spec);
  if (truth.linear_at) std::cout << "linear signal at " << to_string(*truth.linear_at) << "\n";
  if (truth.shell_at) std::cout << "shell signal at " << to_string(*truth.shell_at) << "\n";
  return kExitOk;
}

int cmd_split(const Options& o) {
  SplitManifest manifest;
  std::string path = o.manifest;
  if (!o.out.empty()) {
    for (const auto& kv : o.roles) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--role expects role=path, got '" + kv + "'");
      manifest.paths[role_from_string(kv.substr(0, eq))] = kv.substr(eq + 1);
    }
    for (const auto& pair : o.disjoint) {
      const auto colon = pair.find(':');
      if (colon == std::string::npos) throw UsageError("--disjoint expects a:b, got '" + pair + "'");
      manifest.disjoint.emplace_back(role_from_string(pair.substr(0, colon)), role_from_string(pair.substr(colon + 1)));
    }
    save_manifest(manifest, o.out);
    path = o.out;
  }
  if (path.empty()) throw UsageError("split needs --manifest to validate or --out to write");
  manifest = load_manifest(path);
  const auto datasets = load_manifest_datasets(manifest);
  for (const auto& [role, ds] : datasets)
    std::cout << to_string(role) << ": " << ds.records.size() << " records (" << ds.count_label(1) << " harmful)\n";
  std::cout << "manifest ok\n";
  return kExitOk;
}

int cmd_train(const Options& o) {
  const auto config = load_config(o);
  const auto manifest = load_manifest(require_manifest(config));
  const auto bundle = train_variant(config, manifest);
  save_bundle_file(bundle, o.out);
  std::cout << json{{"variant", std::string(to_string(bundle.variant))},
                    {"fingerprint", bundle.fingerprint},
                    {"tau", bundle.threshold.tau},
                    {"validation_precision", bundle.threshold.precision},
                    {"validation_recall", bundle.threshold.recall},
                    {"features", bundle.feature_order.size()}}
                   .dump()
            << "\n";
  return kExitOk;
}

int cmd_gate(const Options& o) {
  const auto bundle = load_bundle_file(bundle_path(o));
  if (!o.features.empty()) {
    FeatureVector fv;
    std::stringstream ss(o.features);
    for (std::string item; std::getline(ss, item, ',');) {
      try {
        fv.values.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw UsageError("--features expects comma-separated numbers");
      }
    }
    const auto g = gate(fv, bundle);
    std::cout << json{{"p_harmful", g.p_harmful}, {"verdict", std::string(to_string(g.verdict))}, {"threshold", g.tau}}.dump()
              << "\n";
    return kExitOk;
  }
  if (o.record.empty()) throw UsageError("gate needs --record or --features");
  const auto ds = read_dataset_file(o.record);
  for (const auto& r : ds.records) {
    const auto g = gate(r, ds.shape, bundle);
    std::cout << json{{"prompt_id", r.prompt_id},
                      {"p_harmful", g.p_harmful},
                      {"verdict", std::string(to_string(g.verdict))},
                      {"threshold", g.tau}}
                     .dump()
              << "\n";
  }
  return kExitOk;
}

int cmd_serve(const Options& o) {
  const auto path = bundle_path(o);
  auto& control = serve_control();
  control.loader = [path] { return std::make_shared<const ModelBundle>(load_bundle_file(path)); };
  GateService service(control.loader());
  install_signal_handlers();
  if (o.endpoint == "stdio") {
    serve_stdio(service, control);
  } else if (o.endpoint.rfind("unix:", 0) == 0) {
    serve_unix(o.endpoint.substr(5), service, control);
  } else {
    throw UsageError("endpoint must be 'stdio' or 'unix:<path>'");
  }
  return kExitOk;
}

int cmd_eval(const Options& o) {
  const auto bundle = load_bundle_file(bundle_path(o));
  ActivationDataset ds;
  if (!o.dataset.empty()) {
    ds = read_dataset_file(o.dataset);
  } else if (!o.manifest.empty()) {
    const auto m = load_manifest(o.manifest);
    auto it = m.paths.find(Role::Test);
    if (it == m.paths.end()) fail(ErrorCode::ManifestError, "manifest has no test role");
    ds = read_dataset_file(it->second);
  } else {
    throw UsageError("eval needs --dataset or --manifest");
  }
  const auto report = evaluate(bundle, ds);
  if (!o.csv.empty()) {
    std::ofstream f(o.csv);
    AblationRow row{report, bundle.fingerprint, 0.0};
    write_ablation_csv(std::span<const AblationRow>(&row, 1), f);
    if (!f) fail(ErrorCode::IoError, "cannot write " + o.csv);
  }
  std::cout << report_json(report).dump(2) << "\n";
  return kExitOk;
}

int cmd_ablate(const Options& o) {
  const auto config = load_config(o);
  const auto manifest = load_manifest(require_manifest(config));
  const auto datasets = load_manifest_datasets(manifest);
  const auto fingerprints = fingerprints_of(manifest);
  std::vector<Variant> variants;
  for (const auto& v : o.variants) variants.push_back(variant_from_string(v));
  if (variants.empty()) variants = all_variants();
  const auto rows = run_ablation(config, datasets, variants, fingerprints);
  std::ostringstream csv;
  write_ablation_csv(rows, csv);
  if (o.csv.empty()) {
    std::cout << csv.str();
  } else {
    write_text(o.csv, csv.str());
    write_text(o.metadata.empty() ? o.csv + ".json" : o.metadata, ablation_metadata_json(rows, config, fingerprints));
    std::cout << "wrote " << o.csv << "\n";
  }
  return kExitOk;
}

int cmd_importance(const Options& o) {
  const auto bundle = load_bundle_file(bundle_path(o));
  std::ostringstream csv;
  write_importance_csv(bundle, csv);
  if (o.csv.empty())
    std::cout << csv.str();
  else
    write_text(o.csv, csv.str());
  return kExitOk;
}

int cmd_inspect(const Options& o) {
  std::ifstream f(o.path, std::ios::binary);
  if (!f) fail(ErrorCode::IoError, "cannot open " + o.path);
  char magic[4] = {};
  f.read(magic, 4);
  f.seekg(0);
  if (f.gcount() == 4 && std::equal(magic, magic + 4, kDatasetMagic)) {
    const auto ds = read_dataset(f);
    std::cout << json{{"kind", "dataset"},
                      {"version", kDatasetVersion},
                      {"role", std::string(to_string(ds.role))},
                      {"d_model", ds.shape.d_model},
                      {"n_layers", ds.shape.n_layers},
                      {"positions", ds.shape.positions.values()},
                      {"records", ds.records.size()},
                      {"harmful", ds.count_label(1)},
                      {"fingerprint", file_fingerprint(o.path)}}
                     .dump(2)
              << "\n";
    return kExitOk;
  }
  const auto b = load_bundle(f);
  json slots = json::array();
  for (const auto& s : b.feature_order) slots.push_back(to_string(s));
  json svms = json::array();
  for (const auto& m : b.svms) svms.push_back({{"id", to_string(m.id())}, {"n_support", m.n_support()}});
  std::cout << json{{"kind", "bundle"},
                    {"variant", std::string(to_string(b.variant))},
                    {"fingerprint", b.fingerprint},
                    {"d_model", b.shape.d_model},
                    {"n_layers", b.shape.n_layers},
                    {"positions", b.shape.positions.values()},
                    {"direction", to_string(b.directions.front().candidate.id)},
                    {"svms", svms},
                    {"features", slots},
                    {"trees", b.forest.trees.size()},
                    {"tau", b.threshold.tau},
                    {"beta", b.threshold.beta},
                    {"seed", b.metadata.seed}}
                   .dump(2)
            << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Harmful-prompt gate over LLM activations"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all");
  app.add_option("--seed", o.seed, "Seed for every random step");
  app.add_option("--threads", o.threads, "Worker threads (0 = all cores)");

  auto* synth = app.add_subcommand("synth", "Generate synthetic activation datasets and a manifest");
  synth->add_option("--spec", o.spec, "Synthetic data spec (JSON)")->required();
  synth->add_option("--out-dir", o.out_dir, "Output directory")->required();

  auto* split = app.add_subcommand("split", "Write and/or validate a split manifest");
  split->add_option("--manifest", o.manifest, "Manifest to validate");
  split->add_option("--out", o.out, "Write a manifest here from --role/--disjoint");
  split->add_option("--role", o.roles, "role=path");
  split->add_option("--disjoint", o.disjoint, "roleA:roleB");

  auto* train = app.add_subcommand("train", "Train a variant and write a bundle");
  train->add_option("--manifest", o.manifest, "Split manifest");
  train->add_option("--config", o.config, "Training config (JSON)");
  train->add_option("--variant", o.variant, "AlignTree, RefusalClassifier, SVMClassifier, MultiRefusalsClassifier, AlignTreeLinear");
  train->add_option("--external-scores", o.external_scores, "Per-candidate scores to select the direction");
  train->add_option("--out", o.out, "Bundle output path")->required();

  auto* gatec = app.add_subcommand("gate", "Classify records or one feature vector");
  gatec->add_option("--bundle", o.bundle, "Bundle path (default $ALIGNTREE_BUNDLE)");
  gatec->add_option("--record", o.record, "Dataset file whose records to classify");
  gatec->add_option("--features", o.features, "Comma-separated feature vector in bundle order");

  auto* serve = app.add_subcommand("serve", "Serve gate requests as JSON lines");
  serve->add_option("--bundle", o.bundle, "Bundle path (default $ALIGNTREE_BUNDLE)");
  serve->add_option("--endpoint", o.endpoint, "stdio or unix:<path>");

  auto* evalc = app.add_subcommand("eval", "Evaluate a bundle on a labeled set");
  evalc->add_option("--bundle", o.bundle, "Bundle path (default $ALIGNTREE_BUNDLE)");
  evalc->add_option("--dataset", o.dataset, "Dataset file");
  evalc->add_option("--manifest", o.manifest, "Manifest whose test role to use");
  evalc->add_option("--csv", o.csv, "Write variant,metric,value rows here");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate several variants");
  ablate->add_option("--manifest", o.manifest, "Split manifest");
  ablate->add_option("--config", o.config, "Training config (JSON)");
  ablate->add_option("--variants", o.variants, "Variants to run (default all)")->delimiter(',');
  ablate->add_option("--csv", o.csv, "CSV output (default stdout)");
  ablate->add_option("--metadata", o.metadata, "Metadata sidecar (default <csv>.json)");

  auto* importance = app.add_subcommand("importance", "Forest feature importance");
  importance->add_option("--bundle", o.bundle, "Bundle path (default $ALIGNTREE_BUNDLE)");
  importance->add_option("--csv", o.csv, "CSV output (default stdout)");

  auto* inspect = app.add_subcommand("inspect", "Describe a dataset or bundle file");
  inspect->add_option("path", o.path, "File to inspect")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(o);
    if (*split) return cmd_split(o);
    if (*train) return cmd_train(o);
    if (*gatec) return cmd_gate(o);
    if (*serve) return cmd_serve(o);
    if (*evalc) return cmd_eval(o);
    if (*ablate) return cmd_ablate(o);
    if (*importance) return cmd_importance(o);
    if (*inspect) return cmd_inspect(o);
  } catch (const UsageError& e) {
    std::cerr << "usage: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
