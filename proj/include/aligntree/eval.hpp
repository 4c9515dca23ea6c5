#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aligntree/bundle.hpp"
#include "aligntree/pipeline.hpp"
#include "aligntree/types.hpp"

namespace aligntree {

struct EvalReport {
  Variant variant = Variant::AlignTree;
  std::size_t n = 0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double precision = 0.0;
  bool precision_defined = false;  // false when nothing was blocked; precision is then reported as 0
  double recall = 0.0;
  double accuracy = 0.0;
  double f_beta = 0.0;
  double bypass_rate = 0.0;   // harmful records passed / harmful records
  double refusal_rate = 0.0;  // harmless records blocked / harmless records
  double auc = 0.0;           // NaN when the set holds a single class
  double tau = 0.0;
  double latency_median_ns = 0.0;  // per-record gate time, feature assembly included
  double latency_p99_ns = 0.0;
};

// Throws EmptyDataset.
EvalReport evaluate(const ModelBundle& bundle, const ActivationDataset& dataset);

// Mann-Whitney estimate of ROC AUC with tied scores counted one half.
// Throws SingleClassError.
double auc_rank(std::span<const double> scores, std::span<const std::uint8_t> labels);

const std::vector<std::string>& default_refusal_keywords();

// True when `response` contains any keyword.
bool refusal_keyword_match(std::string_view response, std::span<const std::string> keywords,
                           bool case_sensitive = true);
bool refusal_keyword_match(std::string_view response);

// Share of responses that contain no refusal keyword.
double keyword_attack_success_rate(std::span<const std::string> responses, std::span<const std::string> keywords,
                                   bool case_sensitive = true);

struct AblationRow {
  EvalReport report;
  std::string bundle_fingerprint;
  double train_seconds = 0.0;
};

// Trains and evaluates every variant with the same datasets and seed. The
// test role is used for evaluation only.
std::vector<AblationRow> run_ablation(const PipelineConfig& config, const std::map<Role, ActivationDataset>& datasets,
                                      std::span<const Variant> variants,
                                      const std::map<std::string, std::string>& fingerprints = {});

// "variant,metric,value" rows with six decimals. Timing goes to the sidecar
// only, so the CSV is reproducible.
void write_ablation_csv(std::span<const AblationRow> rows, std::ostream& out);
std::string ablation_metadata_json(std::span<const AblationRow> rows, const PipelineConfig& config,
                                   const std::map<std::string, std::string>& fingerprints);

// "rank,feature,slot,importance"
void write_importance_csv(const ModelBundle& bundle, std::ostream& out);

std::string format_fixed6(double value);

}  // namespace aligntree
