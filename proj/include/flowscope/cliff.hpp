#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowscope/model.hpp"
#include "flowscope/tasks.hpp"

namespace flowscope {

// Copy of `base` whose image columns receive exactly zero attention from
// every other query at layers >= L. L = n_layers + 1 leaves it unmodified.
Model plant_cliff_model(const Model& base, std::size_t L);
Model plant_cliff_model(ModelConfig config, std::size_t L);

enum class CliffMetric {
  accuracy,     // fraction of instances answered correctly (candidate argmax)
  logit_match,  // fraction whose answer-row logits stay within tolerance of baseline
};

std::string_view cliff_metric_name(CliffMetric m) noexcept;
CliffMetric parse_cliff_metric(std::string_view name);

struct CliffLayer {
  std::size_t layer = 1;
  double metric = 0.0;       // under k = 0 truncation at this layer
  double image_share = 0.0;  // mean lambda_img of the baseline pass
};

struct CliffReport {
  std::string label;
  TaskKind task = TaskKind::patch_lookup;
  CliffMetric metric = CliffMetric::accuracy;
  double epsilon = 0.0;
  double baseline = 0.0;
  double chance = 0.0;
  std::size_t n_instances = 0;
  std::vector<CliffLayer> layers;
  std::optional<std::size_t> cliff_layer;           // truncation-sweep detector
  std::optional<std::size_t> attention_flag_layer;  // lambda_img threshold detector

  // One record per layer plus a summary block.
  std::string to_json() const;
};

struct SweepOptions {
  double epsilon = 0.0;
  CliffMetric metric = CliffMetric::accuracy;
  double logit_tolerance = 1e-9;
  double share_threshold = 0.02;
  std::string label;
};

CliffReport sweep_cliff(const Model& model, const SyntheticTask& task, const SweepOptions& options = {});

// Cliff layer implied by per-layer metrics: first layer within epsilon of the
// baseline.
std::optional<std::size_t> detect_cliff(double baseline, std::span<const CliffLayer> layers, double epsilon);

struct ReferenceAnnotation {
  std::string model;
  std::string benchmark;
  std::string quantity;
  std::string value;
  std::string note;
};

// Published observations on LLaVA-1.5, kept as annotations only.
const std::vector<ReferenceAnnotation>& reference_annotations();

// Comparative table over at least two sweeps, rows ordered by detected cliff
// (undetected last, ties keep input order), followed by the annotations
// labelled source=published.
std::string taxonomy_report(std::span<const CliffReport> reports);

}  // namespace flowscope
