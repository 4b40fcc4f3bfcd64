#include "flowscope/cliff.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "flowscope/errors.hpp"
#include "flowscope/segment_attention.hpp"
#include "flowscope/truncation.hpp"

namespace flowscope {

Model plant_cliff_model(const Model& base, std::size_t L) {
  ModelConfig cfg = base.config();
  if (L == 0 || L > cfg.n_layers + 1) throw ContractError("planted layer outside 1..n_layers+1");
  cfg.image_cutoff_layer = L == cfg.n_layers + 1 ? 0 : L;
  return Model(cfg, base.weights());
}

Model plant_cliff_model(ModelConfig config, std::size_t L) {
  config.image_cutoff_layer = 0;
  return plant_cliff_model(Model(config), L);
}

std::string_view cliff_metric_name(CliffMetric m) noexcept {
  return m == CliffMetric::accuracy ? "accuracy" : "logit_match";
}

CliffMetric parse_cliff_metric(std::string_view name) {
  if (name == "accuracy") return CliffMetric::accuracy;
  if (name == "logit_match") return CliffMetric::logit_match;
  throw ContractError("unknown cliff metric '" + std::string(name) + "' (accuracy | logit_match)");
}

std::optional<std::size_t> detect_cliff(double baseline, std::span<const CliffLayer> layers, double epsilon) {
  for (const auto& l : layers)
    if (std::abs(l.metric - baseline) <= epsilon) return l.layer;
  return std::nullopt;
}

CliffReport sweep_cliff(const Model& model, const SyntheticTask& task, const SweepOptions& options) {
  if (!(options.epsilon >= 0.0)) throw ContractError("epsilon must be >= 0");
  if (task.instances.empty()) throw ContractError("sweep_cliff: task has no instances");
  const std::size_t n_layers = model.config().n_layers;
  const auto candidates = task.candidates();

  CliffReport rep;
  rep.label = options.label.empty() ? std::string(task_kind_name(task.spec.kind)) : options.label;
  rep.task = task.spec.kind;
  rep.metric = options.metric;
  rep.epsilon = options.epsilon;
  rep.chance = task.chance();
  rep.n_instances = task.instances.size();
  rep.layers.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) rep.layers[l].layer = l + 1;

  std::vector<std::size_t> hits(n_layers, 0);
  std::size_t base_hits = 0;
  for (const auto& inst : task.instances) {
    const auto pass = model.forward(inst.input);
    const auto layout = pass.sequence.layout;
    const Tensor& logits = pass.logits_value();
    const auto base_row = logits.row(logits.rows() - 1);
    const bool base_ok = predict_candidate(base_row, candidates) == inst.answer;
    base_hits += options.metric == CliffMetric::accuracy ? (base_ok ? 1 : 0) : 1;

    const auto queries = answer_query_ids(layout, 1);
    const auto profile = influence_rates(pass.record, layout, queries);
    for (std::size_t l = 1; l <= n_layers; ++l) {
      rep.layers[l - 1].image_share += profile.layers[l - 1].image;
      const TruncationPlan plan = make_plan(pass.record, layout, l, 0);
      const auto tl = truncated_logits(model, pass, plan);
      const auto row = tl.logits.row(tl.logits.rows() - 1);
      if (options.metric == CliffMetric::accuracy) {
        hits[l - 1] += predict_candidate(row, candidates) == inst.answer ? 1 : 0;
      } else {
        double diff = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c) diff = std::max(diff, std::abs(row[c] - base_row[c]));
        hits[l - 1] += diff <= options.logit_tolerance ? 1 : 0;
      }
    }
  }

  const double n = static_cast<double>(task.instances.size());
  rep.baseline = static_cast<double>(base_hits) / n;
  for (std::size_t l = 0; l < n_layers; ++l) {
    rep.layers[l].metric = static_cast<double>(hits[l]) / n;
    rep.layers[l].image_share /= n;
  }
  rep.cliff_layer = detect_cliff(rep.baseline, rep.layers, options.epsilon);
  for (const auto& l : rep.layers)
    if (l.image_share < options.share_threshold) {
      rep.attention_flag_layer = l.layer;
      break;
    }
  return rep;
}

namespace {

nlohmann::ordered_json optional_layer(const std::optional<std::size_t>& l) {
  return l ? nlohmann::ordered_json(*l) : nlohmann::ordered_json(nullptr);
}

}  // namespace

std::string CliffReport::to_json() const {
  nlohmann::ordered_json j;
  j["label"] = label;
  j["task"] = std::string(task_kind_name(task));
  j["metric"] = std::string(cliff_metric_name(metric));
  auto& layers_j = j["layers"] = nlohmann::ordered_json::array();
  for (const auto& l : layers) {
    nlohmann::ordered_json r;
    r["layer"] = l.layer;
    r["metric"] = l.metric;
    r["delta"] = l.metric - baseline;
    r["image_share"] = l.image_share;
    layers_j.push_back(r);
  }
  auto& s = j["summary"];
  s["baseline"] = baseline;
  s["chance"] = chance;
  s["epsilon"] = epsilon;
  s["instances"] = n_instances;
  s["cliff_layer"] = optional_layer(cliff_layer);
  s["attention_flag_layer"] = optional_layer(attention_flag_layer);
  return j.dump(2) + "\n";
}

const std::vector<ReferenceAnnotation>& reference_annotations() {
  static const std::vector<ReferenceAnnotation> notes = {
      {"LLaVA-1.5-7B", "ScienceQA", "cliff_layer", "12", ""},
      {"LLaVA-1.5-7B", "TextVQA", "cliff_layer", "18", ""},
      {"LLaVA-1.5-7B", "POPE", "cliff_layer", "24",
       "conflict: the layer-pattern discussion says 24, the truncation sweep says 22"},
      {"LLaVA-1.5-7B", "POPE", "cliff_layer", "22",
       "conflict: the layer-pattern discussion says 24, the truncation sweep says 22"},
      {"LLaVA-1.5-7B", "captioning", "cliff_layer", "~30", "approximate"},
      {"LLaVA-1.5-7B", "POPE", "accuracy_baseline_to_truncated_at_cliff", "84.70 -> 85.51", ""},
  };
  return notes;
}

std::string taxonomy_report(std::span<const CliffReport> reports) {
  if (reports.size() < 2) throw ContractError("taxonomy_report: needs at least two sweeps");
  std::vector<std::size_t> order(reports.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ca = reports[a].cliff_layer;
    const auto& cb = reports[b].cliff_layer;
    if (ca && cb) return *ca < *cb;
    return ca.has_value() && !cb.has_value();
  });

  nlohmann::ordered_json j;
  auto& rows = j["rows"] = nlohmann::ordered_json::array();
  for (std::size_t i : order) {
    const auto& r = reports[i];
    nlohmann::ordered_json row;
    row["label"] = r.label;
    row["task"] = std::string(task_kind_name(r.task));
    row["metric"] = std::string(cliff_metric_name(r.metric));
    row["baseline"] = r.baseline;
    row["cliff_layer"] = optional_layer(r.cliff_layer);
    row["attention_flag_layer"] = optional_layer(r.attention_flag_layer);
    rows.push_back(row);
  }
  auto& refs = j["reference"] = nlohmann::ordered_json::array();
  for (const auto& a : reference_annotations()) {
    nlohmann::ordered_json r;
    r["source"] = "published";
    r["model"] = a.model;
    r["benchmark"] = a.benchmark;
    r["quantity"] = a.quantity;
    r["value"] = a.value;
    if (!a.note.empty()) r["note"] = a.note;
    refs.push_back(r);
  }
  return j.dump(2) + "\n";
}

}  // namespace flowscope
