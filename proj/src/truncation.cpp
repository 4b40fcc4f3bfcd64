#include "flowscope/truncation.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "flowscope/errors.hpp"

namespace flowscope {

std::string_view score_row_mode_name(ScoreRowMode mode) noexcept {
  return mode == ScoreRowMode::last_image ? "last_image" : "last_prompt";
}

ScoreRowMode parse_score_row_mode(std::string_view name) {
  if (name == "last_image") return ScoreRowMode::last_image;
  if (name == "last_prompt") return ScoreRowMode::last_prompt;
  throw ContractError("unknown score row mode '" + std::string(name) + "' (last_image | last_prompt)");
}

std::size_t score_row_id(const TokenLayout& layout, ScoreRowMode mode) {
  return mode == ScoreRowMode::last_image ? layout.n_system() + layout.n_image() : layout.prompt_length();
}

Tensor head_average(const AttentionRecord& record, std::size_t layer) {
  const auto& cap = record.layer(layer);
  if (cap.heads.empty()) throw ContractError("head_average: no heads captured");
  Tensor out = Tensor::matrix(cap.heads[0].rows(), cap.heads[0].cols());
  for (const auto& h : cap.heads) {
    if (h.shape() != out.shape()) throw DimensionError("head_average: heads differ in shape");
    auto dst = out.data();
    auto src = h.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  const double inv = 1.0 / static_cast<double>(cap.heads.size());
  for (double& v : out.data()) v *= inv;
  return out;
}

std::vector<double> image_scores(const Tensor& attention, const TokenLayout& layout, std::size_t score_row) {
  const IdRange img = layout.image();
  if (score_row == 0 || (!img.empty() && score_row < img.last())) {
    throw ContractError("score row " + std::to_string(score_row) + " does not see every image token");
  }
  if (score_row > attention.rows() || layout.prompt_length() > attention.cols()) {
    throw DimensionError("image_scores: attention matrix smaller than the prompt");
  }
  auto row = attention.row(score_row - 1);
  std::vector<double> out;
  for (std::size_t id : img.ids()) out.push_back(row[id - 1]);
  return out;
}

std::vector<std::size_t> argtop(std::span<const double> scores, std::size_t k) {
  for (double s : scores)
    if (std::isnan(s)) throw ContractError("argtop: NaN score");
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const std::size_t n = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

std::vector<std::size_t> rebuild(const TokenLayout& layout, const std::vector<std::size_t>& kept_image) {
  std::vector<std::size_t> g = layout.system().ids();
  g.insert(g.end(), kept_image.begin(), kept_image.end());
  const auto u = layout.user().ids();
  g.insert(g.end(), u.begin(), u.end());
  return g;
}

void check_layer(const Model& model, std::size_t layer) {
  if (layer == 0 || layer > model.config().n_layers)
    throw ContractError("truncation layer " + std::to_string(layer) + " outside 1.." +
                        std::to_string(model.config().n_layers));
}

}  // namespace

std::string TruncationPlan::to_json() const {
  nlohmann::ordered_json j;
  j["layer"] = layer;
  j["k"] = k;
  j["score_row_mode"] = std::string(score_row_mode_name(score_mode));
  j["kept_indices"] = kept_image_ids;
  return j.dump(2) + "\n";
}

TruncationPlan TruncationPlan::from_json(std::string_view text, const TokenLayout& layout) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("truncation plan: ") + e.what());
  }
  TruncationPlan p;
  try {
    p.layer = j.at("layer").get<std::size_t>();
    p.k = j.at("k").get<std::size_t>();
    p.score_mode = parse_score_row_mode(j.at("score_row_mode").get<std::string>());
    p.kept_image_ids = j.at("kept_indices").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("truncation plan: ") + e.what());
  }
  if (p.layer == 0) throw ContractError("truncation plan: layer is 1-based");
  if (p.kept_image_ids.size() != std::min(p.k, layout.n_image()))
    throw ContractError("truncation plan: kept_indices size does not match k");
  if (!std::is_sorted(p.kept_image_ids.begin(), p.kept_image_ids.end()) ||
      std::adjacent_find(p.kept_image_ids.begin(), p.kept_image_ids.end()) != p.kept_image_ids.end())
    throw ContractError("truncation plan: kept_indices must be strictly ascending");
  for (std::size_t id : p.kept_image_ids)
    if (!layout.image().contains(id)) throw ContractError("truncation plan: kept index outside the image segment");
  p.score_row = score_row_id(layout, p.score_mode);
  p.kept_prompt_ids = rebuild(layout, p.kept_image_ids);
  return p;
}

TruncationPlan make_plan(const AttentionRecord& record, const TokenLayout& layout, std::size_t layer, std::size_t k,
                         ScoreRowMode mode) {
  TruncationPlan p;
  p.layer = layer;
  p.k = k;
  p.score_mode = mode;
  p.score_row = score_row_id(layout, mode);
  const std::size_t n_img = layout.n_image();
  if (k >= n_img) {
    p.kept_image_ids = layout.image().ids();
  } else if (k > 0) {
    const auto scores = image_scores(head_average(record, layer), layout, p.score_row);
    for (std::size_t i : argtop(scores, k)) p.kept_image_ids.push_back(layout.n_system() + 1 + i);
  } else {
    record.layer(layer);  // range check
  }
  p.kept_prompt_ids = rebuild(layout, p.kept_image_ids);
  return p;
}

TruncationPlan plan_truncation(const Model& model, const MultimodalInput& input, std::size_t layer, std::size_t k,
                               ScoreRowMode mode) {
  check_layer(model, layer);
  const auto pass = model.forward(input);
  return make_plan(pass.record, pass.sequence.layout, layer, k, mode);
}

TruncatedLogits truncated_logits(const Model& model, const ForwardResult& pass, const TruncationPlan& plan,
                                 RemovalMode mode) {
  check_layer(model, plan.layer);
  const auto& rows = pass.sequence.rows;
  const std::size_t n_prompt = pass.sequence.layout.prompt_length();
  const LayerCapture& cap = pass.record.layer(plan.layer);
  if (cap.token_ids.size() != rows.size()) throw ContractError("truncated_logits: pass was itself truncated");

  std::vector<std::size_t> keep = plan.kept_prompt_ids;
  for (std::size_t id = n_prompt + 1; id <= rows.size(); ++id) keep.push_back(id);

  if (mode == RemovalMode::remove) {
    auto res = model.forward_from_layer(*pass.tape, pass.weights, cap.input, rows, keep, plan.layer);
    return {res.logits.value(), res.rows.token_ids};
  }
  ForwardOptions opts;
  opts.capture = false;
  opts.masked_from = plan.layer;
  for (std::size_t id : pass.sequence.layout.image().ids())
    if (!std::binary_search(plan.kept_image_ids.begin(), plan.kept_image_ids.end(), id)) opts.masked_ids.push_back(id);
  Var h = model.run_layers(*pass.tape, pass.weights, cap.input, rows, plan.layer, model.config().n_layers, opts, nullptr);
  return {model.output_logits(pass.weights, h).value(), rows.token_ids};
}

TruncatedRun run_truncated(const Model& model, const MultimodalInput& input, const TruncationPlan& plan,
                           std::size_t max_new, RemovalMode mode) {
  if (max_new == 0) throw ContractError("run_truncated: max_new must be at least 1");
  check_layer(model, plan.layer);
  TruncatedRun run;
  run.plan = plan;
  for (std::size_t step = 0; step < max_new; ++step) {
    const auto pass = model.forward(input, run.answer);
    auto tl = truncated_logits(model, pass, plan, mode);
    run.answer.push_back(static_cast<int>(argmax(tl.logits.row(tl.logits.rows() - 1))));
    if (step == 0) run.prompt = std::move(tl);
  }
  return run;
}

Tensor text_only_logits(const Model& model, const MultimodalInput& input, std::span<const int> continuation) {
  const TokenLayout layout = input.layout();
  model.validate_input(input, continuation.size());
  std::vector<int> tokens;
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < input.system_tokens.size(); ++i) {
    tokens.push_back(input.system_tokens[i]);
    positions.push_back(i + 1);
  }
  std::size_t pos = layout.user().first;
  for (int t : input.user_tokens) {
    tokens.push_back(t);
    positions.push_back(pos++);
  }
  for (int t : continuation) {
    tokens.push_back(t);
    positions.push_back(pos++);
  }
  if (tokens.empty()) throw ContractError("text_only_logits: no text tokens");

  Tape tape(false);
  const auto w = model.bind(tape);
  Var h = model.embed_tokens(tape, w, tokens, positions);
  RowMeta rows;
  rows.token_ids = positions;
  rows.is_image.assign(positions.size(), 0);
  ForwardOptions opts;
  opts.capture = false;
  h = model.run_layers(tape, w, h, rows, 1, model.config().n_layers, opts, nullptr);
  return model.output_logits(w, h).value();
}

CostEstimate attention_cost(const TokenLayout& layout, const TruncationPlan& plan, std::size_t n_layers) {
  if (plan.layer == 0 || plan.layer > n_layers) throw ContractError("attention_cost: layer outside 1..n_layers");
  CostEstimate c;
  c.baseline_length = layout.prompt_length();
  c.kept_length = plan.kept_prompt_ids.size();
  const double s = static_cast<double>(c.baseline_length);
  const double s2 = static_cast<double>(c.kept_length);
  c.per_layer_ratio = s > 0.0 ? (s2 / s) * (s2 / s) : 1.0;
  c.baseline_cost = static_cast<double>(n_layers) * s * s;
  c.truncated_cost = static_cast<double>(plan.layer - 1) * s * s + static_cast<double>(n_layers - plan.layer + 1) * s2 * s2;
  return c;
}

}  // namespace flowscope
