#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowscope/layout.hpp"
#include "flowscope/model.hpp"

namespace flowscope {

enum class ScoreRowMode {
  last_image,   // row N_sys + N_img
  last_prompt,  // row N_sys + N_img + N_user
};

std::string_view score_row_mode_name(ScoreRowMode mode) noexcept;
ScoreRowMode parse_score_row_mode(std::string_view name);  // ContractError on unknown names
std::size_t score_row_id(const TokenLayout& layout, ScoreRowMode mode);

enum class RemovalMode {
  remove,  // rows deleted from layer ell on
  mask,    // rows kept but hidden from every other query from layer ell on
};

// Elementwise mean over heads of one captured layer (1-based).
Tensor head_average(const AttentionRecord& record, std::size_t layer);

// Row `score_row` (1-based id) of A restricted to the image columns, in
// patch order. A is indexed by token id - 1.
std::vector<double> image_scores(const Tensor& attention, const TokenLayout& layout, std::size_t score_row);

// 0-based indices of the k largest scores in ascending index order. Ties go
// to the lower index; k >= len returns every index.
std::vector<std::size_t> argtop(std::span<const double> scores, std::size_t k);

struct TruncationPlan {
  std::size_t layer = 1;  // 1-based
  std::size_t k = 0;
  ScoreRowMode score_mode = ScoreRowMode::last_image;
  std::size_t score_row = 0;                  // 1-based token id
  std::vector<std::size_t> kept_image_ids;    // I'
  std::vector<std::size_t> kept_prompt_ids;   // G' = S u I' u U, ascending

  std::string to_json() const;  // {layer, k, score_row_mode, kept_indices}
  static TruncationPlan from_json(std::string_view text, const TokenLayout& layout);
};

// Plan from a captured full-prompt pass: scores come from layer `layer`.
TruncationPlan make_plan(const AttentionRecord& record, const TokenLayout& layout, std::size_t layer, std::size_t k,
                         ScoreRowMode mode = ScoreRowMode::last_image);
TruncationPlan plan_truncation(const Model& model, const MultimodalInput& input, std::size_t layer, std::size_t k,
                               ScoreRowMode mode = ScoreRowMode::last_image);

// Truncated logits for the rows of an existing captured pass. Rows of
// generated tokens in the pass are always kept.
struct TruncatedLogits {
  Tensor logits;                     // kept rows x vocab
  std::vector<std::size_t> row_ids;  // 1-based token id per logits row
};
TruncatedLogits truncated_logits(const Model& model, const ForwardResult& pass, const TruncationPlan& plan,
                                 RemovalMode mode = RemovalMode::remove);

struct TruncatedRun {
  TruncationPlan plan;
  TruncatedLogits prompt;       // logits of the prompt pass after truncation
  std::vector<int> answer;      // greedy decode over the reduced context
};

// Baseline-free convenience: plans from the input's own pass, then decodes.
TruncatedRun run_truncated(const Model& model, const MultimodalInput& input, const TruncationPlan& plan,
                           std::size_t max_new = 1, RemovalMode mode = RemovalMode::remove);

// Logits of a pass that never embedded the image; text rows keep their
// original position ids.
Tensor text_only_logits(const Model& model, const MultimodalInput& input, std::span<const int> continuation = {});

// Attention cost model: proportional to sequence length squared per layer.
struct CostEstimate {
  std::size_t baseline_length = 0;
  std::size_t kept_length = 0;
  double per_layer_ratio = 1.0;  // (kept / baseline)^2 on layers >= ell
  double baseline_cost = 0.0;    // n * S^2
  double truncated_cost = 0.0;   // (ell - 1) S^2 + (n - ell + 1) S'^2
  double savings() const { return baseline_cost > 0.0 ? 1.0 - truncated_cost / baseline_cost : 0.0; }
};
CostEstimate attention_cost(const TokenLayout& layout, const TruncationPlan& plan, std::size_t n_layers);

}  // namespace flowscope
