#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "flowscope/model.hpp"

namespace flowscope {

enum class TaskKind {
  patch_lookup,     // class of the patch named by a position token
  multi_hop,        // class of the patch that the named patch points to
  global_describe,  // majority class over the whole grid
  text_only,        // successor of a class token in the prompt; image is noise
};

std::string_view task_kind_name(TaskKind kind) noexcept;
TaskKind parse_task_kind(std::string_view name);  // ContractError on unknown names
const std::vector<TaskKind>& all_task_kinds();

// Token layout of the synthetic vocabulary:
//   0, 1   system tokens
//   2..5   task markers (lookup, hop, describe, text)
//   6 ..   one position token per patch
//   then   one token per class
struct TaskVocab {
  std::size_t n_positions = 16;
  std::size_t n_classes = 8;

  static constexpr int kSystem0 = 0;
  static constexpr int kSystem1 = 1;
  static constexpr int kLookup = 2;
  static constexpr int kHop = 3;
  static constexpr int kDescribe = 4;
  static constexpr int kText = 5;

  int position(std::size_t p) const { return 6 + static_cast<int>(p); }
  int class_token(std::size_t c) const { return 6 + static_cast<int>(n_positions + c); }
  std::size_t size() const noexcept { return 6 + n_positions + n_classes; }
  std::vector<int> class_tokens() const;
};

struct TaskSpec {
  TaskKind kind = TaskKind::patch_lookup;
  std::uint64_t seed = 0;
  std::size_t n_instances = 512;
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  std::size_t n_classes = 8;
  double feature_noise = 0.1;  // Gaussian noise added to one-hot patch features

  TaskVocab vocab() const { return {grid_rows * grid_cols, n_classes}; }
  void validate() const;
};

struct TaskInstance {
  MultimodalInput input;
  int answer = 0;  // class token
};

// Instances are stratified: answer classes are spread evenly over every
// distinct user prompt, so a predictor that ignores the image scores at
// most chance when n_instances is a multiple of the stratum size.
struct SyntheticTask {
  TaskSpec spec;
  std::vector<TaskInstance> instances;

  std::vector<int> candidates() const { return spec.vocab().class_tokens(); }
  double chance() const { return 1.0 / static_cast<double>(spec.n_classes); }
};

SyntheticTask generate_task(const TaskSpec& spec);

// Model configuration whose vocabulary and patch grid fit the task family.
ModelConfig task_model_config(const TaskSpec& spec, std::size_t n_layers, std::size_t n_heads, std::size_t d_model,
                              std::uint64_t seed);

// Candidate whose logit is largest (lowest token id on ties).
int predict_candidate(std::span<const double> logits_row, std::span<const int> candidates);

}  // namespace flowscope
