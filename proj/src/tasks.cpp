#include "flowscope/tasks.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "flowscope/errors.hpp"

namespace flowscope {

std::string_view task_kind_name(TaskKind kind) noexcept {
  switch (kind) {
    case TaskKind::patch_lookup: return "patch_lookup";
    case TaskKind::multi_hop: return "multi_hop";
    case TaskKind::global_describe: return "global_describe";
    case TaskKind::text_only: return "text_only";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  for (TaskKind k : all_task_kinds())
    if (task_kind_name(k) == name) return k;
  throw ContractError("unknown task kind '" + std::string(name) +
                      "' (patch_lookup | multi_hop | global_describe | text_only)");
}

const std::vector<TaskKind>& all_task_kinds() {
  static const std::vector<TaskKind> kinds = {TaskKind::patch_lookup, TaskKind::multi_hop, TaskKind::global_describe,
                                              TaskKind::text_only};
  return kinds;
}

std::vector<int> TaskVocab::class_tokens() const {
  std::vector<int> out;
  for (std::size_t c = 0; c < n_classes; ++c) out.push_back(class_token(c));
  return out;
}

void TaskSpec::validate() const {
  if (n_instances == 0) throw ContractError("task needs at least one instance");
  if (grid_rows == 0 || grid_cols == 0) throw ContractError("task grid must be non-empty");
  if (n_classes < 2) throw ContractError("task needs at least two classes");
  const std::size_t p = grid_rows * grid_cols;
  if (kind == TaskKind::multi_hop && n_classes + 1 >= p)
    throw ContractError("multi_hop needs more patches than classes + 1");
  if (kind == TaskKind::global_describe && p < 4) throw ContractError("global_describe needs at least 4 patches");
  if (feature_noise < 0.0) throw ContractError("feature noise must be >= 0");
}

SyntheticTask generate_task(const TaskSpec& spec) {
  spec.validate();
  const TaskVocab v = spec.vocab();
  const std::size_t P = v.n_positions, C = v.n_classes;
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(spec.kind)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> cls_d(0, C - 1);
  std::normal_distribution<double> noise(0.0, 1.0);

  SyntheticTask task;
  task.spec = spec;
  for (std::size_t i = 0; i < spec.n_instances; ++i) {
    std::vector<std::size_t> cls(P);
    for (auto& c : cls) c = cls_d(rng);
    TaskInstance inst;
    inst.input.system_tokens = {TaskVocab::kSystem0, TaskVocab::kSystem1};
    std::size_t answer = 0;
    switch (spec.kind) {
      case TaskKind::patch_lookup: {
        const std::size_t p = i % P;
        answer = (i / P) % C;
        cls[p] = answer;
        inst.input.user_tokens = {TaskVocab::kLookup, v.position(p)};
        break;
      }
      case TaskKind::multi_hop: {
        const std::size_t p = i % P;
        const std::size_t q = (p + cls[p] + 1) % P;
        answer = (i / P) % C;
        cls[q] = answer;
        inst.input.user_tokens = {TaskVocab::kHop, v.position(p)};
        break;
      }
      case TaskKind::global_describe: {
        answer = i % C;
        std::vector<std::size_t> order(P);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const std::size_t majority = P / 2 + 2;
        std::uniform_int_distribution<std::size_t> other_d(1, C - 1);
        for (std::size_t j = 0; j < P; ++j)
          cls[order[j]] = j < majority ? answer : (answer + other_d(rng)) % C;
        inst.input.user_tokens = {TaskVocab::kDescribe};
        break;
      }
      case TaskKind::text_only: {
        const std::size_t c = i % C;
        answer = (c + 1) % C;
        inst.input.user_tokens = {TaskVocab::kText, v.class_token(c)};
        break;
      }
    }
    inst.answer = v.class_token(answer);
    inst.input.image = PatchGrid::zeros(spec.grid_rows, spec.grid_cols, C);
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t ch = 0; ch < C; ++ch)
        inst.input.image.values[p * C + ch] = (ch == cls[p] ? 1.0 : 0.0) + spec.feature_noise * noise(rng);
    task.instances.push_back(std::move(inst));
  }
  return task;
}

ModelConfig task_model_config(const TaskSpec& spec, std::size_t n_layers, std::size_t n_heads, std::size_t d_model,
                              std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.d_model = d_model;
  c.d_ff = 2 * d_model;
  c.vocab_size = spec.vocab().size();
  c.patch_rows = spec.grid_rows;
  c.patch_cols = spec.grid_cols;
  c.patch_channels = spec.n_classes;
  c.max_seq = spec.grid_rows * spec.grid_cols + 8;
  c.seed = seed;
  c.validate();
  return c;
}

int predict_candidate(std::span<const double> logits_row, std::span<const int> candidates) {
  if (candidates.empty()) throw ContractError("predict_candidate: no candidates");
  int best = candidates.front();
  for (int c : candidates) {
    if (c < 0 || static_cast<std::size_t>(c) >= logits_row.size()) throw ContractError("candidate outside vocabulary");
    if (logits_row[c] > logits_row[best] || (logits_row[c] == logits_row[best] && c < best)) best = c;
  }
  return best;
}

}  // namespace flowscope
