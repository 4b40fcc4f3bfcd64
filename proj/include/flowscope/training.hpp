#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "flowscope/model.hpp"
#include "flowscope/tasks.hpp"

namespace flowscope {

struct TrainConfig {
  std::size_t epochs = 60;
  double learning_rate = 0.05;  // fixed step
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;       // shuffling order

  void validate() const;
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean cross-entropy per instance
};

// Plain minibatch SGD on the cross-entropy of each instance's answer token at
// the last prompt row. Deterministic for a fixed config.
TrainReport train_sgd(Model& model, std::span<const TaskInstance> data, const TrainConfig& cfg);

// Mean cross-entropy over instances, no parameter update.
double mean_loss(const Model& model, std::span<const TaskInstance> data);

// Interleaves several tasks instance by instance.
std::vector<TaskInstance> interleave(std::span<const SyntheticTask> tasks);

}  // namespace flowscope
