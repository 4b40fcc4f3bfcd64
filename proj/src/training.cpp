#include "flowscope/training.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "flowscope/errors.hpp"

namespace flowscope {
namespace {

// Summed answer cross-entropy of a batch on a recording tape.
Var batch_loss(const Model& model, Tape& tape, const BoundWeights& w, std::span<const TaskInstance> data,
               std::span<const std::size_t> order) {
  ForwardOptions opts;
  opts.capture = false;
  Var total;
  for (std::size_t idx : order) {
    const auto& inst = data[idx];
    auto seq = model.embed(tape, w, inst.input);
    auto logits = model.forward_with_capture(tape, w, seq.hidden, seq.rows, opts).first;
    const std::size_t row[] = {seq.rows.size() - 1};
    const std::size_t target[] = {static_cast<std::size_t>(inst.answer)};
    Var loss = cross_entropy_rows(logits, row, target);
    total = total.valid() ? add(total, loss) : loss;
  }
  return total;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ContractError("epochs must be at least 1");
  if (!(learning_rate > 0.0)) throw ContractError("learning rate must be positive");
  if (batch_size == 0) throw ContractError("batch size must be at least 1");
}

TrainReport train_sgd(Model& model, std::span<const TaskInstance> data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ContractError("train_sgd: empty training set");
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      Tape tape(true);
      const BoundWeights w = model.bind(tape, true);
      Var loss = batch_loss(model, tape, w, data, std::span(order).subspan(start, n));
      epoch_loss += loss.value().item();
      const Gradients grads = tape.backward(scale(loss, 1.0 / static_cast<double>(n)));

      std::vector<Var> vars;
      w.for_each([&](const std::string&, const Var& v) { vars.push_back(v); });
      std::size_t k = 0;
      model.mutable_weights().for_each([&](const std::string&, Tensor& t) {
        const Tensor g = grads.of(vars[k++]);
        auto dst = t.data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= cfg.learning_rate * src[i];
      });
    }
    report.epoch_loss.push_back(epoch_loss / static_cast<double>(data.size()));
  }
  return report;
}

double mean_loss(const Model& model, std::span<const TaskInstance> data) {
  if (data.empty()) throw ContractError("mean_loss: empty set");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Tape tape(false);
  const BoundWeights w = model.bind(tape);
  return batch_loss(model, tape, w, data, order).value().item() / static_cast<double>(data.size());
}

std::vector<TaskInstance> interleave(std::span<const SyntheticTask> tasks) {
  std::vector<TaskInstance> out;
  std::size_t longest = 0;
  for (const auto& t : tasks) longest = std::max(longest, t.instances.size());
  for (std::size_t i = 0; i < longest; ++i)
    for (const auto& t : tasks)
      if (i < t.instances.size()) out.push_back(t.instances[i]);
  return out;
}

}  // namespace flowscope
