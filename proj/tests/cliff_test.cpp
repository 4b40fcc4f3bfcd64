#include "flowscope/cliff.hpp"

#include <gtest/gtest.h>

#include <map>
#include <nlohmann/json.hpp>
#include <random>

#include "flowscope/errors.hpp"
#include "flowscope/training.hpp"
#include "flowscope/truncation.hpp"

using namespace flowscope;

namespace {

TaskSpec lookup_spec(std::size_t n, std::uint64_t seed = 1) {
  TaskSpec s;
  s.kind = TaskKind::patch_lookup;
  s.n_instances = n;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Tasks, VocabularyLayout) {
  const TaskVocab v{16, 8};
  EXPECT_EQ(v.position(0), 6);
  EXPECT_EQ(v.class_token(0), 22);
  EXPECT_EQ(v.size(), 30u);
  EXPECT_EQ(task_model_config(lookup_spec(1), 4, 2, 16, 0).vocab_size, 30u);
}

TEST(Tasks, GroundTruthIsRecoverableFromTheImage) {
  for (TaskKind kind : all_task_kinds()) {
    TaskSpec s = lookup_spec(256);
    s.kind = kind;
    s.feature_noise = 0.0;
    const auto task = generate_task(s);
    const auto v = s.vocab();
    for (const auto& inst : task.instances) {
      auto cls = [&](std::size_t p) {
        for (std::size_t c = 0; c < v.n_classes; ++c)
          if (inst.input.image.values[p * v.n_classes + c] == 1.0) return c;
        return v.n_classes;
      };
      std::size_t expect = 0;
      const auto& u = inst.input.user_tokens;
      switch (kind) {
        case TaskKind::patch_lookup: expect = cls(static_cast<std::size_t>(u[1] - 6)); break;
        case TaskKind::multi_hop: {
          const auto p = static_cast<std::size_t>(u[1] - 6);
          expect = cls((p + cls(p) + 1) % v.n_positions);
          break;
        }
        case TaskKind::global_describe: {
          std::vector<int> count(v.n_classes, 0);
          for (std::size_t p = 0; p < v.n_positions; ++p) ++count[cls(p)];
          expect = static_cast<std::size_t>(std::max_element(count.begin(), count.end()) - count.begin());
          EXPECT_GE(count[expect], 10);
          break;
        }
        case TaskKind::text_only: expect = (static_cast<std::size_t>(u[1]) - 22 + 1) % v.n_classes; break;
      }
      EXPECT_EQ(inst.answer, v.class_token(expect)) << task_kind_name(kind);
    }
  }
}

TEST(Tasks, StratifiedAnswersPerPrompt) {
  const auto task = generate_task(lookup_spec(512));
  std::map<int, std::map<int, int>> counts;
  for (const auto& inst : task.instances) ++counts[inst.input.user_tokens[1]][inst.answer];
  EXPECT_EQ(counts.size(), 16u);
  for (const auto& [prompt, answers] : counts) {
    EXPECT_EQ(answers.size(), 8u);
    for (const auto& [a, n] : answers) EXPECT_EQ(n, 4);
  }
}

TEST(Tasks, DeterministicAndSeedSensitive) {
  const auto a = generate_task(lookup_spec(20, 5));
  const auto b = generate_task(lookup_spec(20, 5));
  const auto c = generate_task(lookup_spec(20, 6));
  EXPECT_EQ(a.instances[3].input.image.values, b.instances[3].input.image.values);
  EXPECT_NE(a.instances[3].input.image.values, c.instances[3].input.image.values);
  EXPECT_THROW(generate_task(lookup_spec(0)), ContractError);
  EXPECT_THROW(parse_task_kind("captioning"), ContractError);
}

TEST(Tasks, PredictCandidate) {
  const std::vector<double> row = {9.0, 1.0, 3.0, 3.0};
  const std::vector<int> cand = {1, 2, 3};
  EXPECT_EQ(predict_candidate(row, cand), 2);
}

TEST(Training, LossDecreasesAndIsDeterministic) {
  const auto task = generate_task(lookup_spec(64));
  const auto cfg = task_model_config(task.spec, 2, 2, 16, 3);
  Model a(cfg), b(cfg);
  TrainConfig tc;
  tc.epochs = 3;
  tc.learning_rate = 0.05;
  tc.batch_size = 8;
  const double before = mean_loss(a, task.instances);
  const auto ra = train_sgd(a, task.instances, tc);
  const auto rb = train_sgd(b, task.instances, tc);
  EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
  EXPECT_LT(mean_loss(a, task.instances), before);
  std::vector<Tensor> wa, wb;
  a.weights().for_each([&](const std::string&, const Tensor& t) { wa.push_back(t); });
  b.weights().for_each([&](const std::string&, const Tensor& t) { wb.push_back(t); });
  EXPECT_EQ(wa, wb);
  tc.learning_rate = 0.0;
  EXPECT_THROW(train_sgd(a, task.instances, tc), ContractError);
}

TEST(Training, InterleaveAlternatesTasks) {
  TaskSpec t = lookup_spec(2);
  t.kind = TaskKind::text_only;
  const std::vector<SyntheticTask> tasks = {generate_task(lookup_spec(3)), generate_task(t)};
  const auto mix = interleave(tasks);
  ASSERT_EQ(mix.size(), 5u);
  EXPECT_EQ(mix[1].input.user_tokens[0], TaskVocab::kText);
  EXPECT_EQ(mix[4].input.user_tokens[0], TaskVocab::kLookup);
}

TEST(Plant, SentinelAndFullBlocking) {
  const auto task = generate_task(lookup_spec(4));
  const auto cfg = task_model_config(task.spec, 3, 2, 16, 9);
  const Model base(cfg);
  const Model same = plant_cliff_model(base, 4);
  const auto& in = task.instances[0].input;
  EXPECT_EQ(same.forward(in).logits_value(), base.forward(in).logits_value());
  EXPECT_THROW(plant_cliff_model(base, 5), ContractError);
  EXPECT_THROW(plant_cliff_model(base, 0), ContractError);

  // L = 1: image never reaches any text row.
  const Model blocked = plant_cliff_model(base, 1);
  auto other = in;
  for (double& v : other.image.values) v += 0.5;
  const auto a = blocked.forward(in).logits_value();
  const auto b = blocked.forward(other).logits_value();
  for (std::size_t c = 0; c < a.cols(); ++c) EXPECT_EQ(a.at(a.rows() - 1, c), b.at(b.rows() - 1, c));
}

TEST(Plant, PerturbationProbe) {
  const auto task = generate_task(lookup_spec(4));
  const auto cfg = task_model_config(task.spec, 4, 2, 16, 9);
  const Model base(cfg);
  auto in = task.instances[1].input;
  auto other = in;
  other.image.values[0] += 1.0;
  for (std::size_t L = 1; L <= 5; ++L) {
    const Model m = plant_cliff_model(base, L);
    const auto a = m.forward(in).logits_value();
    const auto b = m.forward(other).logits_value();
    const bool changed = max_abs_diff(a, b) > 0.0;
    // Rows before the image never change; the last row changes iff L > 1.
    double last = 0;
    for (std::size_t c = 0; c < a.cols(); ++c) last = std::max(last, std::abs(a.at(a.rows() - 1, c) - b.at(b.rows() - 1, c)));
    EXPECT_EQ(last > 0.0, L > 1) << "L=" << L;
    EXPECT_TRUE(changed);  // the perturbed image row itself always changes
  }
}

TEST(Sweep, PlantedCliffIsExact) {
  const auto task = generate_task(lookup_spec(24, 3));
  const auto cfg = task_model_config(task.spec, 6, 2, 16, 11);
  const Model base(cfg);
  SweepOptions opt;
  opt.metric = CliffMetric::logit_match;
  for (std::size_t L : {1u, 2u, 4u, 6u}) {
    const auto rep = sweep_cliff(plant_cliff_model(base, L), task, opt);
    EXPECT_EQ(rep.baseline, 1.0);
    ASSERT_TRUE(rep.cliff_layer.has_value());
    EXPECT_EQ(*rep.cliff_layer, L);
    for (const auto& l : rep.layers) {
      if (l.layer >= L) {
        EXPECT_EQ(l.metric, 1.0);
        EXPECT_EQ(l.image_share, 0.0);
      }
    }
    EXPECT_EQ(rep.attention_flag_layer, L);
  }
}

TEST(Sweep, EpsilonSaturationAndErrors) {
  const auto task = generate_task(lookup_spec(16, 3));
  const Model m(task_model_config(task.spec, 3, 2, 16, 11));
  SweepOptions opt;
  opt.epsilon = 1.0;
  EXPECT_EQ(sweep_cliff(m, task, opt).cliff_layer, 1u);
  opt.epsilon = -1.0;
  EXPECT_THROW(sweep_cliff(m, task, opt), ContractError);
  SyntheticTask empty = task;
  empty.instances.clear();
  EXPECT_THROW(sweep_cliff(m, empty), ContractError);
}

TEST(Sweep, DetectCliffPicksFirstWithinEpsilon) {
  const std::vector<CliffLayer> layers = {{1, 0.1, 0}, {2, 0.5, 0}, {3, 0.89, 0}, {4, 0.9, 0}};
  EXPECT_EQ(detect_cliff(0.9, layers, 0.0), 4u);
  EXPECT_EQ(detect_cliff(0.9, layers, 0.02), 3u);
  EXPECT_FALSE(detect_cliff(1.0, layers, 0.0).has_value());
}

TEST(Report, JsonRecordsAndTaxonomyOrdering) {
  const auto task = generate_task(lookup_spec(8, 3));
  const Model base(task_model_config(task.spec, 6, 2, 16, 11));
  SweepOptions opt;
  opt.metric = CliffMetric::logit_match;
  opt.label = "planted L=5";
  const auto r5 = sweep_cliff(plant_cliff_model(base, 5), task, opt);
  opt.label = "planted L=2";
  const auto r2 = sweep_cliff(plant_cliff_model(base, 2), task, opt);

  const auto j = nlohmann::json::parse(r5.to_json());
  EXPECT_EQ(j["layers"].size(), 6u);
  EXPECT_EQ(j["layers"][4]["layer"], 5);
  EXPECT_EQ(j["summary"]["cliff_layer"], 5);

  const std::vector<CliffReport> reps = {r5, r2};
  const auto t = nlohmann::json::parse(taxonomy_report(reps));
  EXPECT_EQ(t["rows"][0]["cliff_layer"], 2);
  EXPECT_EQ(t["rows"][1]["cliff_layer"], 5);
  bool saw_12 = false;
  for (const auto& r : t["reference"]) {
    EXPECT_EQ(r["source"], "published");
    if (r["benchmark"] == "ScienceQA") saw_12 = r["value"] == "12";
  }
  EXPECT_TRUE(saw_12);
  EXPECT_THROW(taxonomy_report(std::span(reps).first(1)), ContractError);
}
