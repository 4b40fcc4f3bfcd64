// One PASS/FAIL line per acceptance criterion; nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "flowscope/cam.hpp"
#include "flowscope/cli.hpp"
#include "flowscope/cliff.hpp"
#include "flowscope/model.hpp"
#include "flowscope/segment_attention.hpp"
#include "flowscope/tasks.hpp"
#include "flowscope/training.hpp"
#include "flowscope/truncation.hpp"
#include "support/finite_difference.hpp"
#include "support/fixtures.hpp"
#include "support/reference_model.hpp"

using namespace flowscope;
namespace ft = flowscope::testing;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// 1. Reverse-mode gradients of the answer logit with respect to captured
// features against central differences on an independent reference pass.
Outcome gradients_vs_finite_differences() {
  const auto t0 = Clock::now();
  const auto cfg = ft::small_config(2, 2, 32, 17);
  const Model model(cfg);
  std::mt19937_64 rng(2024);
  const auto in = ft::random_input(cfg, rng);
  const std::vector<int> cont = {5};
  const int answer[] = {3, 11};
  const std::size_t n_prompt = in.layout().prompt_length();
  const std::size_t rows[] = {n_prompt - 1, n_prompt};

  auto pass = model.forward(in, cont, {}, true);
  Var z = answer_logit(pass.logits, rows, answer);
  const auto grads = pass.tape->backward(z);
  const auto ref_rows = ft::reference_rows(in, cont);

  std::uniform_int_distribution<std::size_t> layer_d(1, cfg.n_layers), row_d(0, ref_rows.size() - 1),
      col_d(0, cfg.d_model - 1);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t l = layer_d(rng), r = row_d(rng), c = col_d(rng);
    const Tensor g = feature_gradients(grads, z, pass.record.layer(l).features);
    auto zf = [&](double delta) {
      const auto lg = ft::reference_logits(model, in, ref_rows, ft::RefPerturbation{l, r, c, delta});
      return lg[rows[0]][answer[0]] + lg[rows[1]][answer[1]];
    };
    const double fd = (zf(ft::kFdStep) - zf(-ft::kFdStep)) / (2 * ft::kFdStep);
    worst = std::max(worst, ft::relative_error(g.at(r, c), fd));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 10.0, "20 coordinates, max rel err " + fmt(worst) + ", " + fmt(secs) + " s"};
}

// 2. Segment shares sum to one and raw segment sums match a per-index loop.
Outcome segment_shares() {
  const auto cfg = ft::small_config(3, 2, 16, 5);
  const Model model(cfg);
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> len_d(1, 4);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab_size) - 1);
  double worst_total = 0.0, worst_sum = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = ft::random_input(cfg, rng, len_d(rng), len_d(rng));
    std::vector<int> cont(len_d(rng) - 1);
    for (int& t : cont) t = tok(rng);
    const auto res = model.forward(in, cont);
    const auto layout = in.layout();
    const auto q = answer_query_ids(layout, cont.size() + 1);
    const auto p = influence_rates(res.record, layout, q);
    for (std::size_t l = 1; l <= cfg.n_layers; ++l) {
      worst_total = std::max(worst_total, std::abs(p.layers[l - 1].total() - 1.0));
      for (auto qid : q) {
        double oracle[3] = {0, 0, 0};
        for (std::size_t j = 1; j <= layout.prompt_length(); ++j) {
          double v = 0;
          for (const auto& h : res.record.layer(l).heads) v += h.at(qid - 1, j - 1);
          v /= static_cast<double>(cfg.n_heads);
          oracle[j <= layout.n_system() ? 0 : j <= layout.n_system() + layout.n_image() ? 1 : 2] += v;
        }
        const auto s = segment_sums(res.record, layout, l, qid);
        worst_sum = std::max({worst_sum, std::abs(s.system - oracle[0]), std::abs(s.image - oracle[1]),
                              std::abs(s.user - oracle[2])});
      }
    }
  }
  return {worst_total <= 1e-9 && worst_sum <= 1e-12,
          "100 inputs, max |sum-1| " + fmt(worst_total) + ", max oracle diff " + fmt(worst_sum)};
}

// 3. Keeping every image token is bitwise identity; dropping all at layer 1
// is a text-only forward.
Outcome truncation_identity() {
  const auto cfg = ft::small_config(4, 2, 16, 31);
  const Model model(cfg);
  std::mt19937_64 rng(3);
  bool bitwise = true;
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto in = ft::random_input(cfg, rng);
    const auto base = model.forward(in);
    for (std::size_t l = 1; l <= cfg.n_layers; ++l) {
      const auto plan = make_plan(base.record, in.layout(), l, cfg.n_image_tokens());
      bitwise = bitwise && truncated_logits(model, base, plan).logits == base.logits_value();
      bitwise = bitwise && truncated_logits(model, base, plan, RemovalMode::mask).logits == base.logits_value();
    }
    const auto run = run_truncated(model, in, make_plan(base.record, in.layout(), 1, 0));
    const auto ref = ft::reference_logits(model, in, ft::reference_rows(in, {}, false));
    for (std::size_t r = 0; r < ref.size(); ++r)
      for (std::size_t c = 0; c < ref[r].size(); ++c)
        worst = std::max(worst, std::abs(run.prompt.logits.at(r, c) - ref[r][c]));
  }
  return {bitwise && worst <= 1e-9, std::string("k=N_img bitwise at every layer: ") + (bitwise ? "yes" : "no") +
                                        ", k=0 at layer 1 vs text-only max diff " + fmt(worst)};
}

// 4. Planted cliffs are recovered exactly.
Outcome planted_cliff() {
  const std::size_t n = 8;
  const std::size_t planted[] = {1, 3, n / 2, n};
  bool ok = true;
  double slowest = 0.0;
  std::string misses;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TaskSpec spec;
    spec.kind = TaskKind::patch_lookup;
    spec.seed = seed;
    spec.n_instances = 32;
    const auto task = generate_task(spec);
    for (std::size_t L : planted) {
      const auto t0 = Clock::now();
      const Model model = plant_cliff_model(task_model_config(spec, n, 2, 32, seed), L);
      SweepOptions opt;
      opt.metric = CliffMetric::logit_match;
      const auto rep = sweep_cliff(model, task, opt);
      const double secs = seconds_since(t0);
      slowest = std::max(slowest, secs);
      if (rep.cliff_layer != L || secs >= 60.0) {
        ok = false;
        misses += " seed " + std::to_string(seed) + " L " + std::to_string(L);
      }
    }
  }
  return {ok, "L in {1,3,4,8} x 10 seeds on 8 layers, slowest sweep " + fmt(slowest) + " s" +
                  (misses.empty() ? "" : ", misses:" + misses)};
}

// 5. A trained model on patch lookup: no-image accuracy is near chance and the
// detected cliff preserves baseline accuracy.
Outcome trained_patch_lookup() {
  TaskSpec spec;
  spec.kind = TaskKind::patch_lookup;
  spec.seed = 0;
  spec.n_instances = 1024;
  const auto train = generate_task(spec);
  spec.seed = 1;
  spec.n_instances = 512;
  const auto held_out = generate_task(spec);

  Model model(task_model_config(spec, 4, 2, 32, 0));
  TrainConfig tc;
  tc.epochs = 20;
  tc.learning_rate = 0.05;
  tc.batch_size = 16;
  train_sgd(model, train.instances, tc);

  SweepOptions opt;
  opt.epsilon = 0.01;
  const auto rep = sweep_cliff(model, held_out, opt);
  const double at_one = rep.layers.front().metric;
  const bool near_chance = std::abs(at_one - rep.chance) <= 0.05;
  const bool learned = rep.baseline >= 0.8;
  bool cliff_ok = false;
  std::string cliff = "none";
  if (rep.cliff_layer) {
    cliff = std::to_string(*rep.cliff_layer);
    cliff_ok = std::abs(rep.layers[*rep.cliff_layer - 1].metric - rep.baseline) <= 0.01;
  }
  return {near_chance && learned && cliff_ok,
          "512 held-out instances, baseline " + fmt(rep.baseline) + ", k=0 at layer 1 " + fmt(at_one) + " (chance " +
              fmt(rep.chance) + "), cliff layer " + cliff +
              (rep.cliff_layer ? " accuracy " + fmt(rep.layers[*rep.cliff_layer - 1].metric) : "")};
}

// 6. Noisy-ensemble CAM behaviour.
Outcome smooth_cam_properties() {
  const auto cfg = ft::small_config(2, 2, 16, 12);
  const Model model(cfg);
  std::mt19937_64 rng(9);
  const auto in = ft::random_input(cfg, rng);
  const std::vector<std::size_t> layers = {1, 2};

  // Variance across independent ensembles of the averaged raw map.
  const std::size_t Ns[] = {1, 4, 16, 64};
  const std::size_t R = 48;
  std::vector<double> variance;
  for (std::size_t N : Ns) {
    CamConfig c;
    c.noise_s = 0.5;
    c.n_samples = N;
    std::vector<std::vector<double>> means;
    for (std::size_t r = 0; r < R; ++r) {
      c.seed = 1000 + r * 7919 + N;
      means.push_back(smooth_cam_layers(model, in, c, layers).layers[0].mean_raw);
    }
    double v = 0.0;
    const std::size_t P = means[0].size();
    for (std::size_t p = 0; p < P; ++p) {
      double m = 0.0, m2 = 0.0;
      for (const auto& s : means) m += s[p];
      m /= R;
      for (const auto& s : means) m2 += (s[p] - m) * (s[p] - m);
      v += m2 / (R - 1);
    }
    variance.push_back(v / static_cast<double>(P));
  }
  bool monotone = true;
  for (std::size_t i = 1; i < variance.size(); ++i) monotone = monotone && variance[i] < variance[i - 1];

  // N = 1, no noise: the plain single-pass map.
  bool plain_equal = true;
  {
    CamConfig c;
    c.n_samples = 1;
    c.noise_s = 0.0;
    const auto run = smooth_cam_layers(model, in, c, layers);
    const std::vector<int> cont(run.answer.begin(), run.answer.end() - 1);
    auto pass = model.forward(in, cont, {}, true);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < run.answer.size(); ++i) rows.push_back(in.layout().prompt_length() - 1 + i);
    Var z = answer_logit(pass.logits, rows, run.answer);
    const auto grads = pass.tape->backward(z);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& cap = pass.record.layer(layers[i]);
      const Tensor g = feature_gradients(grads, z, cap.features);
      const auto raw = cam_map(cap.features.value(), g, in.layout(), cap.token_ids);
      const auto plain = normalize_max(to_grid(raw, cfg.patch_rows, cfg.patch_cols));
      plain_equal = plain_equal && run.layers[i].mean_raw == raw && run.layers[i].map.values == plain.values;
    }
  }

  // Normalised range over a spread of inputs and noise levels.
  bool range_ok = true;
  std::size_t zero_maps = 0, maps = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = ft::random_input(cfg, rng);
    CamConfig c;
    c.noise_s = 0.1 * trial;
    c.n_samples = 1 + static_cast<std::size_t>(trial % 4);
    c.seed = static_cast<std::uint64_t>(trial);
    for (const auto& res : smooth_cam_layers(model, x, c, layers).layers) {
      ++maps;
      const auto& v = res.map.values;
      const bool in_range = std::all_of(v.begin(), v.end(), [](double a) { return a >= 0.0 && a <= 1.0; });
      const double mx = *std::max_element(v.begin(), v.end());
      if (res.map.is_zero()) ++zero_maps;
      range_ok = range_ok && in_range && (res.map.is_zero() || mx == 1.0);
    }
  }

  std::string var_str;
  for (double v : variance) var_str += (var_str.empty() ? "" : " > ") + fmt(v);
  return {monotone && plain_equal && range_ok,
          "variance over N=1,4,16,64: " + var_str + (monotone ? "" : " (not monotone)") +
              "; N=1 s=0 equals plain map: " + (plain_equal ? "yes" : "no") + "; " + std::to_string(maps) +
              " normalised maps in [0,1] with max 1 (" + std::to_string(zero_maps) + " all-zero): " +
              (range_ok ? "yes" : "no")};
}

// 7. argtop against a full sort with lowest-index tie-break.
Outcome argtop_oracle() {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> len_d(0, 24), val_d(0, 6);
  std::size_t mismatches = 0, containment = 0, checks = 0;
  for (int trial = 0; trial < 100000; ++trial) {
    std::vector<double> s(static_cast<std::size_t>(len_d(rng)));
    for (double& v : s) v = val_d(rng) * 0.125;
    std::vector<std::size_t> order(s.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
    std::vector<std::size_t> prev;
    for (std::size_t k = 0; k <= s.size() + 1; ++k) {
      std::vector<std::size_t> want(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(k, s.size())));
      std::sort(want.begin(), want.end());
      const auto got = argtop(s, k);
      ++checks;
      if (got != want) ++mismatches;
      if (!std::includes(got.begin(), got.end(), prev.begin(), prev.end())) ++containment;
      prev = got;
    }
  }
  return {mismatches == 0 && containment == 0, "100000 vectors, " + std::to_string(checks) + " (vector, k) pairs, " +
                                                   std::to_string(mismatches) + " mismatches, " +
                                                   std::to_string(containment) + " containment violations"};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ull;
  return h;
}

std::map<std::string, std::uint64_t> tree_hashes(const fs::path& root) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = fnv1a(slurp(e.path()));
  return out;
}

// 8. Two analyze + cliff runs with one config give identical trees.
Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "flowscope_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "config.json") << R"({"init-model": {"seed": 4, "layers": 4},
    "analyze": {"noise_s": 0.2, "samples": 4, "cam_seed": 11},
    "cliff": {"seed": 4, "layers": 4, "planted": 3, "tasks": "patch_lookup,global_describe", "instances": 16}})";
  std::ostringstream sink;
  const std::string cfg = (root / "config.json").string();
  int codes = 0;
  codes |= cli::run({"init-model", "--config", cfg, "--out", (root / "model").string()}, sink, sink);
  const std::string model = (root / "model" / "model.fsck").string();
  for (const char* run : {"a", "b"}) {
    const std::string out = (root / run).string();
    codes |= cli::run({"analyze", "--config", cfg, "--model", model, "--out", out}, sink, sink);
    codes |= cli::run({"cliff", "--config", cfg, "--out", out}, sink, sink);
  }
  if (codes != 0) return {false, "a CLI run failed: " + sink.str()};
  const auto a = tree_hashes(root / "a"), b = tree_hashes(root / "b");
  fs::remove_all(root);
  return {a == b && !a.empty(), std::to_string(a.size()) + " files, trees " + (a == b ? "identical" : "differ")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 AD vs finite-difference feature gradients", gradients_vs_finite_differences},
      {"2 segment shares and sums vs brute force", segment_shares},
      {"3 truncation identities", truncation_identity},
      {"4 planted cliff recovery", planted_cliff},
      {"5 trained patch_lookup cliff", trained_patch_lookup},
      {"6 smooth-CAM variance, identity, range", smooth_cam_properties},
      {"7 argtop vs full-sort oracle", argtop_oracle},
      {"8 byte-identical analyze + cliff reruns", determinism},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << name << ": " << o.detail << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
