#include "flowscope/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <sstream>

#include "flowscope/cam.hpp"
#include "flowscope/checkpoint.hpp"
#include "flowscope/cliff.hpp"
#include "flowscope/errors.hpp"
#include "flowscope/segment_attention.hpp"
#include "flowscope/tasks.hpp"
#include "flowscope/training.hpp"
#include "flowscope/truncation.hpp"

namespace flowscope::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

const std::vector<std::string> kCommands = {"init-model", "train-toy", "analyze", "truncate", "cliff"};

// ---------------------------------------------------------------- helpers

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ForwardOptions no_capture() {
  ForwardOptions o;
  o.capture = false;
  return o;
}

fs::path ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
  return p;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

json config_value(const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  const bool numeric = !text.empty() && text.find_first_not_of("0123456789+-.eE") == std::string::npos;
  if (numeric) {
    try {
      return json::parse(text);
    } catch (const json::exception&) {
    }
  }
  return text;
}

// Turns the JSON config into flag tokens for `command`. Top-level scalars
// apply to the command; objects keyed by a command name are sections.
void config_tokens(const nlohmann::json& j, const std::string& command, std::vector<std::string>& out) {
  if (!j.is_object()) throw UsageError("config file must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (value.is_object()) {
      if (key == command) config_tokens(value, command, out);
      else if (std::find(kCommands.begin(), kCommands.end(), key) == kCommands.end())
        throw UsageError("config section '" + key + "' is not a subcommand");
      continue;
    }
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    if (name == "config") throw UsageError("config files cannot include other config files");
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back("--" + name);
      continue;
    }
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_array()) {
      for (const auto& v : value) {
        if (!text.empty()) text += ",";
        text += v.is_string() ? v.get<std::string>() : v.dump();
      }
    } else if (value.is_null()) {
      continue;
    } else {
      text = value.dump();
    }
    out.push_back("--" + name);
    out.push_back(text);
  }
}

// ---------------------------------------------------------------- option groups

struct ModelOpts {
  std::size_t layers = 4, heads = 2, d_model = 32, d_ff = 0, vocab = 30, grid_rows = 4, grid_cols = 4, channels = 8,
              max_seq = 24, planted = 0;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--layers", layers, "decoder layers");
    app->add_option("--heads", heads, "attention heads");
    app->add_option("--d-model", d_model, "hidden width");
    app->add_option("--d-ff", d_ff, "MLP width (0 = 4 * d-model)");
    app->add_option("--vocab", vocab, "vocabulary size");
    app->add_option("--grid-rows", grid_rows, "patch grid rows");
    app->add_option("--grid-cols", grid_cols, "patch grid columns");
    app->add_option("--channels", channels, "features per patch");
    app->add_option("--max-seq", max_seq, "maximum sequence length");
    app->add_option("--seed", seed, "initialisation seed");
    app->add_option("--planted", planted, "plant an image cutoff at this layer (0 = none)");
  }

  ModelConfig config() const {
    ModelConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_model = d_model;
    c.d_ff = d_ff;
    c.vocab_size = vocab;
    c.patch_rows = grid_rows;
    c.patch_cols = grid_cols;
    c.patch_channels = channels;
    c.max_seq = max_seq;
    c.seed = seed;
    try {
      c.validate();
    } catch (const ContractError& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

Model with_planted(Model m, std::size_t planted) {
  if (planted == 0) return m;
  if (planted > m.config().n_layers + 1)
    throw UsageError("--planted " + std::to_string(planted) + " outside 1.." + std::to_string(m.config().n_layers + 1));
  return plant_cliff_model(m, planted);
}

struct InputOpts {
  std::string input_file;
  std::string task = "patch_lookup";
  std::size_t instance = 0;
  std::uint64_t task_seed = 0;
  double feature_noise = 0.1;

  void add(CLI::App* app) {
    app->add_option("--input", input_file, "JSON input (system_tokens, user_tokens, image)");
    app->add_option("--task", task, "synthetic task supplying the input when --input is absent");
    app->add_option("--instance", instance, "instance index within the synthetic task");
    app->add_option("--task-seed", task_seed, "synthetic task seed");
    app->add_option("--feature-noise", feature_noise, "patch feature noise of synthetic tasks");
  }
};

TaskSpec task_spec_for(const ModelConfig& c, TaskKind kind, std::uint64_t seed, std::size_t n, double noise) {
  TaskSpec s;
  s.kind = kind;
  s.seed = seed;
  s.n_instances = n;
  s.grid_rows = c.patch_rows;
  s.grid_cols = c.patch_cols;
  s.n_classes = c.patch_channels;
  s.feature_noise = noise;
  try {
    s.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  if (s.vocab().size() > c.vocab_size)
    throw UsageError("model vocabulary (" + std::to_string(c.vocab_size) + ") is too small for synthetic tasks on a " +
                     std::to_string(c.patch_rows) + "x" + std::to_string(c.patch_cols) + " grid with " +
                     std::to_string(c.patch_channels) + " classes (needs " + std::to_string(s.vocab().size()) + ")");
  if (s.grid_rows * s.grid_cols + 4 > c.max_seq) throw UsageError("model max_seq too small for synthetic tasks");
  return s;
}

TaskKind task_kind(const std::string& name) {
  try {
    return parse_task_kind(name);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
}

MultimodalInput load_input(const InputOpts& o, const Model& model) {
  if (!o.input_file.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text(o.input_file));
      MultimodalInput in;
      in.system_tokens = j.at("system_tokens").get<std::vector<int>>();
      in.user_tokens = j.at("user_tokens").get<std::vector<int>>();
      const auto& img = j.at("image");
      in.image = PatchGrid::zeros(img.at("rows").get<std::size_t>(), img.at("cols").get<std::size_t>(),
                                  img.at("channels").get<std::size_t>());
      in.image.values = img.at("values").get<std::vector<double>>();
      if (in.image.values.size() != in.image.rows * in.image.cols * in.image.channels)
        throw IoError("input image values do not match rows * cols * channels");
      model.validate_input(in, 0);
      return in;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("bad input file " + o.input_file + ": " + e.what());
    }
  }
  const auto spec = task_spec_for(model.config(), task_kind(o.task), o.task_seed, o.instance + 1, o.feature_noise);
  return generate_task(spec).instances.back().input;
}

Model load_model(const std::string& path) {
  if (path.empty()) throw UsageError("--model is required");
  return load_checkpoint(fs::path(path));
}

// ---------------------------------------------------------------- commands

struct Context {
  fs::path out;
  std::ostream& stdout_;
};

int cmd_init_model(const ModelOpts& mo, const std::string& model_path, Context& ctx) {
  const Model model = with_planted(Model(mo.config()), mo.planted);
  const fs::path path = model_path.empty() ? ensure_dir(ctx.out) / "model.fsck" : fs::path(model_path);
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  save_checkpoint(model, path);
  ctx.stdout_ << "parameters: " << model.parameter_count() << "\n";
  ctx.stdout_ << "checkpoint: " << path.string() << "\n";
  return kExitOk;
}

struct TrainOpts {
  std::string tasks = "patch_lookup";
  std::size_t instances = 512;
  std::uint64_t task_seed = 0;
  double feature_noise = 0.1;
  std::size_t epochs = 20;
  double lr = 0.05;
  std::size_t batch = 16;
  std::uint64_t train_seed = 0;
  std::string from;
};

int cmd_train(const ModelOpts& mo, const TrainOpts& to, const std::string& model_path, Context& ctx) {
  std::vector<TaskKind> kinds;
  for (const auto& t : split_list(to.tasks)) kinds.push_back(task_kind(t));
  if (kinds.empty()) throw UsageError("--tasks names no task");

  std::optional<Model> model;
  if (!to.from.empty()) model.emplace(load_checkpoint(fs::path(to.from)));
  else model.emplace(mo.config());
  const ModelConfig& cfg = model->config();

  std::vector<SyntheticTask> train, eval;
  for (TaskKind k : kinds) {
    train.push_back(generate_task(task_spec_for(cfg, k, to.task_seed, to.instances, to.feature_noise)));
    eval.push_back(generate_task(task_spec_for(cfg, k, to.task_seed + 1, to.instances, to.feature_noise)));
  }
  const auto data = interleave(train);
  TrainConfig tc;
  tc.epochs = to.epochs;
  tc.learning_rate = to.lr;
  tc.batch_size = to.batch;
  tc.seed = to.train_seed;
  try {
    tc.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  const auto report = train_sgd(*model, data, tc);

  ensure_dir(ctx.out);
  std::string log = "epoch,loss\n";
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) log += std::to_string(e + 1) + "," + fmt(report.epoch_loss[e]) + "\n";
  write_text(ctx.out / "train_log.csv", log);

  json summary;
  summary["final_loss"] = report.epoch_loss.back();
  auto& acc = summary["held_out_accuracy"];
  for (const auto& t : eval) {
    std::size_t hits = 0;
    const auto cand = t.candidates();
    for (const auto& inst : t.instances) {
      const auto r = model->forward(inst.input, {}, no_capture());
      const Tensor& lg = r.logits_value();
      hits += predict_candidate(lg.row(lg.rows() - 1), cand) == inst.answer ? 1 : 0;
    }
    const double a = static_cast<double>(hits) / static_cast<double>(t.instances.size());
    acc[std::string(task_kind_name(t.spec.kind))] = a;
    ctx.stdout_ << task_kind_name(t.spec.kind) << " held-out accuracy " << fmt(a) << "\n";
  }
  write_text(ctx.out / "train_summary.json", summary.dump(2) + "\n");

  const fs::path path = model_path.empty() ? ctx.out / "model.fsck" : fs::path(model_path);
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  save_checkpoint(*model, path);
  ctx.stdout_ << "final loss " << fmt(report.epoch_loss.back()) << "\ncheckpoint: " << path.string() << "\n";
  return kExitOk;
}

struct AnalyzeOpts {
  double noise_s = 0.0;
  std::size_t samples = 1;
  std::uint64_t cam_seed = 0;
  std::string hook = "post_attention_norm";
  std::size_t max_new = 1;
  std::string query = "answer_average";
  double threshold = kImageShareThreshold;
};

int cmd_analyze(const Model& model, const MultimodalInput& input, const AnalyzeOpts& ao, Context& ctx) {
  CamConfig cc;
  cc.noise_s = ao.noise_s;
  cc.n_samples = ao.samples;
  cc.seed = ao.cam_seed;
  cc.max_new = ao.max_new;
  try {
    cc.hook = parse_hook_point(ao.hook);
    cc.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  QueryPolicy policy;
  if (ao.query == "answer_average") policy = QueryPolicy::answer_average;
  else if (ao.query == "first_answer") policy = QueryPolicy::first_answer;
  else throw UsageError("--query must be answer_average or first_answer");

  const std::size_t n_layers = model.config().n_layers;
  std::vector<std::size_t> layers(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) layers[l] = l + 1;
  const auto cam = smooth_cam_layers(model, input, cc, layers);

  const std::vector<int> continuation(cam.answer.begin(), cam.answer.end() - 1);
  const auto pass = model.forward(input, continuation);
  const auto layout = pass.sequence.layout;
  const auto queries = answer_query_ids(layout, cam.answer.size(), policy);
  const auto profile = influence_rates(pass.record, layout, queries);
  const auto per_head = influence_rates_per_head(pass.record, layout, queries);
  const auto report = profile_report(profile, ao.threshold);

  const fs::path pdir = ensure_dir(ctx.out / "profile");
  write_text(pdir / "influence.csv", report.csv);
  report.matrix.write(pdir / "influence.pgm");
  std::string heads = "layer,head,lambda_sys,lambda_img,lambda_user\n";
  for (std::size_t l = 0; l < n_layers; ++l)
    for (std::size_t h = 0; h < per_head.size(); ++h) {
      const auto& s = per_head[h].layers[l];
      heads += std::to_string(l + 1) + "," + std::to_string(h) + "," + fmt(s.system) + "," + fmt(s.image) + "," +
               fmt(s.user) + "\n";
    }
  write_text(pdir / "per_head.csv", heads);

  const fs::path cdir = ensure_dir(ctx.out / "cam");
  json summary;
  summary["answer"] = cam.answer;
  summary["layout"] = {{"system", layout.n_system()}, {"image", layout.n_image()}, {"user", layout.n_user()}};
  summary["query_rows"] = queries;
  summary["flagged_layer"] = report.flagged_layer ? json(*report.flagged_layer) : json(nullptr);
  auto& per_layer = summary["layers"] = json::array();
  for (const auto& res : cam.layers) {
    char name[32];
    std::snprintf(name, sizeof name, "layer_%02zu", res.layer);
    overlay_export(res.map, input.image, cdir / (std::string(name) + ".ppm"));
    write_text(cdir / (std::string(name) + ".csv"), saliency_csv(res.map));
    const auto& s = profile.layers[res.layer - 1];
    double raw_max = 0.0;
    for (double v : res.mean_raw) raw_max = std::max(raw_max, v);
    per_layer.push_back({{"layer", res.layer},
                         {"lambda_sys", s.system},
                         {"lambda_img", s.image},
                         {"lambda_user", s.user},
                         {"cam_raw_max", raw_max},
                         {"cam_peak_patch", static_cast<std::size_t>(
                                                std::max_element(res.map.values.begin(), res.map.values.end()) -
                                                res.map.values.begin())}});
  }
  write_text(ctx.out / "summary.json", summary.dump(2) + "\n");

  ctx.stdout_ << "answer:";
  for (int t : cam.answer) ctx.stdout_ << " " << t;
  ctx.stdout_ << "\n";
  for (std::size_t l = 0; l < n_layers; ++l) ctx.stdout_ << "layer " << l + 1 << " lambda_img " << fmt(profile.layers[l].image) << "\n";
  if (report.flagged_layer) ctx.stdout_ << "image share below threshold from layer " << *report.flagged_layer << "\n";
  return kExitOk;
}

struct TruncateOpts {
  std::size_t layer = 1;
  std::size_t k = 0;
  std::string score_row = "last_image";
  std::string mode = "remove";
  std::size_t max_new = 1;
  bool sweep = false;
  std::size_t eval_instances = 0;
};

struct TruncationOutcome {
  TruncationPlan plan;
  CostEstimate cost;
  std::vector<int> answer;
  double max_logit_delta = 0.0;
};

TruncationOutcome truncate_once(const Model& model, const MultimodalInput& input, std::size_t layer, std::size_t k,
                                ScoreRowMode score, RemovalMode mode, std::size_t max_new, const Tensor& base_logits) {
  TruncationOutcome o;
  o.plan = plan_truncation(model, input, layer, k, score);
  const auto run = run_truncated(model, input, o.plan, max_new, mode);
  o.answer = run.answer;
  o.cost = attention_cost(input.layout(), o.plan, model.config().n_layers);
  const auto row = run.prompt.logits.row(run.prompt.logits.rows() - 1);
  const auto base = base_logits.row(base_logits.rows() - 1);
  for (std::size_t c = 0; c < row.size(); ++c) o.max_logit_delta = std::max(o.max_logit_delta, std::abs(row[c] - base[c]));
  return o;
}

int cmd_truncate(const Model& model, const MultimodalInput& input, const InputOpts& io, const TruncateOpts& to,
                 Context& ctx) {
  const std::size_t n_layers = model.config().n_layers;
  const TokenLayout layout = input.layout();
  if (to.layer == 0 || to.layer > n_layers)
    throw UsageError("--layer " + std::to_string(to.layer) + " outside 1.." + std::to_string(n_layers));
  if (to.k > layout.n_image())
    throw UsageError("--k " + std::to_string(to.k) + " exceeds the " + std::to_string(layout.n_image()) + " image tokens");
  if (to.max_new == 0) throw UsageError("--max-new must be at least 1");
  ScoreRowMode score;
  try {
    score = parse_score_row_mode(to.score_row);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  RemovalMode mode;
  if (to.mode == "remove") mode = RemovalMode::remove;
  else if (to.mode == "mask") mode = RemovalMode::mask;
  else throw UsageError("--mode must be remove or mask");

  const auto baseline_answer = model.greedy_decode(input, to.max_new);
  const Tensor base_logits = model.forward(input, {}, no_capture()).logits_value();
  const auto o = truncate_once(model, input, to.layer, to.k, score, mode, to.max_new, base_logits);

  const fs::path dir = ensure_dir(ctx.out / "truncation");
  write_text(dir / "plan.json", o.plan.to_json());
  json rep;
  rep["layer"] = to.layer;
  rep["k"] = to.k;
  rep["mode"] = to.mode;
  rep["baseline_length"] = o.cost.baseline_length;
  rep["kept_length"] = o.cost.kept_length;
  rep["attention_cost_ratio_per_layer"] = o.cost.per_layer_ratio;
  rep["attention_cost_savings"] = o.cost.savings();
  rep["baseline_answer"] = baseline_answer;
  rep["truncated_answer"] = o.answer;
  rep["answer_match"] = baseline_answer == o.answer;
  rep["max_logit_delta"] = o.max_logit_delta;

  if (to.eval_instances > 0) {
    const auto task = generate_task(
        task_spec_for(model.config(), task_kind(io.task), io.task_seed, to.eval_instances, io.feature_noise));
    const auto cand = task.candidates();
    std::size_t base_hits = 0, trunc_hits = 0;
    for (const auto& inst : task.instances) {
      const auto pass = model.forward(inst.input);
      const Tensor& lg = pass.logits_value();
      base_hits += predict_candidate(lg.row(lg.rows() - 1), cand) == inst.answer ? 1 : 0;
      const auto plan = make_plan(pass.record, pass.sequence.layout, to.layer, to.k, score);
      const auto tl = truncated_logits(model, pass, plan, mode);
      trunc_hits += predict_candidate(tl.logits.row(tl.logits.rows() - 1), cand) == inst.answer ? 1 : 0;
    }
    const double n = static_cast<double>(task.instances.size());
    rep["task"] = io.task;
    rep["instances"] = task.instances.size();
    rep["baseline_accuracy"] = static_cast<double>(base_hits) / n;
    rep["truncated_accuracy"] = static_cast<double>(trunc_hits) / n;
    rep["accuracy_delta"] = static_cast<double>(trunc_hits) / n - static_cast<double>(base_hits) / n;
    rep["chance"] = task.chance();
  }
  write_text(dir / "report.json", rep.dump(2) + "\n");

  if (to.sweep) {
    std::string csv = "layer,k,kept_length,answer_match,max_logit_delta,attention_cost_ratio\n";
    for (std::size_t l = 1; l <= n_layers; ++l) {
      const auto s = truncate_once(model, input, l, to.k, score, mode, to.max_new, base_logits);
      csv += std::to_string(l) + "," + std::to_string(to.k) + "," + std::to_string(s.cost.kept_length) + "," +
             (s.answer == baseline_answer ? "1" : "0") + "," + fmt(s.max_logit_delta) + "," +
             fmt(s.cost.truncated_cost / s.cost.baseline_cost) + "\n";
    }
    write_text(dir / "sweep.csv", csv);
  }

  ctx.stdout_ << "kept length " << o.cost.kept_length << " of " << o.cost.baseline_length << "\n";
  ctx.stdout_ << "attention cost ratio per remaining layer " << fmt(o.cost.per_layer_ratio) << ", savings "
              << fmt(o.cost.savings()) << "\n";
  ctx.stdout_ << "answer " << (baseline_answer == o.answer ? "unchanged" : "changed") << ", max logit delta "
              << fmt(o.max_logit_delta) << "\n";
  return kExitOk;
}

struct CliffOpts {
  std::string tasks;
  std::size_t instances = 64;
  std::uint64_t task_seed = 0;
  double feature_noise = 0.1;
  double epsilon = 0.0;
  std::string metric = "auto";
  double threshold = kImageShareThreshold;
};

int cmd_cliff(const Model& model, bool planted, const CliffOpts& co, Context& ctx) {
  const auto names = split_list(co.tasks);
  if (names.empty()) throw UsageError("--tasks is required (comma-separated task kinds)");
  if (!(co.epsilon >= 0.0)) throw UsageError("--epsilon must be >= 0");
  if (co.instances == 0) throw UsageError("--instances must be at least 1");
  SweepOptions so;
  so.epsilon = co.epsilon;
  so.share_threshold = co.threshold;
  if (co.metric == "auto") so.metric = planted ? CliffMetric::logit_match : CliffMetric::accuracy;
  else {
    try {
      so.metric = parse_cliff_metric(co.metric);
    } catch (const ContractError& e) {
      throw UsageError(e.what());
    }
  }

  const fs::path dir = ensure_dir(ctx.out / "cliff");
  std::vector<CliffReport> reports;
  std::string summary = "label,task,metric,baseline,cliff_layer,attention_flag_layer\n";
  for (const auto& name : names) {
    const auto task =
        generate_task(task_spec_for(model.config(), task_kind(name), co.task_seed, co.instances, co.feature_noise));
    so.label = name;
    auto rep = sweep_cliff(model, task, so);
    write_text(dir / (name + ".json"), rep.to_json());
    auto opt = [](const std::optional<std::size_t>& l) { return l ? std::to_string(*l) : std::string("none"); };
    summary += rep.label + "," + name + "," + std::string(cliff_metric_name(rep.metric)) + "," + fmt(rep.baseline) +
               "," + opt(rep.cliff_layer) + "," + opt(rep.attention_flag_layer) + "\n";
    ctx.stdout_ << name << ": cliff layer " << opt(rep.cliff_layer) << ", attention flag layer "
                << opt(rep.attention_flag_layer) << ", baseline " << fmt(rep.baseline) << "\n";
    reports.push_back(std::move(rep));
  }
  write_text(dir / "summary.csv", summary);
  if (reports.size() >= 2) write_text(dir / "taxonomy.json", taxonomy_report(reports));
  return kExitOk;
}

// Resolved values of every option a subcommand defines, minus locations.
json resolved_config(const CLI::App* sub) {
  json j;
  j["command"] = sub->get_name();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string& name = opt->get_single_name();
    if (name == "help" || name == "config" || name == "out") continue;
    if (opt->get_expected_min() == 0) {
      j[name] = opt->count() > 0;
      continue;
    }
    const std::string v = opt->count() > 0 ? opt->results().back() : opt->get_default_str();
    j[name] = config_value(v);
  }
  return j;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Information-flow analysis toolkit for a miniature multimodal decoder", "flowscope"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
  app.require_subcommand(1);
  app.footer("Exit status: 0 success, 1 runtime failure, 2 usage error. Output directory: --out, else $" +
             std::string(kOutDirEnv) + ", else the config file's \"out\", else ./flowscope_out.");

  std::string config_path, out_dir, model_path;
  ModelOpts mo;
  InputOpts io;
  TrainOpts to;
  AnalyzeOpts ao;
  TruncateOpts tr;
  CliffOpts co;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file; command-line flags win");
    sub->add_option("--out", out_dir, "output directory");
  };

  auto* init = app.add_subcommand("init-model", "write a seeded checkpoint and print its parameter count");
  common(init);
  mo.add(init);
  init->add_option("--model", model_path, "checkpoint path (default <out>/model.fsck)");

  auto* train = app.add_subcommand("train-toy", "train a model on synthetic tasks with plain SGD");
  common(train);
  mo.add(train);
  train->add_option("--model", model_path, "checkpoint to write (default <out>/model.fsck)");
  train->add_option("--from", to.from, "start from this checkpoint instead of a fresh model");
  train->add_option("--tasks", to.tasks, "comma-separated task kinds");
  train->add_option("--instances", to.instances, "training instances per task");
  train->add_option("--task-seed", to.task_seed, "task generator seed (held-out set uses seed + 1)");
  train->add_option("--feature-noise", to.feature_noise, "patch feature noise");
  train->add_option("--epochs", to.epochs, "passes over the training set");
  train->add_option("--lr", to.lr, "SGD step size");
  train->add_option("--batch", to.batch, "minibatch size");
  train->add_option("--train-seed", to.train_seed, "shuffling seed");

  auto* analyze = app.add_subcommand("analyze", "influence profile and per-layer saliency overlays");
  common(analyze);
  analyze->add_option("--model", model_path, "checkpoint")->required();
  io.add(analyze);
  analyze->add_option("--noise-s", ao.noise_s, "image noise standard deviation for the CAM ensemble");
  analyze->add_option("--samples", ao.samples, "CAM ensemble size");
  analyze->add_option("--cam-seed", ao.cam_seed, "CAM noise seed");
  analyze->add_option("--hook", ao.hook, "feature hook: post_attention_norm | pre_norm | mlp_out");
  analyze->add_option("--max-new", ao.max_new, "answer tokens to decode");
  analyze->add_option("--query", ao.query, "answer_average | first_answer");
  analyze->add_option("--threshold", ao.threshold, "image share that flags a layer");

  auto* trunc = app.add_subcommand("truncate", "attention-ranked image-token truncation against the baseline");
  common(trunc);
  trunc->add_option("--model", model_path, "checkpoint")->required();
  io.add(trunc);
  trunc->add_option("--layer", tr.layer, "1-based layer where truncation applies");
  trunc->add_option("--k", tr.k, "image tokens to keep");
  trunc->add_option("--score-row", tr.score_row, "last_image | last_prompt");
  trunc->add_option("--mode", tr.mode, "remove | mask");
  trunc->add_option("--max-new", tr.max_new, "answer tokens to decode");
  trunc->add_flag("--sweep", tr.sweep, "also sweep every layer at the same k");
  trunc->add_option("--eval-instances", tr.eval_instances, "score accuracy on this many task instances");

  auto* cliff = app.add_subcommand("cliff", "k = 0 truncation sweep and cliff-layer report per task");
  common(cliff);
  cliff->add_option("--model", model_path, "checkpoint (default: fresh seeded model from the model flags)");
  mo.add(cliff);
  cliff->add_option("--tasks", co.tasks, "comma-separated task kinds")->required();
  cliff->add_option("--instances", co.instances, "instances per task");
  cliff->add_option("--task-seed", co.task_seed, "task generator seed");
  cliff->add_option("--feature-noise", co.feature_noise, "patch feature noise");
  cliff->add_option("--epsilon", co.epsilon, "metric tolerance defining the cliff");
  cliff->add_option("--metric", co.metric, "accuracy | logit_match | auto (logit_match when planted)");
  cliff->add_option("--threshold", co.threshold, "image share that flags a layer");

  // Splice config-file values in right after the subcommand, so later
  // command-line flags take precedence.
  std::vector<std::string> argv = args;
  bool out_on_cli = false;
  std::optional<std::string> out_from_config;
  const auto cmd_it = std::find_if(argv.begin(), argv.end(), [](const std::string& a) { return a.empty() || a[0] != '-'; });
  if (cmd_it != argv.end() && std::find(kCommands.begin(), kCommands.end(), *cmd_it) != kCommands.end()) {
    std::optional<std::string> cfg_file;
    for (std::size_t i = 0; i < argv.size(); ++i) {
      if (argv[i] == "--config" && i + 1 < argv.size()) cfg_file = argv[i + 1];
      else if (argv[i].rfind("--config=", 0) == 0) cfg_file = argv[i].substr(9);
      if (argv[i] == "--out" || argv[i].rfind("--out=", 0) == 0) out_on_cli = true;
    }
    if (cfg_file) {
      std::vector<std::string> tokens;
      try {
        const auto j = nlohmann::json::parse(read_text(*cfg_file));
        config_tokens(j, *cmd_it, tokens);
        if (j.is_object() && j.contains("out") && j["out"].is_string()) out_from_config = j["out"].get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        err << "error: config file " << *cfg_file << ": " << e.what() << "\n";
        return kExitUsage;
      } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
      } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
      }
      argv.insert(cmd_it + 1, tokens.begin(), tokens.end());
    }
  }

  try {
    std::vector<std::string> reversed(argv.rbegin(), argv.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  std::string resolved_out = "flowscope_out";
  if (out_on_cli) resolved_out = out_dir;
  else if (const char* env = std::getenv(kOutDirEnv); env && *env) resolved_out = env;
  else if (out_from_config) resolved_out = *out_from_config;
  else if (!out_dir.empty()) resolved_out = out_dir;
  Context ctx{fs::path(resolved_out), out};

  try {
    const std::string name = sub->get_name();
    int code = kExitOk;
    if (name == "init-model") {
      code = cmd_init_model(mo, model_path, ctx);
    } else if (name == "train-toy") {
      code = cmd_train(mo, to, model_path, ctx);
    } else if (name == "analyze") {
      const Model model = load_model(model_path);
      code = cmd_analyze(model, load_input(io, model), ao, ctx);
    } else if (name == "truncate") {
      const Model model = load_model(model_path);
      code = cmd_truncate(model, load_input(io, model), io, tr, ctx);
    } else {
      Model model = model_path.empty() ? Model(mo.config()) : load_model(model_path);
      model = with_planted(std::move(model), mo.planted);
      code = cmd_cliff(model, mo.planted > 0, co, ctx);
    }
    ensure_dir(ctx.out);
    write_text(ctx.out / ("config_" + name + ".json"), resolved_config(sub).dump(2) + "\n");
    return code;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace flowscope::cli
