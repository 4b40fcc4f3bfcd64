#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "flowscope/cam.hpp"
#include "flowscope/checkpoint.hpp"
#include "flowscope/cli.hpp"
#include "flowscope/cliff.hpp"
#include "flowscope/errors.hpp"
#include "flowscope/model.hpp"
#include "flowscope/segment_attention.hpp"
#include "flowscope/tasks.hpp"
#include "flowscope/training.hpp"
#include "flowscope/truncation.hpp"

namespace py = pybind11;
using namespace flowscope;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Tensor& t) {
  Array a({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

Array grid_to_numpy(const SaliencyMap& m) {
  Array a({m.rows, m.cols});
  std::copy(m.values.begin(), m.values.end(), a.mutable_data());
  return a;
}

MultimodalInput make_input(std::vector<int> system_tokens, const Array& image, std::vector<int> user_tokens) {
  if (image.ndim() != 3) throw ContractError("image must have shape (rows, cols, channels)");
  MultimodalInput in;
  in.system_tokens = std::move(system_tokens);
  in.user_tokens = std::move(user_tokens);
  in.image = PatchGrid::zeros(image.shape(0), image.shape(1), image.shape(2));
  std::copy(image.data(), image.data() + image.size(), in.image.values.begin());
  return in;
}

Array image_to_numpy(const PatchGrid& g) {
  Array a({g.rows, g.cols, g.channels});
  std::copy(g.values.begin(), g.values.end(), a.mutable_data());
  return a;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Attention-flow analysis of a miniature multimodal decoder";

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::enum_<HookPoint>(m, "HookPoint")
      .value("post_attention_norm", HookPoint::post_attention_norm)
      .value("pre_norm", HookPoint::pre_norm)
      .value("mlp_out", HookPoint::mlp_out);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("patch_rows", &ModelConfig::patch_rows)
      .def_readwrite("patch_cols", &ModelConfig::patch_cols)
      .def_readwrite("patch_channels", &ModelConfig::patch_channels)
      .def_readwrite("max_seq", &ModelConfig::max_seq)
      .def_readwrite("seed", &ModelConfig::seed)
      .def_readwrite("image_cutoff_layer", &ModelConfig::image_cutoff_layer)
      .def("validate", &ModelConfig::validate);

  py::class_<MultimodalInput>(m, "Input")
      .def(py::init(&make_input), py::arg("system_tokens"), py::arg("image"), py::arg("user_tokens"))
      .def_readonly("system_tokens", &MultimodalInput::system_tokens)
      .def_readonly("user_tokens", &MultimodalInput::user_tokens)
      .def_property_readonly("image", [](const MultimodalInput& in) { return image_to_numpy(in.image); })
      .def_property_readonly("layout", [](const MultimodalInput& in) {
        const auto l = in.layout();
        return py::make_tuple(l.n_system(), l.n_image(), l.n_user());
      });

  py::class_<Model>(m, "Model")
      .def(py::init<ModelConfig>(), py::arg("config"))
      .def_property_readonly("config", &Model::config)
      .def("parameter_count", &Model::parameter_count)
      .def(
          "logits",
          [](const Model& model, const MultimodalInput& in, std::vector<int> continuation) {
            ForwardOptions o;
            o.capture = false;
            return to_numpy(model.forward(in, continuation, o).logits_value());
          },
          py::arg("input"), py::arg("continuation") = std::vector<int>{})
      .def(
          "attention",
          [](const Model& model, const MultimodalInput& in, std::size_t layer) {
            return to_numpy(head_average(model.forward(in).record, layer));
          },
          py::arg("input"), py::arg("layer"), "head-averaged attention of a 1-based layer")
      .def("greedy_decode", &Model::greedy_decode, py::arg("input"), py::arg("max_new") = 1)
      .def("save", [](const Model& model, const std::string& path) { save_checkpoint(model, path); })
      .def_static("load", [](const std::string& path) { return load_checkpoint(path); });

  m.def(
      "influence_rates",
      [](const Model& model, const MultimodalInput& in, std::size_t max_new) {
        const auto answer = model.greedy_decode(in, max_new);
        const std::vector<int> cont(answer.begin(), answer.end() - 1);
        const auto pass = model.forward(in, cont);
        const auto p = influence_rates(pass.record, in.layout(), answer_query_ids(in.layout(), answer.size()));
        Array a({p.n_layers(), std::size_t{3}});
        for (std::size_t l = 0; l < p.n_layers(); ++l) {
          a.mutable_at(l, 0) = p.layers[l].system;
          a.mutable_at(l, 1) = p.layers[l].image;
          a.mutable_at(l, 2) = p.layers[l].user;
        }
        return a;
      },
      py::arg("model"), py::arg("input"), py::arg("max_new") = 1,
      "per-layer (system, image, user) influence rates of the answer rows");

  m.def(
      "smooth_cam",
      [](const Model& model, const MultimodalInput& in, std::vector<std::size_t> layers, double noise_s,
         std::size_t n_samples, std::uint64_t seed, HookPoint hook, std::size_t max_new) {
        CamConfig c;
        c.noise_s = noise_s;
        c.n_samples = n_samples;
        c.seed = seed;
        c.hook = hook;
        c.max_new = max_new;
        const auto run = smooth_cam_layers(model, in, c, layers);
        py::dict maps, raw;
        for (const auto& r : run.layers) {
          maps[py::int_(r.layer)] = grid_to_numpy(r.map);
          raw[py::int_(r.layer)] = grid_to_numpy(to_grid(r.mean_raw, r.map.rows, r.map.cols));
        }
        py::dict out;
        out["answer"] = run.answer;
        out["maps"] = maps;
        out["raw"] = raw;
        return out;
      },
      py::arg("model"), py::arg("input"), py::arg("layers"), py::arg("noise_s") = 0.0, py::arg("n_samples") = 1,
      py::arg("seed") = 0, py::arg("hook") = HookPoint::post_attention_norm, py::arg("max_new") = 1);

  m.def(
      "argtop", [](std::vector<double> scores, std::size_t k) { return argtop(scores, k); }, py::arg("scores"),
      py::arg("k"));

  m.def(
      "truncate",
      [](const Model& model, const MultimodalInput& in, std::size_t layer, std::size_t k, const std::string& score_row,
         bool mask, std::size_t max_new) {
        const auto plan = plan_truncation(model, in, layer, k, parse_score_row_mode(score_row));
        const auto run = run_truncated(model, in, plan, max_new, mask ? RemovalMode::mask : RemovalMode::remove);
        const auto cost = attention_cost(in.layout(), plan, model.config().n_layers);
        py::dict out;
        out["kept_image_ids"] = plan.kept_image_ids;
        out["plan_json"] = plan.to_json();
        out["logits"] = to_numpy(run.prompt.logits);
        out["row_ids"] = run.prompt.row_ids;
        out["answer"] = run.answer;
        out["kept_length"] = cost.kept_length;
        out["attention_cost_ratio"] = cost.per_layer_ratio;
        out["savings"] = cost.savings();
        return out;
      },
      py::arg("model"), py::arg("input"), py::arg("layer"), py::arg("k"), py::arg("score_row") = "last_image",
      py::arg("mask") = false, py::arg("max_new") = 1);

  m.def("text_only_logits", [](const Model& model, const MultimodalInput& in) {
    return to_numpy(text_only_logits(model, in));
  });

  py::class_<SyntheticTask>(m, "Task")
      .def_property_readonly("kind", [](const SyntheticTask& t) { return std::string(task_kind_name(t.spec.kind)); })
      .def_property_readonly("chance", &SyntheticTask::chance)
      .def_property_readonly("candidates", &SyntheticTask::candidates)
      .def("__len__", [](const SyntheticTask& t) { return t.instances.size(); })
      .def("instance", [](const SyntheticTask& t, std::size_t i) {
        const auto& inst = t.instances.at(i);
        return py::make_tuple(inst.input, inst.answer);
      });

  m.def(
      "generate_task",
      [](const std::string& kind, std::size_t n_instances, std::uint64_t seed, double feature_noise) {
        TaskSpec s;
        s.kind = parse_task_kind(kind);
        s.n_instances = n_instances;
        s.seed = seed;
        s.feature_noise = feature_noise;
        return generate_task(s);
      },
      py::arg("kind"), py::arg("n_instances") = 512, py::arg("seed") = 0, py::arg("feature_noise") = 0.1);

  m.def(
      "task_model_config",
      [](std::size_t n_layers, std::size_t n_heads, std::size_t d_model, std::uint64_t seed) {
        return task_model_config(TaskSpec{}, n_layers, n_heads, d_model, seed);
      },
      py::arg("n_layers") = 4, py::arg("n_heads") = 2, py::arg("d_model") = 32, py::arg("seed") = 0,
      "model configuration sized for the default 4x4, 8-class task grid");

  m.def(
      "train",
      [](Model& model, const SyntheticTask& task, std::size_t epochs, double lr, std::size_t batch,
         std::uint64_t seed) {
        TrainConfig c;
        c.epochs = epochs;
        c.learning_rate = lr;
        c.batch_size = batch;
        c.seed = seed;
        py::gil_scoped_release release;
        return train_sgd(model, task.instances, c).epoch_loss;
      },
      py::arg("model"), py::arg("task"), py::arg("epochs") = 20, py::arg("lr") = 0.05, py::arg("batch") = 16,
      py::arg("seed") = 0, "in-place minibatch SGD; returns the loss per epoch");

  m.def("plant_cliff", py::overload_cast<const Model&, std::size_t>(&plant_cliff_model), py::arg("model"),
        py::arg("layer"));

  m.def(
      "sweep_cliff",
      [](const Model& model, const SyntheticTask& task, double epsilon, const std::string& metric) {
        SweepOptions o;
        o.epsilon = epsilon;
        o.metric = parse_cliff_metric(metric);
        return sweep_cliff(model, task, o).to_json();
      },
      py::arg("model"), py::arg("task"), py::arg("epsilon") = 0.0, py::arg("metric") = "accuracy",
      "JSON report of the k = 0 truncation sweep");

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "runs the command-line tool in-process; returns (exit code, stdout, stderr)");
}
