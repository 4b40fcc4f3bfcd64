#include "flowscope/cam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "flowscope/errors.hpp"

namespace flowscope {

void CamConfig::validate() const {
  if (layer == 0) throw ContractError("cam layer is 1-based");
  if (!(noise_s >= 0.0) || !std::isfinite(noise_s)) throw ContractError("noise_s must be a finite value >= 0");
  if (n_samples == 0) throw ContractError("n_samples must be at least 1");
  if (max_new == 0) throw ContractError("max_new must be at least 1");
  if (step && *step >= max_new) throw ContractError("answer step outside the decoded answer");
}

double SaliencyMap::max() const {
  double m = 0.0;
  for (double v : values) m = std::max(m, v);
  return m;
}

bool SaliencyMap::is_zero() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0; });
}

Var answer_logit(Var logits, std::span<const std::size_t> rows, std::span<const int> token_ids) {
  if (rows.size() != token_ids.size()) throw ContractError("answer_logit: positions and token ids differ in length");
  if (rows.empty()) throw ContractError("answer_logit: needs at least one answer step");
  std::vector<Var> terms;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (token_ids[i] < 0) throw ContractError("answer_logit: negative token id");
    terms.push_back(element(logits, rows[i], static_cast<std::size_t>(token_ids[i])));
  }
  if (terms.size() == 1) return terms.front();
  return sum(concat_rows(terms));
}

Tensor feature_gradients(const Gradients& grads, Var z, Var features) {
  if (!z.valid() || !features.valid() || features.tape() != z.tape() || grads.tape() != z.tape() ||
      grads.output_id() != z.id()) {
    throw ContractError("feature_gradients: features and scalar are not on the same tape");
  }
  if (features.id() > z.id() || !features.requires_grad()) {
    throw ContractError("feature_gradients: features did not take part in computing the scalar");
  }
  return grads.of(features);
}

Tensor feature_gradients(Var z, Var features) {
  if (!z.valid()) throw ContractError("feature_gradients: unbound scalar");
  return feature_gradients(z.tape()->backward(z), z, features);
}

std::vector<double> channel_weights(const Tensor& gradient) {
  std::vector<double> alpha(gradient.cols(), 0.0);
  if (gradient.rows() == 0) return alpha;
  for (std::size_t r = 0; r < gradient.rows(); ++r) {
    auto row = gradient.row(r);
    for (std::size_t k = 0; k < alpha.size(); ++k) alpha[k] += row[k];
  }
  const double inv = 1.0 / static_cast<double>(gradient.rows());
  for (double& a : alpha) a *= inv;
  return alpha;
}

std::vector<double> cam_map(const Tensor& features, const Tensor& gradient, const TokenLayout& layout,
                            std::span<const std::size_t> token_ids) {
  if (features.shape() != gradient.shape()) throw DimensionError("cam_map: features and gradient shapes differ");
  if (token_ids.size() != features.rows()) throw DimensionError("cam_map: token id count != feature rows");
  const auto alpha = channel_weights(gradient);
  std::vector<double> map(layout.n_image(), 0.0);
  for (std::size_t r = 0; r < features.rows(); ++r) {
    const std::size_t id = token_ids[r];
    if (!layout.image().contains(id)) continue;
    auto a = features.row(r);
    double v = 0.0;
    for (std::size_t k = 0; k < alpha.size(); ++k) v += alpha[k] * a[k];
    map[id - layout.image().first] = std::max(v, 0.0);
  }
  return map;
}

std::vector<double> cam_map(const Tensor& features, const Tensor& gradient, const TokenLayout& layout) {
  std::vector<std::size_t> ids(features.rows());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i + 1;
  return cam_map(features, gradient, layout, ids);
}

PatchGrid perturb_image(const PatchGrid& image, double noise_s, std::size_t sample_index, std::uint64_t seed) {
  if (!(noise_s >= 0.0)) throw ContractError("perturb_image: noise_s must be >= 0");
  PatchGrid out = image;
  if (noise_s == 0.0) return out;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(sample_index), static_cast<std::uint32_t>(sample_index >> 32),
                    0x5eedu};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> noise(0.0, noise_s);
  for (double& v : out.values) v += noise(rng);
  return out;
}

SaliencyMap to_grid(std::span<const double> sequence, std::size_t rows, std::size_t cols) {
  if (sequence.size() != rows * cols) throw DimensionError("to_grid: sequence length != rows * cols");
  return {rows, cols, std::vector<double>(sequence.begin(), sequence.end()), false};
}

std::vector<double> to_sequence(const SaliencyMap& map) { return map.values; }

SaliencyMap normalize_max(SaliencyMap map) {
  const double m = map.max();
  if (m > 0.0) {
    for (double& v : map.values) v /= m;
  }
  map.normalized = true;
  return map;
}

std::vector<std::vector<double>> cam_sample(const Model& model, const MultimodalInput& input, const CamConfig& cfg,
                                            std::span<const int> answer, std::size_t sample_index,
                                            std::span<const std::size_t> layers) {
  if (answer.empty()) throw ContractError("cam_sample: empty answer");
  const TokenLayout layout = input.layout();
  const std::vector<int> continuation(answer.begin(), answer.end() - 1);
  std::vector<std::size_t> rows;
  std::vector<int> tokens;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    if (cfg.step && *cfg.step != i) continue;
    rows.push_back(layout.prompt_length() - 1 + i);
    tokens.push_back(answer[i]);
  }

  MultimodalInput noisy = input;
  noisy.image = perturb_image(input.image, cfg.noise_s, sample_index, cfg.seed);
  ForwardOptions opts;
  opts.hook = cfg.hook;
  auto pass = model.forward(noisy, continuation, opts, true);
  Var z = answer_logit(pass.logits, rows, tokens);
  const Gradients grads = pass.tape->backward(z);

  std::vector<std::vector<double>> maps;
  for (std::size_t l : layers) {
    const auto& cap = pass.record.layer(l);
    const Tensor g = feature_gradients(grads, z, cap.features);
    maps.push_back(cam_map(cap.features.value(), g, layout, cap.token_ids));
  }
  return maps;
}

SmoothCamRun smooth_cam_layers(const Model& model, const MultimodalInput& input, const CamConfig& cfg,
                               std::span<const std::size_t> layers) {
  cfg.validate();
  for (std::size_t l : layers)
    if (l == 0 || l > model.config().n_layers) throw ContractError("cam layer outside 1..n_layers");

  SmoothCamRun run;
  run.answer = model.greedy_decode(input, cfg.max_new);
  run.layers.resize(layers.size());
  for (std::size_t k = 0; k < layers.size(); ++k) run.layers[k].layer = layers[k];

  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    auto maps = cam_sample(model, input, cfg, run.answer, i, layers);
    for (std::size_t k = 0; k < layers.size(); ++k) run.layers[k].sample_maps.push_back(std::move(maps[k]));
  }

  const std::size_t n_img = input.image.patches();
  const double inv = 1.0 / static_cast<double>(cfg.n_samples);
  for (auto& res : run.layers) {
    res.mean_raw.assign(n_img, 0.0);
    for (const auto& s : res.sample_maps)
      for (std::size_t p = 0; p < n_img; ++p) res.mean_raw[p] += s[p];
    for (double& v : res.mean_raw) v *= inv;
    res.map = normalize_max(to_grid(res.mean_raw, input.image.rows, input.image.cols));
  }
  return run;
}

SmoothCamResult smooth_cam(const Model& model, const MultimodalInput& input, const CamConfig& cfg) {
  const std::size_t layer[] = {cfg.layer};
  return std::move(smooth_cam_layers(model, input, cfg, layer).layers.front());
}

Raster render_grayscale(const PatchGrid& image, std::size_t cell_size) {
  SaliencyMap zero{image.rows, image.cols, std::vector<double>(image.patches(), 0.0), true};
  return render_overlay(zero, image, cell_size);
}

Raster render_overlay(const SaliencyMap& map, const PatchGrid& image, std::size_t cell_size) {
  if (map.rows != image.rows || map.cols != image.cols) throw DimensionError("overlay: map and image grids differ");
  if (cell_size == 0) throw ContractError("overlay: cell size must be positive");
  std::vector<double> mean(image.patches(), 0.0);
  for (std::size_t p = 0; p < image.patches(); ++p) {
    for (std::size_t ch = 0; ch < image.channels; ++ch) mean[p] += image.values[p * image.channels + ch];
    mean[p] /= static_cast<double>(image.channels);
  }
  const auto [lo, hi] = std::minmax_element(mean.begin(), mean.end());
  const double span = *hi - *lo;

  Raster out = Raster::blank(image.cols * cell_size, image.rows * cell_size, 3);
  for (std::size_t r = 0; r < image.rows; ++r) {
    for (std::size_t c = 0; c < image.cols; ++c) {
      const std::size_t p = r * image.cols + c;
      const int gray = span > 0.0 ? static_cast<int>(std::lround((mean[p] - *lo) / span * 255.0)) : 128;
      const int q = quantize_unit(map.at(r, c));
      const auto color = jet(static_cast<std::uint8_t>(q));
      std::uint8_t px[3];
      for (std::size_t ch = 0; ch < 3; ++ch) px[ch] = static_cast<std::uint8_t>((gray * (255 - q) + color[ch] * q + 127) / 255);
      for (std::size_t y = 0; y < cell_size; ++y)
        for (std::size_t x = 0; x < cell_size; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch) out.at(c * cell_size + x, r * cell_size + y, ch) = px[ch];
    }
  }
  return out;
}

void overlay_export(const SaliencyMap& map, const PatchGrid& image, const std::filesystem::path& path,
                    std::size_t cell_size) {
  if (!map.normalized) throw ContractError("overlay_export: map must be normalised");
  render_overlay(map, image, cell_size).write(path);
}

std::string saliency_csv(const SaliencyMap& map) {
  std::string out = "row,col,value\n";
  char buf[64];
  for (std::size_t r = 0; r < map.rows; ++r)
    for (std::size_t c = 0; c < map.cols; ++c) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.12g\n", r, c, map.at(r, c));
      out += buf;
    }
  return out;
}

}  // namespace flowscope
