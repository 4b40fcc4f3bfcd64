#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowscope/autodiff.hpp"
#include "flowscope/model.hpp"
#include "flowscope/raster.hpp"

namespace flowscope {

struct CamConfig {
  std::size_t layer = 1;       // 1-based decoder layer
  double noise_s = 0.0;        // standard deviation of the image noise
  std::size_t n_samples = 1;   // size of the noisy ensemble
  std::uint64_t seed = 0;
  HookPoint hook = HookPoint::post_attention_norm;
  std::size_t max_new = 1;     // answer tokens realised by greedy decoding
  // Differentiate the logit of a single answer step (0-based) instead of
  // the sum over all steps.
  std::optional<std::size_t> step;

  void validate() const;
};

// H_p x W_p grid of non-negative saliency values, row-major.
struct SaliencyMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  bool normalized = false;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double max() const;
  bool is_zero() const;
};

// z_answer: sum over answer steps of the logit of the realised token.
// `rows` index the logits matrix (0-based).
Var answer_logit(Var logits, std::span<const std::size_t> rows, std::span<const int> token_ids);

// d z / d features. Throws ContractError when `features` is not an ancestor
// candidate of `z` on the same recording tape.
Tensor feature_gradients(const Gradients& grads, Var z, Var features);
Tensor feature_gradients(Var z, Var features);

// Channel weights: mean of the gradient over all sequence positions.
std::vector<double> channel_weights(const Tensor& gradient);

// ReLU(sum_k alpha_k A[p, k]) at image rows p, in patch order. `token_ids`
// maps matrix rows to 1-based token ids.
std::vector<double> cam_map(const Tensor& features, const Tensor& gradient, const TokenLayout& layout,
                            std::span<const std::size_t> token_ids);
std::vector<double> cam_map(const Tensor& features, const Tensor& gradient, const TokenLayout& layout);

// x + N(0, noise_s^2), stream keyed by (seed, sample_index).
PatchGrid perturb_image(const PatchGrid& image, double noise_s, std::size_t sample_index, std::uint64_t seed);

SaliencyMap to_grid(std::span<const double> sequence, std::size_t rows, std::size_t cols);
std::vector<double> to_sequence(const SaliencyMap& map);
// Divides by the maximum; an all-zero map stays zero.
SaliencyMap normalize_max(SaliencyMap map);

struct SmoothCamResult {
  std::size_t layer = 1;
  SaliencyMap map;                               // averaged, max-normalised
  std::vector<double> mean_raw;                  // average before normalisation
  std::vector<std::vector<double>> sample_maps;  // one raw map per noisy sample
};

struct SmoothCamRun {
  std::vector<int> answer;              // realised answer tokens
  std::vector<SmoothCamResult> layers;  // in the order requested
};

// Raw maps of one noisy sample for each requested layer, differentiating
// the given realised answer.
std::vector<std::vector<double>> cam_sample(const Model& model, const MultimodalInput& input, const CamConfig& cfg,
                                            std::span<const int> answer, std::size_t sample_index,
                                            std::span<const std::size_t> layers);

// Noisy-ensemble CAM for several layers sharing the same samples.
SmoothCamRun smooth_cam_layers(const Model& model, const MultimodalInput& input, const CamConfig& cfg,
                               std::span<const std::size_t> layers);
// Single-layer form at cfg.layer.
SmoothCamResult smooth_cam(const Model& model, const MultimodalInput& input, const CamConfig& cfg);

// Heat overlay on the patch grid. Each patch becomes a cell_size square.
// Base intensity: channel mean, min-max scaled to 0..255 (flat images map to
// 128). Blend: out = (gray * (255 - q) + jet(q) * q + 127) / 255 with
// q = round(255 * saliency), so a zero map reproduces the grayscale image.
Raster render_overlay(const SaliencyMap& map, const PatchGrid& image, std::size_t cell_size = 8);
Raster render_grayscale(const PatchGrid& image, std::size_t cell_size = 8);
void overlay_export(const SaliencyMap& map, const PatchGrid& image, const std::filesystem::path& path,
                    std::size_t cell_size = 8);

// header: row,col,value
std::string saliency_csv(const SaliencyMap& map);

}  // namespace flowscope
