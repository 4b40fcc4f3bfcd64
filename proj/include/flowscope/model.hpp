#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flowscope/autodiff.hpp"
#include "flowscope/layout.hpp"
#include "flowscope/tensor.hpp"

namespace flowscope {

// Where per-layer features A_k are captured.
enum class HookPoint {
  post_attention_norm,  // output of the norm that follows the attention residual
  pre_norm,             // residual stream entering that norm
  mlp_out,              // MLP output before it is added back to the residual
};

std::string_view hook_point_name(HookPoint h) noexcept;
HookPoint parse_hook_point(std::string_view name);

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 2;
  std::size_t d_model = 32;
  std::size_t d_ff = 0;  // 0 selects 4 * d_model
  std::size_t vocab_size = 32;
  std::size_t patch_rows = 4;
  std::size_t patch_cols = 4;
  std::size_t patch_channels = 8;
  std::size_t max_seq = 64;
  std::uint64_t seed = 0;
  // Planted cliff: from this 1-based layer on, no query attends to image
  // columns other than itself. 0 disables the block.
  std::size_t image_cutoff_layer = 0;

  std::size_t n_image_tokens() const noexcept { return patch_rows * patch_cols; }
  std::size_t head_dim() const noexcept { return n_heads == 0 ? 0 : d_model / n_heads; }
  std::size_t ff_dim() const noexcept { return d_ff == 0 ? 4 * d_model : d_ff; }

  // Throws ContractError describing the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// H_p x W_p x C patch features, row-major over (row, col, channel).
struct PatchGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 0;
  std::vector<double> values;

  static PatchGrid zeros(std::size_t rows, std::size_t cols, std::size_t channels) {
    return {rows, cols, channels, std::vector<double>(rows * cols * channels, 0.0)};
  }
  std::size_t patches() const noexcept { return rows * cols; }
  double& at(std::size_t r, std::size_t c, std::size_t ch) { return values[(r * cols + c) * channels + ch]; }
  double at(std::size_t r, std::size_t c, std::size_t ch) const { return values[(r * cols + c) * channels + ch]; }
  // Row-major patch sequence as an N_img x C matrix.
  Tensor as_matrix() const;

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

struct MultimodalInput {
  std::vector<int> system_tokens;
  PatchGrid image;
  std::vector<int> user_tokens;

  TokenLayout layout() const { return {system_tokens.size(), image.patches(), user_tokens.size()}; }
};

template <class T>
struct LayerParams {
  T attn_norm_gain, attn_norm_bias;
  T wq, wk, wv, wo;
  T mlp_norm_gain, mlp_norm_bias;  // post-attention norm
  T w1, b1, w2, b2;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "attn_norm.gain", self.attn_norm_gain);
    f(prefix + "attn_norm.bias", self.attn_norm_bias);
    f(prefix + "attn.wq", self.wq);
    f(prefix + "attn.wk", self.wk);
    f(prefix + "attn.wv", self.wv);
    f(prefix + "attn.wo", self.wo);
    f(prefix + "post_attention_norm.gain", self.mlp_norm_gain);
    f(prefix + "post_attention_norm.bias", self.mlp_norm_bias);
    f(prefix + "mlp.w1", self.w1);
    f(prefix + "mlp.b1", self.b1);
    f(prefix + "mlp.w2", self.w2);
    f(prefix + "mlp.b2", self.b2);
  }
};

template <class T>
struct ModelParams {
  T token_embedding;     // vocab x d
  T position_embedding;  // max_seq x d
  T patch_projection;    // C x d
  T patch_bias;          // d
  std::vector<LayerParams<T>> layers;
  T final_norm_gain, final_norm_bias;
  T lm_head;  // d x vocab

  // Visits every parameter in checkpoint order as f(name, T&).
  template <class F>
  void for_each(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("token_embedding"), self.token_embedding);
    f(std::string("position_embedding"), self.position_embedding);
    f(std::string("patch_projection"), self.patch_projection);
    f(std::string("patch_bias"), self.patch_bias);
    for (std::size_t l = 0; l < self.layers.size(); ++l)
      LayerParams<T>::visit(self.layers[l], "layers." + std::to_string(l + 1) + ".", f);
    f(std::string("final_norm.gain"), self.final_norm_gain);
    f(std::string("final_norm.bias"), self.final_norm_bias);
    f(std::string("lm_head"), self.lm_head);
  }
};

using ModelWeights = ModelParams<Tensor>;
using BoundWeights = ModelParams<Var>;

// Expected parameter manifest for a configuration, in checkpoint order.
std::vector<std::pair<std::string, Shape>> parameter_manifest(const ModelConfig& config);

// Per-row bookkeeping that survives row deletion: original 1-based token id
// (which also selects the positional embedding) and the image flag.
struct RowMeta {
  std::vector<std::size_t> token_ids;
  std::vector<std::uint8_t> is_image;

  std::size_t size() const noexcept { return token_ids.size(); }
  static RowMeta for_layout(const TokenLayout& layout, std::size_t n_generated);
  // Rows whose token id is in `keep` (ascending ids), in original order.
  // Returns the selected row indices alongside the reduced metadata.
  std::pair<RowMeta, std::vector<std::size_t>> select(std::span<const std::size_t> keep) const;
};

struct LayerCapture {
  std::vector<Tensor> heads;  // O_h per head, rows x rows
  Var features;               // A_k at the record's hook point
  Var input;                  // hidden state entering the layer
  std::vector<std::size_t> token_ids;
};

struct AttentionRecord {
  HookPoint hook = HookPoint::post_attention_norm;
  std::vector<LayerCapture> layers;  // layers[l - 1] holds layer l

  std::size_t n_layers() const noexcept { return layers.size(); }
  const LayerCapture& layer(std::size_t l) const;  // 1-based
};

struct EmbeddedSequence {
  Var hidden;  // S x d_model
  Var image;   // N_img x C patch matrix that fed the projector
  TokenLayout layout;
  RowMeta rows;
};

struct ForwardOptions {
  bool capture = true;
  HookPoint hook = HookPoint::post_attention_norm;
  // Mask-only removal: from layer `masked_from` (1-based) on, keys with these
  // token ids are hidden from every other query. 0 disables.
  std::size_t masked_from = 0;
  std::vector<std::size_t> masked_ids;
};

struct ForwardResult {
  std::unique_ptr<Tape> tape;
  BoundWeights weights;
  EmbeddedSequence sequence;
  Var logits;  // S x vocab
  AttentionRecord record;

  const Tensor& logits_value() const { return logits.value(); }
};

struct ResumedForward {
  Var logits;     // kept rows x vocab
  RowMeta rows;   // metadata of the kept rows
};

// Decoder-only multimodal transformer with pre-norm blocks and learned
// absolute positions. Immutable after construction; forward calls are
// independent and may run concurrently.
class Model {
 public:
  explicit Model(ModelConfig config);  // seeded Gaussian initialisation
  Model(ModelConfig config, ModelWeights weights);

  const ModelConfig& config() const noexcept { return config_; }
  const ModelWeights& weights() const noexcept { return weights_; }
  ModelWeights& mutable_weights() noexcept { return weights_; }
  std::size_t parameter_count() const;

  BoundWeights bind(Tape& tape, bool trainable = false) const;

  // [system | image | user | continuation] embedding plus layout. The image
  // enters as a tape variable when the tape records gradients.
  EmbeddedSequence embed(Tape& tape, const BoundWeights& w, const MultimodalInput& input,
                         std::span<const int> continuation = {}) const;
  // Token-only embedding at explicit 1-based position ids.
  Var embed_tokens(Tape& tape, const BoundWeights& w, std::span<const int> tokens,
                   std::span<const std::size_t> positions) const;

  // Layers first..last (1-based, inclusive) over the given rows.
  Var run_layers(Tape& tape, const BoundWeights& w, Var hidden, const RowMeta& rows, std::size_t first,
                 std::size_t last, const ForwardOptions& options, AttentionRecord* record) const;
  Var output_logits(const BoundWeights& w, Var hidden) const;

  std::pair<Var, AttentionRecord> forward_with_capture(Tape& tape, const BoundWeights& w, Var hidden,
                                                       const RowMeta& rows, const ForwardOptions& options = {}) const;

  // Resumes at `start_layer` from that layer's input, keeping only rows whose
  // token id is in `keep`. Kept rows retain their original position ids.
  ResumedForward forward_from_layer(Tape& tape, const BoundWeights& w, Var hidden, const RowMeta& rows,
                                    std::span<const std::size_t> keep, std::size_t start_layer,
                                    const ForwardOptions& options = {}) const;

  // Self-contained pass on a fresh tape.
  ForwardResult forward(const MultimodalInput& input, std::span<const int> continuation = {},
                        const ForwardOptions& options = {}, bool record_gradients = false) const;

  std::vector<int> greedy_decode(const MultimodalInput& input, std::size_t max_new) const;

  // Embedded prompt as a plain tensor plus its layout.
  std::pair<Tensor, TokenLayout> embed_multimodal(const MultimodalInput& input) const;

  void validate_input(const MultimodalInput& input, std::size_t n_continuation) const;

 private:
  RowMask layer_mask(const RowMeta& rows, std::size_t layer, const ForwardOptions& options) const;

  ModelConfig config_;
  ModelWeights weights_;
};

// Lowest index wins ties.
std::size_t argmax(std::span<const double> values);

}  // namespace flowscope
