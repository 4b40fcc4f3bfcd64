#include "flowscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "flowscope/errors.hpp"

namespace flowscope {

std::string_view hook_point_name(HookPoint h) noexcept {
  switch (h) {
    case HookPoint::post_attention_norm: return "post_attention_norm";
    case HookPoint::pre_norm: return "pre_norm";
    case HookPoint::mlp_out: return "mlp_out";
  }
  return "unknown";
}

HookPoint parse_hook_point(std::string_view name) {
  if (name == "post_attention_norm") return HookPoint::post_attention_norm;
  if (name == "pre_norm") return HookPoint::pre_norm;
  if (name == "mlp_out") return HookPoint::mlp_out;
  throw ContractError("unknown hook point '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ContractError("invalid model config: " + msg); };
  if (n_layers == 0) fail("n_layers must be positive");
  if (n_heads == 0) fail("n_heads must be positive");
  if (d_model == 0) fail("d_model must be positive");
  if (d_model % n_heads != 0) {
    fail("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (patch_rows == 0 || patch_cols == 0) fail("patch grid must be non-empty");
  if (patch_channels == 0) fail("patch_channels must be positive");
  if (max_seq < n_image_tokens()) fail("max_seq is smaller than the image token count");
  if (image_cutoff_layer > n_layers) fail("image_cutoff_layer beyond the last layer");
}

Tensor PatchGrid::as_matrix() const {
  if (values.size() != rows * cols * channels) throw DimensionError("patch grid data length mismatch");
  return Tensor({patches(), channels}, values);
}

std::vector<std::pair<std::string, Shape>> parameter_manifest(const ModelConfig& c) {
  const std::size_t d = c.d_model, ff = c.ff_dim();
  ModelParams<Shape> shapes;
  shapes.token_embedding = {c.vocab_size, d};
  shapes.position_embedding = {c.max_seq, d};
  shapes.patch_projection = {c.patch_channels, d};
  shapes.patch_bias = {d};
  shapes.layers.resize(c.n_layers);
  for (auto& l : shapes.layers) {
    l.attn_norm_gain = l.attn_norm_bias = {d};
    l.wq = l.wk = l.wv = l.wo = {d, d};
    l.mlp_norm_gain = l.mlp_norm_bias = {d};
    l.w1 = {d, ff};
    l.b1 = {ff};
    l.w2 = {ff, d};
    l.b2 = {d};
  }
  shapes.final_norm_gain = shapes.final_norm_bias = {d};
  shapes.lm_head = {d, c.vocab_size};
  std::vector<std::pair<std::string, Shape>> out;
  shapes.for_each([&](const std::string& name, const Shape& s) { out.emplace_back(name, s); });
  return out;
}

RowMeta RowMeta::for_layout(const TokenLayout& layout, std::size_t n_generated) {
  RowMeta m;
  const std::size_t n = layout.prompt_length() + n_generated;
  m.token_ids.resize(n);
  m.is_image.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    m.token_ids[i] = i + 1;
    m.is_image[i] = layout.image().contains(i + 1) ? 1 : 0;
  }
  return m;
}

std::pair<RowMeta, std::vector<std::size_t>> RowMeta::select(std::span<const std::size_t> keep) const {
  RowMeta out;
  std::vector<std::size_t> picked;
  for (std::size_t id : keep) {
    auto it = std::find(token_ids.begin(), token_ids.end(), id);
    if (it == token_ids.end()) throw ContractError("keep set names token id " + std::to_string(id) + " not present");
    picked.push_back(static_cast<std::size_t>(it - token_ids.begin()));
  }
  std::sort(picked.begin(), picked.end());
  if (std::adjacent_find(picked.begin(), picked.end()) != picked.end()) throw ContractError("keep set has duplicates");
  for (std::size_t r : picked) {
    out.token_ids.push_back(token_ids[r]);
    out.is_image.push_back(is_image[r]);
  }
  return {std::move(out), std::move(picked)};
}

const LayerCapture& AttentionRecord::layer(std::size_t l) const {
  if (l == 0 || l > layers.size()) {
    throw ContractError("layer " + std::to_string(l) + " outside captured range 1.." + std::to_string(layers.size()));
  }
  return layers[l - 1];
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw ContractError("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto manifest = parameter_manifest(config_);
  weights_.layers.resize(config_.n_layers);
  std::size_t k = 0;
  weights_.for_each([&](const std::string& name, Tensor& t) {
    const Shape& shape = manifest[k++].second;
    t = Tensor(shape, 0.0);
    const bool is_gain = name.ends_with(".gain");
    const bool is_bias = name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "patch_bias";
    if (is_gain) {
      std::fill(t.data().begin(), t.data().end(), 1.0);
    } else if (!is_bias) {
      const bool embedding = name == "token_embedding" || name == "position_embedding";
      const double stddev = embedding ? 0.5 : 1.0 / std::sqrt(static_cast<double>(shape.front()));
      for (double& v : t.data()) v = stddev * normal(rng);
    }
  });
}

Model::Model(ModelConfig config, ModelWeights weights) : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  if (weights_.layers.size() != config_.n_layers) throw ContractError("weights carry the wrong number of layers");
  const auto manifest = parameter_manifest(config_);
  std::size_t k = 0;
  weights_.for_each([&](const std::string& name, const Tensor& t) {
    if (t.shape() != manifest[k].second) {
      throw ContractError("parameter " + name + " has shape " + t.shape_string() + ", expected " +
                          Tensor(manifest[k].second).shape_string());
    }
    ++k;
  });
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  weights_.for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

BoundWeights Model::bind(Tape& tape, bool trainable) const {
  BoundWeights bound;
  bound.layers.resize(config_.n_layers);
  std::vector<const Tensor*> values;
  weights_.for_each([&](const std::string&, const Tensor& t) { values.push_back(&t); });
  std::size_t k = 0;
  bound.for_each([&](const std::string&, Var& v) {
    v = trainable ? tape.variable(*values[k]) : tape.constant(*values[k]);
    ++k;
  });
  return bound;
}

void Model::validate_input(const MultimodalInput& input, std::size_t n_continuation) const {
  const auto& img = input.image;
  if (img.rows != config_.patch_rows || img.cols != config_.patch_cols || img.channels != config_.patch_channels) {
    throw ContractError("image grid " + std::to_string(img.rows) + "x" + std::to_string(img.cols) + "x" +
                        std::to_string(img.channels) + " does not match the model's patch grid");
  }
  if (img.values.size() != img.rows * img.cols * img.channels) throw DimensionError("image data length mismatch");
  const std::size_t total = input.layout().prompt_length() + n_continuation;
  if (total > config_.max_seq) {
    throw CapacityError("sequence length " + std::to_string(total) + " exceeds max_seq " +
                        std::to_string(config_.max_seq));
  }
  auto check_tokens = [&](std::span<const int> tokens) {
    for (int t : tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size)
        throw ContractError("token id " + std::to_string(t) + " outside vocabulary");
  };
  check_tokens(input.system_tokens);
  check_tokens(input.user_tokens);
}

Var Model::embed_tokens(Tape& tape, const BoundWeights& w, std::span<const int> tokens,
                        std::span<const std::size_t> positions) const {
  if (tokens.size() != positions.size()) throw ContractError("embed_tokens: tokens/positions length mismatch");
  std::vector<std::size_t> ids, pos;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= config_.vocab_size)
      throw ContractError("token id " + std::to_string(tokens[i]) + " outside vocabulary");
    if (positions[i] == 0 || positions[i] > config_.max_seq) throw CapacityError("position id outside 1..max_seq");
    ids.push_back(static_cast<std::size_t>(tokens[i]));
    pos.push_back(positions[i] - 1);
  }
  (void)tape;
  return add(gather_rows(w.token_embedding, ids), gather_rows(w.position_embedding, pos));
}

EmbeddedSequence Model::embed(Tape& tape, const BoundWeights& w, const MultimodalInput& input,
                              std::span<const int> continuation) const {
  validate_input(input, continuation.size());
  for (int t : continuation)
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size)
      throw ContractError("continuation token outside vocabulary");

  EmbeddedSequence seq;
  seq.layout = input.layout();
  seq.rows = RowMeta::for_layout(seq.layout, continuation.size());
  seq.image = tape.records_gradients() ? tape.variable(input.image.as_matrix()) : tape.constant(input.image.as_matrix());

  std::vector<std::size_t> tok;
  for (int t : input.system_tokens) tok.push_back(static_cast<std::size_t>(t));
  const std::size_t n_sys = tok.size();
  std::vector<std::size_t> tail;
  for (int t : input.user_tokens) tail.push_back(static_cast<std::size_t>(t));
  for (int t : continuation) tail.push_back(static_cast<std::size_t>(t));

  std::vector<Var> parts;
  if (n_sys > 0) parts.push_back(gather_rows(w.token_embedding, tok));
  parts.push_back(add_row_vector(matmul(seq.image, w.patch_projection), w.patch_bias));
  if (!tail.empty()) parts.push_back(gather_rows(w.token_embedding, tail));
  Var content = parts.size() == 1 ? parts.front() : concat_rows(parts);

  std::vector<std::size_t> pos(seq.rows.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = seq.rows.token_ids[i] - 1;
  seq.hidden = add(content, gather_rows(w.position_embedding, pos));
  return seq;
}

RowMask Model::layer_mask(const RowMeta& rows, std::size_t layer, const ForwardOptions& options) const {
  const std::size_t n = rows.size();
  RowMask mask{n, n, std::vector<std::uint8_t>(n * n, 0)};
  const bool planted = config_.image_cutoff_layer > 0 && layer >= config_.image_cutoff_layer;
  const bool masked = options.masked_from > 0 && layer >= options.masked_from && !options.masked_ids.empty();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (rows.token_ids[j] > rows.token_ids[i]) continue;
      if (i != j) {
        if (planted && rows.is_image[j]) continue;
        if (masked && std::binary_search(options.masked_ids.begin(), options.masked_ids.end(), rows.token_ids[j]))
          continue;
      }
      mask.set(i, j, true);
    }
  }
  return mask;
}

Var Model::run_layers(Tape& tape, const BoundWeights& w, Var hidden, const RowMeta& rows, std::size_t first,
                      std::size_t last, const ForwardOptions& options, AttentionRecord* record) const {
  if (first == 0 || last > config_.n_layers) throw ContractError("layer range outside 1..n_layers");
  if (hidden.value().rows() != rows.size()) throw DimensionError("hidden rows do not match row metadata");
  (void)tape;
  ForwardOptions opts = options;
  std::sort(opts.masked_ids.begin(), opts.masked_ids.end());

  const std::size_t n_heads = config_.n_heads, dh = config_.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var h = hidden;
  for (std::size_t l = first; l <= last; ++l) {
    const auto& p = w.layers[l - 1];
    const RowMask mask = layer_mask(rows, l, opts);
    LayerCapture cap;
    cap.input = h;

    Var x = layer_norm(h, p.attn_norm_gain, p.attn_norm_bias);
    Var q = matmul(x, p.wq);
    Var k = matmul(x, p.wk);
    Var v = matmul(x, p.wv);
    std::vector<Var> heads;
    heads.reserve(n_heads);
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      Var qh = slice_cols(q, hd * dh, dh);
      Var kh = slice_cols(k, hd * dh, dh);
      Var vh = slice_cols(v, hd * dh, dh);
      Var probs = softmax_rows(scale(matmul_transposed(qh, kh), inv_sqrt), &mask);
      if (record) cap.heads.push_back(probs.value());
      heads.push_back(matmul(probs, vh));
    }
    Var attn = matmul(n_heads == 1 ? heads.front() : concat_cols(heads), p.wo);
    Var resid = add(h, attn);
    Var normed = layer_norm(resid, p.mlp_norm_gain, p.mlp_norm_bias);
    Var mlp = add_row_vector(matmul(gelu(add_row_vector(matmul(normed, p.w1), p.b1)), p.w2), p.b2);
    h = add(resid, mlp);

    if (record) {
      switch (options.hook) {
        case HookPoint::post_attention_norm: cap.features = normed; break;
        case HookPoint::pre_norm: cap.features = resid; break;
        case HookPoint::mlp_out: cap.features = mlp; break;
      }
      cap.token_ids = rows.token_ids;
      record->layers.push_back(std::move(cap));
    }
  }
  return h;
}

Var Model::output_logits(const BoundWeights& w, Var hidden) const {
  return matmul(layer_norm(hidden, w.final_norm_gain, w.final_norm_bias), w.lm_head);
}

std::pair<Var, AttentionRecord> Model::forward_with_capture(Tape& tape, const BoundWeights& w, Var hidden,
                                                            const RowMeta& rows, const ForwardOptions& options) const {
  AttentionRecord record;
  record.hook = options.hook;
  Var h = run_layers(tape, w, hidden, rows, 1, config_.n_layers, options, options.capture ? &record : nullptr);
  return {output_logits(w, h), std::move(record)};
}

ResumedForward Model::forward_from_layer(Tape& tape, const BoundWeights& w, Var hidden, const RowMeta& rows,
                                         std::span<const std::size_t> keep, std::size_t start_layer,
                                         const ForwardOptions& options) const {
  if (keep.empty()) throw ContractError("forward_from_layer: keep set is empty");
  if (start_layer == 0 || start_layer > config_.n_layers) throw ContractError("start layer outside 1..n_layers");
  auto [kept, picked] = rows.select(keep);
  Var h = picked.size() == rows.size() ? hidden : gather_rows(hidden, picked);
  ForwardOptions opts = options;
  opts.capture = false;
  h = run_layers(tape, w, h, kept, start_layer, config_.n_layers, opts, nullptr);
  return {output_logits(w, h), std::move(kept)};
}

ForwardResult Model::forward(const MultimodalInput& input, std::span<const int> continuation,
                             const ForwardOptions& options, bool record_gradients) const {
  ForwardResult r;
  r.tape = std::make_unique<Tape>(record_gradients);
  r.weights = bind(*r.tape, false);
  r.sequence = embed(*r.tape, r.weights, input, continuation);
  auto [logits, record] = forward_with_capture(*r.tape, r.weights, r.sequence.hidden, r.sequence.rows, options);
  r.logits = logits;
  r.record = std::move(record);
  return r;
}

std::vector<int> Model::greedy_decode(const MultimodalInput& input, std::size_t max_new) const {
  if (max_new == 0) throw ContractError("greedy_decode: max_new must be at least 1");
  std::vector<int> generated;
  ForwardOptions opts;
  opts.capture = false;
  for (std::size_t step = 0; step < max_new; ++step) {
    auto r = forward(input, generated, opts);
    const Tensor& logits = r.logits_value();
    generated.push_back(static_cast<int>(argmax(logits.row(logits.rows() - 1))));
  }
  return generated;
}

std::pair<Tensor, TokenLayout> Model::embed_multimodal(const MultimodalInput& input) const {
  Tape tape(false);
  auto w = bind(tape);
  auto seq = embed(tape, w, input);
  return {seq.hidden.value(), seq.layout};
}

}  // namespace flowscope
