#pragma once

// Capture-free reimplementation of the mini multimodal decoder using plain
// nested vectors. It shares only the weights with flowscope::Model and serves
// as the oracle for forward-pass, truncation and finite-difference checks.

#include <cmath>
#include <optional>
#include <vector>

#include "flowscope/model.hpp"

namespace flowscope::testing {

using Mat = std::vector<std::vector<double>>;

struct RefRow {
  bool image = false;
  int token = 0;          // vocabulary id when !image
  std::size_t patch = 0;  // row-major patch index when image
  std::size_t position = 1;
};

// Adds `delta` to the post-attention-norm features of `layer` at (row, col).
struct RefPerturbation {
  std::size_t layer = 1;
  std::size_t row = 0;
  std::size_t col = 0;
  double delta = 0.0;
};

inline std::vector<RefRow> reference_rows(const MultimodalInput& in, const std::vector<int>& continuation = {},
                                          bool include_image = true) {
  std::vector<RefRow> rows;
  std::size_t pos = 1;
  for (int t : in.system_tokens) rows.push_back({false, t, 0, pos++});
  for (std::size_t p = 0; p < in.image.patches(); ++p) {
    if (include_image) rows.push_back({true, 0, p, pos});
    ++pos;
  }
  for (int t : in.user_tokens) rows.push_back({false, t, 0, pos++});
  for (int t : continuation) rows.push_back({false, t, 0, pos++});
  return rows;
}

namespace detail {

inline Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

inline Mat mm(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < b.size(); ++p) acc += a[i][p] * b[p][j];
      out[i][j] = acc;
    }
  return out;
}

inline Mat norm(const Mat& x, const Tensor& gain, const Tensor& bias) {
  Mat out = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double d = static_cast<double>(x[r].size());
    double mean = 0.0, var = 0.0;
    for (double v : x[r]) mean += v / d;
    for (double v : x[r]) var += (v - mean) * (v - mean) / d;
    const double sd = std::sqrt(var + 1e-5);
    for (std::size_t c = 0; c < x[r].size(); ++c) out[r][c] = (x[r][c] - mean) / sd * gain[c] + bias[c];
  }
  return out;
}

inline double gelu(double v) {
  return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
}

}  // namespace detail

inline Mat reference_logits(const Model& model, const MultimodalInput& in, const std::vector<RefRow>& rows,
                            std::optional<RefPerturbation> perturb = std::nullopt) {
  using namespace detail;
  const auto& cfg = model.config();
  const auto& w = model.weights();
  const std::size_t n = rows.size(), d = cfg.d_model, H = cfg.n_heads, dh = d / H;

  Mat h(n, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      double v = w.position_embedding.at(rows[i].position - 1, c);
      if (rows[i].image) {
        double acc = w.patch_bias[c];
        for (std::size_t ch = 0; ch < cfg.patch_channels; ++ch)
          acc += in.image.values[rows[i].patch * cfg.patch_channels + ch] * w.patch_projection.at(ch, c);
        v += acc;
      } else {
        v += w.token_embedding.at(static_cast<std::size_t>(rows[i].token), c);
      }
      h[i][c] = v;
    }
  }

  for (std::size_t l = 1; l <= cfg.n_layers; ++l) {
    const auto& p = w.layers[l - 1];
    Mat x = norm(h, p.attn_norm_gain, p.attn_norm_bias);
    Mat q = mm(x, to_mat(p.wq)), k = mm(x, to_mat(p.wk)), v = mm(x, to_mat(p.wv));
    Mat heads(n, std::vector<double>(d, 0.0));
    const bool blocked = cfg.image_cutoff_layer > 0 && l >= cfg.image_cutoff_layer;
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> score(n, 0.0);
        std::vector<bool> ok(n, false);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
          ok[j] = rows[j].position <= rows[i].position && !(blocked && rows[j].image && j != i);
          if (!ok[j]) continue;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q[i][hd * dh + c] * k[j][hd * dh + c];
          score[j] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, score[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          if (ok[j]) z += std::exp(score[j] - mx);
        for (std::size_t j = 0; j < n; ++j) {
          if (!ok[j]) continue;
          const double pr = std::exp(score[j] - mx) / z;
          for (std::size_t c = 0; c < dh; ++c) heads[i][hd * dh + c] += pr * v[j][hd * dh + c];
        }
      }
    }
    Mat attn = mm(heads, to_mat(p.wo));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) h[i][c] += attn[i][c];
    Mat a = norm(h, p.mlp_norm_gain, p.mlp_norm_bias);
    if (perturb && perturb->layer == l) a[perturb->row][perturb->col] += perturb->delta;
    Mat hidden = mm(a, to_mat(p.w1));
    for (auto& row : hidden)
      for (std::size_t c = 0; c < row.size(); ++c) row[c] = gelu(row[c] + p.b1[c]);
    Mat out = mm(hidden, to_mat(p.w2));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) h[i][c] += out[i][c] + p.b2[c];
  }
  return mm(norm(h, w.final_norm_gain, w.final_norm_bias), to_mat(w.lm_head));
}

}  // namespace flowscope::testing
