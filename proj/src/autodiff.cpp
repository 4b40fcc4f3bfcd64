#include "flowscope/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "flowscope/errors.hpp"

namespace flowscope {

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an unbound Var");
  return tape_->value(*this);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(*this); }

Tensor Gradients::of(Var v) const {
  if (!tape_ || !tape_->owns(v)) throw ContractError("gradient requested for a Var from another tape");
  if (v.id() < grads_.size() && !grads_[v.id()].empty()) return grads_[v.id()];
  return Tensor(v.shape(), 0.0);
}

bool Gradients::reached(Var v) const {
  return tape_ && tape_->owns(v) && v.id() < grads_.size() && !grads_[v.id()].empty();
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, record_});
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const {
  if (!owns(v)) throw ContractError("Var does not belong to this tape");
  return nodes_[v.id()].value;
}

bool Tape::requires_grad(Var v) const {
  if (!owns(v)) throw ContractError("Var does not belong to this tape");
  return nodes_[v.id()].requires_grad;
}

Var Tape::push(Tensor value, std::vector<Var> inputs, BackwardFn rule) {
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (!owns(in)) throw ContractError("op input belongs to a different tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  node.requires_grad = node.requires_grad && record_;
  if (node.requires_grad) node.rule = std::move(rule);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var scalar_output) const {
  if (!owns(scalar_output)) throw ContractError("backward() on a Var from another tape");
  const Node& out = nodes_[scalar_output.id()];
  if (out.value.size() != 1) {
    throw ContractError("backward() needs a scalar output, got shape " + out.value.shape_string());
  }
  if (!record_) throw ContractError("backward() on a tape that does not record gradients");

  Gradients result;
  result.tape_ = this;
  result.output_id_ = scalar_output.id();
  result.grads_.resize(scalar_output.id() + 1);
  result.grads_[scalar_output.id()] = Tensor(out.value.shape(), 1.0);

  BackwardContext ctx;
  for (std::size_t id = scalar_output.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!node.rule || result.grads_[id].empty()) continue;
    ctx.out_grad_ = &result.grads_[id];
    ctx.output_ = &node.value;
    ctx.inputs_.clear();
    ctx.input_grads_.clear();
    for (std::size_t in : node.inputs) {
      ctx.inputs_.push_back(&nodes_[in].value);
      if (nodes_[in].requires_grad) {
        if (result.grads_[in].empty()) result.grads_[in] = Tensor(nodes_[in].value.shape(), 0.0);
        ctx.input_grads_.push_back(&result.grads_[in]);
      } else {
        ctx.input_grads_.push_back(nullptr);
      }
    }
    node.rule(ctx);
  }
  return result;
}

RowMask RowMask::causal(std::size_t n) {
  RowMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c <= r; ++c) m.set(r, c, true);
  return m;
}

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + t.shape_string());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

Tape& tape_of(Var v) {
  if (!v.valid()) throw ContractError("op on an unbound Var");
  return *v.tape();
}

// a[m×k] · b[n×k]ᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a.data().data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = b.data().data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      out.at(i, j) = acc;
    }
  }
  return out;
}

// grad += a[k×m]ᵀ · b[k×n]
void accumulate_tn(Tensor& grad, const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  double* g = grad.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* ar = a.data().data() + p * m;
    const double* br = b.data().data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* gr = g + i * n;
      for (std::size_t j = 0; j < n; ++j) gr[j] += av * br[j];
    }
  }
}

// grad += a[m×n] · b[k×n]ᵀ
void accumulate_nt(Tensor& grad, const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), n = a.cols(), k = b.rows();
  double* g = grad.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a.data().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* br = b.data().data() + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += ar[j] * br[j];
      g[i * k + p] += acc;
    }
  }
}

// grad += a[m×k] · b[k×n]
void accumulate_nn(Tensor& grad, const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  double* g = grad.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* gr = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.data()[i * k + p];
      if (av == 0.0) continue;
      const double* br = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) gr[j] += av * br[j];
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + a.shape_string() + " x " + b.shape_string());
  }
  Tensor out = Tensor::matrix(a.rows(), b.cols());
  accumulate_nn(out, a, b);
  return out;
}

Tensor softmax_rows(const Tensor& x, const RowMask* mask) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (mask && (mask->rows != m || mask->cols != n)) throw DimensionError("softmax_rows: mask shape mismatch");
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask->at(i, j)) continue;
      mx = std::max(mx, x.at(i, j));
      any = true;
    }
    if (!any) throw DegenerateRowError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask->at(i, j)) continue;
      const double e = std::exp(x.at(i, j) - mx);
      out.at(i, j) = e;
      total += e;
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) *= inv;
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias length must equal last dimension " + std::to_string(d));
  }
  Tensor out(x.shape(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) o[c] = (in[c] - mean) * inv * gain[c] + bias[c];
  }
  return out;
}

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a);
  Tensor out = matmul(a.value(), b.value());
  return tape.push(std::move(out), {a, b}, [](const BackwardContext& ctx) {
    if (auto* ga = ctx.input_grad(0)) accumulate_nt(*ga, ctx.out_grad(), ctx.input(1));
    if (auto* gb = ctx.input_grad(1)) accumulate_tn(*gb, ctx.input(0), ctx.out_grad());
  });
}

Var matmul_transposed(Var a, Var b) {
  Tape& tape = tape_of(a);
  require_matrix(a.value(), "matmul_transposed");
  require_matrix(b.value(), "matmul_transposed");
  if (a.value().cols() != b.value().cols()) {
    throw DimensionError("matmul_transposed: " + a.value().shape_string() + " x " + b.value().shape_string() + "^T");
  }
  Tensor out = matmul_nt(a.value(), b.value());
  return tape.push(std::move(out), {a, b}, [](const BackwardContext& ctx) {
    // out = a bᵀ: da = dout · b, db = doutᵀ · a
    if (auto* ga = ctx.input_grad(0)) accumulate_nn(*ga, ctx.out_grad(), ctx.input(1));
    if (auto* gb = ctx.input_grad(1)) accumulate_tn(*gb, ctx.out_grad(), ctx.input(0));
  });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return tape.push(std::move(out), {a, b}, [](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* gi = ctx.input_grad(k))
        for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return tape.push(std::move(out), {a, b}, [](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (auto* ga = ctx.input_grad(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * ctx.input(1)[i];
    if (auto* gb = ctx.input_grad(1))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * ctx.input(0)[i];
  });
}

Var scale(Var a, double factor) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return tape.push(std::move(out), {a}, [factor](const BackwardContext& ctx) {
    auto* ga = ctx.input_grad(0);
    const Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * factor;
  });
}

Var add_row_vector(Var a, Var bias) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  if (b.size() != x.cols()) throw DimensionError("add_row_vector: bias length != columns");
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  return tape.push(std::move(out), {a, bias}, [](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (auto* ga = ctx.input_grad(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = ctx.input_grad(1)) {
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) (*gb)[c] += row[c];
      }
    }
  });
}

Var gelu(Var a) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v)));
  return tape.push(std::move(out), {a}, [](const BackwardContext& ctx) {
    auto* ga = ctx.input_grad(0);
    const Tensor& x = ctx.input(0);
    const Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x[i];
      const double u = kGeluC * (v + 0.044715 * v * v * v);
      const double t = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
      (*ga)[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

Var relu(Var a) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v = std::max(v, 0.0);
  return tape.push(std::move(out), {a}, [](const BackwardContext& ctx) {
    auto* ga = ctx.input_grad(0);
    const Tensor& x = ctx.input(0);
    const Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) (*ga)[i] += g[i];
  });
}

Var softmax_rows(Var x, const RowMask* mask) {
  Tape& tape = tape_of(x);
  Tensor out = softmax_rows(x.value(), mask);
  // Masked outputs are exactly zero, so the rule below yields zero gradient there.
  return tape.push(std::move(out), {x}, [](const BackwardContext& ctx) {
    auto* gx = ctx.input_grad(0);
    const Tensor& y = ctx.output();
    const Tensor& g = ctx.out_grad();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      double inner = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) inner += yr[c] * gr[c];
      auto out = gx->row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) out[c] += yr[c] * (gr[c] - inner);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& tape = tape_of(x);
  Tensor out = layer_norm(x.value(), gain.value(), bias.value(), eps);
  return tape.push(std::move(out), {x, gain, bias}, [eps](const BackwardContext& ctx) {
    const Tensor& in = ctx.input(0);
    const Tensor& gamma = ctx.input(1);
    const Tensor& g = ctx.out_grad();
    const std::size_t d = in.cols();
    std::vector<double> xhat(d), dxhat(d);
    for (std::size_t r = 0; r < in.rows(); ++r) {
      auto xr = in.row(r);
      auto gr = g.row(r);
      double mean = 0.0;
      for (double v : xr) mean += v;
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (double v : xr) var += (v - mean) * (v - mean);
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        xhat[c] = (xr[c] - mean) * inv;
        dxhat[c] = gr[c] * gamma[c];
        mean_dxhat += dxhat[c];
        mean_dxhat_xhat += dxhat[c] * xhat[c];
      }
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      if (auto* gx = ctx.input_grad(0)) {
        auto o = gx->row(r);
        for (std::size_t c = 0; c < d; ++c) o[c] += inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
      }
      if (auto* gg = ctx.input_grad(1))
        for (std::size_t c = 0; c < d; ++c) (*gg)[c] += gr[c] * xhat[c];
      if (auto* gb = ctx.input_grad(2))
        for (std::size_t c = 0; c < d; ++c) (*gb)[c] += gr[c];
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  require_matrix(x, "slice_cols");
  if (begin + count > x.cols()) throw DimensionError("slice_cols: range exceeds column count");
  Tensor out = Tensor::matrix(x.rows(), count);
  for (std::size_t r = 0; r < x.rows(); ++r)
    std::copy_n(x.row(r).begin() + static_cast<std::ptrdiff_t>(begin), count, out.row(r).begin());
  return tape.push(std::move(out), {a}, [begin, count](const BackwardContext& ctx) {
    auto* ga = ctx.input_grad(0);
    const Tensor& g = ctx.out_grad();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto src = g.row(r);
      auto dst = ga->row(r);
      for (std::size_t c = 0; c < count; ++c) dst[begin + c] += src[c];
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape& tape = tape_of(parts.front());
  const std::size_t rows = parts.front().value().rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != rows) throw DimensionError("concat_cols: row counts differ");
    offsets.push_back(total);
    total += p.value().cols();
  }
  Tensor out = Tensor::matrix(rows, total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& x = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(x.row(r).begin(), x.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offsets[k]));
  }
  return tape.push(std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                   [offsets](const BackwardContext& ctx) {
                     const Tensor& g = ctx.out_grad();
                     for (std::size_t k = 0; k < offsets.size(); ++k) {
                       auto* gk = ctx.input_grad(k);
                       if (!gk) continue;
                       const std::size_t w = gk->cols();
                       for (std::size_t r = 0; r < g.rows(); ++r) {
                         auto src = g.row(r);
                         auto dst = gk->row(r);
                         for (std::size_t c = 0; c < w; ++c) dst[c] += src[offsets[k] + c];
                       }
                     }
                   });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Tape& tape = tape_of(parts.front());
  const std::size_t cols = parts.front().value().cols();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != cols) throw DimensionError("concat_rows: column counts differ");
    offsets.push_back(total);
    total += p.value().rows();
  }
  Tensor out = Tensor::matrix(total, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(offsets[k] * cols));
  }
  return tape.push(std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                   [offsets, cols](const BackwardContext& ctx) {
                     const Tensor& g = ctx.out_grad();
                     for (std::size_t k = 0; k < offsets.size(); ++k) {
                       auto* gk = ctx.input_grad(k);
                       if (!gk) continue;
                       const std::size_t base = offsets[k] * cols;
                       for (std::size_t i = 0; i < gk->size(); ++i) (*gk)[i] += g[base + i];
                     }
                   });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  Tensor out = Tensor::matrix(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) throw DimensionError("gather_rows: row index out of range");
    std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(), out.row(i).begin());
  }
  std::vector<std::size_t> picked(rows.begin(), rows.end());
  return tape.push(std::move(out), {a}, [picked = std::move(picked)](const BackwardContext& ctx) {
    auto* ga = ctx.input_grad(0);
    const Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < picked.size(); ++i) {
      auto src = g.row(i);
      auto dst = ga->row(picked[i]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var sum(Var a) {
  Tape& tape = tape_of(a);
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return tape.push(Tensor::scalar(total), {a}, [](const BackwardContext& ctx) {
    auto* ga = ctx.input_grad(0);
    const double g = ctx.out_grad()[0];
    for (double& v : ga->data()) v += g;
  });
}

Var dot(Var a, Var b) {
  Tape& tape = tape_of(a);
  if (a.value().size() != b.value().size()) throw DimensionError("dot: length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) total += a.value()[i] * b.value()[i];
  return tape.push(Tensor::scalar(total), {a, b}, [](const BackwardContext& ctx) {
    const double g = ctx.out_grad()[0];
    if (auto* ga = ctx.input_grad(0))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g * ctx.input(1)[i];
    if (auto* gb = ctx.input_grad(1))
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g * ctx.input(0)[i];
  });
}

Var element(Var a, std::size_t row, std::size_t col) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  require_matrix(x, "element");
  if (row >= x.rows() || col >= x.cols()) throw DimensionError("element: index out of range");
  return tape.push(Tensor::scalar(x.at(row, col)), {a}, [row, col](const BackwardContext& ctx) {
    ctx.input_grad(0)->at(row, col) += ctx.out_grad()[0];
  });
}

Var stop_gradient(Var a) {
  Tape& tape = tape_of(a);
  return tape.constant(a.value());
}

Var cross_entropy_rows(Var logits, std::span<const std::size_t> rows, std::span<const std::size_t> targets) {
  Tape& tape = tape_of(logits);
  const Tensor& x = logits.value();
  require_matrix(x, "cross_entropy_rows");
  if (rows.size() != targets.size()) throw ContractError("cross_entropy_rows: rows/targets length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows() || targets[i] >= x.cols()) throw DimensionError("cross_entropy_rows: index out of range");
    auto r = x.row(rows[i]);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - mx);
    total += mx + std::log(z) - r[targets[i]];
  }
  std::vector<std::size_t> rs(rows.begin(), rows.end()), ts(targets.begin(), targets.end());
  return tape.push(Tensor::scalar(total), {logits}, [rs = std::move(rs), ts = std::move(ts)](const BackwardContext& ctx) {
    auto* gx = ctx.input_grad(0);
    const Tensor& x = ctx.input(0);
    const double g = ctx.out_grad()[0];
    for (std::size_t i = 0; i < rs.size(); ++i) {
      auto r = x.row(rs[i]);
      const double mx = *std::max_element(r.begin(), r.end());
      double z = 0.0;
      for (double v : r) z += std::exp(v - mx);
      auto out = gx->row(rs[i]);
      for (std::size_t c = 0; c < r.size(); ++c) out[c] += g * std::exp(r[c] - mx) / z;
      out[ts[i]] -= g;
    }
  });
}

}  // namespace flowscope
