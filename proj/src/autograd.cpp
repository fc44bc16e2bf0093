// SPDX-License-Identifier: Apache-2.0
#include "sella/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "sella/errors.hpp"

namespace sella {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap cmap(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap mmap(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluK = 0.044715;

[[noreturn]] void shape_error(Op op, const std::string& detail) {
  throw ContractViolation(std::string(op_name(op)) + ": " + detail);
}

void accumulate(Tensor& dst, const Tensor& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

Tensor& slot(std::vector<Tensor>& adj, NodeId id, const Tensor& like) {
  Tensor& t = adj[id.index];
  if (t.empty()) t = Tensor(like.shape());
  return t;
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kVariable: return "variable";
    case Op::kParameter: return "parameter";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kRowSoftmax: return "row_softmax";
    case Op::kCausalSoftmax: return "causal_softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kGelu: return "gelu";
    case Op::kEmbeddingLookup: return "embedding_lookup";
    case Op::kTranspose: return "transpose";
    case Op::kConcatRows: return "concat_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kScatterRows: return "scatter_rows";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kClamp: return "clamp";
    case Op::kCosineSimilarity: return "cosine_similarity";
  }
  return "unknown";
}

const Tensor& Gradients::at(NodeId id) const {
  auto it = by_node_.find(id.index);
  if (it == by_node_.end()) throw LookupError("no gradient recorded for node " + std::to_string(id.index));
  return it->second;
}

const Tensor* Gradients::find(const Parameter& p) const {
  auto it = by_param_.find(&p);
  return it == by_param_.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------------------
// Forward

NodeId Graph::push(Node n) {
  if (n.op != Op::kParameter && !n.value.all_finite()) {
    throw NumericError(std::string(op_name(n.op)) + ": produced non-finite values");
  }
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

const Tensor& Graph::val(NodeId id) const {
  const Node& n = node(id);
  return n.param ? n.param->value : n.value;
}

const Tensor& Graph::value(NodeId id) const {
  if (id.index >= nodes_.size()) throw LookupError("graph: unknown node " + std::to_string(id.index));
  return val(id);
}

bool Graph::any_requires_grad(std::initializer_list<NodeId> ids) const {
  return std::any_of(ids.begin(), ids.end(), [&](NodeId id) { return node(id).requires_grad; });
}

NodeId Graph::constant(Tensor t) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(t);
  return push(std::move(n));
}

NodeId Graph::variable(Tensor t) {
  Node n;
  n.op = Op::kVariable;
  n.value = std::move(t);
  n.requires_grad = true;
  return push(std::move(n));
}

NodeId Graph::parameter(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return NodeId{it->second};
  if (!p.value.all_finite()) throw NumericError("parameter " + p.name + " holds non-finite values");
  Node n;
  n.op = Op::kParameter;
  n.param = &p;
  n.requires_grad = p.trainable;
  NodeId id = push(std::move(n));
  param_nodes_.emplace(&p, id.index);
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& x = val(a);
  const Tensor& y = val(b);
  if (x.cols() != y.rows()) {
    shape_error(Op::kMatmul, "inner dimensions differ: " + shape_str(x.shape()) + " x " + shape_str(y.shape()));
  }
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {a, b};
  n.requires_grad = any_requires_grad({a, b});
  n.value = Tensor::zeros(x.rows(), y.cols());
  mmap(n.value).noalias() = cmap(x) * cmap(y);
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& x = val(a);
  const Tensor& y = val(b);
  const bool bias_row = y.rows() == 1 && x.rows() != 1 && y.cols() == x.cols();
  if (!bias_row && (x.rows() != y.rows() || x.cols() != y.cols())) {
    shape_error(Op::kAdd, "shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()) + " do not conform");
  }
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a, b};
  n.requires_grad = any_requires_grad({a, b});
  n.value = Tensor::zeros(x.rows(), x.cols());
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < c; ++j) n.value(r, j) = x(r, j) + (bias_row ? y(0, j) : y(r, j));
  }
  return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Tensor& x = val(a);
  const Tensor& y = val(b);
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    shape_error(Op::kSub, "shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()) + " differ");
  }
  Node n;
  n.op = Op::kSub;
  n.inputs = {a, b};
  n.requires_grad = any_requires_grad({a, b});
  n.value = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] - y[i];
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& x = val(a);
  const Tensor& y = val(b);
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    shape_error(Op::kMul, "shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()) + " differ");
  }
  Node n;
  n.op = Op::kMul;
  n.inputs = {a, b};
  n.requires_grad = any_requires_grad({a, b});
  n.value = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] * y[i];
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double factor) {
  const Tensor& x = val(a);
  Node n;
  n.op = Op::kScale;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.a = factor;
  n.value = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] * factor;
  return push(std::move(n));
}

NodeId Graph::row_softmax(NodeId a) {
  const Tensor& x = val(a);
  Node n;
  n.op = Op::kRowSoftmax;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row_span(r);
    auto out = n.value.row_span(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) z += (out[j] = std::exp(in[j] - mx));
    for (double& v : out) v /= z;
  }
  return push(std::move(n));
}

NodeId Graph::causal_softmax(NodeId a) {
  const Tensor& x = val(a);
  if (x.rows() != x.cols()) shape_error(Op::kCausalSoftmax, "expected square input, got " + shape_str(x.shape()));
  Node n;
  n.op = Op::kCausalSoftmax;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row_span(r);
    auto out = n.value.row_span(r);
    double mx = in[0];
    for (std::size_t j = 1; j <= r; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (std::size_t j = 0; j <= r; ++j) z += (out[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j <= r; ++j) out[j] /= z;
  }
  return push(std::move(n));
}

NodeId Graph::log_softmax(NodeId a) {
  const Tensor& x = val(a);
  Node n;
  n.op = Op::kLogSoftmax;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row_span(r);
    auto out = n.value.row_span(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (double v : in) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] - lz;
  }
  return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x_id, NodeId gain, NodeId bias) {
  const Tensor& x = val(x_id);
  const Tensor& g = val(gain);
  const Tensor& b = val(bias);
  const std::size_t d = x.cols();
  if (g.rows() != 1 || g.cols() != d || b.rows() != 1 || b.cols() != d) {
    shape_error(Op::kLayerNorm, "gain " + shape_str(g.shape()) + " / bias " + shape_str(b.shape()) +
                                    " must be [1," + std::to_string(d) + "]");
  }
  Node n;
  n.op = Op::kLayerNorm;
  n.inputs = {x_id, gain, bias};
  n.requires_grad = any_requires_grad({x_id, gain, bias});
  n.value = Tensor::zeros(x.rows(), d);
  // saved: normalized rows followed by one column of inverse std per row.
  n.saved = Tensor::zeros(x.rows(), d + 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row_span(r);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (in[j] - mu) * inv;
      n.saved(r, j) = xh;
      n.value(r, j) = xh * g(0, j) + b(0, j);
    }
    n.saved(r, d) = inv;
  }
  return push(std::move(n));
}

NodeId Graph::gelu(NodeId a) {
  const Tensor& x = val(a);
  Node n;
  n.op = Op::kGelu;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    n.value[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluK * v * v * v)));
  }
  return push(std::move(n));
}

NodeId Graph::embedding_lookup(NodeId table, std::vector<std::size_t> indices) {
  const Tensor& t = val(table);
  if (indices.empty()) shape_error(Op::kEmbeddingLookup, "empty index list");
  for (std::size_t idx : indices) {
    if (idx >= t.rows()) {
      throw LookupError("embedding_lookup: index " + std::to_string(idx) + " out of bounds for table " +
                        shape_str(t.shape()));
    }
  }
  Node n;
  n.op = Op::kEmbeddingLookup;
  n.inputs = {table};
  n.requires_grad = node(table).requires_grad;
  n.value = Tensor::zeros(indices.size(), t.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    auto src = t.row_span(indices[r]);
    std::copy(src.begin(), src.end(), n.value.row_span(r).begin());
  }
  n.indices = std::move(indices);
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
  const Tensor& x = val(a);
  Node n;
  n.op = Op::kTranspose;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::zeros(x.cols(), x.rows());
  mmap(n.value) = cmap(x).transpose();
  return push(std::move(n));
}

NodeId Graph::concat_rows(std::span<const NodeId> parts) {
  if (parts.empty()) shape_error(Op::kConcatRows, "no inputs");
  const std::size_t c = val(parts[0]).cols();
  std::size_t total = 0;
  Node n;
  n.op = Op::kConcatRows;
  for (NodeId p : parts) {
    if (val(p).cols() != c) {
      shape_error(Op::kConcatRows, "column count " + std::to_string(val(p).cols()) + " != " + std::to_string(c));
    }
    total += val(p).rows();
    n.inputs.push_back(p);
    n.requires_grad = n.requires_grad || node(p).requires_grad;
  }
  n.value = Tensor::zeros(total, c);
  std::size_t off = 0;
  for (NodeId p : parts) {
    auto src = val(p).data();
    std::copy(src.begin(), src.end(), n.value.data().begin() + static_cast<std::ptrdiff_t>(off * c));
    off += val(p).rows();
  }
  return push(std::move(n));
}

NodeId Graph::concat_cols(std::span<const NodeId> parts) {
  if (parts.empty()) shape_error(Op::kConcatCols, "no inputs");
  const std::size_t r = val(parts[0]).rows();
  std::size_t total = 0;
  Node n;
  n.op = Op::kConcatCols;
  for (NodeId p : parts) {
    if (val(p).rows() != r) {
      shape_error(Op::kConcatCols, "row count " + std::to_string(val(p).rows()) + " != " + std::to_string(r));
    }
    total += val(p).cols();
    n.inputs.push_back(p);
    n.requires_grad = n.requires_grad || node(p).requires_grad;
  }
  n.value = Tensor::zeros(r, total);
  std::size_t off = 0;
  for (NodeId p : parts) {
    const Tensor& src = val(p);
    for (std::size_t i = 0; i < r; ++i) {
      auto s = src.row_span(i);
      std::copy(s.begin(), s.end(), n.value.row_span(i).begin() + static_cast<std::ptrdiff_t>(off));
    }
    off += src.cols();
  }
  return push(std::move(n));
}

NodeId Graph::slice_rows(NodeId a, std::size_t start, std::size_t count) {
  const Tensor& x = val(a);
  if (count == 0 || start + count > x.rows()) {
    shape_error(Op::kSliceRows, "rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                                    ") outside " + shape_str(x.shape()));
  }
  Node n;
  n.op = Op::kSliceRows;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.indices = {start, count};
  n.value = Tensor::zeros(count, x.cols());
  auto src = x.data().subspan(start * x.cols(), count * x.cols());
  std::copy(src.begin(), src.end(), n.value.data().begin());
  return push(std::move(n));
}

NodeId Graph::slice_cols(NodeId a, std::size_t start, std::size_t count) {
  const Tensor& x = val(a);
  if (count == 0 || start + count > x.cols()) {
    shape_error(Op::kSliceCols, "cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                                    ") outside " + shape_str(x.shape()));
  }
  Node n;
  n.op = Op::kSliceCols;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.indices = {start, count};
  n.value = Tensor::zeros(x.rows(), count);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto s = x.row_span(r).subspan(start, count);
    std::copy(s.begin(), s.end(), n.value.row_span(r).begin());
  }
  return push(std::move(n));
}

NodeId Graph::scatter_rows(NodeId base, NodeId rows, std::vector<std::size_t> positions) {
  const Tensor& x = val(base);
  const Tensor& r = val(rows);
  if (r.cols() != x.cols() || r.rows() != positions.size()) {
    shape_error(Op::kScatterRows, "rows " + shape_str(r.shape()) + " incompatible with base " +
                                      shape_str(x.shape()) + " and " + std::to_string(positions.size()) +
                                      " positions");
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= x.rows()) {
      throw LookupError("scatter_rows: position " + std::to_string(positions[i]) + " outside " +
                        std::to_string(x.rows()) + " rows");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (positions[i] == positions[j]) {
        shape_error(Op::kScatterRows, "duplicate position " + std::to_string(positions[i]));
      }
    }
  }
  Node n;
  n.op = Op::kScatterRows;
  n.inputs = {base, rows};
  n.requires_grad = any_requires_grad({base, rows});
  n.value = x;
  for (std::size_t k = 0; k < positions.size(); ++k) {
    auto s = r.row_span(k);
    std::copy(s.begin(), s.end(), n.value.row_span(positions[k]).begin());
  }
  n.indices = std::move(positions);
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  const Tensor& x = val(a);
  double s = 0.0;
  for (double v : x.data()) s += v;
  Node n;
  n.op = Op::kSum;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

NodeId Graph::mean(NodeId a) {
  const Tensor& x = val(a);
  double s = 0.0;
  for (double v : x.data()) s += v;
  Node n;
  n.op = Op::kMean;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::scalar(s / static_cast<double>(x.size()));
  return push(std::move(n));
}

NodeId Graph::sigmoid(NodeId a) {
  const Tensor& x = val(a);
  Node n;
  n.op = Op::kSigmoid;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    n.value[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return push(std::move(n));
}

NodeId Graph::log(NodeId a) {
  const Tensor& x = val(a);
  Node n;
  n.op = Op::kLog;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = std::log(x[i]);
  return push(std::move(n));
}

NodeId Graph::exp(NodeId a) {
  const Tensor& x = val(a);
  Node n;
  n.op = Op::kExp;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = std::exp(x[i]);
  return push(std::move(n));
}

NodeId Graph::clamp(NodeId a, double lo, double hi) {
  if (!(lo <= hi)) shape_error(Op::kClamp, "lo > hi");
  const Tensor& x = val(a);
  Node n;
  n.op = Op::kClamp;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.a = lo;
  n.b = hi;
  n.value = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = std::clamp(x[i], lo, hi);
  return push(std::move(n));
}

NodeId Graph::cosine_similarity(NodeId a, NodeId b) {
  const Tensor& x = val(a);
  const Tensor& y = val(b);
  if (x.cols() != y.cols()) {
    shape_error(Op::kCosineSimilarity, "row widths differ: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  Node n;
  n.op = Op::kCosineSimilarity;
  n.inputs = {a, b};
  n.requires_grad = any_requires_grad({a, b});
  // saved: row norms of a, then row norms of b.
  n.saved = Tensor::zeros(1, x.rows() + y.rows());
  auto norms = [&](const Tensor& t, std::size_t off) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      double s = 0.0;
      for (double v : t.row_span(r)) s += v * v;
      if (s == 0.0) {
        shape_error(Op::kCosineSimilarity, "zero-norm row " + std::to_string(r) + " (degenerate embedding)");
      }
      n.saved[off + r] = std::sqrt(s);
    }
  };
  norms(x, 0);
  norms(y, x.rows());
  n.value = Tensor::zeros(x.rows(), y.rows());
  mmap(n.value).noalias() = cmap(x) * cmap(y).transpose();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < y.rows(); ++j) n.value(i, j) /= n.saved[i] * n.saved[x.rows() + j];
  }
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Backward

Gradients Graph::backward(NodeId loss) const {
  if (loss.index >= nodes_.size()) throw LookupError("backward: loss node not in graph");
  if (!val(loss).is_scalar()) {
    throw ContractViolation("backward: loss must be scalar, got " + shape_str(val(loss).shape()));
  }
  std::vector<Tensor> adj(nodes_.size());
  if (node(loss).requires_grad) adj[loss.index] = Tensor(val(loss).shape(), {1.0});
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (!nodes_[i].requires_grad || adj[i].empty()) continue;
    backprop_node(i, adj);
  }
  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.requires_grad || (n.op != Op::kVariable && n.op != Op::kParameter)) continue;
    Tensor g = adj[i].empty() ? Tensor(val(NodeId{i}).shape()) : std::move(adj[i]);
    if (n.param) out.by_param_.emplace(n.param, g);
    out.by_node_.emplace(i, std::move(g));
  }
  return out;
}

void Graph::backprop_node(std::size_t i, std::vector<Tensor>& adj) const {
  const Node& n = nodes_[i];
  const Tensor& g = adj[i];
  auto needs = [&](std::size_t k) { return nodes_[n.inputs[k].index].requires_grad; };
  auto in = [&](std::size_t k) -> const Tensor& { return val(n.inputs[k]); };

  switch (n.op) {
    case Op::kConstant:
    case Op::kVariable:
    case Op::kParameter:
      return;
    case Op::kMatmul: {
      if (needs(0)) {
        Tensor& d = slot(adj, n.inputs[0], in(0));
        mmap(d).noalias() += cmap(g) * cmap(in(1)).transpose();
      }
      if (needs(1)) {
        Tensor& d = slot(adj, n.inputs[1], in(1));
        mmap(d).noalias() += cmap(in(0)).transpose() * cmap(g);
      }
      return;
    }
    case Op::kAdd: {
      if (needs(0)) accumulate(adj[n.inputs[0].index], g);
      if (needs(1)) {
        const Tensor& y = in(1);
        if (y.rows() == g.rows()) {
          accumulate(adj[n.inputs[1].index], g);
        } else {
          Tensor& d = slot(adj, n.inputs[1], y);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t j = 0; j < g.cols(); ++j) d(0, j) += g(r, j);
          }
        }
      }
      return;
    }
    case Op::kSub: {
      if (needs(0)) accumulate(adj[n.inputs[0].index], g);
      if (needs(1)) {
        Tensor& d = slot(adj, n.inputs[1], in(1));
        for (std::size_t k = 0; k < g.size(); ++k) d[k] -= g[k];
      }
      return;
    }
    case Op::kMul: {
      for (std::size_t side = 0; side < 2; ++side) {
        if (!needs(side)) continue;
        const Tensor& other = in(1 - side);
        Tensor& d = slot(adj, n.inputs[side], in(side));
        for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k] * other[k];
      }
      return;
    }
    case Op::kScale: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k] * n.a;
      return;
    }
    case Op::kRowSoftmax:
    case Op::kCausalSoftmax: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      const Tensor& y = n.value;
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row_span(r);
        auto gr = g.row_span(r);
        auto dr = d.row_span(r);
        double dot = 0.0;
        for (std::size_t j = 0; j < yr.size(); ++j) dot += gr[j] * yr[j];
        for (std::size_t j = 0; j < yr.size(); ++j) dr[j] += yr[j] * (gr[j] - dot);
      }
      return;
    }
    case Op::kLogSoftmax: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      const Tensor& y = n.value;
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row_span(r);
        auto gr = g.row_span(r);
        auto dr = d.row_span(r);
        double gs = 0.0;
        for (double v : gr) gs += v;
        for (std::size_t j = 0; j < yr.size(); ++j) dr[j] += gr[j] - std::exp(yr[j]) * gs;
      }
      return;
    }
    case Op::kLayerNorm: {
      const Tensor& gain = in(1);
      const std::size_t d = gain.cols();
      const double inv_d = 1.0 / static_cast<double>(d);
      if (needs(1) || needs(2)) {
        Tensor* dg = needs(1) ? &slot(adj, n.inputs[1], gain) : nullptr;
        Tensor* db = needs(2) ? &slot(adj, n.inputs[2], in(2)) : nullptr;
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t j = 0; j < d; ++j) {
            if (dg) (*dg)(0, j) += g(r, j) * n.saved(r, j);
            if (db) (*db)(0, j) += g(r, j);
          }
        }
      }
      if (needs(0)) {
        Tensor& dx = slot(adj, n.inputs[0], in(0));
        for (std::size_t r = 0; r < g.rows(); ++r) {
          const double inv = n.saved(r, d);
          double s1 = 0.0;
          double s2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = g(r, j) * gain(0, j);
            s1 += gh;
            s2 += gh * n.saved(r, j);
          }
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = g(r, j) * gain(0, j);
            dx(r, j) += inv * (gh - inv_d * s1 - n.saved(r, j) * inv_d * s2);
          }
        }
      }
      return;
    }
    case Op::kGelu: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      const Tensor& x = in(0);
      for (std::size_t k = 0; k < g.size(); ++k) {
        const double v = x[k];
        const double t = std::tanh(kGeluC * (v + kGeluK * v * v * v));
        const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * v * v);
        d[k] += g[k] * (0.5 * (1.0 + t) + 0.5 * v * dt);
      }
      return;
    }
    case Op::kEmbeddingLookup: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        auto src = g.row_span(r);
        auto dst = d.row_span(n.indices[r]);
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
      }
      return;
    }
    case Op::kTranspose: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      mmap(d) += cmap(g).transpose();
      return;
    }
    case Op::kConcatRows: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& part = in(k);
        if (needs(k)) {
          Tensor& d = slot(adj, n.inputs[k], part);
          auto src = g.data().subspan(off * g.cols(), part.size());
          for (std::size_t q = 0; q < src.size(); ++q) d[q] += src[q];
        }
        off += part.rows();
      }
      return;
    }
    case Op::kConcatCols: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& part = in(k);
        if (needs(k)) {
          Tensor& d = slot(adj, n.inputs[k], part);
          for (std::size_t r = 0; r < part.rows(); ++r) {
            for (std::size_t j = 0; j < part.cols(); ++j) d(r, j) += g(r, off + j);
          }
        }
        off += part.cols();
      }
      return;
    }
    case Op::kSliceRows: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      const std::size_t start = n.indices[0];
      auto dst = d.data().subspan(start * d.cols(), g.size());
      for (std::size_t q = 0; q < g.size(); ++q) dst[q] += g[q];
      return;
    }
    case Op::kSliceCols: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      const std::size_t start = n.indices[0];
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t j = 0; j < g.cols(); ++j) d(r, start + j) += g(r, j);
      }
      return;
    }
    case Op::kScatterRows: {
      if (needs(0)) {
        Tensor& d = slot(adj, n.inputs[0], in(0));
        // Replaced rows do not reach the output.
        std::vector<bool> replaced(g.rows(), false);
        for (std::size_t p : n.indices) replaced[p] = true;
        for (std::size_t r = 0; r < g.rows(); ++r) {
          if (replaced[r]) continue;
          auto gr = g.row_span(r);
          auto dr = d.row_span(r);
          for (std::size_t j = 0; j < gr.size(); ++j) dr[j] += gr[j];
        }
      }
      if (needs(1)) {
        Tensor& d = slot(adj, n.inputs[1], in(1));
        for (std::size_t k = 0; k < n.indices.size(); ++k) {
          auto gr = g.row_span(n.indices[k]);
          auto dr = d.row_span(k);
          for (std::size_t j = 0; j < gr.size(); ++j) dr[j] += gr[j];
        }
      }
      return;
    }
    case Op::kSum:
    case Op::kMean: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      const double s = n.op == Op::kSum ? g[0] : g[0] / static_cast<double>(d.size());
      for (double& v : d.data()) v += s;
      return;
    }
    case Op::kSigmoid: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k] * n.value[k] * (1.0 - n.value[k]);
      return;
    }
    case Op::kLog: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      const Tensor& x = in(0);
      for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k] / x[k];
      return;
    }
    case Op::kExp: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k] * n.value[k];
      return;
    }
    case Op::kClamp: {
      Tensor& d = slot(adj, n.inputs[0], in(0));
      const Tensor& x = in(0);
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (x[k] >= n.a && x[k] <= n.b) d[k] += g[k];
      }
      return;
    }
    case Op::kCosineSimilarity: {
      const Tensor& x = in(0);
      const Tensor& y = in(1);
      const Tensor& c = n.value;
      const std::size_t nx = x.rows();
      const std::size_t dim = x.cols();
      if (needs(0)) {
        Tensor& d = slot(adj, n.inputs[0], x);
        for (std::size_t i2 = 0; i2 < nx; ++i2) {
          const double na = n.saved[i2];
          auto xr = x.row_span(i2);
          auto dr = d.row_span(i2);
          for (std::size_t j = 0; j < y.rows(); ++j) {
            const double gij = g(i2, j);
            if (gij == 0.0) continue;
            const double nb = n.saved[nx + j];
            auto yr = y.row_span(j);
            for (std::size_t k = 0; k < dim; ++k) {
              dr[k] += gij * (yr[k] / (na * nb) - c(i2, j) * xr[k] / (na * na));
            }
          }
        }
      }
      if (needs(1)) {
        Tensor& d = slot(adj, n.inputs[1], y);
        for (std::size_t j = 0; j < y.rows(); ++j) {
          const double nb = n.saved[nx + j];
          auto yr = y.row_span(j);
          auto dr = d.row_span(j);
          for (std::size_t i2 = 0; i2 < nx; ++i2) {
            const double gij = g(i2, j);
            if (gij == 0.0) continue;
            const double na = n.saved[i2];
            auto xr = x.row_span(i2);
            for (std::size_t k = 0; k < dim; ++k) {
              dr[k] += gij * (xr[k] / (na * nb) - c(i2, j) * yr[k] / (nb * nb));
            }
          }
        }
      }
      return;
    }
  }
}

double grad_check(const std::function<NodeId(Graph&)>& build, Parameter& param, double step) {
  if (!(step > 0.0)) throw ContractViolation("grad_check: step must be positive");
  const bool was_trainable = param.trainable;
  param.trainable = true;
  Tensor analytic;
  {
    Graph g;
    NodeId loss = build(g);
    Gradients grads = g.backward(loss);
    const Tensor* found = grads.find(param);
    analytic = found ? *found : Tensor(param.value.shape());
  }
  param.trainable = false;
  auto eval = [&]() {
    Graph g;
    return g.value(build(g)).item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < param.value.size(); ++k) {
    const double orig = param.value[k];
    param.value[k] = orig + step;
    const double up = eval();
    param.value[k] = orig - step;
    const double down = eval();
    param.value[k] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[k] - numeric) / std::max(1.0, std::abs(analytic[k]));
    worst = std::max(worst, err);
  }
  param.trainable = was_trainable;
  return worst;
}

}  // namespace sella
