// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sella/parameter.hpp"
#include "sella/tensor.hpp"

namespace sella {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class Op {
  kConstant,
  kVariable,
  kParameter,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kRowSoftmax,
  kCausalSoftmax,
  kLogSoftmax,
  kLayerNorm,
  kGelu,
  kEmbeddingLookup,
  kTranspose,
  kConcatRows,
  kConcatCols,
  kSliceRows,
  kSliceCols,
  kScatterRows,
  kSum,
  kMean,
  kSigmoid,
  kLog,
  kExp,
  kClamp,
  kCosineSimilarity,
};

std::string_view op_name(Op op);

inline constexpr double kLayerNormEps = 1e-5;

// Gradients produced by Graph::backward, keyed by leaf node.
class Gradients {
 public:
  const Tensor& at(NodeId id) const;
  bool contains(NodeId id) const { return by_node_.contains(id.index); }
  // Gradient for a parameter registered in the graph, or nullptr when the
  // parameter was frozen or absent.
  const Tensor* find(const Parameter& p) const;

  const std::unordered_map<const Parameter*, Tensor>& by_parameter() const { return by_param_; }

 private:
  friend class Graph;
  std::unordered_map<std::size_t, Tensor> by_node_;
  std::unordered_map<const Parameter*, Tensor> by_param_;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node
// vector is always a topological order. Every primitive checks its shape
// rule and rejects non-finite results.
//
// Shape rules (all tensors rank 2):
//   matmul        [n,k] x [k,m] -> [n,m]
//   add           [n,m] + [n,m] or [n,m] + [1,m] (bias row) -> [n,m]
//   sub, mul      elementwise, identical shapes
//   row_softmax   softmax of each row; causal_softmax zeroes j > i on [n,n]
//   layer_norm    [n,d] with gain/bias [1,d], eps kLayerNormEps
//   gelu          tanh approximation
//   embedding_lookup  table [V,d], indices < V -> [len,d]
//   cosine_similarity [n,d], [m,d] -> [n,m]; zero rows are an error
//   sum, mean     -> [1,1]
class Graph {
 public:
  NodeId constant(Tensor t);
  NodeId variable(Tensor t);
  // Leaf that reads the parameter's storage without copying. The same
  // parameter added twice yields the same node.
  NodeId parameter(const Parameter& p);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId row_softmax(NodeId a);
  NodeId causal_softmax(NodeId a);
  NodeId log_softmax(NodeId a);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);
  NodeId gelu(NodeId a);
  NodeId embedding_lookup(NodeId table, std::vector<std::size_t> indices);
  NodeId transpose(NodeId a);
  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId concat_cols(std::span<const NodeId> parts);
  NodeId slice_rows(NodeId a, std::size_t start, std::size_t count);
  NodeId slice_cols(NodeId a, std::size_t start, std::size_t count);
  // Copy of `base` with row positions[k] replaced by row k of `rows`.
  NodeId scatter_rows(NodeId base, NodeId rows, std::vector<std::size_t> positions);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId log(NodeId a);
  NodeId exp(NodeId a);
  NodeId clamp(NodeId a, double lo, double hi);
  NodeId cosine_similarity(NodeId a, NodeId b);

  const Tensor& value(NodeId id) const;
  Op op(NodeId id) const { return nodes_.at(id.index).op; }
  bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradients of a scalar loss with respect to every leaf that requires a
  // gradient. Leaves with no path to the loss receive zeros.
  Gradients backward(NodeId loss) const;

 private:
  struct Node {
    Op op = Op::kConstant;
    std::vector<NodeId> inputs;
    Tensor value;
    const Parameter* param = nullptr;
    bool requires_grad = false;
    double a = 0.0;
    double b = 0.0;
    std::vector<std::size_t> indices;
    Tensor saved;
  };

  NodeId push(Node node);
  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  const Tensor& val(NodeId id) const;
  bool any_requires_grad(std::initializer_list<NodeId> ids) const;
  void backprop_node(std::size_t i, std::vector<Tensor>& adj) const;

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

// Max over the parameter's entries of |analytic - numeric| / max(1, |analytic|),
// where numeric is the central difference with the given step. `build`
// constructs the scalar loss from scratch on each call.
double grad_check(const std::function<NodeId(Graph&)>& build, Parameter& param, double step);

}  // namespace sella
