#pragma once

// Reverse-mode differentiation over a closed set of dense primitives.
//
// A Tape lives for one training step. Every primitive appends a node holding
// its forward value and a closure that maps the output gradient onto input
// gradients. backward() walks nodes in decreasing id order, which is a
// reverse topological order because inputs always precede their consumers.

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mesanet/linalg.hpp"

namespace mesanet {

struct NodeId {
  std::size_t index = static_cast<std::size_t>(-1);
  bool valid() const { return index != static_cast<std::size_t>(-1); }
  friend bool operator==(NodeId a, NodeId b) { return a.index == b.index; }
  friend bool operator<(NodeId a, NodeId b) { return a.index < b.index; }
};

// gin[i] is null when input i does not need a gradient. Implementations add
// into *gin[i]; they never overwrite.
using BackwardFn = std::function<void(const Tensor& gout, const std::vector<Tensor*>& gin)>;

class Gradients {
 public:
  const Tensor& at(NodeId id) const;
  bool contains(NodeId id) const { return grads_.count(id) != 0; }
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }
  void set(NodeId id, Tensor g) { grads_[id] = std::move(g); }

 private:
  std::map<NodeId, Tensor> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Constant input; receives no gradient.
  NodeId constant(Tensor value);
  // Differentiable leaf, reported in Gradients.
  NodeId variable(Tensor value, std::string name = {});

  NodeId record(std::string op, std::vector<NodeId> inputs, Tensor value, BackwardFn backward);

  const Tensor& value(NodeId id) const;
  const std::string& op(NodeId id) const;
  const std::string& name(NodeId id) const;
  bool requires_grad(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  // Gradients of a scalar node with respect to every variable. A tape can be
  // differentiated once.
  Gradients backward(NodeId loss);

 private:
  struct Node {
    std::string op;
    std::string name;
    std::vector<NodeId> inputs;
    Tensor value;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_variable = false;
  };
  const Node& node(NodeId id) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

namespace ops {

// Elementwise, or b broadcast along rows when b is rank 1 (or 1 x cols).
NodeId add(Tape& t, NodeId a, NodeId b);
NodeId sub(Tape& t, NodeId a, NodeId b);
NodeId mul(Tape& t, NodeId a, NodeId b);
NodeId matmul(Tape& t, NodeId a, NodeId b);
// x W^T (+ bias), W stored out x in.
NodeId linear(Tape& t, NodeId x, NodeId w);
NodeId linear(Tape& t, NodeId x, NodeId w, NodeId bias);
NodeId scale(Tape& t, NodeId a, double s);
NodeId affine(Tape& t, NodeId a, double alpha, double beta);

// x is (sequences * seq_len) x dim, row s * seq_len + t holding step t of
// sequence s; coeffs is 4 x dim. Causal within each sequence.
NodeId conv4(Tape& t, NodeId x, NodeId coeffs, std::size_t seq_len);

NodeId silu(Tape& t, NodeId a);
NodeId sigmoid(Tape& t, NodeId a);
NodeId softplus(Tape& t, NodeId a);
NodeId tanh(Tape& t, NodeId a);

// Each row is split into contiguous groups of `group` columns that are
// normalized independently. weight has one entry per column.
NodeId rms_norm(Tape& t, NodeId x, NodeId weight, std::size_t group);
NodeId l2_normalize(Tape& t, NodeId x, std::size_t group);

NodeId slice_cols(Tape& t, NodeId x, std::size_t begin, std::size_t count);
NodeId concat_cols(Tape& t, const std::vector<NodeId>& parts);

NodeId embed(Tape& t, NodeId table, const std::vector<int>& tokens);
// Mean over rows with mask > 0 of -log softmax(logits)[target].
NodeId cross_entropy(Tape& t, NodeId logits, const std::vector<int>& targets, const std::vector<double>& mask);
NodeId sum(Tape& t, NodeId a);

}  // namespace ops

}  // namespace mesanet
