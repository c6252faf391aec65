#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fmkit/tensor.hpp"

namespace fmkit {

class Tape;

// Handle to a node on a tape. Cheap to copy; invalid by default.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// A named trainable tensor. Gradients live on the tape that used the
// parameter; the trainer pulls them out after backward() and accumulates
// into its own buffers.
struct Param {
  std::string name;
  Tensor value;
};

// Reverse-mode gradient tape. Nodes are appended in evaluation order, so
// node index order is a topological order and backward() walks it in
// strict reverse. A non-recording tape evaluates values only; primitives
// skip saving anything for backward, which keeps inference memory flat.
class Tape {
 public:
  // Called with the tape and the node's own id; reads grad_at(self) and
  // accumulates into grad_buf(parent).
  using BackFn = std::function<void(Tape&, int)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  // Leaf carrying data with no gradient path.
  Var constant(Tensor value);
  // Leaf for a trainable parameter. Calling use() twice with the same Param
  // on one tape returns the same node, so shared weights accumulate
  // gradients correctly.
  Var use(Param& p);

  // Low-level node constructor used by every primitive (and by tests that
  // need a deliberately wrong backward rule).
  Var make_node(Tensor value, const std::vector<Var>& parents, BackFn back);

  const Tensor& val(const Var& v) const;
  // Gradient accumulated at a node; zeros if the node is off every path to
  // the loss. Only valid after backward().
  Tensor grad(const Var& v) const;
  Tensor param_grad(const Param& p) const;

  // For backward closures: accumulation buffer (allocated on first touch)
  // and the finished upstream gradient of the node itself.
  Tensor& grad_buf(int id);
  const Tensor& grad_at(int id) const;
  const Tensor& val_at(int id) const { return nodes_[id].value; }
  bool wants_grad(const Var& v) const;
  bool id_wants_grad(int id) const { return nodes_[id].needs_grad; }

  // Propagates d(loss)/d(node) to every node. loss must be scalar.
  // seed scales the whole gradient (used for per-sample loss weights).
  void backward(const Var& loss, double seed = 1.0);

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Tensor value;
    std::vector<int> parents;
    BackFn back;
    bool needs_grad = false;
    bool grad_init = false;
    Tensor grad;
  };

  Node& node(const Var& v);
  const Node& node(const Var& v) const;

  std::vector<Node> nodes_;
  std::unordered_map<const Param*, int> param_nodes_;
  bool recording_;
  bool ran_backward_ = false;
};

}  // namespace fmkit
