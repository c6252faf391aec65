#include "fmkit/tape.hpp"

#include <stdexcept>

namespace fmkit {

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, false, {}});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::use(Param& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var{this, it->second};
  nodes_.push_back(Node{p.value, {}, nullptr, recording_, false, {}});
  int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(&p, id);
  return Var{this, id};
}

Var Tape::make_node(Tensor value, const std::vector<Var>& parents, BackFn back) {
  bool needs = false;
  std::vector<int> pids;
  pids.reserve(parents.size());
  for (const Var& p : parents) {
    if (p.tape != this) throw std::invalid_argument("make_node: parent from another tape");
    pids.push_back(p.id);
    needs = needs || nodes_[p.id].needs_grad;
  }
  needs = needs && recording_;
  nodes_.push_back(Node{std::move(value), std::move(pids), needs ? std::move(back) : nullptr, needs, false, {}});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(const Var& v) {
  if (v.tape != this || v.id < 0 || v.id >= size()) throw std::invalid_argument("bad Var");
  return nodes_[v.id];
}

const Tape::Node& Tape::node(const Var& v) const {
  if (v.tape != this || v.id < 0 || v.id >= size()) throw std::invalid_argument("bad Var");
  return nodes_[v.id];
}

const Tensor& Tape::val(const Var& v) const { return node(v).value; }

Tensor Tape::grad(const Var& v) const {
  const Node& n = node(v);
  if (!ran_backward_) throw std::logic_error("grad(): backward() has not run");
  if (n.grad_init) return n.grad;
  return Tensor(n.value.shape);
}

Tensor Tape::param_grad(const Param& p) const {
  auto it = param_nodes_.find(&p);
  if (it == param_nodes_.end()) return Tensor(p.value.shape);
  return grad(Var{const_cast<Tape*>(this), it->second});
}

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[id];
  if (!n.grad_init) {
    n.grad = Tensor(n.value.shape);
    n.grad_init = true;
  }
  return n.grad;
}

const Tensor& Tape::grad_at(int id) const {
  const Node& n = nodes_[id];
  if (!n.grad_init) throw std::logic_error("grad_at(): no gradient reached node");
  return n.grad;
}

bool Tape::wants_grad(const Var& v) const { return node(v).needs_grad; }

void Tape::backward(const Var& loss, double seed) {
  if (!recording_) throw std::logic_error("backward() on a non-recording tape");
  if (ran_backward_) throw std::logic_error("backward() already ran on this tape");
  const Node& ln = node(loss);
  if (ln.value.numel() != 1) throw std::invalid_argument("backward(): loss must be scalar, got " + ln.value.shape_str());
  if (!ln.needs_grad) {
    ran_backward_ = true;
    return;
  }
  grad_buf(loss.id).data[0] = seed;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || !n.grad_init || !n.back) continue;
    n.back(*this, i);
  }
  ran_backward_ = true;
}

}  // namespace fmkit
