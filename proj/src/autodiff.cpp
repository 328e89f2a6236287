#include "neuroalign/autodiff.hpp"

#include "neuroalign/errors.hpp"

namespace neuroalign::ad {

const Mat& Var::value() const { return tape_->value(*this); }

double Var::item() const {
  const Mat& v = value();
  if (v.size() != 1) throw ConfigError("item() on a non-scalar node");
  return v(0, 0);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::param(const Parameter& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_ && !p.frozen;
  return push(std::move(n));
}

Var Tape::record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (nodes_[in.id()].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  return push(std::move(n));
}

Var Tape::record(Mat value, const std::vector<Var>& inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (nodes_[in.id()].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  return push(std::move(n));
}

void Tape::accumulate(const Var& v, const Mat& g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw ConfigError("backward on a foreign node");
  Node& r = nodes_[root.id()];
  if (r.value.size() != 1) throw ConfigError("backward root must be a scalar");
  if (!r.requires_grad) return;
  r.grad = Mat::Ones(1, 1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.backward) {
      n.backward(*this, n.grad);
    } else if (n.param != nullptr) {
      auto [it, inserted] = param_grads_.try_emplace(n.param, n.grad);
      if (!inserted) it->second += n.grad;
    }
  }
}

Mat Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Mat Tape::gradient(const Parameter& p) const {
  auto it = param_grads_.find(&p);
  if (it == param_grads_.end()) return Mat::Zero(p.value.rows(), p.value.cols());
  return it->second;
}

}  // namespace neuroalign::ad
