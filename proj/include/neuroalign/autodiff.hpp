#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace neuroalign {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

namespace ad {

// A trainable tensor. `grad` is owned by the optimizer loop; the tape never
// writes into it directly (see Tape::gradient).
struct Parameter {
  Mat value;
  Mat grad;
  bool frozen = false;

  Parameter() = default;
  explicit Parameter(Mat v) : value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  // Scalar value of a 1x1 node.
  double item() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape over dense row-major matrices. Nodes live in a deque so
// references returned by value() stay valid while more nodes are recorded.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Mat value);
  Var param(const Parameter& p);
  // Records an op output. `backward` runs only if some input requires grad.
  Var record(Mat value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Mat value, const std::vector<Var>& inputs, Backward backward);

  // Seeds d(root)/d(root) = 1 and propagates. Root must be 1x1.
  void backward(const Var& root);

  const Mat& value(const Var& v) const { return nodes_[v.id()].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  // Adds `g` to the gradient of `v` (no-op when v does not require grad).
  void accumulate(const Var& v, const Mat& g);
  // Gradient w.r.t. a node after backward(); zero matrix if untouched.
  Mat grad(const Var& v) const;
  // Summed gradient for every leaf that referenced `p`. Zero if unused.
  Mat gradient(const Parameter& p) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Backward backward;
    const Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, Mat> param_grads_;
  bool grad_enabled_;
};

}  // namespace ad
}  // namespace neuroalign
