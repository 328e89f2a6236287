#pragma once

#include <functional>
#include <string>
#include <vector>

#include "neuroalign/autodiff.hpp"
#include "neuroalign/ops.hpp"
#include "neuroalign/rng.hpp"

namespace neuroalign::nn {

using ad::Parameter;
using ad::Tape;
using ad::Var;

// Called once per parameter with its fully qualified name.
using ParamVisitor = std::function<void(const std::string& name, Parameter& p)>;
using ConstParamVisitor = std::function<void(const std::string& name, const Parameter& p)>;

enum class Activation { kGelu, kIdentity };

// y = x W + b, W stored in x out.
struct Linear {
  Parameter weight;
  Parameter bias;
  bool has_bias = true;

  Linear() = default;
  Linear(int in, int out, Rng& rng, bool with_bias = true);

  int in_features() const { return static_cast<int>(weight.value.rows()); }
  int out_features() const { return static_cast<int>(weight.value.cols()); }

  Var operator()(Tape& tape, Var x) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
  void visit(const std::string& prefix, const ConstParamVisitor& fn) const;
};

struct LayerNorm {
  Parameter gain;
  Parameter bias;

  LayerNorm() = default;
  explicit LayerNorm(int dim);

  Var operator()(Tape& tape, Var x) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
  void visit(const std::string& prefix, const ConstParamVisitor& fn) const;
};

// Linear -> activation -> Linear.
struct Mlp {
  Linear fc1;
  Linear fc2;
  Activation act = Activation::kGelu;

  Mlp() = default;
  Mlp(int in, int hidden, int out, Rng& rng, Activation act = Activation::kGelu);

  Var operator()(Tape& tape, Var x) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
  void visit(const std::string& prefix, const ConstParamVisitor& fn) const;
};

struct AttentionResult {
  Var out;
  // One (queries x keys) matrix per head; every row lies on the simplex.
  std::vector<Mat> weights;
};

// Scaled dot-product multi-head attention with input/output projections.
struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int heads, Rng& rng);

  int dim() const { return q.in_features(); }

  AttentionResult operator()(Tape& tape, Var queries, Var keys_values) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
  void visit(const std::string& prefix, const ConstParamVisitor& fn) const;
};

Var activate(Var x, Activation act);

}  // namespace neuroalign::nn
