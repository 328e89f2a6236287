#include "neuroalign/nn.hpp"

#include <cmath>

#include "neuroalign/errors.hpp"

namespace neuroalign::nn {

Linear::Linear(int in, int out, Rng& rng, bool with_bias)
    : weight(randn(in, out, rng, 1.0 / std::sqrt(static_cast<double>(in)))),
      bias(Mat::Zero(1, out)),
      has_bias(with_bias) {}

Var Linear::operator()(Tape& tape, Var x) const {
  Var y = ad::matmul(x, tape.param(weight));
  if (has_bias) y = ad::add_row(y, tape.param(bias));
  return y;
}

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".weight", weight);
  if (has_bias) fn(prefix + ".bias", bias);
}

void Linear::visit(const std::string& prefix, const ConstParamVisitor& fn) const {
  fn(prefix + ".weight", weight);
  if (has_bias) fn(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(int dim) : gain(Mat::Ones(1, dim)), bias(Mat::Zero(1, dim)) {}

Var LayerNorm::operator()(Tape& tape, Var x) const {
  return ad::layer_norm_rows(x, tape.param(gain), tape.param(bias));
}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".gain", gain);
  fn(prefix + ".bias", bias);
}

void LayerNorm::visit(const std::string& prefix, const ConstParamVisitor& fn) const {
  fn(prefix + ".gain", gain);
  fn(prefix + ".bias", bias);
}

Var activate(Var x, Activation act) {
  switch (act) {
    case Activation::kGelu:
      return ad::gelu(x);
    case Activation::kIdentity:
      return x;
  }
  return x;
}

Mlp::Mlp(int in, int hidden, int out, Rng& rng, Activation a)
    : fc1(in, hidden, rng), fc2(hidden, out, rng), act(a) {}

Var Mlp::operator()(Tape& tape, Var x) const { return fc2(tape, activate(fc1(tape, x), act)); }

void Mlp::visit(const std::string& prefix, const ParamVisitor& fn) {
  fc1.visit(prefix + ".fc1", fn);
  fc2.visit(prefix + ".fc2", fn);
}

void Mlp::visit(const std::string& prefix, const ConstParamVisitor& fn) const {
  fc1.visit(prefix + ".fc1", fn);
  fc2.visit(prefix + ".fc2", fn);
}

MultiHeadAttention::MultiHeadAttention(int dim, int h, Rng& rng)
    : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng), heads(h) {
  if (h < 1 || dim % h != 0) throw ConfigError("attention: width must be divisible by head count");
}

AttentionResult MultiHeadAttention::operator()(Tape& tape, Var queries, Var keys_values) const {
  const int d = dim();
  const int dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Var qp = q(tape, queries);
  Var kp = k(tape, keys_values);
  Var vp = v(tape, keys_values);
  AttentionResult res;
  std::vector<Var> head_out;
  head_out.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? qp : ad::cols(qp, h * dh, dh);
    Var kh = heads == 1 ? kp : ad::cols(kp, h * dh, dh);
    Var vh = heads == 1 ? vp : ad::cols(vp, h * dh, dh);
    Var w = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_scale));
    res.weights.push_back(w.value());
    head_out.push_back(ad::matmul(w, vh));
  }
  Var merged = heads == 1 ? head_out.front() : ad::hcat(head_out);
  res.out = o(tape, merged);
  return res;
}

void MultiHeadAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
  q.visit(prefix + ".q", fn);
  k.visit(prefix + ".k", fn);
  v.visit(prefix + ".v", fn);
  o.visit(prefix + ".o", fn);
}

void MultiHeadAttention::visit(const std::string& prefix, const ConstParamVisitor& fn) const {
  q.visit(prefix + ".q", fn);
  k.visit(prefix + ".k", fn);
  v.visit(prefix + ".v", fn);
  o.visit(prefix + ".o", fn);
}

}  // namespace neuroalign::nn
