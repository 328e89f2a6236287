#pragma once

#include <string>
#include <vector>

#include "neuroalign/nn.hpp"

namespace neuroalign {

enum class RoutingNormalization {
  kSoftmax,           // softmax over raw router logits (default)
  kSigmoidNormalized  // sigmoid(logits) / sum(sigmoid(logits))
};

struct MoEConfig {
  int input_dim = 32;  // encoder width D
  int experts = 4;     // K
  int output_dim = 16; // F
  int hidden = 0;      // 0 = 4 * F
  int router_hidden = 32;
  nn::Activation expert_activation = nn::Activation::kGelu;
  RoutingNormalization routing = RoutingNormalization::kSoftmax;

  int expert_hidden() const { return hidden > 0 ? hidden : 4 * output_dim; }
  void validate() const;
};

// Soft mixture of K two-layer expert MLPs. Every token is routed to every
// expert; outputs are mixed by per-token simplex weights.
class MoEProjector {
 public:
  MoEProjector() = default;
  MoEProjector(MoEConfig config, Rng& rng);

  const MoEConfig& config() const { return config_; }

  ad::Var router_logits(ad::Tape& tape, ad::Var tokens) const;
  // B x K, rows on the probability simplex. Throws NumericError on non-finite scores.
  ad::Var route(ad::Tape& tape, ad::Var tokens) const;
  ad::Var expert(ad::Tape& tape, int k, ad::Var tokens) const;
  // B x F unified embeddings.
  ad::Var project(ad::Tape& tape, ad::Var tokens) const;

  Mat route(const Mat& tokens) const;
  Mat project(const Mat& tokens) const;

  nn::Mlp& router() { return router_; }
  std::vector<nn::Mlp>& experts() { return experts_; }

  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void visit(const std::string& prefix, const nn::ConstParamVisitor& fn) const;

 private:
  void check_tokens(const ad::Var& tokens) const;

  MoEConfig config_;
  nn::Mlp router_;
  std::vector<nn::Mlp> experts_;
};

}  // namespace neuroalign
