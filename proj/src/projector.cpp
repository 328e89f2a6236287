#include "neuroalign/projector.hpp"

#include <fmt/format.h>

#include "neuroalign/errors.hpp"

namespace neuroalign {

using ad::Tape;
using ad::Var;

void MoEConfig::validate() const {
  if (experts < 1) throw ConfigError("projector: expert count must be >= 1");
  if (output_dim < 2) throw ConfigError("projector: output dim must be >= 2");
  if (input_dim < 1 || router_hidden < 1 || expert_hidden() < 1) throw ConfigError("projector: widths must be positive");
}

MoEProjector::MoEProjector(MoEConfig config, Rng& rng) : config_(config) {
  config_.validate();
  router_ = nn::Mlp(config_.input_dim, config_.router_hidden, config_.experts, rng);
  for (int k = 0; k < config_.experts; ++k) {
    experts_.emplace_back(config_.input_dim, config_.expert_hidden(), config_.output_dim, rng, config_.expert_activation);
  }
}

void MoEProjector::check_tokens(const Var& tokens) const {
  if (tokens.cols() != config_.input_dim) {
    throw ConfigError(fmt::format("projector expects width {}, got {}", config_.input_dim, tokens.cols()));
  }
}

Var MoEProjector::router_logits(Tape& tape, Var tokens) const {
  check_tokens(tokens);
  return router_(tape, tokens);
}

Var MoEProjector::route(Tape& tape, Var tokens) const {
  Var logits = router_logits(tape, tokens);
  if (!logits.value().allFinite()) throw NumericError("router produced non-finite scores");
  if (config_.routing == RoutingNormalization::kSigmoidNormalized) {
    return ad::normalize_sum_rows(ad::sigmoid(logits));
  }
  return ad::softmax_rows(logits);
}

Var MoEProjector::expert(Tape& tape, int k, Var tokens) const {
  check_tokens(tokens);
  return experts_.at(static_cast<std::size_t>(k))(tape, tokens);
}

Var MoEProjector::project(Tape& tape, Var tokens) const {
  Var w = route(tape, tokens);
  Var z;
  for (int k = 0; k < config_.experts; ++k) {
    Var term = ad::scale_rows(expert(tape, k, tokens), ad::cols(w, k, 1));
    z = k == 0 ? term : ad::add(z, term);
  }
  return z;
}

Mat MoEProjector::route(const Mat& tokens) const {
  Tape tape(false);
  return route(tape, tape.constant(tokens)).value();
}

Mat MoEProjector::project(const Mat& tokens) const {
  Tape tape(false);
  return project(tape, tape.constant(tokens)).value();
}

void MoEProjector::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  router_.visit(prefix + ".router", fn);
  for (std::size_t k = 0; k < experts_.size(); ++k) experts_[k].visit(fmt::format("{}.expert{}", prefix, k), fn);
}

void MoEProjector::visit(const std::string& prefix, const nn::ConstParamVisitor& fn) const {
  router_.visit(prefix + ".router", fn);
  for (std::size_t k = 0; k < experts_.size(); ++k) experts_[k].visit(fmt::format("{}.expert{}", prefix, k), fn);
}

}  // namespace neuroalign
