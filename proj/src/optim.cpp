#include "neuroalign/optim.hpp"

#include <cmath>
#include <string_view>

namespace neuroalign {

void AdamW::step(const NamedParameters& params) {
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (const auto& [name, p] : params) {
    if (p->frozen) {
      p->zero_grad();
      continue;
    }
    auto [it, inserted] = state_.try_emplace(name);
    Moments& s = it->second;
    if (inserted || s.m.rows() != p->value.rows() || s.m.cols() != p->value.cols()) {
      s.m = Mat::Zero(p->value.rows(), p->value.cols());
      s.v = Mat::Zero(p->value.rows(), p->value.cols());
    }
    if (p->grad.size() != p->value.size()) p->zero_grad();
    s.m = config_.beta1 * s.m + (1.0 - config_.beta1) * p->grad;
    s.v = config_.beta2 * s.v + (1.0 - config_.beta2) * p->grad.cwiseAbs2();
    if (config_.weight_decay > 0.0 && std::string_view(name).ends_with(".weight")) {
      p->value *= 1.0 - config_.learning_rate * config_.weight_decay;
    }
    const Mat m_hat = s.m / bc1;
    const Mat v_hat = s.v / bc2;
    p->value.array() -= config_.learning_rate * m_hat.array() / (v_hat.array().sqrt() + config_.eps);
    p->zero_grad();
  }
}

void AdamW::save_state(ArrayFile& file) const {
  Mat step(1, 1);
  step(0, 0) = static_cast<double>(step_);
  file.put("optim/step", step);
  for (const auto& [name, s] : state_) {
    file.put("optim/m/" + name, s.m);
    file.put("optim/v/" + name, s.v);
  }
}

void AdamW::load_state(const ArrayFile& file) {
  state_.clear();
  step_ = 0;
  if (!file.contains("optim/step")) return;
  step_ = static_cast<long long>(file.matrix("optim/step")(0, 0));
  const std::string m_prefix = "optim/m/";
  for (const auto& key : file.names()) {
    if (key.rfind(m_prefix, 0) != 0) continue;
    const std::string name = key.substr(m_prefix.size());
    state_[name] = Moments{file.matrix(key), file.matrix("optim/v/" + name)};
  }
}

}  // namespace neuroalign
