#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "neuroalign/nn.hpp"

namespace neuroalign {

enum class NoiseSchedule { kLinear, kCosine };

struct PriorConfig {
  int embedding_dim = 16;
  int steps = 100;
  int width = 64;
  int time_embedding_dim = 16;
  NoiseSchedule schedule = NoiseSchedule::kCosine;
  std::uint64_t seed = 0;

  void validate() const;
};

// beta/alpha/alpha_bar indexed by timestep t = 1..steps at position t-1.
struct DiffusionSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  static DiffusionSchedule make(int steps, NoiseSchedule kind);
  int steps() const { return static_cast<int>(beta.size()); }
};

// Predicts the injected noise from (noisy target, per-row timestep, condition).
using Denoiser =
    std::function<ad::Var(ad::Tape&, ad::Var noisy, const std::vector<int>& timesteps, ad::Var condition)>;

// Noise-prediction denoising objective: t ~ U{1..steps}, eps ~ N(0, I),
// x_t = sqrt(abar_t) * targets + sqrt(1 - abar_t) * eps, loss = mean (eps_hat - eps)^2.
ad::Var prior_loss(ad::Tape& tape, ad::Var condition, ad::Var targets, const DiffusionSchedule& schedule,
                   const Denoiser& denoiser, Rng& rng);

// Ancestral sampling from N(0, I), conditioned on `condition` (B x F).
Mat sample_prior(const Mat& condition, const DiffusionSchedule& schedule, const Denoiser& denoiser,
                 std::uint64_t seed);

// Number of sample_prior invocations in this process.
std::uint64_t prior_sample_call_count();

// Sinusoidal timestep features, one row per timestep.
Mat timestep_features(const std::vector<int>& timesteps, int dim);

// Residual-MLP denoiser over concat(noisy target, timestep features, condition).
class DiffusionPrior {
 public:
  DiffusionPrior() = default;
  DiffusionPrior(PriorConfig config, Rng& rng);

  const PriorConfig& config() const { return config_; }
  const DiffusionSchedule& schedule() const { return schedule_; }

  ad::Var predict_noise(ad::Tape& tape, ad::Var noisy, const std::vector<int>& timesteps, ad::Var condition) const;
  Denoiser denoiser() const;
  ad::Var loss(ad::Tape& tape, ad::Var condition, ad::Var targets, Rng& rng) const;
  // Throws NotFittedError until mark_fitted() is called.
  Mat sample(const Mat& condition, std::uint64_t seed) const;

  bool fitted() const { return fitted_; }
  void mark_fitted(bool fitted = true) { fitted_ = fitted; }

  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void visit(const std::string& prefix, const nn::ConstParamVisitor& fn) const;

 private:
  PriorConfig config_;
  DiffusionSchedule schedule_;
  nn::Linear in_;
  nn::LayerNorm block_norm_;
  nn::Mlp block_;
  nn::LayerNorm out_norm_;
  nn::Linear out_;
  bool fitted_ = false;
};

}  // namespace neuroalign
