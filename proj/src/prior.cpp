#include "neuroalign/prior.hpp"

#include <atomic>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "neuroalign/errors.hpp"

namespace neuroalign {

using ad::Tape;
using ad::Var;

namespace {
std::atomic<std::uint64_t> g_sample_calls{0};
}

void PriorConfig::validate() const {
  if (steps < 1) throw ConfigError("prior: steps must be >= 1");
  if (embedding_dim < 2 || width < 1 || time_embedding_dim < 2) throw ConfigError("prior: invalid widths");
}

DiffusionSchedule DiffusionSchedule::make(int steps, NoiseSchedule kind) {
  if (steps < 1) throw ConfigError("prior: steps must be >= 1");
  DiffusionSchedule s;
  s.beta.resize(steps);
  if (kind == NoiseSchedule::kLinear) {
    const double scale = 1000.0 / steps;
    const double lo = scale * 1e-4;
    const double hi = std::min(scale * 0.02, 0.999);
    for (int t = 0; t < steps; ++t) {
      s.beta[t] = steps == 1 ? hi : lo + (hi - lo) * t / (steps - 1);
    }
  } else {
    constexpr double kOffset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / steps + kOffset) / (1.0 + kOffset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int t = 1; t <= steps; ++t) s.beta[t - 1] = std::min(1.0 - f(t) / f(t - 1), 0.999);
  }
  double running = 1.0;
  for (double b : s.beta) {
    s.alpha.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bar.push_back(running);
  }
  return s;
}

Mat timestep_features(const std::vector<int>& timesteps, int dim) {
  const int half = dim / 2;
  Mat out = Mat::Zero(static_cast<Eigen::Index>(timesteps.size()), dim);
  for (std::size_t r = 0; r < timesteps.size(); ++r) {
    const double t = static_cast<double>(timesteps[r]);
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      out(static_cast<Eigen::Index>(r), k) = std::sin(t * freq);
      out(static_cast<Eigen::Index>(r), half + k) = std::cos(t * freq);
    }
  }
  return out;
}

Var prior_loss(Tape& tape, Var condition, Var targets, const DiffusionSchedule& schedule, const Denoiser& denoiser,
               Rng& rng) {
  if (schedule.steps() < 1) throw ConfigError("prior: steps must be >= 1");
  if (condition.rows() != targets.rows()) throw ConfigError("prior: condition/target batch mismatch");
  const Eigen::Index b = targets.rows();
  const Eigen::Index f = targets.cols();
  std::uniform_int_distribution<int> step_dist(1, schedule.steps());
  std::vector<int> ts(static_cast<std::size_t>(b));
  Mat eps = randn(b, f, rng);
  Mat sig = Mat::Zero(b, 1);
  Mat noise_scale = Mat::Zero(b, 1);
  for (Eigen::Index i = 0; i < b; ++i) {
    ts[static_cast<std::size_t>(i)] = step_dist(rng);
    const double abar = schedule.alpha_bar[ts[static_cast<std::size_t>(i)] - 1];
    sig(i, 0) = std::sqrt(abar);
    noise_scale(i, 0) = std::sqrt(1.0 - abar);
  }
  Mat scaled_noise = eps.array().colwise() * noise_scale.col(0).array();
  Var noisy = ad::add(ad::scale_rows(targets, tape.constant(sig)), tape.constant(scaled_noise));
  Var predicted = denoiser(tape, noisy, ts, condition);
  return ad::mean_square(ad::sub(predicted, tape.constant(eps)));
}

Mat sample_prior(const Mat& condition, const DiffusionSchedule& schedule, const Denoiser& denoiser,
                 std::uint64_t seed) {
  ++g_sample_calls;
  const int steps = schedule.steps();
  if (steps < 1) throw ConfigError("prior: steps must be >= 1");
  Rng rng(seed);
  const Eigen::Index b = condition.rows();
  const Eigen::Index f = condition.cols();
  Mat x = randn(b, f, rng);
  Tape tape(false);
  Var cond = tape.constant(condition);
  for (int t = steps; t >= 1; --t) {
    const std::vector<int> ts(static_cast<std::size_t>(b), t);
    const Mat eps = denoiser(tape, tape.constant(x), ts, cond).value();
    const double beta = schedule.beta[t - 1];
    const double alpha = schedule.alpha[t - 1];
    const double abar = schedule.alpha_bar[t - 1];
    x = (x - (beta / std::sqrt(1.0 - abar)) * eps) / std::sqrt(alpha);
    if (t > 1) x += std::sqrt(beta) * randn(b, f, rng);
  }
  return x;
}

std::uint64_t prior_sample_call_count() { return g_sample_calls.load(); }

DiffusionPrior::DiffusionPrior(PriorConfig config, Rng& rng)
    : config_(config), schedule_(DiffusionSchedule::make(config.steps, config.schedule)) {
  config_.validate();
  const int in = 2 * config_.embedding_dim + config_.time_embedding_dim;
  in_ = nn::Linear(in, config_.width, rng);
  block_norm_ = nn::LayerNorm(config_.width);
  block_ = nn::Mlp(config_.width, 2 * config_.width, config_.width, rng);
  out_norm_ = nn::LayerNorm(config_.width);
  out_ = nn::Linear(config_.width, config_.embedding_dim, rng);
}

Var DiffusionPrior::predict_noise(Tape& tape, Var noisy, const std::vector<int>& timesteps, Var condition) const {
  if (noisy.cols() != config_.embedding_dim || condition.cols() != config_.embedding_dim) {
    throw ConfigError(fmt::format("prior expects width {}", config_.embedding_dim));
  }
  Var temb = tape.constant(timestep_features(timesteps, config_.time_embedding_dim));
  Var h = ad::gelu(in_(tape, ad::hcat({noisy, temb, condition})));
  h = ad::add(h, block_(tape, block_norm_(tape, h)));
  return out_(tape, out_norm_(tape, h));
}

Denoiser DiffusionPrior::denoiser() const {
  return [this](Tape& tape, Var noisy, const std::vector<int>& ts, Var cond) {
    return predict_noise(tape, noisy, ts, cond);
  };
}

Var DiffusionPrior::loss(Tape& tape, Var condition, Var targets, Rng& rng) const {
  return prior_loss(tape, condition, targets, schedule_, denoiser(), rng);
}

Mat DiffusionPrior::sample(const Mat& condition, std::uint64_t seed) const {
  if (!fitted_) throw NotFittedError("diffusion prior has not been trained");
  return sample_prior(condition, schedule_, denoiser(), seed);
}

void DiffusionPrior::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  in_.visit(prefix + ".in", fn);
  block_norm_.visit(prefix + ".block_norm", fn);
  block_.visit(prefix + ".block", fn);
  out_norm_.visit(prefix + ".out_norm", fn);
  out_.visit(prefix + ".out", fn);
}

void DiffusionPrior::visit(const std::string& prefix, const nn::ConstParamVisitor& fn) const {
  in_.visit(prefix + ".in", fn);
  block_norm_.visit(prefix + ".block_norm", fn);
  block_.visit(prefix + ".block", fn);
  out_norm_.visit(prefix + ".out_norm", fn);
  out_.visit(prefix + ".out", fn);
}

}  // namespace neuroalign
