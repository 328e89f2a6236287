#include "neuroalign/objectives.hpp"

#include <cmath>

#include <fmt/format.h>

#include "neuroalign/errors.hpp"

namespace neuroalign {

using ad::Tape;
using ad::Var;

void LossConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("loss: tau must be positive");
  for (double w : {contrastive_weight, alpha, beta, lambda_p}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss: weights must be finite and nonnegative");
  }
}

LossConfig LossConfig::retrieval(double tau) { return LossConfig{tau, 1.0, 0.0, 0.0, 0.0}; }

LossConfig LossConfig::generation(double alpha, double beta, double tau) {
  return LossConfig{tau, 1.0, alpha, beta, 0.0};
}

LossConfig LossConfig::captioning() { return LossConfig{0.07, 0.0, 1.0, 0.0, 0.0}; }

Var softclip_loss(Var predictions, Var targets, double tau) {
  if (!(tau > 0.0)) throw ConfigError("softclip: tau must be positive");
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw ConfigError(fmt::format("softclip: predictions {}x{} vs targets {}x{}", predictions.rows(),
                                  predictions.cols(), targets.rows(), targets.cols()));
  }
  if (predictions.rows() < 1) throw ConfigError("softclip: empty batch");
  Var p = ad::l2_normalize_rows(predictions);
  Var t = ad::l2_normalize_rows(targets);
  Var soft_targets = ad::softmax_rows(ad::scale(ad::matmul_nt(t, t), 1.0 / tau));
  Var log_pred = ad::log_softmax_rows(ad::scale(ad::matmul_nt(p, t), 1.0 / tau));
  return ad::scale(ad::sum(ad::mul(soft_targets, log_pred)), -1.0);
}

double softclip_loss(const Mat& predictions, const Mat& targets, double tau) {
  Tape tape(false);
  return softclip_loss(tape.constant(predictions), tape.constant(targets), tau).item();
}

Var mse_loss(Var predictions, Var targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw ConfigError("mse: shape mismatch");
  }
  return ad::mean_square(ad::sub(predictions, targets));
}

double mse_loss(const Mat& predictions, const Mat& targets) {
  Tape tape(false);
  return mse_loss(tape.constant(predictions), tape.constant(targets)).item();
}

CompoundLoss compound_loss(Var predictions, Var targets, std::optional<Var> prior_term, const LossConfig& config) {
  config.validate();
  Tape& tape = *predictions.tape();
  CompoundLoss out;
  Var total = tape.constant(Mat::Zero(1, 1));
  if (config.contrastive_weight > 0.0) {
    Var s = softclip_loss(predictions, targets, config.tau);
    out.terms.softclip = s.item();
    total = ad::add(total, ad::scale(s, config.contrastive_weight));
  }
  if (config.alpha > 0.0) {
    Var m = mse_loss(predictions, targets);
    out.terms.mse = m.item();
    total = ad::add(total, ad::scale(m, config.alpha));
  }
  if (config.beta > 0.0) {
    if (!prior_term) throw ConfigError("compound loss: beta > 0 needs a prior term");
    out.terms.prior = prior_term->item();
    total = ad::add(total, ad::scale(*prior_term, config.beta));
  }
  out.total = total;
  out.terms.total = total.item();
  return out;
}

LossBreakdown compound_loss(const Mat& predictions, const Mat& targets, double prior_term, const LossConfig& config) {
  Tape tape(false);
  Mat p(1, 1);
  p(0, 0) = prior_term;
  return compound_loss(tape.constant(predictions), tape.constant(targets), tape.constant(p), config).terms;
}

Var lowlevel_loss(Tape& tape, Var f_hat, Var f, const Decoder& decoder, const PerceptualMetric& perceptual,
                  double lambda_p) {
  if (!(lambda_p >= 0.0)) throw ConfigError("lowlevel: lambda_p must be nonnegative");
  if (f_hat.rows() != f.rows() || f_hat.cols() != f.cols()) throw FormatError("lowlevel: feature map shape mismatch");
  Var img = decoder(tape, f);
  Var img_hat = decoder(tape, f_hat);
  if (img.rows() != img_hat.rows() || img.cols() != img_hat.cols()) {
    throw FormatError("lowlevel: decoder output shapes differ");
  }
  Var total = ad::add(ad::mean_abs(ad::sub(img, img_hat)), ad::mean_abs(ad::sub(f, f_hat)));
  if (lambda_p > 0.0) total = ad::add(total, ad::scale(perceptual(tape, img_hat), lambda_p));
  return total;
}

double lowlevel_loss(const Mat& f_hat, const Mat& f, const Decoder& decoder, const PerceptualMetric& perceptual,
                     double lambda_p) {
  Tape tape(false);
  return lowlevel_loss(tape, tape.constant(f_hat), tape.constant(f), decoder, perceptual, lambda_p).item();
}

Var LinearDecoder::operator()(Tape& tape, Var feature_map) const {
  if (feature_map.cols() != weight.rows()) throw FormatError("decoder: channel mismatch");
  return ad::matmul(feature_map, tape.constant(weight));
}

BlurDifferenceMetric::BlurDifferenceMetric(int height, int width, double sigma) {
  if (height < 1 || width < 1 || !(sigma > 0.0)) throw ConfigError("blur metric: invalid geometry");
  const int radius = static_cast<int>(std::ceil(2.0 * sigma));
  auto kernel_1d = [&](int n) {
    Mat k = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i) {
      double total = 0.0;
      for (int j = std::max(0, i - radius); j <= std::min(n - 1, i + radius); ++j) {
        const double w = std::exp(-0.5 * (i - j) * (i - j) / (sigma * sigma));
        k(i, j) = w;
        total += w;
      }
      k.row(i) /= total;
    }
    return k;
  };
  const Mat kh = kernel_1d(height);
  const Mat kw = kernel_1d(width);
  // Separable blur on row-major pixels (y * width + x) is the Kronecker product.
  blur_ = Mat::Zero(height * width, height * width);
  for (int y = 0; y < height; ++y) {
    for (int y2 = 0; y2 < height; ++y2) {
      if (kh(y, y2) == 0.0) continue;
      blur_.block(y * width, y2 * width, width, width) = kh(y, y2) * kw;
    }
  }
}

Var BlurDifferenceMetric::operator()(Tape& tape, Var image) const {
  if (image.rows() != blur_.rows()) throw FormatError("blur metric: image size mismatch");
  return ad::mean_abs(ad::sub(image, ad::matmul(tape.constant(blur_), image)));
}

}  // namespace neuroalign
