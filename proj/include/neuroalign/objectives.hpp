#pragma once

#include <functional>
#include <optional>

#include "neuroalign/autodiff.hpp"
#include "neuroalign/ops.hpp"

namespace neuroalign {

struct LossConfig {
  double tau = 0.07;
  double contrastive_weight = 1.0;  // 0 in the captioning preset
  double alpha = 0.0;               // MSE weight
  double beta = 0.0;                // diffusion prior weight
  double lambda_p = 0.0;            // perceptual weight (low-level loss)

  void validate() const;

  // Contrastive only; used for retrieval training.
  static LossConfig retrieval(double tau = 0.07);
  // SoftCLIP + alpha * MSE + beta * prior.
  static LossConfig generation(double alpha, double beta, double tau = 0.07);
  // MSE only.
  static LossConfig captioning();
};

// Soft-target contrastive loss. Rows of P and T are L2-normalized first;
// targets are softmax_j(t_i.t_j / tau), predictions log softmax_j(p_i.t_j / tau),
// and the loss is the negative sum over all (i, j) of target * log-prediction.
ad::Var softclip_loss(ad::Var predictions, ad::Var targets, double tau);
double softclip_loss(const Mat& predictions, const Mat& targets, double tau);

ad::Var mse_loss(ad::Var predictions, ad::Var targets);
double mse_loss(const Mat& predictions, const Mat& targets);

struct LossBreakdown {
  double total = 0.0;
  double softclip = 0.0;
  double mse = 0.0;
  double prior = 0.0;
};

struct CompoundLoss {
  ad::Var total;
  LossBreakdown terms;
};

// contrastive_weight * SoftCLIP + alpha * MSE + beta * prior. Terms whose
// weight is zero are skipped entirely; `prior_term` may be empty when beta is 0.
CompoundLoss compound_loss(ad::Var predictions, ad::Var targets, std::optional<ad::Var> prior_term,
                           const LossConfig& config);
LossBreakdown compound_loss(const Mat& predictions, const Mat& targets, double prior_term,
                            const LossConfig& config);

// Feature maps are (h*w) x c; images (h'*w') x channels.
using Decoder = std::function<ad::Var(ad::Tape&, ad::Var feature_map)>;
// Maps an image to a nonnegative 1x1 score.
using PerceptualMetric = std::function<ad::Var(ad::Tape&, ad::Var image)>;

// mean|D(f) - D(f_hat)| + mean|f - f_hat| + lambda_p * L_P(D(f_hat)).
ad::Var lowlevel_loss(ad::Tape& tape, ad::Var f_hat, ad::Var f, const Decoder& decoder,
                      const PerceptualMetric& perceptual, double lambda_p);
double lowlevel_loss(const Mat& f_hat, const Mat& f, const Decoder& decoder, const PerceptualMetric& perceptual,
                     double lambda_p);

// Per-pixel linear map from c feature channels to image channels.
struct LinearDecoder {
  Mat weight;  // c x out_channels
  ad::Var operator()(ad::Tape& tape, ad::Var feature_map) const;
};

// Stand-in perceptual metric: mean |img - gaussian_blur(img)| over an h x w
// image stored as (h*w) x channels.
class BlurDifferenceMetric {
 public:
  BlurDifferenceMetric(int height, int width, double sigma = 1.0);
  ad::Var operator()(ad::Tape& tape, ad::Var image) const;

 private:
  Mat blur_;  // (h*w) x (h*w)
};

}  // namespace neuroalign
