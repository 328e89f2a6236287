#pragma once

#include <optional>
#include <string>
#include <vector>

#include "neuroalign/datamodel.hpp"
#include "neuroalign/nn.hpp"

namespace neuroalign {

// How routers exchange information across scales after the intra stage.
enum class InterGranularityMode {
  // Routers are queries of a cross-attention over all scales' tokens; each
  // scale's tokens receive their router's attended context.
  kCrossAttention,
  // Routers attend to each other; each scale's tokens are gated elementwise
  // by the attention-weighted router sum.
  kRouterGate,
};

struct EncoderConfig {
  ModalityKind modality;  // native input shape
  int n_granularities = 3;
  int model_dim = 32;
  int channels = 8;  // harmonized channel count fed to patching
  int heads = 4;
  int conv_kernel = 3;
  int conv_channels = 8;
  int head_hidden = 64;
  bool subject_embedding = false;
  std::vector<std::string> subjects;
  double pad_value = 0.0;
  InterGranularityMode inter_mode = InterGranularityMode::kCrossAttention;
  int static_steps = 8;     // pseudo-time length produced by the static adapter
  int pos_table_rows = 0;   // 0 = exactly max N_i + 1
  int embedding_dim = 0;    // >0 adds a D->F head used for encoder pretraining

  // Time length seen by the patching stage.
  int trunk_time() const { return modality.is_static() ? static_steps : modality.time; }
  void validate() const;
};

// N_i = ceil(T / 2^i) for i = 1..n.
std::vector<int> granularity_token_counts(int time, int n_granularities);

// Value-level patching of a C x T signal: one N_i x (2^i * C) matrix per
// granularity, time-major within a patch, tail padded with `pad_value`.
std::vector<Mat> patch_multi_granularity(const Mat& signal, int n_granularities, double pad_value = 0.0);

struct GranularityTokens {
  std::vector<ad::Var> tokens;   // N_i x D per granularity
  std::vector<ad::Var> routers;  // 1 x D per granularity
};

struct EncoderTrace {
  ad::Var y;  // 1 x D
  ad::Var h_attn;
  ad::Var h_conv;
  std::vector<std::vector<Mat>> intra_weights;  // [granularity][head]
  std::vector<Mat> inter_weights;               // [head]
};

struct EncoderOutput {
  Vec y;
  Mat h_attn;
  Mat h_conv;
};

// One modality's feature extraction tower: channel harmonization ->
// multi-granularity patching -> token embedding -> intra- and
// inter-granularity attention -> temporal-spatial convolution -> MLP head.
class EncoderTower {
 public:
  EncoderTower() = default;
  EncoderTower(EncoderConfig config, Rng& rng);

  const EncoderConfig& config() const { return config_; }

  // Maps the native signal (C x T, or C x 1 static) to channels x trunk_time.
  ad::Var harmonize(ad::Tape& tape, ad::Var signal) const;
  std::vector<ad::Var> patch(ad::Var harmonized) const;
  GranularityTokens embed(ad::Tape& tape, const std::vector<ad::Var>& patches,
                          std::optional<int> subject_index = {}) const;
  GranularityTokens intra_attention(ad::Tape& tape, const GranularityTokens& in,
                                    std::vector<std::vector<Mat>>* weights = nullptr) const;
  std::vector<ad::Var> inter_attention(ad::Tape& tape, const GranularityTokens& in,
                                       std::vector<Mat>* weights = nullptr) const;
  ad::Var temporal_spatial_conv(ad::Tape& tape, ad::Var h_attn) const;

  EncoderTrace forward(ad::Tape& tape, ad::Var signal, const std::string& subject_id) const;
  // Row-stacked Y for a batch (B x D); each sample gets its own subgraph.
  ad::Var forward_batch(ad::Tape& tape, const std::vector<const NeuralSample*>& batch) const;
  // Pretraining head output (B x F); requires embedding_dim > 0.
  ad::Var align_head(ad::Tape& tape, ad::Var y) const;

  EncoderOutput encode(const NeuralSample& sample) const;

  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void visit(const std::string& prefix, const nn::ConstParamVisitor& fn) const;

  // Direct parameter access for tests.
  std::vector<nn::Linear>& patch_projections() { return patch_proj_; }
  nn::Parameter& positional_table() { return pos_table_; }
  nn::Parameter& granularity_embeddings() { return gran_emb_; }
  nn::MultiHeadAttention& intra_block() { return intra_attn_; }
  nn::MultiHeadAttention& inter_block() { return inter_attn_; }

 private:
  std::optional<int> subject_index(const std::string& subject_id) const;

  EncoderConfig config_;
  std::vector<int> token_counts_;
  nn::Linear input_adapter_;
  std::vector<nn::Linear> patch_proj_;
  nn::Parameter pos_table_;
  nn::Parameter gran_emb_;
  nn::Parameter subject_emb_;
  nn::LayerNorm intra_norm_;
  nn::MultiHeadAttention intra_attn_;
  nn::LayerNorm inter_norm_q_;
  nn::LayerNorm inter_norm_kv_;
  nn::MultiHeadAttention inter_attn_;
  nn::Linear temporal_conv_;
  nn::Linear spatial_conv_;
  nn::Mlp head_;
  nn::Linear align_head_;
};

}  // namespace neuroalign
