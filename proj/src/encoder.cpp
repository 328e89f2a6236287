#include "neuroalign/encoder.hpp"

#include <cmath>

#include <fmt/format.h>

#include "neuroalign/errors.hpp"

namespace neuroalign {

using ad::Tape;
using ad::Var;

void EncoderConfig::validate() const {
  modality.validate();
  if (n_granularities < 1) throw ConfigError("encoder: n_granularities must be >= 1");
  if (model_dim < 1 || heads < 1 || model_dim % heads != 0) {
    throw ConfigError(fmt::format("encoder: model_dim {} must be divisible by heads {}", model_dim, heads));
  }
  if (channels < 1 || conv_channels < 1 || head_hidden < 1) throw ConfigError("encoder: widths must be positive");
  if (conv_kernel < 1 || conv_kernel % 2 == 0) throw ConfigError("encoder: conv_kernel must be odd");
  if (modality.is_static() && static_steps < 2) throw ConfigError("encoder: static_steps must be >= 2");
  const int t = trunk_time();
  if ((1LL << n_granularities) > t) {
    throw ConfigError(fmt::format("encoder: 2^{} exceeds input length {}", n_granularities, t));
  }
  if (subject_embedding && subjects.empty()) throw ConfigError("encoder: subject embedding needs a subject list");
}

std::vector<int> granularity_token_counts(int time, int n_granularities) {
  std::vector<int> out;
  for (int i = 1; i <= n_granularities; ++i) {
    const int len = 1 << i;
    out.push_back((time + len - 1) / len);
  }
  return out;
}

std::vector<Mat> patch_multi_granularity(const Mat& signal, int n_granularities, double pad_value) {
  if (signal.cols() < 2) throw ConfigError("patching needs a time-resolved input with T >= 2");
  if (n_granularities < 1) throw ConfigError("patching needs n_granularities >= 1");
  Tape tape(false);
  Var x = tape.constant(signal);
  std::vector<Mat> out;
  for (int i = 1; i <= n_granularities; ++i) out.push_back(ad::patchify(x, 1 << i, pad_value).value());
  return out;
}

EncoderTower::EncoderTower(EncoderConfig config, Rng& rng) : config_(std::move(config)) {
  config_.validate();
  const int d = config_.model_dim;
  const int c = config_.channels;
  const int t = config_.trunk_time();
  token_counts_ = granularity_token_counts(t, config_.n_granularities);
  if (config_.modality.is_static()) {
    input_adapter_ = nn::Linear(config_.modality.channels, config_.static_steps * c, rng);
  } else {
    input_adapter_ = nn::Linear(config_.modality.channels, c, rng);
  }
  for (int i = 1; i <= config_.n_granularities; ++i) patch_proj_.emplace_back((1 << i) * c, d, rng);
  const int pos_rows = config_.pos_table_rows > 0 ? config_.pos_table_rows : token_counts_.front() + 1;
  pos_table_ = nn::Parameter(randn(pos_rows, d, rng, 0.1));
  gran_emb_ = nn::Parameter(randn(config_.n_granularities, d, rng, 0.1));
  if (config_.subject_embedding) {
    subject_emb_ = nn::Parameter(randn(static_cast<Eigen::Index>(config_.subjects.size()), d, rng, 0.1));
  }
  intra_norm_ = nn::LayerNorm(d);
  intra_attn_ = nn::MultiHeadAttention(d, config_.heads, rng);
  inter_norm_q_ = nn::LayerNorm(d);
  inter_norm_kv_ = nn::LayerNorm(d);
  inter_attn_ = nn::MultiHeadAttention(d, config_.heads, rng);
  temporal_conv_ = nn::Linear(config_.conv_kernel * d, d, rng);
  spatial_conv_ = nn::Linear(d, config_.conv_channels, rng);
  int total_tokens = 0;
  for (int n : token_counts_) total_tokens += n;
  head_ = nn::Mlp(total_tokens * config_.conv_channels, config_.head_hidden, d, rng);
  if (config_.embedding_dim > 0) align_head_ = nn::Linear(d, config_.embedding_dim, rng);
}

Var EncoderTower::harmonize(Tape& tape, Var signal) const {
  const ModalityKind& m = config_.modality;
  if (signal.rows() != m.signal_rows() || signal.cols() != m.signal_cols()) {
    throw ConfigError(fmt::format("encoder '{}': signal {}x{} does not match {}x{}", m.name, signal.rows(),
                                  signal.cols(), m.signal_rows(), m.signal_cols()));
  }
  if (m.is_static()) {
    Var row = ad::transpose(signal);  // 1 x C
    Var grid = ad::reshape(input_adapter_(tape, row), config_.static_steps, config_.channels);
    return ad::transpose(grid);
  }
  return ad::transpose(input_adapter_(tape, ad::transpose(signal)));
}

std::vector<Var> EncoderTower::patch(Var harmonized) const {
  if (harmonized.cols() < 2) throw ConfigError("patching needs a time-resolved input with T >= 2");
  std::vector<Var> out;
  for (int i = 1; i <= config_.n_granularities; ++i) out.push_back(ad::patchify(harmonized, 1 << i, config_.pad_value));
  return out;
}

GranularityTokens EncoderTower::embed(Tape& tape, const std::vector<Var>& patches,
                                      std::optional<int> subject) const {
  if (patches.size() != patch_proj_.size()) throw ConfigError("embed: granularity count mismatch");
  Var pos = tape.param(pos_table_);
  Var gran = tape.param(gran_emb_);
  std::optional<Var> subj;
  if (subject) subj = ad::rows(tape.param(subject_emb_), *subject, 1);
  GranularityTokens out;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const Eigen::Index n = patches[i].rows();
    if (pos.rows() < n + 1) {
      throw ConfigError(fmt::format("positional table has {} rows; granularity {} needs {}", pos.rows(), i + 1, n + 1));
    }
    Var g = ad::rows(gran, static_cast<Eigen::Index>(i), 1);
    Var x = ad::add_row(ad::add(patch_proj_[i](tape, patches[i]), ad::rows(pos, 0, n)), g);
    if (subj) x = ad::add_row(x, *subj);
    out.tokens.push_back(x);
    out.routers.push_back(ad::add(ad::rows(pos, n, 1), g));
  }
  return out;
}

GranularityTokens EncoderTower::intra_attention(Tape& tape, const GranularityTokens& in,
                                                std::vector<std::vector<Mat>>* weights) const {
  GranularityTokens out;
  for (std::size_t i = 0; i < in.tokens.size(); ++i) {
    const Eigen::Index n = in.tokens[i].rows();
    Var z = ad::vcat({in.tokens[i], in.routers[i]});
    Var zn = intra_norm_(tape, z);
    nn::AttentionResult attn = intra_attn_(tape, zn, zn);
    Var updated = ad::add(z, attn.out);
    out.tokens.push_back(ad::rows(updated, 0, n));
    out.routers.push_back(ad::rows(updated, n, 1));
    if (weights) weights->push_back(std::move(attn.weights));
  }
  return out;
}

std::vector<Var> EncoderTower::inter_attention(Tape& tape, const GranularityTokens& in,
                                               std::vector<Mat>* weights) const {
  const std::size_t n = in.tokens.size();
  Var routers = ad::vcat(in.routers);  // n x D
  std::vector<Var> out;
  if (config_.inter_mode == InterGranularityMode::kCrossAttention) {
    Var all_tokens = ad::vcat(in.tokens);
    nn::AttentionResult attn = inter_attn_(tape, inter_norm_q_(tape, routers), inter_norm_kv_(tape, all_tokens));
    for (std::size_t i = 0; i < n; ++i) {
      Var ctx = ad::rows(attn.out, static_cast<Eigen::Index>(i), 1);
      out.push_back(ad::add_row(in.tokens[i], ctx));
    }
    if (weights) *weights = std::move(attn.weights);
  } else {
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(config_.model_dim));
    Var a = ad::softmax_rows(ad::scale(ad::matmul_nt(routers, routers), inv_scale));
    Var gates = ad::matmul(a, routers);
    for (std::size_t i = 0; i < n; ++i) {
      Var g = ad::repeat_rows(ad::rows(gates, static_cast<Eigen::Index>(i), 1), in.tokens[i].rows());
      out.push_back(ad::mul(in.tokens[i], g));
    }
    if (weights) *weights = {a.value()};
  }
  return out;
}

Var EncoderTower::temporal_spatial_conv(Tape& tape, Var h_attn) const {
  Var temporal = ad::gelu(temporal_conv_(tape, ad::unfold_rows(h_attn, config_.conv_kernel)));
  return ad::gelu(spatial_conv_(tape, temporal));
}

std::optional<int> EncoderTower::subject_index(const std::string& subject_id) const {
  if (!config_.subject_embedding) return std::nullopt;
  for (std::size_t i = 0; i < config_.subjects.size(); ++i) {
    if (config_.subjects[i] == subject_id) return static_cast<int>(i);
  }
  throw ConfigError(fmt::format("encoder '{}': unknown subject '{}'", config_.modality.name, subject_id));
}

EncoderTrace EncoderTower::forward(Tape& tape, Var signal, const std::string& subject_id) const {
  EncoderTrace trace;
  Var x = harmonize(tape, signal);
  GranularityTokens tokens = embed(tape, patch(x), subject_index(subject_id));
  tokens = intra_attention(tape, tokens, &trace.intra_weights);
  trace.h_attn = ad::vcat(inter_attention(tape, tokens, &trace.inter_weights));
  trace.h_conv = temporal_spatial_conv(tape, trace.h_attn);
  Var flat = ad::reshape(trace.h_conv, 1, trace.h_conv.value().size());
  trace.y = head_(tape, flat);
  return trace;
}

Var EncoderTower::forward_batch(Tape& tape, const std::vector<const NeuralSample*>& batch) const {
  if (batch.empty()) throw ConfigError("encoder: empty batch");
  std::vector<Var> ys;
  ys.reserve(batch.size());
  for (const NeuralSample* s : batch) {
    if (s->modality != config_.modality.name) {
      throw ConfigError(fmt::format("encoder '{}' received a '{}' sample", config_.modality.name, s->modality));
    }
    ys.push_back(forward(tape, tape.constant(s->signal), s->subject_id).y);
  }
  return ys.size() == 1 ? ys.front() : ad::vcat(ys);
}

Var EncoderTower::align_head(Tape& tape, Var y) const {
  if (config_.embedding_dim <= 0) throw ConfigError("encoder: no pretraining head configured");
  return align_head_(tape, y);
}

EncoderOutput EncoderTower::encode(const NeuralSample& sample) const {
  Tape tape(false);
  EncoderTrace t = forward(tape, tape.constant(sample.signal), sample.subject_id);
  EncoderOutput out;
  out.y = t.y.value().row(0).transpose();
  out.h_attn = t.h_attn.value();
  out.h_conv = t.h_conv.value();
  if (!out.y.allFinite()) throw NumericError("encoder produced a non-finite output");
  return out;
}

void EncoderTower::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  input_adapter_.visit(prefix + ".input_adapter", fn);
  for (std::size_t i = 0; i < patch_proj_.size(); ++i) patch_proj_[i].visit(fmt::format("{}.patch_proj{}", prefix, i + 1), fn);
  fn(prefix + ".pos_table", pos_table_);
  fn(prefix + ".granularity_embedding", gran_emb_);
  if (config_.subject_embedding) fn(prefix + ".subject_embedding", subject_emb_);
  intra_norm_.visit(prefix + ".intra_norm", fn);
  intra_attn_.visit(prefix + ".intra_attn", fn);
  inter_norm_q_.visit(prefix + ".inter_norm_q", fn);
  inter_norm_kv_.visit(prefix + ".inter_norm_kv", fn);
  inter_attn_.visit(prefix + ".inter_attn", fn);
  temporal_conv_.visit(prefix + ".temporal_conv", fn);
  spatial_conv_.visit(prefix + ".spatial_conv", fn);
  head_.visit(prefix + ".head", fn);
  if (config_.embedding_dim > 0) align_head_.visit(prefix + ".align_head", fn);
}

void EncoderTower::visit(const std::string& prefix, const nn::ConstParamVisitor& fn) const {
  input_adapter_.visit(prefix + ".input_adapter", fn);
  for (std::size_t i = 0; i < patch_proj_.size(); ++i) patch_proj_[i].visit(fmt::format("{}.patch_proj{}", prefix, i + 1), fn);
  fn(prefix + ".pos_table", pos_table_);
  fn(prefix + ".granularity_embedding", gran_emb_);
  if (config_.subject_embedding) fn(prefix + ".subject_embedding", subject_emb_);
  intra_norm_.visit(prefix + ".intra_norm", fn);
  intra_attn_.visit(prefix + ".intra_attn", fn);
  inter_norm_q_.visit(prefix + ".inter_norm_q", fn);
  inter_norm_kv_.visit(prefix + ".inter_norm_kv", fn);
  inter_attn_.visit(prefix + ".inter_attn", fn);
  temporal_conv_.visit(prefix + ".temporal_conv", fn);
  spatial_conv_.visit(prefix + ".spatial_conv", fn);
  head_.visit(prefix + ".head", fn);
  if (config_.embedding_dim > 0) align_head_.visit(prefix + ".align_head", fn);
}

}  // namespace neuroalign
