#include "neuroalign/model.hpp"

#include <fmt/format.h>

#include "neuroalign/errors.hpp"

namespace neuroalign {

using nlohmann::json;

namespace {

const char* to_string(InterGranularityMode m) {
  return m == InterGranularityMode::kCrossAttention ? "cross_attention" : "router_gate";
}

InterGranularityMode parse_inter_mode(const std::string& s) {
  if (s == "cross_attention") return InterGranularityMode::kCrossAttention;
  if (s == "router_gate") return InterGranularityMode::kRouterGate;
  throw ConfigError(fmt::format("unknown inter-granularity mode '{}'", s));
}

const char* to_string(RoutingNormalization r) {
  return r == RoutingNormalization::kSoftmax ? "softmax" : "sigmoid_normalized";
}

RoutingNormalization parse_routing(const std::string& s) {
  if (s == "softmax") return RoutingNormalization::kSoftmax;
  if (s == "sigmoid_normalized") return RoutingNormalization::kSigmoidNormalized;
  throw ConfigError(fmt::format("unknown routing normalization '{}'", s));
}

const char* to_string(NoiseSchedule s) { return s == NoiseSchedule::kCosine ? "cosine" : "linear"; }

NoiseSchedule parse_schedule(const std::string& s) {
  if (s == "cosine") return NoiseSchedule::kCosine;
  if (s == "linear") return NoiseSchedule::kLinear;
  throw ConfigError(fmt::format("unknown noise schedule '{}'", s));
}

const char* to_string(nn::Activation a) { return a == nn::Activation::kGelu ? "gelu" : "identity"; }

nn::Activation parse_activation(const std::string& s) {
  if (s == "gelu") return nn::Activation::kGelu;
  if (s == "identity") return nn::Activation::kIdentity;
  throw ConfigError(fmt::format("unknown activation '{}'", s));
}

json prior_json(const PriorConfig& p) {
  return {{"embedding_dim", p.embedding_dim}, {"steps", p.steps},     {"width", p.width},
          {"time_embedding_dim", p.time_embedding_dim}, {"schedule", to_string(p.schedule)}, {"seed", p.seed}};
}

PriorConfig prior_from(const json& j, PriorConfig p = {}) {
  p.embedding_dim = j.value("embedding_dim", p.embedding_dim);
  p.steps = j.value("steps", p.steps);
  p.width = j.value("width", p.width);
  p.time_embedding_dim = j.value("time_embedding_dim", p.time_embedding_dim);
  if (j.contains("schedule")) p.schedule = parse_schedule(j.at("schedule").get<std::string>());
  p.seed = j.value("seed", p.seed);
  return p;
}

}  // namespace

void ModelConfig::validate() const {
  if (encoders.empty()) throw ConfigError("model: at least one encoder tower is required");
  projector.validate();
  for (const auto& e : encoders) {
    e.validate();
    if (e.model_dim != projector.input_dim) {
      throw ConfigError(fmt::format("model: tower '{}' width {} does not match projector input {}", e.modality.name,
                                    e.model_dim, projector.input_dim));
    }
  }
  if (prior) {
    prior->validate();
    if (prior->embedding_dim != projector.output_dim) throw ConfigError("model: prior width must equal projector output");
  }
}

ModelConfig make_model_config(const PairedDataset& dataset, const std::vector<std::string>& modalities,
                              const ArchitectureOptions& o, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.seed = seed;
  const std::vector<std::string> names = [&] {
    if (!modalities.empty()) return modalities;
    std::vector<std::string> all;
    for (const auto& m : dataset.modalities) all.push_back(m.name);
    return all;
  }();
  for (const auto& name : names) {
    EncoderConfig e;
    e.modality = dataset.modality(name);
    e.n_granularities = o.n_granularities;
    e.model_dim = o.model_dim;
    e.channels = o.channels;
    e.heads = o.heads;
    e.conv_kernel = o.conv_kernel;
    e.conv_channels = o.conv_channels;
    e.head_hidden = o.head_hidden;
    e.static_steps = o.static_steps;
    e.subject_embedding = o.subject_embedding;
    if (o.subject_embedding) e.subjects = dataset.subjects(name);
    e.inter_mode = o.inter_mode;
    e.embedding_dim = dataset.embedding_dim;
    cfg.encoders.push_back(std::move(e));
  }
  cfg.projector.input_dim = o.model_dim;
  cfg.projector.experts = o.experts;
  cfg.projector.output_dim = dataset.embedding_dim;
  cfg.projector.hidden = o.expert_hidden;
  cfg.projector.router_hidden = o.router_hidden;
  cfg.projector.routing = o.routing;
  if (o.with_prior) {
    PriorConfig p = o.prior;
    p.embedding_dim = dataset.embedding_dim;
    cfg.prior = p;
  }
  cfg.validate();
  return cfg;
}

json to_json(const ModelConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["encoders"] = json::array();
  for (const auto& e : c.encoders) {
    j["encoders"].push_back({{"modality", to_json(e.modality)},
                             {"n_granularities", e.n_granularities},
                             {"model_dim", e.model_dim},
                             {"channels", e.channels},
                             {"heads", e.heads},
                             {"conv_kernel", e.conv_kernel},
                             {"conv_channels", e.conv_channels},
                             {"head_hidden", e.head_hidden},
                             {"subject_embedding", e.subject_embedding},
                             {"subjects", e.subjects},
                             {"pad_value", e.pad_value},
                             {"inter_mode", to_string(e.inter_mode)},
                             {"static_steps", e.static_steps},
                             {"pos_table_rows", e.pos_table_rows},
                             {"embedding_dim", e.embedding_dim}});
  }
  j["projector"] = {{"input_dim", c.projector.input_dim},
                    {"experts", c.projector.experts},
                    {"output_dim", c.projector.output_dim},
                    {"hidden", c.projector.hidden},
                    {"router_hidden", c.projector.router_hidden},
                    {"expert_activation", to_string(c.projector.expert_activation)},
                    {"routing", to_string(c.projector.routing)}};
  if (c.prior) j["prior"] = prior_json(*c.prior);
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.seed = j.value("seed", std::uint64_t{0});
    for (const auto& e : j.at("encoders")) {
      EncoderConfig ec;
      ec.modality = modality_from_json(e.at("modality"));
      ec.n_granularities = e.at("n_granularities");
      ec.model_dim = e.at("model_dim");
      ec.channels = e.at("channels");
      ec.heads = e.at("heads");
      ec.conv_kernel = e.at("conv_kernel");
      ec.conv_channels = e.at("conv_channels");
      ec.head_hidden = e.at("head_hidden");
      ec.subject_embedding = e.at("subject_embedding");
      ec.subjects = e.at("subjects").get<std::vector<std::string>>();
      ec.pad_value = e.at("pad_value");
      ec.inter_mode = parse_inter_mode(e.at("inter_mode"));
      ec.static_steps = e.at("static_steps");
      ec.pos_table_rows = e.at("pos_table_rows");
      ec.embedding_dim = e.at("embedding_dim");
      c.encoders.push_back(std::move(ec));
    }
    const json& p = j.at("projector");
    c.projector.input_dim = p.at("input_dim");
    c.projector.experts = p.at("experts");
    c.projector.output_dim = p.at("output_dim");
    c.projector.hidden = p.at("hidden");
    c.projector.router_hidden = p.at("router_hidden");
    c.projector.expert_activation = parse_activation(p.at("expert_activation"));
    c.projector.routing = parse_routing(p.at("routing"));
    if (j.contains("prior")) c.prior = prior_from(j.at("prior"));
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("model config: {}", e.what()));
  }
  c.validate();
  return c;
}

json to_json(const ArchitectureOptions& o) {
  return {{"n_granularities", o.n_granularities},
          {"model_dim", o.model_dim},
          {"channels", o.channels},
          {"heads", o.heads},
          {"conv_kernel", o.conv_kernel},
          {"conv_channels", o.conv_channels},
          {"head_hidden", o.head_hidden},
          {"static_steps", o.static_steps},
          {"subject_embedding", o.subject_embedding},
          {"inter_mode", to_string(o.inter_mode)},
          {"experts", o.experts},
          {"expert_hidden", o.expert_hidden},
          {"router_hidden", o.router_hidden},
          {"routing", to_string(o.routing)},
          {"with_prior", o.with_prior},
          {"prior", prior_json(o.prior)}};
}

ArchitectureOptions architecture_from_json(const json& j, ArchitectureOptions o) {
  try {
    o.n_granularities = j.value("n_granularities", o.n_granularities);
    o.model_dim = j.value("model_dim", o.model_dim);
    o.channels = j.value("channels", o.channels);
    o.heads = j.value("heads", o.heads);
    o.conv_kernel = j.value("conv_kernel", o.conv_kernel);
    o.conv_channels = j.value("conv_channels", o.conv_channels);
    o.head_hidden = j.value("head_hidden", o.head_hidden);
    o.static_steps = j.value("static_steps", o.static_steps);
    o.subject_embedding = j.value("subject_embedding", o.subject_embedding);
    if (j.contains("inter_mode")) o.inter_mode = parse_inter_mode(j.at("inter_mode"));
    o.experts = j.value("experts", o.experts);
    o.expert_hidden = j.value("expert_hidden", o.expert_hidden);
    o.router_hidden = j.value("router_hidden", o.router_hidden);
    if (j.contains("routing")) o.routing = parse_routing(j.at("routing"));
    o.with_prior = j.value("with_prior", o.with_prior);
    if (j.contains("prior")) o.prior = prior_from(j.at("prior"), o.prior);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("model options: {}", e.what()));
  }
  return o;
}

AlignmentModel::AlignmentModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(mix_seed(config_.seed, 7));
  for (const auto& e : config_.encoders) {
    if (towers_.count(e.modality.name)) throw ConfigError(fmt::format("duplicate tower '{}'", e.modality.name));
    towers_.emplace(e.modality.name, EncoderTower(e, rng));
  }
  projector_ = MoEProjector(config_.projector, rng);
  if (config_.prior) prior_.emplace(*config_.prior, rng);
}

std::vector<std::string> AlignmentModel::modalities() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : towers_) out.push_back(k);
  return out;
}

const EncoderTower& AlignmentModel::tower(const std::string& modality) const {
  auto it = towers_.find(modality);
  if (it == towers_.end()) throw ConfigError(fmt::format("no encoder registered for modality '{}'", modality));
  return it->second;
}

EncoderTower& AlignmentModel::tower(const std::string& modality) {
  auto it = towers_.find(modality);
  if (it == towers_.end()) throw ConfigError(fmt::format("no encoder registered for modality '{}'", modality));
  return it->second;
}

const DiffusionPrior& AlignmentModel::prior() const {
  if (!prior_) throw ConfigError("model has no diffusion prior");
  return *prior_;
}

DiffusionPrior& AlignmentModel::prior() {
  if (!prior_) throw ConfigError("model has no diffusion prior");
  return *prior_;
}

ad::Var AlignmentModel::embed(ad::Tape& tape, const std::vector<const NeuralSample*>& batch) const {
  if (batch.empty()) throw ConfigError("embed: empty batch");
  const EncoderTower& t = tower(batch.front()->modality);
  return projector_.project(tape, t.forward_batch(tape, batch));
}

Mat AlignmentModel::embed(const std::vector<const NeuralSample*>& batch) const {
  ad::Tape tape(false);
  Mat z = embed(tape, batch).value();
  if (!z.allFinite()) throw NumericError("model produced non-finite embeddings");
  return z;
}

void AlignmentModel::visit(const nn::ParamVisitor& fn) {
  for (auto& [name, t] : towers_) t.visit("encoder." + name, fn);
  projector_.visit("projector", fn);
  if (prior_) prior_->visit("prior", fn);
}

void AlignmentModel::visit(const nn::ConstParamVisitor& fn) const {
  for (const auto& [name, t] : towers_) t.visit("encoder." + name, fn);
  projector_.visit("projector", fn);
  if (prior_) prior_->visit("prior", fn);
}

NamedParameters AlignmentModel::parameters() {
  NamedParameters out;
  visit([&](const std::string& name, ad::Parameter& p) { out.emplace_back(name, &p); });
  return out;
}

void AlignmentModel::save_parameters(ArrayFile& file) const {
  visit([&](const std::string& name, const ad::Parameter& p) { file.put("param/" + name, p.value, DType::kFloat64); });
}

void AlignmentModel::load_parameters(const ArrayFile& file) {
  visit([&](const std::string& name, ad::Parameter& p) {
    const std::string key = "param/" + name;
    if (!file.contains(key)) throw FormatError(fmt::format("checkpoint is missing parameter '{}'", name));
    Mat m = file.matrix(key);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
      throw FormatError(fmt::format("parameter '{}' has shape {}x{}, model expects {}x{}", name, m.rows(), m.cols(),
                                    p.value.rows(), p.value.cols()));
    }
    p.value = std::move(m);
    p.zero_grad();
  });
}

}  // namespace neuroalign
