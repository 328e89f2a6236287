#include "neuroalign/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "neuroalign/array_io.hpp"
#include "neuroalign/errors.hpp"
#include "neuroalign/rng.hpp"

namespace neuroalign {
namespace {

using nlohmann::json;

constexpr int kManifestVersion = 1;
constexpr const char* kArrayFileName = "arrays.bin";

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

json to_json(const ModalityKind& m) {
  json j{{"name", m.name}, {"kind", m.is_static() ? "static" : "time_resolved"}, {"channels", m.channels}};
  if (!m.is_static()) j["time"] = m.time;
  return j;
}

ModalityKind modality_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "static") return ModalityKind::static_features(j.at("name"), j.at("channels"));
  if (kind == "time_resolved") return ModalityKind::time_resolved(j.at("name"), j.at("channels"), j.at("time"));
  throw FormatError(fmt::format("unknown modality kind '{}'", kind));
}

json to_json(const SyntheticSpec& s) {
  json mods = json::array();
  for (const auto& m : s.modalities) mods.push_back(to_json(m));
  return {{"n_concepts", s.n_concepts},       {"images_per_concept", s.images_per_concept},
          {"subjects_per_modality", s.subjects_per_modality}, {"modalities", mods},
          {"noise_sigma", s.noise_sigma},     {"seed", s.seed},
          {"embedding_dim", s.embedding_dim}, {"concept_spread", s.concept_spread},
          {"min_gain", s.min_gain},           {"max_gain", s.max_gain}};
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
  static const std::set<std::string> known{"n_concepts",   "images_per_concept", "subjects_per_modality",
                                           "modalities",   "noise_sigma",        "seed",
                                           "embedding_dim", "concept_spread",    "min_gain",
                                           "max_gain"};
  if (!j.is_object()) throw ValidationError("synthetic spec must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ValidationError(fmt::format("unknown synthetic spec key '{}'", k));
  }
  SyntheticSpec s;
  try {
    s.n_concepts = j.value("n_concepts", s.n_concepts);
    s.images_per_concept = j.value("images_per_concept", s.images_per_concept);
    s.subjects_per_modality = j.value("subjects_per_modality", s.subjects_per_modality);
    for (const auto& m : j.at("modalities")) s.modalities.push_back(modality_from_json(m));
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.seed = j.value("seed", s.seed);
    s.embedding_dim = j.value("embedding_dim", s.embedding_dim);
    s.concept_spread = j.value("concept_spread", s.concept_spread);
    s.min_gain = j.value("min_gain", s.min_gain);
    s.max_gain = j.value("max_gain", s.max_gain);
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("invalid synthetic spec: {}", e.what()));
  }
  s.validate();
  return s;
}

ModalityKind ModalityKind::time_resolved(std::string name, int channels, int time) {
  ModalityKind m{std::move(name), SignalLayout::kTimeResolved, channels, time};
  m.validate();
  return m;
}

ModalityKind ModalityKind::static_features(std::string name, int features) {
  ModalityKind m{std::move(name), SignalLayout::kStatic, features, 0};
  m.validate();
  return m;
}

void ModalityKind::validate() const {
  if (name.empty()) throw ValidationError("modality name must be non-empty");
  if (channels < 1) throw ValidationError(fmt::format("modality '{}': channel count must be >= 1", name));
  if (!is_static() && time < 2) throw ValidationError(fmt::format("modality '{}': time length must be >= 2", name));
}

bool NeuralSample::operator==(const NeuralSample& other) const {
  return subject_id == other.subject_id && modality == other.modality && stimulus_id == other.stimulus_id &&
         signal.rows() == other.signal.rows() && signal.cols() == other.signal.cols() && signal == other.signal;
}

bool ImageEmbedding::operator==(const ImageEmbedding& other) const {
  return stimulus_id == other.stimulus_id && concept_id == other.concept_id && normalized == other.normalized &&
         vector.size() == other.vector.size() && vector == other.vector;
}

const char* to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw FormatError(fmt::format("unknown split '{}'", s));
}

void PairedDataset::validate() const {
  if (embedding_dim < 2) throw ValidationError("embedding dimension must be >= 2");
  std::set<std::string> names;
  for (const auto& m : modalities) {
    m.validate();
    if (!names.insert(m.name).second) throw ValidationError(fmt::format("duplicate modality '{}'", m.name));
  }
  for (const auto& [id, e] : embeddings) {
    if (id != e.stimulus_id) throw IntegrityError(fmt::format("embedding key '{}' does not match its id", id));
    if (e.vector.size() != embedding_dim) {
      throw FormatError(fmt::format("embedding '{}' has length {}, expected {}", id, e.vector.size(), embedding_dim));
    }
    if (!e.vector.allFinite()) throw ValidationError(fmt::format("embedding '{}' is not finite", id));
    if (e.normalized && std::abs(e.vector.norm() - 1.0) > 1e-6) {
      throw ValidationError(fmt::format("embedding '{}' is flagged normalized but has norm {}", id, e.vector.norm()));
    }
    if (!splits.count(id)) throw IntegrityError(fmt::format("embedding '{}' has no split", id));
  }
  for (const auto& s : samples) {
    if (!embeddings.count(s.stimulus_id)) {
      throw IntegrityError(fmt::format("sample of '{}' references stimulus '{}' with no embedding", s.subject_id,
                                       s.stimulus_id));
    }
    const ModalityKind& m = modality(s.modality);
    if (s.signal.rows() != m.signal_rows() || s.signal.cols() != m.signal_cols()) {
      throw FormatError(fmt::format("sample {}/{} has shape {}x{}, modality '{}' expects {}x{}", s.subject_id,
                                    s.stimulus_id, s.signal.rows(), s.signal.cols(), m.name, m.signal_rows(),
                                    m.signal_cols()));
    }
    if (!s.signal.allFinite()) {
      throw ValidationError(fmt::format("sample {}/{} contains non-finite values", s.subject_id, s.stimulus_id));
    }
  }
}

const ModalityKind& PairedDataset::modality(const std::string& name) const {
  for (const auto& m : modalities) {
    if (m.name == name) return m;
  }
  throw ConfigError(fmt::format("unknown modality '{}'", name));
}

bool PairedDataset::has_modality(const std::string& name) const {
  return std::any_of(modalities.begin(), modalities.end(), [&](const auto& m) { return m.name == name; });
}

Split PairedDataset::split_of(const std::string& stimulus_id) const {
  auto it = splits.find(stimulus_id);
  if (it == splits.end()) throw IntegrityError(fmt::format("stimulus '{}' has no split", stimulus_id));
  return it->second;
}

const std::string& PairedDataset::concept_of(const std::string& stimulus_id) const {
  auto it = embeddings.find(stimulus_id);
  if (it == embeddings.end()) throw IntegrityError(fmt::format("stimulus '{}' has no embedding", stimulus_id));
  return it->second.concept_id;
}

std::vector<std::size_t> PairedDataset::sample_indices(const std::string& modality_name,
                                                       std::optional<Split> split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.modality != modality_name) continue;
    if (split && split_of(s.stimulus_id) != *split) continue;
    out.push_back(i);
  }
  return out;
}

std::vector<std::string> PairedDataset::stimuli(Split split) const {
  std::vector<std::string> out;
  for (const auto& [id, s] : splits) {
    if (s == split) out.push_back(id);
  }
  return out;
}

std::vector<std::string> PairedDataset::concepts(std::optional<Split> split) const {
  std::set<std::string> out;
  for (const auto& [id, e] : embeddings) {
    if (!split || split_of(id) == *split) out.insert(e.concept_id);
  }
  return {out.begin(), out.end()};
}

std::vector<std::string> PairedDataset::subjects(const std::string& modality_name) const {
  std::set<std::string> out;
  for (const auto& s : samples) {
    if (s.modality == modality_name) out.insert(s.subject_id);
  }
  return {out.begin(), out.end()};
}

Mat PairedDataset::embedding_matrix(const std::vector<std::string>& stimulus_ids) const {
  Mat out(static_cast<Eigen::Index>(stimulus_ids.size()), embedding_dim);
  for (std::size_t i = 0; i < stimulus_ids.size(); ++i) {
    auto it = embeddings.find(stimulus_ids[i]);
    if (it == embeddings.end()) throw IntegrityError(fmt::format("no embedding for '{}'", stimulus_ids[i]));
    out.row(static_cast<Eigen::Index>(i)) = it->second.vector.transpose();
  }
  return out;
}

void SyntheticSpec::validate() const {
  if (n_concepts < 1 || images_per_concept < 1 || subjects_per_modality < 1) {
    throw ValidationError("synthetic spec: all counts must be >= 1");
  }
  if (embedding_dim < 2) throw ValidationError("synthetic spec: embedding dimension must be >= 2");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw ValidationError("synthetic spec: noise_sigma must be a finite nonnegative number");
  }
  if (!(concept_spread >= 0.0)) throw ValidationError("synthetic spec: concept_spread must be >= 0");
  if (!(min_gain > 0.0) || !(max_gain >= min_gain)) throw ValidationError("synthetic spec: invalid gain range");
  if (modalities.empty()) throw ValidationError("synthetic spec: at least one modality is required");
  std::set<std::string> names;
  for (const auto& m : modalities) {
    m.validate();
    if (!names.insert(m.name).second) throw ValidationError(fmt::format("duplicate modality '{}'", m.name));
  }
}

PairedDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const int f = spec.embedding_dim;
  PairedDataset ds;
  ds.embedding_dim = f;
  ds.modalities = spec.modalities;

  Rng concept_rng(mix_seed(spec.seed, 1));
  std::vector<std::string> stimulus_order;
  for (int c = 0; c < spec.n_concepts; ++c) {
    Vec mean = randn(f, 1, concept_rng);
    mean.normalize();
    const std::string concept_id = fmt::format("c{:04d}", c);
    for (int i = 0; i < spec.images_per_concept; ++i) {
      Vec xi = randn(f, 1, concept_rng, 1.0 / std::sqrt(static_cast<double>(f)));
      Vec v = (mean + spec.concept_spread * xi).normalized();
      Vec stored = v.unaryExpr([](double x) { return to_f32(x); });
      const std::string sid = fmt::format("{}_i{:02d}", concept_id, i);
      ds.embeddings[sid] = ImageEmbedding{sid, concept_id, stored, true};
      ds.splits[sid] = Split::kTrain;
      stimulus_order.push_back(sid);
    }
  }

  for (std::size_t mi = 0; mi < spec.modalities.size(); ++mi) {
    const ModalityKind& m = spec.modalities[mi];
    Rng map_rng(mix_seed(spec.seed, 100 + mi));
    const Eigen::Index rows = m.signal_rows();
    const Eigen::Index cols = m.signal_cols();
    Mat mixing = randn(rows * cols, f, map_rng);
    std::uniform_real_distribution<double> gain_dist(spec.min_gain, spec.max_gain);
    std::vector<double> gains;
    for (int s = 0; s < spec.subjects_per_modality; ++s) gains.push_back(gain_dist(map_rng));

    Rng noise_rng(mix_seed(spec.seed, 1000 + mi));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int s = 0; s < spec.subjects_per_modality; ++s) {
      const std::string subject = fmt::format("{}-sub{:02d}", m.name, s + 1);
      for (const auto& sid : stimulus_order) {
        Vec clean = gains[s] * (mixing * ds.embeddings[sid].vector);
        Mat signal(rows, cols);
        // Row-major reshape: element (ch, t) = clean[ch * cols + t].
        for (Eigen::Index ch = 0; ch < rows; ++ch) {
          for (Eigen::Index t = 0; t < cols; ++t) {
            const double eps = spec.noise_sigma > 0.0 ? spec.noise_sigma * noise(noise_rng) : 0.0;
            signal(ch, t) = to_f32(clean(ch * cols + t) + eps);
          }
        }
        ds.samples.push_back(NeuralSample{subject, m.name, sid, std::move(signal)});
      }
    }
  }
  ds.validate();
  return ds;
}

void save_dataset(const PairedDataset& dataset, const std::filesystem::path& dir) {
  dataset.validate();
  std::filesystem::create_directories(dir);
  ArrayFile arrays;
  json manifest;
  manifest["version"] = kManifestVersion;
  manifest["F"] = dataset.embedding_dim;
  manifest["array_file"] = kArrayFileName;
  manifest["modalities"] = json::array();
  for (const auto& m : dataset.modalities) manifest["modalities"].push_back(to_json(m));
  manifest["samples"] = json::array();
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    const std::string key = fmt::format("sample/{:07d}", i);
    arrays.put(key, s.signal, DType::kFloat32);
    manifest["samples"].push_back({{"subject_id", s.subject_id},
                                   {"modality", s.modality},
                                   {"stimulus_id", s.stimulus_id},
                                   {"array_key", key},
                                   {"split", to_string(dataset.split_of(s.stimulus_id))}});
  }
  manifest["embeddings"] = json::array();
  for (const auto& [id, e] : dataset.embeddings) {
    const std::string key = "embedding/" + id;
    arrays.put(key, {static_cast<std::uint64_t>(e.vector.size())},
               std::span<const double>(e.vector.data(), static_cast<std::size_t>(e.vector.size())), DType::kFloat32);
    manifest["embeddings"].push_back({{"stimulus_id", id},
                                      {"concept", e.concept_id},
                                      {"array_key", key},
                                      {"normalized", e.normalized},
                                      {"split", to_string(dataset.split_of(id))}});
  }
  arrays.save(dir / kArrayFileName);
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  os << manifest.dump(2) << '\n';
  if (!os) throw FormatError(fmt::format("failed to write manifest in {}", dir.string()));
}

PairedDataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw FormatError(fmt::format("cannot open manifest {}", manifest_path.string()));
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("{}: malformed manifest: {}", manifest_path.string(), e.what()));
  }
  PairedDataset ds;
  try {
    if (manifest.at("version").get<int>() != kManifestVersion) {
      throw FormatError(fmt::format("{}: unsupported manifest version", manifest_path.string()));
    }
    ds.embedding_dim = manifest.at("F").get<int>();
    for (const auto& m : manifest.at("modalities")) ds.modalities.push_back(modality_from_json(m));
    const auto array_path = manifest_path.parent_path() / manifest.value("array_file", std::string(kArrayFileName));
    const ArrayFile arrays = ArrayFile::load(array_path);

    for (const auto& e : manifest.at("embeddings")) {
      ImageEmbedding emb;
      emb.stimulus_id = e.at("stimulus_id").get<std::string>();
      emb.concept_id = e.value("concept", emb.stimulus_id);
      emb.normalized = e.value("normalized", false);
      const NamedArray& a = arrays.get(e.at("array_key").get<std::string>());
      emb.vector = Eigen::Map<const Vec>(a.data.data(), static_cast<Eigen::Index>(a.data.size()));
      if (ds.embeddings.count(emb.stimulus_id)) {
        throw IntegrityError(fmt::format("duplicate embedding for '{}'", emb.stimulus_id));
      }
      if (e.contains("split")) ds.splits[emb.stimulus_id] = parse_split(e.at("split").get<std::string>());
      ds.embeddings[emb.stimulus_id] = std::move(emb);
    }
    for (const auto& s : manifest.at("samples")) {
      NeuralSample sample;
      sample.subject_id = s.at("subject_id").get<std::string>();
      sample.modality = s.at("modality").get<std::string>();
      sample.stimulus_id = s.at("stimulus_id").get<std::string>();
      const ModalityKind& m = ds.modality(sample.modality);
      const NamedArray& a = arrays.get(s.at("array_key").get<std::string>());
      const std::uint64_t expected = static_cast<std::uint64_t>(m.signal_rows() * m.signal_cols());
      if (a.element_count() != expected) {
        throw FormatError(fmt::format("array '{}' has {} values; modality '{}' expects {}", s.at("array_key").get<std::string>(),
                                      a.element_count(), m.name, expected));
      }
      sample.signal = Eigen::Map<const Mat>(a.data.data(), m.signal_rows(), m.signal_cols());
      if (!ds.embeddings.count(sample.stimulus_id)) {
        throw IntegrityError(fmt::format("sample references stimulus '{}' with no embedding", sample.stimulus_id));
      }
      const Split split = parse_split(s.value("split", std::string("train")));
      auto [it, inserted] = ds.splits.try_emplace(sample.stimulus_id, split);
      if (!inserted && it->second != split) {
        throw IntegrityError(fmt::format("stimulus '{}' appears in both train and test", sample.stimulus_id));
      }
      ds.samples.push_back(std::move(sample));
    }
    for (const auto& [id, _] : ds.embeddings) ds.splits.try_emplace(id, Split::kTrain);
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("{}: manifest schema error: {}", manifest_path.string(), e.what()));
  }
  ds.validate();
  return ds;
}

PairedDataset split_zero_shot(const PairedDataset& dataset, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ValidationError("test_fraction must lie strictly between 0 and 1");
  }
  std::vector<std::string> concepts = dataset.concepts();
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(concepts.size())));
  if (n_test < 1 || n_test >= concepts.size()) {
    throw ValidationError(fmt::format("{} concepts cannot honor test fraction {}", concepts.size(), test_fraction));
  }
  Rng rng(seed);
  std::shuffle(concepts.begin(), concepts.end(), rng);
  const std::set<std::string> test(concepts.begin(), concepts.begin() + static_cast<std::ptrdiff_t>(n_test));
  PairedDataset out = dataset;
  for (auto& [id, split] : out.splits) {
    split = test.count(out.concept_of(id)) ? Split::kTest : Split::kTrain;
  }
  return out;
}

}  // namespace neuroalign
