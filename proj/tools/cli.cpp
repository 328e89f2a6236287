#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "neuroalign/datamodel.hpp"
#include "neuroalign/embedding_map.hpp"
#include "neuroalign/errors.hpp"
#include "neuroalign/evalsuite.hpp"
#include "neuroalign/model.hpp"
#include "neuroalign/rng.hpp"
#include "neuroalign/trainer.hpp"

namespace neuroalign::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kImageSpace = "image";

json read_json(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open {} '{}'", what, path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{} '{}' is not valid JSON: {}", what, path.string(), e.what()));
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError(fmt::format("cannot write '{}'", path.string()));
  out << text;
}

fs::path default_out(const std::string& command) {
  const char* root = std::getenv(kOutputRootEnv);
  return fs::path(root && *root ? root : "runs") / command;
}

fs::path manifest_path(const fs::path& data) {
  if (fs::is_directory(data)) return data / "manifest.json";
  return data;
}

PairedDataset load_data(const fs::path& data) {
  const fs::path m = manifest_path(data);
  if (!fs::exists(m)) throw ConfigError(fmt::format("dataset not found: '{}'", m.string()));
  return load_dataset(m);
}

// Resolves each setting as CLI flag > config file > default and records it.
class Settings {
 public:
  explicit Settings(json file) : file_(std::move(file)) {
    if (!file_.is_object()) throw ConfigError("config file must contain a JSON object");
  }

  template <class T>
  T take(const std::string& key, const CLI::Option* opt, const T& flag_or_default) {
    T v = flag_or_default;
    if (opt->count() == 0 && file_.contains(key)) {
      try {
        v = file_.at(key).get<T>();
      } catch (const json::exception& e) {
        throw ConfigError(fmt::format("config key '{}': {}", key, e.what()));
      }
    }
    resolved_[key] = v;
    return v;
  }

  const json& file() const { return file_; }
  json& resolved() { return resolved_; }

 private:
  json file_;
  json resolved_ = json::object();
};

Settings load_settings(const std::string& config_path) {
  return Settings(config_path.empty() ? json::object() : read_json(config_path, "config"));
}

std::vector<fs::path> files_under(const fs::path& root, const fs::path& p) {
  std::vector<fs::path> out;
  const fs::path full = root / p;
  if (fs::is_directory(full)) {
    for (const auto& e : fs::recursive_directory_iterator(full)) {
      if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
    }
  } else if (fs::exists(full)) {
    out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_run_manifest(const fs::path& out_dir, const std::string& command, const std::string& config_path,
                        const json& resolved, std::uint64_t seed, const std::vector<fs::path>& artifacts) {
  json hashes = json::object();
  for (const auto& a : artifacts) {
    for (const auto& f : files_under(out_dir, a)) hashes[f.generic_string()] = sha256_file(out_dir / f);
  }
  const json manifest{{"command", command},
                      {"config_path", config_path},
                      {"resolved_config", resolved},
                      {"seed", seed},
                      {"output_dir", out_dir.generic_string()},
                      {"artifacts", hashes}};
  write_text(out_dir / "run_manifest.json", manifest.dump(2) + "\n");
}

void check_compatible(const AlignmentModel& model, const PairedDataset& ds, const std::vector<std::string>& mods) {
  if (ds.embedding_dim != model.projector().config().output_dim) {
    throw ConfigError(fmt::format("dimension mismatch: dataset embeddings are {}-d, model outputs {}-d",
                                  ds.embedding_dim, model.projector().config().output_dim));
  }
  for (const auto& m : mods) {
    if (m == kImageSpace) continue;
    if (!ds.has_modality(m)) throw ConfigError(fmt::format("dataset has no modality '{}'", m));
    const ModalityKind& want = model.tower(m).config().modality;
    if (!(ds.modality(m) == want)) {
      throw ConfigError(fmt::format("dimension mismatch for modality '{}': checkpoint expects {}x{}, dataset has {}x{}",
                                    m, want.signal_rows(), want.signal_cols(), ds.modality(m).signal_rows(),
                                    ds.modality(m).signal_cols()));
    }
  }
}

AlignmentModel load_model(const fs::path& checkpoint) {
  return TrainingState::load(checkpoint).model;
}

// Per-stimulus embeddings of a modality (averaged over subjects) or the image
// embeddings themselves, sorted by stimulus id.
EmbeddedSet stimulus_embeddings(const AlignmentModel& model, const PairedDataset& ds, const std::string& space,
                                Split split) {
  if (space == kImageSpace) {
    EmbeddedSet set;
    set.stimulus_ids = ds.stimuli(split);
    set.z = ds.embedding_matrix(set.stimulus_ids);
    set.subject_ids.assign(set.stimulus_ids.size(), kImageSpace);
    return set;
  }
  return average_by_stimulus(embed_samples(model, ds, space, split));
}

// Restricts two stimulus-sorted sets to their common stimuli.
void intersect(EmbeddedSet& a, EmbeddedSet& b) {
  std::set<std::string> common;
  std::set_intersection(a.stimulus_ids.begin(), a.stimulus_ids.end(), b.stimulus_ids.begin(), b.stimulus_ids.end(),
                        std::inserter(common, common.end()));
  auto keep = [&](EmbeddedSet& s) {
    EmbeddedSet out;
    out.z = Mat(static_cast<Eigen::Index>(common.size()), s.z.cols());
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < s.stimulus_ids.size(); ++i) {
      if (!common.count(s.stimulus_ids[i])) continue;
      out.z.row(r++) = s.z.row(static_cast<Eigen::Index>(i));
      out.stimulus_ids.push_back(s.stimulus_ids[i]);
      out.subject_ids.push_back(s.subject_ids[i]);
    }
    s = std::move(out);
  };
  keep(a);
  keep(b);
}

std::string require_value(const std::string& v, const char* name) {
  if (v.empty()) throw ConfigError(fmt::format("missing required setting '{}'", name));
  return v;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string config, spec, out;
  std::uint64_t seed = 0;
  CLI::Option *o_spec, *o_out, *o_seed;
};

int cmd_synth(SynthArgs& a, std::ostream& out) {
  Settings s = load_settings(a.config);
  const std::string spec_path = require_value(s.take("spec", a.o_spec, a.spec), "spec");
  const fs::path out_dir = s.take("out", a.o_out, a.out.empty() ? default_out("synth").string() : a.out);
  json spec_json;
  {
    std::ifstream in(spec_path);
    if (!in) throw ValidationError(fmt::format("cannot open spec '{}'", spec_path));
    try {
      spec_json = json::parse(in);
    } catch (const json::exception& e) {
      throw ValidationError(fmt::format("spec '{}' is not valid JSON: {}", spec_path, e.what()));
    }
  }
  if (a.o_seed->count() && spec_json.is_object()) spec_json["seed"] = a.seed;
  const SyntheticSpec spec = synthetic_spec_from_json(spec_json);
  const PairedDataset ds = generate_synthetic(spec);
  ds.validate();

  save_dataset(ds, out_dir);
  s.resolved()["spec_resolved"] = to_json(spec);
  write_run_manifest(out_dir, "synth", a.config, s.resolved(), spec.seed, {"manifest.json", "arrays.bin"});
  out << fmt::format("wrote {} samples, {} stimuli to {}\n", ds.samples.size(), ds.embeddings.size(),
                     out_dir.string());
  return kExitOk;
}

struct SplitArgs {
  std::string config, data, out;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
  CLI::Option *o_data, *o_out, *o_fraction, *o_seed;
};

int cmd_split(SplitArgs& a, std::ostream& out) {
  Settings s = load_settings(a.config);
  const fs::path data = require_value(s.take("data", a.o_data, a.data), "data");
  const fs::path out_dir = s.take("out", a.o_out, a.out.empty() ? default_out("split").string() : a.out);
  const double fraction = s.take("test_fraction", a.o_fraction, a.test_fraction);
  const std::uint64_t seed = s.take("seed", a.o_seed, a.seed);
  const fs::path in_manifest = manifest_path(data);
  const PairedDataset ds = load_data(data);
  if (fs::exists(out_dir) && fs::equivalent(fs::absolute(out_dir), fs::absolute(in_manifest).parent_path())) {
    throw ConfigError("split output directory must differ from the input dataset");
  }
  const PairedDataset split = split_zero_shot(ds, fraction, seed);
  save_dataset(split, out_dir);
  write_run_manifest(out_dir, "split", a.config, s.resolved(), seed, {"manifest.json", "arrays.bin"});
  out << fmt::format("train stimuli: {}, test stimuli: {}\n", split.stimuli(Split::kTrain).size(),
                     split.stimuli(Split::kTest).size());
  return kExitOk;
}

struct TrainArgs {
  std::string config, data, out, resume, stage;
  int epochs = 0, batch_size = 0, checkpoint_interval = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> modalities;
  bool prior = false;
  CLI::Option *o_data, *o_out, *o_resume, *o_stage, *o_epochs, *o_batch, *o_ckpt, *o_lr, *o_seed, *o_mods, *o_prior;
};

int cmd_train(TrainArgs& a, std::ostream& out) {
  Settings s = load_settings(a.config);
  const fs::path data = require_value(s.take("data", a.o_data, a.data), "data");
  const fs::path out_dir = s.take("out", a.o_out, a.out.empty() ? default_out("train").string() : a.out);
  const std::string resume = s.take("resume", a.o_resume, a.resume);
  const PairedDataset ds = load_data(data);

  std::optional<TrainingState> resumed;
  if (!resume.empty()) resumed.emplace(TrainingState::load(resume));

  json train_json = resumed ? to_json(resumed->config) : to_json(TrainConfig{});
  if (s.file().contains("train")) {
    if (!s.file().at("train").is_object()) throw ConfigError("config 'train' must be an object");
    for (const auto& [k, v] : s.file().at("train").items()) train_json[k] = v;
  }
  if (a.o_epochs->count()) train_json["epochs"] = a.epochs;
  if (a.o_batch->count()) train_json["batch_size"] = a.batch_size;
  if (a.o_lr->count()) train_json["learning_rate"] = a.lr;
  if (a.o_seed->count()) train_json["seed"] = a.seed;
  if (a.o_stage->count()) train_json["stage"] = a.stage;
  if (a.o_mods->count()) train_json["modalities"] = a.modalities;
  if (a.o_ckpt->count()) train_json["checkpoint_interval"] = a.checkpoint_interval;
  const TrainConfig tc = train_config_from_json(train_json);

  ArchitectureOptions arch =
      s.file().contains("architecture") ? architecture_from_json(s.file().at("architecture")) : ArchitectureOptions{};
  if (a.o_prior->count()) arch.with_prior = a.prior;
  if (tc.loss.beta > 0.0) arch.with_prior = true;

  std::vector<std::string> mods = tc.modalities;
  if (mods.empty()) {
    for (const auto& m : ds.modalities) mods.push_back(m.name);
  }

  TrainingState state = resumed ? std::move(*resumed) : TrainingState(AlignmentModel(make_model_config(ds, mods, arch, tc.seed)), tc);
  if (resumed) {
    if (tc.mode != state.config.mode) throw ConfigError("cannot change the training mode when resuming");
    state.config = tc;
  }
  check_compatible(state.model, ds, mods);
  s.resolved()["train"] = to_json(state.config);
  s.resolved()["model"] = to_json(state.model.config());

  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "metrics.jsonl", resumed ? std::ios::app : std::ios::trunc);
  if (!log) throw ConfigError(fmt::format("cannot write metric log in '{}'", out_dir.string()));
  TrainHooks hooks;
  hooks.checkpoint_dir = out_dir / "checkpoint";
  hooks.diagnostics_dir = out_dir / "diagnostics";
  hooks.on_record = [&](const json& rec) {
    log << rec.dump() << "\n";
    log.flush();
    out << fmt::format("epoch {:>3} {:<6} {:<8} loss {:.6f}", rec.at("epoch").get<int>(),
                       rec.at("stage").get<std::string>(), rec.at("modality").get<std::string>(),
                       rec.at("loss").at("total").get<double>());
    if (!rec.at("val").is_null() && rec.at("val").contains("2-way")) {
      out << fmt::format("  val 2-way {:.4f}", rec.at("val").at("2-way").get<double>());
    }
    out << "\n";
  };
  train(state, ds, hooks);
  log.close();
  state.save(out_dir / "checkpoint");
  write_run_manifest(out_dir, "train", a.config, s.resolved(), state.config.seed, {"checkpoint", "metrics.jsonl"});
  out << fmt::format("checkpoint written to {}\n", (out_dir / "checkpoint").string());
  return kExitOk;
}

struct EvalArgs {
  std::string config, checkpoint, data, out, split = "test";
  int trials = 50;
  std::uint64_t seed = 0;
  std::vector<std::string> modalities;
  CLI::Option *o_ckpt, *o_data, *o_out, *o_split, *o_trials, *o_seed, *o_mods;
};

int cmd_eval_retrieval(EvalArgs& a, std::ostream& out, std::ostream& err) {
  Settings s = load_settings(a.config);
  const fs::path ckpt = require_value(s.take("checkpoint", a.o_ckpt, a.checkpoint), "checkpoint");
  const fs::path data = require_value(s.take("data", a.o_data, a.data), "data");
  const fs::path out_dir =
      s.take("out", a.o_out, a.out.empty() ? default_out("eval-retrieval").string() : a.out);
  RetrievalOptions opt;
  opt.split = parse_split(s.take("split", a.o_split, a.split));
  opt.trials = s.take("trials", a.o_trials, a.trials);
  opt.seed = s.take("seed", a.o_seed, a.seed);
  std::vector<std::string> mods = s.take("modalities", a.o_mods, a.modalities);

  const AlignmentModel model = load_model(ckpt);
  const PairedDataset ds = load_data(data);
  if (mods.empty()) mods = model.modalities();
  s.resolved()["modalities"] = mods;
  check_compatible(model, ds, mods);

  // Retrieval scores raw projector outputs; the prior is never consulted.
  const RetrievalReport report = evaluate_retrieval(model, ds, mods, opt);
  const std::string table = format_retrieval_table(report);
  fs::create_directories(out_dir);
  write_text(out_dir / "retrieval.txt", table);
  write_text(out_dir / "retrieval.json", to_json(report).dump(2) + "\n");
  write_run_manifest(out_dir, "eval-retrieval", a.config, s.resolved(), opt.seed, {"retrieval.txt", "retrieval.json"});
  if (opt.split == Split::kTrain) err << "warning: evaluating on the train split\n";
  out << table;
  return kExitOk;
}

struct RsaArgs {
  std::string config, checkpoint, data, out, a_space, b_space = kImageSpace, split = "test";
  int permutations = 1000;
  std::uint64_t seed = 0;
  bool matrices = false;
  CLI::Option *o_ckpt, *o_data, *o_out, *o_a, *o_b, *o_split, *o_perm, *o_seed, *o_matrices;
};

int cmd_rsa(RsaArgs& a, std::ostream& out) {
  Settings s = load_settings(a.config);
  const fs::path ckpt = require_value(s.take("checkpoint", a.o_ckpt, a.checkpoint), "checkpoint");
  const fs::path data = require_value(s.take("data", a.o_data, a.data), "data");
  const fs::path out_dir = s.take("out", a.o_out, a.out.empty() ? default_out("rsa").string() : a.out);
  const std::string sa = require_value(s.take("a", a.o_a, a.a_space), "a");
  const std::string sb = require_value(s.take("b", a.o_b, a.b_space), "b");
  const Split split = parse_split(s.take("split", a.o_split, a.split));
  const int perms = s.take("permutations", a.o_perm, a.permutations);
  const std::uint64_t seed = s.take("seed", a.o_seed, a.seed);
  const bool matrices = s.take("matrices", a.o_matrices, a.matrices);

  const AlignmentModel model = load_model(ckpt);
  const PairedDataset ds = load_data(data);
  check_compatible(model, ds, {sa, sb});
  EmbeddedSet ea = stimulus_embeddings(model, ds, sa, split);
  EmbeddedSet eb = stimulus_embeddings(model, ds, sb, split);
  intersect(ea, eb);
  const RSMReport report = rsa(ea.z, eb.z, perms, seed);
  json j = to_json(report, matrices);
  j["a"] = sa;
  j["b"] = sb;
  j["split"] = to_string(split);
  j["object_ids"] = ea.stimulus_ids;
  fs::create_directories(out_dir);
  write_text(out_dir / "rsa.json", j.dump(2) + "\n");
  write_run_manifest(out_dir, "rsa", a.config, s.resolved(), seed, {"rsa.json"});
  out << fmt::format("rsa {} vs {} ({} objects): r = {:.4f}, permutation p = {:.4g}, null q99 = {:.4f}\n", sa, sb,
                     ea.stimulus_ids.size(), report.pearson_r, report.permutation_p, report.null_q99);
  return kExitOk;
}

struct ConceptArgs {
  std::string config, checkpoint, data, out, projection, a_space, b_space, split = "test";
  int shuffles = 1000;
  std::uint64_t seed = 0;
  CLI::Option *o_ckpt, *o_data, *o_out, *o_proj, *o_a, *o_b, *o_split, *o_shuffles, *o_seed;
};

Mat read_projection(const fs::path& path) {
  const json j = read_json(path, "projection");
  try {
    const auto rows = j.at("matrix").get<std::vector<std::vector<double>>>();
    if (rows.empty() || rows.front().empty()) throw ConfigError("projection matrix is empty");
    Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.front().size()) throw ConfigError("projection matrix rows differ in length");
      for (std::size_t k = 0; k < rows[i].size(); ++k) {
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
      }
    }
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("projection '{}' needs a 'matrix' array of rows: {}", path.string(), e.what()));
  }
}

int cmd_concept_retrieval(ConceptArgs& a, std::ostream& out) {
  Settings s = load_settings(a.config);
  const fs::path ckpt = require_value(s.take("checkpoint", a.o_ckpt, a.checkpoint), "checkpoint");
  const fs::path data = require_value(s.take("data", a.o_data, a.data), "data");
  const fs::path out_dir =
      s.take("out", a.o_out, a.out.empty() ? default_out("concept-retrieval").string() : a.out);
  const fs::path proj_path = require_value(s.take("projection", a.o_proj, a.projection), "projection");
  const std::string sa = require_value(s.take("a", a.o_a, a.a_space), "a");
  const std::string sb = require_value(s.take("b", a.o_b, a.b_space), "b");
  const Split split = parse_split(s.take("split", a.o_split, a.split));
  const int shuffles = s.take("shuffles", a.o_shuffles, a.shuffles);
  const std::uint64_t seed = s.take("seed", a.o_seed, a.seed);

  const AlignmentModel model = load_model(ckpt);
  const PairedDataset ds = load_data(data);
  check_compatible(model, ds, {sa, sb});
  const ConceptSpace space(read_projection(proj_path));
  EmbeddedSet ea = stimulus_embeddings(model, ds, sa, split);
  EmbeddedSet eb = stimulus_embeddings(model, ds, sb, split);
  intersect(ea, eb);
  const ConceptEmbeddings ca{space.apply(ea.z), ea.stimulus_ids};
  const ConceptEmbeddings cb{space.apply(eb.z), eb.stimulus_ids};
  const BidirectionalAccuracy acc = forward_backward_retrieval(ca, cb);

  // Shuffled baseline: B's object labels permuted.
  std::vector<double> fwd_null, bwd_null;
  Rng rng(seed);
  std::vector<std::string> ids = cb.object_ids;
  for (int k = 0; k < shuffles; ++k) {
    std::shuffle(ids.begin(), ids.end(), rng);
    const BidirectionalAccuracy n = forward_backward_retrieval(ca, ConceptEmbeddings{cb.z, ids});
    fwd_null.push_back(n.forward);
    bwd_null.push_back(n.backward);
  }
  auto q95 = [](std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    return v[static_cast<std::size_t>(0.95 * static_cast<double>(v.size() - 1))];
  };
  const json j{{"a", sa},
               {"b", sb},
               {"split", to_string(split)},
               {"n_objects", ca.object_ids.size()},
               {"concept_dim", space.output_dim()},
               {"forward_top1", acc.forward},
               {"backward_top1", acc.backward},
               {"chance", 1.0 / static_cast<double>(ca.object_ids.size())},
               {"shuffles", shuffles},
               {"shuffled_forward_q95", q95(fwd_null)},
               {"shuffled_backward_q95", q95(bwd_null)}};
  fs::create_directories(out_dir);
  write_text(out_dir / "concept_retrieval.json", j.dump(2) + "\n");
  write_run_manifest(out_dir, "concept-retrieval", a.config, s.resolved(), seed, {"concept_retrieval.json"});
  out << fmt::format("{} -> {}: {:.4f}   {} -> {}: {:.4f}   ({} objects)\n", sa, sb, acc.forward, sb, sa,
                     acc.backward, ca.object_ids.size());
  return kExitOk;
}

struct MapArgs {
  std::string config, checkpoint, data, out, space, split = "test", method = "mds-init-tsne";
  double perplexity = 15.0;
  std::uint64_t seed = 0;
  CLI::Option *o_ckpt, *o_data, *o_out, *o_space, *o_split, *o_method, *o_perp, *o_seed;
};

int cmd_export_map(MapArgs& a, std::ostream& out) {
  Settings s = load_settings(a.config);
  const fs::path ckpt = require_value(s.take("checkpoint", a.o_ckpt, a.checkpoint), "checkpoint");
  const fs::path data = require_value(s.take("data", a.o_data, a.data), "data");
  const fs::path out_dir = s.take("out", a.o_out, a.out.empty() ? default_out("export-map").string() : a.out);
  const std::string space = require_value(s.take("modality", a.o_space, a.space), "modality");
  const Split split = parse_split(s.take("split", a.o_split, a.split));
  MapOptions opt;
  opt.method = parse_map_method(s.take("method", a.o_method, a.method));
  opt.perplexity = s.take("perplexity", a.o_perp, a.perplexity);
  opt.seed = s.take("seed", a.o_seed, a.seed);

  const AlignmentModel model = load_model(ckpt);
  const PairedDataset ds = load_data(data);
  check_compatible(model, ds, {space});
  const EmbeddedSet set = stimulus_embeddings(model, ds, space, split);
  const double cap = static_cast<double>(set.z.rows() - 1) / 3.0;
  if (opt.method == MapMethod::kMdsInitTsne && opt.perplexity > cap && set.z.rows() >= 10) {
    opt.perplexity = std::max(2.0, cap);
    s.resolved()["perplexity"] = opt.perplexity;
  }
  const Mat coords = embedding_map(set.z, opt);
  std::vector<std::string> concepts;
  for (const auto& id : set.stimulus_ids) concepts.push_back(ds.concept_of(id));
  fs::create_directories(out_dir);
  write_map_csv(out_dir / "map.csv", coords, set.stimulus_ids, concepts);
  write_run_manifest(out_dir, "export-map", a.config, s.resolved(), opt.seed, {"map.csv"});
  out << fmt::format("wrote {} points to {}\n", coords.rows(), (out_dir / "map.csv").string());
  return kExitOk;
}

struct InspectArgs {
  std::string config, data, checkpoint, out;
  CLI::Option *o_data, *o_ckpt, *o_out;
};

int cmd_inspect(InspectArgs& a, std::ostream& out) {
  Settings s = load_settings(a.config);
  const std::string data = s.take("data", a.o_data, a.data);
  const std::string ckpt = s.take("checkpoint", a.o_ckpt, a.checkpoint);
  const fs::path out_dir = s.take("out", a.o_out, a.out.empty() ? default_out("inspect").string() : a.out);
  if (data.empty() && ckpt.empty()) throw ConfigError("inspect needs --data and/or --checkpoint");
  json summary = json::object();
  if (!data.empty()) {
    const PairedDataset ds = load_data(data);
    json mods = json::array();
    for (const auto& m : ds.modalities) {
      json e = to_json(m);
      e["subjects"] = 0;
      std::set<std::string> subjects;
      for (auto i : ds.sample_indices(m.name)) subjects.insert(ds.samples[i].subject_id);
      e["subjects"] = subjects.size();
      e["train_samples"] = ds.sample_indices(m.name, Split::kTrain).size();
      e["test_samples"] = ds.sample_indices(m.name, Split::kTest).size();
      mods.push_back(e);
    }
    std::set<std::string> train_concepts, test_concepts;
    for (const auto& [stim, split] : ds.splits) {
      (split == Split::kTrain ? train_concepts : test_concepts).insert(ds.concept_of(stim));
    }
    std::size_t shared = 0;
    for (const auto& c : test_concepts) shared += train_concepts.count(c);
    summary["dataset"] = {{"embedding_dim", ds.embedding_dim},
                          {"samples", ds.samples.size()},
                          {"stimuli", ds.embeddings.size()},
                          {"concepts", ds.concepts().size()},
                          {"train_stimuli", ds.stimuli(Split::kTrain).size()},
                          {"test_stimuli", ds.stimuli(Split::kTest).size()},
                          {"concepts_in_both_splits", shared},
                          {"modalities", mods}};
  }
  if (!ckpt.empty()) {
    const TrainingState st = TrainingState::load(ckpt);
    std::size_t n_params = 0;
    st.model.visit([&](const std::string&, const ad::Parameter& p) { n_params += static_cast<std::size_t>(p.value.size()); });
    summary["checkpoint"] = {{"epoch", st.epoch},
                             {"stage", st.stage},
                             {"stages_completed", st.stages_completed},
                             {"modalities", st.model.modalities()},
                             {"parameters", n_params},
                             {"has_prior", st.model.has_prior()},
                             {"train", to_json(st.config)}};
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "inspect.json", summary.dump(2) + "\n");
  write_run_manifest(out_dir, "inspect", a.config, s.resolved(), 0, {"inspect.json"});
  out << summary.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot read '{}' for hashing", path.string()));
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal neural-to-image embedding alignment toolkit", "neuroalign"};
  app.require_subcommand(1);
  auto config_opt = [](CLI::App* sub, std::string& target) {
    sub->add_option("--config", target, "JSON config; CLI flags override its values");
  };

  SynthArgs synth;
  CLI::App* c_synth = app.add_subcommand("synth", "Generate a synthetic paired dataset");
  config_opt(c_synth, synth.config);
  synth.o_spec = c_synth->add_option("--spec", synth.spec, "Synthetic spec (JSON)");
  synth.o_out = c_synth->add_option("--out", synth.out, "Output directory");
  synth.o_seed = c_synth->add_option("--seed", synth.seed, "Override the spec seed");

  SplitArgs split;
  CLI::App* c_split = app.add_subcommand("split", "Assign whole concepts to a held-out test split");
  config_opt(c_split, split.config);
  split.o_data = c_split->add_option("--data", split.data, "Dataset directory or manifest");
  split.o_out = c_split->add_option("--out", split.out, "Output directory");
  split.o_fraction = c_split->add_option("--test-fraction", split.test_fraction, "Fraction of concepts held out");
  split.o_seed = c_split->add_option("--seed", split.seed, "Shuffle seed");

  TrainArgs tr;
  CLI::App* c_train = app.add_subcommand("train", "Train encoders, projector and optional prior");
  config_opt(c_train, tr.config);
  tr.o_data = c_train->add_option("--data", tr.data, "Dataset directory or manifest");
  tr.o_out = c_train->add_option("--out", tr.out, "Output directory");
  tr.o_resume = c_train->add_option("--resume", tr.resume, "Checkpoint directory to resume from");
  tr.o_stage = c_train->add_option("--stage", tr.stage, "joint or staged")->check(CLI::IsMember({"joint", "staged"}));
  tr.o_epochs = c_train->add_option("--epochs", tr.epochs, "Epochs (per stage when staged)");
  tr.o_batch = c_train->add_option("--batch-size", tr.batch_size, "Samples per batch");
  tr.o_lr = c_train->add_option("--lr", tr.lr, "AdamW learning rate");
  tr.o_seed = c_train->add_option("--seed", tr.seed, "Training seed");
  tr.o_mods = c_train->add_option("--modalities", tr.modalities, "Active modalities");
  tr.o_ckpt = c_train->add_option("--checkpoint-interval", tr.checkpoint_interval, "Epochs between checkpoints");
  tr.o_prior = c_train->add_flag("--prior", tr.prior, "Attach a diffusion prior head");

  EvalArgs ev;
  CLI::App* c_eval = app.add_subcommand("eval-retrieval", "k-way zero-shot retrieval report");
  config_opt(c_eval, ev.config);
  ev.o_ckpt = c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory");
  ev.o_data = c_eval->add_option("--data", ev.data, "Dataset directory or manifest");
  ev.o_out = c_eval->add_option("--out", ev.out, "Output directory");
  ev.o_split = c_eval->add_option("--split", ev.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  ev.o_trials = c_eval->add_option("--trials", ev.trials, "Distractor resamplings per query");
  ev.o_seed = c_eval->add_option("--seed", ev.seed, "Distractor seed");
  ev.o_mods = c_eval->add_option("--modalities", ev.modalities, "Modalities to evaluate");

  RsaArgs rs;
  CLI::App* c_rsa = app.add_subcommand("rsa", "Representational similarity analysis");
  config_opt(c_rsa, rs.config);
  rs.o_ckpt = c_rsa->add_option("--checkpoint", rs.checkpoint, "Checkpoint directory");
  rs.o_data = c_rsa->add_option("--data", rs.data, "Dataset directory or manifest");
  rs.o_out = c_rsa->add_option("--out", rs.out, "Output directory");
  rs.o_a = c_rsa->add_option("--a", rs.a_space, "Predicted space: a modality or 'image'");
  rs.o_b = c_rsa->add_option("--b", rs.b_space, "Measured space: a modality or 'image'");
  rs.o_split = c_rsa->add_option("--split", rs.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  rs.o_perm = c_rsa->add_option("--permutations", rs.permutations, "Label shuffles for the null");
  rs.o_seed = c_rsa->add_option("--seed", rs.seed, "Permutation seed");
  rs.o_matrices = c_rsa->add_flag("--matrices", rs.matrices, "Include both RSMs in the output");

  ConceptArgs cr;
  CLI::App* c_concept = app.add_subcommand("concept-retrieval", "Forward/backward retrieval in a concept space");
  config_opt(c_concept, cr.config);
  cr.o_ckpt = c_concept->add_option("--checkpoint", cr.checkpoint, "Checkpoint directory");
  cr.o_data = c_concept->add_option("--data", cr.data, "Dataset directory or manifest");
  cr.o_out = c_concept->add_option("--out", cr.out, "Output directory");
  cr.o_proj = c_concept->add_option("--projection", cr.projection, "JSON {\"matrix\": M x F rows}");
  cr.o_a = c_concept->add_option("--a", cr.a_space, "First modality (or 'image')");
  cr.o_b = c_concept->add_option("--b", cr.b_space, "Second modality (or 'image')");
  cr.o_split = c_concept->add_option("--split", cr.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  cr.o_shuffles = c_concept->add_option("--shuffles", cr.shuffles, "Shuffled-baseline repetitions");
  cr.o_seed = c_concept->add_option("--seed", cr.seed, "Shuffle seed");

  MapArgs mp;
  CLI::App* c_map = app.add_subcommand("export-map", "2-D embedding map for plotting");
  config_opt(c_map, mp.config);
  mp.o_ckpt = c_map->add_option("--checkpoint", mp.checkpoint, "Checkpoint directory");
  mp.o_data = c_map->add_option("--data", mp.data, "Dataset directory or manifest");
  mp.o_out = c_map->add_option("--out", mp.out, "Output directory");
  mp.o_space = c_map->add_option("--modality", mp.space, "Modality (or 'image')");
  mp.o_split = c_map->add_option("--split", mp.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  mp.o_method = c_map->add_option("--method", mp.method, "mds-init-tsne or mds");
  mp.o_perp = c_map->add_option("--perplexity", mp.perplexity, "t-SNE perplexity");
  mp.o_seed = c_map->add_option("--seed", mp.seed, "Map seed");

  InspectArgs in;
  CLI::App* c_inspect = app.add_subcommand("inspect", "Summarize a dataset and/or checkpoint");
  config_opt(c_inspect, in.config);
  in.o_data = c_inspect->add_option("--data", in.data, "Dataset directory or manifest");
  in.o_ckpt = c_inspect->add_option("--checkpoint", in.checkpoint, "Checkpoint directory");
  in.o_out = c_inspect->add_option("--out", in.out, "Output directory");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\nRun with --help for usage.\n";
    return kExitUsage;
  }

  try {
    if (c_synth->parsed()) return cmd_synth(synth, out);
    if (c_split->parsed()) return cmd_split(split, out);
    if (c_train->parsed()) return cmd_train(tr, out);
    if (c_eval->parsed()) return cmd_eval_retrieval(ev, out, err);
    if (c_rsa->parsed()) return cmd_rsa(rs, out);
    if (c_concept->parsed()) return cmd_concept_retrieval(cr, out);
    if (c_map->parsed()) return cmd_export_map(mp, out);
    if (c_inspect->parsed()) return cmd_inspect(in, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace neuroalign::cli
