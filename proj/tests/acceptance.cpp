// Acceptance run: prints one PASS/FAIL line per headline criterion and exits
// nonzero when any of them fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "neuroalign/encoder.hpp"
#include "neuroalign/errors.hpp"
#include "neuroalign/evalsuite.hpp"
#include "neuroalign/objectives.hpp"
#include "neuroalign/prior.hpp"
#include "neuroalign/projector.hpp"
#include "neuroalign/trainer.hpp"
#include "test_support.hpp"

namespace na = neuroalign;
namespace fs = std::filesystem;
using na::Mat;
using na::Rng;
using na::randn;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<int> iota_truth(int n) {
  std::vector<int> t(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i)] = i;
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_what;
  std::size_t entries = 0;
  auto note = [&](const na::testing::GradCheck& g, const std::string& what) {
    entries += g.entries;
    if (!(g.rel_error <= worst)) {
      worst = g.rel_error;
      worst_what = what;
    }
  };

  for (int cfg_i = 0; cfg_i < 8; ++cfg_i) {
    Rng rng(500 + static_cast<std::uint64_t>(cfg_i));
    const int c = std::uniform_int_distribution<int>(1, 4)(rng);
    const int t = std::uniform_int_distribution<int>(8, 32)(rng);
    const int n = std::uniform_int_distribution<int>(1, std::min(3, static_cast<int>(std::log2(t))))(rng);
    const int heads = cfg_i % 2 ? 2 : 1;
    const int d = heads * std::uniform_int_distribution<int>(2, 8)(rng);
    na::EncoderConfig ec;
    ec.modality = cfg_i == 7 ? na::ModalityKind::static_features("fmri", 6) : na::ModalityKind::time_resolved("eeg", c, t);
    ec.n_granularities = n;
    ec.model_dim = d;
    ec.channels = 4;
    ec.heads = heads;
    ec.conv_channels = 3;
    ec.head_hidden = 12;
    ec.static_steps = 8;
    ec.inter_mode = cfg_i % 3 == 2 ? na::InterGranularityMode::kRouterGate : na::InterGranularityMode::kCrossAttention;
    ec.subject_embedding = cfg_i % 2 == 0;
    ec.subjects = {"s"};
    ec.embedding_dim = 5;
    na::EncoderTower tower(ec, rng);
    std::vector<na::ad::Parameter*> ps;
    tower.visit("e", [&](const std::string&, na::ad::Parameter& p) {
      p.value += randn(p.value.rows(), p.value.cols(), rng, 0.05);
      ps.push_back(&p);
    });
    const Mat x = randn(ec.modality.signal_rows(), ec.modality.signal_cols(), rng);
    const Mat probe = randn(1, 5, rng);
    note(na::testing::check_gradients(ps, [&](na::ad::Tape& tp) {
      const na::ad::Var y = tower.forward(tp, tp.constant(x), "s").y;
      return na::ad::sum(na::ad::mul(tower.align_head(tp, y), tp.constant(probe)));
    }, 1e-5, 12, static_cast<std::uint64_t>(cfg_i)), fmt::format("encoder cfg {}", cfg_i));
  }

  for (int k = 1; k <= 4; ++k) {
    for (auto mode : {na::RoutingNormalization::kSoftmax, na::RoutingNormalization::kSigmoidNormalized}) {
      Rng rng(600 + static_cast<std::uint64_t>(k));
      na::MoEConfig mc;
      mc.input_dim = std::uniform_int_distribution<int>(2, 16)(rng);
      mc.experts = k;
      mc.output_dim = std::uniform_int_distribution<int>(2, 8)(rng);
      mc.router_hidden = 6;
      mc.hidden = 7;
      mc.routing = mode;
      na::MoEProjector proj(mc, rng);
      std::vector<na::ad::Parameter*> ps;
      proj.visit("p", [&](const std::string&, na::ad::Parameter& p) { ps.push_back(&p); });
      na::ad::Parameter input(randn(5, mc.input_dim, rng));
      ps.push_back(&input);
      const Mat probe = randn(5, mc.output_dim, rng);
      note(na::testing::check_gradients(ps, [&](na::ad::Tape& tp) {
        return na::ad::sum(na::ad::mul(proj.project(tp, tp.param(input)), tp.constant(probe)));
      }, 1e-5, 12), fmt::format("projector K={}", k));
    }
  }

  for (int trial = 0; trial < 6; ++trial) {
    Rng rng(700 + static_cast<std::uint64_t>(trial));
    const int nrows = std::uniform_int_distribution<int>(2, 8)(rng);
    const int f = std::uniform_int_distribution<int>(2, 16)(rng);
    na::ad::Parameter p(randn(nrows, f, rng)), tt(randn(nrows, f, rng)), prior(randn(1, 1, rng));
    const double tau = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    note(na::testing::check_gradients({&p, &tt}, [&](na::ad::Tape& tp) {
      return na::softclip_loss(tp.param(p), tp.param(tt), tau);
    }), "softclip");
    note(na::testing::check_gradients({&p, &tt}, [&](na::ad::Tape& tp) {
      return na::mse_loss(tp.param(p), tp.param(tt));
    }), "mse");
    const auto lc = na::LossConfig::generation(0.5, 0.3, tau);
    note(na::testing::check_gradients({&p, &tt, &prior}, [&](na::ad::Tape& tp) {
      return na::compound_loss(tp.param(p), tp.param(tt), tp.param(prior), lc).total;
    }), "compound");
  }

  for (int trial = 0; trial < 4; ++trial) {
    Rng rng(800 + static_cast<std::uint64_t>(trial));
    na::PriorConfig pc;
    pc.embedding_dim = std::uniform_int_distribution<int>(2, 8)(rng);
    pc.steps = 10;
    pc.width = 12;
    pc.time_embedding_dim = 6;
    pc.schedule = trial % 2 ? na::NoiseSchedule::kLinear : na::NoiseSchedule::kCosine;
    na::DiffusionPrior prior(pc, rng);
    std::vector<na::ad::Parameter*> ps;
    prior.visit("prior", [&](const std::string&, na::ad::Parameter& p) { ps.push_back(&p); });
    na::ad::Parameter z(randn(4, pc.embedding_dim, rng)), tt(randn(4, pc.embedding_dim, rng));
    ps.push_back(&z);
    ps.push_back(&tt);
    note(na::testing::check_gradients(ps, [&](na::ad::Tape& tp) {
      Rng noise(900 + static_cast<std::uint64_t>(trial));
      return prior.loss(tp, tp.param(z), tp.param(tt), noise);
    }, 1e-5, 12), "prior");
  }

  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 300.0,
          fmt::format("max rel error {:.3e} ({}) over {} entries, {:.1f} s (limits 1e-4, 300 s)", worst, worst_what,
                      entries, secs)};
}

Outcome routing_simplex() {
  double worst_sum = 0.0, min_entry = 1.0;
  Rng data(3);
  const Mat tokens = randn(1000, 12, data, 3.0);
  for (auto mode : {na::RoutingNormalization::kSoftmax, na::RoutingNormalization::kSigmoidNormalized}) {
    for (int init = 0; init < 20; ++init) {
      Rng rng(1000 + static_cast<std::uint64_t>(init));
      na::MoEConfig mc;
      mc.input_dim = 12;
      mc.experts = 1 + init % 4;
      mc.output_dim = 6;
      mc.routing = mode;
      const Mat w = na::MoEProjector(mc, rng).route(tokens);
      worst_sum = std::max(worst_sum, (w.rowwise().sum().array() - 1.0).abs().maxCoeff());
      min_entry = std::min(min_entry, w.minCoeff());
    }
  }
  return {worst_sum <= 1e-6 && min_entry >= 0.0,
          fmt::format("max |row sum - 1| {:.2e}, min weight {:.3e} (1000 tokens x 20 inits x 2 modes)", worst_sum, min_entry)};
}

Outcome patching() {
  Rng rng(17);
  int bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int t = std::uniform_int_distribution<int>(2, 400)(rng);
    const int n = std::uniform_int_distribution<int>(1, std::min(8, static_cast<int>(std::log2(t))))(rng);
    const int c = std::uniform_int_distribution<int>(1, 5)(rng);
    const Mat x = randn(c, t, rng);
    const auto patches = na::patch_multi_granularity(x, n, 0.0);
    const auto counts = na::granularity_token_counts(t, n);
    for (int i = 1; i <= n; ++i) {
      const int len = 1 << i;
      const Mat& p = patches[static_cast<std::size_t>(i - 1)];
      const int expected = static_cast<int>(std::ceil(static_cast<double>(t) / len));
      if (p.rows() != expected || counts[static_cast<std::size_t>(i - 1)] != expected) {
        ++bad;
        continue;
      }
      Mat back(c, t);
      for (Eigen::Index r = 0; r < p.rows(); ++r)
        for (int k = 0; k < len; ++k)
          for (int ch = 0; ch < c; ++ch)
            if (r * len + k < t) back(ch, r * len + k) = p(r, k * c + ch);
      if (back != x) ++bad;
    }
  }
  return {bad == 0, fmt::format("{} mismatches over 200 (T, n) pairs", bad)};
}

Outcome softclip_oracle() {
  Rng rng(21);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = std::uniform_int_distribution<int>(1, 8)(rng);
    const int f = std::uniform_int_distribution<int>(2, 16)(rng);
    const double tau = std::uniform_real_distribution<double>(0.05, 2.0)(rng);
    const Mat p = randn(n, f, rng), t = randn(n, f, rng);
    worst = std::max(worst, std::abs(na::softclip_loss(p, t, tau) - na::testing::softclip_bruteforce(p, t, tau)));
  }
  return {worst <= 1e-9, fmt::format("max |loss - double sum| {:.2e} over 100 batches (limit 1e-9)", worst)};
}

Outcome retrieval_oracle() {
  Rng rng(31);
  const Mat c = randn(200, 16, rng);
  const Mat q = c + randn(200, 16, rng, 1.2);
  const auto truth = iota_truth(200);
  const double lib1 = na::kway_retrieval(q, truth, c, 200, 1, 1, 5);
  const double ref1 = na::testing::exhaustive_topk(q, truth, c, 1);
  const double lib5 = na::kway_retrieval(q, truth, c, 200, 5, 1, 5);
  const double ref5 = na::testing::exhaustive_topk(q, truth, c, 5);
  const Mat rc = randn(2000, 16, rng), rq = randn(2000, 16, rng);
  const double chance = na::kway_retrieval(rq, iota_truth(2000), rc, 2, 1, 5, 6);
  return {lib1 == ref1 && lib5 == ref5 && std::abs(chance - 0.5) <= 0.02,
          fmt::format("200x200 top-1 {:.4f} vs oracle {:.4f}, top-5 {:.4f} vs {:.4f}; random 2-way {:.4f} over 10^4 "
                      "trials (0.50 +/- 0.02)",
                      lib1, ref1, lib5, ref5, chance)};
}

// ---------------------------------------------------------------------------

struct Benchmark {
  na::PairedDataset data;
  std::optional<na::TrainingState> state;
  double train_seconds = 0.0;
  na::RetrievalReport multi;
};

constexpr int kBenchmarkEpochs = 20;

na::TrainConfig benchmark_config(std::vector<std::string> modalities) {
  na::TrainConfig c;  // retrieval preset, lr 3e-4, batch 64
  c.epochs = kBenchmarkEpochs;
  c.seed = 7;
  c.val_interval = 0;
  c.modalities = std::move(modalities);
  return c;
}

Benchmark& benchmark() {
  static Benchmark b = [] {
    Benchmark out;
    out.data = na::split_zero_shot(na::generate_synthetic(na::testing::benchmark_spec(0)), 0.2, 0);
    na::ArchitectureOptions arch;
    arch.with_prior = true;
    const auto t0 = std::chrono::steady_clock::now();
    out.state.emplace(na::AlignmentModel(na::make_model_config(out.data, {}, arch, 7)), benchmark_config({}));
    na::train(*out.state, out.data);
    out.train_seconds = seconds_since(t0);
    out.multi = na::evaluate_retrieval(out.state->model, out.data, out.state->model.modalities(), {});
    return out;
  }();
  return b;
}

double mean_accuracy(const na::RetrievalRow& r) { return (*r.way2 + *r.way10) / 2.0; }

Outcome end_to_end() {
  Benchmark& b = benchmark();
  bool pass = b.train_seconds <= 600.0 && kBenchmarkEpochs <= 50;
  std::string detail = fmt::format("{} epochs in {:.0f} s;", kBenchmarkEpochs, b.train_seconds);
  double multi_mean = 0.0, single_mean = 0.0;
  for (const auto& row : b.multi.rows) {
    pass = pass && row.way2 && row.way10 && *row.way2 >= 0.95 && *row.way10 >= 0.70;
    detail += fmt::format(" {} 2-way {:.4f} 10-way {:.4f};", row.modality, row.way2.value_or(0), row.way10.value_or(0));
    multi_mean += mean_accuracy(row);

    na::TrainingState single(na::AlignmentModel(na::make_model_config(b.data, {row.modality}, {}, 7)),
                             benchmark_config({row.modality}));
    na::train(single, b.data);
    const auto rep = na::evaluate_retrieval(single.model, b.data, {row.modality}, {});
    single_mean += mean_accuracy(rep.rows.front());
  }
  multi_mean /= static_cast<double>(b.multi.rows.size());
  single_mean /= static_cast<double>(b.multi.rows.size());
  pass = pass && multi_mean >= single_mean - 0.02;
  detail += fmt::format(" multi mean {:.4f} vs single mean {:.4f} (>= single - 0.02)", multi_mean, single_mean);
  return {pass, detail};
}

Outcome rsa_sanity() {
  Rng rng(41);
  const Mat x = randn(40, 16, rng);
  const double self = na::rsa(x, x, 0).pearson_r;
  Benchmark& b = benchmark();
  auto avg = [&](const std::string& m) {
    return na::average_by_stimulus(na::embed_samples(b.state->model, b.data, m, na::Split::kTest));
  };
  const auto eeg = avg("eeg"), meg = avg("meg");
  if (eeg.stimulus_ids != meg.stimulus_ids) return {false, "eeg and meg test stimuli differ"};
  const auto r = na::rsa(eeg.z, meg.z, 1000, 3);
  return {self == 1.0 && r.pearson_r > r.null_q99,
          fmt::format("rsa(X, X) = {:.17g}; eeg vs meg r = {:.4f} vs null q99 {:.4f} (1000 shuffles, p = {:.4f})", self,
                      r.pearson_r, r.null_q99, r.permutation_p)};
}

Outcome prior_behavior() {
  Benchmark& b = benchmark();
  na::TrainingState& s = *b.state;
  const auto fresh_config = s.model.config().prior.value();
  Rng init(fresh_config.seed + 99);
  const na::DiffusionPrior untrained(fresh_config, init);

  na::run_stage(s, b.data, 3);
  const na::DiffusionPrior& trained = s.model.prior();

  const auto idx = b.data.sample_indices("eeg", na::Split::kTest);
  int wins = 0, trials = 0;
  for (std::size_t k = 0; k < idx.size() && trials < 100; ++k, ++trials) {
    const na::NeuralSample& smp = b.data.samples[idx[k]];
    const Mat z = s.model.embed({&smp});
    const Mat target = b.data.embedding_matrix({smp.stimulus_id});
    const auto seed = na::mix_seed(51, k);
    const Mat a = trained.sample(z, seed);
    const Mat u = na::sample_prior(z, untrained.schedule(), untrained.denoiser(), seed);
    auto cos = [&](const Mat& m) { return m.row(0).dot(target.row(0)) / (m.norm() * target.norm()); };
    wins += cos(a) > cos(u) ? 1 : 0;
  }
  const double p = na::testing::sign_test_p(wins, trials);

  bool wiring = true;
  for (const char* rel : {"src/evalsuite.cpp", "tools/cli.cpp"}) {
    const std::string src = slurp(fs::path(NEUROALIGN_SOURCE_DIR) / rel);
    wiring = wiring && !src.empty() && src.find("sample_prior") == std::string::npos &&
             src.find(".sample(") == std::string::npos;
  }
  const auto before = na::prior_sample_call_count();
  na::evaluate_retrieval(s.model, b.data, s.model.modalities(), {});
  wiring = wiring && na::prior_sample_call_count() == before;
  return {p < 0.01 && trials == 100 && wiring,
          fmt::format("trained beats untrained in {}/{} trials, sign test p = {:.2e} (< 0.01); retrieval wiring {}",
                      wins, trials, p, wiring ? "never samples the prior" : "CALLS THE PRIOR")};
}

Outcome reproducibility() {
  const fs::path root = fs::temp_directory_path() / "neuroalign_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream(root / "spec.json") << na::to_json(na::testing::small_spec(5, 30)).dump();
    na::ArchitectureOptions a;
    a.model_dim = 16;
    a.heads = 2;
    a.head_hidden = 32;
    std::ofstream(root / "config.json")
        << json{{"architecture", na::to_json(a)}, {"train", {{"epochs", 3}, {"batch_size", 16}, {"seed", 9}}}}.dump();
  }
  auto cli = [&](std::vector<std::string> args) {
    std::ostringstream o, e;
    const int code = na::cli::run_cli(args, o, e);
    if (code != 0) std::cerr << e.str();
    return code;
  };
  bool ok = cli({"synth", "--spec", (root / "spec.json").string(), "--out", (root / "raw").string()}) == 0 &&
            cli({"split", "--data", (root / "raw").string(), "--out", (root / "data").string(), "--seed", "2"}) == 0;
  std::vector<std::string> reports;
  for (const char* run : {"run_a", "run_b"}) {
    const fs::path dir = root / run;
    ok = ok && cli({"train", "--config", (root / "config.json").string(), "--data", (root / "data").string(), "--out",
                    (dir / "train").string()}) == 0;
    ok = ok && cli({"eval-retrieval", "--checkpoint", (dir / "train" / "checkpoint").string(), "--data",
                    (root / "data").string(), "--out", (dir / "eval").string(), "--seed", "4"}) == 0;
    reports.push_back(slurp(dir / "eval" / "retrieval.txt") + slurp(dir / "eval" / "retrieval.json") +
                      slurp(dir / "train" / "metrics.jsonl"));
  }
  const bool identical = ok && reports[0] == reports[1] && !reports[0].empty();

  // Save/load of the benchmark model preserves every metric.
  Benchmark& b = benchmark();
  b.state->save(root / "ckpt");
  const na::TrainingState loaded = na::TrainingState::load(root / "ckpt");
  const auto mods = b.state->model.modalities();
  auto metrics = [&](const na::AlignmentModel& m) {
    std::string out = na::to_json(na::evaluate_retrieval(m, b.data, mods, {})).dump();
    const auto e = na::average_by_stimulus(na::embed_samples(m, b.data, "eeg", na::Split::kTest));
    const auto f = na::average_by_stimulus(na::embed_samples(m, b.data, "fmri", na::Split::kTest));
    out += na::to_json(na::rsa(e.z, f.z, 100, 1)).dump();
    out += fmt::format("{:.17g}", na::mean_softclip(m, b.data, mods, na::Split::kTest, 0.07));
    return out;
  };
  const bool preserved = metrics(b.state->model) == metrics(loaded.model);
  fs::remove_all(root);
  return {identical && preserved,
          fmt::format("CLI train+eval runs byte-identical: {}; checkpoint round trip preserves metrics: {}",
                      identical ? "yes" : "no", preserved ? "yes" : "no")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient-correctness", gradients},
      {"routing-simplex", routing_simplex},
      {"patching-arithmetic", patching},
      {"softclip-oracle", softclip_oracle},
      {"retrieval-oracle", retrieval_oracle},
      {"synthetic-end-to-end", end_to_end},
      {"rsa-sanity", rsa_sanity},
      {"prior-behavior", prior_behavior},
      {"reproducibility", reproducibility},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, fmt::format("exception: {}", e.what())};
    }
    failures += o.pass ? 0 : 1;
    std::cout << fmt::format("{} {}: {}", o.pass ? "PASS" : "FAIL", name, o.detail) << std::endl;
  }
  std::cout << fmt::format("{} of {} criteria passed", criteria.size() - static_cast<std::size_t>(failures),
                           criteria.size())
            << std::endl;
  return failures == 0 ? 0 : 1;
}
