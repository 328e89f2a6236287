#include "neuroalign/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <fmt/format.h>

#include "neuroalign/errors.hpp"
#include "neuroalign/rng.hpp"

namespace neuroalign {
namespace {

Mat normalized_rows(const Mat& m, const char* what) {
  Mat out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericError(fmt::format("{}: row {} has zero norm", what, i));
    out.row(i) /= n;
  }
  return out;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

EmbeddedSet embed_samples(const AlignmentModel& model, const PairedDataset& dataset, const std::string& modality,
                          Split split, std::size_t batch_size) {
  const auto idx = dataset.sample_indices(modality, split);
  EmbeddedSet out;
  out.z = Mat(static_cast<Eigen::Index>(idx.size()), model.projector().config().output_dim);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    std::vector<const NeuralSample*> batch;
    for (std::size_t i = start; i < std::min(idx.size(), start + batch_size); ++i) batch.push_back(&dataset.samples[idx[i]]);
    out.z.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(batch.size())) = model.embed(batch);
  }
  for (auto i : idx) {
    out.stimulus_ids.push_back(dataset.samples[i].stimulus_id);
    out.subject_ids.push_back(dataset.samples[i].subject_id);
  }
  return out;
}

EmbeddedSet average_by_stimulus(const EmbeddedSet& set) {
  std::map<std::string, std::pair<Vec, int>> acc;
  for (std::size_t i = 0; i < set.stimulus_ids.size(); ++i) {
    auto [it, inserted] = acc.try_emplace(set.stimulus_ids[i], Vec::Zero(set.z.cols()), 0);
    it->second.first += set.z.row(static_cast<Eigen::Index>(i)).transpose();
    ++it->second.second;
  }
  EmbeddedSet out;
  out.z = Mat(static_cast<Eigen::Index>(acc.size()), set.z.cols());
  Eigen::Index r = 0;
  for (const auto& [id, sum_count] : acc) {
    out.z.row(r++) = (sum_count.first / sum_count.second).transpose();
    out.stimulus_ids.push_back(id);
    out.subject_ids.push_back("mean");
  }
  return out;
}

double kway_retrieval(const Mat& queries, const std::vector<int>& truth, const Mat& candidates, int ways, int top,
                      int trials, std::uint64_t seed) {
  const auto n_cand = static_cast<int>(candidates.rows());
  if (ways < 2) throw ConfigError("retrieval: ways must be >= 2");
  if (ways > n_cand) throw ConfigError(fmt::format("retrieval: {}-way needs at least {} candidates, have {}", ways, ways, n_cand));
  if (top < 1) throw ConfigError("retrieval: top must be >= 1");
  if (trials < 1) throw ConfigError("retrieval: trials must be >= 1");
  if (static_cast<std::size_t>(queries.rows()) != truth.size()) throw ConfigError("retrieval: truth size mismatch");
  if (queries.rows() == 0) throw ConfigError("retrieval: no queries");
  if (queries.cols() != candidates.cols()) throw ConfigError("retrieval: query/candidate dimension mismatch");

  const Mat q = normalized_rows(queries, "retrieval queries");
  const Mat c = normalized_rows(candidates, "retrieval candidates");
  const Mat sims = q * c.transpose();
  const bool exhaustive = ways == n_cand;
  const int passes = exhaustive ? 1 : trials;

  long long hits = 0;
  std::vector<int> others(static_cast<std::size_t>(n_cand - 1));
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const int t = truth[static_cast<std::size_t>(i)];
    if (t < 0 || t >= n_cand) throw ConfigError("retrieval: truth index out of range");
    const double s_true = sims(i, t);
    if (exhaustive) {
      int above = 0;
      for (int j = 0; j < n_cand; ++j) {
        if (j != t && sims(i, j) > s_true) ++above;
      }
      hits += above < top ? 1 : 0;
      continue;
    }
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    for (int trial = 0; trial < passes; ++trial) {
      std::iota(others.begin(), others.end(), 0);
      for (auto& o : others) {
        if (o >= t) ++o;
      }
      int above = 0;
      // Partial Fisher-Yates: the first ways-1 slots are the distractors.
      for (int d = 0; d < ways - 1; ++d) {
        std::uniform_int_distribution<int> pick(d, n_cand - 2);
        std::swap(others[static_cast<std::size_t>(d)], others[static_cast<std::size_t>(pick(rng))]);
        if (sims(i, others[static_cast<std::size_t>(d)]) > s_true) ++above;
      }
      hits += above < top ? 1 : 0;
    }
  }
  return static_cast<double>(hits) / (static_cast<double>(q.rows()) * passes);
}

RetrievalReport evaluate_retrieval(const AlignmentModel& model, const PairedDataset& dataset,
                                   const std::vector<std::string>& modalities, const RetrievalOptions& options) {
  RetrievalReport report;
  report.split = options.split;
  report.trials = options.trials;
  report.seed = options.seed;
  const std::vector<std::string> stimuli = dataset.stimuli(options.split);
  if (stimuli.size() < 2) throw ConfigError("retrieval: the split needs at least two stimuli");
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < stimuli.size(); ++i) index[stimuli[i]] = static_cast<int>(i);
  const Mat candidates = dataset.embedding_matrix(stimuli);
  const int kmax = static_cast<int>(stimuli.size());

  for (std::size_t mi = 0; mi < modalities.size(); ++mi) {
    const std::string& m = modalities[mi];
    EmbeddedSet set = embed_samples(model, dataset, m, options.split);
    if (set.z.rows() == 0) throw ConfigError(fmt::format("retrieval: modality '{}' has no samples in the split", m));
    std::vector<int> truth;
    for (const auto& s : set.stimulus_ids) truth.push_back(index.at(s));
    const std::uint64_t base = mix_seed(options.seed, mi);
    RetrievalRow row;
    row.modality = m;
    row.kmax = kmax;
    row.n_queries = truth.size();
    auto way = [&](int k) -> std::optional<double> {
      if (k > kmax) return std::nullopt;
      return kway_retrieval(set.z, truth, candidates, k, 1, options.trials, mix_seed(base, static_cast<std::uint64_t>(k)));
    };
    row.way2 = way(2);
    row.way4 = way(4);
    row.way10 = way(10);
    row.kmax_top1 = kway_retrieval(set.z, truth, candidates, kmax, 1, 1, base);
    row.kmax_top5 = kway_retrieval(set.z, truth, candidates, kmax, std::min(5, kmax), 1, base);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string format_retrieval_table(const RetrievalReport& report) {
  std::string out;
  if (report.split == Split::kTrain) {
    out += "WARNING: evaluated on the TRAIN split; accuracies are not zero-shot and overstate generalization.\n";
  }
  const int kmax = report.rows.empty() ? 0 : report.rows.front().kmax;
  auto cell = [](const std::optional<double>& v) { return v ? fmt::format("{:.2f}", *v * 100.0) : std::string("n/a"); };
  out += fmt::format("# split={} trials={} seed={}\n", to_string(report.split), report.trials, report.seed);
  out += fmt::format("{:<12} | {:>8} | {:>8} | {:>8} | {:>14} | {:>14}\n", "modality", "2-way", "4-way", "10-way",
                     fmt::format("{}-way top-1", kmax), fmt::format("{}-way top-5", kmax));
  for (const auto& r : report.rows) {
    out += fmt::format("{:<12} | {:>8} | {:>8} | {:>8} | {:>14.2f} | {:>14.2f}\n", r.modality, cell(r.way2),
                       cell(r.way4), cell(r.way10), r.kmax_top1 * 100.0, r.kmax_top5 * 100.0);
  }
  return out;
}

nlohmann::json to_json(const RetrievalReport& report) {
  nlohmann::json j;
  j["split"] = to_string(report.split);
  j["trials"] = report.trials;
  j["seed"] = report.seed;
  j["train_split_warning"] = report.split == Split::kTrain;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    j["rows"].push_back({{"modality", r.modality},
                         {"2-way", opt(r.way2)},
                         {"4-way", opt(r.way4)},
                         {"10-way", opt(r.way10)},
                         {"kmax", r.kmax},
                         {"kmax_top1", r.kmax_top1},
                         {"kmax_top5", r.kmax_top5},
                         {"n_queries", r.n_queries}});
  }
  return j;
}

ConceptSpace::ConceptSpace(Mat projection) : projection_(std::move(projection)) {
  if (projection_.rows() < 1 || projection_.cols() < 1) throw ConfigError("concept space: empty projection");
}

Mat ConceptSpace::apply(const Mat& embeddings) const {
  if (embeddings.cols() != projection_.cols()) {
    throw ConfigError(fmt::format("concept space expects width {}, got {}", projection_.cols(), embeddings.cols()));
  }
  return embeddings * projection_.transpose();
}

BidirectionalAccuracy forward_backward_retrieval(const ConceptEmbeddings& a, const ConceptEmbeddings& b) {
  if (a.z.rows() != static_cast<Eigen::Index>(a.object_ids.size()) ||
      b.z.rows() != static_cast<Eigen::Index>(b.object_ids.size())) {
    throw ConfigError("concept retrieval: id/row count mismatch");
  }
  if (a.z.cols() != b.z.cols()) throw ConfigError("concept retrieval: dimension mismatch");
  std::map<std::string, Eigen::Index> b_index;
  for (std::size_t i = 0; i < b.object_ids.size(); ++i) b_index[b.object_ids[i]] = static_cast<Eigen::Index>(i);
  if (b_index.size() != a.object_ids.size() || b.object_ids.size() != a.object_ids.size()) {
    throw ConfigError("concept retrieval: object sets differ");
  }
  Mat b_aligned(b.z.rows(), b.z.cols());
  for (std::size_t i = 0; i < a.object_ids.size(); ++i) {
    auto it = b_index.find(a.object_ids[i]);
    if (it == b_index.end()) throw ConfigError(fmt::format("concept retrieval: '{}' missing from B", a.object_ids[i]));
    b_aligned.row(static_cast<Eigen::Index>(i)) = b.z.row(it->second);
  }
  const Mat an = normalized_rows(a.z, "concept embeddings A");
  const Mat bn = normalized_rows(b_aligned, "concept embeddings B");
  const Mat sims = an * bn.transpose();
  const Eigen::Index n = sims.rows();
  int fwd = 0;
  int bwd = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    sims.row(i).maxCoeff(&best);
    fwd += best == i ? 1 : 0;
    sims.col(i).maxCoeff(&best);
    bwd += best == i ? 1 : 0;
  }
  return {static_cast<double>(fwd) / n, static_cast<double>(bwd) / n};
}

Mat similarity_matrix(const Mat& embeddings) {
  const Mat n = normalized_rows(embeddings, "rsm");
  Mat s = n * n.transpose();
  s = 0.5 * (s + s.transpose()).eval();
  s.diagonal().setOnes();
  return s;
}

double rsm_correlation(const Mat& a, const Mat& b) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n || b.rows() != n || b.cols() != n) throw ConfigError("rsm correlation: shape mismatch");
  const double m = static_cast<double>(n * (n - 1) / 2);
  double ma = 0.0;
  double mb = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      ma += a(i, j);
      mb += b(i, j);
    }
  }
  ma /= m;
  mb /= m;
  double cov = 0.0;
  double va = 0.0;
  double vb = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double da = a(i, j) - ma;
      const double db = b(i, j) - mb;
      cov += da * db;
      va += da * da;
      vb += db * db;
    }
  }
  if (!(va > 0.0) || !(vb > 0.0)) throw NumericError("rsm correlation: constant similarity structure");
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

RSMReport rsa(const Mat& predicted, const Mat& measured, int permutations, std::uint64_t seed) {
  if (predicted.rows() != measured.rows()) throw ConfigError("rsa: object counts differ");
  if (predicted.rows() < 3) throw ConfigError("rsa: need at least 3 objects");
  if (permutations < 0) throw ConfigError("rsa: permutations must be nonnegative");
  RSMReport r;
  r.rsm_pred = similarity_matrix(predicted);
  r.rsm_measured = similarity_matrix(measured);
  r.pearson_r = rsm_correlation(r.rsm_pred, r.rsm_measured);
  r.permutations = permutations;
  if (permutations == 0) return r;

  const Eigen::Index n = predicted.rows();
  Rng rng(seed);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::vector<double> null;
  null.reserve(static_cast<std::size_t>(permutations));
  int at_least = 0;
  Mat shuffled(n, n);
  for (int k = 0; k < permutations; ++k) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) shuffled(i, j) = r.rsm_measured(perm[i], perm[j]);
    }
    const double v = rsm_correlation(r.rsm_pred, shuffled);
    null.push_back(v);
    if (v >= r.pearson_r) ++at_least;
  }
  r.permutation_p = static_cast<double>(at_least + 1) / static_cast<double>(permutations + 1);
  r.null_q95 = quantile(null, 0.95);
  r.null_q99 = quantile(null, 0.99);
  return r;
}

nlohmann::json to_json(const RSMReport& report, bool include_matrices) {
  nlohmann::json j{{"pearson_r", report.pearson_r},
                   {"permutation_p", report.permutation_p},
                   {"permutations", report.permutations},
                   {"null_q95", report.null_q95},
                   {"null_q99", report.null_q99},
                   {"n_objects", report.rsm_pred.rows()}};
  if (include_matrices) {
    auto rows = [](const Mat& m) {
      std::vector<std::vector<double>> out;
      for (Eigen::Index i = 0; i < m.rows(); ++i) out.emplace_back(m.row(i).data(), m.row(i).data() + m.cols());
      return out;
    };
    j["rsm_pred"] = rows(report.rsm_pred);
    j["rsm_measured"] = rows(report.rsm_measured);
  }
  return j;
}

}  // namespace neuroalign
