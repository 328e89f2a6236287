#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuroalign/datamodel.hpp"
#include "neuroalign/model.hpp"

namespace neuroalign {

// Unified embeddings of one modality's samples. Rows align with the id vectors.
struct EmbeddedSet {
  Mat z;
  std::vector<std::string> stimulus_ids;
  std::vector<std::string> subject_ids;
};

// Raw projector outputs for every sample of `modality` in `split`.
EmbeddedSet embed_samples(const AlignmentModel& model, const PairedDataset& dataset, const std::string& modality,
                          Split split, std::size_t batch_size = 64);

// Averages rows that share a stimulus id; output is sorted by stimulus id.
EmbeddedSet average_by_stimulus(const EmbeddedSet& set);

// k-way top-m retrieval by cosine similarity. For every query and trial,
// ways-1 distractors are drawn uniformly without replacement from the other
// candidates; a hit means fewer than `top` distractors score strictly above
// the true candidate. With ways == candidate count every candidate is used
// and one pass is made. Each query draws from its own counter-based stream.
double kway_retrieval(const Mat& queries, const std::vector<int>& truth, const Mat& candidates, int ways, int top,
                      int trials, std::uint64_t seed);

struct RetrievalRow {
  std::string modality;
  std::optional<double> way2, way4, way10;
  double kmax_top1 = 0.0;
  double kmax_top5 = 0.0;
  int kmax = 0;
  std::size_t n_queries = 0;
};

struct RetrievalReport {
  std::vector<RetrievalRow> rows;
  Split split = Split::kTest;
  int trials = 50;
  std::uint64_t seed = 0;
};

struct RetrievalOptions {
  int trials = 50;
  std::uint64_t seed = 0;
  Split split = Split::kTest;
};

// Queries are single-sample projector outputs; candidates are the split's
// unique stimulus embeddings (K_max = their count).
RetrievalReport evaluate_retrieval(const AlignmentModel& model, const PairedDataset& dataset,
                                   const std::vector<std::string>& modalities, const RetrievalOptions& options);

// Fixed-width table: modality | 2-way | 4-way | 10-way | K-way top-1 | K-way top-5.
std::string format_retrieval_table(const RetrievalReport& report);
nlohmann::json to_json(const RetrievalReport& report);

// User-supplied linear map from the unified space (F) to a concept space (M).
class ConceptSpace {
 public:
  explicit ConceptSpace(Mat projection);  // M x F
  Mat apply(const Mat& embeddings) const;  // N x F -> N x M
  Eigen::Index input_dim() const { return projection_.cols(); }
  Eigen::Index output_dim() const { return projection_.rows(); }

 private:
  Mat projection_;
};

struct ConceptEmbeddings {
  Mat z;
  std::vector<std::string> object_ids;
};

struct BidirectionalAccuracy {
  double forward = 0.0;   // A -> B top-1
  double backward = 0.0;  // B -> A top-1
};

// Object sets must match; B is reordered to A's object order.
BidirectionalAccuracy forward_backward_retrieval(const ConceptEmbeddings& a, const ConceptEmbeddings& b);

struct RSMReport {
  Mat rsm_pred;
  Mat rsm_measured;
  double pearson_r = 0.0;
  double permutation_p = 1.0;
  int permutations = 0;
  double null_q95 = 0.0;
  double null_q99 = 0.0;
};

// Cosine-similarity RSMs of both sets.
Mat similarity_matrix(const Mat& embeddings);
// Pearson correlation over the strict upper triangles of two RSMs.
double rsm_correlation(const Mat& a, const Mat& b);
// RSA between two embedding sets over the same objects in the same order.
// The null distribution shuffles object labels of the measured RSM.
RSMReport rsa(const Mat& predicted, const Mat& measured, int permutations = 1000, std::uint64_t seed = 0);
nlohmann::json to_json(const RSMReport& report, bool include_matrices = false);

}  // namespace neuroalign
