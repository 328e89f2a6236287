#include "neuroalign/embedding_map.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/Eigenvalues>
#include <fmt/format.h>

#include "neuroalign/errors.hpp"
#include "neuroalign/rng.hpp"

namespace neuroalign {
namespace {

Mat squared_distances(const Mat& x) {
  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Mat d = (-2.0 * x * x.transpose()).eval();
  d.colwise() += sq;
  d.rowwise() += sq.transpose();
  return d.cwiseMax(0.0);
}

// Row-conditional affinities with per-row bandwidth found by bisection on
// the entropy, then symmetrized.
Mat joint_affinities(const Mat& d2, double perplexity) {
  const Eigen::Index n = d2.rows();
  const double target = std::log(perplexity);
  Mat p = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0;
    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();
    Eigen::RowVectorXd row(n);
    for (int it = 0; it < 100; ++it) {
      double sum = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        row(j) = j == i ? 0.0 : std::exp(-beta * d2(i, j));
        sum += row(j);
      }
      if (sum <= 0.0) {
        hi = beta;
        beta = (lo + hi) / 2.0;
        continue;
      }
      double h = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (row(j) > 0.0) h += beta * d2(i, j) * row(j);
      }
      h = h / sum + std::log(sum);
      row /= sum;
      const double diff = h - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0.0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (lo + hi) / 2.0;
      } else {
        hi = beta;
        beta = (lo + hi) / 2.0;
      }
    }
    p.row(i) = row;
  }
  p = (p + p.transpose()).eval();
  p /= p.sum();
  return p.cwiseMax(1e-12);
}

}  // namespace

MapMethod parse_map_method(const std::string& s) {
  if (s == "mds-init-tsne") return MapMethod::kMdsInitTsne;
  if (s == "mds") return MapMethod::kMds;
  throw ConfigError(fmt::format("unknown map method '{}' (expected mds-init-tsne or mds)", s));
}

const char* to_string(MapMethod m) { return m == MapMethod::kMds ? "mds" : "mds-init-tsne"; }

Mat classical_mds(const Mat& x, int dims) {
  const Eigen::Index n = x.rows();
  const Mat d2 = squared_distances(x);
  const Mat j = Mat::Identity(n, n) - Mat::Constant(n, n, 1.0 / static_cast<double>(n));
  const Mat b = -0.5 * j * d2 * j;
  Eigen::SelfAdjointEigenSolver<Mat> eig(b);
  Mat out(n, dims);
  for (int k = 0; k < dims; ++k) {
    const Eigen::Index col = n - 1 - k;  // eigenvalues ascend
    const double lambda = std::max(eig.eigenvalues()(col), 0.0);
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    out.col(k) = v * std::sqrt(lambda);
  }
  return out;
}

Mat embedding_map(const Mat& embeddings, const MapOptions& options) {
  const Eigen::Index n = embeddings.rows();
  if (n < 10) throw ConfigError(fmt::format("embedding map needs at least 10 objects, got {}", n));
  if (!embeddings.allFinite()) throw NumericError("embedding map: non-finite embeddings");
  const Eigen::RowVectorXd mean = embeddings.colwise().mean();
  if ((embeddings.rowwise() - mean).cwiseAbs().maxCoeff() == 0.0) {
    throw NumericError("embedding map: all embeddings are identical");
  }
  Mat y = classical_mds(embeddings, 2);
  if (options.method == MapMethod::kMds) return y;

  if (options.perplexity <= 1.0 || options.perplexity >= static_cast<double>(n)) {
    throw ConfigError(fmt::format("perplexity must be in (1, {})", n));
  }
  const double scale = std::sqrt(y.col(0).squaredNorm() / static_cast<double>(n));
  if (scale > 0.0) y *= 1e-2 / scale;

  const Mat p = joint_affinities(squared_distances(embeddings), options.perplexity);
  Rng rng(options.seed);
  y += randn(n, 2, rng, 1e-6);  // breaks exact ties between duplicate rows
  Mat velocity = Mat::Zero(n, 2);
  Mat gains = Mat::Ones(n, 2);
  for (int it = 0; it < options.iterations; ++it) {
    const double exag = it < options.exaggeration_iterations ? options.early_exaggeration : 1.0;
    const double momentum = it < 250 ? 0.5 : 0.8;
    Mat num = (Mat::Ones(n, n) + squared_distances(y)).cwiseInverse();
    num.diagonal().setZero();
    const Mat q = (num / num.sum()).cwiseMax(1e-12);
    const Mat w = (exag * p - q).cwiseProduct(num);
    const Mat grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index c = 0; c < 2; ++c) {
        const bool same = (grad(i, c) > 0.0) == (velocity(i, c) > 0.0);
        gains(i, c) = std::max(same ? gains(i, c) * 0.8 : gains(i, c) + 0.2, 0.01);
      }
    }
    velocity = momentum * velocity - options.learning_rate * gains.cwiseProduct(grad);
    y += velocity;
    y.rowwise() -= y.colwise().mean();
  }
  if (!y.allFinite()) throw NumericError("embedding map: t-SNE diverged");
  return y;
}

void write_map_csv(const std::filesystem::path& path, const Mat& coords, const std::vector<std::string>& object_ids,
                   const std::vector<std::string>& concepts) {
  if (coords.rows() != static_cast<Eigen::Index>(object_ids.size()) || object_ids.size() != concepts.size()) {
    throw ConfigError("map csv: row count mismatch");
  }
  std::ofstream out(path);
  if (!out) throw ConfigError(fmt::format("cannot write {}", path.string()));
  out << "object_id,concept,x,y\n";
  for (Eigen::Index i = 0; i < coords.rows(); ++i) {
    out << fmt::format("{},{},{:.9g},{:.9g}\n", object_ids[static_cast<std::size_t>(i)],
                       concepts[static_cast<std::size_t>(i)], coords(i, 0), coords(i, 1));
  }
}

}  // namespace neuroalign
