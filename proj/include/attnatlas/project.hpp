#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attnatlas/core.hpp"

namespace attnatlas {

enum class Method { pca, tsne, umap };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

/// Upper triangle of a symmetric distance matrix with zero diagonal, stored
/// row by row.
class CondensedDistances {
public:
  CondensedDistances() = default;
  explicit CondensedDistances(Eigen::Index n) : n_(n), values_(static_cast<std::size_t>(n * (n - 1) / 2), 0.0) {}

  Eigen::Index size() const { return n_; }

  double operator()(Eigen::Index i, Eigen::Index j) const {
    if (i == j) return 0.0;
    return values_[offset(i, j)];
  }
  void set(Eigen::Index i, Eigen::Index j, double d) { values_[offset(i, j)] = d; }

  Matrix to_square() const;
  const std::vector<double>& values() const { return values_; }

  /// Non-fatal conditions met while building, e.g. zero-norm rows.
  std::vector<std::string> warnings;

private:
  std::size_t offset(Eigen::Index i, Eigen::Index j) const {
    if (i > j) std::swap(i, j);
    return static_cast<std::size_t>(i * (2 * n_ - i - 1) / 2 + (j - i - 1));
  }

  Eigen::Index n_ = 0;
  std::vector<double> values_;
};

/// Cosine distance between every pair of rows. A zero-norm row sits at
/// distance 1 from every other row.
CondensedDistances pairwise_cosine(const Matrix& points);

/// Euclidean distance between every pair of rows.
CondensedDistances pairwise_euclidean(const Matrix& points);

struct ProjectionQuality {
  double final_objective = 0.0;
  double initial_objective = 0.0;
  double trustworthiness_k10 = 0.0;
};

struct ProjectionResult {
  Method method = Method::pca;
  int dim = 2;
  Matrix coords;
  ProjectionQuality quality;
  std::uint64_t seed = 0;
  /// Variance along each returned axis (PCA only).
  std::vector<double> axis_variance;
  std::vector<std::string> flags;
};

/// Projection onto the top principal axes of the sample covariance. Each
/// axis's sign makes its largest-magnitude loading positive; axes beyond the
/// data's rank are zero and flagged.
ProjectionResult pca_project(const Matrix& points, int dim);

struct TsneOptions {
  int dim = 2;
  std::optional<double> perplexity;  // default min(30, (n-1)/3)
  int iterations = 1000;
  std::uint64_t seed = 0;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  std::optional<double> learning_rate;  // default max(n / 48, 50)
};

/// Joint probabilities P of exact t-SNE: per-point Gaussian bandwidths
/// calibrated to the perplexity, then symmetrized and normalized to sum to 1.
/// The distances are used directly as the kernel's squared-distance argument.
Matrix tsne_affinities(const CondensedDistances& dists, double perplexity);

/// Exact O(n^2) t-SNE with early exaggeration and momentum gradient descent.
ProjectionResult tsne_project(const CondensedDistances& dists, const TsneOptions& opt = {});

struct UmapOptions {
  int dim = 2;
  int n_neighbors = 15;
  int epochs = 200;
  std::uint64_t seed = 0;
  int negative_sample_rate = 5;
};

/// k-NN fuzzy simplicial set (smooth-kNN bandwidths, probabilistic-union
/// symmetrization), spectral initialization and negative-sampling SGD.
ProjectionResult umap_project(const CondensedDistances& dists, const UmapOptions& opt = {});

/// Fraction of low-dimensional k-neighborhoods that are also high-dimensional
/// neighborhoods, rank-penalized; 1 is perfect.
double trustworthiness(const CondensedDistances& high, const Matrix& low, int k = 10);

/// Subtracts the per-axis mean.
void center_columns(Matrix& coords);

}  // namespace attnatlas
