#pragma once

#include <span>

#include "attnatlas/core.hpp"

namespace attnatlas {

enum class BandwidthMode { median_distance };

/// log2-spaced grid of candidate scale factors.
struct ScaleSearchConfig {
  double grid_min_log2 = -8.0;
  double grid_max_log2 = 8.0;
  int grid_points = 65;
  BandwidthMode weight_bandwidth_mode = BandwidthMode::median_distance;

  std::vector<double> candidates_log2() const;
};

/// Chosen scale plus the objective at every grid point.
struct ScaleSearchResult {
  NormalizationParams params;
  double objective = 0.0;
  std::vector<double> grid_log2;
  std::vector<double> grid_objective;  // NaN where a candidate was degenerate
};

/// centroid(queries) - centroid(keys).
Vector key_translation(const HeadTensors& h);

/// w-weighted Pearson correlation.
double weighted_correlation(std::span<const double> xs, std::span<const double> ys, std::span<const double> weights);

/// Within-sequence query/key pairs that can ever receive attention.
struct PairIndex {
  std::vector<Eigen::Index> query_rows;
  std::vector<Eigen::Index> key_rows;
};
PairIndex admissible_pairs(const HeadTensors& h, AttentionDirection direction);

/// Cosine distance between query and key of every pair after translating keys
/// by v and scaling queries by c, keys by 1/c.
std::vector<double> pair_cosine_distances(const HeadTensors& h, const PairIndex& pairs, const Vector& v, double c);

/// Original scaled dot products f(x, y) of every pair.
std::vector<double> pair_scaled_dots(const HeadTensors& h, const PairIndex& pairs);

/// Objective of one candidate: weighted correlation between the original dot
/// products and the candidate's cosine distances, weights exp(-d / median d).
double scale_objective(std::span<const double> dots, std::span<const double> dists);

/// Picks the grid candidate with the most negative objective; ties prefer the
/// smallest |log2 c|.
ScaleSearchResult search_scale_detailed(const HeadTensors& h, const Vector& v, const ScaleSearchConfig& cfg,
                                        AttentionDirection direction = AttentionDirection::bidirectional);

NormalizationParams search_scale(const HeadTensors& h, const Vector& v, const ScaleSearchConfig& cfg,
                                 AttentionDirection direction = AttentionDirection::bidirectional);

/// queries' = c * queries, keys' = (keys + v) / c; tokens are copied unchanged.
HeadTensors apply_normalization(const HeadTensors& h, const NormalizationParams& p);

}  // namespace attnatlas
