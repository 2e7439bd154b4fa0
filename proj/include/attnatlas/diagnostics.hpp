#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnatlas/attention.hpp"
#include "attnatlas/core.hpp"

namespace attnatlas {

struct HeadDiagnostics {
  int layer = 0;
  int head = 0;
  double spearman_dist_dot = 0.0;
  double mean_norm_diff = 0.0;
  std::optional<double> wqwk_correlation;
  double first_token_attention_mass = 0.0;
  double chosen_scale = 1.0;
  double scale_objective = 0.0;
};

/// Average ranks (1-based), ties sharing the mean of their positions.
std::vector<double> average_ranks(std::span<const double> xs);

/// Pearson correlation; throws "degenerate variance" on constant input.
double pearson(std::span<const double> xs, std::span<const double> ys);

/// Spearman rank correlation with average-tie ranks.
double spearman(std::span<const double> xs, std::span<const double> ys);

/// Spearman correlation between post-normalization cosine distance and the
/// original scaled dot product over every admissible within-sequence pair.
/// Pairs touching a special token are dropped when `include_special` is false.
double head_distance_attention_correlation(const HeadTensors& original, const NormalizationParams& p,
                                           AttentionDirection direction = AttentionDirection::bidirectional,
                                           bool include_special = true);

/// Mean query norm_prescale minus mean key norm_prescale.
double norm_disparity(const HeadTensors& h);

/// Pearson correlation of the flattened projection weights.
double wqwk_redundancy(const Matrix& wq, const Matrix& wk);

/// Mean attention paid to each sequence's first token, excluding the first
/// token's own query row.
double null_attention_fraction(const std::vector<AttentionMatrix>& sequences);

struct Dispersion {
  int clusters = 0;
  int noise = 0;
};

/// DBSCAN cluster count over the given points (rows).
Dispersion search_dispersion(const Matrix& result_coords, double eps, int min_pts = 3);

/// 5% of the bounding-box diagonal of a plot's coordinates.
double default_search_eps(const Matrix& plot_coords);

/// CSV report: header, one row per head, then a footer row of model means.
std::string diagnostics_csv(const std::vector<HeadDiagnostics>& rows, bool special_pairs_included = true);

}  // namespace attnatlas
