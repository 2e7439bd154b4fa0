#include "attnatlas/normalize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace attnatlas {

std::vector<double> ScaleSearchConfig::candidates_log2() const {
  if (!(grid_min_log2 < grid_max_log2)) throw Error("scale search grid: min must be below max");
  if (grid_points < 3) throw Error("scale search grid: at least 3 points required");
  std::vector<double> out(static_cast<std::size_t>(grid_points));
  const double step = (grid_max_log2 - grid_min_log2) / (grid_points - 1);
  for (int i = 0; i < grid_points; ++i) out[static_cast<std::size_t>(i)] = grid_min_log2 + step * i;
  out.back() = grid_max_log2;
  return out;
}

Vector key_translation(const HeadTensors& h) {
  if (h.num_queries() < 1 || h.num_keys() < 1) throw Error("empty population");
  return (h.queries.colwise().mean() - h.keys.colwise().mean()).transpose();
}

double weighted_correlation(std::span<const double> xs, std::span<const double> ys, std::span<const double> weights) {
  if (xs.size() != ys.size() || xs.size() != weights.size())
    throw Error("weighted_correlation: length mismatch");
  if (xs.size() < 3) throw Error("weighted_correlation: at least 3 observations required");

  double wsum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw Error("weighted_correlation: weights must be non-negative");
    wsum += w;
  }
  if (!(wsum > 0.0)) throw Error("weighted_correlation: weights are all zero");

  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += weights[i] * xs[i];
    my += weights[i] * ys[i];
  }
  mx /= wsum;
  my /= wsum;

  double sxy = 0.0, sxx = 0.0, syy = 0.0, mag_x = 0.0, mag_y = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += weights[i] * dx * dy;
    sxx += weights[i] * dx * dx;
    syy += weights[i] * dy * dy;
    mag_x += weights[i] * xs[i] * xs[i];
    mag_y += weights[i] * ys[i] * ys[i];
  }
  // Relative floor: constant inputs leave only rounding noise in the variance.
  constexpr double kRel = 1e-24;
  if (sxx <= kRel * mag_x || syy <= kRel * mag_y || sxx <= 0.0 || syy <= 0.0)
    throw Error("degenerate variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

PairIndex admissible_pairs(const HeadTensors& h, AttentionDirection direction) {
  PairIndex p;
  for (const auto& s : sequence_slices(h)) {
    for (std::size_t i = 0; i < s.positions.size(); ++i) {
      for (std::size_t j = 0; j < s.positions.size(); ++j) {
        if (direction == AttentionDirection::causal && s.positions[j] > s.positions[i]) continue;
        p.query_rows.push_back(s.query_rows[i]);
        p.key_rows.push_back(s.key_rows[j]);
      }
    }
  }
  return p;
}

namespace {

Matrix unit_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

}  // namespace

std::vector<double> pair_cosine_distances(const HeadTensors& h, const PairIndex& pairs, const Vector& v, double c) {
  const Matrix q = unit_rows(c * h.queries);
  const Matrix k = unit_rows((h.keys.rowwise() + v.transpose()) / c);
  std::vector<double> out(pairs.query_rows.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto qi = pairs.query_rows[i], ki = pairs.key_rows[i];
    const bool zero = q.row(qi).isZero(0.0) || k.row(ki).isZero(0.0);
    out[i] = zero ? 1.0 : 1.0 - q.row(qi).dot(k.row(ki));
  }
  return out;
}

std::vector<double> pair_scaled_dots(const HeadTensors& h, const PairIndex& pairs) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(h.dim()));
  std::vector<double> out(pairs.query_rows.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = h.queries.row(pairs.query_rows[i]).dot(h.keys.row(pairs.key_rows[i])) * inv_sqrt_d;
  return out;
}

double scale_objective(std::span<const double> dots, std::span<const double> dists) {
  std::vector<double> sorted(dists.begin(), dists.end());
  const auto mid = sorted.size() / 2;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(mid), sorted.end());
  double sigma = sorted[mid];
  if (sorted.size() % 2 == 0) {
    const double lower = *std::max_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(mid));
    sigma = 0.5 * (sigma + lower);
  }
  std::vector<double> w(dists.size(), 1.0);
  if (sigma > 0.0)
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(-dists[i] / sigma);
  return weighted_correlation(dots, dists, w);
}

ScaleSearchResult search_scale_detailed(const HeadTensors& h, const Vector& v, const ScaleSearchConfig& cfg,
                                        AttentionDirection direction) {
  if (v.size() != h.dim()) throw Error("search_scale: translation has wrong dimension");
  const PairIndex pairs = admissible_pairs(h, direction);
  if (pairs.query_rows.size() < 3) throw Error("scale search failed: fewer than 3 admissible pairs");
  const std::vector<double> dots = pair_scaled_dots(h, pairs);

  // Centroids are re-aligned inside each candidate's scaled space: with
  // keys' = (k + v_c) / c the key centroid lands on c * mean(Q) exactly when
  // v_c = c^2 mean(Q) - mean(K) = v + (c^2 - 1) mean(Q).
  const Vector query_mean = h.queries.colwise().mean().transpose();

  ScaleSearchResult r;
  r.grid_log2 = cfg.candidates_log2();
  r.grid_objective.assign(r.grid_log2.size(), std::numeric_limits<double>::quiet_NaN());
  int best = -1;
  for (std::size_t i = 0; i < r.grid_log2.size(); ++i) {
    const double c = std::exp2(r.grid_log2[i]);
    const Vector vc = v + (c * c - 1.0) * query_mean;
    try {
      r.grid_objective[i] = scale_objective(dots, pair_cosine_distances(h, pairs, vc, c));
    } catch (const Error&) {
      continue;
    }
    if (best < 0) {
      best = static_cast<int>(i);
      continue;
    }
    const double cur = r.grid_objective[i], inc = r.grid_objective[static_cast<std::size_t>(best)];
    const double a_cur = std::abs(r.grid_log2[i]), a_inc = std::abs(r.grid_log2[static_cast<std::size_t>(best)]);
    if (cur < inc || (cur == inc && (a_cur < a_inc || (a_cur == a_inc && r.grid_log2[i] < r.grid_log2[static_cast<std::size_t>(best)]))))
      best = static_cast<int>(i);
  }
  if (best < 0) throw Error("scale search failed: degenerate head");

  const double c = std::exp2(r.grid_log2[static_cast<std::size_t>(best)]);
  r.params.scale = c;
  r.params.translation = v + (c * c - 1.0) * query_mean;
  r.objective = r.grid_objective[static_cast<std::size_t>(best)];
  return r;
}

NormalizationParams search_scale(const HeadTensors& h, const Vector& v, const ScaleSearchConfig& cfg,
                                 AttentionDirection direction) {
  return search_scale_detailed(h, v, cfg, direction).params;
}

HeadTensors apply_normalization(const HeadTensors& h, const NormalizationParams& p) {
  if (!(p.scale > 0.0) || !std::isfinite(p.scale)) throw Error("apply_normalization: scale must be positive and finite");
  if (p.translation.size() != h.dim()) throw Error("apply_normalization: translation has wrong dimension");
  HeadTensors out = h;
  out.queries = p.scale * h.queries;
  out.keys = (h.keys.rowwise() + p.translation.transpose()) / p.scale;
  return out;
}

}  // namespace attnatlas
