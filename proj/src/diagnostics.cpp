#include "attnatlas/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "attnatlas/normalize.hpp"

namespace attnatlas {

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  std::vector<double> w(xs.size(), 1.0);
  return weighted_correlation(xs, ys, w);
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error("spearman: length mismatch");
  if (xs.size() < 3) throw Error("spearman: at least 3 observations required");
  const auto rx = average_ranks(xs), ry = average_ranks(ys);
  try {
    return pearson(rx, ry);
  } catch (const Error&) {
    throw Error("degenerate ranks");
  }
}

double head_distance_attention_correlation(const HeadTensors& original, const NormalizationParams& p,
                                           AttentionDirection direction, bool include_special) {
  PairIndex pairs = admissible_pairs(original, direction);
  if (!include_special) {
    PairIndex kept;
    for (std::size_t i = 0; i < pairs.query_rows.size(); ++i) {
      if (original.query_token(pairs.query_rows[i]).is_special || original.key_token(pairs.key_rows[i]).is_special)
        continue;
      kept.query_rows.push_back(pairs.query_rows[i]);
      kept.key_rows.push_back(pairs.key_rows[i]);
    }
    pairs = std::move(kept);
  }
  if (pairs.query_rows.size() < 3) throw Error("distance/attention correlation: fewer than 3 admissible pairs");
  const auto dists = pair_cosine_distances(original, pairs, p.translation, p.scale);
  const auto dots = pair_scaled_dots(original, pairs);
  return spearman(dists, dots);
}

double norm_disparity(const HeadTensors& h) {
  if (h.num_queries() < 1 || h.num_keys() < 1) throw Error("norm_disparity: queries and keys must be nonempty");
  double q = 0.0, k = 0.0;
  for (Eigen::Index i = 0; i < h.num_queries(); ++i) q += h.query_token(i).norm_prescale;
  for (Eigen::Index i = 0; i < h.num_keys(); ++i) k += h.key_token(i).norm_prescale;
  return q / static_cast<double>(h.num_queries()) - k / static_cast<double>(h.num_keys());
}

double wqwk_redundancy(const Matrix& wq, const Matrix& wk) {
  if (wq.rows() != wk.rows() || wq.cols() != wk.cols()) throw Error("wqwk_redundancy: shape mismatch");
  return pearson(std::span<const double>(wq.data(), static_cast<std::size_t>(wq.size())),
                 std::span<const double>(wk.data(), static_cast<std::size_t>(wk.size())));
}

double null_attention_fraction(const std::vector<AttentionMatrix>& sequences) {
  if (sequences.empty()) throw Error("null_attention_fraction: at least one sequence is required");
  double total = 0.0;
  std::size_t rows = 0;
  for (const auto& a : sequences) {
    if (a.key_positions.empty()) continue;
    const auto first_key = std::min_element(a.key_positions.begin(), a.key_positions.end()) - a.key_positions.begin();
    const int first_pos = a.key_positions[static_cast<std::size_t>(first_key)];
    for (Eigen::Index i = 0; i < a.num_queries(); ++i) {
      if (a.query_positions[i] == first_pos) continue;
      total += a.weights(i, first_key);
      ++rows;
    }
  }
  return rows == 0 ? 0.0 : total / static_cast<double>(rows);
}

Dispersion search_dispersion(const Matrix& pts, double eps, int min_pts) {
  Dispersion out;
  const auto n = pts.rows();
  if (n == 0) return out;
  const double eps2 = eps * eps;
  std::vector<std::vector<Eigen::Index>> nbrs(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if ((pts.row(i) - pts.row(j)).squaredNorm() <= eps2) nbrs[i].push_back(j);

  constexpr int kUnvisited = -2, kNoise = -1;
  std::vector<int> label(static_cast<std::size_t>(n), kUnvisited);
  int cluster = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (label[i] != kUnvisited) continue;
    if (static_cast<int>(nbrs[i].size()) < min_pts) {
      label[i] = kNoise;
      continue;
    }
    label[i] = cluster;
    std::vector<Eigen::Index> frontier(nbrs[i].begin(), nbrs[i].end());
    while (!frontier.empty()) {
      const auto j = frontier.back();
      frontier.pop_back();
      if (label[j] == kNoise) label[j] = cluster;
      if (label[j] != kUnvisited) continue;
      label[j] = cluster;
      if (static_cast<int>(nbrs[j].size()) >= min_pts) frontier.insert(frontier.end(), nbrs[j].begin(), nbrs[j].end());
    }
    ++cluster;
  }
  out.clusters = cluster;
  out.noise = static_cast<int>(std::count(label.begin(), label.end(), kNoise));
  return out;
}

double default_search_eps(const Matrix& plot_coords) {
  if (plot_coords.rows() == 0) return 0.0;
  const RowVector extent = plot_coords.colwise().maxCoeff() - plot_coords.colwise().minCoeff();
  return 0.05 * extent.norm();
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string diagnostics_csv(const std::vector<HeadDiagnostics>& rows, bool special_pairs_included) {
  std::ostringstream os;
  os << "# special_token_pairs=" << (special_pairs_included ? "included" : "excluded") << '\n';
  os << "layer,head,spearman_dist_dot,mean_norm_diff,wqwk_correlation,first_token_attention_mass,chosen_scale,"
        "scale_objective\n";
  double s = 0, nd = 0, w = 0, f = 0, c = 0, o = 0;
  std::size_t nw = 0;
  for (const auto& r : rows) {
    os << r.layer << ',' << r.head << ',' << fmt(r.spearman_dist_dot) << ',' << fmt(r.mean_norm_diff) << ','
       << (r.wqwk_correlation ? fmt(*r.wqwk_correlation) : "") << ',' << fmt(r.first_token_attention_mass) << ','
       << fmt(r.chosen_scale) << ',' << fmt(r.scale_objective) << '\n';
    s += r.spearman_dist_dot;
    nd += r.mean_norm_diff;
    f += r.first_token_attention_mass;
    c += r.chosen_scale;
    o += r.scale_objective;
    if (r.wqwk_correlation) {
      w += *r.wqwk_correlation;
      ++nw;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(rows.size(), 1));
  os << "mean,," << fmt(s / n) << ',' << fmt(nd / n) << ',' << (nw ? fmt(w / static_cast<double>(nw)) : "") << ','
     << fmt(f / n) << ',' << fmt(c / n) << ',' << fmt(o / n) << '\n';
  return os.str();
}

}  // namespace attnatlas
