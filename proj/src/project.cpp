#include "attnatlas/project.hpp"

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace attnatlas {

std::string to_string(Method m) {
  switch (m) {
    case Method::pca: return "pca";
    case Method::tsne: return "tsne";
    case Method::umap: return "umap";
  }
  return "pca";
}

Method method_from_string(const std::string& s) {
  if (s == "pca") return Method::pca;
  if (s == "tsne") return Method::tsne;
  if (s == "umap") return Method::umap;
  throw Error("unknown projection method '" + s + "'");
}

Matrix CondensedDistances::to_square() const {
  Matrix out = Matrix::Zero(n_, n_);
  for (Eigen::Index i = 0; i < n_; ++i)
    for (Eigen::Index j = i + 1; j < n_; ++j) out(i, j) = out(j, i) = (*this)(i, j);
  return out;
}

CondensedDistances pairwise_cosine(const Matrix& points) {
  const auto n = points.rows();
  CondensedDistances out(n);
  Vector norms = points.rowwise().norm();
  std::vector<Eigen::Index> zero_rows;
  Matrix unit = points;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (norms(i) > 0.0) {
      unit.row(i) /= norms(i);
    } else {
      zero_rows.push_back(i);
    }
  }
  const Matrix gram = unit * unit.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const bool degenerate = norms(i) == 0.0 || norms(j) == 0.0;
      out.set(i, j, degenerate ? 1.0 : std::clamp(1.0 - gram(i, j), 0.0, 2.0));
    }
  }
  for (auto r : zero_rows) out.warnings.push_back("row " + std::to_string(r) + " has zero norm; distances set to 1");
  return out;
}

CondensedDistances pairwise_euclidean(const Matrix& points) {
  const auto n = points.rows();
  CondensedDistances out(n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) out.set(i, j, (points.row(i) - points.row(j)).norm());
  return out;
}

void center_columns(Matrix& coords) {
  if (coords.rows() == 0) return;
  coords.rowwise() -= coords.colwise().mean();
}

// ---------------------------------------------------------------------------
// PCA

ProjectionResult pca_project(const Matrix& points, int dim) {
  if (dim != 2 && dim != 3) throw Error("pca_project: dim must be 2 or 3");
  const auto n = points.rows();
  if (n < dim + 1) throw Error("pca_project: need at least dim + 1 points");

  ProjectionResult r;
  r.method = Method::pca;
  r.dim = dim;

  Matrix centered = points.rowwise() - points.colwise().mean();
  const Matrix cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  if (es.info() != Eigen::Success) throw Error("pca_project: eigendecomposition failed");

  const auto d = cov.rows();
  const double top = std::max(es.eigenvalues()(d - 1), 0.0);
  const double total = std::max(cov.trace(), 0.0);
  Matrix axes = Matrix::Zero(d, dim);
  double explained = 0.0;
  int rank = 0;
  for (int a = 0; a < dim; ++a) {
    const auto idx = d - 1 - a;
    if (idx < 0) break;
    const double lambda = es.eigenvalues()(idx);
    if (!(lambda > 1e-12 * top) || top == 0.0) break;
    Vector v = es.eigenvectors().col(idx);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    axes.col(a) = v;
    r.axis_variance.push_back(lambda);
    explained += lambda;
    ++rank;
  }
  for (int a = rank; a < dim; ++a) r.axis_variance.push_back(0.0);
  if (rank < dim)
    r.flags.push_back("data rank " + std::to_string(rank) + " below dim; remaining axes are zero");

  r.coords = centered * axes;
  for (int a = rank; a < dim; ++a) r.coords.col(a).setZero();
  center_columns(r.coords);
  r.quality.final_objective = total > 0.0 ? std::max(0.0, 1.0 - explained / total) : 0.0;
  r.quality.initial_objective = 1.0;
  return r;
}

// ---------------------------------------------------------------------------
// t-SNE

namespace {

// Binary search for the Gaussian precision of row i matching log(perplexity).
void calibrate_row(const Matrix& dist, Eigen::Index i, double log_perp, Eigen::Ref<RowVector, 0, Eigen::InnerStride<>> out) {
  const auto n = dist.rows();
  double beta = 1.0, lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
  double minD = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < n; ++j)
    if (j != i) minD = std::min(minD, dist(i, j));
  for (int iter = 0; iter < 200; ++iter) {
    double sum = 0.0, dsum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) {
        out(j) = 0.0;
        continue;
      }
      // Shifting by the smallest distance keeps exp() away from underflow.
      const double e = std::exp(-beta * (dist(i, j) - minD));
      out(j) = e;
      sum += e;
      dsum += (dist(i, j) - minD) * e;
    }
    const double entropy = std::log(sum) + beta * dsum / sum;
    out /= sum;
    const double diff = entropy - log_perp;
    if (std::abs(diff) < 1e-10) break;
    if (diff > 0) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
    } else {
      hi = beta;
      beta = std::isinf(lo) ? beta / 2.0 : 0.5 * (beta + lo);
    }
  }
}

double tsne_kl(const Matrix& P, const Matrix& Y) {
  const auto n = Y.rows();
  const Vector sq = Y.rowwise().squaredNorm();
  Matrix num = ((-2.0 * (Y * Y.transpose())).colwise() + sq).rowwise() + sq.transpose();
  num = (1.0 + num.array()).inverse().matrix();
  num.diagonal().setZero();
  const double sum_q = num.sum();
  double kl = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j || P(i, j) <= 0.0) continue;
      const double q = std::max(num(i, j) / sum_q, std::numeric_limits<double>::min());
      kl += P(i, j) * std::log(P(i, j) / q);
    }
  }
  return kl;
}

}  // namespace

Matrix tsne_affinities(const CondensedDistances& dists, double perplexity) {
  const auto n = dists.size();
  const Matrix dist = dists.to_square();
  Matrix cond = Matrix::Zero(n, n);
  const double log_perp = std::log(perplexity);
  for (Eigen::Index i = 0; i < n; ++i) calibrate_row(dist, i, log_perp, cond.row(i));
  Matrix P = (cond + cond.transpose()) / (2.0 * static_cast<double>(n));
  P /= P.sum();
  return P;
}

ProjectionResult tsne_project(const CondensedDistances& dists, const TsneOptions& opt) {
  const auto n = dists.size();
  if (n < 5) throw Error("tsne_project: need at least 5 points");
  if (opt.dim != 2 && opt.dim != 3) throw Error("tsne_project: dim must be 2 or 3");
  if (opt.iterations < 1) throw Error("tsne_project: iterations must be positive");

  ProjectionResult r;
  r.method = Method::tsne;
  r.dim = opt.dim;
  r.seed = opt.seed;

  const double default_perp = std::min(30.0, static_cast<double>(n - 1) / 3.0);
  double perp = opt.perplexity.value_or(default_perp);
  if (perp >= static_cast<double>(n)) {
    r.flags.push_back("perplexity " + std::to_string(perp) + " >= n; clamped to " + std::to_string(default_perp));
    perp = default_perp;
  }
  if (!(perp > 0.0)) throw Error("tsne_project: perplexity must be positive");

  const Matrix P = tsne_affinities(dists, perp);

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> gauss(0.0, 1e-4);
  Matrix Y(n, opt.dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int d = 0; d < opt.dim; ++d) Y(i, d) = gauss(rng);

  r.quality.initial_objective = tsne_kl(P, Y);

  const double eta = opt.learning_rate.value_or(std::max(static_cast<double>(n) / opt.early_exaggeration / 4.0, 50.0));
  Matrix update = Matrix::Zero(n, opt.dim);
  Matrix gains = Matrix::Ones(n, opt.dim);
  Matrix num(n, n), pq(n, n), grad(n, opt.dim);
  for (int iter = 0; iter < opt.iterations; ++iter) {
    const bool exaggerate = iter < opt.exaggeration_iterations;
    const double momentum = iter < 250 ? 0.5 : 0.8;

    const Vector sq = Y.rowwise().squaredNorm();
    num.noalias() = -2.0 * (Y * Y.transpose());
    num.colwise() += sq;
    num.rowwise() += sq.transpose();
    num = (1.0 + num.array().max(0.0)).inverse().matrix();
    num.diagonal().setZero();
    const double sum_q = num.sum();

    const double ex = exaggerate ? opt.early_exaggeration : 1.0;
    pq = ((ex * P).array() - num.array() / sum_q) * num.array();
    grad.noalias() = 4.0 * (pq.rowwise().sum().asDiagonal() * Y - pq * Y);

    for (Eigen::Index i = 0; i < n; ++i) {
      for (int d = 0; d < opt.dim; ++d) {
        const bool same_sign = (grad(i, d) > 0) == (update(i, d) > 0);
        gains(i, d) = same_sign ? std::max(gains(i, d) * 0.8, 0.01) : gains(i, d) + 0.2;
      }
    }
    update = momentum * update - eta * gains.cwiseProduct(grad);
    Y += update;
    center_columns(Y);
  }

  r.coords = std::move(Y);
  r.quality.final_objective = tsne_kl(P, r.coords);
  return r;
}

// ---------------------------------------------------------------------------
// UMAP

namespace {

// Curve parameters fitted for min_dist = 0.1, spread = 1.
constexpr double kUmapA = 1.576943460405378;
constexpr double kUmapB = 0.8950608781227859;

using SparseGraph = Eigen::SparseMatrix<double, Eigen::RowMajor>;

SparseGraph fuzzy_simplicial_set(const CondensedDistances& dists, int n_neighbors) {
  const auto n = dists.size();
  const int k = n_neighbors - 1;  // neighbors besides the point itself
  const double target = std::log2(static_cast<double>(n_neighbors));

  double mean_dist = 0.0;
  for (double v : dists.values()) mean_dist += v;
  mean_dist /= std::max<std::size_t>(dists.values().size(), 1);

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(n * k));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::vector<double> nd(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    order.resize(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::erase(order, i);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Eigen::Index a, Eigen::Index b) {
      const double da = dists(i, a), db = dists(i, b);
      return da != db ? da < db : a < b;
    });
    for (int t = 0; t < k; ++t) nd[t] = dists(i, order[t]);

    double rho = 0.0;
    for (double d : nd)
      if (d > 0.0) {
        rho = d;
        break;
      }

    double lo = 0.0, hi = std::numeric_limits<double>::infinity(), sigma = 1.0;
    for (int iter = 0; iter < 64; ++iter) {
      double psum = 0.0;
      for (double d : nd) psum += std::exp(-std::max(0.0, d - rho) / sigma);
      if (std::abs(psum - target) < 1e-5) break;
      if (psum > target) {
        hi = sigma;
        sigma = 0.5 * (lo + hi);
      } else {
        lo = sigma;
        sigma = std::isinf(hi) ? sigma * 2.0 : 0.5 * (lo + hi);
      }
    }
    double row_mean = 0.0;
    for (double d : nd) row_mean += d;
    row_mean /= k;
    const double floor = 1e-3 * (rho > 0.0 ? row_mean : mean_dist);
    sigma = std::max(sigma, floor);

    for (int t = 0; t < k; ++t) {
      const double w = std::exp(-std::max(0.0, nd[t] - rho) / sigma);
      trip.emplace_back(i, order[t], w);
    }
  }
  SparseGraph a(n, n);
  a.setFromTriplets(trip.begin(), trip.end());
  SparseGraph at = a.transpose();
  SparseGraph sym = a + at - SparseGraph(a.cwiseProduct(at));
  sym.prune(0.0);
  return sym;
}

std::vector<std::vector<Eigen::Index>> connected_components(const SparseGraph& g) {
  const auto n = g.rows();
  std::vector<int> label(static_cast<std::size_t>(n), -1);
  std::vector<std::vector<Eigen::Index>> comps;
  for (Eigen::Index s = 0; s < n; ++s) {
    if (label[s] >= 0) continue;
    const int id = static_cast<int>(comps.size());
    comps.emplace_back();
    std::vector<Eigen::Index> stack{s};
    label[s] = id;
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      comps[id].push_back(u);
      for (SparseGraph::InnerIterator it(g, u); it; ++it) {
        if (label[it.col()] < 0) {
          label[it.col()] = id;
          stack.push_back(it.col());
        }
      }
    }
    std::sort(comps[id].begin(), comps[id].end());
  }
  return comps;
}

void fix_column_signs(Matrix& v) {
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    Eigen::Index arg = 0;
    v.col(c).cwiseAbs().maxCoeff(&arg);
    if (v(arg, c) < 0) v.col(c) = -v.col(c);
  }
}

// Eigenvectors of the normalized adjacency D^-1/2 W D^-1/2 for the `dim`
// largest eigenvalues after the trivial one, i.e. the smallest nontrivial
// eigenvectors of the normalized Laplacian.
std::optional<Matrix> spectral_embedding(const SparseGraph& w, int dim, std::mt19937_64& rng) {
  const auto m = w.rows();
  Vector deg = Vector::Zero(m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (SparseGraph::InnerIterator it(w, i); it; ++it) deg(i) += it.value();
  if ((deg.array() <= 0.0).any()) return std::nullopt;
  const Vector inv_sqrt = deg.cwiseSqrt().cwiseInverse();
  SparseGraph norm = inv_sqrt.asDiagonal() * w * inv_sqrt.asDiagonal();

  Matrix ev;
  if (m <= 400) {
    Eigen::SelfAdjointEigenSolver<Matrix> es{Matrix(norm)};
    if (es.info() != Eigen::Success) return std::nullopt;
    ev.resize(m, dim);
    for (int a = 0; a < dim; ++a) ev.col(a) = es.eigenvectors().col(m - 2 - a);
  } else {
    // Subspace iteration on I + N (eigenvalues in [0, 2]) with the trivial
    // eigenvector sqrt(deg) projected out.
    const Vector trivial = deg.cwiseSqrt().normalized();
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix x(m, dim);
    for (Eigen::Index i = 0; i < m; ++i)
      for (int a = 0; a < dim; ++a) x(i, a) = gauss(rng);
    for (int iter = 0; iter < 300; ++iter) {
      x = x + norm * x;
      x -= trivial * (trivial.transpose() * x);
      Eigen::HouseholderQR<Matrix> qr(x);
      x = qr.householderQ() * Matrix::Identity(m, dim);
    }
    const Matrix small = x.transpose() * (x + norm * x);
    Eigen::SelfAdjointEigenSolver<Matrix> es(small);
    ev.resize(m, dim);
    for (int a = 0; a < dim; ++a) ev.col(a) = x * es.eigenvectors().col(dim - 1 - a);
  }
  fix_column_signs(ev);
  return ev;
}

double umap_cross_entropy(const SparseGraph& g, const Matrix& y) {
  double ce = 0.0;
  for (Eigen::Index i = 0; i < g.outerSize(); ++i) {
    for (SparseGraph::InnerIterator it(g, i); it; ++it) {
      const double w = it.value();
      const double d2 = (y.row(i) - y.row(it.col())).squaredNorm();
      const double q = std::clamp(1.0 / (1.0 + kUmapA * std::pow(d2, kUmapB)), 1e-12, 1.0 - 1e-12);
      ce += w * std::log(w / q);
      if (w < 1.0) ce += (1.0 - w) * std::log((1.0 - w) / (1.0 - q));
    }
  }
  return ce;
}

void optimize_layout(const SparseGraph& g, Matrix& y, const std::vector<Eigen::Index>& nodes, int epochs,
                     int negative_rate, std::mt19937_64& rng) {
  struct Edge {
    Eigen::Index head, tail;
    double epochs_per_sample;
  };
  double max_w = 0.0;
  for (auto i : nodes)
    for (SparseGraph::InnerIterator it(g, i); it; ++it) max_w = std::max(max_w, it.value());
  if (max_w <= 0.0) return;

  std::vector<Edge> edges;
  for (auto i : nodes) {
    for (SparseGraph::InnerIterator it(g, i); it; ++it) {
      if (it.value() < max_w / epochs) continue;
      edges.push_back({i, it.col(), max_w / it.value()});
    }
  }
  std::vector<double> next_sample(edges.size()), next_negative(edges.size()), per_negative(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) {
    next_sample[e] = edges[e].epochs_per_sample;
    per_negative[e] = edges[e].epochs_per_sample / negative_rate;
    next_negative[e] = per_negative[e];
  }

  const auto dim = y.cols();
  std::uniform_int_distribution<std::size_t> pick(0, nodes.size() - 1);
  auto clip = [](double v) { return std::clamp(v, -4.0, 4.0); };
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double alpha = 1.0 - static_cast<double>(epoch) / epochs;
    for (std::size_t e = 0; e < edges.size(); ++e) {
      if (next_sample[e] > epoch) continue;
      const auto j = edges[e].head, k = edges[e].tail;
      double d2 = (y.row(j) - y.row(k)).squaredNorm();
      if (d2 > 0.0) {
        const double coeff =
            -2.0 * kUmapA * kUmapB * std::pow(d2, kUmapB - 1.0) / (kUmapA * std::pow(d2, kUmapB) + 1.0);
        for (Eigen::Index d = 0; d < dim; ++d) {
          const double gd = clip(coeff * (y(j, d) - y(k, d)));
          y(j, d) += gd * alpha;
          y(k, d) -= gd * alpha;
        }
      }
      next_sample[e] += edges[e].epochs_per_sample;

      const int n_neg = static_cast<int>((epoch - next_negative[e]) / per_negative[e]);
      for (int p = 0; p < n_neg; ++p) {
        const auto other = nodes[pick(rng)];
        if (other == j) continue;
        d2 = (y.row(j) - y.row(other)).squaredNorm();
        double coeff = 0.0;
        if (d2 > 0.0) coeff = 2.0 * kUmapB / ((0.001 + d2) * (kUmapA * std::pow(d2, kUmapB) + 1.0));
        for (Eigen::Index d = 0; d < dim; ++d) {
          const double gd = coeff > 0.0 ? clip(coeff * (y(j, d) - y(other, d))) : 4.0;
          y(j, d) += gd * alpha;
        }
      }
      next_negative[e] += n_neg * per_negative[e];
    }
  }
}

}  // namespace

ProjectionResult umap_project(const CondensedDistances& dists, const UmapOptions& opt) {
  const auto n = dists.size();
  if (opt.dim != 2 && opt.dim != 3) throw Error("umap_project: dim must be 2 or 3");
  if (opt.n_neighbors < 2) throw Error("umap_project: n_neighbors must be at least 2");
  if (n <= opt.n_neighbors) throw Error("umap_project: n_neighbors must be smaller than the number of points");
  if (opt.epochs < 1) throw Error("umap_project: epochs must be positive");

  ProjectionResult r;
  r.method = Method::umap;
  r.dim = opt.dim;
  r.seed = opt.seed;

  const SparseGraph graph = fuzzy_simplicial_set(dists, opt.n_neighbors);
  const auto comps = connected_components(graph);
  if (comps.size() > 1)
    r.flags.push_back("disconnected k-NN graph: " + std::to_string(comps.size()) + " components laid out separately");

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> noise(0.0, 1e-4);
  std::uniform_real_distribution<double> uniform(-10.0, 10.0);

  Matrix y = Matrix::Zero(n, opt.dim);
  for (const auto& nodes : comps) {
    const auto m = static_cast<Eigen::Index>(nodes.size());
    std::optional<Matrix> init;
    if (m > opt.dim + 1) {
      std::vector<Eigen::Triplet<double>> trip;
      std::vector<Eigen::Index> local(static_cast<std::size_t>(n), -1);
      for (Eigen::Index t = 0; t < m; ++t) local[nodes[t]] = t;
      for (Eigen::Index t = 0; t < m; ++t)
        for (SparseGraph::InnerIterator it(graph, nodes[t]); it; ++it) trip.emplace_back(t, local[it.col()], it.value());
      SparseGraph sub(m, m);
      sub.setFromTriplets(trip.begin(), trip.end());
      init = spectral_embedding(sub, opt.dim, rng);
    }
    double max_abs = init ? init->cwiseAbs().maxCoeff() : 0.0;
    for (Eigen::Index t = 0; t < m; ++t) {
      for (int d = 0; d < opt.dim; ++d) {
        y(nodes[t], d) = (init && max_abs > 0.0) ? (*init)(t, d) * (10.0 / max_abs) + noise(rng) : uniform(rng);
      }
    }
  }

  r.quality.initial_objective = umap_cross_entropy(graph, y);
  for (const auto& nodes : comps) optimize_layout(graph, y, nodes, opt.epochs, opt.negative_sample_rate, rng);

  if (comps.size() > 1) {
    const int per_row = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(comps.size()))));
    for (std::size_t c = 0; c < comps.size(); ++c) {
      const auto& nodes = comps[c];
      RowVector mean = RowVector::Zero(opt.dim);
      for (auto i : nodes) mean += y.row(i);
      mean /= static_cast<double>(nodes.size());
      double extent = 0.0;
      for (auto i : nodes) extent = std::max(extent, (y.row(i) - mean).cwiseAbs().maxCoeff());
      const double s = extent > 0.0 ? 10.0 / extent : 1.0;
      RowVector offset = RowVector::Zero(opt.dim);
      offset(0) = 30.0 * static_cast<double>(static_cast<int>(c) % per_row);
      offset(1) = 30.0 * static_cast<double>(static_cast<int>(c) / per_row);
      for (auto i : nodes) y.row(i) = (y.row(i) - mean) * s + offset;
    }
  }
  center_columns(y);
  r.quality.final_objective = umap_cross_entropy(graph, y);
  r.coords = std::move(y);
  return r;
}

// ---------------------------------------------------------------------------

double trustworthiness(const CondensedDistances& high, const Matrix& low, int k) {
  const auto n = high.size();
  if (low.rows() != n) throw Error("trustworthiness: point count mismatch");
  if (k < 1 || k >= n) throw Error("trustworthiness: k must satisfy 1 <= k < n");

  std::vector<Eigen::Index> order;
  std::vector<Eigen::Index> rank(static_cast<std::size_t>(n));
  auto others = [&](Eigen::Index i) {
    order.resize(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::erase(order, i);
  };
  double penalty = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    others(i);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return high(i, a) < high(i, b); });
    for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = static_cast<Eigen::Index>(r) + 1;

    others(i);
    auto low_d = [&](Eigen::Index j) { return (low.row(i) - low.row(j)).squaredNorm(); };
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Eigen::Index a, Eigen::Index b) {
      const double da = low_d(a), db = low_d(b);
      return da != db ? da < db : a < b;
    });
    for (int t = 0; t < k; ++t) penalty += static_cast<double>(std::max<Eigen::Index>(0, rank[order[t]] - k));
  }
  if (penalty == 0.0) return 1.0;
  const double nn = static_cast<double>(n), kk = static_cast<double>(k);
  const double denom = nn * kk * (2.0 * nn - 3.0 * kk - 1.0);
  if (denom <= 0.0) return 0.0;
  return std::clamp(1.0 - 2.0 / denom * penalty, 0.0, 1.0);
}

}  // namespace attnatlas
