#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"

#include "attnatlas/project.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace attnatlas;

namespace {

// k clusters of m points each in d dims, centers far apart.
Matrix clusters(int k, int m, int d, std::uint64_t seed, std::vector<int>& label) {
  std::mt19937_64 rng(seed);
  const Matrix centers = testutil::random_matrix(k, d, rng, 10.0);
  Matrix x(k * m, d);
  label.clear();
  for (int c = 0; c < k; ++c)
    for (int i = 0; i < m; ++i) {
      x.row(c * m + i) = centers.row(c) + testutil::random_matrix(1, d, rng, 0.5);
      label.push_back(c);
    }
  return x;
}

// Fraction of points whose nearest low-dim neighbor carries the same label.
double nn_agreement(const Matrix& y, const std::vector<int>& label) {
  int good = 0;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    Eigen::Index best = -1;
    double bd = 0;
    for (Eigen::Index j = 0; j < y.rows(); ++j) {
      if (j == i) continue;
      const double dd = (y.row(i) - y.row(j)).squaredNorm();
      if (best < 0 || dd < bd) best = j, bd = dd;
    }
    good += label[i] == label[best];
  }
  return static_cast<double>(good) / y.rows();
}

}  // namespace

TEST_SUITE("project") {
  TEST_CASE("cosine distance examples") {
    Matrix p(4, 2);
    p << 1, 0, 2, 0, 0, 3, -1, 0;
    const auto d = pairwise_cosine(p);
    CHECK(d(0, 1) == doctest::Approx(0.0));
    CHECK(d(0, 2) == doctest::Approx(1.0));
    CHECK(d(0, 3) == doctest::Approx(2.0));
    CHECK(d(2, 2) == 0.0);
    CHECK(d.warnings.empty());
    CHECK(d.to_square() == d.to_square().transpose());

    Matrix z(3, 2);
    z << 1, 0, 0, 0, 0, 1;
    const auto dz = pairwise_cosine(z);
    CHECK(dz(0, 1) == 1.0);
    CHECK(dz(1, 2) == 1.0);
    REQUIRE(dz.warnings.size() == 1);
    CHECK(dz.warnings[0].find("row 1") != std::string::npos);
  }

  TEST_CASE("pca on a line recovers the line") {
    Matrix p(20, 2);
    for (int i = 0; i < 20; ++i) p.row(i) << i - 3.0, 2.0 * (i - 3.0);
    const auto r = pca_project(p, 2);
    CHECK(r.coords.col(1).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(r.axis_variance[1] == 0.0);
    CHECK(r.flags.size() == 1);
    // first coordinate is the signed distance along (1, 2) / sqrt(5)
    for (int i = 0; i < 20; ++i) CHECK(std::abs(r.coords(i, 0) - (i - 9.5) * std::sqrt(5.0)) < 1e-9);
  }

  TEST_CASE("pca on square corners") {
    Matrix p(4, 2);
    p << 1, 1, 1, -1, -1, 1, -1, -1;
    const auto r = pca_project(p, 2);
    CHECK(std::abs(r.axis_variance[0] - r.axis_variance[1]) < 1e-12);
    CHECK(std::abs(r.axis_variance[0] - 4.0 / 3.0) < 1e-12);
    // rotation: pairwise distances survive
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        CHECK(std::abs((r.coords.row(i) - r.coords.row(j)).norm() - (p.row(i) - p.row(j)).norm()) < 1e-12);
  }

  TEST_CASE("pca variances match an SVD of the centered data") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix x = testutil::random_matrix(30 + trial, 8, rng) * testutil::random_matrix(8, 8, rng);
      const int dim = trial % 2 ? 3 : 2;
      const auto r = pca_project(x, dim);
      const Matrix c = x.rowwise() - x.colwise().mean();
      Eigen::JacobiSVD<Matrix> svd(c);
      for (int a = 0; a < dim; ++a) {
        const double lambda = svd.singularValues()(a) * svd.singularValues()(a) / (x.rows() - 1);
        CHECK(std::abs(r.axis_variance[a] - lambda) < 1e-8 * std::max(1.0, lambda));
        // variance of the returned coordinate equals the eigenvalue
        const double var = r.coords.col(a).squaredNorm() / (x.rows() - 1);
        CHECK(std::abs(var - lambda) < 1e-8 * std::max(1.0, lambda));
      }
    }
  }

  TEST_CASE("pca is an isometry when the data fits in dim") {
    std::mt19937_64 rng(5);
    const Matrix x = testutil::random_matrix(15, 2, rng) * testutil::random_matrix(2, 6, rng);
    const auto r = pca_project(x, 3);
    CHECK(r.flags.size() == 1);
    for (int i = 0; i < 15; ++i)
      for (int j = 0; j < 15; ++j)
        CHECK(std::abs((r.coords.row(i) - r.coords.row(j)).norm() - (x.row(i) - x.row(j)).norm()) < 1e-9);
  }

  TEST_CASE("pca rejects bad input") {
    CHECK_THROWS_AS(pca_project(Matrix::Zero(10, 3), 4), Error);
    CHECK_THROWS_AS(pca_project(Matrix::Zero(2, 3), 2), Error);
  }

  TEST_CASE("t-SNE affinities are a symmetric distribution") {
    std::mt19937_64 rng(6);
    const auto d = pairwise_euclidean(testutil::random_matrix(40, 5, rng));
    const Matrix P = tsne_affinities(d, 10.0);
    CHECK((P - P.transpose()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(std::abs(P.sum() - 1.0) < 1e-12);
    CHECK(P.diagonal().cwiseAbs().maxCoeff() == 0.0);
    CHECK((P.array() >= 0.0).all());
  }

  TEST_CASE("t-SNE lowers KL, separates clusters, and is deterministic") {
    std::vector<int> label;
    const auto d = pairwise_euclidean(clusters(3, 25, 10, 7, label));
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      TsneOptions opt;
      opt.seed = seed;
      opt.iterations = 500;
      const auto r = tsne_project(d, opt);
      CHECK(r.quality.final_objective < r.quality.initial_objective);
      CHECK(nn_agreement(r.coords, label) == 1.0);
      CHECK(r.coords.allFinite());
    }
    TsneOptions opt;
    opt.iterations = 300;
    CHECK(tsne_project(d, opt).coords == tsne_project(d, opt).coords);
  }

  TEST_CASE("t-SNE clamps an oversized perplexity") {
    std::mt19937_64 rng(8);
    const auto d = pairwise_euclidean(testutil::random_matrix(20, 3, rng));
    TsneOptions opt;
    opt.perplexity = 50;
    opt.iterations = 50;
    const auto r = tsne_project(d, opt);
    REQUIRE(r.flags.size() == 1);
    CHECK(r.flags[0].find("clamped") != std::string::npos);
    CHECK(r.coords.allFinite());
    CHECK_THROWS_AS(tsne_project(pairwise_euclidean(Matrix::Zero(4, 2))), Error);
  }

  TEST_CASE("UMAP separates clusters and is deterministic") {
    std::vector<int> label;
    const auto d = pairwise_euclidean(clusters(3, 30, 10, 9, label));
    UmapOptions opt;
    opt.n_neighbors = 10;
    const auto a = umap_project(d, opt);
    CHECK(a.coords == umap_project(d, opt).coords);
    CHECK(a.coords.allFinite());
    CHECK(nn_agreement(a.coords, label) >= 0.95);
    opt.dim = 3;
    CHECK(umap_project(d, opt).coords.cols() == 3);
    opt.n_neighbors = 90;
    CHECK_THROWS_AS(umap_project(d, opt), Error);
  }

  TEST_CASE("trustworthiness examples") {
    std::mt19937_64 rng(10);
    const Matrix x = testutil::random_matrix(60, 2, rng);
    const auto d = pairwise_euclidean(x);
    CHECK(trustworthiness(d, x, 10) == 1.0);
    CHECK(trustworthiness(d, 3.0 * x, 5) == 1.0);
    CHECK(trustworthiness(d, testutil::random_matrix(60, 2, rng), 59) == 1.0);
    CHECK_THROWS_AS(trustworthiness(d, x, 60), Error);
    CHECK_THROWS_AS(trustworthiness(d, x, 0), Error);
  }

  TEST_CASE("trustworthiness of shuffled coordinates is low") {
    // observed 0.50 to 0.53 over these seeds (unshuffled PCA: ~0.73)
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      std::mt19937_64 rng(seed);
      const Matrix x = testutil::random_matrix(100, 10, rng);
      const auto pca = pca_project(x, 2).coords;
      std::vector<Eigen::Index> perm(100);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Matrix shuffled(100, 2);
      for (int i = 0; i < 100; ++i) shuffled.row(i) = pca.row(perm[i]);
      CHECK(trustworthiness(pairwise_euclidean(x), shuffled, 10) < 0.8);
    }
  }

  TEST_CASE("trustworthiness matches the rank-table oracle") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      const int n = 12 + trial;
      const Matrix x = testutil::random_matrix(n, 5, rng);
      const Matrix y = x.leftCols(2) + testutil::random_matrix(n, 2, rng, 0.3);
      const auto dh = pairwise_euclidean(x);
      const int k = 1 + trial % 5;
      CHECK(std::abs(trustworthiness(dh, y, k) - oracle::trustworthiness(dh.to_square(), pairwise_euclidean(y).to_square(), k)) <
            1e-12);
    }
  }

  TEST_CASE("method names round trip") {
    for (auto m : {Method::pca, Method::tsne, Method::umap}) CHECK(method_from_string(to_string(m)) == m);
    CHECK_THROWS_AS(method_from_string("mds"), Error);
  }
}
