#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"

#include "attnatlas/attention.hpp"
#include "attnatlas/normalize.hpp"
#include "attnatlas/synthetic.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace attnatlas;

namespace {

double max_attention_gap(const HeadTensors& a, const HeadTensors& b, Mask mask) {
  const auto x = head_attention(a, mask), y = head_attention(b, mask);
  double gap = 0.0;
  for (std::size_t s = 0; s < x.size(); ++s) gap = std::max(gap, (x[s].weights - y[s].weights).cwiseAbs().maxCoeff());
  return gap;
}

// Grid objective computed pair by pair, with centroids re-aligned per candidate.
std::vector<double> brute_force_grid(const HeadTensors& h, const Vector& v, const std::vector<double>& grid_log2,
                                     bool causal) {
  const Vector qmean = h.queries.colwise().mean().transpose();
  std::vector<double> out;
  for (double lg : grid_log2) {
    const double c = std::pow(2.0, lg);
    const Vector vc = v + (c * c - 1.0) * qmean;
    std::vector<double> dots, dists;
    for (Eigen::Index i = 0; i < h.num_queries(); ++i) {
      for (Eigen::Index j = 0; j < h.num_keys(); ++j) {
        const auto& qt = h.query_token(i);
        const auto& kt = h.key_token(j);
        if (qt.sequence_id != kt.sequence_id) continue;
        if (causal && kt.position > qt.position) continue;
        const Vector q = c * h.queries.row(i).transpose();
        const Vector k = (h.keys.row(j).transpose() + vc) / c;
        dists.push_back(1.0 - q.dot(k) / (q.norm() * k.norm()));
        dots.push_back(h.queries.row(i).dot(h.keys.row(j)) / std::sqrt(static_cast<double>(h.dim())));
      }
    }
    std::vector<double> sorted = dists;
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    const double sigma = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    std::vector<double> w;
    for (double d : dists) w.push_back(std::exp(-d / sigma));
    out.push_back(oracle::weighted_pearson(dots, dists, w));
  }
  return out;
}

std::size_t oracle_argmin(const std::vector<double>& grid_log2, const std::vector<double>& obj) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < obj.size(); ++i) {
    const bool better = obj[i] < obj[best] ||
                        (obj[i] == obj[best] && std::abs(grid_log2[i]) < std::abs(grid_log2[best]));
    if (better) best = i;
  }
  return best;
}

}  // namespace

TEST_SUITE("normalize") {
  TEST_CASE("key_translation examples") {
    HeadTensors h;
    h.queries.resize(2, 2);
    h.keys.resize(2, 2);
    h.queries << 1, 1, 1, -1;  // centroid (1, 0)
    h.keys << 1, 1, -1, 1;     // centroid (0, 1)
    const Vector v = key_translation(h);
    CHECK(v(0) == 1.0);
    CHECK(v(1) == -1.0);
    h.keys = h.queries;
    CHECK(key_translation(h).isZero(0.0));
    h.keys.resize(0, 2);
    CHECK_THROWS_WITH_AS(key_translation(h), "empty population", Error);
  }

  TEST_CASE("translation keeps attention and aligns centroids on a random 50x64 head") {
    const auto h = gaussian_head({10, 15, 25}, 64, 11);
    const Vector v = key_translation(h);
    const auto t = apply_normalization(h, {v, 1.0});
    CHECK(max_attention_gap(h, t, Mask::none) < 1e-9);
    CHECK((t.queries.colwise().mean() - t.keys.colwise().mean()).cwiseAbs().maxCoeff() < 1e-9);
  }

  TEST_CASE("weighted_correlation examples") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    std::vector<double> x(40), y(40), ones(40, 1.0), w(40);
    std::uniform_real_distribution<double> u(0.1, 2.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = n(rng);
      y[i] = x[i] + n(rng);
      w[i] = u(rng);
    }
    CHECK(std::abs(weighted_correlation(x, y, ones) - oracle::pearson(x, y)) < 1e-12);
    CHECK(std::abs(weighted_correlation(x, y, w) - oracle::weighted_pearson(x, y, w)) < 1e-12);
    CHECK(weighted_correlation(x, x, w) == doctest::Approx(1.0).epsilon(1e-14));
    const std::vector<double> a{1, 2, 3}, b{3, 2, 1}, one{1, 1, 1};
    CHECK(weighted_correlation(a, b, one) == doctest::Approx(-1.0).epsilon(1e-15));
    const std::vector<double> flat{2, 2, 2};
    CHECK_THROWS_WITH_AS(weighted_correlation(a, flat, one), "degenerate variance", Error);
  }

  TEST_CASE("search picks c=1 on a symmetric head with equal norms") {
    // unit vectors with zero centroids: every candidate gives the same geometry
    const auto h = ideal_head({6, 8}, 5, 2);
    const auto r = search_scale_detailed(h, key_translation(h), {});
    CHECK(r.params.scale == 1.0);
    const auto o = brute_force_grid(h, key_translation(h), r.grid_log2, false);
    CHECK(std::abs(r.objective - o[32]) < 1e-9);
  }

  TEST_CASE("long queries pull c below 1, matching a brute-force sweep") {
    FixtureSpec spec;
    spec.direction = AttentionDirection::causal;
    spec.query_scale = 10.0;
    spec.num_sequences = 4;
    spec.seed = 21;
    const auto b = make_fixture_bundle(spec);
    for (const auto& h : b.heads) {
      const Vector v = key_translation(h);
      const auto r = search_scale_detailed(h, v, {}, AttentionDirection::causal);
      const auto o = brute_force_grid(h, v, r.grid_log2, true);
      for (std::size_t i = 0; i < o.size(); ++i) CHECK(std::abs(r.grid_objective[i] - o[i]) < 1e-9);
      CHECK(r.params.scale == std::pow(2.0, r.grid_log2[oracle_argmin(r.grid_log2, o)]));
      CHECK(r.params.scale < 1.0);
    }
  }

  TEST_CASE("three-point grid over [-1, 1]") {
    ScaleSearchConfig cfg;
    cfg.grid_min_log2 = -1;
    cfg.grid_max_log2 = 1;
    cfg.grid_points = 3;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto h = gaussian_head({5, 7}, 6, seed);
      const double c = search_scale(h, key_translation(h), cfg).scale;
      CHECK((c == 0.5 || c == 1.0 || c == 2.0));
    }
  }

  TEST_CASE("grid config invariants") {
    ScaleSearchConfig cfg;
    CHECK(cfg.candidates_log2().size() == 65);
    CHECK(cfg.candidates_log2()[32] == 0.0);
    cfg.grid_points = 2;
    CHECK_THROWS_AS(cfg.candidates_log2(), Error);
    cfg = {};
    cfg.grid_min_log2 = 1;
    cfg.grid_max_log2 = 1;
    CHECK_THROWS_AS(cfg.candidates_log2(), Error);
  }

  TEST_CASE("all-zero keys make the search fail") {
    auto h = gaussian_head({6, 6}, 4, 5);
    h.keys.setZero();
    CHECK_THROWS_WITH_AS(search_scale(h, key_translation(h), {}), "scale search failed: degenerate head", Error);
  }

  TEST_CASE("apply_normalization examples") {
    const auto h = gaussian_head({4, 5}, 3, 8);
    const auto same = apply_normalization(h, {Vector::Zero(3), 1.0});
    CHECK(same.queries == h.queries);
    CHECK(same.keys == h.keys);
    CHECK(same.tokens == h.tokens);

    HeadTensors t;
    t.queries.resize(1, 2);
    t.keys.resize(1, 2);
    t.queries << 2, 0;
    t.keys << 0, 2;
    Vector v(2);
    v << 2, -2;
    const auto n = apply_normalization(t, {v, 2.0});
    CHECK(n.queries(0, 0) == 4.0);
    CHECK(n.queries(0, 1) == 0.0);
    // ((0,2) + (2,-2)) / 2 = (1, 0)
    CHECK(n.keys(0, 0) == 1.0);
    CHECK(n.keys(0, 1) == 0.0);
    CHECK(t.queries.row(0).dot(t.keys.row(0)) == 0.0);
    CHECK(n.queries.row(0).dot(n.keys.row(0)) == 4.0);
    CHECK_THROWS_AS(apply_normalization(t, {v, 0.0}), Error);
  }

  TEST_CASE("attention invariance for random v and c") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> lg(-8.0, 8.0);
    for (int trial = 0; trial < 30; ++trial) {
      const auto dir = trial % 2 ? AttentionDirection::causal : AttentionDirection::bidirectional;
      const auto h = gaussian_head({5, 9, 12}, 8, 100 + trial);
      const Vector v = testutil::random_matrix(8, 1, rng, 3.0).col(0);
      const double c = std::exp2(lg(rng));
      const auto n = apply_normalization(h, {v, c});
      CHECK(max_attention_gap(h, n, mask_for(dir)) < 1e-9);
      // scaling alone keeps every dot product
      const auto s = apply_normalization(h, {Vector::Zero(8), c});
      const Matrix d0 = h.queries * h.keys.transpose(), d1 = s.queries * s.keys.transpose();
      CHECK(((d0 - d1).cwiseAbs().array() <= 1e-9 * d0.cwiseAbs().array().max(1.0)).all());
    }
  }

  TEST_CASE("searched params align centroids and never lose to c=1") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      FixtureSpec spec;
      spec.seed = seed;
      spec.query_scale = 1.0 + seed;
      spec.key_offset = 0.5 * static_cast<double>(seed);
      const auto b = make_fixture_bundle(spec);
      for (const auto& h : b.heads) {
        const auto r = search_scale_detailed(h, key_translation(h), {});
        const auto n = apply_normalization(h, r.params);
        CHECK((n.queries.colwise().mean() - n.keys.colwise().mean()).cwiseAbs().maxCoeff() < 1e-9);
        CHECK(r.objective <= r.grid_objective[32]);
      }
    }
  }

  TEST_CASE("causal pairs exclude future keys") {
    const auto h = gaussian_head({4}, 3, 1);
    CHECK(admissible_pairs(h, AttentionDirection::bidirectional).query_rows.size() == 16);
    CHECK(admissible_pairs(h, AttentionDirection::causal).query_rows.size() == 10);
  }
}
