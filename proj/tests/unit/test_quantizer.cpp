#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "cgt/error.hpp"
#include "cgt/privacy.hpp"
#include "cgt/quantizer.hpp"
#include "test_util.hpp"

using namespace cgt;
using cgt::testing::random_graph;
using cgt::testing::TempDir;

namespace {

FeatureMatrix gaussian_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.normal());
  return x;
}

bool bit_equal(const FeatureMatrix& a, const FeatureMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(a.data()[i]) != std::bit_cast<std::uint32_t>(b.data()[i])) return false;
  }
  return true;
}

std::uint32_t brute_nearest(const FeatureMatrix& means, const float* row) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < means.rows(); ++c) {
    double d = 0.0;
    for (Eigen::Index j = 0; j < means.cols(); ++j) {
      const double diff = static_cast<double>(row[j]) - static_cast<double>(means(c, j));
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(c);
    }
  }
  return best;
}

}  // namespace

TEST_CASE("every cluster meets the minimum size") {
  const auto x = gaussian_rows(500, 4, 1);
  for (const std::uint32_t k : {1u, 5u, 30u, 100u}) {
    const std::uint32_t m = std::min<std::uint32_t>(20, static_cast<std::uint32_t>(500 / k));
    const auto q = fit_kmeans_min_size(x, {m, k, 0, 15}, 3);
    CHECK(q.num_clusters() == m);
    CHECK(std::accumulate(q.sizes.begin(), q.sizes.end(), std::uint64_t{0}) == 500);
    for (const auto s : q.sizes) CHECK(s >= k);
    // Means are the exact averages of the assigned rows.
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(m, 4);
    for (Eigen::Index r = 0; r < x.rows(); ++r) sums.row(q.assignment[r]) += x.row(r).cast<double>();
    for (std::uint32_t c = 0; c < m; ++c) {
      for (Eigen::Index j = 0; j < 4; ++j) {
        CHECK(q.means(c, j) == doctest::Approx(sums(c, j) / static_cast<double>(q.sizes[c])).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("infeasible cluster counts are rejected") {
  const auto x = gaussian_rows(50, 2, 2);
  CHECK_THROWS_AS(fit_kmeans_min_size(x, {6, 10, 0, 5}, 0), ValidationError);
  FeatureMatrix same = FeatureMatrix::Ones(10, 2);
  CHECK_THROWS_AS(fit_kmeans_min_size(same, {3, 1, 0, 5}, 0), ValidationError);
}

TEST_CASE("one cluster per distinct point has zero objective") {
  const auto x = gaussian_rows(12, 3, 5);
  const auto q = fit_kmeans_min_size(x, {12, 1, 0, 5}, 1);
  for (const auto s : q.sizes) CHECK(s == 1);
  CHECK(q.objective_trace.back() == doctest::Approx(0.0));
}

TEST_CASE("well separated blobs are recovered with the size constraint") {
  FeatureMatrix x(80, 2);
  Rng rng(7);
  for (int i = 0; i < 80; ++i) {
    const float cx = i < 40 ? -10.0f : 10.0f;
    x(i, 0) = cx + static_cast<float>(rng.uniform(-1, 1));
    x(i, 1) = static_cast<float>(rng.uniform(-1, 1));
  }
  const auto q = fit_kmeans_min_size(x, {2, 30, 0, 10}, 4);
  std::vector<std::uint64_t> sizes = q.sizes;
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<std::uint64_t>{40, 40});
  for (std::uint32_t c = 0; c < 2; ++c) {
    const bool left = q.means(c, 0) < 0;
    Eigen::RowVector2d want = Eigen::RowVector2d::Zero();
    for (int i = left ? 0 : 40; i < (left ? 40 : 80); ++i) want += x.row(i).cast<double>();
    want /= 40.0;
    CHECK(std::abs(q.means(c, 0) - want(0)) < 1e-5);
    CHECK(std::abs(q.means(c, 1) - want(1)) < 1e-5);
  }
}

TEST_CASE("subsampled fitting still assigns every row") {
  const auto x = gaussian_rows(400, 3, 8);
  const auto q = fit_kmeans_min_size(x, {8, 20, 100, 10}, 2);
  CHECK(q.n_fit == 100);
  CHECK(q.assignment.size() == 400);
  for (const auto s : q.sizes) CHECK(s >= 20);
}

TEST_CASE("nearest cluster matches brute force, ties to the lowest id") {
  const auto x = gaussian_rows(300, 5, 9);
  const auto q = fit_kmeans_min_size(x, {10, 1, 0, 10}, 1);
  const auto probes = gaussian_rows(200, 5, 10);
  for (Eigen::Index r = 0; r < probes.rows(); ++r) {
    const std::span<const float> row(probes.row(r).data(), 5);
    CHECK(nearest_cluster(q, row) == brute_nearest(q.means, row.data()));
  }
  QuantizerModel tie;
  tie.means = FeatureMatrix(2, 1);
  tie.means << -1.0f, 1.0f;
  const float zero = 0.0f;
  CHECK(nearest_cluster(tie, std::span<const float>(&zero, 1)) == 0);
}

TEST_CASE("DP k-means at infinite epsilon is vanilla k-means") {
  const auto x = clip_rows(gaussian_rows(200, 3, 11), 1.0);
  DpKMeansOptions o;
  o.clusters = 6;
  o.eps = std::numeric_limits<double>::infinity();
  o.iterations = 8;
  const auto dp = fit_dp_kmeans(x, o, 17);
  const auto plain = fit_kmeans_min_size(x, {6, 1, 0, 8}, 17);
  CHECK(bit_equal(dp.centers, plain.centers));
  CHECK(bit_equal(dp.means, plain.means));
  CHECK(dp.sizes == plain.sizes);
  CHECK(dp.privacy == PrivacyMode::none());
}

TEST_CASE("DP k-means requires clipped rows") {
  DpKMeansOptions o;
  o.clusters = 2;
  CHECK_THROWS_AS(fit_dp_kmeans(gaussian_rows(50, 3, 1) * 10.0f, o, 0), ValidationError);
  const auto clipped = clip_rows(gaussian_rows(50, 3, 1) * 10.0f, 1.0);
  for (Eigen::Index r = 0; r < clipped.rows(); ++r) CHECK(clipped.row(r).norm() <= 1.0f + 1e-6f);
}

TEST_CASE("DP k-means noise on a single cluster matches the calibrated scale") {
  // Symmetric data: the clean mean is exactly zero, so the release is
  // (noise_sum) / (n + noise_count) and its spread is sigma_sum / n to first order.
  const int n = 1000;
  FeatureMatrix x(n, 1);
  for (int i = 0; i < n; ++i) x(i, 0) = i % 2 == 0 ? 0.5f : -0.5f;
  DpKMeansOptions o;
  o.clusters = 1;
  o.eps = 1.0;
  o.delta = 0.01;
  o.iterations = 1;
  o.clip_norm = 1.0;
  const double sigma = privacy::gaussian_sigma(0.5, 0.005, 1.0);
  double sq = 0.0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    const auto q = fit_dp_kmeans(x, o, static_cast<std::uint64_t>(t));
    sq += static_cast<double>(q.means(0, 0)) * q.means(0, 0);
  }
  const double empirical = std::sqrt(sq / trials);
  CHECK(empirical == doctest::Approx(sigma / n).epsilon(0.1));
}

TEST_CASE("quantize maps zero rows to null and round-trips through dequantize") {
  const Graph g = random_graph(60, 0.05, 3, 2, 3);
  const auto q = fit_kmeans_min_size(g.features(), {6, 5, 0, 10}, 2);
  const TreeShape shape(3, 2);
  for (const auto& cg : sample_computation_graphs(g, shape, 1)) {
    const auto ts = quantize(cg, q);
    CHECK(ts.root_label == cg.root_label);
    REQUIRE(ts.tokens.size() == shape.size());
    const auto back = dequantize(ts, q, shape);
    for (std::uint32_t r = 0; r < shape.size(); ++r) {
      if (is_null_row(cg.rows, r)) {
        CHECK(ts.tokens[r] == q.null_token());
        CHECK(is_null_row(back.rows, r));
      } else {
        CHECK(ts.tokens[r] == static_cast<std::int32_t>(brute_nearest(q.means, cg.rows.row(r).data())));
        CHECK(back.rows.row(r) == q.means.row(ts.tokens[r]));
      }
    }
    CHECK(quantize(back, q) == ts);
  }
  TokenSequence bad{{0, 99, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}, 0};
  CHECK_THROWS_AS(dequantize(bad, q, shape), ValidationError);
  TokenSequence short_seq{{0, 1}, 0};
  CHECK_THROWS_AS(dequantize(short_seq, q, shape), ValidationError);
}

TEST_CASE("token path split follows the ancestor chains") {
  const TreeShape shape(2, 2);
  const TokenSequence ts{{10, 11, 12, 13, 14, 15, 16}, 1};
  const auto paths = split_paths(ts, shape);
  REQUIRE(paths.size() == 4);
  CHECK(paths[0].tokens == std::vector<std::int32_t>{10, 11, 13});
  CHECK(paths[1].tokens == std::vector<std::int32_t>{10, 11, 14});
  CHECK(paths[2].tokens == std::vector<std::int32_t>{10, 12, 15});
  CHECK(paths[3].tokens == std::vector<std::int32_t>{10, 12, 16});
  for (const auto& p : paths) CHECK(p.root_label == 1);
}

TEST_CASE("cluster edge distribution and whole-graph materialization") {
  const Graph g = random_graph(100, 0.1, 2, 2, 5);
  const auto q = fit_kmeans_min_size(g.features(), {4, 10, 0, 10}, 3);
  const auto dist = cluster_edge_distribution(g, q.assignment, 4);
  for (Eigen::Index c = 0; c < 4; ++c) CHECK(dist.row(c).sum() == doctest::Approx(1.0));

  SUBCASE("one cluster gives identical features") {
    const auto q1 = fit_kmeans_min_size(g.features(), {1, 1, 0, 2}, 3);
    const Eigen::MatrixXd d1 = Eigen::MatrixXd::Ones(1, 1);
    const auto mg = materialize_graph(q1, d1, q1.assignment, 3, 1);
    for (Eigen::Index r = 1; r < mg.graph.features().rows(); ++r) {
      CHECK(mg.graph.features().row(r) == mg.graph.features().row(0));
    }
  }
  SUBCASE("identity distribution keeps communities apart") {
    const auto q2 = fit_kmeans_min_size(g.features(), {2, 10, 0, 5}, 3);
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(2, 2);
    const auto mg = materialize_graph(q2, eye, q2.assignment, 3, 4);
    for (const auto& [u, v] : mg.graph.edge_list()) CHECK(q2.assignment[u] == q2.assignment[v]);
  }
  SUBCASE("sampled cluster frequencies follow the distribution") {
    const std::uint32_t s = 50;
    const auto mg = materialize_graph(q, dist, q.assignment, s, 6);
    for (std::uint32_t c = 0; c < 4; ++c) {
      std::vector<double> counts(4, 0.0);
      double total = 0.0;
      for (std::size_t v = 0; v < 100; ++v) {
        if (q.assignment[v] != c) continue;
        for (std::uint32_t i = 0; i < s; ++i) counts[mg.sampled_clusters[v * s + i]] += 1.0;
        total += s;
      }
      for (std::uint32_t c2 = 0; c2 < 4; ++c2) {
        const double p = dist(c, c2);
        const double sd = std::sqrt(total * p * (1 - p));
        CHECK(std::abs(counts[c2] - total * p) <= 3.0 * sd + 1e-9);
      }
    }
  }
}

TEST_CASE("quantizer and token files round-trip") {
  TempDir dir("quantizer");
  const auto x = gaussian_rows(100, 3, 12);
  const auto q = fit_kmeans_min_size(x, {5, 10, 0, 5}, 1);
  write_quantizer(dir / "q.bin", q);
  const auto back = read_quantizer(dir / "q.bin");
  CHECK(bit_equal(back.centers, q.centers));
  CHECK(bit_equal(back.means, q.means));
  CHECK(back.sizes == q.sizes);
  CHECK(back.k_min == 10);
  CHECK(back.privacy == PrivacyMode::k_anonymous(10));

  const std::vector<TokenSequence> seqs{{{1, 2, 5}, 0}, {{0, 5, 5}, 3}};
  write_tokens(dir / "t.tsv", seqs);
  CHECK(read_tokens(dir / "t.tsv") == seqs);
  std::ofstream(dir / "bad.tsv") << "0\t1,x,3\n";
  CHECK_THROWS_AS(read_tokens(dir / "bad.tsv"), ValidationError);
}
