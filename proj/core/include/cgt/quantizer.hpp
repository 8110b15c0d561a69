#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cgt/graph.hpp"
#include "cgt/tree.hpp"

namespace cgt {

struct PrivacyMode {
  enum class Kind : std::uint8_t { kNone = 0, kAnonymous = 1, kDifferential = 2 };
  Kind kind = Kind::kNone;
  std::uint32_t k = 1;
  double eps = 0.0;
  double delta = 0.0;

  static PrivacyMode none() { return {}; }
  static PrivacyMode k_anonymous(std::uint32_t k) { return {Kind::kAnonymous, k, 0.0, 0.0}; }
  static PrivacyMode differential(double eps, double delta) { return {Kind::kDifferential, 1, eps, delta}; }
  std::string describe() const;

  friend bool operator==(const PrivacyMode&, const PrivacyMode&) = default;
};

/// Fitted vector quantizer. Cluster ids are [0, m); id m is the null token.
struct QuantizerModel {
  FeatureMatrix centers;             // m x d Lloyd centers
  FeatureMatrix means;               // m x d per-cluster feature means (noisy in DP mode)
  std::vector<std::uint64_t> sizes;  // cluster cardinalities over the full data
  std::uint32_t k_min = 1;
  std::uint64_t n_fit = 0;
  PrivacyMode privacy;
  /// Cluster of every fitted row (not serialized).
  std::vector<std::uint32_t> assignment;
  /// Objective after each assignment step on the fitting sample (not serialized).
  std::vector<double> objective_trace;

  std::uint32_t num_clusters() const noexcept { return static_cast<std::uint32_t>(means.rows()); }
  std::int32_t null_token() const noexcept { return static_cast<std::int32_t>(means.rows()); }
  std::size_t feature_dim() const noexcept { return static_cast<std::size_t>(means.cols()); }
};

struct KMeansOptions {
  std::uint32_t clusters = 8;
  std::uint32_t k_min = 1;
  /// Rows used for the Lloyd iterations (0 = all). The final assignment always covers all rows.
  std::uint64_t n_fit = 0;
  /// Center updates, the last of which runs on the full data and yields `means`.
  std::uint32_t iterations = 20;
};

/// k-means with a minimum cluster size. Each assignment step is nearest-center
/// followed by a repair pass that moves the closest points out of clusters
/// with surplus into undersized clusters until every cluster has >= k_min
/// members. Throws ValidationError when m * k_min > n, or when the fitting
/// sample has fewer distinct rows than m.
QuantizerModel fit_kmeans_min_size(const FeatureMatrix& x, const KMeansOptions& options, std::uint64_t seed);

struct DpKMeansOptions {
  std::uint32_t clusters = 8;
  double eps = 1.0;
  double delta = 0.01;
  std::uint32_t iterations = 10;
  /// Rows must already have norm <= clip_norm (see clip_rows).
  double clip_norm = 1.0;
};

/// Lloyd iterations with Gaussian noise on per-cluster sums (sensitivity
/// clip_norm) and counts (sensitivity 1). (eps, delta) is split evenly over the
/// 2 * iterations releases. With eps = +inf the result is bit-identical to
/// fit_kmeans_min_size with k_min = 1, n_fit = 0 and the same seed.
QuantizerModel fit_dp_kmeans(const FeatureMatrix& x, const DpKMeansOptions& options, std::uint64_t seed);

/// Rescales rows with norm > max_norm onto the max_norm sphere.
FeatureMatrix clip_rows(const FeatureMatrix& x, double max_norm);

/// Nearest cluster mean by squared Euclidean distance; ties go to the lowest id.
std::uint32_t nearest_cluster(const QuantizerModel& q, std::span<const float> row);

struct TokenSequence {
  std::vector<std::int32_t> tokens;
  Label root_label = 0;

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Zero rows become the null token, other rows their nearest-mean cluster id.
TokenSequence quantize(const EncodedComputationGraph& cg, const QuantizerModel& q);

/// Null -> zero row, cluster c -> means[c]. Throws ValidationError on ids > m
/// or a length that does not match the shape.
EncodedComputationGraph dequantize(const TokenSequence& ts, const QuantizerModel& q, const TreeShape& shape);

/// Path split over token sequences (tokens are cluster ids).
std::vector<PathSequence> split_paths(const TokenSequence& ts, const TreeShape& shape);

/// Empirical cluster-to-cluster neighbor distribution; rows with no edges are
/// uniform over non-empty clusters.
Eigen::MatrixXd cluster_edge_distribution(const Graph& g, std::span<const std::uint32_t> node_to_cluster,
                                          std::uint32_t clusters);

struct MaterializedGraph {
  Graph graph;
  /// n x s sampled cluster ids, row-major, before neighbor resolution.
  std::vector<std::uint32_t> sampled_clusters;
};

/// Whole-graph synthesis from cluster structure: every node takes its
/// cluster's mean feature, samples s clusters with replacement from its
/// cluster's row of `edge_dist`, and links to a uniform member of each.
/// Labels default to 0 when not given.
MaterializedGraph materialize_graph(const QuantizerModel& q, const Eigen::MatrixXd& edge_dist,
                                    std::span<const std::uint32_t> node_to_cluster, std::uint32_t s,
                                    std::uint64_t seed, std::span<const Label> labels = {});

/// `quantizer.bin`: magic "CGQZ", u32 version, u32 m, u32 d, u32 k_min,
/// u8 privacy tag, u32 k, f64 eps, f64 delta, u64 n_fit, then centers and
/// means (m x d f32) and sizes (m x u64).
void write_quantizer(const std::filesystem::path& path, const QuantizerModel& q);
QuantizerModel read_quantizer(const std::filesystem::path& path);

/// `tokens.tsv`: one sequence per line, `label<TAB>t1,t2,...,tT`.
void write_tokens(const std::filesystem::path& path, std::span<const TokenSequence> sequences);
std::vector<TokenSequence> read_tokens(const std::filesystem::path& path);

}  // namespace cgt
