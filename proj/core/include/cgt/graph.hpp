#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace cgt {

using NodeId = std::uint32_t;
using Label = std::int32_t;

/// Row-major n x d feature matrix.
using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Undirected, unweighted attributed graph in CSR layout with both edge
/// directions stored. Immutable once built.
///
/// Invariants: no self-loops, no duplicate edges, symmetric adjacency,
/// features.rows() == labels.size() == n, labels in [0, num_classes).
class Graph {
 public:
  Graph() = default;

  /// Builds from an undirected edge list. Edges are symmetrized and
  /// deduplicated; self-loops are dropped and counted in dropped_self_loops().
  /// Throws ValidationError on out-of-range endpoints or labels.
  static Graph from_edges(std::size_t n, std::span<const std::pair<NodeId, NodeId>> edges,
                          FeatureMatrix features, std::vector<Label> labels,
                          std::optional<int> num_classes = std::nullopt);

  std::size_t num_nodes() const noexcept { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  /// Number of undirected edges.
  std::size_t num_edges() const noexcept { return neighbors_.size() / 2; }
  std::size_t feature_dim() const noexcept { return static_cast<std::size_t>(features_.cols()); }
  int num_classes() const noexcept { return num_classes_; }

  std::span<const NodeId> neighbors(NodeId v) const noexcept {
    return {neighbors_.data() + offsets_[v], neighbors_.data() + offsets_[v + 1]};
  }
  std::size_t degree(NodeId v) const noexcept { return offsets_[v + 1] - offsets_[v]; }
  bool has_edge(NodeId u, NodeId v) const noexcept;

  const FeatureMatrix& features() const noexcept { return features_; }
  const std::vector<Label>& labels() const noexcept { return labels_; }
  Label label(NodeId v) const noexcept { return labels_[v]; }

  /// Undirected edges with u < v, sorted.
  std::vector<std::pair<NodeId, NodeId>> edge_list() const;

  std::size_t dropped_self_loops() const noexcept { return dropped_self_loops_; }

  friend bool operator==(const Graph& a, const Graph& b);

 private:
  std::vector<std::size_t> offsets_;
  std::vector<NodeId> neighbors_;  // sorted within each row
  FeatureMatrix features_;
  std::vector<Label> labels_;
  int num_classes_ = 0;
  std::size_t dropped_self_loops_ = 0;
};

/// Reads `edges.tsv`, `features.csv` and `labels.tsv` from a directory.
Graph load_graph(const std::filesystem::path& dir);

/// Writes the three files in the same formats; reals use the shortest
/// round-trip decimal so load(save(g)) == g bit-exactly.
void save_graph(const Graph& g, const std::filesystem::path& dir);

struct NoisyEdgesResult {
  Graph graph;
  /// Requested noise edges that could not be placed because a node was
  /// already adjacent to every other node.
  std::size_t shortfall = 0;
};

/// For every node (in id order) connects `num_per_node` new edges to
/// uniformly random distinct non-neighbors. Original edges are preserved.
NoisyEdgesResult add_noisy_edges(const Graph& g, std::size_t num_per_node, std::uint64_t seed);

struct PprVector {
  double alpha = 0.0;
  std::vector<double> scores;
  std::size_t iterations = 0;
  double residual = 0.0;
};

struct PprOptions {
  /// Stop when the a-posteriori 2-norm error bound
  /// ||x_{k+1} - x_k|| * (1 - alpha) / alpha drops below this.
  double tolerance = 1e-10;
  std::size_t max_iterations = 10'000;
};

/// Personalized PageRank with restart distribution uniform over `seeds`:
///   x = alpha * (I - (1 - alpha) * A_hat)^{-1} r,   A_hat = D^{-1/2} (A + I) D^{-1/2}
/// computed by power iteration and L1-normalized. Throws NumericalError
/// (carrying the residual) on non-convergence.
PprVector ppr(const Graph& g, double alpha, std::span<const NodeId> seeds, PprOptions options = {});

/// Train/valid/test node sets. Pairwise disjoint, all indices < n.
struct SplitSpec {
  std::vector<NodeId> train;
  std::vector<NodeId> valid;
  std::vector<NodeId> test;
  std::uint64_t seed = 0;
};

struct SplitFractions {
  double train = 0.5;
  double valid = 0.1;
  double test = 0.4;
};

/// Uniformly random split.
SplitSpec uniform_split(std::size_t n, SplitFractions fractions, std::uint64_t seed);

struct BiasedSplitOptions {
  SplitFractions fractions{};
  std::size_t seeds_per_class = 5;
  PprOptions ppr{};
};

/// Distribution-shifted split: draws `seeds_per_class` random seed nodes per
/// class, ranks the remaining nodes by PPR score from that seed set and fills
/// the training set with the top-ranked ones (ties broken uniformly at random).
/// Valid/test are drawn uniformly from the remainder. `alpha == nullopt`
/// selects the iid split.
SplitSpec biased_split(const Graph& g, std::optional<double> alpha, BiasedSplitOptions options,
                       std::uint64_t seed);

void save_split(const SplitSpec& split, const std::filesystem::path& path);
SplitSpec load_split(const std::filesystem::path& path);

struct SbmOptions {
  std::size_t num_nodes = 1000;
  int num_classes = 4;
  double p_in = 0.02;
  double p_out = 0.002;
  std::size_t feature_dim = 16;
  /// Distance between class feature centroids relative to unit noise.
  double class_separation = 2.0;
  double feature_noise = 1.0;
};

/// Stochastic block model with class-conditioned Gaussian features; labels
/// are assigned round-robin so classes are balanced.
Graph stochastic_block_model(const SbmOptions& options, std::uint64_t seed);

}  // namespace cgt
