#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "cgt/graph.hpp"

namespace cgt {

/// Shape of a duplicate-encoded computation graph: a complete s-ary tree of
/// depth L laid out in breadth-first order.
///
/// Positions are 1-indexed BFS positions (root = 1). Feature rows are
/// 0-indexed, so position t lives in row t - 1.
class TreeShape {
 public:
  TreeShape() = default;
  /// Throws ValidationError unless s >= 1 and L >= 1.
  TreeShape(std::uint32_t fanout, std::uint32_t depth);

  std::uint32_t fanout() const noexcept { return s_; }
  std::uint32_t depth() const noexcept { return depth_; }
  /// Total positions: (s^{L+1} - 1) / (s - 1), or L + 1 when s = 1.
  std::uint32_t size() const noexcept { return size_; }
  /// Number of root-to-leaf paths, s^L.
  std::uint32_t num_leaves() const noexcept { return level_size(depth_); }

  std::uint32_t level_size(std::uint32_t layer) const noexcept;
  /// First position of a layer (1-indexed).
  std::uint32_t level_begin(std::uint32_t layer) const noexcept;

  /// Parent of position t >= 2: floor((t - 2) / s) + 1.
  std::uint32_t parent(std::uint32_t t) const noexcept { return (t - 2) / s_ + 1; }
  /// First child of position t (children are consecutive, s of them).
  std::uint32_t first_child(std::uint32_t t) const noexcept { return s_ * (t - 1) + 2; }
  std::uint32_t layer(std::uint32_t t) const noexcept { return layer_of_[t - 1]; }
  bool is_leaf(std::uint32_t t) const noexcept { return layer(t) == depth_; }

  /// Ancestors of t ordered from the root down (excludes t); size == layer(t).
  std::vector<std::uint32_t> ancestors(std::uint32_t t) const;

  friend bool operator==(const TreeShape&, const TreeShape&) = default;

 private:
  std::uint32_t s_ = 1;
  std::uint32_t depth_ = 1;
  std::uint32_t size_ = 2;
  std::vector<std::uint32_t> layer_of_{0, 1};
};

/// Per-position node ids of a sampled tree; -1 marks a null (padding) node.
struct SampledTree {
  TreeShape shape;
  std::vector<std::int64_t> node_ids;
};

/// A duplicate-encoded computation graph: constant tree adjacency plus a
/// T x d feature matrix whose null rows are all zero.
struct EncodedComputationGraph {
  TreeShape shape;
  FeatureMatrix rows;
  Label root_label = 0;
  /// Root node in the source graph; absent for generated graphs.
  std::optional<NodeId> source_node;
};

/// Top-down neighbor sampling. Every non-null node at depth < L draws
/// min(s, deg) distinct neighbors uniformly without replacement; the drawn ids
/// fill its child slots in ascending order and the remaining slots are null.
/// Neighbors shared by different parents are sampled independently (and so
/// copied). The random stream is derived from (seed, v).
SampledTree sample_tree(const Graph& g, NodeId v, const TreeShape& shape, std::uint64_t seed);

/// Materializes feature rows for a sampled tree.
EncodedComputationGraph encode_tree(const Graph& g, const SampledTree& tree);

EncodedComputationGraph sample_computation_graph(const Graph& g, NodeId v, std::uint32_t s,
                                                 std::uint32_t L, std::uint64_t seed);

/// Samples one computation graph per listed node (all nodes when empty).
std::vector<EncodedComputationGraph> sample_computation_graphs(const Graph& g, const TreeShape& shape,
                                                               std::uint64_t seed,
                                                               std::span<const NodeId> nodes = {});

/// Constant parent-child edge list over 1-indexed positions, in BFS order.
std::vector<std::pair<std::uint32_t, std::uint32_t>> tree_adjacency(const TreeShape& shape);

struct FlatRows {
  FeatureMatrix rows;
  std::vector<std::uint32_t> layers;
};

/// Rows in BFS order annotated with their layer.
FlatRows flatten_bfs(const EncodedComputationGraph& cg);
EncodedComputationGraph unflatten_bfs(const FlatRows& flat, const TreeShape& shape, Label root_label);

/// One root-to-leaf ancestor chain.
struct PathSequence {
  /// 1-indexed BFS positions, root first, length L + 1.
  std::vector<std::uint32_t> positions;
  /// Token ids (cluster ids) or, for feature trees, 0-indexed row references.
  std::vector<std::int32_t> tokens;
  Label root_label = 0;
};

/// Position chains for every leaf, in leaf order.
std::vector<std::vector<std::uint32_t>> leaf_paths(const TreeShape& shape);

/// Splits a feature tree into s^L paths whose tokens reference rows.
std::vector<PathSequence> split_paths(const EncodedComputationGraph& cg);

/// True when the row is exactly zero (a null / padding node).
bool is_null_row(const FeatureMatrix& rows, Eigen::Index r) noexcept;

/// `cgs.bin`: magic "CGCG", u32 version, u32 s, u32 L, u32 d, u64 count, then
/// per graph u32 root_label, i64 source node (-1 when absent) and T x d f32 rows.
void write_cgs(const std::filesystem::path& path, const TreeShape& shape, std::size_t feature_dim,
               std::span<const EncodedComputationGraph> graphs);

struct CgsFile {
  TreeShape shape;
  std::size_t feature_dim = 0;
  std::vector<EncodedComputationGraph> graphs;
};

CgsFile read_cgs(const std::filesystem::path& path);

}  // namespace cgt
