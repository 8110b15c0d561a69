#include "cgt/tree.hpp"

#include <algorithm>
#include <limits>

#include "cgt/binary_io.hpp"
#include "cgt/error.hpp"
#include "cgt/random.hpp"

namespace cgt {

namespace {
constexpr std::uint32_t kCgsVersion = 1;
}

TreeShape::TreeShape(std::uint32_t fanout, std::uint32_t depth) : s_(fanout), depth_(depth) {
  if (fanout < 1 || depth < 1) throw ValidationError("tree shape needs s >= 1 and L >= 1");
  std::uint64_t total = 0;
  std::uint64_t level = 1;
  for (std::uint32_t l = 0; l <= depth; ++l) {
    total += level;
    level *= fanout;
    if (total > (1u << 24)) throw ValidationError("tree shape too large");
  }
  size_ = static_cast<std::uint32_t>(total);
  layer_of_.assign(size_, 0);
  for (std::uint32_t t = 2; t <= size_; ++t) layer_of_[t - 1] = layer_of_[parent(t) - 1] + 1;
}

std::uint32_t TreeShape::level_size(std::uint32_t layer) const noexcept {
  std::uint32_t n = 1;
  for (std::uint32_t l = 0; l < layer; ++l) n *= s_;
  return n;
}

std::uint32_t TreeShape::level_begin(std::uint32_t layer) const noexcept {
  std::uint32_t begin = 1;
  for (std::uint32_t l = 0; l < layer; ++l) begin += level_size(l);
  return begin;
}

std::vector<std::uint32_t> TreeShape::ancestors(std::uint32_t t) const {
  std::vector<std::uint32_t> chain(layer(t));
  for (auto i = chain.size(); i-- > 0;) {
    t = parent(t);
    chain[i] = t;
  }
  return chain;
}

SampledTree sample_tree(const Graph& g, NodeId v, const TreeShape& shape, std::uint64_t seed) {
  if (v >= g.num_nodes()) throw ValidationError("sample: node id out of range");
  const std::uint32_t s = shape.fanout();
  SampledTree tree{shape, std::vector<std::int64_t>(shape.size(), -1)};
  tree.node_ids[0] = v;
  Rng rng(derive_seed(seed, seed_tag("computation-graph"), v));

  std::vector<NodeId> picked;
  const std::uint32_t internal_end = shape.level_begin(shape.depth());
  for (std::uint32_t t = 1; t < internal_end; ++t) {
    const std::int64_t node = tree.node_ids[t - 1];
    if (node < 0) continue;
    const auto nbrs = g.neighbors(static_cast<NodeId>(node));
    const std::size_t deg = nbrs.size();
    picked.clear();
    if (deg <= s) {
      picked.assign(nbrs.begin(), nbrs.end());
    } else {
      // Floyd's algorithm: s distinct indices out of deg.
      std::vector<std::size_t> idx;
      idx.reserve(s);
      for (std::size_t j = deg - s; j < deg; ++j) {
        const std::size_t r = rng.below(j + 1);
        if (std::find(idx.begin(), idx.end(), r) == idx.end()) idx.push_back(r);
        else idx.push_back(j);
      }
      for (const std::size_t i : idx) picked.push_back(nbrs[i]);
    }
    std::sort(picked.begin(), picked.end());
    const std::uint32_t child = shape.first_child(t);
    for (std::size_t i = 0; i < picked.size(); ++i) tree.node_ids[child - 1 + i] = picked[i];
  }
  return tree;
}

EncodedComputationGraph encode_tree(const Graph& g, const SampledTree& tree) {
  EncodedComputationGraph cg;
  cg.shape = tree.shape;
  const auto d = static_cast<Eigen::Index>(g.feature_dim());
  cg.rows = FeatureMatrix::Zero(tree.shape.size(), d);
  for (std::uint32_t t = 1; t <= tree.shape.size(); ++t) {
    const std::int64_t node = tree.node_ids[t - 1];
    if (node >= 0) cg.rows.row(t - 1) = g.features().row(node);
  }
  const auto root = static_cast<NodeId>(tree.node_ids[0]);
  cg.root_label = g.label(root);
  cg.source_node = root;
  return cg;
}

EncodedComputationGraph sample_computation_graph(const Graph& g, NodeId v, std::uint32_t s,
                                                 std::uint32_t L, std::uint64_t seed) {
  const TreeShape shape(s, L);
  return encode_tree(g, sample_tree(g, v, shape, seed));
}

std::vector<EncodedComputationGraph> sample_computation_graphs(const Graph& g, const TreeShape& shape,
                                                               std::uint64_t seed,
                                                               std::span<const NodeId> nodes) {
  std::vector<EncodedComputationGraph> out;
  if (nodes.empty()) {
    out.reserve(g.num_nodes());
    for (NodeId v = 0; v < g.num_nodes(); ++v) out.push_back(encode_tree(g, sample_tree(g, v, shape, seed)));
  } else {
    out.reserve(nodes.size());
    for (const NodeId v : nodes) out.push_back(encode_tree(g, sample_tree(g, v, shape, seed)));
  }
  return out;
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> tree_adjacency(const TreeShape& shape) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
  edges.reserve(shape.size() - 1);
  for (std::uint32_t t = 2; t <= shape.size(); ++t) edges.emplace_back(shape.parent(t), t);
  return edges;
}

FlatRows flatten_bfs(const EncodedComputationGraph& cg) {
  FlatRows flat{cg.rows, std::vector<std::uint32_t>(cg.shape.size())};
  for (std::uint32_t t = 1; t <= cg.shape.size(); ++t) flat.layers[t - 1] = cg.shape.layer(t);
  return flat;
}

EncodedComputationGraph unflatten_bfs(const FlatRows& flat, const TreeShape& shape, Label root_label) {
  if (flat.rows.rows() != shape.size()) throw ValidationError("unflatten: row count does not match shape");
  return {shape, flat.rows, root_label, std::nullopt};
}

std::vector<std::vector<std::uint32_t>> leaf_paths(const TreeShape& shape) {
  std::vector<std::vector<std::uint32_t>> paths;
  paths.reserve(shape.num_leaves());
  const std::uint32_t first_leaf = shape.level_begin(shape.depth());
  for (std::uint32_t leaf = first_leaf; leaf <= shape.size(); ++leaf) {
    auto chain = shape.ancestors(leaf);
    chain.push_back(leaf);
    paths.push_back(std::move(chain));
  }
  return paths;
}

std::vector<PathSequence> split_paths(const EncodedComputationGraph& cg) {
  std::vector<PathSequence> out;
  for (auto& positions : leaf_paths(cg.shape)) {
    PathSequence p;
    p.tokens.reserve(positions.size());
    for (const auto t : positions) p.tokens.push_back(static_cast<std::int32_t>(t - 1));
    p.positions = std::move(positions);
    p.root_label = cg.root_label;
    out.push_back(std::move(p));
  }
  return out;
}

bool is_null_row(const FeatureMatrix& rows, Eigen::Index r) noexcept {
  for (Eigen::Index j = 0; j < rows.cols(); ++j) {
    if (rows(r, j) != 0.0f) return false;
  }
  return true;
}

void write_cgs(const std::filesystem::path& path, const TreeShape& shape, std::size_t feature_dim,
               std::span<const EncodedComputationGraph> graphs) {
  io::BinaryWriter w(path);
  w.magic("CGCG");
  w.u32(kCgsVersion);
  w.u32(shape.fanout());
  w.u32(shape.depth());
  w.u32(static_cast<std::uint32_t>(feature_dim));
  w.u64(graphs.size());
  for (const auto& cg : graphs) {
    if (!(cg.shape == shape) || static_cast<std::size_t>(cg.rows.cols()) != feature_dim) {
      throw ValidationError("write_cgs: graph shape does not match file header");
    }
    w.u32(static_cast<std::uint32_t>(cg.root_label));
    w.i64(cg.source_node ? static_cast<std::int64_t>(*cg.source_node) : -1);
    w.f32s({cg.rows.data(), static_cast<std::size_t>(cg.rows.size())});
  }
  w.close();
}

CgsFile read_cgs(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("CGCG");
  const auto version = r.u32();
  if (version != kCgsVersion) throw ValidationError("cgs.bin: unsupported version " + std::to_string(version));
  const auto s = r.u32();
  const auto L = r.u32();
  CgsFile file;
  file.shape = TreeShape(s, L);
  file.feature_dim = r.u32();
  const auto count = r.u64();
  file.graphs.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    EncodedComputationGraph cg;
    cg.shape = file.shape;
    cg.root_label = static_cast<Label>(r.u32());
    const auto src = r.i64();
    if (src >= 0) cg.source_node = static_cast<NodeId>(src);
    cg.rows.resize(file.shape.size(), static_cast<Eigen::Index>(file.feature_dim));
    r.f32s({cg.rows.data(), static_cast<std::size_t>(cg.rows.size())});
    file.graphs.push_back(std::move(cg));
  }
  return file;
}

}  // namespace cgt
