#include "cgt/quantizer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string_view>
#include <unordered_set>

#include "cgt/binary_io.hpp"
#include "cgt/error.hpp"
#include "cgt/privacy.hpp"
#include "cgt/random.hpp"

namespace cgt {
namespace {

constexpr std::uint32_t kQuantizerVersion = 1;

double squared_distance(const float* a, const float* b, Eigen::Index d) noexcept {
  double acc = 0.0;
  for (Eigen::Index j = 0; j < d; ++j) {
    const double diff = static_cast<double>(a[j]) - static_cast<double>(b[j]);
    acc += diff * diff;
  }
  return acc;
}

std::uint32_t nearest_row(const FeatureMatrix& table, const float* row) noexcept {
  std::uint32_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  const auto d = table.cols();
  for (Eigen::Index c = 0; c < table.rows(); ++c) {
    const double dist = squared_distance(table.row(c).data(), row, d);
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<std::uint32_t>(c);
    }
  }
  return best;
}

struct Noise {
  double sum_sigma = 0.0;
  double count_sigma = 0.0;
  Rng* rng = nullptr;
};

// Nearest-center assignment followed by min-size repair.
std::vector<std::uint32_t> constrained_assign(const FeatureMatrix& x, std::span<const Eigen::Index> rows,
                                              const FeatureMatrix& centers, std::uint32_t k_min) {
  const auto m = static_cast<std::uint32_t>(centers.rows());
  const auto d = x.cols();
  std::vector<std::uint32_t> assign(rows.size());
  std::vector<std::size_t> sizes(m, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    assign[i] = nearest_row(centers, x.row(rows[i]).data());
    ++sizes[assign[i]];
  }
  if (k_min <= 1 && std::none_of(sizes.begin(), sizes.end(), [](std::size_t s) { return s == 0; })) {
    return assign;
  }
  const std::size_t floor_size = std::max<std::uint32_t>(k_min, 1);
  std::vector<std::pair<double, std::size_t>> order(rows.size());
  for (std::uint32_t c = 0; c < m; ++c) {
    if (sizes[c] >= floor_size) continue;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      order[i] = {squared_distance(x.row(rows[i]).data(), centers.row(c).data(), d), i};
    }
    std::sort(order.begin(), order.end());
    for (const auto& [dist, i] : order) {
      if (sizes[c] >= floor_size) break;
      const std::uint32_t from = assign[i];
      if (from == c || sizes[from] <= floor_size) continue;
      --sizes[from];
      ++sizes[c];
      assign[i] = c;
    }
    if (sizes[c] < floor_size) throw ValidationError("k-means: minimum cluster size infeasible");
  }
  return assign;
}

double objective(const FeatureMatrix& x, std::span<const Eigen::Index> rows, const FeatureMatrix& centers,
                 std::span<const std::uint32_t> assign) {
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    total += squared_distance(x.row(rows[i]).data(), centers.row(assign[i]).data(), x.cols());
  }
  return total;
}

// Cluster means from an assignment; empty (or noisily empty) clusters keep
// their previous center.
FeatureMatrix update_centers(const FeatureMatrix& x, std::span<const Eigen::Index> rows,
                             std::span<const std::uint32_t> assign, const FeatureMatrix& previous,
                             const Noise& noise) {
  const auto m = previous.rows();
  const auto d = x.cols();
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(m, d);
  std::vector<double> counts(static_cast<std::size_t>(m), 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Eigen::Index j = 0; j < d; ++j) sums(assign[i], j) += static_cast<double>(x(rows[i], j));
    counts[assign[i]] += 1.0;
  }
  if (noise.sum_sigma > 0.0 || noise.count_sigma > 0.0) {
    for (Eigen::Index c = 0; c < m; ++c) {
      if (noise.count_sigma > 0.0) counts[c] += noise.count_sigma * noise.rng->normal();
      if (noise.sum_sigma > 0.0) {
        for (Eigen::Index j = 0; j < d; ++j) sums(c, j) += noise.sum_sigma * noise.rng->normal();
      }
    }
  }
  FeatureMatrix out = previous;
  for (Eigen::Index c = 0; c < m; ++c) {
    if (counts[c] < 1.0) continue;
    for (Eigen::Index j = 0; j < d; ++j) out(c, j) = static_cast<float>(sums(c, j) / counts[c]);
  }
  return out;
}

std::size_t count_distinct_rows(const FeatureMatrix& x, std::span<const Eigen::Index> rows, std::size_t cap) {
  std::unordered_set<std::string> seen;
  const auto bytes = static_cast<std::size_t>(x.cols()) * sizeof(float);
  for (const auto r : rows) {
    seen.emplace(reinterpret_cast<const char*>(x.row(r).data()), bytes);
    if (seen.size() >= cap) break;
  }
  return seen.size();
}

FeatureMatrix kmeans_plus_plus(const FeatureMatrix& x, std::span<const Eigen::Index> rows, std::uint32_t m,
                               Rng& rng) {
  FeatureMatrix centers(m, x.cols());
  std::vector<double> best(rows.size(), std::numeric_limits<double>::infinity());
  std::size_t pick = rng.below(rows.size());
  for (std::uint32_t c = 0; c < m; ++c) {
    centers.row(c) = x.row(rows[pick]);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      best[i] = std::min(best[i], squared_distance(x.row(rows[i]).data(), centers.row(c).data(), x.cols()));
    }
    if (c + 1 < m) pick = rng.categorical(std::span<const double>(best));
  }
  return centers;
}

struct FitParams {
  std::uint32_t clusters;
  std::uint32_t k_min;
  std::uint64_t n_fit;
  std::uint32_t iterations;
  double sum_sigma = 0.0;
  double count_sigma = 0.0;
};

QuantizerModel fit_impl(const FeatureMatrix& x, const FitParams& p, std::uint64_t seed) {
  const auto n = static_cast<std::uint64_t>(x.rows());
  const std::uint32_t m = p.clusters;
  if (m < 1) throw ValidationError("k-means: need at least one cluster");
  if (p.iterations < 1) throw ValidationError("k-means: need at least one iteration");
  if (static_cast<std::uint64_t>(m) * std::max<std::uint32_t>(p.k_min, 1) > n) {
    throw ValidationError("k-means: infeasible, m * k_min = " +
                          std::to_string(static_cast<std::uint64_t>(m) * p.k_min) + " > n = " + std::to_string(n));
  }

  std::vector<Eigen::Index> all(n);
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  std::vector<Eigen::Index> sample = all;
  std::uint32_t k_fit = std::max<std::uint32_t>(p.k_min, 1);
  if (p.n_fit > 0 && p.n_fit < n) {
    Rng sub_rng(derive_seed(seed, seed_tag("kmeans-subsample")));
    sub_rng.shuffle(sample.begin(), sample.end());
    sample.resize(p.n_fit);
    std::sort(sample.begin(), sample.end());
    k_fit = std::max<std::uint64_t>(1, p.k_min * p.n_fit / n);
    if (static_cast<std::uint64_t>(m) * k_fit > p.n_fit) {
      throw ValidationError("k-means: fitting sample too small for m clusters");
    }
  }
  if (count_distinct_rows(x, sample, m) < m) {
    throw ValidationError("k-means: fewer distinct rows than clusters (duplicate-center collapse)");
  }

  Rng init_rng(derive_seed(seed, seed_tag("kmeans-init")));
  Rng noise_rng(derive_seed(seed, seed_tag("dp-kmeans-noise")));
  const Noise noise{p.sum_sigma, p.count_sigma, &noise_rng};

  QuantizerModel q;
  q.centers = kmeans_plus_plus(x, sample, m, init_rng);
  for (std::uint32_t it = 0; it + 1 < p.iterations; ++it) {
    const auto assign = constrained_assign(x, sample, q.centers, k_fit);
    q.objective_trace.push_back(objective(x, sample, q.centers, assign));
    q.centers = update_centers(x, sample, assign, q.centers, noise);
  }
  q.assignment = constrained_assign(x, all, q.centers, std::max<std::uint32_t>(p.k_min, 1));
  q.means = update_centers(x, all, q.assignment, q.centers, noise);
  q.sizes.assign(m, 0);
  for (const auto c : q.assignment) ++q.sizes[c];
  q.k_min = std::max<std::uint32_t>(p.k_min, 1);
  q.n_fit = sample.size();
  return q;
}

}  // namespace

std::string PrivacyMode::describe() const {
  switch (kind) {
    case Kind::kNone: return "none";
    case Kind::kAnonymous: return "k_anonymous(k=" + std::to_string(k) + ")";
    case Kind::kDifferential: {
      std::ostringstream os;
      os << "dp(eps=" << eps << ", delta=" << delta << ")";
      return os.str();
    }
  }
  return "unknown";
}

QuantizerModel fit_kmeans_min_size(const FeatureMatrix& x, const KMeansOptions& options, std::uint64_t seed) {
  auto q = fit_impl(x, {options.clusters, options.k_min, options.n_fit, options.iterations}, seed);
  q.privacy = options.k_min > 1 ? PrivacyMode::k_anonymous(options.k_min) : PrivacyMode::none();
  return q;
}

QuantizerModel fit_dp_kmeans(const FeatureMatrix& x, const DpKMeansOptions& options, std::uint64_t seed) {
  if (options.iterations < 1) throw ValidationError("dp k-means: need at least one iteration");
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (x.row(r).cast<double>().norm() > options.clip_norm * (1.0 + 1e-6)) {
      throw ValidationError("dp k-means: row " + std::to_string(r) + " exceeds the clip norm; clip rows first");
    }
  }
  const double releases = 2.0 * options.iterations;
  const double eps_release = options.eps / releases;
  const double delta_release = options.delta / releases;
  FitParams p{options.clusters, 1, 0, options.iterations};
  p.sum_sigma = privacy::gaussian_sigma(eps_release, delta_release, options.clip_norm);
  p.count_sigma = privacy::gaussian_sigma(eps_release, delta_release, 1.0);
  auto q = fit_impl(x, p, seed);
  q.privacy = std::isinf(options.eps) ? PrivacyMode::none() : PrivacyMode::differential(options.eps, options.delta);
  return q;
}

FeatureMatrix clip_rows(const FeatureMatrix& x, double max_norm) {
  FeatureMatrix out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double norm = out.row(r).cast<double>().norm();
    if (norm > max_norm) out.row(r) *= static_cast<float>(max_norm / norm);
  }
  return out;
}

std::uint32_t nearest_cluster(const QuantizerModel& q, std::span<const float> row) {
  return nearest_row(q.means, row.data());
}

TokenSequence quantize(const EncodedComputationGraph& cg, const QuantizerModel& q) {
  if (static_cast<std::size_t>(cg.rows.cols()) != q.feature_dim()) {
    throw ValidationError("quantize: feature dimension mismatch");
  }
  TokenSequence ts;
  ts.root_label = cg.root_label;
  ts.tokens.resize(static_cast<std::size_t>(cg.rows.rows()));
  for (Eigen::Index r = 0; r < cg.rows.rows(); ++r) {
    ts.tokens[r] = is_null_row(cg.rows, r) ? q.null_token()
                                           : static_cast<std::int32_t>(nearest_row(q.means, cg.rows.row(r).data()));
  }
  return ts;
}

EncodedComputationGraph dequantize(const TokenSequence& ts, const QuantizerModel& q, const TreeShape& shape) {
  if (ts.tokens.size() != shape.size()) throw ValidationError("dequantize: sequence length does not match shape");
  EncodedComputationGraph cg;
  cg.shape = shape;
  cg.root_label = ts.root_label;
  cg.rows = FeatureMatrix::Zero(shape.size(), q.means.cols());
  for (std::size_t t = 0; t < ts.tokens.size(); ++t) {
    const auto id = ts.tokens[t];
    if (id < 0 || id > q.null_token()) throw ValidationError("dequantize: token " + std::to_string(id) + " out of range");
    if (id != q.null_token()) cg.rows.row(static_cast<Eigen::Index>(t)) = q.means.row(id);
  }
  return cg;
}

std::vector<PathSequence> split_paths(const TokenSequence& ts, const TreeShape& shape) {
  if (ts.tokens.size() != shape.size()) throw ValidationError("split_paths: sequence length does not match shape");
  std::vector<PathSequence> out;
  for (auto& positions : leaf_paths(shape)) {
    PathSequence p;
    for (const auto t : positions) p.tokens.push_back(ts.tokens[t - 1]);
    p.positions = std::move(positions);
    p.root_label = ts.root_label;
    out.push_back(std::move(p));
  }
  return out;
}

Eigen::MatrixXd cluster_edge_distribution(const Graph& g, std::span<const std::uint32_t> node_to_cluster,
                                          std::uint32_t clusters) {
  if (node_to_cluster.size() != g.num_nodes()) throw ValidationError("cluster_edge_distribution: assignment size");
  Eigen::MatrixXd dist = Eigen::MatrixXd::Zero(clusters, clusters);
  std::vector<bool> nonempty(clusters, false);
  for (NodeId v = 0; v < g.num_nodes(); ++v) {
    nonempty[node_to_cluster[v]] = true;
    for (const NodeId u : g.neighbors(v)) dist(node_to_cluster[v], node_to_cluster[u]) += 1.0;
  }
  const auto live = static_cast<double>(std::count(nonempty.begin(), nonempty.end(), true));
  for (std::uint32_t c = 0; c < clusters; ++c) {
    const double total = dist.row(c).sum();
    if (total > 0.0) {
      dist.row(c) /= total;
    } else {
      for (std::uint32_t c2 = 0; c2 < clusters; ++c2) dist(c, c2) = nonempty[c2] ? 1.0 / live : 0.0;
    }
  }
  return dist;
}

MaterializedGraph materialize_graph(const QuantizerModel& q, const Eigen::MatrixXd& edge_dist,
                                    std::span<const std::uint32_t> node_to_cluster, std::uint32_t s,
                                    std::uint64_t seed, std::span<const Label> labels) {
  const std::uint32_t m = q.num_clusters();
  const std::size_t n = node_to_cluster.size();
  if (edge_dist.rows() != m || edge_dist.cols() != m) throw ValidationError("materialize: edge_dist must be m x m");
  if (!labels.empty() && labels.size() != n) throw ValidationError("materialize: label count mismatch");

  std::vector<std::vector<NodeId>> members(m);
  for (std::size_t v = 0; v < n; ++v) {
    if (node_to_cluster[v] >= m) throw ValidationError("materialize: cluster id out of range");
    members[node_to_cluster[v]].push_back(static_cast<NodeId>(v));
  }
  for (std::uint32_t c = 0; c < m; ++c) {
    double total = 0.0;
    for (std::uint32_t c2 = 0; c2 < m; ++c2) {
      const double p = edge_dist(c, c2);
      if (p < 0.0) throw ValidationError("materialize: negative probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ValidationError("materialize: edge_dist rows must sum to 1");
  }

  MaterializedGraph out;
  out.sampled_clusters.resize(n * s);
  FeatureMatrix features(static_cast<Eigen::Index>(n), q.means.cols());
  std::vector<std::pair<NodeId, NodeId>> edges;
  edges.reserve(n * s);
  Rng rng(derive_seed(seed, seed_tag("materialize")));
  std::vector<double> row(m);
  for (std::size_t v = 0; v < n; ++v) {
    const std::uint32_t c = node_to_cluster[v];
    features.row(static_cast<Eigen::Index>(v)) = q.means.row(c);
    for (std::uint32_t c2 = 0; c2 < m; ++c2) row[c2] = edge_dist(c, c2);
    for (std::uint32_t i = 0; i < s; ++i) {
      const auto target = static_cast<std::uint32_t>(rng.categorical(std::span<const double>(row)));
      if (members[target].empty()) {
        throw ValidationError("materialize: empty cluster " + std::to_string(target) + " referenced");
      }
      out.sampled_clusters[v * s + i] = target;
      const NodeId u = members[target][rng.below(members[target].size())];
      edges.emplace_back(static_cast<NodeId>(v), u);
    }
  }
  std::vector<Label> y(labels.begin(), labels.end());
  if (y.empty()) y.assign(n, 0);
  out.graph = Graph::from_edges(n, edges, std::move(features), std::move(y));
  return out;
}

void write_quantizer(const std::filesystem::path& path, const QuantizerModel& q) {
  io::BinaryWriter w(path);
  w.magic("CGQZ");
  w.u32(kQuantizerVersion);
  w.u32(q.num_clusters());
  w.u32(static_cast<std::uint32_t>(q.feature_dim()));
  w.u32(q.k_min);
  w.u8(static_cast<std::uint8_t>(q.privacy.kind));
  w.u32(q.privacy.k);
  w.f64(q.privacy.eps);
  w.f64(q.privacy.delta);
  w.u64(q.n_fit);
  w.f32s({q.centers.data(), static_cast<std::size_t>(q.centers.size())});
  w.f32s({q.means.data(), static_cast<std::size_t>(q.means.size())});
  for (const auto s : q.sizes) w.u64(s);
  w.close();
}

QuantizerModel read_quantizer(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("CGQZ");
  if (const auto v = r.u32(); v != kQuantizerVersion) {
    throw ValidationError("quantizer.bin: unsupported version " + std::to_string(v));
  }
  QuantizerModel q;
  const auto m = r.u32();
  const auto d = r.u32();
  q.k_min = r.u32();
  const auto tag = r.u8();
  if (tag > 2) throw ValidationError("quantizer.bin: unknown privacy tag");
  q.privacy.kind = static_cast<PrivacyMode::Kind>(tag);
  q.privacy.k = r.u32();
  q.privacy.eps = r.f64();
  q.privacy.delta = r.f64();
  q.n_fit = r.u64();
  q.centers.resize(m, d);
  q.means.resize(m, d);
  r.f32s({q.centers.data(), static_cast<std::size_t>(q.centers.size())});
  r.f32s({q.means.data(), static_cast<std::size_t>(q.means.size())});
  q.sizes.resize(m);
  for (auto& s : q.sizes) s = r.u64();
  return q;
}

void write_tokens(const std::filesystem::path& path, std::span<const TokenSequence> sequences) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open for writing: " + path.string());
  std::string line;
  for (const auto& ts : sequences) {
    line = std::to_string(ts.root_label);
    line.push_back('\t');
    for (std::size_t i = 0; i < ts.tokens.size(); ++i) {
      if (i > 0) line.push_back(',');
      line += std::to_string(ts.tokens[i]);
    }
    out << line << '\n';
  }
  if (!out) throw ValidationError("write failed: " + path.string());
}

std::vector<TokenSequence> read_tokens(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("missing file: " + path.string());
  std::vector<TokenSequence> out;
  std::string line;
  std::size_t line_no = 0;
  auto parse_int = [&](std::string_view text) {
    std::int32_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": bad integer '" + std::string(text) + "'");
    }
    return v;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ValidationError(path.string() + ": expected label<TAB>tokens");
    TokenSequence ts;
    const std::string_view body(line);
    ts.root_label = parse_int(body.substr(0, tab));
    std::size_t start = tab + 1;
    while (start <= body.size()) {
      const auto comma = body.find(',', start);
      ts.tokens.push_back(parse_int(body.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    out.push_back(std::move(ts));
  }
  return out;
}

}  // namespace cgt
