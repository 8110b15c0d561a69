#include "cgt/graph.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>

#include "cgt/binary_io.hpp"
#include "cgt/error.hpp"
#include "cgt/random.hpp"

namespace cgt {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view text, const std::string& where) {
  text = trim(text);
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ValidationError(where + ": cannot parse '" + std::string(text) + "'");
  }
  return value;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("missing file: " + path.string());
  return in;
}

}  // namespace

Graph Graph::from_edges(std::size_t n, std::span<const std::pair<NodeId, NodeId>> edges,
                        FeatureMatrix features, std::vector<Label> labels,
                        std::optional<int> num_classes) {
  if (static_cast<std::size_t>(features.rows()) != n) {
    throw ValidationError("feature row count " + std::to_string(features.rows()) +
                          " != node count " + std::to_string(n));
  }
  if (labels.size() != n) {
    throw ValidationError("label count " + std::to_string(labels.size()) + " != node count " +
                          std::to_string(n));
  }
  int classes = 0;
  for (const Label y : labels) {
    if (y < 0) throw ValidationError("negative label " + std::to_string(y));
    classes = std::max(classes, y + 1);
  }
  if (num_classes) {
    if (classes > *num_classes) {
      throw ValidationError("label out of range: " + std::to_string(classes - 1) +
                            " >= " + std::to_string(*num_classes));
    }
    classes = *num_classes;
  }

  Graph g;
  std::vector<std::pair<NodeId, NodeId>> directed;
  directed.reserve(edges.size() * 2);
  for (const auto& [u, v] : edges) {
    if (u >= n || v >= n) {
      throw ValidationError("edge (" + std::to_string(u) + ", " + std::to_string(v) +
                            ") references node >= n = " + std::to_string(n));
    }
    if (u == v) {
      ++g.dropped_self_loops_;
      continue;
    }
    directed.emplace_back(u, v);
    directed.emplace_back(v, u);
  }
  std::sort(directed.begin(), directed.end());
  directed.erase(std::unique(directed.begin(), directed.end()), directed.end());

  g.offsets_.assign(n + 1, 0);
  for (const auto& e : directed) ++g.offsets_[e.first + 1];
  std::partial_sum(g.offsets_.begin(), g.offsets_.end(), g.offsets_.begin());
  g.neighbors_.resize(directed.size());
  for (std::size_t i = 0; i < directed.size(); ++i) g.neighbors_[i] = directed[i].second;

  g.features_ = std::move(features);
  g.labels_ = std::move(labels);
  g.num_classes_ = classes;
  return g;
}

bool Graph::has_edge(NodeId u, NodeId v) const noexcept {
  const auto row = neighbors(u);
  return std::binary_search(row.begin(), row.end(), v);
}

std::vector<std::pair<NodeId, NodeId>> Graph::edge_list() const {
  std::vector<std::pair<NodeId, NodeId>> out;
  out.reserve(num_edges());
  for (NodeId u = 0; u < num_nodes(); ++u) {
    for (const NodeId v : neighbors(u)) {
      if (u < v) out.emplace_back(u, v);
    }
  }
  return out;
}

bool operator==(const Graph& a, const Graph& b) {
  if (a.offsets_ != b.offsets_ || a.neighbors_ != b.neighbors_ || a.labels_ != b.labels_ ||
      a.num_classes_ != b.num_classes_ || a.features_.rows() != b.features_.rows() ||
      a.features_.cols() != b.features_.cols()) {
    return false;
  }
  // Bitwise, so -0.0 != 0.0 and NaN payloads compare as stored.
  return std::equal(a.features_.data(), a.features_.data() + a.features_.size(), b.features_.data(),
                    [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
}

Graph load_graph(const std::filesystem::path& dir) {
  const auto features_path = dir / "features.csv";
  const auto labels_path = dir / "labels.tsv";
  const auto edges_path = dir / "edges.tsv";

  std::vector<std::vector<float>> rows;
  {
    auto in = open_input(features_path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto body = trim(line);
      if (body.empty()) continue;
      std::vector<float> row;
      std::size_t start = 0;
      const std::string where = features_path.string() + ":" + std::to_string(line_no);
      while (true) {
        const auto comma = body.find(',', start);
        row.push_back(parse_number<float>(body.substr(start, comma - start), where));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
      }
      if (!rows.empty() && row.size() != rows.front().size()) {
        throw ValidationError(where + ": ragged feature row (" + std::to_string(row.size()) +
                              " columns, expected " + std::to_string(rows.front().size()) + ")");
      }
      rows.push_back(std::move(row));
    }
  }
  const std::size_t n = rows.size();
  const std::size_t d = n == 0 ? 0 : rows.front().size();
  FeatureMatrix features(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) features(i, j) = rows[i][j];
  }

  std::vector<Label> labels;
  {
    auto in = open_input(labels_path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto body = trim(line);
      if (body.empty()) continue;
      labels.push_back(parse_number<Label>(body, labels_path.string() + ":" + std::to_string(line_no)));
    }
  }

  std::vector<std::pair<NodeId, NodeId>> edges;
  {
    auto in = open_input(edges_path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      auto body = trim(line);
      if (body.empty() || body.front() == '#') continue;
      const auto sep = body.find_first_of("\t ");
      const std::string where = edges_path.string() + ":" + std::to_string(line_no);
      if (sep == std::string_view::npos) throw ValidationError(where + ": expected 'u<TAB>v'");
      const auto u = parse_number<std::int64_t>(body.substr(0, sep), where);
      const auto v = parse_number<std::int64_t>(body.substr(sep + 1), where);
      if (u < 0 || v < 0 || static_cast<std::size_t>(u) >= n || static_cast<std::size_t>(v) >= n) {
        throw ValidationError(where + ": node index out of range [0, " + std::to_string(n) + ")");
      }
      edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
    }
  }
  return Graph::from_edges(n, edges, std::move(features), std::move(labels));
}

void save_graph(const Graph& g, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "edges.tsv");
    for (const auto& [u, v] : g.edge_list()) out << u << '\t' << v << '\n';
    if (!out) throw ValidationError("write failed: " + (dir / "edges.tsv").string());
  }
  {
    std::ofstream out(dir / "features.csv");
    const auto& x = g.features();
    std::string line;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      line.clear();
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        if (j > 0) line.push_back(',');
        line += io::format_shortest(x(i, j));
      }
      out << line << '\n';
    }
    if (!out) throw ValidationError("write failed: " + (dir / "features.csv").string());
  }
  {
    std::ofstream out(dir / "labels.tsv");
    for (const Label y : g.labels()) out << y << '\n';
    if (!out) throw ValidationError("write failed: " + (dir / "labels.tsv").string());
  }
}

NoisyEdgesResult add_noisy_edges(const Graph& g, std::size_t num_per_node, std::uint64_t seed) {
  const std::size_t n = g.num_nodes();
  if (num_per_node == 0) return {g, 0};

  std::vector<std::unordered_set<NodeId>> adjacency(n);
  for (NodeId v = 0; v < n; ++v) {
    const auto row = g.neighbors(v);
    adjacency[v].insert(row.begin(), row.end());
  }
  auto edges = g.edge_list();
  std::size_t shortfall = 0;
  Rng rng(derive_seed(seed, seed_tag("noisy-edges")));

  for (NodeId v = 0; v < n; ++v) {
    const std::size_t available = n - 1 - adjacency[v].size();
    std::size_t want = num_per_node;
    if (want > available) {
      shortfall += want - available;
      want = available;
    }
    if (want == 0) continue;
    std::vector<NodeId> picked;
    if (available <= 4 * want) {
      // Dense neighborhood: enumerate candidates and take a random prefix.
      std::vector<NodeId> candidates;
      candidates.reserve(available);
      for (NodeId u = 0; u < n; ++u) {
        if (u != v && !adjacency[v].contains(u)) candidates.push_back(u);
      }
      rng.shuffle(candidates.begin(), candidates.end());
      picked.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(want));
    } else {
      while (picked.size() < want) {
        const auto u = static_cast<NodeId>(rng.below(n));
        if (u == v || adjacency[v].contains(u)) continue;
        if (std::find(picked.begin(), picked.end(), u) != picked.end()) continue;
        picked.push_back(u);
      }
    }
    for (const NodeId u : picked) {
      adjacency[v].insert(u);
      adjacency[u].insert(v);
      edges.emplace_back(std::min(u, v), std::max(u, v));
    }
  }
  Graph out = Graph::from_edges(n, edges, g.features(), g.labels(), g.num_classes());
  return {std::move(out), shortfall};
}

PprVector ppr(const Graph& g, double alpha, std::span<const NodeId> seeds, PprOptions options) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ValidationError("ppr: alpha must be in (0, 1]");
  if (seeds.empty()) throw ValidationError("ppr: empty seed set");
  const std::size_t n = g.num_nodes();

  std::vector<double> inv_sqrt_deg(n);
  for (NodeId v = 0; v < n; ++v) inv_sqrt_deg[v] = 1.0 / std::sqrt(static_cast<double>(g.degree(v) + 1));

  std::vector<double> restart(n, 0.0);
  for (const NodeId s : seeds) {
    if (s >= n) throw ValidationError("ppr: seed node out of range");
    restart[s] = 1.0;
  }
  std::size_t distinct = 0;
  for (const double r : restart) distinct += r > 0.0 ? 1 : 0;
  for (auto& r : restart) r /= static_cast<double>(distinct);

  PprVector result;
  result.alpha = alpha;
  std::vector<double> x = restart;
  std::vector<double> next(n);
  const double factor = alpha < 1.0 ? (1.0 - alpha) / alpha : 0.0;
  double bound = 0.0;
  std::size_t it = 0;
  for (; it < options.max_iterations; ++it) {
    for (NodeId v = 0; v < n; ++v) {
      double acc = x[v] * inv_sqrt_deg[v];  // self-loop
      for (const NodeId u : g.neighbors(v)) acc += x[u] * inv_sqrt_deg[u];
      next[v] = alpha * restart[v] + (1.0 - alpha) * inv_sqrt_deg[v] * acc;
    }
    double diff = 0.0;
    for (std::size_t v = 0; v < n; ++v) diff += (next[v] - x[v]) * (next[v] - x[v]);
    x.swap(next);
    bound = std::sqrt(diff) * factor;
    if (bound <= options.tolerance) break;
  }
  result.iterations = it + 1;
  result.residual = bound;
  if (bound > options.tolerance) {
    throw NumericalError("ppr: power iteration did not converge", bound);
  }
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  for (auto& v : x) v /= total;
  result.scores = std::move(x);
  return result;
}

namespace {

void fill_valid_test(std::vector<NodeId>& remainder, std::size_t n, const SplitFractions& f, Rng& rng,
                     SplitSpec& split) {
  rng.shuffle(remainder.begin(), remainder.end());
  const auto n_valid = std::min(remainder.size(), static_cast<std::size_t>(std::llround(f.valid * static_cast<double>(n))));
  const auto n_test =
      std::min(remainder.size() - n_valid, static_cast<std::size_t>(std::llround(f.test * static_cast<double>(n))));
  split.valid.assign(remainder.begin(), remainder.begin() + static_cast<std::ptrdiff_t>(n_valid));
  split.test.assign(remainder.begin() + static_cast<std::ptrdiff_t>(n_valid),
                    remainder.begin() + static_cast<std::ptrdiff_t>(n_valid + n_test));
  std::sort(split.valid.begin(), split.valid.end());
  std::sort(split.test.begin(), split.test.end());
}

void check_fractions(const SplitFractions& f) {
  if (!(f.train > 0.0 && f.train < 1.0)) throw ValidationError("train fraction must be in (0, 1)");
  if (f.valid < 0.0 || f.test < 0.0 || f.train + f.valid + f.test > 1.0 + 1e-9) {
    throw ValidationError("split fractions must be nonnegative and sum to at most 1");
  }
}

}  // namespace

SplitSpec uniform_split(std::size_t n, SplitFractions fractions, std::uint64_t seed) {
  check_fractions(fractions);
  Rng rng(derive_seed(seed, seed_tag("split")));
  std::vector<NodeId> order(n);
  std::iota(order.begin(), order.end(), NodeId{0});
  rng.shuffle(order.begin(), order.end());
  SplitSpec split;
  split.seed = seed;
  const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(fractions.train * static_cast<double>(n))));
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::sort(split.train.begin(), split.train.end());
  std::vector<NodeId> rest(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  fill_valid_test(rest, n, fractions, rng, split);
  return split;
}

SplitSpec biased_split(const Graph& g, std::optional<double> alpha, BiasedSplitOptions options,
                       std::uint64_t seed) {
  check_fractions(options.fractions);
  if (!alpha) return uniform_split(g.num_nodes(), options.fractions, seed);

  const std::size_t n = g.num_nodes();
  Rng rng(derive_seed(seed, seed_tag("biased-split")));
  std::vector<std::vector<NodeId>> by_class(static_cast<std::size_t>(g.num_classes()));
  for (NodeId v = 0; v < n; ++v) by_class[static_cast<std::size_t>(g.label(v))].push_back(v);

  std::vector<NodeId> seeds;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) throw ValidationError("biased_split: class " + std::to_string(c) + " has no nodes");
    rng.shuffle(members.begin(), members.end());
    const auto take = std::min(options.seeds_per_class, members.size());
    seeds.insert(seeds.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
  }

  const auto scores = ppr(g, *alpha, seeds, options.ppr).scores;
  std::vector<bool> is_seed(n, false);
  for (const NodeId s : seeds) is_seed[s] = true;

  std::vector<NodeId> candidates;
  candidates.reserve(n);
  for (NodeId v = 0; v < n; ++v) {
    if (!is_seed[v]) candidates.push_back(v);
  }
  rng.shuffle(candidates.begin(), candidates.end());
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](NodeId a, NodeId b) { return scores[a] > scores[b]; });

  SplitSpec split;
  split.seed = seed;
  const auto n_train = std::min(
      n, std::max(seeds.size(), static_cast<std::size_t>(std::llround(options.fractions.train * static_cast<double>(n)))));
  split.train = seeds;
  const std::size_t fill = n_train - seeds.size();
  split.train.insert(split.train.end(), candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(fill));
  std::sort(split.train.begin(), split.train.end());
  std::vector<NodeId> rest(candidates.begin() + static_cast<std::ptrdiff_t>(fill), candidates.end());
  fill_valid_test(rest, n, options.fractions, rng, split);
  return split;
}

void save_split(const SplitSpec& split, const std::filesystem::path& path) {
  std::ofstream out(path);
  out << "# seed=" << split.seed << '\n';
  for (const NodeId v : split.train) out << "train\t" << v << '\n';
  for (const NodeId v : split.valid) out << "valid\t" << v << '\n';
  for (const NodeId v : split.test) out << "test\t" << v << '\n';
  if (!out) throw ValidationError("write failed: " + path.string());
}

SplitSpec load_split(const std::filesystem::path& path) {
  auto in = open_input(path);
  SplitSpec split;
  std::string line;
  while (std::getline(in, line)) {
    auto body = trim(line);
    if (body.empty()) continue;
    if (body.starts_with("# seed=")) {
      split.seed = parse_number<std::uint64_t>(body.substr(7), path.string());
      continue;
    }
    const auto tab = body.find('\t');
    if (tab == std::string_view::npos) throw ValidationError(path.string() + ": malformed split line");
    const auto kind = body.substr(0, tab);
    const auto v = parse_number<NodeId>(body.substr(tab + 1), path.string());
    if (kind == "train") split.train.push_back(v);
    else if (kind == "valid") split.valid.push_back(v);
    else if (kind == "test") split.test.push_back(v);
    else throw ValidationError(path.string() + ": unknown split set '" + std::string(kind) + "'");
  }
  return split;
}

Graph stochastic_block_model(const SbmOptions& o, std::uint64_t seed) {
  if (o.num_classes < 1 || o.num_nodes == 0) throw ValidationError("sbm: empty graph");
  Rng rng(derive_seed(seed, seed_tag("sbm")));
  const std::size_t n = o.num_nodes;
  const auto d = static_cast<Eigen::Index>(o.feature_dim);

  std::vector<Label> labels(n);
  for (std::size_t v = 0; v < n; ++v) labels[v] = static_cast<Label>(v % static_cast<std::size_t>(o.num_classes));

  // Class centroids: random unit directions scaled to the requested separation.
  FeatureMatrix centroids(o.num_classes, d);
  for (int c = 0; c < o.num_classes; ++c) {
    double norm = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      centroids(c, j) = static_cast<float>(rng.normal());
      norm += static_cast<double>(centroids(c, j)) * centroids(c, j);
    }
    const double scale = o.class_separation / std::max(std::sqrt(norm), 1e-12);
    centroids.row(c) *= static_cast<float>(scale);
  }
  FeatureMatrix features(static_cast<Eigen::Index>(n), d);
  for (std::size_t v = 0; v < n; ++v) {
    for (Eigen::Index j = 0; j < d; ++j) {
      features(static_cast<Eigen::Index>(v), j) =
          centroids(labels[v], j) + static_cast<float>(o.feature_noise * rng.normal());
    }
  }

  // Geometric skipping over the upper triangle, separately for the two
  // probabilities, keeps generation O(n + |E|) per block pass.
  std::vector<std::pair<NodeId, NodeId>> edges;
  auto sample_pairs = [&](double p, bool same_class) {
    if (p <= 0.0) return;
    const double log_q = std::log1p(-std::min(p, 1.0 - 1e-15));
    for (std::size_t u = 0; u < n; ++u) {
      std::size_t v = u;
      while (true) {
        const double r = 1.0 - rng.uniform();
        const auto skip = p >= 1.0 ? 0 : static_cast<std::size_t>(std::floor(std::log(r) / log_q));
        v += skip + 1;
        if (v >= n) break;
        if ((labels[u] == labels[v]) == same_class) {
          edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
        }
      }
    }
  };
  sample_pairs(o.p_in, true);
  sample_pairs(o.p_out, false);
  return Graph::from_edges(n, edges, std::move(features), std::move(labels), o.num_classes);
}

}  // namespace cgt
