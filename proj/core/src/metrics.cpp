#include "cgt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cgt/binary_io.hpp"
#include "cgt/error.hpp"

namespace cgt {

std::size_t count_zero_vectors(const EncodedComputationGraph& cg) {
  std::size_t n = 0;
  for (Eigen::Index r = 0; r < cg.rows.rows(); ++r) n += is_null_row(cg.rows, r) ? 1 : 0;
  return n;
}

std::size_t count_duplicate_vectors(const EncodedComputationGraph& cg) {
  const auto d = static_cast<std::size_t>(cg.rows.cols());
  const auto bytes = d * sizeof(float);
  std::vector<Eigen::Index> rows;
  for (Eigen::Index r = 0; r < cg.rows.rows(); ++r) {
    if (!is_null_row(cg.rows, r)) rows.push_back(r);
  }
  // Sorting rows by their bytes groups identical rows together.
  std::sort(rows.begin(), rows.end(), [&](Eigen::Index a, Eigen::Index b) {
    const int c = std::memcmp(cg.rows.row(a).data(), cg.rows.row(b).data(), bytes);
    return c != 0 ? c < 0 : a < b;
  });
  std::size_t dup = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (std::memcmp(cg.rows.row(rows[i - 1]).data(), cg.rows.row(rows[i]).data(), bytes) == 0) ++dup;
  }
  return dup;
}

double wasserstein1(std::span<const double> p, std::span<const double> q) {
  if (p.empty() || q.empty()) throw ValidationError("wasserstein1: empty distribution");
  std::vector<double> a(p.begin(), p.end()), b(q.begin(), q.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // Walk the merged quantile breakpoints i/n and j/m with exact integer
  // arithmetic on the common denominator n*m.
  const std::size_t n = a.size(), m = b.size();
  std::size_t i = 0, j = 0;
  std::uint64_t u = 0;
  const std::uint64_t total = static_cast<std::uint64_t>(n) * m;
  double acc = 0.0;
  while (u < total) {
    const std::uint64_t next_a = static_cast<std::uint64_t>(i + 1) * m;
    const std::uint64_t next_b = static_cast<std::uint64_t>(j + 1) * n;
    const std::uint64_t next = std::min(next_a, next_b);
    acc += static_cast<double>(next - u) * std::abs(a[i] - b[j]);
    u = next;
    if (next == next_a) ++i;
    if (next == next_b) ++j;
  }
  return acc / static_cast<double>(total);
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("pearson: length mismatch");
  if (a.size() < 2) return std::nullopt;
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("spearman: length mismatch");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

CorrelationSuite correlation_suite(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("correlation_suite: length mismatch");
  if (a.empty()) throw ValidationError("correlation_suite: empty input");
  CorrelationSuite out;
  for (std::size_t i = 0; i < a.size(); ++i) out.mse += (a[i] - b[i]) * (a[i] - b[i]);
  out.mse /= static_cast<double>(a.size());
  out.pearson = pearson(a, b);
  out.spearman = spearman(a, b);
  return out;
}

std::string format_optional(const std::optional<double>& v) {
  return v ? io::format_shortest(*v) : std::string("undefined");
}

GraphStats graph_stats(std::span<const EncodedComputationGraph> graphs) {
  GraphStats s;
  s.zero_counts.reserve(graphs.size());
  s.duplicate_counts.reserve(graphs.size());
  for (const auto& cg : graphs) {
    s.zero_counts.push_back(static_cast<double>(count_zero_vectors(cg)));
    s.duplicate_counts.push_back(static_cast<double>(count_duplicate_vectors(cg)));
  }
  return s;
}

void write_stats_csv(const std::filesystem::path& path, const GraphStats& stats) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "graph_index,zero_count,dup_count\n";
  for (std::size_t i = 0; i < stats.zero_counts.size(); ++i) {
    out << i << ',' << static_cast<std::uint64_t>(stats.zero_counts[i]) << ','
        << static_cast<std::uint64_t>(stats.duplicate_counts[i]) << '\n';
  }
  if (!out) throw ValidationError("write failed: " + path.string());
}

GraphStats read_stats_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("missing stats file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "graph_index,zero_count,dup_count") {
    throw ValidationError(path.string() + ": unexpected header");
  }
  GraphStats s;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string idx, zero, dup;
    if (!std::getline(ss, idx, ',') || !std::getline(ss, zero, ',') || !std::getline(ss, dup, ',')) {
      throw ValidationError(path.string() + ": malformed row '" + line + "'");
    }
    s.zero_counts.push_back(std::stod(zero));
    s.duplicate_counts.push_back(std::stod(dup));
  }
  return s;
}

}  // namespace cgt
