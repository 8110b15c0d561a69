#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cgt/tree.hpp"

namespace cgt {

/// Number of all-zero rows.
std::size_t count_zero_vectors(const EncodedComputationGraph& cg);

/// Among non-null rows, the number equal (bitwise) to an earlier non-null row,
/// i.e. extra copies.
std::size_t count_duplicate_vectors(const EncodedComputationGraph& cg);

/// Exact 1-D Wasserstein-1 distance between two empirical distributions:
/// the integral of |F_p^{-1}(u) - F_q^{-1}(u)| over u in (0, 1). For equal
/// sizes this is the mean absolute difference of the sorted samples.
/// Throws ValidationError on empty input.
double wasserstein1(std::span<const double> p, std::span<const double> q);

struct CorrelationSuite {
  double mse = 0.0;
  /// nullopt when undefined (fewer than two points or zero variance).
  std::optional<double> pearson;
  std::optional<double> spearman;
};

std::optional<double> pearson(std::span<const double> a, std::span<const double> b);
/// Ranks with ties sharing their average rank, 1-based.
std::vector<double> average_ranks(std::span<const double> x);
std::optional<double> spearman(std::span<const double> a, std::span<const double> b);

/// MSE plus Pearson and Spearman. Throws ValidationError on length mismatch
/// or empty input; correlations are nullopt rather than NaN when undefined.
CorrelationSuite correlation_suite(std::span<const double> a, std::span<const double> b);

/// "undefined" for nullopt, else the shortest round-trip decimal.
std::string format_optional(const std::optional<double>& v);

struct GraphStats {
  std::vector<double> zero_counts;
  std::vector<double> duplicate_counts;
};

GraphStats graph_stats(std::span<const EncodedComputationGraph> graphs);

/// `stats.csv`: `graph_index,zero_count,dup_count`.
void write_stats_csv(const std::filesystem::path& path, const GraphStats& stats);
GraphStats read_stats_csv(const std::filesystem::path& path);

}  // namespace cgt
