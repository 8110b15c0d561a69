#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cgt/cgt_model.hpp"
#include "cgt/gnn.hpp"
#include "cgt/graph.hpp"
#include "cgt/metrics.hpp"
#include "cgt/quantizer.hpp"

namespace cgt::pipeline {

/// Flat `key = value` configuration.
using ConfigMap = std::map<std::string, std::string>;

/// Reads a line-based config file: `key = value`, `#` starts a comment,
/// blank lines ignored. Unknown keys and malformed lines are validation errors.
ConfigMap read_config_file(const std::filesystem::path& path);

/// Every accepted key with its default value.
const ConfigMap& default_config();

enum class PrivacyKind { kNone, kAnonymous, kDpKMeans, kDpSgd };

enum class ScenarioKind { kNone, kNoisyEdges, kBiasedSplit, kSamplingNumber };

struct PipelineConfig {
  /// Graph directory, or "sbm" for a generated stochastic block model.
  std::string graph = "sbm";
  SbmOptions sbm;
  std::uint64_t seed = 0;

  std::uint32_t s = 5;
  std::uint32_t L = 2;

  ScenarioKind scenario = ScenarioKind::kNone;
  std::vector<std::uint32_t> noisy_edges{0, 2, 4};
  /// nullopt is the iid (unbiased) split.
  std::vector<std::optional<double>> alphas{std::nullopt, 0.01, 0.3};
  std::vector<std::uint32_t> sampling_numbers{1, 3, 5};

  PrivacyKind privacy = PrivacyKind::kAnonymous;
  std::uint32_t k = 30;
  /// Cluster count; 0 means floor(n / k) under k-anonymity and 30 otherwise.
  std::uint32_t m = 0;
  std::size_t n_fit = 0;
  std::size_t kmeans_iterations = 20;
  double eps = 1.0;
  double delta = 0.01;
  double clip = 1.0;

  std::uint32_t dim = 64;
  std::uint32_t heads = 4;
  std::uint32_t layers = 3;
  CgtVariant variant = CgtVariant::kFullSequence;
  bool use_label = true;
  bool use_layer_positions = true;
  bool use_ancestor_mask = true;
  std::size_t epochs = 30;
  std::size_t max_steps = 0;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double temperature = 1.0;

  std::vector<Aggregator> gnn_models{Aggregator::kMean, Aggregator::kLinear, Aggregator::kSum, Aggregator::kAttention};
  std::uint32_t gnn_hidden = 64;
  std::size_t gnn_epochs = 100;
  double gnn_lr = 1e-2;
  std::size_t gnn_repeats = 3;
};

/// Parses and validates a config map (unknown keys are errors; missing keys
/// take defaults).
PipelineConfig parse_config(const ConfigMap& map);
/// Canonical map of every key (round-trips through parse_config).
ConfigMap to_config_map(const PipelineConfig& cfg);

/// One concrete variation of the input graph, e.g. `ne=2`.
struct ScenarioVariant {
  std::string tag;
  std::uint32_t noisy_edges = 0;
  std::optional<double> alpha;  // biased split when set
  std::uint32_t s = 0;
};

std::vector<ScenarioVariant> scenario_variants(const PipelineConfig& cfg);
std::string scenario_name(ScenarioKind kind);

enum class Stage { kSample, kQuantize, kTrain, kGenerate, kBench, kStats };

std::string stage_name(Stage stage);
Stage parse_stage(const std::string& name);

/// Version string embedded in manifests.
std::string tool_version();

/// Exclusive ownership of a run directory for the lifetime of the object,
/// through an exclusively created `run.lock` file.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Runs one stage for every scenario variant. Upstream artifacts must exist
/// (MissingArtifactError) and match the hashes recorded when they were
/// produced, under the same upstream configuration (ValidationError).
/// The manifest is updated with the stage configuration and output hashes.
void run_stage(Stage stage, const PipelineConfig& cfg, const std::filesystem::path& run_dir);

/// Like run_stage, but first re-runs every upstream stage whose outputs are
/// missing, modified, or were produced under a different configuration.
void run_stage_with_upstream(Stage stage, const PipelineConfig& cfg, const std::filesystem::path& run_dir);

/// All stages in order, then the report.
void run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& run_dir);

/// Configuration recorded in the run manifest (for downstream verbs).
PipelineConfig load_run_config(const std::filesystem::path& run_dir);

struct ReportRow {
  std::string scenario;
  std::string model;
  std::optional<double> original;
  std::optional<double> generated;
};

struct Report {
  std::vector<ReportRow> rows;
  CorrelationSuite overall;
  std::size_t complete_pairs = 0;
  /// Keyed by variant tag, over the models of that variant.
  std::map<std::string, CorrelationSuite> per_scenario;
  std::string text;
};

/// Aggregates bench_report.csv (and stats summaries when present) into
/// report.txt and report.csv. Incomplete pairs are listed with gaps and left
/// out of the metrics.
Report make_report(const std::filesystem::path& run_dir);

/// Artifacts read from a finished variant directory; used by tests.
struct VariantArtifacts {
  std::vector<EncodedComputationGraph> original_train, original_test;
  /// Training sequences mapped back through the quantizer (what the generator learns).
  std::vector<EncodedComputationGraph> quantized_train, quantized_test;
  std::vector<EncodedComputationGraph> generated_train, generated_test;
};

VariantArtifacts load_variant(const std::filesystem::path& run_dir, const ScenarioVariant& variant);

}  // namespace cgt::pipeline
