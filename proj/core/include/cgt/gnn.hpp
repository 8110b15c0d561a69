#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cgt/autodiff.hpp"
#include "cgt/tree.hpp"

namespace cgt {

enum class Aggregator : std::uint8_t {
  kMean,       // GCN / GraphSage-style mean over children plus a self transform
  kLinear,     // SGC: the mean layer without nonlinearities
  kSum,        // GIN
  kAttention,  // GAT, single head
};

std::string to_string(Aggregator a);
/// Accepts gcn|mean, sgc|linear, gin|sum, gat|attention.
Aggregator parse_aggregator(const std::string& name);
/// Display name used in reports: GCN, SGC, GIN, GAT.
std::string model_name(Aggregator a);

struct GnnConfig {
  Aggregator aggregator = Aggregator::kMean;
  /// Must equal the tree depth L.
  std::uint32_t layers = 2;
  std::uint32_t hidden = 64;
  std::size_t epochs = 100;
  double learning_rate = 1e-2;
  std::size_t repeats = 3;
  double gin_eps = 0.0;
  double attention_slope = 0.2;
};

/// Per layer tensors, in order:
///   mean/linear: w_self (in x h), w_children (in x h), bias (1 x h)
///   sum:         w (in x h), bias (1 x h)
///   attention:   w (in x h), a_self (h x 1), a_child (h x 1), bias (1 x h)
/// followed by the classifier w (h x C), bias (1 x C).
struct GnnParams {
  std::vector<std::vector<ad::Matrix<float>>> layers;
  ad::Matrix<float> classifier_w;
  ad::Matrix<float> classifier_b;

  std::vector<float> flatten() const;
  void unflatten(std::span<const float> values);
};

/// Glorot-uniform weights, zero biases.
GnnParams init_gnn(const GnnConfig& cfg, std::size_t in_dim, std::size_t num_classes, std::uint64_t seed);

/// A stack of equally shaped trees, (count * T) x d, tree-major.
struct TreeBatch {
  TreeShape shape;
  std::size_t count = 0;
  ad::Matrix<float> rows;
  std::vector<std::int32_t> labels;
};

TreeBatch stack_trees(std::span<const EncodedComputationGraph> graphs);

/// Bottom-up message passing over the fixed tree. At layer l = 1..L every
/// position u with depth <= L - l computes, from layer l - 1 values,
///   mean:      relu(h_u W_s + (sum_children h_c / s) W_c + b)
///   linear:    h_u W_s + (sum_children h_c / s) W_c + b
///   sum:       relu(((1 + eps) h_u + sum_children h_c) W + b)
///   attention: relu(z_u + sum_c alpha_c z_c + b),  z = h W,
///              alpha = softmax_c(leaky_relu(z_u a_s + z_c a_c))
/// Null positions (all-zero input rows below the root) stay zero at every
/// layer. The root embedding feeds a linear classifier.
/// Returns the logits node (count x C).
ad::Var gnn_forward_on_tape(ad::Tape<float>& tape, const GnnConfig& cfg, const GnnParams& params,
                            const TreeBatch& batch, bool requires_grad, std::vector<ad::Var>* param_vars = nullptr);

/// Root logits (1 x C) for a single tree. Throws ValidationError if the depth
/// does not match cfg.layers.
ad::Matrix<float> gnn_forward(const GnnConfig& cfg, const GnnParams& params, const EncodedComputationGraph& cg);

struct AccuracyRecord {
  std::string dataset;   // original | generated
  std::string scenario;
  std::string model;
  double accuracy = 0.0;  // mean over repeats
  double std = 0.0;       // sample standard deviation over repeats (0 for one repeat)
  std::vector<double> runs;
};

/// Full-batch Adam on root cross-entropy, evaluated by test accuracy; repeated
/// cfg.repeats times with derived seeds.
AccuracyRecord train_eval(const GnnConfig& cfg, std::span<const EncodedComputationGraph> train,
                          std::span<const EncodedComputationGraph> test, std::size_t num_classes,
                          std::uint64_t seed);

/// `bench_report.csv`: header `dataset,scenario,model,accuracy,std`.
void write_bench_report(const std::filesystem::path& path, std::span<const AccuracyRecord> records);
std::vector<AccuracyRecord> read_bench_report(const std::filesystem::path& path);

}  // namespace cgt
