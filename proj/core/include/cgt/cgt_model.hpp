#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cgt/autodiff.hpp"
#include "cgt/privacy.hpp"
#include "cgt/quantizer.hpp"
#include "cgt/tree.hpp"

namespace cgt {

enum class CgtVariant : std::uint8_t {
  /// One length-T sequence per tree.
  kFullSequence = 0,
  /// s^L root-to-leaf sequences of length L + 1 per tree.
  kCostEfficient = 1,
};

struct CgtConfig {
  std::uint32_t vocab = 17;  // cluster ids plus the null token
  std::uint32_t labels = 1;
  std::uint32_t dim = 128;
  std::uint32_t heads = 4;
  std::uint32_t layers = 3;
  std::uint32_t mlp_ratio = 4;
  TreeShape shape{2, 2};
  CgtVariant variant = CgtVariant::kFullSequence;
  // Ablation switches.
  bool use_label = true;
  bool use_layer_positions = true;
  bool use_ancestor_mask = true;

  /// Throws ValidationError when dim % heads != 0, layers == 0, etc.
  void validate() const;
  /// Rows of the position table: L + 1 with layer sharing, T otherwise.
  std::uint32_t num_positions() const noexcept;
  std::int32_t null_token() const noexcept { return static_cast<std::int32_t>(vocab) - 1; }

  friend bool operator==(const CgtConfig&, const CgtConfig&) = default;
};

template <typename Scalar>
struct CgtBlockParams {
  using Mat = ad::Matrix<Scalar>;
  Mat ln1_gain, ln1_bias;
  Mat w_query, b_query, w_key, b_key, w_value, b_value, w_out, b_out;
  Mat ln2_gain, ln2_bias;
  Mat w_mlp_in, b_mlp_in, w_mlp_out, b_mlp_out;
};

/// Model parameters. The output projection is tied to token_embeddings.
template <typename Scalar>
struct CgtParams {
  using Mat = ad::Matrix<Scalar>;
  Mat token_embeddings;     // vocab x dim
  Mat position_embeddings;  // num_positions x dim
  Mat label_embeddings;     // labels x dim
  Mat initial_query;        // 1 x dim
  std::vector<CgtBlockParams<Scalar>> blocks;
  Mat final_gain, final_bias;

  /// Visits every tensor in declaration order (the checkpoint order).
  template <typename F>
  void for_each(F&& f) {
    f(token_embeddings);
    f(position_embeddings);
    f(label_embeddings);
    f(initial_query);
    for (auto& b : blocks) {
      for (Mat* m : {&b.ln1_gain, &b.ln1_bias, &b.w_query, &b.b_query, &b.w_key, &b.b_key, &b.w_value, &b.b_value,
                     &b.w_out, &b.b_out, &b.ln2_gain, &b.ln2_bias, &b.w_mlp_in, &b.b_mlp_in, &b.w_mlp_out,
                     &b.b_mlp_out}) {
        f(*m);
      }
    }
    f(final_gain);
    f(final_bias);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<CgtParams*>(this)->for_each([&](Mat& m) { f(static_cast<const Mat&>(m)); });
  }

  std::size_t num_values() const;
  std::vector<Scalar> flatten() const;
  void unflatten(std::span<const Scalar> values);

  /// Same layout, every tensor zero.
  CgtParams zeros_like() const;

  template <typename To>
  CgtParams<To> cast() const {
    CgtParams<To> out;
    out.token_embeddings = token_embeddings.template cast<To>();
    out.position_embeddings = position_embeddings.template cast<To>();
    out.label_embeddings = label_embeddings.template cast<To>();
    out.initial_query = initial_query.template cast<To>();
    out.blocks.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& a = blocks[i];
      auto& b = out.blocks[i];
      b.ln1_gain = a.ln1_gain.template cast<To>();
      b.ln1_bias = a.ln1_bias.template cast<To>();
      b.w_query = a.w_query.template cast<To>();
      b.b_query = a.b_query.template cast<To>();
      b.w_key = a.w_key.template cast<To>();
      b.b_key = a.b_key.template cast<To>();
      b.w_value = a.w_value.template cast<To>();
      b.b_value = a.b_value.template cast<To>();
      b.w_out = a.w_out.template cast<To>();
      b.b_out = a.b_out.template cast<To>();
      b.ln2_gain = a.ln2_gain.template cast<To>();
      b.ln2_bias = a.ln2_bias.template cast<To>();
      b.w_mlp_in = a.w_mlp_in.template cast<To>();
      b.b_mlp_in = a.b_mlp_in.template cast<To>();
      b.w_mlp_out = a.w_mlp_out.template cast<To>();
      b.b_mlp_out = a.b_mlp_out.template cast<To>();
    }
    out.final_gain = final_gain.template cast<To>();
    out.final_bias = final_bias.template cast<To>();
    return out;
  }
};

/// Embeddings ~ N(0, 0.02); projection weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in));
/// layer-norm gains 1; biases 0.
template <typename Scalar>
CgtParams<Scalar> init_params(const CgtConfig& config, std::uint64_t seed);

/// A batch of equally shaped sequences. Masks are shared by every sequence;
/// position ids are per element because paths carry their own BFS positions
/// when layer sharing is off.
struct Batch {
  std::uint32_t length = 0;
  std::vector<std::int32_t> tokens;     // sequences x length
  std::vector<std::int32_t> positions;  // sequences x length, rows of the position table
  std::vector<std::int32_t> labels;     // per sequence
  std::vector<std::uint8_t> context_mask;  // length x length
  std::vector<std::uint8_t> query_mask;    // length x length
  std::vector<float> loss_weights;         // sequences x length

  std::size_t num_sequences() const noexcept { return labels.size(); }
};

/// Full-sequence (BFS) masks: with the ancestor mask, the context stream of t
/// sees ancestors(t) and t, the query stream ancestors(t) only; without it,
/// plain causal masks (<= t and < t).
void full_sequence_masks(const CgtConfig& config, std::vector<std::uint8_t>& context,
                         std::vector<std::uint8_t>& query);

/// Builds a training batch in the configured variant. In the cost-efficient
/// variant each tree contributes s^L paths and every tree position is scored
/// exactly once (in the first path, in leaf order, that contains it).
Batch make_batch(const CgtConfig& config, std::span<const TokenSequence> sequences);

/// Single-path batch for the cost-efficient forward.
Batch make_path_batch(const CgtConfig& config, std::span<const PathSequence> paths);

/// Builds the forward graph on `tape`. Returns the logits node
/// ((sequences * length) x vocab). When `embedded_input` is given it receives
/// the node holding h^(0) (token + position embeddings), which is a
/// differentiable leaf-like input for mask audits.
template <typename Scalar>
ad::Var forward_on_tape(ad::Tape<Scalar>& tape, const CgtParams<Scalar>& params, const CgtConfig& config,
                        const Batch& batch, bool requires_grad, ad::Var* embedded_input = nullptr,
                        ad::AttentionCounter* counter = nullptr,
                        std::vector<ad::Var>* param_vars = nullptr);

/// Per-position logits (length x vocab) for one full BFS sequence.
template <typename Scalar>
ad::Matrix<Scalar> forward(const CgtParams<Scalar>& params, const CgtConfig& config,
                           std::span<const std::int32_t> tokens, Label root_label);

/// Per-position logits ((L+1) x vocab) for one root-to-leaf path.
template <typename Scalar>
ad::Matrix<Scalar> forward_path(const CgtParams<Scalar>& params, const CgtConfig& config, const PathSequence& path);

/// Mean negative log-likelihood over weighted positions. Throws on an empty batch.
template <typename Scalar>
Scalar loss(const CgtParams<Scalar>& params, const CgtConfig& config, const Batch& batch);

template <typename Scalar>
struct LossAndGrad {
  Scalar loss{};
  CgtParams<Scalar> grad;
};

/// Exact reverse-mode gradients of loss(). Throws NumericalError on a non-finite loss.
template <typename Scalar>
LossAndGrad<Scalar> backward(const CgtParams<Scalar>& params, const CgtConfig& config, const Batch& batch);

struct TrainOptions {
  std::size_t epochs = 10;
  /// Stop after this many optimizer steps (0 = run all epochs).
  std::size_t max_steps = 0;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool cosine_decay = false;
  /// Accumulate the batch gradient as the ordered mean of per-example
  /// gradients. Always on under DP-SGD.
  bool per_example_gradients = false;
  std::size_t checkpoint_every_epochs = 0;
  std::filesystem::path checkpoint_dir;
  std::function<void(std::size_t step, double loss)> on_step;
};

struct TrainResult {
  CgtParams<float> params;
  std::vector<double> loss_trace;
  std::size_t steps = 0;
  privacy::Report privacy;
};

/// Adam training of the model on token sequences, optionally with DP-SGD
/// (per-example clipping plus Gaussian noise). Deterministic per seed.
/// Throws NumericalError if the loss becomes non-finite.
TrainResult train(std::span<const TokenSequence> data, const CgtConfig& config, const TrainOptions& options,
                  const std::optional<privacy::DpSgdConfig>& dp, std::uint64_t seed);

/// As above, continuing from given parameters.
TrainResult train_from(CgtParams<float> params, std::span<const TokenSequence> data, const CgtConfig& config,
                       const TrainOptions& options, const std::optional<privacy::DpSgdConfig>& dp,
                       std::uint64_t seed);

/// Autoregressive sampling in BFS order. Each root label is drawn from
/// `label_weights`; children of null nodes are forced null; the root is never
/// null. temperature <= 0 selects the argmax.
std::vector<TokenSequence> generate(const CgtParams<float>& params, const CgtConfig& config, std::size_t count,
                                    std::span<const double> label_weights, double temperature, std::uint64_t seed);

/// Attention multiply-adds for one forward epoch over `data` in the configured variant.
std::uint64_t measure_epoch_attention_flops(const CgtParams<float>& params, const CgtConfig& config,
                                            std::span<const TokenSequence> data, std::size_t batch_size = 64);

/// `model.cgt`: magic "CGT1", u32 version, the config, then parameter tensors
/// (u32 rows, u32 cols, f32 data) in declaration order.
void save_checkpoint(const std::filesystem::path& path, const CgtConfig& config, const CgtParams<float>& params);

struct Checkpoint {
  CgtConfig config;
  CgtParams<float> params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Loss trace as CSV `step,loss`.
void write_loss_trace(const std::filesystem::path& path, std::span<const double> trace);

}  // namespace cgt
