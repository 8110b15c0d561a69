#include "cgt/cgt_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "cgt/adam.hpp"
#include "cgt/binary_io.hpp"
#include "cgt/error.hpp"
#include "cgt/random.hpp"

namespace cgt {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
using Mat = ad::Matrix<Scalar>;

template <typename Scalar>
Mat<Scalar> normal_matrix(Eigen::Index rows, Eigen::Index cols, double sd, Rng& rng) {
  Mat<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.normal(0.0, sd));
  return m;
}

template <typename Scalar>
Mat<Scalar> uniform_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  Mat<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  return m;
}

void check_tokens(const CgtConfig& config, std::span<const std::int32_t> tokens, std::size_t expected) {
  if (tokens.size() != expected) {
    throw ValidationError("sequence length " + std::to_string(tokens.size()) + " does not match expected " +
                          std::to_string(expected));
  }
  for (const auto tok : tokens) {
    if (tok < 0 || static_cast<std::uint32_t>(tok) >= config.vocab) {
      throw ValidationError("token " + std::to_string(tok) + " outside vocabulary of size " +
                            std::to_string(config.vocab));
    }
  }
}

void check_label(const CgtConfig& config, Label label) {
  if (label < 0 || static_cast<std::uint32_t>(label) >= config.labels) {
    throw ValidationError("root label " + std::to_string(label) + " outside [0, " + std::to_string(config.labels) +
                          ")");
  }
}

// Causal masks for a root-to-leaf path: every earlier position is an ancestor.
void path_masks(std::uint32_t length, std::vector<std::uint8_t>& context, std::vector<std::uint8_t>& query) {
  context.assign(static_cast<std::size_t>(length) * length, 0);
  query.assign(static_cast<std::size_t>(length) * length, 0);
  for (std::uint32_t i = 0; i < length; ++i) {
    for (std::uint32_t j = 0; j <= i; ++j) {
      context[i * length + j] = 1;
      if (j < i) query[i * length + j] = 1;
    }
  }
}

std::int32_t position_row(const CgtConfig& config, std::uint32_t t) {
  return static_cast<std::int32_t>(config.use_layer_positions ? config.shape.layer(t) : t - 1);
}

// A position is scored unless its parent is null: those children are null by
// construction and carry no information.
bool scored(const CgtConfig& config, std::span<const std::int32_t> tree_tokens, std::uint32_t t) {
  return t == 1 || tree_tokens[config.shape.parent(t) - 1] != config.null_token();
}

}  // namespace

void CgtConfig::validate() const {
  if (vocab < 2) throw ValidationError("model: vocabulary needs at least one cluster id and the null token");
  if (labels < 1) throw ValidationError("model: need at least one label");
  if (dim == 0 || heads == 0 || dim % heads != 0) throw ValidationError("model: dim must be a positive multiple of heads");
  if (layers < 1) throw ValidationError("model: need at least one layer");
  if (mlp_ratio < 1) throw ValidationError("model: mlp_ratio must be >= 1");
}

std::uint32_t CgtConfig::num_positions() const noexcept {
  return use_layer_positions ? shape.depth() + 1 : shape.size();
}

template <typename Scalar>
std::size_t CgtParams<Scalar>::num_values() const {
  std::size_t n = 0;
  for_each([&](const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <typename Scalar>
std::vector<Scalar> CgtParams<Scalar>::flatten() const {
  std::vector<Scalar> out;
  out.reserve(num_values());
  for_each([&](const Mat& m) { out.insert(out.end(), m.data(), m.data() + m.size()); });
  return out;
}

template <typename Scalar>
void CgtParams<Scalar>::unflatten(std::span<const Scalar> values) {
  if (values.size() != num_values()) throw ValidationError("unflatten: parameter count mismatch");
  std::size_t offset = 0;
  for_each([&](Mat& m) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), m.size(), m.data());
    offset += static_cast<std::size_t>(m.size());
  });
}

template <typename Scalar>
CgtParams<Scalar> CgtParams<Scalar>::zeros_like() const {
  CgtParams out = *this;
  out.for_each([](Mat& m) { m.setZero(); });
  return out;
}

template <typename Scalar>
CgtParams<Scalar> init_params(const CgtConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, seed_tag("cgt-init")));
  const auto d = static_cast<Eigen::Index>(config.dim);
  const auto hidden = d * static_cast<Eigen::Index>(config.mlp_ratio);
  CgtParams<Scalar> p;
  p.token_embeddings = normal_matrix<Scalar>(config.vocab, d, 0.02, rng);
  p.position_embeddings = normal_matrix<Scalar>(config.num_positions(), d, 0.02, rng);
  p.label_embeddings = normal_matrix<Scalar>(config.labels, d, 0.02, rng);
  p.initial_query = normal_matrix<Scalar>(1, d, 0.02, rng);
  p.blocks.resize(config.layers);
  for (auto& b : p.blocks) {
    b.ln1_gain = Mat<Scalar>::Ones(1, d);
    b.ln1_bias = Mat<Scalar>::Zero(1, d);
    b.w_query = uniform_matrix<Scalar>(d, d, rng);
    b.b_query = Mat<Scalar>::Zero(1, d);
    b.w_key = uniform_matrix<Scalar>(d, d, rng);
    b.b_key = Mat<Scalar>::Zero(1, d);
    b.w_value = uniform_matrix<Scalar>(d, d, rng);
    b.b_value = Mat<Scalar>::Zero(1, d);
    b.w_out = uniform_matrix<Scalar>(d, d, rng);
    b.b_out = Mat<Scalar>::Zero(1, d);
    b.ln2_gain = Mat<Scalar>::Ones(1, d);
    b.ln2_bias = Mat<Scalar>::Zero(1, d);
    b.w_mlp_in = uniform_matrix<Scalar>(d, hidden, rng);
    b.b_mlp_in = Mat<Scalar>::Zero(1, hidden);
    b.w_mlp_out = uniform_matrix<Scalar>(hidden, d, rng);
    b.b_mlp_out = Mat<Scalar>::Zero(1, d);
  }
  p.final_gain = Mat<Scalar>::Ones(1, d);
  p.final_bias = Mat<Scalar>::Zero(1, d);
  return p;
}

void full_sequence_masks(const CgtConfig& config, std::vector<std::uint8_t>& context,
                         std::vector<std::uint8_t>& query) {
  const std::uint32_t T = config.shape.size();
  context.assign(static_cast<std::size_t>(T) * T, 0);
  query.assign(static_cast<std::size_t>(T) * T, 0);
  for (std::uint32_t t = 1; t <= T; ++t) {
    const std::size_t row = static_cast<std::size_t>(t - 1) * T;
    if (config.use_ancestor_mask) {
      for (const auto a : config.shape.ancestors(t)) {
        context[row + a - 1] = 1;
        query[row + a - 1] = 1;
      }
      context[row + t - 1] = 1;
    } else {
      for (std::uint32_t j = 1; j <= t; ++j) {
        context[row + j - 1] = 1;
        if (j < t) query[row + j - 1] = 1;
      }
    }
  }
}

Batch make_batch(const CgtConfig& config, std::span<const TokenSequence> sequences) {
  if (sequences.empty()) throw ValidationError("make_batch: empty batch");
  const TreeShape& shape = config.shape;
  const std::uint32_t T = shape.size();
  Batch batch;
  if (config.variant == CgtVariant::kFullSequence) {
    batch.length = T;
    full_sequence_masks(config, batch.context_mask, batch.query_mask);
    for (const auto& seq : sequences) {
      check_tokens(config, seq.tokens, T);
      check_label(config, seq.root_label);
      batch.labels.push_back(seq.root_label);
      for (std::uint32_t t = 1; t <= T; ++t) {
        batch.tokens.push_back(seq.tokens[t - 1]);
        batch.positions.push_back(position_row(config, t));
        batch.loss_weights.push_back(scored(config, seq.tokens, t) ? 1.0f : 0.0f);
      }
    }
    return batch;
  }

  const auto paths = leaf_paths(shape);
  batch.length = shape.depth() + 1;
  path_masks(batch.length, batch.context_mask, batch.query_mask);
  std::vector<std::uint8_t> seen(T);
  for (const auto& seq : sequences) {
    check_tokens(config, seq.tokens, T);
    check_label(config, seq.root_label);
    std::fill(seen.begin(), seen.end(), 0);
    for (const auto& path : paths) {
      batch.labels.push_back(seq.root_label);
      for (const auto t : path) {
        batch.tokens.push_back(seq.tokens[t - 1]);
        batch.positions.push_back(position_row(config, t));
        const bool first = seen[t - 1] == 0;
        seen[t - 1] = 1;
        batch.loss_weights.push_back(first && scored(config, seq.tokens, t) ? 1.0f : 0.0f);
      }
    }
  }
  return batch;
}

Batch make_path_batch(const CgtConfig& config, std::span<const PathSequence> paths) {
  if (paths.empty()) throw ValidationError("make_path_batch: empty batch");
  Batch batch;
  batch.length = config.shape.depth() + 1;
  path_masks(batch.length, batch.context_mask, batch.query_mask);
  for (const auto& p : paths) {
    check_tokens(config, p.tokens, batch.length);
    check_label(config, p.root_label);
    if (p.positions.size() != batch.length) throw ValidationError("make_path_batch: positions length mismatch");
    batch.labels.push_back(p.root_label);
    for (std::size_t i = 0; i < p.positions.size(); ++i) {
      const auto t = p.positions[i];
      if (t < 1 || t > config.shape.size() || config.shape.layer(t) != i) {
        throw ValidationError("make_path_batch: positions are not a root-to-leaf chain");
      }
      batch.tokens.push_back(p.tokens[i]);
      batch.positions.push_back(position_row(config, t));
      batch.loss_weights.push_back(1.0f);
    }
  }
  return batch;
}

template <typename Scalar>
ad::Var forward_on_tape(ad::Tape<Scalar>& tape, const CgtParams<Scalar>& params, const CgtConfig& config,
                        const Batch& batch, bool requires_grad, ad::Var* embedded_input,
                        ad::AttentionCounter* counter, std::vector<ad::Var>* param_vars) {
  const std::size_t nseq = batch.num_sequences();
  const std::size_t rows = nseq * batch.length;
  if (nseq == 0 || batch.tokens.size() != rows || batch.positions.size() != rows) {
    throw ValidationError("forward: malformed batch");
  }
  auto leaf = [&](const Mat<Scalar>& m) {
    const ad::Var v = tape.leaf(m, requires_grad);
    if (param_vars != nullptr) param_vars->push_back(v);
    return v;
  };
  const ad::Var tok = leaf(params.token_embeddings);
  const ad::Var pos = leaf(params.position_embeddings);
  const ad::Var lab = leaf(params.label_embeddings);
  const ad::Var init_q = leaf(params.initial_query);

  ad::Var h = tape.add(tape.gather_rows(tok, batch.tokens), tape.gather_rows(pos, batch.positions));
  if (embedded_input != nullptr) {
    h = tape.leaf(tape.value(h), true);
    *embedded_input = h;
  }
  ad::Var g;
  if (config.use_label) {
    std::vector<std::int32_t> label_rows(rows);
    for (std::size_t b = 0; b < nseq; ++b) {
      std::fill_n(label_rows.begin() + static_cast<std::ptrdiff_t>(b * batch.length), batch.length, batch.labels[b]);
    }
    g = tape.add_row(tape.gather_rows(lab, std::move(label_rows)), init_q);
  } else {
    g = tape.repeat_rows(init_q, rows);
  }

  const ad::AttentionLayout context_layout{nseq, batch.length, batch.length, config.heads, batch.context_mask};
  const ad::AttentionLayout query_layout{nseq, batch.length, batch.length, config.heads, batch.query_mask};
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    const auto& bp = params.blocks[l];
    const ad::Var ln1_g = leaf(bp.ln1_gain), ln1_b = leaf(bp.ln1_bias);
    const ad::Var wq = leaf(bp.w_query), bq = leaf(bp.b_query);
    const ad::Var wk = leaf(bp.w_key), bk = leaf(bp.b_key);
    const ad::Var wv = leaf(bp.w_value), bv = leaf(bp.b_value);
    const ad::Var wo = leaf(bp.w_out), bo = leaf(bp.b_out);
    const ad::Var ln2_g = leaf(bp.ln2_gain), ln2_b = leaf(bp.ln2_bias);
    const ad::Var w1 = leaf(bp.w_mlp_in), b1 = leaf(bp.b_mlp_in);
    const ad::Var w2 = leaf(bp.w_mlp_out), b2 = leaf(bp.b_mlp_out);
    // The context stream after the last block feeds nothing, so skip it.
    const bool last = l + 1 == params.blocks.size();

    const ad::Var hn = tape.layer_norm(h, ln1_g, ln1_b);
    const ad::Var gn = tape.layer_norm(g, ln1_g, ln1_b);
    const ad::Var k = tape.affine(hn, wk, bk);
    const ad::Var v = tape.affine(hn, wv, bv);
    auto mlp = [&](ad::Var x) {
      const ad::Var xn = tape.layer_norm(x, ln2_g, ln2_b);
      return tape.add(x, tape.affine(tape.gelu(tape.affine(xn, w1, b1)), w2, b2));
    };
    const ad::Var ag = tape.attention(tape.affine(gn, wq, bq), k, v, query_layout, counter);
    const ad::Var g_next = mlp(tape.add(g, tape.affine(ag, wo, bo)));
    if (!last) {
      const ad::Var ah = tape.attention(tape.affine(hn, wq, bq), k, v, context_layout, counter);
      h = mlp(tape.add(h, tape.affine(ah, wo, bo)));
    }
    g = g_next;
  }
  const ad::Var fg = leaf(params.final_gain), fb = leaf(params.final_bias);
  return tape.matmul_nt(tape.layer_norm(g, fg, fb), tok);
}

template <typename Scalar>
ad::Matrix<Scalar> forward(const CgtParams<Scalar>& params, const CgtConfig& config,
                           std::span<const std::int32_t> tokens, Label root_label) {
  CgtConfig full = config;
  full.variant = CgtVariant::kFullSequence;
  const TokenSequence seq{{tokens.begin(), tokens.end()}, root_label};
  const Batch batch = make_batch(full, std::span(&seq, 1));
  ad::Tape<Scalar> tape;
  return tape.value(forward_on_tape(tape, params, full, batch, false));
}

template <typename Scalar>
ad::Matrix<Scalar> forward_path(const CgtParams<Scalar>& params, const CgtConfig& config, const PathSequence& path) {
  const Batch batch = make_path_batch(config, std::span(&path, 1));
  ad::Tape<Scalar> tape;
  return tape.value(forward_on_tape(tape, params, config, batch, false));
}

namespace {

template <typename Scalar>
std::vector<Scalar> cast_weights(const Batch& batch) {
  return {batch.loss_weights.begin(), batch.loss_weights.end()};
}

}  // namespace

template <typename Scalar>
Scalar loss(const CgtParams<Scalar>& params, const CgtConfig& config, const Batch& batch) {
  if (batch.num_sequences() == 0) throw ValidationError("loss: empty batch");
  ad::Tape<Scalar> tape;
  const ad::Var logits = forward_on_tape(tape, params, config, batch, false);
  return tape.value(tape.cross_entropy(logits, batch.tokens, cast_weights<Scalar>(batch)))(0, 0);
}

template <typename Scalar>
LossAndGrad<Scalar> backward(const CgtParams<Scalar>& params, const CgtConfig& config, const Batch& batch) {
  if (batch.num_sequences() == 0) throw ValidationError("backward: empty batch");
  ad::Tape<Scalar> tape;
  std::vector<ad::Var> vars;
  const ad::Var logits = forward_on_tape(tape, params, config, batch, true, nullptr, nullptr, &vars);
  const ad::Var nll = tape.cross_entropy(logits, batch.tokens, cast_weights<Scalar>(batch));
  LossAndGrad<Scalar> out{tape.value(nll)(0, 0), params.zeros_like()};
  if (!std::isfinite(static_cast<double>(out.loss))) {
    throw NumericalError("backward: non-finite loss " + std::to_string(static_cast<double>(out.loss)));
  }
  tape.backward(nll);
  // forward_on_tape registers parameter leaves in declaration order.
  std::size_t i = 0;
  out.grad.for_each([&](Mat<Scalar>& m) {
    const ad::Var v = vars[i++];
    m = tape.grad(v);
  });
  return out;
}

namespace {

void save_epoch_checkpoint(const TrainOptions& o, const CgtConfig& config, const CgtParams<float>& params,
                           std::size_t epoch) {
  if (o.checkpoint_every_epochs == 0 || o.checkpoint_dir.empty() || epoch % o.checkpoint_every_epochs != 0) return;
  std::filesystem::create_directories(o.checkpoint_dir);
  save_checkpoint(o.checkpoint_dir / ("model_epoch" + std::to_string(epoch) + ".cgt"), config, params);
}

}  // namespace

TrainResult train(std::span<const TokenSequence> data, const CgtConfig& config, const TrainOptions& options,
                  const std::optional<privacy::DpSgdConfig>& dp, std::uint64_t seed) {
  config.validate();
  return train_from(init_params<float>(config, seed), data, config, options, dp, seed);
}

TrainResult train_from(CgtParams<float> params, std::span<const TokenSequence> data, const CgtConfig& config,
                       const TrainOptions& options, const std::optional<privacy::DpSgdConfig>& dp,
                       std::uint64_t seed) {
  config.validate();
  if (data.empty()) throw ValidationError("train: empty data");
  if (options.batch_size == 0) throw ValidationError("train: batch_size must be positive");
  if (dp && !(dp->clip_norm > 0.0)) throw ValidationError("train: DP-SGD clip norm must be positive");
  if (dp && !(dp->noise_multiplier >= 0.0)) throw ValidationError("train: DP-SGD noise multiplier must be >= 0");

  const std::size_t n = data.size();
  const std::size_t batch_size = std::min(options.batch_size, n);
  const std::size_t steps_per_epoch = (n + batch_size - 1) / batch_size;
  // With epochs == 0 the run is bounded by max_steps alone.
  std::size_t total_steps = steps_per_epoch * options.epochs;
  if (options.max_steps > 0) total_steps = options.epochs == 0 ? options.max_steps : std::min(total_steps, options.max_steps);

  Rng order_rng(derive_seed(seed, seed_tag("cgt-batches")));
  Rng noise_rng(derive_seed(seed, seed_tag("dp-sgd-noise")));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  std::vector<float> flat = params.flatten();
  Adam adam({options.beta1, options.beta2, options.adam_eps});
  const bool per_example = options.per_example_gradients || dp.has_value();
  std::vector<TokenSequence> chunk;
  std::size_t step = 0;
  std::size_t epoch = 0;
  while (step < total_steps) {
    order_rng.shuffle(order.begin(), order.end());
    for (std::size_t begin = 0; begin < n && step < total_steps; begin += batch_size) {
      const std::size_t end = std::min(n, begin + batch_size);
      chunk.clear();
      for (std::size_t i = begin; i < end; ++i) chunk.push_back(data[order[i]]);

      std::vector<float> grad;
      double step_loss = 0.0;
      if (!per_example) {
        const auto lg = backward(params, config, make_batch(config, chunk));
        step_loss = lg.loss;
        grad = lg.grad.flatten();
      } else {
        std::vector<std::vector<float>> per;
        per.reserve(chunk.size());
        for (const auto& seq : chunk) {
          const auto lg = backward(params, config, make_batch(config, std::span(&seq, 1)));
          step_loss += lg.loss;
          per.push_back(lg.grad.flatten());
        }
        step_loss /= static_cast<double>(chunk.size());
        if (dp) {
          grad = privacy::clip_and_noise<float>(per, *dp, noise_rng);
        } else {
          grad.assign(flat.size(), 0.0f);
          for (const auto& g : per) {
            for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
          }
          const auto count = static_cast<float>(per.size());
          for (auto& v : grad) v /= count;
        }
      }
      if (!std::isfinite(step_loss)) {
        throw NumericalError("train: loss diverged at step " + std::to_string(step));
      }
      double lr = options.learning_rate;
      if (options.cosine_decay && total_steps > 1) {
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
      }
      adam.step(flat, grad, lr);
      params.unflatten(flat);
      result.loss_trace.push_back(step_loss);
      if (options.on_step) options.on_step(step, step_loss);
      ++step;
    }
    ++epoch;
    save_epoch_checkpoint(options, config, params, epoch);
  }
  result.steps = step;
  result.params = std::move(params);
  if (dp) {
    privacy::DpSgdConfig used = *dp;
    used.steps = std::max<std::size_t>(1, step);
    used.batch_fraction = static_cast<double>(batch_size) / static_cast<double>(n);
    const auto budget = privacy::dp_sgd_budget(used);
    result.privacy.mode = "dp-sgd";
    result.privacy.eps = budget.eps;
    result.privacy.delta = budget.delta;
    result.privacy.sigma = dp->noise_multiplier;
    result.privacy.clip = dp->clip_norm;
  }
  return result;
}

std::vector<TokenSequence> generate(const CgtParams<float>& params, const CgtConfig& config, std::size_t count,
                                    std::span<const double> label_weights, double temperature, std::uint64_t seed) {
  config.validate();
  if (count == 0) throw ValidationError("generate: count must be positive");
  if (label_weights.size() != config.labels) throw ValidationError("generate: label distribution size mismatch");
  double total = 0.0;
  for (const double w : label_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("generate: label weights must be finite and >= 0");
    total += w;
  }
  if (!(total > 0.0)) throw ValidationError("generate: label distribution has no mass");

  // Paths are ancestor chains, so a path-trained model is queried with ancestor masks.
  CgtConfig gen = config;
  gen.variant = CgtVariant::kFullSequence;
  if (config.variant == CgtVariant::kCostEfficient) gen.use_ancestor_mask = true;
  const TreeShape& shape = gen.shape;
  const std::uint32_t T = shape.size();
  const std::int32_t null = gen.null_token();
  const auto vocab = static_cast<Eigen::Index>(gen.vocab);

  std::vector<TokenSequence> out(count);
  std::vector<Rng> rngs;
  rngs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    rngs.emplace_back(derive_seed(seed, seed_tag("generate"), i));
    out[i].root_label = static_cast<Label>(rngs[i].categorical(label_weights));
    out[i].tokens.assign(T, null);
  }

  // With ancestor masks every position of a layer depends only on earlier
  // layers, so one forward pass fills a whole layer.
  std::vector<std::pair<std::uint32_t, std::uint32_t>> stages;
  if (gen.use_ancestor_mask) {
    for (std::uint32_t l = 0; l <= shape.depth(); ++l) {
      stages.emplace_back(shape.level_begin(l), shape.level_begin(l) + shape.level_size(l));
    }
  } else {
    for (std::uint32_t t = 1; t <= T; ++t) stages.emplace_back(t, t + 1);
  }

  constexpr std::size_t kChunk = 128;
  std::vector<double> probs(static_cast<std::size_t>(vocab));
  for (std::size_t begin = 0; begin < count; begin += kChunk) {
    const std::size_t end = std::min(count, begin + kChunk);
    const std::span<TokenSequence> part(out.data() + begin, end - begin);
    for (const auto& [first, last] : stages) {
      const Batch batch = make_batch(gen, part);
      ad::Tape<float> tape;
      const auto& logits = tape.value(forward_on_tape(tape, params, gen, batch, false));
      for (std::size_t b = 0; b < part.size(); ++b) {
        auto& seq = part[b];
        Rng& rng = rngs[begin + b];
        for (std::uint32_t t = first; t < last; ++t) {
          if (t > 1 && seq.tokens[shape.parent(t) - 1] == null) {
            seq.tokens[t - 1] = null;
            continue;
          }
          const auto row = logits.row(static_cast<Eigen::Index>(b * T + t - 1));
          const Eigen::Index allowed = t == 1 ? vocab - 1 : vocab;
          if (!(temperature > 0.0)) {
            Eigen::Index best = 0;
            for (Eigen::Index j = 1; j < allowed; ++j) {
              if (row(j) > row(best)) best = j;
            }
            seq.tokens[t - 1] = static_cast<std::int32_t>(best);
            continue;
          }
          double mx = -std::numeric_limits<double>::infinity();
          for (Eigen::Index j = 0; j < allowed; ++j) mx = std::max(mx, static_cast<double>(row(j)) / temperature);
          for (Eigen::Index j = 0; j < vocab; ++j) {
            probs[j] = j < allowed ? std::exp(static_cast<double>(row(j)) / temperature - mx) : 0.0;
          }
          seq.tokens[t - 1] = static_cast<std::int32_t>(rng.categorical(std::span<const double>(probs)));
        }
      }
    }
  }
  return out;
}

std::uint64_t measure_epoch_attention_flops(const CgtParams<float>& params, const CgtConfig& config,
                                            std::span<const TokenSequence> data, std::size_t batch_size) {
  if (batch_size == 0) throw ValidationError("measure_epoch_attention_flops: batch_size must be positive");
  ad::AttentionCounter counter;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const auto part = data.subspan(begin, std::min(batch_size, data.size() - begin));
    const Batch batch = make_batch(config, part);
    ad::Tape<float> tape;
    forward_on_tape(tape, params, config, batch, false, nullptr, &counter);
  }
  return counter.flops;
}

void save_checkpoint(const std::filesystem::path& path, const CgtConfig& config, const CgtParams<float>& params) {
  io::BinaryWriter w(path);
  w.magic("CGT1");
  w.u32(kCheckpointVersion);
  w.u32(config.vocab);
  w.u32(config.labels);
  w.u32(config.dim);
  w.u32(config.heads);
  w.u32(config.layers);
  w.u32(config.mlp_ratio);
  w.u32(config.shape.fanout());
  w.u32(config.shape.depth());
  w.u8(static_cast<std::uint8_t>(config.variant));
  w.u8(config.use_label ? 1 : 0);
  w.u8(config.use_layer_positions ? 1 : 0);
  w.u8(config.use_ancestor_mask ? 1 : 0);
  params.for_each([&](const Mat<float>& m) {
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    w.f32s({m.data(), static_cast<std::size_t>(m.size())});
  });
  w.close();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("CGT1");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw ValidationError("model.cgt: unsupported version " + std::to_string(version));
  Checkpoint ck;
  auto& c = ck.config;
  c.vocab = r.u32();
  c.labels = r.u32();
  c.dim = r.u32();
  c.heads = r.u32();
  c.layers = r.u32();
  c.mlp_ratio = r.u32();
  const auto s = r.u32();
  const auto L = r.u32();
  c.shape = TreeShape(s, L);
  const auto variant = r.u8();
  if (variant > 1) throw ValidationError("model.cgt: unknown variant");
  c.variant = static_cast<CgtVariant>(variant);
  c.use_label = r.u8() != 0;
  c.use_layer_positions = r.u8() != 0;
  c.use_ancestor_mask = r.u8() != 0;
  c.validate();
  // Shapes come from a freshly initialized layout and must match the file.
  ck.params = init_params<float>(c, 0);
  ck.params.for_each([&](Mat<float>& m) {
    const auto rows = r.u32();
    const auto cols = r.u32();
    if (rows != m.rows() || cols != m.cols()) throw ValidationError("model.cgt: tensor shape mismatch");
    r.f32s({m.data(), static_cast<std::size_t>(m.size())});
  });
  if (!r.at_end()) throw ValidationError("model.cgt: trailing bytes");
  for (const float v : ck.params.flatten()) {
    if (!std::isfinite(v)) throw NumericalError("model.cgt: non-finite parameter");
  }
  return ck;
}

void write_loss_trace(const std::filesystem::path& path, std::span<const double> trace) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out << i << ',' << io::format_shortest(trace[i]) << '\n';
  if (!out) throw ValidationError("write failed: " + path.string());
}

#define CGT_INSTANTIATE(Scalar)                                                                                     \
  template struct CgtParams<Scalar>;                                                                                \
  template CgtParams<Scalar> init_params<Scalar>(const CgtConfig&, std::uint64_t);                                  \
  template ad::Var forward_on_tape<Scalar>(ad::Tape<Scalar>&, const CgtParams<Scalar>&, const CgtConfig&,          \
                                           const Batch&, bool, ad::Var*, ad::AttentionCounter*,                     \
                                           std::vector<ad::Var>*);                                                  \
  template ad::Matrix<Scalar> forward<Scalar>(const CgtParams<Scalar>&, const CgtConfig&,                          \
                                              std::span<const std::int32_t>, Label);                                \
  template ad::Matrix<Scalar> forward_path<Scalar>(const CgtParams<Scalar>&, const CgtConfig&,                     \
                                                   const PathSequence&);                                            \
  template Scalar loss<Scalar>(const CgtParams<Scalar>&, const CgtConfig&, const Batch&);                          \
  template LossAndGrad<Scalar> backward<Scalar>(const CgtParams<Scalar>&, const CgtConfig&, const Batch&);

CGT_INSTANTIATE(float)
CGT_INSTANTIATE(double)

#undef CGT_INSTANTIATE

}  // namespace cgt
