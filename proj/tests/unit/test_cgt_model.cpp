#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "cgt/cgt_model.hpp"
#include "cgt/error.hpp"
#include "test_util.hpp"

using namespace cgt;
using cgt::testing::TempDir;

namespace {

CgtConfig small_config(std::uint32_t s = 2, std::uint32_t L = 2) {
  CgtConfig c;
  c.vocab = 7;
  c.labels = 3;
  c.dim = 8;
  c.heads = 2;
  c.layers = 2;
  c.shape = TreeShape(s, L);
  return c;
}

// Random valid sequence: non-null root, children of null nodes null.
TokenSequence random_sequence(const CgtConfig& c, Rng& rng, double null_rate = 0.25) {
  TokenSequence ts;
  ts.root_label = static_cast<Label>(rng.below(c.labels));
  const auto T = c.shape.size();
  ts.tokens.assign(T, c.null_token());
  ts.tokens[0] = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(c.null_token())));
  for (std::uint32_t t = 2; t <= T; ++t) {
    if (ts.tokens[c.shape.parent(t) - 1] == c.null_token()) continue;
    ts.tokens[t - 1] = rng.uniform() < null_rate
                           ? c.null_token()
                           : static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(c.null_token())));
  }
  return ts;
}

std::vector<TokenSequence> random_sequences(const CgtConfig& c, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_sequence(c, rng));
  return out;
}

// Rows of h^(0) that logits row `t` (1-indexed) depends on, by gradient.
std::set<std::uint32_t> dependency_rows(const CgtParams<double>& params, const CgtConfig& c, const Batch& batch,
                                        std::uint32_t row) {
  ad::Tape<double> tape;
  ad::Var h0;
  const ad::Var logits = forward_on_tape(tape, params, c, batch, false, &h0);
  ad::Matrix<double> w = ad::Matrix<double>::Zero(tape.value(logits).rows(), tape.value(logits).cols());
  Rng rng(row);
  for (Eigen::Index j = 0; j < w.cols(); ++j) w(row, j) = rng.normal();
  tape.backward(tape.dot_constant(logits, w));
  const auto g = tape.grad(h0);
  std::set<std::uint32_t> deps;
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    if (!g.row(r).isZero(0.0)) deps.insert(static_cast<std::uint32_t>(r));
  }
  return deps;
}

template <typename T>
bool bit_equal(const ad::Matrix<T>& a, const ad::Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<std::size_t>(a.size())) == 0;
}

bool params_equal(const CgtParams<float>& a, const CgtParams<float>& b) {
  const auto fa = a.flatten(), fb = b.flatten();
  return fa.size() == fb.size() && std::memcmp(fa.data(), fb.data(), fa.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = small_config();
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = small_config();
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = small_config();
  c.vocab = 1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = small_config();
  CHECK(c.num_positions() == 3);
  c.use_layer_positions = false;
  CHECK(c.num_positions() == 7);
}

TEST_CASE("full-sequence masks follow the tree") {
  const auto c = small_config(2, 2);
  std::vector<std::uint8_t> ctx, qry;
  full_sequence_masks(c, ctx, qry);
  const auto T = c.shape.size();
  for (std::uint32_t t = 1; t <= T; ++t) {
    const auto anc = c.shape.ancestors(t);
    const std::set<std::uint32_t> a(anc.begin(), anc.end());
    for (std::uint32_t u = 1; u <= T; ++u) {
      CHECK(qry[(t - 1) * T + (u - 1)] == (a.contains(u) ? 1 : 0));
      CHECK(ctx[(t - 1) * T + (u - 1)] == (a.contains(u) || u == t ? 1 : 0));
    }
  }
  auto causal = c;
  causal.use_ancestor_mask = false;
  full_sequence_masks(causal, ctx, qry);
  for (std::uint32_t t = 1; t <= T; ++t) {
    for (std::uint32_t u = 1; u <= T; ++u) {
      CHECK(qry[(t - 1) * T + (u - 1)] == (u < t ? 1 : 0));
      CHECK(ctx[(t - 1) * T + (u - 1)] == (u <= t ? 1 : 0));
    }
  }
}

TEST_CASE("logits depend only on ancestors (gradient audit)") {
  for (const auto& [s, L] : std::vector<std::pair<std::uint32_t, std::uint32_t>>{{2, 2}, {3, 2}, {2, 3}}) {
    auto c = small_config(s, L);
    const auto params = init_params<double>(c, 3);
    Rng rng(s * 10 + L);
    const std::vector<TokenSequence> seqs{random_sequence(c, rng, 0.0)};
    const Batch batch = make_batch(c, seqs);
    for (std::uint32_t t = 1; t <= c.shape.size(); ++t) {
      const auto anc = c.shape.ancestors(t);
      std::set<std::uint32_t> want;
      for (const auto a : anc) want.insert(a - 1);
      CHECK(dependency_rows(params, c, batch, t - 1) == want);
    }
  }
}

TEST_CASE("without the ancestor mask logits see every earlier position") {
  auto c = small_config(2, 2);
  c.use_ancestor_mask = false;
  const auto params = init_params<double>(c, 4);
  Rng rng(1);
  const std::vector<TokenSequence> seqs{random_sequence(c, rng, 0.0)};
  const Batch batch = make_batch(c, seqs);
  for (std::uint32_t t = 1; t <= c.shape.size(); ++t) {
    std::set<std::uint32_t> want;
    for (std::uint32_t u = 1; u < t; ++u) want.insert(u - 1);
    CHECK(dependency_rows(params, c, batch, t - 1) == want);
  }
}

TEST_CASE("analytic gradients match central differences in double precision") {
  for (const auto variant : {CgtVariant::kFullSequence, CgtVariant::kCostEfficient}) {
    auto c = small_config(2, 2);
    c.variant = variant;
    c.use_layer_positions = variant == CgtVariant::kFullSequence;
    auto params = init_params<double>(c, 9);
    // Larger weights than the default init make the check more sensitive.
    auto flat = params.flatten();
    Rng rng(5);
    for (auto& v : flat) v += 0.1 * rng.normal();
    params.unflatten(flat);
    const auto data = random_sequences(c, 3, 6);
    const Batch batch = make_batch(c, data);
    const auto lg = backward(params, c, batch);
    const auto grad = lg.grad.flatten();
    CHECK(lg.loss == doctest::Approx(loss(params, c, batch)));
    const double h = 1e-6;
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t i = rng.below(flat.size());
      auto plus = params, minus = params;
      auto fp = flat, fm = flat;
      fp[i] += h;
      fm[i] -= h;
      plus.unflatten(fp);
      minus.unflatten(fm);
      const double numeric = (loss(plus, c, batch) - loss(minus, c, batch)) / (2 * h);
      INFO("coordinate ", i);
      CHECK(std::abs(grad[i] - numeric) <= 1e-5 * std::max({std::abs(numeric), std::abs(grad[i]), 1e-3}));
    }
  }
}

TEST_CASE("full-sequence and path logits agree") {
  for (const bool layer_positions : {true, false}) {
    auto c = small_config(3, 2);
    c.use_layer_positions = layer_positions;
    const auto params = init_params<float>(c, 2);
    Rng rng(8);
    for (int i = 0; i < 10; ++i) {
      const auto ts = random_sequence(c, rng);
      const auto full = forward(params, c, ts.tokens, ts.root_label);
      for (const auto& path : split_paths(ts, c.shape)) {
        const auto lp = forward_path(params, c, path);
        for (std::size_t d = 0; d < path.positions.size(); ++d) {
          const auto diff = (lp.row(static_cast<Eigen::Index>(d)) - full.row(path.positions[d] - 1)).cwiseAbs().maxCoeff();
          CHECK(diff <= 1e-5f);
        }
      }
    }
  }
}

TEST_CASE("both variants score each tree position once and give the same loss") {
  auto c = small_config(2, 2);
  const auto data = random_sequences(c, 5, 12);
  const auto full = make_batch(c, data);
  auto ce_cfg = c;
  ce_cfg.variant = CgtVariant::kCostEfficient;
  const auto paths = make_batch(ce_cfg, data);
  CHECK(full.num_sequences() == 5);
  CHECK(paths.num_sequences() == 5 * c.shape.num_leaves());
  CHECK(paths.length == c.shape.depth() + 1);
  double wf = 0.0, wp = 0.0;
  for (const float w : full.loss_weights) wf += w;
  for (const float w : paths.loss_weights) wp += w;
  CHECK(wf == wp);
  // Positions whose parent is null are not scored; the root always is.
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(full.loss_weights[i * 7] == 1.0f);
    for (std::uint32_t t = 2; t <= 7; ++t) {
      const bool parent_null = data[i].tokens[c.shape.parent(t) - 1] == c.null_token();
      CHECK(full.loss_weights[i * 7 + t - 1] == (parent_null ? 0.0f : 1.0f));
    }
  }
  const auto params = init_params<double>(c, 1);
  CHECK(loss(params, c, full) == doctest::Approx(loss(params, ce_cfg, paths)).epsilon(1e-12));
}

TEST_CASE("attention work scales as T^2 for full sequences and (L+1)^2 s^L for paths") {
  for (const auto& [s, L] : std::vector<std::pair<std::uint32_t, std::uint32_t>>{{2, 2}, {3, 2}, {2, 3}}) {
    auto full = small_config(s, L);
    auto paths = full;
    paths.variant = CgtVariant::kCostEfficient;
    const auto data = random_sequences(full, 20, s + L);
    const auto params = init_params<float>(full, 0);
    const double T = full.shape.size();
    const double per_call = 2.0 * full.dim * 20;
    const double calls = 2.0 * full.layers - 1.0;
    CHECK(measure_epoch_attention_flops(params, full, data) == doctest::Approx(calls * per_call * T * T));
    const double len = L + 1.0;
    CHECK(measure_epoch_attention_flops(params, paths, data) ==
          doctest::Approx(calls * per_call * len * len * full.shape.num_leaves()));
  }
}

TEST_CASE("invalid inputs are rejected") {
  const auto c = small_config();
  Rng rng(0);
  auto ts = random_sequence(c, rng);
  ts.tokens[0] = 99;
  const std::vector<TokenSequence> bad{ts};
  CHECK_THROWS_AS(make_batch(c, bad), ValidationError);
  ts = random_sequence(c, rng);
  ts.root_label = 7;
  const std::vector<TokenSequence> bad_label{ts};
  CHECK_THROWS_AS(make_batch(c, bad_label), ValidationError);
  CHECK_THROWS_AS(make_batch(c, std::span<const TokenSequence>{}), ValidationError);
}

TEST_CASE("checkpoints round-trip bit-exactly and reject corruption") {
  TempDir dir("checkpoint");
  auto c = small_config();
  c.variant = CgtVariant::kCostEfficient;
  c.use_label = false;
  const auto params = init_params<float>(c, 5);
  save_checkpoint(dir / "m.cgt", c, params);
  const auto ck = load_checkpoint(dir / "m.cgt");
  CHECK(ck.config == c);
  CHECK(params_equal(ck.params, params));

  {
    std::ofstream out(dir / "m.cgt", std::ios::binary | std::ios::app);
    out << 'x';
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "m.cgt"), ValidationError);
  auto bad = params;
  bad.final_bias(0, 0) = std::numeric_limits<float>::quiet_NaN();
  save_checkpoint(dir / "nan.cgt", c, bad);
  CHECK_THROWS_AS(load_checkpoint(dir / "nan.cgt"), NumericalError);
  CHECK_THROWS_AS(load_checkpoint(dir / "none.cgt"), MissingArtifactError);
}

TEST_CASE("training is deterministic and reduces the loss") {
  auto c = small_config();
  const auto data = random_sequences(c, 40, 3);
  TrainOptions o;
  o.epochs = 15;
  o.batch_size = 8;
  o.learning_rate = 1e-2;
  const auto a = train(data, c, o, std::nullopt, 11);
  const auto b = train(data, c, o, std::nullopt, 11);
  CHECK(params_equal(a.params, b.params));
  CHECK(a.loss_trace == b.loss_trace);
  CHECK(a.steps == 75);
  CHECK(a.loss_trace.back() < a.loss_trace.front());
  const auto other = train(data, c, o, std::nullopt, 12);
  CHECK_FALSE(params_equal(a.params, other.params));
  CHECK(a.privacy.mode == "none");

  o.max_steps = 10;
  CHECK(train(data, c, o, std::nullopt, 11).steps == 10);
}

TEST_CASE("DP-SGD without noise or clipping reproduces plain training bit for bit") {
  auto c = small_config();
  const auto data = random_sequences(c, 24, 4);
  TrainOptions o;
  o.epochs = 3;
  o.batch_size = 6;
  o.learning_rate = 5e-3;
  o.per_example_gradients = true;
  privacy::DpSgdConfig dp;
  dp.noise_multiplier = 0.0;
  dp.clip_norm = std::numeric_limits<double>::infinity();
  const auto plain = train(data, c, o, std::nullopt, 21);
  const auto priv = train(data, c, o, dp, 21);
  CHECK(params_equal(plain.params, priv.params));
  CHECK(plain.loss_trace == priv.loss_trace);
  CHECK(priv.privacy.mode == "dp-sgd");
  CHECK(std::isinf(priv.privacy.eps));

  dp.noise_multiplier = 1.0;
  dp.clip_norm = 1.0;
  const auto noisy = train(data, c, o, dp, 21);
  CHECK_FALSE(params_equal(plain.params, noisy.params));
  CHECK(std::isfinite(noisy.privacy.eps));
}

TEST_CASE("epoch checkpoints are written on schedule") {
  TempDir dir("epoch-ckpt");
  auto c = small_config();
  const auto data = random_sequences(c, 8, 1);
  TrainOptions o;
  o.epochs = 4;
  o.batch_size = 4;
  o.checkpoint_every_epochs = 2;
  o.checkpoint_dir = dir.path();
  const auto r = train(data, c, o, std::nullopt, 0);
  CHECK(std::filesystem::exists(dir / "model_epoch2.cgt"));
  CHECK(std::filesystem::exists(dir / "model_epoch4.cgt"));
  CHECK_FALSE(std::filesystem::exists(dir / "model_epoch1.cgt"));
  CHECK(params_equal(load_checkpoint(dir / "model_epoch4.cgt").params, r.params));
}

TEST_CASE("generation respects tree structure and is reproducible") {
  for (const auto variant : {CgtVariant::kFullSequence, CgtVariant::kCostEfficient}) {
    for (const bool ancestor : {true, false}) {
      auto c = small_config(3, 2);
      c.variant = variant;
      c.use_ancestor_mask = ancestor;
      const auto params = init_params<float>(c, 8);
      const std::vector<double> weights{0.0, 1.0, 3.0};
      const auto gen = generate(params, c, 300, weights, 1.0, 5);
      REQUIRE(gen.size() == 300);
      std::map<Label, int> labels;
      for (const auto& ts : gen) {
        REQUIRE(ts.tokens.size() == c.shape.size());
        CHECK(ts.tokens[0] != c.null_token());
        ++labels[ts.root_label];
        for (std::uint32_t t = 2; t <= c.shape.size(); ++t) {
          if (ts.tokens[c.shape.parent(t) - 1] == c.null_token()) CHECK(ts.tokens[t - 1] == c.null_token());
        }
      }
      CHECK(labels[0] == 0);
      CHECK(labels[2] > labels[1]);
      const auto again = generate(params, c, 300, weights, 1.0, 5);
      CHECK(again == gen);
      // Sample i does not depend on how many samples are requested.
      const auto prefix = generate(params, c, 7, weights, 1.0, 5);
      CHECK(std::equal(prefix.begin(), prefix.end(), gen.begin()));
    }
  }
}

TEST_CASE("greedy generation picks the most likely token") {
  auto c = small_config(2, 1);
  const auto params = init_params<float>(c, 3);
  const std::vector<double> weights{1.0, 0.0, 0.0};
  const auto gen = generate(params, c, 3, weights, 0.0, 1);
  for (const auto& ts : gen) {
    const auto logits = forward(params, c, ts.tokens, ts.root_label);
    for (std::uint32_t t = 1; t <= c.shape.size(); ++t) {
      if (t > 1 && ts.tokens[c.shape.parent(t) - 1] == c.null_token()) continue;
      Eigen::Index best = 0;
      const auto row = logits.row(t - 1);
      const Eigen::Index limit = t == 1 ? c.null_token() : static_cast<Eigen::Index>(c.vocab);
      for (Eigen::Index j = 1; j < limit; ++j) {
        if (row(j) > row(best)) best = j;
      }
      CHECK(ts.tokens[t - 1] == best);
    }
  }
  CHECK(gen[0] == gen[1]);
}
