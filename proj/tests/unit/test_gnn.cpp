#include <doctest.h>

#include <cmath>
#include <vector>

#include "cgt/error.hpp"
#include "cgt/gnn.hpp"
#include "test_util.hpp"

using namespace cgt;
using cgt::testing::TempDir;
using MatD = Eigen::MatrixXd;

namespace {

MatD to_double(const ad::Matrix<float>& m) { return m.cast<double>(); }

// Straightforward per-position evaluation of the message-passing equations.
MatD reference_forward(const GnnConfig& cfg, const GnnParams& p, const EncodedComputationGraph& cg) {
  const TreeShape& shape = cg.shape;
  const std::uint32_t s = shape.fanout();
  const std::uint32_t T = shape.size();
  std::vector<bool> null(T, false);
  for (std::uint32_t t = 2; t <= T; ++t) null[t - 1] = is_null_row(cg.rows, t - 1);
  std::vector<Eigen::RowVectorXd> h(T);
  for (std::uint32_t t = 1; t <= T; ++t) h[t - 1] = cg.rows.row(t - 1).cast<double>();
  auto relu = [](Eigen::RowVectorXd v) { return v.cwiseMax(0.0); };
  for (std::uint32_t l = 1; l <= cfg.layers; ++l) {
    const auto& lp = p.layers[l - 1];
    std::vector<Eigen::RowVectorXd> next(T);
    for (std::uint32_t t = 1; t <= T; ++t) {
      if (shape.layer(t) > cfg.layers - l) continue;
      const std::uint32_t c0 = shape.first_child(t);
      Eigen::RowVectorXd out;
      switch (cfg.aggregator) {
        case Aggregator::kMean:
        case Aggregator::kLinear: {
          Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(h[t - 1].size());
          for (std::uint32_t j = 0; j < s; ++j) mean += h[c0 + j - 1];
          mean /= s;
          out = h[t - 1] * to_double(lp[0]) + mean * to_double(lp[1]) + to_double(lp[2]);
          if (cfg.aggregator == Aggregator::kMean) out = relu(out);
          break;
        }
        case Aggregator::kSum: {
          Eigen::RowVectorXd agg = (1.0 + cfg.gin_eps) * h[t - 1];
          for (std::uint32_t j = 0; j < s; ++j) agg += h[c0 + j - 1];
          out = relu(agg * to_double(lp[0]) + to_double(lp[1]));
          break;
        }
        case Aggregator::kAttention: {
          const MatD w = to_double(lp[0]);
          const Eigen::RowVectorXd zu = h[t - 1] * w;
          std::vector<Eigen::RowVectorXd> zc(s);
          std::vector<double> e(s);
          double total = 0.0;
          for (std::uint32_t j = 0; j < s; ++j) {
            zc[j] = h[c0 + j - 1] * w;
            const double pre = (zu * to_double(lp[1]))(0, 0) + (zc[j] * to_double(lp[2]))(0, 0);
            e[j] = std::exp(pre > 0 ? pre : cfg.attention_slope * pre);
            total += e[j];
          }
          Eigen::RowVectorXd agg = zu;
          for (std::uint32_t j = 0; j < s; ++j) agg += e[j] / total * zc[j];
          out = relu(agg + to_double(lp[3]));
          break;
        }
      }
      next[t - 1] = null[t - 1] ? Eigen::RowVectorXd::Zero(out.size()) : out;
    }
    h = std::move(next);
  }
  return h[0] * to_double(p.classifier_w) + to_double(p.classifier_b);
}

EncodedComputationGraph random_tree(const TreeShape& shape, std::size_t d, Rng& rng, double null_rate) {
  EncodedComputationGraph cg;
  cg.shape = shape;
  cg.rows = FeatureMatrix::Zero(shape.size(), static_cast<Eigen::Index>(d));
  cg.root_label = static_cast<Label>(rng.below(2));
  std::vector<bool> null(shape.size(), false);
  for (std::uint32_t t = 1; t <= shape.size(); ++t) {
    null[t - 1] = t > 1 && (null[shape.parent(t) - 1] || rng.uniform() < null_rate);
    if (null[t - 1]) continue;
    for (std::size_t j = 0; j < d; ++j) cg.rows(t - 1, static_cast<Eigen::Index>(j)) = static_cast<float>(rng.normal());
  }
  return cg;
}

}  // namespace

TEST_CASE("aggregator names") {
  CHECK(parse_aggregator("gcn") == Aggregator::kMean);
  CHECK(parse_aggregator("sgc") == Aggregator::kLinear);
  CHECK(parse_aggregator("gin") == Aggregator::kSum);
  CHECK(parse_aggregator("gat") == Aggregator::kAttention);
  CHECK(parse_aggregator("mean") == Aggregator::kMean);
  CHECK(model_name(Aggregator::kAttention) == "GAT");
  CHECK(parse_aggregator(to_string(Aggregator::kSum)) == Aggregator::kSum);
  CHECK_THROWS_AS(parse_aggregator("mlp"), ValidationError);
}

TEST_CASE("forward pass matches the reference equations") {
  Rng rng(3);
  for (const auto agg : {Aggregator::kMean, Aggregator::kLinear, Aggregator::kSum, Aggregator::kAttention}) {
    for (const auto& [s, L] : std::vector<std::pair<std::uint32_t, std::uint32_t>>{{2, 1}, {3, 2}, {2, 3}}) {
      GnnConfig cfg;
      cfg.aggregator = agg;
      cfg.layers = L;
      cfg.hidden = 5;
      cfg.gin_eps = 0.3;
      const auto params = init_gnn(cfg, 4, 3, rng());
      for (int i = 0; i < 5; ++i) {
        const auto cg = random_tree(TreeShape(s, L), 4, rng, 0.3);
        const MatD got = gnn_forward(cfg, params, cg).cast<double>();
        const MatD want = reference_forward(cfg, params, cg);
        CHECK((got - want).cwiseAbs().maxCoeff() < 1e-4);
      }
    }
  }
}

TEST_CASE("a hand-computed mean layer") {
  // s = 2, L = 1, scalar features: root 1, children 2 and null.
  GnnConfig cfg;
  cfg.layers = 1;
  cfg.hidden = 1;
  GnnParams p = init_gnn(cfg, 1, 1, 0);
  p.layers[0][0](0, 0) = 0.5f;   // self
  p.layers[0][1](0, 0) = 2.0f;   // children
  p.layers[0][2](0, 0) = -0.1f;  // bias
  p.classifier_w(0, 0) = 3.0f;
  p.classifier_b(0, 0) = 1.0f;
  EncodedComputationGraph cg;
  cg.shape = TreeShape(2, 1);
  cg.rows = FeatureMatrix(3, 1);
  cg.rows << 1.0f, 2.0f, 0.0f;
  // relu(0.5 * 1 + 2 * (2 + 0) / 2 - 0.1) = 2.4; logit = 3 * 2.4 + 1.
  CHECK(gnn_forward(cfg, p, cg)(0, 0) == doctest::Approx(8.2));
}

TEST_CASE("null children stay zero for every layer") {
  // Internal null node with a nonzero bias must not leak into the root.
  GnnConfig cfg;
  cfg.aggregator = Aggregator::kSum;
  cfg.layers = 2;
  cfg.hidden = 3;
  auto params = init_gnn(cfg, 2, 2, 1);
  params.layers[0][1].setConstant(5.0f);
  EncodedComputationGraph a;
  a.shape = TreeShape(2, 2);
  a.rows = FeatureMatrix::Zero(7, 2);
  a.rows.row(0) << 1.0f, -1.0f;
  a.rows.row(1) << 0.5f, 0.5f;
  const auto logits = gnn_forward(cfg, params, a);
  CHECK((logits.cast<double>() - reference_forward(cfg, params, a)).cwiseAbs().maxCoeff() < 1e-5);
  // Changing nothing but the bias of layer 1 changes the result only through non-null nodes.
  auto b = a;
  b.rows.row(1).setZero();
  const auto only_root = gnn_forward(cfg, params, b);
  CHECK((only_root.cast<double>() - reference_forward(cfg, params, b)).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("depth mismatch is rejected") {
  GnnConfig cfg;
  cfg.layers = 2;
  const auto params = init_gnn(cfg, 3, 2, 0);
  Rng rng(1);
  const auto cg = random_tree(TreeShape(2, 3), 3, rng, 0.0);
  CHECK_THROWS_AS(gnn_forward(cfg, params, cg), ValidationError);
}

TEST_CASE("parameter gradients match finite differences") {
  Rng rng(7);
  for (const auto agg : {Aggregator::kMean, Aggregator::kLinear, Aggregator::kSum, Aggregator::kAttention}) {
    GnnConfig cfg;
    cfg.aggregator = agg;
    cfg.layers = 2;
    cfg.hidden = 4;
    auto params = init_gnn(cfg, 3, 2, rng());
    std::vector<EncodedComputationGraph> trees;
    for (int i = 0; i < 4; ++i) trees.push_back(random_tree(TreeShape(2, 2), 3, rng, 0.2));
    const TreeBatch batch = stack_trees(trees);
    const std::vector<float> w(batch.count, 1.0f);
    auto loss = [&](const GnnParams& p, std::vector<float>* grad) {
      ad::Tape<float> tape;
      std::vector<ad::Var> vars;
      const auto nll = tape.cross_entropy(gnn_forward_on_tape(tape, cfg, p, batch, grad != nullptr, &vars), batch.labels, w);
      if (grad != nullptr) {
        tape.backward(nll);
        for (const auto v : vars) {
          const auto g = tape.grad(v);
          grad->insert(grad->end(), g.data(), g.data() + g.size());
        }
      }
      return static_cast<double>(tape.value(nll)(0, 0));
    };
    std::vector<float> grad;
    loss(params, &grad);
    const auto flat = params.flatten();
    REQUIRE(grad.size() == flat.size());
    const float h = 1e-2f;
    int checked = 0;
    for (std::size_t i = 0; i < flat.size(); i += 3) {
      auto fp = flat, fm = flat;
      fp[i] += h;
      fm[i] -= h;
      GnnParams pp = params, pm = params;
      pp.unflatten(fp);
      pm.unflatten(fm);
      const double numeric = (loss(pp, nullptr) - loss(pm, nullptr)) / (2.0 * h);
      INFO(to_string(agg), " coordinate ", i);
      CHECK(std::abs(grad[i] - numeric) <= 2e-2 * std::max(1.0, std::abs(numeric)));
      ++checked;
    }
    CHECK(checked > 10);
  }
}

TEST_CASE("training separates an easy dataset and is deterministic") {
  // Class decided by the sign of the root's first feature, shifted away from zero.
  Rng rng(5);
  std::vector<EncodedComputationGraph> train, test;
  for (int i = 0; i < 160; ++i) {
    auto cg = random_tree(TreeShape(2, 2), 3, rng, 0.1);
    cg.root_label = cg.rows(0, 0) > 0 ? 1 : 0;
    cg.rows(0, 0) += cg.root_label == 1 ? 6.0f : -6.0f;
    (i < 100 ? train : test).push_back(cg);
  }
  for (const auto agg : {Aggregator::kMean, Aggregator::kLinear, Aggregator::kSum, Aggregator::kAttention}) {
    GnnConfig cfg;
    cfg.aggregator = agg;
    cfg.hidden = 16;
    cfg.epochs = 150;
    cfg.repeats = 2;
    INFO(to_string(agg));
    const auto r = train_eval(cfg, train, test, 2, 3);
    CHECK(r.model == model_name(agg));
    CHECK(r.runs.size() == 2);
    CHECK(r.accuracy > 0.9);
    const auto again = train_eval(cfg, train, test, 2, 3);
    CHECK(again.runs == r.runs);
  }
}

TEST_CASE("accuracy statistics over repeats") {
  Rng rng(2);
  std::vector<EncodedComputationGraph> data;
  for (int i = 0; i < 40; ++i) data.push_back(random_tree(TreeShape(2, 2), 2, rng, 0.2));
  GnnConfig cfg;
  cfg.epochs = 5;
  cfg.repeats = 3;
  const auto r = train_eval(cfg, data, data, 2, 9);
  double mean = 0.0;
  for (const double a : r.runs) mean += a / 3.0;
  double var = 0.0;
  for (const double a : r.runs) var += (a - mean) * (a - mean) / 2.0;
  CHECK(r.accuracy == doctest::Approx(mean));
  CHECK(r.std == doctest::Approx(std::sqrt(var)));
}

TEST_CASE("bench reports round-trip") {
  TempDir dir("bench-report");
  std::vector<AccuracyRecord> records{{"original", "ne=0", "GCN", 0.75, 0.01, {}},
                                      {"generated", "ne=0", "GCN", 0.5, 0.0, {}}};
  write_bench_report(dir / "r.csv", records);
  const auto back = read_bench_report(dir / "r.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].dataset == "original");
  CHECK(back[1].scenario == "ne=0");
  CHECK(back[0].accuracy == 0.75);
  CHECK(back[0].std == 0.01);
  CHECK_THROWS_AS(read_bench_report(dir / "missing.csv"), MissingArtifactError);
}
