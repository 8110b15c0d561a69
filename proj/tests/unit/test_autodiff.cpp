#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "cgt/autodiff.hpp"
#include "cgt/random.hpp"

using namespace cgt;
using Mat = ad::Matrix<double>;
using Tape = ad::Tape<double>;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

using Builder = std::function<ad::Var(Tape&, const std::vector<ad::Var>&)>;

// Builds f(inputs) = sum(op(inputs) .* R) for a fixed random R and compares
// reverse-mode gradients with central differences for every input entry.
void check_gradients(const std::vector<Mat>& inputs, const Builder& op, double tol = 1e-6) {
  Rng rng(1234);
  Mat projection;
  auto evaluate = [&](const std::vector<Mat>& xs, std::vector<Mat>* grads) {
    Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x, grads != nullptr));
    const ad::Var out = op(tape, vars);
    if (projection.size() == 0) projection = random_mat(tape.value(out).rows(), tape.value(out).cols(), rng);
    const ad::Var f = tape.dot_constant(out, projection);
    const double value = tape.value(f)(0, 0);
    if (grads != nullptr) {
      tape.backward(f);
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return value;
  };
  std::vector<Mat> analytic;
  evaluate(inputs, &analytic);
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k].data()[i] += h;
      minus[k].data()[i] -= h;
      const double numeric = (evaluate(plus, nullptr) - evaluate(minus, nullptr)) / (2 * h);
      const double got = analytic[k].data()[i];
      INFO("input ", k, " entry ", i);
      CHECK(std::abs(got - numeric) <= tol * std::max(1.0, std::abs(numeric)));
    }
  }
}

}  // namespace

TEST_CASE("elementwise and linear ops") {
  Rng rng(1);
  const Mat a = random_mat(3, 4, rng), b = random_mat(3, 4, rng), row = random_mat(1, 4, rng);
  const Mat w = random_mat(4, 2, rng), wt = random_mat(5, 4, rng);
  check_gradients({a, b}, [](Tape& t, const auto& v) { return t.add(v[0], v[1]); });
  check_gradients({a, row}, [](Tape& t, const auto& v) { return t.add_row(v[0], v[1]); });
  check_gradients({a}, [](Tape& t, const auto& v) { return t.scale(v[0], -2.5); });
  check_gradients({a}, [](Tape& t, const auto& v) { return t.scale_rows(v[0], {0.5, 0.0, 3.0}); });
  check_gradients({a, w}, [](Tape& t, const auto& v) { return t.matmul(v[0], v[1]); });
  check_gradients({a, wt}, [](Tape& t, const auto& v) { return t.matmul_nt(v[0], v[1]); });
  check_gradients({a, w, random_mat(1, 2, rng)}, [](Tape& t, const auto& v) { return t.affine(v[0], v[1], v[2]); });
}

TEST_CASE("row gather, repeat and group sums") {
  Rng rng(2);
  const Mat table = random_mat(4, 3, rng);
  check_gradients({table}, [](Tape& t, const auto& v) { return t.gather_rows(v[0], {2, 0, 2, 3, 2}); });
  check_gradients({table}, [](Tape& t, const auto& v) { return t.repeat_rows(v[0], 3); });
  check_gradients({random_mat(6, 2, rng)}, [](Tape& t, const auto& v) { return t.group_sum(v[0], 3); });

  Tape tape;
  const auto x = tape.leaf(table);
  CHECK_THROWS_AS(tape.gather_rows(x, {4}), ValidationError);
  CHECK_THROWS_AS(tape.group_sum(x, 3), ValidationError);
  const Mat rep = tape.value(tape.repeat_rows(x, 2));
  CHECK(rep.row(0) == table.row(0));
  CHECK(rep.row(1) == table.row(0));
  CHECK(rep.row(2) == table.row(1));
}

TEST_CASE("nonlinearities") {
  Rng rng(3);
  // Keep entries away from the kinks of relu / leaky relu.
  Mat a = random_mat(4, 5, rng);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (std::abs(a.data()[i]) < 0.05) a.data()[i] += 0.1;
  }
  check_gradients({a}, [](Tape& t, const auto& v) { return t.relu(v[0]); });
  check_gradients({a}, [](Tape& t, const auto& v) { return t.leaky_relu(v[0], 0.2); });
  check_gradients({a}, [](Tape& t, const auto& v) { return t.gelu(v[0]); });

  Tape tape;
  Mat probe(1, 3);
  probe << -1.0, 0.0, 2.0;
  const Mat g = tape.value(tape.gelu(tape.leaf(probe)));
  for (int i = 0; i < 3; ++i) {
    const double x = probe(0, i);
    CHECK(g(0, i) == doctest::Approx(0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)))).epsilon(1e-3));
  }
}

TEST_CASE("layer norm") {
  Rng rng(4);
  const Mat x = random_mat(3, 6, rng), gain = random_mat(1, 6, rng), bias = random_mat(1, 6, rng);
  check_gradients({x, gain, bias}, [](Tape& t, const auto& v) { return t.layer_norm(v[0], v[1], v[2]); });

  Tape tape;
  const Mat y = tape.value(tape.layer_norm(tape.leaf(x), tape.leaf(Mat::Ones(1, 6)), tape.leaf(Mat::Zero(1, 6))));
  for (Eigen::Index r = 0; r < 3; ++r) {
    CHECK(y.row(r).mean() == doctest::Approx(0.0).epsilon(1e-9));
    const double var = (y.row(r).array() - y.row(r).mean()).square().mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("masked multi-head attention matches a direct computation") {
  Rng rng(5);
  const std::size_t nseq = 2, lq = 3, lk = 4, heads = 2, dim = 4;
  const Mat q = random_mat(nseq * lq, dim, rng), k = random_mat(nseq * lk, dim, rng), v = random_mat(nseq * lk, dim, rng);
  // Row 0 sees nothing, row 1 sees keys {0, 2}, row 2 sees all.
  const std::vector<std::uint8_t> mask{0, 0, 0, 0, 1, 0, 1, 0, 1, 1, 1, 1};
  ad::AttentionLayout layout{nseq, lq, lk, heads, mask};

  Tape tape;
  ad::AttentionCounter counter;
  const Mat out = tape.value(tape.attention(tape.leaf(q), tape.leaf(k), tape.leaf(v), layout, &counter));
  CHECK(counter.flops == 2 * nseq * lq * lk * dim);
  const std::size_t dh = dim / heads;
  for (std::size_t b = 0; b < nseq; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < lq; ++i) {
        std::vector<double> w(lk, 0.0);
        double z = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
          if (!mask[i * lk + j]) continue;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q(b * lq + i, h * dh + c) * k(b * lk + j, h * dh + c);
          w[j] = std::exp(s / std::sqrt(static_cast<double>(dh)));
          z += w[j];
        }
        for (std::size_t c = 0; c < dh; ++c) {
          double want = 0.0;
          for (std::size_t j = 0; j < lk; ++j) want += z > 0 ? w[j] / z * v(b * lk + j, h * dh + c) : 0.0;
          CHECK(out(b * lq + i, h * dh + c) == doctest::Approx(want).epsilon(1e-12));
        }
      }
    }
  }
  check_gradients({q, k, v}, [&](Tape& t, const auto& x) { return t.attention(x[0], x[1], x[2], layout); });

  // Masked keys receive exactly zero gradient from the rows that cannot see them.
  const std::vector<std::uint8_t> only_first{1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
  ad::AttentionLayout l2{nseq, lq, lk, heads, only_first};
  Tape t2;
  const auto kv = t2.leaf(k, true), vv = t2.leaf(v, true);
  const auto o = t2.attention(t2.leaf(q), kv, vv, l2);
  t2.backward(t2.dot_constant(o, Mat::Ones(nseq * lq, dim)));
  const Mat dk = t2.grad(kv), dv = t2.grad(vv);
  for (std::size_t b = 0; b < nseq; ++b) {
    for (std::size_t j = 1; j < lk; ++j) {
      CHECK(dk.row(b * lk + j).isZero(0.0));
      CHECK(dv.row(b * lk + j).isZero(0.0));
    }
  }
}

TEST_CASE("grouped child attention") {
  Rng rng(6);
  const Mat ps = random_mat(2, 1, rng), cs = random_mat(6, 1, rng), cv = random_mat(6, 3, rng);
  check_gradients({ps, cs, cv}, [](Tape& t, const auto& v) { return t.group_attention(v[0], v[1], v[2], 3, 0.2); });

  Tape tape;
  const Mat out = tape.value(tape.group_attention(tape.leaf(ps), tape.leaf(cs), tape.leaf(cv), 3, 0.2));
  for (Eigen::Index p = 0; p < 2; ++p) {
    std::vector<double> e(3);
    double z = 0.0;
    for (int j = 0; j < 3; ++j) {
      const double pre = ps(p, 0) + cs(p * 3 + j, 0);
      e[j] = std::exp(pre > 0 ? pre : 0.2 * pre);
      z += e[j];
    }
    for (Eigen::Index c = 0; c < 3; ++c) {
      double want = 0.0;
      for (int j = 0; j < 3; ++j) want += e[j] / z * cv(p * 3 + j, c);
      CHECK(out(p, c) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("weighted cross entropy") {
  Rng rng(7);
  const Mat logits = random_mat(4, 5, rng);
  const std::vector<std::int32_t> targets{1, 4, 0, 2};
  const std::vector<double> weights{1.0, 0.0, 2.0, 1.0};
  check_gradients({logits}, [&](Tape& t, const auto& v) { return t.cross_entropy(v[0], targets, weights); });

  Tape tape;
  const double got = tape.value(tape.cross_entropy(tape.leaf(logits), targets, weights))(0, 0);
  double want = 0.0;
  for (int r = 0; r < 4; ++r) {
    const double lse = std::log(logits.row(r).array().exp().sum());
    want += weights[r] * (lse - logits(r, targets[r]));
  }
  CHECK(got == doctest::Approx(want / 4.0));
  CHECK(tape.value(tape.cross_entropy(tape.leaf(logits), targets, {0, 0, 0, 0}))(0, 0) == 0.0);
  CHECK_THROWS_AS(tape.cross_entropy(tape.leaf(logits), {9, 0, 0, 0}, {1, 1, 1, 1}), ValidationError);
}

TEST_CASE("gradients accumulate across shared uses") {
  Tape tape;
  Mat x(1, 1);
  x << 3.0;
  const auto v = tape.leaf(x, true);
  const auto y = tape.add(tape.matmul(v, v), tape.scale(v, 2.0));  // x^2 + 2x
  tape.backward(y);
  CHECK(tape.grad(v)(0, 0) == doctest::Approx(8.0));
  CHECK_THROWS_AS(tape.backward(tape.leaf(Mat::Zero(2, 2))), ValidationError);
}
