#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. It provides exactly the operations the computation graph
// transformer and the reference GNNs need; every op records a closure that
// accumulates input gradients from its output gradient.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "cgt/error.hpp"

namespace cgt::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
  std::uint32_t id = 0;
};

/// Shape of a fused multi-head attention call: `sequences` independent
/// sequences, each with `query_len` query rows and `key_len` key/value rows,
/// sharing one mask (query_len x key_len, nonzero = may attend).
struct AttentionLayout {
  std::size_t sequences = 0;
  std::size_t query_len = 0;
  std::size_t key_len = 0;
  std::size_t heads = 1;
  std::span<const std::uint8_t> mask;
};

/// Multiply-adds spent in attention score and value products.
struct AttentionCounter {
  std::uint64_t flops = 0;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Mat value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, nullptr);
  }

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last backward() target with respect to v (zeros if untouched).
  Mat grad(Var v) const {
    const auto& n = nodes_[v.id];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Reverse sweep from a scalar (1 x 1) node.
  void backward(Var out) {
    if (nodes_[out.id].value.size() != 1) throw ValidationError("backward: target must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_ref(out).setConstant(Scalar{1});
    backward_from(out);
  }

  /// Reverse sweep seeded with an arbitrary upstream gradient for `out`.
  void backward(Var out, const Mat& upstream) {
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_ref(out) = upstream;
    backward_from(out);
  }

  // ---- elementwise / linear ------------------------------------------------

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    return push(value(a) + value(b), any_grad(a, b), [a, b](Tape& t, const Mat& g) {
      if (t.requires_grad(a)) t.grad_ref(a) += g;
      if (t.requires_grad(b)) t.grad_ref(b) += g;
    });
  }

  /// a (r x c) + row (1 x c) broadcast over rows.
  Var add_row(Var a, Var row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) throw ValidationError("add_row: shape");
    Mat out = value(a);
    out.rowwise() += value(row).row(0);
    return push(std::move(out), any_grad(a, row), [a, row](Tape& t, const Mat& g) {
      if (t.requires_grad(a)) t.grad_ref(a) += g;
      if (t.requires_grad(row)) t.grad_ref(row) += g.colwise().sum();
    });
  }

  Var scale(Var a, Scalar s) {
    return push(value(a) * s, requires_grad(a), [a, s](Tape& t, const Mat& g) { t.grad_ref(a) += g * s; });
  }

  /// Row r multiplied by the constant factors[r].
  Var scale_rows(Var a, std::vector<Scalar> factors) {
    if (static_cast<Eigen::Index>(factors.size()) != value(a).rows()) throw ValidationError("scale_rows: size mismatch");
    const Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> f(factors.data(), value(a).rows());
    Mat out = f.asDiagonal() * value(a);
    return push(std::move(out), requires_grad(a), [a, factors = std::move(factors)](Tape& t, const Mat& g) {
      const Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> f(factors.data(), g.rows());
      t.grad_ref(a) += f.asDiagonal() * g;
    });
  }

  Var matmul(Var a, Var b) {
    if (value(a).cols() != value(b).rows()) throw ValidationError("matmul: inner dimension mismatch");
    Mat out = value(a) * value(b);
    return push(std::move(out), any_grad(a, b), [a, b](Tape& t, const Mat& g) {
      if (t.requires_grad(a)) t.grad_ref(a).noalias() += g * t.value(b).transpose();
      if (t.requires_grad(b)) t.grad_ref(b).noalias() += t.value(a).transpose() * g;
    });
  }

  /// a * b^T.
  Var matmul_nt(Var a, Var b) {
    if (value(a).cols() != value(b).cols()) throw ValidationError("matmul_nt: inner dimension mismatch");
    Mat out = value(a) * value(b).transpose();
    return push(std::move(out), any_grad(a, b), [a, b](Tape& t, const Mat& g) {
      if (t.requires_grad(a)) t.grad_ref(a).noalias() += g * t.value(b);
      if (t.requires_grad(b)) t.grad_ref(b).noalias() += g.transpose() * t.value(a);
    });
  }

  /// out = x * w + bias (bias 1 x c).
  Var affine(Var x, Var w, Var bias) { return add_row(matmul(x, w), bias); }

  /// Rows of `table` selected by index; backward scatter-adds.
  Var gather_rows(Var table, std::vector<std::int32_t> index) {
    const Mat& src = value(table);
    Mat out(static_cast<Eigen::Index>(index.size()), src.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] < 0 || index[i] >= src.rows()) throw ValidationError("gather_rows: index out of range");
      out.row(static_cast<Eigen::Index>(i)) = src.row(index[i]);
    }
    return push(std::move(out), requires_grad(table), [table, index = std::move(index)](Tape& t, const Mat& g) {
      Mat& dst = t.grad_ref(table);
      for (std::size_t i = 0; i < index.size(); ++i) dst.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    });
  }

  /// Each row of x repeated `times` times consecutively.
  Var repeat_rows(Var x, std::size_t times) {
    const Mat& src = value(x);
    Mat out(src.rows() * static_cast<Eigen::Index>(times), src.cols());
    for (Eigen::Index r = 0; r < src.rows(); ++r) {
      for (std::size_t k = 0; k < times; ++k) out.row(r * static_cast<Eigen::Index>(times) + static_cast<Eigen::Index>(k)) = src.row(r);
    }
    return push(std::move(out), requires_grad(x), [x, times](Tape& t, const Mat& g) {
      Mat& dst = t.grad_ref(x);
      for (Eigen::Index r = 0; r < dst.rows(); ++r) {
        for (std::size_t k = 0; k < times; ++k) dst.row(r) += g.row(r * static_cast<Eigen::Index>(times) + static_cast<Eigen::Index>(k));
      }
    });
  }

  /// Sums consecutive groups of `group` rows: (r*group x c) -> (r x c).
  Var group_sum(Var x, std::size_t group) {
    const Mat& src = value(x);
    const auto g_rows = static_cast<Eigen::Index>(group);
    if (src.rows() % g_rows != 0) throw ValidationError("group_sum: rows not divisible by group");
    Mat out = Mat::Zero(src.rows() / g_rows, src.cols());
    for (Eigen::Index r = 0; r < src.rows(); ++r) out.row(r / g_rows) += src.row(r);
    return push(std::move(out), requires_grad(x), [x, g_rows](Tape& t, const Mat& g) {
      Mat& dst = t.grad_ref(x);
      for (Eigen::Index r = 0; r < dst.rows(); ++r) dst.row(r) += g.row(r / g_rows);
    });
  }

  Var relu(Var x) {
    Mat out = value(x).cwiseMax(Scalar{0});
    return push(std::move(out), requires_grad(x), [x](Tape& t, const Mat& g) {
      t.grad_ref(x).array() += (t.value(x).array() > Scalar{0}).select(g.array(), Scalar{0});
    });
  }

  Var leaky_relu(Var x, Scalar slope) {
    Mat out = (value(x).array() > Scalar{0}).select(value(x).array(), value(x).array() * slope);
    return push(std::move(out), requires_grad(x), [x, slope](Tape& t, const Mat& g) {
      t.grad_ref(x).array() += (t.value(x).array() > Scalar{0}).select(g.array(), g.array() * slope);
    });
  }

  /// tanh-approximated GELU.
  Var gelu(Var x) {
    constexpr Scalar c = static_cast<Scalar>(0.7978845608028654);  // sqrt(2 / pi)
    constexpr Scalar k = static_cast<Scalar>(0.044715);
    const Mat& in = value(x);
    Mat out(in.rows(), in.cols());
    for (Eigen::Index i = 0; i < in.size(); ++i) {
      const Scalar v = in.data()[i];
      out.data()[i] = Scalar{0.5} * v * (Scalar{1} + std::tanh(c * (v + k * v * v * v)));
    }
    return push(std::move(out), requires_grad(x), [x](Tape& t, const Mat& g) {
      const Mat& in = t.value(x);
      Mat& dst = t.grad_ref(x);
      for (Eigen::Index i = 0; i < in.size(); ++i) {
        const Scalar v = in.data()[i];
        const Scalar th = std::tanh(c * (v + k * v * v * v));
        const Scalar d = Scalar{0.5} * (Scalar{1} + th) +
                         Scalar{0.5} * v * (Scalar{1} - th * th) * c * (Scalar{1} + Scalar{3} * k * v * v);
        dst.data()[i] += g.data()[i] * d;
      }
    });
  }

  /// Row-wise layer normalization with learned gain and bias (both 1 x c).
  Var layer_norm(Var x, Var gain, Var bias, Scalar eps = static_cast<Scalar>(1e-5)) {
    const Mat& in = value(x);
    const auto rows = in.rows();
    const auto cols = in.cols();
    Mat normalized(rows, cols);
    std::vector<Scalar> inv_std(static_cast<std::size_t>(rows));
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Scalar mean = in.row(r).mean();
      const Scalar var = (in.row(r).array() - mean).square().mean();
      inv_std[r] = Scalar{1} / std::sqrt(var + eps);
      normalized.row(r) = (in.row(r).array() - mean) * inv_std[r];
    }
    Mat out = normalized;
    out.array().rowwise() *= value(gain).row(0).array();
    out.rowwise() += value(bias).row(0);
    const bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
    return push(std::move(out), rg,
                [x, gain, bias, normalized = std::move(normalized), inv_std = std::move(inv_std)](Tape& t, const Mat& g) {
                  if (t.requires_grad(gain)) {
                    t.grad_ref(gain).row(0) += (g.array() * normalized.array()).colwise().sum().matrix();
                  }
                  if (t.requires_grad(bias)) t.grad_ref(bias).row(0) += g.colwise().sum();
                  if (t.requires_grad(x)) {
                    Mat& dst = t.grad_ref(x);
                    const auto n = static_cast<Scalar>(g.cols());
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      const auto dxhat = (g.row(r).array() * t.value(gain).row(0).array()).eval();
                      const Scalar mean_d = dxhat.sum() / n;
                      const Scalar mean_dx = (dxhat * normalized.row(r).array()).sum() / n;
                      dst.row(r).array() += inv_std[r] * (dxhat - mean_d - normalized.row(r).array() * mean_dx);
                    }
                  }
                });
  }

  /// Fused masked multi-head scaled dot-product attention. q is
  /// (sequences*query_len x dim), k and v are (sequences*key_len x dim).
  /// Masked scores are skipped outright, so they contribute exactly zero to
  /// outputs and gradients; a query row with no admissible key outputs zeros.
  Var attention(Var q, Var k, Var v, const AttentionLayout& layout, AttentionCounter* counter = nullptr) {
    const Mat& Q = value(q);
    const Mat& K = value(k);
    const Mat& V = value(v);
    const auto dim = Q.cols();
    const auto heads = static_cast<Eigen::Index>(layout.heads);
    const auto lq = static_cast<Eigen::Index>(layout.query_len);
    const auto lk = static_cast<Eigen::Index>(layout.key_len);
    const auto nseq = static_cast<Eigen::Index>(layout.sequences);
    if (dim % heads != 0 || K.cols() != dim || V.cols() != dim || Q.rows() != nseq * lq || K.rows() != nseq * lk ||
        V.rows() != nseq * lk || layout.mask.size() != static_cast<std::size_t>(lq * lk)) {
      throw ValidationError("attention: inconsistent shapes");
    }
    const auto dh = dim / heads;
    const Scalar scale = Scalar{1} / std::sqrt(static_cast<Scalar>(dh));
    std::vector<std::uint8_t> mask(layout.mask.begin(), layout.mask.end());

    Mat out = Mat::Zero(Q.rows(), dim);
    // Probabilities per (sequence, head): lq x lk blocks stacked.
    auto probs = std::make_shared<Mat>(nseq * heads * lq, lk);
    Mat scores(lq, lk);
    for (Eigen::Index b = 0; b < nseq; ++b) {
      for (Eigen::Index h = 0; h < heads; ++h) {
        const auto qb = Q.block(b * lq, h * dh, lq, dh);
        const auto kb = K.block(b * lk, h * dh, lk, dh);
        const auto vb = V.block(b * lk, h * dh, lk, dh);
        scores.noalias() = qb * kb.transpose();
        auto P = probs->block((b * heads + h) * lq, 0, lq, lk);
        for (Eigen::Index i = 0; i < lq; ++i) {
          Scalar mx = -std::numeric_limits<Scalar>::infinity();
          for (Eigen::Index j = 0; j < lk; ++j) {
            if (mask[i * lk + j]) mx = std::max(mx, scores(i, j) * scale);
          }
          Scalar denom = 0;
          for (Eigen::Index j = 0; j < lk; ++j) {
            if (mask[i * lk + j]) {
              const Scalar e = std::exp(scores(i, j) * scale - mx);
              P(i, j) = e;
              denom += e;
            } else {
              P(i, j) = 0;
            }
          }
          if (denom > 0) P.row(i) /= denom;
        }
        out.block(b * lq, h * dh, lq, dh).noalias() = P * vb;
      }
    }
    if (counter != nullptr) {
      counter->flops += static_cast<std::uint64_t>(2 * nseq * lq * lk * dim);
    }
    const bool rg = any_grad(q, k) || requires_grad(v);
    return push(std::move(out), rg, [q, k, v, lq, lk, nseq, heads, dh, scale, mask = std::move(mask), probs](Tape& t, const Mat& g) {
      const Mat& Q = t.value(q);
      const Mat& K = t.value(k);
      const Mat& V = t.value(v);
      const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
      Mat* dQ = gq ? &t.grad_ref(q) : nullptr;
      Mat* dK = gk ? &t.grad_ref(k) : nullptr;
      Mat* dV = gv ? &t.grad_ref(v) : nullptr;
      Mat dP(lq, lk);
      Mat dS(lq, lk);
      for (Eigen::Index b = 0; b < nseq; ++b) {
        for (Eigen::Index h = 0; h < heads; ++h) {
          const auto P = probs->block((b * heads + h) * lq, 0, lq, lk);
          const auto gb = g.block(b * lq, h * dh, lq, dh);
          if (dV) dV->block(b * lk, h * dh, lk, dh).noalias() += P.transpose() * gb;
          if (!dQ && !dK) continue;
          dP.noalias() = gb * V.block(b * lk, h * dh, lk, dh).transpose();
          for (Eigen::Index i = 0; i < lq; ++i) {
            const Scalar dot = (dP.row(i).array() * P.row(i).array()).sum();
            for (Eigen::Index j = 0; j < lk; ++j) {
              dS(i, j) = mask[i * lk + j] ? P(i, j) * (dP(i, j) - dot) * scale : Scalar{0};
            }
          }
          if (dQ) dQ->block(b * lq, h * dh, lq, dh).noalias() += dS * K.block(b * lk, h * dh, lk, dh);
          if (dK) dK->block(b * lk, h * dh, lk, dh).noalias() += dS.transpose() * Q.block(b * lq, h * dh, lq, dh);
        }
      }
    });
  }

  /// For each parent row p with children rows p*s .. p*s+s-1:
  ///   alpha_j = softmax_j(leaky_relu(parent_score[p] + child_score[j]))
  ///   out[p]  = sum_j alpha_j * child_value[j]
  /// parent_score is (P x 1), child_score (P*s x 1), child_value (P*s x c).
  Var group_attention(Var parent_score, Var child_score, Var child_value, std::size_t s, Scalar slope) {
    const Mat& ps = value(parent_score);
    const Mat& cs = value(child_score);
    const Mat& cv = value(child_value);
    const auto P = ps.rows();
    const auto S = static_cast<Eigen::Index>(s);
    if (ps.cols() != 1 || cs.cols() != 1 || cs.rows() != P * S || cv.rows() != P * S) {
      throw ValidationError("group_attention: inconsistent shapes");
    }
    auto alpha = std::make_shared<Mat>(P * S, 1);
    auto pre = std::make_shared<Mat>(P * S, 1);  // pre-activation scores
    Mat out = Mat::Zero(P, cv.cols());
    for (Eigen::Index p = 0; p < P; ++p) {
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Eigen::Index j = 0; j < S; ++j) {
        const Scalar e = ps(p, 0) + cs(p * S + j, 0);
        (*pre)(p * S + j, 0) = e;
        const Scalar a = e > 0 ? e : e * slope;
        (*alpha)(p * S + j, 0) = a;
        mx = std::max(mx, a);
      }
      Scalar denom = 0;
      for (Eigen::Index j = 0; j < S; ++j) {
        const Scalar w = std::exp((*alpha)(p * S + j, 0) - mx);
        (*alpha)(p * S + j, 0) = w;
        denom += w;
      }
      for (Eigen::Index j = 0; j < S; ++j) {
        (*alpha)(p * S + j, 0) /= denom;
        out.row(p) += (*alpha)(p * S + j, 0) * cv.row(p * S + j);
      }
    }
    const bool rg = any_grad(parent_score, child_score) || requires_grad(child_value);
    return push(std::move(out), rg, [parent_score, child_score, child_value, S, slope, alpha, pre](Tape& t, const Mat& g) {
      const Mat& cv = t.value(child_value);
      const auto P = g.rows();
      if (t.requires_grad(child_value)) {
        Mat& dcv = t.grad_ref(child_value);
        for (Eigen::Index p = 0; p < P; ++p) {
          for (Eigen::Index j = 0; j < S; ++j) dcv.row(p * S + j) += (*alpha)(p * S + j, 0) * g.row(p);
        }
      }
      if (!t.requires_grad(parent_score) && !t.requires_grad(child_score)) return;
      for (Eigen::Index p = 0; p < P; ++p) {
        Scalar dot = 0;
        std::vector<Scalar> da(static_cast<std::size_t>(S));
        for (Eigen::Index j = 0; j < S; ++j) {
          da[j] = g.row(p).dot(cv.row(p * S + j));
          dot += (*alpha)(p * S + j, 0) * da[j];
        }
        for (Eigen::Index j = 0; j < S; ++j) {
          const Scalar a = (*alpha)(p * S + j, 0);
          const Scalar d_act = a * (da[j] - dot);
          const Scalar d_pre = (*pre)(p * S + j, 0) > 0 ? d_act : d_act * slope;
          if (t.requires_grad(parent_score)) t.grad_ref(parent_score)(p, 0) += d_pre;
          if (t.requires_grad(child_score)) t.grad_ref(child_score)(p * S + j, 0) += d_pre;
        }
      }
    });
  }

  /// Weighted mean negative log-likelihood of `targets` under row-wise
  /// softmax(logits): sum_i w_i * nll_i / sum_i w_i (0 when all weights are 0).
  Var cross_entropy(Var logits, std::vector<std::int32_t> targets, std::vector<Scalar> weights) {
    const Mat& z = value(logits);
    if (static_cast<std::size_t>(z.rows()) != targets.size() || targets.size() != weights.size()) {
      throw ValidationError("cross_entropy: size mismatch");
    }
    Scalar total_w = 0;
    for (const Scalar w : weights) total_w += w;
    auto softmax = std::make_shared<Mat>(z.rows(), z.cols());
    Scalar loss = 0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const Scalar mx = z.row(r).maxCoeff();
      softmax->row(r) = (z.row(r).array() - mx).exp();
      const Scalar sum = softmax->row(r).sum();
      softmax->row(r) /= sum;
      if (weights[r] != Scalar{0}) {
        if (targets[r] < 0 || targets[r] >= z.cols()) throw ValidationError("cross_entropy: target out of range");
        loss += weights[r] * (std::log(sum) + mx - z(r, targets[r]));
      }
    }
    Mat out(1, 1);
    out(0, 0) = total_w > 0 ? loss / total_w : Scalar{0};
    return push(std::move(out), requires_grad(logits),
                [logits, targets = std::move(targets), weights = std::move(weights), total_w, softmax](Tape& t, const Mat& g) {
                  if (!(total_w > 0)) return;
                  Mat& dz = t.grad_ref(logits);
                  const Scalar up = g(0, 0) / total_w;
                  for (Eigen::Index r = 0; r < dz.rows(); ++r) {
                    if (weights[r] == Scalar{0}) continue;
                    dz.row(r) += (up * weights[r]) * softmax->row(r);
                    dz(r, targets[r]) -= up * weights[r];
                  }
                });
  }

  /// sum(a .* w) for a constant weight matrix; used to project outputs in audits.
  Var dot_constant(Var a, const Mat& w) {
    if (w.rows() != value(a).rows() || w.cols() != value(a).cols()) throw ValidationError("dot_constant: shape");
    Mat out(1, 1);
    out(0, 0) = (value(a).array() * w.array()).sum();
    return push(std::move(out), requires_grad(a), [a, w](Tape& t, const Mat& g) { t.grad_ref(a) += g(0, 0) * w; });
  }

  Mat& grad_ref(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

 private:
  using Backward = std::function<void(Tape&, const Mat&)>;

  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Mat value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, requires_grad ? std::move(backward) : nullptr});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  bool any_grad(Var a, Var b) const { return requires_grad(a) || requires_grad(b); }

  void check_same(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw ValidationError(std::string(op) + ": shape mismatch");
    }
  }

  void backward_from(Var out) {
    for (std::uint32_t i = out.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      // The closure may touch other nodes' grads (never its own), so pass a copy-free reference.
      const Mat& g = n.grad;
      n.backward(*this, g);
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace cgt::ad
