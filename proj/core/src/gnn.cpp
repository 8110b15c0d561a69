#include "cgt/gnn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "cgt/adam.hpp"
#include "cgt/binary_io.hpp"
#include "cgt/error.hpp"
#include "cgt/random.hpp"

namespace cgt {

namespace {

using Mat = ad::Matrix<float>;

Mat glorot(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.uniform(-bound, bound));
  return m;
}

template <typename F>
void for_each_tensor(GnnParams& p, F&& f) {
  for (auto& layer : p.layers) {
    for (auto& m : layer) f(m);
  }
  f(p.classifier_w);
  f(p.classifier_b);
}

std::size_t argmax_row(const Mat& m, Eigen::Index r) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < m.cols(); ++j) {
    if (m(r, j) > m(r, best)) best = j;
  }
  return static_cast<std::size_t>(best);
}

}  // namespace

std::string to_string(Aggregator a) {
  switch (a) {
    case Aggregator::kMean: return "mean";
    case Aggregator::kLinear: return "linear";
    case Aggregator::kSum: return "sum";
    case Aggregator::kAttention: return "attention";
  }
  return "unknown";
}

std::string model_name(Aggregator a) {
  switch (a) {
    case Aggregator::kMean: return "GCN";
    case Aggregator::kLinear: return "SGC";
    case Aggregator::kSum: return "GIN";
    case Aggregator::kAttention: return "GAT";
  }
  return "unknown";
}

Aggregator parse_aggregator(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (n == "gcn" || n == "mean") return Aggregator::kMean;
  if (n == "sgc" || n == "linear") return Aggregator::kLinear;
  if (n == "gin" || n == "sum") return Aggregator::kSum;
  if (n == "gat" || n == "attention") return Aggregator::kAttention;
  throw ValidationError("unknown aggregator '" + name + "'");
}

std::vector<float> GnnParams::flatten() const {
  std::vector<float> out;
  for_each_tensor(const_cast<GnnParams&>(*this), [&](const Mat& m) { out.insert(out.end(), m.data(), m.data() + m.size()); });
  return out;
}

void GnnParams::unflatten(std::span<const float> values) {
  std::size_t offset = 0;
  for_each_tensor(*this, [&](Mat& m) {
    if (offset + static_cast<std::size_t>(m.size()) > values.size()) throw ValidationError("gnn unflatten: too few values");
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), m.size(), m.data());
    offset += static_cast<std::size_t>(m.size());
  });
  if (offset != values.size()) throw ValidationError("gnn unflatten: too many values");
}

GnnParams init_gnn(const GnnConfig& cfg, std::size_t in_dim, std::size_t num_classes, std::uint64_t seed) {
  if (cfg.layers == 0 || cfg.hidden == 0) throw ValidationError("gnn: layers and hidden must be positive");
  if (in_dim == 0 || num_classes == 0) throw ValidationError("gnn: empty input or label space");
  Rng rng(derive_seed(seed, seed_tag("gnn-init")));
  const auto h = static_cast<Eigen::Index>(cfg.hidden);
  GnnParams p;
  auto in = static_cast<Eigen::Index>(in_dim);
  for (std::uint32_t l = 0; l < cfg.layers; ++l) {
    std::vector<Mat> t;
    switch (cfg.aggregator) {
      case Aggregator::kMean:
      case Aggregator::kLinear:
        t.push_back(glorot(in, h, rng));
        t.push_back(glorot(in, h, rng));
        t.push_back(Mat::Zero(1, h));
        break;
      case Aggregator::kSum:
        t.push_back(glorot(in, h, rng));
        t.push_back(Mat::Zero(1, h));
        break;
      case Aggregator::kAttention:
        t.push_back(glorot(in, h, rng));
        t.push_back(glorot(h, 1, rng));
        t.push_back(glorot(h, 1, rng));
        t.push_back(Mat::Zero(1, h));
        break;
    }
    p.layers.push_back(std::move(t));
    in = h;
  }
  p.classifier_w = glorot(h, static_cast<Eigen::Index>(num_classes), rng);
  p.classifier_b = Mat::Zero(1, static_cast<Eigen::Index>(num_classes));
  return p;
}

TreeBatch stack_trees(std::span<const EncodedComputationGraph> graphs) {
  if (graphs.empty()) throw ValidationError("gnn: empty tree set");
  TreeBatch batch;
  batch.shape = graphs.front().shape;
  batch.count = graphs.size();
  const auto T = static_cast<Eigen::Index>(batch.shape.size());
  const auto d = graphs.front().rows.cols();
  batch.rows.resize(T * static_cast<Eigen::Index>(graphs.size()), d);
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    const auto& cg = graphs[i];
    if (!(cg.shape == batch.shape) || cg.rows.cols() != d || cg.rows.rows() != T) {
      throw ValidationError("gnn: trees must share one shape and feature dimension");
    }
    batch.rows.middleRows(static_cast<Eigen::Index>(i) * T, T) = cg.rows;
    batch.labels.push_back(cg.root_label);
  }
  return batch;
}

ad::Var gnn_forward_on_tape(ad::Tape<float>& tape, const GnnConfig& cfg, const GnnParams& params,
                            const TreeBatch& batch, bool requires_grad, std::vector<ad::Var>* param_vars) {
  const TreeShape& shape = batch.shape;
  if (shape.depth() != cfg.layers || params.layers.size() != cfg.layers) {
    throw ValidationError("gnn: tree depth " + std::to_string(shape.depth()) + " does not match " +
                          std::to_string(cfg.layers) + " layers");
  }
  if (static_cast<Eigen::Index>(params.layers.front().front().rows()) != batch.rows.cols()) {
    throw ValidationError("gnn: feature dimension does not match parameters");
  }
  auto leaf = [&](const Mat& m) {
    const ad::Var v = tape.leaf(m, requires_grad);
    if (param_vars != nullptr) param_vars->push_back(v);
    return v;
  };
  const std::uint32_t s = shape.fanout();
  const std::uint32_t T = shape.size();
  const std::size_t B = batch.count;

  // Positions below the root whose input row is all zero are padding.
  std::vector<std::uint8_t> is_null(B * T, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::uint32_t t = 2; t <= T; ++t) {
      is_null[b * T + t - 1] = batch.rows.row(static_cast<Eigen::Index>(b * T + t - 1)).isZero(0.0f) ? 1 : 0;
    }
  }

  ad::Var prev = tape.leaf(batch.rows, false);
  std::uint32_t prev_len = T;
  for (std::uint32_t l = 1; l <= cfg.layers; ++l) {
    const std::uint32_t len = shape.level_begin(cfg.layers - l + 1) - 1;
    std::vector<std::int32_t> self_idx, child_idx;
    std::vector<float> keep;
    self_idx.reserve(B * len);
    child_idx.reserve(B * len * s);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::uint32_t t = 1; t <= len; ++t) {
        self_idx.push_back(static_cast<std::int32_t>(b * prev_len + t - 1));
        keep.push_back(is_null[b * T + t - 1] ? 0.0f : 1.0f);
        const std::uint32_t c0 = shape.first_child(t);
        for (std::uint32_t j = 0; j < s; ++j) child_idx.push_back(static_cast<std::int32_t>(b * prev_len + c0 + j - 1));
      }
    }
    const ad::Var self = tape.gather_rows(prev, std::move(self_idx));
    const ad::Var children = tape.gather_rows(prev, std::move(child_idx));
    const auto& lp = params.layers[l - 1];
    ad::Var out;
    switch (cfg.aggregator) {
      case Aggregator::kMean:
      case Aggregator::kLinear: {
        const ad::Var ws = leaf(lp[0]), wc = leaf(lp[1]), bias = leaf(lp[2]);
        const ad::Var mean = tape.scale(tape.group_sum(children, s), 1.0f / static_cast<float>(s));
        out = tape.add_row(tape.add(tape.matmul(self, ws), tape.matmul(mean, wc)), bias);
        if (cfg.aggregator == Aggregator::kMean) out = tape.relu(out);
        break;
      }
      case Aggregator::kSum: {
        const ad::Var w = leaf(lp[0]), bias = leaf(lp[1]);
        const ad::Var agg = tape.add(tape.scale(self, static_cast<float>(1.0 + cfg.gin_eps)), tape.group_sum(children, s));
        out = tape.relu(tape.affine(agg, w, bias));
        break;
      }
      case Aggregator::kAttention: {
        const ad::Var w = leaf(lp[0]), a_self = leaf(lp[1]), a_child = leaf(lp[2]), bias = leaf(lp[3]);
        const ad::Var zs = tape.matmul(self, w);
        const ad::Var zc = tape.matmul(children, w);
        const ad::Var agg = tape.group_attention(tape.matmul(zs, a_self), tape.matmul(zc, a_child), zc, s,
                                                 static_cast<float>(cfg.attention_slope));
        out = tape.relu(tape.add_row(tape.add(zs, agg), bias));
        break;
      }
    }
    prev = tape.scale_rows(out, std::move(keep));
    prev_len = len;
  }
  const ad::Var cw = leaf(params.classifier_w);
  const ad::Var cb = leaf(params.classifier_b);
  return tape.affine(prev, cw, cb);
}

ad::Matrix<float> gnn_forward(const GnnConfig& cfg, const GnnParams& params, const EncodedComputationGraph& cg) {
  const TreeBatch batch = stack_trees(std::span(&cg, 1));
  ad::Tape<float> tape;
  return tape.value(gnn_forward_on_tape(tape, cfg, params, batch, false));
}

namespace {

double train_once(const GnnConfig& cfg, const TreeBatch& train, const TreeBatch& test, std::size_t num_classes,
                  std::uint64_t seed) {
  GnnParams params = init_gnn(cfg, static_cast<std::size_t>(train.rows.cols()), num_classes, seed);
  std::vector<float> flat = params.flatten();
  Adam adam;
  const std::vector<float> weights(train.count, 1.0f);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    ad::Tape<float> tape;
    std::vector<ad::Var> vars;
    const ad::Var logits = gnn_forward_on_tape(tape, cfg, params, train, true, &vars);
    const ad::Var nll = tape.cross_entropy(logits, train.labels, weights);
    if (!std::isfinite(tape.value(nll)(0, 0))) throw NumericalError("gnn: non-finite training loss");
    tape.backward(nll);
    std::vector<float> grad;
    grad.reserve(flat.size());
    for (const ad::Var v : vars) {
      const Mat g = tape.grad(v);
      grad.insert(grad.end(), g.data(), g.data() + g.size());
    }
    adam.step(flat, grad, cfg.learning_rate);
    params.unflatten(flat);
  }
  ad::Tape<float> tape;
  const Mat logits = tape.value(gnn_forward_on_tape(tape, cfg, params, test, false));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.count; ++i) {
    if (argmax_row(logits, static_cast<Eigen::Index>(i)) == static_cast<std::size_t>(test.labels[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.count);
}

}  // namespace

AccuracyRecord train_eval(const GnnConfig& cfg, std::span<const EncodedComputationGraph> train,
                          std::span<const EncodedComputationGraph> test, std::size_t num_classes,
                          std::uint64_t seed) {
  if (cfg.repeats == 0) throw ValidationError("gnn: repeats must be >= 1");
  const TreeBatch train_batch = stack_trees(train);
  const TreeBatch test_batch = stack_trees(test);
  if (!(train_batch.shape == test_batch.shape) || train_batch.rows.cols() != test_batch.rows.cols()) {
    throw ValidationError("gnn: train and test trees differ in shape");
  }
  for (const auto* b : {&train_batch, &test_batch}) {
    for (const auto y : b->labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ValidationError("gnn: label outside [0, C)");
    }
  }
  if (std::set<std::int32_t>(train_batch.labels.begin(), train_batch.labels.end()).size() < 2) {
    std::cerr << "warning: gnn training set has a single class\n";
  }
  AccuracyRecord rec;
  rec.model = model_name(cfg.aggregator);
  for (std::size_t r = 0; r < cfg.repeats; ++r) {
    rec.runs.push_back(train_once(cfg, train_batch, test_batch, num_classes, derive_seed(seed, seed_tag("gnn"), r)));
  }
  rec.accuracy = std::accumulate(rec.runs.begin(), rec.runs.end(), 0.0) / static_cast<double>(rec.runs.size());
  if (rec.runs.size() > 1) {
    double ss = 0.0;
    for (const double a : rec.runs) ss += (a - rec.accuracy) * (a - rec.accuracy);
    rec.std = std::sqrt(ss / static_cast<double>(rec.runs.size() - 1));
  }
  return rec;
}

void write_bench_report(const std::filesystem::path& path, std::span<const AccuracyRecord> records) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "dataset,scenario,model,accuracy,std\n";
  for (const auto& r : records) {
    out << r.dataset << ',' << r.scenario << ',' << r.model << ',' << io::format_shortest(r.accuracy) << ','
        << io::format_shortest(r.std) << '\n';
  }
  if (!out) throw ValidationError("write failed: " + path.string());
}

std::vector<AccuracyRecord> read_bench_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("missing bench report " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "dataset,scenario,model,accuracy,std") {
    throw ValidationError(path.string() + ": unexpected header");
  }
  std::vector<AccuracyRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 5) throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": expected 5 fields");
    AccuracyRecord r;
    r.dataset = fields[0];
    r.scenario = fields[1];
    r.model = fields[2];
    try {
      r.accuracy = std::stod(fields[3]);
      r.std = std::stod(fields[4]);
    } catch (const std::exception&) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": bad number");
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace cgt
