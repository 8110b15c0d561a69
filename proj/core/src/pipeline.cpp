#include "cgt/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cgt/binary_io.hpp"
#include "cgt/error.hpp"
#include "cgt/privacy.hpp"
#include "cgt/random.hpp"

namespace cgt::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kBenchReport = "bench_report.csv";

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw ValidationError("config: bad value '" + text + "' for " + key);
  }
  return value;
}

double parse_real(const std::string& key, const std::string& text) {
  if (text == "inf") return std::numeric_limits<double>::infinity();
  return parse_number<double>(key, text);
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw ValidationError("config: bad boolean '" + text + "' for " + key);
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return io::format_shortest(v);
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

// Config keys read by each stage. A stage's outputs are valid only while the
// keys of every upstream stage are unchanged.
const std::map<Stage, std::vector<std::string>>& stage_keys() {
  static const std::map<Stage, std::vector<std::string>> keys{
      {Stage::kSample,
       {"graph", "seed", "s", "L", "scenario", "ne", "alpha", "sn", "sbm_nodes", "sbm_classes", "sbm_p_in",
        "sbm_p_out", "sbm_dim", "sbm_separation", "sbm_noise"}},
      {Stage::kQuantize, {"privacy", "k", "m", "n_fit", "kmeans_iterations", "eps", "delta", "clip"}},
      {Stage::kTrain,
       {"dim", "heads", "layers", "variant", "use_label", "use_layer_positions", "use_ancestor_mask", "epochs",
        "max_steps", "batch_size", "lr"}},
      {Stage::kGenerate, {"temperature"}},
      {Stage::kBench, {"gnn_models", "gnn_hidden", "gnn_epochs", "gnn_lr", "gnn_repeats"}},
      {Stage::kStats, {}},
  };
  return keys;
}

const std::map<Stage, std::vector<Stage>>& upstream() {
  static const std::map<Stage, std::vector<Stage>> up{
      {Stage::kSample, {}},
      {Stage::kQuantize, {Stage::kSample}},
      {Stage::kTrain, {Stage::kSample, Stage::kQuantize}},
      {Stage::kGenerate, {Stage::kSample, Stage::kQuantize, Stage::kTrain}},
      {Stage::kBench, {Stage::kSample, Stage::kQuantize, Stage::kTrain, Stage::kGenerate}},
      {Stage::kStats, {Stage::kSample, Stage::kQuantize, Stage::kTrain, Stage::kGenerate}},
  };
  return up;
}

std::string privacy_name(PrivacyKind p) {
  switch (p) {
    case PrivacyKind::kNone: return "none";
    case PrivacyKind::kAnonymous: return "k-anonymous";
    case PrivacyKind::kDpKMeans: return "dp-kmeans";
    case PrivacyKind::kDpSgd: return "dp-sgd";
  }
  return "none";
}

PrivacyKind parse_privacy(const std::string& s) {
  if (s == "none") return PrivacyKind::kNone;
  if (s == "k-anonymous" || s == "kanon") return PrivacyKind::kAnonymous;
  if (s == "dp-kmeans") return PrivacyKind::kDpKMeans;
  if (s == "dp-sgd") return PrivacyKind::kDpSgd;
  throw ValidationError("config: unknown privacy mode '" + s + "' (none|k-anonymous|dp-kmeans|dp-sgd)");
}

ScenarioKind parse_scenario(const std::string& s) {
  if (s == "none") return ScenarioKind::kNone;
  if (s == "noisy-edges") return ScenarioKind::kNoisyEdges;
  if (s == "biased-split") return ScenarioKind::kBiasedSplit;
  if (s == "sampling-number") return ScenarioKind::kSamplingNumber;
  throw ValidationError("config: unknown scenario '" + s + "' (none|noisy-edges|biased-split|sampling-number)");
}

// ---------------------------------------------------------------- manifest

json read_manifest(const fs::path& run) {
  const fs::path p = run / kManifest;
  if (!fs::exists(p)) return json::object();
  std::ifstream in(p);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("manifest.json is not valid JSON: " + std::string(e.what()));
  }
}

void write_manifest(const fs::path& run, const json& manifest) {
  const fs::path tmp = run / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw ValidationError("cannot write manifest in " + run.string());
    out << manifest.dump(2) << '\n';
  }
  fs::rename(tmp, run / kManifest);
}

std::string rel(const fs::path& run, const fs::path& p) { return fs::relative(p, run).generic_string(); }

json stage_config(Stage stage, const ConfigMap& map) {
  json j = json::object();
  for (const auto& k : stage_keys().at(stage)) j[k] = map.at(k);
  return j;
}

// Hash every input, check that it exists and still matches the hash its
// producer recorded, and that the producer ran under the current config.
void check_inputs(const fs::path& run, const json& manifest, Stage stage, const ConfigMap& map,
                  const std::vector<fs::path>& inputs) {
  for (const Stage up : upstream().at(stage)) {
    const auto name = stage_name(up);
    if (!manifest.contains("stages") || !manifest["stages"].contains(name)) {
      throw MissingArtifactError("stage '" + stage_name(stage) + "' needs outputs of '" + name +
                                 "', which has not run in " + run.string());
    }
    if (manifest["stages"][name]["config"] != stage_config(up, map)) {
      throw ValidationError("config differs from the one that produced the '" + name + "' outputs; re-run '" + name +
                            "' first");
    }
  }
  std::map<std::string, std::string> recorded;
  if (manifest.contains("stages")) {
    for (const auto& [name, entry] : manifest["stages"].items()) {
      for (const auto& [path, hash] : entry["outputs"].items()) recorded[path] = hash.get<std::string>();
    }
  }
  for (const auto& p : inputs) {
    if (!fs::exists(p)) throw MissingArtifactError("missing artifact " + p.string());
    const auto key = rel(run, p);
    const auto it = recorded.find(key);
    if (it == recorded.end()) throw MissingArtifactError("artifact " + key + " is not recorded in the manifest");
    if (io::sha256_file(p) != it->second) {
      throw ValidationError("stale input " + key + ": content changed since it was produced; re-run upstream stages");
    }
  }
}

void record_outputs(const fs::path& run, json& manifest, Stage stage, const ConfigMap& map,
                    const std::vector<fs::path>& outputs) {
  json entry;
  entry["config"] = stage_config(stage, map);
  entry["outputs"] = json::object();
  for (const auto& p : outputs) entry["outputs"][rel(run, p)] = io::sha256_file(p);
  manifest["stages"][stage_name(stage)] = entry;
}

// ---------------------------------------------------------------- helpers

struct Meta {
  std::size_t num_nodes = 0;
  std::size_t num_classes = 0;
  std::size_t feature_dim = 0;
  std::size_t noisy_shortfall = 0;
  std::uint32_t s = 0;
  std::uint32_t L = 0;
};

void write_meta(const fs::path& p, const Meta& m) {
  json j{{"num_nodes", m.num_nodes}, {"num_classes", m.num_classes}, {"feature_dim", m.feature_dim},
         {"noisy_edge_shortfall", m.noisy_shortfall}, {"s", m.s}, {"L", m.L}};
  std::ofstream out(p);
  out << j.dump(2) << '\n';
  if (!out) throw ValidationError("cannot write " + p.string());
}

Meta read_meta(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw MissingArtifactError("missing artifact " + p.string());
  const json j = json::parse(in);
  Meta m;
  m.num_nodes = j.at("num_nodes");
  m.num_classes = j.at("num_classes");
  m.feature_dim = j.at("feature_dim");
  m.noisy_shortfall = j.at("noisy_edge_shortfall");
  m.s = j.at("s");
  m.L = j.at("L");
  return m;
}

const std::array<const char*, 2> kRoles{"train", "test"};

fs::path variant_dir(const fs::path& run, const ScenarioVariant& v) { return run / "variants" / v.tag; }

std::uint64_t variant_seed(const PipelineConfig& cfg, const ScenarioVariant& v) {
  return derive_seed(cfg.seed, seed_tag("variant"), seed_tag(v.tag.c_str()));
}

std::uint32_t cluster_count(const PipelineConfig& cfg, std::size_t n) {
  if (cfg.m > 0) return cfg.m;
  if (cfg.privacy == PrivacyKind::kAnonymous) {
    const auto m = static_cast<std::uint32_t>(n / std::max<std::uint32_t>(cfg.k, 1));
    if (m == 0) throw ValidationError("k = " + std::to_string(cfg.k) + " exceeds the node count " + std::to_string(n));
    return m;
  }
  return 30;
}

CgtConfig model_config(const PipelineConfig& cfg, std::uint32_t vocab, std::uint32_t labels, std::uint32_t s) {
  CgtConfig c;
  c.vocab = vocab;
  c.labels = labels;
  c.dim = cfg.dim;
  c.heads = cfg.heads;
  c.layers = cfg.layers;
  c.shape = TreeShape(s, cfg.L);
  c.variant = cfg.variant;
  c.use_label = cfg.use_label;
  c.use_layer_positions = cfg.use_layer_positions;
  c.use_ancestor_mask = cfg.use_ancestor_mask;
  return c;
}

std::vector<EncodedComputationGraph> dequantize_all(std::span<const TokenSequence> seqs, const QuantizerModel& q,
                                                    const TreeShape& shape) {
  std::vector<EncodedComputationGraph> out;
  out.reserve(seqs.size());
  for (const auto& ts : seqs) out.push_back(dequantize(ts, q, shape));
  return out;
}

// Uniform-random-token trees with the structural constraints of real ones.
std::vector<TokenSequence> uniform_token_baseline(const TreeShape& shape, std::int32_t null_token,
                                                  std::span<const TokenSequence> like, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenSequence> out;
  out.reserve(like.size());
  for (const auto& ref : like) {
    TokenSequence ts;
    ts.root_label = ref.root_label;
    ts.tokens.assign(shape.size(), null_token);
    ts.tokens[0] = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(null_token)));
    for (std::uint32_t t = 2; t <= shape.size(); ++t) {
      if (ts.tokens[shape.parent(t) - 1] == null_token) continue;
      ts.tokens[t - 1] = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(null_token) + 1));
    }
    out.push_back(std::move(ts));
  }
  return out;
}

// ---------------------------------------------------------------- stages

std::vector<fs::path> stage_sample(const PipelineConfig& cfg, const fs::path& dir, const ScenarioVariant& v) {
  Graph g = cfg.graph == "sbm" ? stochastic_block_model(cfg.sbm, derive_seed(cfg.seed, seed_tag("sbm")))
                               : load_graph(cfg.graph);
  if (g.dropped_self_loops() > 0) {
    std::cerr << "warning: dropped " << g.dropped_self_loops() << " self-loops from " << cfg.graph << '\n';
  }
  Meta meta;
  if (v.noisy_edges > 0) {
    auto noisy = add_noisy_edges(g, v.noisy_edges, derive_seed(cfg.seed, seed_tag("noisy-edges"), v.noisy_edges));
    meta.noisy_shortfall = noisy.shortfall;
    g = std::move(noisy.graph);
  }
  const std::uint64_t split_seed = derive_seed(cfg.seed, seed_tag("split"));
  const SplitSpec split = cfg.scenario == ScenarioKind::kBiasedSplit ? biased_split(g, v.alpha, {}, split_seed)
                                                                     : uniform_split(g.num_nodes(), {}, split_seed);
  if (split.train.empty() || split.test.empty()) throw ValidationError("graph too small for a train/test split");
  const TreeShape shape(v.s, cfg.L);
  const std::uint64_t tree_seed = derive_seed(cfg.seed, seed_tag("trees"));

  std::vector<fs::path> outputs;
  const fs::path graph_dir = dir / "graph";
  save_graph(g, graph_dir);
  for (const char* f : {"edges.tsv", "features.csv", "labels.tsv"}) outputs.push_back(graph_dir / f);
  save_split(split, dir / "split.tsv");
  outputs.push_back(dir / "split.tsv");
  for (const char* role : kRoles) {
    const auto& nodes = std::string(role) == "train" ? split.train : split.test;
    const auto cgs = sample_computation_graphs(g, shape, tree_seed, nodes);
    const fs::path p = dir / ("cgs_" + std::string(role) + ".bin");
    write_cgs(p, shape, g.feature_dim(), cgs);
    outputs.push_back(p);
  }
  meta.num_nodes = g.num_nodes();
  meta.num_classes = static_cast<std::size_t>(g.num_classes());
  meta.feature_dim = g.feature_dim();
  meta.s = v.s;
  meta.L = cfg.L;
  write_meta(dir / "meta.json", meta);
  outputs.push_back(dir / "meta.json");
  return outputs;
}

std::vector<fs::path> stage_quantize(const PipelineConfig& cfg, const fs::path& dir, const ScenarioVariant& v,
                                     json& privacy_block) {
  const Graph g = load_graph(dir / "graph");
  const std::uint32_t m = cluster_count(cfg, g.num_nodes());
  const std::uint64_t seed = derive_seed(variant_seed(cfg, v), seed_tag("quantize"));
  QuantizerModel q;
  switch (cfg.privacy) {
    case PrivacyKind::kNone:
    case PrivacyKind::kDpSgd:
      q = fit_kmeans_min_size(g.features(), {m, 1, cfg.n_fit, static_cast<std::uint32_t>(cfg.kmeans_iterations)}, seed);
      break;
    case PrivacyKind::kAnonymous:
      q = fit_kmeans_min_size(g.features(), {m, cfg.k, cfg.n_fit, static_cast<std::uint32_t>(cfg.kmeans_iterations)},
                              seed);
      break;
    case PrivacyKind::kDpKMeans: {
      DpKMeansOptions o;
      o.clusters = m;
      o.eps = cfg.eps;
      o.delta = cfg.delta;
      o.iterations = static_cast<std::uint32_t>(cfg.kmeans_iterations);
      o.clip_norm = cfg.clip;
      q = fit_dp_kmeans(clip_rows(g.features(), cfg.clip), o, seed);
      break;
    }
  }
  std::vector<fs::path> outputs{dir / "quantizer.bin"};
  write_quantizer(dir / "quantizer.bin", q);
  for (const char* role : kRoles) {
    const auto cgs = read_cgs(dir / ("cgs_" + std::string(role) + ".bin"));
    std::vector<TokenSequence> tokens;
    tokens.reserve(cgs.graphs.size());
    for (const auto& cg : cgs.graphs) tokens.push_back(quantize(cg, q));
    const fs::path p = dir / ("tokens_" + std::string(role) + ".tsv");
    write_tokens(p, tokens);
    outputs.push_back(p);
  }
  privacy_block["quantizer"] = q.privacy.describe();
  privacy_block["clusters"] = m;
  if (cfg.privacy == PrivacyKind::kAnonymous) privacy_block["k"] = cfg.k;
  if (cfg.privacy == PrivacyKind::kDpKMeans) {
    const double steps = 2.0 * static_cast<double>(cfg.kmeans_iterations);
    privacy_block["dp_kmeans"] = {{"eps", fmt(cfg.eps)}, {"delta", fmt(cfg.delta)}, {"clip", fmt(cfg.clip)},
                                  {"sigma_sum", fmt(privacy::gaussian_sigma(cfg.eps / steps, cfg.delta / steps, cfg.clip))},
                                  {"accounting", "basic composition (loose upper bound)"}};
  }
  return outputs;
}

std::vector<fs::path> stage_train(const PipelineConfig& cfg, const fs::path& dir, const ScenarioVariant& v,
                                  json& privacy_block) {
  const Meta meta = read_meta(dir / "meta.json");
  const QuantizerModel q = read_quantizer(dir / "quantizer.bin");
  const CgtConfig mc = model_config(cfg, q.num_clusters() + 1, static_cast<std::uint32_t>(meta.num_classes), meta.s);
  std::vector<fs::path> outputs;
  for (std::size_t r = 0; r < kRoles.size(); ++r) {
    const std::string role = kRoles[r];
    const auto tokens = read_tokens(dir / ("tokens_" + role + ".tsv"));
    TrainOptions o;
    o.epochs = cfg.epochs;
    o.max_steps = cfg.max_steps;
    o.batch_size = cfg.batch_size;
    o.learning_rate = cfg.lr;
    std::optional<privacy::DpSgdConfig> dp;
    if (cfg.privacy == PrivacyKind::kDpSgd) {
      const std::size_t bs = std::min(cfg.batch_size, tokens.size());
      std::size_t steps = ((tokens.size() + bs - 1) / bs) * cfg.epochs;
      if (cfg.max_steps > 0) steps = cfg.epochs == 0 ? cfg.max_steps : std::min(steps, cfg.max_steps);
      steps = std::max<std::size_t>(steps, 1);
      privacy::DpSgdConfig d;
      d.clip_norm = cfg.clip;
      d.delta = cfg.delta;
      d.steps = steps;
      const double per_step_eps = cfg.eps / static_cast<double>(steps);
      d.noise_multiplier = privacy::gaussian_sigma(per_step_eps, cfg.delta / static_cast<double>(steps), 1.0);
      dp = d;
    }
    const auto result = train(tokens, mc, o, dp, derive_seed(variant_seed(cfg, v), seed_tag("train"), r));
    save_checkpoint(dir / ("model_" + role + ".cgt"), mc, result.params);
    write_loss_trace(dir / ("loss_" + role + ".csv"), result.loss_trace);
    outputs.push_back(dir / ("model_" + role + ".cgt"));
    outputs.push_back(dir / ("loss_" + role + ".csv"));
    if (dp) {
      privacy_block["dp_sgd"][role] = {{"eps", fmt(result.privacy.eps)}, {"delta", fmt(result.privacy.delta)},
                                       {"noise_multiplier", fmt(result.privacy.sigma)},
                                       {"clip", fmt(result.privacy.clip)}, {"steps", result.steps},
                                       {"accounting", result.privacy.accounting}};
    }
  }
  return outputs;
}

std::vector<fs::path> stage_generate(const PipelineConfig& cfg, const fs::path& dir, const ScenarioVariant& v) {
  const QuantizerModel q = read_quantizer(dir / "quantizer.bin");
  std::vector<fs::path> outputs;
  for (std::size_t r = 0; r < kRoles.size(); ++r) {
    const std::string role = kRoles[r];
    const Checkpoint ck = load_checkpoint(dir / ("model_" + role + ".cgt"));
    const auto tokens = read_tokens(dir / ("tokens_" + role + ".tsv"));
    std::vector<double> label_weights(ck.config.labels, 0.0);
    for (const auto& ts : tokens) label_weights.at(static_cast<std::size_t>(ts.root_label)) += 1.0;
    const auto generated = generate(ck.params, ck.config, tokens.size(), label_weights, cfg.temperature,
                                    derive_seed(variant_seed(cfg, v), seed_tag("generate"), r));
    const fs::path tok_path = dir / ("generated_" + role + ".tsv");
    write_tokens(tok_path, generated);
    const fs::path cgs_path = dir / ("gen_cgs_" + role + ".bin");
    write_cgs(cgs_path, ck.config.shape, q.feature_dim(), dequantize_all(generated, q, ck.config.shape));
    outputs.push_back(tok_path);
    outputs.push_back(cgs_path);
  }
  return outputs;
}

std::vector<AccuracyRecord> bench_variant(const PipelineConfig& cfg, const fs::path& dir, const ScenarioVariant& v) {
  const Meta meta = read_meta(dir / "meta.json");
  const auto orig_train = read_cgs(dir / "cgs_train.bin").graphs;
  const auto orig_test = read_cgs(dir / "cgs_test.bin").graphs;
  const auto gen_train = read_cgs(dir / "gen_cgs_train.bin").graphs;
  const auto gen_test = read_cgs(dir / "gen_cgs_test.bin").graphs;
  std::vector<AccuracyRecord> records;
  for (std::size_t i = 0; i < cfg.gnn_models.size(); ++i) {
    GnnConfig g;
    g.aggregator = cfg.gnn_models[i];
    g.layers = cfg.L;
    g.hidden = cfg.gnn_hidden;
    g.epochs = cfg.gnn_epochs;
    g.learning_rate = cfg.gnn_lr;
    g.repeats = cfg.gnn_repeats;
    const std::uint64_t seed = derive_seed(variant_seed(cfg, v), seed_tag("bench"), i);
    auto original = train_eval(g, orig_train, orig_test, meta.num_classes, seed);
    original.dataset = "original";
    original.scenario = v.tag;
    auto generated = train_eval(g, gen_train, gen_test, meta.num_classes, seed);
    generated.dataset = "generated";
    generated.scenario = v.tag;
    records.push_back(std::move(original));
    records.push_back(std::move(generated));
  }
  write_bench_report(dir / "bench.csv", records);
  return records;
}

std::vector<fs::path> stage_stats(const PipelineConfig& cfg, const fs::path& dir, const ScenarioVariant& v) {
  const QuantizerModel q = read_quantizer(dir / "quantizer.bin");
  const TreeShape shape(v.s, cfg.L);
  std::vector<EncodedComputationGraph> original, quantized, generated;
  std::vector<TokenSequence> train_tokens;
  for (const char* role : kRoles) {
    auto o = read_cgs(dir / ("cgs_" + std::string(role) + ".bin")).graphs;
    original.insert(original.end(), std::make_move_iterator(o.begin()), std::make_move_iterator(o.end()));
    const auto tokens = read_tokens(dir / ("tokens_" + std::string(role) + ".tsv"));
    for (auto& cg : dequantize_all(tokens, q, shape)) quantized.push_back(std::move(cg));
    train_tokens.insert(train_tokens.end(), tokens.begin(), tokens.end());
    auto gen = read_cgs(dir / ("gen_cgs_" + std::string(role) + ".bin")).graphs;
    generated.insert(generated.end(), std::make_move_iterator(gen.begin()), std::make_move_iterator(gen.end()));
  }
  const auto baseline_tokens = uniform_token_baseline(shape, q.null_token(), train_tokens,
                                                      derive_seed(variant_seed(cfg, v), seed_tag("baseline")));
  const auto baseline = dequantize_all(baseline_tokens, q, shape);

  const GraphStats s_orig = graph_stats(original);
  const GraphStats s_quant = graph_stats(quantized);
  const GraphStats s_gen = graph_stats(generated);
  const GraphStats s_base = graph_stats(baseline);
  std::vector<fs::path> outputs;
  for (const auto& [name, stats] : {std::pair<const char*, const GraphStats*>{"original", &s_orig},
                                    {"quantized", &s_quant}, {"generated", &s_gen}, {"baseline", &s_base}}) {
    const fs::path p = dir / ("stats_" + std::string(name) + ".csv");
    write_stats_csv(p, *stats);
    outputs.push_back(p);
  }
  auto w1 = [](const GraphStats& a, const GraphStats& b) {
    return json{{"zero", wasserstein1(a.zero_counts, b.zero_counts)},
                {"duplicate", wasserstein1(a.duplicate_counts, b.duplicate_counts)}};
  };
  json summary;
  summary["variant"] = v.tag;
  summary["graphs"] = {{"original", original.size()}, {"generated", generated.size()}};
  summary["w1_generated_vs_original"] = w1(s_gen, s_orig);
  summary["w1_baseline_vs_original"] = w1(s_base, s_orig);
  summary["w1_generated_vs_quantized"] = w1(s_gen, s_quant);
  summary["w1_baseline_vs_quantized"] = w1(s_base, s_quant);
  const fs::path p = dir / "summary.json";
  std::ofstream out(p);
  out << summary.dump(2) << '\n';
  out.close();
  outputs.push_back(p);
  return outputs;
}

std::vector<fs::path> stage_inputs(Stage stage, const fs::path& dir) {
  auto files = [&](std::initializer_list<std::string> names) {
    std::vector<fs::path> out;
    for (const auto& n : names) out.push_back(dir / n);
    return out;
  };
  switch (stage) {
    case Stage::kSample: return {};
    case Stage::kQuantize:
      return files({"graph/edges.tsv", "graph/features.csv", "graph/labels.tsv", "cgs_train.bin", "cgs_test.bin"});
    case Stage::kTrain: return files({"meta.json", "quantizer.bin", "tokens_train.tsv", "tokens_test.tsv"});
    case Stage::kGenerate:
      return files({"quantizer.bin", "tokens_train.tsv", "tokens_test.tsv", "model_train.cgt", "model_test.cgt"});
    case Stage::kBench:
      return files({"meta.json", "cgs_train.bin", "cgs_test.bin", "gen_cgs_train.bin", "gen_cgs_test.bin"});
    case Stage::kStats:
      return files({"quantizer.bin", "cgs_train.bin", "cgs_test.bin", "tokens_train.tsv", "tokens_test.tsv",
                    "gen_cgs_train.bin", "gen_cgs_test.bin"});
  }
  return {};
}

void run_stage_locked(Stage stage, const PipelineConfig& cfg, const fs::path& run) {
  const ConfigMap map = to_config_map(cfg);
  json manifest = read_manifest(run);
  const auto variants = scenario_variants(cfg);

  std::vector<fs::path> inputs;
  for (const auto& v : variants) {
    for (auto& p : stage_inputs(stage, variant_dir(run, v))) inputs.push_back(std::move(p));
  }
  check_inputs(run, manifest, stage, map, inputs);

  manifest["tool"] = "cgt";
  manifest["version"] = tool_version();
  manifest["prng"] = "xoshiro256** (splitmix64 seeding)";
  manifest["seed_derivation"] =
      "child = splitmix64(splitmix64(parent ^ tag * 0x9e3779b97f4a7c15) ^ index), tag = FNV-1a of the stream name";
  manifest["config"] = json(map);
  if (stage == Stage::kSample) {
    manifest["stages"] = json::object();
    manifest["privacy"] = {{"mode", privacy_name(cfg.privacy)}};
  }
  json& privacy_block = manifest["privacy"];
  privacy_block["mode"] = privacy_name(cfg.privacy);

  std::vector<fs::path> outputs;
  std::vector<AccuracyRecord> records;
  for (const auto& v : variants) {
    const fs::path dir = variant_dir(run, v);
    fs::create_directories(dir);
    std::vector<fs::path> produced;
    switch (stage) {
      case Stage::kSample: produced = stage_sample(cfg, dir, v); break;
      case Stage::kQuantize: produced = stage_quantize(cfg, dir, v, privacy_block); break;
      case Stage::kTrain: produced = stage_train(cfg, dir, v, privacy_block); break;
      case Stage::kGenerate: produced = stage_generate(cfg, dir, v); break;
      case Stage::kBench: {
        auto r = bench_variant(cfg, dir, v);
        records.insert(records.end(), r.begin(), r.end());
        produced.push_back(dir / "bench.csv");
        break;
      }
      case Stage::kStats: produced = stage_stats(cfg, dir, v); break;
    }
    outputs.insert(outputs.end(), produced.begin(), produced.end());
  }
  if (stage == Stage::kBench) {
    write_bench_report(run / kBenchReport, records);
    outputs.push_back(run / kBenchReport);
  }
  // Downstream outputs were derived from the previous outputs of this stage.
  for (const auto& [later, ups] : upstream()) {
    if (std::find(ups.begin(), ups.end(), stage) != ups.end()) manifest["stages"].erase(stage_name(later));
  }
  record_outputs(run, manifest, stage, map, outputs);
  write_manifest(run, manifest);
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s + " " : s + std::string(width - s.size(), ' ');
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string describe_corr(const std::optional<double>& v, std::size_t n) {
  if (n < 2) return "undefined (n<2)";
  if (!v) return "undefined (zero variance)";
  return fixed(*v);
}

}  // namespace

// ---------------------------------------------------------------- config

const ConfigMap& default_config() {
  static const ConfigMap defaults = to_config_map(PipelineConfig{});
  return defaults;
}

ConfigMap read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("missing config file " + path.string());
  ConfigMap map;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!default_config().contains(key)) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    map[key] = value;
  }
  return map;
}

PipelineConfig parse_config(const ConfigMap& map) {
  for (const auto& [k, v] : map) {
    if (!default_config().contains(k)) throw ValidationError("config: unknown key '" + k + "'");
  }
  auto get = [&](const std::string& key) -> std::string {
    const auto it = map.find(key);
    return it != map.end() ? it->second : default_config().at(key);
  };
  auto u32 = [&](const std::string& key) { return parse_number<std::uint32_t>(key, get(key)); };
  auto size = [&](const std::string& key) { return parse_number<std::size_t>(key, get(key)); };
  auto real = [&](const std::string& key) { return parse_real(key, get(key)); };
  auto flag = [&](const std::string& key) { return parse_bool(key, get(key)); };

  PipelineConfig c;
  c.graph = get("graph");
  c.seed = parse_number<std::uint64_t>("seed", get("seed"));
  c.sbm.num_nodes = size("sbm_nodes");
  c.sbm.num_classes = parse_number<int>("sbm_classes", get("sbm_classes"));
  c.sbm.p_in = real("sbm_p_in");
  c.sbm.p_out = real("sbm_p_out");
  c.sbm.feature_dim = size("sbm_dim");
  c.sbm.class_separation = real("sbm_separation");
  c.sbm.feature_noise = real("sbm_noise");
  c.s = u32("s");
  c.L = u32("L");
  c.scenario = parse_scenario(get("scenario"));
  c.noisy_edges.clear();
  for (const auto& x : split_list(get("ne"))) c.noisy_edges.push_back(parse_number<std::uint32_t>("ne", x));
  c.alphas.clear();
  for (const auto& x : split_list(get("alpha"))) {
    if (x == "iid") {
      c.alphas.emplace_back(std::nullopt);
    } else {
      const double a = parse_real("alpha", x);
      if (!(a > 0.0 && a <= 1.0)) throw ValidationError("config: alpha must be in (0, 1] or 'iid'");
      c.alphas.emplace_back(a);
    }
  }
  c.sampling_numbers.clear();
  for (const auto& x : split_list(get("sn"))) c.sampling_numbers.push_back(parse_number<std::uint32_t>("sn", x));
  c.privacy = parse_privacy(get("privacy"));
  c.k = u32("k");
  c.m = u32("m");
  c.n_fit = size("n_fit");
  c.kmeans_iterations = size("kmeans_iterations");
  c.eps = real("eps");
  c.delta = real("delta");
  c.clip = real("clip");
  c.dim = u32("dim");
  c.heads = u32("heads");
  c.layers = u32("layers");
  const std::string variant = get("variant");
  if (variant == "full") {
    c.variant = CgtVariant::kFullSequence;
  } else if (variant == "cost-efficient") {
    c.variant = CgtVariant::kCostEfficient;
  } else {
    throw ValidationError("config: variant must be 'full' or 'cost-efficient'");
  }
  c.use_label = flag("use_label");
  c.use_layer_positions = flag("use_layer_positions");
  c.use_ancestor_mask = flag("use_ancestor_mask");
  c.epochs = size("epochs");
  c.max_steps = size("max_steps");
  c.batch_size = size("batch_size");
  c.lr = real("lr");
  c.temperature = real("temperature");
  c.gnn_models.clear();
  for (const auto& x : split_list(get("gnn_models"))) c.gnn_models.push_back(parse_aggregator(x));
  c.gnn_hidden = u32("gnn_hidden");
  c.gnn_epochs = size("gnn_epochs");
  c.gnn_lr = real("gnn_lr");
  c.gnn_repeats = size("gnn_repeats");

  if (c.s < 1 || c.L < 1) throw ValidationError("config: s and L must be >= 1");
  if (c.k < 1) throw ValidationError("config: k must be >= 1");
  if (c.gnn_models.empty()) throw ValidationError("config: gnn_models is empty");
  if (c.batch_size == 0) throw ValidationError("config: batch_size must be positive");
  if (c.epochs == 0 && c.max_steps == 0) throw ValidationError("config: need epochs > 0 or max_steps > 0");
  if (c.scenario == ScenarioKind::kNoisyEdges && c.noisy_edges.empty()) throw ValidationError("config: empty ne grid");
  if (c.scenario == ScenarioKind::kBiasedSplit && c.alphas.empty()) throw ValidationError("config: empty alpha grid");
  if (c.scenario == ScenarioKind::kSamplingNumber && c.sampling_numbers.empty()) {
    throw ValidationError("config: empty sn grid");
  }
  for (const auto sn : c.sampling_numbers) {
    if (sn < 1) throw ValidationError("config: sampling numbers must be >= 1");
  }
  if (c.privacy == PrivacyKind::kDpKMeans || c.privacy == PrivacyKind::kDpSgd) {
    if (!(c.eps > 0.0)) throw ValidationError("config: eps must be > 0");
    if (!(c.delta > 0.0 && c.delta < 1.0)) throw ValidationError("config: delta must be in (0, 1)");
    if (!(c.clip > 0.0)) throw ValidationError("config: clip must be > 0");
  }
  model_config(c, 2, 1, c.s).validate();
  return c;
}

ConfigMap to_config_map(const PipelineConfig& c) {
  ConfigMap m;
  m["graph"] = c.graph;
  m["seed"] = std::to_string(c.seed);
  m["sbm_nodes"] = std::to_string(c.sbm.num_nodes);
  m["sbm_classes"] = std::to_string(c.sbm.num_classes);
  m["sbm_p_in"] = fmt(c.sbm.p_in);
  m["sbm_p_out"] = fmt(c.sbm.p_out);
  m["sbm_dim"] = std::to_string(c.sbm.feature_dim);
  m["sbm_separation"] = fmt(c.sbm.class_separation);
  m["sbm_noise"] = fmt(c.sbm.feature_noise);
  m["s"] = std::to_string(c.s);
  m["L"] = std::to_string(c.L);
  m["scenario"] = scenario_name(c.scenario);
  std::vector<std::string> items;
  for (const auto x : c.noisy_edges) items.push_back(std::to_string(x));
  m["ne"] = join(items);
  items.clear();
  for (const auto& a : c.alphas) items.push_back(a ? fmt(*a) : "iid");
  m["alpha"] = join(items);
  items.clear();
  for (const auto x : c.sampling_numbers) items.push_back(std::to_string(x));
  m["sn"] = join(items);
  m["privacy"] = privacy_name(c.privacy);
  m["k"] = std::to_string(c.k);
  m["m"] = std::to_string(c.m);
  m["n_fit"] = std::to_string(c.n_fit);
  m["kmeans_iterations"] = std::to_string(c.kmeans_iterations);
  m["eps"] = fmt(c.eps);
  m["delta"] = fmt(c.delta);
  m["clip"] = fmt(c.clip);
  m["dim"] = std::to_string(c.dim);
  m["heads"] = std::to_string(c.heads);
  m["layers"] = std::to_string(c.layers);
  m["variant"] = c.variant == CgtVariant::kFullSequence ? "full" : "cost-efficient";
  m["use_label"] = c.use_label ? "true" : "false";
  m["use_layer_positions"] = c.use_layer_positions ? "true" : "false";
  m["use_ancestor_mask"] = c.use_ancestor_mask ? "true" : "false";
  m["epochs"] = std::to_string(c.epochs);
  m["max_steps"] = std::to_string(c.max_steps);
  m["batch_size"] = std::to_string(c.batch_size);
  m["lr"] = fmt(c.lr);
  m["temperature"] = fmt(c.temperature);
  items.clear();
  for (const auto a : c.gnn_models) items.push_back(to_string(a));
  m["gnn_models"] = join(items);
  m["gnn_hidden"] = std::to_string(c.gnn_hidden);
  m["gnn_epochs"] = std::to_string(c.gnn_epochs);
  m["gnn_lr"] = fmt(c.gnn_lr);
  m["gnn_repeats"] = std::to_string(c.gnn_repeats);
  return m;
}

std::string scenario_name(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::kNone: return "none";
    case ScenarioKind::kNoisyEdges: return "noisy-edges";
    case ScenarioKind::kBiasedSplit: return "biased-split";
    case ScenarioKind::kSamplingNumber: return "sampling-number";
  }
  return "none";
}

std::vector<ScenarioVariant> scenario_variants(const PipelineConfig& cfg) {
  std::vector<ScenarioVariant> out;
  switch (cfg.scenario) {
    case ScenarioKind::kNone: out.push_back({"base", 0, std::nullopt, cfg.s}); break;
    case ScenarioKind::kNoisyEdges:
      for (const auto ne : cfg.noisy_edges) out.push_back({"ne=" + std::to_string(ne), ne, std::nullopt, cfg.s});
      break;
    case ScenarioKind::kBiasedSplit:
      for (const auto& a : cfg.alphas) out.push_back({"alpha=" + (a ? fmt(*a) : std::string("iid")), 0, a, cfg.s});
      break;
    case ScenarioKind::kSamplingNumber:
      for (const auto sn : cfg.sampling_numbers) out.push_back({"sn=" + std::to_string(sn), 0, std::nullopt, sn});
      break;
  }
  std::set<std::string> tags;
  for (const auto& v : out) {
    if (!tags.insert(v.tag).second) throw ValidationError("config: duplicate scenario value " + v.tag);
  }
  return out;
}

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::kSample: return "sample";
    case Stage::kQuantize: return "quantize";
    case Stage::kTrain: return "train";
    case Stage::kGenerate: return "generate";
    case Stage::kBench: return "bench";
    case Stage::kStats: return "stats";
  }
  return "unknown";
}

Stage parse_stage(const std::string& name) {
  for (const Stage s : {Stage::kSample, Stage::kQuantize, Stage::kTrain, Stage::kGenerate, Stage::kBench,
                        Stage::kStats}) {
    if (stage_name(s) == name) return s;
  }
  throw ValidationError("unknown stage '" + name + "'");
}

std::string tool_version() { return "cgt 0.1.0"; }

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / "run.lock") {
  fs::create_directories(run_dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (f == nullptr) {
    throw ValidationError("run directory " + run_dir.string() + " is locked (remove " + path_.string() +
                          " if no other process owns it)");
  }
  std::fclose(f);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

void run_stage(Stage stage, const PipelineConfig& cfg, const fs::path& run_dir) {
  const RunLock lock(run_dir);
  run_stage_locked(stage, cfg, run_dir);
}

void run_stage_with_upstream(Stage stage, const PipelineConfig& cfg, const fs::path& run_dir) {
  const RunLock lock(run_dir);
  const ConfigMap map = to_config_map(cfg);
  bool rerun = false;
  for (const Stage up : upstream().at(stage)) {
    if (!rerun) {
      const json manifest = read_manifest(run_dir);
      const auto name = stage_name(up);
      rerun = !manifest.contains("stages") || !manifest["stages"].contains(name) ||
              manifest["stages"][name]["config"] != stage_config(up, map);
      if (!rerun) {
        for (const auto& [path, hash] : manifest["stages"][name]["outputs"].items()) {
          const fs::path p = run_dir / path;
          if (!fs::exists(p) || io::sha256_file(p) != hash.get<std::string>()) {
            rerun = true;
            break;
          }
        }
      }
    }
    if (rerun) run_stage_locked(up, cfg, run_dir);
  }
  run_stage_locked(stage, cfg, run_dir);
}

void run_pipeline(const PipelineConfig& cfg, const fs::path& run_dir) {
  {
    const RunLock lock(run_dir);
    for (const Stage s : {Stage::kSample, Stage::kQuantize, Stage::kTrain, Stage::kGenerate, Stage::kBench,
                          Stage::kStats}) {
      run_stage_locked(s, cfg, run_dir);
    }
  }
  make_report(run_dir);
}

PipelineConfig load_run_config(const fs::path& run_dir) {
  if (!fs::exists(run_dir / kManifest)) throw MissingArtifactError("no manifest.json in " + run_dir.string());
  const json manifest = read_manifest(run_dir);
  ConfigMap map;
  for (const auto& [k, v] : manifest.at("config").items()) map[k] = v.get<std::string>();
  return parse_config(map);
}

Report make_report(const fs::path& run_dir) {
  const auto records = read_bench_report(run_dir / kBenchReport);
  const json manifest = read_manifest(run_dir);

  Report rep;
  std::vector<std::string> scenario_order;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  for (const auto& r : records) {
    const auto key = std::make_pair(r.scenario, r.model);
    auto it = index.find(key);
    if (it == index.end()) {
      if (std::find(scenario_order.begin(), scenario_order.end(), r.scenario) == scenario_order.end()) {
        scenario_order.push_back(r.scenario);
      }
      it = index.emplace(key, rep.rows.size()).first;
      rep.rows.push_back({r.scenario, r.model, std::nullopt, std::nullopt});
    }
    auto& row = rep.rows[it->second];
    if (r.dataset == "original") row.original = r.accuracy;
    else if (r.dataset == "generated") row.generated = r.accuracy;
    else throw ValidationError("bench_report.csv: unknown dataset tag '" + r.dataset + "'");
  }

  std::vector<double> a, b;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_scenario;
  for (const auto& row : rep.rows) {
    if (!row.original || !row.generated) continue;
    a.push_back(*row.original);
    b.push_back(*row.generated);
    by_scenario[row.scenario].first.push_back(*row.original);
    by_scenario[row.scenario].second.push_back(*row.generated);
  }
  rep.complete_pairs = a.size();
  if (!a.empty()) rep.overall = correlation_suite(a, b);
  for (const auto& [s, pair] : by_scenario) rep.per_scenario[s] = correlation_suite(pair.first, pair.second);

  std::ostringstream os;
  os << "Benchmark effectiveness\n\n";
  os << pad("scenario", 16) << pad("model", 8) << pad("original", 10) << pad("generated", 10) << "abs_diff\n";
  for (const auto& row : rep.rows) {
    os << pad(row.scenario, 16) << pad(row.model, 8) << pad(row.original ? fixed(*row.original) : "-", 10)
       << pad(row.generated ? fixed(*row.generated) : "-", 10)
       << (row.original && row.generated ? fixed(std::abs(*row.original - *row.generated)) : std::string("gap"))
       << '\n';
  }
  const std::size_t incomplete = rep.rows.size() - rep.complete_pairs;
  os << "\npairs: " << rep.complete_pairs << " complete";
  if (incomplete > 0) os << ", " << incomplete << " incomplete (marked gap, excluded)";
  os << '\n';
  os << "MSE      " << (rep.complete_pairs > 0 ? fixed(rep.overall.mse, 6) : std::string("undefined (n=0)")) << '\n';
  os << "Pearson  " << describe_corr(rep.overall.pearson, rep.complete_pairs) << '\n';
  os << "Spearman " << describe_corr(rep.overall.spearman, rep.complete_pairs) << '\n';
  if (scenario_order.size() > 1) {
    os << "\nper scenario\n";
    for (const auto& s : scenario_order) {
      const auto it = rep.per_scenario.find(s);
      if (it == rep.per_scenario.end()) {
        os << pad(s, 16) << "no complete pairs\n";
        continue;
      }
      const std::size_t n = by_scenario[s].first.size();
      os << pad(s, 16) << "MSE " << fixed(it->second.mse, 6) << "  Pearson " << describe_corr(it->second.pearson, n)
         << "  Spearman " << describe_corr(it->second.spearman, n) << '\n';
    }
  }

  bool stats_header = false;
  if (fs::exists(run_dir / "variants")) {
    for (const auto& s : scenario_order) {
      const fs::path p = run_dir / "variants" / s / "summary.json";
      if (!fs::exists(p)) continue;
      std::ifstream in(p);
      const json j = json::parse(in);
      if (!stats_header) {
        os << "\nGraph statistics (W1 against the original trees; baseline = uniform random tokens)\n";
        os << pad("scenario", 16) << pad("zero:gen", 12) << pad("zero:base", 12) << pad("dup:gen", 12) << "dup:base\n";
        stats_header = true;
      }
      const auto& g = j["w1_generated_vs_original"];
      const auto& bl = j["w1_baseline_vs_original"];
      os << pad(s, 16) << pad(fixed(g["zero"].get<double>()), 12) << pad(fixed(bl["zero"].get<double>()), 12)
         << pad(fixed(g["duplicate"].get<double>()), 12) << fixed(bl["duplicate"].get<double>()) << '\n';
    }
  }

  os << "\nPrivacy\n";
  if (manifest.contains("privacy")) {
    for (const auto& [k, v] : manifest["privacy"].items()) os << "  " << k << ": " << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
  } else {
    os << "  (no manifest)\n";
  }
  os << "  root labels of generated trees are drawn from the empirical label distribution\n";
  rep.text = os.str();

  std::ofstream txt(run_dir / "report.txt");
  txt << rep.text;
  std::ofstream csv(run_dir / "report.csv");
  csv << "scenario,model,original,generated\n";
  for (const auto& row : rep.rows) {
    csv << row.scenario << ',' << row.model << ',' << (row.original ? fmt(*row.original) : "") << ','
        << (row.generated ? fmt(*row.generated) : "") << '\n';
  }
  csv << "# pairs," << rep.complete_pairs << "\n";
  csv << "# mse," << (rep.complete_pairs > 0 ? fmt(rep.overall.mse) : "undefined") << '\n';
  csv << "# pearson," << format_optional(rep.overall.pearson) << '\n';
  csv << "# spearman," << format_optional(rep.overall.spearman) << '\n';
  if (!txt || !csv) throw ValidationError("cannot write report in " + run_dir.string());
  return rep;
}

VariantArtifacts load_variant(const fs::path& run_dir, const ScenarioVariant& variant) {
  const fs::path dir = variant_dir(run_dir, variant);
  VariantArtifacts a;
  a.original_train = read_cgs(dir / "cgs_train.bin").graphs;
  a.original_test = read_cgs(dir / "cgs_test.bin").graphs;
  const QuantizerModel q = read_quantizer(dir / "quantizer.bin");
  const TreeShape shape = a.original_train.front().shape;
  a.quantized_train = dequantize_all(read_tokens(dir / "tokens_train.tsv"), q, shape);
  a.quantized_test = dequantize_all(read_tokens(dir / "tokens_test.tsv"), q, shape);
  a.generated_train = read_cgs(dir / "gen_cgs_train.bin").graphs;
  a.generated_test = read_cgs(dir / "gen_cgs_test.bin").graphs;
  return a;
}

}  // namespace cgt::pipeline
