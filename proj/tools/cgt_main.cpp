// Command-line front end: graph utilities, pipeline stages and reports.

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cgt/error.hpp"
#include "cgt/graph.hpp"
#include "cgt/pipeline.hpp"
#include "cgt/random.hpp"

namespace fs = std::filesystem;
using cgt::pipeline::ConfigMap;

namespace {

struct FlagSpec {
  const char* flag;
  const char* key;
  const char* help;
};

// Flags that override config keys. Any key can also be set with --set key=value.
constexpr FlagSpec kFlags[] = {
    {"--graph", "graph", "graph directory (edges.tsv, features.csv, labels.tsv) or 'sbm'"},
    {"--seed", "seed", "master seed"},
    {"--s", "s", "children per tree node"},
    {"--L", "L", "tree depth"},
    {"--scenario", "scenario", "none | noisy-edges | biased-split | sampling-number"},
    {"--ne", "ne", "noisy edges per node, comma separated"},
    {"--alpha", "alpha", "PPR restart probabilities for biased splits ('iid' for uniform)"},
    {"--sn", "sn", "sampling numbers, comma separated"},
    {"--privacy", "privacy", "none | k-anonymous | dp-kmeans | dp-sgd"},
    {"--k", "k", "minimum cluster size for k-anonymity"},
    {"--m", "m", "number of clusters (0: n/k under k-anonymity, else 30)"},
    {"--eps", "eps", "privacy budget epsilon"},
    {"--delta", "delta", "privacy budget delta"},
    {"--clip", "clip", "clipping norm"},
    {"--dim", "dim", "transformer width"},
    {"--heads", "heads", "attention heads"},
    {"--layers", "layers", "transformer blocks"},
    {"--variant", "variant", "full | cost-efficient"},
    {"--epochs", "epochs", "training epochs"},
    {"--max-steps", "max_steps", "cap on optimizer steps (0: none)"},
    {"--batch-size", "batch_size", "training batch size"},
    {"--lr", "lr", "learning rate"},
    {"--temperature", "temperature", "sampling temperature (<= 0: greedy)"},
    {"--models", "gnn_models", "GNN models: gcn,sgc,gin,gat"},
    {"--gnn-epochs", "gnn_epochs", "GNN training epochs"},
    {"--gnn-repeats", "gnn_repeats", "GNN repeats per accuracy"},
};

struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::vector<std::string> sets;
  std::string config_file;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& flags) {
  cmd->add_option("--config", flags.config_file, "key = value file")->check(CLI::ExistingFile);
  for (const auto& f : kFlags) cmd->add_option(f.flag, flags.values[f.key], f.help);
  cmd->add_option("--set", flags.sets, "override any config key, key=value (repeatable)");
}

// Layers, lowest precedence first: base, config file, --set, named flags.
ConfigMap overlay(ConfigMap base, const ConfigFlags& flags) {
  if (!flags.config_file.empty()) {
    for (const auto& [k, v] : cgt::pipeline::read_config_file(flags.config_file)) base[k] = v;
  }
  for (const auto& kv : flags.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw cgt::ValidationError("--set expects key=value, got '" + kv + "'");
    base[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  for (const auto& [k, v] : flags.values) {
    if (!v.empty()) base[k] = v;
  }
  return base;
}

// Stage verbs continue an existing run: its manifest config is the base.
cgt::pipeline::PipelineConfig stage_config(const fs::path& run, const ConfigFlags& flags) {
  ConfigMap base;
  if (fs::exists(run / "manifest.json")) base = cgt::pipeline::to_config_map(cgt::pipeline::load_run_config(run));
  return cgt::pipeline::parse_config(overlay(base, flags));
}

int run(int argc, char** argv) {
  CLI::App app{"Computation-graph transformer: synthesize benchmark graphs and check GNN rankings"};
  app.require_subcommand(1);
  app.set_version_flag("--version", cgt::pipeline::tool_version());

  // graph utilities
  auto* graph = app.add_subcommand("graph", "graph utilities");
  graph->require_subcommand(1);
  std::string graph_in, graph_out;
  auto* save = graph->add_subcommand("save", "load a graph and write it back in canonical form");
  save->add_option("input", graph_in, "input graph directory")->required();
  save->add_option("output", graph_out, "output graph directory")->required();
  save->callback([&] {
    const cgt::Graph g = cgt::load_graph(graph_in);
    cgt::save_graph(g, graph_out);
    std::cout << "wrote " << g.num_nodes() << " nodes, " << g.num_edges() << " edges to " << graph_out << '\n';
  });

  cgt::SbmOptions sbm;
  std::uint64_t sbm_seed = 0;
  auto* sbm_cmd = graph->add_subcommand("sbm", "write a stochastic block model graph");
  sbm_cmd->add_option("output", graph_out, "output graph directory")->required();
  sbm_cmd->add_option("--nodes", sbm.num_nodes, "node count")->capture_default_str();
  sbm_cmd->add_option("--classes", sbm.num_classes, "class count")->capture_default_str();
  sbm_cmd->add_option("--p-in", sbm.p_in, "edge probability within a class")->capture_default_str();
  sbm_cmd->add_option("--p-out", sbm.p_out, "edge probability across classes")->capture_default_str();
  sbm_cmd->add_option("--dim", sbm.feature_dim, "feature dimension")->capture_default_str();
  sbm_cmd->add_option("--seed", sbm_seed, "seed")->capture_default_str();
  sbm_cmd->callback([&] {
    const cgt::Graph g = cgt::stochastic_block_model(sbm, cgt::derive_seed(sbm_seed, cgt::seed_tag("sbm")));
    cgt::save_graph(g, graph_out);
    std::cout << "wrote " << g.num_nodes() << " nodes, " << g.num_edges() << " edges to " << graph_out << '\n';
  });

  // pipeline
  fs::path run_dir = "run";
  ConfigFlags pipeline_flags;
  auto* pipeline = app.add_subcommand("pipeline", "run every stage and write the report");
  pipeline->add_option("--run", run_dir, "run directory")->capture_default_str();
  add_config_flags(pipeline, pipeline_flags);
  pipeline->callback([&] {
    const auto cfg = cgt::pipeline::parse_config(overlay({}, pipeline_flags));
    cgt::pipeline::run_pipeline(cfg, run_dir);
    std::cout << cgt::pipeline::make_report(run_dir).text;
  });

  // individual stages
  std::map<std::string, ConfigFlags> stage_flags;
  bool upstream = false;
  for (const auto stage : {cgt::pipeline::Stage::kSample, cgt::pipeline::Stage::kQuantize,
                           cgt::pipeline::Stage::kTrain, cgt::pipeline::Stage::kGenerate,
                           cgt::pipeline::Stage::kBench, cgt::pipeline::Stage::kStats}) {
    const std::string name = cgt::pipeline::stage_name(stage);
    auto* cmd = app.add_subcommand(name, "run the " + name + " stage");
    cmd->add_option("--run", run_dir, "run directory")->capture_default_str();
    cmd->add_flag("--upstream", upstream, "first re-run upstream stages that are missing or out of date");
    auto& flags = stage_flags[name];
    add_config_flags(cmd, flags);
    cmd->callback([&, stage, name] {
      const auto cfg = stage_config(run_dir, stage_flags.at(name));
      if (upstream) {
        cgt::pipeline::run_stage_with_upstream(stage, cfg, run_dir);
      } else {
        cgt::pipeline::run_stage(stage, cfg, run_dir);
      }
      if (stage == cgt::pipeline::Stage::kBench) {
        std::cout << cgt::pipeline::make_report(run_dir).text;
      } else {
        std::cout << name << ": done (" << run_dir.string() << ")\n";
      }
    });
  }

  auto* report = app.add_subcommand("report", "summarize a run directory");
  report->add_option("--run", run_dir, "run directory")->capture_default_str();
  report->callback([&] { std::cout << cgt::pipeline::make_report(run_dir).text; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(cgt::ExitCode::kValidation);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const cgt::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(cgt::ExitCode::kValidation);
  }
}
