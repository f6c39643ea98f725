// raymap: cluster bearing-only detections into mapped objects, calibrate sensor
// parameters, evaluate predictions and generate synthetic scenes.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "raymap/cli.hpp"

namespace {

using namespace raymap::cli;

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config, std::string("Run configuration JSON (else $") + kConfigEnv + ")");
  app->add_option("--seed", o.seed, "Seed for every random choice");
  app->add_option("--threshold", o.threshold, "Existence threshold for reported counts (default 0.5)");
  app->add_option("--radius", o.radius, "Matching radius in meters (default 10)");
  app->add_flag("--prediction-mode", o.prediction_mode, "Loosen pruning for sparse classes");
  app->add_option("--prior", o.prior, "Position prior")->check(CLI::IsMember({"uniform", "spike-slab"}));
  app->add_option("--road-network", o.road_network, "Road network JSON for the spike-slab prior");
}

int run(std::vector<std::string> args) {
  CLI::App app{"Map objects from bearing-only detections"};
  app.require_subcommand(1);
  Options opts;
  opts.argv = args;

  ClusterArgs ca;
  auto* cluster = app.add_subcommand("cluster", "Estimate objects from a ray file");
  cluster->add_option("rays", ca.rays, "Rays (JSON lines)")->required();
  cluster->add_option("-o,--out", ca.out, "Hypotheses output (JSON lines)")->required();
  cluster->add_option("--params", ca.params, "Parameter checkpoint");
  cluster->add_option("--truth", ca.truth, "Truth objects, drawn in the GeoJSON overlay");
  add_common(cluster, opts);

  TrainArgs ta;
  auto* trainer = app.add_subcommand("train", "Calibrate per-class sensor parameters");
  trainer->add_option("rays_dir", ta.rays_dir, "Directory of ray batches (*.jsonl)")->required();
  trainer->add_option("-o,--out", ta.out, "Checkpoint output")->required();
  trainer->add_option("--truth-dir", ta.truth_dir, "Truth files named like their batches");
  trainer->add_option("--init", ta.init, "Checkpoint to start from");
  add_common(trainer, opts);

  EvalArgs ea;
  auto* evaluate = app.add_subcommand("eval", "Precision, recall and PR-curve AUC");
  evaluate->add_option("predictions", ea.predictions, "Hypotheses (JSON lines)")->required();
  evaluate->add_option("truth", ea.truth, "Truth objects (JSON lines)")->required();
  evaluate->add_option("-o,--out", ea.out, "Metrics CSV output")->required();
  evaluate->add_option("--thresholds", ea.thresholds, "Descending thresholds (default: every score)")
      ->delimiter(',');
  add_common(evaluate, opts);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene");
  synth->add_option("scene", sa.config, "Scene configuration JSON")->required();
  synth->add_option("out_dir", sa.out_dir, "Output directory")->required();
  add_common(synth, opts);

  std::filesystem::path manifest;
  auto* replay = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  replay->add_option("manifest", manifest, "Manifest JSON")->required();

  try {
    std::reverse(args.begin(), args.end());  // CLI11 consumes vectors from the back
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kParseError;
  }

  if (*cluster) return cmd_cluster(ca, opts);
  if (*trainer) return cmd_train(ta, opts);
  if (*evaluate) return cmd_eval(ea, opts);
  if (*synth) return cmd_synth(sa, opts);
  std::filesystem::path cwd;
  std::vector<std::string> recorded;
  const int status = guarded(std::cerr, [&] {
    recorded = manifest_argv(manifest, &cwd);
    return int(kOk);
  });
  if (status != kOk) return status;
  if (!recorded.empty() && recorded.front() == "replay") {
    std::cerr << "raymap: parse error: manifest records a replay\n";
    return kParseError;
  }
  if (!cwd.empty()) std::filesystem::current_path(cwd);
  return run(recorded);
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args));
}
