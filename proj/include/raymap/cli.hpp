#pragma once

// Command implementations behind the raymap tool: cluster, train, eval, synth.
// Each returns a process exit status and writes a run manifest next to its outputs.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "raymap/io.hpp"

#ifndef RAYMAP_VERSION
#define RAYMAP_VERSION "0.1.0"
#endif

namespace raymap::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kParseError = 2, kInvariantViolation = 3, kDegenerateTraining = 4 };

inline constexpr const char* kConfigEnv = "RAYMAP_CONFIG";

/// Flags shared by every command; unset fields leave the config file's values alone.
struct Options {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<double> threshold;
  std::optional<double> radius;
  bool prediction_mode = false;
  std::optional<std::string> prior;
  std::optional<fs::path> road_network;
  std::vector<std::string> argv;  // recorded in the manifest for replay
};

/// The flag wins over the environment; the environment only ever supplies a path.
inline std::optional<fs::path> config_path(const Options& o) {
  if (o.config) return o.config;
  if (const char* env = std::getenv(kConfigEnv); env && *env) return fs::path(env);
  return std::nullopt;
}

inline RunConfig resolve_config(const Options& o) {
  RunConfig c;
  if (auto path = config_path(o)) {
    auto in = io_detail::open_in(*path);
    c = read_run_config(in, path->string());
  }
  if (o.seed) c.em.seed = c.train.seed = *o.seed;
  if (o.threshold) c.threshold = *o.threshold;
  if (o.radius) c.radius = *o.radius;
  if (o.prior) {
    if (*o.prior != "uniform" && *o.prior != "spike-slab") throw ParseError("--prior must be uniform or spike-slab");
    c.prior.kind = *o.prior;
  }
  if (o.prediction_mode) {
    c.em.eccentricity_max = c.prediction.eccentricity_max;
    c.em.variance_max = c.prediction.variance_max;
    c.em.existence_min = c.prediction.existence_min;
  }
  return c;
}

inline PriorDensity build_prior(const RunConfig& c, const Options& o, std::span<const Ray> rays) {
  double area = 0.0;
  if (c.prior.region_area) {
    area = *c.prior.region_area;
  } else {
    const auto box = BoundingBox::around(std::vector<Ray>(rays.begin(), rays.end()));
    const double pad = 2.0 * c.em.edge_radius;
    area = (box.width() + pad) * (box.height() + pad);
  }
  if (c.prior.kind == "uniform") return PriorDensity::uniform(area);
  if (!o.road_network) throw ParseError("--prior spike-slab needs --road-network");
  auto in = io_detail::open_in(*o.road_network);
  auto prior = PriorDensity::spike_slab(area, read_road_network(in, o.road_network->string()),
                                        c.prior.intersection_radius, c.prior.affinity);
  prior.default_affinity = c.prior.default_affinity;
  prior.validate();
  return prior;
}

struct Manifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  std::vector<std::string> argv;
  double wall_clock_seconds = 0.0;
};

inline json to_json(const Manifest& m) {
  return {{"command", m.command},
          {"config", m.config},
          {"seed", m.seed},
          {"inputs", m.inputs},
          {"outputs", m.outputs},
          {"argv", m.argv},
          {"cwd", fs::current_path().string()},
          {"code_version", RAYMAP_VERSION},
          {"wall_clock_seconds", m.wall_clock_seconds}};
}

inline void write_manifest(const fs::path& path, const Manifest& m) {
  write_file_atomic(path, to_json(m).dump(2) + "\n");
}

inline fs::path sibling(const fs::path& out, const std::string& suffix) { return fs::path(out.string() + suffix); }

/// Maps exceptions to exit codes and prints a one-line diagnostic.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ParseError& e) {
    err << "raymap: parse error: " << e.what() << '\n';
    return kParseError;
  } catch (const InvariantError& e) {
    err << "raymap: invariant violation: " << e.what() << '\n';
    return kInvariantViolation;
  } catch (const DegenerateGeometry& e) {
    err << "raymap: invariant violation: " << e.what() << '\n';
    return kInvariantViolation;
  } catch (const fs::filesystem_error& e) {
    err << "raymap: " << e.what() << '\n';
    return kParseError;
  }
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::set<int> classes_of(std::span<const Ray> rays) {
  std::set<int> out;
  for (const auto& r : rays) out.insert(r.class_id);
  return out;
}

struct ClusterArgs {
  fs::path rays;
  std::optional<fs::path> params;  // checkpoint; classes absent from it use the config
  fs::path out;
  std::optional<fs::path> truth;   // only drawn in the overlay
};

inline int cmd_cluster(const ClusterArgs& args, const Options& opts, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    const Stopwatch clock;
    const RunConfig config = resolve_config(opts);
    auto rays_in = io_detail::open_in(args.rays);
    SceneBatch all;
    all.rays = read_rays(rays_in, args.rays.string(), config.geo_reference);
    all.bounding_box = BoundingBox::around(all.rays);
    std::vector<TruthObject> truth;
    if (args.truth) {
      auto in = io_detail::open_in(*args.truth);
      truth = read_truth(in, args.truth->string());
    }
    Checkpoint checkpoint;
    if (args.params) {
      checkpoint = checkpoint_from_json(io_detail::read_document(*args.params), args.params->string());
    }
    const PriorDensity prior = build_prior(config, opts, all.rays);

    std::vector<ClassHypothesis> hyps;
    for (int cls : classes_of(all.rays)) {
      const auto batch = all.only_class(cls);
      auto it = checkpoint.params.find(cls);
      const SensorParams& params = it != checkpoint.params.end() ? it->second : config.params_for(cls);
      auto result = run_em(batch, params, prior, config.em);
      std::vector<std::size_t> global;  // class-local ray index -> index in the file
      for (std::size_t j = 0; j < all.rays.size(); ++j) {
        if (all.rays[j].class_id == cls) global.push_back(j);
      }
      for (auto& h : result.hypotheses) {
        for (auto& [j, a] : h.assignment_marginals) j = global[j];
        hyps.push_back({cls, std::move(h)});
      }
    }

    std::ostringstream body;
    write_hypotheses(body, hyps);
    write_file_atomic(args.out, body.str());
    const auto geo = sibling(args.out, ".geojson");
    write_file_atomic(geo, geojson_overlay(hyps, truth).dump(2) + "\n");

    Manifest m{"cluster", to_json(config), config.em.seed, {}, {}, opts.argv, clock.seconds()};
    m.inputs["rays"] = args.rays.string();
    if (args.params) m.inputs["params"] = args.params->string();
    if (args.truth) m.inputs["truth"] = args.truth->string();
    if (auto c = config_path(opts)) m.inputs["config"] = c->string();
    if (opts.road_network) m.inputs["road_network"] = opts.road_network->string();
    m.outputs["hypotheses"] = args.out.string();
    m.outputs["geojson"] = geo.string();
    write_manifest(sibling(args.out, ".manifest.json"), m);
    return int(kOk);
  });
}

struct TrainArgs {
  fs::path rays_dir;
  std::optional<fs::path> truth_dir;
  fs::path out;
  std::optional<fs::path> init;  // checkpoint to resume parameters from
};

/// Batch files in a directory, by name.
inline std::vector<fs::path> batch_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ParseError(dir.string() + ": not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".jsonl") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline int cmd_train(const TrainArgs& args, const Options& opts, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    const Stopwatch clock;
    const RunConfig config = resolve_config(opts);
    const auto files = batch_files(args.rays_dir);
    if (files.empty()) throw ParseError(args.rays_dir.string() + ": no .jsonl batch files");

    std::vector<SceneBatch> batches;
    std::vector<Ray> every_ray;
    std::size_t labeled = 0;
    for (const auto& f : files) {
      auto in = io_detail::open_in(f);
      SceneBatch b;
      b.rays = read_rays(in, f.string(), config.geo_reference);
      b.bounding_box = BoundingBox::around(b.rays);
      if (args.truth_dir && fs::exists(*args.truth_dir / f.filename())) {
        auto tin = io_detail::open_in(*args.truth_dir / f.filename());
        b.ground_truth = read_truth(tin, (*args.truth_dir / f.filename()).string());
        ++labeled;
      }
      every_ray.insert(every_ray.end(), b.rays.begin(), b.rays.end());
      batches.push_back(std::move(b));
    }

    // Batches are regions of comparable size; the prior area is that of the largest.
    RunConfig sized = config;
    if (!sized.prior.region_area) {
      double area = 0.0;
      for (const auto& b : batches) {
        const double pad = 2.0 * config.em.edge_radius;
        area = std::max(area, (b.bounding_box.width() + pad) * (b.bounding_box.height() + pad));
      }
      sized.prior.region_area = area;
    }
    const PriorDensity prior = build_prior(sized, opts, every_ray);

    std::map<int, SensorParams> init;
    Checkpoint resume;
    if (args.init) {
      resume = checkpoint_from_json(io_detail::read_document(*args.init), args.init->string());
    }
    for (int cls : classes_of(every_ray)) {
      auto it = resume.params.find(cls);
      init.emplace(cls, it != resume.params.end() ? it->second : config.params_for(cls));
    }
    if (init.empty()) throw ParseError(args.rays_dir.string() + ": batches contain no rays");

    const auto result = train(batches, init, prior, config.em, config.train);
    for (const auto& e : result.trace) {
      if (e.skipped) err << "raymap: warning: step " << e.step << " skipped: " << e.note << '\n';
    }
    write_file_atomic(args.out, dump_checkpoint({result.params, result.optimizer}));
    std::ostringstream trace;
    write_trace_csv(trace, result.trace);
    const auto trace_path = sibling(args.out, ".trace.csv");
    write_file_atomic(trace_path, trace.str());

    Manifest m{"train", to_json(config), config.train.seed, {}, {}, opts.argv, clock.seconds()};
    m.inputs["rays_dir"] = args.rays_dir.string();
    if (args.truth_dir) m.inputs["truth_dir"] = args.truth_dir->string();
    if (args.init) m.inputs["init"] = args.init->string();
    if (auto c = config_path(opts)) m.inputs["config"] = c->string();
    m.outputs["checkpoint"] = args.out.string();
    m.outputs["trace"] = trace_path.string();
    write_manifest(sibling(args.out, ".manifest.json"), m);

    if (labeled == 0) {
      err << "raymap: warning: no batch has ground truth; training degenerates to the prior\n";
      return int(kDegenerateTraining);
    }
    return int(kOk);
  });
}

struct EvalArgs {
  fs::path predictions;
  fs::path truth;
  fs::path out;  // metrics CSV
  std::vector<double> thresholds;  // empty: every distinct existence score
};

inline int cmd_eval(const EvalArgs& args, const Options& opts, std::ostream& err = std::cerr,
                    std::ostream& summary = std::cout) {
  return guarded(err, [&] {
    const Stopwatch clock;
    const RunConfig config = resolve_config(opts);
    auto pin = io_detail::open_in(args.predictions);
    const auto hyps = read_hypotheses(pin, args.predictions.string());
    auto tin = io_detail::open_in(args.truth);
    const auto truth = read_truth(tin, args.truth.string());

    std::map<int, std::vector<Prediction>> by_class;
    std::map<int, std::vector<Vec2>> truth_by_class;
    for (const auto& h : hyps) by_class[h.class_id].push_back({h.hypothesis.position, h.hypothesis.existence});
    for (const auto& t : truth) truth_by_class[t.class_id].push_back(t.position);
    std::set<int> classes;
    for (const auto& [cls, v] : by_class) classes.insert(cls);
    for (const auto& [cls, v] : truth_by_class) classes.insert(cls);

    std::ostringstream csv;
    write_metrics_header(csv);
    const auto old = summary.precision(6);
    for (int cls : classes) {
      // Without truth there is no recall to report; truth without predictions scores zero.
      if (!truth_by_class.count(cls)) {
        err << "raymap: warning: class " << cls << " appears only in the predictions file; skipped\n";
        continue;
      }
      if (!by_class.count(cls)) {
        err << "raymap: warning: class " << cls << " has no predictions\n";
      }
      const auto& p = by_class[cls];
      const auto& t = truth_by_class[cls];
      const auto curve = args.thresholds.empty() ? pr_curve(p, t, config.radius, config.threshold)
                                                 : pr_curve(p, t, config.radius, args.thresholds, config.threshold);
      write_metrics_rows(csv, cls, curve);
      const double prec = precision_of(curve), rec = recall_of(curve);
      const double f1 = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
      summary << "class " << cls << ": precision " << prec << " recall " << rec << " f1 " << f1 << " auc "
              << curve.auc << " (tp " << curve.tp << ", fp " << curve.fp << ", fn " << curve.fn << ")\n";
    }
    summary.precision(old);
    write_file_atomic(args.out, csv.str());

    Manifest m{"eval", to_json(config), config.em.seed, {}, {}, opts.argv, clock.seconds()};
    m.inputs["predictions"] = args.predictions.string();
    m.inputs["truth"] = args.truth.string();
    if (auto c = config_path(opts)) m.inputs["config"] = c->string();
    m.outputs["metrics"] = args.out.string();
    write_manifest(sibling(args.out, ".manifest.json"), m);
    return int(kOk);
  });
}

struct SynthArgs {
  fs::path config;
  fs::path out_dir;
};

inline int cmd_synth(const SynthArgs& args, const Options& opts, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    const Stopwatch clock;
    SynthConfig config = synth_config_from_json(io_detail::read_document(args.config), args.config.string());
    if (opts.seed) config.seed = *opts.seed;
    const auto out = generate(config);

    std::ostringstream rays, truth, provenance;
    write_rays(rays, out.batch.rays);
    write_truth(truth, *out.batch.ground_truth);
    write_provenance(provenance, out.provenance);
    write_file_atomic(args.out_dir / "rays.jsonl", rays.str());
    write_file_atomic(args.out_dir / "truth.jsonl", truth.str());
    write_file_atomic(args.out_dir / "provenance.jsonl", provenance.str());

    Manifest m{"synth", to_json(config), config.seed, {}, {}, opts.argv, clock.seconds()};
    m.inputs["config"] = args.config.string();
    for (const char* name : {"rays", "truth", "provenance"}) {
      m.outputs[name] = (args.out_dir / (std::string(name) + ".jsonl")).string();
    }
    write_manifest(args.out_dir / "manifest.json", m);
    return int(kOk);
  });
}

/// argv recorded by a manifest, for replay.
inline std::vector<std::string> manifest_argv(const fs::path& path, fs::path* cwd = nullptr) {
  const json j = io_detail::read_document(path);
  const std::string ctx = path.string() + ": ";
  auto argv = io_detail::req<std::vector<std::string>>(j, "argv", ctx);
  if (argv.empty()) throw ParseError(ctx + "empty argv");
  if (cwd && j.contains("cwd")) *cwd = j["cwd"].get<std::string>();
  return argv;
}

}  // namespace raymap::cli
