#pragma once

// File formats: JSON-lines rays, truth and hypotheses; road networks; run configuration;
// parameter checkpoints; GeoJSON overlays; trace CSV. Needs the single-header nlohmann json.hpp on the include path.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "raymap/calibrate.hpp"
#include "raymap/cluster.hpp"
#include "raymap/eval.hpp"
#include "raymap/synth.hpp"

namespace raymap {

using json = nlohmann::json;

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

namespace io_detail {

inline std::string where(const std::string& source, std::size_t line) {
  return source + ":" + std::to_string(line) + ": ";
}

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& ctx) {
  if (!j.is_object()) throw ParseError(ctx + "expected a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.count(key)) throw ParseError(ctx + "unknown key \"" + key + "\"");
  }
}

template <class T>
void opt(const json& j, const char* key, T& out, const std::string& ctx) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw ParseError(ctx + "field \"" + key + "\": " + e.what());
  }
}

template <class T>
T req(const json& j, const char* key, const std::string& ctx) {
  if (!j.contains(key)) throw ParseError(ctx + "missing field \"" + key + "\"");
  T out{};
  opt(j, key, out, ctx);
  return out;
}

/// Calls fn(parsed, line_number) for every non-blank line.
template <class Fn>
void for_each_line(std::istream& in, const std::string& source, Fn&& fn) {
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(where(source, line) + "malformed JSON: " + e.what());
    }
    fn(j, where(source, line));
  }
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open");
  return in;
}

inline json parse_document(std::istream& in, const std::string& source) {
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(source + ": malformed JSON: " + e.what());
  }
}

inline json read_document(const std::filesystem::path& path) {
  auto in = open_in(path);
  return parse_document(in, path.string());
}

// Unconstrained coordinates can be -inf (gps_sigma = 0); JSON has no infinities.
inline json encode_real(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

inline double decode_real(const json& j, const std::string& ctx) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    if (s == "nan") return NAN;
  }
  throw ParseError(ctx + "expected a number");
}

inline int class_key(const std::string& key, const std::string& ctx) {
  try {
    std::size_t used = 0;
    const int cls = std::stoi(key, &used);
    if (used == key.size()) return cls;
  } catch (const std::exception&) {
  }
  throw ParseError(ctx + "class key \"" + key + "\" is not an integer");
}

inline Vec2 decode_point(const json& j, const std::string& ctx) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw ParseError(ctx + "expected a point [x, y]");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace io_detail

// ---- geodesy ---------------------------------------------------------------------

struct GeoReference {
  double lat = 0.0;  // degrees
  double lon = 0.0;
};

/// Equirectangular projection around the reference: adequate for city-block extents only.
inline Vec2 equirectangular(double lat, double lon, const GeoReference& ref) {
  constexpr double kEarthRadius = 6371008.8;  // m, mean
  constexpr double kDeg = kPi / 180.0;
  return {kEarthRadius * (lon - ref.lon) * kDeg * std::cos(ref.lat * kDeg), kEarthRadius * (lat - ref.lat) * kDeg};
}

// ---- rays and truth --------------------------------------------------------------

inline json to_json(const Ray& r) {
  // The construction angle rebuilds the bearing bit for bit; atan2 of it may not.
  Vec2 rebuilt(std::cos(r.heading), std::sin(r.heading));
  rebuilt /= rebuilt.norm();
  const double theta = rebuilt == r.bearing ? r.heading : r.bearing_angle();
  return {{"x", r.origin[0]}, {"y", r.origin[1]}, {"theta", theta},
          {"conf", r.confidence}, {"class", r.class_id}, {"frame", r.frame_id}};
}

inline Ray ray_from_json(const json& j, const std::string& ctx, const std::optional<GeoReference>& ref = {}) {
  io_detail::check_keys(j, {"x", "y", "lat", "lon", "theta", "conf", "class", "frame"}, ctx);
  Vec2 origin;
  if (j.contains("lat") || j.contains("lon")) {
    if (!ref) throw ParseError(ctx + "lat/lon rays need a geo_reference in the config");
    origin = equirectangular(io_detail::req<double>(j, "lat", ctx), io_detail::req<double>(j, "lon", ctx), *ref);
  } else {
    origin = {io_detail::req<double>(j, "x", ctx), io_detail::req<double>(j, "y", ctx)};
  }
  std::string frame;
  if (j.contains("frame")) frame = j["frame"].is_string() ? j["frame"].get<std::string>() : j["frame"].dump();
  try {
    return make_ray(origin, io_detail::req<double>(j, "theta", ctx), io_detail::req<double>(j, "conf", ctx),
                    io_detail::req<int>(j, "class", ctx), std::move(frame));
  } catch (const InvariantError& e) {
    throw ParseError(ctx + e.what());
  }
}

inline std::vector<Ray> read_rays(std::istream& in, const std::string& source = "rays",
                                  const std::optional<GeoReference>& ref = {}) {
  std::vector<Ray> out;
  io_detail::for_each_line(in, source, [&](const json& j, const std::string& ctx) {
    out.push_back(ray_from_json(j, ctx, ref));
  });
  return out;
}

inline void write_rays(std::ostream& os, std::span<const Ray> rays) {
  for (const auto& r : rays) os << to_json(r).dump() << '\n';
}

inline std::vector<TruthObject> read_truth(std::istream& in, const std::string& source = "truth") {
  std::vector<TruthObject> out;
  io_detail::for_each_line(in, source, [&](const json& j, const std::string& ctx) {
    io_detail::check_keys(j, {"x", "y", "class"}, ctx);
    out.push_back({{io_detail::req<double>(j, "x", ctx), io_detail::req<double>(j, "y", ctx)},
                   io_detail::req<int>(j, "class", ctx)});
  });
  return out;
}

inline void write_truth(std::ostream& os, std::span<const TruthObject> truth) {
  for (const auto& t : truth) {
    os << json{{"x", t.position[0]}, {"y", t.position[1]}, {"class", t.class_id}}.dump() << '\n';
  }
}

// ---- hypotheses ------------------------------------------------------------------

struct ClassHypothesis {
  int class_id = 0;
  ObjectHypothesis hypothesis;
};

inline void write_hypotheses(std::ostream& os, std::span<const ClassHypothesis> hyps) {
  for (const auto& [cls, h] : hyps) {
    json rays = json::array();
    for (const auto& [j, a] : h.assignment_marginals) rays.push_back({j, a});
    os << json{{"x", h.position[0]},
               {"y", h.position[1]},
               {"existence", h.existence},
               {"class", cls},
               {"cov", {h.covariance(0, 0), h.covariance(0, 1), h.covariance(1, 1)}},
               {"rays", rays}}
              .dump()
       << '\n';
  }
}

inline std::vector<ClassHypothesis> read_hypotheses(std::istream& in, const std::string& source = "hypotheses") {
  std::vector<ClassHypothesis> out;
  io_detail::for_each_line(in, source, [&](const json& j, const std::string& ctx) {
    io_detail::check_keys(j, {"x", "y", "existence", "class", "cov", "rays"}, ctx);
    ClassHypothesis c;
    c.class_id = io_detail::req<int>(j, "class", ctx);
    c.hypothesis.position = {io_detail::req<double>(j, "x", ctx), io_detail::req<double>(j, "y", ctx)};
    c.hypothesis.existence = io_detail::req<double>(j, "existence", ctx);
    if (!(c.hypothesis.existence >= 0.0 && c.hypothesis.existence <= 1.0)) {
      throw ParseError(ctx + "existence outside [0, 1]");
    }
    if (j.contains("cov")) {
      const auto v = io_detail::req<std::vector<double>>(j, "cov", ctx);
      if (v.size() != 3) throw ParseError(ctx + "cov must hold [xx, xy, yy]");
      c.hypothesis.covariance << v[0], v[1], v[1], v[2];
    }
    if (j.contains("rays")) {
      for (const auto& e : j["rays"]) {
        if (!e.is_array() || e.size() != 2) throw ParseError(ctx + "rays entries are [index, marginal]");
        c.hypothesis.assignment_marginals.emplace_back(e[0].get<std::size_t>(), e[1].get<double>());
      }
    }
    out.push_back(std::move(c));
  });
  return out;
}

// ---- road network ----------------------------------------------------------------

inline std::vector<Vec2> read_road_network(std::istream& in, const std::string& source = "road network") {
  const json j = io_detail::parse_document(in, source);
  const std::string ctx = source + ": ";
  io_detail::check_keys(j, {"intersections"}, ctx);
  if (!j.contains("intersections") || !j["intersections"].is_array()) {
    throw ParseError(ctx + "missing \"intersections\" array");
  }
  std::vector<Vec2> out;
  for (std::size_t k = 0; k < j["intersections"].size(); ++k) {
    out.push_back(io_detail::decode_point(j["intersections"][k], ctx + "intersection " + std::to_string(k) + ": "));
  }
  return out;
}

inline void write_road_network(std::ostream& os, std::span<const Vec2> intersections) {
  json pts = json::array();
  for (const auto& p : intersections) pts.push_back({p[0], p[1]});
  os << json{{"intersections", pts}}.dump() << '\n';
}

// ---- sensor parameters and checkpoints -------------------------------------------

inline json to_json(const SensorParams& p) {
  const auto v = p.values();
  return {{"radial_rate", v.radial_rate},         {"angular_sigma", v.angular_sigma},
          {"gps_sigma", v.gps_sigma},             {"detect_ceiling", v.detect_ceiling},
          {"conf_slope", v.conf_slope},           {"conf_intercept", v.conf_intercept},
          {"clutter_density", v.clutter_density}, {"existence_logit", v.existence_logit}};
}

inline SensorParams params_from_json(const json& j, const std::string& ctx) {
  io_detail::check_keys(j,
                        {"radial_rate", "angular_sigma", "gps_sigma", "detect_ceiling", "conf_slope",
                         "conf_intercept", "clutter_density", "existence_logit"},
                        ctx);
  SensorParams::Values v;
  io_detail::opt(j, "radial_rate", v.radial_rate, ctx);
  io_detail::opt(j, "angular_sigma", v.angular_sigma, ctx);
  io_detail::opt(j, "gps_sigma", v.gps_sigma, ctx);
  io_detail::opt(j, "detect_ceiling", v.detect_ceiling, ctx);
  io_detail::opt(j, "conf_slope", v.conf_slope, ctx);
  io_detail::opt(j, "conf_intercept", v.conf_intercept, ctx);
  io_detail::opt(j, "clutter_density", v.clutter_density, ctx);
  io_detail::opt(j, "existence_logit", v.existence_logit, ctx);
  try {
    return SensorParams(v);
  } catch (const InvariantError& e) {
    throw ParseError(ctx + e.what());
  }
}

inline std::map<int, SensorParams> class_params_from_json(const json& j, const std::string& ctx) {
  if (!j.is_object()) throw ParseError(ctx + "expected an object keyed by class id");
  std::map<int, SensorParams> out;
  for (const auto& [key, value] : j.items()) {
    const int cls = io_detail::class_key(key, ctx);
    out.emplace(cls, params_from_json(value, ctx + "class " + key + ": "));
  }
  return out;
}

inline json to_json(const std::map<int, SensorParams>& params) {
  json out = json::object();
  for (const auto& [cls, p] : params) out[std::to_string(cls)] = to_json(p);
  return out;
}

/// Per-class parameters and optimizer state. Parameters are stored in their exact
/// unconstrained coordinates so a load/save cycle is bitwise stable.
struct Checkpoint {
  std::map<int, SensorParams> params;
  std::map<int, AdamState> optimizer;
};

inline json to_json(const Checkpoint& c) {
  auto vec = [](const auto& v) {
    json a = json::array();
    for (Eigen::Index k = 0; k < v.size(); ++k) a.push_back(io_detail::encode_real(v[k]));
    return a;
  };
  json classes = json::object();
  for (const auto& [cls, p] : c.params) {
    json entry{{"unconstrained", vec(p.unconstrained())}, {"values", to_json(p)}};
    if (auto it = c.optimizer.find(cls); it != c.optimizer.end()) {
      entry["adam"] = {{"m", vec(it->second.m)}, {"v", vec(it->second.v)}, {"t", it->second.t}};
    }
    classes[std::to_string(cls)] = std::move(entry);
  }
  return {{"version", kCheckpointVersion}, {"classes", classes}};
}

inline Checkpoint checkpoint_from_json(const json& j, const std::string& source = "checkpoint") {
  const std::string ctx = source + ": ";
  io_detail::check_keys(j, {"version", "classes"}, ctx);
  const int version = io_detail::req<int>(j, "version", ctx);
  if (version != kCheckpointVersion) throw ParseError(ctx + "unsupported version " + std::to_string(version));
  if (!j.contains("classes") || !j["classes"].is_object()) throw ParseError(ctx + "missing \"classes\"");
  auto vec = [&](const json& a, std::size_t n, const std::string& c) {
    if (!a.is_array() || a.size() != n) throw ParseError(c + "expected " + std::to_string(n) + " entries");
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) v[static_cast<Eigen::Index>(k)] = io_detail::decode_real(a[k], c);
    return v;
  };
  Checkpoint out;
  for (const auto& [key, entry] : j["classes"].items()) {
    const std::string c = ctx + "class " + key + ": ";
    const int cls = io_detail::class_key(key, ctx);
    io_detail::check_keys(entry, {"unconstrained", "values", "adam"}, c);
    if (!entry.contains("unconstrained")) throw ParseError(c + "missing \"unconstrained\"");
    const ParamVec u = vec(entry["unconstrained"], kNumParams, c);
    out.params.emplace(cls, SensorParams::from_unconstrained(u));
    if (entry.contains("adam")) {
      const auto& a = entry["adam"];
      io_detail::check_keys(a, {"m", "v", "t"}, c + "adam: ");
      AdamState s = AdamState::start(u);
      s.m = vec(a.at("m"), kNumParams, c + "adam.m: ");
      s.v = vec(a.at("v"), kNumParams, c + "adam.v: ");
      s.t = io_detail::req<int>(a, "t", c + "adam: ");
      out.optimizer.emplace(cls, std::move(s));
    }
  }
  return out;
}

inline std::string dump_checkpoint(const Checkpoint& c) { return to_json(c).dump(2) + "\n"; }

// ---- run configuration -----------------------------------------------------------

/// Loosened pruning for sparse classes at prediction time.
struct PredictionMode {
  double eccentricity_max = 0.99;
  double variance_max = 100.0;
  double existence_min = 0.1;
};

struct PriorConfig {
  std::string kind = "uniform";  // uniform | spike-slab
  std::optional<double> region_area;  // m^2; defaults to the padded ray bounding box
  double intersection_radius = 15.0;
  std::map<int, double> affinity;
  double default_affinity = 0.5;
};

struct RunConfig {
  EmConfig em;
  TrainConfig train;
  SensorParams default_params;
  std::map<int, SensorParams> params;
  PriorConfig prior;
  PredictionMode prediction;
  double threshold = 0.5;
  double radius = 10.0;
  std::optional<GeoReference> geo_reference;

  const SensorParams& params_for(int cls) const {
    auto it = params.find(cls);
    return it == params.end() ? default_params : it->second;
  }
};

inline json to_json(const EmConfig& c) {
  return {{"em_iters", c.em_iters},
          {"bp_iters", c.bp_iters},
          {"merge_radius", c.merge_radius},
          {"eccentricity_max", c.eccentricity_max},
          {"variance_max", c.variance_max},
          {"existence_min", c.existence_min},
          {"edge_radius", c.edge_radius},
          {"init_cell", c.init_cell},
          {"seed", c.seed},
          {"min_intersection_angle", c.min_intersection_angle},
          {"gate_sigmas", c.gate_sigmas},
          {"gate_margin", c.gate_margin},
          {"bp_damping", c.bp_damping},
          {"bp_tol", c.bp_tol},
          {"newton",
           {{"trust_radius", c.newton.trust_radius},
            {"eig_floor", c.newton.eig_floor},
            {"line_search", c.newton.line_search},
            {"max_halvings", c.newton.max_halvings}}},
          {"sensor",
           {{"distance_floor", c.sensor.distance_floor},
            {"fov_half_width", c.sensor.fov_half_width},
            {"fov_edge", c.sensor.fov_edge},
            {"confidence_clamp", c.sensor.confidence_clamp}}}};
}

inline EmConfig em_config_from_json(const json& j, const std::string& ctx) {
  using io_detail::opt;
  io_detail::check_keys(j,
                        {"em_iters", "bp_iters", "merge_radius", "eccentricity_max", "variance_max", "existence_min",
                         "edge_radius", "init_cell", "seed", "min_intersection_angle", "gate_sigmas", "gate_margin",
                         "bp_damping", "bp_tol", "newton", "sensor"},
                        ctx);
  EmConfig c;
  opt(j, "em_iters", c.em_iters, ctx);
  opt(j, "bp_iters", c.bp_iters, ctx);
  opt(j, "merge_radius", c.merge_radius, ctx);
  opt(j, "eccentricity_max", c.eccentricity_max, ctx);
  opt(j, "variance_max", c.variance_max, ctx);
  opt(j, "existence_min", c.existence_min, ctx);
  opt(j, "edge_radius", c.edge_radius, ctx);
  opt(j, "init_cell", c.init_cell, ctx);
  opt(j, "seed", c.seed, ctx);
  opt(j, "min_intersection_angle", c.min_intersection_angle, ctx);
  opt(j, "gate_sigmas", c.gate_sigmas, ctx);
  opt(j, "gate_margin", c.gate_margin, ctx);
  opt(j, "bp_damping", c.bp_damping, ctx);
  opt(j, "bp_tol", c.bp_tol, ctx);
  if (j.contains("newton")) {
    const auto& n = j["newton"];
    const std::string nc = ctx + "newton: ";
    io_detail::check_keys(n, {"trust_radius", "eig_floor", "line_search", "max_halvings"}, nc);
    opt(n, "trust_radius", c.newton.trust_radius, nc);
    opt(n, "eig_floor", c.newton.eig_floor, nc);
    opt(n, "line_search", c.newton.line_search, nc);
    opt(n, "max_halvings", c.newton.max_halvings, nc);
  }
  if (j.contains("sensor")) {
    const auto& s = j["sensor"];
    const std::string sc = ctx + "sensor: ";
    io_detail::check_keys(s, {"distance_floor", "fov_half_width", "fov_edge", "confidence_clamp"}, sc);
    opt(s, "distance_floor", c.sensor.distance_floor, sc);
    opt(s, "fov_half_width", c.sensor.fov_half_width, sc);
    opt(s, "fov_edge", c.sensor.fov_edge, sc);
    opt(s, "confidence_clamp", c.sensor.confidence_clamp, sc);
  }
  return c;
}

inline json to_json(const TrainConfig& c) {
  json trainable = json::array();
  for (int k = 0; k < kNumParams; ++k) {
    if (c.trainable[static_cast<std::size_t>(k)]) trainable.push_back(std::string(kParamNames[k]));
  }
  return {{"learning_rate", c.learning_rate}, {"decay", c.decay},
          {"steps", c.steps},                 {"seed", c.seed},
          {"detach_inner", c.detach_inner},   {"implicit_positions", c.implicit_positions},
          {"trainable", trainable}};
}

inline TrainConfig train_config_from_json(const json& j, const std::string& ctx) {
  using io_detail::opt;
  io_detail::check_keys(j, {"learning_rate", "decay", "steps", "seed", "detach_inner", "implicit_positions", "trainable"},
                        ctx);
  TrainConfig c;
  opt(j, "learning_rate", c.learning_rate, ctx);
  opt(j, "decay", c.decay, ctx);
  opt(j, "steps", c.steps, ctx);
  opt(j, "seed", c.seed, ctx);
  opt(j, "detach_inner", c.detach_inner, ctx);
  opt(j, "implicit_positions", c.implicit_positions, ctx);
  if (j.contains("trainable")) {
    c.trainable.fill(false);
    for (const auto& name : io_detail::req<std::vector<std::string>>(j, "trainable", ctx)) {
      int k = 0;
      while (k < kNumParams && kParamNames[k] != name) ++k;
      if (k == kNumParams) throw ParseError(ctx + "unknown parameter \"" + name + "\" in trainable");
      c.trainable[static_cast<std::size_t>(k)] = true;
    }
  }
  return c;
}

inline json to_json(const RunConfig& c) {
  json affinity = json::object();
  for (const auto& [cls, w] : c.prior.affinity) affinity[std::to_string(cls)] = w;
  json prior{{"kind", c.prior.kind},
             {"intersection_radius", c.prior.intersection_radius},
             {"affinity", affinity},
             {"default_affinity", c.prior.default_affinity}};
  prior["region_area"] = c.prior.region_area ? json(*c.prior.region_area) : json(nullptr);
  json out{{"em", to_json(c.em)},
           {"train", to_json(c.train)},
           {"default_params", to_json(c.default_params)},
           {"params", to_json(c.params)},
           {"prior", prior},
           {"prediction_mode",
            {{"eccentricity_max", c.prediction.eccentricity_max},
             {"variance_max", c.prediction.variance_max},
             {"existence_min", c.prediction.existence_min}}},
           {"threshold", c.threshold},
           {"radius", c.radius}};
  out["geo_reference"] = c.geo_reference ? json{{"lat", c.geo_reference->lat}, {"lon", c.geo_reference->lon}}
                                         : json(nullptr);
  return out;
}

inline RunConfig run_config_from_json(const json& j, const std::string& source = "config") {
  using io_detail::opt;
  const std::string ctx = source + ": ";
  io_detail::check_keys(j,
                        {"em", "train", "default_params", "params", "prior", "prediction_mode", "threshold", "radius",
                         "geo_reference"},
                        ctx);
  RunConfig c;
  if (j.contains("em")) c.em = em_config_from_json(j["em"], ctx + "em: ");
  if (j.contains("train")) c.train = train_config_from_json(j["train"], ctx + "train: ");
  if (j.contains("default_params")) c.default_params = params_from_json(j["default_params"], ctx + "default_params: ");
  if (j.contains("params")) c.params = class_params_from_json(j["params"], ctx + "params: ");
  if (j.contains("prior")) {
    const auto& p = j["prior"];
    const std::string pc = ctx + "prior: ";
    io_detail::check_keys(p, {"kind", "region_area", "intersection_radius", "affinity", "default_affinity"}, pc);
    opt(p, "kind", c.prior.kind, pc);
    if (c.prior.kind != "uniform" && c.prior.kind != "spike-slab") {
      throw ParseError(pc + "kind must be \"uniform\" or \"spike-slab\"");
    }
    if (p.contains("region_area") && !p["region_area"].is_null()) {
      c.prior.region_area = io_detail::req<double>(p, "region_area", pc);
    }
    opt(p, "intersection_radius", c.prior.intersection_radius, pc);
    opt(p, "default_affinity", c.prior.default_affinity, pc);
    if (p.contains("affinity")) {
      for (const auto& [key, w] : p["affinity"].items()) {
        if (!w.is_number()) throw ParseError(pc + "affinity values must be numbers");
        c.prior.affinity[io_detail::class_key(key, pc)] = w.get<double>();
      }
    }
  }
  if (j.contains("prediction_mode")) {
    const auto& p = j["prediction_mode"];
    const std::string pc = ctx + "prediction_mode: ";
    io_detail::check_keys(p, {"eccentricity_max", "variance_max", "existence_min"}, pc);
    opt(p, "eccentricity_max", c.prediction.eccentricity_max, pc);
    opt(p, "variance_max", c.prediction.variance_max, pc);
    opt(p, "existence_min", c.prediction.existence_min, pc);
  }
  opt(j, "threshold", c.threshold, ctx);
  opt(j, "radius", c.radius, ctx);
  if (j.contains("geo_reference") && !j["geo_reference"].is_null()) {
    const auto& g = j["geo_reference"];
    io_detail::check_keys(g, {"lat", "lon"}, ctx + "geo_reference: ");
    c.geo_reference = GeoReference{io_detail::req<double>(g, "lat", ctx), io_detail::req<double>(g, "lon", ctx)};
  }
  return c;
}

inline RunConfig read_run_config(std::istream& in, const std::string& source = "config") {
  return run_config_from_json(io_detail::parse_document(in, source), source);
}

// ---- synthetic scene configuration -----------------------------------------------

inline SynthConfig synth_config_from_json(const json& j, const std::string& source = "synth config") {
  using io_detail::opt;
  const std::string ctx = source + ": ";
  io_detail::check_keys(j,
                        {"n_objects", "object_density", "region", "n_frames", "placement", "omnidirectional",
                         "class_params", "clutter_rate", "seed", "road_network", "intersection_radius", "affinity",
                         "street_spacing", "detect_prob", "confidence_min", "confidence_max"},
                        ctx);
  SynthConfig c;
  opt(j, "n_objects", c.n_objects, ctx);
  if (j.contains("object_density")) c.object_density = io_detail::req<double>(j, "object_density", ctx);
  if (j.contains("region")) {
    const auto& r = j["region"];
    if (!r.is_array() || r.size() != 2) throw ParseError(ctx + "region must be [[xmin, ymin], [xmax, ymax]]");
    c.region = {io_detail::decode_point(r[0], ctx + "region: "), io_detail::decode_point(r[1], ctx + "region: ")};
  }
  opt(j, "n_frames", c.n_frames, ctx);
  std::string placement = "random";
  opt(j, "placement", placement, ctx);
  if (placement == "grid") {
    c.placement = FramePlacement::kGrid;
  } else if (placement == "random") {
    c.placement = FramePlacement::kRandom;
  } else if (placement == "streets") {
    c.placement = FramePlacement::kStreets;
  } else {
    throw ParseError(ctx + "placement must be grid, random or streets");
  }
  opt(j, "omnidirectional", c.omnidirectional, ctx);
  if (j.contains("class_params")) c.class_params = class_params_from_json(j["class_params"], ctx + "class_params: ");
  opt(j, "clutter_rate", c.clutter_rate, ctx);
  opt(j, "seed", c.seed, ctx);
  opt(j, "street_spacing", c.street_spacing, ctx);
  if (j.contains("detect_prob")) c.detect_prob_override = io_detail::req<double>(j, "detect_prob", ctx);
  opt(j, "confidence_min", c.confidence_min, ctx);
  opt(j, "confidence_max", c.confidence_max, ctx);
  if (j.contains("road_network")) {
    std::vector<Vec2> pts;
    for (const auto& p : j["road_network"]) pts.push_back(io_detail::decode_point(p, ctx + "road_network: "));
    double radius = 15.0;
    opt(j, "intersection_radius", radius, ctx);
    std::map<int, double> affinity;
    if (j.contains("affinity")) {
      for (const auto& [key, w] : j["affinity"].items()) {
        if (!w.is_number()) throw ParseError(ctx + "affinity values must be numbers");
        affinity[io_detail::class_key(key, ctx)] = w.get<double>();
      }
    }
    c.placement_prior = PriorDensity::spike_slab(c.region.area(), std::move(pts), radius, std::move(affinity));
  }
  return c;
}

inline json to_json(const SynthConfig& c) {
  static const char* kPlacement[] = {"grid", "random", "streets"};
  json out{{"n_objects", c.n_objects},
           {"region", {{c.region.min[0], c.region.min[1]}, {c.region.max[0], c.region.max[1]}}},
           {"n_frames", c.n_frames},
           {"placement", kPlacement[static_cast<int>(c.placement)]},
           {"omnidirectional", c.omnidirectional},
           {"class_params", to_json(c.class_params)},
           {"clutter_rate", c.clutter_rate},
           {"seed", c.seed},
           {"street_spacing", c.street_spacing},
           {"confidence_min", c.confidence_min},
           {"confidence_max", c.confidence_max}};
  if (c.object_density) out["object_density"] = *c.object_density;
  if (c.detect_prob_override) out["detect_prob"] = *c.detect_prob_override;
  if (c.placement_prior) {
    json pts = json::array();
    for (const auto& p : c.placement_prior->intersections) pts.push_back({p[0], p[1]});
    json affinity = json::object();
    for (const auto& [cls, w] : c.placement_prior->affinity) affinity[std::to_string(cls)] = w;
    out["road_network"] = pts;
    out["intersection_radius"] = c.placement_prior->intersection_radius;
    out["affinity"] = affinity;
  }
  return out;
}

inline void write_provenance(std::ostream& os, std::span<const int> provenance) {
  for (std::size_t j = 0; j < provenance.size(); ++j) {
    json source = provenance[j] == kClutterSource ? json("clutter") : json(provenance[j]);
    os << json{{"ray", j}, {"source", source}}.dump() << '\n';
  }
}

// ---- GeoJSON and trace -----------------------------------------------------------

inline json geojson_overlay(std::span<const ClassHypothesis> hyps, std::span<const TruthObject> truth) {
  json features = json::array();
  auto point = [](const Vec2& p) { return json{{"type", "Point"}, {"coordinates", {p[0], p[1]}}}; };
  for (const auto& [cls, h] : hyps) {
    features.push_back({{"type", "Feature"},
                        {"geometry", point(h.position)},
                        {"properties", {{"kind", "prediction"}, {"class", cls}, {"existence", h.existence}}}});
  }
  for (const auto& t : truth) {
    features.push_back({{"type", "Feature"},
                        {"geometry", point(t.position)},
                        {"properties", {{"kind", "truth"}, {"class", t.class_id}}}});
  }
  return {{"type", "FeatureCollection"},
          {"crs_note", "local planar coordinates in meters (east, north); not geodetic"},
          {"features", features}};
}

inline void write_trace_csv(std::ostream& os, std::span<const TraceEntry> trace) {
  const auto old = os.precision(17);
  os << "step,class,batch,epoch,learning_rate,elbo,skipped,note\n";
  for (const auto& e : trace) {
    os << e.step << ',' << e.class_id << ',' << e.batch << ',' << e.epoch << ',' << e.learning_rate << ',' << e.elbo
       << ',' << (e.skipped ? 1 : 0) << ',' << e.note << '\n';
  }
  os.precision(old);
}

// ---- atomic output ---------------------------------------------------------------

/// Writes to a sibling temporary and renames it over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(tmp.string() + ": cannot write");
    out << contents;
    if (!out) throw std::runtime_error(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace raymap
