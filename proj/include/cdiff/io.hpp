#pragma once

/**
 * @file io.hpp
 * @brief JSON / JSONL / CSV serialisation for checkpoints, datasets,
 * constraint files, arenas and run configurations.
 *
 * Doubles are written with shortest round-trip formatting, so every numeric
 * field survives a save/load cycle bit for bit.
 */

#include "cdiff/planner.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace cdiff {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

// Config access with key-naming errors --------------------------------------------

/// Reads `key` from `j`; errors name the dotted path of the key.
template <typename T>
T get_key(const json& j, const std::string& key, const std::string& path) {
  const std::string full = path.empty() ? key : path + "." + key;
  if (!j.is_object() || !j.contains(key)) throw RejectedInput("missing config key '" + full + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw RejectedInput("config key '" + full + "' has the wrong type");
  }
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback, const std::string& path) {
  if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
  return get_key<T>(j, key, path);
}

inline Vec to_vec(const json& j, const std::string& what) {
  if (!j.is_array()) throw RejectedInput("'" + what + "' must be a numeric array");
  Vec v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw RejectedInput("'" + what + "' must be a numeric array");
    v[Index(i)] = j[i].get<double>();
  }
  return v;
}

inline Vec vec_key(const json& j, const std::string& key, const std::string& path) {
  const std::string full = path.empty() ? key : path + "." + key;
  if (!j.is_object() || !j.contains(key)) throw RejectedInput("missing config key '" + full + "'");
  return to_vec(j.at(key), full);
}

inline json from_vec(const Vec& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RejectedInput("cannot open file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw RejectedInput("invalid JSON in '" + path + "': " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
}

inline void write_json_file(const std::string& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

// Networks and schedules -------------------------------------------------------------

inline json mlp_to_json(const Mlp& net) {
  return {{"layer_dims", net.layer_dims()}, {"activation", std::string(to_string(net.activation()))},
          {"parameters", from_vec(net.parameters())}};
}

inline Mlp mlp_from_json(const json& j, const std::string& path = "net") {
  Mlp net(get_key<std::vector<int>>(j, "layer_dims", path),
          activation_from_string(get_key<std::string>(j, "activation", path)));
  const Vec p = vec_key(j, "parameters", path);
  require_dim(net.num_parameters(), p.size(), "checkpoint parameter count");
  net.parameters() = p;
  return net;
}

inline json schedule_to_json(const NoiseSchedule& s) { return {{"betas", from_vec(s.betas())}}; }

inline NoiseSchedule schedule_from_json(const json& j, const std::string& path = "schedule") {
  if (j.contains("betas")) return NoiseSchedule(vec_key(j, "betas", path));
  const ScheduleParams d;
  return build_schedule(get_or(j, "T", d.T, path), get_or(j, "beta_min", d.beta_min, path),
                        get_or(j, "beta_max", d.beta_max, path));
}

inline json affine_to_json(const AffineMap& m) { return {{"offset", from_vec(m.offset)}, {"scale", from_vec(m.scale)}}; }

inline AffineMap affine_from_json(const json& j, const std::string& path) {
  AffineMap m{vec_key(j, "offset", path), vec_key(j, "scale", path)};
  require_dim(m.offset.size(), m.scale.size(), "affine map scale");
  require((m.scale.array() != 0.0).all(), "affine map scale must be non-zero");
  return m;
}

inline void check_version(const json& j, const std::string& what) {
  const int v = get_key<int>(j, "format_version", what);
  if (v != kFormatVersion)
    throw RejectedInput(what + " has format_version " + std::to_string(v) + ", expected " +
                        std::to_string(kFormatVersion));
}

inline json checkpoint_to_json(const LearnedNoise& m) {
  return {{"format_version", kFormatVersion}, {"kind", "noise_predictor"}, {"net", mlp_to_json(m.net)},
          {"schedule", schedule_to_json(m.schedule)}, {"coords", affine_to_json(m.coords)}};
}

inline LearnedNoise checkpoint_from_json(const json& j) {
  check_version(j, "checkpoint");
  if (get_key<std::string>(j, "kind", "") != "noise_predictor")
    throw RejectedInput("checkpoint kind must be 'noise_predictor'");
  LearnedNoise m{mlp_from_json(j.at("net")), schedule_from_json(j.at("schedule")),
                 affine_from_json(j.at("coords"), "coords")};
  require(m.net.input_dim() == m.net.output_dim() + 1, "noise predictor must map [x, t] to x-sized output");
  require_dim(m.net.output_dim(), m.coords.dim(), "checkpoint coords");
  return m;
}

inline void save_checkpoint(const std::string& path, const LearnedNoise& m) { write_json_file(path, checkpoint_to_json(m)); }
inline LearnedNoise load_checkpoint(const std::string& path) { return checkpoint_from_json(read_json_file(path)); }

inline json idm_to_json(const LearnedIdm& m) {
  return {{"format_version", kFormatVersion}, {"kind", "inverse_dynamics"}, {"net", mlp_to_json(m.net)},
          {"input", affine_to_json(m.input)}, {"output", affine_to_json(m.output)}};
}

inline LearnedIdm idm_from_json(const json& j) {
  check_version(j, "IDM checkpoint");
  if (get_key<std::string>(j, "kind", "") != "inverse_dynamics")
    throw RejectedInput("IDM checkpoint kind must be 'inverse_dynamics'");
  LearnedIdm m{mlp_from_json(j.at("net")), affine_from_json(j.at("input"), "input"),
               affine_from_json(j.at("output"), "output")};
  require(m.net.input_dim() == 2 * kStateDim && m.net.output_dim() == 2, "IDM net must map 8 inputs to 2 outputs");
  return m;
}

// Datasets (JSONL: header line, then one trajectory per line) ----------------------------

inline void write_dataset(std::ostream& os, const ExpertDataset& ds) {
  json header{{"format_version", kFormatVersion},
              {"n_trajectories", ds.size()},
              {"state_dim", ds.state_dim()},
              {"horizon", ds.horizon()},
              {"mean", from_vec(ds.mean)},
              {"scale", from_vec(ds.scale)}};
  os << header.dump() << '\n';
  for (const auto& tr : ds.trajectories) {
    json states = json::array();
    for (Index r = 0; r < tr.rows(); ++r) states.push_back(from_vec(tr.row(r).transpose()));
    os << json{{"states", states}}.dump() << '\n';
  }
}

inline ExpertDataset read_dataset(std::istream& in, const std::string& name = "dataset") {
  std::string line;
  if (!std::getline(in, line)) throw RejectedInput(name + " is empty");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::parse_error&) {
    throw RejectedInput(name + ": header line is not valid JSON");
  }
  check_version(header, name);
  const Index sd = get_key<Index>(header, "state_dim", "header");
  const Index H = get_key<Index>(header, "horizon", "header");
  ExpertDataset ds;
  ds.mean = vec_key(header, "mean", "header");
  ds.scale = vec_key(header, "scale", "header");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error&) {
      throw RejectedInput(name + ": line " + std::to_string(lineno) + " is not valid JSON");
    }
    const auto& states = rec.at("states");
    require(Index(states.size()) == H + 1, name + ": line " + std::to_string(lineno) + " has the wrong horizon");
    RowMat tr(H + 1, sd);
    for (Index r = 0; r <= H; ++r) {
      const Vec s = to_vec(states[std::size_t(r)], "states");
      require_dim(sd, s.size(), "dataset state");
      tr.row(r) = s.transpose();
    }
    ds.trajectories.push_back(std::move(tr));
  }
  require(ds.size() == get_key<Index>(header, "n_trajectories", "header"), name + ": trajectory count mismatch");
  require(ds.mean.size() == sd && ds.scale.size() == sd, name + ": stats dimension mismatch");
  return ds;
}

inline void save_dataset(const std::string& path, const ExpertDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  write_dataset(out, ds);
}

inline ExpertDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RejectedInput("cannot open dataset '" + path + "'");
  return read_dataset(in, path);
}

// Constraint files ---------------------------------------------------------------------------

inline Barrier barrier_from_json(const json& j, const std::string& path) {
  const std::string type = get_key<std::string>(j, "type", path);
  const Index sd = get_or<Index>(j, "state_dim", kStateDim, path);
  const Index offset = get_or<Index>(j, "offset", 0, path);
  if (type == "point_distance")
    return point_distance_barrier(vec_key(j, "center", path), get_key<double>(j, "radius", path), sd, offset);
  if (type == "point_distance_squared")
    return point_distance_squared_barrier(vec_key(j, "center", path), get_key<double>(j, "radius", path), sd, offset);
  if (type == "axis_bound")
    return axis_bound_barrier(get_key<Index>(j, "dim", path), get_key<double>(j, "bound", path),
                              get_key<bool>(j, "upper", path), sd);
  if (type == "moving_obstacle") {
    std::vector<Vec> centers;
    for (const auto& c : get_key<json>(j, "centers", path)) centers.push_back(to_vec(c, path + ".centers"));
    return moving_obstacle_barrier(std::move(centers), get_key<double>(j, "radius", path), sd,
                                   get_or(j, "first_step", 0, path), offset);
  }
  throw RejectedInput("config key '" + path + ".type': unknown barrier '" + type +
                      "' (valid: point_distance, point_distance_squared, axis_bound, moving_obstacle)");
}

inline Constraint constraint_from_json(const json& j, const std::string& path) {
  const std::string type = get_key<std::string>(j, "type", path);
  const Smoothing s = smoothing_from_string(get_or<std::string>(j, "smoothing", "raw", path));
  if (type == "halfspace") return halfspace(vec_key(j, "a", path), get_key<double>(j, "b", path), s);
  if (type == "ball_interior") return ball_interior(vec_key(j, "center", path), get_key<double>(j, "radius", path), s);
  if (type == "ball_exterior") return ball_exterior(vec_key(j, "center", path), get_key<double>(j, "radius", path), s);
  if (type == "axis_bound")
    return axis_bound(get_key<Index>(j, "dim", path), get_key<double>(j, "bound", path), get_key<bool>(j, "upper", path), s);
  throw RejectedInput("config key '" + path + ".type': unknown constraint '" + type +
                      "' (valid: halfspace, ball_interior, ball_exterior, axis_bound, dcbf)");
}

inline json constraint_to_json(const Constraint& c) {
  json j = std::visit(
      [](const auto& s) -> json {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Halfspace>) return {{"type", "halfspace"}, {"a", from_vec(s.a)}, {"b", s.b}};
        else if constexpr (std::is_same_v<T, BallInterior>)
          return {{"type", "ball_interior"}, {"center", from_vec(s.center)}, {"radius", s.radius}};
        else if constexpr (std::is_same_v<T, BallExterior>)
          return {{"type", "ball_exterior"}, {"center", from_vec(s.center)}, {"radius", s.radius}};
        else if constexpr (std::is_same_v<T, AxisBound>)
          return {{"type", "axis_bound"}, {"dim", s.dim}, {"bound", s.bound}, {"upper", s.upper}};
        else throw RejectedInput("custom constraints cannot be serialised");
      },
      c.shape);
  j["smoothing"] = std::string(to_string(c.smoothing));
  return j;
}

/// Entries: a constraint object, optionally with "window": {offset, length} or
/// "per_state": {state_dim, n_states, slice_offset, slice}; or a DCBF entry
/// {"type": "dcbf", "barrier": {...}, "alpha", "horizon"}.
inline ConstraintSet constraint_set_from_json(const json& j, const std::string& path = "constraints") {
  const json& list = j.is_object() ? get_key<json>(j, "constraints", "") : j;
  if (!list.is_array()) throw RejectedInput("config key '" + path + "' must be an array");
  ConstraintSet set;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const json& e = list[i];
    const std::string p = path + "[" + std::to_string(i) + "]";
    if (get_key<std::string>(e, "type", p) == "dcbf") {
      const Smoothing s = smoothing_from_string(get_or<std::string>(e, "smoothing", "raw", p));
      DcbfSpec spec{barrier_from_json(get_key<json>(e, "barrier", p), p + ".barrier"), get_key<double>(e, "alpha", p)};
      set.append(build_dcbf_constraints(spec, get_key<Index>(e, "horizon", p), s));
      continue;
    }
    Constraint c = constraint_from_json(e, p);
    if (e.contains("window")) {
      const json& w = e.at("window");
      set.add_window(std::move(c), get_key<Index>(w, "offset", p + ".window"), get_key<Index>(w, "length", p + ".window"));
    } else if (e.contains("per_state")) {
      const json& w = e.at("per_state");
      const std::string wp = p + ".per_state";
      set.add_per_state(c, get_key<Index>(w, "state_dim", wp), get_key<Index>(w, "n_states", wp),
                        get_or<Index>(w, "slice_offset", 0, wp), get_or<Index>(w, "slice", -1, wp));
    } else {
      set.add(std::move(c));
    }
  }
  return set;
}

// Arenas ---------------------------------------------------------------------------------------

inline json arena_to_json(const Arena& a) {
  json obs = json::array();
  for (const auto& o : a.obstacles) {
    json e = constraint_to_json(o.constraint);
    if (o.moving()) {
      json m = json::array();
      for (const auto& v : o.motion) m.push_back(from_vec(v));
      e["motion"] = m;
    }
    obs.push_back(e);
  }
  return {{"format_version", kFormatVersion},
          {"name", a.name},
          {"bounds", {{"lower", from_vec(a.lower)}, {"upper", from_vec(a.upper)}}},
          {"goal", from_vec(a.goal)},
          {"start_region", {{"lower", from_vec(a.start_lower)}, {"upper", from_vec(a.start_upper)}}},
          {"obstacles", obs}};
}

/// Motion is either an explicit "motion" table or "velocity" + "steps".
inline Arena arena_from_json(const json& j, const std::string& path = "arena") {
  Arena a;
  a.name = get_or<std::string>(j, "name", "arena", path);
  const json& b = get_key<json>(j, "bounds", path);
  a.lower = vec_key(b, "lower", path + ".bounds");
  a.upper = vec_key(b, "upper", path + ".bounds");
  a.goal = vec_key(j, "goal", path);
  const json& sr = get_key<json>(j, "start_region", path);
  a.start_lower = vec_key(sr, "lower", path + ".start_region");
  a.start_upper = vec_key(sr, "upper", path + ".start_region");
  const json obs = get_or<json>(j, "obstacles", json::array(), path);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const std::string p = path + ".obstacles[" + std::to_string(i) + "]";
    Obstacle o{constraint_from_json(obs[i], p), {}};
    if (obs[i].contains("motion")) {
      for (const auto& m : obs[i].at("motion")) o.motion.push_back(to_vec(m, p + ".motion"));
    } else if (obs[i].contains("velocity")) {
      o.motion = linear_motion(vec_key(obs[i], "velocity", p), get_key<int>(obs[i], "steps", p));
    }
    a.obstacles.push_back(std::move(o));
  }
  validate_arena(a);
  return a;
}

/// A preset name or a path to an arena file.
inline Arena resolve_arena(const std::string& spec) {
  if (spec == "maze" || spec == "maze_training" || spec == "ball_run") return arena_preset(spec);
  if (!std::filesystem::exists(spec))
    throw RejectedInput("arena '" + spec + "' is neither a preset (maze, maze_training, ball_run) nor a file");
  return arena_from_json(read_json_file(spec));
}

// Sampler and episode configuration --------------------------------------------------------------

inline SamplerConfig sampler_config_from_json(const json& j, SamplerConfig c, const std::string& path = "sampler") {
  if (j.is_null()) return c;
  if (j.contains("method")) c.method = method_from_string(get_key<std::string>(j, "method", path));
  if (j.contains("expectation")) {
    const auto e = get_key<std::string>(j, "expectation", path);
    if (e == "batch_mean") c.expectation = Expectation::batch_mean;
    else if (e == "per_particle") c.expectation = Expectation::per_particle;
    else throw RejectedInput("config key '" + path + ".expectation' must be batch_mean or per_particle");
  }
  c.dual_step_factor = get_or(j, "dual_step_factor", c.dual_step_factor, path);
  if (j.contains("dual_step")) c.dual_step = get_key<double>(j, "dual_step", path);
  c.rho0 = get_or(j, "rho0", c.rho0, path);
  c.penalty_growth = get_or(j, "penalty_growth", c.penalty_growth, path);
  c.rho_cap = get_or(j, "rho_cap", c.rho_cap, path);
  c.suppress_final_noise = get_or(j, "suppress_final_noise", c.suppress_final_noise, path);
  c.projection_best_effort = get_or(j, "projection_best_effort", c.projection_best_effort, path);
  c.projection.max_sweeps = get_or(j, "projection_max_sweeps", c.projection.max_sweeps, path);
  c.projection.tolerance = get_or(j, "projection_tolerance", c.projection.tolerance, path);
  c.validate();
  return c;
}

inline json sampler_config_to_json(const SamplerConfig& c) {
  json j{{"method", std::string(to_string(c.method))},
         {"expectation", c.expectation == Expectation::batch_mean ? "batch_mean" : "per_particle"},
         {"dual_step_factor", c.dual_step_factor},
         {"rho0", c.rho0},
         {"penalty_growth", c.penalty_growth},
         {"rho_cap", c.rho_cap},
         {"suppress_final_noise", c.suppress_final_noise},
         {"projection_best_effort", c.projection_best_effort}};
  if (c.dual_step) j["dual_step"] = *c.dual_step;
  return j;
}

inline InverseDynamicsModel idm_from_spec(const std::string& spec, double dt) {
  if (spec == "analytic_position") return AnalyticDoubleIntegrator{dt, IdmChannel::position};
  if (spec == "analytic_velocity") return AnalyticDoubleIntegrator{dt, IdmChannel::velocity};
  if (!std::filesystem::exists(spec))
    throw RejectedInput("idm '" + spec + "' is neither analytic_position, analytic_velocity nor a file");
  return idm_from_json(read_json_file(spec));
}

inline EpisodeConfig episode_config_from_json(const json& j, const std::string& path = "episode") {
  EpisodeConfig c;
  if (j.is_null()) return c;
  c.sampler = sampler_config_from_json(get_or<json>(j, "sampler", json(), path), c.sampler, path + ".sampler");
  c.smoothing = smoothing_from_string(get_or<std::string>(j, "smoothing", "hinge", path));
  c.dcbf_alpha = get_or(j, "dcbf_alpha", c.dcbf_alpha, path);
  c.use_dcbf = get_or(j, "use_dcbf", c.use_dcbf, path);
  c.episode_length = get_or(j, "episode_length", c.episode_length, path);
  c.replan_every = get_or(j, "replan_every", c.replan_every, path);
  c.reset_duals = get_or(j, "reset_duals", c.reset_duals, path);
  c.pin_start = get_or(j, "pin_start", c.pin_start, path);
  c.pin_goal = get_or(j, "pin_goal", c.pin_goal, path);
  c.dt = get_or(j, "dt", c.dt, path);
  c.compute_distance = get_or(j, "compute_distance", c.compute_distance, path);
  c.idm = idm_from_spec(get_or<std::string>(j, "idm", "analytic_position", path), c.dt);
  c.validate();
  return c;
}

// Traces ------------------------------------------------------------------------------------------

inline json step_record_to_json(const StepRecord& r) {
  return {{"step", r.step},
          {"state", from_vec(r.state)},
          {"action", from_vec(r.action)},
          {"plan_id", r.plan_id},
          {"planning_violation", r.planning_violation},
          {"violation", r.violation},
          {"violated", r.violated},
          {"min_barrier", r.min_barrier},
          {"dcbf_residual", r.dcbf_residual},
          {"plan_seconds", r.plan_seconds},
          {"contact", r.contact},
          {"idm_consistent", r.idm_consistent}};
}

inline json metrics_to_json(const EpisodeMetrics& m) {
  json j;
  const auto vals = metric_values(m);
  for (std::size_t k = 0; k < vals.size(); ++k) j[metric_names()[k]] = vals[k];
  j["n_plans"] = m.n_plans;
  j["projection_failures"] = m.projection_failures;
  j["aborted"] = m.aborted;
  return j;
}

/// Header record (start, metrics), then one record per env step; plans are
/// listed as the positions of every planned trajectory.
inline void write_trace(std::ostream& os, const EpisodeResult& r, const std::string& arena, Method method,
                        std::uint64_t seed) {
  json head{{"arena", arena},
            {"method", std::string(to_string(method))},
            {"seed", seed},
            {"start", from_vec(r.start.packed())},
            {"metrics", metrics_to_json(r.metrics)}};
  if (!r.error.empty()) head["error"] = r.error;
  os << head.dump() << '\n';
  for (std::size_t k = 0; k < r.trace.size(); ++k) {
    json rec = step_record_to_json(r.trace[k]);
    const RowMat& p = r.plans[std::size_t(r.trace[k].plan_id)];
    if (k == 0 || r.trace[k].plan_id != r.trace[k - 1].plan_id) {
      json pts = json::array();
      for (Index i = 0; i < p.rows(); ++i) pts.push_back({p(i, 0), p(i, 1)});
      rec["plan"] = pts;
    }
    os << rec.dump() << '\n';
  }
}

inline std::vector<StepRecord> read_trace_steps(std::istream& in) {
  std::vector<StepRecord> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    StepRecord r;
    r.step = j.at("step").get<int>();
    r.state = to_vec(j.at("state"), "state");
    r.action = to_vec(j.at("action"), "action");
    r.plan_id = j.at("plan_id").get<int>();
    r.planning_violation = j.at("planning_violation").get<double>();
    r.violation = j.at("violation").get<double>();
    r.violated = j.at("violated").get<bool>();
    r.min_barrier = j.at("min_barrier").get<double>();
    r.dcbf_residual = j.at("dcbf_residual").get<double>();
    r.plan_seconds = j.at("plan_seconds").get<double>();
    r.contact = j.at("contact").get<bool>();
    r.idm_consistent = j.at("idm_consistent").get<bool>();
    out.push_back(std::move(r));
  }
  return out;
}

// Matrices -------------------------------------------------------------------------------------------

/// Whitespace-separated text matrix, one row per line, round-trip precision.
inline void write_matrix(std::ostream& os, const Mat& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) os << (c ? " " : "") << format_number(m(r, c));
    os << '\n';
  }
}

inline Mat read_matrix(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::vector<double> row;
    double v;
    while (ss >> v) row.push_back(v);
    if (!row.empty()) rows.push_back(std::move(row));
  }
  Mat m(Index(rows.size()), rows.empty() ? 0 : Index(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require_dim(m.cols(), Index(rows[r].size()), "matrix row length");
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(Index(r), Index(c)) = rows[r][c];
  }
  return m;
}

}  // namespace cdiff
