// Command-line front end: data generation, training, sampling, planning and
// benchmark tables. Exit codes: 0 success, 1 runtime failure, 2 bad config.

#include "cdiff/io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace cdiff;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  std::optional<std::string> out;
  std::optional<int> jobs;
  std::optional<int> seeds;
  std::optional<bool> reset_duals;
};

json load_config(const Flags& f) {
  if (f.config.empty()) return json::object();
  if (!fs::exists(f.config)) throw RejectedInput("config file '" + f.config + "' does not exist");
  json j = read_json_file(f.config);
  if (!j.is_object()) throw RejectedInput("config file '" + f.config + "' must hold a JSON object");
  return j;
}

/// Flags win over config values.
void apply_common(json& cfg, const Flags& f) {
  if (f.seed) cfg["seed"] = *f.seed;
  if (f.out) cfg["out"] = *f.out;
}

std::string require_file(const json& cfg, const std::string& key) {
  const std::string path = get_key<std::string>(cfg, key, "");
  if (!fs::exists(path)) throw RejectedInput("config key '" + key + "': file '" + path + "' does not exist");
  return path;
}

fs::path out_dir(const json& cfg) {
  fs::path p = get_or<std::string>(cfg, "out", "out", "");
  fs::create_directories(p);
  return p;
}

std::uint64_t seed_of(const json& cfg) { return get_or<std::uint64_t>(cfg, "seed", 0, ""); }

RegressionConfig regression_from(const json& j, RegressionConfig r, const std::string& path) {
  r.epochs = get_or(j, "epochs", r.epochs, path);
  r.batch_size = get_or(j, "batch_size", r.batch_size, path);
  r.learning_rate = get_or(j, "learning_rate", r.learning_rate, path);
  r.final_lr_fraction = get_or(j, "final_lr_fraction", r.final_lr_fraction, path);
  require(r.epochs >= 0, "config key '" + path + ".epochs' must be non-negative");
  require(r.batch_size > 0, "config key '" + path + ".batch_size' must be positive");
  return r;
}

int cmd_generate_data(json cfg) {
  const Arena arena = resolve_arena(get_or<std::string>(cfg, "arena", "maze_training", ""));
  ExpertConfig ec;
  ec.n_trajectories = get_or(cfg, "n_trajectories", ec.n_trajectories, "");
  ec.horizon = get_or(cfg, "horizon", ec.horizon, "");
  ec.kp = get_or(cfg, "kp", ec.kp, "");
  ec.kd = get_or(cfg, "kd", ec.kd, "");
  ec.dt = get_or(cfg, "dt", ec.dt, "");
  ec.max_start_speed = get_or(cfg, "max_start_speed", ec.max_start_speed, "");
  ec.goal_tolerance = get_or(cfg, "goal_tolerance", ec.goal_tolerance, "");
  ec.max_retries = get_or(cfg, "max_retries", ec.max_retries, "");
  for (const auto& w : get_or<json>(cfg, "waypoints", json::array(), "")) ec.waypoints.push_back(to_vec(w, "waypoints"));
  ec.seed = seed_of(cfg);
  const fs::path out = out_dir(cfg);
  const ExpertDataset ds = generate_expert_data(arena, ec);
  save_dataset((out / "dataset.jsonl").string(), ds);
  std::cout << "wrote " << ds.size() << " trajectories of horizon " << ds.horizon() << " to "
            << (out / "dataset.jsonl").string() << '\n';
  return 0;
}

int cmd_train_score(json cfg) {
  const std::string dataset_path = require_file(cfg, "dataset");
  const NoiseSchedule schedule = schedule_from_json(get_or<json>(cfg, "schedule", json::object(), ""));
  ScoreTrainingConfig tc;
  const json t = get_or<json>(cfg, "training", json::object(), "");
  tc.hidden = get_or(t, "hidden", tc.hidden, "training");
  tc.activation = activation_from_string(get_or<std::string>(t, "activation", "tanh", "training"));
  const RegressionConfig r = regression_from(t, {tc.epochs, tc.batch_size, tc.learning_rate, tc.final_lr_fraction}, "training");
  tc.epochs = r.epochs;
  tc.batch_size = r.batch_size;
  tc.learning_rate = r.learning_rate;
  tc.final_lr_fraction = r.final_lr_fraction;
  tc.validation_fraction = get_or(t, "validation_fraction", tc.validation_fraction, "training");
  tc.seed = seed_of(cfg);
  const fs::path out = out_dir(cfg);

  const ExpertDataset ds = load_dataset(dataset_path);
  const TrainedScore trained = train_score(ds, schedule, tc);
  save_checkpoint((out / "score.json").string(), trained.model);
  std::ostringstream csv;
  csv << "epoch,train_loss,validation_loss\n";
  for (std::size_t e = 0; e < trained.train_loss.size(); ++e)
    csv << e << ',' << format_number(trained.train_loss[e]) << ',' << format_number(trained.validation_loss[e]) << '\n';
  write_text_file((out / "train_loss.csv").string(), csv.str());
  std::cout << "trained " << tc.epochs << " epochs";
  if (!trained.train_loss.empty()) std::cout << ", final train loss " << trained.train_loss.back();
  std::cout << "\nwrote " << (out / "score.json").string() << '\n';
  return 0;
}

int cmd_train_idm(json cfg) {
  const Arena arena = resolve_arena(get_or<std::string>(cfg, "arena", "maze", ""));
  IdmTrainingConfig ic;
  ic.n_transitions = get_or(cfg, "n_transitions", ic.n_transitions, "");
  ic.hidden = get_or(cfg, "hidden", ic.hidden, "");
  ic.activation = activation_from_string(get_or<std::string>(cfg, "activation", "tanh", ""));
  ic.regression = regression_from(get_or<json>(cfg, "training", json::object(), ""), ic.regression, "training");
  ic.max_speed = get_or(cfg, "max_speed", ic.max_speed, "");
  ic.max_action = get_or(cfg, "max_action", ic.max_action, "");
  ic.dt = get_or(cfg, "dt", ic.dt, "");
  ic.seed = seed_of(cfg);
  const fs::path out = out_dir(cfg);
  const TrainedIdm trained = train_idm(arena, ic);
  write_json_file((out / "idm.json").string(), idm_to_json(trained.model));
  std::ostringstream csv;
  csv << "epoch,train_loss\n";
  for (std::size_t e = 0; e < trained.train_loss.size(); ++e) csv << e << ',' << format_number(trained.train_loss[e]) << '\n';
  write_text_file((out / "idm_loss.csv").string(), csv.str());
  std::cout << "held-out action MSE " << trained.validation_mse << "\nwrote " << (out / "idm.json").string() << '\n';
  return 0;
}

ScoreModel target_from(const json& cfg, NoiseSchedule& schedule) {
  if (cfg.contains("model")) {
    LearnedNoise m = load_checkpoint(require_file(cfg, "model"));
    schedule = m.schedule;
    return m;
  }
  schedule = schedule_from_json(get_or<json>(cfg, "schedule", json::object(), ""));
  const json t = get_or<json>(cfg, "target", json{{"type", "gaussian"}, {"mean", {0.0, 0.0}}, {"variance", {1.0, 1.0}}}, "");
  const std::string type = get_key<std::string>(t, "type", "target");
  if (type == "gaussian") return make_gaussian(vec_key(t, "mean", "target"), vec_key(t, "variance", "target"));
  if (type == "gmm") {
    std::vector<AnalyticGaussian> comps;
    for (const auto& c : get_key<json>(t, "components", "target"))
      comps.push_back(make_gaussian(vec_key(c, "mean", "target.components"), vec_key(c, "variance", "target.components")));
    return make_gmm(vec_key(t, "weights", "target"), std::move(comps));
  }
  throw RejectedInput("config key 'target.type': unknown target '" + type + "' (valid: gaussian, gmm)");
}

int cmd_sample(json cfg, const Flags& f) {
  if (f.method) cfg["method"] = *f.method;
  NoiseSchedule schedule;
  const ScoreModel model = target_from(cfg, schedule);
  ConstraintSet set;
  if (cfg.contains("constraints")) {
    const json& c = cfg.at("constraints");
    set = c.is_string() ? constraint_set_from_json(read_json_file(require_file(cfg, "constraints")))
                        : constraint_set_from_json(c);
  }
  set.check_dim(model_dim(model));
  json sj = get_or<json>(cfg, "sampler", json::object(), "");
  if (cfg.contains("method")) sj["method"] = cfg.at("method");
  const SamplerConfig sc = sampler_config_from_json(sj, SamplerConfig{}, "sampler");
  ChainOptions opt;
  opt.n_particles = get_or<Index>(cfg, "n_particles", 2000, "");
  require(opt.n_particles >= 1, "config key 'n_particles' must be at least 1");
  const fs::path out = out_dir(cfg);

  Rng rng = make_rng(seed_of(cfg));
  const ChainResult res = run_reverse_chain(sc, ChainProblem{model, schedule, set}, opt, rng);
  std::ostringstream samples, diag;
  write_matrix(samples, to_world(model, res.batch.particles));
  write_diagnostics_csv(diag, res.diagnostics);
  write_text_file((out / "samples.txt").string(), samples.str());
  write_text_file((out / "diagnostics.csv").string(), diag.str());
  const auto& last = res.diagnostics.back();
  std::cout << "method " << to_string(sc.method) << ": " << res.batch.size() << " samples, final mean hinge violation "
            << last.mean_hinge_violation << (res.rho_capped ? " (rho cap reached)" : "") << '\n';
  return 0;
}

int cmd_plan(json cfg, const Flags& f) {
  json ej = get_or<json>(cfg, "episode", json::object(), "");
  if (f.method) ej["sampler"]["method"] = *f.method;
  if (f.reset_duals) ej["reset_duals"] = *f.reset_duals;
  const LearnedNoise model = load_checkpoint(require_file(cfg, "model"));
  const std::string arena_name = get_or<std::string>(cfg, "arena", "maze", "");
  const Arena arena = resolve_arena(arena_name);
  const EpisodeConfig ec = episode_config_from_json(ej);
  const std::uint64_t seed = seed_of(cfg);
  const fs::path out = out_dir(cfg);

  const EpisodeResult r = run_episode(arena, ec, model, model.schedule, seed);
  std::ostringstream trace;
  write_trace(trace, r, arena.name, ec.sampler.method, seed);
  write_text_file((out / "trace.jsonl").string(), trace.str());
  write_json_file((out / "metrics.json").string(), metrics_to_json(r.metrics));
  std::cout << metrics_to_json(r.metrics).dump(2) << '\n';
  if (r.metrics.aborted) {
    std::cerr << "episode aborted: " << r.error << '\n';
    return 1;
  }
  return 0;
}

int cmd_benchmark(json cfg, const Flags& f) {
  SuiteSpec suite;
  json ej = get_or<json>(cfg, "episode", json::object(), "");
  if (f.reset_duals) ej["reset_duals"] = *f.reset_duals;
  suite.episode = episode_config_from_json(ej);
  if (f.method) cfg["methods"] = json::array({*f.method});
  if (f.seeds) cfg["seeds"] = *f.seeds;
  if (f.jobs) cfg["jobs"] = *f.jobs;
  if (cfg.contains("methods")) {
    suite.methods.clear();
    for (const auto& m : get_key<std::vector<std::string>>(cfg, "methods", "")) suite.methods.push_back(method_from_string(m));
  }
  suite.arenas = get_or(cfg, "arenas", suite.arenas, "");
  suite.seeds = get_or(cfg, "seeds", suite.seeds, "");
  suite.jobs = get_or(cfg, "jobs", suite.jobs, "");
  suite.base_seed = seed_of(cfg);
  require(suite.seeds >= 1, "config key 'seeds' must be at least 1");
  require(suite.jobs >= 1, "config key 'jobs' must be at least 1");
  std::vector<Arena> arenas;
  for (const auto& a : suite.arenas) arenas.push_back(resolve_arena(a));
  const LearnedNoise model = load_checkpoint(require_file(cfg, "model"));
  const fs::path out = out_dir(cfg);
  fs::create_directories(out / "traces");

  auto lookup = [&](const std::string& name) {
    for (std::size_t i = 0; i < suite.arenas.size(); ++i)
      if (suite.arenas[i] == name) return arenas[i];
    throw RejectedInput("unknown arena '" + name + "'");
  };
  const BenchmarkResult b = benchmark(suite, model, model.schedule, lookup);

  for (const auto& r : b.runs) {
    std::ostringstream trace;
    write_trace(trace, r.result, r.arena, r.method, r.seed);
    const std::string stem = fs::path(r.arena).stem().string();
    write_text_file((out / "traces" / (stem + "_" + std::string(to_string(r.method)) + "_seed" + std::to_string(r.seed) + ".jsonl")).string(),
                    trace.str());
  }
  std::ostringstream runs, summary, table;
  write_runs_csv(runs, b);
  write_summary_csv(summary, b);
  write_table(table, b);
  write_text_file((out / "runs.csv").string(), runs.str());
  write_text_file((out / "summary.csv").string(), summary.str());
  write_text_file((out / "table.txt").string(), table.str());
  std::cout << table.str();
  for (const auto& r : b.runs)
    if (r.result.metrics.aborted) {
      std::cerr << "episode " << r.arena << "/" << to_string(r.method) << "/" << r.seed << " aborted: " << r.result.error << '\n';
      return 1;
    }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constrained diffusion sampling and safe planning"};
  app.require_subcommand(1);
  Flags flags;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "JSON configuration file");
    sub->add_option("--seed", flags.seed, "64-bit seed");
    sub->add_option("--out", flags.out, "output directory");
  };
  auto* gen = app.add_subcommand("generate-data", "generate expert demonstrations");
  auto* ts = app.add_subcommand("train-score", "train the noise predictor on a dataset");
  auto* ti = app.add_subcommand("train-idm", "train a learned inverse dynamics model");
  auto* sm = app.add_subcommand("sample", "run a (constrained) reverse diffusion chain");
  auto* pl = app.add_subcommand("plan", "run one planning episode");
  auto* bm = app.add_subcommand("benchmark", "run a suite of episodes and tabulate metrics");
  for (auto* s : {gen, ts, ti, sm, pl, bm}) add_common(s);
  for (auto* s : {sm, pl, bm})
    s->add_option("--method", flags.method, std::string("sampler method: ") + method_names());
  for (auto* s : {pl, bm}) s->add_option("--reset-duals", flags.reset_duals, "reset duals before every plan");
  bm->add_option("--jobs", flags.jobs, "parallel episodes");
  bm->add_option("--seeds", flags.seeds, "number of seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    json cfg = load_config(flags);
    apply_common(cfg, flags);
    if (*gen) return cmd_generate_data(cfg);
    if (*ts) return cmd_train_score(cfg);
    if (*ti) return cmd_train_idm(cfg);
    if (*sm) return cmd_sample(cfg, flags);
    if (*pl) return cmd_plan(cfg, flags);
    if (*bm) return cmd_benchmark(cfg, flags);
  } catch (const RejectedInput& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
