// relnav: demonstration collection, training, evaluation, single-episode
// rollouts and the gradient check, all driven by one JSON config.
//
// Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.

#include <relnav/config.hpp>
#include <relnav/gradcheck.hpp>
#include <relnav/harness.hpp>
#include <relnav/trainer.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

using namespace relnav;
namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 1;
constexpr int kConfig = 2;
constexpr int kRuntime = 3;

// Flags shared by every subcommand. Unset optionals leave the config alone.
struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> humans;
  std::optional<std::size_t> threads;
  bool visible = false;
};

struct PolicyArgs {
  std::string policy = "orca";
  std::vector<std::string> weights;
  std::optional<std::size_t> depth, width;
};

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  return os;
}

Config resolve(const Overrides& o) {
  Config c = o.config_path.empty() ? parse_config("{}") : load_config(o.config_path);
  if (o.seed) {
    c.sim.seed = *o.seed;
    c.train.seed = *o.seed;
    c.eval.base_seed = *o.seed;
  }
  if (o.humans) c.sim.n_humans = *o.humans;
  if (o.threads) c.eval.threads = *o.threads;
  if (o.visible) c.sim.robot_visible = true;
  try {
    c.sim.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("sim: ") + e.what());
  }
  return c;
}

void add_policy_options(CLI::App* cmd, PolicyArgs& p) {
  cmd->add_option("--policy", p.policy, "orca, rgl or rgl-linear")
      ->check(CLI::IsMember({"orca", "rgl", "rgl-linear"}));
  cmd->add_option("--weights", p.weights, "model weights for rgl policies (eval: several files add mean/std rows)");
  cmd->add_option("--depth", p.depth, "planning depth d (overrides plan.depth)")->check(CLI::PositiveNumber);
  cmd->add_option("--width", p.width, "planning width w (overrides plan.width)")->check(CLI::PositiveNumber);
}

PlanConfig plan_for(const Config& c, const PolicyArgs& p) {
  PlanConfig plan = c.plan;
  if (p.depth) plan.depth = *p.depth;
  if (p.width) plan.width = *p.width;
  plan.gamma = c.eval.gamma;
  plan.validate();
  return plan;
}

Policy build_policy(const Config& c, const PolicyArgs& p, const std::string& weights) {
  if (p.policy == "orca") return make_orca_policy(c.sim);
  if (weights.empty()) throw std::runtime_error("--policy " + p.policy + " needs --weights");
  auto model = std::make_shared<RglModel>(RglModel::load_file(weights, c.model));
  const PlanConfig plan = plan_for(c, p);
  const bool linear = p.policy == "rgl-linear";
  std::string name = linear ? "RGL-linear" : "RGL";
  name += " (d=" + std::to_string(plan.depth) + ", w=" + std::to_string(plan.width) + ")";
  return make_planning_policy(model, plan, c.sim, linear ? PredictorKind::linear : PredictorKind::learned, name);
}

// ---------------------------------------------------------------- subcommands

int cmd_demo_collect(const Config& c, std::optional<std::size_t> episodes, const std::string& out) {
  const std::size_t n = episodes.value_or(c.train.il_episodes);
  const ReplayMemory demos = collect_demonstrations(c.sim, n, c.train.seed, c.train.gamma, c.train.replay_capacity);
  Container box;
  box.fingerprint = "replay";
  store_replay(box, "demos", demos);
  save_container(out, box);
  std::cout << "collected " << demos.size() << " transitions from " << n << " ORCA episodes -> " << out << "\n";
  return 0;
}

struct TrainArgs {
  std::optional<std::size_t> il_episodes, il_epochs, rl_episodes;
  std::optional<std::size_t> train_depth, train_width;
  std::string demos, resume, out;
};

int cmd_train(Config c, const TrainArgs& a) {
  if (a.il_episodes) c.train.il_episodes = *a.il_episodes;
  if (a.il_epochs) c.train.il_epochs = *a.il_epochs;
  if (a.rl_episodes) c.train.rl_episodes = *a.rl_episodes;
  if (a.train_depth) c.train.plan.depth = *a.train_depth;
  if (a.train_width) c.train.plan.width = *a.train_width;
  c.train.plan.validate();

  fs::create_directories(a.out);
  const fs::path dir(a.out);
  {
    std::ofstream cfg = open_out((dir / "config.json").string());
    cfg << config_to_json(c);
  }
  const std::string checkpoint = (dir / "checkpoint.bin").string();
  std::ofstream log = open_out((dir / "train_log.jsonl").string());
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  Trainer trainer(c.sim, c.train, c.model);
  std::size_t remaining = c.train.rl_episodes;
  if (!a.resume.empty()) {
    trainer.restore(load_container(a.resume, c.model.fingerprint()));
    remaining = trainer.episodes_done() >= remaining ? 0 : remaining - trainer.episodes_done();
    std::cerr << "resumed at RL episode " << trainer.episodes_done() << "\n";
  } else {
    ReplayMemory demos(c.train.replay_capacity);
    if (!a.demos.empty()) {
      demos = load_replay(load_container(a.demos, std::string("replay")), "demos");
    } else {
      demos = collect_demonstrations(c.sim, c.train.il_episodes, c.train.seed, c.train.gamma, c.train.replay_capacity);
    }
    if (demos.empty() || c.train.il_epochs == 0) {
      std::cerr << "skipping imitation learning\n";
      for (std::size_t i = 0; i < demos.size(); ++i) trainer.push_experience(demos[i]);
    } else {
      const auto losses = trainer.imitation_learning(demos, c.train.il_epochs);
      for (std::size_t e = 0; e < losses.size(); ++e) {
        char line[160];
        std::snprintf(line, sizeof line, "{\"phase\":\"il\",\"epoch\":%zu,\"value_loss\":%.17g,\"prediction_loss\":%.17g}",
                      e, losses[e].value, losses[e].prediction);
        log << line << "\n";
      }
      std::cerr << "imitation learning: " << demos.size() << " transitions, " << losses.size()
                << " epochs, value loss " << losses.back().value << ", prediction loss " << losses.back().prediction
                << " (" << static_cast<int>(elapsed()) << " s)\n";
    }
    trainer.model().save((dir / "il_model.bin").string());
  }

  std::size_t window = 0, wins = 0;
  trainer.rl_train(
      remaining,
      [&](const EpisodeLog& e) {
        log << "{\"phase\":\"rl\"," << to_json_line(e).substr(1) << "\n";
        ++window;
        wins += e.outcome == Event::reached_goal ? 1 : 0;
        if (window == 100) {
          std::cerr << "RL episode " << e.episode + 1 << ": success " << wins << "/100, epsilon " << e.epsilon << " ("
                    << static_cast<int>(elapsed()) << " s)\n";
          window = wins = 0;
          log.flush();
        }
      },
      checkpoint);
  save_container(checkpoint, trainer.checkpoint());
  trainer.model().save((dir / "model.bin").string());
  std::cerr << "wrote " << (dir / "model.bin").string() << "\n";
  return 0;
}

struct EvalArgs {
  PolicyArgs policy;
  std::optional<std::size_t> cases;
  std::optional<std::uint64_t> base_seed;
  std::string csv, records, method, convention;
};

int cmd_eval(Config c, const EvalArgs& a) {
  if (a.cases) c.eval.cases = *a.cases;
  if (a.base_seed) c.eval.base_seed = *a.base_seed;
  if (a.convention == "per-episode") c.eval.convention = ReturnConvention::per_episode;
  if (a.convention == "per-step") c.eval.convention = ReturnConvention::per_step;

  std::vector<std::string> weights = a.policy.weights;
  if (weights.empty()) weights.push_back("");
  if (a.policy.policy == "orca" && weights.size() > 1) throw std::runtime_error("--policy orca takes no weights");

  std::vector<std::pair<std::string, Metrics>> rows;
  std::vector<Metrics> runs;
  std::vector<EpisodeRecord> all_records;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const Policy policy = build_policy(c, a.policy, weights[i]);
    EvaluationResult res = run_evaluation(policy, c.sim, c.eval);
    std::string name = a.method.empty() ? policy.name : a.method;
    if (weights.size() > 1) name += " [" + fs::path(weights[i]).filename().string() + "]";
    rows.emplace_back(name, res.metrics);
    runs.push_back(res.metrics);
    all_records.insert(all_records.end(), res.records.begin(), res.records.end());
  }
  if (runs.size() > 1) {
    const MetricSpread s = spread(runs);
    const std::string base = a.method.empty() ? build_policy(c, a.policy, weights[0]).name : a.method;
    rows.emplace_back(base + " mean", s.mean);
    rows.emplace_back(base + " std", s.stddev);
  }

  write_metrics_csv(std::cout, rows);
  if (!a.csv.empty()) {
    std::ofstream os = open_out(a.csv);
    write_metrics_csv(os, rows);
  }
  if (!a.records.empty()) {
    std::ofstream os = open_out(a.records);
    write_case_records(os, all_records);
  }
  return 0;
}

struct RolloutArgs {
  PolicyArgs policy;
  std::size_t case_index = 0;
  std::optional<std::size_t> heatmap_step;
  std::string svg, log, trace;
};

int cmd_rollout(const Config& c, const RolloutArgs& a) {
  const Policy policy = build_policy(c, a.policy, a.policy.weights.empty() ? "" : a.policy.weights.front());
  const bool tracing = !a.trace.empty() || a.heatmap_step.has_value();
  const std::uint64_t seed = c.eval.base_seed + a.case_index;

  std::optional<std::ofstream> trace_os;
  if (!a.trace.empty()) trace_os.emplace(open_out(a.trace));
  // wrap the policy so each decision's tree lands in the trace file as it is made
  Policy recorded = policy;
  if (trace_os) {
    recorded.act = [&](const JointState& s, Decision* d) {
      Decision local;
      const Action act = policy.act(s, &local);
      write_decision_trace(*trace_os, local);
      if (d) *d = std::move(local);
      return act;
    };
  }
  EpisodeRecord rec = run_episode(recorded, c.sim, seed, c.eval.gamma, tracing);
  rec.case_index = a.case_index;

  std::cout << case_record_json(rec) << "\n";
  if (!a.log.empty()) {
    std::ofstream os = open_out(a.log);
    write_episode_log(os, rec);
  }
  if (!a.svg.empty()) {
    SvgOptions opt;
    opt.heatmap_step = a.heatmap_step;
    std::ofstream os = open_out(a.svg);
    export_trajectory_svg(os, rec, ActionSpace(c.sim.robot_v_pref), opt);
  }
  return 0;
}

int cmd_gradcheck(const Config& c, GradcheckConfig g) {
  g.model = c.model;
  const GradcheckReport r = run_gradcheck(g);
  for (const GradcheckBlock& b : r.blocks) {
    std::printf("%-4s %-40s entries %6zu  max rel err %.3e  one-sided %zu  excluded %zu\n", b.passed ? "PASS" : "FAIL",
                b.name.c_str(), b.entries, b.max_rel_error, b.one_sided, b.excluded);
  }
  std::printf("%s: %zu entries, max rel err %.3e (tolerance %.0e), %zu excluded, %.1f s\n",
              r.passed ? "PASS" : "FAIL", r.entries, r.max_rel_error, g.tolerance, r.excluded, r.seconds);
  return r.passed ? 0 : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  relnav::retain_freed_memory();
  CLI::App app{"Crowd navigation with relational graph learning"};
  app.require_subcommand(1);
  app.fallthrough();

  Overrides ov;
  app.add_option("--config", ov.config_path, "JSON config file (defaults apply to missing keys)");
  app.add_option("--seed", ov.seed, "seed for every RNG stream (scenarios, exploration, batches, init, eval cases)");
  app.add_option("--humans", ov.humans, "number of humans");
  app.add_option("--threads", ov.threads, "evaluation worker threads (0 = all cores)");
  app.add_flag("--visible", ov.visible, "humans react to the robot");

  auto* show = app.add_subcommand("show-config", "print the effective configuration");

  std::optional<std::size_t> demo_episodes;
  std::string demo_out;
  auto* demo = app.add_subcommand("demo-collect", "record ORCA demonstrations into a replay file");
  demo->add_option("--episodes", demo_episodes, "episodes (default train.il_episodes)");
  demo->add_option("--out", demo_out, "output file")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "imitation learning followed by RL, with checkpoints");
  train->add_option("--il-episodes", ta.il_episodes, "demonstration episodes");
  train->add_option("--il-epochs", ta.il_epochs, "imitation learning epochs");
  train->add_option("--rl-episodes", ta.rl_episodes, "RL episodes");
  train->add_option("--train-depth", ta.train_depth, "planning depth used during training")->check(CLI::PositiveNumber);
  train->add_option("--train-width", ta.train_width, "planning width used during training")->check(CLI::PositiveNumber);
  train->add_option("--demos", ta.demos, "replay file from demo-collect instead of collecting afresh");
  train->add_option("--resume", ta.resume, "checkpoint to resume RL from");
  train->add_option("--out", ta.out, "output directory")->required();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "metrics over seeded test cases, as CSV");
  add_policy_options(eval, ea.policy);
  eval->add_option("--cases", ea.cases, "number of test cases")->check(CLI::PositiveNumber);
  eval->add_option("--base-seed", ea.base_seed, "case i uses seed base + i");
  eval->add_option("--csv", ea.csv, "also write the CSV here");
  eval->add_option("--records", ea.records, "per-case JSON lines");
  eval->add_option("--method", ea.method, "row label");
  eval->add_option("--return-convention", ea.convention, "per-step or per-episode")
      ->check(CLI::IsMember({"per-step", "per-episode"}));

  RolloutArgs ra;
  auto* rollout = app.add_subcommand("rollout", "run one case and export its trajectory");
  add_policy_options(rollout, ra.policy);
  rollout->add_option("--case", ra.case_index, "case index (seed = eval.base_seed + index)");
  rollout->add_option("--svg", ra.svg, "trajectory drawing");
  rollout->add_option("--log", ra.log, "episode log, one JSON line per step");
  rollout->add_option("--trace", ra.trace, "planner decision trees, one JSON line per step");
  rollout->add_option("--heatmap-step", ra.heatmap_step, "draw root action values of this step");

  GradcheckConfig gc;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of both network stacks");
  grad->add_option("--states", gc.states, "random joint states");
  grad->add_option("--grad-humans", gc.humans, "humans per state");
  grad->add_option("--step", gc.step, "finite-difference step");
  grad->add_option("--tolerance", gc.tolerance, "relative error bound");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    const Config c = resolve(ov);
    if (show->parsed()) {
      std::cout << config_to_json(c);
      return 0;
    }
    if (demo->parsed()) return cmd_demo_collect(c, demo_episodes, demo_out);
    if (train->parsed()) return cmd_train(c, ta);
    if (eval->parsed()) return cmd_eval(c, ea);
    if (rollout->parsed()) return cmd_rollout(c, ra);
    if (grad->parsed()) {
      if (ov.seed) gc.seed = *ov.seed;
      return cmd_gradcheck(c, gc);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
