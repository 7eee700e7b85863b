#pragma once

// Deterministic discrete-time circle-crossing crowd simulator.

#include <relnav/orca.hpp>
#include <relnav/tensor.hpp>
#include <relnav/vec2.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace relnav {

/// Full robot state: observable part plus goal and preferred speed.
struct RobotState {
  Vec2 position;
  Vec2 velocity;
  double radius = 0.3;
  Vec2 goal;
  double v_pref = 1.0;
  double heading = std::numbers::pi / 2;  // rad, last commanded direction
  bool operator==(const RobotState&) const = default;
};

/// What the robot observes about a human.
struct HumanState {
  Vec2 position;
  Vec2 velocity;
  double radius = 0.3;
  bool operator==(const HumanState&) const = default;
};

struct JointState {
  RobotState robot;
  std::vector<HumanState> humans;
  bool operator==(const JointState&) const = default;
};

/// Holonomic velocity command.
struct Action {
  double speed = 0.0;    // m/s
  double heading = 0.0;  // rad, [0, 2pi)
  Vec2 velocity() const { return {speed * std::cos(heading), speed * std::sin(heading)}; }
  bool operator==(const Action&) const = default;
};

inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  if (a < 0.0) a += two_pi;
  if (a >= two_pi) a = 0.0;
  return a;
}

inline Action action_from_velocity(const Vec2& v) {
  const double speed = norm(v);
  return {speed, speed > 0.0 ? wrap_angle(std::atan2(v.y, v.x)) : 0.0};
}

/// speeds x headings grid; index = speed_index * headings + heading_index.
/// Speeds are v_pref * (e^(i/n) - 1) / (e - 1) for i = 1..n, headings
/// 2*pi*k/m for k = 0..m-1.
class ActionSpace {
 public:
  explicit ActionSpace(double v_pref = 1.0, std::size_t speeds = 5, std::size_t headings = 16)
      : n_speeds_(speeds), n_headings_(headings) {
    if (speeds == 0 || headings == 0 || !(v_pref > 0.0)) throw ContractError("invalid action space");
    for (std::size_t i = 1; i <= speeds; ++i) {
      const double s = (std::exp(static_cast<double>(i) / static_cast<double>(speeds)) - 1.0) / (std::numbers::e - 1.0);
      speed_values_.push_back(i == speeds ? v_pref : v_pref * s);
    }
    for (std::size_t s = 0; s < speeds; ++s) {
      for (std::size_t k = 0; k < headings; ++k) {
        actions_.push_back({speed_values_[s], 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(headings)});
      }
    }
  }

  std::size_t size() const { return actions_.size(); }
  std::size_t speed_count() const { return n_speeds_; }
  std::size_t heading_count() const { return n_headings_; }
  const Action& operator[](std::size_t i) const { return actions_[i]; }
  std::span<const Action> actions() const { return actions_; }
  std::span<const double> speeds() const { return speed_values_; }
  std::size_t index(std::size_t speed_idx, std::size_t heading_idx) const { return speed_idx * n_headings_ + heading_idx; }
  std::size_t speed_index(std::size_t i) const { return i / n_headings_; }
  std::size_t heading_index(std::size_t i) const { return i % n_headings_; }

 private:
  std::size_t n_speeds_;
  std::size_t n_headings_;
  std::vector<double> speed_values_;
  std::vector<Action> actions_;
};

enum class Event { none, discomfort, collision, reached_goal, timeout };

inline const char* event_name(Event e) {
  switch (e) {
    case Event::none: return "none";
    case Event::discomfort: return "discomfort";
    case Event::collision: return "collision";
    case Event::reached_goal: return "reached_goal";
    case Event::timeout: return "timeout";
  }
  return "?";
}

inline bool is_terminal(Event e) {
  return e == Event::collision || e == Event::reached_goal || e == Event::timeout;
}

struct RewardConfig {
  double success_reward = 1.0;
  double collision_penalty = -0.25;
  double discomfort_dist = 0.2;    // m
  double discomfort_factor = 0.5;  // penalty = (d_min - discomfort_dist) * factor * dt
};

/// Clamped-normal sampling of per-human ORCA parameters.
struct HumanDistribution {
  double v_pref_mean = 1.0, v_pref_std = 0.1, v_pref_min = 0.5, v_pref_max = 1.5;
  double radius_mean = 0.3, radius_std = 0.05, radius_min = 0.2, radius_max = 0.4;
  double perturbation_std = 0.5;  // m, per coordinate
};

struct SimConfig {
  std::size_t n_humans = 5;
  double circle_radius = 4.0;  // m
  double dt = 0.25;            // s
  double time_limit = 25.0;    // s
  bool robot_visible = false;
  double robot_radius = 0.3;
  double robot_v_pref = 1.0;
  HumanDistribution humans;
  OrcaParams orca;
  RewardConfig reward;
  std::uint64_t seed = 0;
  std::size_t max_resample = 1000;

  void validate() const {
    if (!(dt > 0.0)) throw ContractError("dt must be positive");
    if (!(time_limit > 0.0)) throw ContractError("time_limit must be positive");
    const double steps = time_limit / dt;
    if (std::fabs(steps - std::round(steps)) > 1e-9) throw ContractError("time_limit must be a multiple of dt");
    if (!(robot_radius > 0.0) || !(robot_v_pref > 0.0)) throw ContractError("robot radius and v_pref must be positive");
    if (!(circle_radius > 0.0)) throw ContractError("circle_radius must be positive");
    if (!(humans.radius_min > 0.0) || !(humans.v_pref_min > 0.0)) throw ContractError("human radius and v_pref bounds must be positive");
    if (!(orca.neighbor_dist > 0.0) || !(orca.time_horizon > 0.0) || orca.safety_space < 0.0) {
      throw ContractError("invalid ORCA parameters");
    }
  }

  std::size_t max_steps() const { return static_cast<std::size_t>(std::llround(time_limit / dt)); }
};

/// Hidden per-human data the robot never observes.
struct HumanIntent {
  Vec2 goal;
  double v_pref = 1.0;
  bool arrived = false;
  bool operator==(const HumanIntent&) const = default;
};

struct Scenario {
  JointState state;
  std::vector<HumanIntent> intents;
  double time = 0.0;
  std::size_t steps = 0;
  bool operator==(const Scenario&) const = default;
};

struct StepOutcome {
  Scenario next;
  double reward = 0.0;
  Event event = Event::none;
  double d_min = std::numeric_limits<double>::infinity();  // closest robot-human gap in the step
  std::size_t human_collisions = 0;
  bool terminal() const { return is_terminal(event); }
};

class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Minimum over t in [0, dt] of |(p1 + v1 t) - (p2 + v2 t)| - radius_sum.
inline double min_separation(const Vec2& p1, const Vec2& v1, const Vec2& p2, const Vec2& v2, double dt,
                             double radius_sum = 0.0) {
  if (!(dt > 0.0)) throw ContractError("min_separation requires dt > 0");
  const Vec2 dp = p1 - p2;
  const Vec2 dv = v1 - v2;
  const double dv_sq = abs_sq(dv);
  double t = 0.0;
  if (dv_sq > 0.0) t = std::clamp(-dot(dp, dv) / dv_sq, 0.0, dt);
  return norm(dp + dv * t) - radius_sum;
}

/// Reward for a classified step.
inline double reward_for(Event event, double d_min, const RewardConfig& cfg, double dt) {
  switch (event) {
    case Event::reached_goal: return cfg.success_reward;
    case Event::collision: return cfg.collision_penalty;
    case Event::discomfort: return (d_min - cfg.discomfort_dist) * cfg.discomfort_factor * dt;
    default: return 0.0;
  }
}

struct TransitionJudgement {
  Event event = Event::none;
  double d_min = std::numeric_limits<double>::infinity();
  double reward = 0.0;
};

/// Classifies the robot's motion from `prev` under `action` against humans
/// moving linearly to `next_humans`. Collision outranks reaching the goal.
/// Timeouts are the simulator's business and are not considered here.
inline TransitionJudgement judge_transition(const JointState& prev, const Action& action,
                                            std::span<const HumanState> next_humans, const RewardConfig& cfg,
                                            double dt) {
  if (next_humans.size() != prev.humans.size()) throw ContractError("human count changed within a step");
  TransitionJudgement j;
  const Vec2 rv = action.velocity();
  for (std::size_t i = 0; i < prev.humans.size(); ++i) {
    const HumanState& h = prev.humans[i];
    const Vec2 hv = (next_humans[i].position - h.position) / dt;
    j.d_min = std::min(j.d_min, min_separation(prev.robot.position, rv, h.position, hv, dt, prev.robot.radius + h.radius));
  }
  const Vec2 end = prev.robot.position + rv * dt;
  if (j.d_min < 0.0) {
    j.event = Event::collision;
  } else if (norm(end - prev.robot.goal) < prev.robot.radius) {
    j.event = Event::reached_goal;
  } else if (j.d_min < cfg.discomfort_dist) {
    j.event = Event::discomfort;
  }
  j.reward = reward_for(j.event, j.d_min, cfg, dt);
  return j;
}

/// Robot state after executing `action` for dt.
inline RobotState propagate_robot(const RobotState& r, const Action& action, double dt) {
  RobotState out = r;
  out.velocity = action.velocity();
  out.position = r.position + out.velocity * dt;
  if (action.speed > 0.0) out.heading = action.heading;
  return out;
}

/// Per-step discount gamma^(dt * v_pref).
inline double step_discount(double gamma, double v_pref, double dt) { return std::pow(gamma, dt * v_pref); }

/// sum_k (gamma^(dt v_pref))^k r_k
inline double discounted_return(std::span<const double> rewards, double gamma, double v_pref, double dt) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ContractError("gamma must lie in (0, 1)");
  const double g = step_discount(gamma, v_pref, dt);
  double total = 0.0;
  double w = 1.0;
  for (double r : rewards) {
    total += w * r;
    w *= g;
  }
  return total;
}

/// Return-to-go at every step: G_t = r_t + g * G_{t+1}.
inline std::vector<double> returns_to_go(std::span<const double> rewards, double gamma, double v_pref, double dt) {
  const double g = step_discount(gamma, v_pref, dt);
  std::vector<double> out(rewards.size());
  double next = 0.0;
  for (std::size_t k = rewards.size(); k-- > 0;) {
    next = rewards[k] + g * next;
    out[k] = next;
  }
  return out;
}

template <class Rng>
double clamped_normal(Rng& rng, double mean, double stddev, double lo, double hi) {
  std::normal_distribution<double> dist(mean, stddev);
  return std::clamp(dist(rng), lo, hi);
}

/// Circle-crossing scenario: humans on the circle with perturbed positions,
/// each heading to the antipode of its perturbed start; robot crosses from
/// (0, -R) to (0, R).
template <class Rng>
Scenario generate_circle_crossing(const SimConfig& cfg, Rng& rng) {
  cfg.validate();
  Scenario sc;
  RobotState& robot = sc.state.robot;
  robot.position = {0.0, -cfg.circle_radius};
  robot.goal = {0.0, cfg.circle_radius};
  robot.velocity = {0.0, 0.0};
  robot.radius = cfg.robot_radius;
  robot.v_pref = cfg.robot_v_pref;
  robot.heading = std::numbers::pi / 2;

  std::uniform_real_distribution<double> angle_dist(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, cfg.humans.perturbation_std);
  const HumanDistribution& hd = cfg.humans;
  for (std::size_t i = 0; i < cfg.n_humans; ++i) {
    HumanIntent intent;
    HumanState human;
    intent.v_pref = clamped_normal(rng, hd.v_pref_mean, hd.v_pref_std, hd.v_pref_min, hd.v_pref_max);
    human.radius = clamped_normal(rng, hd.radius_mean, hd.radius_std, hd.radius_min, hd.radius_max);
    bool placed = false;
    for (std::size_t attempt = 0; attempt < cfg.max_resample && !placed; ++attempt) {
      const double a = angle_dist(rng);
      const double nx = noise(rng);
      const double ny = noise(rng);
      const Vec2 p{cfg.circle_radius * std::cos(a) + nx, cfg.circle_radius * std::sin(a) + ny};
      const Vec2 g = -p;
      bool ok = norm(p - robot.position) > human.radius + robot.radius &&
                norm(g - robot.goal) > human.radius + robot.radius;
      for (std::size_t j = 0; ok && j < sc.state.humans.size(); ++j) {
        const double rs = human.radius + sc.state.humans[j].radius;
        ok = norm(p - sc.state.humans[j].position) > rs && norm(g - sc.intents[j].goal) > rs;
      }
      if (ok) {
        human.position = p;
        intent.goal = g;
        placed = true;
      }
    }
    if (!placed) {
      throw ScenarioError("could not place human " + std::to_string(i) + " without overlap after " +
                          std::to_string(cfg.max_resample) + " attempts");
    }
    sc.state.humans.push_back(human);
    sc.intents.push_back(intent);
  }
  return sc;
}

inline constexpr double kHumanArrivalTolerance = 1e-6;  // m

/// Velocities every human picks for the coming step (simultaneous ORCA).
inline std::vector<Vec2> human_velocities(const Scenario& sc, const SimConfig& cfg) {
  const auto& humans = sc.state.humans;
  std::vector<Vec2> out(humans.size());
  std::vector<OrcaAgent> neighbors;
  for (std::size_t i = 0; i < humans.size(); ++i) {
    if (sc.intents[i].arrived) continue;
    neighbors.clear();
    for (std::size_t j = 0; j < humans.size(); ++j) {
      if (j != i) neighbors.push_back({humans[j].position, humans[j].velocity, humans[j].radius});
    }
    if (cfg.robot_visible) {
      const RobotState& r = sc.state.robot;
      neighbors.push_back({r.position, r.velocity, r.radius});
    }
    const OrcaAgent self{humans[i].position, humans[i].velocity, humans[i].radius};
    const Vec2 pref = preferred_velocity(humans[i].position, sc.intents[i].goal, sc.intents[i].v_pref, cfg.dt);
    out[i] = compute_orca_velocity(self, pref, sc.intents[i].v_pref, neighbors, cfg.orca, cfg.dt);
  }
  return out;
}

/// Advances the scenario by one dt with the robot executing `action`.
inline StepOutcome step(const Scenario& sc, const Action& action, const SimConfig& cfg) {
  if (action.speed > sc.state.robot.v_pref + 1e-9 || action.speed < 0.0) {
    throw ContractError("action speed " + std::to_string(action.speed) + " outside [0, v_pref]");
  }
  const double dt = cfg.dt;
  StepOutcome out;
  out.next = sc;
  Scenario& nx = out.next;

  const std::vector<Vec2> hv = human_velocities(sc, cfg);
  for (std::size_t i = 0; i < hv.size(); ++i) {
    HumanState& h = nx.state.humans[i];
    h.velocity = hv[i];
    h.position = sc.state.humans[i].position + hv[i] * dt;
    if (!nx.intents[i].arrived && norm(h.position - nx.intents[i].goal) < kHumanArrivalTolerance) {
      nx.intents[i].arrived = true;
    }
  }
  for (std::size_t i = 0; i < hv.size(); ++i) {
    for (std::size_t j = i + 1; j < hv.size(); ++j) {
      const auto& a = sc.state.humans[i];
      const auto& b = sc.state.humans[j];
      if (min_separation(a.position, hv[i], b.position, hv[j], dt, a.radius + b.radius) < 0.0) ++out.human_collisions;
    }
  }

  const TransitionJudgement j = judge_transition(sc.state, action, nx.state.humans, cfg.reward, dt);
  nx.state.robot = propagate_robot(sc.state.robot, action, dt);
  nx.steps = sc.steps + 1;
  nx.time = static_cast<double>(nx.steps) * dt;

  out.d_min = j.d_min;
  out.event = j.event;
  out.reward = j.reward;
  if (!is_terminal(out.event) && nx.steps >= cfg.max_steps()) {
    out.event = Event::timeout;
    out.reward = 0.0;
  }
  return out;
}

/// Steps the straight-line, full-speed robot needs to satisfy the goal
/// condition (end position strictly within one radius of the goal).
inline std::size_t straight_line_steps(double distance, double radius, double v_pref, double dt) {
  if (distance < radius) return 0;
  return static_cast<std::size_t>(std::floor((distance - radius) / (v_pref * dt))) + 1;
}

}  // namespace relnav
