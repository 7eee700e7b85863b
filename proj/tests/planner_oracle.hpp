#pragma once

// Stand-in value/motion functions and an exhaustive d-step recursion written
// independently of Planner, shared by the planner tests and the acceptance run.

#include <relnav/gradcheck.hpp>
#include <relnav/planner.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

namespace relnav::oracle {

inline constexpr double kDt = 0.25;

// Smooth, position-dependent stand-ins for the learned networks.
inline double stub_value(const JointState& s) {
  double v = -0.1 * norm(s.robot.goal - s.robot.position) + 0.05 * std::sin(3.0 * s.robot.position.x);
  for (const auto& h : s.humans) v += 0.02 * std::tanh(norm(h.position - s.robot.position) - 1.0);
  return v;
}

inline std::vector<HumanState> stub_motion(const JointState& s) {
  std::vector<HumanState> out = s.humans;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Vec2 v = rotate(s.humans[i].velocity, 0.1 * static_cast<double>(i + 1));
    out[i].position = s.humans[i].position + v * kDt;
    out[i].velocity = v;
  }
  return out;
}

inline PlanningModels stub_models() {
  return {[](std::span<const JointState> states) {
            std::vector<double> v;
            for (const auto& s : states) v.push_back(stub_value(s));
            return v;
          },
          stub_motion};
}

inline Planner make_planner(std::size_t depth, std::size_t width, InnerDiscount inner = InnerDiscount::time_normalized) {
  PlanConfig p;
  p.depth = depth;
  p.width = width;
  p.inner_discount = inner;
  return Planner(p, ActionSpace(1.0), RewardConfig{}, kDt, stub_models());
}

// Reward written from scratch: sample-free closest approach of two linear
// motions, then the event table.
inline double oracle_reward(const JointState& s, const Action& a, const std::vector<HumanState>& next, bool& terminal) {
  const RewardConfig rc;
  const Vec2 rv{a.speed * std::cos(a.heading), a.speed * std::sin(a.heading)};
  double dmin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < s.humans.size(); ++i) {
    const Vec2 p = s.robot.position - s.humans[i].position;
    const Vec2 v = rv - (next[i].position - s.humans[i].position) / kDt;
    const double vv = v.x * v.x + v.y * v.y;
    double t = vv > 0 ? -(p.x * v.x + p.y * v.y) / vv : 0.0;
    t = std::min(std::max(t, 0.0), kDt);
    const Vec2 c = p + v * t;
    dmin = std::min(dmin, std::sqrt(c.x * c.x + c.y * c.y) - s.robot.radius - s.humans[i].radius);
  }
  const Vec2 end = s.robot.position + rv * kDt;
  terminal = true;
  if (dmin < 0) return rc.collision_penalty;
  if (std::hypot(end.x - s.robot.goal.x, end.y - s.robot.goal.y) < s.robot.radius) return rc.success_reward;
  terminal = false;
  if (dmin < rc.discomfort_dist) return (dmin - rc.discomfort_dist) * rc.discomfort_factor * kDt;
  return 0.0;
}

inline double oracle_value(const JointState& s, std::size_t d, const ActionSpace& actions) {
  const double v1 = stub_value(s);
  if (d == 1) return v1;
  const double g = std::pow(0.9, kDt * s.robot.v_pref);
  const std::vector<HumanState> humans = stub_motion(s);
  double best = -1e300;
  for (std::size_t a = 0; a < actions.size(); ++a) {
    JointState n;
    n.robot = s.robot;
    n.robot.velocity = actions[a].velocity();
    n.robot.position = s.robot.position + n.robot.velocity * kDt;
    if (actions[a].speed > 0) n.robot.heading = actions[a].heading;
    n.humans = humans;
    bool terminal = false;
    const double r = oracle_reward(s, actions[a], humans, terminal);
    best = std::max(best, r + g * (terminal ? 0.0 : oracle_value(n, d - 1, actions)));
  }
  return v1 / d + (d - 1.0) / d * best;
}

inline std::vector<JointState> planner_states(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto states = random_joint_states(n, 3, rng);
  // keep some goals reachable so goal events show up in the recursion
  for (std::size_t i = 0; i < states.size(); i += 4) states[i].robot.goal = states[i].robot.position + Vec2{0.2, 0.3};
  return states;
}

}  // namespace relnav::oracle
