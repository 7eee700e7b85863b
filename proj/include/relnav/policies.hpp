#pragma once

#include <relnav/model.hpp>
#include <relnav/orca.hpp>
#include <relnav/planner.hpp>
#include <relnav/sim.hpp>

#include <functional>
#include <memory>
#include <string>

namespace relnav {

/// ORCA velocity for the robot against every observed human, returned as a
/// continuous action. Humans are assumed to reciprocate.
inline Action orca_robot_policy(const JointState& s, const OrcaParams& params, double dt) {
  const RobotState& r = s.robot;
  std::vector<OrcaAgent> neighbors;
  neighbors.reserve(s.humans.size());
  for (const auto& h : s.humans) neighbors.push_back({h.position, h.velocity, h.radius});
  const Vec2 pref = preferred_velocity(r.position, r.goal, r.v_pref, dt);
  const Vec2 v = compute_orca_velocity({r.position, r.velocity, r.radius}, pref, r.v_pref, neighbors, params, dt);
  Action a = action_from_velocity(v);
  a.speed = std::min(a.speed, r.v_pref);
  return a;
}

/// A robot controller; `trace` receives planner details when the policy plans.
struct Policy {
  std::string name;
  std::function<Action(const JointState&, Decision* trace)> act;
};

inline Policy make_orca_policy(const SimConfig& sim) {
  return {"ORCA", [orca = sim.orca, dt = sim.dt](const JointState& s, Decision*) { return orca_robot_policy(s, orca, dt); }};
}

/// Full speed straight at the goal (capped so it does not overshoot).
inline Policy make_straight_line_policy(const SimConfig& sim) {
  return {"Straight", [dt = sim.dt](const JointState& s, Decision*) {
            return action_from_velocity(preferred_velocity(s.robot.position, s.robot.goal, s.robot.v_pref, dt));
          }};
}

enum class PredictorKind { learned, linear };

/// Greedy lookahead policy over the discrete action grid (exploration off).
inline Policy make_planning_policy(std::shared_ptr<const RglModel> model, const PlanConfig& plan, const SimConfig& sim,
                                   PredictorKind predictor, std::string name) {
  const ActionSpace actions(sim.robot_v_pref);
  PlanningModels models = predictor == PredictorKind::learned
                              ? rgl_models(model->value, model->prediction, sim.dt)
                              : linear_models(model->value, sim.dt);
  auto planner = std::make_shared<Planner>(plan, actions, sim.reward, sim.dt, std::move(models));
  return {std::move(name), [planner, model](const JointState& s, Decision* trace) {
            Decision d = planner->decide(s, trace != nullptr);
            const Action a = planner->actions()[d.action];
            if (trace) *trace = std::move(d);
            return a;
          }};
}

}  // namespace relnav
