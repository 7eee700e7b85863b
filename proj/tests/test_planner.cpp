#include "planner_oracle.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

using namespace relnav;
using namespace relnav::oracle;

TEST(Planner, DepthOneIsValueExactly) {
  const Planner p = make_planner(1, 2);
  for (const auto& s : planner_states(20, 1)) EXPECT_EQ(p.d_step_value(s, 1), stub_value(s));
}

TEST(Planner, FullWidthMatchesExhaustiveOracle) {
  const ActionSpace actions(1.0);
  const auto states = planner_states(100, 2);
  for (std::size_t d : {1u, 2u, 3u}) {
    const Planner p = make_planner(d, 80);
    for (std::size_t i = 0; i < states.size(); i += (d == 3 ? 5 : 1)) {
      EXPECT_NEAR(p.d_step_value(states[i], d), oracle_value(states[i], d, actions), 1e-12) << "d=" << d << " i=" << i;
    }
  }
}

TEST(Planner, ValueIsMonotoneInWidth) {
  const auto states = planner_states(30, 3);
  for (const auto& s : states) {
    double prev = -1e300;
    for (std::size_t w : {1u, 2u, 4u, 8u, 80u}) {
      const double v = make_planner(3, w).d_step_value(s, 3);
      EXPECT_GE(v, prev - 1e-12);
      prev = v;
    }
  }
}

TEST(Planner, PredictionCallBudget) {
  // no humans nearby and a distant goal: nothing terminates, so the count is exact
  JointState s;
  s.robot.position = {0, -4};
  s.robot.goal = {0, 4};
  s.humans.push_back({{6, 6}, {0, 0}, 0.3});
  for (std::size_t d : {1u, 2u, 3u, 4u}) {
    for (std::size_t w : {1u, 2u, 3u}) {
      PlanConfig pc;
      pc.depth = d;
      pc.width = w;
      const Planner p(pc, ActionSpace(1.0), RewardConfig{}, kDt, stub_models());
      const Decision dec = p.decide(s);
      std::size_t expected = 0, level = 80;
      for (std::size_t k = 0; k + 2 <= d; ++k) {
        expected += level;
        level *= w;
      }
      EXPECT_EQ(dec.stats.prediction_calls, expected) << "d=" << d << " w=" << w;
      EXPECT_EQ(dec.stats.root_prediction_calls, 1u);
    }
  }
}

TEST(Planner, DecisionIsArgmaxOfRootObjective) {
  const Planner p = make_planner(2, 2);
  const ActionSpace actions(1.0);
  for (const auto& s : planner_states(10, 4)) {
    const Decision d = p.decide(s, true);
    ASSERT_EQ(d.root_values.size(), 80u);
    ASSERT_EQ(d.root_children.size(), 80u);
    for (std::size_t a = 0; a < 80; ++a) EXPECT_LE(d.root_values[a], d.root_values[d.action]);
    for (std::size_t a = 0; a < d.action; ++a) EXPECT_LT(d.root_values[a], d.root_values[d.action]);  // lowest index wins ties
    const double g = std::pow(0.9, kDt);
    const auto& child = d.root_children[d.action];
    EXPECT_NEAR(d.root_values[d.action], child.reward + g * (child.terminal ? 0.0 : child.value), 1e-15);
    for (const auto& c : d.root_children) {
      if (!c.terminal) {
        EXPECT_EQ(c.children.size(), 2u);
      } else {
        EXPECT_TRUE(c.children.empty());
      }
    }
  }
}

TEST(Planner, RootValuesMatchDStepValueOfSuccessors) {
  const Planner p = make_planner(2, 2);
  const ActionSpace actions(1.0);
  const JointState s = planner_states(1, 5).front();
  const Decision d = p.decide(s);
  const auto humans = stub_motion(s);
  for (std::size_t a = 0; a < 80; a += 7) {
    const JointState n = compose_prediction(s, actions[a], humans, kDt);
    bool terminal = false;
    const double r = oracle_reward(s, actions[a], humans, terminal);
    const double expect = r + std::pow(0.9, kDt) * (terminal ? 0.0 : p.d_step_value(n, 2));
    EXPECT_NEAR(d.root_values[a], expect, 1e-12);
  }
}

TEST(Planner, TiesGoToLowestIndex) {
  PlanningModels flat{[](std::span<const JointState> s) { return std::vector<double>(s.size(), 0.0); },
                      [](const JointState& s) { return s.humans; }};
  PlanConfig pc;
  pc.depth = 2;
  const Planner p(pc, ActionSpace(1.0), RewardConfig{}, kDt, flat);
  JointState s;
  s.robot.goal = {0, 100};
  EXPECT_EQ(p.decide(s).action, 0u);
}

TEST(Planner, EpsilonOneIsUniform) {
  const Planner p = make_planner(1, 1);
  const JointState s = planner_states(1, 6).front();
  std::mt19937_64 rng(7);
  std::vector<int> counts(80, 0);
  const int n = 16000;
  for (int i = 0; i < n; ++i) {
    const Decision d = p.select_action(s, 1.0, rng);
    EXPECT_TRUE(d.explored);
    ++counts[d.action];
  }
  double chi2 = 0.0;
  const double e = n / 80.0;
  for (int c : counts) chi2 += (c - e) * (c - e) / e;
  EXPECT_LT(chi2, 122.9);  // 99.9th percentile of chi-square with 79 dof
}

TEST(Planner, EpsilonZeroIsGreedy) {
  const Planner p = make_planner(2, 2);
  std::mt19937_64 rng(8);
  for (const auto& s : planner_states(5, 9)) {
    const Decision d = p.select_action(s, 0.0, rng);
    EXPECT_FALSE(d.explored);
    EXPECT_EQ(d.action, p.decide(s).action);
  }
}

TEST(Planner, InnerDiscountOption) {
  const JointState s = planner_states(2, 10).back();  // goal far away
  const double a = make_planner(3, 2, InnerDiscount::time_normalized).d_step_value(s, 3);
  const double b = make_planner(3, 2, InnerDiscount::plain).d_step_value(s, 3);
  EXPECT_NE(a, b);
}

TEST(Planner, ClipRootRestrictsCandidates) {
  PlanConfig pc;
  pc.depth = 2;
  pc.width = 3;
  pc.clip_root = true;
  const Planner p(pc, ActionSpace(1.0), RewardConfig{}, kDt, stub_models());
  const Decision d = p.decide(planner_states(1, 11).front());
  int finite = 0;
  for (double v : d.root_values) finite += std::isfinite(v) ? 1 : 0;
  EXPECT_EQ(finite, 3);
}

TEST(Planner, InvalidConfigRejected) {
  PlanConfig pc;
  pc.width = 0;
  EXPECT_THROW(pc.validate(), ContractError);
  pc.width = 2;
  pc.depth = 0;
  EXPECT_THROW(pc.validate(), ContractError);
  const Planner p = make_planner(2, 2);
  EXPECT_THROW(p.d_step_value(JointState{}, 0), ContractError);
}

TEST(Planner, RewardEstimateMatchesSimulatorOnTrueTransition) {
  // with the true next human states, R-hat equals the simulator's reward
  SimConfig cfg;
  std::mt19937_64 rng(12);
  const ActionSpace actions(1.0);
  Scenario sc = generate_circle_crossing(cfg, rng);
  for (int t = 0; t < 40; ++t) {
    const Action a = actions[(t * 37) % 80];
    const StepOutcome out = step(sc, a, cfg);
    if (out.event == Event::timeout) break;
    EXPECT_EQ(estimate_reward(sc.state, a, out.next.state, cfg.reward, cfg.dt), out.reward);
    if (out.terminal()) break;
    sc = out.next;
  }
}
