#include <relnav/harness.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

using namespace relnav;

namespace {

SimConfig empty_crowd() {
  SimConfig s;
  s.n_humans = 0;
  return s;
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (std::size_t p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

EvalConfig cases(std::size_t n, std::size_t threads = 1) {
  EvalConfig e;
  e.cases = n;
  e.threads = threads;
  e.base_seed = 1000;
  return e;
}

}  // namespace

TEST(UpperBound, StraightLineFormula) {
  SimConfig sim;
  JointState s;
  s.robot.position = {0, -4};
  s.robot.goal = {0, 4};
  const UpperBound ub = upper_bound_return(s, sim, 0.9);
  ASSERT_EQ(ub.steps, 31u);
  const double g = std::pow(0.9, 0.25);
  EXPECT_NEAR(ub.episode_return, std::pow(g, 30), 1e-15);
  double pooled = 0.0;
  for (int j = 0; j < 31; ++j) pooled += std::pow(g, j);
  EXPECT_NEAR(ub.rtg_sum, pooled, 1e-12);
  EXPECT_NEAR(ub.rtg_sum / 31.0, 0.692462, 1e-6);
}

TEST(UpperBound, UnreachableWithinTimeLimitIsZero) {
  SimConfig sim;
  sim.time_limit = 2.0;
  JointState s;
  s.robot.position = {0, -4};
  s.robot.goal = {0, 4};
  const UpperBound ub = upper_bound_return(s, sim, 0.9);
  EXPECT_EQ(ub.steps, sim.max_steps());
  EXPECT_EQ(ub.episode_return, 0.0);
}

TEST(Metrics, EmptyCrowdStraightLineIsOptimal) {
  const SimConfig sim = empty_crowd();
  for (auto conv : {ReturnConvention::per_step, ReturnConvention::per_episode}) {
    EvalConfig e = cases(5);
    e.convention = conv;
    const Metrics m = run_evaluation(make_straight_line_policy(sim), sim, e).metrics;
    EXPECT_EQ(m.success, 1.0);
    EXPECT_EQ(m.collision, 0.0);
    EXPECT_EQ(m.extra_time, 0.0);
    EXPECT_EQ(m.max_diff, 0.0);
    EXPECT_EQ(m.avg_return, m.upper_bound);
  }
}

TEST(Metrics, EmptyCrowdOrcaSucceeds) {
  const SimConfig sim = empty_crowd();
  const Metrics m = run_evaluation(make_orca_policy(sim), sim, cases(10)).metrics;
  EXPECT_EQ(m.success, 1.0);
  EXPECT_GE(m.extra_time, 0.0);
}

TEST(Metrics, InvariantsOnCrowdedCases) {
  SimConfig sim;
  for (const Policy& p : {make_orca_policy(sim), make_straight_line_policy(sim)}) {
    for (auto conv : {ReturnConvention::per_step, ReturnConvention::per_episode}) {
      EvalConfig e = cases(40);
      e.convention = conv;
      const auto res = run_evaluation(p, sim, e);
      const Metrics& m = res.metrics;
      EXPECT_NEAR(m.success + m.collision + m.timeout, 1.0, 1e-12) << p.name;
      EXPECT_GE(m.max_diff, 0.0) << p.name;
      if (m.success > 0) {
        EXPECT_GE(m.extra_time, 0.0) << p.name;
      }
      EXPECT_GE(m.discomfort_frequency, 0.0);
      EXPECT_LE(m.discomfort_frequency, 1.0);
      for (const auto& r : res.records) {
        EXPECT_EQ(r.states.size(), r.actions.size() + 1);
        EXPECT_TRUE(is_terminal(r.outcome));
        if (r.outcome == Event::reached_goal) {
          EXPECT_GE(r.steps(), r.optimal_steps);
        }
      }
    }
  }
}

TEST(Metrics, PerEpisodeConventionAveragesDiscountedReturns) {
  SimConfig sim;
  EvalConfig e = cases(12);
  e.convention = ReturnConvention::per_episode;
  const auto res = run_evaluation(make_orca_policy(sim), sim, e);
  double sum = 0.0;
  for (const auto& r : res.records) {
    // recompute the discounted return from the raw rewards
    const double g = std::pow(0.9, sim.dt * sim.robot_v_pref);
    double ret = 0.0, w = 1.0;
    for (double x : r.rewards) {
      ret += w * x;
      w *= g;
    }
    EXPECT_NEAR(r.discounted_return, ret, 1e-12);
    sum += ret;
  }
  EXPECT_NEAR(res.metrics.avg_return, sum / 12.0, 1e-12);
}

TEST(Metrics, AggregationIgnoresOrder) {
  SimConfig sim;
  auto records = run_evaluation(make_orca_policy(sim), sim, cases(20)).records;
  const Metrics a = aggregate(records);
  std::reverse(records.begin(), records.end());
  const Metrics b = aggregate(records);
  EXPECT_EQ(a.success, b.success);
  EXPECT_EQ(a.collision, b.collision);
  EXPECT_NEAR(a.extra_time, b.extra_time, 1e-12);
  EXPECT_NEAR(a.avg_return, b.avg_return, 1e-12);
  EXPECT_NEAR(a.max_diff, b.max_diff, 1e-12);
}

TEST(Metrics, ParallelMatchesSequential) {
  SimConfig sim;
  const auto seq = run_evaluation(make_orca_policy(sim), sim, cases(16, 1));
  const auto par = run_evaluation(make_orca_policy(sim), sim, cases(16, 4));
  std::ostringstream a, b;
  write_case_records(a, seq.records);
  write_case_records(b, par.records);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(metrics_csv_row("ORCA", seq.metrics), metrics_csv_row("ORCA", par.metrics));
}

TEST(Metrics, EmptyAggregateRejected) {
  EXPECT_THROW(aggregate(std::vector<EpisodeRecord>{}), ContractError);
}

TEST(Metrics, SpreadUsesSampleStd) {
  std::vector<Metrics> runs(3);
  runs[0].success = 0.8;
  runs[1].success = 0.9;
  runs[2].success = 1.0;
  runs[1].extra_time = 1.0;
  runs[2].extra_time = 2.0;
  const MetricSpread s = spread(runs);
  EXPECT_NEAR(s.mean.success, 0.9, 1e-15);
  EXPECT_NEAR(s.stddev.success, 0.1, 1e-15);
  EXPECT_NEAR(s.mean.extra_time, 1.5, 1e-15);  // NaN entries skipped
}

TEST(Csv, HeaderAndFormatting) {
  Metrics m;
  m.success = 0.934;
  m.collision = 0.066;
  m.extra_time = 1.2345;
  m.avg_return = 0.5016;
  m.max_diff = -0.0;
  std::ostringstream os;
  write_metrics_csv(os, {{"RGL, d=2", m}});
  EXPECT_EQ(os.str(), "Method,Success,Collision,Extra Time,Avg. Return,Max Diff.\n\"RGL, d=2\",0.93,0.07,1.23,0.502,0.000\n");
  EXPECT_EQ(format_fixed(-0.00001, 3), "0.000");
  EXPECT_EQ(format_fixed(std::nan(""), 2), "nan");
}

TEST(Csv, RerunsAreByteIdentical) {
  SimConfig sim;
  auto render = [&] {
    const auto res = run_evaluation(make_orca_policy(sim), sim, cases(10, 2));
    std::ostringstream os;
    write_metrics_csv(os, {{"ORCA", res.metrics}});
    write_case_records(os, res.records);
    return os.str();
  };
  EXPECT_EQ(render(), render());
}

TEST(EpisodeLog, OneLinePerStep) {
  SimConfig sim;
  const EpisodeRecord rec = run_episode(make_orca_policy(sim), sim, 3, 0.9);
  std::ostringstream os;
  write_episode_log(os, rec);
  EXPECT_EQ(count(os.str(), "\n"), rec.steps());
  EXPECT_EQ(count(os.str(), "\"time\":0,"), 1u);
}

TEST(Svg, EmptyCrowdHasOnlyRobotPath) {
  const SimConfig sim = empty_crowd();
  const EpisodeRecord rec = run_episode(make_straight_line_policy(sim), sim, 0, 0.9);
  std::ostringstream os;
  export_trajectory_svg(os, rec, ActionSpace(1.0));
  EXPECT_EQ(count(os.str(), "<polyline"), 1u);
  EXPECT_EQ(count(os.str(), "class=\"collision\""), 0u);
}

TEST(Svg, HeatmapHasOneCellPerAction) {
  SimConfig sim;
  auto model = std::make_shared<RglModel>(ModelConfig{}, 3);
  PlanConfig plan;
  plan.depth = 1;
  const Policy p = make_planning_policy(model, plan, sim, PredictorKind::learned, "RGL");
  const EpisodeRecord rec = run_episode(p, sim, 4, 0.9, true);
  SvgOptions opt;
  opt.heatmap_step = 0;
  std::ostringstream os;
  export_trajectory_svg(os, rec, ActionSpace(1.0), opt);
  EXPECT_EQ(count(os.str(), "class=\"heat-cell\""), 80u);
  EXPECT_EQ(count(os.str(), "<polyline"), 1u + sim.n_humans);
}

TEST(Svg, CollisionMarkerAtFinalRobotPosition) {
  SimConfig sim;
  const Policy p = make_straight_line_policy(sim);
  bool found = false;
  for (std::uint64_t seed = 0; seed < 200 && !found; ++seed) {
    const EpisodeRecord rec = run_episode(p, sim, seed, 0.9);
    if (rec.outcome != Event::collision) continue;
    found = true;
    std::ostringstream os;
    export_trajectory_svg(os, rec, ActionSpace(1.0));
    const std::string svg = os.str();
    ASSERT_EQ(count(svg, "class=\"collision\""), 1u);
    const Vec2 at = rec.states.back().robot.position;
    EXPECT_NE(svg.find("data-x=\"" + json_detail::num(at.x) + "\" data-y=\"" + json_detail::num(at.y) + "\""),
              std::string::npos);
  }
  EXPECT_TRUE(found);
}
