#pragma once

// Evaluation over seeded test cases, metric aggregation and the text/vector
// outputs built from episode records.

#include <relnav/planner.hpp>
#include <relnav/policies.hpp>
#include <relnav/sim.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace relnav {

/// How "Avg. Return" pools episodes.
enum class ReturnConvention {
  per_step,     // return-to-go at every step of every episode, averaged over all steps
  per_episode,  // discounted episode return averaged over episodes
};

struct EpisodeRecord {
  std::size_t case_index = 0;
  std::uint64_t seed = 0;
  Event outcome = Event::none;
  std::vector<JointState> states;  // states.size() == actions.size() + 1
  std::vector<Action> actions;
  std::vector<double> rewards;
  std::vector<Event> events;
  std::vector<double> d_min;
  std::vector<std::vector<double>> root_values;  // per step; empty when not traced or exploratory
  std::vector<std::uint8_t> has_root_values;
  std::size_t human_collisions = 0;
  double dt = 0.25;
  double discounted_return = 0.0;
  double return_to_go_sum = 0.0;  // sum over steps of the return-to-go
  std::size_t optimal_steps = 0;  // straight-line steps to the goal in an empty crowd
  double upper_bound_return = 0.0;
  double upper_bound_rtg_sum = 0.0;
  std::size_t upper_bound_steps = 0;

  std::size_t steps() const { return actions.size(); }
  double navigation_time() const { return static_cast<double>(steps()) * dt; }
  std::size_t discomfort_steps() const {
    return static_cast<std::size_t>(std::count(events.begin(), events.end(), Event::discomfort));
  }
};

/// Return of the imaginary episode in which the robot heads straight to the
/// goal at full speed with nobody around.
struct UpperBound {
  std::size_t steps = 0;       // episode length
  double episode_return = 0.0;
  double rtg_sum = 0.0;        // sum of return-to-go over its steps
};

inline UpperBound upper_bound_return(const JointState& start, const SimConfig& sim, double gamma) {
  const RobotState& r = start.robot;
  const std::size_t k = straight_line_steps(norm(r.goal - r.position), r.radius, r.v_pref, sim.dt);
  UpperBound ub;
  if (k == 0) return ub;
  const std::size_t max_steps = sim.max_steps();
  std::vector<double> rewards(std::min(k, max_steps), 0.0);
  if (k <= max_steps) rewards.back() = sim.reward.success_reward;
  const std::vector<double> rtg = returns_to_go(rewards, gamma, r.v_pref, sim.dt);
  ub.steps = rewards.size();
  ub.episode_return = rtg.front();
  ub.rtg_sum = std::accumulate(rtg.begin(), rtg.end(), 0.0);
  return ub;
}

/// Rolls out one case to termination. `trace` stores root action values.
inline EpisodeRecord run_episode(const Policy& policy, const SimConfig& sim, std::uint64_t seed, double gamma,
                                 bool trace = false) {
  std::mt19937_64 rng(seed);
  Scenario sc = generate_circle_crossing(sim, rng);
  EpisodeRecord rec;
  rec.seed = seed;
  rec.dt = sim.dt;
  rec.states.push_back(sc.state);
  const RobotState& r = sc.state.robot;
  rec.optimal_steps = straight_line_steps(norm(r.goal - r.position), r.radius, r.v_pref, sim.dt);
  const UpperBound ub = upper_bound_return(sc.state, sim, gamma);
  rec.upper_bound_return = ub.episode_return;
  rec.upper_bound_rtg_sum = ub.rtg_sum;
  rec.upper_bound_steps = ub.steps;

  while (true) {
    Decision d;
    const Action a = policy.act(sc.state, trace ? &d : nullptr);
    StepOutcome out = step(sc, a, sim);
    rec.actions.push_back(a);
    rec.rewards.push_back(out.reward);
    rec.events.push_back(out.event);
    rec.d_min.push_back(out.d_min);
    rec.human_collisions += out.human_collisions;
    if (trace) {
      rec.has_root_values.push_back(d.root_values.empty() ? 0 : 1);
      rec.root_values.push_back(std::move(d.root_values));
    }
    rec.states.push_back(out.next.state);
    sc = std::move(out.next);
    if (is_terminal(rec.events.back())) break;
  }
  rec.outcome = rec.events.back();
  const std::vector<double> rtg = returns_to_go(rec.rewards, gamma, r.v_pref, sim.dt);
  rec.discounted_return = rtg.front();
  rec.return_to_go_sum = std::accumulate(rtg.begin(), rtg.end(), 0.0);
  return rec;
}

struct Metrics {
  std::size_t cases = 0;
  double success = 0.0;
  double collision = 0.0;
  double timeout = 0.0;
  double extra_time = std::numeric_limits<double>::quiet_NaN();  // s, successful episodes only
  double avg_return = 0.0;
  double upper_bound = 0.0;
  double max_diff = 0.0;
  double discomfort_frequency = 0.0;  // fraction of steps inside the discomfort zone
  std::size_t human_collisions = 0;
  ReturnConvention convention = ReturnConvention::per_step;
};

/// Ordered reduction over records; the result does not depend on the order
/// in which cases were simulated.
inline Metrics aggregate(std::span<const EpisodeRecord> records, ReturnConvention convention = ReturnConvention::per_step) {
  if (records.empty()) throw ContractError("cannot aggregate zero episodes");
  Metrics m;
  m.cases = records.size();
  m.convention = convention;
  std::size_t success = 0, collision = 0, timeout = 0, steps = 0, ub_steps = 0, discomfort = 0;
  double extra = 0.0, ret = 0.0, ub = 0.0;
  for (const EpisodeRecord& r : records) {
    switch (r.outcome) {
      case Event::reached_goal:
        ++success;
        extra += r.navigation_time() - static_cast<double>(r.optimal_steps) * r.dt;
        break;
      case Event::collision: ++collision; break;
      case Event::timeout: ++timeout; break;
      default: throw ContractError("episode record does not end in a terminal event");
    }
    steps += r.steps();
    ub_steps += r.upper_bound_steps;
    discomfort += r.discomfort_steps();
    m.human_collisions += r.human_collisions;
    if (convention == ReturnConvention::per_step) {
      ret += r.return_to_go_sum;
      ub += r.upper_bound_rtg_sum;
    } else {
      ret += r.discounted_return;
      ub += r.upper_bound_return;
    }
  }
  const double n = static_cast<double>(records.size());
  m.success = static_cast<double>(success) / n;
  m.collision = static_cast<double>(collision) / n;
  m.timeout = static_cast<double>(timeout) / n;
  if (success > 0) m.extra_time = extra / static_cast<double>(success);
  if (convention == ReturnConvention::per_step) {
    m.avg_return = ret / static_cast<double>(steps);
    m.upper_bound = ub_steps > 0 ? ub / static_cast<double>(ub_steps) : 0.0;
  } else {
    m.avg_return = ret / n;
    m.upper_bound = ub / n;
  }
  m.max_diff = m.upper_bound - m.avg_return;
  m.discomfort_frequency = static_cast<double>(discomfort) / static_cast<double>(steps);
  return m;
}

struct EvalConfig {
  std::size_t cases = 500;
  std::uint64_t base_seed = 0;
  double gamma = 0.9;
  std::size_t threads = 0;  // 0: hardware concurrency
  bool trace = false;
  ReturnConvention convention = ReturnConvention::per_step;

  void validate() const {
    if (cases < 1) throw ContractError("evaluation needs at least one case");
  }
};

struct EvaluationResult {
  Metrics metrics;
  std::vector<EpisodeRecord> records;  // by case index
};

/// Case i runs the scenario seeded by base_seed + i. Cases are distributed over
/// worker threads; records are reduced in case order.
inline EvaluationResult run_evaluation(const Policy& policy, const SimConfig& sim, const EvalConfig& cfg) {
  cfg.validate();
  sim.validate();
  EvaluationResult result;
  result.records.resize(cfg.cases);
  std::size_t threads = cfg.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : cfg.threads;
  threads = std::min(threads, cfg.cases);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cfg.cases) return;
      try {
        EpisodeRecord rec = run_episode(policy, sim, cfg.base_seed + i, cfg.gamma, cfg.trace);
        rec.case_index = i;
        result.records[i] = std::move(rec);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(cfg.cases);
        return;
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  result.metrics = aggregate(result.records, cfg.convention);
  return result;
}

// ---------------------------------------------------------------- CSV

inline const char* kMetricsHeader = "Method,Success,Collision,Extra Time,Avg. Return,Max Diff.";

inline std::string format_fixed(double v, int digits = 4) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v == 0.0 ? 0.0 : v);  // no "-0.0000"
  std::string s = buf;
  if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') s.erase(0, 1);
  return s;
}

inline std::string metrics_csv_row(const std::string& method, const Metrics& m) {
  std::string name = method;
  if (name.find_first_of(",\"") != std::string::npos) {
    std::string quoted = "\"";
    for (char c : name) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
    name = quoted + "\"";
  }
  return name + "," + format_fixed(m.success, 2) + "," + format_fixed(m.collision, 2) + "," +
         format_fixed(m.extra_time, 2) + "," + format_fixed(m.avg_return, 3) + "," + format_fixed(m.max_diff, 3);
}

inline void write_metrics_csv(std::ostream& os, const std::vector<std::pair<std::string, Metrics>>& rows) {
  os << kMetricsHeader << '\n';
  for (const auto& [name, m] : rows) os << metrics_csv_row(name, m) << '\n';
}

/// Mean and sample standard deviation of each Table metric across seeded runs.
struct MetricSpread {
  Metrics mean;
  Metrics stddev;
};

inline MetricSpread spread(std::span<const Metrics> runs) {
  if (runs.empty()) throw ContractError("no runs to summarize");
  MetricSpread out;
  auto stat = [&](auto field, double& mean, double& sd) {
    std::vector<double> xs;
    for (const Metrics& m : runs) {
      const double x = field(m);
      if (!std::isnan(x)) xs.push_back(x);
    }
    if (xs.empty()) {
      mean = sd = std::numeric_limits<double>::quiet_NaN();
      return;
    }
    mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    sd = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
  };
  stat([](const Metrics& m) { return m.success; }, out.mean.success, out.stddev.success);
  stat([](const Metrics& m) { return m.collision; }, out.mean.collision, out.stddev.collision);
  stat([](const Metrics& m) { return m.timeout; }, out.mean.timeout, out.stddev.timeout);
  stat([](const Metrics& m) { return m.extra_time; }, out.mean.extra_time, out.stddev.extra_time);
  stat([](const Metrics& m) { return m.avg_return; }, out.mean.avg_return, out.stddev.avg_return);
  stat([](const Metrics& m) { return m.upper_bound; }, out.mean.upper_bound, out.stddev.upper_bound);
  stat([](const Metrics& m) { return m.max_diff; }, out.mean.max_diff, out.stddev.max_diff);
  out.mean.cases = out.stddev.cases = runs.front().cases;
  return out;
}

// ---------------------------------------------------------------- JSON lines

namespace json_detail {

inline std::string num(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string vec(const Vec2& v) { return "[" + num(v.x) + "," + num(v.y) + "]"; }

inline std::string robot(const RobotState& r) {
  return "{\"position\":" + vec(r.position) + ",\"velocity\":" + vec(r.velocity) + ",\"radius\":" + num(r.radius) +
         ",\"goal\":" + vec(r.goal) + ",\"v_pref\":" + num(r.v_pref) + ",\"heading\":" + num(r.heading) + "}";
}

inline std::string humans(const std::vector<HumanState>& hs) {
  std::string s = "[";
  for (std::size_t i = 0; i < hs.size(); ++i) {
    if (i) s += ",";
    s += "{\"position\":" + vec(hs[i].position) + ",\"velocity\":" + vec(hs[i].velocity) + ",\"radius\":" +
         num(hs[i].radius) + "}";
  }
  return s + "]";
}

inline std::string array(std::span<const double> xs) {
  std::string s = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ",";
    s += num(xs[i]);
  }
  return s + "]";
}

}  // namespace json_detail

/// One line per step: time, agent states before the step, action, reward, event.
inline void write_episode_log(std::ostream& os, const EpisodeRecord& rec) {
  using namespace json_detail;
  for (std::size_t t = 0; t < rec.steps(); ++t) {
    os << "{\"time\":" << num(static_cast<double>(t) * rec.dt) << ",\"robot\":" << robot(rec.states[t].robot)
       << ",\"humans\":" << humans(rec.states[t].humans) << ",\"action\":{\"speed\":" << num(rec.actions[t].speed)
       << ",\"heading\":" << num(rec.actions[t].heading) << "},\"reward\":" << num(rec.rewards[t])
       << ",\"event\":\"" << event_name(rec.events[t]) << "\"}\n";
  }
}

/// Summary line per case.
inline std::string case_record_json(const EpisodeRecord& rec) {
  using namespace json_detail;
  const auto& final_robot = rec.states.back().robot;
  return "{\"case\":" + std::to_string(rec.case_index) + ",\"seed\":" + std::to_string(rec.seed) + ",\"outcome\":\"" +
         event_name(rec.outcome) + "\",\"steps\":" + std::to_string(rec.steps()) + ",\"time\":" +
         num(rec.navigation_time()) + ",\"return\":" + num(rec.discounted_return) + ",\"upper_bound\":" +
         num(rec.upper_bound_return) + ",\"discomfort_steps\":" + std::to_string(rec.discomfort_steps()) +
         ",\"human_collisions\":" + std::to_string(rec.human_collisions) + ",\"final_position\":" +
         vec(final_robot.position) + "}";
}

inline void write_case_records(std::ostream& os, std::span<const EpisodeRecord> records) {
  for (const auto& r : records) os << case_record_json(r) << '\n';
}

inline void write_search_node(std::ostream& os, const SearchNode& n) {
  using namespace json_detail;
  os << "{\"action\":" << n.action << ",\"reward\":" << num(n.reward) << ",\"terminal\":" << (n.terminal ? "true" : "false")
     << ",\"depth\":" << n.depth << ",\"state_value\":" << num(n.state_value) << ",\"value\":" << num(n.value)
     << ",\"children\":[";
  for (std::size_t i = 0; i < n.children.size(); ++i) {
    if (i) os << ",";
    write_search_node(os, n.children[i]);
  }
  os << "]}";
}

/// Root action values and the expanded tree of one decision.
inline void write_decision_trace(std::ostream& os, const Decision& d) {
  using namespace json_detail;
  os << "{\"action\":" << d.action << ",\"explored\":" << (d.explored ? "true" : "false")
     << ",\"root_values\":" << array(d.root_values) << ",\"prediction_calls\":" << d.stats.prediction_calls
     << ",\"value_evaluations\":" << d.stats.value_evaluations << ",\"children\":[";
  for (std::size_t i = 0; i < d.root_children.size(); ++i) {
    if (i) os << ",";
    write_search_node(os, d.root_children[i]);
  }
  os << "]}\n";
}

// ---------------------------------------------------------------- SVG

struct SvgOptions {
  double scale = 50.0;  // px per m
  double margin = 1.0;  // m
  std::optional<std::size_t> heatmap_step;  // step whose root values are drawn
  double heatmap_radius = 1.2;  // m, outer radius of the action wheel
};

namespace svg_detail {

inline std::string color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return palette[i % 10];
}

inline std::string heat(double t) {
  t = std::clamp(t, 0.0, 1.0);
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(255 * t), static_cast<int>(80 + 100 * (1 - t)),
                static_cast<int>(255 * (1 - t)));
  return buf;
}

}  // namespace svg_detail

/// Agent paths, start/goal markers, discomfort incidents, the collision point
/// and, when requested, an 80-cell wheel of root action values.
inline void export_trajectory_svg(std::ostream& os, const EpisodeRecord& rec, const ActionSpace& actions,
                                  const SvgOptions& opt = {}) {
  using json_detail::num;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  auto grow = [&](const Vec2& p) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  };
  for (const auto& s : rec.states) {
    grow(s.robot.position);
    grow(s.robot.goal);
    for (const auto& h : s.humans) grow(h.position);
  }
  xmin -= opt.margin;
  ymin -= opt.margin;
  xmax += opt.margin;
  ymax += opt.margin;
  const double w = (xmax - xmin) * opt.scale, h = (ymax - ymin) * opt.scale;
  // world y points up; svg y points down
  auto px = [&](const Vec2& p) { return num((p.x - xmin) * opt.scale) + "," + num((ymax - p.y) * opt.scale); };
  auto cx = [&](const Vec2& p) {
    return "cx=\"" + num((p.x - xmin) * opt.scale) + "\" cy=\"" + num((ymax - p.y) * opt.scale) + "\"";
  };

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w) << "\" height=\"" << num(h)
     << "\" viewBox=\"0 0 " << num(w) << " " << num(h) << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  const JointState& first = rec.states.front();
  os << "<circle class=\"goal\" " << cx(first.robot.goal) << " r=\"" << num(first.robot.radius * opt.scale)
     << "\" fill=\"none\" stroke=\"black\" stroke-dasharray=\"4 2\"/>\n";

  for (std::size_t i = 0; i < first.humans.size(); ++i) {
    os << "<polyline class=\"human-path\" fill=\"none\" stroke=\"" << svg_detail::color(i) << "\" points=\"";
    for (std::size_t t = 0; t < rec.states.size(); ++t) os << (t ? " " : "") << px(rec.states[t].humans[i].position);
    os << "\"/>\n";
  }
  os << "<polyline class=\"robot-path\" fill=\"none\" stroke=\"black\" stroke-width=\"2\" points=\"";
  for (std::size_t t = 0; t < rec.states.size(); ++t) os << (t ? " " : "") << px(rec.states[t].robot.position);
  os << "\"/>\n";

  for (std::size_t t = 0; t < rec.steps(); ++t) {
    if (rec.events[t] == Event::discomfort) {
      os << "<circle class=\"discomfort\" " << cx(rec.states[t + 1].robot.position) << " r=\"3\" fill=\"orange\"/>\n";
    }
  }
  if (rec.outcome == Event::collision) {
    const Vec2 p = rec.states.back().robot.position;
    os << "<circle class=\"collision\" " << cx(p) << " r=\"" << num(rec.states.back().robot.radius * opt.scale)
       << "\" fill=\"red\" fill-opacity=\"0.5\" data-x=\"" << num(p.x) << "\" data-y=\"" << num(p.y) << "\"/>\n";
  }

  if (opt.heatmap_step && *opt.heatmap_step < rec.root_values.size() && rec.has_root_values[*opt.heatmap_step]) {
    const std::size_t t = *opt.heatmap_step;
    const auto& values = rec.root_values[t];
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double v : values) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    const Vec2 centre = rec.states[t].robot.position;
    const double dth = 2.0 * M_PI / static_cast<double>(actions.heading_count());
    const double ring = opt.heatmap_radius / static_cast<double>(actions.speed_count() + 1);
    os << "<g class=\"heatmap\" data-step=\"" << t << "\">\n";
    for (std::size_t a = 0; a < actions.size(); ++a) {
      const double r0 = ring * static_cast<double>(actions.speed_index(a) + 1);
      const double r1 = r0 + ring;
      const double th = actions[a].heading;
      const double t0 = th - dth / 2, t1 = th + dth / 2;
      auto at = [&](double r, double ang) { return px(centre + Vec2{r * std::cos(ang), r * std::sin(ang)}); };
      const double v = values[a];
      const double shade = std::isfinite(v) && hi > lo ? (v - lo) / (hi - lo) : 0.0;
      os << "<path class=\"heat-cell\" data-action=\"" << a << "\" data-value=\"" << num(v) << "\" fill=\""
         << svg_detail::heat(shade) << "\" fill-opacity=\"0.7\" d=\"M " << at(r0, t0) << " L " << at(r1, t0) << " L "
         << at(r1, t1) << " L " << at(r0, t1) << " Z\"/>\n";
    }
    os << "</g>\n";
  }
  os << "</svg>\n";
}

}  // namespace relnav
