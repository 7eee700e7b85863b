#pragma once

// d-step lookahead over predicted crowd states with top-w action clipping.
//
//   V^1(S) = f_V(S)
//   V^d(S) = V^1(S)/d + (d-1)/d * max_{a in top-w} [ R(S, a, S'_a) + g * V^(d-1)(S'_a) ]
//
// where S'_a combines the exact robot motion under a with the predicted human
// states, and top-w ranks actions by R + g' f_V(S'_a). The root decision
// takes argmax over every action of R + g' V^d(S'_a).

#include <relnav/model.hpp>
#include <relnav/sim.hpp>

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <vector>

namespace relnav {

/// Discount applied inside the recursive backup.
enum class InnerDiscount {
  time_normalized,  // gamma^(dt * v_pref), same as the root objective
  plain,            // gamma
};

struct PlanConfig {
  std::size_t depth = 2;
  std::size_t width = 2;
  double gamma = 0.9;
  bool clip_root = false;
  InnerDiscount inner_discount = InnerDiscount::time_normalized;

  void validate() const {
    if (depth < 1) throw ContractError("planning depth must be >= 1");
    if (width < 1) throw ContractError("planning width must be >= 1");
    if (!(gamma > 0.0 && gamma < 1.0)) throw ContractError("gamma must lie in (0, 1)");
  }
};

/// The two learned functions the search queries. `value` is batched;
/// `predict_humans` returns the next human states for one joint state and is
/// independent of the robot action.
struct PlanningModels {
  std::function<std::vector<double>(std::span<const JointState>)> value;
  std::function<std::vector<HumanState>(const JointState&)> predict_humans;
};

inline PlanningModels rgl_models(const ValueNetwork& value, const PredictionNetwork& prediction, double dt) {
  return {[&value](std::span<const JointState> s) { return value.values(s); },
          [&prediction, dt](const JointState& s) { return prediction.predict(s, dt); }};
}

inline PlanningModels linear_models(const ValueNetwork& value, double dt) {
  return {[&value](std::span<const JointState> s) { return value.values(s); },
          [dt](const JointState& s) { return linear_motion_humans(s, dt); }};
}

struct PlanStats {
  std::size_t prediction_calls = 0;  // below the root
  std::size_t root_prediction_calls = 0;
  std::size_t value_evaluations = 0;
};

/// Expanded search tree, kept only when a trace is requested.
struct SearchNode {
  std::size_t action = std::numeric_limits<std::size_t>::max();  // action leading here
  double reward = 0.0;
  bool terminal = false;
  std::size_t depth = 0;
  double state_value = 0.0;  // f_V
  double value = 0.0;        // V^depth
  std::vector<SearchNode> children;
};

struct Decision {
  std::size_t action = 0;
  bool explored = false;  // random exploratory pick
  std::vector<double> root_values;  // objective per action; -inf where not evaluated
  std::vector<SearchNode> root_children;
  PlanStats stats;
};

/// Hand-crafted reward on a predicted transition, using the simulator's table.
inline double estimate_reward(const JointState& state, const Action& action, const JointState& predicted_next,
                              const RewardConfig& cfg, double dt) {
  return judge_transition(state, action, predicted_next.humans, cfg, dt).reward;
}

class Planner {
 public:
  Planner(PlanConfig plan, ActionSpace actions, RewardConfig reward, double dt, PlanningModels models)
      : plan_(plan), actions_(std::move(actions)), reward_(reward), dt_(dt), models_(std::move(models)) {
    plan_.validate();
  }

  const PlanConfig& config() const { return plan_; }
  const ActionSpace& actions() const { return actions_; }

  double estimate(const JointState& s, const Action& a, const JointState& predicted) const {
    return estimate_reward(s, a, predicted, reward_, dt_);
  }

  /// V^depth(state).
  double d_step_value(const JointState& state, std::size_t depth, PlanStats* stats = nullptr,
                      SearchNode* trace = nullptr) const {
    if (depth < 1) throw ContractError("d_step_value requires depth >= 1");
    PlanStats local;
    PlanStats& st = stats ? *stats : local;
    const double v1 = models_.value(std::span<const JointState>(&state, 1)).front();
    ++st.value_evaluations;
    return backup(state, depth, v1, st, trace);
  }

  /// Full root evaluation without exploration.
  Decision decide(const JointState& state, bool keep_tree = false) const {
    Decision d;
    const double g_root = step_discount(plan_.gamma, state.robot.v_pref, dt_);
    Expansion ex = expand(state, d.stats);
    ++d.stats.root_prediction_calls;
    --d.stats.prediction_calls;

    std::vector<std::size_t> candidates(actions_.size());
    std::iota(candidates.begin(), candidates.end(), 0);
    if (plan_.clip_root) candidates = top_w(ex, g_root);

    d.root_values.assign(actions_.size(), -std::numeric_limits<double>::infinity());
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a : candidates) {
      SearchNode* node = nullptr;
      if (keep_tree) {
        d.root_children.push_back(SearchNode{a, ex.reward[a], ex.terminal[a] != 0, plan_.depth, ex.value[a], 0.0, {}});
        node = &d.root_children.back();
      }
      double next = 0.0;
      if (!ex.terminal[a]) next = backup(ex.next[a], plan_.depth, ex.value[a], d.stats, node);
      if (node) node->value = next;
      const double objective = ex.reward[a] + g_root * next;
      d.root_values[a] = objective;
      if (objective > best) {
        best = objective;
        d.action = a;
      }
    }
    return d;
  }

  /// epsilon-greedy: with probability epsilon a uniformly random action.
  template <class Rng>
  Decision select_action(const JointState& state, double epsilon, Rng& rng, bool keep_tree = false) const {
    if (epsilon > 0.0) {
      std::uniform_real_distribution<double> coin(0.0, 1.0);
      if (coin(rng) < epsilon) {
        std::uniform_int_distribution<std::size_t> pick(0, actions_.size() - 1);
        Decision d;
        d.action = pick(rng);
        d.explored = true;
        return d;
      }
    }
    return decide(state, keep_tree);
  }

 private:
  struct Expansion {
    std::vector<JointState> next;
    std::vector<double> reward;
    std::vector<std::uint8_t> terminal;
    std::vector<double> value;  // f_V of non-terminal successors, 0 otherwise
  };

  double inner_discount(const JointState& s) const {
    return plan_.inner_discount == InnerDiscount::plain ? plan_.gamma : step_discount(plan_.gamma, s.robot.v_pref, dt_);
  }

  /// Successors of `s` under every action, with R-hat and f_V.
  Expansion expand(const JointState& s, PlanStats& st) const {
    Expansion ex;
    const std::vector<HumanState> humans = models_.predict_humans(s);
    ++st.prediction_calls;
    const std::size_t n = actions_.size();
    ex.next.reserve(n);
    ex.reward.resize(n);
    ex.terminal.resize(n);
    ex.value.assign(n, 0.0);
    std::vector<JointState> live;
    std::vector<std::size_t> live_idx;
    for (std::size_t a = 0; a < n; ++a) {
      ex.next.push_back(compose_prediction(s, actions_[a], humans, dt_));
      const TransitionJudgement j = judge_transition(s, actions_[a], ex.next.back().humans, reward_, dt_);
      ex.reward[a] = j.reward;
      ex.terminal[a] = is_terminal(j.event) ? 1 : 0;
      if (!ex.terminal[a]) {
        live.push_back(ex.next.back());
        live_idx.push_back(a);
      }
    }
    if (!live.empty()) {
      const std::vector<double> v = models_.value(live);
      st.value_evaluations += live.size();
      for (std::size_t k = 0; k < live_idx.size(); ++k) ex.value[live_idx[k]] = v[k];
    }
    return ex;
  }

  /// Indices of the w best one-step lookahead scores; ties go to the lower index.
  std::vector<std::size_t> top_w(const Expansion& ex, double g) const {
    std::vector<std::size_t> idx(actions_.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (plan_.width >= idx.size()) return idx;
    std::vector<double> q(idx.size());
    for (std::size_t a = 0; a < idx.size(); ++a) q[a] = ex.reward[a] + g * ex.value[a];
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return q[x] > q[y]; });
    idx.resize(plan_.width);
    std::sort(idx.begin(), idx.end());
    return idx;
  }

  double backup(const JointState& s, std::size_t depth, double v1, PlanStats& st, SearchNode* trace) const {
    if (trace) {
      trace->depth = depth;
      trace->state_value = v1;
    }
    if (depth == 1) {
      if (trace) trace->value = v1;
      return v1;
    }
    const Expansion ex = expand(s, st);
    const double g_rank = step_discount(plan_.gamma, s.robot.v_pref, dt_);
    const double g = inner_discount(s);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a : top_w(ex, g_rank)) {
      SearchNode* child = nullptr;
      if (trace) {
        trace->children.push_back(SearchNode{a, ex.reward[a], ex.terminal[a] != 0, depth - 1, ex.value[a], 0.0, {}});
        child = &trace->children.back();
      }
      double next = 0.0;
      if (!ex.terminal[a]) next = backup(ex.next[a], depth - 1, ex.value[a], st, child);
      if (child) child->value = next;
      best = std::max(best, ex.reward[a] + g * next);
    }
    const double d = static_cast<double>(depth);
    const double v = v1 / d + (d - 1.0) / d * best;
    if (trace) trace->value = v;
    return v;
  }

  PlanConfig plan_;
  ActionSpace actions_;
  RewardConfig reward_;
  double dt_;
  PlanningModels models_;
};

}  // namespace relnav
