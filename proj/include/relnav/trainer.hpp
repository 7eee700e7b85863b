#pragma once

// Imitation-learning initialization from ORCA demonstrations followed by
// value learning with bootstrapped d-step targets and supervised state
// prediction, both fed from an experience replay memory.

#include <relnav/model.hpp>
#include <relnav/params.hpp>
#include <relnav/planner.hpp>
#include <relnav/policies.hpp>
#include <relnav/sim.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace relnav {

/// splitmix64 over (seed, stream, index): independent RNG streams from one seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ stream) ^ index);
}

enum SeedStream : std::uint64_t {
  kTrainScenarios = 1,
  kExploration = 2,
  kBatchSampling = 3,
  kModelInit = 4,
  kDemoScenarios = 5,
};

struct Transition {
  JointState state;
  Action action;
  double reward = 0.0;
  JointState next_state;
  bool terminal = false;
  double return_to_go = std::numeric_limits<double>::quiet_NaN();  // demonstrations only
};

/// Bounded FIFO; index 0 is the oldest entry.
class ReplayMemory {
 public:
  explicit ReplayMemory(std::size_t capacity = 100000) : capacity_(capacity) {
    if (capacity == 0) throw ContractError("replay capacity must be positive");
  }

  void push(Transition t) {
    if (data_.size() == capacity_) data_.pop_front();
    data_.push_back(std::move(t));
  }

  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return data_.empty(); }
  const Transition& operator[](std::size_t i) const { return data_[i]; }
  void clear() { data_.clear(); }

  /// Distinct indices, uniformly at random.
  template <class Rng>
  std::vector<std::size_t> sample(std::size_t batch, Rng& rng) const {
    if (batch > data_.size()) throw ContractError("batch larger than replay memory");
    std::vector<std::size_t> idx(data_.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < batch; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(batch);
    return idx;
  }

 private:
  std::size_t capacity_;
  std::deque<Transition> data_;
};

// Fixed-width row encoding of transitions for the binary container.
namespace replay_detail {

inline void put_robot(std::vector<double>& o, const RobotState& r) {
  o.insert(o.end(), {r.position.x, r.position.y, r.velocity.x, r.velocity.y, r.radius, r.goal.x, r.goal.y, r.v_pref, r.heading});
}
inline RobotState get_robot(const double*& p) {
  RobotState r;
  r.position = {p[0], p[1]};
  r.velocity = {p[2], p[3]};
  r.radius = p[4];
  r.goal = {p[5], p[6]};
  r.v_pref = p[7];
  r.heading = p[8];
  p += 9;
  return r;
}
inline void put_state(std::vector<double>& o, const JointState& s) {
  put_robot(o, s.robot);
  for (const auto& h : s.humans) o.insert(o.end(), {h.position.x, h.position.y, h.velocity.x, h.velocity.y, h.radius});
}
inline JointState get_state(const double*& p, std::size_t n) {
  JointState s;
  s.robot = get_robot(p);
  for (std::size_t i = 0; i < n; ++i, p += 5) s.humans.push_back({{p[0], p[1]}, {p[2], p[3]}, p[4]});
  return s;
}
inline std::size_t width(std::size_t n) { return 2 * (9 + 5 * n) + 5; }

}  // namespace replay_detail

inline void store_replay(Container& c, const std::string& key, const ReplayMemory& mem) {
  const std::size_t n = mem.empty() ? 0 : mem[0].state.humans.size();
  const std::size_t w = replay_detail::width(n);
  std::vector<double> rows;
  rows.reserve(mem.size() * w);
  for (std::size_t i = 0; i < mem.size(); ++i) {
    const Transition& t = mem[i];
    if (t.state.humans.size() != n || t.next_state.humans.size() != n) {
      throw ContractError("replay memory mixes human counts");
    }
    replay_detail::put_state(rows, t.state);
    rows.insert(rows.end(), {t.action.speed, t.action.heading, t.reward});
    replay_detail::put_state(rows, t.next_state);
    rows.insert(rows.end(), {t.terminal ? 1.0 : 0.0, t.return_to_go});
  }
  c.matrices[key] = Matrix(mem.size(), w, std::move(rows));
  c.texts[key + "/humans"] = std::to_string(n);
  c.texts[key + "/capacity"] = std::to_string(mem.capacity());
}

inline ReplayMemory load_replay(const Container& c, const std::string& key) {
  const std::size_t n = std::stoul(c.text(key + "/humans"));
  ReplayMemory mem(std::stoul(c.text(key + "/capacity")));
  const Matrix& m = c.matrix(key);
  if (m.rows() > 0 && m.cols() != replay_detail::width(n)) throw FormatError("replay row width mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double* p = m.row(r).data();
    Transition t;
    t.state = replay_detail::get_state(p, n);
    t.action = {p[0], p[1]};
    t.reward = p[2];
    p += 3;
    t.next_state = replay_detail::get_state(p, n);
    t.terminal = p[0] != 0.0;
    t.return_to_go = p[1];
    mem.push(std::move(t));
  }
  return mem;
}

/// f_P regression loss: mean per-human Euclidean error, or mean squared error.
enum class PredictionLoss { norm, mse };

struct TrainConfig {
  std::size_t il_episodes = 2000;
  std::size_t il_epochs = 50;
  std::size_t rl_episodes = 10000;
  std::size_t batch_size = 100;
  std::size_t replay_capacity = 100000;
  std::size_t batches_per_step = 1;
  double epsilon_start = 0.5;
  double epsilon_end = 0.1;
  std::size_t epsilon_decay_episodes = 5000;
  double learning_rate = 0.001;
  double gamma = 0.9;
  PredictionLoss prediction_loss = PredictionLoss::norm;
  PlanConfig plan;  // planning used for action selection and value targets
  std::size_t checkpoint_every = 500;
  double divergence_threshold = 1e6;
  std::uint64_t seed = 0;
};

/// Linear decay from epsilon_start to epsilon_end over the decay window.
inline double epsilon_at(std::size_t episode, const TrainConfig& cfg = {}) {
  const double frac = cfg.epsilon_decay_episodes == 0
                          ? 1.0
                          : std::min(static_cast<double>(episode) / static_cast<double>(cfg.epsilon_decay_episodes), 1.0);
  return cfg.epsilon_start - (cfg.epsilon_start - cfg.epsilon_end) * frac;
}

/// Runs ORCA-driven episodes and stores every step with its discounted
/// return-to-go (the imitation value target).
inline ReplayMemory collect_demonstrations(const SimConfig& sim, std::size_t episodes, std::uint64_t seed, double gamma,
                                           std::size_t capacity = 100000) {
  ReplayMemory mem(capacity);
  const Policy orca = make_orca_policy(sim);
  for (std::size_t e = 0; e < episodes; ++e) {
    std::mt19937_64 rng(derive_seed(seed, kDemoScenarios, e));
    Scenario sc = generate_circle_crossing(sim, rng);
    std::vector<Transition> episode;
    std::vector<double> rewards;
    while (true) {
      const Action a = orca.act(sc.state, nullptr);
      StepOutcome out = step(sc, a, sim);
      episode.push_back({sc.state, a, out.reward, out.next.state, out.terminal()});
      rewards.push_back(out.reward);
      sc = std::move(out.next);
      if (episode.back().terminal) break;
    }
    const std::vector<double> g = returns_to_go(rewards, gamma, sim.robot_v_pref, sim.dt);
    for (std::size_t t = 0; t < episode.size(); ++t) {
      episode[t].return_to_go = g[t];
      mem.push(std::move(episode[t]));
    }
  }
  return mem;
}

/// Mean Euclidean next-position error per human over a set of transitions,
/// for the learned motion model and for constant-velocity extrapolation.
struct PredictionError {
  double learned = 0.0;
  double linear = 0.0;
  std::size_t samples = 0;
};

inline PredictionError prediction_error(const PredictionNetwork& f, const ReplayMemory& transitions, double dt) {
  PredictionError e;
  for (std::size_t k = 0; k < transitions.size(); ++k) {
    const Transition& t = transitions[k];
    if (t.state.humans.empty()) continue;
    const std::vector<HumanState> learned = f.predict(t.state, dt);
    const std::vector<HumanState> linear = linear_motion_humans(t.state, dt);
    for (std::size_t i = 0; i < learned.size(); ++i) {
      e.learned += norm(learned[i].position - t.next_state.humans[i].position);
      e.linear += norm(linear[i].position - t.next_state.humans[i].position);
      ++e.samples;
    }
  }
  if (e.samples > 0) {
    e.learned /= static_cast<double>(e.samples);
    e.linear /= static_cast<double>(e.samples);
  }
  return e;
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochLosses {
  double value = 0.0;
  double prediction = 0.0;
};

struct EpisodeLog {
  std::size_t episode = 0;
  Event outcome = Event::none;
  std::size_t steps = 0;
  double discounted_return = 0.0;
  double value_loss = 0.0;       // mean over the episode's updates
  double prediction_loss = 0.0;  // idem
  double epsilon = 0.0;
};

inline std::string to_json_line(const EpisodeLog& log) {
  std::ostringstream os;
  os.precision(17);
  os << "{\"episode\":" << log.episode << ",\"outcome\":\"" << event_name(log.outcome) << "\",\"steps\":" << log.steps
     << ",\"return\":" << log.discounted_return << ",\"value_loss\":" << log.value_loss
     << ",\"prediction_loss\":" << log.prediction_loss << ",\"epsilon\":" << log.epsilon << "}";
  return os.str();
}

/// Owns the model, the target value network, both optimizers, the replay
/// memory and every RNG stream. Single-threaded.
class Trainer {
 public:
  Trainer(SimConfig sim, TrainConfig train, const ModelConfig& model_cfg)
      : sim_(std::move(sim)),
        train_(train),
        model_(model_cfg, derive_seed(train.seed, kModelInit, 0)),
        target_(model_.value),
        value_opt_(AdamConfig{train.learning_rate}),
        prediction_opt_(AdamConfig{train.learning_rate}),
        memory_(train.replay_capacity),
        explore_rng_(derive_seed(train.seed, kExploration, 0)),
        batch_rng_(derive_seed(train.seed, kBatchSampling, 0)),
        actions_(sim_.robot_v_pref) {
    sim_.validate();
    train_.plan.gamma = train_.gamma;
    train_.plan.validate();
  }

  const RglModel& model() const { return model_; }

  /// Adds a transition to the replay memory without training on it.
  void push_experience(Transition t) { memory_.push(std::move(t)); }
  RglModel& model() { return model_; }
  const ValueNetwork& target() const { return target_; }
  const ReplayMemory& memory() const { return memory_; }
  std::size_t episodes_done() const { return episode_; }
  const SimConfig& sim() const { return sim_; }
  const TrainConfig& config() const { return train_; }
  void set_plan(const PlanConfig& plan) {
    train_.plan = plan;
    train_.plan.gamma = train_.gamma;
  }

  /// One Adam step on the value stack: MSE(f_V(S_i), y_i).
  double value_update(std::span<const JointState> states, std::span<const double> targets) {
    Tape tape;
    const auto canon = canonicalize_all(states);
    const Var v = model_.value.forward(tape, canon);
    const Var loss = mse_loss(v, Matrix(targets.size(), 1, std::vector<double>(targets.begin(), targets.end())));
    tape.backward(loss);
    auto grads = model_.value.params().gradients(tape);
    value_opt_.step(model_.value.params().values(), grads);
    return loss.value()(0, 0);
  }

  /// One Adam step on the prediction stack against the observed next human states.
  double prediction_update(std::span<const JointState> states, std::span<const JointState> next_states) {
    if (states.empty() || states.front().humans.empty()) return 0.0;
    Tape tape;
    const auto canon = canonicalize_all(states);
    const Var out = model_.prediction.forward(tape, canon);
    Matrix target = PredictionNetwork::targets(canon, states, next_states, sim_.dt, model_.config.motion_residual);
    const Var loss = train_.prediction_loss == PredictionLoss::norm ? row_norm_loss(out, std::move(target))
                                                                    : mse_loss(out, std::move(target));
    tape.backward(loss);
    auto grads = model_.prediction.params().gradients(tape);
    prediction_opt_.step(model_.prediction.params().values(), grads);
    return loss.value()(0, 0);
  }

  /// Regresses f_V on returns-to-go and f_P on observed human motion; the
  /// demonstrations then seed the replay memory. Returns per-epoch mean losses.
  std::vector<EpochLosses> imitation_learning(const ReplayMemory& demos, std::size_t epochs) {
    if (demos.empty()) throw ContractError("imitation learning needs a non-empty demonstration memory");
    std::vector<EpochLosses> history;
    std::vector<std::size_t> order(demos.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t e = 0; e < epochs; ++e) {
      std::shuffle(order.begin(), order.end(), batch_rng_);
      EpochLosses acc;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < order.size(); start += train_.batch_size) {
        const std::size_t end = std::min(order.size(), start + train_.batch_size);
        std::vector<JointState> s, s_next;
        std::vector<double> y;
        for (std::size_t k = start; k < end; ++k) {
          const Transition& t = demos[order[k]];
          if (std::isnan(t.return_to_go)) throw ContractError("demonstration transition lacks a return-to-go");
          s.push_back(t.state);
          s_next.push_back(t.next_state);
          y.push_back(t.return_to_go);
        }
        acc.value += value_update(s, y);
        acc.prediction += prediction_update(s, s_next);
        ++batches;
      }
      acc.value /= static_cast<double>(batches);
      acc.prediction /= static_cast<double>(batches);
      history.push_back(acc);
    }
    for (std::size_t i = 0; i < demos.size(); ++i) memory_.push(demos[i]);
    target_ = model_.value;
    return history;
  }

  /// y = r for terminal transitions, else r + g' * V-hat^d(S_next) with the
  /// target value network and the current prediction network.
  std::vector<double> value_targets(std::span<const std::size_t> batch) const {
    std::vector<double> y(batch.size());
    std::vector<JointState> live;
    std::vector<std::size_t> live_idx;
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const Transition& t = memory_[batch[k]];
      y[k] = t.reward;
      if (!t.terminal) {
        live.push_back(t.next_state);
        live_idx.push_back(k);
      }
    }
    if (live.empty()) return y;
    std::vector<double> v;
    if (train_.plan.depth == 1) {
      v = target_.values(live);
    } else {
      const Planner planner(train_.plan, actions_, sim_.reward, sim_.dt, rgl_models(target_, model_.prediction, sim_.dt));
      for (const auto& s : live) v.push_back(planner.d_step_value(s, train_.plan.depth));
    }
    for (std::size_t k = 0; k < live_idx.size(); ++k) {
      const Transition& t = memory_[batch[live_idx[k]]];
      y[live_idx[k]] += step_discount(train_.gamma, t.state.robot.v_pref, sim_.dt) * v[k];
    }
    return y;
  }

  /// One episode: epsilon-greedy planning with the learned predictor, one
  /// minibatch update per step, target sync at the end.
  EpisodeLog run_rl_episode() {
    EpisodeLog log;
    log.episode = episode_;
    log.epsilon = epsilon_at(episode_, train_);
    std::mt19937_64 scenario_rng(derive_seed(train_.seed, kTrainScenarios, episode_));
    Scenario sc = generate_circle_crossing(sim_, scenario_rng);
    const Planner planner(train_.plan, actions_, sim_.reward, sim_.dt, rgl_models(model_.value, model_.prediction, sim_.dt));
    std::vector<double> rewards;
    std::size_t updates = 0;
    while (true) {
      const Decision d = planner.select_action(sc.state, log.epsilon, explore_rng_);
      const Action a = actions_[d.action];
      StepOutcome out = step(sc, a, sim_);
      memory_.push({sc.state, a, out.reward, out.next.state, out.terminal()});
      rewards.push_back(out.reward);
      for (std::size_t b = 0; b < train_.batches_per_step && memory_.size() >= train_.batch_size; ++b) {
        const auto [lv, lp] = replay_update();
        log.value_loss += lv;
        log.prediction_loss += lp;
        ++updates;
      }
      const bool done = out.terminal();
      log.outcome = out.event;
      sc = std::move(out.next);
      if (done) break;
    }
    if (updates > 0) {
      log.value_loss /= static_cast<double>(updates);
      log.prediction_loss /= static_cast<double>(updates);
    }
    log.steps = rewards.size();
    log.discounted_return = discounted_return(rewards, train_.gamma, sim_.robot_v_pref, sim_.dt);
    target_ = model_.value;
    ++episode_;
    return log;
  }

  std::pair<double, double> replay_update() {
    const std::vector<std::size_t> batch = memory_.sample(train_.batch_size, batch_rng_);
    const std::vector<double> y = value_targets(batch);
    std::vector<JointState> s, s_next;
    for (std::size_t i : batch) {
      s.push_back(memory_[i].state);
      s_next.push_back(memory_[i].next_state);
    }
    const double lv = value_update(s, y);
    if (!(lv <= train_.divergence_threshold)) {
      throw TrainingDiverged("value loss " + std::to_string(lv) + " exceeded the divergence threshold");
    }
    const double lp = prediction_update(s, s_next);
    return {lv, lp};
  }

  /// Runs `episodes` RL episodes; checkpoints every `checkpoint_every`
  /// episodes when a path is given.
  void rl_train(std::size_t episodes, const std::function<void(const EpisodeLog&)>& on_episode = {},
                const std::string& checkpoint_path = {}) {
    for (std::size_t e = 0; e < episodes; ++e) {
      const EpisodeLog log = run_rl_episode();
      if (on_episode) on_episode(log);
      if (!checkpoint_path.empty() && train_.checkpoint_every > 0 && episode_ % train_.checkpoint_every == 0) {
        save_container(checkpoint_path, checkpoint());
      }
    }
  }

  /// Weights, target network, optimizer moments, RNG states, episode counter
  /// and replay memory.
  Container checkpoint() const {
    Container c = model_.to_container();
    c.put("target/", target_.params());
    put_adam(c, "adam/value/", value_opt_, model_.value.params());
    put_adam(c, "adam/prediction/", prediction_opt_, model_.prediction.params());
    std::ostringstream er, br;
    er << explore_rng_;
    br << batch_rng_;
    c.texts["rng/exploration"] = er.str();
    c.texts["rng/batch"] = br.str();
    c.texts["episode"] = std::to_string(episode_);
    store_replay(c, "replay", memory_);
    return c;
  }

  void restore(const Container& c) {
    model_.load(c);
    c.get("target/", target_.params());
    get_adam(c, "adam/value/", value_opt_, model_.value.params());
    get_adam(c, "adam/prediction/", prediction_opt_, model_.prediction.params());
    std::istringstream er(c.text("rng/exploration")), br(c.text("rng/batch"));
    er >> explore_rng_;
    br >> batch_rng_;
    episode_ = std::stoul(c.text("episode"));
    memory_ = load_replay(c, "replay");
  }

 private:
  static void put_adam(Container& c, const std::string& prefix, const Adam& opt, const ParameterSet& params) {
    c.matrices[prefix + "step"] = Matrix(1, 1, static_cast<double>(opt.steps()));
    for (std::size_t i = 0; i < opt.first_moments().size(); ++i) {
      c.matrices[prefix + "m/" + params.name(i)] = opt.first_moments()[i];
      c.matrices[prefix + "v/" + params.name(i)] = opt.second_moments()[i];
    }
  }

  static void get_adam(const Container& c, const std::string& prefix, Adam& opt, const ParameterSet& params) {
    const auto step = static_cast<std::int64_t>(c.matrix(prefix + "step")(0, 0));
    std::vector<Matrix> m, v;
    if (step > 0) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        m.push_back(c.matrix(prefix + "m/" + params.name(i)));
        v.push_back(c.matrix(prefix + "v/" + params.name(i)));
      }
    }
    opt.restore(step, std::move(m), std::move(v));
  }

  SimConfig sim_;
  TrainConfig train_;
  RglModel model_;
  ValueNetwork target_;
  Adam value_opt_;
  Adam prediction_opt_;
  ReplayMemory memory_;
  std::mt19937_64 explore_rng_;
  std::mt19937_64 batch_rng_;
  ActionSpace actions_;
  std::size_t episode_ = 0;
};

}  // namespace relnav
