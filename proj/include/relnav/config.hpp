#pragma once

// Strict JSON configuration: sections sim / model / plan / train / eval.
// Every key is optional; unknown keys and type mismatches are errors that
// name the offending field (and line, for syntax errors).

#include <relnav/harness.hpp>
#include <relnav/model.hpp>
#include <relnav/planner.hpp>
#include <relnav/sim.hpp>
#include <relnav/trainer.hpp>

#include <json.hpp>

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace relnav {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Config {
  SimConfig sim;
  ModelConfig model;
  PlanConfig plan;  // evaluation-time planning
  TrainConfig train;
  EvalConfig eval;
};

namespace config_detail {

using json = nlohmann::json;
static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed fields are read as size_t");

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  Section& field(const std::string& key, T& out) {
    known_[key] = true;
    auto it = j_.find(key);
    if (it == j_.end()) return *this;
    read(*it, path_ + "." + key, out);
    return *this;
  }

  template <class F>
  Section& object(const std::string& key, F&& fn) {
    known_[key] = true;
    auto it = j_.find(key);
    if (it == j_.end()) return *this;
    Section sub(*it, path_ + "." + key);
    fn(sub);
    sub.finish();
    return *this;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!known_.count(it.key())) throw ConfigError(path_ + "." + it.key() + ": unknown key");
    }
  }

 private:
  static void read(const json& v, const std::string& path, double& out) {
    if (!v.is_number()) throw ConfigError(path + ": expected a number");
    out = v.get<double>();
  }
  static void read(const json& v, const std::string& path, bool& out) {
    if (!v.is_boolean()) throw ConfigError(path + ": expected true or false");
    out = v.get<bool>();
  }
  static void read(const json& v, const std::string& path, std::size_t& out) {
    if (!v.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
    out = v.get<std::size_t>();
  }
  static void read(const json& v, const std::string& path, std::vector<std::size_t>& out) {
    if (!v.is_array() || v.empty()) throw ConfigError(path + ": expected a non-empty array of positive integers");
    out.clear();
    for (const auto& x : v) {
      if (!x.is_number_unsigned() || x.get<std::size_t>() == 0) {
        throw ConfigError(path + ": expected a non-empty array of positive integers");
      }
      out.push_back(x.get<std::size_t>());
    }
  }
  static void read(const json& v, const std::string& path, Activation& out) {
    const std::string s = v.is_string() ? v.get<std::string>() : "";
    if (s == "relu") out = Activation::relu;
    else if (s == "tanh") out = Activation::tanh;
    else throw ConfigError(path + ": expected \"relu\" or \"tanh\"");
  }
  static void read(const json& v, const std::string& path, InnerDiscount& out) {
    const std::string s = v.is_string() ? v.get<std::string>() : "";
    if (s == "time_normalized") out = InnerDiscount::time_normalized;
    else if (s == "plain") out = InnerDiscount::plain;
    else throw ConfigError(path + ": expected \"time_normalized\" or \"plain\"");
  }
  static void read(const json& v, const std::string& path, PredictionLoss& out) {
    const std::string s = v.is_string() ? v.get<std::string>() : "";
    if (s == "norm") out = PredictionLoss::norm;
    else if (s == "mse") out = PredictionLoss::mse;
    else throw ConfigError(path + ": expected \"norm\" or \"mse\"");
  }
  static void read(const json& v, const std::string& path, ReturnConvention& out) {
    const std::string s = v.is_string() ? v.get<std::string>() : "";
    if (s == "per_step") out = ReturnConvention::per_step;
    else if (s == "per_episode") out = ReturnConvention::per_episode;
    else throw ConfigError(path + ": expected \"per_step\" or \"per_episode\"");
  }

  const json& j_;
  std::string path_;
  std::map<std::string, bool> known_;
};

/// Mirror of Section that emits the current values instead of reading them.
class Writer {
 public:
  template <class T>
  Writer& field(const std::string& key, const T& v) {
    j_[key] = write(v);
    return *this;
  }

  template <class F>
  Writer& object(const std::string& key, F&& fn) {
    Writer sub;
    fn(sub);
    j_[key] = std::move(sub.j_);
    return *this;
  }

  const json& doc() const { return j_; }

 private:
  template <class T>
  static json write(const T& v) { return json(v); }
  static json write(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }
  static json write(InnerDiscount d) { return d == InnerDiscount::time_normalized ? "time_normalized" : "plain"; }
  static json write(PredictionLoss l) { return l == PredictionLoss::norm ? "norm" : "mse"; }
  static json write(ReturnConvention r) { return r == ReturnConvention::per_step ? "per_step" : "per_episode"; }

  json j_ = json::object();
};

template <class V, class P>
void plan_fields(V& s, P& p) {
  s.field("depth", p.depth).field("width", p.width).field("gamma", p.gamma).field("clip_root", p.clip_root);
  s.field("inner_discount", p.inner_discount);
}

inline void check(const std::string& section, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ContractError& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

/// The single list of configuration keys, shared by reading and writing.
/// `C` is Config or const Config.
template <class V, class C>
void visit_config(V& root, C& c) {
  root.object("sim", [&](auto& s) {
    auto& m = c.sim;
    s.field("n_humans", m.n_humans).field("circle_radius", m.circle_radius).field("dt", m.dt);
    s.field("time_limit", m.time_limit).field("robot_visible", m.robot_visible).field("robot_radius", m.robot_radius);
    s.field("robot_v_pref", m.robot_v_pref).field("seed", m.seed).field("max_resample", m.max_resample);
    s.object("humans", [&](auto& h) {
      auto& d = m.humans;
      h.field("v_pref_mean", d.v_pref_mean).field("v_pref_std", d.v_pref_std).field("v_pref_min", d.v_pref_min);
      h.field("v_pref_max", d.v_pref_max).field("radius_mean", d.radius_mean).field("radius_std", d.radius_std);
      h.field("radius_min", d.radius_min).field("radius_max", d.radius_max);
      h.field("perturbation_std", d.perturbation_std);
    });
    s.object("orca", [&](auto& o) {
      o.field("neighbor_dist", m.orca.neighbor_dist).field("time_horizon", m.orca.time_horizon);
      o.field("safety_space", m.orca.safety_space).field("max_neighbors", m.orca.max_neighbors);
    });
    s.object("reward", [&](auto& r) {
      r.field("success_reward", m.reward.success_reward).field("collision_penalty", m.reward.collision_penalty);
      r.field("discomfort_dist", m.reward.discomfort_dist).field("discomfort_factor", m.reward.discomfort_factor);
    });
  });
  root.object("model", [&](auto& s) {
    auto& m = c.model;
    s.field("robot_embed", m.robot_embed).field("human_embed", m.human_embed).field("attention_dim", m.attention_dim);
    s.field("gcn_layers", m.gcn_layers).field("value_hidden", m.value_hidden).field("motion_hidden", m.motion_hidden);
    s.field("activation", m.activation).field("static_attention", m.static_attention);
    s.field("motion_residual", m.motion_residual);
  });
  root.object("plan", [&](auto& s) { config_detail::plan_fields(s, c.plan); });
  root.object("train", [&](auto& s) {
    auto& t = c.train;
    s.field("il_episodes", t.il_episodes).field("il_epochs", t.il_epochs).field("rl_episodes", t.rl_episodes);
    s.field("batch_size", t.batch_size).field("replay_capacity", t.replay_capacity);
    s.field("batches_per_step", t.batches_per_step).field("epsilon_start", t.epsilon_start);
    s.field("epsilon_end", t.epsilon_end).field("epsilon_decay_episodes", t.epsilon_decay_episodes);
    s.field("learning_rate", t.learning_rate).field("gamma", t.gamma).field("checkpoint_every", t.checkpoint_every);
    s.field("prediction_loss", t.prediction_loss);
    s.field("divergence_threshold", t.divergence_threshold).field("seed", t.seed);
    s.object("plan", [&](auto& p) { config_detail::plan_fields(p, t.plan); });
  });
  root.object("eval", [&](auto& s) {
    auto& e = c.eval;
    s.field("cases", e.cases).field("base_seed", e.base_seed).field("gamma", e.gamma).field("threads", e.threads);
    s.field("return_convention", e.convention);
  });
}

}  // namespace config_detail

/// Parses a configuration document, starting from the defaults.
inline Config parse_config(const std::string& text) {
  using config_detail::json;
  using config_detail::Section;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("line " + std::to_string(line) + ", column " + std::to_string(col) + ": syntax error");
  }

  Config c;
  Section root(doc, "config");
  config_detail::visit_config(root, c);
  root.finish();

  config_detail::check("sim", [&] { c.sim.validate(); });
  config_detail::check("model", [&] { c.model.validate(); });
  config_detail::check("plan", [&] { c.plan.validate(); });
  config_detail::check("train.plan", [&] { c.train.plan.validate(); });
  config_detail::check("eval", [&] { c.eval.validate(); });
  if (c.train.batch_size == 0) throw ConfigError("train.batch_size: must be positive");
  if (c.train.replay_capacity == 0) throw ConfigError("train.replay_capacity: must be positive");
  if (!(c.train.gamma > 0.0 && c.train.gamma < 1.0)) throw ConfigError("train.gamma: must lie in (0, 1)");
  if (!(c.eval.gamma > 0.0 && c.eval.gamma < 1.0)) throw ConfigError("eval.gamma: must lie in (0, 1)");
  if (c.train.epsilon_end < 0.0 || c.train.epsilon_start > 1.0 || c.train.epsilon_end > c.train.epsilon_start) {
    throw ConfigError("train.epsilon_start/epsilon_end: need 0 <= end <= start <= 1");
  }
  return c;
}

/// Pretty-printed JSON with every key; parse_config(config_to_json(c)) == c.
inline std::string config_to_json(const Config& c) {
  config_detail::Writer w;
  config_detail::visit_config(w, c);
  return w.doc().dump(2) + "\n";
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace relnav
