#pragma once

// Relational graph model: robot-centric featurization, per-type embedding
// MLPs, embedded-Gaussian relation inference, residual graph convolution,
// and the value / motion heads built on top of it.

#include <relnav/params.hpp>
#include <relnav/sim.hpp>
#include <relnav/tensor.hpp>

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace relnav {

inline constexpr std::size_t kRobotFeatures = 5;
inline constexpr std::size_t kHumanFeatures = 7;

/// world = rotate(local, angle) + origin
struct CanonicalFrame {
  Vec2 origin;
  double angle = 0.0;

  Vec2 to_local(const Vec2& p) const { return rotate(p - origin, -angle); }
  Vec2 to_local_dir(const Vec2& v) const { return rotate(v, -angle); }
  Vec2 to_world(const Vec2& p) const { return rotate(p, angle) + origin; }
  Vec2 to_world_dir(const Vec2& v) const { return rotate(v, angle); }
};

struct CanonicalState {
  CanonicalFrame frame;
  JointState local;  // every coordinate in the robot-centric frame
  std::array<double, kRobotFeatures> robot{};
  std::vector<std::array<double, kHumanFeatures>> humans;
};

/// Robot-centric frame: origin at the robot, +x toward its goal (or along its
/// heading when it sits exactly on the goal).
/// robot row:  (dist_to_goal, v_pref, vx, vy, r)
/// human rows: (px, py, vx, vy, r, dist_to_robot, r + r_robot)
inline CanonicalState canonicalize(const JointState& s) {
  CanonicalState c;
  const RobotState& r = s.robot;
  const Vec2 to_goal = r.goal - r.position;
  const double dg = norm(to_goal);
  c.frame.origin = r.position;
  c.frame.angle = dg > 0.0 ? std::atan2(to_goal.y, to_goal.x) : r.heading;

  c.local.robot = r;
  c.local.robot.position = {0.0, 0.0};
  c.local.robot.goal = {dg, 0.0};
  c.local.robot.velocity = c.frame.to_local_dir(r.velocity);
  c.local.robot.heading = wrap_angle(r.heading - c.frame.angle);
  c.robot = {dg, r.v_pref, c.local.robot.velocity.x, c.local.robot.velocity.y, r.radius};

  c.local.humans.reserve(s.humans.size());
  c.humans.reserve(s.humans.size());
  for (const HumanState& h : s.humans) {
    HumanState lh = h;
    lh.position = c.frame.to_local(h.position);
    lh.velocity = c.frame.to_local_dir(h.velocity);
    c.local.humans.push_back(lh);
    c.humans.push_back({lh.position.x, lh.position.y, lh.velocity.x, lh.velocity.y, h.radius,
                        norm(h.position - r.position), h.radius + r.radius});
  }
  return c;
}

struct ModelConfig {
  std::vector<std::size_t> robot_embed{64, 32};
  std::vector<std::size_t> human_embed{64, 32};
  std::size_t attention_dim = 32;
  std::size_t gcn_layers = 2;
  std::vector<std::size_t> value_hidden{150, 100, 100};
  std::vector<std::size_t> motion_hidden{64, 32};
  Activation activation = Activation::relu;
  bool static_attention = false;
  // the motion head predicts the change from the current velocity
  bool motion_residual = true;

  std::size_t feature_dim() const { return robot_embed.back(); }

  void validate() const {
    if (robot_embed.empty() || human_embed.empty()) throw ContractError("embedding MLPs need at least one layer");
    if (robot_embed.back() != human_embed.back()) {
      throw ContractError("robot and human embeddings must share the output width");
    }
    if (attention_dim != feature_dim()) {
      throw ContractError("attention_dim must equal the embedding width (the fused relation matrix is square)");
    }
    if (gcn_layers < 1) throw ContractError("gcn_layers must be >= 1");
  }

  std::string fingerprint() const {
    auto list = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "-" : "") + std::to_string(v[i]);
      return s;
    };
    std::ostringstream os;
    os << "rgl/robot=" << kRobotFeatures << ":" << list(robot_embed) << "/human=" << kHumanFeatures << ":"
       << list(human_embed) << "/att=" << attention_dim << "/gcn=" << gcn_layers << "/value=" << list(value_hidden)
       << "/motion=" << list(motion_hidden) << "/act=" << (activation == Activation::relu ? "relu" : "tanh")
       << "/static=" << (static_attention ? 1 : 0) << "/residual=" << (motion_residual ? 1 : 0);
    return os.str();
  }
};

/// Fully connected stack; hidden layers are activated, the last one only
/// when `activate_last` is set.
class Mlp {
 public:
  Mlp() = default;

  template <class Rng>
  static Mlp create(ParameterSet& params, const std::string& prefix, std::size_t in,
                    const std::vector<std::size_t>& sizes, bool activate_last, Rng& rng) {
    Mlp m;
    m.activate_last_ = activate_last;
    std::size_t fan_in = in;
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      const std::string p = prefix + "/" + std::to_string(l);
      m.weights_.push_back(params.add(p + "/weight", fan_scaled_uniform(fan_in, sizes[l], rng)));
      m.biases_.push_back(params.add(p + "/bias", Matrix(1, sizes[l])));
      fan_in = sizes[l];
    }
    return m;
  }

  Var forward(Tape& tape, const ParameterSet& params, Var x, Activation act) const {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      x = add_bias(matmul(x, tape.parameter(params[weights_[l]])), tape.parameter(params[biases_[l]]));
      if (l + 1 < weights_.size() || activate_last_) x = activate(x, act);
    }
    return x;
  }

  std::span<const std::size_t> weight_ids() const { return weights_; }
  std::span<const std::size_t> bias_ids() const { return biases_; }

 private:
  std::vector<std::size_t> weights_;
  std::vector<std::size_t> biases_;
  bool activate_last_ = false;
};

/// Nodes of one batched graph pass. States are stacked in blocks of N+1 rows
/// with the robot first.
struct GraphPass {
  std::size_t batch = 0;
  std::size_t block = 0;  // N + 1
  Var x;
  std::vector<Var> attention;
  std::vector<Var> layers;  // H^(1) ... H^(L)
  Var z;
};

/// Embedding + relation inference + GCN for one stack.
class GraphEncoder {
 public:
  GraphEncoder() = default;

  template <class Rng>
  GraphEncoder(ParameterSet& params, const std::string& prefix, const ModelConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    robot_embed_ = Mlp::create(params, prefix + "/robot_embed", kRobotFeatures, cfg.robot_embed, true, rng);
    human_embed_ = Mlp::create(params, prefix + "/human_embed", kHumanFeatures, cfg.human_embed, true, rng);
    const std::size_t d = cfg.feature_dim();
    for (std::size_t l = 0; l < cfg.gcn_layers; ++l) {
      attention_.push_back(params.add(prefix + "/gcn/" + std::to_string(l) + "/relation", fan_scaled_uniform(d, d, rng)));
      propagation_.push_back(params.add(prefix + "/gcn/" + std::to_string(l) + "/weight", fan_scaled_uniform(d, d, rng)));
    }
  }

  GraphPass forward(Tape& tape, const ParameterSet& params, std::span<const CanonicalState> states) const {
    if (states.empty()) throw ContractError("graph forward on an empty batch");
    const std::size_t n_humans = states.front().humans.size();
    GraphPass pass;
    pass.batch = states.size();
    pass.block = n_humans + 1;
    Matrix robot_in(states.size(), kRobotFeatures);
    Matrix human_in(states.size() * n_humans, kHumanFeatures);
    std::vector<std::size_t> robot_pos, human_pos;
    for (std::size_t b = 0; b < states.size(); ++b) {
      if (states[b].humans.size() != n_humans) throw ContractError("batched states must share the human count");
      std::copy(states[b].robot.begin(), states[b].robot.end(), robot_in.row(b).begin());
      robot_pos.push_back(b * pass.block);
      for (std::size_t i = 0; i < n_humans; ++i) {
        const auto& f = states[b].humans[i];
        std::copy(f.begin(), f.end(), human_in.row(b * n_humans + i).begin());
        human_pos.push_back(b * pass.block + 1 + i);
      }
    }
    const Var er = robot_embed_.forward(tape, params, tape.constant(std::move(robot_in)), cfg_.activation);
    const Var eh = human_embed_.forward(tape, params, tape.constant(std::move(human_in)), cfg_.activation);
    pass.x = merge_rows(er, robot_pos, eh, human_pos);

    Var h = pass.x;
    for (std::size_t l = 0; l < attention_.size(); ++l) {
      const Var src = cfg_.static_attention ? pass.x : h;
      const Var a = relation(tape, params, src, l, pass.batch);
      pass.attention.push_back(a);
      const Var ah = block_matmul(a, h, pass.batch);
      h = add(activate(matmul(ah, tape.parameter(params[propagation_[l]])), cfg_.activation), h);
      pass.layers.push_back(h);
    }
    pass.z = h;
    return pass;
  }

  /// row-softmax(H W_a H^T) within each block.
  Var relation(Tape& tape, const ParameterSet& params, Var h, std::size_t layer, std::size_t blocks) const {
    const Var hw = matmul(h, tape.parameter(params[attention_[layer]]));
    return softmax_rows(block_matmul_nt(hw, h, blocks));
  }

  const Mlp& robot_embed() const { return robot_embed_; }
  const Mlp& human_embed() const { return human_embed_; }
  std::span<const std::size_t> relation_ids() const { return attention_; }
  std::span<const std::size_t> propagation_ids() const { return propagation_; }

 private:
  ModelConfig cfg_;
  Mlp robot_embed_;
  Mlp human_embed_;
  std::vector<std::size_t> attention_;
  std::vector<std::size_t> propagation_;
};

inline std::vector<CanonicalState> canonicalize_all(std::span<const JointState> states) {
  std::vector<CanonicalState> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(canonicalize(s));
  return out;
}

/// Exported attention and features of a single forward pass.
struct GraphTrace {
  Matrix x;
  std::vector<Matrix> attention;
  std::vector<Matrix> layers;
  Matrix z;
};

inline GraphTrace to_trace(const GraphPass& pass) {
  GraphTrace t;
  t.x = pass.x.value();
  for (const Var& a : pass.attention) t.attention.push_back(a.value());
  for (const Var& h : pass.layers) t.layers.push_back(h.value());
  t.z = pass.z.value();
  return t;
}

/// f_V: value of the robot row of Z.
class ValueNetwork {
 public:
  ValueNetwork() = default;

  template <class Rng>
  ValueNetwork(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    encoder_ = GraphEncoder(params_, "value", cfg, rng);
    std::vector<std::size_t> sizes = cfg.value_hidden;
    sizes.push_back(1);
    head_ = Mlp::create(params_, "value/head", cfg.feature_dim(), sizes, false, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const GraphEncoder& encoder() const { return encoder_; }
  const Mlp& head() const { return head_; }

  /// Bx1 values.
  Var forward(Tape& tape, std::span<const CanonicalState> states, GraphPass* pass_out = nullptr) const {
    GraphPass pass = encoder_.forward(tape, params_, states);
    std::vector<std::size_t> robot_rows(pass.batch);
    for (std::size_t b = 0; b < pass.batch; ++b) robot_rows[b] = b * pass.block;
    const Var v = head_.forward(tape, params_, select_rows(pass.z, std::move(robot_rows)), cfg_.activation);
    if (pass_out) *pass_out = pass;
    return v;
  }

  std::vector<double> values(std::span<const JointState> states) const {
    if (states.empty()) return {};
    Tape tape;
    const auto canon = canonicalize_all(states);
    const Var v = forward(tape, canon);
    return {v.value().data().begin(), v.value().data().end()};
  }

  double value(const JointState& s) const { return values(std::span<const JointState>(&s, 1)).front(); }

  GraphTrace trace(const JointState& s) const {
    Tape tape;
    const auto canon = canonicalize_all(std::span<const JointState>(&s, 1));
    GraphPass pass;
    forward(tape, canon, &pass);
    return to_trace(pass);
  }

 private:
  ModelConfig cfg_;
  ParameterSet params_;
  GraphEncoder encoder_;
  Mlp head_;
};

/// f_P: per-human motion from the human rows of Z. The head emits a
/// robot-frame velocity; the displacement over dt is that velocity times dt.
class PredictionNetwork {
 public:
  PredictionNetwork() = default;

  template <class Rng>
  PredictionNetwork(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    encoder_ = GraphEncoder(params_, "prediction", cfg, rng);
    std::vector<std::size_t> sizes = cfg.motion_hidden;
    sizes.push_back(2);
    head_ = Mlp::create(params_, "prediction/motion", cfg.feature_dim(), sizes, false, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const GraphEncoder& encoder() const { return encoder_; }
  const Mlp& head() const { return head_; }

  /// (B*N)x2 robot-frame head outputs, human-major within each state: the
  /// next velocity, or its change from the current one when residual.
  Var forward(Tape& tape, std::span<const CanonicalState> states, GraphPass* pass_out = nullptr) const {
    GraphPass pass = encoder_.forward(tape, params_, states);
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < pass.batch; ++b) {
      for (std::size_t i = 1; i < pass.block; ++i) rows.push_back(b * pass.block + i);
    }
    const Var out = head_.forward(tape, params_, select_rows(pass.z, std::move(rows)), cfg_.activation);
    if (pass_out) *pass_out = pass;
    return out;
  }

  /// Next human states for every input state.
  std::vector<std::vector<HumanState>> predict(std::span<const JointState> states, double dt) const {
    std::vector<std::vector<HumanState>> out(states.size());
    if (states.empty()) return out;
    const std::size_t n = states.front().humans.size();
    if (n == 0) return out;
    Tape tape;
    const auto canon = canonicalize_all(states);
    const Matrix& v = forward(tape, canon).value();
    for (std::size_t b = 0; b < states.size(); ++b) {
      out[b].reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t row = b * n + i;
        const HumanState& h = states[b].humans[i];
        Vec2 local(v(row, 0), v(row, 1));
        if (cfg_.motion_residual) local += canon[b].frame.to_local_dir(h.velocity);
        const Vec2 disp = canon[b].frame.to_world_dir(local) * dt;
        out[b].push_back({h.position + disp, disp / dt, h.radius});
      }
    }
    return out;
  }

  std::vector<HumanState> predict(const JointState& s, double dt) const {
    return predict(std::span<const JointState>(&s, 1), dt).front();
  }

  /// Regression target for forward(): robot-frame velocity (p_next - p) / dt,
  /// minus the current robot-frame velocity when `residual`.
  static Matrix targets(std::span<const CanonicalState> canon, std::span<const JointState> states,
                        std::span<const JointState> next_states, double dt, bool residual = false) {
    std::size_t rows = 0;
    for (const auto& s : states) rows += s.humans.size();
    Matrix t(rows, 2);
    std::size_t r = 0;
    for (std::size_t b = 0; b < states.size(); ++b) {
      for (std::size_t i = 0; i < states[b].humans.size(); ++i, ++r) {
        const HumanState& h = states[b].humans[i];
        Vec2 v = canon[b].frame.to_local_dir((next_states[b].humans[i].position - h.position) / dt);
        if (residual) v -= canon[b].frame.to_local_dir(h.velocity);
        t(r, 0) = v.x;
        t(r, 1) = v.y;
      }
    }
    return t;
  }

 private:
  ModelConfig cfg_;
  ParameterSet params_;
  GraphEncoder encoder_;
  Mlp head_;
};

/// Constant-velocity baseline: p <- p + v dt.
inline std::vector<HumanState> linear_motion_humans(const JointState& s, double dt) {
  std::vector<HumanState> out = s.humans;
  for (auto& h : out) h.position += h.velocity * dt;
  return out;
}

inline JointState linear_motion_predict(const JointState& s, double dt) {
  JointState out = s;
  out.humans = linear_motion_humans(s, dt);
  return out;
}

/// Joint state after `action`: robot propagated exactly, humans as predicted.
inline JointState compose_prediction(const JointState& s, const Action& action, std::vector<HumanState> humans,
                                     double dt) {
  JointState out;
  out.robot = propagate_robot(s.robot, action, dt);
  out.humans = std::move(humans);
  return out;
}

/// Both stacks; no parameters are shared between them.
struct RglModel {
  ModelConfig config;
  ValueNetwork value;
  PredictionNetwork prediction;

  RglModel() = default;

  RglModel(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
    std::mt19937_64 rng(seed);
    value = ValueNetwork(cfg, rng);
    prediction = PredictionNetwork(cfg, rng);
  }

  Container to_container() const {
    Container c;
    c.fingerprint = config.fingerprint();
    c.put("", value.params());
    c.put("", prediction.params());
    return c;
  }

  void load(const Container& c) {
    if (c.fingerprint != config.fingerprint()) {
      throw FormatError("architecture mismatch: file has '" + c.fingerprint + "', expected '" + config.fingerprint() + "'");
    }
    c.get("", value.params());
    c.get("", prediction.params());
  }

  void save(const std::string& path) const { save_container(path, to_container()); }

  static RglModel load_file(const std::string& path, const ModelConfig& cfg) {
    RglModel m(cfg, 0);
    m.load(load_container(path, cfg.fingerprint()));
    return m;
  }
};

}  // namespace relnav
