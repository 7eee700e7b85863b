#include <relnav/gradcheck.hpp>
#include <relnav/model.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

using namespace relnav;

namespace {

std::vector<JointState> sample_states(std::size_t n, std::size_t humans, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_joint_states(n, humans, rng);
}

}  // namespace

TEST(Canonicalize, RobotFrameFeatures) {
  JointState s;
  s.robot.position = {1, 1};
  s.robot.goal = {1, 4};  // straight up: local +x is world +y
  s.robot.velocity = {0.5, 0.0};
  s.robot.v_pref = 1.2;
  s.robot.radius = 0.3;
  s.humans.push_back({{1, 3}, {0, -1}, 0.25});
  const CanonicalState c = canonicalize(s);
  EXPECT_NEAR(c.robot[0], 3.0, 1e-15);
  EXPECT_EQ(c.robot[1], 1.2);
  EXPECT_NEAR(c.robot[2], 0.0, 1e-15);
  EXPECT_NEAR(c.robot[3], -0.5, 1e-15);
  EXPECT_EQ(c.robot[4], 0.3);
  const auto& h = c.humans[0];
  EXPECT_NEAR(h[0], 2.0, 1e-15);
  EXPECT_NEAR(h[1], 0.0, 1e-15);
  EXPECT_NEAR(h[2], -1.0, 1e-15);
  EXPECT_NEAR(h[3], 0.0, 1e-15);
  EXPECT_EQ(h[4], 0.25);
  EXPECT_NEAR(h[5], 2.0, 1e-15);
  EXPECT_NEAR(h[6], 0.55, 1e-15);
  const Vec2 back = c.frame.to_world(c.frame.to_local({-2, 7}));
  EXPECT_NEAR(back.x, -2, 1e-14);
  EXPECT_NEAR(back.y, 7, 1e-14);
}

TEST(Model, ParameterNamespacesAreDisjoint) {
  const RglModel m(ModelConfig{}, 1);
  for (std::size_t i = 0; i < m.value.params().size(); ++i) {
    EXPECT_EQ(m.value.params().name(i).rfind("value/", 0), 0u);
  }
  for (std::size_t i = 0; i < m.prediction.params().size(); ++i) {
    EXPECT_EQ(m.prediction.params().name(i).rfind("prediction/", 0), 0u);
  }
  EXPECT_GT(m.value.params().scalar_count(), 30000u);
}

TEST(Model, InitialBiasesAreZeroAndWeightsBounded) {
  const RglModel m(ModelConfig{}, 2);
  const ParameterSet& p = m.value.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Matrix& w = p[i];
    if (w.rows() == 1) {
      for (double b : w.data()) EXPECT_EQ(b, 0.0) << p.name(i);
    } else {
      const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
      for (double x : w.data()) EXPECT_LE(std::fabs(x), bound) << p.name(i);
    }
  }
}

TEST(Model, ConfigValidation) {
  ModelConfig c;
  c.attention_dim = 16;
  EXPECT_THROW(c.validate(), ContractError);
  ModelConfig d;
  d.gcn_layers = 0;
  EXPECT_THROW(d.validate(), ContractError);
  ModelConfig e;
  e.human_embed = {64, 16};
  EXPECT_THROW(e.validate(), ContractError);
}

TEST(Attention, RowsSumToOneAndMatchPairwiseForm) {
  const RglModel m(ModelConfig{}, 3);
  const ParameterSet& p = m.value.params();
  for (const JointState& s : sample_states(5, 5, 31)) {
    const GraphTrace t = m.value.trace(s);
    ASSERT_EQ(t.attention.size(), 2u);
    for (std::size_t l = 0; l < 2; ++l) {
      const Matrix& a = t.attention[l];
      const Matrix& h = l == 0 ? t.x : t.layers[0];
      const Matrix& wa = p[*p.find("value/gcn/" + std::to_string(l) + "/relation")];
      ASSERT_EQ(a.rows(), 6u);
      for (std::size_t i = 0; i < 6; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 6; ++j) total += a(i, j);
        EXPECT_NEAR(total, 1.0, 1e-12);
        // f(x_i, x_j) = exp(x_i^T W_a x_j), normalized over j
        std::vector<double> logits(6);
        for (std::size_t j = 0; j < 6; ++j) {
          double v = 0.0;
          for (std::size_t r = 0; r < h.cols(); ++r) {
            for (std::size_t c = 0; c < h.cols(); ++c) v += h(i, r) * wa(r, c) * h(j, c);
          }
          logits[j] = v;
        }
        double z = 0.0;
        for (double v : logits) z += std::exp(v);
        for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(a(i, j), std::exp(logits[j]) / z, 1e-10);
      }
    }
  }
}

TEST(Gcn, ZeroPropagationWeightsGiveIdentity) {
  RglModel m(ModelConfig{}, 4);
  for (std::size_t id : m.value.encoder().propagation_ids()) m.value.params()[id] = Matrix(32, 32);
  for (const JointState& s : sample_states(3, 5, 41)) {
    const GraphTrace t = m.value.trace(s);
    EXPECT_EQ(t.z, t.x);
  }
}

TEST(Gcn, LayerIsResidualPropagation) {
  // H1 = relu(A0 H0 W0) + H0, checked against a hand-rolled product
  const RglModel m(ModelConfig{}, 5);
  const JointState s = sample_states(1, 4, 51).front();
  const GraphTrace t = m.value.trace(s);
  const Matrix& w = m.value.params()[m.value.encoder().propagation_ids()[0]];
  const Matrix ah = multiply(t.attention[0], t.x);
  const Matrix ahw = multiply(ah, w);
  for (std::size_t i = 0; i < ahw.rows(); ++i) {
    for (std::size_t c = 0; c < ahw.cols(); ++c) {
      EXPECT_NEAR(t.layers[0](i, c), std::max(0.0, ahw(i, c)) + t.x(i, c), 1e-12);
    }
  }
}

TEST(Value, PermutationInvariant) {
  const RglModel m(ModelConfig{}, 6);
  std::mt19937_64 rng(61);
  for (JointState s : sample_states(20, 5, 62)) {
    const double v = m.value.value(s);
    std::shuffle(s.humans.begin(), s.humans.end(), rng);
    EXPECT_NEAR(m.value.value(s), v, 1e-9);
  }
}

TEST(Value, InvariantToWorldFrame) {
  const RglModel m(ModelConfig{}, 7);
  for (const JointState& s : sample_states(20, 5, 71)) {
    const double th = 0.7;
    const Vec2 shift{3.0, -2.0};
    JointState t = s;
    auto move = [&](const Vec2& p) { return rotate(p, th) + shift; };
    t.robot.position = move(s.robot.position);
    t.robot.goal = move(s.robot.goal);
    t.robot.velocity = rotate(s.robot.velocity, th);
    for (std::size_t i = 0; i < s.humans.size(); ++i) {
      t.humans[i].position = move(s.humans[i].position);
      t.humans[i].velocity = rotate(s.humans[i].velocity, th);
    }
    EXPECT_NEAR(m.value.value(t), m.value.value(s), 1e-9);
  }
}

TEST(Value, BatchedEqualsSingle) {
  const RglModel m(ModelConfig{}, 8);
  const auto states = sample_states(7, 5, 81);
  const auto batch = m.value.values(states);
  for (std::size_t i = 0; i < states.size(); ++i) EXPECT_NEAR(batch[i], m.value.value(states[i]), 1e-12);
}

TEST(Value, EmptyCrowd) {
  const RglModel m(ModelConfig{}, 9);
  JointState s = sample_states(1, 0, 91).front();
  EXPECT_TRUE(std::isfinite(m.value.value(s)));
}

TEST(Prediction, OutputsAreDisplacementsFromCurrentPositions) {
  const RglModel m(ModelConfig{}, 10);
  const JointState s = sample_states(1, 5, 101).front();
  const auto next = m.prediction.predict(s, 0.25);
  ASSERT_EQ(next.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    const Vec2 d = next[i].position - s.humans[i].position;
    EXPECT_NEAR(next[i].velocity.x, d.x / 0.25, 1e-12);
    EXPECT_NEAR(next[i].velocity.y, d.y / 0.25, 1e-12);
    EXPECT_EQ(next[i].radius, s.humans[i].radius);
  }
}

TEST(Prediction, TargetsInvertPredict) {
  // a target of exactly (p_next - p)/dt in the robot frame maps back to p_next
  const auto states = sample_states(3, 4, 111);
  std::vector<JointState> next = states;
  for (auto& s : next) {
    for (auto& h : s.humans) h.position += Vec2{0.1, -0.05};
  }
  const auto canon = canonicalize_all(states);
  const Matrix t = PredictionNetwork::targets(canon, states, next, 0.25);
  ASSERT_EQ(t.rows(), 12u);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < 4; ++i) {
      const Vec2 v{t(b * 4 + i, 0), t(b * 4 + i, 1)};
      const Vec2 p = states[b].humans[i].position + canon[b].frame.to_world_dir(v) * 0.25;
      EXPECT_NEAR(p.x, next[b].humans[i].position.x, 1e-12);
      EXPECT_NEAR(p.y, next[b].humans[i].position.y, 1e-12);
    }
  }
}

TEST(Prediction, LinearBaseline) {
  JointState s;
  s.humans.push_back({{1, 2}, {0.4, -0.8}, 0.3});
  const auto next = linear_motion_humans(s, 0.25);
  EXPECT_DOUBLE_EQ(next[0].position.x, 1.1);
  EXPECT_DOUBLE_EQ(next[0].position.y, 1.8);
  const JointState c = compose_prediction(s, {1.0, 0.0}, next, 0.25);
  EXPECT_DOUBLE_EQ(c.robot.position.x, 0.25);
}

TEST(Persistence, RoundTripAndArchitectureCheck) {
  const RglModel m(ModelConfig{}, 12);
  std::stringstream ss;
  write_container(ss, m.to_container());
  RglModel r(ModelConfig{}, 99);
  r.load(read_container(ss));
  EXPECT_EQ(r.value.params(), m.value.params());
  EXPECT_EQ(r.prediction.params(), m.prediction.params());

  ModelConfig other;
  other.value_hidden = {100, 100};
  RglModel wrong(other, 1);
  EXPECT_THROW(wrong.load(m.to_container()), FormatError);
}

TEST(Gradcheck, SmallModelPasses) {
  GradcheckConfig cfg;
  cfg.states = 3;
  cfg.humans = 3;
  cfg.model.robot_embed = {8, 6};
  cfg.model.human_embed = {8, 6};
  cfg.model.attention_dim = 6;
  cfg.model.value_hidden = {10, 8};
  cfg.model.motion_hidden = {8};
  const GradcheckReport r = run_gradcheck(cfg);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_LT(r.excluded, r.entries / 100 + 1);
}

TEST(Gradcheck, DetectsWrongGradient) {
  // a deliberately broken backward rule must be caught by the same machinery
  Matrix w{{0.3, -0.2}};
  ParameterSet ps;
  ps.add("w", w);
  GradcheckReport report;
  GradcheckConfig cfg;
  gradcheck_detail::check_stack(
      ps,
      [&](Tape& t) {
        const Var x = t.parameter(ps[0]);
        const std::size_t ix = x.id();
        const Var y = t.record("bad_square", Matrix{{x.value()[0] * x.value()[0], x.value()[1]}},
                               [ix](Tape& tape, std::size_t self) {
                                 tape.grad_buffer(ix)[0] += tape.grad(self)[0];  // should be 2x
                                 tape.grad_buffer(ix)[1] += tape.grad(self)[1];
                               });
        return sum(y);
      },
      cfg, report);
  EXPECT_FALSE(report.passed);
}
