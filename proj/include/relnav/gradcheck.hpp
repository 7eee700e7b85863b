#pragma once

// Central-difference check of every parameter of both stacks against the
// tape's reverse sweep.
//
// Rectifiers make the loss piecewise smooth. When a +-h perturbation flips
// the sign of some rectifier input the central difference is meaningless, so
// the entry is re-measured with a one-sided second-order difference on a side
// whose activation pattern matches the unperturbed one, shrinking the step if
// neither side does. Entries that still straddle a kink are reported as
// excluded.

#include <relnav/model.hpp>
#include <relnav/sim.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace relnav {

struct GradcheckConfig {
  std::size_t states = 10;
  std::size_t humans = 5;
  double step = 1e-4;  // shrunk by up to 100x around rectifier kinks
  double tolerance = 1e-4;  // on the relative error
  double floor = 1e-5;      // denominators below this count as this
  bool randomize_biases = true;
  std::uint64_t seed = 1;
  ModelConfig model;
};

struct GradcheckBlock {
  std::string name;
  std::size_t entries = 0;
  std::size_t one_sided = 0;
  std::size_t excluded = 0;
  double max_rel_error = 0.0;
  std::size_t worst_entry = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GradcheckBlock> blocks;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  std::size_t excluded = 0;
  double seconds = 0.0;
  bool passed = true;
};

/// Joint states with spread-out agents and arbitrary velocities.
template <class Rng>
std::vector<JointState> random_joint_states(std::size_t count, std::size_t humans, Rng& rng) {
  std::uniform_real_distribution<double> pos(-4.0, 4.0), vel(-1.0, 1.0), rad(0.2, 0.4), ang(-M_PI, M_PI);
  std::vector<JointState> out;
  for (std::size_t k = 0; k < count; ++k) {
    JointState s;
    s.robot.position = {pos(rng), pos(rng)};
    s.robot.goal = {pos(rng), pos(rng)};
    s.robot.velocity = {vel(rng), vel(rng)};
    s.robot.heading = ang(rng);
    for (std::size_t i = 0; i < humans; ++i) s.humans.push_back({{pos(rng), pos(rng)}, {vel(rng), vel(rng)}, rad(rng)});
    out.push_back(std::move(s));
  }
  return out;
}

namespace gradcheck_detail {

struct Probe {
  double loss;
  std::vector<std::uint8_t> pattern;
};

/// Checks every entry of `params` for the scalar loss built by `build`.
inline void check_stack(ParameterSet& params, const std::function<Var(Tape&)>& build, const GradcheckConfig& cfg,
                        GradcheckReport& report) {
  auto probe = [&] {
    Tape tape;
    const Var loss = build(tape);
    return Probe{loss.value()(0, 0), tape.activation_pattern()};
  };

  Tape tape;
  const Var loss = build(tape);
  tape.backward(loss);
  const std::vector<Matrix> analytic = params.gradients(tape);
  const std::vector<std::uint8_t> base_pattern = tape.activation_pattern();
  const double f0 = loss.value()(0, 0);
  const double h = cfg.step;

  for (std::size_t p = 0; p < params.size(); ++p) {
    GradcheckBlock block;
    block.name = params.name(p);
    Matrix& w = params[p];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double orig = w[k];
      auto at = [&](double delta) {
        w[k] = orig + delta;
        Probe r = probe();
        w[k] = orig;
        return r;
      };
      double numeric = 0.0;
      bool excluded = true;
      for (double step = h; step >= h * 1e-2 && excluded; step /= 10.0) {
        const Probe plus = at(step);
        const Probe minus = at(-step);
        if (plus.pattern == base_pattern && minus.pattern == base_pattern) {
          numeric = (plus.loss - minus.loss) / (2.0 * step);
          excluded = false;
          break;
        }
        // (-3 f(0) + 4 f(s h) - f(2 s h)) / (2 s h), on a side that keeps the pattern
        for (double side : {1.0, -1.0}) {
          const Probe& near = side > 0 ? plus : minus;
          if (near.pattern != base_pattern) continue;
          const Probe far = at(2.0 * side * step);
          if (far.pattern != base_pattern) continue;
          numeric = (-3.0 * f0 + 4.0 * near.loss - far.loss) / (2.0 * side * step);
          excluded = false;
          ++block.one_sided;
          break;
        }
      }
      ++block.entries;
      if (excluded) {
        ++block.excluded;
        continue;
      }
      const double a = analytic[p][k];
      const double err = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), cfg.floor});
      if (err > block.max_rel_error) {
        block.max_rel_error = err;
        block.worst_entry = k;
        block.worst_analytic = a;
        block.worst_numeric = numeric;
      }
    }
    block.passed = block.max_rel_error < cfg.tolerance;
    report.entries += block.entries;
    report.excluded += block.excluded;
    report.max_rel_error = std::max(report.max_rel_error, block.max_rel_error);
    report.passed = report.passed && block.passed;
    report.blocks.push_back(std::move(block));
  }
}

}  // namespace gradcheck_detail

/// Full value and prediction stacks on random states; the scalar loss is a
/// random linear functional of the outputs so every output entry is exercised.
inline GradcheckReport run_gradcheck(const GradcheckConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(cfg.seed);
  RglModel model(cfg.model, rng());
  if (cfg.randomize_biases) {
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    for (ParameterSet* ps : {&model.value.params(), &model.prediction.params()}) {
      for (std::size_t i = 0; i < ps->size(); ++i) {
        if ((*ps)[i].rows() == 1) {
          for (double& b : (*ps)[i].data()) b = u(rng);
        }
      }
    }
  }
  const std::vector<JointState> states = random_joint_states(cfg.states, cfg.humans, rng);
  const std::vector<CanonicalState> canon = canonicalize_all(states);
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix value_weights(cfg.states, 1), motion_weights(cfg.states * cfg.humans, 2);
  for (double& x : value_weights.data()) x = n01(rng);
  for (double& x : motion_weights.data()) x = n01(rng);

  GradcheckReport report;
  gradcheck_detail::check_stack(
      model.value.params(), [&](Tape& t) { return weighted_sum(model.value.forward(t, canon), value_weights); }, cfg,
      report);
  if (cfg.humans > 0) {
    gradcheck_detail::check_stack(
        model.prediction.params(),
        [&](Tape& t) { return weighted_sum(model.prediction.forward(t, canon), motion_weights); }, cfg, report);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace relnav
