#pragma once

// Optimal Reciprocal Collision Avoidance for disc agents without static
// obstacles: truncated velocity obstacles become half-plane constraints that
// are solved by incremental 2D linear programming.

#include <relnav/vec2.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

namespace relnav {

struct OrcaParams {
  double neighbor_dist = 10.0;  // m
  double time_horizon = 5.0;    // s
  double safety_space = 0.01;   // m, added to every radius
  std::size_t max_neighbors = 10;
};

/// Kinematic view of an agent as seen by ORCA.
struct OrcaAgent {
  Vec2 position;
  Vec2 velocity;
  double radius = 0.0;
};

/// Directed line; the permitted half-plane lies to its left.
struct OrcaLine {
  Vec2 point;
  Vec2 direction;
};

namespace orca_detail {

inline constexpr double kEpsilon = 1e-5;

inline bool linear_program1(const std::vector<OrcaLine>& lines, std::size_t line_no, double radius,
                            const Vec2& opt_velocity, bool direction_opt, Vec2& result) {
  const OrcaLine& line = lines[line_no];
  const double dot_product = dot(line.point, line.direction);
  const double discriminant = dot_product * dot_product + radius * radius - abs_sq(line.point);
  // Speed circle fully invalidates this line.
  if (discriminant < 0.0) return false;

  const double sqrt_disc = std::sqrt(discriminant);
  double t_left = -dot_product - sqrt_disc;
  double t_right = -dot_product + sqrt_disc;

  for (std::size_t i = 0; i < line_no; ++i) {
    const double denominator = det(line.direction, lines[i].direction);
    const double numerator = det(lines[i].direction, line.point - lines[i].point);
    if (std::fabs(denominator) <= kEpsilon) {
      // Parallel lines.
      if (numerator < 0.0) return false;
      continue;
    }
    const double t = numerator / denominator;
    if (denominator >= 0.0) {
      t_right = std::min(t_right, t);
    } else {
      t_left = std::max(t_left, t);
    }
    if (t_left > t_right) return false;
  }

  if (direction_opt) {
    result = dot(opt_velocity, line.direction) > 0.0 ? line.point + t_right * line.direction
                                                     : line.point + t_left * line.direction;
  } else {
    const double t = dot(line.direction, opt_velocity - line.point);
    if (t < t_left) {
      result = line.point + t_left * line.direction;
    } else if (t > t_right) {
      result = line.point + t_right * line.direction;
    } else {
      result = line.point + t * line.direction;
    }
  }
  return true;
}

/// Returns the index of the first line that could not be satisfied, or
/// lines.size() on success.
inline std::size_t linear_program2(const std::vector<OrcaLine>& lines, double radius, const Vec2& opt_velocity,
                                   bool direction_opt, Vec2& result) {
  if (direction_opt) {
    result = opt_velocity * radius;
  } else if (abs_sq(opt_velocity) > radius * radius) {
    result = normalize(opt_velocity) * radius;
  } else {
    result = opt_velocity;
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (det(lines[i].direction, lines[i].point - result) > 0.0) {
      const Vec2 previous = result;
      if (!linear_program1(lines, i, radius, opt_velocity, direction_opt, result)) {
        result = previous;
        return i;
      }
    }
  }
  return lines.size();
}

/// Infeasible case: minimize the maximum penetration of the violated
/// half-planes by projecting onto the bisector lines.
inline void linear_program3(const std::vector<OrcaLine>& lines, std::size_t begin_line, double radius,
                            Vec2& result) {
  double distance = 0.0;
  for (std::size_t i = begin_line; i < lines.size(); ++i) {
    if (det(lines[i].direction, lines[i].point - result) <= distance) continue;
    std::vector<OrcaLine> proj_lines;
    for (std::size_t j = 0; j < i; ++j) {
      OrcaLine line;
      const double determinant = det(lines[i].direction, lines[j].direction);
      if (std::fabs(determinant) <= kEpsilon) {
        if (dot(lines[i].direction, lines[j].direction) > 0.0) continue;
        line.point = 0.5 * (lines[i].point + lines[j].point);
      } else {
        line.point = lines[i].point +
                     (det(lines[j].direction, lines[i].point - lines[j].point) / determinant) * lines[i].direction;
      }
      line.direction = normalize(lines[j].direction - lines[i].direction);
      proj_lines.push_back(line);
    }
    const Vec2 previous = result;
    if (linear_program2(proj_lines, radius, Vec2(-lines[i].direction.y, lines[i].direction.x), true, result) <
        proj_lines.size()) {
      // Only reachable through rounding; keep the previous point.
      result = previous;
    }
    distance = det(lines[i].direction, lines[i].point - result);
  }
}

}  // namespace orca_detail

/// Velocity toward the goal, capped so the agent does not overshoot in one step.
inline Vec2 preferred_velocity(const Vec2& position, const Vec2& goal, double v_pref, double time_step) {
  const Vec2 to_goal = goal - position;
  const double dist = norm(to_goal);
  if (dist <= 0.0) return {0.0, 0.0};
  return to_goal * (std::min(v_pref, dist / time_step) / dist);
}

/// ORCA half-plane induced on `self` by `other` (reciprocity factor 1/2).
inline OrcaLine orca_half_plane(const OrcaAgent& self, const OrcaAgent& other, double combined_radius,
                                double time_horizon, double time_step) {
  const Vec2 rel_pos = other.position - self.position;
  const Vec2 rel_vel = self.velocity - other.velocity;
  const double dist_sq = abs_sq(rel_pos);
  const double combined_sq = combined_radius * combined_radius;
  const double inv_horizon = 1.0 / time_horizon;

  OrcaLine line;
  Vec2 u;
  if (dist_sq > combined_sq) {
    const Vec2 w = rel_vel - inv_horizon * rel_pos;
    const double w_len_sq = abs_sq(w);
    const double dot_product = dot(w, rel_pos);
    if (dot_product < 0.0 && dot_product * dot_product > combined_sq * w_len_sq) {
      // Project on the cut-off circle.
      const double w_len = std::sqrt(w_len_sq);
      const Vec2 unit_w = w / w_len;
      line.direction = Vec2(unit_w.y, -unit_w.x);
      u = (combined_radius * inv_horizon - w_len) * unit_w;
    } else {
      // Project on a leg.
      const double leg = std::sqrt(dist_sq - combined_sq);
      if (det(rel_pos, w) > 0.0) {
        line.direction = Vec2(rel_pos.x * leg - rel_pos.y * combined_radius,
                              rel_pos.x * combined_radius + rel_pos.y * leg) / dist_sq;
      } else {
        line.direction = -Vec2(rel_pos.x * leg + rel_pos.y * combined_radius,
                               -rel_pos.x * combined_radius + rel_pos.y * leg) / dist_sq;
      }
      u = dot(rel_vel, line.direction) * line.direction - rel_vel;
    }
  } else {
    // Already overlapping: resolve within one time step.
    const double inv_step = 1.0 / time_step;
    const Vec2 w = rel_vel - inv_step * rel_pos;
    const double w_len = norm(w);
    const Vec2 unit_w = w_len > 0.0 ? w / w_len : Vec2(1.0, 0.0);
    line.direction = Vec2(unit_w.y, -unit_w.x);
    u = (combined_radius * inv_step - w_len) * unit_w;
  }
  line.point = self.velocity + 0.5 * u;
  return line;
}

/// New velocity for `self`: the point closest to `pref_velocity` inside the
/// speed disc and all neighbor half-planes, or the least-penetrating point
/// when they are jointly infeasible. `neighbors` must not contain `self`.
inline Vec2 compute_orca_velocity(const OrcaAgent& self, const Vec2& pref_velocity, double max_speed,
                                  std::span<const OrcaAgent> neighbors, const OrcaParams& params,
                                  double time_step) {
  std::vector<std::size_t> order;
  std::vector<double> dist_sq(neighbors.size());
  const double range_sq = params.neighbor_dist * params.neighbor_dist;
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    dist_sq[i] = abs_sq(neighbors[i].position - self.position);
    if (dist_sq[i] < range_sq) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist_sq[a] < dist_sq[b]; });
  if (order.size() > params.max_neighbors) order.resize(params.max_neighbors);

  std::vector<OrcaLine> lines;
  lines.reserve(order.size());
  const double self_radius = self.radius + params.safety_space;
  for (std::size_t i : order) {
    const double combined = self_radius + neighbors[i].radius + params.safety_space;
    lines.push_back(orca_half_plane(self, neighbors[i], combined, params.time_horizon, time_step));
  }

  Vec2 result;
  const std::size_t fail = orca_detail::linear_program2(lines, max_speed, pref_velocity, false, result);
  if (fail < lines.size()) orca_detail::linear_program3(lines, fail, max_speed, result);
  return result;
}

}  // namespace relnav
