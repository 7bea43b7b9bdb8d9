//! Optimal reciprocal collision avoidance (ORCA): velocity-obstacle half-planes
//! and the small linear programs that pick a velocity from them. Humans use
//! it among themselves; the ORCA robot baseline uses it against everyone in
//! view.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::scenario::{AgentState, PublicState};

type Vec2 = Vector2<f64>;

const LP_EPSILON: f64 = 1e-9;
/// Preference rotation applied to break exactly symmetric head-on encounters.
pub const HEAD_ON_TIE_BREAK: f64 = 1e-3;
const HEAD_ON_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrcaParams {
    pub time_horizon: f64,
    pub neighbor_dist: f64,
    pub max_neighbors: usize,
    pub safety_margin: f64,
}

impl Default for OrcaParams {
    fn default() -> Self {
        Self {
            time_horizon: 5.0,
            neighbor_dist: 10.0,
            max_neighbors: 10,
            safety_margin: 0.01,
        }
    }
}

/// Admissible velocities `v` satisfy `(v - point) . normal >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub point: Vec2,
    /// Boundary direction; the admissible side lies to its left.
    pub direction: Vec2,
}

impl HalfPlane {
    pub fn normal(&self) -> Vec2 {
        Vec2::new(-self.direction.y, self.direction.x)
    }

    pub fn contains(&self, v: Vec2) -> bool {
        det(self.direction, self.point - v) <= 0.0
    }
}

/// The agent computing its velocity.
#[derive(Debug, Clone, Copy)]
pub struct OrcaAgent {
    pub state: PublicState,
    pub v_pref: f64,
    pub goal: [f64; 2],
}

impl From<&AgentState> for OrcaAgent {
    fn from(a: &AgentState) -> Self {
        Self {
            state: a.public,
            v_pref: a.private.v_pref,
            goal: [a.private.gx, a.private.gy],
        }
    }
}

fn det(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn pos(s: &PublicState) -> Vec2 {
    Vec2::new(s.px, s.py)
}

fn vel(s: &PublicState) -> Vec2 {
    Vec2::new(s.vx, s.vy)
}

/// Builds one reciprocal half-plane per relevant neighbor.
///
/// Neighbors are taken nearest first, up to `max_neighbors` within
/// `neighbor_dist`. A neighbor that cannot be reached within the time horizon
/// at any admissible velocity (`v_cap` for self, its current speed for the
/// neighbor) imposes no constraint and is skipped.
pub fn orca_halfplanes(
    agent: &OrcaAgent,
    neighbors: &[PublicState],
    params: &OrcaParams,
    v_cap: f64,
    dt: f64,
) -> Vec<HalfPlane> {
    let me = &agent.state;
    let mut near: Vec<(f64, usize)> = neighbors
        .iter()
        .enumerate()
        .map(|(i, n)| (me.center_distance(n), i))
        .filter(|(d, _)| *d <= params.neighbor_dist)
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    near.truncate(params.max_neighbors);

    let inv_tau = 1.0 / params.time_horizon;
    let mut planes = Vec::with_capacity(near.len());
    for (dist, idx) in near {
        let other = &neighbors[idx];
        let combined_radius = me.rho + other.rho + params.safety_margin;
        if dist - combined_radius > params.time_horizon * (v_cap + other.speed()) {
            continue;
        }
        let rel_pos = pos(other) - pos(me);
        let rel_vel = vel(me) - vel(other);
        let dist_sq = rel_pos.norm_squared();
        let r_sq = combined_radius * combined_radius;

        let (direction, u);
        if dist_sq > r_sq {
            let w = rel_vel - inv_tau * rel_pos;
            let w_len_sq = w.norm_squared();
            let dot1 = w.dot(&rel_pos);
            if dot1 < 0.0 && dot1 * dot1 > r_sq * w_len_sq {
                // Closest boundary point lies on the cut-off circle.
                let w_len = w_len_sq.sqrt();
                let unit_w = w / w_len;
                direction = Vec2::new(unit_w.y, -unit_w.x);
                u = (combined_radius * inv_tau - w_len) * unit_w;
            } else {
                // Project on a leg of the cone.
                let leg = (dist_sq - r_sq).sqrt();
                direction = if det(rel_pos, w) > 0.0 {
                    Vec2::new(
                        rel_pos.x * leg - rel_pos.y * combined_radius,
                        rel_pos.x * combined_radius + rel_pos.y * leg,
                    ) / dist_sq
                } else {
                    -Vec2::new(
                        rel_pos.x * leg + rel_pos.y * combined_radius,
                        -rel_pos.x * combined_radius + rel_pos.y * leg,
                    ) / dist_sq
                };
                u = rel_vel.dot(&direction) * direction - rel_vel;
            }
        } else {
            // Already overlapping: resolve within one step.
            let inv_dt = 1.0 / dt;
            let w = rel_vel - inv_dt * rel_pos;
            let w_len = w.norm();
            let unit_w = if w_len > 0.0 {
                w / w_len
            } else {
                -rel_pos.normalize()
            };
            direction = Vec2::new(unit_w.y, -unit_w.x);
            u = (combined_radius * inv_dt - w_len) * unit_w;
        }
        planes.push(HalfPlane {
            point: vel(me) + 0.5 * u,
            direction,
        });
    }
    planes
}

/// Picks the admissible velocity closest to `pref` inside the disc of radius
/// `v_cap`. When the half-planes leave no admissible velocity the one with the
/// least maximum penetration is returned.
pub fn solve_velocity(pref: [f64; 2], planes: &[HalfPlane], v_cap: f64) -> [f64; 2] {
    let pref = Vec2::new(pref[0], pref[1]);
    let mut result = Vec2::zeros();
    let fail = linear_program2(planes, v_cap, pref, false, &mut result);
    if fail < planes.len() {
        linear_program3(planes, fail, v_cap, &mut result);
    }
    let speed = result.norm();
    if speed > v_cap {
        result *= v_cap / speed;
    }
    [result.x, result.y]
}

fn linear_program1(
    lines: &[HalfPlane],
    line_no: usize,
    radius: f64,
    opt: Vec2,
    direction_opt: bool,
    result: &mut Vec2,
) -> bool {
    let line = &lines[line_no];
    let dot = line.point.dot(&line.direction);
    let discriminant = dot * dot + radius * radius - line.point.norm_squared();
    if discriminant < 0.0 {
        return false;
    }
    let sqrt_disc = discriminant.sqrt();
    let mut t_left = -dot - sqrt_disc;
    let mut t_right = -dot + sqrt_disc;

    for other in &lines[..line_no] {
        let denominator = det(line.direction, other.direction);
        let numerator = det(other.direction, line.point - other.point);
        if denominator.abs() <= LP_EPSILON {
            if numerator < 0.0 {
                return false;
            }
            continue;
        }
        let t = numerator / denominator;
        if denominator >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return false;
        }
    }

    *result = if direction_opt {
        if opt.dot(&line.direction) > 0.0 {
            line.point + t_right * line.direction
        } else {
            line.point + t_left * line.direction
        }
    } else {
        let t = line.direction.dot(&(opt - line.point));
        line.point + t.clamp(t_left, t_right) * line.direction
    };
    true
}

fn linear_program2(
    lines: &[HalfPlane],
    radius: f64,
    opt: Vec2,
    direction_opt: bool,
    result: &mut Vec2,
) -> usize {
    *result = if direction_opt {
        opt * radius
    } else if opt.norm_squared() > radius * radius {
        opt.normalize() * radius
    } else {
        opt
    };
    for i in 0..lines.len() {
        if det(lines[i].direction, lines[i].point - *result) > 0.0 {
            let previous = *result;
            if !linear_program1(lines, i, radius, opt, direction_opt, result) {
                *result = previous;
                return i;
            }
        }
    }
    lines.len()
}

fn linear_program3(lines: &[HalfPlane], begin: usize, radius: f64, result: &mut Vec2) {
    let mut distance = 0.0;
    for i in begin..lines.len() {
        if det(lines[i].direction, lines[i].point - *result) <= distance {
            continue;
        }
        let mut projected = Vec::with_capacity(i);
        for j in 0..i {
            let determinant = det(lines[i].direction, lines[j].direction);
            let point = if determinant.abs() <= LP_EPSILON {
                if lines[i].direction.dot(&lines[j].direction) > 0.0 {
                    continue;
                }
                0.5 * (lines[i].point + lines[j].point)
            } else {
                lines[i].point
                    + (det(lines[j].direction, lines[i].point - lines[j].point) / determinant)
                        * lines[i].direction
            };
            let diff = lines[j].direction - lines[i].direction;
            let norm = diff.norm();
            if norm <= LP_EPSILON {
                continue;
            }
            projected.push(HalfPlane {
                point,
                direction: diff / norm,
            });
        }
        let previous = *result;
        let opt = Vec2::new(-lines[i].direction.y, lines[i].direction.x);
        if linear_program2(&projected, radius, opt, true, result) < projected.len() {
            *result = previous;
        }
        distance = det(lines[i].direction, lines[i].point - *result);
    }
}

/// Preferred velocity toward the goal at `v_pref`, rotated by the fixed
/// tie-break when a neighbor sits exactly on the line of travel.
pub fn preferred_velocity(agent: &OrcaAgent, neighbors: &[PublicState]) -> [f64; 2] {
    let to_goal = Vec2::new(
        agent.goal[0] - agent.state.px,
        agent.goal[1] - agent.state.py,
    );
    let dist = to_goal.norm();
    if dist == 0.0 {
        return [0.0, 0.0];
    }
    let heading = to_goal / dist;
    let head_on = neighbors.iter().any(|n| {
        let rel = pos(n) - pos(&agent.state);
        let d = rel.norm();
        d > 0.0 && rel.dot(&heading) > 0.0 && det(heading, rel / d).abs() < HEAD_ON_TOLERANCE
    });
    let (s, c) = if head_on {
        HEAD_ON_TIE_BREAK.sin_cos()
    } else {
        (0.0, 1.0)
    };
    let dir = Vec2::new(c * heading.x - s * heading.y, s * heading.x + c * heading.y);
    [agent.v_pref * dir.x, agent.v_pref * dir.y]
}

/// Full ORCA velocity for `agent` given the neighbors it accounts for.
pub fn orca_velocity(
    agent: &OrcaAgent,
    neighbors: &[PublicState],
    params: &OrcaParams,
    v_cap: f64,
    dt: f64,
) -> [f64; 2] {
    let pref = preferred_velocity(agent, neighbors);
    let planes = orca_halfplanes(agent, neighbors, params, v_cap, dt);
    solve_velocity(pref, &planes, v_cap)
}

/// Target velocity for a pedestrian. Pedestrians never account for robots,
/// so `visible_humans` must only hold other humans. A pedestrian within its
/// own radius of the goal stays put.
pub fn human_policy(
    agent: &AgentState,
    visible_humans: &[PublicState],
    params: &OrcaParams,
    dt: f64,
) -> [f64; 2] {
    debug_assert!(!agent.is_robot());
    if agent.goal_distance() < agent.public.rho {
        return [0.0, 0.0];
    }
    let me = OrcaAgent::from(agent);
    orca_velocity(&me, visible_humans, params, agent.private.v_pref, dt)
}
