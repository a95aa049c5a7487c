//! Optimal reciprocal collision avoidance baseline.
//!
//! Each neighbor contributes one half-plane of admissible velocities built from the
//! truncated velocity-obstacle cone; a small incremental linear program then picks the
//! admissible velocity closest to the preferred one, or, when no velocity is admissible,
//! the one whose worst constraint violation is smallest.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::control::target_drive_command;
use crate::error::Result;
use crate::geom::Vec2;
use crate::sim::{Action, WorldState};

const LP_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrcaParams {
    #[serde(rename = "Max speed in ORCA", alias = "max_speed")]
    pub max_speed: f64,
    #[serde(rename = "Max neighbors in ORCA", alias = "max_neighbors")]
    pub max_neighbors: usize,
    #[serde(rename = "Neighbor distance in ORCA", alias = "neighbor_dist")]
    pub neighbor_dist: f64,
    #[serde(rename = "Protect radius in ORCA", alias = "protect_radius")]
    pub protect_radius: f64,
    #[serde(rename = "Radius in ORCA", alias = "body_radius")]
    pub body_radius: f64,
    #[serde(rename = "Time horizon in ORCA", alias = "time_horizon")]
    pub time_horizon: f64,
    /// Magnitude of the seed-derived lateral nudge that breaks perfectly symmetric encounters.
    pub symmetry_bias: f64,
}

impl Default for OrcaParams {
    fn default() -> Self {
        OrcaParams {
            max_speed: 1.0,
            max_neighbors: 10,
            neighbor_dist: 2.0,
            protect_radius: 0.4,
            body_radius: 0.1,
            time_horizon: 0.1,
            symmetry_bias: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrcaAgentView {
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
}

/// Admissible side: `(v - point) · normal >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane {
    pub point: Vec2,
    pub normal: Vec2,
}

impl HalfPlane {
    /// Boundary direction with the admissible side on its left.
    fn direction(&self) -> Vec2 {
        Vec2::new(self.normal.y, -self.normal.x)
    }

    /// Signed distance by which `v` lies outside the half-plane (negative inside).
    pub fn violation(&self, v: Vec2) -> f64 {
        (self.point - v).dot(self.normal)
    }

    pub fn contains(&self, v: Vec2, tol: f64) -> bool {
        self.violation(v) <= tol
    }
}

/// Boundary line in point/direction form, admissible side to the left of `direction`.
#[derive(Debug, Clone, Copy)]
struct Line {
    point: Vec2,
    direction: Vec2,
}

impl From<&HalfPlane> for Line {
    fn from(h: &HalfPlane) -> Self {
        Line { point: h.point, direction: h.direction() }
    }
}

/// Goal-seeking velocity: full speed far away, tapering so the goal is not overshot.
pub fn preferred_velocity(view: &OrcaAgentView, goal: Vec2, params: &OrcaParams, dt: f64) -> Vec2 {
    let offset = goal - view.position;
    let dist = offset.length();
    if dist == 0.0 {
        return Vec2::ZERO;
    }
    offset / dist * params.max_speed.min(dist / dt)
}

/// One half-plane per neighbor. `time_step` is used for the escape constraint when
/// agents already overlap their combined radius.
pub fn build_constraints(
    me: &OrcaAgentView,
    neighbors: &[OrcaAgentView],
    params: &OrcaParams,
    time_step: f64,
) -> Vec<HalfPlane> {
    let inv_horizon = 1.0 / params.time_horizon;
    neighbors
        .iter()
        .map(|other| {
            let rel_pos = other.position - me.position;
            let rel_vel = me.velocity - other.velocity;
            let dist_sq = rel_pos.length_squared();
            let combined = params.protect_radius + other.radius;
            let combined_sq = combined * combined;

            let (direction, u) = if dist_sq > combined_sq {
                // w points from the cut-off circle center to the relative velocity
                let w = rel_vel - rel_pos * inv_horizon;
                let w_len_sq = w.length_squared();
                let dot1 = w.dot(rel_pos);
                if dot1 < 0.0 && dot1 * dot1 > combined_sq * w_len_sq {
                    // nearest boundary point is on the cut-off circle
                    let w_len = w_len_sq.sqrt();
                    let unit_w = w / w_len;
                    (Vec2::new(unit_w.y, -unit_w.x), unit_w * (combined * inv_horizon - w_len))
                } else {
                    // nearest boundary point is on one of the cone legs
                    let leg = (dist_sq - combined_sq).sqrt();
                    let direction = if rel_pos.det(w) > 0.0 {
                        Vec2::new(rel_pos.x * leg - rel_pos.y * combined, rel_pos.x * combined + rel_pos.y * leg)
                            / dist_sq
                    } else {
                        -Vec2::new(rel_pos.x * leg + rel_pos.y * combined, -rel_pos.x * combined + rel_pos.y * leg)
                            / dist_sq
                    };
                    let along = rel_vel.dot(direction);
                    (direction, direction * along - rel_vel)
                }
            } else {
                // already inside the combined radius: resolve within one step
                let inv_step = 1.0 / time_step;
                let w = rel_vel - rel_pos * inv_step;
                let w_len = w.length();
                let unit_w = if w_len > 1e-12 {
                    w / w_len
                } else {
                    debug!("coincident agents with equal velocity; escaping along +x");
                    Vec2::new(1.0, 0.0)
                };
                (Vec2::new(unit_w.y, -unit_w.x), unit_w * (combined * inv_step - w_len))
            };
            let point = me.velocity + u * 0.5;
            HalfPlane { point, normal: direction.perp() }
        })
        .collect()
}

/// Velocity in the `max_speed` disc satisfying every half-plane and closest to
/// `preferred`; if the constraints are jointly infeasible, the disc point that
/// minimizes the largest violation.
pub fn solve_velocity(constraints: &[HalfPlane], preferred: Vec2, params: &OrcaParams) -> Vec2 {
    let lines: Vec<Line> = constraints.iter().map(Line::from).collect();
    let radius = params.max_speed;
    let (failed, result) = linear_program_2(&lines, radius, preferred, false);
    if failed < lines.len() {
        linear_program_3(&lines, failed, radius, result)
    } else {
        result
    }
}

/// Optimum on line `line_no` subject to the earlier lines and the disc.
fn linear_program_1(lines: &[Line], line_no: usize, radius: f64, opt: Vec2, direction_opt: bool) -> Option<Vec2> {
    let line = lines[line_no];
    let dot = line.point.dot(line.direction);
    let discriminant = dot * dot + radius * radius - line.point.length_squared();
    if discriminant < 0.0 {
        return None;
    }
    let sqrt_disc = discriminant.sqrt();
    let mut t_left = -dot - sqrt_disc;
    let mut t_right = -dot + sqrt_disc;
    for other in &lines[..line_no] {
        let denominator = line.direction.det(other.direction);
        let numerator = other.direction.det(line.point - other.point);
        if denominator.abs() <= LP_EPSILON {
            // parallel lines
            if numerator < 0.0 {
                return None;
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
            return None;
        }
    }
    let t = if direction_opt {
        if opt.dot(line.direction) > 0.0 {
            t_right
        } else {
            t_left
        }
    } else {
        line.direction.dot(opt - line.point).clamp(t_left, t_right)
    };
    Some(line.point + line.direction * t)
}

/// Returns (index of the first line that could not be satisfied, best point so far).
fn linear_program_2(lines: &[Line], radius: f64, opt: Vec2, direction_opt: bool) -> (usize, Vec2) {
    let mut result = if direction_opt {
        opt * radius
    } else if opt.length_squared() > radius * radius {
        opt.normalize_or_zero() * radius
    } else {
        opt
    };
    for (i, line) in lines.iter().enumerate() {
        if line.direction.det(line.point - result) > 0.0 {
            match linear_program_1(lines, i, radius, opt, direction_opt) {
                Some(r) => result = r,
                None => return (i, result),
            }
        }
    }
    (lines.len(), result)
}

/// Minimizes the maximum violation, starting from the partial solution of the 2D program.
fn linear_program_3(lines: &[Line], begin: usize, radius: f64, mut result: Vec2) -> Vec2 {
    let mut distance = 0.0;
    for i in begin..lines.len() {
        if lines[i].direction.det(lines[i].point - result) <= distance {
            continue;
        }
        let mut projected = Vec::with_capacity(i);
        for j in 0..i {
            let determinant = lines[i].direction.det(lines[j].direction);
            let point = if determinant.abs() <= LP_EPSILON {
                if lines[i].direction.dot(lines[j].direction) > 0.0 {
                    // same direction: line j never binds harder than line i here
                    continue;
                }
                (lines[i].point + lines[j].point) * 0.5
            } else {
                lines[i].point
                    + lines[i].direction * (lines[j].direction.det(lines[i].point - lines[j].point) / determinant)
            };
            let direction = (lines[j].direction - lines[i].direction).normalize_or_zero();
            projected.push(Line { point, direction });
        }
        let previous = result;
        let opt = Vec2::new(-lines[i].direction.y, lines[i].direction.x);
        let (failed, candidate) = linear_program_2(&projected, radius, opt, true);
        result = if failed < projected.len() { previous } else { candidate };
        distance = lines[i].direction.det(lines[i].point - result);
    }
    result
}

/// Largest violation of `v` across `constraints` (0 when there are none).
pub fn max_violation(constraints: &[HalfPlane], v: Vec2) -> f64 {
    constraints.iter().map(|c| c.violation(v)).fold(f64::NEG_INFINITY, f64::max).max(0.0)
}

/// Converts a planar velocity into a differential-drive command: forward speed is the
/// projection on the heading, turn rate follows the target-drive heading law.
pub fn velocity_to_action(velocity: Vec2, pose: &crate::sim::Pose2D, speed_scale: f64) -> Action {
    let speed = velocity.length();
    if speed < 1e-12 {
        return Action::ZERO;
    }
    let along = velocity.dot(pose.heading()) / speed_scale;
    let steer = target_drive_command(pose, pose.position() + velocity);
    Action::new(along, steer.v_z)
}

/// Deterministic value in [-1, 1] from (seed, agent, step).
fn symmetry_noise(seed: u64, agent: usize, step: u64) -> f64 {
    let mut z = seed ^ (agent as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Neighbors of `id`: present agents within `neighbor_dist`, nearest first, at most `max_neighbors`.
pub fn select_neighbors(world: &WorldState, id: usize, params: &OrcaParams) -> Vec<OrcaAgentView> {
    let me = world.agents[id].pose.position();
    let mut near: Vec<(f64, usize)> = world
        .agents
        .iter()
        .enumerate()
        .filter(|&(j, a)| j != id && a.is_present())
        .map(|(j, a)| (a.pose.position().distance(me), j))
        .filter(|&(d, _)| d < params.neighbor_dist)
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    near.truncate(params.max_neighbors);
    near.into_iter()
        .map(|(_, j)| {
            let a = &world.agents[j];
            OrcaAgentView { position: a.pose.position(), velocity: a.velocity, radius: a.radius }
        })
        .collect()
}

/// Half-planes keeping the agent off the walls within one step.
fn wall_constraints(world: &WorldState, id: usize, params: &OrcaParams) -> Vec<HalfPlane> {
    let agent = &world.agents[id];
    let p = agent.pose.position();
    let h = world.arena_half_extent;
    let axes = [Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0), Vec2::new(0.0, 1.0), Vec2::new(0.0, -1.0)];
    axes.iter()
        .filter_map(|&out| {
            let gap = h - p.dot(out) - agent.radius;
            (gap < params.neighbor_dist).then(|| HalfPlane { point: out * (gap.max(0.0) / world.dt), normal: -out })
        })
        .collect()
}

/// New velocities for every Active agent, all computed against the same snapshot.
pub fn orca_policy_step(world: &WorldState, params: &OrcaParams) -> Vec<Vec2> {
    world
        .active_ids()
        .into_iter()
        .map(|id| {
            let agent = &world.agents[id];
            let me = OrcaAgentView { position: agent.pose.position(), velocity: agent.velocity, radius: agent.radius };
            let mut preferred = preferred_velocity(&me, agent.goal, params, world.dt);
            let nudge = symmetry_noise(world.rng_seed, id, world.step_count) * params.symmetry_bias;
            preferred += preferred.normalize_or_zero().perp() * nudge;
            let neighbors = select_neighbors(world, id, params);
            let mut constraints = wall_constraints(world, id, params);
            constraints.extend(build_constraints(&me, &neighbors, params, world.dt));
            solve_velocity(&constraints, preferred, params)
        })
        .collect()
}

/// ORCA velocities converted to actions, one per Active agent.
pub fn orca_actions(world: &WorldState, params: &OrcaParams, speed_scale: f64) -> Result<Vec<Action>> {
    let velocities = orca_policy_step(world, params);
    Ok(world
        .active_ids()
        .into_iter()
        .zip(velocities)
        .map(|(id, v)| velocity_to_action(v, &world.agents[id].pose, speed_scale))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> OrcaParams {
        OrcaParams::default()
    }

    #[test]
    fn preferred_velocity_cases() {
        let p = params();
        let me = OrcaAgentView { position: Vec2::ZERO, velocity: Vec2::ZERO, radius: 0.1 };
        let v = preferred_velocity(&me, Vec2::new(5.0, 0.0), &p, 0.1);
        assert!((v - Vec2::new(1.0, 0.0)).length() < 1e-15);
        assert_eq!(preferred_velocity(&me, Vec2::ZERO, &p, 0.1), Vec2::ZERO);
        let v = preferred_velocity(&me, Vec2::new(0.0, 0.05), &p, 0.1);
        assert!((v - Vec2::new(0.0, 0.5)).length() < 1e-12);
    }

    #[test]
    fn no_neighbors_no_constraints() {
        let me = OrcaAgentView { position: Vec2::ZERO, velocity: Vec2::ZERO, radius: 0.1 };
        assert!(build_constraints(&me, &[], &params(), 0.1).is_empty());
    }

    #[test]
    fn unconstrained_is_clipped_preferred() {
        let p = params();
        assert_eq!(solve_velocity(&[], Vec2::new(0.3, 0.4), &p), Vec2::new(0.3, 0.4));
        let v = solve_velocity(&[], Vec2::new(3.0, 4.0), &p);
        assert!((v - Vec2::new(0.6, 0.8)).length() < 1e-15);
    }

    #[test]
    fn single_half_plane_projection() {
        let p = params();
        // admissible: x <= 0.2
        let h = HalfPlane { point: Vec2::new(0.2, 0.0), normal: Vec2::new(-1.0, 0.0) };
        let v = solve_velocity(&[h], Vec2::new(0.8, 0.3), &p);
        assert!((v - Vec2::new(0.2, 0.3)).length() < 1e-12);
        // projection leaves the disc: clipped to the boundary/disc intersection
        let v = solve_velocity(&[h], Vec2::new(0.8, 0.99), &p);
        assert!((v.x - 0.2).abs() < 1e-12 && (v.length() - 1.0).abs() < 1e-12 && v.y > 0.0);
    }

    #[test]
    fn head_on_constraints_mirror() {
        let p = params();
        let a = OrcaAgentView { position: Vec2::new(-0.4, 0.0), velocity: Vec2::new(1.0, 0.0), radius: 0.1 };
        let b = OrcaAgentView { position: Vec2::new(0.4, 0.0), velocity: Vec2::new(-1.0, 0.0), radius: 0.1 };
        let ca = build_constraints(&a, &[b], &p, 0.1)[0];
        let cb = build_constraints(&b, &[a], &p, 0.1)[0];
        // mirror through the perpendicular bisector x = 0 maps velocities (vx, vy) -> (-vx, vy)
        let mirror = |v: Vec2| Vec2::new(-v.x, v.y);
        assert!((mirror(ca.point) - cb.point).length() < 1e-12);
        assert!((mirror(ca.normal) - cb.normal).length() < 1e-12);
    }

    #[test]
    fn coincident_agents_escape_along_x() {
        let p = params();
        let a = OrcaAgentView { position: Vec2::ZERO, velocity: Vec2::ZERO, radius: 0.1 };
        let c = build_constraints(&a, &[a], &p, 0.1)[0];
        assert!((c.normal - Vec2::new(1.0, 0.0)).length() < 1e-12);
        assert!((c.normal.length() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn velocity_to_action_aligned() {
        let pose = crate::sim::Pose2D::new(0.0, 0.0, 0.0);
        let a = velocity_to_action(Vec2::new(0.5, 0.0), &pose, 1.0);
        assert_eq!(a, Action { v_x: 0.5, v_z: 0.0 });
        let a = velocity_to_action(Vec2::new(0.0, 0.5), &pose, 1.0);
        assert!(a.v_x.abs() < 1e-15 && (a.v_z - 1.0).abs() < 1e-12);
    }
}
