//! Discrete-time world of circular differential-drive agents in a square arena.
//!
//! Kinematics use the usual planar convention: `yaw` is measured counter-clockwise
//! from the +x axis and an agent with yaw 0 drives along +x.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geom::{wrap_angle, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    /// Radians in (-π, π].
    pub yaw: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2D { x, y, yaw: wrap_angle(yaw) }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn heading(&self) -> Vec2 {
        Vec2::from_angle(self.yaw)
    }
}

/// Normalized velocity command. Both components live in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub v_x: f64,
    pub v_z: f64,
}

impl Action {
    pub const ZERO: Action = Action { v_x: 0.0, v_z: 0.0 };

    /// Builds a clamped action. NaN components become 0.
    pub fn new(v_x: f64, v_z: f64) -> Self {
        Action { v_x: clamp_unit(v_x), v_z: clamp_unit(v_z) }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.v_x, self.v_z]
    }
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentStatus {
    Active,
    Reached,
    Collided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pose: Pose2D,
    pub radius: f64,
    pub goal: Vec2,
    pub last_action: Action,
    /// Realized velocity over the last step, m/s.
    pub velocity: Vec2,
    pub status: AgentStatus,
    pub path_length: f64,
}

impl AgentState {
    pub fn new(pose: Pose2D, radius: f64, goal: Vec2) -> Self {
        AgentState {
            pose,
            radius,
            goal,
            last_action: Action::ZERO,
            velocity: Vec2::ZERO,
            status: AgentStatus::Active,
            path_length: 0.0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == AgentStatus::Active
    }

    /// Reached agents leave the arena: they are neither sensed nor collidable.
    pub fn is_present(&self) -> bool {
        self.status != AgentStatus::Reached
    }

    pub fn goal_distance(&self) -> f64 {
        self.pose.position().distance(self.goal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaserConfig {
    pub beam_count: usize,
    #[serde(rename = "Max laser range", alias = "max_range")]
    pub max_range: f64,
}

impl Default for LaserConfig {
    fn default() -> Self {
        LaserConfig { beam_count: 360, max_range: 3.5 }
    }
}

/// World and scenario parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub arena_half_extent: f64,
    #[serde(rename = "Delay of control", alias = "dt")]
    pub dt: f64,
    pub speed_scale: f64,
    pub max_angular_speed: f64,
    pub goal_tolerance: f64,
    pub agent_radius: f64,
    pub laser: LaserConfig,
    /// Radius of the circle agents are spread on in antipodal scenarios.
    pub antipodal_radius: f64,
    /// Minimum distance between any two spawns (and any two goals) in random scenarios.
    pub min_spawn_separation: f64,
    /// Minimum start-to-goal distance in random scenarios.
    pub min_goal_distance: f64,
    /// Clearance kept between spawns/goals and the walls.
    pub wall_margin: f64,
    pub max_spawn_attempts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            arena_half_extent: 6.0,
            dt: 0.1,
            speed_scale: 1.0,
            max_angular_speed: 1.0,
            goal_tolerance: 0.2,
            agent_radius: 0.1,
            laser: LaserConfig::default(),
            antipodal_radius: 1.5,
            min_spawn_separation: 1.0,
            min_goal_distance: 2.0,
            wall_margin: 0.8,
            max_spawn_attempts: 10_000,
        }
    }
}

impl WorldConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.arena_half_extent > 0.0) || !(self.agent_radius > 0.0) {
            return Err(Error::Config("arena and agent radius must be positive".into()));
        }
        if self.laser.beam_count == 0 || !(self.laser.max_range > 0.0) {
            return Err(Error::Config("laser needs at least one beam and a positive range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agents: Vec<AgentState>,
    pub arena_half_extent: f64,
    pub dt: f64,
    pub step_count: u64,
    pub rng_seed: u64,
    pub max_angular_speed: f64,
    pub goal_tolerance: f64,
    pub laser: LaserConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserScan {
    pub ranges: Vec<f64>,
    pub max_range: f64,
    pub angle_increment: f64,
}

impl LaserScan {
    pub fn uniform(beam_count: usize, range: f64, max_range: f64) -> Self {
        LaserScan { ranges: vec![range; beam_count], max_range, angle_increment: 2.0 * PI / beam_count as f64 }
    }

    pub fn from_ranges(ranges: Vec<f64>, max_range: f64) -> Self {
        let n = ranges.len().max(1);
        LaserScan { ranges, max_range, angle_increment: 2.0 * PI / n as f64 }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// Per-step outcome, useful for reward bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepEvents {
    pub newly_collided: Vec<usize>,
    pub newly_reached: Vec<usize>,
}

impl WorldState {
    pub fn empty(cfg: &WorldConfig, seed: u64) -> Self {
        WorldState {
            agents: Vec::new(),
            arena_half_extent: cfg.arena_half_extent,
            dt: cfg.dt,
            step_count: 0,
            rng_seed: seed,
            max_angular_speed: cfg.max_angular_speed,
            goal_tolerance: cfg.goal_tolerance,
            laser: cfg.laser,
        }
    }

    pub fn active_ids(&self) -> Vec<usize> {
        (0..self.agents.len()).filter(|&i| self.agents[i].is_active()).collect()
    }

    pub fn any_active(&self) -> bool {
        self.agents.iter().any(AgentState::is_active)
    }

    pub fn elapsed(&self) -> f64 {
        self.step_count as f64 * self.dt
    }

    /// Advances one control period. `actions[k]` drives the k-th Active agent in id order.
    pub fn step(&mut self, actions: &[Action], speed_scale: f64) -> Result<StepEvents> {
        let active = self.active_ids();
        if actions.len() != active.len() {
            return Err(contract(format!(
                "expected {} actions (one per active agent), got {}",
                active.len(),
                actions.len()
            )));
        }
        let dt = self.dt;
        for (&id, action) in active.iter().zip(actions) {
            let action = Action::new(action.v_x, action.v_z);
            let agent = &mut self.agents[id];
            let start = agent.pose.position();
            let forward = speed_scale * action.v_x;
            let x = agent.pose.x + forward * agent.pose.yaw.cos() * dt;
            let y = agent.pose.y + forward * agent.pose.yaw.sin() * dt;
            let yaw = wrap_angle(agent.pose.yaw + self.max_angular_speed * action.v_z * dt);
            agent.pose = Pose2D { x, y, yaw };
            let displacement = agent.pose.position() - start;
            agent.path_length += displacement.length();
            agent.velocity = displacement / dt;
            agent.last_action = action;
        }

        let mut events = StepEvents::default();
        let n = self.agents.len();
        let mut hit = vec![false; n];
        for i in 0..n {
            let a = &self.agents[i];
            if !a.is_present() {
                continue;
            }
            let p = a.pose.position();
            let h = self.arena_half_extent;
            if a.is_active() && (p.x.abs() + a.radius > h || p.y.abs() + a.radius > h) {
                hit[i] = true;
            }
            for j in (i + 1)..n {
                let b = &self.agents[j];
                if !b.is_present() || (!a.is_active() && !b.is_active()) {
                    continue;
                }
                let reach = a.radius + b.radius;
                if p.distance(b.pose.position()) < reach {
                    hit[i] = true;
                    hit[j] = true;
                }
            }
        }
        for (i, agent) in self.agents.iter_mut().enumerate() {
            if !agent.is_active() {
                continue;
            }
            if hit[i] {
                agent.status = AgentStatus::Collided;
                agent.velocity = Vec2::ZERO;
                events.newly_collided.push(i);
            } else if agent.goal_distance() <= self.goal_tolerance {
                agent.status = AgentStatus::Reached;
                agent.velocity = Vec2::ZERO;
                events.newly_reached.push(i);
            }
        }
        self.step_count += 1;
        Ok(events)
    }

    /// Casts the configured laser from `agent_id`.
    pub fn cast_laser(&self, agent_id: usize) -> Result<LaserScan> {
        let agent = self.agents.get(agent_id).ok_or(Error::UnknownAgent(agent_id))?;
        let n = self.laser.beam_count;
        let max_range = self.laser.max_range;
        let origin = agent.pose.position();
        let increment = 2.0 * PI / n as f64;

        // Only neighbors whose disc comes within max_range can shorten a beam.
        let obstacles: Vec<(Vec2, f64)> = self
            .agents
            .iter()
            .enumerate()
            .filter(|&(j, other)| j != agent_id && other.is_present())
            .map(|(_, other)| (other.pose.position() - origin, other.radius))
            .filter(|(rel, r)| rel.length() - r < max_range)
            .collect();

        let ranges = (0..n)
            .map(|k| {
                let dir = Vec2::from_angle(agent.pose.yaw + k as f64 * increment);
                let mut best = wall_distance(origin, dir, self.arena_half_extent);
                for &(rel, r) in &obstacles {
                    if let Some(t) = ray_circle(rel, r, dir) {
                        best = best.min(t);
                    }
                }
                best.clamp(0.0, max_range)
            })
            .collect();
        Ok(LaserScan { ranges, max_range, angle_increment: increment })
    }
}

pub fn step_world(world: &WorldState, actions: &[Action], speed_scale: f64) -> Result<WorldState> {
    let mut next = world.clone();
    next.step(actions, speed_scale)?;
    Ok(next)
}

pub fn cast_laser(world: &WorldState, agent_id: usize) -> Result<LaserScan> {
    world.cast_laser(agent_id)
}

/// Distance along unit `dir` from the origin to a circle centered at `center` (relative).
/// Returns 0 when the origin lies inside the circle.
fn ray_circle(center: Vec2, radius: f64, dir: Vec2) -> Option<f64> {
    let along = center.dot(dir);
    let dist_sq = center.length_squared();
    let r_sq = radius * radius;
    if dist_sq <= r_sq {
        return Some(0.0);
    }
    if along <= 0.0 {
        return None;
    }
    let perp_sq = dist_sq - along * along;
    if perp_sq > r_sq {
        return None;
    }
    Some(along - (r_sq - perp_sq).sqrt())
}

fn wall_distance(origin: Vec2, dir: Vec2, half: f64) -> f64 {
    let axis = |o: f64, d: f64| {
        if d > 0.0 {
            (half - o) / d
        } else if d < 0.0 {
            (-half - o) / d
        } else {
            f64::INFINITY
        }
    };
    axis(origin.x, dir.x).min(axis(origin.y, dir.y)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioMode {
    Antipodal,
    Random,
}

impl ScenarioMode {
    /// Antipodal for up to 16 agents, random placement above.
    pub fn for_agent_count(n: usize) -> Self {
        if n <= 16 {
            ScenarioMode::Antipodal
        } else {
            ScenarioMode::Random
        }
    }
}

/// Builds a reproducible scenario. Every agent starts facing its goal.
pub fn make_scenario(n_agents: usize, mode: ScenarioMode, seed: u64, cfg: &WorldConfig) -> Result<WorldState> {
    cfg.validate()?;
    if n_agents == 0 {
        return Err(Error::Scenario("need at least one agent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = WorldState::empty(cfg, seed);
    let pairs: Vec<(Vec2, Vec2)> = match mode {
        ScenarioMode::Antipodal => {
            let offset = rng.random::<f64>() * 2.0 * PI;
            (0..n_agents)
                .map(|i| {
                    let theta = offset + 2.0 * PI * i as f64 / n_agents as f64;
                    let start = Vec2::from_angle(theta) * cfg.antipodal_radius;
                    (start, -start)
                })
                .collect()
        }
        ScenarioMode::Random => random_pairs(n_agents, &mut rng, cfg)?,
    };
    for (start, goal) in pairs {
        let yaw = (goal - start).angle();
        world.agents.push(AgentState::new(Pose2D::new(start.x, start.y, yaw), cfg.agent_radius, goal));
    }
    Ok(world)
}

fn random_pairs(n: usize, rng: &mut ChaCha8Rng, cfg: &WorldConfig) -> Result<Vec<(Vec2, Vec2)>> {
    let lim = cfg.arena_half_extent - cfg.wall_margin;
    if lim <= 0.0 {
        return Err(Error::Scenario("wall margin leaves no free space".into()));
    }
    let mut starts: Vec<Vec2> = Vec::with_capacity(n);
    let mut goals: Vec<Vec2> = Vec::with_capacity(n);
    let sep = cfg.min_spawn_separation;
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..cfg.max_spawn_attempts {
            let s = Vec2::new(rng.random_range(-lim..lim), rng.random_range(-lim..lim));
            let g = Vec2::new(rng.random_range(-lim..lim), rng.random_range(-lim..lim));
            if s.distance(g) < cfg.min_goal_distance {
                continue;
            }
            if starts.iter().any(|o| o.distance(s) < sep) || goals.iter().any(|o| o.distance(g) < sep) {
                continue;
            }
            starts.push(s);
            goals.push(g);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Scenario(format!(
                "could not place agent {} of {n} after {} attempts",
                starts.len(),
                cfg.max_spawn_attempts
            )));
        }
    }
    Ok(starts.into_iter().zip(goals).collect())
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode: u64,
    pub step: u64,
    pub agent_id: usize,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v_x: f64,
    pub v_z: f64,
    pub status: AgentStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hazard: Option<f64>,
}

impl TrajectoryRecord {
    pub fn from_agent(episode: u64, step: u64, agent_id: usize, agent: &AgentState) -> Self {
        TrajectoryRecord {
            episode,
            step,
            agent_id,
            x: agent.pose.x,
            y: agent.pose.y,
            yaw: agent.pose.yaw,
            v_x: agent.last_action.v_x,
            v_z: agent.last_action.v_z,
            status: agent.status,
            state_id: None,
            hazard: None,
        }
    }
}
