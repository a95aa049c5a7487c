//! Collision-avoidance learner: deterministic actor-critic over laser observations.

use std::sync::Arc;

use log::info;
use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::control::{fuse, target_drive_command, FusionParams, HazardModel, HazardTracker};
use crate::error::{contract, Error, Result};
use crate::geom::Vec2;
use crate::hmm::{collision_reward, reduce_scan};
use crate::neural::{adam_step, soft_update, Activation, AdamState, Mlp};
use crate::sim::{make_scenario, Action, AgentStatus, LaserScan, Pose2D, ScenarioMode, WorldConfig};

/// Network input for the collision-avoidance actor: reduced ranges scaled to [0, 1].
pub fn actor_input(reduced: &[f64], max_range: f64) -> Vec<f64> {
    reduced.iter().map(|r| r / max_range).collect()
}

/// Goal features appended for end-to-end learners: cos/sin of the heading error and
/// the goal distance in units of laser range (capped at 2).
pub fn goal_features(pose: &Pose2D, goal: Vec2, max_range: f64) -> [f64; 3] {
    let offset = goal - pose.position();
    let heading_error = crate::geom::wrap_angle(offset.angle() - pose.yaw);
    [heading_error.cos(), heading_error.sin(), (offset.length() / max_range).min(2.0)]
}

pub const GOAL_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Action,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring buffer with a seeded uniform sampler.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            storage: Vec::with_capacity(capacity.clamp(1, 1 << 16)),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices(&mut self, batch: usize) -> Vec<usize> {
        let n = self.storage.len();
        (0..batch).map(|_| self.rng.random_range(0..n)).collect()
    }

    pub fn sample(&mut self, batch: usize) -> Vec<Transition> {
        if self.storage.is_empty() {
            return Vec::new();
        }
        self.sample_indices(batch).into_iter().map(|i| self.storage[i].clone()).collect()
    }
}

/// Temporally correlated exploration noise, one process per action component.
#[derive(Debug, Clone)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    state: [f64; 2],
    rng: ChaCha8Rng,
}

impl OuNoise {
    pub fn new(theta: f64, sigma: f64, seed: u64) -> Self {
        OuNoise { theta, sigma, state: [0.0; 2], rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn sample(&mut self) -> [f64; 2] {
        for x in &mut self.state {
            let n: f64 = self.rng.sample(StandardNormal);
            *x += -self.theta * *x + self.sigma * n;
        }
        self.state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Laser-coverage reward plus collision penalty; actions executed through the fusion.
    #[default]
    CollisionOnly,
    /// End-to-end with goal shaping; raw actions executed.
    HybridReward,
    /// Hybrid reward in an empty arena first, then multi-agent scenes.
    TwoStage,
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collision-only" => Ok(Regime::CollisionOnly),
            "hybrid" | "hybrid-reward" => Ok(Regime::HybridReward),
            "two-stage" => Ok(Regime::TwoStage),
            other => Err(Error::Config(format!("unknown training regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgConfig {
    #[serde(rename = "Learning rate of actor", alias = "actor_lr")]
    pub actor_lr: f64,
    #[serde(rename = "Learning rate of critic", alias = "critic_lr")]
    pub critic_lr: f64,
    #[serde(rename = "Batch size", alias = "batch_size")]
    pub batch_size: usize,
    /// Weight of the online parameters in each target-network update.
    #[serde(rename = "tau in DDPG", alias = "soft_update")]
    pub soft_update: f64,
    #[serde(rename = "gamma in DDPG", alias = "gamma")]
    pub gamma: f64,
    #[serde(rename = "Max step in one episode", alias = "max_steps_per_episode")]
    pub max_steps_per_episode: usize,
    pub regime: Regime,
    pub ou_theta: f64,
    pub ou_sigma: f64,
    /// Exploration scale reached at the end of training (linear anneal).
    pub ou_sigma_final: f64,
    pub replay_capacity: usize,
    pub warmup: usize,
    /// Rewards are multiplied by this before entering the replay buffer.
    pub reward_scale: f64,
    pub hidden: Vec<usize>,
    pub train_agents: usize,
    /// Share of episodes spent in the obstacle-free first stage of the two-stage regime.
    pub two_stage_fraction: f64,
    pub updates_per_step: usize,
    /// Hazard used by the fusion during training when no evaluator is supplied.
    pub default_hazard: f64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            actor_lr: 1e-4,
            critic_lr: 1e-5,
            batch_size: 128,
            soft_update: 0.001,
            gamma: 0.99,
            max_steps_per_episode: 30,
            regime: Regime::CollisionOnly,
            ou_theta: 0.15,
            ou_sigma: 0.2,
            ou_sigma_final: 0.05,
            replay_capacity: 100_000,
            warmup: 1_000,
            reward_scale: 1.0 / (360.0 * 3.5),
            hidden: vec![256, 128],
            train_agents: 4,
            two_stage_fraction: 0.5,
            updates_per_step: 1,
            default_hazard: 1.0,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if !(self.soft_update > 0.0 && self.soft_update <= 1.0) {
            return Err(Error::Config(format!("soft-update mix {} outside (0, 1]", self.soft_update)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub collision_penalty: f64,
    pub goal_progress_weight: f64,
    pub goal_bonus: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { collision_penalty: -360.0 * 3.5, goal_progress_weight: 10.0, goal_bonus: 100.0 }
    }
}

/// Laser coverage reward plus the collision penalty.
pub fn compute_reward(scan: &LaserScan, collided: bool, cfg: &RewardConfig) -> f64 {
    collision_reward(scan) + if collided { cfg.collision_penalty } else { 0.0 }
}

/// [`compute_reward`] plus goal progress shaping and an arrival bonus.
pub fn compute_hybrid_reward(
    scan: &LaserScan,
    collided: bool,
    prev_goal_dist: f64,
    goal_dist: f64,
    reached: bool,
    cfg: &RewardConfig,
) -> f64 {
    compute_reward(scan, collided, cfg)
        + cfg.goal_progress_weight * (prev_goal_dist - goal_dist)
        + if reached { cfg.goal_bonus } else { 0.0 }
}

/// Actor output, optionally perturbed by the noise process and clamped.
pub fn select_action(actor: &Mlp, observation: &[f64], noise: &mut OuNoise, explore: bool) -> Result<Action> {
    let out = actor.forward(observation)?;
    if out.len() != 2 {
        return Err(contract("actor must output two components"));
    }
    if !explore {
        return Ok(Action { v_x: out[0], v_z: out[1] });
    }
    let n = noise.sample();
    Ok(Action::new(out[0] + n[0], out[1] + n[1]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
}

/// Actor, critic, their target copies, and optimizer state.
#[derive(Debug, Clone)]
pub struct DdpgLearner {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    actor_opt: AdamState,
    critic_opt: AdamState,
    pub gamma: f64,
    pub mix: f64,
}

impl DdpgLearner {
    pub fn new(obs_dims: usize, cfg: &DdpgConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut actor_dims = vec![obs_dims];
        actor_dims.extend(&cfg.hidden);
        actor_dims.push(2);
        let mut critic_dims = vec![obs_dims + 2];
        critic_dims.extend(&cfg.hidden);
        critic_dims.push(1);
        let actor = Mlp::seeded(&actor_dims, Activation::Tanh, 0.1, seed)?;
        let critic = Mlp::seeded(&critic_dims, Activation::Identity, 1.0, seed.wrapping_add(1))?;
        Ok(DdpgLearner {
            actor_opt: AdamState::new(&actor, cfg.actor_lr),
            critic_opt: AdamState::new(&critic, cfg.critic_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            gamma: cfg.gamma,
            mix: cfg.soft_update,
        })
    }

    pub fn obs_dims(&self) -> usize {
        self.actor.input_dim()
    }

    fn stack(&self, batch: &[Transition]) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let d = self.obs_dims();
        let b = batch.len();
        let mut sa = Array2::zeros((b, d + 2));
        let mut s_next = Array2::zeros((b, d));
        let mut rd = Array2::zeros((b, 2));
        for (i, t) in batch.iter().enumerate() {
            if t.s.len() != d || t.s_next.len() != d {
                return Err(contract(format!("transition {i} observation length differs from {d}")));
            }
            for k in 0..d {
                sa[[i, k]] = t.s[k];
                s_next[[i, k]] = t.s_next[k];
            }
            sa[[i, d]] = t.a.v_x;
            sa[[i, d + 1]] = t.a.v_z;
            rd[[i, 0]] = t.r;
            rd[[i, 1]] = if t.done { 1.0 } else { 0.0 };
        }
        Ok((sa, s_next, rd))
    }

    /// Regression targets r + γ(1 − done)·Q'(s', μ'(s')).
    pub fn critic_targets(&self, batch: &[Transition]) -> Result<Vec<f64>> {
        let (_, s_next, rd) = self.stack(batch)?;
        let a_next = self.actor_target.forward_batch(s_next.view())?;
        let q_next = self.critic_target.forward_batch(ndarray::concatenate![Axis(1), s_next, a_next].view())?;
        Ok((0..batch.len())
            .map(|i| {
                let done = rd[[i, 1]] == 1.0;
                let r = rd[[i, 0]];
                if done {
                    r
                } else {
                    r + self.gamma * q_next[[i, 0]]
                }
            })
            .collect())
    }

    /// One critic regression step, one actor ascent step, then both soft updates.
    pub fn train_on_batch(&mut self, batch: &[Transition]) -> Result<TrainStats> {
        if batch.is_empty() {
            return Err(contract("empty training batch"));
        }
        let b = batch.len() as f64;
        let d = self.obs_dims();
        let targets = self.critic_targets(batch)?;
        let (sa, _, _) = self.stack(batch)?;

        let cache = self.critic.forward_cached(sa.view())?;
        let q = cache.output();
        let mut critic_loss = 0.0;
        let mut upstream = Array2::zeros((batch.len(), 1));
        for i in 0..batch.len() {
            let err = q[[i, 0]] - targets[i];
            critic_loss += err * err;
            upstream[[i, 0]] = 2.0 * err / b;
        }
        critic_loss /= b;
        let (critic_grads, _) = self.critic.backward(&cache, upstream.view())?;
        adam_step(&mut self.critic, &critic_grads, &mut self.critic_opt)?;

        let states = sa.slice(s![.., ..d]).to_owned();
        let actor_cache = self.actor.forward_cached(states.view())?;
        let actions = actor_cache.output().clone();
        let critic_in = ndarray::concatenate![Axis(1), states, actions];
        let q_cache = self.critic.forward_cached(critic_in.view())?;
        let actor_loss = -q_cache.output().mean().unwrap_or(0.0);
        let dq = Array2::from_elem((batch.len(), 1), -1.0 / b);
        let (_, d_input) = self.critic.backward(&q_cache, dq.view())?;
        let d_action = d_input.slice(s![.., d..]).to_owned();
        let (actor_grads, _) = self.actor.backward(&actor_cache, d_action.view())?;
        adam_step(&mut self.actor, &actor_grads, &mut self.actor_opt)?;

        soft_update(&mut self.actor_target, &self.actor, self.mix)?;
        soft_update(&mut self.critic_target, &self.critic, self.mix)?;

        if !critic_loss.is_finite() || !actor_loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss (critic {critic_loss}, actor {actor_loss})")));
        }
        Ok(TrainStats { critic_loss, actor_loss })
    }

    /// Samples a batch and trains on it; `None` while the buffer is smaller than a batch.
    pub fn train_step(&mut self, buffer: &mut ReplayBuffer, batch_size: usize) -> Result<Option<TrainStats>> {
        if buffer.len() < batch_size {
            return Ok(None);
        }
        let batch = buffer.sample(batch_size);
        self.train_on_batch(&batch).map(Some)
    }
}

/// One structured record per training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub episode: usize,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub success_rate: f64,
    /// Unscaled episode return, averaged over the episode's agents.
    pub mean_reward: f64,
}

pub struct TrainingSetup<'a> {
    pub world: &'a WorldConfig,
    pub ddpg: &'a DdpgConfig,
    pub reward: &'a RewardConfig,
    pub fusion: FusionParams,
    /// Hazard evaluator used by the fusion in the collision-only regime.
    pub hazard: Option<Arc<HazardModel>>,
    /// Reduced-scan dimension.
    pub obs_dims: usize,
}

pub struct TrainingOutcome {
    pub learner: DdpgLearner,
    pub curves: Vec<CurveRecord>,
}

#[derive(Clone, Copy, PartialEq)]
enum RewardKind {
    Collision,
    Hybrid,
}

fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(episode as u64 + 1)
}

/// Runs `episodes` training episodes under the configured regime.
pub fn run_training(setup: &TrainingSetup, episodes: usize, seed: u64) -> Result<TrainingOutcome> {
    let cfg = setup.ddpg;
    cfg.validate()?;
    let goal_conditioned = cfg.regime != Regime::CollisionOnly;
    let input_dims = setup.obs_dims + if goal_conditioned { GOAL_FEATURES } else { 0 };
    let mut learner = DdpgLearner::new(input_dims, cfg, seed)?;
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity, seed.wrapping_add(2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let switch = (episodes as f64 * cfg.two_stage_fraction).round() as usize;
    let max_range = setup.world.laser.max_range;
    let mut curves = Vec::with_capacity(episodes);

    for ep in 0..episodes {
        let (n_agents, kind, fused) = match cfg.regime {
            Regime::CollisionOnly => (cfg.train_agents, RewardKind::Collision, true),
            Regime::HybridReward => (cfg.train_agents, RewardKind::Hybrid, false),
            Regime::TwoStage if ep < switch => (1, RewardKind::Hybrid, false),
            Regime::TwoStage => (cfg.train_agents, RewardKind::Hybrid, false),
        };
        let mode = if n_agents == 1 { ScenarioMode::Random } else { ScenarioMode::for_agent_count(n_agents) };
        let mut world = make_scenario(n_agents, mode, episode_seed(seed, ep), setup.world)?;
        let progress = if episodes > 1 { ep as f64 / (episodes - 1) as f64 } else { 0.0 };
        let sigma = cfg.ou_sigma + (cfg.ou_sigma_final - cfg.ou_sigma) * progress;
        let mut noises: Vec<OuNoise> = (0..n_agents)
            .map(|i| OuNoise::new(cfg.ou_theta, sigma, episode_seed(seed, ep) ^ (i as u64 + 1) << 32))
            .collect();
        let mut trackers: Vec<HazardTracker> =
            (0..n_agents).map(|_| HazardTracker::new(setup.hazard.as_ref().map_or(1, |h| h.window))).collect();

        let mut scans: Vec<LaserScan> = (0..n_agents).map(|i| world.cast_laser(i)).collect::<Result<_>>()?;
        let mut losses = (0.0, 0.0, 0usize);
        let mut reward_sum = 0.0;

        for _ in 0..cfg.max_steps_per_episode {
            let active = world.active_ids();
            if active.is_empty() {
                break;
            }
            let mut states = Vec::with_capacity(active.len());
            let mut chosen = Vec::with_capacity(active.len());
            let mut executed = Vec::with_capacity(active.len());
            let mut prev_dist = Vec::with_capacity(active.len());
            for &id in &active {
                let agent = &world.agents[id];
                let reduced = reduce_scan(&scans[id], setup.obs_dims)?;
                let s = observation(&reduced, max_range, goal_conditioned, agent.pose, agent.goal);
                let a = if buffer.len() < cfg.warmup {
                    Action::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0))
                } else {
                    select_action(&learner.actor, &s, &mut noises[id], true)?
                };
                let exec = if fused {
                    let hazard = match &setup.hazard {
                        Some(model) => trackers[id].observe(model, reduced)?.1,
                        None => cfg.default_hazard,
                    };
                    fuse(target_drive_command(&agent.pose, agent.goal), a, hazard, &setup.fusion)
                } else {
                    a
                };
                prev_dist.push(agent.goal_distance());
                states.push(s);
                chosen.push(a);
                executed.push(exec);
            }
            world.step(&executed, setup.world.speed_scale)?;

            for (k, &id) in active.iter().enumerate() {
                scans[id] = world.cast_laser(id)?;
                let agent = &world.agents[id];
                let collided = agent.status == AgentStatus::Collided;
                let reached = agent.status == AgentStatus::Reached;
                let r = match kind {
                    RewardKind::Collision => compute_reward(&scans[id], collided, setup.reward),
                    RewardKind::Hybrid => compute_hybrid_reward(
                        &scans[id],
                        collided,
                        prev_dist[k],
                        agent.goal_distance(),
                        reached,
                        setup.reward,
                    ),
                };
                let reduced = reduce_scan(&scans[id], setup.obs_dims)?;
                let s_next = observation(&reduced, max_range, goal_conditioned, agent.pose, agent.goal);
                reward_sum += r;
                buffer.push(Transition {
                    s: std::mem::take(&mut states[k]),
                    a: chosen[k],
                    r: r * cfg.reward_scale,
                    s_next,
                    done: collided || reached,
                });
            }

            if buffer.len() >= cfg.warmup.max(cfg.batch_size) {
                for _ in 0..cfg.updates_per_step.max(1) {
                    if let Some(stats) = learner.train_step(&mut buffer, cfg.batch_size)? {
                        losses.0 += stats.actor_loss;
                        losses.1 += stats.critic_loss;
                        losses.2 += 1;
                    }
                }
            }
        }

        let reached = world.agents.iter().filter(|a| a.status == AgentStatus::Reached).count();
        let record = CurveRecord {
            episode: ep,
            actor_loss: (losses.2 > 0).then(|| losses.0 / losses.2 as f64),
            critic_loss: (losses.2 > 0).then(|| losses.1 / losses.2 as f64),
            success_rate: reached as f64 / n_agents as f64,
            mean_reward: reward_sum / n_agents as f64,
        };
        if ep % 50 == 0 {
            info!("episode {ep}: {record:?}");
        }
        curves.push(record);
    }
    Ok(TrainingOutcome { learner, curves })
}

fn observation(reduced: &[f64], max_range: f64, goal_conditioned: bool, pose: Pose2D, goal: Vec2) -> Vec<f64> {
    let mut s = actor_input(reduced, max_range);
    if goal_conditioned {
        s.extend(goal_features(&pose, goal, max_range));
    }
    s
}

/// Actor input for whichever observation layout the actor was trained on.
pub fn observation_for(actor: &Mlp, reduced: &[f64], max_range: f64, pose: Pose2D, goal: Vec2) -> Result<Vec<f64>> {
    match actor.input_dim() {
        d if d == reduced.len() => Ok(actor_input(reduced, max_range)),
        d if d == reduced.len() + GOAL_FEATURES => Ok(observation(reduced, max_range, true, pose, goal)),
        d => Err(Error::Policy(format!("actor expects {d} inputs, observation has {}", reduced.len()))),
    }
}

/// Smoothed copy of a curve (trailing moving average over `window` defined points).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let slice = &values[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}
