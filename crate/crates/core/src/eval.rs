//! Experiment protocol: episodes under any policy, aggregate tables, HMM data collection.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{target_drive_command, FusionParams, HazardModel, HnrnPolicy};
use crate::ddpg::observation_for;
use crate::error::{Error, Result};
use crate::hmm::{collision_reward, reduce_scan, ObservationSeq};
use crate::neural::Mlp;
use crate::orca::{orca_actions, OrcaParams};
use crate::sim::{make_scenario, Action, AgentStatus, ScenarioMode, TrajectoryRecord, WorldConfig, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Policy {
    Hnrn,
    Orca,
    RawDdpg,
    TargetOnly,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Hnrn, Policy::Orca, Policy::RawDdpg, Policy::TargetOnly];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Hnrn => "HNRN",
            Policy::Orca => "ORCA",
            Policy::RawDdpg => "RawDDPG",
            Policy::TargetOnly => "TargetOnly",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hnrn" => Ok(Policy::Hnrn),
            "orca" => Ok(Policy::Orca),
            "rawddpg" | "raw-ddpg" | "ddpg" => Ok(Policy::RawDdpg),
            "targetonly" | "target-only" | "target" => Ok(Policy::TargetOnly),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }
}

/// Everything the policies need besides the world.
#[derive(Debug, Clone, Default)]
pub struct PolicyAssets {
    pub hazard: Option<Arc<HazardModel>>,
    /// Collision-avoidance actor used inside the hierarchical policy.
    pub hnrn_actor: Option<Arc<Mlp>>,
    /// End-to-end actor executed directly.
    pub raw_actor: Option<Arc<Mlp>>,
    pub fusion: FusionParams,
    pub orca: OrcaParams,
}

impl PolicyAssets {
    /// Fails before any episode runs if `policy` lacks a required model.
    pub fn check(&self, policy: Policy) -> Result<()> {
        let missing = match policy {
            Policy::Hnrn if self.hazard.is_none() => Some("hazard model"),
            Policy::Hnrn if self.hnrn_actor.is_none() => Some("collision-avoidance actor"),
            Policy::RawDdpg if self.raw_actor.is_none() => Some("end-to-end actor"),
            _ => None,
        };
        match missing {
            Some(what) => Err(Error::Policy(format!("{policy} needs a {what}"))),
            None => Ok(()),
        }
    }
}

/// Outcome of one episode. Time and length are present only when every agent arrived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub policy: Policy,
    pub n_agents: usize,
    pub seed: u64,
    pub success: bool,
    pub collision_count: usize,
    /// Collided agents over all agents.
    pub collision_rate: f64,
    pub time_spent: Option<f64>,
    pub trajectory_length: Option<f64>,
    pub steps: u64,
    pub outcomes: Vec<AgentStatus>,
}

/// HMM state id and hazard level behind one agent's action.
type StepDiagnostics = (usize, f64);

/// Per-episode controller state for one policy.
enum Controller<'a> {
    Hnrn(Vec<HnrnPolicy>),
    Orca(&'a OrcaParams),
    Raw(&'a Mlp, usize),
    Target,
}

impl<'a> Controller<'a> {
    fn new(policy: Policy, assets: &'a PolicyAssets, world: &WorldState) -> Result<Self> {
        assets.check(policy)?;
        Ok(match policy {
            Policy::Hnrn => {
                let hazard = assets.hazard.clone().expect("checked");
                let actor = assets.hnrn_actor.clone().expect("checked");
                let agents = (0..world.agents.len())
                    .map(|_| HnrnPolicy::new(hazard.clone(), actor.clone(), assets.fusion))
                    .collect::<Result<_>>()?;
                Controller::Hnrn(agents)
            }
            Policy::Orca => Controller::Orca(&assets.orca),
            Policy::RawDdpg => {
                let actor = assets.raw_actor.as_deref().expect("checked");
                let dims = match &assets.hazard {
                    Some(h) => h.dims(),
                    None => actor.input_dim() - crate::ddpg::GOAL_FEATURES,
                };
                Controller::Raw(actor, dims)
            }
            Policy::TargetOnly => Controller::Target,
        })
    }

    /// Actions for the Active agents in id order, plus optional per-agent diagnostics.
    fn act(&mut self, world: &WorldState, speed_scale: f64) -> Result<(Vec<Action>, Vec<Option<StepDiagnostics>>)> {
        let active = world.active_ids();
        let mut diag = vec![None; world.agents.len()];
        let actions = match self {
            Controller::Orca(params) => orca_actions(world, params, speed_scale)?,
            Controller::Target => {
                active.iter().map(|&id| target_drive_command(&world.agents[id].pose, world.agents[id].goal)).collect()
            }
            Controller::Raw(actor, dims) => active
                .iter()
                .map(|&id| {
                    let agent = &world.agents[id];
                    let scan = world.cast_laser(id)?;
                    let reduced = reduce_scan(&scan, *dims)?;
                    let input = observation_for(actor, &reduced, scan.max_range, agent.pose, agent.goal)?;
                    let out = actor.forward(&input)?;
                    Ok(Action::new(out[0], out[1]))
                })
                .collect::<Result<_>>()?,
            Controller::Hnrn(policies) => active
                .iter()
                .map(|&id| {
                    let agent = &world.agents[id];
                    let scan = world.cast_laser(id)?;
                    let (action, d) = policies[id].act(&scan, &agent.pose, agent.goal)?;
                    diag[id] = Some((d.state_id, d.hazard));
                    Ok(action)
                })
                .collect::<Result<_>>()?,
        };
        Ok((actions, diag))
    }
}

/// Runs one episode until no agent is Active or `horizon` steps elapse.
/// When `log` is given, one record per agent per step is appended.
pub fn run_episode(
    policy: Policy,
    mut world: WorldState,
    assets: &PolicyAssets,
    horizon: usize,
    speed_scale: f64,
    episode: u64,
    mut log: Option<&mut Vec<TrajectoryRecord>>,
) -> Result<EpisodeMetrics> {
    if horizon == 0 {
        return Err(Error::Config("evaluation horizon must be at least one step".into()));
    }
    let mut controller = Controller::new(policy, assets, &world)?;
    let mut completion: Option<(f64, f64)> = None;
    while world.any_active() && (world.step_count as usize) < horizon {
        let (actions, diag) = controller.act(&world, speed_scale)?;
        world.step(&actions, speed_scale)?;
        if let Some(log) = log.as_deref_mut() {
            for (id, agent) in world.agents.iter().enumerate() {
                let mut rec = TrajectoryRecord::from_agent(episode, world.step_count, id, agent);
                if let Some((s, h)) = diag[id] {
                    rec.state_id = Some(s);
                    rec.hazard = Some(h);
                }
                log.push(rec);
            }
        }
        if completion.is_none() && world.agents.iter().all(|a| a.status == AgentStatus::Reached) {
            completion = Some((world.elapsed(), world.agents.iter().map(|a| a.path_length).sum()));
        }
    }
    let n = world.agents.len();
    let collision_count = world.agents.iter().filter(|a| a.status == AgentStatus::Collided).count();
    let success = completion.is_some() && collision_count == 0;
    Ok(EpisodeMetrics {
        policy,
        n_agents: n,
        seed: world.rng_seed,
        success,
        collision_count,
        collision_rate: if n > 0 { collision_count as f64 / n as f64 } else { 0.0 },
        time_spent: completion.map(|c| c.0),
        trajectory_length: completion.map(|c| c.1),
        steps: world.step_count,
        outcomes: world.agents.iter().map(|a| a.status).collect(),
    })
}

/// Scenario seed shared by every policy for a given (agent count, trial).
pub fn trial_seed(base: u64, n_agents: usize, trial: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add((n_agents as u64) << 20).wrapping_add(trial as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub agent_counts: Vec<usize>,
    pub trials: usize,
    pub horizon: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { agent_counts: vec![2, 4, 8, 16, 20, 32], trials: 30, horizon: 600 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    SuccessRate,
    CollisionRate,
    TimeSpent,
    TrajectoryLength,
}

impl Metric {
    pub const ALL: [Metric; 4] =
        [Metric::SuccessRate, Metric::CollisionRate, Metric::TimeSpent, Metric::TrajectoryLength];

    pub fn name(self) -> &'static str {
        match self {
            Metric::SuccessRate => "success_rate",
            Metric::CollisionRate => "collision_rate",
            Metric::TimeSpent => "time_spent",
            Metric::TrajectoryLength => "trajectory_length",
        }
    }

    /// Per-episode value; time and length exist only for completed episodes.
    pub fn value(self, m: &EpisodeMetrics) -> Option<f64> {
        match self {
            Metric::SuccessRate => Some(if m.success { 1.0 } else { 0.0 }),
            Metric::CollisionRate => Some(m.collision_rate),
            Metric::TimeSpent => m.time_spent,
            Metric::TrajectoryLength => m.trajectory_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub policies: Vec<Policy>,
    pub agent_counts: Vec<usize>,
    pub episodes: Vec<EpisodeMetrics>,
}

impl AggregateReport {
    pub fn from_episodes(policies: Vec<Policy>, agent_counts: Vec<usize>, episodes: Vec<EpisodeMetrics>) -> Self {
        AggregateReport { policies, agent_counts, episodes }
    }

    pub fn cell(&self, metric: Metric, policy: Policy, n_agents: usize) -> Option<MeanStd> {
        let values: Vec<f64> = self
            .episodes
            .iter()
            .filter(|e| e.policy == policy && e.n_agents == n_agents)
            .filter_map(|e| metric.value(e))
            .collect();
        MeanStd::of(&values)
    }

    pub fn cells(&self) -> BTreeMap<(Metric, Policy, usize), Option<MeanStd>> {
        let mut out = BTreeMap::new();
        for &metric in &Metric::ALL {
            for &p in &self.policies {
                for &n in &self.agent_counts {
                    out.insert((metric, p, n), self.cell(metric, p, n));
                }
            }
        }
        out
    }

    /// Comma-separated table: one row per (metric, policy), a mean and std column per agent count.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,policy");
        for n in &self.agent_counts {
            let _ = write!(s, ",{n}_mean,{n}_std");
        }
        s.push('\n');
        for &metric in &Metric::ALL {
            for &p in &self.policies {
                let _ = write!(s, "{},{}", metric.name(), p);
                for &n in &self.agent_counts {
                    match self.cell(metric, p, n) {
                        Some(c) => {
                            let _ = write!(s, ",{:.6},{:.6}", c.mean, c.std);
                        }
                        None => s.push_str(",NA,NA"),
                    }
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Runs `trials` seeded episodes for every policy and agent count. When `trajectories`
/// is given, the first trial of every cell is logged into it.
pub fn evaluate(
    policies: &[Policy],
    settings: &EvalSettings,
    world_cfg: &WorldConfig,
    assets: &PolicyAssets,
    seed: u64,
    mut trajectories: Option<&mut Vec<TrajectoryRecord>>,
) -> Result<AggregateReport> {
    if settings.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    for &p in policies {
        assets.check(p)?;
    }
    let mut episodes = Vec::with_capacity(policies.len() * settings.agent_counts.len() * settings.trials);
    for &p in policies {
        for &n in &settings.agent_counts {
            for t in 0..settings.trials {
                let s = trial_seed(seed, n, t);
                let world = make_scenario(n, ScenarioMode::for_agent_count(n), s, world_cfg)?;
                let id = episodes.len() as u64;
                let log = if t == 0 { trajectories.as_deref_mut() } else { None };
                episodes.push(run_episode(p, world, assets, settings.horizon, world_cfg.speed_scale, id, log)?);
            }
        }
    }
    Ok(AggregateReport::from_episodes(policies.to_vec(), settings.agent_counts.clone(), episodes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub orca_fraction: f64,
    pub random_fraction: f64,
    pub episodes: usize,
    pub agent_counts: Vec<usize>,
    pub horizon: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            orca_fraction: 0.7,
            random_fraction: 0.3,
            episodes: 60,
            agent_counts: vec![2, 4, 8, 16, 20, 32],
            horizon: 150,
        }
    }
}

/// Records reduced scans and collision rewards per agent per episode under a mix of
/// ORCA-driven and uniformly random episodes. Agent counts cycle through the list.
pub fn collect_hmm_data(
    cfg: &CollectConfig,
    world_cfg: &WorldConfig,
    orca: &OrcaParams,
    dims: usize,
    seed: u64,
) -> Result<Vec<ObservationSeq>> {
    if cfg.episodes == 0 {
        return Err(Error::Training("cannot collect an empty dataset".into()));
    }
    if (cfg.orca_fraction + cfg.random_fraction - 1.0).abs() > 1e-9
        || cfg.orca_fraction < 0.0
        || cfg.random_fraction < 0.0
    {
        return Err(Error::Config("policy fractions must be non-negative and sum to 1".into()));
    }
    if cfg.agent_counts.is_empty() {
        return Err(Error::Config("no agent counts to collect from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for ep in 0..cfg.episodes {
        let n = cfg.agent_counts[ep % cfg.agent_counts.len()];
        let use_orca = rng.random::<f64>() < cfg.orca_fraction;
        let scenario_seed = rng.random::<u64>();
        let mut world = make_scenario(n, ScenarioMode::for_agent_count(n), scenario_seed, world_cfg)?;
        let mut seqs: Vec<ObservationSeq> = (0..n).map(|i| ObservationSeq::new(ep as u64, i, Vec::new())).collect();
        let record = |world: &WorldState, id: usize, seqs: &mut Vec<ObservationSeq>| -> Result<()> {
            let scan = world.cast_laser(id)?;
            seqs[id].frames.push(reduce_scan(&scan, dims)?);
            seqs[id].rewards.push(collision_reward(&scan));
            Ok(())
        };
        while world.any_active() && (world.step_count as usize) < cfg.horizon {
            let active = world.active_ids();
            for &id in &active {
                record(&world, id, &mut seqs)?;
            }
            let actions = if use_orca {
                orca_actions(&world, orca, world_cfg.speed_scale)?
            } else {
                active.iter().map(|_| Action::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0))).collect()
            };
            let events = world.step(&actions, world_cfg.speed_scale)?;
            // the frame at the moment of impact is the most hazardous observation available
            for &id in &events.newly_collided {
                record(&world, id, &mut seqs)?;
            }
        }
        out.extend(seqs.into_iter().filter(|s| !s.is_empty()));
    }
    Ok(out)
}
