//! Command-line front end.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;
use crate::control::HazardModel;
use crate::ddpg::{run_training, Regime, TrainingSetup};
use crate::error::{Error, Result};
use crate::eval::{collect_hmm_data, evaluate, run_episode, Policy, PolicyAssets};
use crate::hmm::{baum_welch, rank_states, GaussianHmm, ObservationSeq};
use crate::neural::Mlp;
use crate::sim::{make_scenario, ScenarioMode};

#[derive(Debug, Parser)]
#[command(name = "hnrn", version, about = "Hierarchical multi-agent navigation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides HNRN_SEED and the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record reduced scans and rewards for HMM training.
    Collect {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the Gaussian HMM to a collected dataset.
    TrainHmm {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank HMM states by mean collision reward and store the ranking in the checkpoint.
    RankStates {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        hmm: Option<PathBuf>,
    },
    /// Train the collision-avoidance actor.
    TrainDdpg {
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        hmm: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the evaluation grid and write the aggregate report.
    Eval {
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
        policies: Option<Vec<Policy>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One antipodal episode with a full trajectory and diagnostics log.
    Demo {
        #[arg(long, value_parser = parse_policy, default_value = "hnrn")]
        policy: Policy,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_policy(s: &str) -> std::result::Result<Policy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `argv` and runs the command. Usage errors exit 2, other failures exit 1.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cfg.resolve_seed(cli.common.seed)?;
    match cli.command {
        Command::Collect { episodes, out } => {
            let mut collect = cfg.collect.clone();
            if let Some(e) = episodes {
                collect.episodes = e;
            }
            let data = collect_hmm_data(&collect, &cfg.world, &cfg.orca, cfg.hmm.dims, seed)?;
            let path = out.unwrap_or(cfg.paths.dataset.clone());
            write_jsonl(&path, &data)?;
            info!("wrote {} sequences to {}", data.len(), path.display());
        }
        Command::TrainHmm { dataset, out } => {
            let data = read_dataset(&dataset)?;
            let fit = baum_welch(&data, cfg.hmm.states, cfg.hmm.max_iters, cfg.hmm.tol, seed)?;
            let ranking = match rank_states(&fit.hmm, &data, cfg.hmm.window, cfg.hmm.hazard_map) {
                Ok(r) => Some(r),
                Err(e) => {
                    warn!("states left unranked: {e}");
                    None
                }
            };
            let path = out.unwrap_or(cfg.paths.hmm.clone());
            ensure_parent(&path)?;
            fit.hmm.save(ranking.as_ref(), &path)?;
            println!(
                "{}",
                serde_json::json!({
                    "iterations": fit.log_likelihoods.len(),
                    "log_likelihood": fit.log_likelihoods.last(),
                    "ranked": ranking.is_some(),
                })
            );
        }
        Command::RankStates { dataset, hmm } => {
            let path = hmm.unwrap_or(cfg.paths.hmm.clone());
            let (model, _) = GaussianHmm::load(&path)?;
            let data = read_dataset(&dataset)?;
            let ranking = rank_states(&model, &data, cfg.hmm.window, cfg.hmm.hazard_map)?;
            model.save(Some(&ranking), &path)?;
            println!("{}", serde_json::to_string(&ranking)?);
        }
        Command::TrainDdpg { regime, episodes, hmm, out } => {
            let mut ddpg = cfg.ddpg.clone();
            if let Some(r) = regime {
                ddpg.regime = r;
            }
            let hazard = match (ddpg.regime, hmm) {
                (Regime::CollisionOnly, Some(p)) => Some(Arc::new(load_hazard(&p, &cfg)?)),
                (Regime::CollisionOnly, None) if cfg.paths.hmm.exists() => {
                    Some(Arc::new(load_hazard(&cfg.paths.hmm, &cfg)?))
                }
                _ => None,
            };
            let setup = TrainingSetup {
                world: &cfg.world,
                ddpg: &ddpg,
                reward: &cfg.reward,
                fusion: cfg.fusion,
                hazard,
                obs_dims: cfg.hmm.dims,
            };
            let outcome = run_training(&setup, episodes.unwrap_or(cfg.train.episodes), seed)?;
            let actor_path = out.unwrap_or_else(|| match ddpg.regime {
                Regime::CollisionOnly => cfg.paths.actor.clone(),
                _ => cfg.paths.raw_actor.clone(),
            });
            ensure_parent(&actor_path)?;
            outcome.learner.actor.save(&actor_path)?;
            ensure_parent(&cfg.paths.critic)?;
            outcome.learner.critic.save(&cfg.paths.critic)?;
            write_jsonl(&cfg.paths.curves, &outcome.curves)?;
            info!("actor written to {}", actor_path.display());
        }
        Command::Eval { policies, trials, out } => {
            let policies = policies.unwrap_or(cfg.eval.policies.clone());
            let mut settings = cfg.eval.settings();
            if let Some(t) = trials {
                settings.trials = t;
            }
            let assets = load_assets(&cfg, &policies)?;
            let mut trajectories = Vec::new();
            let report = evaluate(&policies, &settings, &cfg.world, &assets, seed, Some(&mut trajectories))?;
            let path = out.unwrap_or(cfg.paths.report.clone());
            ensure_parent(&path)?;
            fs::write(&path, report.to_csv())?;
            write_jsonl(&cfg.paths.episodes, &report.episodes)?;
            write_jsonl(&cfg.paths.trajectory, &trajectories)?;
            print!("{}", report.to_csv());
        }
        Command::Demo { policy, agents, out } => {
            let assets = load_assets(&cfg, &[policy])?;
            let n = agents.unwrap_or(cfg.eval.demo_agents);
            let world = make_scenario(n, ScenarioMode::for_agent_count(n), seed, &cfg.world)?;
            let mut log = Vec::new();
            let metrics =
                run_episode(policy, world, &assets, cfg.eval.horizon, cfg.world.speed_scale, 0, Some(&mut log))?;
            let path = out.unwrap_or(cfg.paths.trajectory.clone());
            write_jsonl(&path, &log)?;
            println!("{}", serde_json::to_string(&metrics)?);
        }
    }
    Ok(())
}

fn load_hazard(path: &Path, cfg: &RunConfig) -> Result<HazardModel> {
    let (hmm, ranking) = GaussianHmm::load(path)?;
    let ranking = ranking.ok_or_else(|| Error::Policy(format!("{} has no state ranking", path.display())))?;
    Ok(HazardModel { hmm, ranking, window: cfg.hmm.window })
}

/// Loads every checkpoint the requested policies need, failing before any episode runs.
pub fn load_assets(cfg: &RunConfig, policies: &[Policy]) -> Result<PolicyAssets> {
    let mut assets = PolicyAssets { fusion: cfg.fusion, orca: cfg.orca, ..Default::default() };
    if policies.contains(&Policy::Hnrn) {
        assets.hazard = Some(Arc::new(load_hazard(&cfg.paths.hmm, cfg)?));
        assets.hnrn_actor = Some(Arc::new(Mlp::load(&cfg.paths.actor)?));
    }
    if policies.contains(&Policy::RawDdpg) {
        assets.raw_actor = Some(Arc::new(Mlp::load(&cfg.paths.raw_actor)?));
    }
    for &p in policies {
        assets.check(p)?;
    }
    Ok(assets)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ObservationSeq>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Training(format!("{} holds no sequences", path.display())));
    }
    Ok(out)
}
