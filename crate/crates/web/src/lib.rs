//! Browser bindings: step a scenario under ORCA or target drive, inspect an agent's
//! laser scan and collision reward, and preview the hazard-weighted action fusion.

use hnrn::control::{fuse, target_drive_command, FusionParams};
use hnrn::hmm::{collision_reward, reduce_scan};
use hnrn::orca::{orca_actions, OrcaParams};
use hnrn::sim::{make_scenario, Action, AgentStatus, ScenarioMode, WorldConfig, WorldState};
use wasm_bindgen::prelude::*;

fn js_err(e: hnrn::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Simulation {
    world: WorldState,
    cfg: WorldConfig,
    orca: OrcaParams,
    use_orca: bool,
}

#[wasm_bindgen]
impl Simulation {
    /// Antipodal scenario for up to 16 agents, random placement above.
    #[wasm_bindgen(constructor)]
    pub fn new(n_agents: usize, seed: u64, use_orca: bool) -> Result<Simulation, JsError> {
        let cfg = WorldConfig::default();
        let world = make_scenario(n_agents, ScenarioMode::for_agent_count(n_agents), seed, &cfg).map_err(js_err)?;
        Ok(Simulation { world, cfg, orca: OrcaParams::default(), use_orca })
    }

    pub fn set_time_horizon(&mut self, seconds: f64) {
        self.orca.time_horizon = seconds;
    }

    /// Advances one control period; returns whether any agent is still moving.
    pub fn step(&mut self) -> Result<bool, JsError> {
        if !self.world.any_active() {
            return Ok(false);
        }
        let actions: Vec<Action> = if self.use_orca {
            orca_actions(&self.world, &self.orca, self.cfg.speed_scale).map_err(js_err)?
        } else {
            self.world
                .active_ids()
                .into_iter()
                .map(|id| target_drive_command(&self.world.agents[id].pose, self.world.agents[id].goal))
                .collect()
        };
        self.world.step(&actions, self.cfg.speed_scale).map_err(js_err)?;
        Ok(self.world.any_active())
    }

    /// Flat `[x, y, yaw, radius, goal_x, goal_y, status]` per agent; status 0 active, 1 reached, 2 collided.
    pub fn agents(&self) -> Vec<f64> {
        self.world
            .agents
            .iter()
            .flat_map(|a| {
                let status = match a.status {
                    AgentStatus::Active => 0.0,
                    AgentStatus::Reached => 1.0,
                    AgentStatus::Collided => 2.0,
                };
                [a.pose.x, a.pose.y, a.pose.yaw, a.radius, a.goal.x, a.goal.y, status]
            })
            .collect()
    }

    pub fn arena_half_extent(&self) -> f64 {
        self.world.arena_half_extent
    }

    pub fn elapsed(&self) -> f64 {
        self.world.elapsed()
    }

    /// Raw beam ranges of one agent, starting at its heading, counter-clockwise.
    pub fn scan(&self, agent: usize) -> Result<Vec<f64>, JsError> {
        Ok(self.world.cast_laser(agent).map_err(js_err)?.ranges)
    }

    /// Sector minima of one agent's scan.
    pub fn reduced_scan(&self, agent: usize, sectors: usize) -> Result<Vec<f64>, JsError> {
        let scan = self.world.cast_laser(agent).map_err(js_err)?;
        reduce_scan(&scan, sectors).map_err(js_err)
    }

    pub fn collision_reward(&self, agent: usize) -> Result<f64, JsError> {
        Ok(collision_reward(&self.world.cast_laser(agent).map_err(js_err)?))
    }
}

/// Fused `[v_x, v_z]` for the given target and avoidance commands.
#[wasm_bindgen]
pub fn fuse_preview(
    target_vx: f64,
    target_vz: f64,
    avoid_vx: f64,
    avoid_vz: f64,
    hazard: f64,
    lambda_1: f64,
    lambda_2: f64,
) -> Vec<f64> {
    let out = fuse(
        Action::new(target_vx, target_vz),
        Action::new(avoid_vx, avoid_vz),
        hazard,
        &FusionParams { lambda_1, lambda_2 },
    );
    vec![out.v_x, out.v_z]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orca_pair_finishes() {
        let mut sim = Simulation::new(2, 7, true).unwrap();
        let mut steps = 0;
        while sim.step().unwrap() && steps < 600 {
            steps += 1;
        }
        let agents = sim.agents();
        assert!(agents.chunks(7).all(|a| a[6] == 1.0));
    }

    #[test]
    fn fusion_preview_matches_core() {
        assert_eq!(fuse_preview(1.0, 0.0, -1.0, 0.0, 1.0, 1.0, 0.4), vec![0.6, 0.0]);
    }

    #[test]
    fn open_arena_scan_is_free() {
        let sim = Simulation::new(1, 0, false).unwrap();
        assert_eq!(sim.scan(0).unwrap().len(), 360);
        assert!(sim.collision_reward(0).unwrap() <= 0.0);
    }
}
