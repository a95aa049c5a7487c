//! Low-level control: the analytic target-drive law, hazard-weighted action fusion,
//! and the assembled hierarchical policy.
//!
//! `target_drive` is written in the controller's axis convention, where the heading
//! error is `atan2(ΔX, ΔY) − yaw`. The simulator measures yaw from +x, so its
//! coordinates enter the controller with the two axes swapped; see [`to_controller_frame`].

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ddpg::{observation_for, GOAL_FEATURES};
use crate::error::Result;
use crate::geom::{wrap_angle, Vec2};
use crate::hmm::{classify, reduce_scan, GaussianHmm, StateRanking};
use crate::neural::Mlp;
use crate::sim::{clamp_unit, Action, LaserScan, Pose2D};

/// Heading errors this close to ±π count as "goal directly behind".
pub const REAR_TIE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionParams {
    pub lambda_1: f64,
    pub lambda_2: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams { lambda_1: 1.0, lambda_2: 0.4 }
    }
}

/// Heading error toward `goal`, wrapped into (-π, π]. Both arguments are in controller axes.
pub fn desired_angle(pose: &Pose2D, goal: Vec2) -> f64 {
    wrap_angle((goal.x - pose.x).atan2(goal.y - pose.y) - pose.yaw)
}

/// Target-drive command: forward = cos(heading error), turn = sin(heading error).
/// A goal on top of the agent yields the zero action.
pub fn target_drive(pose: &Pose2D, goal: Vec2) -> Action {
    if goal.x == pose.x && goal.y == pose.y {
        return Action::ZERO;
    }
    let angle = desired_angle(pose, goal);
    // sin(π) is not exactly zero in floating point
    let turn = if PI - angle.abs() < 1e-12 { 0.0 } else { angle.sin() };
    Action::new(angle.cos(), turn)
}

/// Maps a simulator pose (yaw from +x, counter-clockwise) into controller axes.
pub fn to_controller_frame(pose: &Pose2D) -> Pose2D {
    Pose2D { x: pose.y, y: pose.x, yaw: pose.yaw }
}

pub fn point_to_controller_frame(p: Vec2) -> Vec2 {
    Vec2::new(p.y, p.x)
}

/// Closed-loop target drive on simulator coordinates. A goal exactly behind the agent
/// has sin(π) = 0 and would never turn, so that case commands a full left turn.
pub fn target_drive_command(pose: &Pose2D, goal: Vec2) -> Action {
    let cpose = to_controller_frame(pose);
    let cgoal = point_to_controller_frame(goal);
    let mut action = target_drive(&cpose, cgoal);
    if action != Action::ZERO && desired_angle(&cpose, cgoal).abs() > PI - REAR_TIE_EPS {
        action.v_z = 1.0;
    }
    action
}

/// v = λ1·v_target + λ2·λ_s·v_collision, clamped per component.
pub fn fuse(v_target: Action, v_collision: Action, hazard: f64, params: &FusionParams) -> Action {
    let w = params.lambda_2 * hazard;
    Action {
        v_x: clamp_unit(params.lambda_1 * v_target.v_x + w * v_collision.v_x),
        v_z: clamp_unit(params.lambda_1 * v_target.v_z + w * v_collision.v_z),
    }
}

/// Trained hazard evaluator shared read-only by all agents.
#[derive(Debug, Clone)]
pub struct HazardModel {
    pub hmm: GaussianHmm,
    pub ranking: StateRanking,
    pub window: usize,
}

impl HazardModel {
    pub fn dims(&self) -> usize {
        self.hmm.dims()
    }
}

/// Per-agent sliding window of reduced scans.
#[derive(Debug, Clone)]
pub struct HazardTracker {
    frames: VecDeque<Vec<f64>>,
    capacity: usize,
}

impl HazardTracker {
    pub fn new(capacity: usize) -> Self {
        HazardTracker { frames: VecDeque::with_capacity(capacity.max(1)), capacity: capacity.max(1) }
    }

    pub fn push(&mut self, frame: Vec<f64>) {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn frames(&self) -> Vec<Vec<f64>> {
        self.frames.iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Pushes a reduced scan and classifies the window.
    pub fn observe(&mut self, model: &HazardModel, reduced: Vec<f64>) -> Result<(usize, f64)> {
        self.push(reduced);
        let frames: Vec<Vec<f64>> = self.frames.iter().cloned().collect();
        classify(&model.hmm, &model.ranking, &frames)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub state_id: usize,
    pub hazard: f64,
}

/// Hierarchical policy for one agent.
#[derive(Debug, Clone)]
pub struct HnrnPolicy {
    pub hazard: Arc<HazardModel>,
    pub actor: Arc<Mlp>,
    pub fusion: FusionParams,
    tracker: HazardTracker,
}

impl HnrnPolicy {
    pub fn new(hazard: Arc<HazardModel>, actor: Arc<Mlp>, fusion: FusionParams) -> Result<Self> {
        let d = hazard.dims();
        if (actor.input_dim() != d && actor.input_dim() != d + GOAL_FEATURES) || actor.output_dim() != 2 {
            return Err(crate::error::Error::Policy(format!(
                "actor shape {:?} does not fit {}-dimensional observations",
                actor.layer_dims(),
                hazard.dims()
            )));
        }
        let tracker = HazardTracker::new(hazard.window);
        Ok(HnrnPolicy { hazard, actor, fusion, tracker })
    }

    pub fn window(&self) -> Vec<Vec<f64>> {
        self.tracker.frames()
    }

    /// One decision: classify the scan window, compute both low-level actions, fuse.
    pub fn act(&mut self, scan: &LaserScan, pose: &Pose2D, goal: Vec2) -> Result<(Action, Diagnostics)> {
        let reduced = reduce_scan(scan, self.hazard.dims())?;
        let input = observation_for(&self.actor, &reduced, scan.max_range, *pose, goal)?;
        let (state_id, hazard) = self.tracker.observe(&self.hazard, reduced)?;
        let v_target = target_drive_command(pose, goal);
        let out = self.actor.forward(&input)?;
        let v_collision = Action::new(out[0], out[1]);
        Ok((fuse(v_target, v_collision, hazard, &self.fusion), Diagnostics { state_id, hazard }))
    }
}

pub fn hnrn_act(policy: &mut HnrnPolicy, scan: &LaserScan, pose: &Pose2D, goal: Vec2) -> Result<(Action, Diagnostics)> {
    policy.act(scan, pose, goal)
}
