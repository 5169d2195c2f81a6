//! Toy continuous-control environments with known reversibility structure.
//!
//! * `PointMaze`: a damped point mass in the square `[-1, 1]^2` with one
//!   internal wall block. In the `symmetric` regime the mass is frictionless
//!   and displacement-controlled (it comes to rest after every step), so
//!   `step(step(s, a), -a) == s` away from walls.
//! * `CliffWalker1D`: a walker on a line with a posture variable. Crossing
//!   the cliff edge is irreversible: posture decays towards zero whatever
//!   the action and reward drops to zero until the episode ends.

mod dynamics;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dynamics::{reverse_action_oracle, transition, EnvState, Transition};

use crate::error::{Error, Result};
use crate::numcore::{seeded, Rng as RunRng};

/// Arena half-width for PointMaze.
pub const ARENA: f64 = 1.0;
/// Interior wall block `[x0, x1] x [y0, y1]`.
pub const WALL_BLOCK: [f64; 4] = [-0.1, 0.1, -1.0, 0.3];
pub const MAZE_GOAL: [f64; 2] = [0.6, 0.6];
pub const CLIFF_EDGE: f64 = 1.0;
pub const CLIFF_GOAL: f64 = 0.8;
pub const CLIFF_LEFT_WALL: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointMaze,
    CliffWalker1d,
}

/// Environment description. All physics values must be positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub mass: f64,
    pub friction: f64,
    /// CliffWalker1D: posture decay rate once fallen. Unused by PointMaze.
    pub stiffness: f64,
    /// Constant added to every reward.
    pub reward_offset: f64,
    pub dt: f64,
    /// Raw simulator steps per episode.
    pub max_episode_steps: usize,
    pub action_repeat: usize,
    /// Extra observation dimensions filled with uniform noise.
    pub distractors: usize,
    /// PointMaze only: frictionless displacement control.
    pub symmetric: bool,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self::point_maze()
    }
}

impl EnvSpec {
    pub fn point_maze() -> Self {
        Self {
            kind: EnvKind::PointMaze,
            mass: 1.0,
            friction: 0.5,
            stiffness: 1.0,
            reward_offset: 0.0,
            dt: 0.1,
            max_episode_steps: 200,
            action_repeat: 2,
            distractors: 0,
            symmetric: false,
        }
    }

    pub fn cliff_walker() -> Self {
        Self {
            kind: EnvKind::CliffWalker1d,
            stiffness: 7.0,
            friction: 1.0,
            ..Self::point_maze()
        }
    }

    pub fn obs_dim(&self) -> usize {
        let base = match self.kind {
            EnvKind::PointMaze => 4,
            EnvKind::CliffWalker1d => 2,
        };
        base + self.distractors
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            EnvKind::PointMaze => 2,
            EnvKind::CliffWalker1d => 1,
        }
    }

    /// Agent-level steps per episode after action repeat.
    pub fn agent_steps_per_episode(&self) -> usize {
        self.max_episode_steps.div_ceil(self.action_repeat)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mass", self.mass),
            ("stiffness", self.stiffness),
            ("dt", self.dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.friction >= 0.0 && self.friction.is_finite()) {
            return Err(Error::contract("friction must be non-negative"));
        }
        if !self.reward_offset.is_finite() {
            return Err(Error::contract("reward_offset must be finite"));
        }
        if self.max_episode_steps == 0 || self.action_repeat == 0 {
            return Err(Error::contract(
                "max_episode_steps and action_repeat must be positive",
            ));
        }
        Ok(())
    }

    /// Apply a set of changes, returning the new spec.
    pub fn perturb(&self, changes: &Perturbation) -> Result<EnvSpec> {
        let mut out = self.clone();
        for (name, v) in [
            ("mass", changes.mass),
            ("friction", changes.friction),
            ("stiffness", changes.stiffness),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::contract(format!(
                        "perturbed {name} must be positive, got {v}"
                    )));
                }
            }
        }
        if let Some(m) = changes.mass {
            out.mass = m;
        }
        if let Some(f) = changes.friction {
            out.friction = f;
        }
        if let Some(s) = changes.stiffness {
            out.stiffness = s;
        }
        if let Some(r) = changes.reward_offset {
            out.reward_offset += r;
        }
        Ok(out)
    }
}

/// A change set over reward offset (R), mass (M), friction (F), stiffness (S).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Perturbation {
    pub name: Option<String>,
    pub reward_offset: Option<f64>,
    pub mass: Option<f64>,
    pub friction: Option<f64>,
    pub stiffness: Option<f64>,
}

impl Perturbation {
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut parts = Vec::new();
        if let Some(v) = self.reward_offset {
            parts.push(format!("R={v}"));
        }
        if let Some(v) = self.mass {
            parts.push(format!("M={v}"));
        }
        if let Some(v) = self.friction {
            parts.push(format!("F={v}"));
        }
        if let Some(v) = self.stiffness {
            parts.push(format!("S={v}"));
        }
        if parts.is_empty() {
            "base".to_string()
        } else {
            parts.join(";")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    /// Ground truth: an irreversible transition has happened this episode.
    pub irreversible_flag: bool,
}

/// A running environment instance.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    state: EnvState,
    rng: RunRng,
    steps: usize,
    terminal: bool,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let state = EnvState::initial(&spec);
        Ok(Self {
            spec,
            state,
            rng: seeded(0),
            steps: 0,
            terminal: true,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn reset(&mut self, seed: u64) -> StepResult {
        self.rng = seeded(seed);
        self.state = match self.spec.kind {
            EnvKind::PointMaze => loop {
                let x = self.rng.gen_range(-0.9..0.9);
                let y = self.rng.gen_range(-0.9..0.9);
                if !dynamics::inside_block(x, y) {
                    break EnvState::maze(x, y, 0.0, 0.0);
                }
            },
            EnvKind::CliffWalker1d => EnvState::cliff(self.rng.gen_range(-0.5..0.5), 1.0),
        };
        self.steps = 0;
        self.terminal = false;
        StepResult {
            observation: self.observe(),
            reward: 0.0,
            terminal: false,
            irreversible_flag: false,
        }
    }

    fn observe(&mut self) -> Vec<f64> {
        let mut obs = self.state.features();
        for _ in 0..self.spec.distractors {
            obs.push(self.rng.gen_range(-1.0..1.0));
        }
        obs
    }

    /// One raw simulator step. Actions are clamped to `[-1, 1]`.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.terminal {
            return Err(Error::contract("step called on a terminal episode"));
        }
        if action.len() != self.spec.action_dim() {
            return Err(Error::contract(format!(
                "action has {} entries, expected {}",
                action.len(),
                self.spec.action_dim()
            )));
        }
        let tr = transition(&self.spec, &self.state, action);
        self.state = tr.next;
        self.steps += 1;
        self.terminal = self.steps >= self.spec.max_episode_steps;
        Ok(StepResult {
            observation: self.observe(),
            reward: tr.reward,
            terminal: self.terminal,
            irreversible_flag: self.state.fallen(),
        })
    }

    /// Repeat one action `action_repeat` times, summing rewards.
    pub fn step_repeat(&mut self, action: &[f64]) -> Result<StepResult> {
        let mut total = 0.0;
        let mut last = None;
        for _ in 0..self.spec.action_repeat {
            let r = self.step(action)?;
            total += r.reward;
            let done = r.terminal;
            last = Some(r);
            if done {
                break;
            }
        }
        let mut r = last.expect("action_repeat >= 1");
        r.reward = total;
        Ok(r)
    }
}
