//! Geometry, agent dynamics, the discrete move set and the log-distance RSS
//! measurement model.

use std::f64::consts::FRAC_PI_4;
use std::ops::{Add, Sub};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Distances below this are treated as coincident positions.
pub const MIN_DISTANCE: f64 = 1e-6;

/// Number of moves produced by [`action_set`].
pub const ACTION_COUNT: usize = 24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("distance {distance:e} m between agent and node is below the {MIN_DISTANCE:e} m guard")]
    ZeroDistance { distance: f64 },
    #[error("horizontal move length must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("vertical move height must be non-negative and finite, got {0}")]
    InvalidClimb(f64),
}

/// A point in R^3, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance_to(&self, other: &Position) -> f64 {
        (*self - *other).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Position {
    type Output = Position;

    fn add(self, rhs: Position) -> Position {
        Position::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Position {
    type Output = Position;

    fn sub(self, rhs: Position) -> Position {
        Position::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

/// One admissible displacement of the agent, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlAction {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl ControlAction {
    pub const fn new(dx: f64, dy: f64, dz: f64) -> Self {
        Self { dx, dy, dz }
    }

    pub fn horizontal_norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn as_offset(&self) -> Position {
        Position::new(self.dx, self.dy, self.dz)
    }
}

/// True parameters of one sensor node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeGroundTruth {
    /// Path-loss exponent.
    pub gamma: f64,
    /// RSS at unit distance, dB.
    pub k_gain: f64,
    pub position: Position,
    /// Measurement noise variance, dB^2.
    pub noise_var: f64,
}

/// A single RSS reading taken by the agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    /// 1-based measurement round.
    pub step_index: usize,
    pub agent_pos: Position,
    /// 1-based node identifier.
    pub node_id: usize,
    pub rss_db: f64,
}

/// Ground truth for one simulated deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub nodes: Vec<NodeGroundTruth>,
    pub agent_start: Position,
    /// Multiplier on the noise standard deviation used when sampling readings;
    /// 0 gives noiseless readings while the model variances stay as stated.
    pub noise_scale: f64,
}

impl Scenario {
    pub fn noise_vars(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.noise_var).collect()
    }
}

/// Agent dynamics: the next position is the current one displaced by `u`.
pub fn apply_control(x: Position, u: ControlAction) -> Position {
    x + u.as_offset()
}

/// Rounds `value` to a multiple of `quantum` (a power of two).
fn snap(value: f64, quantum: f64) -> f64 {
    (value / quantum).round() * quantum
}

/// The 24 moves: eight headings at multiples of 45 degrees with horizontal
/// length `r`, each combined with a vertical step in `{-h, 0, +h}`.
///
/// Ordered by heading (0, 45, ..., 315 degrees), then by `dz` ascending.
/// Components are rounded to a power-of-two grid 2^-40 times the move scale,
/// so any sum of a few thousand moves is computed without rounding and a plan's
/// displacement does not depend on the order its moves are added in.
pub fn action_set(r: f64, h: f64) -> Result<Vec<ControlAction>, ModelError> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(ModelError::InvalidRadius(r));
    }
    if !(h >= 0.0 && h.is_finite()) {
        return Err(ModelError::InvalidClimb(h));
    }
    let scale = r.max(h);
    let quantum = 2f64.powi(scale.log2().ceil() as i32 - 40);
    let climbs = [-h, 0.0, h].map(|dz| snap(dz, quantum));
    let mut actions = Vec::with_capacity(ACTION_COUNT);
    for heading in 0..8 {
        let angle = heading as f64 * FRAC_PI_4;
        let dx = snap(r * angle.cos(), quantum);
        let dy = snap(r * angle.sin(), quantum);
        for &dz in &climbs {
            actions.push(ControlAction::new(dx, dy, dz));
        }
    }
    Ok(actions)
}

/// Distance between `x` and `s`, rejecting coincident points.
pub fn guarded_distance(x: &Position, s: &Position) -> Result<f64, ModelError> {
    let d = x.distance_to(s);
    if d < MIN_DISTANCE || !d.is_finite() {
        return Err(ModelError::ZeroDistance { distance: d });
    }
    Ok(d)
}

/// Mean received power `K - gamma * log10(d)`, dB.
pub fn mean_rss(x: &Position, node: &NodeGroundTruth) -> Result<f64, ModelError> {
    let d = guarded_distance(x, &node.position)?;
    Ok(node.k_gain - node.gamma * d.log10())
}

/// One noisy reading: the mean plus a Gaussian draw of variance `noise_var`.
pub fn sample_measurement<R: Rng + ?Sized>(
    x: &Position,
    node: &NodeGroundTruth,
    rng: &mut R,
) -> Result<f64, ModelError> {
    let mean = mean_rss(x, node)?;
    let z: f64 = rng.sample(StandardNormal);
    Ok(mean + node.noise_var.sqrt() * z)
}
