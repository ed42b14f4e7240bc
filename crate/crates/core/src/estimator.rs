//! Maximum-likelihood estimation of every node's path-loss parameters and
//! position from the accumulated RSS readings.
//!
//! The negative log-likelihood is a weighted sum of squared residuals. Node
//! `j`'s parameters only enter the residuals of node `j`'s readings, so the
//! joint problem splits into `M` independent five-dimensional problems, each
//! solved with Polak-Ribiere (PR+) nonlinear conjugate gradient and a
//! backtracking Armijo line search.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fisher::mu_and_gradient;
use crate::model::{guarded_distance, ModelError, MeasurementRecord, NodeGroundTruth, Position};
use crate::seeds::stream;

pub const PARAMS_PER_NODE: usize = 5;
pub const IDX_GAMMA: usize = 0;
pub const IDX_K: usize = 1;
pub const IDX_SX: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("parameter vector length {0} is not a positive multiple of 5")]
    BadLength(usize),
    #[error("parameter vector contains a non-finite entry at index {0}")]
    NonFiniteParam(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("measurement {index} refers to node {node_id}, valid ids are 1..={nodes}")]
    InvalidNode { index: usize, node_id: usize, nodes: usize },
    #[error("noise variance of node {node} must be positive, got {value}")]
    NonPositiveVariance { node: usize, value: f64 },
    #[error("dataset has {data} nodes but the parameter vector has {theta}")]
    NodeCountMismatch { data: usize, theta: usize },
    #[error("objective is not finite at iterate {iterate:?}")]
    NonFinite { iterate: Vec<f64> },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

/// Stacked parameters `[gamma_j, K_j, sx_j, sy_j, sz_j]` for `j = 1..M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn from_slice(values: &[f64]) -> Result<Self, EstimatorError> {
        Self::from_vec(values.to_vec())
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self, EstimatorError> {
        if values.is_empty() || !values.len().is_multiple_of(PARAMS_PER_NODE) {
            return Err(EstimatorError::BadLength(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EstimatorError::NonFiniteParam(i));
        }
        Ok(Self(values))
    }

    pub fn from_nodes(nodes: &[NodeGroundTruth]) -> Self {
        let mut v = Vec::with_capacity(nodes.len() * PARAMS_PER_NODE);
        for n in nodes {
            v.extend_from_slice(&[n.gamma, n.k_gain, n.position.x, n.position.y, n.position.z]);
        }
        Self(v)
    }

    pub fn node_count(&self) -> usize {
        self.0.len() / PARAMS_PER_NODE
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn node(&self, j: usize) -> &[f64] {
        &self.0[j * PARAMS_PER_NODE..(j + 1) * PARAMS_PER_NODE]
    }

    pub fn node_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.0[j * PARAMS_PER_NODE..(j + 1) * PARAMS_PER_NODE]
    }

    pub fn gamma(&self, j: usize) -> f64 {
        self.node(j)[IDX_GAMMA]
    }

    pub fn k_gain(&self, j: usize) -> f64 {
        self.node(j)[IDX_K]
    }

    pub fn position(&self, j: usize) -> Position {
        let n = self.node(j);
        Position::new(n[2], n[3], n[4])
    }
}

/// Readings plus the (known) per-node noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    measurements: Vec<MeasurementRecord>,
    noise_vars: Vec<f64>,
}

impl Dataset {
    pub fn new(
        measurements: Vec<MeasurementRecord>,
        noise_vars: Vec<f64>,
    ) -> Result<Self, EstimatorError> {
        for (node, &value) in noise_vars.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(EstimatorError::NonPositiveVariance { node: node + 1, value });
            }
        }
        let ds = Self { measurements: Vec::new(), noise_vars };
        let mut ds = ds;
        for m in measurements {
            ds.push(m)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, m: MeasurementRecord) -> Result<(), EstimatorError> {
        if m.node_id == 0 || m.node_id > self.noise_vars.len() {
            return Err(EstimatorError::InvalidNode {
                index: self.measurements.len(),
                node_id: m.node_id,
                nodes: self.noise_vars.len(),
            });
        }
        self.measurements.push(m);
        Ok(())
    }

    pub fn measurements(&self) -> &[MeasurementRecord] {
        &self.measurements
    }

    pub fn noise_vars(&self) -> &[f64] {
        &self.noise_vars
    }

    pub fn node_count(&self) -> usize {
        self.noise_vars.len()
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    fn check_theta(&self, theta: &ParamVector) -> Result<(), EstimatorError> {
        if theta.node_count() != self.node_count() {
            return Err(EstimatorError::NodeCountMismatch {
                data: self.node_count(),
                theta: theta.node_count(),
            });
        }
        Ok(())
    }

    fn split_by_node(&self) -> Vec<NodeData> {
        let mut per_node: Vec<NodeData> = self
            .noise_vars
            .iter()
            .map(|&noise_var| NodeData { positions: Vec::new(), rss: Vec::new(), noise_var })
            .collect();
        for m in &self.measurements {
            let nd = &mut per_node[m.node_id - 1];
            nd.positions.push(m.agent_pos);
            nd.rss.push(m.rss_db);
        }
        per_node
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Bound on the Euclidean norm of the full gradient.
    pub gradient_tolerance: f64,
    pub backtrack_contraction: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
    /// Iterations between steepest-descent restarts; 0 means the problem dimension.
    pub restart_interval: usize,
    /// Starts per node including the warm start.
    pub multistart: usize,
    pub jitter_position: f64,
    pub jitter_gamma: f64,
    pub jitter_k: f64,
    /// Initial estimate used before any data: path-loss exponent.
    pub init_gamma: f64,
    pub init_k: f64,
    /// Height at which initial node positions are placed.
    pub init_height: f64,
    /// Start each step from the previous estimate rather than the initial one.
    pub warm_start: bool,
    /// Optional `[low, high]` box on every path-loss exponent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_bounds: Option<[f64; 2]>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            backtrack_contraction: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 60,
            restart_interval: 0,
            multistart: 4,
            jitter_position: 30.0,
            jitter_gamma: 1.0,
            jitter_k: 3.0,
            init_gamma: 7.5,
            init_k: -20.0,
            init_height: 5.0,
            warm_start: true,
            gamma_bounds: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |msg: String| Err(EstimatorError::InvalidConfig(msg));
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1".into());
        }
        if !(self.gradient_tolerance > 0.0) {
            return bad(format!("gradient_tolerance must be positive, got {}", self.gradient_tolerance));
        }
        if !(self.backtrack_contraction > 0.0 && self.backtrack_contraction < 1.0) {
            return bad(format!(
                "backtrack_contraction must lie in (0, 1), got {}",
                self.backtrack_contraction
            ));
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return bad(format!(
                "sufficient_decrease must lie in (0, 1), got {}",
                self.sufficient_decrease
            ));
        }
        if self.multistart < 1 {
            return bad("multistart must be at least 1".into());
        }
        for (name, v) in [
            ("jitter_position", self.jitter_position),
            ("jitter_gamma", self.jitter_gamma),
            ("jitter_k", self.jitter_k),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if let Some([lo, hi]) = self.gamma_bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("gamma_bounds must be finite with low < high, got [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceStatus {
    GradientConverged,
    MaxIterations,
    /// The line search could not decrease the objective further.
    LineSearchStalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleOutcome {
    pub theta: ParamVector,
    pub objective: f64,
    pub gradient_norm: f64,
    pub status: ConvergenceStatus,
    /// Total CG iterations over all nodes and starts.
    pub iterations: usize,
}

struct NodeData {
    positions: Vec<Position>,
    rss: Vec<f64>,
    noise_var: f64,
}

impl NodeData {
    /// Sets the exponent and gain to their least-squares values with the
    /// node position held at `p`'s.
    fn profile(&self, p: &mut [f64; 5], bounds: Option<[f64; 2]>) {
        let s = Position::new(p[IDX_SX], p[IDX_SX + 1], p[IDX_SX + 2]);
        let mut logs = Vec::with_capacity(self.positions.len());
        for x in &self.positions {
            match guarded_distance(x, &s) {
                Ok(d) => logs.push(d.log10()),
                Err(_) => return,
            }
        }
        let n = logs.len() as f64;
        let lm = logs.iter().sum::<f64>() / n;
        let ym = self.rss.iter().sum::<f64>() / n;
        let sll: f64 = logs.iter().map(|l| (l - lm) * (l - lm)).sum();
        let sly: f64 = logs.iter().zip(&self.rss).map(|(l, y)| (l - lm) * (y - ym)).sum();
        if sll > 1e-12 * n {
            p[IDX_GAMMA] = -sly / sll;
        }
        clamp_gamma(p, bounds);
        p[IDX_K] = ym + p[IDX_GAMMA] * lm;
    }

    fn objective(&self, p: &[f64]) -> Result<f64, ModelError> {
        let mut sum = 0.0;
        for (x, &y) in self.positions.iter().zip(&self.rss) {
            let (mu, _) = mu_and_gradient(x, p)?;
            let r = y - mu;
            sum += r * r;
        }
        Ok(sum / (2.0 * self.noise_var))
    }

    /// Objective and gradient; fills `rows` with the per-reading mean gradients.
    fn evaluate(&self, p: &[f64], rows: &mut Vec<[f64; 5]>) -> Result<(f64, [f64; 5]), ModelError> {
        rows.clear();
        let mut sum = 0.0;
        let mut grad = [0.0; 5];
        for (x, &y) in self.positions.iter().zip(&self.rss) {
            let (mu, g) = mu_and_gradient(x, p)?;
            let r = y - mu;
            sum += r * r;
            for i in 0..5 {
                grad[i] -= r * g[i];
            }
            rows.push(g);
        }
        let w = 1.0 / self.noise_var;
        grad.iter_mut().for_each(|v| *v *= w);
        Ok((sum * 0.5 * w, grad))
    }
}

/// `sum_ij (y_ij - mu_ij)^2 / (2 sigma_j^2)`.
pub fn neg_log_likelihood(theta: &ParamVector, data: &Dataset) -> Result<f64, EstimatorError> {
    data.check_theta(theta)?;
    let mut total = 0.0;
    for m in data.measurements() {
        let j = m.node_id - 1;
        let (mu, _) = mu_and_gradient(&m.agent_pos, theta.node(j))?;
        let r = m.rss_db - mu;
        total += r * r / (2.0 * data.noise_vars()[j]);
    }
    Ok(total)
}

/// Analytic gradient of [`neg_log_likelihood`], in parameter-vector order.
pub fn nll_gradient(theta: &ParamVector, data: &Dataset) -> Result<Vec<f64>, EstimatorError> {
    data.check_theta(theta)?;
    let mut grad = vec![0.0; theta.len()];
    for m in data.measurements() {
        let j = m.node_id - 1;
        let (mu, g) = mu_and_gradient(&m.agent_pos, theta.node(j))?;
        let scale = (m.rss_db - mu) / data.noise_vars()[j];
        for i in 0..PARAMS_PER_NODE {
            grad[j * PARAMS_PER_NODE + i] -= scale * g[i];
        }
    }
    Ok(grad)
}

fn dot(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64; 5]) -> f64 {
    dot(a, a).sqrt()
}

struct CgRun {
    point: [f64; 5],
    objective: f64,
    gradient_norm: f64,
    status: ConvergenceStatus,
    iterations: usize,
}

fn clamp_gamma(p: &mut [f64; 5], bounds: Option<[f64; 2]>) {
    if let Some([lo, hi]) = bounds {
        p[IDX_GAMMA] = p[IDX_GAMMA].clamp(lo, hi);
    }
}

/// Gradient with the exponent component dropped when it presses against an
/// active bound.
fn projected(x: &[f64; 5], g: &[f64; 5], bounds: Option<[f64; 2]>) -> [f64; 5] {
    let mut pg = *g;
    if let Some([lo, hi]) = bounds {
        let v = x[IDX_GAMMA];
        if (v <= lo && g[IDX_GAMMA] > 0.0) || (v >= hi && g[IDX_GAMMA] < 0.0) {
            pg[IDX_GAMMA] = 0.0;
        }
    }
    pg
}

/// PR+ conjugate gradient on one node's subproblem, projected onto the
/// exponent bounds when they are set.
fn minimize_node(
    data: &NodeData,
    start: [f64; 5],
    cfg: &SolverConfig,
    tolerance: f64,
) -> Result<CgRun, [f64; 5]> {
    let restart = if cfg.restart_interval == 0 { PARAMS_PER_NODE } else { cfg.restart_interval };
    let bounds = cfg.gamma_bounds;
    let mut rows = Vec::with_capacity(data.positions.len());
    let mut x = start;
    clamp_gamma(&mut x, bounds);
    let (mut f, mut g) = match data.evaluate(&x, &mut rows) {
        Ok((f, g)) if f.is_finite() => (f, g),
        _ => return Err(x),
    };
    let mut pg = projected(&x, &g, bounds);
    let mut d = pg.map(|v| -v);
    let mut since_restart = 0;
    let mut status = ConvergenceStatus::MaxIterations;
    let mut iterations = 0;
    let mut last_alpha = 1.0;

    for _ in 0..cfg.max_iterations {
        if norm(&pg) <= tolerance {
            status = ConvergenceStatus::GradientConverged;
            break;
        }
        if pg[IDX_GAMMA] == 0.0 && g[IDX_GAMMA] != 0.0 {
            d[IDX_GAMMA] = 0.0;
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            d = pg.map(|v| -v);
            slope = dot(&g, &d);
            since_restart = 0;
        }
        // Gauss-Newton curvature along d gives the first trial step.
        let curvature: f64 =
            rows.iter().map(|row| dot(row, &d).powi(2)).sum::<f64>() / data.noise_var;
        let mut alpha = if curvature > 0.0 && curvature.is_finite() {
            -slope / curvature
        } else {
            last_alpha
        };

        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let mut trial: [f64; 5] = std::array::from_fn(|i| x[i] + alpha * d[i]);
            clamp_gamma(&mut trial, bounds);
            let step: [f64; 5] = std::array::from_fn(|i| trial[i] - x[i]);
            let decrease = dot(&g, &step);
            if let Ok(ft) = data.objective(&trial) {
                if ft.is_finite() && decrease < 0.0 && ft <= f + cfg.sufficient_decrease * decrease {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            alpha *= cfg.backtrack_contraction;
        }
        let Some((trial, _)) = accepted else {
            if since_restart == 0 {
                status = ConvergenceStatus::LineSearchStalled;
                break;
            }
            // retry once along steepest descent
            d = pg.map(|v| -v);
            since_restart = 0;
            continue;
        };
        let (f_new, g_new) = match data.evaluate(&trial, &mut rows) {
            Ok(v) if v.0.is_finite() => v,
            _ => return Err(trial),
        };
        let pg_new = projected(&trial, &g_new, bounds);
        iterations += 1;
        last_alpha = alpha;
        since_restart += 1;
        let gg = dot(&pg, &pg);
        let beta = if since_restart >= restart || gg == 0.0 {
            0.0
        } else {
            let diff: [f64; 5] = std::array::from_fn(|i| pg_new[i] - pg[i]);
            (dot(&pg_new, &diff) / gg).max(0.0)
        };
        if beta == 0.0 {
            since_restart = 0;
        }
        d = std::array::from_fn(|i| -pg_new[i] + beta * d[i]);
        x = trial;
        f = f_new;
        g = g_new;
        pg = pg_new;
    }
    if status == ConvergenceStatus::MaxIterations && norm(&pg) <= tolerance {
        status = ConvergenceStatus::GradientConverged;
    }
    Ok(CgRun { point: x, objective: f, gradient_norm: norm(&pg), status, iterations })
}

/// Multistart nonlinear-CG maximum-likelihood estimate.
///
/// Each node is started from `theta_init` and from `cfg.multistart - 1`
/// random perturbations of it drawn from `multistart_seed`; the start with the
/// lowest objective is kept per node.
pub fn estimate_mle(
    data: &Dataset,
    theta_init: &ParamVector,
    cfg: &SolverConfig,
    multistart_seed: u64,
) -> Result<MleOutcome, EstimatorError> {
    estimate_mle_anchored(data, std::slice::from_ref(theta_init), cfg, multistart_seed)
}

/// [`estimate_mle`] with several deterministic starts: perturbations are drawn
/// around the first anchor and every anchor is tried as given.
///
/// A start's path-loss exponent and gain are replaced by their closed-form
/// least-squares values for the start's node position, since the mean is
/// linear in both. Nodes with fewer readings than parameters keep the first
/// anchor's values.
pub fn estimate_mle_anchored(
    data: &Dataset,
    anchors: &[ParamVector],
    cfg: &SolverConfig,
    multistart_seed: u64,
) -> Result<MleOutcome, EstimatorError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(EstimatorError::EmptyDataset);
    }
    let Some(theta_init) = anchors.first() else {
        return Err(EstimatorError::BadLength(0));
    };
    for a in anchors {
        data.check_theta(a)?;
    }
    let nodes = data.node_count();
    let tolerance = cfg.gradient_tolerance / (nodes as f64).sqrt();
    let mut rng = stream(multistart_seed, &[]);
    let per_node = data.split_by_node();

    let mut theta = theta_init.clone();
    let mut objective = 0.0;
    let mut grad_sq = 0.0;
    let mut iterations = 0;
    let mut all_converged = true;
    let mut any_max_iter = false;

    for (j, nd) in per_node.iter().enumerate() {
        let warm: [f64; 5] = theta_init.node(j).try_into().expect("node slice has 5 entries");
        let mut starts = vec![warm];
        for _ in 1..cfg.multistart {
            let mut p = warm;
            p[IDX_GAMMA] += cfg.jitter_gamma * rng.random_range(-1.0..=1.0);
            p[IDX_K] += cfg.jitter_k * rng.random_range(-1.0..=1.0);
            for v in &mut p[IDX_SX..] {
                *v += cfg.jitter_position * rng.random_range(-1.0..=1.0);
            }
            starts.push(p);
        }
        for a in &anchors[1..] {
            let p: [f64; 5] = a.node(j).try_into().expect("node slice has 5 entries");
            if !starts.contains(&p) {
                starts.push(p);
            }
        }
        if nd.positions.len() < PARAMS_PER_NODE {
            continue;
        }
        for p in &mut starts {
            nd.profile(p, cfg.gamma_bounds);
        }
        let mut best: Option<CgRun> = None;
        let mut first_failure = None;
        for s in starts {
            match minimize_node(nd, s, cfg, tolerance) {
                Ok(run) => {
                    iterations += run.iterations;
                    if best.as_ref().is_none_or(|b| run.objective < b.objective) {
                        best = Some(run);
                    }
                }
                Err(point) => {
                    first_failure.get_or_insert(point);
                }
            }
        }
        let Some(run) = best else {
            let mut iterate = theta_init.as_slice().to_vec();
            iterate[j * PARAMS_PER_NODE..(j + 1) * PARAMS_PER_NODE]
                .copy_from_slice(&first_failure.unwrap_or(warm));
            return Err(EstimatorError::NonFinite { iterate });
        };
        theta.node_mut(j).copy_from_slice(&run.point);
        objective += run.objective;
        grad_sq += run.gradient_norm * run.gradient_norm;
        match run.status {
            ConvergenceStatus::GradientConverged => {}
            ConvergenceStatus::MaxIterations => {
                all_converged = false;
                any_max_iter = true;
            }
            ConvergenceStatus::LineSearchStalled => all_converged = false,
        }
    }
    let status = if all_converged {
        ConvergenceStatus::GradientConverged
    } else if any_max_iter {
        ConvergenceStatus::MaxIterations
    } else {
        ConvergenceStatus::LineSearchStalled
    };
    Ok(MleOutcome { theta, objective, gradient_norm: grad_sq.sqrt(), status, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mean_rss, sample_measurement, NodeGroundTruth};
    use rand_chacha::ChaCha8Rng;

    fn nodes() -> Vec<NodeGroundTruth> {
        vec![
            NodeGroundTruth { gamma: 6.0, k_gain: -20.0, position: Position::new(10.0, -30.0, 3.0), noise_var: 2.0 },
            NodeGroundTruth { gamma: 8.5, k_gain: -14.0, position: Position::new(-40.0, 25.0, 7.0), noise_var: 4.0 },
        ]
    }

    fn spread_positions(count: usize, rng: &mut ChaCha8Rng) -> Vec<Position> {
        (0..count)
            .map(|_| {
                Position::new(
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-100.0..100.0),
                    rng.random_range(15.0..60.0),
                )
            })
            .collect()
    }

    fn dataset(truth: &[NodeGroundTruth], positions: &[Position], noise: Option<&mut ChaCha8Rng>) -> Dataset {
        let mut recs = Vec::new();
        let mut noise = noise;
        for (i, x) in positions.iter().enumerate() {
            for (j, n) in truth.iter().enumerate() {
                let rss = match noise.as_deref_mut() {
                    Some(rng) => sample_measurement(x, n, rng).unwrap(),
                    None => mean_rss(x, n).unwrap(),
                };
                recs.push(MeasurementRecord { step_index: i + 1, agent_pos: *x, node_id: j + 1, rss_db: rss });
            }
        }
        Dataset::new(recs, truth.iter().map(|n| n.noise_var).collect()).unwrap()
    }

    #[test]
    fn param_vector_layout() {
        let t = ParamVector::from_nodes(&nodes());
        assert_eq!(t.len(), 10);
        assert_eq!(t.node(1), &[8.5, -14.0, -40.0, 25.0, 7.0]);
        assert_eq!(t.position(0), Position::new(10.0, -30.0, 3.0));
        assert!(ParamVector::from_slice(&[1.0; 7]).is_err());
        assert!(ParamVector::from_slice(&[]).is_err());
        assert!(matches!(
            ParamVector::from_slice(&[1.0, 2.0, f64::NAN, 0.0, 0.0]),
            Err(EstimatorError::NonFiniteParam(2))
        ));
    }

    #[test]
    fn dataset_rejects_bad_input() {
        let rec = MeasurementRecord { step_index: 1, agent_pos: Position::default(), node_id: 3, rss_db: 0.0 };
        assert!(matches!(Dataset::new(vec![rec], vec![1.0, 1.0]), Err(EstimatorError::InvalidNode { .. })));
        let rec0 = MeasurementRecord { node_id: 0, ..rec };
        assert!(Dataset::new(vec![rec0], vec![1.0]).is_err());
        assert!(Dataset::new(vec![], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn nll_examples() {
        let truth = nodes();
        let mut rng = stream(3, &[]);
        let pos = spread_positions(10, &mut rng);
        let clean = dataset(&truth, &pos, None);
        let theta = ParamVector::from_nodes(&truth);
        assert_eq!(neg_log_likelihood(&theta, &clean).unwrap(), 0.0);
        assert!(nll_gradient(&theta, &clean).unwrap().iter().all(|g| *g == 0.0));

        let x = Position::new(0.0, 0.0, 40.0);
        let mu = mean_rss(&x, &truth[0]).unwrap();
        let one = Dataset::new(
            vec![MeasurementRecord { step_index: 1, agent_pos: x, node_id: 1, rss_db: mu + 1.0 }],
            vec![2.0, 4.0],
        )
        .unwrap();
        assert!((neg_log_likelihood(&theta, &one).unwrap() - 0.25).abs() < 1e-12);

        let at_node = Dataset::new(
            vec![MeasurementRecord { step_index: 1, agent_pos: truth[0].position, node_id: 1, rss_db: mu }],
            vec![2.0, 4.0],
        )
        .unwrap();
        assert!(matches!(neg_log_likelihood(&theta, &at_node), Err(EstimatorError::Model(_))));
        assert!(nll_gradient(&theta, &at_node).is_err());
    }

    #[test]
    fn nll_matches_scalar_summation() {
        // three readings, hand-expanded residuals
        let truth = nodes();
        let xs = [Position::new(0.0, 0.0, 30.0), Position::new(50.0, 50.0, 40.0), Position::new(-20.0, 10.0, 20.0)];
        let ys = [-38.5, -52.25, -31.0];
        let ids = [1usize, 2, 1];
        let recs: Vec<MeasurementRecord> = (0..3)
            .map(|i| MeasurementRecord { step_index: i + 1, agent_pos: xs[i], node_id: ids[i], rss_db: ys[i] })
            .collect();
        let data = Dataset::new(recs, vec![2.0, 4.0]).unwrap();
        let theta = ParamVector::from_nodes(&truth);
        let mut expect = 0.0;
        for i in 0..3 {
            let n = &truth[ids[i] - 1];
            let d = ((xs[i].x - n.position.x).powi(2)
                + (xs[i].y - n.position.y).powi(2)
                + (xs[i].z - n.position.z).powi(2))
            .sqrt();
            let mu = n.k_gain - n.gamma * d.log10();
            expect += (ys[i] - mu).powi(2) / (2.0 * n.noise_var);
        }
        assert!((neg_log_likelihood(&theta, &data).unwrap() - expect).abs() < 1e-12 * expect);

        let grad = nll_gradient(&theta, &data).unwrap();
        let mut gk = 0.0;
        for i in [0usize, 2] {
            let mu = mean_rss(&xs[i], &truth[0]).unwrap();
            gk -= (ys[i] - mu) / 2.0;
        }
        assert!((grad[IDX_K] - gk).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = stream(17, &[]);
        for trial in 0..100 {
            let truth = nodes();
            let pos = spread_positions(8, &mut rng);
            let data = dataset(&truth, &pos, Some(&mut rng));
            let mut theta = ParamVector::from_nodes(&truth);
            for (i, v) in theta.0.iter_mut().enumerate() {
                *v += if i % 5 >= 2 { rng.random_range(-20.0..20.0) } else { rng.random_range(-1.0..1.0) };
            }
            let grad = nll_gradient(&theta, &data).unwrap();
            for i in 0..theta.len() {
                let h = 1e-5 * theta.0[i].abs().max(1.0);
                let mut hi = theta.clone();
                let mut lo = theta.clone();
                hi.0[i] += h;
                lo.0[i] -= h;
                let fd = (neg_log_likelihood(&hi, &data).unwrap() - neg_log_likelihood(&lo, &data).unwrap())
                    / (2.0 * h);
                let scale = grad[i].abs().max(fd.abs());
                assert!(
                    (grad[i] - fd).abs() <= 1e-6 * scale || (grad[i] - fd).abs() < 1e-9,
                    "trial {trial} index {i}: {} vs {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn recovers_truth_without_noise() {
        let truth = nodes();
        let mut rng = stream(23, &[]);
        let pos = spread_positions(30, &mut rng);
        let data = dataset(&truth, &pos, None);
        let exact = ParamVector::from_nodes(&truth);
        let init = ParamVector::from_vec(
            exact.as_slice().iter().map(|v| v * (1.0 + 0.1 * rng.random_range(-1.0..1.0))).collect(),
        )
        .unwrap();
        let out = estimate_mle(&data, &init, &SolverConfig::default(), 5).unwrap();
        let err = out
            .theta
            .as_slice()
            .iter()
            .zip(exact.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "max error {err}, status {:?}", out.status);
    }

    #[test]
    fn descent_from_truth_with_noise() {
        let truth = nodes();
        let mut rng = stream(29, &[]);
        let pos = spread_positions(20, &mut rng);
        let data = dataset(&truth, &pos, Some(&mut rng));
        let exact = ParamVector::from_nodes(&truth);
        let out = estimate_mle(&data, &exact, &SolverConfig::default(), 1).unwrap();
        assert!(out.objective <= neg_log_likelihood(&exact, &data).unwrap());
        assert!((neg_log_likelihood(&out.theta, &data).unwrap() - out.objective).abs() < 1e-9);
    }

    #[test]
    fn single_reading_converges() {
        let truth = nodes();
        let x = Position::new(0.0, 0.0, 40.0);
        let data = Dataset::new(
            vec![MeasurementRecord { step_index: 1, agent_pos: x, node_id: 1, rss_db: -41.0 }],
            vec![2.0, 4.0],
        )
        .unwrap();
        let out = estimate_mle(&data, &ParamVector::from_nodes(&truth), &SolverConfig::default(), 0).unwrap();
        assert_eq!(out.status, ConvergenceStatus::GradientConverged);
        assert!(out.gradient_norm <= 1e-6);
    }

    #[test]
    fn estimate_is_deterministic() {
        let truth = nodes();
        let mut rng = stream(31, &[]);
        let pos = spread_positions(12, &mut rng);
        let data = dataset(&truth, &pos, Some(&mut rng));
        let init = ParamVector::from_slice(&[7.5, -20.0, 0.0, 0.0, 5.0, 7.5, -20.0, 10.0, 10.0, 5.0]).unwrap();
        let a = estimate_mle(&data, &init, &SolverConfig::default(), 99).unwrap();
        let b = estimate_mle(&data, &init, &SolverConfig::default(), 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_data_is_rejected() {
        let data = Dataset::new(vec![], vec![1.0, 1.0]).unwrap();
        let init = ParamVector::from_nodes(&nodes());
        assert_eq!(estimate_mle(&data, &init, &SolverConfig::default(), 0), Err(EstimatorError::EmptyDataset));
    }

    #[test]
    fn iterates_descend_monotonically() {
        let truth = nodes();
        let mut rng = stream(37, &[]);
        let pos = spread_positions(15, &mut rng);
        let data = dataset(&truth, &pos, Some(&mut rng));
        let nd = &data.split_by_node()[0];
        let start = [7.5, -20.0, 0.0, 0.0, 5.0];
        let mut last = f64::INFINITY;
        for iters in 1..40 {
            let cfg = SolverConfig { max_iterations: iters, ..SolverConfig::default() };
            let run = minimize_node(nd, start, &cfg, 1e-12).unwrap();
            assert!(run.objective <= last);
            last = run.objective;
        }
    }
    #[test]
    fn gamma_bounds_hold_on_the_result() {
        let truth = nodes();
        let mut rng = stream(11, &[]);
        let positions = spread_positions(8, &mut rng);
        let data = dataset(&truth, &positions, Some(&mut rng));
        let start = ParamVector::from_slice(&[7.0, -18.0, 0.0, 0.0, 5.0, 7.0, -18.0, 0.0, 0.0, 5.0]).unwrap();
        for bounds in [[6.5, 7.5], [5.0, 10.0], [8.8, 9.0]] {
            let cfg = SolverConfig { gamma_bounds: Some(bounds), ..Default::default() };
            let out = estimate_mle(&data, &start, &cfg, 5).unwrap();
            for j in 0..2 {
                let g = out.theta.gamma(j);
                assert!(g >= bounds[0] && g <= bounds[1], "gamma {g} outside {bounds:?}");
            }
        }
        let bad = SolverConfig { gamma_bounds: Some([3.0, 3.0]), ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn interior_bounds_do_not_change_a_noiseless_fit() {
        let truth = nodes();
        let mut rng = stream(3, &[]);
        let positions = spread_positions(40, &mut rng);
        let data = dataset(&truth, &positions, None);
        let start = ParamVector::from_nodes(&truth);
        let cfg = SolverConfig { gamma_bounds: Some([5.0, 10.0]), ..Default::default() };
        let out = estimate_mle(&data, &start, &cfg, 1).unwrap();
        for (a, b) in out.theta.as_slice().iter().zip(start.as_slice()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn anchored_estimate_is_no_worse_than_any_single_anchor() {
        let truth = nodes();
        let mut rng = stream(21, &[]);
        let positions = spread_positions(12, &mut rng);
        let data = dataset(&truth, &positions, Some(&mut rng));
        let a = ParamVector::from_slice(&[7.0, -18.0, 80.0, 80.0, 5.0, 7.0, -18.0, -80.0, -80.0, 5.0]).unwrap();
        let b = ParamVector::from_slice(&[7.0, -18.0, -60.0, 10.0, 5.0, 7.0, -18.0, 60.0, -10.0, 5.0]).unwrap();
        let cfg = SolverConfig { multistart: 1, ..Default::default() };
        let both = estimate_mle_anchored(&data, &[a.clone(), b.clone()], &cfg, 9).unwrap();
        for single in [a, b] {
            let one = estimate_mle(&data, &single, &cfg, 9).unwrap();
            assert!(both.objective <= one.objective + 1e-9 * one.objective.abs().max(1.0));
        }
        assert!(matches!(estimate_mle_anchored(&data, &[], &cfg, 9), Err(EstimatorError::BadLength(0))));
    }

    #[test]
    fn underdetermined_nodes_keep_the_warm_start() {
        let truth = nodes();
        let mut rng = stream(2, &[]);
        let positions = spread_positions(3, &mut rng);
        let data = dataset(&truth, &positions, Some(&mut rng));
        let start = ParamVector::from_slice(&[7.0, -18.0, 1.0, 2.0, 5.0, 7.5, -19.0, 3.0, 4.0, 5.0]).unwrap();
        let out = estimate_mle(&data, &start, &SolverConfig::default(), 4).unwrap();
        assert_eq!(out.theta, start);
    }
}
