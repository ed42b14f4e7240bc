//! Receding-horizon control: measure, estimate, plan over `T` steps, apply the
//! first move, repeat.

mod search;

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{estimate_mle_anchored, ConvergenceStatus, Dataset, EstimatorError, ParamVector, SolverConfig};
use crate::fisher::{cost_j1, fim_joint_blocks, Block, FisherError, HorizonCostConfig, InfoMatrix};
use crate::model::{action_set, apply_control, ControlAction, MeasurementRecord, ModelError, Position, Scenario};
use crate::seeds::{derive_seed, stream, TAG_MULTISTART, TAG_NOISE, TAG_POLICY};

use search::Context;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fisher(#[from] FisherError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("the action set is empty")]
    EmptyActions,
    #[error("exhaustive search would score {candidates} plans, above the cap of {cap}; use the dp_pruned strategy or a shorter horizon")]
    TooManyPlans { candidates: f64, cap: f64 },
    #[error("every candidate plan at step {step} from position ({x}, {y}, {z}) has a non-finite cost")]
    NoFinitePlan { step: usize, x: f64, y: f64, z: f64 },
    #[error("invalid planner configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Greedy,
    Dp,
    DpPruned,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Greedy => "greedy",
            Strategy::Dp => "dp",
            Strategy::DpPruned => "dp_pruned",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    #[serde(rename = "horizon_T")]
    pub horizon_t: usize,
    /// Beam width of the pruned search.
    #[serde(rename = "prune_width_Mu")]
    pub prune_width_mu: usize,
    pub strategy: Strategy,
    pub use_penalty: bool,
    /// Horizontal move length, meters.
    pub action_radius: f64,
    /// Vertical move height, meters.
    pub action_climb: f64,
    /// Largest number of complete plans exhaustive search may score.
    pub dp_max_evaluations: f64,
    /// Hold the estimate at its initial value for the whole run.
    pub freeze_estimate: bool,
    #[serde(skip)]
    pub cost: HorizonCostConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon_t: 5,
            prune_width_mu: 24,
            strategy: Strategy::Dp,
            use_penalty: false,
            action_radius: 10.0,
            action_climb: 3.0,
            dp_max_evaluations: 1e9,
            freeze_estimate: false,
            cost: HorizonCostConfig::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.horizon_t < 1 {
            return Err(PlannerError::InvalidConfig("horizon_T must be at least 1".into()));
        }
        if self.prune_width_mu < 1 {
            return Err(PlannerError::InvalidConfig("prune_width_Mu must be at least 1".into()));
        }
        if !(self.dp_max_evaluations >= 1.0) {
            return Err(PlannerError::InvalidConfig(format!(
                "dp_max_evaluations must be at least 1, got {}",
                self.dp_max_evaluations
            )));
        }
        action_set(self.action_radius, self.action_climb)?;
        self.cost.validate()?;
        Ok(())
    }

    pub fn actions(&self) -> Result<Vec<ControlAction>, PlannerError> {
        Ok(action_set(self.action_radius, self.action_climb)?)
    }
}

/// What the planner knows before choosing the next move.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub position: Position,
    /// Information collected so far, evaluated at `theta_hat`.
    pub accumulated: InfoMatrix,
    pub theta_hat: ParamVector,
    /// Measurement rounds taken so far.
    pub step: usize,
    pub dataset: Dataset,
}

impl AgentState {
    fn context(&self, cfg: &PlannerConfig) -> Result<Context<'_>, PlannerError> {
        let m = self.theta_hat.node_count();
        if self.accumulated.dim() != self.theta_hat.len() {
            return Err(FisherError::DimensionMismatch {
                expected: self.theta_hat.len(),
                found: self.accumulated.dim(),
            }
            .into());
        }
        let noise_vars = self.dataset.noise_vars();
        if noise_vars.len() != m {
            return Err(EstimatorError::NodeCountMismatch { data: noise_vars.len(), theta: m }.into());
        }
        let eps = cfg.cost.epsilon_reg.resolve(&self.accumulated);
        Ok(Context::new(
            &self.theta_hat,
            self.position,
            self.accumulated.blocks(),
            eps,
            noise_vars,
            &cfg.cost,
            cfg.horizon_t,
            self.step,
            cfg.use_penalty,
        ))
    }

    fn no_plan(&self) -> PlannerError {
        let p = self.position;
        PlannerError::NoFinitePlan { step: self.step, x: p.x, y: p.y, z: p.z }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    /// Indices into the action list, one per planned stage.
    pub indices: Vec<usize>,
    pub actions: Vec<ControlAction>,
    /// Horizon cost of the chosen plan; NaN for random selection.
    pub cost: f64,
    /// `stage_evaluations[i]` counts the prefixes of length `i + 1` that were
    /// built or scored.
    pub stage_evaluations: Vec<u64>,
}

impl PlanOutcome {
    fn new(indices: Vec<usize>, actions: &[ControlAction], cost: f64, stage_evaluations: Vec<u64>) -> Self {
        let chosen = indices.iter().map(|&i| actions[i]).collect();
        Self { indices, actions: chosen, cost, stage_evaluations }
    }

    /// Complete plans scored: the count at the last stage.
    pub fn plan_evaluations(&self) -> u64 {
        self.stage_evaluations.last().copied().unwrap_or(0)
    }

    pub fn total_evaluations(&self) -> u64 {
        self.stage_evaluations.iter().sum()
    }
}

/// Uniformly random move.
pub fn random_step<R: Rng + ?Sized>(actions: &[ControlAction], rng: &mut R) -> Result<PlanOutcome, PlannerError> {
    if actions.is_empty() {
        return Err(PlannerError::EmptyActions);
    }
    let i = rng.random_range(0..actions.len());
    Ok(PlanOutcome::new(vec![i], actions, f64::NAN, vec![1]))
}

/// The move minimizing the one-step horizon cost; ties go to the lowest index.
pub fn greedy_step(
    state: &AgentState,
    actions: &[ControlAction],
    cfg: &PlannerConfig,
) -> Result<PlanOutcome, PlannerError> {
    if actions.is_empty() {
        return Err(PlannerError::EmptyActions);
    }
    let one = PlannerConfig { horizon_t: 1, ..*cfg };
    let ctx = state.context(&one)?;
    let found = search::beam(&ctx, actions, 1, 1)?.ok_or_else(|| state.no_plan())?;
    Ok(PlanOutcome::new(found.indices, actions, found.cost, found.stage_evaluations))
}

/// Exhaustive search over all `N_u^T` plans; ties go to the lexicographically
/// smallest index sequence.
pub fn dp_plan(
    state: &AgentState,
    actions: &[ControlAction],
    cfg: &PlannerConfig,
) -> Result<PlanOutcome, PlannerError> {
    if actions.is_empty() {
        return Err(PlannerError::EmptyActions);
    }
    cfg.validate_horizon()?;
    let candidates = (actions.len() as f64).powi(cfg.horizon_t as i32);
    if candidates > cfg.dp_max_evaluations {
        return Err(PlannerError::TooManyPlans { candidates, cap: cfg.dp_max_evaluations });
    }
    let ctx = state.context(cfg)?;
    let found = search::exhaustive(&ctx, actions, cfg.horizon_t)?.ok_or_else(|| state.no_plan())?;
    Ok(PlanOutcome::new(found.indices, actions, found.cost, found.stage_evaluations))
}

/// Beam search keeping the `prune_width_Mu` best prefixes at every stage.
pub fn dp_pruned_plan(
    state: &AgentState,
    actions: &[ControlAction],
    cfg: &PlannerConfig,
) -> Result<PlanOutcome, PlannerError> {
    if actions.is_empty() {
        return Err(PlannerError::EmptyActions);
    }
    cfg.validate_horizon()?;
    let ctx = state.context(cfg)?;
    let found = search::beam(&ctx, actions, cfg.horizon_t, cfg.prune_width_mu)?
        .ok_or_else(|| state.no_plan())?;
    Ok(PlanOutcome::new(found.indices, actions, found.cost, found.stage_evaluations))
}

impl PlannerConfig {
    fn validate_horizon(&self) -> Result<(), PlannerError> {
        if self.horizon_t < 1 || self.prune_width_mu < 1 {
            return Err(PlannerError::InvalidConfig("horizon_T and prune_width_Mu must be at least 1".into()));
        }
        Ok(())
    }
}

/// Dispatches on `cfg.strategy`.
pub fn plan<R: Rng + ?Sized>(
    state: &AgentState,
    actions: &[ControlAction],
    cfg: &PlannerConfig,
    rng: &mut R,
) -> Result<PlanOutcome, PlannerError> {
    match cfg.strategy {
        Strategy::Random => random_step(actions, rng),
        Strategy::Greedy => greedy_step(state, actions, cfg),
        Strategy::Dp => dp_plan(state, actions, cfg),
        Strategy::DpPruned => dp_pruned_plan(state, actions, cfg),
    }
}

/// Sum of the per-measurement information at `positions`, evaluated at `theta`.
pub fn information_along(
    positions: &[Position],
    theta: &ParamVector,
    noise_vars: &[f64],
) -> Result<InfoMatrix, FisherError> {
    let mut blocks: Vec<Block> = vec![[[0.0; 5]; 5]; theta.node_count()];
    for x in positions {
        for (acc, b) in blocks.iter_mut().zip(fim_joint_blocks(x, theta, noise_vars)?) {
            for r in 0..5 {
                for c in 0..5 {
                    acc[r][c] += b[r][c];
                }
            }
        }
    }
    Ok(InfoMatrix::from_blocks(&blocks))
}

/// Seeds identifying one run inside an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub master: u64,
    pub realization: u64,
}

/// Estimator outcome at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    /// `None` when estimation was skipped or failed.
    pub status: Option<ConvergenceStatus>,
    pub objective: Option<f64>,
    pub iterations: usize,
    /// Failure message; the previous estimate was kept.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based measurement round.
    pub step: usize,
    /// Where the readings of this round were taken.
    pub position: Position,
    pub rss_db: Vec<f64>,
    pub theta_hat: ParamVector,
    pub estimate: EstimateRecord,
    /// `tr(F_k^-1)` at the current estimate; `None` when `F_k` is singular.
    pub fitness: Option<f64>,
    /// `tr((F_k + eps I)^-1)` with the configured regularizer.
    pub fitness_regularized: f64,
    /// Planned indices into the action list; only the first is applied.
    pub plan: Vec<usize>,
    pub plan_cost: Option<f64>,
    pub applied: ControlAction,
    pub stage_evaluations: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub theta_init: ParamVector,
    pub steps: Vec<StepRecord>,
    /// Position after the last applied move.
    pub final_position: Position,
    pub final_theta: ParamVector,
    /// Wall-clock seconds spent in each planning call; kept out of the
    /// serialized record so logs stay reproducible.
    #[serde(skip)]
    pub planning_seconds: Vec<f64>,
}

/// Runs `steps` rounds of measure, estimate, plan and move.
///
/// The reading from node `j` at round `k` uses the noise substream
/// `(realization, k, j)`, so every strategy sees the same noise draws.
pub fn rh_loop(
    scenario: &Scenario,
    theta_init: &ParamVector,
    planner: &PlannerConfig,
    solver: &SolverConfig,
    steps: usize,
    seeds: RunSeeds,
) -> Result<Trajectory, PlannerError> {
    planner.validate()?;
    solver.validate()?;
    if steps < 1 {
        return Err(PlannerError::InvalidConfig("the number of steps must be at least 1".into()));
    }
    let m = scenario.nodes.len();
    if theta_init.node_count() != m {
        return Err(EstimatorError::NodeCountMismatch { data: m, theta: theta_init.node_count() }.into());
    }
    let actions = planner.actions()?;
    let noise_vars = scenario.noise_vars();
    let mut dataset = Dataset::new(Vec::new(), noise_vars.clone())?;
    let mut policy_rng = stream(seeds.master, &[TAG_POLICY, seeds.realization]);
    let mut theta = theta_init.clone();
    let mut position = scenario.agent_start;
    let mut visited = Vec::with_capacity(steps);
    let mut records = Vec::with_capacity(steps);
    let mut planning_seconds = Vec::with_capacity(steps);

    for k in 1..=steps {
        let mut rss = Vec::with_capacity(m);
        for (j, node) in scenario.nodes.iter().enumerate() {
            let mut rng = stream(seeds.master, &[TAG_NOISE, seeds.realization, k as u64, j as u64]);
            let mean = crate::model::mean_rss(&position, node)?;
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let y = mean + scenario.noise_scale * node.noise_var.sqrt() * z;
            dataset.push(MeasurementRecord { step_index: k, agent_pos: position, node_id: j + 1, rss_db: y })?;
            rss.push(y);
        }
        visited.push(position);

        let estimate = if planner.freeze_estimate {
            EstimateRecord { status: None, objective: None, iterations: 0, error: None }
        } else {
            let anchors =
                if solver.warm_start { vec![theta.clone(), theta_init.clone()] } else { vec![theta_init.clone()] };
            let seed = derive_seed(seeds.master, &[TAG_MULTISTART, seeds.realization, k as u64]);
            match estimate_mle_anchored(&dataset, &anchors, solver, seed) {
                Ok(out) => {
                    theta = out.theta;
                    EstimateRecord {
                        status: Some(out.status),
                        objective: Some(out.objective),
                        iterations: out.iterations,
                        error: None,
                    }
                }
                Err(e) => EstimateRecord { status: None, objective: None, iterations: 0, error: Some(e.to_string()) },
            }
        };

        let accumulated = information_along(&visited, &theta, &noise_vars)?;
        let raw = cost_j1(&accumulated, 0.0)?;
        let eps = planner.cost.epsilon_reg.resolve(&accumulated);
        let fitness_regularized = cost_j1(&accumulated, eps)?;
        let state = AgentState { position, accumulated, theta_hat: theta.clone(), step: k, dataset };

        let clock = Instant::now();
        let outcome = plan(&state, &actions, planner, &mut policy_rng)?;
        planning_seconds.push(clock.elapsed().as_secs_f64());
        dataset = state.dataset;

        let applied = outcome.actions[0];
        records.push(StepRecord {
            step: k,
            position,
            rss_db: rss,
            theta_hat: theta.clone(),
            estimate,
            fitness: raw.is_finite().then_some(raw),
            fitness_regularized,
            plan: outcome.indices,
            plan_cost: outcome.cost.is_finite().then_some(outcome.cost),
            applied,
            stage_evaluations: outcome.stage_evaluations,
        });
        position = apply_control(position, applied);
    }

    Ok(Trajectory {
        theta_init: theta_init.clone(),
        steps: records,
        final_position: position,
        final_theta: theta,
        planning_seconds,
    })
}
