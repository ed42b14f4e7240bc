//! Fisher information for the log-distance RSS model: per-measurement blocks,
//! the block-diagonal joint matrix, weighted accumulation and the scalar
//! trace-of-inverse costs used for planning.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_10;
use thiserror::Error;

use crate::estimator::{ParamVector, PARAMS_PER_NODE};
use crate::model::{ModelError, Position, MIN_DISTANCE};

/// A matrix is treated as singular once `max_diag * tr(inverse)` exceeds this.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Relative tolerance on `|F - F^T|` accepted as symmetric.
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FisherError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("information matrices have mismatched dimensions {expected} and {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{fims} matrices but {weights} weights")]
    WeightCount { fims: usize, weights: usize },
    #[error("accumulation weight must be positive, got {0}")]
    NonPositiveWeight(f64),
    #[error("information matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("noise variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("horizon must contain at least one predicted position")]
    EmptyHorizon,
    #[error("invalid cost configuration: {0}")]
    InvalidConfig(String),
}

/// Dense symmetric positive semidefinite information matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoMatrix(DMatrix<f64>);

impl InfoMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "information matrix must be square");
        Self(m)
    }

    pub fn from_diagonal(values: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values)))
    }

    /// Assembles a block-diagonal matrix from 5x5 blocks.
    pub fn from_blocks(blocks: &[Block]) -> Self {
        let dim = blocks.len() * PARAMS_PER_NODE;
        let mut m = DMatrix::zeros(dim, dim);
        for (j, b) in blocks.iter().enumerate() {
            let o = j * PARAMS_PER_NODE;
            for r in 0..PARAMS_PER_NODE {
                for c in 0..PARAMS_PER_NODE {
                    m[(o + r, o + c)] = b[r][c];
                }
            }
        }
        Self(m)
    }

    /// The `j`-th 5x5 diagonal block.
    pub fn block(&self, j: usize) -> Block {
        let o = j * PARAMS_PER_NODE;
        let mut b = [[0.0; PARAMS_PER_NODE]; PARAMS_PER_NODE];
        for (r, row) in b.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.0[(o + r, o + c)];
            }
        }
        b
    }

    pub fn blocks(&self) -> Vec<Block> {
        (0..self.dim() / PARAMS_PER_NODE).map(|j| self.block(j)).collect()
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal().iter().copied().collect()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in r + 1..n {
                worst = worst.max((self.0[(r, c)] - self.0[(c, r)]).abs());
            }
        }
        worst
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> =
            SymmetricEigen::new(self.0.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    fn ensure_symmetric(&self) -> Result<(), FisherError> {
        let asym = self.max_asymmetry();
        let scale = self.0.amax().max(f64::MIN_POSITIVE);
        if asym > SYMMETRY_TOL * scale {
            return Err(FisherError::Asymmetric(asym));
        }
        Ok(())
    }
}

/// One node's 5x5 information block, row-major.
pub type Block = [[f64; PARAMS_PER_NODE]; PARAMS_PER_NODE];

/// Inversion regularizer added as `epsilon * I` before inverting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Regularizer {
    Fixed(f64),
    Named(RegularizerName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerName {
    Auto,
}

impl Regularizer {
    pub const AUTO: Regularizer = Regularizer::Named(RegularizerName::Auto);

    /// Scale-aware default: `1e-9 * (1 + tr(F)/dim)` of the reference matrix.
    pub fn resolve(&self, reference: &InfoMatrix) -> f64 {
        match *self {
            Regularizer::Fixed(eps) => eps,
            Regularizer::Named(RegularizerName::Auto) => auto_epsilon(reference),
        }
    }
}

pub fn auto_epsilon(reference: &InfoMatrix) -> f64 {
    let dim = reference.dim().max(1) as f64;
    1e-9 * (1.0 + reference.trace() / dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonCostConfig {
    /// Per-step discount on predicted information, in (0, 1].
    pub lambda: f64,
    /// Base of the growing weight on the diagonal-variance penalty, > 1.
    pub beta: f64,
    pub epsilon_reg: Regularizer,
    /// Add the information already collected before inverting.
    pub include_prior_info: bool,
}

impl Default for HorizonCostConfig {
    fn default() -> Self {
        Self { lambda: 0.9, beta: 1.2, epsilon_reg: Regularizer::AUTO, include_prior_info: true }
    }
}

impl HorizonCostConfig {
    pub fn validate(&self) -> Result<(), FisherError> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(FisherError::InvalidConfig(format!(
                "lambda must lie in (0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.beta > 1.0 && self.beta.is_finite()) {
            return Err(FisherError::InvalidConfig(format!("beta must exceed 1, got {}", self.beta)));
        }
        if let Regularizer::Fixed(eps) = self.epsilon_reg {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(FisherError::InvalidConfig(format!(
                    "epsilon_reg must be non-negative, got {eps}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean RSS and its gradient with respect to `[gamma, K, sx, sy, sz]` at
/// agent position `x`.
pub fn mu_and_gradient(x: &Position, node_params: &[f64]) -> Result<(f64, [f64; 5]), ModelError> {
    let gamma = node_params[0];
    let k = node_params[1];
    let dx = x.x - node_params[2];
    let dy = x.y - node_params[3];
    let dz = x.z - node_params[4];
    let d2 = dx * dx + dy * dy + dz * dz;
    let d = d2.sqrt();
    if d < MIN_DISTANCE || !d.is_finite() {
        return Err(ModelError::ZeroDistance { distance: d });
    }
    let log_d = d.log10();
    let kappa = gamma / (d2 * LN_10);
    Ok((k - gamma * log_d, [-log_d, 1.0, kappa * dx, kappa * dy, kappa * dz]))
}

/// Gradient of the mean RSS with respect to one node's parameters.
pub fn mu_gradient(x: &Position, node_params: &[f64]) -> Result<[f64; 5], ModelError> {
    mu_and_gradient(x, node_params).map(|(_, g)| g)
}

/// Expected information from one reading: `g g^T / sigma^2`.
pub fn fim_single(
    x: &Position,
    node_params: &[f64],
    noise_var: f64,
) -> Result<InfoMatrix, FisherError> {
    let b = fim_block(x, node_params, noise_var)?;
    Ok(InfoMatrix::from_blocks(&[b]))
}

pub fn fim_block(x: &Position, node_params: &[f64], noise_var: f64) -> Result<Block, FisherError> {
    if !(noise_var > 0.0) {
        return Err(FisherError::NonPositiveVariance(noise_var));
    }
    let g = mu_gradient(x, node_params)?;
    let mut b = [[0.0; 5]; 5];
    add_outer(&mut b, &g, 1.0 / noise_var);
    Ok(b)
}

/// Block-diagonal information from one reading of every node at `x`.
pub fn fim_joint(
    x: &Position,
    theta: &ParamVector,
    noise_vars: &[f64],
) -> Result<InfoMatrix, FisherError> {
    Ok(InfoMatrix::from_blocks(&fim_joint_blocks(x, theta, noise_vars)?))
}

pub fn fim_joint_blocks(
    x: &Position,
    theta: &ParamVector,
    noise_vars: &[f64],
) -> Result<Vec<Block>, FisherError> {
    if noise_vars.len() != theta.node_count() {
        return Err(FisherError::DimensionMismatch {
            expected: theta.node_count(),
            found: noise_vars.len(),
        });
    }
    (0..theta.node_count()).map(|j| fim_block(x, theta.node(j), noise_vars[j])).collect()
}

/// Weighted sum `sum_i w_i F_i`.
pub fn accumulate(fims: &[InfoMatrix], weights: &[f64]) -> Result<InfoMatrix, FisherError> {
    if fims.len() != weights.len() {
        return Err(FisherError::WeightCount { fims: fims.len(), weights: weights.len() });
    }
    let Some(first) = fims.first() else {
        return Err(FisherError::EmptyHorizon);
    };
    let dim = first.dim();
    let mut total = DMatrix::zeros(dim, dim);
    for (f, &w) in fims.iter().zip(weights) {
        if f.dim() != dim {
            return Err(FisherError::DimensionMismatch { expected: dim, found: f.dim() });
        }
        if !(w > 0.0) {
            return Err(FisherError::NonPositiveWeight(w));
        }
        total += &f.0 * w;
    }
    Ok(InfoMatrix(total))
}

/// `tr((F + eps I)^-1)`, or `+inf` when the regularized matrix is singular.
pub fn cost_j1(f: &InfoMatrix, epsilon_reg: f64) -> Result<f64, FisherError> {
    f.ensure_symmetric()?;
    let n = f.dim();
    let mut a = f.0.clone();
    for i in 0..n {
        a[(i, i)] += epsilon_reg;
    }
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
    if let Some(chol) = a.clone().cholesky() {
        let tr = chol.inverse().trace();
        if tr.is_finite() && max_diag * tr <= SINGULAR_CONDITION {
            return Ok(tr);
        }
    }
    let eig = SymmetricEigen::new(a);
    let lmax = eig.eigenvalues.amax();
    let mut tr = 0.0;
    for &l in eig.eigenvalues.iter() {
        if !(l > lmax / SINGULAR_CONDITION) || l <= 0.0 {
            return Ok(f64::INFINITY);
        }
        tr += 1.0 / l;
    }
    Ok(tr)
}

/// Population variance.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Trace-of-inverse plus `beta^(k+T)` times the variance of `diag(F)`.
pub fn cost_j2_penalty(
    f: &InfoMatrix,
    step_k: usize,
    horizon_t: usize,
    beta: f64,
    epsilon_reg: f64,
) -> Result<f64, FisherError> {
    let base = cost_j1(f, epsilon_reg)?;
    Ok(base + penalty_weight(beta, step_k + horizon_t) * population_variance(&f.diagonal()))
}

pub fn penalty_weight(beta: f64, exponent: usize) -> f64 {
    beta.powi(exponent as i32)
}

/// Cost of one candidate plan: information predicted at `predicted_positions`
/// under the current estimate, discounted by `lambda^i`, optionally on top of
/// what has been collected so far.
#[allow(clippy::too_many_arguments)]
pub fn horizon_objective(
    f_accumulated: &InfoMatrix,
    predicted_positions: &[Position],
    theta_hat: &ParamVector,
    noise_vars: &[f64],
    cfg: &HorizonCostConfig,
    step_k: usize,
    use_penalty: bool,
) -> Result<f64, FisherError> {
    let f_plan = horizon_information(f_accumulated, predicted_positions, theta_hat, noise_vars, cfg)?;
    let eps = cfg.epsilon_reg.resolve(f_accumulated);
    if use_penalty {
        cost_j2_penalty(&f_plan, step_k, predicted_positions.len(), cfg.beta, eps)
    } else {
        cost_j1(&f_plan, eps)
    }
}

/// The matrix inverted by [`horizon_objective`].
pub fn horizon_information(
    f_accumulated: &InfoMatrix,
    predicted_positions: &[Position],
    theta_hat: &ParamVector,
    noise_vars: &[f64],
    cfg: &HorizonCostConfig,
) -> Result<InfoMatrix, FisherError> {
    if predicted_positions.is_empty() {
        return Err(FisherError::EmptyHorizon);
    }
    let dim = theta_hat.len();
    if f_accumulated.dim() != dim {
        return Err(FisherError::DimensionMismatch { expected: dim, found: f_accumulated.dim() });
    }
    let mut total = if cfg.include_prior_info {
        f_accumulated.0.clone()
    } else {
        DMatrix::zeros(dim, dim)
    };
    let mut weight = 1.0;
    for x in predicted_positions {
        weight *= cfg.lambda;
        total += fim_joint(x, theta_hat, noise_vars)?.0 * weight;
    }
    Ok(InfoMatrix(total))
}

// ---------------------------------------------------------------------------
// 5x5 block kernels shared by the planners.

/// `b += c * g g^T`.
#[inline]
pub fn add_outer(b: &mut Block, g: &[f64; 5], c: f64) {
    for r in 0..5 {
        let cg = c * g[r];
        for col in r..5 {
            let v = cg * g[col];
            b[r][col] += v;
            if col != r {
                b[col][r] += v;
            }
        }
    }
}

/// Inverse of `a + eps I` through a Cholesky factorization, with its trace.
/// `None` when the matrix is not positive definite or is numerically singular.
pub fn spd_inverse(a: &Block, eps: f64) -> Option<(Block, f64)> {
    let mut l = [[0.0f64; 5]; 5];
    let mut max_diag = 0.0f64;
    for i in 0..5 {
        max_diag = max_diag.max(a[i][i] + eps);
    }
    for j in 0..5 {
        let mut s = a[j][j] + eps;
        for k in 0..j {
            s -= l[j][k] * l[j][k];
        }
        if !(s > 0.0) {
            return None;
        }
        let ljj = s.sqrt();
        l[j][j] = ljj;
        let inv = 1.0 / ljj;
        for i in j + 1..5 {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s * inv;
        }
    }
    // m = L^-1, lower triangular
    let mut m = [[0.0f64; 5]; 5];
    for i in 0..5 {
        m[i][i] = 1.0 / l[i][i];
        for j in 0..i {
            let mut s = 0.0;
            for k in j..i {
                s -= l[i][k] * m[k][j];
            }
            m[i][j] = s * m[i][i];
        }
    }
    // inverse = m^T m
    let mut inv = [[0.0f64; 5]; 5];
    let mut tr = 0.0;
    for i in 0..5 {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..5 {
                s += m[k][i] * m[k][j];
            }
            inv[i][j] = s;
            inv[j][i] = s;
        }
        tr += inv[i][i];
    }
    if !tr.is_finite() || max_diag * tr > SINGULAR_CONDITION {
        return None;
    }
    Some((inv, tr))
}

/// `tr((a + eps I)^-1)` for one block, `+inf` when singular.
pub fn block_cost(a: &Block, eps: f64) -> f64 {
    if let Some((_, tr)) = spd_inverse(a, eps) {
        return tr;
    }
    let mut m = DMatrix::zeros(5, 5);
    for r in 0..5 {
        for c in 0..5 {
            m[(r, c)] = a[r][c];
        }
        m[(r, r)] += eps;
    }
    let eig = SymmetricEigen::new(m);
    let lmax = eig.eigenvalues.amax();
    let mut tr = 0.0;
    for &l in eig.eigenvalues.iter() {
        if !(l > lmax / SINGULAR_CONDITION) || l <= 0.0 {
            return f64::INFINITY;
        }
        tr += 1.0 / l;
    }
    tr
}

/// Trace of `(A + c g g^T)^-1` from `A^-1` and `tr(A^-1)`.
#[inline]
pub fn rank_one_trace(inv: &Block, tr: f64, g: &[f64; 5], c: f64) -> f64 {
    let mut q = 0.0;
    let mut w = 0.0;
    for r in 0..5 {
        let v = inv[r][0] * g[0]
            + inv[r][1] * g[1]
            + inv[r][2] * g[2]
            + inv[r][3] * g[3]
            + inv[r][4] * g[4];
        q += g[r] * v;
        w += v * v;
    }
    tr - c * w / (1.0 + c * q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mean_rss, NodeGroundTruth};
    use crate::seeds::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn params(gamma: f64, k: f64, s: Position) -> [f64; 5] {
        [gamma, k, s.x, s.y, s.z]
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn gamma_component_vanishes_at_unit_distance() {
        let p = params(6.0, -20.0, Position::default());
        let g = mu_gradient(&Position::new(0.6, 0.8, 0.0), &p).unwrap();
        assert!(g[0].abs() < 1e-15);
        assert_eq!(g[1], 1.0);
    }

    #[test]
    fn mu_gradient_matches_model_finite_differences() {
        let mut rng = stream(11, &[]);
        for _ in 0..200 {
            let s = Position::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(0.0..10.0),
            );
            let x = Position::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(20.0..60.0),
            );
            let p = params(rng.random_range(5.0..10.0), rng.random_range(-30.0..-10.0), s);
            let g = mu_gradient(&x, &p).unwrap();
            assert_eq!(g[1], 1.0);
            for i in 0..5 {
                let h = 1e-5 * p[i].abs().max(1.0);
                let mut hi = p;
                let mut lo = p;
                hi[i] += h;
                lo[i] -= h;
                let f = |q: [f64; 5]| {
                    let n = NodeGroundTruth {
                        gamma: q[0],
                        k_gain: q[1],
                        position: Position::new(q[2], q[3], q[4]),
                        noise_var: 1.0,
                    };
                    mean_rss(&x, &n).unwrap()
                };
                let fd = (f(hi) - f(lo)) / (2.0 * h);
                assert!(rel_err(g[i], fd) < 1e-6 || (g[i] - fd).abs() < 1e-10, "{i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn single_fim_is_rank_one_with_geometry_free_gain_entry() {
        let p = params(7.0, -18.0, Position::new(5.0, -3.0, 2.0));
        for x in [Position::new(40.0, 10.0, 50.0), Position::new(5.0, -3.0, 12.0), Position::new(-90.0, 80.0, 1.0)] {
            let f = fim_single(&x, &p, 2.5).unwrap();
            assert!((f.matrix()[(1, 1)] - 1.0 / 2.5).abs() < 1e-15);
            let ev = f.eigenvalues();
            let top = ev[4];
            for &e in &ev[..4] {
                assert!(e.abs() <= 1e-12 * top);
            }
            assert!(f.max_asymmetry() == 0.0);
        }
        assert!(fim_single(&Position::new(5.0, -3.0, 2.0), &p, 1.0).is_err());
        assert!(matches!(
            fim_single(&Position::new(0.0, 0.0, 0.0), &p, 0.0),
            Err(FisherError::NonPositiveVariance(_))
        ));
    }

    #[test]
    fn single_fim_matches_sampled_score_outer_product() {
        let s = Position::new(12.0, -20.0, 3.0);
        let p = params(7.5, -21.0, s);
        let x = Position::new(40.0, 15.0, 30.0);
        let var = 3.0;
        let node = NodeGroundTruth { gamma: p[0], k_gain: p[1], position: s, noise_var: var };
        let mu = mean_rss(&x, &node).unwrap();
        let g = mu_gradient(&x, &p).unwrap();
        let mut rng = stream(5, &[1]);
        let mut acc = [[0.0f64; 5]; 5];
        let n = 1_000_000;
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let y = mu + var.sqrt() * z;
            let score: Vec<f64> = g.iter().map(|gi| (y - mu) / var * gi).collect();
            for r in 0..5 {
                for c in 0..5 {
                    acc[r][c] += score[r] * score[c];
                }
            }
        }
        let f = fim_single(&x, &p, var).unwrap();
        let norm = f.matrix().norm();
        for r in 0..5 {
            for c in 0..5 {
                let exact = f.matrix()[(r, c)];
                if exact.abs() > 1e-6 * norm {
                    assert!(rel_err(acc[r][c] / n as f64, exact) < 0.02);
                }
            }
        }
    }

    fn two_node_theta() -> ParamVector {
        ParamVector::from_slice(&[6.0, -20.0, 10.0, 0.0, 2.0, 8.0, -15.0, -40.0, 30.0, 5.0]).unwrap()
    }

    #[test]
    fn joint_fim_is_block_diagonal() {
        let theta = two_node_theta();
        let x = Position::new(0.0, 0.0, 40.0);
        let f = fim_joint(&x, &theta, &[2.0, 4.0]).unwrap();
        assert_eq!(f.dim(), 10);
        for r in 0..10 {
            for c in 0..10 {
                if r / 5 != c / 5 {
                    assert_eq!(f.matrix()[(r, c)], 0.0);
                }
            }
        }
        let b0 = fim_single(&x, theta.node(0), 2.0).unwrap();
        let b1 = fim_single(&x, theta.node(1), 4.0).unwrap();
        assert!((f.trace() - b0.trace() - b1.trace()).abs() < 1e-14);

        let one = ParamVector::from_slice(theta.node(0)).unwrap();
        assert_eq!(fim_joint(&x, &one, &[2.0]).unwrap(), b0);
        assert!(fim_joint(&x, &theta, &[2.0]).is_err());
        assert!(fim_joint(&Position::new(10.0, 0.0, 2.0), &theta, &[2.0, 4.0]).is_err());
    }

    #[test]
    fn accumulate_examples() {
        let theta = two_node_theta();
        let f1 = fim_joint(&Position::new(0.0, 0.0, 40.0), &theta, &[2.0, 4.0]).unwrap();
        let f2 = fim_joint(&Position::new(30.0, -10.0, 45.0), &theta, &[2.0, 4.0]).unwrap();
        let f3 = fim_joint(&Position::new(-20.0, 25.0, 35.0), &theta, &[2.0, 4.0]).unwrap();
        let doubled = accumulate(&[f1.clone(), f1.clone()], &[1.0, 1.0]).unwrap();
        assert_eq!(doubled.matrix(), &(f1.matrix() * 2.0));

        let plain = accumulate(&[f1.clone(), f2.clone()], &[1.0, 1.0]).unwrap();
        assert_eq!(plain.matrix(), &(f1.matrix() + f2.matrix()));

        let lam: f64 = 0.9;
        let weighted =
            accumulate(&[f1.clone(), f2.clone(), f3.clone()], &[lam, lam * lam, lam.powi(3)]).unwrap();
        for r in 0..10 {
            for c in 0..10 {
                let e = 0.9 * f1.matrix()[(r, c)] + 0.81 * f2.matrix()[(r, c)] + 0.729 * f3.matrix()[(r, c)];
                assert!((weighted.matrix()[(r, c)] - e).abs() <= 1e-14 * e.abs().max(1e-300));
            }
        }
        assert!(matches!(
            accumulate(&[f1.clone(), InfoMatrix::zeros(5)], &[1.0, 1.0]),
            Err(FisherError::DimensionMismatch { .. })
        ));
        assert!(accumulate(std::slice::from_ref(&f1), &[0.0]).is_err());
        assert!(accumulate(&[f1], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn j1_examples() {
        assert!((cost_j1(&InfoMatrix::identity(25), 0.0).unwrap() - 25.0).abs() < 1e-12);
        assert!((cost_j1(&InfoMatrix::from_diagonal(&[2.0, 4.0]), 0.0).unwrap() - 0.75).abs() < 1e-15);

        let g = nalgebra::DVector::from_column_slice(&[1.0, -2.0, 0.5, 3.0, 1.5]);
        let rank_one = InfoMatrix::from_matrix(&g * g.transpose());
        assert_eq!(cost_j1(&rank_one, 0.0).unwrap(), f64::INFINITY);
        let eps = 1e-6;
        let oracle: f64 = rank_one.eigenvalues().iter().map(|l| 1.0 / (l.max(0.0) + eps)).sum();
        let got = cost_j1(&rank_one, eps).unwrap();
        assert!(rel_err(got, oracle) < 1e-8, "{got} vs {oracle}");

        let mut asym = DMatrix::identity(3, 3);
        asym[(0, 1)] = 0.5;
        assert!(matches!(cost_j1(&InfoMatrix::from_matrix(asym), 0.0), Err(FisherError::Asymmetric(_))));
    }

    #[test]
    fn penalty_examples() {
        let constant = InfoMatrix::from_diagonal(&[3.0, 3.0, 3.0]);
        assert_eq!(cost_j2_penalty(&constant, 4, 5, 1.5, 0.0).unwrap(), cost_j1(&constant, 0.0).unwrap());

        let f = InfoMatrix::from_diagonal(&[1.0, 3.0]);
        let got = cost_j2_penalty(&f, 1, 1, 2.0, 0.0).unwrap();
        assert!((got - (1.0 + 1.0 / 3.0 + 4.0)).abs() < 1e-14);

        let base = cost_j1(&f, 0.0).unwrap();
        let pen: Vec<f64> = (0..6).map(|k| cost_j2_penalty(&f, k, 3, 1.3, 0.0).unwrap() - base).collect();
        for w in pen.windows(2) {
            assert!((w[1] / w[0] - 1.3).abs() < 1e-12);
        }
    }

    #[test]
    fn block_kernels_agree_with_dense_route() {
        let theta = two_node_theta();
        let mut prior = fim_joint_blocks(&Position::new(0.0, 0.0, 40.0), &theta, &[2.0, 4.0]).unwrap();
        for x in [
            Position::new(30.0, -10.0, 45.0),
            Position::new(-20.0, 25.0, 35.0),
            Position::new(60.0, 40.0, 10.0),
            Position::new(-70.0, -50.0, 20.0),
            Position::new(15.0, 80.0, 55.0),
        ] {
            let b = fim_joint_blocks(&x, &theta, &[2.0, 4.0]).unwrap();
            for j in 0..2 {
                for r in 0..5 {
                    for c in 0..5 {
                        prior[j][r][c] += b[j][r][c];
                    }
                }
            }
        }
        let eps = 1e-9;
        let dense = InfoMatrix::from_blocks(&prior);
        let dense_cost = cost_j1(&dense, eps).unwrap();
        let block_sum: f64 = prior.iter().map(|b| block_cost(b, eps)).sum();
        assert!(rel_err(dense_cost, block_sum) < 1e-9);

        let x = Position::new(5.0, 5.0, 38.0);
        let g = mu_gradient(&x, theta.node(0)).unwrap();
        let c = 0.9 / 2.0;
        let (inv, tr) = spd_inverse(&prior[0], eps).unwrap();
        let mut updated = prior[0];
        add_outer(&mut updated, &g, c);
        assert!(rel_err(rank_one_trace(&inv, tr, &g, c), block_cost(&updated, eps)) < 1e-9);
    }

    #[test]
    fn horizon_objective_examples() {
        let theta = two_node_theta();
        let vars = [2.0, 4.0];
        let x = Position::new(3.0, -7.0, 20.0);
        let cfg = HorizonCostConfig {
            lambda: 1.0,
            beta: 1.2,
            epsilon_reg: Regularizer::Fixed(0.0),
            include_prior_info: true,
        };
        let zero = InfoMatrix::zeros(10);
        let direct = cost_j1(&fim_joint(&x, &theta, &vars).unwrap(), 0.0).unwrap();
        assert_eq!(horizon_objective(&zero, &[x], &theta, &vars, &cfg, 0, false).unwrap(), direct);
        assert!(horizon_objective(&zero, &[], &theta, &vars, &cfg, 0, false).is_err());

        let x2 = Position::new(-15.0, 4.0, 30.0);
        let prior = fim_joint(&Position::new(50.0, 50.0, 50.0), &theta, &vars).unwrap();
        let half = HorizonCostConfig { lambda: 0.5, ..cfg };
        let f_half = horizon_information(&prior, &[x, x2], &theta, &vars, &half).unwrap();
        let expect = prior.matrix()
            + fim_joint(&x, &theta, &vars).unwrap().matrix() * 0.5
            + fim_joint(&x2, &theta, &vars).unwrap().matrix() * 0.25;
        assert!((f_half.matrix() - expect).amax() < 1e-13);
        let literal = HorizonCostConfig { include_prior_info: false, ..half };
        let f_lit = horizon_information(&prior, &[x, x2], &theta, &vars, &literal).unwrap();
        assert!((f_lit.matrix() + prior.matrix() - f_half.matrix()).amax() < 1e-13);
    }
}
