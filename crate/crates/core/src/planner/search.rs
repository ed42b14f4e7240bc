//! Plan search over the block-diagonal horizon information.
//!
//! Every planner scores candidates the same way: the parent prefix's per-node
//! blocks are inverted once, and each child's trace follows from a rank-one
//! update of that inverse by the child's measurement gradient. Children of one
//! parent are scored together in a single batch. DP, the beam search and
//! greedy selection share this code, so they compute bit-identical costs for
//! the same action sequence, which is what makes their equivalences exact.

use std::collections::HashMap;

use crate::estimator::ParamVector;
use crate::fisher::{
    add_outer, block_cost, mu_gradient, penalty_weight, spd_inverse, Block, FisherError,
    HorizonCostConfig,
};
use crate::model::{ControlAction, Position};

/// A prefix's blocks together with each block's regularized inverse and its
/// trace, `None` where the inverse does not exist.
struct Parent {
    blocks: Vec<Block>,
    inverses: Vec<Option<(Block, f64)>>,
}

/// Gradient components that vary with position; the gain component of every
/// measurement gradient is exactly 1.
const VARYING: [usize; 4] = [0, 2, 3, 4];

/// Measurement gradients of a set of sibling candidates, stored so that each
/// varying component is contiguous across candidates:
/// `g[(j * 4 + v) * len + a]` is component `VARYING[v]` for node `j` at
/// candidate `a`.
struct Batch {
    len: usize,
    g: Vec<f64>,
    trace: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Batch {
    fn new(len: usize, m: usize) -> Self {
        Self {
            len,
            g: vec![0.0; m * 4 * len],
            trace: vec![0.0; len],
            sum: vec![0.0; len],
            sum_sq: vec![0.0; len],
        }
    }

    fn set(&mut self, a: usize, g: &[[f64; 5]]) {
        let len = self.len;
        let lanes = &mut self.g[..g.len() * 4 * len];
        for (j, gj) in g.iter().enumerate() {
            debug_assert_eq!(gj[1], 1.0);
            let base = j * 4 * len + a;
            lanes[base] = gj[0];
            lanes[base + len] = gj[2];
            lanes[base + 2 * len] = gj[3];
            lanes[base + 3 * len] = gj[4];
        }
    }

    fn lanes(&self, j: usize) -> [&[f64]; 4] {
        lanes(&self.g, self.len, j)
    }

    fn gradient(&self, j: usize, a: usize) -> [f64; 5] {
        let mut g = [1.0; 5];
        for (v, &r) in VARYING.iter().enumerate() {
            g[r] = self.g[(j * 4 + v) * self.len + a];
        }
        g
    }
}

fn lanes(g: &[f64], n: usize, j: usize) -> [&[f64]; 4] {
    std::array::from_fn(|v| &g[(j * 4 + v) * n..(j * 4 + v + 1) * n])
}

/// Everything fixed during one planning call.
pub(crate) struct Context<'a> {
    theta: &'a ParamVector,
    origin: Position,
    root: Vec<Block>,
    eps: f64,
    /// `coeff[i][j] = lambda^(i+1) / sigma_j^2` for a measurement at stage `i + 1`.
    coeff: Vec<Vec<f64>>,
    /// Penalty weight for a prefix of length `i + 1`, when the penalty is on.
    penalty: Option<Vec<f64>>,
}

impl<'a> Context<'a> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        theta: &'a ParamVector,
        origin: Position,
        prior: Vec<Block>,
        eps: f64,
        noise_vars: &[f64],
        cost: &HorizonCostConfig,
        horizon: usize,
        step_k: usize,
        use_penalty: bool,
    ) -> Self {
        let root = if cost.include_prior_info { prior } else { vec![[[0.0; 5]; 5]; prior.len()] };
        let mut coeff = Vec::with_capacity(horizon);
        let mut weight = 1.0;
        for _ in 0..horizon {
            weight *= cost.lambda;
            coeff.push(noise_vars.iter().map(|v| weight / v).collect());
        }
        let penalty = use_penalty
            .then(|| (1..=horizon).map(|i| penalty_weight(cost.beta, step_k + i)).collect());
        Self { theta, origin, root, eps, coeff, penalty }
    }

    fn nodes(&self) -> usize {
        self.root.len()
    }

    fn gradients(&self, displacement: Position) -> Result<Vec<[f64; 5]>, FisherError> {
        let x = self.origin + displacement;
        (0..self.nodes()).map(|j| Ok(mu_gradient(&x, self.theta.node(j))?)).collect()
    }

    fn parent(&self, blocks: Vec<Block>) -> Parent {
        let inverses = blocks.iter().map(|b| spd_inverse(b, self.eps)).collect();
        Parent { blocks, inverses }
    }

    /// Blocks after taking the stage-`stage` measurement with gradients `g`.
    fn extend(&self, parent: &[Block], g: &[[f64; 5]], stage: usize, out: &mut [Block]) {
        let c = &self.coeff[stage - 1];
        for j in 0..parent.len() {
            out[j] = parent[j];
            add_outer(&mut out[j], &g[j], c[j]);
        }
    }

    /// Costs of the prefixes formed by appending each candidate in `batch`, as
    /// the stage-`stage` measurement, to `parent`. A rank-one update that is
    /// not positive falls back to inverting the child block directly.
    fn score(&self, parent: &Parent, batch: &mut Batch, stage: usize, out: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was just detected.
            unsafe { self.score_avx2(parent, batch, stage, out) };
            return;
        }
        self.score_with(parent, batch, stage, out);
    }

    /// Same arithmetic as the portable path with wider registers; no fused
    /// operations are enabled, so results are identical.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    fn score_avx2(&self, parent: &Parent, batch: &mut Batch, stage: usize, out: &mut [f64]) {
        self.score_with(parent, batch, stage, out);
    }

    #[inline(always)]
    fn score_with(&self, parent: &Parent, batch: &mut Batch, stage: usize, out: &mut [f64]) {
        let n = batch.len;
        let c = &self.coeff[stage - 1];
        out[..n].fill(0.0);
        for (j, inverse) in parent.inverses.iter().enumerate() {
            let cj = c[j];
            let fallback = |batch: &Batch, a: usize| {
                let mut b = parent.blocks[j];
                add_outer(&mut b, &batch.gradient(j, a), cj);
                block_cost(&b, self.eps)
            };
            let Some((p, tr)) = inverse else {
                for (a, o) in out[..n].iter_mut().enumerate() {
                    *o += fallback(batch, a);
                }
                continue;
            };
            let [g0, g2, g3, g4] = lanes(&batch.g, n, j);
            let trace = &mut batch.trace;
            for a in 0..n {
                let g = [g0[a], 1.0, g2[a], g3[a], g4[a]];
                let h: [f64; 5] = std::array::from_fn(|r| {
                    p[r][1] + p[r][0] * g[0] + p[r][2] * g[2] + p[r][3] * g[3] + p[r][4] * g[4]
                });
                let q = h[1] + g[0] * h[0] + g[2] * h[2] + g[3] * h[3] + g[4] * h[4];
                let w = h[0] * h[0] + h[1] * h[1] + h[2] * h[2] + h[3] * h[3] + h[4] * h[4];
                trace[a] = tr - cj * w / (1.0 + cj * q);
            }
            let valid = |t: f64| t > 0.0 && t < f64::INFINITY;
            if batch.trace.iter().all(|&t| valid(t)) {
                for (o, t) in out[..n].iter_mut().zip(&batch.trace) {
                    *o += t;
                }
            } else {
                for a in 0..n {
                    let t = batch.trace[a];
                    out[a] += if valid(t) { t } else { fallback(batch, a) };
                }
            }
        }
        if let Some(pen) = &self.penalty {
            self.add_penalty(parent, batch, c, pen[stage - 1], out);
        }
    }

    #[inline(always)]
    /// Adds `weight * Var(diag)` of every child's information matrix. The
    /// diagonal is shifted by the parent's mean before accumulating, which
    /// keeps the one-pass variance well conditioned.
    fn add_penalty(&self, parent: &Parent, batch: &mut Batch, c: &[f64], weight: f64, out: &mut [f64]) {
        let n = batch.len;
        let count = (5 * parent.blocks.len()) as f64;
        let shift = parent.blocks.iter().flat_map(|b| (0..5).map(|r| b[r][r])).sum::<f64>() / count;
        let mut sum = std::mem::take(&mut batch.sum);
        let mut sum_sq = std::mem::take(&mut batch.sum_sq);
        sum.fill(0.0);
        sum_sq.fill(0.0);
        for (j, b) in parent.blocks.iter().enumerate() {
            let cj = c[j];
            let lanes = batch.lanes(j);
            for (v, &r) in VARYING.iter().enumerate() {
                let base = b[r][r] - shift;
                for ((s1, s2), &g) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(lanes[v]) {
                    let d = base + cj * (g * g);
                    *s1 += d;
                    *s2 += d * d;
                }
            }
            // The gain entry grows by exactly c_j for every candidate.
            let d = b[1][1] - shift + cj;
            for (s1, s2) in sum.iter_mut().zip(sum_sq.iter_mut()) {
                *s1 += d;
                *s2 += d * d;
            }
        }
        for ((o, s1), s2) in out[..n].iter_mut().zip(&sum).zip(&sum_sq) {
            let mean = s1 / count;
            *o += weight * (s2 / count - mean * mean).max(0.0);
        }
        batch.sum = sum;
        batch.sum_sq = sum_sq;
    }
}

fn displaced(d: Position, u: &ControlAction) -> Position {
    d + u.as_offset()
}

fn bits(p: &Position) -> [u64; 3] {
    [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]
}

/// Result of a search: chosen indices, cost and evaluation counts per stage.
pub(crate) struct Found {
    pub indices: Vec<usize>,
    pub cost: f64,
    pub stage_evaluations: Vec<u64>,
}

/// Points reachable within `horizon` moves, with their transition table and
/// measurement gradients stored flat: point `p`, node `j` at `p * M + j`.
struct Lattice {
    transitions: Vec<u32>,
    g: Vec<[f64; 5]>,
}

impl Lattice {
    fn build(ctx: &Context, actions: &[ControlAction], horizon: usize) -> Result<Self, FisherError> {
        let m = ctx.nodes();
        let mut points = vec![Position::default()];
        let mut depth = vec![0usize];
        let mut index: HashMap<[u64; 3], u32> = HashMap::new();
        index.insert(bits(&points[0]), 0);
        let mut ready = vec![false];
        let mut g = vec![[0.0; 5]; m];
        let mut transitions: Vec<u32> = Vec::new();
        let mut next = 0;
        while next < points.len() && depth[next] < horizon {
            let from = points[next];
            for u in actions {
                let p = displaced(from, u);
                let id = match index.get(&bits(&p)) {
                    Some(&id) => id,
                    None => {
                        let id = points.len() as u32;
                        index.insert(bits(&p), id);
                        points.push(p);
                        depth.push(depth[next] + 1);
                        ready.push(false);
                        g.extend(std::iter::repeat_n([0.0; 5], m));
                        id
                    }
                };
                let k = id as usize;
                if !ready[k] {
                    let grads = ctx.gradients(p)?;
                    g[k * m..(k + 1) * m].copy_from_slice(&grads);
                    ready[k] = true;
                }
                transitions.push(id);
            }
            next += 1;
        }
        Ok(Self { transitions, g })
    }

    fn fill(&self, point: usize, n_u: usize, m: usize, batch: &mut Batch) {
        for a in 0..n_u {
            let child = self.transitions[point * n_u + a] as usize;
            batch.set(a, &self.g[child * m..(child + 1) * m]);
        }
    }
}

struct DpSearch<'c, 'a> {
    ctx: &'c Context<'a>,
    lattice: Lattice,
    n_u: usize,
    m: usize,
    horizon: usize,
    frames: Vec<Vec<Block>>,
    path: Vec<usize>,
    batch: Batch,
    costs: Vec<f64>,
    best: f64,
    best_path: Vec<usize>,
    counts: Vec<u64>,
}

impl DpSearch<'_, '_> {
    fn descend(&mut self, depth: usize, point: usize) {
        let (n_u, m) = (self.n_u, self.m);
        self.counts[depth] += n_u as u64;
        if depth + 1 == self.horizon {
            let parent = self.ctx.parent(std::mem::take(&mut self.frames[depth]));
            self.lattice.fill(point, n_u, m, &mut self.batch);
            self.ctx.score(&parent, &mut self.batch, self.horizon, &mut self.costs);
            self.frames[depth] = parent.blocks;
            for a in 0..n_u {
                if self.costs[a] < self.best {
                    self.best = self.costs[a];
                    self.path[depth] = a;
                    self.best_path.copy_from_slice(&self.path);
                }
            }
            return;
        }
        for a in 0..n_u {
            let child = self.lattice.transitions[point * n_u + a] as usize;
            {
                let (head, tail) = self.frames.split_at_mut(depth + 1);
                let g = &self.lattice.g[child * m..(child + 1) * m];
                self.ctx.extend(&head[depth], g, depth + 1, &mut tail[0]);
            }
            self.path[depth] = a;
            self.descend(depth + 1, child);
        }
    }
}

/// Exhaustive search over all `actions.len()^horizon` plans; ties go to the
/// lexicographically smallest index sequence.
pub(crate) fn exhaustive(
    ctx: &Context,
    actions: &[ControlAction],
    horizon: usize,
) -> Result<Option<Found>, FisherError> {
    let lattice = Lattice::build(ctx, actions, horizon)?;
    let m = ctx.nodes();
    let n_u = actions.len();
    let mut frames = vec![vec![[[0.0; 5]; 5]; m]; horizon];
    frames[0].copy_from_slice(&ctx.root);
    let mut search = DpSearch {
        ctx,
        lattice,
        n_u,
        m,
        horizon,
        frames,
        path: vec![0; horizon],
        batch: Batch::new(n_u, m),
        costs: vec![0.0; n_u],
        best: f64::INFINITY,
        best_path: vec![0; horizon],
        counts: vec![0; horizon],
    };
    search.descend(0, 0);
    if !search.best.is_finite() {
        return Ok(None);
    }
    Ok(Some(Found { indices: search.best_path, cost: search.best, stage_evaluations: search.counts }))
}

struct Prefix {
    indices: Vec<usize>,
    displacement: Position,
    parent: Parent,
}

struct Candidate {
    prefix: usize,
    action: usize,
    cost: f64,
    g: Vec<[f64; 5]>,
}

/// Stage-wise beam search keeping the `width` best prefixes; width 1 is the
/// greedy rollout and horizon 1 is greedy selection.
pub(crate) fn beam(
    ctx: &Context,
    actions: &[ControlAction],
    horizon: usize,
    width: usize,
) -> Result<Option<Found>, FisherError> {
    let m = ctx.nodes();
    let n_u = actions.len();
    let mut batch = Batch::new(n_u, m);
    let mut costs = vec![0.0; n_u];
    let mut beam = vec![Prefix {
        indices: Vec::new(),
        displacement: Position::default(),
        parent: ctx.parent(ctx.root.clone()),
    }];
    let mut counts = Vec::with_capacity(horizon);
    for stage in 1..=horizon {
        let mut cands = Vec::with_capacity(beam.len() * n_u);
        for (pi, p) in beam.iter().enumerate() {
            let mut grads = Vec::with_capacity(n_u);
            for (a, u) in actions.iter().enumerate() {
                let g = ctx.gradients(displaced(p.displacement, u))?;
                batch.set(a, &g);
                grads.push(g);
            }
            ctx.score(&p.parent, &mut batch, stage, &mut costs);
            for (a, g) in grads.into_iter().enumerate() {
                cands.push(Candidate { prefix: pi, action: a, cost: costs[a], g });
            }
        }
        counts.push(cands.len() as u64);
        let order = |x: &Candidate, y: &Candidate| {
            x.cost
                .total_cmp(&y.cost)
                .then_with(|| beam[x.prefix].indices.cmp(&beam[y.prefix].indices))
                .then(x.action.cmp(&y.action))
        };
        if stage == horizon {
            let best = cands.iter().min_by(|x, y| order(x, y)).expect("nonempty action set");
            if !best.cost.is_finite() {
                return Ok(None);
            }
            let mut indices = beam[best.prefix].indices.clone();
            indices.push(best.action);
            return Ok(Some(Found { indices, cost: best.cost, stage_evaluations: counts }));
        }
        cands.sort_by(order);
        cands.truncate(width);
        beam = cands
            .into_iter()
            .map(|c| {
                let p = &beam[c.prefix];
                let mut blocks = p.parent.blocks.clone();
                ctx.extend(&p.parent.blocks, &c.g, stage, &mut blocks);
                let mut indices = p.indices.clone();
                indices.push(c.action);
                Prefix {
                    indices,
                    displacement: displaced(p.displacement, &actions[c.action]),
                    parent: ctx.parent(blocks),
                }
            })
            .collect();
    }
    unreachable!("horizon is at least 1")
}
