//! Executable form of the convergence analysis: the Lyapunov function, the
//! admissible-parameter construction, and sampled estimates of the
//! smoothness and preconditioner assumptions. Everything dense here is for
//! desk-scale instances only.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::coordinator::{aggregate_precond, Preconditioner};
use crate::geometry::{point_retract, se3_retract, Mat3, PoseTangent, Vec6};
use crate::lazycomm::GradNormHistory;
use crate::localmodel::{dense_reduced_hessian, jacobi_blocks, linearize, LocalBlocks};
use crate::problem::{evaluate_cost, ProblemInstance, State};
use crate::runtime::IterationTrace;
use crate::{Error, Result};

/// Largest shared dimension `3 m` for dense spectral estimates.
pub const DENSE_DIM_LIMIT: usize = 6000;

/// `V = f + sum_d beta_d hist[d]`; missing history entries count as zero.
pub fn lyapunov(f: f64, hist: &GradNormHistory, beta: &[f64]) -> f64 {
    f + hist.weighted_sum(beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentParams {
    pub gamma: f64,
    pub sigma_p: f64,
    pub beta: Vec<f64>,
    pub epsilon: Vec<f64>,
}

/// The descent inequality that a parameter set fails.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// `0 < gamma < 1 / sigma_p`.
    Stepsize {
        gamma: f64,
        bound: f64,
    },
    /// `beta_1 = (gamma - sigma_p gamma^2) / 2`.
    FirstBeta {
        beta_1: f64,
        expected: f64,
    },
    /// `beta_d < beta_{d-1} - gamma eps_{d-1} / 2`.
    BetaChain {
        d: usize,
        beta_d: f64,
        bound: f64,
    },
    /// `beta_dbar > gamma eps_dbar / 2`.
    LastBeta {
        beta_dbar: f64,
        bound: f64,
    },
    Malformed(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Stepsize { gamma, bound } => {
                write!(
                    f,
                    "stepsize bound violated: need 0 < gamma < 1/sigma_p = {bound:e}, got gamma = {gamma:e}"
                )
            }
            Violation::FirstBeta { beta_1, expected } => {
                write!(
                    f,
                    "beta_1 = {beta_1:e} differs from (gamma - sigma_p gamma^2)/2 = {expected:e}"
                )
            }
            Violation::BetaChain { d, beta_d, bound } => {
                write!(
                    f,
                    "beta chain violated at d = {d}: need beta_d < {bound:e}, got {beta_d:e}"
                )
            }
            Violation::LastBeta { beta_dbar, bound } => write!(
                f,
                "last-beta bound violated: need beta_dbar > gamma eps_dbar / 2 = {bound:e}, got {beta_dbar:e} \
                 (a smaller stepsize tolerates larger epsilon)"
            ),
            Violation::Malformed(msg) => write!(f, "{msg}"),
        }
    }
}

/// Build weights `beta` under which the Lyapunov function provably
/// decreases, or name the inequality that cannot be met.
pub fn admissible_params(gamma: f64, sigma_p: f64, epsilon: &[f64]) -> std::result::Result<DescentParams, Violation> {
    if epsilon.is_empty() || epsilon.iter().any(|e| !(*e >= 0.0)) {
        return Err(Violation::Malformed(
            "epsilon must be a nonempty nonnegative vector".into(),
        ));
    }
    if !(sigma_p > 0.0 && sigma_p.is_finite()) {
        return Err(Violation::Malformed(format!("sigma_p must be positive, got {sigma_p}")));
    }
    let bound = 1.0 / sigma_p;
    if !(gamma > 0.0 && gamma < bound) {
        return Err(Violation::Stepsize { gamma, bound });
    }
    let dbar = epsilon.len();
    let beta_1 = 0.5 * (gamma - sigma_p * gamma * gamma);
    let margin = beta_1 - 0.5 * gamma * epsilon.iter().sum::<f64>();
    if !(margin > 0.0) {
        // the chain would force beta_dbar at or below its lower bound
        let chain_end = beta_1 - 0.5 * gamma * epsilon[..dbar - 1].iter().sum::<f64>();
        return Err(Violation::LastBeta {
            beta_dbar: chain_end,
            bound: 0.5 * gamma * epsilon[dbar - 1],
        });
    }
    let slack = margin / dbar as f64;
    let mut beta = Vec::with_capacity(dbar);
    beta.push(beta_1);
    for d in 1..dbar {
        beta.push(beta[d - 1] - 0.5 * gamma * epsilon[d - 1] - slack);
    }
    let params = DescentParams {
        gamma,
        sigma_p,
        beta,
        epsilon: epsilon.to_vec(),
    };
    verify_params(&params)?;
    Ok(params)
}

/// Check every descent inequality directly on a parameter set.
pub fn verify_params(p: &DescentParams) -> std::result::Result<(), Violation> {
    let dbar = p.epsilon.len();
    if dbar == 0 || p.beta.len() != dbar {
        return Err(Violation::Malformed(
            "beta and epsilon must have the same nonzero length".into(),
        ));
    }
    let bound = 1.0 / p.sigma_p;
    if !(p.gamma > 0.0 && p.gamma < bound) {
        return Err(Violation::Stepsize { gamma: p.gamma, bound });
    }
    let expected = 0.5 * (p.gamma - p.sigma_p * p.gamma * p.gamma);
    if (p.beta[0] - expected).abs() > 1e-12 * expected.abs() {
        return Err(Violation::FirstBeta {
            beta_1: p.beta[0],
            expected,
        });
    }
    for d in 1..dbar {
        let bound = p.beta[d - 1] - 0.5 * p.gamma * p.epsilon[d - 1];
        if !(p.beta[d] < bound) {
            return Err(Violation::BetaChain {
                d: d + 1,
                beta_d: p.beta[d],
                bound,
            });
        }
    }
    let last = 0.5 * p.gamma * p.epsilon[dbar - 1];
    if !(p.beta[dbar - 1] > last) {
        return Err(Violation::LastBeta {
            beta_dbar: p.beta[dbar - 1],
            bound: last,
        });
    }
    Ok(())
}

fn scale_guard(dim: usize) -> Result<()> {
    if dim > DENSE_DIM_LIMIT {
        return Err(Error::ScaleGuard {
            dim,
            limit: DENSE_DIM_LIMIT,
        });
    }
    Ok(())
}

/// Symmetric square root of a 3x3 SPD block.
fn sqrt_spd(m: &Mat3) -> Mat3 {
    let eig = SymmetricEigen::new(*m);
    let d = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    eig.eigenvectors * Mat3::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `sigma_p = ||S P||_P`, the spectral norm of `P^{1/2} S P^{1/2}` for the
/// block-diagonal `P`.
pub fn estimate_sigma_p(s: &DMatrix<f64>, p: &Preconditioner) -> Result<f64> {
    let dim = s.nrows();
    scale_guard(dim)?;
    if s.ncols() != dim || dim != 3 * p.blocks.len() {
        return Err(Error::InvalidProblem("S and P dimensions disagree".into()));
    }
    let mut half = DMatrix::zeros(dim, dim);
    for (l, pl) in p.blocks.iter().enumerate() {
        half.fixed_view_mut::<3, 3>(3 * l, 3 * l).copy_from(&sqrt_spd(pl));
    }
    let mut m = &half * s * &half;
    m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    Ok(eig.eigenvalues.iter().fold(0.0f64, |acc, x| acc.max(x.abs())))
}

pub fn linearize_all(instance: &ProblemInstance, state: &State, lambda: f64) -> Result<Vec<LocalBlocks>> {
    instance
        .agents()
        .iter()
        .map(|a| linearize(a, &state.poses[a.id], &a.gather(&state.points), lambda))
        .collect()
}

/// Aggregated reduced Hessian `S = sum_i S_i` over all shared blocks.
pub fn global_reduced_hessian(instance: &ProblemInstance, lbs: &[LocalBlocks]) -> Result<DMatrix<f64>> {
    let dim = 3 * instance.num_points();
    scale_guard(dim)?;
    let mut s = DMatrix::zeros(dim, dim);
    for (a, lb) in instance.agents().iter().zip(lbs) {
        let si = dense_reduced_hessian(lb)?;
        let obs = a.observed_blocks();
        for (p, &lp) in obs.iter().enumerate() {
            for (q, &lq) in obs.iter().enumerate() {
                let mut view = s.fixed_view_mut::<3, 3>(3 * lp, 3 * lq);
                view += si.fixed_view::<3, 3>(3 * p, 3 * q);
            }
        }
    }
    Ok(s)
}

/// Exact block-Jacobi preconditioner from fresh blocks.
pub fn fresh_preconditioner(instance: &ProblemInstance, lbs: &[LocalBlocks]) -> Result<Preconditioner> {
    let d: Vec<_> = lbs.iter().map(|lb| jacobi_blocks(lb).blocks).collect();
    aggregate_precond(instance, &d)
}

/// `sigma_p` at a given iterate.
pub fn sigma_p_at(instance: &ProblemInstance, state: &State, lambda: f64) -> Result<f64> {
    let lbs = linearize_all(instance, state, lambda)?;
    let s = global_reduced_hessian(instance, &lbs)?;
    let p = fresh_preconditioner(instance, &lbs)?;
    estimate_sigma_p(&s, &p)
}

/// Full model Hessian `M` over `[poses (agent order); points]`.
pub fn dense_model_hessian(instance: &ProblemInstance, lbs: &[LocalBlocks]) -> Result<DMatrix<f64>> {
    let n_pose = instance.num_poses();
    let dim = 6 * n_pose + 3 * instance.num_points();
    scale_guard(dim)?;
    let mut m = DMatrix::zeros(dim, dim);
    let mut offset = 0;
    for (a, lb) in instance.agents().iter().zip(lbs) {
        for (j, aj) in lb.a.iter().enumerate() {
            m.fixed_view_mut::<6, 6>(6 * (offset + j), 6 * (offset + j))
                .copy_from(aj);
        }
        let obs = a.observed_blocks();
        for (slot, b) in lb.b.iter().enumerate() {
            let r = 6 * n_pose + 3 * obs[slot];
            let mut view = m.fixed_view_mut::<3, 3>(r, r);
            view += b;
        }
        for (p, &(j, slot)) in lb.layout.pairs.iter().enumerate() {
            let r = 6 * (offset + j);
            let c = 6 * n_pose + 3 * obs[slot];
            m.fixed_view_mut::<6, 3>(r, c).copy_from(&lb.c[p]);
            m.fixed_view_mut::<3, 6>(c, r).copy_from(&lb.c[p].transpose());
        }
        offset += a.num_poses();
    }
    Ok(m)
}

/// Per-step Lyapunov differences and the steps that increase it.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    pub values: Vec<f64>,
    pub diffs: Vec<f64>,
    pub violations: Vec<usize>,
}

impl DescentReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Flag every `k` with `V^{k+1} > V^k + 1e-10 max(1, |V^k|)`.
pub fn check_descent_values(values: &[f64]) -> DescentReport {
    let mut diffs = Vec::with_capacity(values.len().saturating_sub(1));
    let mut violations = Vec::new();
    for (k, w) in values.windows(2).enumerate() {
        let diff = w[1] - w[0];
        diffs.push(diff);
        if !(diff <= 1e-10 * w[0].abs().max(1.0)) {
            violations.push(k);
        }
    }
    DescentReport {
        values: values.to_vec(),
        diffs,
        violations,
    }
}

/// Rebuild `V^k` from the recorded costs and `||w_hat||^2_P` history and
/// check its descent.
pub fn check_descent(trace: &IterationTrace, beta: &[f64]) -> DescentReport {
    let mut hist = GradNormHistory::new(beta.len());
    let mut values = Vec::with_capacity(trace.records.len());
    for r in &trace.records {
        values.push(lyapunov(r.f, &hist, beta));
        if let Some(g) = r.what_normsq {
            hist.push(g);
        }
    }
    check_descent_values(&values)
}

/// A cost composed with a retraction at a fixed base point.
pub trait Pullback {
    fn dim(&self) -> usize;
    /// Value at the base point.
    fn base_value(&self) -> f64;
    fn base_gradient(&self) -> DVector<f64>;
    /// Value at `Retr(xi)`.
    fn value(&self, xi: &DVector<f64>) -> f64;
}

/// Max over random tangent samples of
/// `2 |f(Retr xi) - f - <g, xi>| / ||xi||^2`, with `||xi|| = radius`.
pub fn sample_pullback_gap(pb: &impl Pullback, trials: usize, radius: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = pb.base_value();
    let g = pb.base_gradient();
    let n = pb.dim();
    let mut best = 0.0f64;
    for _ in 0..trials {
        let dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = dir.norm();
        if norm == 0.0 {
            continue;
        }
        let xi = dir * (radius / norm);
        let gap = 2.0 * (pb.value(&xi) - f0 - g.dot(&xi)).abs() / (radius * radius);
        best = best.max(gap);
    }
    best
}

/// The collaborative cost pulled back through pose and point retractions.
/// Tangent layout is all poses in agent order, then all points.
pub struct StatePullback<'a> {
    pub instance: &'a ProblemInstance,
    pub state: &'a State,
    f0: f64,
    grad: DVector<f64>,
}

impl<'a> StatePullback<'a> {
    pub fn new(instance: &'a ProblemInstance, state: &'a State) -> Result<Self> {
        let lbs = linearize_all(instance, state, 1.0)?;
        let n_pose = instance.num_poses();
        let mut grad = DVector::zeros(6 * n_pose + 3 * instance.num_points());
        let mut offset = 0;
        for (a, lb) in instance.agents().iter().zip(&lbs) {
            for (j, g) in lb.g_x.iter().enumerate() {
                grad.fixed_rows_mut::<6>(6 * (offset + j)).copy_from(g);
            }
            for (slot, &l) in a.observed_blocks().iter().enumerate() {
                let mut view = grad.fixed_rows_mut::<3>(6 * n_pose + 3 * l);
                view += lb.g_y[slot];
            }
            offset += a.num_poses();
        }
        Ok(Self {
            instance,
            state,
            f0: lbs.iter().map(|lb| lb.cost).sum(),
            grad,
        })
    }

    pub fn retract(&self, xi: &DVector<f64>) -> State {
        let n_pose = self.instance.num_poses();
        let mut out = self.state.clone();
        let mut offset = 0;
        for poses in out.poses.iter_mut() {
            for pose in poses.iter_mut() {
                let t = Vec6::from_iterator(xi.rows(6 * offset, 6).iter().copied());
                *pose = se3_retract(pose, &PoseTangent::from_vector(&t));
                offset += 1;
            }
        }
        for (l, y) in out.points.iter_mut().enumerate() {
            let v = xi.fixed_rows::<3>(6 * n_pose + 3 * l).into_owned();
            *y = point_retract(y, &v);
        }
        out
    }
}

impl Pullback for StatePullback<'_> {
    fn dim(&self) -> usize {
        self.grad.len()
    }

    fn base_value(&self) -> f64 {
        self.f0
    }

    fn base_gradient(&self) -> DVector<f64> {
        self.grad.clone()
    }

    fn value(&self, xi: &DVector<f64>) -> f64 {
        evaluate_cost(self.instance, &self.retract(xi)).total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionEstimates {
    /// Extremal eigenvalues of the model Hessian `M` over the sampled iterates.
    pub mu: f64,
    pub l: f64,
    /// Smallest eigenvalue over all preconditioner blocks.
    pub mu_p: f64,
    pub sigma_p: f64,
    pub c_g: f64,
}

/// Sample the smoothness, Hessian-approximation and preconditioner
/// constants over a set of iterates.
pub fn estimate_assumptions(
    instance: &ProblemInstance,
    states: &[State],
    lambda: f64,
    trials: usize,
    radius: f64,
    seed: u64,
) -> Result<AssumptionEstimates> {
    let mut est = AssumptionEstimates {
        mu: f64::INFINITY,
        l: 0.0,
        mu_p: f64::INFINITY,
        sigma_p: 0.0,
        c_g: 0.0,
    };
    for (k, state) in states.iter().enumerate() {
        let lbs = linearize_all(instance, state, lambda)?;
        let m = dense_model_hessian(instance, &lbs)?;
        let eig = SymmetricEigen::new(m).eigenvalues;
        est.mu = est.mu.min(eig.min());
        est.l = est.l.max(eig.max());
        let p = fresh_preconditioner(instance, &lbs)?;
        for pl in &p.blocks {
            est.mu_p = est.mu_p.min(SymmetricEigen::new(*pl).eigenvalues.min());
        }
        let s = global_reduced_hessian(instance, &lbs)?;
        est.sigma_p = est.sigma_p.max(estimate_sigma_p(&s, &p)?);
        let pb = StatePullback::new(instance, state)?;
        est.c_g = est
            .c_g
            .max(sample_pullback_gap(&pb, trials, radius, seed.wrapping_add(k as u64)));
    }
    Ok(est)
}
