//! Monolithic reference: the same iteration with every block fresh, no
//! caches and no messages. Used as an oracle for the networked run.

use crate::coordinator::{aggregate_precond, apply_shared_step, compute_step, sum_reduced_gradients};
use crate::geometry::se3_retract;
use crate::lazycomm::GradNormHistory;
use crate::localmodel::{jacobi_blocks, linearize, private_update, reduced_gradient, LocalBlocks};
use crate::problem::{ProblemInstance, State};
use crate::theory::lyapunov;
use crate::Result;

use super::{full_grad_norm, metric_columns, total_cost, IterationRecord, IterationTrace, RunConfig, RunOutput};

/// Reduced preconditioned gradient descent with exact aggregation. Upload
/// and broadcast columns stay zero.
pub fn run_reference(instance: &ProblemInstance, init: &State, cfg: &RunConfig) -> Result<RunOutput> {
    run_reference_observed(instance, init, cfg, |_, _| {})
}

pub fn run_reference_observed(
    instance: &ProblemInstance,
    init: &State,
    cfg: &RunConfig,
    mut observer: impl FnMut(&State, &IterationRecord),
) -> Result<RunOutput> {
    cfg.validate()?;
    instance.check_state(init)?;
    let mut state = init.clone();
    let mut hist = GradNormHistory::new(cfg.lazy.dbar());
    let mut trace = IterationTrace::default();
    let n_agents = instance.num_agents();

    for k in 0..=cfg.max_iters {
        let lbs: Vec<LocalBlocks> = instance
            .agents()
            .iter()
            .map(|a| linearize(a, &state.poses[a.id], &a.gather(&state.points), cfg.lambda))
            .collect::<Result<_>>()?;
        let refs: Vec<&LocalBlocks> = lbs.iter().collect();
        let f = total_cost(&refs);
        let grad_norm = full_grad_norm(instance, &refs);
        let last = k == cfg.max_iters || cfg.grad_tol.is_some_and(|tol| grad_norm < tol);
        let (ate, reproj) = metric_columns(instance, &state, &cfg.metrics, k, last);
        let mut record = IterationRecord {
            iter: k,
            f,
            grad_norm,
            what_normsq: None,
            lyapunov: cfg.beta.as_ref().map(|b| lyapunov(f, &hist, b)),
            precond_uploads: vec![0; n_agents],
            grad_uploads: vec![0; n_agents],
            upload_bytes_cum: 0,
            broadcast_bytes_cum: 0,
            ate,
            reproj,
            wall_seconds: 0.0,
        };
        if last {
            observer(&state, &record);
            trace.records.push(record);
            break;
        }

        let d: Vec<_> = lbs.iter().map(|lb| jacobi_blocks(lb).blocks).collect();
        let p = aggregate_precond(instance, &d)?;
        let w: Vec<_> = lbs.iter().map(|lb| reduced_gradient(lb).blocks).collect();
        let what = sum_reduced_gradients(instance, &w);
        let step = compute_step(&what, &p, cfg.gamma);
        record.what_normsq = Some(step.gradsq);
        observer(&state, &record);
        trace.records.push(record);

        for (a, lb) in instance.agents().iter().zip(&lbs) {
            let v_slots: Vec<_> = a.observed_blocks().iter().map(|&l| step.v[l]).collect();
            let u = private_update(lb, &v_slots);
            for (pose, uj) in state.poses[a.id].iter_mut().zip(&u) {
                *pose = se3_retract(pose, uj);
            }
        }
        state.points = apply_shared_step(&state.points, &step.v);
        hist.push(step.gradsq);
    }
    Ok(RunOutput { trace, state })
}
