//! Bulk-synchronous simulation of the agent/server network.
//!
//! Each iteration runs three lockstep stages. Agents work in parallel on a
//! worker pool; the server aggregates single-threaded in ascending agent
//! order, so results do not depend on the number of threads. All traffic
//! is encoded to bytes, metered, and decoded on the receiving side.

pub mod message;
pub mod reference;

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::coordinator::{aggregate_precond, apply_shared_step, compute_step, sum_reduced_gradients, Preconditioner};
use crate::dataio::metrics::{ate_rmse, mean_reproj};
use crate::geometry::{se3_retract, Mat3, Point3, Pose, Vec3};
use crate::lazycomm::{
    approx_grad_block, approx_precond_block, assemble_dhat, assemble_what, grad_threshold, grad_trigger,
    precond_trigger, BlockCache, GradNormHistory, LazyConfig, MScaling,
};
use crate::localmodel::{jacobi_blocks, linearize, private_update, reduced_gradient, LocalBlocks};
use crate::problem::{AgentData, ProblemInstance, State};
use crate::theory::lyapunov;
use crate::{Error, Result};

use message::{pack_sym, pack_vec, unpack_sym, unpack_vec, Message, MessageKind};

/// Per-iteration metrics beyond the optimizer's own quantities.
#[derive(Debug, Clone, Default)]
pub struct MetricOptions {
    /// Evaluate ATE and reprojection error every `every` iterations and at
    /// the last one; 0 disables them.
    pub every: usize,
    pub ground_truth: Option<Arc<State>>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub lazy: LazyConfig,
    pub max_iters: usize,
    pub seed: u64,
    /// Stop early once the full gradient norm drops below this.
    pub grad_tol: Option<f64>,
    /// Lyapunov weights `beta_1..beta_dbar`; enables the Lyapunov column.
    pub beta: Option<Vec<f64>>,
    /// Worker threads for the agent stages; 0 picks the pool default.
    pub threads: usize,
    pub metrics: MetricOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 1e6,
            lazy: LazyConfig::default(),
            max_iters: 50,
            seed: 0,
            grad_tol: None,
            beta: None,
            threads: 0,
            metrics: MetricOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig("gamma must be positive".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig("lambda must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if let Some(beta) = &self.beta {
            if beta.len() != self.lazy.dbar() {
                return Err(Error::InvalidConfig(format!(
                    "beta has {} entries but dbar is {}",
                    beta.len(),
                    self.lazy.dbar()
                )));
            }
        }
        self.lazy.validate()
    }
}

/// One row of the trace, describing iterate `x^k` and the step taken from it.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub f: f64,
    /// Norm of the full gradient of `f` at `x^k`.
    pub grad_norm: f64,
    /// `||w_hat^k||^2_{P^k}`; `None` on the final row, where no step is taken.
    pub what_normsq: Option<f64>,
    pub lyapunov: Option<f64>,
    pub precond_uploads: Vec<usize>,
    pub grad_uploads: Vec<usize>,
    pub upload_bytes_cum: u64,
    pub broadcast_bytes_cum: u64,
    pub ate: Option<f64>,
    pub reproj: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn total_upload_bytes(&self) -> u64 {
        self.last().map_or(0, |r| r.upload_bytes_cum)
    }

    pub fn total_broadcast_bytes(&self) -> u64 {
        self.last().map_or(0, |r| r.broadcast_bytes_cum)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: IterationTrace,
    pub state: State,
}

/// Full gradient norm from per-agent linearizations, shared part summed in
/// ascending agent order.
pub(crate) fn full_grad_norm(instance: &ProblemInstance, lbs: &[&LocalBlocks]) -> f64 {
    let private: f64 = lbs.iter().flat_map(|lb| lb.g_x.iter()).map(|g| g.norm_squared()).sum();
    let shared: f64 = (0..instance.num_points())
        .map(|l| {
            instance
                .block_agents(l)
                .iter()
                .fold(Vec3::zeros(), |acc, &(i, slot)| acc + lbs[i].g_y[slot])
                .norm_squared()
        })
        .sum();
    (private + shared).sqrt()
}

pub(crate) fn total_cost(lbs: &[&LocalBlocks]) -> f64 {
    lbs.iter().fold(0.0, |acc, lb| acc + lb.cost)
}

pub(crate) fn metric_columns(
    instance: &ProblemInstance,
    state: &State,
    opts: &MetricOptions,
    k: usize,
    last: bool,
) -> (Option<f64>, Option<f64>) {
    if opts.every == 0 || !(last || k.is_multiple_of(opts.every)) {
        return (None, None);
    }
    let reproj = Some(mean_reproj(instance, state));
    let ate = opts.ground_truth.as_ref().and_then(|gt| {
        let est: Vec<Pose> = state.poses.iter().flatten().copied().collect();
        let truth: Vec<Pose> = gt.poses.iter().flatten().copied().collect();
        ate_rmse(&est, &truth).ok()
    });
    (ate, reproj)
}

pub(crate) fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Agent-side state. `y`, `p`, `cache` and `hist` mirror server data.
struct AgentNode<'a> {
    data: &'a AgentData,
    poses: Vec<Pose>,
    y: Vec<Point3>,
    p: Vec<Mat3>,
    cache: BlockCache,
    hist: GradNormHistory,
    lb: Option<LocalBlocks>,
}

struct Server {
    y: Vec<Point3>,
    caches: Vec<BlockCache>,
    hist: GradNormHistory,
    p: Option<Preconditioner>,
}

/// Bytes sent on one agent's channels in one stage.
type Outbox = Vec<Vec<u8>>;

impl AgentNode<'_> {
    fn linearize(&mut self, lambda: f64) -> Result<()> {
        self.lb = Some(linearize(self.data, &self.poses, &self.y, lambda)?);
        Ok(())
    }

    fn lb(&self) -> &LocalBlocks {
        self.lb.as_ref().expect("stage order: linearize first")
    }

    /// Stage 1: evaluate the preconditioner rule and commit uploads locally.
    fn precond_stage(&mut self, cfg: &LazyConfig, iter: usize) -> Result<Outbox> {
        let s = jacobi_blocks(self.lb());
        let observed = self.data.observed_blocks();
        let mut uploads = Vec::new();
        for (slot, s_new) in s.blocks.iter().enumerate() {
            let tilde = approx_precond_block(&self.cache.entries[slot], &self.y[slot]);
            if precond_trigger(s_new, tilde.as_ref(), cfg.delta_p) {
                uploads.push((slot, *s_new));
            }
        }
        assemble_dhat(self.data.id, &mut self.cache, &uploads, &self.y, observed, iter)?;
        Ok(uploads
            .iter()
            .map(|&(slot, m)| {
                Message::PrecondUpload {
                    agent: self.data.id,
                    block: observed[slot] as u32,
                    s: pack_sym(&m),
                }
                .encode()
            })
            .collect())
    }

    /// Stage 2: evaluate the gradient rule with this iteration's `P`.
    fn grad_stage(&mut self, cfg: &LazyConfig, m_scale: usize, n_agents: usize, iter: usize) -> Result<Outbox> {
        let w = reduced_gradient(self.lb());
        let observed = self.data.observed_blocks();
        let threshold = grad_threshold(&self.hist, cfg, m_scale, n_agents);
        let mut uploads = Vec::new();
        for (slot, w_new) in w.blocks.iter().enumerate() {
            let tilde = approx_grad_block(&self.cache.entries[slot], &self.y[slot]);
            if grad_trigger(w_new, tilde.as_ref(), &self.p[slot], threshold) {
                uploads.push((slot, *w_new));
            }
        }
        assemble_what(self.data.id, &mut self.cache, &uploads, &self.y, observed, iter)?;
        Ok(uploads
            .iter()
            .map(|&(slot, w)| {
                Message::GradUpload {
                    agent: self.data.id,
                    block: observed[slot] as u32,
                    w: pack_vec(&w),
                }
                .encode()
            })
            .collect())
    }

    fn apply_deltas(&mut self, deltas: &[Vec<u8>]) -> Result<()> {
        for bytes in deltas {
            let Message::PrecondDelta { block, p } = Message::decode(MessageKind::PrecondDelta, self.data.id, bytes)?
            else {
                unreachable!("decode returns the requested kind")
            };
            let slot = self.data.layout.slot_of(block as usize).ok_or_else(|| {
                Error::Wire(format!(
                    "agent {} got a delta for unobserved block {block}",
                    self.data.id
                ))
            })?;
            self.p[slot] = unpack_sym(&p);
        }
        Ok(())
    }

    /// Stage 3: recover the private update and retract everything.
    fn step_stage(&mut self, bytes: &[u8]) -> Result<()> {
        let Message::StepBroadcast { v, gradsq } = Message::decode(MessageKind::StepBroadcast, self.data.id, bytes)?
        else {
            unreachable!("decode returns the requested kind")
        };
        let observed = self.data.observed_blocks();
        if v.len() != observed.len() || v.iter().zip(observed).any(|((b, _), &l)| *b as usize != l) {
            return Err(Error::Wire(format!(
                "agent {} got a step for the wrong blocks",
                self.data.id
            )));
        }
        let v_slots: Vec<Vec3> = v.iter().map(|(_, x)| unpack_vec(x)).collect();
        let u = private_update(self.lb(), &v_slots);
        for (pose, uj) in self.poses.iter_mut().zip(&u) {
            *pose = se3_retract(pose, uj);
        }
        for (y, vl) in self.y.iter_mut().zip(&v_slots) {
            *y = crate::geometry::point_retract(y, vl);
        }
        self.hist.push(gradsq);
        self.lb = None;
        Ok(())
    }
}

fn decode_uploads<T>(
    kind: MessageKind,
    agent: &AgentData,
    outbox: &[Vec<u8>],
    extract: impl Fn(Message) -> (u32, T),
) -> Result<Vec<(usize, T)>> {
    outbox
        .iter()
        .map(|bytes| {
            let (block, value) = extract(Message::decode(kind, agent.id, bytes)?);
            let slot = agent.layout.slot_of(block as usize).ok_or(Error::ProtocolViolation {
                agent: agent.id,
                block: block as usize,
                reason: "upload for an unobserved block",
            })?;
            Ok((slot, value))
        })
        .collect()
}

fn check_coherence(server: &Server, agents: &[AgentNode<'_>]) -> Result<()> {
    for node in agents {
        let id = node.data.id;
        if node.cache != server.caches[id] {
            return Err(Error::CacheIncoherent {
                agent: id,
                what: "block cache",
            });
        }
        if node.hist != server.hist {
            return Err(Error::CacheIncoherent {
                agent: id,
                what: "gradient-norm history",
            });
        }
        if node.y != node.data.gather(&server.y) {
            return Err(Error::CacheIncoherent {
                agent: id,
                what: "shared blocks",
            });
        }
        if let Some(p) = &server.p {
            if node
                .p
                .iter()
                .zip(node.data.observed_blocks())
                .any(|(a, &l)| *a != p.blocks[l])
            {
                return Err(Error::CacheIncoherent {
                    agent: id,
                    what: "preconditioner",
                });
            }
        }
    }
    Ok(())
}

fn collect_state(agents: &[AgentNode<'_>], server: &Server) -> State {
    State {
        poses: agents.iter().map(|a| a.poses.clone()).collect(),
        points: server.y.clone(),
    }
}

/// Run the lazy algorithm from `init`.
pub fn run(instance: &ProblemInstance, init: &State, cfg: &RunConfig) -> Result<RunOutput> {
    run_observed(instance, init, cfg, |_, _| {})
}

/// [`run`] with a callback receiving every iterate and its trace row.
pub fn run_observed(
    instance: &ProblemInstance,
    init: &State,
    cfg: &RunConfig,
    mut observer: impl FnMut(&State, &IterationRecord),
) -> Result<RunOutput> {
    cfg.validate()?;
    instance.check_state(init)?;
    let pool = build_pool(cfg.threads)?;
    let n_agents = instance.num_agents();
    let dbar = cfg.lazy.dbar();

    let mut agents: Vec<AgentNode<'_>> = instance
        .agents()
        .iter()
        .map(|data| AgentNode {
            data,
            poses: init.poses[data.id].clone(),
            y: data.gather(&init.points),
            p: vec![Mat3::zeros(); data.layout.num_slots()],
            cache: BlockCache::new(data.layout.num_slots()),
            hist: GradNormHistory::new(dbar),
            lb: None,
        })
        .collect();
    let mut server = Server {
        y: init.points.clone(),
        caches: instance
            .agents()
            .iter()
            .map(|a| BlockCache::new(a.layout.num_slots()))
            .collect(),
        hist: GradNormHistory::new(dbar),
        p: None,
    };

    let mut trace = IterationTrace::default();
    let mut upload_bytes = 0u64;
    let mut broadcast_bytes = 0u64;

    for k in 0..=cfg.max_iters {
        let t0 = Instant::now();
        pool.install(|| agents.par_iter_mut().try_for_each(|a| a.linearize(cfg.lambda)))?;
        let lbs: Vec<&LocalBlocks> = agents.iter().map(|a| a.lb()).collect();
        let f = total_cost(&lbs);
        let grad_norm = full_grad_norm(instance, &lbs);
        let lyap = cfg.beta.as_ref().map(|b| lyapunov(f, &server.hist, b));
        let last = k == cfg.max_iters || cfg.grad_tol.is_some_and(|tol| grad_norm < tol);
        let state = collect_state(&agents, &server);
        let (ate, reproj) = metric_columns(instance, &state, &cfg.metrics, k, last);

        let mut record = IterationRecord {
            iter: k,
            f,
            grad_norm,
            what_normsq: None,
            lyapunov: lyap,
            precond_uploads: vec![0; n_agents],
            grad_uploads: vec![0; n_agents],
            upload_bytes_cum: upload_bytes,
            broadcast_bytes_cum: broadcast_bytes,
            ate,
            reproj,
            wall_seconds: 0.0,
        };
        if last {
            record.wall_seconds = t0.elapsed().as_secs_f64();
            observer(&state, &record);
            trace.records.push(record);
            break;
        }

        // Stage 1: Jacobi blocks, preconditioner rule, aggregation.
        let outboxes: Vec<Outbox> = pool.install(|| {
            agents
                .par_iter_mut()
                .map(|a| a.precond_stage(&cfg.lazy, k))
                .collect::<Result<_>>()
        })?;
        let mut dhat = Vec::with_capacity(n_agents);
        for (i, outbox) in outboxes.iter().enumerate() {
            let agent = instance.agent(i);
            upload_bytes += outbox.iter().map(|b| b.len() as u64).sum::<u64>();
            record.precond_uploads[i] = outbox.len();
            let uploads = decode_uploads(MessageKind::PrecondUpload, agent, outbox, |m| match m {
                Message::PrecondUpload { block, s, .. } => (block, unpack_sym(&s)),
                _ => unreachable!(),
            })?;
            dhat.push(assemble_dhat(
                i,
                &mut server.caches[i],
                &uploads,
                &agent.gather(&server.y),
                agent.observed_blocks(),
                k,
            )?);
        }
        let p = aggregate_precond(instance, &dhat)?;
        let changed: Vec<bool> = match &server.p {
            None => vec![true; p.blocks.len()],
            Some(old) => old.blocks.iter().zip(&p.blocks).map(|(a, b)| a != b).collect(),
        };
        let deltas: Vec<Outbox> = instance
            .agents()
            .iter()
            .map(|a| {
                a.observed_blocks()
                    .iter()
                    .filter(|&&l| changed[l])
                    .map(|&l| {
                        Message::PrecondDelta {
                            block: l as u32,
                            p: pack_sym(&p.blocks[l]),
                        }
                        .encode()
                    })
                    .collect()
            })
            .collect();
        broadcast_bytes += deltas.iter().flatten().map(|b| b.len() as u64).sum::<u64>();
        server.p = Some(p);

        // Stage 2: reduced gradients under this iteration's preconditioner.
        let m_global = instance.num_points();
        let outboxes: Vec<Outbox> = pool.install(|| {
            agents
                .par_iter_mut()
                .zip(&deltas)
                .map(|(a, d)| {
                    a.apply_deltas(d)?;
                    let m_scale = match cfg.lazy.scaling_m {
                        MScaling::GlobalM => m_global,
                        MScaling::PerAgentObserved => a.data.layout.num_slots(),
                    };
                    a.grad_stage(&cfg.lazy, m_scale, n_agents, k)
                })
                .collect::<Result<_>>()
        })?;
        let mut what_i = Vec::with_capacity(n_agents);
        for (i, outbox) in outboxes.iter().enumerate() {
            let agent = instance.agent(i);
            upload_bytes += outbox.iter().map(|b| b.len() as u64).sum::<u64>();
            record.grad_uploads[i] = outbox.len();
            let uploads = decode_uploads(MessageKind::GradUpload, agent, outbox, |m| match m {
                Message::GradUpload { block, w, .. } => (block, unpack_vec(&w)),
                _ => unreachable!(),
            })?;
            what_i.push(assemble_what(
                i,
                &mut server.caches[i],
                &uploads,
                &agent.gather(&server.y),
                agent.observed_blocks(),
                k,
            )?);
        }
        let what = sum_reduced_gradients(instance, &what_i);
        let p = server.p.as_ref().expect("set in stage 1");

        // Stage 3: shared step, private updates, retraction.
        let step = compute_step(&what, p, cfg.gamma);
        let broadcasts: Vec<Vec<u8>> = instance
            .agents()
            .iter()
            .map(|a| {
                Message::StepBroadcast {
                    v: a.observed_blocks()
                        .iter()
                        .map(|&l| (l as u32, pack_vec(&step.v[l])))
                        .collect(),
                    gradsq: step.gradsq,
                }
                .encode()
            })
            .collect();
        broadcast_bytes += broadcasts.iter().map(|b| b.len() as u64).sum::<u64>();
        pool.install(|| {
            agents
                .par_iter_mut()
                .zip(&broadcasts)
                .try_for_each(|(a, b)| a.step_stage(b))
        })?;
        server.y = apply_shared_step(&server.y, &step.v);
        server.hist.push(step.gradsq);
        check_coherence(&server, &agents)?;

        record.what_normsq = Some(step.gradsq);
        record.upload_bytes_cum = upload_bytes;
        record.broadcast_bytes_cum = broadcast_bytes;
        record.wall_seconds = t0.elapsed().as_secs_f64();
        observer(&state, &record);
        trace.records.push(record);
    }

    Ok(RunOutput {
        state: collect_state(&agents, &server),
        trace,
    })
}
