#![allow(dead_code)]

use std::sync::Arc;
use std::time::Instant;

use larpg::dataio::bal::{from_scene, parse_bal, write_bal};
use larpg::dataio::metrics::{ate_rmse, umeyama_sim3};
use larpg::dataio::trace::write_trace;
use larpg::geometry::{
    project, project_jacobians, registration_jacobians, registration_residual, so3_exp, Mat3, Pose, Vec3,
};
use larpg::lazycomm::{grad_threshold, grad_trigger, precond_trigger, DeltaP, GradNormHistory, LazyConfig, MScaling};
use larpg::localmodel::{dense_reduced_hessian, linearize, private_update, reduced_gradient};
use larpg::problem::{
    perturb_state, synth_generate, AgentData, Measurement, PerturbSigmas, State, SynthParams, SynthProblem,
};
use larpg::runtime::reference::run_reference;
use larpg::runtime::{run, MetricOptions, RunConfig, RunOutput};
use larpg::theory::{admissible_params, check_descent, sigma_p_at};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    #[track_caller]
    pub fn assert(self) {
        assert!(self.pass, "{}", self.detail);
    }
}

/// The 3-agent, 6-camera, 30-point synthetic instance.
pub fn small_synth(seed: u64, noise_px: f64) -> SynthProblem {
    synth_generate(&SynthParams {
        seed,
        noise_px,
        ..SynthParams::default()
    })
    .unwrap()
}

pub fn perturbed(p: &SynthProblem, seed: u64) -> State {
    perturb_state(&p.ground_truth, PerturbSigmas::EUROC, seed + 1000)
}

pub fn flat_poses(s: &State) -> Vec<Pose> {
    s.poses.iter().flatten().copied().collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Dense `M = 2 sum w J^T J + lambda I` and `g = 2 sum w J^T r` of one agent,
/// built row by row from the residual Jacobians. Layout: poses, then slots.
pub struct DenseModel {
    pub m: DMatrix<f64>,
    pub g: DVector<f64>,
    pub n_x: usize,
}

pub fn dense_agent_model(agent: &AgentData, poses: &[Pose], shared: &[Vec3], lambda: f64) -> DenseModel {
    let n_x = 6 * poses.len();
    let n = n_x + 3 * shared.len();
    let mut m = DMatrix::identity(n, n) * lambda;
    let mut g = DVector::zeros(n);
    for o in &agent.observations {
        let j = o.pose_idx;
        let slot = agent.layout.slot_of(o.point_id).unwrap();
        let (rows, r, jp, jy) = match &o.measurement {
            Measurement::Pixel(q) => {
                let proj = project(&poses[j], &agent.intrinsics[j], &shared[slot]);
                if !proj.valid {
                    continue;
                }
                let (jp, jy) = project_jacobians(&poses[j], &agent.intrinsics[j], &shared[slot]);
                let r = q - proj.pixel;
                (
                    2,
                    DVector::from_column_slice(r.as_slice()),
                    DMatrix::from_column_slice(2, 6, jp.as_slice()),
                    DMatrix::from_column_slice(2, 3, jy.as_slice()),
                )
            }
            Measurement::Point(q) => {
                let r = registration_residual(&poses[j], q, &shared[slot]);
                let (jp, jy) = registration_jacobians(&poses[j], q);
                (
                    3,
                    DVector::from_column_slice(r.as_slice()),
                    DMatrix::from_column_slice(3, 6, jp.as_slice()),
                    DMatrix::from_column_slice(3, 3, jy.as_slice()),
                )
            }
        };
        let mut jrow = DMatrix::zeros(rows, n);
        jrow.view_mut((0, 6 * j), (rows, 6)).copy_from(&jp);
        jrow.view_mut((0, n_x + 3 * slot), (rows, 3)).copy_from(&jy);
        m += jrow.transpose() * &jrow * (2.0 * o.weight);
        g += jrow.transpose() * r * (2.0 * o.weight);
    }
    DenseModel { m, g, n_x }
}

impl DenseModel {
    /// `(S, w)` by dense Schur elimination of the pose block.
    pub fn schur(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.m.nrows();
        let nx = self.n_x;
        let ny = n - nx;
        let mxx = self.m.view((0, 0), (nx, nx)).into_owned();
        let mxy = self.m.view((0, nx), (nx, ny)).into_owned();
        let myy = self.m.view((nx, nx), (ny, ny)).into_owned();
        let lu = mxx.lu();
        let s = &myy - mxy.transpose() * lu.solve(&mxy).unwrap();
        let gx = self.g.rows(0, nx).into_owned();
        let w = self.g.rows(nx, ny) - mxy.transpose() * lu.solve(&gx).unwrap();
        (s, w)
    }

    /// `argmin_u` of the model for fixed `v`, by dense solve.
    pub fn argmin_u(&self, v: &DVector<f64>) -> DVector<f64> {
        let nx = self.n_x;
        let ny = self.m.nrows() - nx;
        let mxx = self.m.view((0, 0), (nx, nx)).into_owned();
        let mxy = self.m.view((0, nx), (nx, ny));
        let rhs = -(mxy * v + self.g.rows(0, nx));
        mxx.lu().solve(&rhs).unwrap()
    }
}

/// Reduced gradient and dense reduced Hessian against brute-force Schur
/// complements of the dense model.
pub fn check_schur(seeds: std::ops::Range<u64>, lambda: f64) -> Outcome {
    let t = Instant::now();
    let mut worst_s = 0.0f64;
    let mut worst_w = 0.0f64;
    for seed in seeds.clone() {
        let p = small_synth(seed, 1.0);
        let x = perturbed(&p, seed);
        for a in p.instance().agents() {
            let shared = a.gather(&x.points);
            let lb = linearize(a, &x.poses[a.id], &shared, lambda).unwrap();
            let (s, w) = dense_agent_model(a, &x.poses[a.id], &shared, lambda).schur();
            let got_s = dense_reduced_hessian(&lb).unwrap();
            let got_w = DVector::from_iterator(
                w.len(),
                reduced_gradient(&lb).blocks.iter().flat_map(|b| b.iter().copied()),
            );
            worst_s = worst_s.max((&got_s - &s).amax() / s.amax());
            worst_w = worst_w.max((&got_w - &w).amax() / w.amax());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome::new(
        worst_s <= 1e-9 && worst_w <= 1e-9 && secs < 10.0,
        format!(
            "{} instances: max rel err S {worst_s:.1e}, w {worst_w:.1e} (tol 1e-9); {secs:.2}s (limit 10s)",
            seeds.count()
        ),
    )
}

/// Analytic gradient of `f o Retr` against central differences.
pub fn check_gradient_fd(configs: std::ops::Range<u64>) -> Outcome {
    let mut worst = 0.0f64;
    for seed in configs.clone() {
        let p = small_synth(seed / 5, 1.0);
        let x = perturbed(&p, seed);
        worst = worst.max(gradient_fd_error(p.instance(), &x));
    }
    Outcome::new(
        worst < 1e-5,
        format!(
            "{} configurations: max ||g_fd - g||_inf / ||g||_inf = {worst:.1e} (tol 1e-5)",
            configs.count()
        ),
    )
}

pub fn gradient_fd_error(instance: &larpg::problem::ProblemInstance, x: &State) -> f64 {
    use larpg::theory::{Pullback, StatePullback};
    let pb = StatePullback::new(instance, x).unwrap();
    let g = pb.base_gradient();
    let h = 1e-6;
    let mut fd = DVector::zeros(pb.dim());
    for k in 0..pb.dim() {
        let mut e = DVector::zeros(pb.dim());
        e[k] = h;
        fd[k] = (pb.value(&e) - pb.value(&-e)) / (2.0 * h);
    }
    (&fd - &g).amax() / g.amax()
}

/// The model minimized over the private block equals the reduced
/// model, and the eliminated update matches a dense minimizer.
pub fn check_reduced_model(seeds: std::ops::Range<u64>, samples: usize) -> Outcome {
    let mut worst_val = 0.0f64;
    let mut worst_u = 0.0f64;
    for seed in seeds.clone() {
        let p = small_synth(seed, 1.0);
        let x = perturbed(&p, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in p.instance().agents() {
            let shared = a.gather(&x.points);
            let lb = linearize(a, &x.poses[a.id], &shared, 1.0).unwrap();
            let dense = dense_agent_model(a, &x.poses[a.id], &shared, 1.0);
            for _ in 0..samples {
                let v: Vec<Vec3> = (0..shared.len())
                    .map(|_| Vec3::from_fn(|_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                let u = private_update(&lb, &v);
                let lhs = lb.model_value(&u, &v);
                let rhs = lb.reduced_model_value(&v).unwrap();
                worst_val = worst_val.max(rel(lhs, rhs));
                let vv = DVector::from_iterator(3 * v.len(), v.iter().flat_map(|b| b.iter().copied()));
                let ud = dense.argmin_u(&vv);
                let uu = DVector::from_iterator(
                    ud.len(),
                    u.iter().flat_map(|t| t.to_vector().iter().copied().collect::<Vec<_>>()),
                );
                worst_u = worst_u.max((&uu - &ud).amax() / ud.amax());
            }
        }
    }
    Outcome::new(
        worst_val <= 1e-9 && worst_u <= 1e-9,
        format!(
            "{} instances x {samples} v: max rel |m(u*,v) - h(v)| {worst_val:.1e}, u* vs dense argmin {worst_u:.1e} (tol 1e-9)",
            seeds.count()
        ),
    )
}

fn bits_equal(a: &RunOutput, b: &RunOutput) -> Option<String> {
    if a.trace.records.len() != b.trace.records.len() {
        return Some("trace lengths differ".into());
    }
    for (ra, rb) in a.trace.records.iter().zip(&b.trace.records) {
        let same = ra.f.to_bits() == rb.f.to_bits()
            && ra.grad_norm.to_bits() == rb.grad_norm.to_bits()
            && ra.what_normsq.map(f64::to_bits) == rb.what_normsq.map(f64::to_bits)
            && ra.lyapunov.map(f64::to_bits) == rb.lyapunov.map(f64::to_bits)
            && ra.ate.map(f64::to_bits) == rb.ate.map(f64::to_bits)
            && ra.reproj.map(f64::to_bits) == rb.reproj.map(f64::to_bits);
        if !same {
            return Some(format!("iteration {} differs", ra.iter));
        }
    }
    let pa = flat_poses(&a.state)
        .iter()
        .flat_map(|p| p.to_array())
        .map(f64::to_bits)
        .collect::<Vec<_>>();
    let pb = flat_poses(&b.state)
        .iter()
        .flat_map(|p| p.to_array())
        .map(f64::to_bits)
        .collect::<Vec<_>>();
    let ya = a
        .state
        .points
        .iter()
        .flat_map(|y| y.iter().copied())
        .map(f64::to_bits)
        .collect::<Vec<_>>();
    let yb = b
        .state
        .points
        .iter()
        .flat_map(|y| y.iter().copied())
        .map(f64::to_bits)
        .collect::<Vec<_>>();
    (pa != pb || ya != yb).then(|| "final states differ".into())
}

/// Eager LARPG against the monolithic reference, bit for bit.
pub fn check_reference_equivalence(seeds: std::ops::Range<u64>, iters: usize) -> Outcome {
    for seed in seeds.clone() {
        let p = small_synth(seed, 1.0);
        let x = perturbed(&p, seed);
        let cfg = RunConfig {
            lambda: 1.0,
            gamma: 0.5,
            lazy: LazyConfig::eager(),
            max_iters: iters,
            beta: Some(vec![0.1]),
            metrics: MetricOptions {
                every: 1,
                ground_truth: Some(Arc::new(p.ground_truth.clone())),
            },
            ..RunConfig::default()
        };
        let lazy = run(p.instance(), &x, &cfg).unwrap();
        let reference = run_reference(p.instance(), &x, &cfg).unwrap();
        if let Some(why) = bits_equal(&lazy, &reference) {
            return Outcome::new(false, format!("seed {seed}: {why}"));
        }
        let full: Vec<usize> = p
            .instance()
            .agents()
            .iter()
            .map(|a| a.observed_blocks().len())
            .collect();
        let every_block = lazy.trace.records[..iters]
            .iter()
            .all(|r| r.precond_uploads == full && r.grad_uploads == full);
        if !every_block {
            return Outcome::new(false, format!("seed {seed}: eager run skipped an upload"));
        }
    }
    Outcome::new(
        true,
        format!(
            "{} instances x {iters} iterations bit-identical, every block uploaded",
            seeds.count()
        ),
    )
}

pub struct DescentRun {
    pub violations_200: usize,
    pub violations_all: usize,
    pub runmin_100: f64,
    pub runmin_400: f64,
    pub final_grad: f64,
}

/// LARPG with parameters from `admissible_params` at the dense `sigma_p`.
pub fn descent_run(seed: u64, iters: usize) -> DescentRun {
    let p = small_synth(seed, 1.0);
    let x = perturbed(&p, seed);
    let lambda = 1.0;
    let dbar = 10;
    let sigma = sigma_p_at(p.instance(), &x, lambda).unwrap();
    let gamma = 0.5 / sigma;
    let eps = vec![0.5 * (1.0 - sigma * gamma) / dbar as f64; dbar];
    let params = admissible_params(gamma, sigma, &eps).unwrap();
    let cfg = RunConfig {
        lambda,
        gamma,
        max_iters: iters,
        beta: Some(params.beta.clone()),
        lazy: LazyConfig {
            delta_p: DeltaP::Finite(0.1),
            epsilon: eps,
            scaling_m: MScaling::PerAgentObserved,
        },
        ..RunConfig::default()
    };
    let out = run(p.instance(), &x, &cfg).unwrap();
    let rep = check_descent(&out.trace, &params.beta);
    let rs = &out.trace.records;
    let runmin = |k: usize| {
        rs[..=k.min(rs.len() - 1)]
            .iter()
            .map(|r| r.grad_norm.powi(2))
            .fold(f64::INFINITY, f64::min)
    };
    DescentRun {
        violations_200: rep.violations.iter().filter(|&&k| k < 200).count(),
        violations_all: rep.violations.len(),
        runmin_100: runmin(100),
        runmin_400: runmin(400),
        final_grad: rs.last().unwrap().grad_norm,
    }
}

pub fn check_lyapunov(runs: &[DescentRun]) -> Outcome {
    let v200: usize = runs.iter().map(|r| r.violations_200).sum();
    let vall: usize = runs.iter().map(|r| r.violations_all).sum();
    Outcome::new(
        !runs.is_empty() && v200 == 0,
        format!(
            "{} instances: {v200} increases of V in the first 200 iterations ({vall} over full runs), slack 1e-10 rel",
            runs.len()
        ),
    )
}

pub fn check_convergence(runs: &[DescentRun]) -> Outcome {
    let worst_ratio = runs.iter().map(|r| r.runmin_400 / r.runmin_100).fold(0.0f64, f64::max);
    let worst_final = runs.iter().map(|r| r.final_grad).fold(0.0f64, f64::max);
    Outcome::new(
        !runs.is_empty() && worst_ratio <= 0.5 && worst_final < 1e-6,
        format!(
            "{} instances: max min|g|^2(400)/min|g|^2(100) = {worst_ratio:.1e} (<= 0.5), max final |g| = {worst_final:.1e} (< 1e-6)",
            runs.len()
        ),
    )
}

pub struct CommRun {
    pub eps: f64,
    pub ate: f64,
    pub upload_bytes: u64,
}

/// The 30-agent, 20k-point communication experiment for one epsilon.
pub fn comm_runs(epsilons: &[f64], n_points: usize, seed: u64) -> Vec<CommRun> {
    let p = synth_generate(&SynthParams {
        n_cameras: 30,
        n_points,
        n_agents: 30,
        observation_density: 0.1,
        noise_px: 1.0,
        seed,
        min_views: 2,
        ..SynthParams::default()
    })
    .unwrap();
    let x = perturb_state(&p.ground_truth, PerturbSigmas::EUROC, seed + 1);
    let gt = flat_poses(&p.ground_truth);
    epsilons
        .iter()
        .map(|&eps| {
            let cfg = RunConfig {
                lambda: 1e3,
                gamma: 1.0,
                max_iters: 50,
                lazy: LazyConfig {
                    scaling_m: MScaling::GlobalM,
                    ..LazyConfig::uniform(f64::INFINITY, eps, 10)
                },
                ..RunConfig::default()
            };
            let out = run(p.instance(), &x, &cfg).unwrap();
            CommRun {
                eps,
                ate: ate_rmse(&flat_poses(&out.state), &gt).unwrap(),
                upload_bytes: out.trace.total_upload_bytes(),
            }
        })
        .collect()
}

pub fn check_comm_reduction(runs: &[CommRun], secs: f64) -> Outcome {
    let base = runs.iter().find(|r| r.eps == 0.0).expect("eps = 0 run");
    let ten = runs.iter().find(|r| r.eps == 10.0).expect("eps = 10 run");
    let saved = 1.0 - ten.upload_bytes as f64 / base.upload_bytes as f64;
    let drift = |r: &CommRun| (r.ate / base.ate - 1.0).abs();
    let max_drift = runs.iter().map(drift).fold(0.0f64, f64::max);
    let detail = runs
        .iter()
        .map(|r| {
            format!(
                "eps {}: ATE {:.5} ({:+.2}%), {} B",
                r.eps,
                r.ate,
                100.0 * (r.ate / base.ate - 1.0),
                r.upload_bytes
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(
        saved >= 0.4 && drift(ten) <= 0.05 && max_drift <= 0.02 && secs < 300.0,
        format!(
            "upload saved at eps 10: {:.1}% (>= 40%); {detail}; {secs:.1}s (limit 300s)",
            100.0 * saved
        ),
    )
}

/// Constructed fixtures for both triggering rules, exact comparisons only.
pub fn check_trigger_tables() -> Outcome {
    let mut fails = Vec::new();
    let mut total = 0;
    let mut expect = |name: &str, got: bool, want: bool| {
        total += 1;
        if got != want {
            fails.push(name.to_string());
        }
    };
    let s = Mat3::from_diagonal(&Vec3::new(4.0, 0.0, 0.0));
    let s_near = Mat3::from_diagonal(&Vec3::new(3.0, 0.0, 0.0));
    // ||S - S_tilde||_F = 1, ||S||_F = 4
    expect(
        "precond zero error, delta 0",
        precond_trigger(&s, Some(&s), DeltaP::Finite(0.0)),
        false,
    );
    expect(
        "precond boundary equal",
        precond_trigger(&s, Some(&s_near), DeltaP::Finite(0.25)),
        false,
    );
    expect(
        "precond just above",
        precond_trigger(&s, Some(&s_near), DeltaP::Finite(0.2499)),
        true,
    );
    expect(
        "precond delta 0 changed",
        precond_trigger(&s, Some(&s_near), DeltaP::Finite(0.0)),
        true,
    );
    expect(
        "precond first contact",
        precond_trigger(&s, None, DeltaP::Finite(1e9)),
        true,
    );
    expect(
        "precond frozen first contact",
        precond_trigger(&s, None, DeltaP::Frozen),
        true,
    );
    expect(
        "precond frozen",
        precond_trigger(&s, Some(&Mat3::zeros()), DeltaP::Frozen),
        false,
    );

    let p = Mat3::identity();
    let w = Vec3::new(1.0, 0.0, 0.0);
    let zero = Vec3::zeros();
    let mut hist = GradNormHistory::new(1);
    let cfg = LazyConfig::uniform(0.0, 1.0, 1);
    let empty = grad_threshold(&hist, &cfg, 1, 2);
    expect("empty history threshold 0", empty == 0.0, true);
    expect(
        "empty history changed block",
        grad_trigger(&w, Some(&zero), &p, empty),
        true,
    );
    hist.push(4.0);
    // (1 / (1 * 2^2)) * 1 * 4 = 1 = staleness error
    let thr = grad_threshold(&hist, &cfg, 1, 2);
    expect("threshold value", thr == 1.0, true);
    expect("grad zero error", grad_trigger(&w, Some(&w), &p, thr), false);
    expect("grad boundary equal", grad_trigger(&w, Some(&zero), &p, thr), false);
    expect(
        "grad just above",
        grad_trigger(&(w * 1.0000001), Some(&zero), &p, thr),
        true,
    );
    expect("grad first contact", grad_trigger(&w, None, &p, f64::INFINITY), true);
    let eager = grad_threshold(&hist, &LazyConfig::uniform(0.0, 0.0, 1), 1, 2);
    expect("eps 0 threshold", eager == 0.0, true);
    expect(
        "eps 0 tiny change",
        grad_trigger(&(w * (1.0 + f64::EPSILON)), Some(&w), &p, eager),
        true,
    );
    expect("eps 0 no change", grad_trigger(&w, Some(&w), &p, eager), false);
    Outcome::new(
        fails.is_empty(),
        if fails.is_empty() {
            format!("{total} fixtures exact")
        } else {
            format!("failed: {}", fails.join(", "))
        },
    )
}

/// Planted Sim(3) recovery, ATE similarity invariance, BAL write/parse.
pub fn check_metrics(trials: u64) -> Outcome {
    let mut worst_fit = 0.0f64;
    let mut worst_inv = 0.0f64;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.random_range(0.2..5.0);
        let rot = so3_exp(&Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0)));
        let trans = Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0));
        let est: Vec<Vec3> = (0..40)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let gt: Vec<Vec3> = est.iter().map(|x| rot * x * scale + trans).collect();
        let sim = umeyama_sim3(&est, &gt).unwrap();
        let sq: f64 = est
            .iter()
            .zip(&gt)
            .map(|(e, g)| (sim.apply(e) - g).norm_squared())
            .sum();
        worst_fit = worst_fit.max((sq / est.len() as f64).sqrt());

        let p = small_synth(seed, 0.0);
        let truth = flat_poses(&p.ground_truth);
        let noisy = flat_poses(&perturbed(&p, seed));
        let moved: Vec<Pose> = noisy
            .iter()
            .map(|pose| {
                let r = pose.rotation * rot.inverse();
                let c = rot * pose.center() * scale + trans;
                Pose::new(r, Vec3::zeros()).with_center(&c)
            })
            .collect();
        let a = ate_rmse(&noisy, &truth).unwrap();
        let b = ate_rmse(&moved, &truth).unwrap();
        worst_inv = worst_inv.max(rel(a, b));
    }
    let p = small_synth(3, 1.0);
    let ds = from_scene(&p.scene).unwrap();
    let mut buf = Vec::new();
    write_bal(&ds, &mut buf).unwrap();
    let back = parse_bal(buf.as_slice()).unwrap();
    let bal_ok = back == ds;
    Outcome::new(
        worst_fit <= 1e-12 && worst_inv <= 1e-9 && bal_ok,
        format!(
            "{trials} planted Sim(3): max fit RMSE {worst_fit:.1e} (tol 1e-12); ATE invariance rel {worst_inv:.1e}; BAL round trip {}",
            if bal_ok { "identical" } else { "differs" }
        ),
    )
}

/// Trace bytes from a 1-thread and an N-thread run of the same config.
pub fn check_determinism(threads: usize) -> Outcome {
    let p = synth_generate(&SynthParams {
        n_cameras: 16,
        n_points: 400,
        n_agents: 8,
        observation_density: 0.5,
        noise_px: 1.0,
        seed: 11,
        ..SynthParams::default()
    })
    .unwrap();
    let x = perturbed(&p, 11);
    let trace_bytes = |threads: usize| {
        let cfg = RunConfig {
            lambda: 1e3,
            max_iters: 30,
            threads,
            beta: Some(vec![0.01; 10]),
            metrics: MetricOptions {
                every: 1,
                ground_truth: Some(Arc::new(p.ground_truth.clone())),
            },
            ..RunConfig::default()
        };
        let out = run(p.instance(), &x, &cfg).unwrap();
        let mut buf = Vec::new();
        write_trace(&out.trace, &mut buf).unwrap();
        buf
    };
    let one = trace_bytes(1);
    let many = trace_bytes(threads);
    Outcome::new(
        one == many,
        format!(
            "1 vs {threads} threads: {} trace bytes, {}",
            one.len(),
            if one == many { "identical" } else { "differ" }
        ),
    )
}
