use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use larpg::dataio::bal::{from_scene, parse_bal, to_scene, write_bal};
use larpg::dataio::metrics::{ate_rmse, mean_reproj, MetricsReport};
use larpg::dataio::trace::{read_trace, write_trace};
use larpg::dataio::{read_state, write_state};
use larpg::geometry::{Pose, Vec3};
use larpg::problem::{partition_random, perturb_state, synth_generate, Partition, Scene, State};
use larpg::runtime::{run, MetricOptions, RunConfig, RunOutput};
use larpg::theory::{admissible_params, check_descent, sigma_p_at};
use serde::{Deserialize, Serialize};

use crate::config::{apply_override, Config, Source};

/// Scene-order ground truth, independent of any agent split.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneTruth {
    /// `[qw, qx, qy, qz, tx, ty, tz]`, world to camera.
    pub cameras: Vec<[f64; 7]>,
    pub points: Vec<[f64; 3]>,
}

pub struct Problem {
    pub scene: Scene,
    pub partition: Partition,
    pub init: State,
    pub truth: Option<State>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

pub fn load_problem(cfg: &Config) -> Result<Problem> {
    let (scene, truth_scene) = match cfg.problem.source {
        Source::Synth => {
            let sp = synth_generate(&cfg.problem.synth.params())?;
            (sp.scene.clone(), Some(sp.scene))
        }
        Source::Bal => {
            let path = cfg.problem.path.as_deref().expect("validated");
            let ds = parse_bal(open(path)?).with_context(|| format!("reading {}", path.display()))?;
            (to_scene(&ds), None)
        }
    };
    let partition = partition_random(&scene, cfg.partition.n_agents, cfg.partition.seed)?;
    let truth = match (truth_scene, &cfg.problem.ground_truth) {
        (_, Some(path)) => {
            let t: SceneTruth = serde_json::from_reader(open(path)?)
                .with_context(|| format!("reading ground truth {}", path.display()))?;
            if t.cameras.len() != scene.cameras.len() || t.points.len() != scene.points.len() {
                bail!(
                    "ground truth has {} cameras / {} points, problem has {} / {}",
                    t.cameras.len(),
                    t.points.len(),
                    scene.cameras.len(),
                    scene.points.len()
                );
            }
            let poses: Vec<Pose> = t.cameras.iter().map(|a| Pose::from_array(*a)).collect();
            let points = t.points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
            Some(partition.split(&poses, points))
        }
        (Some(s), None) => Some(partition.state_of(&s)),
        (None, None) => None,
    };
    let init = perturb_state(&partition.state_of(&scene), cfg.noise.sigmas(), cfg.noise.seed);
    Ok(Problem {
        scene,
        partition,
        init,
        truth,
    })
}

pub fn run_config(cfg: &Config, threads: usize, truth: Option<&State>) -> Result<RunConfig> {
    Ok(RunConfig {
        gamma: cfg.solver.gamma,
        lambda: cfg.solver.lambda,
        lazy: cfg.lazy.to_lazy()?,
        max_iters: cfg.solver.max_iters,
        seed: cfg.partition.seed,
        threads,
        metrics: MetricOptions {
            every: cfg.output.metrics_every,
            ground_truth: truth.map(|t| Arc::new(t.clone())),
        },
        ..RunConfig::default()
    })
}

fn flat(partition: &Partition, s: &State) -> Vec<Pose> {
    partition.camera_poses(s)
}

fn report(p: &Problem, out: &RunOutput) -> Result<MetricsReport> {
    let ate = match &p.truth {
        Some(t) => Some(ate_rmse(&flat(&p.partition, &out.state), &flat(&p.partition, t))?),
        None => None,
    };
    Ok(MetricsReport {
        ate_rmse: ate,
        mean_reproj: mean_reproj(&p.partition.instance, &out.state),
        total_upload_bytes: out.trace.total_upload_bytes(),
        total_broadcast_bytes: out.trace.total_broadcast_bytes(),
    })
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    config: &'a Config,
    metrics: &'a MetricsReport,
    iterations: usize,
    final_cost: f64,
    final_grad_norm: f64,
}

fn write_trace_file(path: &Path, out: &RunOutput) -> Result<()> {
    let mut w = create(path)?;
    write_trace(&out.trace, &mut w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_run(cfg: &Config, threads: usize) -> Result<()> {
    let p = load_problem(cfg)?;
    let out = run(
        &p.partition.instance,
        &p.init,
        &run_config(cfg, threads, p.truth.as_ref())?,
    )?;
    let m = report(&p, &out)?;
    if let Some(path) = &cfg.output.trace_path {
        write_trace_file(path, &out)?;
    }
    if let Some(path) = &cfg.output.state_path {
        let mut w = create(path)?;
        write_state(&out.state, &mut w)?;
        w.flush()?;
    }
    let last = out.trace.last().expect("trace has rows");
    if let Some(path) = &cfg.output.metrics_path {
        let doc = MetricsDoc {
            config: cfg,
            metrics: &m,
            iterations: last.iter,
            final_cost: last.f,
            final_grad_norm: last.grad_norm,
        };
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &doc)?;
        writeln!(w)?;
        w.flush()?;
    }
    let ate = m.ate_rmse.map_or("n/a".to_string(), |a| format!("{a:.6} m"));
    println!(
        "iters {} f {:.6e} |g| {:.3e} uploads {:.3} MB ate {} reproj {:.4} px",
        last.iter,
        last.f,
        last.grad_norm,
        m.total_upload_bytes as f64 / 1e6,
        ate,
        m.mean_reproj
    );
    Ok(())
}

pub const SWEEP_PARAMS: [(&str, &str); 4] = [
    ("epsilon", "lazy.epsilon"),
    ("dbar", "lazy.dbar"),
    ("delta_p", "lazy.delta_p"),
    ("gamma", "solver.gamma"),
];

/// One run per value on a shared problem; traces go to
/// `<out_dir>/trace_<param>_<value>.csv` next to `summary.csv`.
pub fn cmd_sweep(cfg: &Config, threads: usize, param: &str, values: &[String], out_dir: &Path) -> Result<()> {
    let key = SWEEP_PARAMS
        .iter()
        .find(|(name, _)| *name == param)
        .map(|(_, key)| *key)
        .with_context(|| format!("cannot sweep `{param}`; choose one of epsilon, dbar, delta_p, gamma"))?;
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let p = load_problem(cfg)?;
    let base = serde_json::to_value(cfg)?;
    let mut summary = create(&out_dir.join("summary.csv"))?;
    writeln!(
        summary,
        "param,value,final_ate,final_reproj,final_f,total_upload_bytes,total_broadcast_bytes"
    )?;
    for value in values {
        let mut doc = base.clone();
        apply_override(&mut doc, &format!("{key}={value}"))?;
        let run_cfg: Config = serde_json::from_value(doc).with_context(|| format!("{param}={value}"))?;
        run_cfg.validate().with_context(|| format!("{param}={value}"))?;
        let out = run(
            &p.partition.instance,
            &p.init,
            &run_config(&run_cfg, threads, p.truth.as_ref())?,
        )?;
        let m = report(&p, &out)?;
        write_trace_file(&out_dir.join(format!("trace_{param}_{value}.csv")), &out)?;
        let last = out.trace.last().expect("trace has rows");
        writeln!(
            summary,
            "{param},{value},{},{:.16e},{:.16e},{},{}",
            m.ate_rmse.map(|a| format!("{a:.16e}")).unwrap_or_default(),
            m.mean_reproj,
            last.f,
            m.total_upload_bytes,
            m.total_broadcast_bytes
        )?;
        println!(
            "{param}={value}: ate {} uploads {:.3} MB",
            m.ate_rmse.map_or("n/a".to_string(), |a| format!("{a:.6} m")),
            m.total_upload_bytes as f64 / 1e6
        );
    }
    summary.flush()?;
    Ok(())
}

pub struct CheckOptions {
    pub gamma: Option<f64>,
    pub gamma_scale: f64,
    pub epsilon: Option<f64>,
    pub epsilon_scale: f64,
    pub iters: Option<usize>,
}

/// Estimate `sigma_p` at the initial iterate, build admissible parameters
/// and rerun checking Lyapunov descent. Returns whether the check passed.
pub fn cmd_check(cfg: &Config, threads: usize, opts: &CheckOptions) -> Result<bool> {
    let p = load_problem(cfg)?;
    let inst = &p.partition.instance;
    let sigma = sigma_p_at(inst, &p.init, cfg.solver.lambda).context("estimating sigma_p")?;
    let gamma = opts.gamma.unwrap_or(opts.gamma_scale / sigma);
    let dbar = cfg.lazy.to_lazy()?.dbar();
    let eps = opts
        .epsilon
        .unwrap_or_else(|| (opts.epsilon_scale * (1.0 - sigma * gamma) / dbar as f64).max(0.0));
    let epsilon = vec![eps; dbar];
    println!("sigma_p {sigma:.6e} gamma {gamma:.6e} epsilon_d {eps:.6e} dbar {dbar}");
    let params = match admissible_params(gamma, sigma, &epsilon) {
        Ok(params) => params,
        Err(v) => {
            println!("check FAIL: parameters rejected: {v}");
            return Ok(false);
        }
    };
    let mut rc = run_config(cfg, threads, None)?;
    rc.gamma = gamma;
    rc.lazy.epsilon = epsilon;
    rc.beta = Some(params.beta.clone());
    if let Some(n) = opts.iters {
        rc.max_iters = n;
    }
    let out = run(inst, &p.init, &rc)?;
    let rep = check_descent(&out.trace, &params.beta);
    let steps = rep.diffs.len();
    if rep.holds() {
        let worst = rep.diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("check PASS: V decreased over all {steps} steps (largest change {worst:.3e})");
        Ok(true)
    } else {
        let k = rep.violations[0];
        println!(
            "check FAIL: V increased at {} of {steps} steps, first at k={k} by {:.3e}",
            rep.violations.len(),
            rep.diffs[k]
        );
        Ok(false)
    }
}

/// Write the configured synthetic scene as `problem.bal` (cameras and points
/// at the perturbed initial estimate) and `ground_truth.json`.
pub fn cmd_gen(cfg: &Config, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if cfg.problem.source != Source::Synth {
        bail!("gen needs problem.source = synth");
    }
    let p = load_problem(cfg)?;
    let mut start = p.scene.clone();
    for (cam, pose) in start.cameras.iter_mut().zip(p.partition.camera_poses(&p.init)) {
        cam.pose = pose;
    }
    start.points = p.init.points.clone();
    let bal_path = out_dir.join("problem.bal");
    let mut w = create(&bal_path)?;
    write_bal(&from_scene(&start)?, &mut w)?;
    w.flush()?;
    let truth = SceneTruth {
        cameras: p.scene.cameras.iter().map(|c| c.pose.to_array()).collect(),
        points: p.scene.points.iter().map(|y| [y.x, y.y, y.z]).collect(),
    };
    let gt_path = out_dir.join("ground_truth.json");
    let mut w = create(&gt_path)?;
    serde_json::to_writer(&mut w, &truth)?;
    w.flush()?;
    println!(
        "wrote {} ({} cameras, {} points, {} observations) and {}",
        bal_path.display(),
        p.scene.cameras.len(),
        p.scene.points.len(),
        p.scene.observations.len(),
        gt_path.display()
    );
    Ok((bal_path, gt_path))
}

/// Metrics of a saved state; byte totals come from a trace when given.
pub fn cmd_metrics(cfg: &Config, state_path: &Path, trace_path: Option<&Path>) -> Result<MetricsReport> {
    let p = load_problem(cfg)?;
    let state = read_state(open(state_path)?).with_context(|| format!("reading {}", state_path.display()))?;
    p.partition
        .instance
        .check_state(&state)
        .context("state does not match the configured problem")?;
    let (up, down) = match trace_path {
        Some(path) => {
            let rows = read_trace(open(path)?).with_context(|| format!("reading {}", path.display()))?;
            rows.last()
                .map_or((0, 0), |r| (r.uploads_cum_bytes, r.broadcast_cum_bytes))
        }
        None => (0, 0),
    };
    let ate = match &p.truth {
        Some(t) => Some(ate_rmse(&flat(&p.partition, &state), &flat(&p.partition, t))?),
        None => None,
    };
    let m = MetricsReport {
        ate_rmse: ate,
        mean_reproj: mean_reproj(&p.partition.instance, &state),
        total_upload_bytes: up,
        total_broadcast_bytes: down,
    };
    println!("{}", serde_json::to_string(&m)?);
    Ok(m)
}
