//! Run configuration: JSON schema, dotted overrides and defaults.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use larpg::lazycomm::{DeltaP, LazyConfig, MScaling};
use larpg::problem::{PerturbSigmas, SynthParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub problem: ProblemSection,
    pub partition: PartitionSection,
    pub noise: NoiseSection,
    pub solver: SolverSection,
    pub lazy: LazySection,
    pub output: OutputSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            problem: ProblemSection::default(),
            partition: PartitionSection { n_agents: 3, seed: 0 },
            noise: NoiseSection::default(),
            solver: SolverSection {
                gamma: 1.0,
                lambda: 1e6,
                max_iters: 50,
            },
            lazy: LazySection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synth,
    Bal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    pub source: Source,
    /// BAL file, required when `source` is `bal`.
    pub path: Option<PathBuf>,
    /// Scene-order ground truth written by `gen`, used for ATE on BAL input.
    pub ground_truth: Option<PathBuf>,
    pub synth: SynthSection,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            source: Source::Synth,
            path: None,
            ground_truth: None,
            synth: SynthSection::default(),
        }
    }
}

/// Scene generator settings; the agent split lives in `partition`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_cameras: usize,
    pub n_points: usize,
    pub observation_density: f64,
    pub noise_px: f64,
    pub seed: u64,
    pub focal: f64,
    pub ring_radius: f64,
    pub min_views: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthParams::default();
        Self {
            n_cameras: d.n_cameras,
            n_points: d.n_points,
            observation_density: d.observation_density,
            noise_px: d.noise_px,
            seed: d.seed,
            focal: d.focal,
            ring_radius: d.ring_radius,
            min_views: d.min_views,
        }
    }
}

impl SynthSection {
    pub fn params(&self) -> SynthParams {
        SynthParams {
            n_cameras: self.n_cameras,
            n_points: self.n_points,
            n_agents: 1,
            observation_density: self.observation_density,
            noise_px: self.noise_px,
            seed: self.seed,
            focal: self.focal,
            ring_radius: self.ring_radius,
            min_views: self.min_views,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub n_agents: usize,
    pub seed: u64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Config::default().partition
    }
}

/// Perturbation of the initial estimate. Unset sigmas resolve to the EuRoC
/// profile for synthetic scenes and to zero for BAL input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub rot_deg: Option<f64>,
    pub pos_m: Option<f64>,
    pub point_m: Option<f64>,
    pub seed: u64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            rot_deg: None,
            pos_m: None,
            point_m: None,
            seed: 1000,
        }
    }
}

impl NoiseSection {
    pub fn sigmas(&self) -> PerturbSigmas {
        PerturbSigmas {
            rot_deg: self.rot_deg.unwrap_or(0.0),
            pos_m: self.pos_m.unwrap_or(0.0),
            point_m: self.point_m.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub gamma: f64,
    pub lambda: f64,
    pub max_iters: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Config::default().solver
    }
}

/// A number, or `"inf"` for a preconditioner frozen after first contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaPValue {
    Finite(f64),
    Named(InfTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfTag {
    #[serde(rename = "inf")]
    Inf,
}

impl DeltaPValue {
    pub fn to_delta_p(self) -> DeltaP {
        match self {
            DeltaPValue::Finite(x) => DeltaP::from_f64(x),
            DeltaPValue::Named(InfTag::Inf) => DeltaP::Frozen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonValue {
    Uniform(f64),
    List(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LazySection {
    pub delta_p: DeltaPValue,
    pub epsilon: EpsilonValue,
    /// Defaults to 10 for a scalar epsilon and to the list length otherwise.
    pub dbar: Option<usize>,
    pub m_scaling: MScaling,
}

impl Default for LazySection {
    fn default() -> Self {
        Self {
            delta_p: DeltaPValue::Finite(0.1),
            epsilon: EpsilonValue::Uniform(10.0),
            dbar: None,
            m_scaling: MScaling::PerAgentObserved,
        }
    }
}

impl LazySection {
    pub fn to_lazy(&self) -> Result<LazyConfig> {
        let epsilon = match (&self.epsilon, self.dbar) {
            (EpsilonValue::Uniform(e), d) => vec![*e; d.unwrap_or(10)],
            (EpsilonValue::List(list), None) => list.clone(),
            (EpsilonValue::List(list), Some(d)) if d == list.len() => list.clone(),
            (EpsilonValue::List(list), Some(d)) => {
                bail!("lazy.epsilon has {} entries but lazy.dbar is {d}", list.len())
            }
        };
        let cfg = LazyConfig {
            delta_p: self.delta_p.to_delta_p(),
            epsilon,
            scaling_m: self.m_scaling,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub trace_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Final state as JSON, readable by `metrics`.
    pub state_path: Option<PathBuf>,
    /// ATE and reprojection columns every this many iterations; 0 disables.
    pub metrics_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            trace_path: None,
            metrics_path: None,
            state_path: None,
            metrics_every: 1,
        }
    }
}

/// Set `path` (dot separated) in a JSON tree. The value is parsed as JSON
/// and kept as a string if that fails, so `lazy.delta_p=inf` works.
pub fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .with_context(|| format!("override `{item}` is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override key `{path}` has an empty component");
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("override `{path}`: `{key}` is not inside an object"))?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .with_context(|| format!("override `{path}` does not address an object field"))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Parse a config document, apply `--seed` and overrides, validate, and fill
/// source-dependent defaults.
pub fn load(text: Option<&str>, seed: Option<u64>, overrides: &[String]) -> Result<Config> {
    let mut root: Value = match text {
        Some(t) => serde_json::from_str(t).context("config is not valid JSON")?,
        None => Value::Object(Default::default()),
    };
    if let Some(s) = seed {
        for (key, v) in [
            ("problem.synth.seed", s),
            ("partition.seed", s),
            ("noise.seed", s.wrapping_add(1000)),
        ] {
            apply_override(&mut root, &format!("{key}={v}"))?;
        }
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let mut cfg: Config = serde_json::from_value(root).context("invalid config")?;
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

impl Config {
    fn resolve(&mut self) {
        let profile = match self.problem.source {
            Source::Synth => PerturbSigmas::EUROC,
            Source::Bal => PerturbSigmas {
                rot_deg: 0.0,
                pos_m: 0.0,
                point_m: 0.0,
            },
        };
        let n = &mut self.noise;
        n.rot_deg.get_or_insert(profile.rot_deg);
        n.pos_m.get_or_insert(profile.pos_m);
        n.point_m.get_or_insert(profile.point_m);
        if self.lazy.dbar.is_none() {
            self.lazy.dbar = Some(match &self.lazy.epsilon {
                EpsilonValue::Uniform(_) => 10,
                EpsilonValue::List(l) => l.len(),
            });
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.problem.source == Source::Bal && self.problem.path.is_none() {
            bail!("problem.path is required for a BAL source");
        }
        if self.partition.n_agents == 0 {
            bail!("partition.n_agents must be at least 1");
        }
        let s = self.noise.sigmas();
        if [s.rot_deg, s.pos_m, s.point_m]
            .iter()
            .any(|x| !(*x >= 0.0 && x.is_finite()))
        {
            bail!("noise sigmas must be finite and nonnegative");
        }
        self.lazy.to_lazy()?;
        if !(self.solver.gamma > 0.0 && self.solver.lambda > 0.0) || self.solver.max_iters == 0 {
            bail!("solver needs gamma > 0, lambda > 0 and max_iters >= 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_parameter_table() {
        let c = load(None, None, &[]).unwrap();
        assert_eq!(c.solver.gamma, 1.0);
        assert_eq!(c.solver.lambda, 1e6);
        assert_eq!(c.lazy.epsilon, EpsilonValue::Uniform(10.0));
        assert_eq!(c.lazy.dbar, Some(10));
        assert_eq!(c.lazy.delta_p, DeltaPValue::Finite(0.1));
        let lazy = c.lazy.to_lazy().unwrap();
        assert_eq!(lazy.epsilon, vec![10.0; 10]);
    }

    #[test]
    fn overrides_parse_json_and_fall_back_to_strings() {
        let c = load(
            None,
            None,
            &[
                "lazy.epsilon=0".into(),
                "lazy.delta_p=inf".into(),
                "solver.max_iters=7".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.lazy.epsilon, EpsilonValue::Uniform(0.0));
        assert_eq!(c.lazy.to_lazy().unwrap().delta_p, DeltaP::Frozen);
        assert_eq!(c.solver.max_iters, 7);
        let c = load(None, None, &["lazy.epsilon=[1,2,3]".into()]).unwrap();
        assert_eq!(c.lazy.dbar, Some(3));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(load(Some(r#"{"solver": {"gama": 1}}"#), None, &[]).is_err());
        assert!(load(None, None, &["lazy.typo=1".into()]).is_err());
        assert!(load(None, None, &["lazy.delta_p=infinite".into()]).is_err());
        assert!(load(None, None, &["lazy.epsilon=[1,2]".into(), "lazy.dbar=3".into()]).is_err());
        assert!(load(None, None, &["lazy.epsilon=-1".into()]).is_err());
        assert!(load(None, None, &["problem.source=\"bal\"".into()]).is_err());
        assert!(load(None, None, &["noequals".into()]).is_err());
        assert!(load(None, None, &["solver.gamma.x=1".into()]).is_err());
    }

    #[test]
    fn noise_defaults_depend_on_source() {
        let c = load(None, None, &[]).unwrap();
        assert_eq!(c.noise.sigmas(), PerturbSigmas::EUROC);
        let c = load(None, None, &["problem.source=bal".into(), "problem.path=x.bal".into()]).unwrap();
        assert_eq!(c.noise.sigmas().rot_deg, 0.0);
    }

    #[test]
    fn seed_flag_sets_every_seed_and_overrides_win() {
        let c = load(None, Some(5), &["partition.seed=9".into()]).unwrap();
        assert_eq!(c.problem.synth.seed, 5);
        assert_eq!(c.partition.seed, 9);
        assert_eq!(c.noise.seed, 1005);
    }

    #[test]
    fn resolved_config_survives_a_json_round_trip() {
        let c = load(None, None, &["lazy.delta_p=inf".into(), "solver.lambda=0.1".into()]).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(load(Some(&text), None, &[]).unwrap(), c);
    }
}
