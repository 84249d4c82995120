//! Lazy communication: per-block caches mirrored on agent and server, stale
//! approximations carried forward by transport, and the two triggering rules
//! that decide which blocks an agent uploads.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::geometry::{BlockTransport, EuclideanTransport, Mat3, Point3, Vec3};
use crate::{Error, Result};

/// Threshold of the preconditioner rule; `Frozen` never re-uploads after
/// the first contact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaP {
    Finite(f64),
    Frozen,
}

impl DeltaP {
    pub fn from_f64(x: f64) -> Self {
        if x.is_infinite() && x > 0.0 {
            DeltaP::Frozen
        } else {
            DeltaP::Finite(x)
        }
    }

    pub fn as_f64(&self) -> f64 {
        match self {
            DeltaP::Finite(x) => *x,
            DeltaP::Frozen => f64::INFINITY,
        }
    }
}

/// Which `m` normalizes the gradient threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MScaling {
    /// Total number of shared blocks.
    GlobalM,
    /// Number of blocks the uploading agent observes.
    PerAgentObserved,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LazyConfig {
    pub delta_p: DeltaP,
    /// `epsilon[d - 1]` weighs the squared step norm from `d` iterations ago.
    pub epsilon: Vec<f64>,
    pub scaling_m: MScaling,
}

impl LazyConfig {
    /// Uniform weights over a window of `dbar` past iterations.
    pub fn uniform(delta_p: f64, epsilon: f64, dbar: usize) -> Self {
        Self {
            delta_p: DeltaP::from_f64(delta_p),
            epsilon: vec![epsilon; dbar],
            scaling_m: MScaling::PerAgentObserved,
        }
    }

    /// Every block uploads every iteration.
    pub fn eager() -> Self {
        Self::uniform(0.0, 0.0, 1)
    }

    pub fn dbar(&self) -> usize {
        self.epsilon.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_empty() {
            return Err(Error::InvalidConfig("dbar must be at least 1".into()));
        }
        if self.epsilon.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::InvalidConfig(
                "epsilon entries must be finite and nonnegative".into(),
            ));
        }
        if let DeltaP::Finite(d) = self.delta_p {
            if !(d >= 0.0) {
                return Err(Error::InvalidConfig("delta_p must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

impl Default for LazyConfig {
    fn default() -> Self {
        Self::uniform(0.1, 10.0, 10)
    }
}

/// The last `dbar` values of `||w_hat||^2_P`, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNormHistory {
    cap: usize,
    entries: VecDeque<f64>,
}

impl GradNormHistory {
    pub fn new(dbar: usize) -> Self {
        Self {
            cap: dbar,
            entries: VecDeque::with_capacity(dbar),
        }
    }

    pub fn push(&mut self, value: f64) {
        if self.cap == 0 {
            return;
        }
        if self.entries.len() == self.cap {
            self.entries.pop_back();
        }
        self.entries.push_front(value);
    }

    /// Value from `d` iterations ago (`d >= 1`), if recorded.
    pub fn get(&self, d: usize) -> Option<f64> {
        d.checked_sub(1).and_then(|i| self.entries.get(i).copied())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `sum_d weights[d-1] * hist[d]`; missing entries count as zero.
    pub fn weighted_sum(&self, weights: &[f64]) -> f64 {
        weights.iter().zip(&self.entries).fold(0.0, |acc, (w, h)| acc + w * h)
    }
}

/// A value together with the iteration and block position at upload time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamped<T> {
    pub value: T,
    pub iter: usize,
    pub base_point: Point3,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CacheEntry {
    pub last_s: Option<Stamped<Mat3>>,
    pub last_w: Option<Stamped<Vec3>>,
}

/// Last uploaded blocks of one agent, indexed by observed slot. The agent
/// and the server each hold a copy and update them from the same uploads.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    pub entries: Vec<CacheEntry>,
}

impl BlockCache {
    pub fn new(num_slots: usize) -> Self {
        Self {
            entries: vec![CacheEntry::default(); num_slots],
        }
    }
}

/// Stale Jacobi block carried to the current tangent space.
pub fn approx_precond_block(entry: &CacheEntry, current: &Point3) -> Option<Mat3> {
    entry
        .last_s
        .as_ref()
        .map(|s| EuclideanTransport.transport_operator(&s.base_point, current, &s.value))
}

/// Stale reduced-gradient block carried to the current tangent space.
pub fn approx_grad_block(entry: &CacheEntry, current: &Point3) -> Option<Vec3> {
    entry
        .last_w
        .as_ref()
        .map(|w| EuclideanTransport.transport(&w.base_point, current, &w.value))
}

/// Upload `S_new` iff `||S_new - S_tilde||_F > delta_p ||S_new||_F`.
/// Without a cached approximation the upload is forced.
pub fn precond_trigger(s_new: &Mat3, s_tilde: Option<&Mat3>, delta_p: DeltaP) -> bool {
    let Some(s_tilde) = s_tilde else {
        return true;
    };
    match delta_p {
        DeltaP::Frozen => false,
        DeltaP::Finite(d) => (s_new - s_tilde).norm() > d * s_new.norm(),
    }
}

/// Right-hand side of the gradient rule,
/// `(1 / (m N^2)) sum_d eps_d ||w_hat^{k-d}||^2_{P^{k-d}}`.
pub fn grad_threshold(hist: &GradNormHistory, cfg: &LazyConfig, m_scale: usize, n_agents: usize) -> f64 {
    let denom = m_scale.max(1) as f64 * (n_agents as f64).powi(2);
    hist.weighted_sum(&cfg.epsilon) / denom
}

/// Squared `P_l`-norm of the staleness error `w_tilde - w_new`.
pub fn staleness_error(w_new: &Vec3, w_tilde: &Vec3, p_l: &Mat3) -> f64 {
    let e = w_tilde - w_new;
    e.dot(&(p_l * e))
}

/// Upload `w_new` iff its stale approximation is off by more than the
/// threshold in the `P_l` norm. Without a cached approximation the upload
/// is forced.
pub fn grad_trigger(w_new: &Vec3, w_tilde: Option<&Vec3>, p_l: &Mat3, threshold: f64) -> bool {
    match w_tilde {
        None => true,
        Some(w_tilde) => staleness_error(w_new, w_tilde, p_l) > threshold,
    }
}

/// Merge this iteration's preconditioner uploads with cached approximations
/// into `D_hat_i`, committing the uploads to the cache.
///
/// `uploads` must be sorted by slot with no duplicates; `shared` holds the
/// current value of every observed block.
pub fn assemble_dhat(
    agent: usize,
    cache: &mut BlockCache,
    uploads: &[(usize, Mat3)],
    shared: &[Point3],
    observed: &[usize],
    iter: usize,
) -> Result<Vec<Mat3>> {
    let mut out = Vec::with_capacity(cache.entries.len());
    let mut next = uploads.iter().peekable();
    for (slot, entry) in cache.entries.iter_mut().enumerate() {
        let fresh = match next.peek() {
            Some(&&(s, m)) if s == slot => {
                next.next();
                if matches!(next.peek(), Some(&&(s2, _)) if s2 == slot) {
                    return Err(Error::ProtocolViolation {
                        agent,
                        block: observed[slot],
                        reason: "duplicate preconditioner upload",
                    });
                }
                Some(m)
            }
            _ => None,
        };
        match fresh {
            Some(m) => {
                entry.last_s = Some(Stamped {
                    value: m,
                    iter,
                    base_point: shared[slot],
                });
                out.push(m);
            }
            None => out.push(
                approx_precond_block(entry, &shared[slot]).ok_or(Error::ProtocolViolation {
                    agent,
                    block: observed[slot],
                    reason: "no upload and no cached preconditioner block",
                })?,
            ),
        }
    }
    if let Some(&(s, _)) = next.next() {
        return Err(Error::ProtocolViolation {
            agent,
            block: observed.get(s).copied().unwrap_or(usize::MAX),
            reason: "upload for an unobserved or unsorted block",
        });
    }
    Ok(out)
}

/// Gradient counterpart of [`assemble_dhat`], producing `w_hat_i`.
pub fn assemble_what(
    agent: usize,
    cache: &mut BlockCache,
    uploads: &[(usize, Vec3)],
    shared: &[Point3],
    observed: &[usize],
    iter: usize,
) -> Result<Vec<Vec3>> {
    let mut out = Vec::with_capacity(cache.entries.len());
    let mut next = uploads.iter().peekable();
    for (slot, entry) in cache.entries.iter_mut().enumerate() {
        let fresh = match next.peek() {
            Some(&&(s, w)) if s == slot => {
                next.next();
                if matches!(next.peek(), Some(&&(s2, _)) if s2 == slot) {
                    return Err(Error::ProtocolViolation {
                        agent,
                        block: observed[slot],
                        reason: "duplicate gradient upload",
                    });
                }
                Some(w)
            }
            _ => None,
        };
        match fresh {
            Some(w) => {
                entry.last_w = Some(Stamped {
                    value: w,
                    iter,
                    base_point: shared[slot],
                });
                out.push(w);
            }
            None => out.push(approx_grad_block(entry, &shared[slot]).ok_or(Error::ProtocolViolation {
                agent,
                block: observed[slot],
                reason: "no upload and no cached gradient block",
            })?),
        }
    }
    if let Some(&(s, _)) = next.next() {
        return Err(Error::ProtocolViolation {
            agent,
            block: observed.get(s).copied().unwrap_or(usize::MAX),
            reason: "upload for an unobserved or unsorted block",
        });
    }
    Ok(out)
}
