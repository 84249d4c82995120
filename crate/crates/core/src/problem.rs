//! The partitioned collaborative estimation problem: agents with private
//! camera poses observing a shared set of map points.
//!
//! All sums run in ascending (agent, pose, observation) order so that costs
//! and every later aggregation are reproducible bit-for-bit.

use std::sync::Arc;

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    project, registration_residual, se3_retract, so3_exp, CameraIntrinsics, Point3, Pose, PoseTangent, Vec2, Vec3,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Measurement {
    /// Pixel coordinates of a reprojection factor.
    Pixel(Vec2),
    /// A 3D point in the pose's local frame (registration factor).
    Point(Vec3),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    Reprojection,
    Point3d,
}

impl Measurement {
    pub fn kind(&self) -> ObservationKind {
        match self {
            Measurement::Pixel(_) => ObservationKind::Reprojection,
            Measurement::Point(_) => ObservationKind::Point3d,
        }
    }
}

/// One factor of an agent's local cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub agent: usize,
    pub pose_idx: usize,
    pub point_id: usize,
    pub measurement: Measurement,
    pub weight: f64,
}

/// Weighted squared residual of one observation; zero when invalid.
pub fn observation_cost(m: &Measurement, weight: f64, pose: &Pose, intr: &CameraIntrinsics, point: &Point3) -> f64 {
    match m {
        Measurement::Pixel(q) => {
            let p = project(pose, intr, point);
            if p.valid {
                weight * (q - p.pixel).norm_squared()
            } else {
                0.0
            }
        }
        Measurement::Point(q) => weight * registration_residual(pose, q, point).norm_squared(),
    }
}

/// Index structure of one agent's factors, fixed for the lifetime of an
/// instance.
///
/// Shared blocks the agent observes are addressed by a local *slot*;
/// `observed[slot]` is the global point id. Distinct (pose, slot) pairs index
/// the off-diagonal Hessian blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentLayout {
    pub num_poses: usize,
    pub observed: Vec<usize>,
    pub obs_slot: Vec<usize>,
    pub obs_pair: Vec<usize>,
    /// Sorted by (pose, slot).
    pub pairs: Vec<(usize, usize)>,
    /// Pairs of pose `j` are `pairs[pose_pairs[j]..pose_pairs[j + 1]]`.
    pub pose_pairs: Vec<usize>,
    /// Pair indices per slot, ascending pose order.
    pub slot_pairs: Vec<Vec<usize>>,
}

impl AgentLayout {
    pub fn num_slots(&self) -> usize {
        self.observed.len()
    }

    pub fn pairs_of_pose(&self, pose: usize) -> std::ops::Range<usize> {
        self.pose_pairs[pose]..self.pose_pairs[pose + 1]
    }

    pub fn slot_of(&self, point_id: usize) -> Option<usize> {
        self.observed.binary_search(&point_id).ok()
    }
}

#[derive(Debug, Clone)]
pub struct AgentData {
    pub id: usize,
    pub intrinsics: Vec<CameraIntrinsics>,
    /// Sorted by pose, input order within a pose.
    pub observations: Vec<Observation>,
    pub layout: Arc<AgentLayout>,
}

impl AgentData {
    pub fn num_poses(&self) -> usize {
        self.intrinsics.len()
    }

    /// The observed block set `L_i`, ascending.
    pub fn observed_blocks(&self) -> &[usize] {
        &self.layout.observed
    }

    /// Gather the shared points this agent observes, in slot order.
    pub fn gather(&self, points: &[Point3]) -> Vec<Point3> {
        self.layout.observed.iter().map(|&l| points[l]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ProblemInstance {
    agents: Vec<AgentData>,
    num_points: usize,
    /// For every shared block, the (agent, slot) pairs observing it, ascending agent.
    block_agents: Vec<Vec<(usize, usize)>>,
}

impl ProblemInstance {
    /// Build an instance from per-agent, per-pose intrinsics and a flat list
    /// of observations.
    pub fn new(
        intrinsics: Vec<Vec<CameraIntrinsics>>,
        num_points: usize,
        observations: Vec<Observation>,
    ) -> Result<Self> {
        let n_agents = intrinsics.len();
        if n_agents == 0 {
            return Err(Error::InvalidProblem("at least one agent is required".into()));
        }
        for (i, cams) in intrinsics.iter().enumerate() {
            if let Some(j) = cams.iter().position(|c| !c.is_valid()) {
                return Err(Error::InvalidProblem(format!(
                    "agent {i} pose {j} has invalid intrinsics"
                )));
            }
        }
        let mut per_agent: Vec<Vec<Observation>> = vec![Vec::new(); n_agents];
        for (k, o) in observations.into_iter().enumerate() {
            if o.agent >= n_agents || o.pose_idx >= intrinsics[o.agent].len() || o.point_id >= num_points {
                return Err(Error::InvalidProblem(format!(
                    "observation {k} has an index out of range"
                )));
            }
            if !(o.weight > 0.0 && o.weight.is_finite()) {
                return Err(Error::InvalidProblem(format!(
                    "observation {k} has non-positive weight"
                )));
            }
            per_agent[o.agent].push(o);
        }

        let mut block_agents = vec![Vec::new(); num_points];
        let mut agents = Vec::with_capacity(n_agents);
        for (i, (mut obs, intr)) in per_agent.into_iter().zip(intrinsics).enumerate() {
            obs.sort_by_key(|o| o.pose_idx);
            let layout = build_layout(intr.len(), &obs);
            for (slot, &l) in layout.observed.iter().enumerate() {
                block_agents[l].push((i, slot));
            }
            agents.push(AgentData {
                id: i,
                intrinsics: intr,
                observations: obs,
                layout: Arc::new(layout),
            });
        }
        if let Some(l) = block_agents.iter().position(|a| a.is_empty()) {
            return Err(Error::UnobservedBlock { block: l });
        }
        Ok(Self {
            agents,
            num_points,
            block_agents,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn agents(&self) -> &[AgentData] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentData {
        &self.agents[i]
    }

    pub fn block_agents(&self, l: usize) -> &[(usize, usize)] {
        &self.block_agents[l]
    }

    pub fn num_observations(&self) -> usize {
        self.agents.iter().map(|a| a.observations.len()).sum()
    }

    pub fn num_poses(&self) -> usize {
        self.agents.iter().map(|a| a.num_poses()).sum()
    }

    pub fn check_state(&self, state: &State) -> Result<()> {
        let ok = state.poses.len() == self.agents.len()
            && state.points.len() == self.num_points
            && self
                .agents
                .iter()
                .zip(&state.poses)
                .all(|(a, p)| a.num_poses() == p.len());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidProblem("state sizes do not match the instance".into()))
        }
    }
}

fn build_layout(num_poses: usize, obs: &[Observation]) -> AgentLayout {
    let mut observed: Vec<usize> = obs.iter().map(|o| o.point_id).collect();
    observed.sort_unstable();
    observed.dedup();
    let obs_slot: Vec<usize> = obs
        .iter()
        .map(|o| observed.binary_search(&o.point_id).expect("observed point"))
        .collect();
    let mut pairs: Vec<(usize, usize)> = obs.iter().zip(&obs_slot).map(|(o, &s)| (o.pose_idx, s)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let obs_pair = obs
        .iter()
        .zip(&obs_slot)
        .map(|(o, &s)| pairs.binary_search(&(o.pose_idx, s)).expect("pair"))
        .collect();
    let mut pose_pairs = vec![0; num_poses + 1];
    for &(j, _) in &pairs {
        pose_pairs[j + 1] += 1;
    }
    for j in 0..num_poses {
        pose_pairs[j + 1] += pose_pairs[j];
    }
    let mut slot_pairs = vec![Vec::new(); observed.len()];
    for (p, &(_, s)) in pairs.iter().enumerate() {
        slot_pairs[s].push(p);
    }
    AgentLayout {
        num_poses,
        observed,
        obs_slot,
        obs_pair,
        pairs,
        pose_pairs,
        slot_pairs,
    }
}

/// Private poses per agent and the shared points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub poses: Vec<Vec<Pose>>,
    pub points: Vec<Point3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cost {
    pub total: f64,
    pub per_agent: Vec<f64>,
}

/// Local cost `f_i` of one agent given its poses and the global points.
pub fn agent_cost(agent: &AgentData, poses: &[Pose], points: &[Point3]) -> f64 {
    agent.observations.iter().fold(0.0, |acc, o| {
        acc + observation_cost(
            &o.measurement,
            o.weight,
            &poses[o.pose_idx],
            &agent.intrinsics[o.pose_idx],
            &points[o.point_id],
        )
    })
}

pub fn evaluate_cost(instance: &ProblemInstance, state: &State) -> Cost {
    let per_agent: Vec<f64> = instance
        .agents()
        .iter()
        .zip(&state.poses)
        .map(|(a, poses)| agent_cost(a, poses, &state.points))
        .collect();
    let total = per_agent.iter().fold(0.0, |acc, f| acc + f);
    Cost { total, per_agent }
}

/// A camera in an unpartitioned scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObservation {
    pub camera: usize,
    pub point: usize,
    pub measurement: Measurement,
    pub weight: f64,
}

/// Cameras, points and observations before assignment to agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cameras: Vec<Camera>,
    pub points: Vec<Point3>,
    pub observations: Vec<SceneObservation>,
}

/// An instance together with the camera-to-agent assignment that produced it.
#[derive(Debug, Clone)]
pub struct Partition {
    pub instance: ProblemInstance,
    /// `(agent, pose_idx)` for every scene camera.
    pub assignment: Vec<(usize, usize)>,
}

impl Partition {
    /// Distribute scene-ordered camera poses over agents.
    pub fn split(&self, camera_poses: &[Pose], points: Vec<Point3>) -> State {
        let mut poses: Vec<Vec<Pose>> = self
            .instance
            .agents()
            .iter()
            .map(|a| vec![Pose::identity(); a.num_poses()])
            .collect();
        for (c, &(i, j)) in self.assignment.iter().enumerate() {
            poses[i][j] = camera_poses[c];
        }
        State { poses, points }
    }

    /// Camera poses of a state in scene order.
    pub fn camera_poses(&self, state: &State) -> Vec<Pose> {
        self.assignment.iter().map(|&(i, j)| state.poses[i][j]).collect()
    }

    pub fn state_of(&self, scene: &Scene) -> State {
        let poses: Vec<Pose> = scene.cameras.iter().map(|c| c.pose).collect();
        self.split(&poses, scene.points.clone())
    }
}

/// Assign scene cameras to `n_agents` agents uniformly at random.
///
/// A seeded shuffle is dealt round-robin, so every agent gets at least one
/// camera; within an agent, poses keep ascending scene order.
pub fn partition_random(scene: &Scene, n_agents: usize, seed: u64) -> Result<Partition> {
    let n_cams = scene.cameras.len();
    if n_agents == 0 || n_agents > n_cams {
        return Err(Error::InvalidProblem(format!(
            "cannot split {n_cams} cameras over {n_agents} agents"
        )));
    }
    let mut order: Vec<usize> = (0..n_cams).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut agent_of = vec![0; n_cams];
    for (k, &c) in order.iter().enumerate() {
        agent_of[c] = k % n_agents;
    }
    let mut intrinsics = vec![Vec::new(); n_agents];
    let mut assignment = Vec::with_capacity(n_cams);
    for (c, cam) in scene.cameras.iter().enumerate() {
        let i = agent_of[c];
        assignment.push((i, intrinsics[i].len()));
        intrinsics[i].push(cam.intrinsics);
    }
    let observations = scene
        .observations
        .iter()
        .map(|o| {
            if o.camera >= n_cams {
                return Err(Error::InvalidProblem(format!(
                    "observation references camera {}",
                    o.camera
                )));
            }
            let (agent, pose_idx) = assignment[o.camera];
            Ok(Observation {
                agent,
                pose_idx,
                point_id: o.point,
                measurement: o.measurement,
                weight: o.weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let instance = ProblemInstance::new(intrinsics, scene.points.len(), observations)?;
    Ok(Partition { instance, assignment })
}

/// Noise levels for [`perturb_state`]: rotation in degrees, camera position
/// and point coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSigmas {
    pub rot_deg: f64,
    pub pos_m: f64,
    pub point_m: f64,
}

impl PerturbSigmas {
    /// The indoor multi-session profile (5 deg, 0.1 m, 0.05 m).
    pub const EUROC: PerturbSigmas = PerturbSigmas {
        rot_deg: 5.0,
        pos_m: 0.1,
        point_m: 0.05,
    };

    /// The driving profile (5 deg, 2 m, 0.1 m).
    pub const KITTI: PerturbSigmas = PerturbSigmas {
        rot_deg: 5.0,
        pos_m: 2.0,
        point_m: 0.1,
    };
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vec3 {
    let mut draw = || sigma * rng.sample::<f64, _>(StandardNormal);
    Vec3::new(draw(), draw(), draw())
}

/// Add zero-mean Gaussian noise to every pose and point.
///
/// Rotations are composed on the right with the exponential of a Gaussian
/// axis-angle vector; camera positions and point coordinates get iid
/// Gaussian offsets. A zero sigma leaves the corresponding values untouched.
pub fn perturb_state(state: &State, sigmas: PerturbSigmas, seed: u64) -> State {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot_sigma = sigmas.rot_deg.to_radians();
    let poses = state
        .poses
        .iter()
        .map(|agent_poses| {
            agent_poses
                .iter()
                .map(|p| {
                    let mut out = *p;
                    if rot_sigma > 0.0 {
                        let omega = gaussian3(&mut rng, rot_sigma);
                        let center = out.center();
                        out = se3_retract(
                            &out,
                            &PoseTangent {
                                omega,
                                vee: Vec3::zeros(),
                            },
                        )
                        .with_center(&center);
                    }
                    if sigmas.pos_m > 0.0 {
                        let center = out.center() + gaussian3(&mut rng, sigmas.pos_m);
                        out = out.with_center(&center);
                    }
                    out
                })
                .collect()
        })
        .collect();
    let points = state
        .points
        .iter()
        .map(|y| {
            if sigmas.point_m > 0.0 {
                y + gaussian3(&mut rng, sigmas.point_m)
            } else {
                *y
            }
        })
        .collect();
    State { poses, points }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub n_cameras: usize,
    pub n_points: usize,
    pub n_agents: usize,
    pub observation_density: f64,
    pub noise_px: f64,
    pub seed: u64,
    pub focal: f64,
    pub ring_radius: f64,
    /// Minimum number of cameras that must see every point.
    pub min_views: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_cameras: 6,
            n_points: 30,
            n_agents: 3,
            observation_density: 1.0,
            noise_px: 0.0,
            seed: 0,
            focal: 500.0,
            ring_radius: 4.0,
            min_views: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthProblem {
    pub scene: Scene,
    pub partition: Partition,
    pub ground_truth: State,
}

impl SynthProblem {
    pub fn instance(&self) -> &ProblemInstance {
        &self.partition.instance
    }
}

const SYNTH_RETRIES: usize = 64;

fn look_at(center: &Vec3, target: &Vec3) -> Pose {
    let z = (target - center).normalize();
    let up = Vec3::new(0.0, 0.0, 1.0);
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let r_wc = nalgebra::Matrix3::from_columns(&[x, y, z]);
    let r_cw = nalgebra::Rotation3::from_matrix_unchecked(r_wc.transpose());
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&r_cw);
    Pose::new(q, -(q * center))
}

/// Cameras on a ring around a point cloud filling the unit box
/// `[-0.5, 0.5]^3`, each looking at the origin.
///
/// Each camera sees each point with probability `observation_density`;
/// points seen by fewer than `min_views` cameras get their visibility redrawn.
pub fn synth_generate(params: &SynthParams) -> Result<SynthProblem> {
    let p = params;
    if !(p.observation_density > 0.0 && p.observation_density <= 1.0) {
        return Err(Error::InvalidConfig("observation_density must be in (0, 1]".into()));
    }
    if p.n_cameras == 0 || p.n_points == 0 {
        return Err(Error::InvalidConfig("scene needs cameras and points".into()));
    }
    if p.min_views > p.n_cameras {
        return Err(Error::SceneGeneration {
            min_views: p.min_views,
            retries: 0,
        });
    }
    if !(p.ring_radius > 1.0) || !(p.focal > 0.0) || !(p.noise_px >= 0.0) {
        return Err(Error::InvalidConfig(
            "ring_radius must exceed 1, focal and noise must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let intr = CameraIntrinsics::pinhole(p.focal, p.focal, 0.0, 0.0);
    let cameras: Vec<Camera> = (0..p.n_cameras)
        .map(|c| {
            let phi = 2.0 * std::f64::consts::PI * c as f64 / p.n_cameras as f64 + rng.random_range(-0.1..0.1);
            let height = rng.random_range(-0.3..0.3);
            let center = Vec3::new(p.ring_radius * phi.cos(), p.ring_radius * phi.sin(), height);
            let target = Vec3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            );
            Camera {
                pose: look_at(&center, &target),
                intrinsics: intr,
            }
        })
        .collect();
    let points: Vec<Point3> = (0..p.n_points)
        .map(|_| {
            Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
        })
        .collect();

    let mut visible = vec![vec![false; p.n_cameras]; p.n_points];
    for vis in visible.iter_mut() {
        let mut tries = 0;
        loop {
            for v in vis.iter_mut() {
                *v = p.observation_density >= 1.0 || rng.random::<f64>() < p.observation_density;
            }
            if vis.iter().filter(|&&v| v).count() >= p.min_views.max(1) {
                break;
            }
            tries += 1;
            if tries >= SYNTH_RETRIES {
                return Err(Error::SceneGeneration {
                    min_views: p.min_views.max(1),
                    retries: SYNTH_RETRIES,
                });
            }
        }
    }

    let mut observations = Vec::new();
    for (c, cam) in cameras.iter().enumerate() {
        for (l, y) in points.iter().enumerate() {
            if !visible[l][c] {
                continue;
            }
            let proj = project(&cam.pose, &cam.intrinsics, y);
            debug_assert!(proj.valid);
            let noise = if p.noise_px > 0.0 {
                Vector2::new(
                    p.noise_px * rng.sample::<f64, _>(StandardNormal),
                    p.noise_px * rng.sample::<f64, _>(StandardNormal),
                )
            } else {
                Vector2::zeros()
            };
            observations.push(SceneObservation {
                camera: c,
                point: l,
                measurement: Measurement::Pixel(proj.pixel + noise),
                weight: 1.0,
            });
        }
    }
    let scene = Scene {
        cameras,
        points,
        observations,
    };
    let partition = partition_random(&scene, p.n_agents, p.seed.wrapping_add(0x9e37_79b9))?;
    let ground_truth = partition.state_of(&scene);
    Ok(SynthProblem {
        scene,
        partition,
        ground_truth,
    })
}

/// Random rotation used by tests and fixtures.
pub fn random_rotation(rng: &mut impl Rng) -> nalgebra::UnitQuaternion<f64> {
    let w = Vec3::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
    );
    so3_exp(&w)
}
