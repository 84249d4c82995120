//! Similarity alignment, trajectory error and reprojection error.

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::geometry::{project, Mat3, Pose, Vec3};
use crate::problem::{Measurement, ProblemInstance, State};
use crate::{Error, Result};

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Sim3 {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x * self.scale + self.translation
    }
}

/// Least-squares similarity taking `est` onto `gt`.
pub fn umeyama_sim3(est: &[Vec3], gt: &[Vec3]) -> Result<Sim3> {
    if est.len() != gt.len() {
        return Err(Error::DegenerateAlignment(format!(
            "{} estimated vs {} reference points",
            est.len(),
            gt.len()
        )));
    }
    let n = est.len();
    if n < 3 {
        return Err(Error::DegenerateAlignment(format!("need at least 3 points, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_e = est.iter().sum::<Vec3>() * inv_n;
    let mu_g = gt.iter().sum::<Vec3>() * inv_n;
    let mut cov = Mat3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        cov += (g - mu_g) * de.transpose();
        var_e += de.norm_squared();
    }
    cov *= inv_n;
    var_e *= inv_n;
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sv = svd.singular_values;
    // nalgebra does not promise an order, so sort the two we test
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if var_e <= 0.0 || sorted[1] <= 1e-12 * sorted[0] {
        return Err(Error::DegenerateAlignment("points are collinear or coincident".into()));
    }
    let mut s = Mat3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        // flip the axis of the smallest singular value
        let imin = sv.imin();
        s[(imin, imin)] = -1.0;
        sv[imin] = -sv[imin];
    }
    let rotation = u * s * v_t;
    let scale = sv.sum() / var_e;
    let translation = mu_g - rotation * mu_e * scale;
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

fn rmse(a: &[Vec3], b: &[Vec3]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum();
    (sum / a.len().max(1) as f64).sqrt()
}

/// RMSE of camera centers without alignment.
pub fn position_rmse(est: &[Pose], gt: &[Pose]) -> f64 {
    let e: Vec<Vec3> = est.iter().map(Pose::center).collect();
    let g: Vec<Vec3> = gt.iter().map(Pose::center).collect();
    rmse(&e, &g)
}

/// RMSE of camera centers after similarity alignment to the reference.
pub fn ate_rmse(est: &[Pose], gt: &[Pose]) -> Result<f64> {
    let e: Vec<Vec3> = est.iter().map(Pose::center).collect();
    let g: Vec<Vec3> = gt.iter().map(Pose::center).collect();
    let sim = umeyama_sim3(&e, &g)?;
    let aligned: Vec<Vec3> = e.iter().map(|x| sim.apply(x)).collect();
    Ok(rmse(&aligned, &g))
}

/// Mean pixel error over valid reprojection observations.
pub fn mean_reproj(instance: &ProblemInstance, state: &State) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in instance.agents() {
        for o in &a.observations {
            if let Measurement::Pixel(q) = o.measurement {
                let p = project(
                    &state.poses[a.id][o.pose_idx],
                    &a.intrinsics[o.pose_idx],
                    &state.points[o.point_id],
                );
                if p.valid {
                    sum += (q - p.pixel).norm();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Meters; absent without ground truth.
    pub ate_rmse: Option<f64>,
    /// Pixels.
    pub mean_reproj: f64,
    pub total_upload_bytes: u64,
    pub total_broadcast_bytes: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Vec2};
    use crate::problem::{random_rotation, synth_generate, Observation, SynthParams};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0)))
            .collect()
    }

    #[test]
    fn identity_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = cloud(&mut rng, 10);
        let s = umeyama_sim3(&p, &p).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!((s.rotation - Mat3::identity()).amax() < 1e-12);
        assert!(s.translation.amax() < 1e-12);
    }

    #[test]
    fn recovers_inverse_of_scaled_quarter_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = cloud(&mut rng, 8);
        let rz = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2);
        let est: Vec<Vec3> = gt.iter().map(|x| rz * x * 2.0).collect();
        let s = umeyama_sim3(&est, &gt).unwrap();
        assert!((s.scale - 0.5).abs() < 1e-12);
        let back = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), -std::f64::consts::FRAC_PI_2);
        assert!((s.rotation - back.to_rotation_matrix().into_inner()).amax() < 1e-12);
        assert!(s.translation.amax() < 1e-12);
    }

    #[test]
    fn planted_similarity_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let gt = cloud(&mut rng, 30);
            let r = random_rotation(&mut rng);
            let scale = rng.random_range(0.1..10.0);
            let t = Vec3::from_fn(|_, _| rng.random_range(-20.0..20.0));
            let est: Vec<Vec3> = gt.iter().map(|x| r * x * scale + t).collect();
            let s = umeyama_sim3(&est, &gt).unwrap();
            let aligned: Vec<Vec3> = est.iter().map(|x| s.apply(x)).collect();
            assert!(rmse(&aligned, &gt) < 1e-12);
        }
    }

    #[test]
    fn reflection_is_not_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = cloud(&mut rng, 20);
        let est: Vec<Vec3> = gt.iter().map(|x| Vec3::new(-x.x, x.y, x.z)).collect();
        let s = umeyama_sim3(&est, &gt).unwrap();
        assert!((s.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let line: Vec<Vec3> = (0..5).map(|k| Vec3::new(k as f64, 2.0 * k as f64, 0.0)).collect();
        assert!(umeyama_sim3(&line, &line).is_err());
        let two = vec![Vec3::zeros(), Vec3::x()];
        assert!(umeyama_sim3(&two, &two).is_err());
        let same = vec![Vec3::x(); 4];
        assert!(umeyama_sim3(&same, &same).is_err());
    }

    fn poses_at(centers: &[Vec3]) -> Vec<Pose> {
        centers.iter().map(|c| Pose::identity().with_center(c)).collect()
    }

    #[test]
    fn ate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = poses_at(&cloud(&mut rng, 12));
        assert!(ate_rmse(&gt, &gt).unwrap() < 1e-12);

        // one 1 m outlier among 100 unaligned positions
        let centers = cloud(&mut rng, 100);
        let mut moved = centers.clone();
        moved[17].x += 1.0;
        assert!((position_rmse(&poses_at(&moved), &poses_at(&centers)) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ate_is_invariant_under_similarity_of_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = poses_at(&cloud(&mut rng, 15));
        let est: Vec<Pose> = gt
            .iter()
            .map(|p| Pose::identity().with_center(&(p.center() + Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1)))))
            .collect();
        let base = ate_rmse(&est, &gt).unwrap();
        let r = random_rotation(&mut rng);
        let t = Vec3::new(3.0, -1.0, 7.0);
        let moved: Vec<Pose> = est
            .iter()
            .map(|p| Pose::identity().with_center(&(r * p.center() * 4.0 + t)))
            .collect();
        assert!((ate_rmse(&moved, &gt).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn reprojection_examples() {
        let sp = synth_generate(&SynthParams::default()).unwrap();
        assert!(mean_reproj(sp.instance(), &sp.ground_truth) < 1e-9);

        let intr = CameraIntrinsics::pinhole(100.0, 100.0, 0.0, 0.0);
        let y = Vec3::new(0.0, 0.0, 2.0);
        let obs = Observation {
            agent: 0,
            pose_idx: 0,
            point_id: 0,
            measurement: Measurement::Pixel(Vec2::new(3.0, 4.0)),
            weight: 7.0,
        };
        let inst = ProblemInstance::new(vec![vec![intr]], 1, vec![obs]).unwrap();
        let state = State {
            poses: vec![vec![Pose::identity()]],
            points: vec![y],
        };
        assert!((mean_reproj(&inst, &state) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn reprojection_matches_loop_oracle() {
        let sp = synth_generate(&SynthParams {
            noise_px: 1.0,
            seed: 4,
            ..SynthParams::default()
        })
        .unwrap();
        let scene = &sp.scene;
        let mut sum = 0.0;
        let mut n = 0;
        for o in &scene.observations {
            let cam = &scene.cameras[o.camera];
            let Measurement::Pixel(q) = o.measurement else { continue };
            let p = cam.pose.rotation * scene.points[o.point] + cam.pose.translation;
            if p.z <= 1e-8 {
                continue;
            }
            let pix = Vec2::new(cam.intrinsics.fx * p.x / p.z, cam.intrinsics.fy * p.y / p.z);
            sum += (q - pix).norm();
            n += 1;
        }
        let oracle = sum / n as f64;
        let got = mean_reproj(sp.instance(), &sp.ground_truth);
        assert!((got - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }
}
