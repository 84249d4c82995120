//! Per-agent linearization and analytic elimination of private poses.
//!
//! The local quadratic model of agent `i` around its current iterate is
//!
//! ```text
//! m_i(u, v) = f_i + <g_x, u> + <g_y, v> + 1/2 [u; v]^T [A C; C^T B] [u; v]
//! ```
//!
//! where `J` is the Jacobian of the residuals `r` and `M = 2 w J^T J + lambda I`
//! so that `M` and the exact gradient `g = 2 w J^T r` share one convention.
//! Since every factor touches a single pose, `A` is block diagonal with one
//! 6x6 block per pose and `u` can be eliminated pose by pose.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix6, SMatrix, U6};

use crate::geometry::{
    project, project_jacobians, registration_jacobians, registration_residual, Mat3, Point3, Pose, PoseTangent, Vec3,
    Vec6,
};
use crate::problem::{AgentData, AgentLayout, Measurement};
use crate::{Error, Result};

pub type Mat6 = Matrix6<f64>;
pub type Mat6x3 = SMatrix<f64, 6, 3>;

/// Largest observed-block count for which dense reduced Hessians are built.
pub const DENSE_BLOCK_LIMIT: usize = 2000;

/// One agent's linearization at the current iterate.
#[derive(Debug, Clone)]
pub struct LocalBlocks {
    pub agent: usize,
    pub lambda: f64,
    pub layout: Arc<AgentLayout>,
    /// Damped pose blocks, one per pose.
    pub a: Vec<Mat6>,
    /// Pose/point coupling blocks, indexed like `layout.pairs`.
    pub c: Vec<Mat6x3>,
    /// Damped point blocks, one per observed slot.
    pub b: Vec<Mat3>,
    pub g_x: Vec<Vec6>,
    pub g_y: Vec<Vec3>,
    a_chol: Vec<Cholesky<f64, U6>>,
    ainv_gx: Vec<Vec6>,
    ainv_c: Vec<Mat6x3>,
    /// Local cost at the linearization point.
    pub cost: f64,
}

/// Reduced gradient blocks `w_{i,l}`, one per observed slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedGradient {
    pub blocks: Vec<Vec3>,
}

/// Diagonal blocks `S_{i,l}` of the reduced Hessian, one per observed slot.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobiBlocks {
    pub blocks: Vec<Mat3>,
}

/// Build the local model of `agent` at `poses` and the observed points
/// `shared` (slot order, see [`AgentData::gather`]).
pub fn linearize(agent: &AgentData, poses: &[Pose], shared: &[Point3], lambda: f64) -> Result<LocalBlocks> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig("lambda must be positive".into()));
    }
    let layout = agent.layout.clone();
    let n_poses = agent.num_poses();
    let n_slots = layout.num_slots();
    let mut a = vec![Mat6::zeros(); n_poses];
    let mut c = vec![Mat6x3::zeros(); layout.pairs.len()];
    let mut b = vec![Mat3::zeros(); n_slots];
    let mut g_x = vec![Vec6::zeros(); n_poses];
    let mut g_y = vec![Vec3::zeros(); n_slots];
    let mut cost = 0.0;

    for (k, o) in agent.observations.iter().enumerate() {
        let j = o.pose_idx;
        let slot = layout.obs_slot[k];
        let pair = layout.obs_pair[k];
        let pose = &poses[j];
        let y = &shared[slot];
        let two_w = 2.0 * o.weight;
        match &o.measurement {
            Measurement::Pixel(q) => {
                let proj = project(pose, &agent.intrinsics[j], y);
                if !proj.valid {
                    continue;
                }
                let r = q - proj.pixel;
                let (jp, jy) = project_jacobians(pose, &agent.intrinsics[j], y);
                cost += o.weight * r.norm_squared();
                a[j] += jp.transpose() * jp * two_w;
                c[pair] += jp.transpose() * jy * two_w;
                b[slot] += jy.transpose() * jy * two_w;
                g_x[j] += jp.transpose() * r * two_w;
                g_y[slot] += jy.transpose() * r * two_w;
            }
            Measurement::Point(q) => {
                let r = registration_residual(pose, q, y);
                let (jp, jy) = registration_jacobians(pose, q);
                cost += o.weight * r.norm_squared();
                a[j] += jp.transpose() * jp * two_w;
                c[pair] += jp.transpose() * jy * two_w;
                b[slot] += jy.transpose() * jy * two_w;
                g_x[j] += jp.transpose() * r * two_w;
                g_y[slot] += jy.transpose() * r * two_w;
            }
        }
    }

    for block in a.iter_mut() {
        *block += Mat6::identity() * lambda;
    }
    for block in b.iter_mut() {
        *block += Mat3::identity() * lambda;
    }

    let a_chol = a
        .iter()
        .enumerate()
        .map(|(j, block)| {
            Cholesky::new(*block).ok_or(Error::NotPositiveDefinite {
                agent: agent.id,
                pose: j,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ainv_gx = a_chol.iter().zip(&g_x).map(|(ch, g)| ch.solve(g)).collect();
    let ainv_c = layout
        .pairs
        .iter()
        .zip(&c)
        .map(|(&(j, _), cb)| a_chol[j].solve(cb))
        .collect();

    Ok(LocalBlocks {
        agent: agent.id,
        lambda,
        layout,
        a,
        c,
        b,
        g_x,
        g_y,
        a_chol,
        ainv_gx,
        ainv_c,
        cost,
    })
}

/// `w_{i,l} = g_{y,l} - sum_j C_{jl}^T A_j^{-1} g_{x,j}`.
pub fn reduced_gradient(lb: &LocalBlocks) -> ReducedGradient {
    let blocks = lb
        .layout
        .slot_pairs
        .iter()
        .enumerate()
        .map(|(slot, pairs)| {
            pairs.iter().fold(lb.g_y[slot], |acc, &p| {
                let j = lb.layout.pairs[p].0;
                acc - lb.c[p].transpose() * lb.ainv_gx[j]
            })
        })
        .collect();
    ReducedGradient { blocks }
}

/// `S_{i,l} = B_{i,l} - sum_j C_{jl}^T A_j^{-1} C_{jl}`, made exactly
/// symmetric by mirroring the upper triangle.
pub fn jacobi_blocks(lb: &LocalBlocks) -> JacobiBlocks {
    let blocks = lb
        .layout
        .slot_pairs
        .iter()
        .enumerate()
        .map(|(slot, pairs)| {
            let s = pairs
                .iter()
                .fold(lb.b[slot], |acc, &p| acc - lb.c[p].transpose() * lb.ainv_c[p]);
            symmetrize_upper(&s)
        })
        .collect();
    JacobiBlocks { blocks }
}

pub(crate) fn symmetrize_upper(s: &Mat3) -> Mat3 {
    Mat3::new(
        s[(0, 0)],
        s[(0, 1)],
        s[(0, 2)],
        s[(0, 1)],
        s[(1, 1)],
        s[(1, 2)],
        s[(0, 2)],
        s[(1, 2)],
        s[(2, 2)],
    )
}

/// Optimal private update `u_j = -A_j^{-1} (sum_l C_{jl} v_l + g_{x,j})`
/// for a shared step `v` given per observed slot.
pub fn private_update(lb: &LocalBlocks, v: &[Vec3]) -> Vec<PoseTangent> {
    assert_eq!(
        v.len(),
        lb.layout.num_slots(),
        "shared step must cover every observed block"
    );
    (0..lb.a.len())
        .map(|j| {
            let rhs = lb
                .layout
                .pairs_of_pose(j)
                .fold(lb.g_x[j], |acc, p| acc + lb.c[p] * v[lb.layout.pairs[p].1]);
            PoseTangent::from_vector(&-lb.a_chol[j].solve(&rhs))
        })
        .collect()
}

/// The full reduced Hessian `S_i = B_i - C_i^T A_i^{-1} C_i` over the
/// agent's observed blocks, `3 |L_i|` square.
pub fn dense_reduced_hessian(lb: &LocalBlocks) -> Result<DMatrix<f64>> {
    let n = lb.layout.num_slots();
    if n > DENSE_BLOCK_LIMIT {
        return Err(Error::ScaleGuard {
            dim: n,
            limit: DENSE_BLOCK_LIMIT,
        });
    }
    let mut s = DMatrix::zeros(3 * n, 3 * n);
    for (slot, b) in lb.b.iter().enumerate() {
        s.fixed_view_mut::<3, 3>(3 * slot, 3 * slot).copy_from(b);
    }
    for j in 0..lb.a.len() {
        for p in lb.layout.pairs_of_pose(j) {
            let sp = lb.layout.pairs[p].1;
            for q in lb.layout.pairs_of_pose(j) {
                let sq = lb.layout.pairs[q].1;
                let mut view = s.fixed_view_mut::<3, 3>(3 * sp, 3 * sq);
                view -= lb.c[p].transpose() * lb.ainv_c[q];
            }
        }
    }
    // Diagonal blocks follow the same accumulation order as `jacobi_blocks`.
    let diag = jacobi_blocks(lb);
    for (slot, d) in diag.blocks.iter().enumerate() {
        s.fixed_view_mut::<3, 3>(3 * slot, 3 * slot).copy_from(d);
    }
    Ok(s)
}

impl LocalBlocks {
    pub fn num_poses(&self) -> usize {
        self.a.len()
    }

    pub fn num_slots(&self) -> usize {
        self.b.len()
    }

    /// `<g_x, A^{-1} g_x>`.
    pub fn gx_ainv_gx(&self) -> f64 {
        self.g_x
            .iter()
            .zip(&self.ainv_gx)
            .fold(0.0, |acc, (g, ag)| acc + g.dot(ag))
    }

    /// Value of the local quadratic model at `(u, v)`.
    pub fn model_value(&self, u: &[PoseTangent], v: &[Vec3]) -> f64 {
        let mut lin = 0.0;
        let mut quad = 0.0;
        for (j, uj) in u.iter().enumerate() {
            let uv = uj.to_vector();
            lin += self.g_x[j].dot(&uv);
            quad += uv.dot(&(self.a[j] * uv));
        }
        for (slot, vs) in v.iter().enumerate() {
            lin += self.g_y[slot].dot(vs);
            quad += vs.dot(&(self.b[slot] * vs));
        }
        for (p, &(j, slot)) in self.layout.pairs.iter().enumerate() {
            quad += 2.0 * u[j].to_vector().dot(&(self.c[p] * v[slot]));
        }
        self.cost + lin + 0.5 * quad
    }

    /// Closed-form reduced model
    /// `f_i - 1/2 <g_x, A^{-1} g_x> + <w_i, v> + 1/2 <v, S_i v>`.
    pub fn reduced_model_value(&self, v: &[Vec3]) -> Result<f64> {
        let s = dense_reduced_hessian(self)?;
        let w = reduced_gradient(self);
        let vv = DVector::from_iterator(3 * v.len(), v.iter().flat_map(|x| x.iter().copied()));
        let wv = w.blocks.iter().zip(v).fold(0.0, |acc, (a, b)| acc + a.dot(b));
        Ok(self.cost - 0.5 * self.gx_ainv_gx() + wv + 0.5 * vv.dot(&(&s * &vv)))
    }

    /// Gradient of the model in `u` at `(u, v)`: `g_x + A u + C v`.
    pub fn model_grad_u(&self, u: &[PoseTangent], v: &[Vec3]) -> Vec<Vec6> {
        (0..self.a.len())
            .map(|j| {
                let uj = u[j].to_vector();
                self.layout
                    .pairs_of_pose(j)
                    .fold(self.g_x[j] + self.a[j] * uj, |acc, p| {
                        acc + self.c[p] * v[self.layout.pairs[p].1]
                    })
            })
            .collect()
    }
}
