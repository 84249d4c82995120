//! Server-side aggregation: block-Jacobi preconditioner from the lazily
//! assembled `D_hat_i`, the preconditioned shared step, and its retraction.

use nalgebra::{Cholesky, SymmetricEigen};

use crate::geometry::{point_retract, Mat3, Point3, Vec3};
use crate::problem::ProblemInstance;
use crate::{Error, Result};

/// Blocks whose smallest eigenvalue falls below this get jitter.
const MIN_EIGENVALUE: f64 = 1e-12;
const JITTER: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    pub blocks: Vec<Mat3>,
}

impl Preconditioner {
    pub fn identity(num_points: usize) -> Self {
        Self {
            blocks: vec![Mat3::identity(); num_points],
        }
    }

    /// `||w||^2_P = sum_l w_l^T P_l w_l`.
    pub fn norm_squared(&self, w: &[Vec3]) -> f64 {
        self.blocks
            .iter()
            .zip(w)
            .fold(0.0, |acc, (p, wl)| acc + wl.dot(&(p * wl)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedStep {
    pub v: Vec<Vec3>,
    /// `||w_hat||^2_P`, broadcast for the agents' gradient-norm history.
    pub gradsq: f64,
}

fn spd_inverse(m: &Mat3) -> Option<Mat3> {
    let min_eig = SymmetricEigen::new(*m).eigenvalues.min();
    if !(min_eig >= MIN_EIGENVALUE) {
        return None;
    }
    Cholesky::new(*m)?;
    let inv = m.try_inverse()?;
    Some(crate::localmodel::symmetrize_upper(&inv))
}

/// Invert one aggregated Jacobi block, retrying once with
/// `1e-9 * trace / 3` added to the diagonal.
pub fn invert_block(block: usize, sum: &Mat3) -> Result<Mat3> {
    spd_inverse(sum)
        .or_else(|| {
            let jitter = JITTER * sum.trace().abs() / 3.0;
            spd_inverse(&(sum + Mat3::identity() * jitter))
        })
        .ok_or(Error::SingularBlock { block })
}

/// `P_l = (sum_i D_hat_{i,l})^{-1}`, summing in ascending agent order.
///
/// `dhat[i][slot]` is agent `i`'s block for its observed slot.
pub fn aggregate_precond(instance: &ProblemInstance, dhat: &[Vec<Mat3>]) -> Result<Preconditioner> {
    let blocks = (0..instance.num_points())
        .map(|l| {
            let sum = instance
                .block_agents(l)
                .iter()
                .fold(Mat3::zeros(), |acc, &(i, slot)| acc + dhat[i][slot]);
            invert_block(l, &sum)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Preconditioner { blocks })
}

/// `w_hat_l = sum_i w_hat_{i,l}` in ascending agent order.
pub fn sum_reduced_gradients(instance: &ProblemInstance, per_agent: &[Vec<Vec3>]) -> Vec<Vec3> {
    (0..instance.num_points())
        .map(|l| {
            instance
                .block_agents(l)
                .iter()
                .fold(Vec3::zeros(), |acc, &(i, slot)| acc + per_agent[i][slot])
        })
        .collect()
}

/// `v_l = -gamma P_l w_hat_l` and `gradsq = ||w_hat||^2_P`.
pub fn compute_step(what: &[Vec3], p: &Preconditioner, gamma: f64) -> SharedStep {
    let mut gradsq = 0.0;
    let v = p
        .blocks
        .iter()
        .zip(what)
        .map(|(pl, wl)| {
            let pw = pl * wl;
            gradsq += wl.dot(&pw);
            pw * -gamma
        })
        .collect();
    SharedStep { v, gradsq }
}

pub fn apply_shared_step(points: &[Point3], v: &[Vec3]) -> Vec<Point3> {
    points.iter().zip(v).map(|(y, vl)| point_retract(y, vl)).collect()
}
