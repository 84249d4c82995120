//! Collaborative bundle adjustment with lazily aggregated, reduced and
//! preconditioned gradient steps (LARPG).
//!
//! Agents own private camera poses and share a map of 3D points with a
//! server. Each iteration every agent linearizes its local cost, eliminates
//! its poses with a Schur complement, and uploads only those reduced-gradient
//! and block-Jacobi blocks that changed enough since their last upload. The
//! server takes a preconditioned gradient step on the shared points and the
//! agents recover their optimal pose updates in closed form.
//!
//! Module map:
//!
//! * [`geometry`]: SE(3) poses, retraction, pinhole projection and Jacobians.
//! * [`problem`]: partitioned problem instances, costs, synthetic scenes.
//! * [`localmodel`]: per-agent linearization and Schur elimination.
//! * [`lazycomm`]: block caches and the two triggering rules.
//! * [`coordinator`]: server-side preconditioner and shared step.
//! * [`runtime`]: the simulated bulk-synchronous network running the loop.
//! * [`theory`]: Lyapunov function, admissible parameters, assumption checks.
//! * [`dataio`]: BAL files, alignment metrics, trace export.

pub mod coordinator;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod lazycomm;
pub mod localmodel;
pub mod problem;
pub mod runtime;
pub mod theory;

pub use error::{Error, Result};
