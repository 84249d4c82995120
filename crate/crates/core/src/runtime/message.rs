//! Wire messages and their byte encoding.
//!
//! Every real is an 8-byte little-endian float and every block index a
//! 4-byte little-endian unsigned integer. The channel identifies sender and
//! message kind, so no tag or agent id goes on the wire.

use crate::geometry::{Mat3, Vec3};
use crate::{Error, Result};

pub const INDEX_BYTES: usize = 4;
pub const REAL_BYTES: usize = 8;
pub const PRECOND_UPLOAD_BYTES: usize = INDEX_BYTES + 6 * REAL_BYTES;
pub const GRAD_UPLOAD_BYTES: usize = INDEX_BYTES + 3 * REAL_BYTES;
pub const PRECOND_DELTA_BYTES: usize = PRECOND_UPLOAD_BYTES;
pub const STEP_BLOCK_BYTES: usize = INDEX_BYTES + 3 * REAL_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    PrecondUpload,
    GradUpload,
    PrecondDelta,
    StepBroadcast,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Upper triangle of an agent's Jacobi block, row-major.
    PrecondUpload {
        agent: usize,
        block: u32,
        s: [f64; 6],
    },
    GradUpload {
        agent: usize,
        block: u32,
        w: [f64; 3],
    },
    /// Upper triangle of a changed preconditioner block.
    PrecondDelta {
        block: u32,
        p: [f64; 6],
    },
    /// Shared step for the recipient's observed blocks plus `||w_hat||^2_P`.
    StepBroadcast {
        v: Vec<(u32, [f64; 3])>,
        gradsq: f64,
    },
}

pub fn pack_sym(m: &Mat3) -> [f64; 6] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

pub fn unpack_sym(a: &[f64; 6]) -> Mat3 {
    Mat3::new(a[0], a[1], a[2], a[1], a[3], a[4], a[2], a[4], a[5])
}

pub fn pack_vec(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

pub fn unpack_vec(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::PrecondUpload { .. } => MessageKind::PrecondUpload,
            Message::GradUpload { .. } => MessageKind::GradUpload,
            Message::PrecondDelta { .. } => MessageKind::PrecondDelta,
            Message::StepBroadcast { .. } => MessageKind::StepBroadcast,
        }
    }

    /// Encoded size in bytes.
    pub fn wire_size(&self) -> usize {
        match self {
            Message::PrecondUpload { .. } => PRECOND_UPLOAD_BYTES,
            Message::GradUpload { .. } => GRAD_UPLOAD_BYTES,
            Message::PrecondDelta { .. } => PRECOND_DELTA_BYTES,
            Message::StepBroadcast { v, .. } => STEP_BLOCK_BYTES * v.len() + REAL_BYTES,
        }
    }

    pub fn is_upload(&self) -> bool {
        matches!(self, Message::PrecondUpload { .. } | Message::GradUpload { .. })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_size());
        let reals = |out: &mut Vec<u8>, xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        match self {
            Message::PrecondUpload { block, s, .. } => {
                out.extend_from_slice(&block.to_le_bytes());
                reals(&mut out, s);
            }
            Message::GradUpload { block, w, .. } => {
                out.extend_from_slice(&block.to_le_bytes());
                reals(&mut out, w);
            }
            Message::PrecondDelta { block, p } => {
                out.extend_from_slice(&block.to_le_bytes());
                reals(&mut out, p);
            }
            Message::StepBroadcast { v, gradsq } => {
                for (block, vl) in v {
                    out.extend_from_slice(&block.to_le_bytes());
                    reals(&mut out, vl);
                }
                reals(&mut out, &[*gradsq]);
            }
        }
        out
    }

    /// Decode bytes received from `agent` on a channel of the given kind.
    /// Broadcast kinds ignore `agent`.
    pub fn decode(kind: MessageKind, agent: usize, bytes: &[u8]) -> Result<Message> {
        let mut r = Reader { bytes, pos: 0 };
        let msg = match kind {
            MessageKind::PrecondUpload => Message::PrecondUpload {
                agent,
                block: r.index()?,
                s: r.reals::<6>()?,
            },
            MessageKind::GradUpload => Message::GradUpload {
                agent,
                block: r.index()?,
                w: r.reals::<3>()?,
            },
            MessageKind::PrecondDelta => Message::PrecondDelta {
                block: r.index()?,
                p: r.reals::<6>()?,
            },
            MessageKind::StepBroadcast => {
                if bytes.len() < REAL_BYTES || !(bytes.len() - REAL_BYTES).is_multiple_of(STEP_BLOCK_BYTES) {
                    return Err(Error::Wire(format!("step broadcast of {} bytes", bytes.len())));
                }
                let n = (bytes.len() - REAL_BYTES) / STEP_BLOCK_BYTES;
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push((r.index()?, r.reals::<3>()?));
                }
                let [gradsq] = r.reals::<1>()?;
                Message::StepBroadcast { v, gradsq }
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Wire(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(msg)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Wire(format!("truncated message at byte {}", self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice length checked"))
    }

    fn index(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take::<4>()?))
    }

    fn reals<const N: usize>(&mut self) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for x in out.iter_mut() {
            *x = f64::from_le_bytes(self.take::<8>()?);
        }
        Ok(out)
    }
}
