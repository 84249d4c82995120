//! Dataset ingestion, evaluation metrics and trace export.

pub mod bal;
pub mod metrics;
pub mod trace;

use std::io::{Read, Write};

use crate::problem::State;
use crate::{Error, Result};

/// Write a state as JSON: poses as `[qw, qx, qy, qz, tx, ty, tz]` per agent,
/// points as `[x, y, z]`.
pub fn write_state(state: &State, out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(out, state).map_err(|e| Error::Io(e.into()))
}

pub fn read_state(input: impl Read) -> Result<State> {
    serde_json::from_reader(input).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}
