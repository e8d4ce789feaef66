use crate::error::{ensure, Result};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolOp {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    Length,
    Channel,
}

pub fn maxpool1d(tape: &mut Tape, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
    tape.max_pool1d(x, kernel, stride, padding)
}

/// Reduces `[B, C, L]` over one axis, keeping a singleton in its place:
/// `[B, C, 1]` over length, `[B, 1, L]` over channels.
pub fn global_pool(tape: &mut Tape, x: Var, op: PoolOp, over: PoolAxis) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    ensure!(s.len() == 3, "global_pool: expected [B, C, L], got {s:?}");
    let axis = match over {
        PoolAxis::Channel => 1,
        PoolAxis::Length => 2,
    };
    let reduced = match op {
        PoolOp::Avg => tape.mean(x, Some(axis))?,
        PoolOp::Max => tape.max(x, Some(axis))?,
    };
    let mut keep = s;
    keep[axis] = 1;
    tape.reshape(reduced, &keep)
}
