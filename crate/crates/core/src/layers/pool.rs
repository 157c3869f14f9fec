use super::Ctx;
use crate::tensor::{invalid, Result, Var};

/// Max over the joint axis: `[τ, B, N, F] -> [τ, B, F]`.
pub fn spatial_max_pool(cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let rank = cx.tape.shape(x).len();
    if rank < 2 {
        return Err(invalid("spatial_max_pool", "need at least [N, F]"));
    }
    cx.tape.max_axis(x, rank - 2, false)
}

/// Kernel-2, stride-1 max pooling along the leading time axis. The last
/// frame is padded by replication so the output keeps `τ` frames.
pub fn temporal_max_pool(cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let shape = cx.tape.shape(x).to_vec();
    let tau = *shape.first().ok_or_else(|| invalid("temporal_max_pool", "scalar input"))?;
    if tau == 1 {
        return Ok(x);
    }
    let next = cx.tape.slice(x, 0, 1, tau - 1)?;
    let last = cx.tape.slice(x, 0, tau - 1, 1)?;
    let shifted = cx.tape.concat(&[next, last], 0)?;
    let mut pair_shape = vec![1];
    pair_shape.extend_from_slice(&shape);
    let a = cx.tape.reshape(x, &pair_shape)?;
    let b = cx.tape.reshape(shifted, &pair_shape)?;
    let pair = cx.tape.concat(&[a, b], 0)?;
    cx.tape.max_axis(pair, 0, false)
}
