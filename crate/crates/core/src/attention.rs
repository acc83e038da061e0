//! Multi-stage attention: channel, then frequency, then time gating of a
//! `[T, F, C]` feature map.
//!
//! Each stage produces sigmoid gates that broadcast against the full map:
//!
//! * channel gates `[1, 1, C]` from max- and average-pooled `T×F` statistics
//!   passed through a shared two-layer MLP (`C → 100 → C`, bias on the first
//!   layer only);
//! * frequency gates `[1, F, 1]` from channel-pooled then time-pooled
//!   statistics stacked into a `[2, F, 2]` map and convolved with a `2×7`
//!   kernel;
//! * time gates `[T, 1, 1]`, the same recipe with time and frequency swapped
//!   (`[T, 2, 2]` map, `7×2` kernel).

use rand::Rng;

use crate::autodiff::{Conv2dSpec, PadMode, PoolMode, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, ParamStore, Session};
use crate::tensor::{Real, Tensor};

/// Hidden width of the channel-attention MLP, independent of `C`.
pub const CHANNEL_HIDDEN: usize = 100;
/// Length of the spatial attention kernels along the attended axis.
pub const SPATIAL_KERNEL: usize = 7;

const T_AXIS: usize = 0;
const F_AXIS: usize = 1;
const C_AXIS: usize = 2;

/// Gates produced by one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    pub alpha_c: Var,
    pub alpha_f: Var,
    pub alpha_t: Var,
}

struct Names {
    w0: String,
    b0: String,
    w1: String,
    freq_kernel: String,
    freq_bias: String,
    time_kernel: String,
    time_bias: String,
}

impl Names {
    fn new(prefix: &str) -> Self {
        Self {
            w0: format!("{prefix}.ca.w0"),
            b0: format!("{prefix}.ca.b0"),
            w1: format!("{prefix}.ca.w1"),
            freq_kernel: format!("{prefix}.fa.kernel"),
            freq_bias: format!("{prefix}.fa.bias"),
            time_kernel: format!("{prefix}.ta.kernel"),
            time_bias: format!("{prefix}.ta.bias"),
        }
    }
}

/// Adds freshly initialised attention parameters for a `channels`-wide map.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
    rng: &mut R,
) -> Result<()> {
    let n = Names::new(prefix);
    let k = SPATIAL_KERNEL;
    store.insert(n.w0, kaiming_uniform(&[channels, CHANNEL_HIDDEN], channels, rng)?);
    store.insert(n.b0, Tensor::zeros(&[1, CHANNEL_HIDDEN])?);
    store.insert(n.w1, kaiming_uniform(&[CHANNEL_HIDDEN, channels], CHANNEL_HIDDEN, rng)?);
    store.insert(n.freq_kernel, kaiming_uniform(&[2, k, 2, 1], 2 * k * 2, rng)?);
    store.insert(n.freq_bias, Tensor::zeros(&[1])?);
    store.insert(n.time_kernel, kaiming_uniform(&[k, 2, 2, 1], k * 2 * 2, rng)?);
    store.insert(n.time_bias, Tensor::zeros(&[1])?);
    Ok(())
}

fn feature_shape<T: Real>(s: &Session<'_, T>, h: Var) -> Result<[usize; 3]> {
    match s.tape.shape(h) {
        &[t, f, c] => Ok([t, f, c]),
        other => Err(Error::Shape(format!("attention expects [T,F,C], got {other:?}"))),
    }
}

/// `Sigmoid(S_avg + S_max)` with `S = ReLU(pool(H) W0 + b0) W1`.
pub fn channel_attention<T: Real>(s: &mut Session<'_, T>, h: Var, prefix: &str) -> Result<Var> {
    let [_, _, c] = feature_shape(s, h)?;
    let n = Names::new(prefix);
    let expected = s.params().get(&n.w0)?.shape()[0];
    if expected != c {
        return Err(Error::Shape(format!(
            "channel attention {prefix}: W0 expects {expected} channels, map has {c}"
        )));
    }
    let w0 = s.param_shaped(&n.w0, &[c, CHANNEL_HIDDEN])?;
    let b0 = s.param_shaped(&n.b0, &[1, CHANNEL_HIDDEN])?;
    let w1 = s.param_shaped(&n.w1, &[CHANNEL_HIDDEN, c])?;

    let mut branch = |mode| -> Result<Var> {
        let tape = &mut s.tape;
        let pooled = tape.pool_over(h, &[T_AXIS, F_AXIS], mode)?;
        let row = tape.reshape(pooled, &[1, c])?;
        let hidden = tape.fully_connected(row, w0, Some(b0))?;
        let hidden = tape.relu(hidden)?;
        Ok(tape.fully_connected(hidden, w1, None)?)
    };
    let s_max = branch(PoolMode::Max)?;
    let s_avg = branch(PoolMode::Avg)?;
    let tape = &mut s.tape;
    let logits = tape.add(s_avg, s_max)?;
    let gate = tape.sigmoid(logits)?;
    Ok(tape.reshape(gate, &[1, 1, c])?)
}

/// Channel-pooled `[T, F, 2]` map, average first then max.
fn channel_pool<T: Real>(s: &mut Session<'_, T>, h: Var) -> Result<Var> {
    let tape = &mut s.tape;
    let avg = tape.pool_over(h, &[C_AXIS], PoolMode::Avg)?;
    let max = tape.pool_over(h, &[C_AXIS], PoolMode::Max)?;
    Ok(tape.concat(&[avg, max], C_AXIS)?)
}

/// Pools `map` over `axis` (average and max) and stacks the two results
/// along that same axis, giving extent 2.
fn axis_pool<T: Real>(s: &mut Session<'_, T>, map: Var, axis: usize) -> Result<Var> {
    let tape = &mut s.tape;
    let avg = tape.pool_over(map, &[axis], PoolMode::Avg)?;
    let max = tape.pool_over(map, &[axis], PoolMode::Max)?;
    Ok(tape.concat(&[avg, max], axis)?)
}

/// Per-bin gates `[1, F, 1]`.
pub fn frequency_attention<T: Real>(s: &mut Session<'_, T>, h: Var, prefix: &str) -> Result<Var> {
    let [_, f, _] = feature_shape(s, h)?;
    if f < SPATIAL_KERNEL {
        return Err(Error::Shape(format!(
            "frequency attention needs F >= {SPATIAL_KERNEL}, got {f}"
        )));
    }
    let n = Names::new(prefix);
    let kernel = s.param_shaped(&n.freq_kernel, &[2, SPATIAL_KERNEL, 2, 1])?;
    let bias = s.param_shaped(&n.freq_bias, &[1])?;
    let cpool = channel_pool(s, h)?;
    let pooled = axis_pool(s, cpool, T_AXIS)?;
    let spec = Conv2dSpec {
        stride: (1, 1),
        dilation: (1, 1),
        padding: (PadMode::Valid, PadMode::Same),
    };
    let tape = &mut s.tape;
    let z = tape.conv2d(pooled, kernel, Some(bias), &spec)?;
    Ok(tape.sigmoid(z)?)
}

/// Per-frame gates `[T, 1, 1]`.
pub fn time_attention<T: Real>(s: &mut Session<'_, T>, h: Var, prefix: &str) -> Result<Var> {
    let [t, _, _] = feature_shape(s, h)?;
    if t < SPATIAL_KERNEL {
        return Err(Error::Shape(format!(
            "time attention needs T >= {SPATIAL_KERNEL}, got {t}"
        )));
    }
    let n = Names::new(prefix);
    let kernel = s.param_shaped(&n.time_kernel, &[SPATIAL_KERNEL, 2, 2, 1])?;
    let bias = s.param_shaped(&n.time_bias, &[1])?;
    let cpool = channel_pool(s, h)?;
    let pooled = axis_pool(s, cpool, F_AXIS)?;
    let spec = Conv2dSpec {
        stride: (1, 1),
        dilation: (1, 1),
        padding: (PadMode::Same, PadMode::Valid),
    };
    let tape = &mut s.tape;
    let z = tape.conv2d(pooled, kernel, Some(bias), &spec)?;
    Ok(tape.sigmoid(z)?)
}

/// Runs the three stages in order and returns the refined map (same shape
/// as `h`) together with the gates.
pub fn apply_ms<T: Real>(s: &mut Session<'_, T>, h: Var, prefix: &str) -> Result<(Var, AttentionMaps)> {
    let alpha_c = channel_attention(s, h, prefix)?;
    let h1 = s.tape.mul_broadcast(h, alpha_c)?;
    let alpha_f = frequency_attention(s, h1, prefix)?;
    let h2 = s.tape.mul_broadcast(h1, alpha_f)?;
    let alpha_t = time_attention(s, h2, prefix)?;
    let h3 = s.tape.mul_broadcast(h2, alpha_t)?;
    Ok((
        h3,
        AttentionMaps {
            alpha_c,
            alpha_f,
            alpha_t,
        },
    ))
}
