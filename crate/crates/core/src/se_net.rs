//! Mask-estimation network: a stack of dilated convolution blocks, each
//! optionally followed by multi-stage attention, ending in a one-channel
//! sigmoid ratio mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionMaps};
use crate::autodiff::{Conv2dSpec, ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, ParamStore, Session};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "se";

/// Kernel and dilation of every block in the reference layout.
const LAYOUT: [([usize; 2], [usize; 2]); 11] = [
    ([7, 1], [1, 1]),
    ([1, 7], [1, 1]),
    ([5, 5], [1, 1]),
    ([5, 5], [1, 2]),
    ([5, 5], [1, 4]),
    ([5, 5], [1, 8]),
    ([5, 5], [1, 1]),
    ([5, 5], [2, 2]),
    ([5, 5], [4, 4]),
    ([5, 5], [8, 8]),
    ([1, 1], [1, 1]),
];

pub const REFERENCE_WIDTH: usize = 48;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeBlockSpec {
    pub kernel: [usize; 2],
    pub dilation: [usize; 2],
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeNetConfig {
    pub blocks: Vec<SeBlockSpec>,
}

impl Default for SeNetConfig {
    fn default() -> Self {
        Self::with_width(REFERENCE_WIDTH)
    }
}

impl SeNetConfig {
    /// Reference layout with every hidden block `width` channels wide.
    pub fn with_width(width: usize) -> Self {
        let last = LAYOUT.len() - 1;
        Self {
            blocks: LAYOUT
                .iter()
                .enumerate()
                .map(|(i, &(kernel, dilation))| SeBlockSpec {
                    kernel,
                    dilation,
                    channels: if i == last { 1 } else { width },
                })
                .collect(),
        }
    }

    /// Kernels and dilations must follow the reference layout; widths are
    /// free except that the last block emits a single channel.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != LAYOUT.len() {
            return Err(Error::Config(format!(
                "se: expected {} blocks, got {}",
                LAYOUT.len(),
                self.blocks.len()
            )));
        }
        for (i, (b, &(kernel, dilation))) in self.blocks.iter().zip(&LAYOUT).enumerate() {
            if b.kernel != kernel || b.dilation != dilation {
                return Err(Error::Config(format!(
                    "se block {}: kernel {:?} dilation {:?}, expected kernel {kernel:?} dilation {dilation:?}",
                    i + 1,
                    b.kernel,
                    b.dilation
                )));
            }
            if b.channels == 0 {
                return Err(Error::Config(format!("se block {}: zero channels", i + 1)));
            }
        }
        let last = self.blocks.last().map_or(0, |b| b.channels);
        if last != 1 {
            return Err(Error::Config(format!(
                "se: last block must have 1 channel, got {last}"
            )));
        }
        Ok(())
    }

    /// Receptive field `(time, frequency)` of one output bin after the
    /// first `blocks` blocks.
    pub fn receptive_field(&self, blocks: usize) -> (usize, usize) {
        self.blocks[..blocks].iter().fold((1, 1), |(t, f), b| {
            (
                t + (b.kernel[0] - 1) * b.dilation[0],
                f + (b.kernel[1] - 1) * b.dilation[1],
            )
        })
    }
}

fn conv_spec(b: &SeBlockSpec) -> Conv2dSpec {
    Conv2dSpec::same(1, (b.dilation[0], b.dilation[1]))
}

fn kernel_name(i: usize) -> String {
    format!("{PREFIX}.b{}.conv.kernel", i + 1)
}

fn bias_name(i: usize) -> String {
    format!("{PREFIX}.b{}.conv.bias", i + 1)
}

fn ms_prefix(i: usize) -> String {
    format!("{PREFIX}.b{}.ms", i + 1)
}

pub fn init_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &SeNetConfig,
    ms: bool,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let mut cin = 1;
    for (i, b) in cfg.blocks.iter().enumerate() {
        let [kt, kf] = b.kernel;
        store.insert(
            kernel_name(i),
            kaiming_uniform(&[kt, kf, cin, b.channels], kt * kf * cin, rng)?,
        );
        store.insert(bias_name(i), Tensor::zeros(&[b.channels])?);
        if ms {
            attention::init_params(store, &ms_prefix(i), b.channels, rng)?;
        }
        cin = b.channels;
    }
    Ok(())
}

/// Output shape of every block for an input of shape `[T, F, 1]`.
pub fn trace_shapes(cfg: &SeNetConfig, input: [usize; 3], ms: bool) -> Result<Vec<[usize; 3]>> {
    cfg.validate()?;
    if input[2] != 1 {
        return Err(Error::Shape(format!(
            "se input must have one channel, got {input:?}"
        )));
    }
    let mut shape = input;
    let mut out = Vec::with_capacity(cfg.blocks.len());
    for (i, b) in cfg.blocks.iter().enumerate() {
        let kernel = [b.kernel[0], b.kernel[1], shape[2], b.channels];
        shape = ConvGeom::new(&shape, &kernel, &conv_spec(b))?.output_shape();
        if ms && (shape[0] < attention::SPATIAL_KERNEL || shape[1] < attention::SPATIAL_KERNEL) {
            return Err(Error::Shape(format!(
                "se block {}: {}x{} map too small for attention",
                i + 1,
                shape[0],
                shape[1]
            )));
        }
        out.push(shape);
    }
    Ok(out)
}

/// Ratio mask `[T, F, 1]` with values in `[0, 1]`, plus the attention gates
/// of every block when attention is enabled.
pub fn forward_mask<T: Real>(
    s: &mut Session<'_, T>,
    cfg: &SeNetConfig,
    x: Var,
    ms: bool,
) -> Result<(Var, Vec<AttentionMaps>)> {
    let shape = s.tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != 1 {
        return Err(Error::Shape(format!(
            "se input must be [T,F,1], got {shape:?}"
        )));
    }
    let last = cfg.blocks.len() - 1;
    let mut h = x;
    let mut maps = Vec::new();
    for (i, b) in cfg.blocks.iter().enumerate() {
        let cin = s.tape.shape(h)[2];
        let kernel = s.param_shaped(
            &kernel_name(i),
            &[b.kernel[0], b.kernel[1], cin, b.channels],
        )?;
        let bias = s.param_shaped(&bias_name(i), &[b.channels])?;
        h = s.tape.conv2d(h, kernel, Some(bias), &conv_spec(b))?;
        if ms {
            let (refined, m) = attention::apply_ms(s, h, &ms_prefix(i))?;
            h = refined;
            maps.push(m);
        }
        h = if i == last {
            s.tape.sigmoid(h)?
        } else {
            s.tape.relu(h)?
        };
    }
    Ok((h, maps))
}

/// Elementwise product of a spectrogram and a mask of the same shape.
pub fn enhance<T: Real>(tape: &mut Tape<T>, x: Var, mask: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(mask) {
        return Err(Error::Shape(format!(
            "enhance: spectrogram {:?} and mask {:?} differ",
            tape.shape(x),
            tape.shape(mask)
        )));
    }
    Ok(tape.mul_broadcast(x, mask)?)
}
