//! Speaker-identification network: residual 3×3 convolution blocks with
//! optional multi-stage attention before each residual addition, average
//! pooling over time, an embedding layer and a linear classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionMaps};
use crate::autodiff::{Conv2dSpec, ConvGeom, PoolMode, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, ParamStore, Session};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "sid";
pub const KERNEL: usize = 3;
pub const EMBEDDING_DIM: usize = 512;

/// Convolutions per block in the reference layout.
pub const REFERENCE_CONV_COUNTS: [usize; 8] = [3, 3, 2, 3, 2, 2, 2, 3];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidBlockSpec {
    /// Output width of each convolution.
    pub channels: Vec<usize>,
    /// Stride of the first convolution (and of the skip projection).
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidNetConfig {
    pub blocks: Vec<SidBlockSpec>,
    pub embedding_dim: usize,
}

fn block(channels: &[usize], stride: usize) -> SidBlockSpec {
    SidBlockSpec {
        channels: channels.to_vec(),
        stride,
    }
}

impl Default for SidNetConfig {
    /// Reference layout with the wide final convolutions in blocks 4 and 8,
    /// which yields the 512-channel pooled map.
    fn default() -> Self {
        Self {
            blocks: vec![
                block(&[64, 64, 64], 2),
                block(&[128, 128, 128], 2),
                block(&[128, 128], 1),
                block(&[256, 256, 256], 2),
                block(&[256, 256], 1),
                block(&[256, 256], 1),
                block(&[256, 256], 1),
                block(&[512, 512, 512], 2),
            ],
            embedding_dim: EMBEDDING_DIM,
        }
    }
}

impl SidNetConfig {
    /// Variant whose blocks 4 and 8 end in a 128-channel convolution.
    pub fn narrow_projection() -> Self {
        let mut cfg = Self::default();
        cfg.blocks[3].channels = vec![256, 256, 128];
        cfg.blocks[7].channels = vec![512, 512, 128];
        cfg
    }

    /// Reference block structure with per-block widths and strides.
    pub fn scaled(widths: [usize; 8], strides: [usize; 8], embedding_dim: usize) -> Self {
        Self {
            blocks: REFERENCE_CONV_COUNTS
                .iter()
                .zip(widths.iter().zip(&strides))
                .map(|(&n, (&w, &s))| block(&vec![w; n], s))
                .collect(),
            embedding_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("sid: no blocks".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels.is_empty() || b.channels.contains(&0) {
                return Err(Error::Config(format!(
                    "sid block {}: empty or zero-width convolution",
                    i + 1
                )));
            }
            if b.stride == 0 {
                return Err(Error::Config(format!("sid block {}: zero stride", i + 1)));
            }
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("sid: zero embedding dimension".into()));
        }
        Ok(())
    }

    /// Eight blocks with the reference number of convolutions in each and
    /// strides of 1 or 2.
    pub fn validate_layout(&self) -> Result<()> {
        self.validate()?;
        let counts: Vec<usize> = self.blocks.iter().map(|b| b.channels.len()).collect();
        if counts != REFERENCE_CONV_COUNTS {
            return Err(Error::Config(format!(
                "sid: convolutions per block {counts:?}, expected {REFERENCE_CONV_COUNTS:?}"
            )));
        }
        if let Some(i) = self.blocks.iter().position(|b| b.stride > 2) {
            return Err(Error::Config(format!(
                "sid block {}: stride must be 1 or 2",
                i + 1
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.blocks
            .last()
            .and_then(|b| b.channels.last())
            .copied()
            .unwrap_or(0)
    }
}

fn needs_projection(cin: usize, b: &SidBlockSpec) -> bool {
    b.stride != 1 || cin != *b.channels.last().expect("validated")
}

fn conv_name(i: usize, j: usize) -> (String, String) {
    (
        format!("{PREFIX}.b{}.conv{}.kernel", i + 1, j + 1),
        format!("{PREFIX}.b{}.conv{}.bias", i + 1, j + 1),
    )
}

fn proj_name(i: usize) -> (String, String) {
    (
        format!("{PREFIX}.b{}.proj.kernel", i + 1),
        format!("{PREFIX}.b{}.proj.bias", i + 1),
    )
}

fn ms_prefix(i: usize) -> String {
    format!("{PREFIX}.b{}.ms", i + 1)
}

pub const EMBED_W: &str = "sid.fc.w";
pub const EMBED_B: &str = "sid.fc.b";
pub const CLASS_W: &str = "sid.cls.w";
pub const CLASS_B: &str = "sid.cls.b";

/// Shapes traced through the network for one input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SidTrace {
    pub blocks: Vec<[usize; 3]>,
    pub pooled: [usize; 3],
    pub embedding: usize,
}

pub fn trace_shapes(cfg: &SidNetConfig, input: [usize; 3], ms: bool) -> Result<SidTrace> {
    cfg.validate()?;
    let mut shape = input;
    let mut blocks = Vec::with_capacity(cfg.blocks.len());
    for (i, b) in cfg.blocks.iter().enumerate() {
        for (j, &c) in b.channels.iter().enumerate() {
            let stride = if j == 0 { b.stride } else { 1 };
            shape = ConvGeom::new(
                &shape,
                &[KERNEL, KERNEL, shape[2], c],
                &Conv2dSpec::same(stride, (1, 1)),
            )?
            .output_shape();
        }
        if ms && (shape[0] < attention::SPATIAL_KERNEL || shape[1] < attention::SPATIAL_KERNEL) {
            return Err(Error::Shape(format!(
                "sid block {}: {}x{} map too small for attention",
                i + 1,
                shape[0],
                shape[1]
            )));
        }
        blocks.push(shape);
    }
    Ok(SidTrace {
        blocks,
        pooled: [1, shape[1], shape[2]],
        embedding: cfg.embedding_dim,
    })
}

/// Adds all parameters for inputs of shape `input` and `classes` speakers.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &SidNetConfig,
    input: [usize; 3],
    classes: usize,
    ms: bool,
    rng: &mut R,
) -> Result<()> {
    let trace = trace_shapes(cfg, input, ms)?;
    if classes == 0 {
        return Err(Error::Config("sid: zero speakers".into()));
    }
    let mut cin = input[2];
    for (i, b) in cfg.blocks.iter().enumerate() {
        let block_in = cin;
        for (j, &c) in b.channels.iter().enumerate() {
            let (k, bias) = conv_name(i, j);
            store.insert(
                k,
                kaiming_uniform(&[KERNEL, KERNEL, cin, c], KERNEL * KERNEL * cin, rng)?,
            );
            store.insert(bias, Tensor::zeros(&[c])?);
            cin = c;
        }
        if ms {
            attention::init_params(store, &ms_prefix(i), cin, rng)?;
        }
        if needs_projection(block_in, b) {
            let (k, bias) = proj_name(i);
            store.insert(k, kaiming_uniform(&[1, 1, block_in, cin], block_in, rng)?);
            store.insert(bias, Tensor::zeros(&[cin])?);
        }
    }
    let flat = trace.pooled[1] * trace.pooled[2];
    store.insert(
        EMBED_W,
        kaiming_uniform(&[flat, cfg.embedding_dim], flat, rng)?,
    );
    store.insert(EMBED_B, Tensor::zeros(&[1, cfg.embedding_dim])?);
    store.insert(
        CLASS_W,
        kaiming_uniform(&[cfg.embedding_dim, classes], cfg.embedding_dim, rng)?,
    );
    store.insert(CLASS_B, Tensor::zeros(&[1, classes])?);
    Ok(())
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct SidOutput {
    pub embedding: Var,
    pub logits: Option<Var>,
    pub block_outputs: Vec<Var>,
    pub attention: Vec<AttentionMaps>,
}

fn conv<T: Real>(
    s: &mut Session<'_, T>,
    x: Var,
    names: &(String, String),
    cout: usize,
    k: usize,
    stride: usize,
) -> Result<Var> {
    let cin = s.tape.shape(x)[2];
    let kernel = s.param_shaped(&names.0, &[k, k, cin, cout])?;
    let bias = s.param_shaped(&names.1, &[cout])?;
    Ok(s.tape
        .conv2d(x, kernel, Some(bias), &Conv2dSpec::same(stride, (1, 1)))?)
}

fn residual_block<T: Real>(
    s: &mut Session<'_, T>,
    i: usize,
    b: &SidBlockSpec,
    x: Var,
    ms: bool,
) -> Result<(Var, Option<AttentionMaps>)> {
    let cin = s.tape.shape(x)[2];
    let mut h = x;
    for (j, &c) in b.channels.iter().enumerate() {
        let stride = if j == 0 { b.stride } else { 1 };
        h = conv(s, h, &conv_name(i, j), c, KERNEL, stride)?;
        h = s.tape.relu(h)?;
    }
    let mut maps = None;
    if ms {
        let (refined, m) = attention::apply_ms(s, h, &ms_prefix(i))?;
        h = refined;
        maps = Some(m);
    }
    let skip = if needs_projection(cin, b) {
        conv(
            s,
            x,
            &proj_name(i),
            *b.channels.last().expect("validated"),
            1,
            b.stride,
        )?
    } else {
        x
    };
    let sum = s.tape.add(h, skip)?;
    Ok((s.tape.relu(sum)?, maps))
}

/// Runs the network on `x [T, F, 1]`. The classifier is evaluated only when
/// `classify` is set.
pub fn forward<T: Real>(
    s: &mut Session<'_, T>,
    cfg: &SidNetConfig,
    x: Var,
    ms: bool,
    classify: bool,
) -> Result<SidOutput> {
    let shape = s.tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != 1 {
        return Err(Error::Shape(format!(
            "sid input must be [T,F,1], got {shape:?}"
        )));
    }
    let mut h = x;
    let mut block_outputs = Vec::with_capacity(cfg.blocks.len());
    let mut maps = Vec::new();
    for (i, b) in cfg.blocks.iter().enumerate() {
        let (out, m) = residual_block(s, i, b, h, ms)?;
        h = out;
        block_outputs.push(h);
        maps.extend(m);
    }
    let pooled = s.tape.pool_over(h, &[0], PoolMode::Avg)?;
    let [_, f, c] = <[usize; 3]>::try_from(s.tape.shape(pooled)).expect("rank 3");
    let flat = s.tape.reshape(pooled, &[1, f * c])?;
    let w = s.param_shaped(EMBED_W, &[f * c, cfg.embedding_dim])?;
    let bias = s.param_shaped(EMBED_B, &[1, cfg.embedding_dim])?;
    let embedding = s.tape.fully_connected(flat, w, Some(bias))?;
    let logits = if classify {
        let classes = s.params().get(CLASS_W)?.shape()[1];
        let act = s.tape.relu(embedding)?;
        let w = s.param_shaped(CLASS_W, &[cfg.embedding_dim, classes])?;
        let bias = s.param_shaped(CLASS_B, &[1, classes])?;
        Some(s.tape.fully_connected(act, w, Some(bias))?)
    } else {
        None
    };
    Ok(SidOutput {
        embedding,
        logits,
        block_outputs,
        attention: maps,
    })
}

/// Embedding vector for one spectrogram, without the classifier.
pub fn extract_embedding<T: Real>(
    params: &ParamStore<T>,
    cfg: &SidNetConfig,
    x: &Tensor<T>,
    ms: bool,
) -> Result<Vec<T>> {
    let mut s = Session::inference(params);
    let xv = s.tape.constant(x.clone());
    let out = forward(&mut s, cfg, xv, ms, false)?;
    Ok(s.tape.value(out.embedding).data().to_vec())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!(
            "cosine: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Metric("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests;
