//! Dilated, strided 2-D cross-correlation over `[T, F, C]` feature maps.

use crate::error::TensorError;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Zero padding so the output extent is `ceil(input / stride)`.
    Same,
    /// No padding.
    Valid,
}

/// Stride, dilation and padding for one convolution, per (time, frequency) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (PadMode, PadMode),
}

impl Conv2dSpec {
    pub fn same(stride: usize, dilation: (usize, usize)) -> Self {
        Self {
            stride: (stride, stride),
            dilation,
            padding: (PadMode::Same, PadMode::Same),
        }
    }

    pub fn valid() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (PadMode::Valid, PadMode::Valid),
        }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self::same(1, (1, 1))
    }
}

/// Output extent and leading pad for one axis.
pub fn axis_geometry(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    mode: PadMode,
) -> Option<(usize, usize)> {
    let span = (kernel - 1) * dilation + 1;
    match mode {
        PadMode::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + span).saturating_sub(input);
            Some((out, needed / 2))
        }
        PadMode::Valid => {
            if input < span {
                None
            } else {
                Some(((input - span) / stride + 1, 0))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_t: usize,
    pub in_f: usize,
    pub cin: usize,
    pub k_t: usize,
    pub k_f: usize,
    pub cout: usize,
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub pad: (usize, usize),
    pub out_t: usize,
    pub out_f: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        spec: &Conv2dSpec,
    ) -> Result<Self, TensorError> {
        const OP: &str = "conv2d";
        if input.len() != 3 {
            return Err(TensorError::invalid(OP, format!("input must be [T,F,C], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(TensorError::invalid(
                OP,
                format!("kernel must be [kT,kF,Cin,Cout], got {kernel:?}"),
            ));
        }
        if input[2] != kernel[2] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let (st, sf) = spec.stride;
        let (dt, df) = spec.dilation;
        if st == 0 || sf == 0 || dt == 0 || df == 0 {
            return Err(TensorError::invalid(OP, "stride and dilation must be positive"));
        }
        let (out_t, pad_t) = axis_geometry(input[0], kernel[0], st, dt, spec.padding.0)
            .ok_or_else(|| TensorError::invalid(OP, "kernel larger than input on time axis"))?;
        let (out_f, pad_f) = axis_geometry(input[1], kernel[1], sf, df, spec.padding.1).ok_or_else(
            || TensorError::invalid(OP, "kernel larger than input on frequency axis"),
        )?;
        Ok(Self {
            in_t: input[0],
            in_f: input[1],
            cin: input[2],
            k_t: kernel[0],
            k_f: kernel[1],
            cout: kernel[3],
            stride: spec.stride,
            dilation: spec.dilation,
            pad: (pad_t, pad_f),
            out_t,
            out_f,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_t, self.out_f, self.cout]
    }

    #[inline]
    fn in_t_of(&self, ot: usize, kt: usize) -> Option<usize> {
        let pos = (ot * self.stride.0 + kt * self.dilation.0) as isize - self.pad.0 as isize;
        (pos >= 0 && (pos as usize) < self.in_t).then_some(pos as usize)
    }

    #[inline]
    fn in_f_of(&self, of: usize, kf: usize) -> Option<usize> {
        let pos = (of * self.stride.1 + kf * self.dilation.1) as isize - self.pad.1 as isize;
        (pos >= 0 && (pos as usize) < self.in_f).then_some(pos as usize)
    }

    /// Calls `visit(input_offset, kernel_offset, output_offset)` for every
    /// in-bounds tap, where offsets point at the start of the channel rows.
    #[inline]
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let (cin, cout) = (self.cin, self.cout);
        for ot in 0..self.out_t {
            for kt in 0..self.k_t {
                let Some(it) = self.in_t_of(ot, kt) else {
                    continue;
                };
                for of in 0..self.out_f {
                    let out_off = (ot * self.out_f + of) * cout;
                    for kf in 0..self.k_f {
                        let Some(i_f) = self.in_f_of(of, kf) else {
                            continue;
                        };
                        let in_off = (it * self.in_f + i_f) * cin;
                        let k_off = (kt * self.k_f + kf) * cin * cout;
                        visit(in_off, k_off, out_off);
                    }
                }
            }
        }
    }
}

pub fn forward<T: Real>(g: &ConvGeom, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![T::zero(); g.out_t * g.out_f * cout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b);
        }
    }
    g.for_each_tap(|in_off, k_off, out_off| {
        let x_row = &input[in_off..in_off + cin];
        let out_row = &mut out[out_off..out_off + cout];
        for (ci, &x) in x_row.iter().enumerate() {
            let k_row = &kernel[k_off + ci * cout..k_off + (ci + 1) * cout];
            for (o, &k) in out_row.iter_mut().zip(k_row) {
                *o = *o + x * k;
            }
        }
    });
    out
}

pub fn backward_input<T: Real>(g: &ConvGeom, kernel: &[T], grad_out: &[T], grad_in: &mut [T]) {
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|in_off, k_off, out_off| {
        let g_row = &grad_out[out_off..out_off + cout];
        let gi_row = &mut grad_in[in_off..in_off + cin];
        for (ci, gi) in gi_row.iter_mut().enumerate() {
            let k_row = &kernel[k_off + ci * cout..k_off + (ci + 1) * cout];
            let mut acc = T::zero();
            for (&k, &go) in k_row.iter().zip(g_row) {
                acc = acc + k * go;
            }
            *gi = *gi + acc;
        }
    });
}

pub fn backward_kernel<T: Real>(g: &ConvGeom, input: &[T], grad_out: &[T], grad_k: &mut [T]) {
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|in_off, k_off, out_off| {
        let g_row = &grad_out[out_off..out_off + cout];
        let x_row = &input[in_off..in_off + cin];
        for (ci, &x) in x_row.iter().enumerate() {
            let gk_row = &mut grad_k[k_off + ci * cout..k_off + (ci + 1) * cout];
            for (gk, &go) in gk_row.iter_mut().zip(g_row) {
                *gk = *gk + x * go;
            }
        }
    });
}

pub fn backward_bias<T: Real>(cout: usize, grad_out: &[T], grad_b: &mut [T]) {
    for row in grad_out.chunks_exact(cout) {
        for (gb, &go) in grad_b.iter_mut().zip(row) {
            *gb = *gb + go;
        }
    }
}
