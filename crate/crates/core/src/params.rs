//! Named parameter storage and binding of parameters onto a tape.

use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{grad_check_report, GradCheckReport, Tape, Var};
use crate::error::{Error, Result, TensorError};
use crate::tensor::{Real, Tensor};

/// Ordered collection of named tensors. Names are dot-scoped, e.g.
/// `se.b3.conv.kernel` or `sid.b1.ms.ca.w0`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn expect_shape(&self, name: &str, shape: &[usize]) -> Result<&Tensor<T>> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn merge_prefix(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.insert(k, v.clone());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian `f64` values of every
    /// tensor under `prefix` (in insertion order).
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Kaiming-uniform tensor: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Ok(Tensor::uniform(shape, -bound, bound, rng)?)
}

/// A tape together with lazily bound parameters.
///
/// Each parameter is placed on the tape the first time it is requested.
/// Parameters whose name starts with a frozen prefix are bound as constants,
/// so no gradient is ever computed for them.
pub struct Session<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    frozen: Vec<String>,
    track: bool,
    bound: IndexMap<String, Var>,
}

impl<'p, T: Real> Session<'p, T> {
    /// Every parameter tracked.
    pub fn training(params: &'p ParamStore<T>) -> Self {
        Self::with_frozen(params, &[])
    }

    /// Parameters under any of `frozen` bound as constants.
    pub fn with_frozen(params: &'p ParamStore<T>, frozen: &[&str]) -> Self {
        Self {
            tape: Tape::new(),
            params,
            frozen: frozen.iter().map(|s| s.to_string()).collect(),
            track: true,
            bound: IndexMap::new(),
        }
    }

    /// Nothing tracked.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            track: false,
            ..Self::training(params)
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let tracked = self.track && !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.tape.leaf(value, tracked);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter with a shape check.
    pub fn param_shaped(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.params.expect_shape(name, shape)?;
        self.param(name)
    }

    /// Binds `name` to an existing tape variable instead of the stored value.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    /// Gradients of `loss` for every tracked parameter bound so far.
    pub fn param_grads(&self, loss: Var) -> Result<IndexMap<String, Tensor<T>>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = IndexMap::new();
        for (name, &v) in &self.bound {
            if let Some(g) = grads.take(v) {
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

/// Finite-difference check of a parameterised block.
///
/// The input and every parameter in `store` are probed; the block output is
/// reduced to a scalar as `sum(output ⊙ weights)`.
pub fn grad_check_block<F>(
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    weights: &Tensor<f64>,
    eps: f64,
    block: F,
) -> Result<f64>
where
    F: Fn(&mut Session<'_, f64>, Var) -> Result<Var>,
{
    Ok(grad_check_block_report(store, input, weights, &[eps], block)?.1.max_rel_error)
}

/// Like [`grad_check_block`] over several step sizes (see
/// [`grad_check_report`]), also naming the worst coordinate (`"input"` or a
/// parameter name).
pub fn grad_check_block_report<F>(
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    weights: &Tensor<f64>,
    steps: &[f64],
    block: F,
) -> Result<(String, GradCheckReport)>
where
    F: Fn(&mut Session<'_, f64>, Var) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut inputs = vec![input.clone()];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let report = grad_check_report(
        |tape, vars| {
            let mut s = Session::training(store);
            s.tape = std::mem::take(tape);
            for (n, v) in names.iter().zip(&vars[1..]) {
                s.bind(n, *v);
            }
            let out = block(&mut s, vars[0]);
            *tape = std::mem::take(&mut s.tape);
            let out = out.map_err(|e| match e {
                Error::Tensor(t) => t,
                other => TensorError::Invalid {
                    op: "block",
                    msg: other.to_string(),
                },
            })?;
            let w = tape.constant(weights.clone());
            let p = tape.mul_broadcast(out, w)?;
            tape.sum(p)
        },
        &inputs,
        steps,
    )?;
    let name = match report.input {
        0 => "input".to_string(),
        k => names[k - 1].clone(),
    };
    Ok((name, report))
}
