//! Model variants and the enhancement → identification cascade.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMaps;
use crate::audio::SpectrogramConfig;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::se_net::{self, SeNetConfig};
use crate::sid_net::{self, SidNetConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "SID")]
    Sid,
    #[serde(rename = "SE+SID")]
    SeSid,
    #[serde(rename = "SE-MS+SID")]
    SeMsSid,
    #[serde(rename = "SE+SID-MS")]
    SeSidMs,
    #[serde(rename = "SE-MS+SID-MS")]
    SeMsSidMs,
    #[serde(rename = "frozen-sid")]
    FrozenSid,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Self::Sid,
        Self::SeSid,
        Self::SeMsSid,
        Self::SeSidMs,
        Self::SeMsSidMs,
        Self::FrozenSid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sid => "SID",
            Self::SeSid => "SE+SID",
            Self::SeMsSid => "SE-MS+SID",
            Self::SeSidMs => "SE+SID-MS",
            Self::SeMsSidMs => "SE-MS+SID-MS",
            Self::FrozenSid => "frozen-sid",
        }
    }

    pub fn has_se(self) -> bool {
        self != Self::Sid
    }

    pub fn se_ms(self) -> bool {
        matches!(self, Self::SeMsSid | Self::SeMsSidMs)
    }

    pub fn sid_ms(self) -> bool {
        matches!(self, Self::SeSidMs | Self::SeMsSidMs)
    }

    /// File-name friendly form.
    pub fn slug(self) -> String {
        self.name().to_lowercase().replace('+', "_")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.slug() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}`; expected one of {names:?}"))
            })
    }
}

/// Architecture of both networks plus the feature front end.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub frontend: SpectrogramConfig,
    pub se: SeNetConfig,
    pub sid: SidNetConfig,
}

impl ModelSpec {
    pub fn input_shape(&self) -> [usize; 3] {
        [self.frontend.frames(), self.frontend.bins(), 1]
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.se.validate()?;
        self.sid.validate_layout()
    }
}

/// Parameters of one variant together with its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub spec: ModelSpec,
    pub classes: usize,
    pub params: ParamStore<f32>,
}

/// Tape handles produced by one cascade pass.
#[derive(Clone, Debug)]
pub struct CascadeOutput {
    pub mask: Option<Var>,
    pub enhanced: Var,
    pub embedding: Var,
    pub logits: Option<Var>,
    pub se_attention: Vec<AttentionMaps>,
    pub sid_attention: Vec<AttentionMaps>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        variant: Variant,
        spec: ModelSpec,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let input = spec.input_shape();
        if variant.has_se() {
            se_net::trace_shapes(&spec.se, input, variant.se_ms())?;
            se_net::init_params(&mut params, &spec.se, variant.se_ms(), rng)?;
        }
        sid_net::init_params(
            &mut params,
            &spec.sid,
            input,
            classes,
            variant.sid_ms(),
            rng,
        )?;
        Ok(Self {
            variant,
            spec,
            classes,
            params,
        })
    }

    /// Checks that `params` hold exactly the tensors this variant needs.
    pub fn from_params(
        variant: Variant,
        spec: ModelSpec,
        classes: usize,
        params: ParamStore<f32>,
    ) -> Result<Self> {
        let reference = Self::new(
            variant,
            spec.clone(),
            classes,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        for (name, t) in reference.params.iter() {
            params.expect_shape(name, t.shape())?;
        }
        if let Some(extra) = params.names().find(|n| !reference.params.contains(n)) {
            return Err(Error::Checkpoint(format!(
                "parameter `{extra}` does not belong to variant {variant}"
            )));
        }
        Ok(Self {
            variant,
            spec,
            classes,
            params,
        })
    }

    pub fn se_digest(&self) -> String {
        self.params.digest(&format!("{}.", se_net::PREFIX))
    }

    pub fn sid_digest(&self) -> String {
        self.params.digest(&format!("{}.", sid_net::PREFIX))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.spec.input_shape();
        if shape != want {
            return Err(Error::Shape(format!(
                "model expects input {want:?}, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Enhancement (when present) followed by identification.
    pub fn cascade<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        classify: bool,
    ) -> Result<CascadeOutput> {
        self.check_input(s.tape.shape(x))?;
        let (mask, enhanced, se_attention) = if self.variant.has_se() {
            let (mask, maps) = se_net::forward_mask(s, &self.spec.se, x, self.variant.se_ms())?;
            let e = se_net::enhance(&mut s.tape, x, mask)?;
            (Some(mask), e, maps)
        } else {
            (None, x, Vec::new())
        };
        let out = sid_net::forward(s, &self.spec.sid, enhanced, self.variant.sid_ms(), classify)?;
        Ok(CascadeOutput {
            mask,
            enhanced,
            embedding: out.embedding,
            logits: out.logits,
            se_attention,
            sid_attention: out.attention,
        })
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        let mut s = Session::inference(&self.params);
        let xv = s.tape.constant(x.clone());
        let out = self.cascade(&mut s, xv, true)?;
        Ok(s.tape
            .value(out.logits.expect("classifier requested"))
            .to_f64_vec())
    }

    pub fn embedding(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        let mut s = Session::inference(&self.params);
        let xv = s.tape.constant(x.clone());
        let out = self.cascade(&mut s, xv, false)?;
        Ok(s.tape.value(out.embedding).to_f64_vec())
    }

    /// Ratio mask for `x`, if the variant has an enhancement stage.
    pub fn mask(&self, x: &Tensor<f32>) -> Result<Option<Tensor<f32>>> {
        if !self.variant.has_se() {
            return Ok(None);
        }
        self.check_input(x.shape())?;
        let mut s = Session::inference(&self.params);
        let xv = s.tape.constant(x.clone());
        let (mask, _) = se_net::forward_mask(&mut s, &self.spec.se, xv, self.variant.se_ms())?;
        Ok(Some(s.tape.value(mask).clone()))
    }
}
