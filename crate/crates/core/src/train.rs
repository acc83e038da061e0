//! Optimiser, noisy-batch construction and the training regimes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{sample_segment, Stft, Waveform};
use crate::corpus::derive_seed;
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::noise::{mix_seeded, NoiseCategory, NoiseEntry, SNR_LEVELS_DB};
use crate::params::{ParamStore, Session};
use crate::se_net;
use crate::sid_net;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub sid_pretrain_epochs: usize,
    pub se_pretrain_epochs: usize,
    pub joint_epochs: usize,
    /// Noise categories drawn when corrupting training segments.
    pub categories: Vec<NoiseCategory>,
    pub snr_levels: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            decay: 0.9,
            batch_size: 8,
            sid_pretrain_epochs: 10,
            se_pretrain_epochs: 5,
            joint_epochs: 20,
            categories: NoiseCategory::ALL.to_vec(),
            snr_levels: SNR_LEVELS_DB.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "train: lr0 {} and decay {} must be positive (decay at most 1)",
                self.lr0, self.decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if self.categories.is_empty() || self.snr_levels.is_empty() {
            return Err(Error::Config(
                "train: categories and snr_levels must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// `lr0 * decay^epoch`.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Bias-corrected Adam with per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: IndexMap::new(),
        }
    }
}

impl<T: Real> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient. Fails
    /// without touching any parameter if a gradient is not finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Train(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient for `{name}` at element {i} (value {:?}) at step {}",
                    g.data()[i],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let cast = T::from_f64_lossy;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for ((w, &gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = cast(b1) * *mi + cast(1.0 - b1) * gi;
                *vi = cast(b2) * *vi + cast(1.0 - b2) * gi * gi;
                let m_hat = mi.as_f64() / c1;
                let v_hat = vi.as_f64() / c2;
                *w = *w - cast(lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Cross-entropy of the identification network on noisy input.
    PretrainSid,
    /// Mean squared error between enhanced and clean spectrograms.
    PretrainSe,
    /// Cross-entropy through the full cascade, everything trainable.
    Joint,
    /// Cross-entropy through the cascade with identification weights fixed.
    FrozenSid,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Self::PretrainSid => "pretrain-sid",
            Self::PretrainSe => "pretrain-se",
            Self::Joint => "joint",
            Self::FrozenSid => "frozen-sid",
        }
    }

    fn frozen_prefixes(self) -> Vec<String> {
        match self {
            Self::PretrainSid => vec![format!("{}.", se_net::PREFIX)],
            Self::PretrainSe | Self::FrozenSid => vec![format!("{}.", sid_net::PREFIX)],
            Self::Joint => Vec::new(),
        }
    }

    fn check(self, variant: Variant) -> Result<()> {
        if self != Self::PretrainSid && !variant.has_se() {
            return Err(Error::Train(format!(
                "regime {} needs an enhancement network, variant {variant} has none",
                self.name()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Self::PretrainSid,
            Self::PretrainSe,
            Self::Joint,
            Self::FrozenSid,
        ]
        .into_iter()
        .find(|r| r.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

/// Phases run for a variant: `(regime, epochs)`.
pub fn schedule(variant: Variant, cfg: &TrainConfig) -> Vec<(Regime, usize)> {
    match variant {
        Variant::Sid => vec![(
            Regime::PretrainSid,
            cfg.sid_pretrain_epochs + cfg.joint_epochs,
        )],
        Variant::FrozenSid => vec![
            (Regime::PretrainSid, cfg.sid_pretrain_epochs),
            (Regime::PretrainSe, cfg.se_pretrain_epochs),
            (Regime::FrozenSid, cfg.joint_epochs),
        ],
        _ => vec![
            (Regime::PretrainSid, cfg.sid_pretrain_epochs),
            (Regime::PretrainSe, cfg.se_pretrain_epochs),
            (Regime::Joint, cfg.joint_epochs),
        ],
    }
}

/// One training item: a noisy segment, its clean counterpart and the label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub label: usize,
    pub utterance: String,
    pub noise_id: String,
    pub category: NoiseCategory,
    pub snr_db: f64,
}

/// Labelled clean utterance held in memory.
#[derive(Clone, Debug)]
pub struct LabelledAudio {
    pub id: String,
    pub label: usize,
    pub wave: Waveform,
}

/// Everything needed to build noisy examples.
#[derive(Clone, Debug)]
pub struct MixingPool {
    pub utterances: Vec<LabelledAudio>,
    pub noise: Vec<(NoiseEntry, Waveform)>,
}

impl MixingPool {
    fn noise_of(&self, category: NoiseCategory) -> Vec<&(NoiseEntry, Waveform)> {
        self.noise
            .iter()
            .filter(|(e, _)| e.category == category)
            .collect()
    }
}

/// Uniform draw of a noise category and SNR level.
pub fn draw_condition<R: Rng + ?Sized>(
    categories: &[NoiseCategory],
    levels: &[f64],
    rng: &mut R,
) -> (NoiseCategory, f64) {
    let c = *categories.choose(rng).expect("non-empty categories");
    let s = *levels.choose(rng).expect("non-empty levels");
    (c, s)
}

/// Builds one example from a clean utterance under a fixed condition.
pub fn make_example<R: Rng + ?Sized>(
    pool: &MixingPool,
    utt: &LabelledAudio,
    category: NoiseCategory,
    snr_db: f64,
    stft: &Stft,
    rng: &mut R,
) -> Result<Example> {
    let candidates = pool.noise_of(category);
    let (entry, noise) = *candidates
        .choose(rng)
        .ok_or_else(|| Error::Data(format!("no noise recordings in category `{category}`")))?;
    let seconds = stft.config().segment_seconds;
    let clean = sample_segment(&utt.wave, seconds, rng)?;
    let mix = mix_seeded(&clean, noise, snr_db, rng.random())?;
    Ok(Example {
        noisy: stft.magnitude(&mix.mixed)?.values,
        clean: stft.magnitude(&clean)?.values,
        label: utt.label,
        utterance: utt.id.clone(),
        noise_id: entry.id.clone(),
        category,
        snr_db,
    })
}

/// One epoch of shuffled batches. Every utterance appears once with a
/// random segment, category, SNR level and noise recording.
pub fn build_batches(
    pool: &MixingPool,
    stft: &Stft,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<Vec<Example>>> {
    if pool.utterances.is_empty() {
        return Err(Error::Data("no training utterances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.utterances.len()).collect();
    order.shuffle(&mut rng);
    let mut examples = Vec::with_capacity(order.len());
    for i in order {
        let (cat, snr) = draw_condition(&cfg.categories, &cfg.snr_levels, &mut rng);
        examples.push(make_example(
            pool,
            &pool.utterances[i],
            cat,
            snr,
            stft,
            &mut rng,
        )?);
    }
    Ok(examples
        .chunks(cfg.batch_size)
        .map(<[Example]>::to_vec)
        .collect())
}

/// Loss of one example and gradients of every trainable parameter.
pub fn example_gradients(
    model: &Model,
    regime: Regime,
    ex: &Example,
) -> Result<(f64, IndexMap<String, Tensor<f32>>)> {
    regime.check(model.variant)?;
    let frozen = regime.frozen_prefixes();
    let frozen: Vec<&str> = frozen.iter().map(String::as_str).collect();
    let mut s = Session::with_frozen(&model.params, &frozen);
    let x = s.tape.constant(ex.noisy.clone());
    let loss = match regime {
        Regime::PretrainSid => {
            let out = sid_net::forward(&mut s, &model.spec.sid, x, model.variant.sid_ms(), true)?;
            s.tape
                .softmax_cross_entropy(out.logits.expect("classifier"), ex.label)?
        }
        Regime::PretrainSe => {
            let (mask, _) = se_net::forward_mask(&mut s, &model.spec.se, x, model.variant.se_ms())?;
            let enhanced = se_net::enhance(&mut s.tape, x, mask)?;
            s.tape.mse(enhanced, &ex.clean)?
        }
        Regime::Joint | Regime::FrozenSid => {
            let out = model.cascade(&mut s, x, true)?;
            s.tape
                .softmax_cross_entropy(out.logits.expect("classifier"), ex.label)?
        }
    };
    let value = s.tape.value(loss).data()[0].as_f64();
    Ok((value, s.param_grads(loss)?))
}

/// Mean loss and mean gradients over a batch.
pub fn batch_gradients(
    model: &Model,
    regime: Regime,
    batch: &[Example],
) -> Result<(f64, IndexMap<String, Tensor<f32>>)> {
    if batch.is_empty() {
        return Err(Error::Train("empty batch".into()));
    }
    let mut total = 0.0;
    let mut acc: IndexMap<String, Tensor<f32>> = IndexMap::new();
    for ex in batch {
        let (loss, grads) = example_gradients(model, regime, ex)?;
        total += loss;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => a
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(x, y)| *x += y),
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f32;
    for g in acc.values_mut() {
        g.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total / batch.len() as f64, acc))
}

/// Per-epoch mean losses of one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub regime: Regime,
    pub epoch_losses: Vec<f64>,
}

/// Runs `epochs` epochs of `regime` with a fresh optimiser. Each step is
/// appended to `log` as `step epoch lr loss`.
pub fn train_phase(
    model: &mut Model,
    regime: Regime,
    pool: &MixingPool,
    stft: &Stft,
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
    log: &mut dyn Write,
) -> Result<PhaseReport> {
    regime.check(model.variant)?;
    cfg.validate()?;
    let mut adam = Adam::new();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let write_err = |e| Error::io("metrics log", e);
    writeln!(log, "# phase {regime}").map_err(write_err)?;
    for epoch in 0..epochs {
        let lr = learning_rate(cfg.lr0, cfg.decay, epoch);
        let batches = build_batches(pool, stft, cfg, derive_seed(seed, &[epoch as u64]))?;
        let mut sum = 0.0;
        for batch in &batches {
            let (loss, grads) = batch_gradients(model, regime, batch)?;
            adam.step(&mut model.params, &grads, lr)?;
            sum += loss;
            writeln!(log, "{}\t{epoch}\t{lr:e}\t{loss}", adam.steps()).map_err(write_err)?;
        }
        epoch_losses.push(sum / batches.len() as f64);
    }
    Ok(PhaseReport {
        regime,
        epoch_losses,
    })
}

/// Full schedule for the model's variant.
pub fn train_variant(
    model: &mut Model,
    pool: &MixingPool,
    stft: &Stft,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<Vec<PhaseReport>> {
    schedule(model.variant, cfg)
        .into_iter()
        .enumerate()
        .filter(|(_, (_, epochs))| *epochs > 0)
        .map(|(i, (regime, epochs))| {
            train_phase(
                model,
                regime,
                pool,
                stft,
                cfg,
                epochs,
                derive_seed(seed, &[100, i as u64]),
                log,
            )
        })
        .collect()
}
