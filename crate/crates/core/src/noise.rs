//! Additive noise at controlled signal-to-noise ratios and disjoint noise
//! splits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{mean_power, Waveform};
use crate::error::{Error, Result};

pub const SNR_LEVELS_DB: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseCategory {
    Noise,
    Music,
    Babble,
}

impl NoiseCategory {
    pub const ALL: [NoiseCategory; 3] = [Self::Noise, Self::Music, Self::Babble];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Noise => "noise",
            Self::Music => "music",
            Self::Babble => "babble",
        }
    }
}

impl fmt::Display for NoiseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" | "general-noise" => Ok(Self::Noise),
            "music" => Ok(Self::Music),
            "babble" => Ok(Self::Babble),
            other => Err(Error::Mix(format!("unknown noise category `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub id: String,
    pub path: String,
    pub category: NoiseCategory,
    pub split: Split,
}

/// Result of a mix, keeping the exact added components.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub mixed: Waveform,
    pub scaled_noise: Vec<f64>,
    pub gain: f64,
}

/// Gain applied to noise of power `noise_power` so the mixture reaches
/// `snr_db` against a clean signal of power `clean_power`.
pub fn snr_gain(clean_power: f64, noise_power: f64, snr_db: f64) -> Result<f64> {
    if !(clean_power > 0.0) {
        return Err(Error::Mix("clean signal is silent; SNR undefined".into()));
    }
    if !(noise_power > 0.0) {
        return Err(Error::Mix("noise signal is silent; SNR unreachable".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Mix(format!("SNR {snr_db} dB is not finite")));
    }
    Ok((clean_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Noise of exactly `len` samples: a uniform random crop when longer, a loop
/// of the whole signal when shorter.
pub fn fit_noise<R: Rng + ?Sized>(noise: &[f64], len: usize, rng: &mut R) -> Vec<f64> {
    let n = noise.len();
    if n >= len {
        let offset = if n == len { 0 } else { rng.random_range(0..=n - len) };
        noise[offset..offset + len].to_vec()
    } else {
        noise.iter().copied().cycle().take(len).collect()
    }
}

pub fn mix_at_snr<R: Rng + ?Sized>(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut R,
) -> Result<Mixture> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::Mix(format!(
            "sample rates differ: clean {} Hz, noise {} Hz",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    let fitted = fit_noise(noise.samples(), clean.len(), rng);
    let gain = snr_gain(clean.power(), mean_power(&fitted), snr_db)?;
    let scaled_noise: Vec<f64> = fitted.iter().map(|v| v * gain).collect();
    let mixed = clean
        .samples()
        .iter()
        .zip(&scaled_noise)
        .map(|(c, n)| c + n)
        .collect();
    Ok(Mixture {
        mixed: Waveform::new(mixed, clean.sample_rate())?,
        scaled_noise,
        gain,
    })
}

/// Mix driven by a dedicated seed, so a manifest record reproduces it.
pub fn mix_seeded(clean: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Mixture> {
    mix_at_snr(clean, noise, snr_db, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// SNR in dB of `clean` against `noise`.
pub fn measured_snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    10.0 * (mean_power(clean) / mean_power(noise)).log10()
}

/// Stratified split: within each category, entries are shuffled and the
/// first `round(n * train_fraction)` go to train (at least one per side).
pub fn split_noise_corpus<R: Rng + ?Sized>(
    entries: &[NoiseEntry],
    train_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<NoiseEntry>, Vec<NoiseEntry>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Data(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut by_cat: BTreeMap<NoiseCategory, Vec<&NoiseEntry>> = BTreeMap::new();
    for e in entries {
        by_cat.entry(e.category).or_default().push(e);
    }
    for cat in NoiseCategory::ALL {
        let n = by_cat.get(&cat).map_or(0, Vec::len);
        if n < 2 {
            return Err(Error::Data(format!(
                "noise category `{cat}` has {n} entries; at least 2 are needed for a disjoint split"
            )));
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut group) in by_cat {
        group.sort_by(|a, b| a.id.cmp(&b.id));
        group.shuffle(rng);
        let n = group.len();
        let k = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        for (i, e) in group.into_iter().enumerate() {
            let split = if i < k { Split::Train } else { Split::Test };
            let e = NoiseEntry { split, ..e.clone() };
            if i < k {
                train.push(e);
            } else {
                test.push(e);
            }
        }
    }
    Ok((train, test))
}

/// One line of a mixing manifest: enough to rebuild the mixture exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct MixRecord {
    pub clean_path: String,
    pub noise_path: String,
    pub category: NoiseCategory,
    pub snr_db: f64,
    pub seed: u64,
}

impl fmt::Display for MixRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.clean_path, self.noise_path, self.category, self.snr_db, self.seed
        )
    }
}

impl FromStr for MixRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let [clean, noise, cat, snr, seed] = fields[..] else {
            return Err(Error::Data(format!(
                "mix record needs 5 tab-separated fields, got {}",
                fields.len()
            )));
        };
        let bad = |what: &str| Error::Data(format!("mix record: invalid {what} in `{line}`"));
        Ok(Self {
            clean_path: clean.to_string(),
            noise_path: noise.to_string(),
            category: cat.parse()?,
            snr_db: snr.parse().map_err(|_| bad("snr"))?,
            seed: seed.parse().map_err(|_| bad("seed"))?,
        })
    }
}
