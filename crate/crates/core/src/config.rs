//! Experiment configuration, read from TOML.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Variant};
use crate::noise::{NoiseCategory, SNR_LEVELS_DB};
use crate::train::TrainConfig;

/// Environment variable that replaces `paths.output`.
pub const OUTPUT_DIR_ENV: &str = "CASCADE_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Defaults to `<output>/corpus`.
    pub corpus: Option<PathBuf>,
    /// Defaults to `<output>/noise`.
    pub noise: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            noise: None,
            output: PathBuf::from("output"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub seconds: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 8,
            utterances_per_speaker: 20,
            seconds: 4.0,
            test_fraction: 0.25,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn spec(&self) -> CorpusSpec {
        CorpusSpec {
            speakers: self.speakers,
            utterances_per_speaker: self.utterances_per_speaker,
            seconds: self.seconds,
            test_fraction: self.test_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub per_category: usize,
    pub seconds: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            per_category: 10,
            seconds: 5.0,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub categories: Vec<NoiseCategory>,
    pub snr_levels: Vec<f64>,
    /// Adds the unmixed condition to the grid.
    pub include_original: bool,
    /// Evenly spaced crops taken from every test utterance.
    pub segments_per_utterance: usize,
    pub trial_pairs: usize,
    /// Variants combined by `fuse`, weighted `alpha` and `1 - alpha`.
    pub fusion: [Variant; 2],
    pub alpha_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            categories: NoiseCategory::ALL.to_vec(),
            snr_levels: SNR_LEVELS_DB.to_vec(),
            include_original: true,
            segments_per_utterance: 3,
            trial_pairs: 400,
            fusion: [Variant::SeMsSid, Variant::SeSidMs],
            alpha_steps: 10,
        }
    }
}

/// One cell of the evaluation grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Condition {
    Original,
    Noisy {
        category: NoiseCategory,
        snr_db: f64,
    },
}

impl Condition {
    pub fn noise_label(&self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Noisy { category, .. } => category.as_str(),
        }
    }

    pub fn snr_label(&self) -> String {
        match self {
            Self::Original => "-".into(),
            Self::Noisy { snr_db, .. } => format!("{snr_db}"),
        }
    }

    /// File-name friendly key, e.g. `babble_5` or `original`.
    pub fn key(&self) -> String {
        match self {
            Self::Original => "original".into(),
            Self::Noisy { category, snr_db } => format!("{category}_{snr_db}"),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl EvalConfig {
    /// Category-major cross product, then the unmixed condition.
    pub fn grid(&self) -> Vec<Condition> {
        let mut out: Vec<Condition> = self
            .categories
            .iter()
            .flat_map(|&category| {
                self.snr_levels
                    .iter()
                    .map(move |&snr_db| Condition::Noisy { category, snr_db })
            })
            .collect();
        if self.include_original {
            out.push(Condition::Original);
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub noise: NoiseConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Variants handled when no `--variant` is given.
    pub variants: Vec<Variant>,
}

/// The part of the configuration that determines results.
#[derive(Serialize)]
struct Hashed<'a> {
    seed: u64,
    corpus: &'a CorpusConfig,
    noise: &'a NoiseConfig,
    model: &'a ModelSpec,
    train: &'a TrainConfig,
    eval: &'a EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text)
            .map_err(|e| Error::Config(e.to_string().lines().collect::<Vec<_>>().join(" ")))?;
        if cfg.variants.is_empty() {
            cfg.variants = Variant::ALL.to_vec();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        anchor(&mut cfg.paths.output);
        for p in [&mut cfg.paths.corpus, &mut cfg.paths.noise].into_iter().flatten() {
            anchor(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let c = &self.corpus;
        if c.speakers < 2 || c.utterances_per_speaker < 2 || !(c.seconds > 0.0) {
            return Err(Error::Config(
                "corpus: need at least 2 speakers, 2 utterances each, positive duration".into(),
            ));
        }
        if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "corpus: test_fraction {} outside (0, 1)",
                c.test_fraction
            )));
        }
        if self.noise.per_category < 2 || !(self.noise.seconds > 0.0) {
            return Err(Error::Config(
                "noise: need at least 2 recordings per category and positive duration".into(),
            ));
        }
        let e = &self.eval;
        if e.grid().is_empty() || e.segments_per_utterance == 0 || e.alpha_steps == 0 {
            return Err(Error::Config(
                "eval: grid, segments_per_utterance and alpha_steps must be non-empty".into(),
            ));
        }
        if e.trial_pairs < 2 {
            return Err(Error::Config("eval: trial_pairs must be at least 2".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of every result-determining field.
    /// Paths and the variant list are excluded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&Hashed {
            seed: self.seed,
            corpus: &self.corpus,
            noise: &self.noise,
            model: &self.model,
            train: &self.train,
            eval: &self.eval,
        })
        .expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.paths
            .corpus
            .clone()
            .unwrap_or_else(|| self.paths.output.join("corpus"))
    }

    pub fn noise_dir(&self) -> PathBuf {
        self.paths
            .noise
            .clone()
            .unwrap_or_else(|| self.paths.output.join("noise"))
    }
}
