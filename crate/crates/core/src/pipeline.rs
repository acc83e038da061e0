//! The experiment flow behind the command-line subcommands.
//!
//! Every artifact lives under the configured output directory:
//!
//! ```text
//! corpus/  noise/            prepare
//! mix/test.tsv               mix
//! checkpoints/<variant>.ckpt train
//! logs/<variant>.log         train
//! results/logits-<variant>.tsv, results/identification-<variant>.csv   evaluate
//! scores/<variant>/<condition>.tsv, results/verification-<variant>.csv score
//! results/fusion.csv         fuse
//! results/report.csv         report
//! ```
//!
//! CSV files start with a `# config_hash=<hex>` line.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{load_wav, Stft, Waveform};
use crate::checkpoint::Checkpoint;
use crate::config::{Condition, ExperimentConfig};
use crate::corpus::{
    derive_seed, generate_corpus, generate_noise_bank, read_noise_manifest, Manifest, Utterance,
    CORPUS_MANIFEST, NOISE_MANIFEST,
};
use crate::error::{Error, Result};
use crate::eval::{
    averaged_min_dcf, build_trials, compute_eer, fuse_logits, fuse_scores, topk_accuracy, ScoreSet,
    TrialPair,
};
use crate::model::{Model, Variant};
use crate::noise::{mix_seeded, MixRecord, NoiseEntry, Split};
use crate::sid_net::cosine_similarity;
use crate::tensor::Tensor;
use crate::train::{train_variant, LabelledAudio, MixingPool};

const HASH_PREFIX: &str = "# config_hash=";
const TOP5: usize = 5;

/// A validated configuration together with its hash.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        Ok(Self { config, hash })
    }

    pub fn output(&self) -> &Path {
        &self.config.paths.output
    }

    pub fn checkpoint_path(&self, v: Variant) -> PathBuf {
        self.output()
            .join("checkpoints")
            .join(format!("{}.ckpt", v.slug()))
    }

    pub fn log_path(&self, v: Variant) -> PathBuf {
        self.output().join("logs").join(format!("{}.log", v.slug()))
    }

    pub fn mix_path(&self) -> PathBuf {
        self.output().join("mix").join("test.tsv")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.output().join("results")
    }

    pub fn logits_path(&self, v: Variant) -> PathBuf {
        self.results_dir().join(format!("logits-{}.tsv", v.slug()))
    }

    pub fn identification_path(&self, v: Variant) -> PathBuf {
        self.results_dir()
            .join(format!("identification-{}.csv", v.slug()))
    }

    pub fn verification_path(&self, v: Variant) -> PathBuf {
        self.results_dir()
            .join(format!("verification-{}.csv", v.slug()))
    }

    pub fn scores_path(&self, v: Variant, c: &Condition) -> PathBuf {
        self.output()
            .join("scores")
            .join(v.slug())
            .join(format!("{}.tsv", c.key()))
    }

    pub fn fusion_path(&self) -> PathBuf {
        self.results_dir().join("fusion.csv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.results_dir().join("report.csv")
    }

    fn seed(&self, path: &[u64]) -> u64 {
        derive_seed(self.config.seed, path)
    }

    fn stamp(&self) -> String {
        format!("{HASH_PREFIX}{}\n", self.hash)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Reads a stamped file and returns its body after checking the hash.
fn read_stamped(exp: &Experiment, path: &Path, what: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(Error::missing(what, path));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    let hash = first
        .strip_prefix(HASH_PREFIX)
        .ok_or_else(|| Error::Data(format!("{}: missing config hash header", path.display())))?;
    if hash != exp.hash {
        return Err(Error::Mismatch(format!(
            "{} was produced under config {hash}, current config is {}",
            path.display(),
            exp.hash
        )));
    }
    Ok(body.to_string())
}

/// Maps `f` over `items` on all available cores, keeping input order.
fn par_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len());
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrepareSummary {
    pub utterances: usize,
    pub noise_recordings: usize,
}

/// Writes the synthetic corpus and the split noise bank.
pub fn prepare(exp: &Experiment) -> Result<PrepareSummary> {
    let cfg = &exp.config;
    let manifest = generate_corpus(cfg.corpus_dir(), &cfg.corpus.spec())?;
    let noise = generate_noise_bank(
        cfg.noise_dir(),
        cfg.noise.per_category,
        cfg.noise.seconds,
        cfg.noise.seed,
    )?;
    Ok(PrepareSummary {
        utterances: manifest.utterances.len(),
        noise_recordings: noise.len(),
    })
}

fn load_manifest(exp: &Experiment) -> Result<Manifest> {
    let path = exp.config.corpus_dir().join(CORPUS_MANIFEST);
    if !path.exists() {
        return Err(Error::missing("corpus manifest", path));
    }
    Manifest::read(path)
}

fn load_noise_entries(exp: &Experiment) -> Result<Vec<NoiseEntry>> {
    let path = exp.config.noise_dir().join(NOISE_MANIFEST);
    if !path.exists() {
        return Err(Error::missing("noise manifest", path));
    }
    read_noise_manifest(path)
}

/// Writes one mixing record per test utterance and noisy grid cell. Only
/// test-split noise is used.
pub fn mix(exp: &Experiment) -> Result<Vec<MixRecord>> {
    let manifest = load_manifest(exp)?;
    let noise = load_noise_entries(exp)?;
    let mut records = Vec::new();
    for (ci, cond) in exp.config.eval.grid().iter().enumerate() {
        let Condition::Noisy { category, snr_db } = *cond else {
            continue;
        };
        let pool: Vec<&NoiseEntry> = noise
            .iter()
            .filter(|e| e.category == category && e.split == Split::Test)
            .collect();
        if pool.is_empty() {
            return Err(Error::Data(format!(
                "no test-split noise in category `{category}`"
            )));
        }
        for (ui, u) in manifest.split(Split::Test).into_iter().enumerate() {
            let pick = exp.seed(&[10, ci as u64, ui as u64]) as usize % pool.len();
            records.push(MixRecord {
                clean_path: u.path.clone(),
                noise_path: pool[pick].path.clone(),
                category,
                snr_db,
                seed: exp.seed(&[11, ci as u64, ui as u64]),
            });
        }
    }
    let mut text = exp.stamp();
    for r in &records {
        writeln!(text, "{r}").expect("string write");
    }
    write_file(&exp.mix_path(), &text)?;
    Ok(records)
}

fn read_mix(exp: &Experiment) -> Result<Vec<MixRecord>> {
    read_stamped(exp, &exp.mix_path(), "mixing manifest (run `mix`)")?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::parse)
        .collect()
}

/// Trains each variant and writes its checkpoint and metrics log.
pub fn train(exp: &Experiment, variants: &[Variant]) -> Result<Vec<PathBuf>> {
    let cfg = &exp.config;
    let manifest = load_manifest(exp)?;
    let classes = manifest.speakers().len();
    let corpus_dir = cfg.corpus_dir();
    let utterances = manifest
        .split(Split::Train)
        .into_iter()
        .map(|u| {
            Ok(LabelledAudio {
                id: u.id.clone(),
                label: manifest.label_of(&u.speaker)?,
                wave: load_wav(corpus_dir.join(&u.path))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let noise_dir = cfg.noise_dir();
    let noise = load_noise_entries(exp)?
        .into_iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| {
            let w = load_wav(noise_dir.join(&e.path))?;
            Ok((e, w))
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = MixingPool { utterances, noise };
    let stft = Stft::new(&cfg.model.frontend)?;

    let mut written = Vec::new();
    for &v in variants {
        let mut rng = ChaCha8Rng::seed_from_u64(exp.seed(&[30]));
        let mut model = Model::new(v, cfg.model.clone(), classes, &mut rng)?;
        let log_path = exp.log_path(v);
        if let Some(dir) = log_path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        write!(
            log,
            "{}# variant {v}\n# step\tepoch\tlr\tloss\n",
            exp.stamp()
        )
        .map_err(|e| Error::io(&log_path, e))?;
        train_variant(
            &mut model,
            &pool,
            &stft,
            &cfg.train,
            exp.seed(&[31]),
            &mut log,
        )?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let path = exp.checkpoint_path(v);
        Checkpoint {
            model,
            config_hash: exp.hash.clone(),
        }
        .save(&path)?;
        written.push(path);
    }
    Ok(written)
}

fn load_model(exp: &Experiment, v: Variant, classes: usize) -> Result<Model> {
    let path = exp.checkpoint_path(v);
    if !path.exists() {
        return Err(Error::missing("checkpoint (run `train`)", path));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.model.variant != v {
        return Err(Error::Mismatch(format!(
            "{} holds variant {}, expected {v}",
            path.display(),
            ck.model.variant
        )));
    }
    if ck.config_hash != exp.hash {
        return Err(Error::Mismatch(format!(
            "{} was trained under config {}, current config is {}",
            path.display(),
            ck.config_hash,
            exp.hash
        )));
    }
    if ck.model.classes != classes || ck.model.spec != exp.config.model {
        return Err(Error::Mismatch(format!(
            "{} does not match the corpus speakers or model section",
            path.display()
        )));
    }
    Ok(ck.model)
}

/// Evenly spaced crops of `segment` samples; short input is tiled first.
pub fn fixed_segments(w: &Waveform, segment: usize, count: usize) -> Result<Vec<Waveform>> {
    let x = w.samples();
    let tiled: Vec<f64>;
    let x = if x.len() < segment {
        tiled = x.iter().copied().cycle().take(segment).collect();
        &tiled[..]
    } else {
        x
    };
    let spare = x.len() - segment;
    (0..count)
        .map(|k| {
            let start = if count == 1 {
                spare / 2
            } else {
                k * spare / (count - 1)
            };
            Waveform::new(x[start..start + segment].to_vec(), w.sample_rate())
        })
        .collect()
}

/// Test material shared by `evaluate` and `score`.
struct TestSet {
    utterances: Vec<Utterance>,
    labels: Vec<usize>,
    clean: Vec<Waveform>,
    noise: HashMap<String, Waveform>,
    records: HashMap<(String, String), MixRecord>,
    classes: usize,
    stft: Stft,
}

impl TestSet {
    fn load(exp: &Experiment) -> Result<Self> {
        let manifest = load_manifest(exp)?;
        let records = read_mix(exp)?;
        let corpus_dir = exp.config.corpus_dir();
        let utterances: Vec<Utterance> = manifest.split(Split::Test).into_iter().cloned().collect();
        let labels = utterances
            .iter()
            .map(|u| manifest.label_of(&u.speaker))
            .collect::<Result<_>>()?;
        let clean = utterances
            .iter()
            .map(|u| load_wav(corpus_dir.join(&u.path)))
            .collect::<Result<_>>()?;
        let noise_dir = exp.config.noise_dir();
        let mut noise = HashMap::new();
        for r in &records {
            if !noise.contains_key(&r.noise_path) {
                noise.insert(
                    r.noise_path.clone(),
                    load_wav(noise_dir.join(&r.noise_path))?,
                );
            }
        }
        let records = records
            .into_iter()
            .map(|r| {
                let cond = Condition::Noisy {
                    category: r.category,
                    snr_db: r.snr_db,
                };
                ((r.clean_path.clone(), cond.key()), r)
            })
            .collect();
        Ok(Self {
            utterances,
            labels,
            clean,
            noise,
            records,
            classes: manifest.speakers().len(),
            stft: Stft::new(&exp.config.model.frontend)?,
        })
    }

    /// Spectrogram crops of test utterance `i` under `cond`.
    fn inputs(&self, exp: &Experiment, cond: &Condition, i: usize) -> Result<Vec<Tensor<f32>>> {
        let u = &self.utterances[i];
        let wave = match cond {
            Condition::Original => self.clean[i].clone(),
            Condition::Noisy { .. } => {
                let key = (u.path.clone(), cond.key());
                let r = self.records.get(&key).ok_or_else(|| {
                    Error::Data(format!(
                        "mixing manifest has no record for {} under {cond}",
                        u.path
                    ))
                })?;
                mix_seeded(&self.clean[i], &self.noise[&r.noise_path], r.snr_db, r.seed)?.mixed
            }
        };
        let frontend = &exp.config.model.frontend;
        fixed_segments(
            &wave,
            frontend.segment_samples(),
            exp.config.eval.segments_per_utterance,
        )?
        .iter()
        .map(|s| Ok(self.stft.magnitude(s)?.values))
        .collect()
    }
}

/// Identification result for one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentificationRow {
    pub condition: Condition,
    pub top1: f64,
    pub top5: f64,
}

struct LogitRow {
    utterance: String,
    segment: usize,
    label: usize,
    logits: Vec<f64>,
}

fn identification_metrics(rows: &[LogitRow], classes: usize) -> Result<(f64, f64)> {
    let logits: Vec<&[f64]> = rows.iter().map(|r| r.logits.as_slice()).collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
    Ok((
        topk_accuracy(&logits, &labels, 1)?,
        topk_accuracy(&logits, &labels, TOP5.min(classes))?,
    ))
}

/// Top-1/Top-5 over the grid for each variant.
pub fn evaluate(
    exp: &Experiment,
    variants: &[Variant],
) -> Result<Vec<(Variant, Vec<IdentificationRow>)>> {
    let test = TestSet::load(exp)?;
    let grid = exp.config.eval.grid();
    let mut out = Vec::new();
    for &v in variants {
        let model = load_model(exp, v, test.classes)?;
        let per_cond = par_map(&grid, |cond| {
            let mut rows = Vec::new();
            for i in 0..test.utterances.len() {
                for (k, x) in test.inputs(exp, cond, i)?.iter().enumerate() {
                    rows.push(LogitRow {
                        utterance: test.utterances[i].id.clone(),
                        segment: k,
                        label: test.labels[i],
                        logits: model.logits(x)?,
                    });
                }
            }
            Ok(rows)
        })?;

        let mut logits_text = exp.stamp();
        let mut csv = exp.stamp();
        csv.push_str("noise,snr_db,variant,top1,top5\n");
        let mut rows = Vec::new();
        for (cond, cells) in grid.iter().zip(&per_cond) {
            for r in cells {
                let values: Vec<String> = r.logits.iter().map(f64::to_string).collect();
                writeln!(
                    logits_text,
                    "{}\t{}\t{}\t{}\t{}",
                    cond.key(),
                    r.utterance,
                    r.segment,
                    r.label,
                    values.join(",")
                )
                .expect("string write");
            }
            let (top1, top5) = identification_metrics(cells, test.classes)?;
            writeln!(csv, "{},{v},{}", cell(cond), pair(top1, top5)).expect("string write");
            rows.push(IdentificationRow {
                condition: *cond,
                top1,
                top5,
            });
        }
        write_file(&exp.logits_path(v), &logits_text)?;
        write_file(&exp.identification_path(v), &csv)?;
        out.push((v, rows));
    }
    Ok(out)
}

fn cell(cond: &Condition) -> String {
    format!("{},{}", cond.noise_label(), cond.snr_label())
}

fn pair(a: f64, b: f64) -> String {
    format!("{a:.6},{b:.6}")
}

/// Verification result for one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct VerificationRow {
    pub condition: Condition,
    pub eer: f64,
    pub dcf: f64,
}

fn trials(exp: &Experiment, test: &TestSet) -> Result<Vec<TrialPair>> {
    let items: Vec<(String, String)> = test
        .utterances
        .iter()
        .map(|u| (u.id.clone(), u.speaker.clone()))
        .collect();
    build_trials(
        &items,
        exp.config.eval.trial_pairs,
        &mut ChaCha8Rng::seed_from_u64(exp.seed(&[20])),
    )
}

/// Cosine-scored verification trials over the grid for each variant. Each
/// utterance is represented by the mean embedding of its crops.
pub fn score(
    exp: &Experiment,
    variants: &[Variant],
) -> Result<Vec<(Variant, Vec<VerificationRow>)>> {
    let test = TestSet::load(exp)?;
    let trials = trials(exp, &test)?;
    let index: HashMap<&str, usize> = test
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| (u.id.as_str(), i))
        .collect();
    let grid = exp.config.eval.grid();
    let mut out = Vec::new();
    for &v in variants {
        let model = load_model(exp, v, test.classes)?;
        let per_cond = par_map(&grid, |cond| {
            let embeddings = (0..test.utterances.len())
                .map(|i| {
                    let crops = test.inputs(exp, cond, i)?;
                    let mut mean = Vec::new();
                    for x in &crops {
                        let e = model.embedding(x)?;
                        mean.resize(e.len(), 0.0);
                        mean.iter_mut().zip(&e).for_each(|(m, x)| *m += x);
                    }
                    mean.iter_mut().for_each(|m| *m /= crops.len() as f64);
                    Ok(mean)
                })
                .collect::<Result<Vec<_>>>()?;
            trials
                .iter()
                .map(|t| {
                    cosine_similarity(
                        &embeddings[index[t.enrol.as_str()]],
                        &embeddings[index[t.test.as_str()]],
                    )
                })
                .collect::<Result<Vec<f64>>>()
        })?;

        let mut csv = exp.stamp();
        csv.push_str("noise,snr_db,variant,eer,dcf\n");
        let mut rows = Vec::new();
        for (cond, scores) in grid.iter().zip(per_cond) {
            let mut text = exp.stamp();
            for (t, s) in trials.iter().zip(&scores) {
                writeln!(
                    text,
                    "{}\t{}\t{s}\t{}",
                    t.enrol,
                    t.test,
                    u8::from(t.is_target)
                )
                .expect("string write");
            }
            write_file(&exp.scores_path(v, cond), &text)?;
            let set = ScoreSet::new(scores, trials.iter().map(|t| t.is_target).collect())?;
            let (eer, dcf) = (compute_eer(&set)?, averaged_min_dcf(&set)?);
            writeln!(csv, "{},{v},{}", cell(cond), pair(eer, dcf)).expect("string write");
            rows.push(VerificationRow {
                condition: *cond,
                eer,
                dcf,
            });
        }
        write_file(&exp.verification_path(v), &csv)?;
        out.push((v, rows));
    }
    Ok(out)
}

fn read_logits(exp: &Experiment, v: Variant) -> Result<BTreeMap<String, Vec<LogitRow>>> {
    let body = read_stamped(exp, &exp.logits_path(v), "logits file (run `evaluate`)")?;
    let mut out: BTreeMap<String, Vec<LogitRow>> = BTreeMap::new();
    for line in body.lines().filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Data(format!("malformed logits line `{line}`"));
        let [cond, utt, seg, label, values] = f[..] else {
            return Err(bad());
        };
        let logits = values
            .split(',')
            .map(|x| x.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        out.entry(cond.to_string()).or_default().push(LogitRow {
            utterance: utt.to_string(),
            segment: seg.parse().map_err(|_| bad())?,
            label: label.parse().map_err(|_| bad())?,
            logits,
        });
    }
    Ok(out)
}

fn read_scores(
    exp: &Experiment,
    v: Variant,
    c: &Condition,
) -> Result<(Vec<(String, String)>, ScoreSet)> {
    let body = read_stamped(exp, &exp.scores_path(v, c), "score file (run `score`)")?;
    let mut pairs = Vec::new();
    let (mut scores, mut targets) = (Vec::new(), Vec::new());
    for line in body.lines().filter(|l| !l.is_empty()) {
        let bad = || Error::Data(format!("malformed score line `{line}`"));
        let f: Vec<&str> = line.split('\t').collect();
        let [enrol, test, s, label] = f[..] else {
            return Err(bad());
        };
        pairs.push((enrol.to_string(), test.to_string()));
        scores.push(s.parse::<f64>().map_err(|_| bad())?);
        targets.push(match label {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        });
    }
    Ok((pairs, ScoreSet::new(scores, targets)?))
}

/// Sweeps the fusion weight over the grid for the two configured variants.
pub fn fuse(exp: &Experiment) -> Result<String> {
    let [va, vb] = exp.config.eval.fusion;
    let (la, lb) = (read_logits(exp, va)?, read_logits(exp, vb)?);
    let grid = exp.config.eval.grid();
    let steps = exp.config.eval.alpha_steps;
    let mut csv = exp.stamp();
    writeln!(csv, "# alpha weights {va}, 1 - alpha weights {vb}").expect("string write");
    csv.push_str("alpha,noise,snr_db,top1,top5,eer,dcf\n");

    let mut cells = Vec::new();
    for cond in &grid {
        let key = cond.key();
        let (ra, rb) = match (la.get(&key), lb.get(&key)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Mismatch(format!(
                    "condition {key} is missing from the logits of {va} or {vb}"
                )))
            }
        };
        let aligned = ra.len() == rb.len()
            && ra.iter().zip(rb.iter()).all(|(x, y)| {
                (x.utterance.as_str(), x.segment, x.label)
                    == (y.utterance.as_str(), y.segment, y.label)
            });
        if !aligned {
            return Err(Error::Mismatch(format!(
                "logits of {va} and {vb} are not aligned under {key}"
            )));
        }
        let (pa, sa) = read_scores(exp, va, cond)?;
        let (pb, sb) = read_scores(exp, vb, cond)?;
        if pa != pb {
            return Err(Error::Mismatch(format!(
                "trial lists of {va} and {vb} differ under {key}"
            )));
        }
        cells.push((cond, ra, rb, sa, sb));
    }
    let classes = la
        .values()
        .next()
        .and_then(|rows| rows.first())
        .map_or(1, |r| r.logits.len());
    for i in 0..=steps {
        let alpha = i as f64 / steps as f64;
        for (cond, ra, rb, sa, sb) in &cells {
            let a: Vec<&[f64]> = ra.iter().map(|r| r.logits.as_slice()).collect();
            let b: Vec<&[f64]> = rb.iter().map(|r| r.logits.as_slice()).collect();
            let fused = fuse_logits(alpha, &a, &b)?;
            let labels: Vec<usize> = ra.iter().map(|r| r.label).collect();
            let top1 = topk_accuracy(&fused, &labels, 1)?;
            let top5 = topk_accuracy(&fused, &labels, TOP5.min(classes))?;
            let s = fuse_scores(alpha, sa, sb)?;
            let (eer, dcf) = (compute_eer(&s)?, averaged_min_dcf(&s)?);
            writeln!(
                csv,
                "{alpha},{},{},{}",
                cell(cond),
                pair(top1, top5),
                pair(eer, dcf)
            )
            .expect("string write");
        }
    }
    write_file(&exp.fusion_path(), &csv)?;
    Ok(csv)
}

/// Merges every identification and verification table into one CSV. Tables
/// stamped with a different config hash are refused.
pub fn report(exp: &Experiment) -> Result<String> {
    let dir = exp.results_dir();
    if !dir.exists() {
        return Err(Error::missing("results directory (run `evaluate`)", dir));
    }
    type Key = (usize, String, String);
    let mut merged: BTreeMap<Key, (Option<String>, Option<String>)> = BTreeMap::new();
    let mut order: HashMap<(String, String), usize> = HashMap::new();
    for (i, c) in exp.config.eval.grid().iter().enumerate() {
        order.insert((c.noise_label().to_string(), c.snr_label()), i);
    }
    let mut found = false;
    for (vi, v) in Variant::ALL.iter().enumerate() {
        for (path, verification) in [
            (exp.identification_path(*v), false),
            (exp.verification_path(*v), true),
        ] {
            if !path.exists() {
                continue;
            }
            found = true;
            let body = read_stamped(exp, &path, "results table")?;
            for line in body.lines().skip(1).filter(|l| !l.is_empty()) {
                let f: Vec<&str> = line.splitn(4, ',').collect();
                let [noise, snr, _, metrics] = f[..] else {
                    return Err(Error::Data(format!(
                        "{}: malformed row `{line}`",
                        path.display()
                    )));
                };
                let cell = order
                    .get(&(noise.to_string(), snr.to_string()))
                    .copied()
                    .unwrap_or(usize::MAX);
                let entry = merged
                    .entry((vi, format!("{cell:08}"), format!("{noise},{snr}")))
                    .or_default();
                if verification {
                    entry.1 = Some(metrics.to_string());
                } else {
                    entry.0 = Some(metrics.to_string());
                }
            }
        }
    }
    if !found {
        return Err(Error::missing(
            "results tables (run `evaluate` or `score`)",
            dir,
        ));
    }
    if exp.fusion_path().exists() {
        read_stamped(exp, &exp.fusion_path(), "fusion table")?;
    }
    let mut csv = exp.stamp();
    csv.push_str("noise,snr_db,variant,top1,top5,eer,dcf\n");
    for ((vi, _, cond), (id, ver)) in merged {
        writeln!(
            csv,
            "{cond},{},{},{}",
            Variant::ALL[vi],
            id.unwrap_or_else(|| ",".into()),
            ver.unwrap_or_else(|| ",".into())
        )
        .expect("string write");
    }
    write_file(&exp.report_path(), &csv)?;
    Ok(csv)
}
