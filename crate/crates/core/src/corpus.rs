//! Synthetic speakers and noise bank.
//!
//! Each speaker is a harmonic stack with its own fundamental and formant
//! envelope; utterances vary phase, pitch, vibrato and a syllable-rate
//! amplitude envelope. The noise bank holds coloured noise, looping chord
//! progressions and multi-talker babble.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::audio::{write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::noise::{split_noise_corpus, NoiseCategory, NoiseEntry, Split};

const PEAK: f64 = 0.5;
const MAX_HARMONIC_HZ: f64 = 4000.0;

pub const CORPUS_MANIFEST: &str = "manifest.tsv";
pub const NOISE_MANIFEST: &str = "noise.tsv";

/// Seed for an item identified by `path` under `base`, independent of the
/// order in which items are generated.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: String,
    pub f0: f64,
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
    pub vibrato_hz: f64,
    pub seed: u64,
}

impl SyntheticSpeaker {
    /// Relative amplitude of a partial at `freq` Hz.
    pub fn envelope(&self, freq: f64) -> f64 {
        let bumps: f64 = self
            .formants
            .iter()
            .zip(&self.bandwidths)
            .map(|(f, bw)| (-((freq - f) / bw).powi(2)).exp())
            .sum();
        0.03 + bumps
    }
}

/// Speakers with evenly spread fundamentals (90 to 250 Hz) and random
/// formant placements.
pub fn speaker_specs(n: usize, seed: u64) -> Result<Vec<SyntheticSpeaker>> {
    if n < 2 {
        return Err(Error::Data(format!(
            "a corpus needs at least 2 speakers, got {n}"
        )));
    }
    let step = 160.0 / n as f64;
    Ok((0..n)
        .map(|k| {
            let s = derive_seed(seed, &[0, k as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            SyntheticSpeaker {
                id: format!("spk{k:03}"),
                f0: 90.0 + step * (k as f64 + rng.random_range(0.25..0.75)),
                formants: [
                    rng.random_range(300.0..900.0),
                    rng.random_range(1000.0..2200.0),
                    rng.random_range(2400.0..3600.0),
                ],
                bandwidths: [
                    rng.random_range(80.0..160.0),
                    rng.random_range(120.0..220.0),
                    rng.random_range(150.0..300.0),
                ],
                vibrato_hz: rng.random_range(4.0..6.0),
                seed: s,
            }
        })
        .collect())
}

fn normalise_peak(mut x: Vec<f64>) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    x
}

fn samples_for(seconds: f64) -> Result<usize> {
    let n = (seconds * f64::from(SAMPLE_RATE)).round() as usize;
    if n == 0 {
        return Err(Error::Data(format!(
            "duration {seconds} s gives no samples"
        )));
    }
    Ok(n)
}

/// Harmonic source with pitch jitter, vibrato and a syllable envelope.
fn harmonic_source<R: Rng + ?Sized>(
    f0: f64,
    envelope: impl Fn(f64) -> f64,
    vibrato_hz: f64,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let f0 = f0 * (1.0 + rng.random_range(-0.02..0.02));
    let depth = rng.random_range(0.003..0.008);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let syllable_hz = rng.random_range(3.0..5.0);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let partials: Vec<(f64, f64, f64)> = (1..)
        .map(|h| h as f64)
        .take_while(|h| h * f0 < MAX_HARMONIC_HZ)
        .map(|h| (h, envelope(h * f0), rng.random_range(0.0..2.0 * PI)))
        .collect();
    // instantaneous phase of the fundamental, integrated sample by sample
    let mut phase = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let inst = f0 * (1.0 + depth * (2.0 * PI * vibrato_hz * t + vib_phase).sin());
            phase += 2.0 * PI * inst / sr;
            let gate = 0.55 + 0.45 * (2.0 * PI * syllable_hz * t + syllable_phase).sin();
            gate * partials
                .iter()
                .map(|&(h, a, p)| a * (h * phase + p).sin())
                .sum::<f64>()
        })
        .collect()
}

pub fn synthesize_utterance(spk: &SyntheticSpeaker, seconds: f64, seed: u64) -> Result<Waveform> {
    let n = samples_for(seconds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = harmonic_source(spk.f0, |f| spk.envelope(f), spk.vibrato_hz, n, &mut rng);
    Waveform::new(normalise_peak(x), SAMPLE_RATE)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    /// Relative to the corpus directory.
    pub path: String,
}

/// Utterance list with speaker labels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub utterances: Vec<Utterance>,
}

impl Manifest {
    /// Sorted speaker IDs; the index of an ID is its class label.
    pub fn speakers(&self) -> Vec<String> {
        self.utterances
            .iter()
            .map(|u| u.speaker.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn label_of(&self, speaker: &str) -> Result<usize> {
        self.speakers()
            .binary_search_by(|s| s.as_str().cmp(speaker))
            .map_err(|_| Error::Data(format!("unknown speaker `{speaker}`")))
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.split == split)
            .collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for u in &self.utterances {
            writeln!(f, "{}\t{}\t{}\t{}", u.id, u.speaker, u.split, u.path)?;
        }
        Ok(())
    }
}

impl FromStr for Manifest {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let utterances = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split('\t').collect();
                let [id, speaker, split, path] = f[..] else {
                    return Err(Error::Data(format!(
                        "manifest line {}: expected 4 tab-separated fields",
                        i + 1
                    )));
                };
                Ok(Utterance {
                    id: id.into(),
                    speaker: speaker.into(),
                    split: split.parse()?,
                    path: path.into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if utterances.is_empty() {
            return Err(Error::Data("empty manifest".into()));
        }
        Ok(Self { utterances })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub seconds: f64,
    /// Fraction of each speaker's utterances held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

/// Utterances in memory; `generate_corpus` writes the same audio to disk.
pub fn synthesize_corpus(spec: &CorpusSpec) -> Result<Vec<(Utterance, Waveform)>> {
    if spec.utterances_per_speaker < 2 {
        return Err(Error::Data(
            "each speaker needs at least 2 utterances".into(),
        ));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::Data(format!(
            "test fraction {} outside [0, 1)",
            spec.test_fraction
        )));
    }
    let speakers = speaker_specs(spec.speakers, spec.seed)?;
    let n = spec.utterances_per_speaker;
    let n_test = ((n as f64 * spec.test_fraction).round() as usize).min(n - 1);
    let mut out = Vec::with_capacity(spec.speakers * n);
    for (k, spk) in speakers.iter().enumerate() {
        for u in 0..n {
            let seed = derive_seed(spec.seed, &[1, k as u64, u as u64]);
            let wave = synthesize_utterance(spk, spec.seconds, seed)?;
            let id = format!("{}-u{u:03}", spk.id);
            out.push((
                Utterance {
                    path: format!("{}/{id}.wav", spk.id),
                    id,
                    speaker: spk.id.clone(),
                    split: if u >= n - n_test {
                        Split::Test
                    } else {
                        Split::Train
                    },
                },
                wave,
            ));
        }
    }
    Ok(out)
}

/// Writes every utterance as a WAV under `dir` plus the manifest.
pub fn generate_corpus(dir: impl AsRef<Path>, spec: &CorpusSpec) -> Result<Manifest> {
    let dir = dir.as_ref();
    let items = synthesize_corpus(spec)?;
    let mut manifest = Manifest::default();
    for (u, wave) in items {
        let path = dir.join(&u.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_wav(&path, &wave)?;
        manifest.utterances.push(u);
    }
    manifest.write(dir.join(CORPUS_MANIFEST))?;
    Ok(manifest)
}

/// White noise through a random one-pole low- or high-pass filter.
fn coloured_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let a: f64 = rng.random_range(0.3..0.95);
    let highpass = rng.random_bool(0.5);
    let mut lp = 0.0;
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            lp = a * lp + (1.0 - a) * x;
            if highpass {
                x - lp
            } else {
                lp
            }
        })
        .collect()
}

/// Four-chord progression looping every two seconds, each note a decaying
/// stack of four partials.
fn chord_loop<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let chord_len = (0.5 * sr) as usize;
    let chords: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let root = f64::from(rng.random_range(45u8..60));
            let third = if rng.random_bool(0.5) { 4.0 } else { 3.0 };
            [0.0, third, 7.0, 12.0]
                .iter()
                .map(|st| 440.0 * 2f64.powf((root + st - 69.0) / 12.0))
                .collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            let chord = &chords[(i / chord_len) % chords.len()];
            let local = (i % chord_len) as f64 / sr;
            let env = (-3.0 * local).exp() * (1.0 - (-200.0 * local).exp());
            let t = i as f64 / sr;
            env * chord
                .iter()
                .flat_map(|&f| (1..=4).map(move |h| (2.0 * PI * f * h as f64 * t).sin() / h as f64))
                .sum::<f64>()
        })
        .collect()
}

pub const BABBLE_SOURCES: usize = 4;

/// Individual talkers of a babble item, each with a random pitch outside
/// the corpus speakers' formant layout.
pub fn babble_sources(seconds: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let n = samples_for(seconds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..BABBLE_SOURCES)
        .map(|_| {
            let f0 = rng.random_range(85.0..260.0);
            let formants = [
                rng.random_range(300.0..900.0),
                rng.random_range(1000.0..2200.0),
                rng.random_range(2400.0..3600.0),
            ];
            let env = move |f: f64| {
                0.03 + formants
                    .iter()
                    .map(|c| (-((f - c) / 150.0).powi(2)).exp())
                    .sum::<f64>()
            };
            let vib = rng.random_range(4.0..6.0);
            normalise_peak(harmonic_source(f0, env, vib, n, &mut rng))
        })
        .collect())
}

pub fn synthesize_noise(category: NoiseCategory, seconds: f64, seed: u64) -> Result<Waveform> {
    let n = samples_for(seconds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = match category {
        NoiseCategory::Noise => coloured_noise(n, &mut rng),
        NoiseCategory::Music => chord_loop(n, &mut rng),
        NoiseCategory::Babble => {
            let sources = babble_sources(seconds, seed)?;
            (0..n).map(|i| sources.iter().map(|s| s[i]).sum()).collect()
        }
    };
    Waveform::new(normalise_peak(x), SAMPLE_RATE)
}

/// Writes `per_category` items of each category, splits them into disjoint
/// train and test halves, and records the result in the noise manifest.
pub fn generate_noise_bank(
    dir: impl AsRef<Path>,
    per_category: usize,
    seconds: f64,
    seed: u64,
) -> Result<Vec<NoiseEntry>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (c, cat) in NoiseCategory::ALL.iter().enumerate() {
        for i in 0..per_category {
            let id = format!("{cat}-{i:03}");
            let path = format!("{id}.wav");
            let wave =
                synthesize_noise(*cat, seconds, derive_seed(seed, &[2, c as u64, i as u64]))?;
            write_wav(dir.join(&path), &wave)?;
            entries.push(NoiseEntry {
                id,
                path,
                category: *cat,
                split: Split::Train,
            });
        }
    }
    let (train, test) = split_noise_corpus(
        &entries,
        0.5,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3])),
    )?;
    let mut all: Vec<NoiseEntry> = train.into_iter().chain(test).collect();
    all.sort_by(|a, b| a.id.cmp(&b.id));
    write_noise_manifest(dir.join(NOISE_MANIFEST), &all)?;
    Ok(all)
}

pub fn write_noise_manifest(path: impl AsRef<Path>, entries: &[NoiseEntry]) -> Result<()> {
    let path = path.as_ref();
    let text: String = entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\t{}\n", e.id, e.category, e.split, e.path))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_noise_manifest(path: impl AsRef<Path>) -> Result<Vec<NoiseEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let [id, cat, split, p] = f[..] else {
                return Err(Error::Data(format!(
                    "{}: line {}: expected 4 tab-separated fields",
                    path.display(),
                    i + 1
                )));
            };
            Ok(NoiseEntry {
                id: id.into(),
                category: cat.parse()?,
                split: split.parse()?,
                path: p.into(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{stft_magnitude, SpectrogramConfig};
    use std::collections::HashSet;

    fn long_term_spectrum(w: &Waveform) -> Vec<f64> {
        let s = stft_magnitude(w, &SpectrogramConfig::default()).unwrap();
        let (t, f) = (s.frames(), s.bins());
        let mut out = vec![0.0; f];
        for (i, v) in s.values.data().iter().enumerate() {
            out[i % f] += f64::from(*v) / t as f64;
        }
        out
    }

    fn spec(speakers: usize, utts: usize, seconds: f64) -> CorpusSpec {
        CorpusSpec {
            speakers,
            utterances_per_speaker: utts,
            seconds,
            test_fraction: 0.25,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic_on_disk() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let s = spec(3, 4, 0.3);
        let ma = generate_corpus(a.path(), &s).unwrap();
        let mb = generate_corpus(b.path(), &s).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.utterances.len(), 12);
        for u in &ma.utterances {
            assert_eq!(
                fs::read(a.path().join(&u.path)).unwrap(),
                fs::read(b.path().join(&u.path)).unwrap()
            );
        }
        assert_eq!(Manifest::read(a.path().join(CORPUS_MANIFEST)).unwrap(), ma);
        assert_eq!(ma.split(Split::Test).len(), 3);
        assert_eq!(ma.label_of("spk002").unwrap(), 2);
    }

    #[test]
    fn degenerate_requests_fail() {
        assert!(synthesize_corpus(&spec(0, 4, 1.0)).is_err());
        assert!(synthesize_corpus(&spec(1, 4, 1.0)).is_err());
        assert!(synthesize_corpus(&spec(2, 1, 1.0)).is_err());
        assert!(synthesize_corpus(&spec(2, 4, 0.0)).is_err());
    }

    #[test]
    fn speakers_have_distinct_spectral_peaks() {
        let items = synthesize_corpus(&spec(8, 2, 1.0)).unwrap();
        let mut seen = HashSet::new();
        for (u, w) in items.iter().filter(|(u, _)| u.id.ends_with("u000")) {
            let lt = long_term_spectrum(w);
            let mut idx: Vec<usize> = (0..lt.len()).collect();
            idx.sort_by(|&a, &b| lt[b].total_cmp(&lt[a]));
            let mut top: Vec<usize> = idx[..3].to_vec();
            top.sort();
            assert!(
                seen.insert(top),
                "{} repeats another speaker's peaks",
                u.speaker
            );
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn long_term_spectra_are_linearly_separable() {
        let items = synthesize_corpus(&CorpusSpec {
            speakers: 8,
            utterances_per_speaker: 10,
            seconds: 1.0,
            test_fraction: 0.5,
            seed: 3,
        })
        .unwrap();
        let feats: Vec<(String, Split, Vec<f64>)> = items
            .iter()
            .map(|(u, w)| {
                let mut v = long_term_spectrum(w);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                (u.speaker.clone(), u.split, v)
            })
            .collect();
        let speakers: BTreeSet<&String> = feats.iter().map(|f| &f.0).collect();
        // nearest centroid is a linear decision rule for unit-norm features
        let centroids: Vec<(&String, Vec<f64>)> = speakers
            .iter()
            .map(|s| {
                let train: Vec<&Vec<f64>> = feats
                    .iter()
                    .filter(|f| &f.0 == *s && f.1 == Split::Train)
                    .map(|f| &f.2)
                    .collect();
                let mut c = vec![0.0; train[0].len()];
                for t in &train {
                    c.iter_mut()
                        .zip(t.iter())
                        .for_each(|(a, b)| *a += b / train.len() as f64);
                }
                (*s, c)
            })
            .collect();
        let test: Vec<_> = feats.iter().filter(|f| f.1 == Split::Test).collect();
        let correct = test
            .iter()
            .filter(|f| {
                let best = centroids
                    .iter()
                    .min_by(|a, b| {
                        let d = |c: &Vec<f64>| {
                            c.iter()
                                .zip(&f.2)
                                .map(|(x, y)| (x - y).powi(2))
                                .sum::<f64>()
                        };
                        d(&a.1).total_cmp(&d(&b.1))
                    })
                    .unwrap();
                best.0 == &f.0
            })
            .count();
        assert!(
            correct as f64 / test.len() as f64 >= 0.99,
            "{correct}/{}",
            test.len()
        );
    }

    #[test]
    fn noise_bank() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ea = generate_noise_bank(a.path(), 4, 0.5, 11).unwrap();
        let eb = generate_noise_bank(b.path(), 4, 0.5, 11).unwrap();
        assert_eq!(ea, eb);
        let cats: BTreeSet<NoiseCategory> = ea.iter().map(|e| e.category).collect();
        assert_eq!(cats.len(), 3);
        for cat in NoiseCategory::ALL {
            let n = |s| {
                ea.iter()
                    .filter(|e| e.category == cat && e.split == s)
                    .count()
            };
            assert_eq!((n(Split::Train), n(Split::Test)), (2, 2));
        }
        for e in &ea {
            assert_eq!(
                fs::read(a.path().join(&e.path)).unwrap(),
                fs::read(b.path().join(&e.path)).unwrap()
            );
        }
        assert_eq!(
            read_noise_manifest(a.path().join(NOISE_MANIFEST)).unwrap(),
            ea
        );
    }

    #[test]
    fn babble_is_a_sum_of_talkers() {
        let sources = babble_sources(0.25, 5).unwrap();
        assert!(sources.len() >= 3);
        let sum: Vec<f64> = (0..sources[0].len())
            .map(|i| sources.iter().map(|s| s[i]).sum())
            .collect();
        let peak = sum.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let b = synthesize_noise(NoiseCategory::Babble, 0.25, 5).unwrap();
        for (x, y) in b.samples().iter().zip(&sum) {
            assert!((x - y * PEAK / peak).abs() < 1e-12);
        }
    }
}
