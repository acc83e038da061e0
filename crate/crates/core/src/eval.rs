//! Identification and verification metrics and linear score fusion.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Priors of the two detection-cost operating points that are averaged.
pub const DCF_PRIORS: [f64; 2] = [0.01, 0.001];

/// Verification scores with their target / non-target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    targets: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Metric("empty score set".into()));
        }
        if scores.len() != targets.len() {
            return Err(Error::Metric(format!(
                "{} scores but {} labels",
                scores.len(),
                targets.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Metric(format!("score {i} is not finite")));
        }
        Ok(Self { scores, targets })
    }

    /// Target and non-target scores as separate lists.
    pub fn from_classes(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let scores = targets.iter().chain(nontargets).copied().collect();
        let labels = std::iter::repeat_n(true, targets.len())
            .chain(std::iter::repeat_n(false, nontargets.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_counts(&self) -> Result<(usize, usize)> {
        let nt = self.targets.iter().filter(|&&t| t).count();
        let nn = self.len() - nt;
        if nt == 0 || nn == 0 {
            return Err(Error::Metric(
                "both target and non-target trials are required".into(),
            ));
        }
        Ok((nt, nn))
    }
}

/// Miss and false-alarm rates at every candidate threshold, in increasing
/// threshold order: each distinct score value followed by `+inf`.
///
/// At threshold `t`, a target below `t` is a miss and a non-target at or
/// above `t` is a false alarm.
pub fn detection_curve(s: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    let (nt, nn) = s.class_counts()?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut curve = Vec::with_capacity(s.len() + 1);
    // counts of scores strictly below the current threshold
    let (mut miss, mut below_non) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = s.scores[order[i]];
        curve.push((miss as f64 / nt as f64, (nn - below_non) as f64 / nn as f64));
        while i < order.len() && s.scores[order[i]] == t {
            if s.targets[order[i]] {
                miss += 1;
            } else {
                below_non += 1;
            }
            i += 1;
        }
    }
    curve.push((1.0, 0.0));
    Ok(curve)
}

/// Rate at which the miss and false-alarm curves cross, interpolating
/// linearly between the two operating points that bracket the crossing.
pub fn eer_from_curve(curve: &[(f64, f64)]) -> f64 {
    let d = |(miss, fa): (f64, f64)| miss - fa;
    let i = curve
        .iter()
        .position(|&p| d(p) >= 0.0)
        .expect("curve ends at (1, 0)");
    if i == 0 {
        return curve[0].0;
    }
    let (p, q) = (curve[i - 1], curve[i]);
    let (dp, dq) = (d(p), d(q));
    let lambda = -dp / (dq - dp);
    p.0 + lambda * (q.0 - p.0)
}

pub fn compute_eer(s: &ScoreSet) -> Result<f64> {
    Ok(eer_from_curve(&detection_curve(s)?))
}

fn check_prior(p_target: f64, c_miss: f64, c_fa: f64) -> Result<()> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::Metric(format!(
            "target prior {p_target} outside (0, 1)"
        )));
    }
    if !(c_miss > 0.0 && c_fa > 0.0) {
        return Err(Error::Metric("detection costs must be positive".into()));
    }
    Ok(())
}

/// Normalised detection cost at one operating point.
pub fn dcf_at(p_miss: f64, p_fa: f64, p_target: f64, c_miss: f64, c_fa: f64) -> f64 {
    let cost = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa;
    cost / (c_miss * p_target).min(c_fa * (1.0 - p_target))
}

/// Minimum normalised detection cost over all thresholds.
pub fn min_dcf(s: &ScoreSet, p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    check_prior(p_target, c_miss, c_fa)?;
    Ok(detection_curve(s)?
        .into_iter()
        .map(|(m, f)| dcf_at(m, f, p_target, c_miss, c_fa))
        .fold(f64::INFINITY, f64::min))
}

/// Mean of the unit-cost minimum DCF at priors 0.01 and 0.001.
pub fn averaged_min_dcf(s: &ScoreSet) -> Result<f64> {
    let mut total = 0.0;
    for p in DCF_PRIORS {
        total += min_dcf(s, p, 1.0, 1.0)?;
    }
    Ok(total / DCF_PRIORS.len() as f64)
}

/// Whether `label` is among the `k` largest entries of `logits`, ranking
/// ties in favour of the lower index.
pub fn in_top_k(logits: &[f64], label: usize, k: usize) -> bool {
    let z = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count();
    rank < k
}

pub fn topk_accuracy<L: AsRef<[f64]>>(logits: &[L], labels: &[usize], k: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Metric("no items to score".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} logit rows but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for (row, &label) in logits.iter().zip(labels) {
        let row = row.as_ref();
        if k == 0 || k > row.len() {
            return Err(Error::Metric(format!("k = {k} outside 1..={}", row.len())));
        }
        if label >= row.len() {
            return Err(Error::Metric(format!(
                "label {label} outside {} classes",
                row.len()
            )));
        }
        hits += usize::from(in_top_k(row, label, k));
    }
    Ok(hits as f64 / logits.len() as f64)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Metric(format!(
            "fusion weight {alpha} outside [0, 1]"
        )));
    }
    Ok(())
}

fn fuse(alpha: f64, a: &[f64], b: &[f64]) -> Vec<f64> {
    // the endpoints return one input unchanged, bit for bit
    if alpha == 1.0 {
        a.to_vec()
    } else if alpha == 0.0 {
        b.to_vec()
    } else {
        a.iter()
            .zip(b)
            .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
            .collect()
    }
}

/// `alpha * a + (1 - alpha) * b` per trial.
pub fn fuse_scores(alpha: f64, a: &ScoreSet, b: &ScoreSet) -> Result<ScoreSet> {
    check_alpha(alpha)?;
    if a.targets != b.targets {
        return Err(Error::Metric(
            "score sets are not aligned trial for trial".into(),
        ));
    }
    ScoreSet::new(fuse(alpha, &a.scores, &b.scores), a.targets.clone())
}

pub fn fuse_logits<L: AsRef<[f64]>>(alpha: f64, a: &[L], b: &[L]) -> Result<Vec<Vec<f64>>> {
    check_alpha(alpha)?;
    if a.len() != b.len() {
        return Err(Error::Metric(format!(
            "{} vs {} logit rows",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let (x, y) = (x.as_ref(), y.as_ref());
            if x.len() != y.len() {
                return Err(Error::Metric("logit rows differ in width".into()));
            }
            Ok(fuse(alpha, x, y))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TrialPair {
    pub enrol: String,
    pub test: String,
    pub is_target: bool,
}

/// Every ordered same-speaker pair of distinct utterances.
pub fn target_pairs(utterances: &[(String, String)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, (_, si)) in utterances.iter().enumerate() {
        for (j, (_, sj)) in utterances.iter().enumerate() {
            if i != j && si == sj {
                out.push((i, j));
            }
        }
    }
    out
}

/// Balanced trial list over `(utterance id, speaker)` items: even positions
/// are target trials and odd positions non-target trials. Pairs are drawn
/// without repetition while unused pairs remain.
pub fn build_trials<R: Rng + ?Sized>(
    utterances: &[(String, String)],
    n_pairs: usize,
    rng: &mut R,
) -> Result<Vec<TrialPair>> {
    let speakers: BTreeMap<&str, usize> =
        utterances.iter().fold(BTreeMap::new(), |mut m, (_, s)| {
            *m.entry(s.as_str()).or_insert(0) += 1;
            m
        });
    if speakers.len() < 2 {
        return Err(Error::Data(format!(
            "trials need at least 2 speakers, found {}",
            speakers.len()
        )));
    }
    let mut targets = target_pairs(utterances);
    if targets.is_empty() {
        return Err(Error::Data(
            "no speaker has two utterances for target trials".into(),
        ));
    }
    targets.shuffle(rng);
    let n = utterances.len();
    let n_target = n_pairs.div_ceil(2);
    let n_non = n_pairs / 2;
    let non_available = n * n - n - target_pairs_len(&speakers);
    let mut seen = HashSet::new();
    let mut nontargets = Vec::with_capacity(n_non);
    while nontargets.len() < n_non {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        if utterances[i].1 == utterances[j].1 {
            continue;
        }
        if seen.len() < non_available && !seen.insert((i, j)) {
            continue;
        }
        nontargets.push((i, j));
    }
    let mk = |(i, j): (usize, usize), is_target| TrialPair {
        enrol: utterances[i].0.clone(),
        test: utterances[j].0.clone(),
        is_target,
    };
    let mut out = Vec::with_capacity(n_pairs);
    for k in 0..n_target.max(n_non) {
        if k < n_target {
            out.push(mk(targets[k % targets.len()], true));
        }
        if k < n_non {
            out.push(mk(nontargets[k], false));
        }
    }
    Ok(out)
}

fn target_pairs_len(speakers: &BTreeMap<&str, usize>) -> usize {
    speakers.values().map(|&c| c * (c - 1)).sum()
}
