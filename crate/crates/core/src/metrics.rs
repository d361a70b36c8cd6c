//! Trial lists, detection metrics, and linear probes on embeddings.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::EmbeddingSet;
use crate::corpus::io::write_atomic;
use crate::corpus::UtteranceRecord;
use crate::error::{Error, Result};

/// Verification scores split by trial type.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl ScoreSet {
    pub fn new(target: Vec<f64>, nontarget: Vec<f64>) -> Self {
        Self { target, nontarget }
    }

    fn check(&self) -> Result<()> {
        if self.target.is_empty() || self.nontarget.is_empty() {
            return Err(Error::Data(format!(
                "need target and nontarget scores, got {} and {}",
                self.target.len(),
                self.nontarget.len()
            )));
        }
        if self.target.iter().chain(&self.nontarget).any(|s| s.is_nan()) {
            return Err(Error::Numeric("NaN score".into()));
        }
        Ok(())
    }
}

/// One operating point: a trial is accepted when its score is `>= threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

/// Operating points at `-inf`, every distinct score (ascending), and `+inf`.
pub fn operating_points(scores: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    scores.check()?;
    let mut tar = scores.target.clone();
    let mut non = scores.nontarget.clone();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = tar.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push(OperatingPoint {
        threshold: f64::NEG_INFINITY,
        frr: 0.0,
        far: 1.0,
    });
    let (mut ti, mut ni) = (0usize, 0usize);
    for &t in &thresholds {
        // Targets rejected: score < t. Nontargets accepted: score >= t.
        while ti < tar.len() && tar[ti] < t {
            ti += 1;
        }
        while ni < non.len() && non[ni] < t {
            ni += 1;
        }
        points.push(OperatingPoint {
            threshold: t,
            frr: ti as f64 / nt,
            far: (non.len() - ni) as f64 / nn,
        });
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        frr: 1.0,
        far: 0.0,
    });
    Ok(points)
}

/// Crossing of two operating points' linear interpolation with `FRR = FAR`.
pub fn interpolate_crossing(a: &OperatingPoint, b: &OperatingPoint) -> f64 {
    let d0 = a.frr - a.far;
    let d1 = b.frr - b.far;
    if d1 == d0 {
        return a.frr;
    }
    let alpha = -d0 / (d1 - d0);
    a.frr + alpha * (b.frr - a.frr)
}

/// Equal error rate: FRR and FAR are linearly interpolated between adjacent
/// operating points and the crossing rate is returned.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let pts = operating_points(scores)?;
    for k in 0..pts.len() {
        let d = pts[k].frr - pts[k].far;
        if d == 0.0 {
            return Ok(pts[k].frr);
        }
        if d > 0.0 {
            // pts[0] has d = -1, so k >= 1 here.
            return Ok(interpolate_crossing(&pts[k - 1], &pts[k]));
        }
    }
    unreachable!("the +inf operating point has FRR - FAR = 1")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) || !(self.c_miss > 0.0) || !(self.c_fa > 0.0) {
            return Err(Error::Config(format!("invalid detection cost parameters {self:?}")));
        }
        Ok(())
    }

    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.p_target * self.c_miss * p_miss + (1.0 - self.p_target) * self.c_fa * p_fa
    }

    /// Cost of the better trivial system (accept all or reject all).
    pub fn normalizer(&self) -> f64 {
        (self.p_target * self.c_miss).min((1.0 - self.p_target) * self.c_fa)
    }
}

/// Minimum normalized detection cost over all operating points.
pub fn min_dcf(scores: &ScoreSet, params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let pts = operating_points(scores)?;
    let best = pts
        .iter()
        .map(|p| params.cost(p.frr, p.far))
        .fold(f64::INFINITY, f64::min);
    Ok(best / params.normalizer())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub is_target: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialList {
    pub rows: Vec<Trial>,
}

impl TrialList {
    pub fn new(rows: Vec<Trial>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &rows {
            if !seen.insert((t.enroll.as_str(), t.test.as_str())) {
                return Err(Error::Data(format!("duplicate trial {} {}", t.enroll, t.test)));
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let t = self.rows.iter().filter(|r| r.is_target).count();
        (t, self.rows.len() - t)
    }
}

pub fn format_trials(trials: &TrialList) -> String {
    let mut s = String::new();
    for t in &trials.rows {
        let kind = if t.is_target { "target" } else { "nontarget" };
        s.push_str(&format!("{}\t{}\t{kind}\n", t.enroll, t.test));
    }
    s
}

pub fn parse_trials(path: &Path, text: &str) -> Result<TrialList> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let is_target = match f.as_slice() {
            [_, _, "target"] => true,
            [_, _, "nontarget"] => false,
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: expected enroll<TAB>test<TAB>target|nontarget", i + 1),
                ))
            }
        };
        rows.push(Trial {
            enroll: f[0].to_string(),
            test: f[1].to_string(),
            is_target,
        });
    }
    TrialList::new(rows).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_trials(path: &Path) -> Result<TrialList> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(path, &text)
}

pub fn write_trials(path: &Path, trials: &TrialList) -> Result<()> {
    write_atomic(path, format_trials(trials).as_bytes())
}

/// Samples `n_target` same-speaker and `n_nontarget` different-speaker
/// unordered pairs. Target pairs are drawn round-robin over speakers so each
/// speaker contributes as evenly as its utterance count allows.
pub fn make_trials(
    records: &[UtteranceRecord],
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<TrialList> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_spk: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_spk.entry(r.speaker).or_default().push(i);
    }
    let same_total: usize = by_spk.values().map(|v| v.len() * (v.len() - 1) / 2).sum();
    let n = records.len();
    let diff_total = n * n.saturating_sub(1) / 2 - same_total;
    if n_target > same_total || n_nontarget > diff_total {
        return Err(Error::Data(format!(
            "asked for {n_target} target / {n_nontarget} nontarget trials; \
             only {same_total} / {diff_total} distinct pairs exist"
        )));
    }

    let mut per_spk: Vec<Vec<(usize, usize)>> = by_spk
        .values()
        .map(|idx| {
            let mut pairs = Vec::new();
            for a in 0..idx.len() {
                for b in a + 1..idx.len() {
                    pairs.push((idx[a], idx[b]));
                }
            }
            pairs.shuffle(&mut rng);
            pairs
        })
        .collect();
    let mut targets = Vec::with_capacity(n_target);
    'outer: while targets.len() < n_target {
        for pairs in per_spk.iter_mut() {
            if targets.len() == n_target {
                break 'outer;
            }
            if let Some(p) = pairs.pop() {
                targets.push(p);
            }
        }
    }

    let mut nontargets = Vec::with_capacity(n_nontarget);
    if n_nontarget * 2 <= diff_total {
        let mut seen = HashSet::new();
        while nontargets.len() < n_nontarget {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if records[a].speaker == records[b].speaker {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                nontargets.push(key);
            }
        }
    } else {
        let mut all = Vec::with_capacity(diff_total);
        for a in 0..n {
            for b in a + 1..n {
                if records[a].speaker != records[b].speaker {
                    all.push((a, b));
                }
            }
        }
        all.shuffle(&mut rng);
        all.truncate(n_nontarget);
        nontargets = all;
    }

    let trial = |(a, b): (usize, usize), is_target| Trial {
        enroll: records[a].utt_id.clone(),
        test: records[b].utt_id.clone(),
        is_target,
    };
    let mut rows: Vec<Trial> = targets.into_iter().map(|p| trial(p, true)).collect();
    rows.extend(nontargets.into_iter().map(|p| trial(p, false)));
    TrialList::new(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub min_dcf: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn evaluate(scores: &ScoreSet, params: &DcfParams) -> Result<MetricsReport> {
    Ok(MetricsReport {
        eer: eer(scores)?,
        min_dcf: min_dcf(scores, params)?,
        n_target: scores.target.len(),
        n_nontarget: scores.nontarget.len(),
    })
}

/// Joins scored pairs with trial labels.
pub fn score_set(trials: &TrialList, scores: &[(String, String, f64)]) -> Result<ScoreSet> {
    let lookup: BTreeMap<(&str, &str), bool> = trials
        .rows
        .iter()
        .map(|t| ((t.enroll.as_str(), t.test.as_str()), t.is_target))
        .collect();
    let mut set = ScoreSet::default();
    for (e, t, s) in scores {
        match lookup.get(&(e.as_str(), t.as_str())) {
            Some(true) => set.target.push(*s),
            Some(false) => set.nontarget.push(*s),
            None => return Err(Error::Data(format!("score for unknown trial {e} {t}"))),
        }
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTarget {
    Speaker,
    Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub train_fraction: f64,
    pub l2: f64,
    pub iters: usize,
    pub lr: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            l2: 1e-2,
            iters: 300,
            lr: 0.5,
        }
    }
}

/// Held-out accuracy of a linear softmax probe predicting `target` from the
/// embeddings, on a stratified 70/30 split drawn from `split_seed`.
pub fn probe_accuracy(emb: &EmbeddingSet, target: ProbeTarget, split_seed: u64) -> Result<f64> {
    probe_accuracy_with(emb, target, split_seed, &ProbeOptions::default())
}

pub fn probe_accuracy_with(
    emb: &EmbeddingSet,
    target: ProbeTarget,
    split_seed: u64,
    opts: &ProbeOptions,
) -> Result<f64> {
    let raw: Vec<usize> = match target {
        ProbeTarget::Speaker => emb.labels.clone(),
        ProbeTarget::Domain => emb.domains.iter().map(|d| d.index()).collect(),
    };
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in raw.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(Error::Data(format!("probe needs at least 2 label values, got {}", by_label.len())));
    }
    if let Some((l, v)) = by_label.iter().find(|(_, v)| v.len() < 10) {
        return Err(Error::Data(format!("label {l} has {} samples; probes need 10", v.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut classes = Vec::new();
    for (k, (_, idx)) in by_label.iter().enumerate() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let cut = ((idx.len() as f64 * opts.train_fraction).round() as usize).clamp(1, idx.len() - 1);
        train.extend(idx[..cut].iter().map(|&i| (i, k)));
        test.extend(idx[cut..].iter().map(|&i| (i, k)));
        classes.push(k);
    }
    let d = emb.dim();
    let c = classes.len();
    // Standardize with training statistics.
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &(i, _) in &train {
        for j in 0..d {
            mu[j] += emb.rows[i][j];
        }
    }
    mu.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &(i, _) in &train {
        for j in 0..d {
            sd[j] += (emb.rows[i][j] - mu[j]).powi(2);
        }
    }
    sd.iter_mut()
        .for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-12));
    let feat = |i: usize| -> Vec<f64> { (0..d).map(|j| (emb.rows[i][j] - mu[j]) / sd[j]).collect() };
    let xtr: Vec<(Vec<f64>, usize)> = train.iter().map(|&(i, k)| (feat(i), k)).collect();

    // Full-batch gradient descent on L2-regularized softmax regression.
    let mut w = vec![vec![0.0; d + 1]; c];
    let n = xtr.len() as f64;
    let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wk| wk[d] + wk[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..opts.iters {
        let mut grad = vec![vec![0.0; d + 1]; c];
        for (x, y) in &xtr {
            let z = logits(&w, x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..c {
                let r = e[k] / s - if k == *y { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[k][j] += r * x[j];
                }
                grad[k][d] += r;
            }
        }
        for k in 0..c {
            for j in 0..=d {
                let reg = if j < d { opts.l2 * w[k][j] } else { 0.0 };
                w[k][j] -= opts.lr * (grad[k][j] / n + reg);
            }
        }
    }
    let correct = test
        .iter()
        .filter(|&&(i, k)| {
            let z = logits(&w, &feat(i));
            let best = (0..c).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap_or(0);
            best == k
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}
