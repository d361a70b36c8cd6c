//! Identity, domain, reconstruction, and adversarial losses and their
//! weighted combination.
//!
//! Each loss exists twice: a plain function over values (used for reporting
//! and as a reference) and a graph builder used in training. Batch reduction
//! is always the mean; the reconstruction error is also averaged over
//! elements, so its weight does not depend on the crop size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, Graph, Var};
use crate::model::LOGIT_CLAMP;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[sigmoid(-15), sigmoid(15)]` before logs.
pub fn prob_floor() -> f64 {
    graph::sigmoid(-LOGIT_CLAMP)
}

fn prob_ceil() -> f64 {
    graph::sigmoid(LOGIT_CLAMP)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dom: f64,
    pub lambda_adv: f64,
    pub lambda_r: f64,
    pub lambda_mi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dom: 0.5,
            lambda_adv: 0.5,
            lambda_r: 0.2,
            lambda_mi: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_dom, self.lambda_adv, self.lambda_r, self.lambda_mi];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_id: f64,
    pub l_dom: f64,
    pub l_r: f64,
    pub l_adv: f64,
    pub l_mi: f64,
}

/// Loss terms plus their weighted total; one training-log record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_id: f64,
    pub l_dom: f64,
    #[serde(rename = "l_R")]
    pub l_r: f64,
    pub l_adv: f64,
    #[serde(rename = "l_MI")]
    pub l_mi: f64,
    pub total: f64,
}

/// Compensated (Neumaier) sum, so the total does not depend on term order.
fn compensated_sum(terms: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `l_id + λ_dom l_dom + λ_adv l_adv + λ_R l_R + λ_MI l_MI`.
pub fn combine(parts: &LossParts, weights: &LossWeights) -> Result<LossReport> {
    let named = [
        ("l_id", parts.l_id),
        ("l_dom", parts.l_dom),
        ("l_R", parts.l_r),
        ("l_adv", parts.l_adv),
        ("l_MI", parts.l_mi),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v}")));
        }
    }
    let total = compensated_sum(&[
        parts.l_id,
        weights.lambda_dom * parts.l_dom,
        weights.lambda_adv * parts.l_adv,
        weights.lambda_r * parts.l_r,
        weights.lambda_mi * parts.l_mi,
    ]);
    Ok(LossReport {
        l_id: parts.l_id,
        l_dom: parts.l_dom,
        l_r: parts.l_r,
        l_adv: parts.l_adv,
        l_mi: parts.l_mi,
        total,
    })
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::Label { label, classes }),
        None => Ok(()),
    }
}

fn check_probs(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Shape(format!("{name}: empty batch")));
    }
    match p.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        Some(v) => Err(Error::Domain(format!("{name}: probability {v} outside (0, 1)"))),
        None => Ok(()),
    }
}

fn mean_ce(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.ndim() != 2 || probs.dim(0) != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "probabilities {:?} for {} labels",
            probs.shape(),
            labels.len()
        )));
    }
    check_labels(labels, probs.dim(1))?;
    let s: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.row(i)[l].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(s / labels.len() as f64)
}

/// Mean cross-entropy on the source batch plus mean cross-entropy on the
/// target batch, from class posteriors.
pub fn identity_loss(
    probs_source: &Tensor,
    labels_source: &[usize],
    probs_target: &Tensor,
    labels_target: &[usize],
) -> Result<f64> {
    Ok(mean_ce(probs_source, labels_source)? + mean_ce(probs_target, labels_target)?)
}

fn mean_bce(p: &[f64], positive: bool) -> f64 {
    let (lo, hi) = (prob_floor(), prob_ceil());
    let s: f64 = p
        .iter()
        .map(|&v| {
            let v = v.clamp(lo, hi);
            if positive {
                -v.ln()
            } else {
                -(1.0 - v).ln()
            }
        })
        .sum();
    s / p.len() as f64
}

/// `-E[log D(f_dom^s)] - E[log(1 - D(f_dom^t))]`.
pub fn domain_disc_loss(d_source: &[f64], d_target: &[f64]) -> Result<f64> {
    check_probs("d_source", d_source)?;
    check_probs("d_target", d_target)?;
    Ok(mean_bce(d_source, true) + mean_bce(d_target, false))
}

fn mean_sq_err(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs input {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// Element- and batch-mean squared error, source plus target.
pub fn reconstruction_loss(
    recon_source: &Tensor,
    source: &Tensor,
    recon_target: &Tensor,
    target: &Tensor,
) -> Result<f64> {
    Ok(mean_sq_err(recon_source, source)? + mean_sq_err(recon_target, target)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvRole {
    /// Labels source = 1, target = 0.
    Discriminator,
    /// Flipped labels (non-saturating encoder objective).
    Encoder,
}

pub fn adversarial_loss(d_source: &[f64], d_target: &[f64], role: AdvRole) -> Result<f64> {
    check_probs("d_adv_source", d_source)?;
    check_probs("d_adv_target", d_target)?;
    Ok(match role {
        AdvRole::Discriminator => mean_bce(d_source, true) + mean_bce(d_target, false),
        AdvRole::Encoder => mean_bce(d_source, false) + mean_bce(d_target, true),
    })
}

fn probs_of(g: &Graph, v: Var, name: &str) -> Result<()> {
    check_probs(name, g.value(v).data())
}

/// Graph form of the batch-mean BCE on probabilities `[B]` or `[B, 1]`.
pub fn bce_graph(g: &mut Graph, p: Var, positive: bool) -> Result<Var> {
    let p = g.clamp(p, prob_floor(), prob_ceil());
    let q = if positive { p } else { g.one_minus(p) };
    let l = g.log(q);
    let m = g.mean(l)?;
    Ok(g.neg(m))
}

/// Batch-mean cross-entropy from unnormalized logits `[B, C]`.
pub fn cross_entropy_logits(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    if g.shape(logits).first() != Some(&labels.len()) {
        return Err(Error::Shape(format!(
            "logits {:?} for {} labels",
            g.shape(logits),
            labels.len()
        )));
    }
    let lp = g.log_softmax_rows(logits)?;
    let picked = g.pick_cols(lp, labels)?;
    let m = g.mean(picked)?;
    Ok(g.neg(m))
}

/// Batch-mean cross-entropy from posteriors `[B, C]`.
pub fn cross_entropy_probs(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = g.pick_cols(probs, labels)?;
    let picked = g.clamp(picked, f64::MIN_POSITIVE, 1.0);
    let l = g.log(picked);
    let m = g.mean(l)?;
    Ok(g.neg(m))
}

pub fn identity_loss_graph(
    g: &mut Graph,
    probs_source: Var,
    labels_source: &[usize],
    probs_target: Var,
    labels_target: &[usize],
) -> Result<Var> {
    let a = cross_entropy_probs(g, probs_source, labels_source)?;
    let b = cross_entropy_probs(g, probs_target, labels_target)?;
    g.add(a, b)
}

pub fn domain_disc_loss_graph(g: &mut Graph, d_source: Var, d_target: Var) -> Result<Var> {
    probs_of(g, d_source, "d_source")?;
    probs_of(g, d_target, "d_target")?;
    let a = bce_graph(g, d_source, true)?;
    let b = bce_graph(g, d_target, false)?;
    g.add(a, b)
}

pub fn mse_graph(g: &mut Graph, recon: Var, x: Var) -> Result<Var> {
    if g.shape(recon) != g.shape(x) {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs input {:?}",
            g.shape(recon),
            g.shape(x)
        )));
    }
    let d = g.sub(recon, x)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

pub fn reconstruction_loss_graph(
    g: &mut Graph,
    recon_source: Var,
    source: Var,
    recon_target: Var,
    target: Var,
) -> Result<Var> {
    let a = mse_graph(g, recon_source, source)?;
    let b = mse_graph(g, recon_target, target)?;
    g.add(a, b)
}

pub fn adversarial_loss_graph(g: &mut Graph, d_source: Var, d_target: Var, role: AdvRole) -> Result<Var> {
    probs_of(g, d_source, "d_adv_source")?;
    probs_of(g, d_target, "d_adv_target")?;
    let source_positive = role == AdvRole::Discriminator;
    let a = bce_graph(g, d_source, source_positive)?;
    let b = bce_graph(g, d_target, !source_positive)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn identity_loss_cases() {
        let one_hot = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(identity_loss(&one_hot, &[0, 1], &one_hot, &[0, 1]).unwrap(), 0.0);
        let uniform = Tensor::full(vec![3, 10], 0.1);
        let l = identity_loss(&uniform, &[0, 5, 9], &uniform, &[1, 2, 3]).unwrap();
        assert!((l - 2.0 * 10f64.ln()).abs() < 1e-12);
        assert!((l - 4.6052).abs() < 1e-4);
        let err = identity_loss(&uniform, &[0, 10, 1], &uniform, &[1, 2, 3]).unwrap_err();
        assert!(matches!(err, Error::Label { label: 10, classes: 10 }));
    }

    #[test]
    fn domain_loss_cases() {
        let eps = 1e-9;
        assert!(domain_disc_loss(&[1.0 - eps; 4], &[eps; 4]).unwrap() < 1e-6);
        let half = domain_disc_loss(&[0.5; 3], &[0.5; 3]).unwrap();
        assert!((half - 2.0 * LN_2).abs() < 1e-12);
        let clamped = domain_disc_loss(&[0.5], &[1.0 - eps]).unwrap() - LN_2;
        assert!((clamped - 15.0).abs() < 1e-5, "{clamped}");
        assert!(matches!(domain_disc_loss(&[1.0], &[0.5]), Err(Error::Domain(_))));
        assert!(matches!(domain_disc_loss(&[0.5], &[-0.1]), Err(Error::Domain(_))));
    }

    #[test]
    fn reconstruction_cases() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64 * 0.1).collect()).unwrap();
        assert_eq!(reconstruction_loss(&x, &x, &x, &x).unwrap(), 0.0);
        let c = 0.7;
        let shifted = x.map(|v| v + c);
        let l = reconstruction_loss(&shifted, &x, &shifted, &x).unwrap();
        assert!((l - 2.0 * c * c).abs() < 1e-12);
        let other = Tensor::zeros(vec![2, 4, 3]);
        assert!(matches!(reconstruction_loss(&x, &other, &x, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn adversarial_roles() {
        let eps = 1e-12;
        let s = [1.0 - eps; 3];
        let t = [eps; 3];
        assert!(adversarial_loss(&s, &t, AdvRole::Discriminator).unwrap() < 1e-5);
        let flipped = adversarial_loss(&s, &t, AdvRole::Encoder).unwrap();
        assert!((flipped - 2.0 * graph::softplus(LOGIT_CLAMP)).abs() < 1e-9);
        for role in [AdvRole::Discriminator, AdvRole::Encoder] {
            let l = adversarial_loss(&[0.5; 2], &[0.5; 2], role).unwrap();
            assert!((l - 2.0 * LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_contract() {
        let w = LossWeights::default();
        assert_eq!(combine(&LossParts::default(), &w).unwrap().total, 0.0);
        let ones = LossParts {
            l_id: 1.0,
            l_dom: 1.0,
            l_r: 1.0,
            l_adv: 1.0,
            l_mi: 1.0,
        };
        assert_eq!(combine(&ones, &w).unwrap().total, 2.4);
        let bad = LossParts {
            l_mi: f64::NAN,
            ..ones
        };
        match combine(&bad, &w) {
            Err(Error::Numeric(m)) => assert!(m.contains("l_MI")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn combine_is_linear_in_each_part() {
        let w = LossWeights::default();
        let base = LossParts {
            l_id: 0.3,
            l_dom: 1.1,
            l_r: 0.25,
            l_adv: 1.4,
            l_mi: -1.2,
        };
        let t0 = combine(&base, &w).unwrap().total;
        let doubled = LossParts {
            l_adv: 2.0 * base.l_adv,
            ..base
        };
        let t1 = combine(&doubled, &w).unwrap().total;
        assert!((t1 - t0 - w.lambda_adv * base.l_adv).abs() < 1e-12);
    }

    #[test]
    fn graph_versions_match_values() {
        let mut g = Graph::new();
        let ps = g.input(Tensor::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap());
        let pt = g.input(Tensor::from_rows(&[vec![0.1, 0.9]]).unwrap());
        let l = identity_loss_graph(&mut g, ps, &[1, 0], pt, &[0]).unwrap();
        let want = identity_loss(g.value(ps), &[1, 0], g.value(pt), &[0]).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);

        let ds = g.input(Tensor::vector(vec![0.3, 0.9]));
        let dt = g.input(Tensor::vector(vec![0.2, 0.7]));
        let l = domain_disc_loss_graph(&mut g, ds, dt).unwrap();
        let want = domain_disc_loss(&[0.3, 0.9], &[0.2, 0.7]).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);
        let l = adversarial_loss_graph(&mut g, ds, dt, AdvRole::Encoder).unwrap();
        let want = adversarial_loss(&[0.3, 0.9], &[0.2, 0.7], AdvRole::Encoder).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);

        let logits = g.input(Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap());
        let ce = cross_entropy_logits(&mut g, logits, &[2]).unwrap();
        let probs = g.softmax_rows(logits).unwrap();
        let ce2 = cross_entropy_probs(&mut g, probs, &[2]).unwrap();
        assert!((g.value(ce).item() - g.value(ce2).item()).abs() < 1e-12);
    }
}
