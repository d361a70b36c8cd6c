//! Neural mutual-information estimation between `f_id` and `f_dom`.
//!
//! The statistics network `T` scores pairs drawn from the joint
//! (same-utterance pairs) and from the product of marginals (pairs with
//! `f_dom` permuted across the batch). The Donsker-Varadhan bound and its
//! Jensen-Shannon surrogate turn those scores into estimates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, Graph, Var};
use crate::model::{grl, StatNet};
use crate::nn::{Ctx, ParamStore};
use crate::optim::{collect_grads, Adam, AdamConfig};
use crate::tensor::Tensor;

pub use crate::graph::softplus;

fn nonempty(name: &str, t: &[f64]) -> Result<()> {
    if t.is_empty() {
        Err(Error::Shape(format!("{name}: empty batch")))
    } else {
        Ok(())
    }
}

/// `mean(T_joint) - log mean(exp(T_marg))`.
/// Mean anchored at the first element; exact when every value is equal.
fn anchored_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut xs = xs.peekable();
    let x0 = *xs.peek().expect("caller checks non-empty");
    let (n, dev) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + (x - x0)));
    x0 + dev / n as f64
}

pub fn dv_estimate(t_joint: &[f64], t_marg: &[f64]) -> Result<f64> {
    nonempty("t_joint", t_joint)?;
    nonempty("t_marg", t_marg)?;
    let mean = anchored_mean(t_joint.iter().copied());
    Ok(mean - (graph::logsumexp(t_marg) - (t_marg.len() as f64).ln()))
}

/// `mean(-sp(-T_joint)) - mean(sp(T_marg))`.
pub fn jsd_estimate(t_joint: &[f64], t_marg: &[f64]) -> Result<f64> {
    nonempty("t_joint", t_joint)?;
    nonempty("t_marg", t_marg)?;
    let a = anchored_mean(t_joint.iter().map(|&t| -softplus(-t)));
    let b = anchored_mean(t_marg.iter().map(|&t| softplus(t)));
    Ok(a - b)
}

pub fn dv_graph(g: &mut Graph, t_joint: Var, t_marg: Var) -> Result<Var> {
    let n = g.value(t_marg).len();
    let mj = g.mean(t_joint)?;
    let lse = g.logsumexp(t_marg)?;
    let d = g.sub(mj, lse)?;
    Ok(g.add_scalar(d, (n as f64).ln()))
}

pub fn jsd_graph(g: &mut Graph, t_joint: Var, t_marg: Var) -> Result<Var> {
    let nj = g.neg(t_joint);
    let spj = g.softplus(nj);
    let a = g.mean(spj)?;
    let spm = g.softplus(t_marg);
    let b = g.mean(spm)?;
    let s = g.add(a, b)?;
    Ok(g.neg(s))
}

/// A uniformly random cyclic permutation of `0..n` (no fixed points).
pub fn derangement(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Shuffle(n));
    }
    let mut p: Vec<usize> = (0..n).collect();
    // Sattolo's algorithm.
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}

/// Joint pairs `(f_id_i, f_dom_i)` and marginal pairs `(f_id_i, f_dom_perm[i])`.
#[derive(Clone, Debug)]
pub struct MiBatch {
    pub f_id: Var,
    pub f_dom: Var,
    pub perm: Vec<usize>,
}

impl MiBatch {
    pub fn new(g: &Graph, f_id: Var, f_dom: Var, rng: &mut impl Rng) -> Result<Self> {
        let b = g.shape(f_id)[0];
        if g.shape(f_dom)[0] != b {
            return Err(Error::Shape(format!(
                "f_id batch {} vs f_dom batch {}",
                b,
                g.shape(f_dom)[0]
            )));
        }
        Ok(Self {
            f_id,
            f_dom,
            perm: derangement(b, rng)?,
        })
    }
}

/// Statistics-network outputs on the joint and marginal pairs of a batch,
/// with `grl_lambda` reversal applied to the encoder-side inputs.
fn stat_outputs(cx: &mut Ctx, net: &StatNet, batch: &MiBatch, grl_lambda: f64) -> Result<(Var, Var)> {
    let a = grl(&mut cx.g, batch.f_id, grl_lambda)?;
    let b = grl(&mut cx.g, batch.f_dom, grl_lambda)?;
    let b_marg = cx.g.gather_rows(b, &batch.perm)?;
    let tj = net.forward(cx, a, b)?;
    let tm = net.forward(cx, a, b_marg)?;
    Ok((tj, tm))
}

/// Sum of the JSD estimates of both domains.
///
/// The returned value is the estimate itself. Its gradient is reversed
/// before the statistics network, so descending on `+mi_loss` makes `T`
/// ascend the estimate, while the encoder inputs (reversed a second time and
/// scaled by `grl_lambda`) descend it.
pub fn mi_loss(
    cx: &mut Ctx,
    net: &StatNet,
    source: &MiBatch,
    target: &MiBatch,
    grl_lambda: f64,
) -> Result<Var> {
    let mut total = None;
    for batch in [source, target] {
        let (tj, tm) = stat_outputs(cx, net, batch, grl_lambda)?;
        let est = jsd_graph(&mut cx.g, tj, tm)?;
        total = Some(match total {
            None => est,
            Some(t) => cx.g.add(t, est)?,
        });
    }
    let total = total.expect("two domains");
    Ok(cx.g.scale_grad(total, -1.0))
}

/// `-½ ln(1 - ρ²)`, the mutual information of a standard bivariate Gaussian.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Dv,
    Jsd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiBenchConfig {
    pub samples: usize,
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MiBenchConfig {
    fn default() -> Self {
        Self {
            samples: 50_000,
            steps: 1500,
            batch: 512,
            hidden: 64,
            lr: 2e-3,
            seed: 11,
        }
    }
}

/// `n` draws `(x, z)` with unit variances and correlation `rho`.
pub fn correlated_gaussians(n: usize, rho: f64, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let s = (1.0 - rho * rho).sqrt();
    let mut xs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = StandardNormal.sample(rng);
        let e: f64 = StandardNormal.sample(rng);
        xs.push(x);
        zs.push(rho * x + s * e);
    }
    (xs, zs)
}

fn column(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::new(vec![n, 1], v).expect("column shape")
}

/// Statistics-network outputs on joint and deranged pairs.
fn score_pairs(
    net: &StatNet,
    store: &ParamStore,
    xs: &[f64],
    zs: &[f64],
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let perm = derangement(xs.len(), rng)?;
    let mut cx = Ctx::new(store, false);
    let x = cx.g.constant(column(xs.to_vec()));
    let z = cx.g.constant(column(zs.to_vec()));
    let zm = cx.g.gather_rows(z, &perm)?;
    let tj = net.forward(&mut cx, x, z)?;
    let tm = net.forward(&mut cx, x, zm)?;
    Ok((cx.g.value(tj).data().to_vec(), cx.g.value(tm).data().to_vec()))
}

/// Trains a fresh statistics network to maximize `objective` on `cfg.samples`
/// draws at correlation `rho` and returns the estimate on an independent set
/// of the same size.
pub fn trained_estimate(rho: f64, objective: Objective, cfg: &MiBenchConfig) -> Result<f64> {
    let tag = match objective {
        Objective::Dv => 1u64,
        Objective::Jsd => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (rho.to_bits().rotate_left(17)) ^ tag);
    let (xs, zs) = correlated_gaussians(cfg.samples, rho, &mut rng);
    let net = StatNet::new("t_theta", 1, 1, cfg.hidden);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng);
    let mut adam = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    let batch = cfg.batch.min(cfg.samples);
    let mut cursor = cfg.samples;
    for _ in 0..cfg.steps {
        if cursor + batch > cfg.samples {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let bx: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
        let bz: Vec<f64> = idx.iter().map(|&i| zs[i]).collect();
        let perm = derangement(batch, &mut rng)?;
        let mut cx = Ctx::new(&store, true);
        let x = cx.g.constant(column(bx));
        let z = cx.g.constant(column(bz));
        let zm = cx.g.gather_rows(z, &perm)?;
        let tj = net.forward(&mut cx, x, z)?;
        let tm = net.forward(&mut cx, x, zm)?;
        let est = match objective {
            Objective::Dv => dv_graph(&mut cx.g, tj, tm)?,
            Objective::Jsd => jsd_graph(&mut cx.g, tj, tm)?,
        };
        let loss = cx.g.neg(est);
        let grads = collect_grads(&cx.g.backward(loss)?);
        drop(cx);
        adam.step(&mut store, &grads, cfg.lr, |_| true);
    }
    let (ex, ez) = correlated_gaussians(cfg.samples, rho, &mut rng);
    let (tj, tm) = score_pairs(&net, &store, &ex, &ez, &mut rng)?;
    match objective {
        Objective::Dv => dv_estimate(&tj, &tm),
        Objective::Jsd => jsd_estimate(&tj, &tm),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiBenchRow {
    pub rho: f64,
    pub closed_form: f64,
    pub dv: f64,
    pub jsd: f64,
}

/// Trained DV and JSD estimates for each correlation.
pub fn mi_bench(rhos: &[f64], cfg: &MiBenchConfig) -> Result<Vec<MiBenchRow>> {
    rhos.iter()
        .map(|&rho| {
            if !(rho.abs() < 1.0) {
                return Err(Error::Config(format!("correlation must lie in (-1, 1), got {rho}")));
            }
            Ok(MiBenchRow {
                rho,
                closed_form: gaussian_mi(rho),
                dv: trained_estimate(rho, Objective::Dv, cfg)?,
                jsd: trained_estimate(rho, Objective::Jsd, cfg)?,
            })
        })
        .collect()
}

pub fn format_mi_bench_csv(rows: &[MiBenchRow]) -> String {
    let mut s = String::from("rho,closed_form,dv,jsd\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.rho, r.closed_form, r.dv, r.jsd));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn softplus_cases() {
        assert!((softplus(0.0) - LN_2).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        for z in [-30.0, -2.5, 0.3, 7.0, 40.0] {
            assert!((softplus(z) - softplus(-z) - z).abs() < 1e-9);
        }
    }

    #[test]
    fn estimators_at_constant_statistics() {
        let zeros = vec![0.0; 1000];
        assert_eq!(dv_estimate(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(jsd_estimate(&zeros, &zeros).unwrap(), -2.0 * LN_2);
        for c in [-5.0, 0.0, 5.0] {
            let t = vec![c; 5];
            assert!(dv_estimate(&t, &t).unwrap().abs() < 1e-6);
        }
        assert!(matches!(dv_estimate(&[], &[1.0]), Err(Error::Shape(_))));
        assert!(matches!(jsd_estimate(&[1.0], &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn dv_shift_invariance() {
        let tj = [0.3, -1.2, 2.0, 0.7];
        let tm = [1.1, -0.4, 0.2, -2.0, 0.5];
        let base = dv_estimate(&tj, &tm).unwrap();
        for c in [-5.0, 0.0, 5.0] {
            let a: Vec<f64> = tj.iter().map(|v| v + c).collect();
            let b: Vec<f64> = tm.iter().map(|v| v + c).collect();
            assert!((dv_estimate(&a, &b).unwrap() - base).abs() < 1e-6);
        }
    }

    #[test]
    fn graph_estimators_match_values() {
        let tj = vec![0.3, -1.2, 2.0];
        let tm = vec![1.1, -0.4, 0.2];
        let mut g = Graph::new();
        let a = g.input(column(tj.clone()));
        let b = g.input(column(tm.clone()));
        let dv = dv_graph(&mut g, a, b).unwrap();
        let js = jsd_graph(&mut g, a, b).unwrap();
        assert!((g.value(dv).item() - dv_estimate(&tj, &tm).unwrap()).abs() < 1e-12);
        assert!((g.value(js).item() - jsd_estimate(&tj, &tm).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..40 {
            let p = derangement(n, &mut rng).unwrap();
            let mut seen = vec![false; n];
            for (i, &j) in p.iter().enumerate() {
                assert_ne!(i, j);
                seen[j] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
        assert!(matches!(derangement(1, &mut rng), Err(Error::Shuffle(1))));
    }
}
