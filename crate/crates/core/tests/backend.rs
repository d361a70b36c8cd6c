use deaan::backend::{BackendModel, EmOptions, EmbeddingSet, Plda};
use deaan::corpus::Domain;
use deaan::metrics::{eer, ScoreSet};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * floor
}

/// Draws from a two-covariance model: `x = m + y_speaker + e`.
fn sample_plda(
    rng: &mut ChaCha8Rng,
    mean: &DVector<f64>,
    between: &DMatrix<f64>,
    within: &DMatrix<f64>,
    classes: usize,
    per_class: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = mean.len();
    let lb = between.clone().cholesky().unwrap().l();
    let lw = within.clone().cholesky().unwrap().l();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        let y = &lb * gauss(rng, d);
        for _ in 0..per_class {
            let x = mean + &y + &lw * gauss(rng, d);
            rows.push(x.iter().copied().collect());
            labels.push(c);
        }
    }
    (rows, labels)
}

#[test]
fn em_recovers_known_covariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let d = 10;
    let mean = gauss(&mut rng, d) * 2.0;
    let between = random_psd(&mut rng, d, 0.5);
    let within = random_psd(&mut rng, d, 0.2) * 0.5;
    let (rows, labels) = sample_plda(&mut rng, &mean, &between, &within, 50, 200);
    assert_eq!(rows.len(), 10_000);
    let (plda, ll) = Plda::fit(&rows, &labels, &EmOptions::default()).unwrap();
    for w in ll.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
    }
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    assert!(rel(plda.between.trace(), between.trace()) < 0.10, "{} vs {}", plda.between.trace(), between.trace());
    assert!(rel(plda.within.trace(), within.trace()) < 0.10, "{} vs {}", plda.within.trace(), within.trace());
    assert!((plda.mean.clone() - &mean).norm() < 0.2 * mean.norm());
}

fn random_set(seed: u64, classes: usize, per_class: usize, d: usize) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let between = random_psd(&mut rng, d, 1.0);
    let within = random_psd(&mut rng, d, 0.3) * 0.3;
    let (rows, labels) = sample_plda(&mut rng, &DVector::zeros(d), &between, &within, classes, per_class);
    let n = rows.len();
    EmbeddingSet::new(rows, labels, (0..n).map(|i| format!("u{i}")).collect(), vec![Domain::Source; n]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn plda_scores_are_symmetric_and_prefer_identity(seed in 0u64..10_000) {
        let set = random_set(seed, 8, 6, 6);
        let (m, _) = BackendModel::fit(&set, 4, &EmOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        for _ in 0..5 {
            let a = gauss(&mut rng, 6);
            let b = gauss(&mut rng, 6);
            let (a, b): (Vec<f64>, Vec<f64>) = (a.iter().copied().collect(), b.iter().copied().collect());
            let (ab, ba) = (m.score(&a, &b).unwrap(), m.score(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() <= 1e-9 * ab.abs().max(1.0));
            let x = m.transform(&a).unwrap();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert!(m.score_transformed(&x, &x).unwrap() > m.score_transformed(&x, &neg).unwrap());
            prop_assert!((x.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
    }
}

/// All pairs of rows as target and nontarget scores.
fn all_pair_scores(m: &BackendModel, set: &EmbeddingSet) -> ScoreSet {
    let (mut tar, mut non) = (Vec::new(), Vec::new());
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            let s = m.score(&set.rows[i], &set.rows[j]).unwrap();
            if set.labels[i] == set.labels[j] { tar.push(s) } else { non.push(s) }
        }
    }
    ScoreSet::new(tar, non)
}

#[test]
fn eer_is_unchanged_by_a_global_rotation() {
    let d = 8;
    let train = random_set(3, 12, 8, d);
    let test = random_set(4, 6, 5, d);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng)).qr().q();
    let rotate = |s: &EmbeddingSet| {
        let rows = s.rows.iter().map(|r| (&q * DVector::<f64>::from_column_slice(r)).iter().copied().collect()).collect();
        EmbeddingSet::new(rows, s.labels.clone(), s.utt_ids.clone(), s.domains.clone()).unwrap()
    };
    let opts = EmOptions::default();
    let (plain, _) = BackendModel::fit(&train, 6, &opts).unwrap();
    let (rotated, _) = BackendModel::fit(&rotate(&train), 6, &opts).unwrap();
    let e1 = eer(&all_pair_scores(&plain, &test)).unwrap();
    let e2 = eer(&all_pair_scores(&rotated, &rotate(&test))).unwrap();
    assert!(e1 < 0.5);
    assert!((e1 - e2).abs() < 1e-9, "{e1} vs {e2}");
}
