//! Verification back-end: centering, LDA, length normalization, and a
//! two-covariance Gaussian PLDA with closed-form log-likelihood ratios.

use nalgebra::{DMatrix, DVector};

use crate::corpus::Domain;
use crate::error::{Error, Result};

/// Embeddings with their speaker labels, utterance ids and domains.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub utt_ids: Vec<String>,
    pub domains: Vec<Domain>,
}

impl EmbeddingSet {
    pub fn new(
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        utt_ids: Vec<String>,
        domains: Vec<Domain>,
    ) -> Result<Self> {
        let n = rows.len();
        if labels.len() != n || utt_ids.len() != n || domains.len() != n {
            return Err(Error::Shape(format!(
                "{n} embeddings with {} labels, {} ids, {} domains",
                labels.len(),
                utt_ids.len(),
                domains.len()
            )));
        }
        if let Some(d) = rows.first().map(Vec::len) {
            if d == 0 || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Shape("embeddings must share one positive dimension".into()));
            }
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding value".into()));
        }
        Ok(Self {
            rows,
            labels,
            utt_ids,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Rows whose index satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Self {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            utt_ids: idx.iter().map(|&i| self.utt_ids[i].clone()).collect(),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
        }
    }

    /// Number of distinct labels.
    pub fn num_classes(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

/// Groups sample indices by label, in label order.
fn groups(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut map = std::collections::BTreeMap::<usize, Vec<usize>>::new();
    for (i, &l) in labels.iter().enumerate() {
        map.entry(l).or_default().push(i);
    }
    map.into_values().collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn chol_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(sym(m))
        .map(|c| sym(&c.inverse()))
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))
}

fn chol_logdet(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let c = nalgebra::Cholesky::new(sym(m))
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))?;
    Ok(2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmOptions {
    pub min_iters: usize,
    pub max_iters: usize,
    /// Stop once the log-likelihood gain falls below this.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            min_iters: 10,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// Two-covariance PLDA: `x = m + s + e`, `s ~ N(0, B)` per speaker,
/// `e ~ N(0, W)` per utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Plda {
    pub mean: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
}

/// Precomputed quantities for closed-form scoring.
#[derive(Clone, Debug)]
pub struct PldaScorer {
    mean: DVector<f64>,
    q: DMatrix<f64>,
    p: DMatrix<f64>,
    constant: f64,
}

impl Plda {
    /// Data log-likelihood of labelled vectors (already centered by `mean`
    /// inside) under the model.
    pub fn log_likelihood(&self, x: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let d = self.mean.len();
        let w_inv = chol_inverse(&self.within, "within-class covariance")?;
        let logdet_w = chol_logdet(&self.within, "within-class covariance")?;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut ll = 0.0;
        for g in groups(labels) {
            let n = g.len() as f64;
            let wnb = &self.within + &self.between * n;
            let wnb_inv = chol_inverse(&wnb, "W + nB")?;
            let logdet = (n - 1.0) * logdet_w + chol_logdet(&wnb, "W + nB")?;
            let mut sum = DVector::zeros(d);
            let mut quad = 0.0;
            for &i in &g {
                let v = DVector::from_column_slice(&x[i]) - &self.mean;
                quad += (v.transpose() * &w_inv * &v)[(0, 0)];
                sum += v;
            }
            let proj = &w_inv - &wnb_inv;
            quad -= (sum.transpose() * proj * &sum)[(0, 0)] / n;
            ll -= 0.5 * (n * d as f64 * ln2pi + logdet + quad);
        }
        Ok(ll)
    }

    /// EM fit with the mean fixed to the data mean. Returns the model and the
    /// log-likelihood before each update plus after the last one.
    pub fn fit(x: &[Vec<f64>], labels: &[usize], opts: &EmOptions) -> Result<(Self, Vec<f64>)> {
        let classes = groups(labels);
        if x.is_empty() || classes.len() < 2 {
            return Err(Error::Data("PLDA needs at least two classes".into()));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let data = to_matrix(x);
        let mean = DVector::from_iterator(d, data.column_iter().map(|c| c.sum() / n));

        // Moment initialization.
        let mut between = DMatrix::zeros(d, d);
        let mut within = DMatrix::zeros(d, d);
        let mut class_sums = Vec::with_capacity(classes.len());
        for g in &classes {
            let mut s = DVector::zeros(d);
            for &i in g {
                s += DVector::from_column_slice(&x[i]) - &mean;
            }
            let mu = &s / g.len() as f64;
            between += &mu * mu.transpose();
            for &i in g {
                let r = DVector::from_column_slice(&x[i]) - &mean - &mu;
                within += &r * r.transpose();
            }
            class_sums.push(s);
        }
        between /= classes.len() as f64;
        within /= n;
        let floor = 1e-6 * (within.trace() / d as f64).max(1e-12);
        within += DMatrix::identity(d, d) * floor;

        let mut model = Self {
            mean,
            between: sym(&between),
            within: sym(&within),
        };
        let mut history = vec![model.log_likelihood(x, labels)?];
        for it in 0..opts.max_iters {
            let mut b_acc = DMatrix::zeros(d, d);
            let mut w_acc = DMatrix::zeros(d, d);
            for (g, s) in classes.iter().zip(&class_sums) {
                let k = g.len() as f64;
                // Posterior of the speaker variable, written without B^-1.
                let m = chol_inverse(&(&model.between + &model.within / k), "B + W/n")?;
                let gain = &model.between * m;
                let s_hat = &gain * (s / k);
                let cov = sym(&(&model.between - &gain * &model.between));
                b_acc += &cov + &s_hat * s_hat.transpose();
                for &i in g {
                    let r = DVector::from_column_slice(&x[i]) - &model.mean - &s_hat;
                    w_acc += &r * r.transpose() + &cov;
                }
            }
            model.between = sym(&(b_acc / classes.len() as f64));
            model.within = sym(&(w_acc / n));
            let ll = model.log_likelihood(x, labels)?;
            let gain = ll - history.last().copied().unwrap_or(f64::NEG_INFINITY);
            history.push(ll);
            if it + 1 >= opts.min_iters && gain.abs() < opts.tol {
                break;
            }
        }
        Ok((model, history))
    }

    pub fn scorer(&self) -> Result<PldaScorer> {
        let total = &self.between + &self.within;
        let t_inv = chol_inverse(&total, "total covariance")?;
        let schur = sym(&(&total - &self.between * &t_inv * &self.between));
        let a = chol_inverse(&schur, "T - B T^-1 B")?;
        let g = sym(&(-(&t_inv * &self.between * &a)));
        let q = sym(&(&t_inv - &a));
        let constant = 0.5
            * (chol_logdet(&total, "total covariance")? - chol_logdet(&schur, "T - B T^-1 B")?);
        Ok(PldaScorer {
            mean: self.mean.clone(),
            q,
            p: -g,
            constant,
        })
    }
}

impl PldaScorer {
    /// `log p(x1, x2 | same) - log p(x1, x2 | different)`.
    pub fn score(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        let d = self.mean.len();
        if x1.len() != d || x2.len() != d {
            return Err(Error::Shape(format!(
                "PLDA of dimension {d} scoring vectors of {} and {}",
                x1.len(),
                x2.len()
            )));
        }
        let a = DVector::from_column_slice(x1) - &self.mean;
        let b = DVector::from_column_slice(x2) - &self.mean;
        let qa = a.dot(&(&self.q * &a));
        let qb = b.dot(&(&self.q * &b));
        // Average both orders of the bilinear term so the score is symmetric
        // to rounding.
        let cross = 0.5 * (a.dot(&(&self.p * &b)) + b.dot(&(&self.p * &a)));
        Ok(0.5 * (qa + qb) + cross + self.constant)
    }
}

#[derive(Clone, Debug)]
pub struct BackendModel {
    /// Training mean, subtracted before projection.
    pub mean: Vec<f64>,
    /// `d x p`, columns orthonormal under the within-class scatter.
    pub lda: DMatrix<f64>,
    pub plda: Plda,
    scorer: PldaScorer,
}

/// Training-set scatter matrices (between, within), normalized by `N`.
pub fn scatter_matrices(x: &[Vec<f64>], labels: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let data = to_matrix(x);
    let (n, d) = data.shape();
    let mean = DVector::from_iterator(d, data.column_iter().map(|c| c.sum() / n as f64));
    let mut sb = DMatrix::zeros(d, d);
    let mut sw = DMatrix::zeros(d, d);
    for g in groups(labels) {
        let mut mu = DVector::zeros(d);
        for &i in &g {
            mu += DVector::from_column_slice(&x[i]);
        }
        mu /= g.len() as f64;
        let dm = &mu - &mean;
        sb += &dm * dm.transpose() * g.len() as f64;
        for &i in &g {
            let r = DVector::from_column_slice(&x[i]) - &mu;
            sw += &r * r.transpose();
        }
    }
    (sb / n as f64, sw / n as f64)
}

/// LDA projection `d x p` from the generalized eigenproblem `Sb v = λ Sw v`,
/// with `Sw` regularized by `1e-6 · trace(Sw)/d · I`. Columns satisfy
/// `Vᵀ Sw V = I` and are ordered by decreasing eigenvalue.
pub fn lda(x: &[Vec<f64>], labels: &[usize], p: usize) -> Result<DMatrix<f64>> {
    let (sb, mut sw) = scatter_matrices(x, labels);
    let d = sw.nrows();
    let reg = 1e-6 * (sw.trace() / d as f64).max(1e-300);
    sw += DMatrix::identity(d, d) * reg;
    let chol = nalgebra::Cholesky::new(sym(&sw))
        .ok_or_else(|| Error::Numeric("within-class scatter is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular within-class factor".into()))?;
    let m = sym(&(&l_inv * &sb * l_inv.transpose()));
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut v = DMatrix::zeros(d, p);
    for (k, &j) in order.iter().take(p).enumerate() {
        let mut col = eig.eigenvectors.column(j).into_owned();
        // Fix each axis's sign so fits are reproducible.
        let pivot = col.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            col = -col;
        }
        v.set_column(k, &col);
    }
    Ok(l_inv.transpose() * v)
}

impl BackendModel {
    /// Centers, projects with LDA to `p` dims, length-normalizes, and fits
    /// PLDA by EM. Returns the model and the EM log-likelihood trace.
    pub fn fit(train: &EmbeddingSet, p: usize, opts: &EmOptions) -> Result<(Self, Vec<f64>)> {
        if train.is_empty() {
            return Err(Error::Data("no training embeddings".into()));
        }
        let classes = groups(&train.labels);
        if classes.len() < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {}", classes.len())));
        }
        if let Some(g) = classes.iter().find(|g| g.len() < 2) {
            return Err(Error::Data(format!(
                "speaker {} has a single embedding",
                train.labels[g[0]]
            )));
        }
        let d = train.dim();
        let max_p = d.min(classes.len() - 1);
        if p == 0 || p > max_p {
            return Err(Error::Dimension(format!(
                "LDA dimension {p} must lie in 1..={max_p} (embedding dim {d}, {} classes)",
                classes.len()
            )));
        }
        let n = train.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| train.rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let centered: Vec<Vec<f64>> = train
            .rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(a, b)| a - b).collect())
            .collect();
        let proj = lda(&centered, &train.labels, p)?;
        let processed: Vec<Vec<f64>> = centered
            .iter()
            .map(|c| project_normalize(&proj, c))
            .collect::<Result<_>>()?;
        let (plda, history) = Plda::fit(&processed, &train.labels, opts)?;
        let scorer = plda.scorer()?;
        Ok((
            Self {
                mean,
                lda: proj,
                plda,
                scorer,
            },
            history,
        ))
    }

    /// Rebuilds a model from stored parts.
    pub fn from_parts(mean: Vec<f64>, lda: DMatrix<f64>, plda: Plda) -> Result<Self> {
        if lda.nrows() != mean.len() || plda.mean.len() != lda.ncols() {
            return Err(Error::Shape(format!(
                "back-end parts disagree: mean {}, LDA {}x{}, PLDA {}",
                mean.len(),
                lda.nrows(),
                lda.ncols(),
                plda.mean.len()
            )));
        }
        let scorer = plda.scorer()?;
        Ok(Self {
            mean,
            lda,
            plda,
            scorer,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.lda.ncols()
    }

    /// Center, project, and length-normalize one embedding.
    pub fn transform(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "back-end expects {}-dim embeddings, got {}",
                self.mean.len(),
                e.len()
            )));
        }
        let c: Vec<f64> = e.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        project_normalize(&self.lda, &c)
    }

    /// PLDA log-likelihood ratio of two raw embeddings.
    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        self.scorer.score(&self.transform(enroll)?, &self.transform(test)?)
    }

    /// Same as [`score`](Self::score) for already transformed embeddings.
    pub fn score_transformed(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        self.scorer.score(enroll, test)
    }
}

fn project_normalize(proj: &DMatrix<f64>, centered: &[f64]) -> Result<Vec<f64>> {
    let y = proj.transpose() * DVector::from_column_slice(centered);
    let norm = y.norm();
    if !(norm > 1e-300) || !norm.is_finite() {
        return Err(Error::Numeric("embedding projects to the zero vector".into()));
    }
    Ok((y / norm).iter().copied().collect())
}

pub fn plda_score(model: &BackendModel, enroll: &[f64], test: &[f64]) -> Result<f64> {
    model.score(enroll, test)
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {}- and {}-dim vectors", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine score of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn set(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> EmbeddingSet {
        let n = rows.len();
        EmbeddingSet::new(
            rows,
            labels,
            (0..n).map(|i| format!("u{i}")).collect(),
            vec![Domain::Source; n],
        )
        .unwrap()
    }

    fn blobs(classes: usize, per: usize, d: usize, sep: f64, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            let center: Vec<f64> = (0..d).map(|_| sep * gauss(&mut rng)).collect();
            for _ in 0..per {
                rows.push(
                    center
                        .iter()
                        .map(|m| m + gauss(&mut rng))
                        .collect(),
                );
                labels.push(c);
            }
        }
        set(rows, labels)
    }

    #[test]
    fn lda_separates_two_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..200 {
                let x = 10.0 * c as f64 + gauss(&mut rng);
                let y: f64 = StandardNormal.sample(&mut rng);
                rows.push(vec![x, y]);
                labels.push(c);
            }
        }
        let proj = lda(&rows, &labels, 1).unwrap();
        let z: Vec<f64> = rows.iter().map(|r| proj[(0, 0)] * r[0] + proj[(1, 0)] * r[1]).collect();
        let mean = |c: usize| {
            (0..400).filter(|&i| labels[i] == c).map(|i| z[i]).sum::<f64>() / 200.0
        };
        let (m0, m1) = (mean(0), mean(1));
        let within: f64 = (0..400)
            .map(|i| (z[i] - if labels[i] == 0 { m0 } else { m1 }).powi(2))
            .sum::<f64>()
            / 400.0;
        assert!((m1 - m0).abs() > 5.0 * within.sqrt());
        // Vᵀ Sw V = I.
        assert!((within - 1.0).abs() < 1e-3, "{within}");
    }

    #[test]
    fn fit_errors() {
        let s = blobs(3, 4, 5, 3.0, 2);
        assert!(matches!(BackendModel::fit(&s, 3, &EmOptions::default()), Err(Error::Dimension(_))));
        let single = set(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], vec![0, 0, 1]);
        assert!(matches!(BackendModel::fit(&single, 1, &EmOptions::default()), Err(Error::Data(_))));
    }

    #[test]
    fn transform_and_scores() {
        let s = blobs(6, 10, 8, 3.0, 3);
        let (m, hist) = BackendModel::fit(&s, 5, &EmOptions::default()).unwrap();
        assert!(hist.len() >= 11);
        for w in hist.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{hist:?}");
        }
        let a = m.transform(&s.rows[0]).unwrap();
        let b = m.transform(&s.rows[15]).unwrap();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((na - 1.0).abs() < 1e-9);
        assert!((m.score_transformed(&a, &b).unwrap() - m.score_transformed(&b, &a).unwrap()).abs() < 1e-9);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(m.score_transformed(&a, &a).unwrap() > m.score_transformed(&a, &neg).unwrap());
        assert_eq!(m.score(&s.rows[0], &s.rows[15]).unwrap(), m.score_transformed(&a, &b).unwrap());
        assert!(matches!(m.transform(&m.mean.clone()), Err(Error::Numeric(_))));
        assert!(matches!(m.score_transformed(&a, &a[..2]), Err(Error::Shape(_))));
        assert!(matches!(m.score(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_between_covariance_scores_zero() {
        let plda = Plda {
            mean: DVector::zeros(3),
            between: DMatrix::zeros(3, 3),
            within: DMatrix::identity(3, 3) * 0.7,
        };
        let sc = plda.scorer().unwrap();
        for (a, b) in [([1.0, 2.0, -1.0], [0.3, 0.0, 0.5]), ([0.0, 0.0, 1.0], [5.0, -4.0, 2.0])] {
            assert_eq!(sc.score(&a, &b).unwrap(), 0.0);
        }
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_score(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-9);
        assert!(matches!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
    }
}
