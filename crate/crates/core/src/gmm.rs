//! Gaussian mixture fitting by expectation-maximisation, fully in the log
//! domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{argmax, log_sum_exp, Scalar};

/// Components whose total responsibility falls below this are re-seeded.
const EMPTY_COMPONENT_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovType {
    #[default]
    Diagonal,
    Full,
}

/// Per-component covariance: a diagonal, or a full `D × D` row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "values", rename_all = "lowercase", bound = "")]
pub enum Covariance<T: Scalar> {
    Diagonal(Vec<T>),
    Full(Vec<T>),
}

impl<T: Scalar> Covariance<T> {
    pub fn identity(dim: usize, cov_type: CovType) -> Self {
        match cov_type {
            CovType::Diagonal => Covariance::Diagonal(vec![T::one(); dim]),
            CovType::Full => {
                let mut m = vec![T::zero(); dim * dim];
                for i in 0..dim {
                    m[i * dim + i] = T::one();
                }
                Covariance::Full(m)
            }
        }
    }

    /// Diagonal entries of the covariance.
    pub fn diagonal(&self) -> Vec<T> {
        match self {
            Covariance::Diagonal(d) => d.clone(),
            Covariance::Full(m) => {
                let dim = (m.len() as f64).sqrt() as usize;
                (0..dim).map(|i| m[i * dim + i]).collect()
            }
        }
    }
}

/// Normalising constant and whitening data for one component.
enum Prepared<T> {
    Diagonal {
        inv_var: Vec<T>,
        log_norm: T,
    },
    Full {
        chol: Vec<T>,
        dim: usize,
        log_norm: T,
    },
}

fn cholesky<T: Scalar>(m: &[T], dim: usize) -> Result<Vec<T>> {
    let mut l = vec![T::zero(); dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = m[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if !(s > T::zero()) {
                    return Err(Error::Domain("covariance is not positive definite".into()));
                }
                l[i * dim + i] = s.sqrt();
            } else {
                l[i * dim + j] = s / l[j * dim + j];
            }
        }
    }
    Ok(l)
}

fn prepare<T: Scalar>(cov: &Covariance<T>, dim: usize) -> Result<Prepared<T>> {
    let log_2pi = T::of(std::f64::consts::TAU.ln());
    let half = T::of(0.5);
    match cov {
        Covariance::Diagonal(d) => {
            if d.len() != dim {
                return Err(Error::InvalidArgument(
                    "covariance dimension mismatch".into(),
                ));
            }
            if d.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
                return Err(Error::Domain("covariance is not positive definite".into()));
            }
            let log_det: T = d.iter().map(|v| v.ln()).sum();
            Ok(Prepared::Diagonal {
                inv_var: d.iter().map(|&v| T::one() / v).collect(),
                log_norm: -half * (T::of_usize(dim) * log_2pi + log_det),
            })
        }
        Covariance::Full(m) => {
            if m.len() != dim * dim {
                return Err(Error::InvalidArgument(
                    "covariance dimension mismatch".into(),
                ));
            }
            let chol = cholesky(m, dim)?;
            let log_det: T = (0..dim).map(|i| chol[i * dim + i].ln()).sum::<T>() * T::of(2.0);
            Ok(Prepared::Full {
                chol,
                dim,
                log_norm: -half * (T::of_usize(dim) * log_2pi + log_det),
            })
        }
    }
}

impl<T: Scalar> Prepared<T> {
    fn log_pdf(&self, z: &[T], mean: &[T]) -> T {
        let half = T::of(0.5);
        match self {
            Prepared::Diagonal { inv_var, log_norm } => {
                let maha: T = z
                    .iter()
                    .zip(mean)
                    .zip(inv_var)
                    .map(|((&x, &m), &iv)| (x - m) * (x - m) * iv)
                    .sum();
                *log_norm - half * maha
            }
            Prepared::Full {
                chol,
                dim,
                log_norm,
            } => {
                // forward substitution L y = z - mean
                let mut y = vec![T::zero(); *dim];
                for i in 0..*dim {
                    let mut s = z[i] - mean[i];
                    for k in 0..i {
                        s -= chol[i * dim + k] * y[k];
                    }
                    y[i] = s / chol[i * dim + i];
                }
                let maha: T = y.iter().map(|&v| v * v).sum();
                *log_norm - half * maha
            }
        }
    }
}

/// Exact multivariate normal log-density.
pub fn log_gaussian_pdf<T: Scalar>(z: &[T], mean: &[T], cov: &Covariance<T>) -> Result<T> {
    if z.len() != mean.len() {
        return Err(Error::InvalidArgument(
            "point and mean differ in dimension".into(),
        ));
    }
    Ok(prepare(cov, z.len())?.log_pdf(z, mean))
}

/// Mixture parameters without fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GmmParams<T: Scalar> {
    pub priors: Vec<T>,
    pub means: Vec<Vec<T>>,
    pub covariances: Vec<Covariance<T>>,
}

/// A fitted Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GmmModel<T: Scalar> {
    pub priors: Vec<T>,
    pub means: Vec<Vec<T>>,
    pub covariances: Vec<Covariance<T>>,
    pub cov_type: CovType,
    /// Floor added to every covariance diagonal.
    pub reg: T,
    /// Total data log-likelihood at every EM iteration.
    pub log_likelihood_trace: Vec<T>,
    pub converged: bool,
}

impl<T: Scalar> GmmModel<T> {
    pub fn from_params(params: GmmParams<T>, cov_type: CovType, reg: T) -> Self {
        GmmModel {
            priors: params.priors,
            means: params.means,
            covariances: params.covariances,
            cov_type,
            reg,
            log_likelihood_trace: Vec::new(),
            converged: false,
        }
    }

    pub fn n_components(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn final_log_likelihood(&self) -> Option<T> {
        self.log_likelihood_trace.last().copied()
    }

    fn set_params(&mut self, p: GmmParams<T>) {
        self.priors = p.priors;
        self.means = p.means;
        self.covariances = p.covariances;
    }
}

/// Row-stochastic membership matrix (`n × k`, row-major) with the per-sample
/// log-likelihood it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities<T> {
    pub n_samples: usize,
    pub n_components: usize,
    pub values: Vec<T>,
    pub sample_log_likelihood: Vec<T>,
}

impl<T: Scalar> Responsibilities<T> {
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument(
                "responsibility rows differ in length".into(),
            ));
        }
        Ok(Responsibilities {
            n_samples: rows.len(),
            n_components: k,
            values: rows.concat(),
            sample_log_likelihood: vec![T::zero(); rows.len()],
        })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.n_components..(i + 1) * self.n_components]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.n_components.max(1))
    }

    pub fn total_log_likelihood(&self) -> T {
        self.sample_log_likelihood.iter().copied().sum()
    }

    /// Argmax per row; ties go to the lowest component index.
    pub fn hard_assignments(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }
}

fn check_data<T: Scalar>(data: &[Vec<T>], dim: usize) -> Result<()> {
    for (i, z) in data.iter().enumerate() {
        if z.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has dimension {}, expected {dim}",
                z.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample {i} is not finite")));
        }
    }
    Ok(())
}

/// Posterior component memberships, computed with log-sum-exp.
pub fn e_step<T: Scalar>(model: &GmmModel<T>, data: &[Vec<T>]) -> Result<Responsibilities<T>> {
    let dim = model.dim();
    check_data(data, dim)?;
    let prepared = model
        .covariances
        .iter()
        .map(|c| prepare(c, dim))
        .collect::<Result<Vec<_>>>()?;
    let log_priors: Vec<T> = model.priors.iter().map(|p| p.ln()).collect();
    let k = model.n_components();
    let rows: Vec<(Vec<T>, T)> = data
        .par_iter()
        .map(|z| {
            let logs: Vec<T> = (0..k)
                .map(|j| log_priors[j] + prepared[j].log_pdf(z, &model.means[j]))
                .collect();
            let lse = log_sum_exp(&logs);
            (logs.into_iter().map(|l| (l - lse).exp()).collect(), lse)
        })
        .collect();
    let mut values = Vec::with_capacity(data.len() * k);
    let mut sample_ll = Vec::with_capacity(data.len());
    for (i, (row, lse)) in rows.into_iter().enumerate() {
        if !lse.is_finite() {
            return Err(Error::Degenerate(format!(
                "sample {i} has zero density under every component"
            )));
        }
        values.extend(row);
        sample_ll.push(lse);
    }
    Ok(Responsibilities {
        n_samples: data.len(),
        n_components: k,
        values,
        sample_log_likelihood: sample_ll,
    })
}

fn global_variance<T: Scalar>(data: &[Vec<T>], dim: usize) -> Vec<T> {
    let n = T::of_usize(data.len());
    let mean: Vec<T> = (0..dim)
        .map(|d| data.iter().map(|z| z[d]).sum::<T>() / n)
        .collect();
    (0..dim)
        .map(|d| {
            data.iter()
                .map(|z| (z[d] - mean[d]) * (z[d] - mean[d]))
                .sum::<T>()
                / n
        })
        .collect()
}

/// Weighted maximum-likelihood update of priors, means and covariances, with
/// `reg` added to every covariance diagonal. Components with negligible mass
/// are re-seeded at the worst-explained samples.
pub fn m_step<T: Scalar>(
    data: &[Vec<T>],
    resp: &Responsibilities<T>,
    cov_type: CovType,
    reg: T,
) -> Result<GmmParams<T>> {
    let n = data.len();
    let k = resp.n_components;
    if n == 0 || k == 0 || resp.n_samples != n {
        return Err(Error::InvalidArgument(
            "m-step needs matching, non-empty data and responsibilities".into(),
        ));
    }
    let dim = data[0].len();
    check_data(data, dim)?;

    let mut mass = vec![T::zero(); k];
    let mut means = vec![vec![T::zero(); dim]; k];
    for (z, row) in data.iter().zip(resp.rows()) {
        for j in 0..k {
            let r = row[j];
            if r == T::zero() {
                continue;
            }
            mass[j] += r;
            for (m, &x) in means[j].iter_mut().zip(z) {
                *m += r * x;
            }
        }
    }

    // worst-explained samples first, for re-seeding empty components
    let mut worst: Vec<usize> = (0..n).collect();
    worst.sort_by(|&a, &b| {
        resp.sample_log_likelihood[a]
            .partial_cmp(&resp.sample_log_likelihood[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut worst = worst.into_iter();
    let mut reseeded = vec![false; k];
    let floor_var = global_variance(data, dim);

    let covariances = (0..k)
        .map(|j| {
            if mass[j].as_f64() < EMPTY_COMPONENT_MASS {
                let s = worst.next().unwrap_or(0);
                means[j] = data[s].clone();
                reseeded[j] = true;
                let diag: Vec<T> = floor_var.iter().map(|&v| v + reg).collect();
                return match cov_type {
                    CovType::Diagonal => Covariance::Diagonal(diag),
                    CovType::Full => {
                        let mut m = vec![T::zero(); dim * dim];
                        for (d, v) in diag.into_iter().enumerate() {
                            m[d * dim + d] = v;
                        }
                        Covariance::Full(m)
                    }
                };
            }
            for m in &mut means[j] {
                *m /= mass[j];
            }
            let mu = &means[j];
            match cov_type {
                CovType::Diagonal => {
                    let mut var = vec![T::zero(); dim];
                    for (z, row) in data.iter().zip(resp.rows()) {
                        let r = row[j];
                        if r == T::zero() {
                            continue;
                        }
                        for d in 0..dim {
                            let c = z[d] - mu[d];
                            var[d] += r * c * c;
                        }
                    }
                    Covariance::Diagonal(var.into_iter().map(|v| v / mass[j] + reg).collect())
                }
                CovType::Full => {
                    let mut m = vec![T::zero(); dim * dim];
                    let mut c = vec![T::zero(); dim];
                    for (z, row) in data.iter().zip(resp.rows()) {
                        let r = row[j];
                        if r == T::zero() {
                            continue;
                        }
                        for d in 0..dim {
                            c[d] = z[d] - mu[d];
                        }
                        for a in 0..dim {
                            for b in 0..=a {
                                m[a * dim + b] += r * c[a] * c[b];
                            }
                        }
                    }
                    for a in 0..dim {
                        for b in 0..=a {
                            let v = m[a * dim + b] / mass[j];
                            m[a * dim + b] = v;
                            m[b * dim + a] = v;
                        }
                        m[a * dim + a] += reg;
                    }
                    Covariance::Full(m)
                }
            }
        })
        .collect();

    let n_t = T::of_usize(n);
    let raw: Vec<T> = (0..k)
        .map(|j| {
            if reseeded[j] {
                T::one() / n_t
            } else {
                mass[j] / n_t
            }
        })
        .collect();
    let total: T = raw.iter().copied().sum();
    let priors = raw.into_iter().map(|p| p / total).collect();
    Ok(GmmParams {
        priors,
        means,
        covariances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once `|ΔLL| < tol · |LL|`.
    pub tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
    pub cov_type: CovType,
    pub reg: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 500,
            tol: 1e-6,
            n_restarts: 5,
            seed: 0,
            cov_type: CovType::Diagonal,
            reg: 1e-6,
        }
    }
}

/// k-means++ seeding: the first centre uniformly, the rest with probability
/// proportional to squared distance from the nearest chosen centre.
fn kmeanspp<T: Scalar>(data: &[Vec<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = data.len();
    let sq = |a: &[T], b: &[T]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| ((x - y) * (x - y)).as_f64())
            .sum()
    };
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = data.iter().map(|z| sq(z, &data[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            if d2[pick] == 0.0 {
                // rounding walked off the end onto an existing centre
                d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick)
            } else {
                pick
            }
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, z) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq(z, &data[next]));
        }
    }
    chosen
}

fn run_em<T: Scalar>(
    mut model: GmmModel<T>,
    data: &[Vec<T>],
    config: &EmConfig,
) -> Result<GmmModel<T>> {
    let tol = T::of(config.tol);
    let reg = T::of(config.reg);
    let mut prev: Option<T> = None;
    for iter in 0..config.max_iter.max(1) {
        let resp = e_step(&model, data)?;
        let ll = resp.total_log_likelihood();
        model.log_likelihood_trace.push(ll);
        if let Some(p) = prev {
            if (ll - p).abs() < tol * ll.abs() {
                model.converged = true;
                break;
            }
        }
        if iter + 1 == config.max_iter.max(1) {
            break;
        }
        prev = Some(ll);
        let params = m_step(data, &resp, config.cov_type, reg)?;
        model.set_params(params);
    }
    Ok(model)
}

fn fit_single<T: Scalar>(
    data: &[Vec<T>],
    k: usize,
    config: &EmConfig,
    seed: u64,
) -> Result<GmmModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = kmeanspp(data, k, &mut rng);
    let sq = |a: &[T], b: &[T]| -> T { a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum() };
    let mut values = vec![T::zero(); data.len() * k];
    for (i, z) in data.iter().enumerate() {
        let dists: Vec<T> = centres.iter().map(|&c| -sq(z, &data[c])).collect();
        values[i * k + argmax(&dists)] = T::one();
    }
    let resp = Responsibilities {
        n_samples: data.len(),
        n_components: k,
        values,
        sample_log_likelihood: vec![T::zero(); data.len()],
    };
    let params = m_step(data, &resp, config.cov_type, T::of(config.reg))?;
    run_em(
        GmmModel::from_params(params, config.cov_type, T::of(config.reg)),
        data,
        config,
    )
}

/// Fits an `n_components` mixture, keeping the restart with the highest final
/// log-likelihood. Restarts run in parallel; restart `r` uses `seed + r`.
pub fn fit_em<T: Scalar>(
    data: &[Vec<T>],
    n_components: usize,
    config: &EmConfig,
) -> Result<GmmModel<T>> {
    if n_components == 0 {
        return Err(Error::InvalidArgument("n_components must be >= 1".into()));
    }
    if data.len() < n_components {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot support {n_components} components",
            data.len()
        )));
    }
    if !(config.reg >= 0.0) || !(config.tol >= 0.0) {
        return Err(Error::Config("em reg and tol must be >= 0".into()));
    }
    check_data(data, data[0].len())?;
    let fits = (0..config.n_restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| fit_single(data, n_components, config, config.seed.wrapping_add(r)))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<GmmModel<T>> = None;
    for fit in fits {
        let better = match &best {
            None => true,
            Some(b) => fit.final_log_likelihood() > b.final_log_likelihood(),
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Continues EM from an existing model.
pub fn refine<T: Scalar>(
    model: &GmmModel<T>,
    data: &[Vec<T>],
    config: &EmConfig,
) -> Result<GmmModel<T>> {
    let mut start = model.clone();
    start.log_likelihood_trace.clear();
    start.converged = false;
    run_em(start, data, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    const LN_2PI: f64 = 1.8378770664093453;

    fn model_1d(priors: &[f64], means: &[f64], vars: &[f64]) -> GmmModel<f64> {
        GmmModel::from_params(
            GmmParams {
                priors: priors.to_vec(),
                means: means.iter().map(|&m| vec![m]).collect(),
                covariances: vars
                    .iter()
                    .map(|&v| Covariance::Diagonal(vec![v]))
                    .collect(),
            },
            CovType::Diagonal,
            0.0,
        )
    }

    #[test]
    fn log_pdf_examples() {
        let id1 = Covariance::Diagonal(vec![1.0]);
        assert!((log_gaussian_pdf(&[0.0], &[0.0], &id1).unwrap() + 0.5 * LN_2PI).abs() < 1e-15);
        assert!((-0.5 * LN_2PI - -0.918939).abs() < 1e-6);
        for d in 1..6 {
            let z = vec![0.3; d];
            for ct in [CovType::Diagonal, CovType::Full] {
                let v = log_gaussian_pdf(&z, &z, &Covariance::identity(d, ct)).unwrap();
                assert!((v + d as f64 / 2.0 * LN_2PI).abs() < 1e-13);
            }
        }
        let cov = Covariance::Diagonal(vec![2.0, 0.5]);
        let v = log_gaussian_pdf(&[1.0, 2.0], &[0.0, 0.0], &cov).unwrap();
        assert!((v - (-LN_2PI - 4.25)).abs() < 1e-14);
        let full = Covariance::Full(vec![2.0, 0.0, 0.0, 0.5]);
        let v = log_gaussian_pdf(&[1.0, 2.0], &[0.0, 0.0], &full).unwrap();
        assert!((v - (-LN_2PI - 4.25)).abs() < 1e-14);
    }

    #[test]
    fn full_covariance_matches_brute_force() {
        // 2-D correlated covariance, density evaluated from the explicit inverse
        let (a, b, c) = (2.0, 0.6, 1.0);
        let det: f64 = a * c - b * b;
        let inv = [c / det, -b / det, -b / det, a / det];
        let x = [0.7, -1.3];
        let maha = x[0] * (inv[0] * x[0] + inv[1] * x[1]) + x[1] * (inv[2] * x[0] + inv[3] * x[1]);
        let expected = -LN_2PI - 0.5 * det.ln() - 0.5 * maha;
        let got = log_gaussian_pdf(&x, &[0.0, 0.0], &Covariance::Full(vec![a, b, b, c])).unwrap();
        assert!((got - expected).abs() < 1e-13);
    }

    #[test]
    fn non_pd_covariance_is_rejected() {
        let bad = Covariance::Full(vec![1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            log_gaussian_pdf(&[0.0, 0.0], &[0.0, 0.0], &bad),
            Err(Error::Domain(_))
        ));
        let bad = Covariance::Diagonal(vec![1.0, 0.0]);
        assert!(log_gaussian_pdf(&[0.0, 0.0], &[0.0, 0.0], &bad).is_err());
    }

    #[test]
    fn e_step_examples() {
        let one = model_1d(&[1.0], &[0.0], &[1.0]);
        let r = e_step(&one, &[vec![5.0], vec![-3.0]]).unwrap();
        assert!(r.values.iter().all(|&v| v == 1.0));

        let sym = model_1d(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 1.0]);
        let r = e_step(&sym, &[vec![0.0]]).unwrap();
        assert_eq!(r.row(0)[0], r.row(0)[1]);
        assert!((r.row(0)[0] - 0.5).abs() < 1e-15);

        let m = model_1d(&[0.3, 0.7], &[0.0, 2.0], &[1.0, 1.0]);
        let r = e_step(&m, &[vec![1.0]]).unwrap();
        assert!((r.row(0)[0] - 0.3).abs() < 1e-15);
        assert!((r.row(0)[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn e_step_all_underflow_is_degenerate() {
        let m = model_1d(&[1.0, 0.0], &[0.0, 0.0], &[1e-300, 1.0]);
        assert!(matches!(
            e_step(&m, &[vec![1e200]]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn m_step_examples() {
        let data: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0],
            vec![0.2, 0.0],
            vec![10.0, 10.0],
            vec![10.0, 10.4],
        ];
        let onehot = Responsibilities::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let p = m_step(&data, &onehot, CovType::Diagonal, 1e-6).unwrap();
        assert_eq!(p.means, vec![vec![0.1, 0.0], vec![10.0, 10.2]]);
        assert_eq!(p.priors, vec![0.5, 0.5]);

        let uniform = Responsibilities::from_rows(&vec![vec![0.5, 0.5]; 4]).unwrap();
        let p = m_step(&data, &uniform, CovType::Diagonal, 1e-6).unwrap();
        let global = [5.05, 5.1];
        for mu in &p.means {
            for (a, b) in mu.iter().zip(global) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn m_step_two_samples_one_component() {
        let data = vec![vec![0.0], vec![2.0]];
        let r = Responsibilities::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let p = m_step(&data, &r, CovType::Diagonal, 1e-6).unwrap();
        assert_eq!(p.means[0], vec![1.0]);
        // squared half-distance from the midpoint, averaged over both samples
        assert_eq!(p.covariances[0], Covariance::Diagonal(vec![1.0 + 1e-6]));
        let p = m_step(&data, &r, CovType::Full, 1e-6).unwrap();
        assert_eq!(p.covariances[0], Covariance::Full(vec![1.0 + 1e-6]));
    }

    #[test]
    fn empty_component_is_reseeded() {
        let data = vec![vec![0.0], vec![0.1], vec![0.2], vec![9.0]];
        let mut resp = Responsibilities::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap();
        resp.sample_log_likelihood = vec![-1.0, -1.0, -1.0, -50.0];
        let p = m_step(&data, &resp, CovType::Diagonal, 1e-6).unwrap();
        assert_eq!(p.means[1], vec![9.0]);
        assert!(p.priors[1] > 0.0);
        assert!((p.priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_copies_recovered() {
        let points = [vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 4.0]];
        let data: Vec<Vec<f64>> = (0..30).map(|i| points[i % 3].clone()).collect();
        let m = fit_em(&data, 3, &EmConfig::default()).unwrap();
        let mut found: Vec<Vec<f64>> = m.means.clone();
        found.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = points.to_vec();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (f, w) in found.iter().zip(&want) {
            for (a, b) in f.iter().zip(w) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        for w in m.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
    }

    fn planted(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>) {
        let truth = vec![vec![0.0, 0.0], vec![8.0, 0.0], vec![4.0, 8.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 3;
            labels.push(c);
            data.push(
                truth[c]
                    .iter()
                    .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }
        (data, labels, truth)
    }

    #[test]
    fn planted_mixture_recovered() {
        let (data, labels, truth) = planted(11, 3000);
        let m = fit_em(&data, 3, &EmConfig::default()).unwrap();
        // match each true mean to its nearest fitted component
        let map: Vec<usize> = truth
            .iter()
            .map(|t| {
                let d: Vec<f64> = m
                    .means
                    .iter()
                    .map(|mu| {
                        -mu.iter()
                            .zip(t)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .collect();
                argmax(&d)
            })
            .collect();
        let mut sorted = map.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
        for (c, t) in truth.iter().enumerate() {
            let err: f64 = m.means[map[c]]
                .iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err < 0.1, "component {c} off by {err}");
        }
        let hard = e_step(&m, &data).unwrap().hard_assignments();
        let agree = hard
            .iter()
            .zip(&labels)
            .filter(|(h, l)| **h == map[**l])
            .count();
        assert!(agree as f64 / 3000.0 >= 0.99);
    }

    #[test]
    fn fit_is_deterministic_and_checks_arguments() {
        let (data, _, _) = planted(5, 300);
        let cfg = EmConfig {
            n_restarts: 3,
            ..EmConfig::default()
        };
        assert_eq!(
            fit_em(&data, 3, &cfg).unwrap(),
            fit_em(&data, 3, &cfg).unwrap()
        );
        assert!(matches!(
            fit_em(&data[..2], 3, &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn converged_model_is_a_fixed_point() {
        let (data, _, _) = planted(9, 600);
        let cfg = EmConfig::default();
        let m = fit_em(&data, 3, &cfg).unwrap();
        assert!(m.converged);
        let again = refine(&m, &data, &cfg).unwrap();
        let (a, b) = (
            m.final_log_likelihood().unwrap(),
            again.final_log_likelihood().unwrap(),
        );
        assert!((a - b).abs() < cfg.tol * a.abs());
    }

    #[test]
    fn full_covariance_fit_runs() {
        let (data, _, _) = planted(2, 600);
        let cfg = EmConfig {
            cov_type: CovType::Full,
            ..EmConfig::default()
        };
        let m = fit_em(&data, 3, &cfg).unwrap();
        for w in m.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
    }

    #[test]
    fn single_precision_fit() {
        let (data, _, _) = planted(3, 300);
        let data32: Vec<Vec<f32>> = data
            .iter()
            .map(|z| z.iter().map(|&v| v as f32).collect())
            .collect();
        let m = fit_em(&data32, 3, &EmConfig::default()).unwrap();
        assert!((m.priors.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn log_domain_e_step_matches_naive(
            priors in prop::collection::vec(0.05f64..1.0, 3),
            means in prop::collection::vec(-3.0f64..3.0, 3),
            vars in prop::collection::vec(0.2f64..4.0, 3),
            z in -4.0f64..4.0,
        ) {
            let s: f64 = priors.iter().sum();
            let priors: Vec<f64> = priors.iter().map(|p| p / s).collect();
            let m = model_1d(&priors, &means, &vars);
            let r = e_step(&m, &[vec![z]]).unwrap();
            let dens: Vec<f64> = (0..3)
                .map(|j| priors[j] * (-(z - means[j]).powi(2) / (2.0 * vars[j])).exp() / (std::f64::consts::TAU * vars[j]).sqrt())
                .collect();
            let tot: f64 = dens.iter().sum();
            for j in 0..3 {
                prop_assert!((r.row(0)[j] - dens[j] / tot).abs() < 1e-10);
            }
            prop_assert!((r.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
