use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmbeddingRecord, Split, Store};
use crate::error::{Error, Result};

/// Parameters of the synthetic open-set benchmark: `classes` inlier blobs and
/// `n_ood_components` outlier blobs, all isotropic with unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_labeled: usize,
    pub n_unlabeled_inlier: usize,
    pub n_ood: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub classes: usize,
    pub n_ood_components: usize,
    pub raw_dim: usize,
    /// Minimum distance between any two inlier class means.
    pub class_separation: f64,
    /// Minimum distance between any outlier mean and every inlier mean.
    pub ood_offset: f64,
    /// Test records are bagged into groups of this size per class (0 = none).
    pub group_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_labeled: 25,
            n_unlabeled_inlier: 2000,
            n_ood: 3000,
            n_val: 200,
            n_test: 400,
            classes: 4,
            n_ood_components: 8,
            raw_dim: 32,
            class_separation: 3.0,
            ood_offset: 5.0,
            group_size: 20,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic classes must be >= 2".into()));
        }
        if self.raw_dim < 2 {
            return Err(Error::Config("synthetic raw_dim must be >= 2".into()));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config("class_separation must be > 0".into()));
        }
        if !(self.ood_offset > 0.0 && self.ood_offset.is_finite()) {
            return Err(Error::Config("ood_offset must be > 0".into()));
        }
        if self.n_ood > 0 && self.n_ood_components == 0 {
            return Err(Error::Config(
                "n_ood > 0 requires n_ood_components >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Blob centres used by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratingMeans {
    pub inlier: Vec<Vec<f64>>,
    pub ood: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Rejection-samples a centre with norm around `radius` that keeps at least
/// `min_dist` from every point in `avoid`. The radius grows by 10% after every
/// 1000 rejections so the loop always terminates.
fn place_centre(
    rng: &mut ChaCha8Rng,
    dim: usize,
    radius: f64,
    min_dist: f64,
    avoid: &[Vec<f64>],
) -> Vec<f64> {
    let mut scale = radius / (dim as f64).sqrt();
    loop {
        for _ in 0..1000 {
            let c = gaussian(rng, dim, scale);
            if avoid.iter().all(|a| dist(a, &c) >= min_dist) {
                return c;
            }
        }
        scale *= 1.1;
    }
}

fn draw_means(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> GeneratingMeans {
    let mut inlier: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let c = place_centre(
            rng,
            spec.raw_dim,
            spec.class_separation,
            spec.class_separation,
            &inlier,
        );
        inlier.push(c);
    }
    let ood_radius = spec.ood_offset + spec.class_separation;
    let ood = (0..spec.n_ood_components)
        .map(|_| place_centre(rng, spec.raw_dim, ood_radius, spec.ood_offset, &inlier))
        .collect();
    GeneratingMeans { inlier, ood }
}

/// The blob centres `generate_synthetic_openset` uses for this spec.
pub fn synthetic_means(spec: &SyntheticSpec) -> Result<GeneratingMeans> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(draw_means(spec, &mut rng))
}

fn sample_around(rng: &mut ChaCha8Rng, mean: &[f64]) -> Vec<f64> {
    mean.iter()
        .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Generates a labeled/unlabeled/validation/test store. Labeled, validation
/// and test records are inliers only; the unlabeled pool mixes inliers and
/// outliers with `ood_truth` set on every record.
pub fn generate_synthetic_openset(spec: &SyntheticSpec) -> Result<Store> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = draw_means(spec, &mut rng);
    let c = spec.classes;
    let total = spec.n_labeled + spec.n_unlabeled_inlier + spec.n_ood + spec.n_val + spec.n_test;
    let mut records = Vec::with_capacity(total);

    for i in 0..spec.n_labeled {
        let label = i % c;
        records.push(EmbeddingRecord {
            id: format!("l{i:05}"),
            split: Split::Labeled,
            label: Some(label),
            vector: sample_around(&mut rng, &means.inlier[label]),
            ood_truth: Some(false),
            group_id: None,
        });
    }

    let mut pool: Vec<(Vec<f64>, bool)> = Vec::with_capacity(spec.n_unlabeled_inlier + spec.n_ood);
    for _ in 0..spec.n_unlabeled_inlier {
        let label = rng.random_range(0..c);
        pool.push((sample_around(&mut rng, &means.inlier[label]), false));
    }
    for _ in 0..spec.n_ood {
        let comp = rng.random_range(0..spec.n_ood_components);
        pool.push((sample_around(&mut rng, &means.ood[comp]), true));
    }
    pool.shuffle(&mut rng);
    for (i, (vector, ood)) in pool.into_iter().enumerate() {
        records.push(EmbeddingRecord {
            id: format!("u{i:05}"),
            split: Split::Unlabeled,
            label: None,
            vector,
            ood_truth: Some(ood),
            group_id: None,
        });
    }

    for (split, n, prefix) in [
        (Split::Validation, spec.n_val, "v"),
        (Split::Test, spec.n_test, "t"),
    ] {
        let mut per_class = vec![0usize; c];
        for i in 0..n {
            let label = i % c;
            let group_id = (split == Split::Test && spec.group_size > 0)
                .then(|| format!("g{label}-{}", per_class[label] / spec.group_size));
            per_class[label] += 1;
            records.push(EmbeddingRecord {
                id: format!("{prefix}{i:05}"),
                split,
                label: Some(label),
                vector: sample_around(&mut rng, &means.inlier[label]),
                ood_truth: Some(false),
                group_id,
            });
        }
    }
    Store::new(records)
}
