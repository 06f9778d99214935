//! MixMatch semi-supervised training of a small softmax classifier.
//!
//! Each step guesses labels for an unlabeled batch from `k` jittered views,
//! sharpens them, mixes labeled and unlabeled rows with MixUp and minimises
//! `L_X + λ_U · L_U`, where `L_X` is cross-entropy on labeled-derived rows
//! and `L_U` the per-class mean squared error on unlabeled-derived rows.
//! Guessed targets are constants in the gradient.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_backward, Activation, Adam, ForwardTrace, Mlp};
use crate::sampler::{Draw, UnlabeledSampler};
use crate::scalar::{argmax, log_sum_exp, Scalar};
use crate::store::{Split, Store};

/// Classifier parameters; the network outputs logits.
pub type ClassifierParams<T> = Mlp<T>;

const LOG_FLOOR: f64 = 1e-12;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    #[default]
    OodWeighted,
    Uniform,
}

impl SamplerMode {
    pub const ALL: [SamplerMode; 2] = [SamplerMode::OodWeighted, SamplerMode::Uniform];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMode::OodWeighted => "ood_weighted",
            SamplerMode::Uniform => "uniform",
        }
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ood_weighted" => Ok(SamplerMode::OodWeighted),
            "uniform" => Ok(SamplerMode::Uniform),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampler mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixMatchConfig {
    /// Jittered views per unlabeled sample.
    pub k_augment: usize,
    /// Sharpening temperature.
    pub temperature: f64,
    pub mixup_alpha: f64,
    /// Final weight of the unlabeled loss.
    pub lambda_u: f64,
    /// Steps over which `lambda_u` ramps linearly from zero.
    pub rampup_steps: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub augment_sigma: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub sampler_mode: SamplerMode,
}

impl Default for MixMatchConfig {
    fn default() -> Self {
        MixMatchConfig {
            k_augment: 2,
            temperature: 0.5,
            mixup_alpha: 0.75,
            lambda_u: 75.0,
            rampup_steps: 400,
            labeled_batch: 16,
            unlabeled_batch: 32,
            learning_rate: 3e-4,
            epochs: 10,
            steps_per_epoch: 100,
            augment_sigma: 0.5,
            hidden: vec![64],
            seed: 0,
            sampler_mode: SamplerMode::OodWeighted,
        }
    }
}

impl MixMatchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k_augment == 0 {
            return bad("k_augment must be >= 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.mixup_alpha > 0.0) {
            return bad("mixup_alpha must be > 0");
        }
        if !(self.lambda_u >= 0.0) || !self.lambda_u.is_finite() {
            return bad("lambda_u must be finite and >= 0");
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.augment_sigma >= 0.0) {
            return bad("augment_sigma must be >= 0");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be >= 1");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Unlabeled-loss weight at `step`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        if self.rampup_steps == 0 {
            self.lambda_u
        } else {
            self.lambda_u * (step as f64 / self.rampup_steps as f64).min(1.0)
        }
    }
}

/// `p_i^{1/T} / Σ_c p_c^{1/T}`, evaluated in the log domain.
pub fn sharpen<T: Scalar>(p: &[T], temperature: T) -> Vec<T> {
    let logs: Vec<T> = p.iter().map(|&v| v.ln() / temperature).collect();
    let lse = log_sum_exp(&logs);
    if !lse.is_finite() {
        return p.to_vec();
    }
    logs.into_iter().map(|l| (l - lse).exp()).collect()
}

/// Anything that maps an input to a class distribution.
pub trait Predictor<T> {
    fn predict(&self, x: &[T]) -> Result<Vec<T>>;
}

impl<T: Scalar> Predictor<T> for Mlp<T> {
    fn predict(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(softmax(&self.forward(x)?))
    }
}

fn jitter<T: Scalar, R: RngCore + ?Sized>(x: &[T], sigma: T, rng: &mut R) -> Vec<T> {
    if sigma == T::zero() {
        return x.to_vec();
    }
    x.iter()
        .map(|&v| v + sigma * T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn guess_from_views<T: Scalar, P: Predictor<T> + ?Sized>(
    model: &P,
    views: &[Vec<T>],
    temperature: T,
) -> Result<Vec<T>> {
    let mut mean: Vec<T> = Vec::new();
    for v in views {
        let p = model.predict(v)?;
        if mean.is_empty() {
            mean = vec![T::zero(); p.len()];
        }
        for (m, q) in mean.iter_mut().zip(p) {
            *m += q;
        }
    }
    let k = T::of_usize(views.len());
    let mean: Vec<T> = mean.into_iter().map(|m| m / k).collect();
    Ok(sharpen(&mean, temperature))
}

/// Sharpened mean prediction over `k` jittered views of `x`.
pub fn guess_label<T: Scalar, P: Predictor<T> + ?Sized, R: RngCore + ?Sized>(
    model: &P,
    x: &[T],
    k: usize,
    temperature: T,
    augment_sigma: T,
    rng: &mut R,
) -> Result<Vec<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("guess_label needs k >= 1".into()));
    }
    let views: Vec<Vec<T>> = (0..k).map(|_| jitter(x, augment_sigma, rng)).collect();
    guess_from_views(model, &views, temperature)
}

/// Convex combination with weight `max(λ, 1-λ)` on the first argument.
pub fn mixup_with_lambda<T: Scalar>(
    x1: &[T],
    t1: &[T],
    x2: &[T],
    t2: &[T],
    lambda: T,
) -> (Vec<T>, Vec<T>, T) {
    let l = lambda.max(T::one() - lambda);
    let mix = |a: &[T], b: &[T]| -> Vec<T> {
        a.iter()
            .zip(b)
            .map(|(&u, &v)| l * u + (T::one() - l) * v)
            .collect()
    };
    (mix(x1, x2), mix(t1, t2), l)
}

/// MixUp with `λ ~ Beta(α, α)`.
pub fn mixup<T: Scalar, R: RngCore + ?Sized>(
    x1: &[T],
    t1: &[T],
    x2: &[T],
    t2: &[T],
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<T>, Vec<T>, T)> {
    let beta =
        Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(format!("mixup alpha: {e}")))?;
    let lambda: f64 = beta.sample(rng);
    Ok(mixup_with_lambda(x1, t1, x2, t2, T::of(lambda)))
}

/// Mean over rows of `-Σ_c t_c ln max(p_c, 1e-12)`.
pub fn labeled_loss<T: Scalar>(targets: &[Vec<T>], preds: &[Vec<T>]) -> T {
    if targets.is_empty() {
        return T::zero();
    }
    let floor = T::of(LOG_FLOOR);
    let total: T = targets
        .iter()
        .zip(preds)
        .map(|(t, p)| {
            -t.iter()
                .zip(p)
                .map(|(&tc, &pc)| tc * pc.max(floor).ln())
                .sum::<T>()
        })
        .sum();
    total / T::of_usize(targets.len())
}

/// Mean over rows of `‖q - p‖² / C`.
pub fn unlabeled_loss<T: Scalar>(targets: &[Vec<T>], preds: &[Vec<T>]) -> T {
    if targets.is_empty() {
        return T::zero();
    }
    let total: T = targets
        .iter()
        .zip(preds)
        .map(|(q, p)| {
            let c = T::of_usize(q.len());
            q.iter().zip(p).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / c
        })
        .sum();
    total / T::of_usize(targets.len())
}

/// Mixed rows ready for one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct MixBatch<T> {
    pub inputs: Vec<Vec<T>>,
    pub targets: Vec<Vec<T>>,
    /// `true` for rows derived from a labeled sample.
    pub from_labeled: Vec<bool>,
    pub lambdas: Vec<T>,
}

impl<T: Scalar> MixBatch<T> {
    pub fn new(
        inputs: Vec<Vec<T>>,
        targets: Vec<Vec<T>>,
        from_labeled: Vec<bool>,
        lambdas: Vec<T>,
    ) -> Result<Self> {
        let n = inputs.len();
        if targets.len() != n || from_labeled.len() != n || lambdas.len() != n {
            return Err(Error::InvalidArgument(
                "mix batch columns differ in length".into(),
            ));
        }
        let tol = T::of(1e-9);
        for (i, t) in targets.iter().enumerate() {
            let s: T = t.iter().copied().sum();
            if (s - T::one()).abs() > tol || t.iter().any(|&v| v < -tol) {
                return Err(Error::Contract(format!(
                    "target row {i} is not a distribution"
                )));
            }
        }
        if inputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("mix batch inputs must be finite".into()));
        }
        Ok(MixBatch {
            inputs,
            targets,
            from_labeled,
            lambdas,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue<T> {
    pub total: T,
    pub loss_l: T,
    pub loss_u: T,
}

fn evaluate<T: Scalar>(
    params: &ClassifierParams<T>,
    batch: &MixBatch<T>,
    lambda_u: T,
    grads: Option<&mut ClassifierParams<T>>,
) -> Result<ObjectiveValue<T>> {
    let traces: Vec<ForwardTrace<T>> = batch
        .inputs
        .par_iter()
        .map(|x| params.forward_trace(x))
        .collect::<Result<_>>()?;
    let probs: Vec<Vec<T>> = traces.iter().map(|t| softmax(t.output())).collect();

    let (mut lt, mut lp, mut ut, mut up) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ((t, p), &lab) in batch.targets.iter().zip(&probs).zip(&batch.from_labeled) {
        if lab {
            lt.push(t.clone());
            lp.push(p.clone());
        } else {
            ut.push(t.clone());
            up.push(p.clone());
        }
    }
    let loss_l = labeled_loss(&lt, &lp);
    let loss_u = unlabeled_loss(&ut, &up);
    let value = ObjectiveValue {
        total: loss_l + lambda_u * loss_u,
        loss_l,
        loss_u,
    };

    if let Some(grads) = grads {
        let n_l = T::of_usize(lt.len().max(1));
        let n_u = T::of_usize(ut.len().max(1));
        let floor = T::of(LOG_FLOOR);
        let two = T::of(2.0);
        for ((trace, (t, p)), &lab) in traces
            .iter()
            .zip(batch.targets.iter().zip(&probs))
            .zip(&batch.from_labeled)
        {
            let c = T::of_usize(p.len());
            let dp: Vec<T> = if lab {
                t.iter()
                    .zip(p)
                    .map(|(&tc, &pc)| {
                        if pc > floor {
                            -tc / (pc * n_l)
                        } else {
                            T::zero()
                        }
                    })
                    .collect()
            } else {
                t.iter()
                    .zip(p)
                    .map(|(&qc, &pc)| lambda_u * two * (pc - qc) / (c * n_u))
                    .collect()
            };
            let dz = softmax_backward(p, &dp);
            params.backward(trace, &dz, grads);
        }
    }
    Ok(value)
}

/// Value of `L_X + λ_U · L_U` on a mixed batch.
pub fn objective<T: Scalar>(
    params: &ClassifierParams<T>,
    batch: &MixBatch<T>,
    lambda_u: T,
) -> Result<ObjectiveValue<T>> {
    evaluate(params, batch, lambda_u, None)
}

/// Objective value and its gradient with respect to every classifier parameter.
pub fn objective_gradient<T: Scalar>(
    params: &ClassifierParams<T>,
    batch: &MixBatch<T>,
    lambda_u: T,
) -> Result<(ObjectiveValue<T>, ClassifierParams<T>)> {
    let mut grads = params.zeros_like();
    let value = evaluate(params, batch, lambda_u, Some(&mut grads))?;
    Ok((value, grads))
}

pub fn init_classifier<T: Scalar>(
    input_dim: usize,
    n_classes: usize,
    config: &MixMatchConfig,
) -> Result<ClassifierParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sizes = vec![input_dim];
    sizes.extend(&config.hidden);
    sizes.push(n_classes);
    Mlp::new(&sizes, Activation::Tanh, Activation::Identity, &mut rng)
}

pub fn predict_labels<T: Scalar>(
    params: &ClassifierParams<T>,
    vectors: &[Vec<T>],
) -> Result<Vec<usize>> {
    vectors
        .par_iter()
        .map(|x| params.forward(x).map(|z| argmax(&z)))
        .collect()
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss_l: f64,
    pub loss_u: f64,
    pub lambda_u: f64,
    /// Validation accuracy after the step, when a validation split exists.
    pub acc_val: Option<f64>,
    /// Mean OOD score of the unlabeled draws of the step.
    pub mean_ood_drawn: Option<f64>,
}

pub fn write_trace<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "step",
        "loss_l",
        "loss_u",
        "lambda_u",
        "acc_val",
        "mean_ood_drawn",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    for r in rows {
        wtr.write_record([
            r.step.to_string(),
            format!("{:.16e}", r.loss_l),
            format!("{:.16e}", r.loss_u),
            format!("{:.16e}", r.lambda_u),
            opt(r.acc_val),
            opt(r.mean_ood_drawn),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SemiSlOutcome<T: Scalar> {
    pub params: ClassifierParams<T>,
    pub trace: Vec<TraceRow>,
    /// Every unlabeled draw, tagged with its step.
    pub draws: Vec<(usize, Draw<T>)>,
}

/// Trains a classifier on the labeled split of `store`, drawing unlabeled
/// batches from `sampler` by id. Without a sampler the unlabeled term is
/// dropped and training is plain supervised MixUp.
pub fn train_semisl<T: Scalar>(
    store: &Store,
    sampler: Option<&dyn UnlabeledSampler<T>>,
    config: &MixMatchConfig,
) -> Result<SemiSlOutcome<T>> {
    config.validate()?;
    let labeled: Vec<(Vec<T>, usize)> = store
        .split(Split::Labeled)
        .map(|r| {
            (
                r.vector.iter().map(|&v| T::of(v)).collect(),
                r.label.expect("validated"),
            )
        })
        .collect();
    if labeled.is_empty() {
        return Err(Error::InvalidArgument(
            "semi-supervised training needs labeled records".into(),
        ));
    }
    let n_classes = store.num_classes();
    if n_classes < 2 {
        return Err(Error::InvalidArgument(
            "classifier needs at least two classes".into(),
        ));
    }
    let validation: Vec<Vec<T>> = store
        .split(Split::Validation)
        .map(|r| r.vector.iter().map(|&v| T::of(v)).collect())
        .collect();
    let val_labels: Vec<usize> = store
        .split(Split::Validation)
        .map(|r| r.label.expect("validated"))
        .collect();

    let one_hot = |c: usize| -> Vec<T> {
        let mut t = vec![T::zero(); n_classes];
        t[c] = T::one();
        t
    };
    let mut params = init_classifier::<T>(store.dim(), n_classes, config)?;
    let mut adam = Adam::new(T::of(config.learning_rate), params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let sigma = T::of(config.augment_sigma);
    let temperature = T::of(config.temperature);

    let mut trace = Vec::with_capacity(config.total_steps());
    let mut draw_log = Vec::new();
    for step in 0..config.total_steps() {
        let mut rows: Vec<(Vec<T>, Vec<T>, bool)> = Vec::new();
        for _ in 0..config.labeled_batch {
            let (x, c) = &labeled[rng.random_range(0..labeled.len())];
            rows.push((jitter(x, sigma, &mut rng), one_hot(*c), true));
        }
        let mut mean_ood = None;
        if let Some(sampler) = sampler {
            let draws = sampler.draw_batch(config.unlabeled_batch, &mut sampler_rng);
            let mut total = T::zero();
            for d in &draws {
                let rec = store.get(&d.id).ok_or_else(|| {
                    Error::InvalidArgument(format!("sampler drew unknown id `{}`", d.id))
                })?;
                let x: Vec<T> = rec.vector.iter().map(|&v| T::of(v)).collect();
                let views: Vec<Vec<T>> = (0..config.k_augment)
                    .map(|_| jitter(&x, sigma, &mut rng))
                    .collect();
                let q = guess_from_views(&params, &views, temperature)?;
                for v in views {
                    rows.push((v, q.clone(), false));
                }
                total += d.ood_score;
            }
            mean_ood = Some((total / T::of_usize(draws.len())).as_f64());
            draw_log.extend(draws.into_iter().map(|d| (step, d)));
        }

        let mut partner: Vec<usize> = (0..rows.len()).collect();
        partner.shuffle(&mut rng);
        let beta = Beta::new(config.mixup_alpha, config.mixup_alpha)
            .map_err(|e| Error::Config(format!("mixup_alpha: {e}")))?;
        let (mut inputs, mut targets, mut flags, mut lambdas) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, (x, t, lab)) in rows.iter().enumerate() {
            let (x2, t2, _) = &rows[partner[i]];
            let lambda: f64 = beta.sample(&mut rng);
            let (xm, tm, l) = mixup_with_lambda(x, t, x2, t2, T::of(lambda));
            inputs.push(xm);
            targets.push(tm);
            flags.push(*lab);
            lambdas.push(l);
        }
        let batch = MixBatch::new(inputs, targets, flags, lambdas)?;

        let lambda_u = config.lambda_at(step);
        let (value, grads) = objective_gradient(&params, &batch, T::of(lambda_u))?;
        if !value.total.is_finite() || grads.params().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                epoch: step / config.steps_per_epoch.max(1),
                step,
                loss: value.total.as_f64(),
            });
        }
        adam.step(&mut params, &grads);

        let acc_val = if validation.is_empty() {
            None
        } else {
            let pred = predict_labels(&params, &validation)?;
            let correct = pred.iter().zip(&val_labels).filter(|(a, b)| a == b).count();
            Some(correct as f64 / val_labels.len() as f64)
        };
        trace.push(TraceRow {
            step,
            loss_l: value.loss_l.as_f64(),
            loss_u: value.loss_u.as_f64(),
            lambda_u,
            acc_val,
            mean_ood_drawn: mean_ood,
        });
    }
    Ok(SemiSlOutcome {
        params,
        trace,
        draws: draw_log,
    })
}
