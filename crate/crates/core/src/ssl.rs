//! Contrastive pre-training with ε-neighbourhood positives.
//!
//! A positive pair is either an anchor and its augmented twin, or any two
//! batch members whose cosine similarity is at least `1 - epsilon`. The loss
//! is NT-Xent with the denominator running over every other batch member.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp};
use crate::scalar::{dot, l2_norm, log_sum_exp, Scalar};
use crate::store::{Split, Store};

/// Encoder parameters; the final layer is the linear projection into the
/// latent space.
pub type EncoderParams<T> = Mlp<T>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    /// Neighbourhood radius: `sim >= 1 - epsilon` makes a positive pair.
    pub epsilon: f64,
    /// Softmax temperature.
    pub tau: f64,
    pub learning_rate: f64,
    /// Originals per batch; the batch holds `2 * batch_n` embeddings.
    pub batch_n: usize,
    pub epochs: usize,
    /// Standard deviation of the additive Gaussian jitter used as augmentation.
    pub augment_sigma: f64,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    /// L2-normalise the final embedding table.
    pub normalize_embeddings: bool,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            epsilon: 0.05,
            tau: 0.5,
            learning_rate: 3e-4,
            batch_n: 64,
            epochs: 10,
            augment_sigma: 0.5,
            hidden: vec![64, 64],
            latent_dim: 16,
            normalize_embeddings: true,
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "ssl epsilon {} outside [0, 2]",
                self.epsilon
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("ssl tau must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("ssl learning_rate must be > 0".into()));
        }
        if self.batch_n == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(
                "ssl batch_n, latent_dim and hidden widths must be >= 1".into(),
            ));
        }
        if !(self.augment_sigma >= 0.0) {
            return Err(Error::Config("ssl augment_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// `2N` vectors where the first `N` are originals and `twin[i]` is the index
/// of the other view of sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch<T> {
    pub vectors: Vec<Vec<T>>,
    pub twin: Vec<usize>,
}

impl<T: Scalar> ContrastiveBatch<T> {
    /// Collates originals with their augmented views: sample `i` and its twin
    /// sit at `i` and `i + N`.
    pub fn from_views(originals: Vec<Vec<T>>, augmented: Vec<Vec<T>>) -> Result<Self> {
        if originals.len() != augmented.len() || originals.is_empty() {
            return Err(Error::InvalidArgument(
                "contrastive batch needs equally many (>= 1) originals and augmentations".into(),
            ));
        }
        let n = originals.len();
        let twin = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
        let mut vectors = originals;
        vectors.extend(augmented);
        Self::new(vectors, twin)
    }

    pub fn new(vectors: Vec<Vec<T>>, twin: Vec<usize>) -> Result<Self> {
        let m = vectors.len();
        if m == 0 || !m.is_multiple_of(2) || twin.len() != m {
            return Err(Error::InvalidArgument(format!(
                "contrastive batch must have an even, non-zero size with one twin per member (size {m})"
            )));
        }
        for (i, &t) in twin.iter().enumerate() {
            if t >= m || t == i || twin[t] != i {
                return Err(Error::InvalidArgument(
                    "twin map is not a perfect matching".into(),
                ));
            }
        }
        Ok(ContrastiveBatch { vectors, twin })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Cosine similarity, clamped to `[-1, 1]`. Zero-norm inputs are an error.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine similarity of vectors with dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Domain(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let s = dot(a, b) / (na * nb);
    Ok(s.max(-T::one()).min(T::one()))
}

fn similarity_matrix<T: Scalar>(batch: &ContrastiveBatch<T>) -> Result<Vec<Vec<T>>> {
    let m = batch.len();
    let mut sim = vec![vec![T::one(); m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let s = cosine_sim(&batch.vectors[i], &batch.vectors[j])?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    if m == 1 {
        cosine_sim(&batch.vectors[0], &batch.vectors[0])?;
    }
    Ok(sim)
}

fn positives_from_sim<T: Scalar>(anchor: usize, twin: usize, sim: &[T], epsilon: T) -> Vec<usize> {
    let threshold = T::one() - epsilon;
    sim.iter()
        .enumerate()
        .filter(|&(j, &s)| j != anchor && (j == twin || s >= threshold))
        .map(|(j, _)| j)
        .collect()
}

/// Indices treated as positives for `anchor`: its twin plus every other
/// member within the ε-neighbourhood. Sorted, never contains the anchor.
pub fn positive_set<T: Scalar>(
    anchor: usize,
    batch: &ContrastiveBatch<T>,
    epsilon: T,
) -> Result<Vec<usize>> {
    if anchor >= batch.len() {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor} outside batch"
        )));
    }
    let sim = batch
        .vectors
        .iter()
        .map(|v| cosine_sim(&batch.vectors[anchor], v))
        .collect::<Result<Vec<_>>>()?;
    Ok(positives_from_sim(
        anchor,
        batch.twin[anchor],
        &sim,
        epsilon,
    ))
}

/// Positive sets for every anchor of the batch.
pub fn positive_sets<T: Scalar>(
    batch: &ContrastiveBatch<T>,
    epsilon: T,
) -> Result<Vec<Vec<usize>>> {
    let sim = similarity_matrix(batch)?;
    Ok((0..batch.len())
        .map(|i| positives_from_sim(i, batch.twin[i], &sim[i], epsilon))
        .collect())
}

/// NT-Xent loss: per anchor, the mean over its positives of
/// `-log softmax_{k != i}(sim / tau)[j]`; then the mean over anchors.
pub fn ntxent_loss<T: Scalar>(
    batch: &ContrastiveBatch<T>,
    positives: &[Vec<usize>],
    tau: T,
) -> Result<T> {
    ntxent_with_grad(batch, positives, tau).map(|(loss, _)| loss)
}

/// NT-Xent loss and its gradient with respect to every batch vector. Positive
/// sets are constants here.
pub fn ntxent_with_grad<T: Scalar>(
    batch: &ContrastiveBatch<T>,
    positives: &[Vec<usize>],
    tau: T,
) -> Result<(T, Vec<Vec<T>>)> {
    let m = batch.len();
    if positives.len() != m {
        return Err(Error::InvalidArgument(format!(
            "{} positive sets for a batch of {m}",
            positives.len()
        )));
    }
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let sim = similarity_matrix(batch)?;
    let m_t = T::of_usize(m);
    let mut loss = T::zero();
    // d loss / d sim[i][k]
    let mut g = vec![vec![T::zero(); m]; m];
    let mut logits = Vec::with_capacity(m);
    for i in 0..m {
        let pos = &positives[i];
        if pos.is_empty() {
            return Err(Error::Contract(format!(
                "anchor {i} has an empty positive set"
            )));
        }
        if pos.iter().any(|&j| j == i || j >= m) {
            return Err(Error::Contract(format!(
                "anchor {i} has an invalid positive index"
            )));
        }
        logits.clear();
        logits.extend((0..m).filter(|&k| k != i).map(|k| sim[i][k] / tau));
        let lse = log_sum_exp(&logits);
        let p_t = T::of_usize(pos.len());
        let anchor_loss: T = pos.iter().map(|&j| lse - sim[i][j] / tau).sum::<T>() / p_t;
        loss += anchor_loss;
        for k in (0..m).filter(|&k| k != i) {
            g[i][k] += (sim[i][k] / tau - lse).exp() / (tau * m_t);
        }
        for &j in pos {
            g[i][j] -= T::one() / (tau * m_t * p_t);
        }
    }
    loss /= m_t;

    let norms: Vec<T> = batch.vectors.iter().map(|v| l2_norm(v)).collect();
    let units: Vec<Vec<T>> = batch
        .vectors
        .iter()
        .zip(&norms)
        .map(|(v, &n)| v.iter().map(|&x| x / n).collect())
        .collect();
    let grads = (0..m)
        .map(|i| {
            let mut gi = vec![T::zero(); batch.vectors[i].len()];
            for k in (0..m).filter(|&k| k != i) {
                let h = g[i][k] + g[k][i];
                if h == T::zero() {
                    continue;
                }
                for ((d, &uk), &ui) in gi.iter_mut().zip(&units[k]).zip(&units[i]) {
                    *d += h * (uk - sim[i][k] * ui);
                }
            }
            gi.iter().map(|&d| d / norms[i]).collect()
        })
        .collect();
    Ok((loss, grads))
}

/// Loss and parameter gradient of NT-Xent composed with the encoder, for a
/// batch of raw input views. Positive sets are recomputed from the current
/// embeddings and held fixed.
pub fn loss_gradient<T: Scalar>(
    params: &EncoderParams<T>,
    raw: &ContrastiveBatch<T>,
    config: &SslConfig,
) -> Result<(T, EncoderParams<T>)> {
    let traces = raw
        .vectors
        .iter()
        .map(|x| params.forward_trace(x))
        .collect::<Result<Vec<_>>>()?;
    let embedded = ContrastiveBatch {
        vectors: traces.iter().map(|t| t.output().to_vec()).collect(),
        twin: raw.twin.clone(),
    };
    if embedded.vectors.iter().any(|z| l2_norm(z) == T::zero()) {
        return Err(Error::Domain(
            "encoder produced a zero-norm embedding".into(),
        ));
    }
    let positives = positive_sets(&embedded, T::of(config.epsilon))?;
    let (loss, dz) = ntxent_with_grad(&embedded, &positives, T::of(config.tau))?;
    let mut grads = params.zeros_like();
    for (trace, d) in traces.iter().zip(&dz) {
        params.backward(trace, d, &mut grads);
    }
    Ok((loss, grads))
}

/// Result of contrastive training.
#[derive(Debug, Clone)]
pub struct SslOutcome<T: Scalar> {
    pub params: EncoderParams<T>,
    /// One embedding per store record, in store order.
    pub embeddings: Vec<Vec<T>>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<T>,
}

pub fn init_encoder<T: Scalar>(input_dim: usize, config: &SslConfig) -> Result<EncoderParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sizes = vec![input_dim];
    sizes.extend(&config.hidden);
    sizes.push(config.latent_dim);
    Mlp::new(&sizes, Activation::Tanh, Activation::Identity, &mut rng)
}

/// Embeds vectors with a trained encoder, L2-normalising when requested.
pub fn embed<T: Scalar>(
    params: &EncoderParams<T>,
    vectors: &[Vec<T>],
    normalize: bool,
) -> Result<Vec<Vec<T>>> {
    vectors
        .iter()
        .map(|x| {
            let z = params.forward(x)?;
            if !normalize {
                return Ok(z);
            }
            let n = l2_norm(&z);
            if n == T::zero() {
                return Err(Error::Domain(
                    "encoder produced a zero-norm embedding".into(),
                ));
            }
            Ok(z.into_iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Trains the encoder on the labeled and unlabeled records (all records when
/// neither split is present) and embeds every record of the store.
pub fn train_encoder<T: Scalar>(store: &Store, config: &SslConfig) -> Result<SslOutcome<T>> {
    config.validate()?;
    if store.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot train an encoder on an empty store".into(),
        ));
    }
    let vectors: Vec<Vec<T>> = store.vectors();
    let mut params = init_encoder::<T>(store.dim(), config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut train: Vec<usize> = store
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r.split, Split::Labeled | Split::Unlabeled))
        .map(|(i, _)| i)
        .collect();
    if train.is_empty() {
        train = (0..store.len()).collect();
    }
    let sigma = T::of(config.augment_sigma);
    let mut adam = Adam::new(T::of(config.learning_rate), params.num_params());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        train.shuffle(&mut rng);
        let mut total = T::zero();
        let mut batches = 0usize;
        for chunk in train.chunks(config.batch_n) {
            // a single pair has zero loss and zero gradient
            if chunk.len() < 2 {
                continue;
            }
            let originals: Vec<Vec<T>> = chunk.iter().map(|&i| vectors[i].clone()).collect();
            let augmented: Vec<Vec<T>> = originals
                .iter()
                .map(|x| {
                    x.iter()
                        .map(|&v| v + sigma * T::of(rng.sample::<f64, _>(StandardNormal)))
                        .collect()
                })
                .collect();
            let batch = ContrastiveBatch::from_views(originals, augmented)?;
            let (loss, grads) = loss_gradient(&params, &batch, config)?;
            if !loss.is_finite() || grads.params().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: loss.as_f64(),
                });
            }
            adam.step(&mut params, &grads);
            total += loss;
            batches += 1;
            step += 1;
        }
        let mean = if batches > 0 {
            total / T::of_usize(batches)
        } else {
            T::zero()
        };
        log::debug!("ssl epoch {epoch}: loss {mean}");
        epoch_losses.push(mean);
    }
    let embeddings = embed(&params, &vectors, config.normalize_embeddings)?;
    Ok(SslOutcome {
        params,
        embeddings,
        epoch_losses,
    })
}
