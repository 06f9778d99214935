//! Open-set semi-supervised data curation.
//!
//! The pipeline embeds samples with an ε-neighbourhood contrastive encoder,
//! fits a Gaussian mixture to the latent space, scores unlabeled samples by
//! the labeled-mass impurity of the clusters they belong to, and trains a
//! MixMatch classifier whose unlabeled mini-batches are drawn by a two-stage
//! sampler that favours low-impurity clusters and low-OOD samples.
//!
//! All numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! pipeline and file formats use.

pub mod error;
pub mod eval;
pub mod gmm;
pub mod mixmatch;
pub mod nn;
pub mod ood;
pub mod pipeline;
pub mod sampler;
pub mod scalar;
pub mod ssl;
pub mod store;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Gmm = gmm::GmmModel<f64>;
pub type Covariance = gmm::Covariance<f64>;
pub type Responsibilities = gmm::Responsibilities<f64>;
pub type Encoder = ssl::EncoderParams<f64>;
pub type ContrastiveBatch = ssl::ContrastiveBatch<f64>;
pub type Classifier = mixmatch::ClassifierParams<f64>;
pub type MixBatch = mixmatch::MixBatch<f64>;
pub type ScoreTable = ood::OodScoreTable<f64>;
pub type SamplerPlan = sampler::SamplerPlan<f64>;
pub type AliasTable = sampler::AliasTable<f64>;
pub type UniformSampler = sampler::UniformSampler<f64>;
pub type Draw = sampler::Draw<f64>;
