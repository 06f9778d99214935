//! Stage orchestration, artifacts and run manifests.
//!
//! Every stage reads its inputs from and writes its outputs to one output
//! directory. `manifest.json` records the configuration, the content digest
//! of each stage's inputs and outputs, and timings; a stage whose recorded
//! digests still match is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{aggregate_groups, cluster_purity_report, mean_std, ood_aurocs, EvalReport};
use crate::gmm::{fit_em, CovType, EmConfig, GmmModel};
use crate::mixmatch::{
    predict_labels, train_semisl, write_trace, ClassifierParams, MixMatchConfig, SamplerMode,
};
use crate::ood::{score_table, Normalization, OodScoreTable, ScoreConfig};
use crate::sampler::{
    build_plan, write_draw_log, Histogram, SamplerPlan, UniformSampler, UnlabeledSampler,
};
use crate::ssl::{train_encoder, SslConfig};
use crate::store::{
    generate_synthetic_openset, load_store, save_store, Format, Split, Store, SyntheticSpec,
};

pub const MANIFEST: &str = "manifest.json";

/// Flat run configuration. Every key has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub format: Format,
    /// Existing store to ingest instead of generating synthetic data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,

    pub n_labeled: usize,
    pub n_unlabeled_inlier: usize,
    pub n_ood: usize,
    /// When set, overrides `n_ood` with `round(contamination * n_unlabeled_inlier)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contamination: Option<f64>,
    pub n_val: usize,
    pub n_test: usize,
    pub classes: usize,
    pub n_ood_components: usize,
    pub raw_dim: usize,
    pub class_separation: f64,
    pub ood_offset: f64,
    pub group_size: usize,

    pub ssl_epsilon: f64,
    pub ssl_tau: f64,
    pub ssl_learning_rate: f64,
    pub ssl_batch_n: usize,
    pub ssl_epochs: usize,
    pub ssl_augment_sigma: f64,
    pub ssl_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub normalize_embeddings: bool,

    pub n_clusters: usize,
    pub cov_type: CovType,
    pub gmm_reg: f64,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub em_restarts: usize,

    pub delta: f64,
    pub normalization: Normalization,

    pub merge_tolerance: f64,
    pub delta_w: f64,
    /// Draws written to the plan preview log.
    pub plan_preview_draws: usize,
    pub histogram_bins: usize,

    pub k_augment: usize,
    pub temperature: f64,
    pub mixup_alpha: f64,
    pub lambda_u: f64,
    pub rampup_steps: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub augment_sigma: f64,
    pub classifier_hidden: Vec<usize>,
    pub sampler_modes: Vec<SamplerMode>,

    pub sweep_labeled: Vec<usize>,
    pub sweep_contamination: Vec<f64>,
    pub sweep_n_clusters: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        let ssl = SslConfig::default();
        let em = EmConfig::default();
        let mm = MixMatchConfig::default();
        PipelineConfig {
            seed: 0,
            format: Format::Jsonl,
            input: None,
            n_labeled: synth.n_labeled,
            n_unlabeled_inlier: synth.n_unlabeled_inlier,
            n_ood: synth.n_ood,
            contamination: None,
            n_val: synth.n_val,
            n_test: synth.n_test,
            classes: synth.classes,
            n_ood_components: synth.n_ood_components,
            raw_dim: synth.raw_dim,
            class_separation: synth.class_separation,
            ood_offset: synth.ood_offset,
            group_size: synth.group_size,
            ssl_epsilon: ssl.epsilon,
            ssl_tau: ssl.tau,
            ssl_learning_rate: ssl.learning_rate,
            ssl_batch_n: ssl.batch_n,
            ssl_epochs: ssl.epochs,
            ssl_augment_sigma: ssl.augment_sigma,
            ssl_hidden: ssl.hidden,
            latent_dim: ssl.latent_dim,
            normalize_embeddings: ssl.normalize_embeddings,
            n_clusters: 12,
            cov_type: em.cov_type,
            gmm_reg: em.reg,
            em_max_iter: em.max_iter,
            em_tol: em.tol,
            em_restarts: em.n_restarts,
            delta: ScoreConfig::default().delta,
            normalization: Normalization::MinMax,
            merge_tolerance: 1e-9,
            delta_w: 1e-3,
            plan_preview_draws: 10_000,
            histogram_bins: 20,
            k_augment: mm.k_augment,
            temperature: mm.temperature,
            mixup_alpha: mm.mixup_alpha,
            lambda_u: mm.lambda_u,
            rampup_steps: mm.rampup_steps,
            labeled_batch: mm.labeled_batch,
            unlabeled_batch: mm.unlabeled_batch,
            learning_rate: mm.learning_rate,
            epochs: mm.epochs,
            steps_per_epoch: mm.steps_per_epoch,
            augment_sigma: mm.augment_sigma,
            classifier_hidden: mm.hidden,
            sampler_modes: SamplerMode::ALL.to_vec(),
            sweep_labeled: vec![25, 50],
            sweep_contamination: vec![0.8, 1.0, 1.5],
            sweep_n_clusters: vec![12],
            sweep_seeds: vec![0, 1, 2],
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.contamination {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(
                    "contamination must be finite and >= 0".into(),
                ));
            }
        }
        if self.n_clusters == 0 {
            return Err(Error::Config("n_clusters must be >= 1".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config("delta must be > 0".into()));
        }
        if !(self.delta_w > 0.0) {
            return Err(Error::Config("delta_w must be > 0".into()));
        }
        if !(self.merge_tolerance >= 0.0) {
            return Err(Error::Config("merge_tolerance must be >= 0".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be >= 1".into()));
        }
        if self.sampler_modes.is_empty() {
            return Err(Error::Config("sampler_modes must not be empty".into()));
        }
        if !(self.gmm_reg >= 0.0) || !(self.em_tol >= 0.0) || self.em_restarts == 0 {
            return Err(Error::Config(
                "gmm_reg and em_tol must be >= 0, em_restarts >= 1".into(),
            ));
        }
        if self.input.is_none() {
            self.synthetic_spec().validate()?;
        }
        self.ssl_config().validate()?;
        self.mixmatch_config(SamplerMode::OodWeighted).validate()?;
        Ok(())
    }

    pub fn effective_n_ood(&self) -> usize {
        match self.contamination {
            Some(c) => (c * self.n_unlabeled_inlier as f64).round() as usize,
            None => self.n_ood,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_labeled: self.n_labeled,
            n_unlabeled_inlier: self.n_unlabeled_inlier,
            n_ood: self.effective_n_ood(),
            n_val: self.n_val,
            n_test: self.n_test,
            classes: self.classes,
            n_ood_components: self.n_ood_components,
            raw_dim: self.raw_dim,
            class_separation: self.class_separation,
            ood_offset: self.ood_offset,
            group_size: self.group_size,
            seed: self.seed,
        }
    }

    pub fn ssl_config(&self) -> SslConfig {
        SslConfig {
            epsilon: self.ssl_epsilon,
            tau: self.ssl_tau,
            learning_rate: self.ssl_learning_rate,
            batch_n: self.ssl_batch_n,
            epochs: self.ssl_epochs,
            augment_sigma: self.ssl_augment_sigma,
            hidden: self.ssl_hidden.clone(),
            latent_dim: self.latent_dim,
            normalize_embeddings: self.normalize_embeddings,
            seed: self.seed,
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            max_iter: self.em_max_iter,
            tol: self.em_tol,
            n_restarts: self.em_restarts,
            seed: self.seed,
            cov_type: self.cov_type,
            reg: self.gmm_reg,
        }
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            delta: self.delta,
            normalization: self.normalization,
        }
    }

    pub fn mixmatch_config(&self, mode: SamplerMode) -> MixMatchConfig {
        MixMatchConfig {
            k_augment: self.k_augment,
            temperature: self.temperature,
            mixup_alpha: self.mixup_alpha,
            lambda_u: self.lambda_u,
            rampup_steps: self.rampup_steps,
            labeled_batch: self.labeled_batch,
            unlabeled_batch: self.unlabeled_batch,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            augment_sigma: self.augment_sigma,
            hidden: self.classifier_hidden.clone(),
            seed: self.seed,
            sampler_mode: mode,
        }
    }

    /// Constants that shape the results, echoed into the manifest.
    pub fn constants(&self) -> BTreeMap<String, serde_json::Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: serde_json::Value| {
            m.insert(k.to_string(), v);
        };
        put("delta", self.delta.into());
        put("delta_w", self.delta_w.into());
        put("merge_tolerance", self.merge_tolerance.into());
        put("temperature", self.temperature.into());
        put("mixup_alpha", self.mixup_alpha.into());
        put("lambda_u", self.lambda_u.into());
        put("ssl_epsilon", self.ssl_epsilon.into());
        put("ssl_tau", self.ssl_tau.into());
        put(
            "cov_type",
            serde_json::to_value(self.cov_type).expect("enum"),
        );
        put(
            "normalization",
            serde_json::to_value(self.normalization).expect("enum"),
        );
        put("n_clusters", self.n_clusters.into());
        m
    }
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenSynth,
    TrainSsl,
    FitGmm,
    Score,
    Plan,
    TrainSemisl,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenSynth,
        Stage::TrainSsl,
        Stage::FitGmm,
        Stage::Score,
        Stage::Plan,
        Stage::TrainSemisl,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenSynth => "gen-synth",
            Stage::TrainSsl => "train-ssl",
            Stage::FitGmm => "fit-gmm",
            Stage::Score => "score",
            Stage::Plan => "plan",
            Stage::TrainSemisl => "train-semisl",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

/// Artifact file names relative to the output directory.
pub mod artifacts {
    use super::SamplerMode;
    use crate::store::Format;

    pub fn data(f: Format) -> String {
        format!("data.{}", f.extension())
    }
    pub fn embeddings(f: Format) -> String {
        format!("embeddings.{}", f.extension())
    }
    pub const ENCODER: &str = "encoder.json";
    pub const SSL_LOSS: &str = "ssl_loss.csv";
    pub const GMM: &str = "gmm.json";
    pub const SCORES: &str = "scores.csv";
    pub const SCORES_SIDECAR: &str = "scores_cis.json";
    pub const PLAN: &str = "plan.json";
    pub const PLAN_DRAWS: &str = "plan_draws.csv";
    pub const PLAN_EXPOSURE: &str = "plan_exposure.csv";
    pub const POOL_HISTOGRAM: &str = "pool_histogram.csv";
    pub fn classifier(m: SamplerMode) -> String {
        format!("classifier_{m}.json")
    }
    pub fn trace(m: SamplerMode) -> String {
        format!("trace_{m}.csv")
    }
    pub fn draws(m: SamplerMode) -> String {
        format!("draws_{m}.csv")
    }
    pub fn exposure(m: SamplerMode) -> String {
        format!("exposure_{m}.csv")
    }
    pub const REPORT: &str = "report.json";
    pub const ACCURACY: &str = "accuracy.csv";
    pub const AUROC: &str = "auroc.csv";
    pub const PURITY: &str = "purity.csv";
    pub const GROUPS: &str = "groups.csv";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

/// Everything needed to reproduce a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub constants: BTreeMap<String, serde_json::Value>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    fn new(config: &PipelineConfig) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            constants: config.constants(),
            stages: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn config_hash(config: &PipelineConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serialises");
    hex::encode(Sha256::digest(json))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Whether a stage ran or was skipped as up to date.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// A run directory bound to one configuration.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline {
            config,
            out: out.into(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn fmt(&self) -> Format {
        self.config.format
    }

    fn modes(&self) -> Vec<SamplerMode> {
        let mut m = self.config.sampler_modes.clone();
        m.sort_by_key(|x| x.as_str());
        m.dedup();
        m
    }

    /// `(artifact, producing stage)` pairs consumed by `stage`.
    pub fn inputs(&self, stage: Stage) -> Vec<(String, Stage)> {
        let f = self.fmt();
        let data = (artifacts::data(f), Stage::GenSynth);
        let emb = (artifacts::embeddings(f), Stage::TrainSsl);
        let scores = vec![
            (artifacts::SCORES.to_string(), Stage::Score),
            (artifacts::SCORES_SIDECAR.to_string(), Stage::Score),
        ];
        match stage {
            Stage::GenSynth => vec![],
            Stage::TrainSsl => vec![data],
            Stage::FitGmm => vec![emb],
            Stage::Score => vec![emb, (artifacts::GMM.into(), Stage::FitGmm)],
            Stage::Plan => [vec![data], scores].concat(),
            Stage::TrainSemisl => {
                [vec![data, (artifacts::PLAN.into(), Stage::Plan)], scores].concat()
            }
            Stage::Eval => {
                let mut v = [vec![data], scores].concat();
                v.extend(
                    self.modes()
                        .into_iter()
                        .map(|m| (artifacts::classifier(m), Stage::TrainSemisl)),
                );
                v
            }
        }
    }

    pub fn outputs(&self, stage: Stage) -> Vec<String> {
        let f = self.fmt();
        let s = |x: &str| x.to_string();
        match stage {
            Stage::GenSynth => vec![artifacts::data(f)],
            Stage::TrainSsl => vec![
                artifacts::embeddings(f),
                s(artifacts::ENCODER),
                s(artifacts::SSL_LOSS),
            ],
            Stage::FitGmm => vec![s(artifacts::GMM)],
            Stage::Score => vec![s(artifacts::SCORES), s(artifacts::SCORES_SIDECAR)],
            Stage::Plan => vec![
                s(artifacts::PLAN),
                s(artifacts::PLAN_DRAWS),
                s(artifacts::PLAN_EXPOSURE),
                s(artifacts::POOL_HISTOGRAM),
            ],
            Stage::TrainSemisl => self
                .modes()
                .into_iter()
                .flat_map(|m| {
                    [
                        artifacts::classifier(m),
                        artifacts::trace(m),
                        artifacts::draws(m),
                        artifacts::exposure(m),
                    ]
                })
                .collect(),
            Stage::Eval => vec![
                s(artifacts::REPORT),
                s(artifacts::ACCURACY),
                s(artifacts::AUROC),
                s(artifacts::PURITY),
                s(artifacts::GROUPS),
            ],
        }
    }

    fn digests(&self, names: &[String]) -> Result<BTreeMap<String, String>> {
        names
            .iter()
            .map(|n| Ok((n.clone(), sha256_file(&self.path(n))?)))
            .collect()
    }

    fn input_digests(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (name, producer) in self.inputs(stage) {
            let p = self.path(&name);
            if !p.exists() {
                return Err(Error::Dependency {
                    stage: stage.name().into(),
                    requires: producer.name().into(),
                    artifact: name,
                });
            }
            out.insert(name, sha256_file(&p)?);
        }
        if stage == Stage::GenSynth {
            if let Some(input) = &self.config.input {
                out.insert(input.display().to_string(), sha256_file(input)?);
            }
        }
        Ok(out)
    }

    pub fn manifest(&self) -> Result<Option<RunManifest>> {
        let p = self.path(MANIFEST);
        if p.exists() {
            RunManifest::load(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    fn up_to_date(&self, stage: Stage, inputs: &BTreeMap<String, String>) -> Result<bool> {
        let Some(manifest) = self.manifest()? else {
            return Ok(false);
        };
        let Some(rec) = manifest.stages.get(stage.name()) else {
            return Ok(false);
        };
        if rec.config_hash != config_hash(&self.config) || &rec.inputs != inputs {
            return Ok(false);
        }
        for (name, digest) in &rec.outputs {
            let p = self.path(name);
            if !p.exists() || &sha256_file(&p)? != digest {
                return Ok(false);
            }
        }
        Ok(rec.outputs.len() == self.outputs(stage).len())
    }

    /// Runs one stage, or skips it when its recorded inputs, outputs and
    /// configuration are unchanged.
    pub fn run_stage(&self, stage: Stage) -> Result<StageStatus> {
        fs::create_dir_all(&self.out)?;
        let inputs = self.input_digests(stage)?;
        if self.up_to_date(stage, &inputs)? {
            log::info!("{stage}: outputs up to date, skipping");
            return Ok(StageStatus::Skipped);
        }
        log::info!("{stage}: running");
        let start = Instant::now();
        match stage {
            Stage::GenSynth => self.gen_synth()?,
            Stage::TrainSsl => self.train_ssl()?,
            Stage::FitGmm => self.fit_gmm()?,
            Stage::Score => self.score()?,
            Stage::Plan => self.plan()?,
            Stage::TrainSemisl => self.train_semisl()?,
            Stage::Eval => self.eval()?,
        }
        let record = StageRecord {
            config_hash: config_hash(&self.config),
            inputs,
            outputs: self.digests(&self.outputs(stage))?,
            seconds: start.elapsed().as_secs_f64(),
        };
        let mut manifest = match self.manifest()? {
            Some(m) if m.config == self.config => m,
            _ => RunManifest::new(&self.config),
        };
        manifest.stages.insert(stage.name().into(), record);
        let tmp = self.path("manifest.json.tmp");
        write_json(&tmp, &manifest)?;
        fs::rename(tmp, self.path(MANIFEST))?;
        Ok(StageStatus::Ran)
    }

    pub fn run_all(&self) -> Result<RunManifest> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        Ok(self.manifest()?.expect("manifest written"))
    }

    fn data(&self) -> Result<Store> {
        load_store(&self.path(&artifacts::data(self.fmt())), self.fmt())
    }

    fn scores(&self, store: &Store) -> Result<OodScoreTable<f64>> {
        OodScoreTable::read(
            BufReader::new(File::open(self.path(artifacts::SCORES))?),
            BufReader::new(File::open(self.path(artifacts::SCORES_SIDECAR))?),
            store,
        )
    }

    fn gen_synth(&self) -> Result<()> {
        let store = match &self.config.input {
            Some(input) => {
                let f = Format::from_path(input).unwrap_or(self.fmt());
                load_store(input, f)?
            }
            None => generate_synthetic_openset(&self.config.synthetic_spec())?,
        };
        save_store(&store, &self.path(&artifacts::data(self.fmt())), self.fmt())
    }

    fn train_ssl(&self) -> Result<()> {
        let store = self.data()?;
        let outcome = train_encoder::<f64>(&store, &self.config.ssl_config())?;
        let embedded = store.with_vectors(outcome.embeddings.clone())?;
        save_store(
            &embedded,
            &self.path(&artifacts::embeddings(self.fmt())),
            self.fmt(),
        )?;
        write_json(&self.path(artifacts::ENCODER), &outcome.params)?;
        let mut w = csv::Writer::from_writer(create(&self.path(artifacts::SSL_LOSS))?);
        w.write_record(["epoch", "loss"])?;
        for (e, l) in outcome.epoch_losses.iter().enumerate() {
            w.write_record([e.to_string(), format!("{l:.16e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    fn fit_gmm(&self) -> Result<()> {
        let emb = load_store(&self.path(&artifacts::embeddings(self.fmt())), self.fmt())?;
        let mut data: Vec<Vec<f64>> = emb
            .records()
            .iter()
            .filter(|r| matches!(r.split, Split::Labeled | Split::Unlabeled))
            .map(|r| r.vector.clone())
            .collect();
        if data.is_empty() {
            data = emb.vectors();
        }
        let model = fit_em(&data, self.config.n_clusters, &self.config.em_config())?;
        write_json(&self.path(artifacts::GMM), &model)
    }

    fn score(&self) -> Result<()> {
        let emb = load_store(&self.path(&artifacts::embeddings(self.fmt())), self.fmt())?;
        let model: GmmModel<f64> = read_json(&self.path(artifacts::GMM))?;
        let table = score_table(&model, &emb, &self.config.score_config())?;
        let mut w = create(&self.path(artifacts::SCORES))?;
        table.write_csv(&mut w)?;
        w.flush()?;
        let mut w = create(&self.path(artifacts::SCORES_SIDECAR))?;
        table.write_sidecar(&mut w)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn plan(&self) -> Result<()> {
        let store = self.data()?;
        let table = self.scores(&store)?;
        let plan = build_plan(
            &table,
            self.config.merge_tolerance,
            self.config.delta_w,
            self.config.seed,
        )?;
        write_json(&self.path(artifacts::PLAN), &plan)?;
        let mut rng = plan.rng();
        let draws = plan.draw_batch(self.config.plan_preview_draws, &mut rng);
        let log: Vec<_> = draws.into_iter().enumerate().collect();
        write_draw_log(&log, create(&self.path(artifacts::PLAN_DRAWS))?)?;
        let pool: Vec<f64> = table.unlabeled().map(|e| e.ood_score).collect();
        let bins = self.config.histogram_bins;
        Histogram::new(pool.iter().copied(), &pool, bins)?
            .write_csv(create(&self.path(artifacts::POOL_HISTOGRAM))?)?;
        let drawn = log.iter().map(|(_, d)| d.ood_score);
        Histogram::new(drawn, &pool, bins)?
            .write_csv(create(&self.path(artifacts::PLAN_EXPOSURE))?)?;
        Ok(())
    }

    fn train_semisl(&self) -> Result<()> {
        let store = self.data()?;
        let table = self.scores(&store)?;
        let plan: SamplerPlan<f64> = read_json(&self.path(artifacts::PLAN))?;
        let uniform = UniformSampler::from_table(&table)?;
        let pool: Vec<f64> = table.unlabeled().map(|e| e.ood_score).collect();
        for mode in self.modes() {
            let sampler: &dyn UnlabeledSampler<f64> = match mode {
                SamplerMode::OodWeighted => &plan,
                SamplerMode::Uniform => &uniform,
            };
            let outcome = train_semisl(&store, Some(sampler), &self.config.mixmatch_config(mode))?;
            write_json(&self.path(&artifacts::classifier(mode)), &outcome.params)?;
            write_trace(&outcome.trace, create(&self.path(&artifacts::trace(mode)))?)?;
            write_draw_log(&outcome.draws, create(&self.path(&artifacts::draws(mode)))?)?;
            let drawn = outcome.draws.iter().map(|(_, d)| d.ood_score);
            Histogram::new(drawn, &pool, self.config.histogram_bins)?
                .write_csv(create(&self.path(&artifacts::exposure(mode)))?)?;
        }
        Ok(())
    }

    /// Builds the evaluation reports, one per sampler mode.
    pub fn evaluate(&self) -> Result<Vec<EvalReport>> {
        let store = self.data()?;
        let table = self.scores(&store)?;
        let test: Vec<&_> = store.split(Split::Test).collect();
        if test.is_empty() {
            return Err(Error::InvalidArgument(
                "evaluation needs a test split".into(),
            ));
        }
        let vectors: Vec<Vec<f64>> = test.iter().map(|r| r.vector.clone()).collect();
        let labels: Vec<usize> = test.iter().map(|r| r.label.expect("validated")).collect();
        let (auroc, auroc_pool) = ood_aurocs(&table, &store);
        let has_truth = store
            .records()
            .iter()
            .filter(|r| matches!(r.split, Split::Labeled | Split::Unlabeled))
            .all(|r| r.ood_truth.is_some());
        let purity = if has_truth {
            cluster_purity_report(&table, &store)?
        } else {
            crate::eval::PurityReport {
                rows: Vec::new(),
                rank_correlation: None,
            }
        };
        let config = serde_json::to_value(&self.config)?;
        self.modes()
            .into_iter()
            .map(|mode| {
                let params: ClassifierParams<f64> =
                    read_json(&self.path(&artifacts::classifier(mode)))?;
                let pred = predict_labels(&params, &vectors)?;
                let by_id: BTreeMap<String, usize> = test
                    .iter()
                    .map(|r| r.id.clone())
                    .zip(pred.iter().copied())
                    .collect();
                Ok(EvalReport {
                    sampler_mode: mode.to_string(),
                    seed: self.config.seed,
                    test_accuracy: crate::eval::accuracy(&pred, &labels)?,
                    auroc,
                    auroc_pool,
                    purity: purity.clone(),
                    groups: aggregate_groups(&store, &by_id, &table)?,
                    config: config.clone(),
                })
            })
            .collect()
    }

    fn eval(&self) -> Result<()> {
        let reports = self.evaluate()?;
        write_json(&self.path(artifacts::REPORT), &reports)?;
        let opt = |v: Option<f64>| v.map(fmt_metric).unwrap_or_default();

        let mut w = csv::Writer::from_writer(create(&self.path(artifacts::ACCURACY))?);
        w.write_record([
            "sampler_mode",
            "seed",
            "test_accuracy",
            "group_accuracy_plurality",
            "group_accuracy_weighted",
        ])?;
        for r in &reports {
            w.write_record([
                r.sampler_mode.clone(),
                r.seed.to_string(),
                fmt_metric(r.test_accuracy),
                opt(r.groups.plurality_accuracy),
                opt(r.groups.weighted_accuracy),
            ])?;
        }
        w.flush()?;

        let first = &reports[0];
        let mut w = csv::Writer::from_writer(create(&self.path(artifacts::AUROC))?);
        w.write_record(["auroc_heldout", "auroc_pool"])?;
        w.write_record([opt(first.auroc), opt(first.auroc_pool)])?;
        w.flush()?;

        let mut w = csv::Writer::from_writer(create(&self.path(artifacts::PURITY))?);
        w.write_record(["cluster", "cis", "inliers", "ood", "ood_fraction"])?;
        for row in &first.purity.rows {
            w.write_record([
                row.cluster.to_string(),
                fmt_metric(row.cis),
                row.inliers.to_string(),
                row.ood.to_string(),
                opt(row.ood_fraction()),
            ])?;
        }
        w.write_record([
            "rank_correlation",
            &opt(first.purity.rank_correlation),
            "",
            "",
            "",
        ])?;
        w.flush()?;

        let mut w = csv::Writer::from_writer(create(&self.path(artifacts::GROUPS))?);
        w.write_record([
            "sampler_mode",
            "group_id",
            "size",
            "label",
            "plurality",
            "weighted",
            "entropy",
        ])?;
        for r in &reports {
            for g in &r.groups.groups {
                w.write_record([
                    r.sampler_mode.clone(),
                    g.group_id.clone(),
                    g.size.to_string(),
                    g.label.to_string(),
                    g.plurality.to_string(),
                    g.weighted.to_string(),
                    fmt_metric(g.entropy),
                ])?;
            }
        }
        for r in &reports {
            w.write_record([
                r.sampler_mode.clone(),
                "mean_entropy_all".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                opt(r.groups.mean_entropy),
            ])?;
            w.write_record([
                r.sampler_mode.clone(),
                "mean_entropy_correct".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                opt(r.groups.mean_entropy_correct),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// One grid cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_labeled: usize,
    pub contamination: f64,
    pub n_clusters: usize,
    pub seed: u64,
}

impl SweepCell {
    pub fn dir_name(&self) -> String {
        format!(
            "l{}_c{}_k{}_s{}",
            self.n_labeled, self.contamination, self.n_clusters, self.seed
        )
    }

    pub fn config(&self, base: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            n_labeled: self.n_labeled,
            contamination: Some(self.contamination),
            n_clusters: self.n_clusters,
            seed: self.seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: SweepCell,
    /// `None` when the cell failed.
    pub reports: Option<Vec<EvalReport>>,
    pub error: Option<String>,
}

pub fn sweep_cells(config: &PipelineConfig) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &n_labeled in &config.sweep_labeled {
        for &contamination in &config.sweep_contamination {
            for &n_clusters in &config.sweep_n_clusters {
                for &seed in &config.sweep_seeds {
                    cells.push(SweepCell {
                        n_labeled,
                        contamination,
                        n_clusters,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

/// Runs every grid cell in its own subdirectory of `out/cells` and writes
/// the summary tables. Failed cells are recorded and do not stop the grid.
pub fn run_sweep(config: &PipelineConfig, out: &Path) -> Result<Vec<CellOutcome>> {
    config.validate()?;
    fs::create_dir_all(out.join("cells"))?;
    let outcomes: Vec<CellOutcome> = sweep_cells(config)
        .into_par_iter()
        .map(|cell| {
            let dir = out.join("cells").join(cell.dir_name());
            let result = Pipeline::new(cell.config(config), &dir).and_then(|p| {
                p.run_all()?;
                read_json::<Vec<EvalReport>>(&p.path(artifacts::REPORT))
            });
            match result {
                Ok(reports) => CellOutcome {
                    cell,
                    reports: Some(reports),
                    error: None,
                },
                Err(e) => {
                    log::error!("sweep cell {} failed: {e}", cell.dir_name());
                    CellOutcome {
                        cell,
                        reports: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    write_sweep_tables(&outcomes, out)?;
    Ok(outcomes)
}

fn write_sweep_tables(outcomes: &[CellOutcome], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(&out.join("sweep_cells.csv"))?);
    w.write_record([
        "n_labeled",
        "contamination",
        "n_clusters",
        "seed",
        "sampler_mode",
        "test_accuracy",
        "auroc",
        "status",
    ])?;
    for o in outcomes {
        let c = &o.cell;
        let head = [
            c.n_labeled.to_string(),
            c.contamination.to_string(),
            c.n_clusters.to_string(),
            c.seed.to_string(),
        ];
        match (&o.reports, &o.error) {
            (Some(reports), _) => {
                for r in reports {
                    let mut row = head.to_vec();
                    row.extend([
                        r.sampler_mode.clone(),
                        fmt_metric(r.test_accuracy),
                        r.auroc.map(fmt_metric).unwrap_or_default(),
                        "ok".into(),
                    ]);
                    w.write_record(row)?;
                }
            }
            (None, err) => {
                let mut row = head.to_vec();
                row.extend([
                    String::new(),
                    String::new(),
                    String::new(),
                    format!("failed: {}", err.as_deref().unwrap_or("")),
                ]);
                w.write_record(row)?;
            }
        }
    }
    w.flush()?;

    // (n_labeled, contamination bits, n_clusters, mode) -> accuracies over seeds
    type Key = (usize, u64, usize, String);
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    let mut by_k: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    let mut contamination_of: BTreeMap<u64, f64> = BTreeMap::new();
    for o in outcomes {
        let Some(reports) = &o.reports else { continue };
        for r in reports {
            let bits = ordered_bits(o.cell.contamination);
            contamination_of.insert(bits, o.cell.contamination);
            groups
                .entry((
                    o.cell.n_labeled,
                    bits,
                    o.cell.n_clusters,
                    r.sampler_mode.clone(),
                ))
                .or_default()
                .push(r.test_accuracy);
            by_k.entry((o.cell.n_clusters, r.sampler_mode.clone()))
                .or_default()
                .push(r.test_accuracy);
        }
    }
    let mut w = csv::Writer::from_writer(create(&out.join("sweep_summary.csv"))?);
    w.write_record([
        "n_labeled",
        "contamination",
        "n_clusters",
        "sampler_mode",
        "runs",
        "mean_accuracy",
        "std_accuracy",
    ])?;
    for ((l, bits, k, mode), acc) in &groups {
        let (m, s) = mean_std(acc);
        w.write_record([
            l.to_string(),
            contamination_of[bits].to_string(),
            k.to_string(),
            mode.clone(),
            acc.len().to_string(),
            fmt_metric(m),
            fmt_metric(s),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&out.join("sweep_n_clusters.csv"))?);
    w.write_record([
        "n_clusters",
        "sampler_mode",
        "runs",
        "mean_accuracy",
        "std_accuracy",
    ])?;
    for ((k, mode), acc) in &by_k {
        let (m, s) = mean_std(acc);
        w.write_record([
            k.to_string(),
            mode.clone(),
            acc.len().to_string(),
            fmt_metric(m),
            fmt_metric(s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Sort key for non-negative floats.
fn ordered_bits(v: f64) -> u64 {
    v.to_bits()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            n_labeled: 8,
            n_unlabeled_inlier: 60,
            n_ood: 40,
            n_val: 20,
            n_test: 40,
            classes: 2,
            n_ood_components: 2,
            raw_dim: 6,
            group_size: 5,
            ssl_epochs: 2,
            ssl_batch_n: 16,
            ssl_hidden: vec![8],
            latent_dim: 4,
            n_clusters: 4,
            em_restarts: 2,
            epochs: 1,
            steps_per_epoch: 10,
            plan_preview_draws: 100,
            classifier_hidden: vec![8],
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = PipelineConfig {
            contamination: Some(1.5),
            ..tiny()
        };
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(
            PipelineConfig::from_toml("").unwrap(),
            PipelineConfig::default()
        );
        assert!(PipelineConfig::from_toml("no_such_key = 1")
            .unwrap_err()
            .is_validation());
        assert!(PipelineConfig::from_toml("delta = 0.0")
            .unwrap_err()
            .is_validation());
        assert_eq!(c.effective_n_ood(), 90);
    }

    #[test]
    fn dependency_error_names_upstream_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny(), dir.path()).unwrap();
        match p.run_stage(Stage::FitGmm) {
            Err(Error::Dependency {
                stage, requires, ..
            }) => {
                assert_eq!(stage, "fit-gmm");
                assert_eq!(requires, "train-ssl");
            }
            other => panic!("expected dependency error, got {other:?}"),
        }
    }

    #[test]
    fn stages_skip_when_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny(), dir.path()).unwrap();
        let manifest = p.run_all().unwrap();
        assert_eq!(manifest.stages.len(), Stage::ALL.len());
        let bytes = fs::read(p.path(MANIFEST)).unwrap();
        for stage in Stage::ALL {
            assert_eq!(p.run_stage(stage).unwrap(), StageStatus::Skipped);
        }
        assert_eq!(fs::read(p.path(MANIFEST)).unwrap(), bytes);

        let changed = Pipeline::new(PipelineConfig { seed: 5, ..tiny() }, dir.path()).unwrap();
        assert_eq!(
            changed.run_stage(Stage::GenSynth).unwrap(),
            StageStatus::Ran
        );
    }

    #[test]
    fn identical_configs_give_identical_reports() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        Pipeline::new(tiny(), a.path()).unwrap().run_all().unwrap();
        Pipeline::new(tiny(), b.path()).unwrap().run_all().unwrap();
        for name in [
            artifacts::REPORT,
            artifacts::ACCURACY,
            artifacts::AUROC,
            artifacts::PURITY,
            artifacts::GROUPS,
            artifacts::SCORES,
        ] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }
}
