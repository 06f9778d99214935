//! Cluster impurity and per-sample OOD scores.
//!
//! A cluster's impurity is `-ln` of the share of its soft membership mass that
//! comes from labeled samples; a sample's OOD score is the membership-weighted
//! mean of the impurities of the clusters it belongs to.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{e_step, GmmModel, Responsibilities};
use crate::scalar::Scalar;
use crate::store::{Split, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `(s - min) / (max - min)` over the unlabeled pool.
    #[default]
    MinMax,
    /// Mid-rank of the score within the unlabeled pool, scaled to `[0, 1]`.
    Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    /// Smoothing added to the labeled mass and the total mass.
    pub delta: f64,
    pub normalization: Normalization,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            delta: 1e-6,
            normalization: Normalization::MinMax,
        }
    }
}

/// Labeled (`L_j`) and unlabeled (`U_j`) membership mass per cluster.
pub fn cluster_masses<T: Scalar>(
    resp: &Responsibilities<T>,
    labeled_mask: &[bool],
) -> Result<(Vec<T>, Vec<T>)> {
    if labeled_mask.len() != resp.n_samples {
        return Err(Error::InvalidArgument(format!(
            "labeled mask has {} entries for {} responsibility rows",
            labeled_mask.len(),
            resp.n_samples
        )));
    }
    let k = resp.n_components;
    let mut labeled = vec![T::zero(); k];
    let mut unlabeled = vec![T::zero(); k];
    for (row, &is_labeled) in resp.rows().zip(labeled_mask) {
        let acc = if is_labeled {
            &mut labeled
        } else {
            &mut unlabeled
        };
        for (a, &r) in acc.iter_mut().zip(row) {
            *a += r;
        }
    }
    Ok((labeled, unlabeled))
}

/// Impurity of one cluster from its labeled and unlabeled mass.
pub fn impurity<T: Scalar>(labeled: T, unlabeled: T, delta: T) -> T {
    -((labeled + delta) / (labeled + unlabeled + delta)).ln()
}

/// `CIS_j = -ln((L_j + δ) / (L_j + U_j + δ))` for every cluster. A cluster with
/// no mass at all gets 0 and a warning.
pub fn cluster_impurity<T: Scalar>(
    resp: &Responsibilities<T>,
    labeled_mask: &[bool],
    delta: T,
) -> Result<Vec<T>> {
    if !(delta > T::zero()) {
        return Err(Error::InvalidArgument(
            "impurity smoothing must be > 0".into(),
        ));
    }
    let (labeled, unlabeled) = cluster_masses(resp, labeled_mask)?;
    Ok(labeled
        .iter()
        .zip(&unlabeled)
        .enumerate()
        .map(|(j, (&l, &u))| {
            if l + u == T::zero() {
                log::warn!("cluster {j} has no membership mass; impurity set to 0");
            }
            impurity(l, u, delta)
        })
        .collect())
}

/// `Σ_j CIS_j · φ_j` for one membership row.
pub fn ood_score<T: Scalar>(row: &[T], cis: &[T]) -> Result<T> {
    if row.len() != cis.len() {
        return Err(Error::InvalidArgument(format!(
            "membership row has {} entries for {} clusters",
            row.len(),
            cis.len()
        )));
    }
    Ok(row.iter().zip(cis).map(|(&p, &c)| p * c).sum())
}

/// Maps raw scores into `[0, 1]` relative to a reference pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<T> {
    mode: Normalization,
    sorted_pool: Vec<T>,
}

impl<T: Scalar> Normalizer<T> {
    pub fn fit(pool: &[T], mode: Normalization) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot normalise against an empty pool".into(),
            ));
        }
        let mut sorted_pool = pool.to_vec();
        sorted_pool.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        Ok(Normalizer { mode, sorted_pool })
    }

    pub fn apply(&self, s: T) -> T {
        let pool = &self.sorted_pool;
        let (lo, hi) = (pool[0], pool[pool.len() - 1]);
        if lo == hi {
            return T::of(0.5);
        }
        let v = match self.mode {
            Normalization::MinMax => (s - lo) / (hi - lo),
            Normalization::Rank => {
                let below = pool.partition_point(|&p| p < s);
                let upto = pool.partition_point(|&p| p <= s);
                let mid = T::of_usize(below) + T::of(0.5) * T::of_usize(upto - below) - T::of(0.5);
                mid / T::of_usize(pool.len() - 1)
            }
        };
        v.max(T::zero()).min(T::one())
    }
}

/// Normalises a pool of raw scores against itself. A constant pool (including
/// a single score) maps to 0.5 everywhere.
pub fn normalize_scores<T: Scalar>(scores: &[T], mode: Normalization) -> Result<Vec<T>> {
    let n = Normalizer::fit(scores, mode)?;
    Ok(scores.iter().map(|&s| n.apply(s)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ScoreEntry<T: Scalar> {
    pub id: String,
    pub split: Split,
    /// Argmax-responsibility cluster.
    pub cluster: usize,
    pub ood_score: T,
    pub ood_score_norm: T,
}

/// Per-cluster impurities and per-sample scores for every record of a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct OodScoreTable<T: Scalar> {
    pub cis: Vec<T>,
    /// `L_j + U_j` per cluster.
    pub cluster_mass: Vec<T>,
    pub delta: T,
    pub normalization: Normalization,
    pub entries: Vec<ScoreEntry<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct Sidecar<T: Scalar> {
    n_components: usize,
    delta: T,
    normalization: Normalization,
    cis: Vec<T>,
    cluster_mass: Vec<T>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    id: String,
    cluster: usize,
    ood_score: String,
    ood_score_norm: String,
}

impl<T: Scalar> OodScoreTable<T> {
    pub fn n_clusters(&self) -> usize {
        self.cis.len()
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &ScoreEntry<T>> {
        self.entries.iter().filter(|e| e.split == Split::Unlabeled)
    }

    pub fn get(&self, id: &str) -> Option<&ScoreEntry<T>> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Writes `id,cluster,ood_score,ood_score_norm`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for e in &self.entries {
            wtr.serialize(CsvRow {
                id: e.id.clone(),
                cluster: e.cluster,
                ood_score: format!("{:.16e}", e.ood_score.as_f64()),
                ood_score_norm: format!("{:.16e}", e.ood_score_norm.as_f64()),
            })?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// JSON sidecar with the impurity vector and the smoothing constant.
    pub fn write_sidecar<W: Write>(&self, w: W) -> Result<()> {
        let side = Sidecar {
            n_components: self.cis.len(),
            delta: self.delta,
            normalization: self.normalization,
            cis: self.cis.clone(),
            cluster_mass: self.cluster_mass.clone(),
        };
        serde_json::to_writer_pretty(w, &side)?;
        Ok(())
    }

    /// Reads a table back; splits come from the store the table was built on.
    pub fn read<R1: Read, R2: Read>(csv_reader: R1, sidecar: R2, store: &Store) -> Result<Self> {
        let side: Sidecar<T> = serde_json::from_reader(sidecar)?;
        let mut rdr = csv::Reader::from_reader(csv_reader);
        let mut entries = Vec::new();
        for (n, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row?;
            let location = format!("line {}", n + 2);
            let parse = |s: &str| {
                s.parse::<f64>().map(T::of).map_err(|_| Error::Parse {
                    location: location.clone(),
                    message: format!("malformed score `{s}`"),
                })
            };
            let split = store
                .get(&row.id)
                .ok_or_else(|| Error::Parse {
                    location: location.clone(),
                    message: format!("score for unknown record `{}`", row.id),
                })?
                .split;
            if row.cluster >= side.cis.len() {
                return Err(Error::Parse {
                    location,
                    message: format!("cluster {} out of range", row.cluster),
                });
            }
            entries.push(ScoreEntry {
                ood_score: parse(&row.ood_score)?,
                ood_score_norm: parse(&row.ood_score_norm)?,
                id: row.id,
                split,
                cluster: row.cluster,
            });
        }
        Ok(OodScoreTable {
            cis: side.cis,
            cluster_mass: side.cluster_mass,
            delta: side.delta,
            normalization: side.normalization,
            entries,
        })
    }
}

/// Scores every record of an embedding store against a fitted mixture.
/// Impurities use labeled and unlabeled records; validation and test records
/// are scored but contribute no mass. Normalisation is fitted on the
/// unlabeled pool (all records when there is none).
pub fn score_table<T: Scalar>(
    model: &GmmModel<T>,
    store: &Store,
    config: &ScoreConfig,
) -> Result<OodScoreTable<T>> {
    if store.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty store".into()));
    }
    let delta = T::of(config.delta);
    let data: Vec<Vec<T>> = store.vectors();
    let resp = e_step(model, &data)?;
    let records = store.records();

    // sum masses in id order so the result does not depend on record order
    let mut train: Vec<usize> = (0..records.len())
        .filter(|&i| matches!(records[i].split, Split::Labeled | Split::Unlabeled))
        .collect();
    train.sort_by(|&a, &b| records[a].id.cmp(&records[b].id));
    let train_rows: Vec<Vec<T>> = train.iter().map(|&i| resp.row(i).to_vec()).collect();
    let mask: Vec<bool> = train
        .iter()
        .map(|&i| records[i].split == Split::Labeled)
        .collect();
    let (cis, cluster_mass) = if train_rows.is_empty() {
        (
            vec![T::zero(); model.n_components()],
            vec![T::zero(); model.n_components()],
        )
    } else {
        let sub = Responsibilities::from_rows(&train_rows)?;
        let cis = cluster_impurity(&sub, &mask, delta)?;
        let (l, u) = cluster_masses(&sub, &mask)?;
        (cis, l.iter().zip(&u).map(|(&a, &b)| a + b).collect())
    };

    let raw: Vec<T> = resp
        .rows()
        .map(|row| ood_score(row, &cis))
        .collect::<Result<_>>()?;
    let hard = resp.hard_assignments();
    let pool: Vec<T> = records
        .iter()
        .zip(&raw)
        .filter(|(r, _)| r.split == Split::Unlabeled)
        .map(|(_, &s)| s)
        .collect();
    let normalizer = if pool.is_empty() {
        Normalizer::fit(&raw, config.normalization)?
    } else {
        Normalizer::fit(&pool, config.normalization)?
    };
    let entries = records
        .iter()
        .zip(raw)
        .zip(hard)
        .map(|((r, s), c)| ScoreEntry {
            id: r.id.clone(),
            split: r.split,
            cluster: c,
            ood_score: s,
            ood_score_norm: normalizer.apply(s),
        })
        .collect();
    Ok(OodScoreTable {
        cis,
        cluster_mass,
        delta,
        normalization: config.normalization,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{CovType, Covariance, GmmParams};
    use crate::store::EmbeddingRecord;
    use proptest::prelude::*;

    fn resp(rows: &[Vec<f64>]) -> Responsibilities<f64> {
        Responsibilities::from_rows(rows).unwrap()
    }

    #[test]
    fn pure_cluster_has_zero_impurity() {
        let r = resp(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let cis = cluster_impurity(&r, &[true, false], 1e-6).unwrap();
        assert_eq!(cis[0], 0.0);
        assert!(cis[1] > 13.0);
    }

    #[test]
    fn half_labeled_cluster_is_ln2() {
        assert!((impurity(2.0, 2.0, 1e-15) - std::f64::consts::LN_2).abs() < 1e-12);
        let r = resp(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]]);
        let cis = cluster_impurity(&r, &[true, true, false, false], 1e-15).unwrap();
        assert!((cis[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_only_cluster() {
        let v = impurity(0.0f64, 1.0, 1e-6);
        let expected = -(1e-6f64 / (1.0 + 1e-6)).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 13.8155).abs() < 1e-4);
    }

    #[test]
    fn vacuous_cluster_is_zero() {
        let r = resp(&[vec![1.0, 0.0]]);
        let cis = cluster_impurity(&r, &[false], 1e-6).unwrap();
        assert_eq!(cis[1], 0.0);
    }

    #[test]
    fn ood_score_examples() {
        let cis = [0.7f64, 0.7, 0.7];
        assert!((ood_score(&[0.2, 0.5, 0.3], &cis).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(ood_score(&[0.0, 1.0], &[0.1, 4.2]).unwrap(), 4.2);
        let v = ood_score(&[0.5, 0.5], &[0.0, std::f64::consts::LN_2]).unwrap();
        assert!((v - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
        assert!((v - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn normalisation_examples() {
        assert_eq!(
            normalize_scores(&[1.0, 2.0, 3.0], Normalization::MinMax).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(
            normalize_scores(&[4.0, 4.0], Normalization::MinMax).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            normalize_scores(&[4.0], Normalization::MinMax).unwrap(),
            vec![0.5]
        );
        assert_eq!(
            normalize_scores(&[4.0], Normalization::Rank).unwrap(),
            vec![0.5]
        );
        assert_eq!(
            normalize_scores(&[10.0, 1.0, 5.0, 5.0], Normalization::Rank).unwrap(),
            vec![1.0, 0.0, 0.5, 0.5]
        );
        assert!(normalize_scores::<f64>(&[], Normalization::MinMax).is_err());
    }

    fn two_cluster_model() -> GmmModel<f64> {
        GmmModel::from_params(
            GmmParams {
                priors: vec![0.5, 0.5],
                means: vec![vec![0.0, 0.0], vec![6.0, 0.0]],
                covariances: vec![Covariance::Diagonal(vec![1.0, 1.0]); 2],
            },
            CovType::Diagonal,
            0.0,
        )
    }

    fn rec(id: &str, split: Split, x: f64) -> EmbeddingRecord {
        EmbeddingRecord {
            id: id.into(),
            split,
            label: split.requires_label().then_some(0),
            vector: vec![x, 0.1],
            ood_truth: None,
            group_id: None,
        }
    }

    #[test]
    fn score_table_without_labeled_samples() {
        let store = Store::new(vec![
            rec("a", Split::Unlabeled, 0.0),
            rec("b", Split::Unlabeled, 6.0),
        ])
        .unwrap();
        let t = score_table(&two_cluster_model(), &store, &ScoreConfig::default()).unwrap();
        for (j, &c) in t.cis.iter().enumerate() {
            assert!((c - impurity(0.0, t.cluster_mass[j], 1e-6)).abs() < 1e-12);
        }
        assert_eq!(t.entries.len(), 2);
    }

    #[test]
    fn score_table_is_permutation_invariant() {
        let recs = vec![
            rec("l1", Split::Labeled, 0.2),
            rec("u1", Split::Unlabeled, 0.5),
            rec("u2", Split::Unlabeled, 5.5),
            rec("u3", Split::Unlabeled, 3.1),
            rec("t1", Split::Test, 6.2),
        ];
        let m = two_cluster_model();
        let a = score_table(
            &m,
            &Store::new(recs.clone()).unwrap(),
            &ScoreConfig::default(),
        )
        .unwrap();
        let mut rev = recs;
        rev.reverse();
        let b = score_table(&m, &Store::new(rev).unwrap(), &ScoreConfig::default()).unwrap();
        assert_eq!(a.cis, b.cis);
        for e in &a.entries {
            assert_eq!(Some(e), b.get(&e.id));
        }
        // the far cluster holds no labeled mass, so u2 outscores u1
        assert!(a.get("u2").unwrap().ood_score > a.get("u1").unwrap().ood_score);
        assert_eq!(a.get("u2").unwrap().ood_score_norm, 1.0);
        assert_eq!(a.get("t1").unwrap().cluster, 1);
    }

    #[test]
    fn csv_and_sidecar_round_trip() {
        let recs = vec![
            rec("l1", Split::Labeled, 0.2),
            rec("u1", Split::Unlabeled, 0.5),
            rec("u2", Split::Unlabeled, 5.5),
        ];
        let store = Store::new(recs).unwrap();
        let t = score_table(&two_cluster_model(), &store, &ScoreConfig::default()).unwrap();
        let (mut csv_buf, mut side) = (Vec::new(), Vec::new());
        t.write_csv(&mut csv_buf).unwrap();
        t.write_sidecar(&mut side).unwrap();
        assert!(String::from_utf8(csv_buf.clone())
            .unwrap()
            .starts_with("id,cluster,ood_score,ood_score_norm\n"));
        let back = OodScoreTable::<f64>::read(csv_buf.as_slice(), side.as_slice(), &store).unwrap();
        assert_eq!(back, t);
    }

    fn stochastic(v: &[f64]) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn score_is_convex_combination(
            raw in prop::collection::vec(0.001f64..1.0, 5),
            cis in prop::collection::vec(0.0f64..20.0, 5),
        ) {
            let row = stochastic(&raw);
            let s = ood_score(&row, &cis).unwrap();
            let lo = cis.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = cis.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn more_mass_on_worst_cluster_never_lowers_score(
            raw in prop::collection::vec(0.01f64..1.0, 4),
            cis in prop::collection::vec(0.0f64..20.0, 4),
            t in 0.0f64..1.0,
        ) {
            let row = stochastic(&raw);
            let worst = crate::scalar::argmax(&cis);
            // move a fraction t of the remaining mass onto the worst cluster
            let moved: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &p)| if j == worst { p + t * (1.0 - p) } else { p * (1.0 - t) })
                .collect();
            prop_assert!(ood_score(&moved, &cis).unwrap() >= ood_score(&row, &cis).unwrap() - 1e-12);
        }

        #[test]
        fn labeled_sample_does_not_raise_its_cluster_impurity(
            rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 2..12),
            labeled in prop::collection::vec(any::<bool>(), 12),
            j in 0usize..3,
        ) {
            let rows: Vec<Vec<f64>> = rows.iter().map(|r| stochastic(r)).collect();
            let mask: Vec<bool> = labeled[..rows.len()].to_vec();
            let before = cluster_impurity(&resp(&rows), &mask, 1e-6).unwrap();
            let mut extra = rows.clone();
            let mut onehot = vec![0.0; 3];
            onehot[j] = 1.0;
            extra.push(onehot);
            let mut mask2 = mask.clone();
            mask2.push(true);
            let after = cluster_impurity(&resp(&extra), &mask2, 1e-6).unwrap();
            prop_assert!(after[j] <= before[j] + 1e-12);
        }
    }
}
