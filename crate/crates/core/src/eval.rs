//! Evaluation metrics and report assembly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ood::OodScoreTable;
use crate::scalar::Scalar;
use crate::store::{Split, Store};

/// 1-based ranks with tied values sharing the mean of their positions.
pub fn mid_ranks<T: Scalar>(values: &[T]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve via the Mann–Whitney statistic; ties count half.
pub fn auroc<T: Scalar>(scores: &[T], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidArgument(
            "scores and labels differ in length".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "auroc needs both classes present".into(),
        ));
    }
    let ranks = mid_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "predictions and labels differ in length".into(),
        ));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Entropy of the vote histogram, in nats (or bits).
pub fn vote_entropy(votes: &[usize], bits: bool) -> Result<f64> {
    if votes.is_empty() {
        return Err(Error::InvalidArgument(
            "vote entropy of an empty group".into(),
        ));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let n = votes.len() as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let f = c as f64 / n;
            -f * f.ln()
        })
        .sum();
    // a unanimous vote gives -1·ln 1 = -0.0
    let h = h.max(0.0);
    Ok(if bits { h / std::f64::consts::LN_2 } else { h })
}

/// Plurality vote, or the class with the largest summed weight. Ties go to
/// the smallest class index.
pub fn aggregate_group<T: Scalar>(predictions: &[usize], weights: Option<&[T]>) -> Result<usize> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate an empty group".into(),
        ));
    }
    if let Some(w) = weights {
        if w.len() != predictions.len() {
            return Err(Error::InvalidArgument(
                "weights and predictions differ in length".into(),
            ));
        }
    }
    let n_classes = predictions.iter().max().map_or(0, |m| m + 1);
    let mut totals = vec![T::zero(); n_classes];
    for (i, &c) in predictions.iter().enumerate() {
        totals[c] += weights.map_or(T::one(), |w| w[i]);
    }
    let mut best = predictions.iter().copied().min().expect("non-empty");
    for (c, &t) in totals.iter().enumerate() {
        if t > totals[best] {
            best = c;
        }
    }
    Ok(best)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Spearman rank correlation; `None` when either side is constant or fewer
/// than two pairs are given.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (mid_ranks(a), mid_ranks(b));
    let (ma, _) = mean_std(&ra);
    let (mb, _) = mean_std(&rb);
    let mut num = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(num / (va * vb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityRow {
    pub cluster: usize,
    pub cis: f64,
    pub inliers: usize,
    pub ood: usize,
}

impl PurityRow {
    pub fn ood_fraction(&self) -> Option<f64> {
        let n = self.inliers + self.ood;
        (n > 0).then(|| self.ood as f64 / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    pub rows: Vec<PurityRow>,
    /// Spearman correlation between CIS and OOD fraction over non-empty clusters.
    pub rank_correlation: Option<f64>,
}

/// Inlier/OOD counts per cluster over the samples the mixture was fitted on
/// (labeled and unlabeled), by hard assignment.
pub fn cluster_purity_report<T: Scalar>(
    table: &OodScoreTable<T>,
    store: &Store,
) -> Result<PurityReport> {
    let mut rows: Vec<PurityRow> = table
        .cis
        .iter()
        .enumerate()
        .map(|(cluster, c)| PurityRow {
            cluster,
            cis: c.as_f64(),
            inliers: 0,
            ood: 0,
        })
        .collect();
    for e in table
        .entries
        .iter()
        .filter(|e| matches!(e.split, Split::Labeled | Split::Unlabeled))
    {
        let rec = store.get(&e.id).ok_or_else(|| {
            Error::InvalidArgument(format!("score table id `{}` not in store", e.id))
        })?;
        match rec.ood_truth {
            Some(true) => rows[e.cluster].ood += 1,
            Some(false) => rows[e.cluster].inliers += 1,
            None => {
                return Err(Error::InvalidArgument(format!(
                    "record `{}` has no ood_truth; purity needs ground truth",
                    e.id
                )))
            }
        }
    }
    let (cis, frac): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.ood_fraction().map(|f| (r.cis, f)))
        .unzip();
    Ok(PurityReport {
        rank_correlation: spearman(&cis, &frac),
        rows,
    })
}

/// Bag-level outcome for one group of test records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group_id: String,
    pub size: usize,
    /// Plurality of the members' true labels.
    pub label: usize,
    pub plurality: usize,
    pub weighted: usize,
    /// Entropy of the member predictions, in nats.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub groups: Vec<GroupResult>,
    pub plurality_accuracy: Option<f64>,
    pub weighted_accuracy: Option<f64>,
    pub mean_entropy: Option<f64>,
    /// Mean entropy over groups whose plurality vote is correct.
    pub mean_entropy_correct: Option<f64>,
}

/// Aggregates test predictions per `group_id`. Weighted votes use
/// `1 - normalised OOD score` of each member.
pub fn aggregate_groups<T: Scalar>(
    store: &Store,
    predictions: &BTreeMap<String, usize>,
    table: &OodScoreTable<T>,
) -> Result<GroupSummary> {
    let mut members: BTreeMap<&str, Vec<(usize, usize, T)>> = BTreeMap::new();
    for r in store.split(Split::Test) {
        let Some(g) = r.group_id.as_deref() else {
            continue;
        };
        let pred = *predictions
            .get(&r.id)
            .ok_or_else(|| Error::InvalidArgument(format!("no prediction for `{}`", r.id)))?;
        let w = table
            .get(&r.id)
            .map_or(T::one(), |e| T::one() - e.ood_score_norm);
        members
            .entry(g)
            .or_default()
            .push((r.label.expect("validated"), pred, w));
    }
    let mut groups = Vec::with_capacity(members.len());
    for (g, m) in members {
        let truth: Vec<usize> = m.iter().map(|x| x.0).collect();
        let preds: Vec<usize> = m.iter().map(|x| x.1).collect();
        let weights: Vec<T> = m.iter().map(|x| x.2).collect();
        groups.push(GroupResult {
            group_id: g.to_string(),
            size: m.len(),
            label: aggregate_group::<T>(&truth, None)?,
            plurality: aggregate_group::<T>(&preds, None)?,
            weighted: aggregate_group(&preds, Some(&weights))?,
            entropy: vote_entropy(&preds, false)?,
        });
    }
    let frac = |f: &dyn Fn(&GroupResult) -> bool| -> Option<f64> {
        (!groups.is_empty())
            .then(|| groups.iter().filter(|g| f(g)).count() as f64 / groups.len() as f64)
    };
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| mean_std(&v).0);
    Ok(GroupSummary {
        plurality_accuracy: frac(&|g| g.plurality == g.label),
        weighted_accuracy: frac(&|g| g.weighted == g.label),
        mean_entropy: mean(groups.iter().map(|g| g.entropy).collect()),
        mean_entropy_correct: mean(
            groups
                .iter()
                .filter(|g| g.plurality == g.label)
                .map(|g| g.entropy)
                .collect(),
        ),
        groups,
    })
}

/// Evaluation of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sampler_mode: String,
    pub seed: u64,
    pub test_accuracy: f64,
    /// OOD score AUROC: held-out test inliers against the unlabeled OOD samples.
    pub auroc: Option<f64>,
    /// OOD score AUROC inside the unlabeled pool.
    pub auroc_pool: Option<f64>,
    pub purity: PurityReport,
    pub groups: GroupSummary,
    pub config: serde_json::Value,
}

/// OOD-detection AUROCs `(held-out, pool)`; `None` where a class is missing.
pub fn ood_aurocs<T: Scalar>(
    table: &OodScoreTable<T>,
    store: &Store,
) -> (Option<f64>, Option<f64>) {
    let mut held = (Vec::new(), Vec::new());
    let mut pool = (Vec::new(), Vec::new());
    for e in &table.entries {
        let Some(truth) = store.get(&e.id).and_then(|r| r.ood_truth) else {
            continue;
        };
        match e.split {
            Split::Test if !truth => {
                held.0.push(e.ood_score);
                held.1.push(false);
            }
            Split::Unlabeled => {
                pool.0.push(e.ood_score);
                pool.1.push(truth);
                if truth {
                    held.0.push(e.ood_score);
                    held.1.push(true);
                }
            }
            _ => {}
        }
    }
    (auroc(&held.0, &held.1).ok(), auroc(&pool.0, &pool.1).ok())
}
