//! Two-stage OOD-aware sampler for unlabeled mini-batches.
//!
//! Clusters with (near-)equal impurity are merged into super-clusters once
//! per fitted mixture. Each draw then picks a super-cluster with probability
//! proportional to `1 / (CIS + δ_w)` and a member of it with probability
//! proportional to `1 / (OOD + δ_w)`. Both stages use alias tables.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ood::OodScoreTable;
use crate::scalar::Scalar;

/// Walker/Vose alias table for O(1) draws from a discrete distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AliasTable<T: Scalar> {
    pub prob: Vec<T>,
    pub alias: Vec<usize>,
}

impl<T: Scalar> AliasTable<T> {
    /// Builds a table from non-negative weights with a positive sum.
    pub fn new(weights: &[T]) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "alias table needs at least one weight".into(),
            ));
        }
        if weights.iter().any(|&w| !(w >= T::zero()) || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "alias weights must be finite and >= 0".into(),
            ));
        }
        let total: T = weights.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(Error::InvalidArgument("alias weights sum to zero".into()));
        }
        let n_t = T::of_usize(n);
        let mut scaled: Vec<T> = weights.iter().map(|&w| w * n_t / total).collect();
        let mut prob = vec![T::one(); n];
        let mut alias: Vec<usize> = (0..n).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&i| scaled[i] < T::one());
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] = (scaled[l] + scaled[s]) - T::one();
            if scaled[l] < T::one() {
                large.pop();
                small.push(l);
            }
        }
        // leftovers are 1 up to rounding
        for i in small.into_iter().chain(large) {
            prob[i] = T::one();
            alias[i] = i;
        }
        Ok(AliasTable { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        let i = rng.random_range(0..self.prob.len());
        let u: f64 = rng.random();
        if T::of(u) < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }

    /// Exact single-draw probability of every outcome implied by the table.
    pub fn probabilities(&self) -> Vec<T> {
        let n = self.prob.len();
        let n_t = T::of_usize(n);
        let mut p: Vec<T> = self.prob.iter().map(|&q| q / n_t).collect();
        for i in 0..n {
            p[self.alias[i]] += (T::one() - self.prob[i]) / n_t;
        }
        p
    }
}

/// A partition of clusters into groups with pairwise distinct impurity.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperClusters<T> {
    /// Member clusters per group, ascending; groups ordered by first member.
    pub groups: Vec<Vec<usize>>,
    pub group_cis: Vec<T>,
}

/// Merges clusters whose impurities lie within `tolerance` of each other,
/// chaining through intermediate values. Group impurity is the mean of the
/// members weighted by `masses` (a plain mean when masses are absent or zero).
pub fn merge_super_clusters<T: Scalar>(
    cis: &[T],
    tolerance: T,
    masses: Option<&[T]>,
) -> Result<SuperClusters<T>> {
    if cis.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("impurities must be finite".into()));
    }
    if let Some(m) = masses {
        if m.len() != cis.len() {
            return Err(Error::InvalidArgument(
                "masses and impurities differ in length".into(),
            ));
        }
    }
    let mut order: Vec<usize> = (0..cis.len()).collect();
    order.sort_by(|&a, &b| cis[a].partial_cmp(&cis[b]).expect("finite").then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (pos, &j) in order.iter().enumerate() {
        if pos > 0 && cis[j] - cis[order[pos - 1]] <= tolerance {
            groups.last_mut().expect("non-empty").push(j);
        } else {
            groups.push(vec![j]);
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    let group_cis = groups
        .iter()
        .map(|g| {
            let w: Vec<T> = match masses {
                Some(m) => g.iter().map(|&j| m[j]).collect(),
                None => vec![T::one(); g.len()],
            };
            let total: T = w.iter().copied().sum();
            if total > T::zero() {
                g.iter().zip(&w).map(|(&j, &wj)| cis[j] * wj).sum::<T>() / total
            } else {
                g.iter().map(|&j| cis[j]).sum::<T>() / T::of_usize(g.len())
            }
        })
        .collect();
    Ok(SuperClusters { groups, group_cis })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PlanGroup<T: Scalar> {
    pub clusters: Vec<usize>,
    pub cis: T,
    /// Probability of selecting this group.
    pub weight: T,
    pub members: Vec<String>,
    pub member_scores: Vec<T>,
    /// Within-group selection probabilities.
    pub member_weights: Vec<T>,
    pub alias: AliasTable<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SamplerPlan<T: Scalar> {
    pub tolerance: T,
    pub delta_w: T,
    pub seed: u64,
    pub groups: Vec<PlanGroup<T>>,
    pub group_alias: AliasTable<T>,
}

/// One drawn unlabeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw<T> {
    pub id: String,
    pub group: usize,
    pub ood_score: T,
}

fn normalised<T: Scalar>(w: Vec<T>) -> Vec<T> {
    let total: T = w.iter().copied().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Builds the sampling plan from a score table. Unlabeled samples join the
/// group of their hard-assigned cluster; groups left without members are
/// dropped and the remaining group weights renormalised.
pub fn build_plan<T: Scalar>(
    table: &OodScoreTable<T>,
    tolerance: T,
    delta_w: T,
    seed: u64,
) -> Result<SamplerPlan<T>> {
    if !(delta_w > T::zero()) {
        return Err(Error::InvalidArgument("sampler delta_w must be > 0".into()));
    }
    if !(tolerance >= T::zero()) {
        return Err(Error::InvalidArgument(
            "merge tolerance must be >= 0".into(),
        ));
    }
    if table.unlabeled().next().is_none() {
        return Err(Error::InvalidArgument(
            "sampler plan needs at least one unlabeled sample".into(),
        ));
    }
    let merged = merge_super_clusters(&table.cis, tolerance, Some(&table.cluster_mass))?;
    let mut group_of = vec![0usize; table.n_clusters()];
    for (g, members) in merged.groups.iter().enumerate() {
        for &j in members {
            group_of[j] = g;
        }
    }
    let mut members: Vec<Vec<(String, T)>> = vec![Vec::new(); merged.groups.len()];
    for e in table.unlabeled() {
        members[group_of[e.cluster]].push((e.id.clone(), e.ood_score));
    }

    let mut groups = Vec::new();
    for ((clusters, cis), mem) in merged.groups.into_iter().zip(merged.group_cis).zip(members) {
        if mem.is_empty() {
            continue;
        }
        let (ids, scores): (Vec<String>, Vec<T>) = mem.into_iter().unzip();
        let member_weights = normalised(scores.iter().map(|&s| T::one() / (s + delta_w)).collect());
        let alias = AliasTable::new(&member_weights)?;
        groups.push(PlanGroup {
            clusters,
            cis,
            weight: T::one() / (cis + delta_w),
            members: ids,
            member_scores: scores,
            member_weights,
            alias,
        });
    }
    let weights = normalised(groups.iter().map(|g| g.weight).collect());
    for (g, w) in groups.iter_mut().zip(&weights) {
        g.weight = *w;
    }
    let group_alias = AliasTable::new(&weights)?;
    Ok(SamplerPlan {
        tolerance,
        delta_w,
        seed,
        groups,
        group_alias,
    })
}

/// Source of unlabeled mini-batches.
pub trait UnlabeledSampler<T: Scalar>: Send + Sync {
    fn draw(&self, rng: &mut dyn RngCore) -> Draw<T>;

    /// Analytic expected OOD score of one draw.
    fn expected_ood(&self) -> T;

    fn draw_batch(&self, batch_size: usize, rng: &mut dyn RngCore) -> Vec<Draw<T>> {
        (0..batch_size).map(|_| self.draw(rng)).collect()
    }
}

impl<T: Scalar> SamplerPlan<T> {
    /// Generator seeded from the plan seed.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    pub fn n_members(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    /// `(id, probability)` of every member under one draw, from plan weights.
    pub fn draw_probabilities(&self) -> Vec<(&str, T)> {
        self.groups
            .iter()
            .flat_map(|g| {
                g.members
                    .iter()
                    .zip(&g.member_weights)
                    .map(move |(id, &w)| (id.as_str(), g.weight * w))
            })
            .collect()
    }
}

impl<T: Scalar> UnlabeledSampler<T> for SamplerPlan<T> {
    fn draw(&self, rng: &mut dyn RngCore) -> Draw<T> {
        let g = self.group_alias.sample(rng);
        let group = &self.groups[g];
        let k = group.alias.sample(rng);
        Draw {
            id: group.members[k].clone(),
            group: g,
            ood_score: group.member_scores[k],
        }
    }

    fn expected_ood(&self) -> T {
        self.groups
            .iter()
            .map(|g| {
                g.weight
                    * g.member_scores
                        .iter()
                        .zip(&g.member_weights)
                        .map(|(&s, &w)| s * w)
                        .sum::<T>()
            })
            .sum()
    }
}

/// Draws `batch_size` samples with replacement, advancing `rng`.
pub fn draw_batch<T: Scalar, R: RngCore>(
    plan: &SamplerPlan<T>,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Draw<T>> {
    plan.draw_batch(batch_size, rng)
}

/// Uniform draws from the whole unlabeled pool (the ablation baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct UniformSampler<T> {
    pub members: Vec<String>,
    pub scores: Vec<T>,
}

impl<T: Scalar> UniformSampler<T> {
    pub fn from_table(table: &OodScoreTable<T>) -> Result<Self> {
        let (members, scores): (Vec<String>, Vec<T>) = table
            .unlabeled()
            .map(|e| (e.id.clone(), e.ood_score))
            .unzip();
        Self::new(members, scores)
    }

    pub fn new(members: Vec<String>, scores: Vec<T>) -> Result<Self> {
        if members.is_empty() || members.len() != scores.len() {
            return Err(Error::InvalidArgument(
                "uniform sampler needs a non-empty pool".into(),
            ));
        }
        Ok(UniformSampler { members, scores })
    }
}

impl<T: Scalar> UnlabeledSampler<T> for UniformSampler<T> {
    fn draw(&self, rng: &mut dyn RngCore) -> Draw<T> {
        let k = rng.random_range(0..self.members.len());
        Draw {
            id: self.members[k].clone(),
            group: 0,
            ood_score: self.scores[k],
        }
    }

    fn expected_ood(&self) -> T {
        self.scores.iter().copied().sum::<T>() / T::of_usize(self.scores.len())
    }
}

/// Equal-width histogram over `[min, max]` of a reference range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Histogram<T: Scalar> {
    pub edges: Vec<T>,
    pub counts: Vec<usize>,
}

impl<T: Scalar> Histogram<T> {
    /// Bins `values` over the range spanned by `reference`.
    pub fn new(
        values: impl IntoIterator<Item = T>,
        reference: &[T],
        n_bins: usize,
    ) -> Result<Self> {
        if n_bins == 0 || reference.is_empty() {
            return Err(Error::InvalidArgument(
                "histogram needs >= 1 bin and a non-empty range".into(),
            ));
        }
        let lo = reference.iter().copied().fold(T::infinity(), T::min);
        let hi = reference.iter().copied().fold(T::neg_infinity(), T::max);
        let width = (hi - lo) / T::of_usize(n_bins);
        let edges = (0..=n_bins).map(|b| lo + width * T::of_usize(b)).collect();
        let mut counts = vec![0usize; n_bins];
        for v in values {
            let b = if width > T::zero() {
                ((v - lo) / width)
                    .floor()
                    .max(T::zero())
                    .to_usize()
                    .unwrap_or(0)
                    .min(n_bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Ok(Histogram { edges, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `bin_lo,bin_hi,count` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["bin_lo", "bin_hi", "count"])?;
        for (b, c) in self.counts.iter().enumerate() {
            wtr.write_record([
                format!("{:.16e}", self.edges[b].as_f64()),
                format!("{:.16e}", self.edges[b + 1].as_f64()),
                c.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Histogram of drawn samples' OOD scores over the unlabeled pool's range.
pub fn exposure_histogram<T: Scalar>(
    draws: &[Draw<T>],
    table: &OodScoreTable<T>,
    n_bins: usize,
) -> Result<Histogram<T>> {
    if draws.is_empty() {
        return Err(Error::InvalidArgument(
            "exposure histogram of an empty draw log".into(),
        ));
    }
    let pool: Vec<T> = table.unlabeled().map(|e| e.ood_score).collect();
    let reference = if pool.is_empty() {
        draws.iter().map(|d| d.ood_score).collect()
    } else {
        pool
    };
    Histogram::new(draws.iter().map(|d| d.ood_score), &reference, n_bins)
}

/// Writes a draw log as `step,id,group,ood_score`.
pub fn write_draw_log<T: Scalar, W: Write>(log: &[(usize, Draw<T>)], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["step", "id", "group", "ood_score"])?;
    for (step, d) in log {
        wtr.write_record([
            step.to_string(),
            d.id.clone(),
            d.group.to_string(),
            format!("{:.16e}", d.ood_score.as_f64()),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ood::{Normalization, ScoreEntry};
    use crate::store::Split;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn table(cis: Vec<f64>, members: &[(usize, f64)]) -> OodScoreTable<f64> {
        let k = cis.len();
        OodScoreTable {
            cis,
            cluster_mass: vec![1.0; k],
            delta: 1e-6,
            normalization: Normalization::MinMax,
            entries: members
                .iter()
                .enumerate()
                .map(|(i, &(c, s))| ScoreEntry {
                    id: format!("u{i}"),
                    split: Split::Unlabeled,
                    cluster: c,
                    ood_score: s,
                    ood_score_norm: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn alias_table_is_exact() {
        let w = [0.1f64, 0.4, 0.2, 0.3];
        let t = AliasTable::new(&w).unwrap();
        for (p, q) in t.probabilities().iter().zip(w) {
            assert!((p - q).abs() < 1e-15);
        }
        let t = AliasTable::new(&[5.0f64]).unwrap();
        assert_eq!(t.probabilities(), vec![1.0]);
        assert!(AliasTable::<f64>::new(&[0.0, 0.0]).is_err());
        assert!(AliasTable::<f64>::new(&[]).is_err());
    }

    #[test]
    fn merge_examples() {
        let m = merge_super_clusters(&[0.1, 0.5, 0.9], 1e-9, None).unwrap();
        assert_eq!(m.groups, vec![vec![0], vec![1], vec![2]]);
        let m = merge_super_clusters(&[0.5, 0.5, 0.9], 1e-9, None).unwrap();
        assert_eq!(m.groups, vec![vec![0, 1], vec![2]]);
        let m = merge_super_clusters(&[0.5, 0.5 + 1e-10, 0.9], 1e-9, None).unwrap();
        assert_eq!(m.groups, vec![vec![0, 1], vec![2]]);
        // chaining joins values further apart than the tolerance
        let m = merge_super_clusters(&[0.0, 0.6, 0.3], 0.35, None).unwrap();
        assert_eq!(m.groups, vec![vec![0, 1, 2]]);
        let m = merge_super_clusters(&[1.0, 2.0], 5.0, Some(&[3.0, 1.0])).unwrap();
        assert_eq!(m.group_cis, vec![1.25]);
    }

    #[test]
    fn two_group_weights() {
        let ln2 = std::f64::consts::LN_2;
        let t = table(vec![0.0, ln2], &[(0, 0.0), (1, ln2)]);
        let plan = build_plan(&t, 1e-9, 1e-3, 0).unwrap();
        let w: Vec<f64> = plan.groups.iter().map(|g| g.weight).collect();
        let a = 1.0 / 1e-3;
        let b = 1.0 / (ln2 + 1e-3);
        assert!((w[0] - a / (a + b)).abs() < 1e-15);
        assert!((w[0] - 0.99856).abs() < 1e-5);
        assert!((w[1] - 0.00144).abs() < 1e-5);
    }

    #[test]
    fn equal_scores_give_uniform_members_and_empty_groups_drop() {
        let t = table(vec![0.3, 0.3, 2.0], &[(0, 0.4), (1, 0.4), (0, 0.4)]);
        let plan = build_plan(&t, 1e-9, 1e-3, 0).unwrap();
        assert_eq!(plan.groups.len(), 1);
        assert_eq!(plan.groups[0].weight, 1.0);
        for &w in &plan.groups[0].member_weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(build_plan(&table(vec![0.1], &[]), 1e-9, 1e-3, 0).is_err());
    }

    #[test]
    fn draw_batch_edges() {
        let t = table(vec![0.5], &[(0, 1.0)]);
        let plan = build_plan(&t, 1e-9, 1e-3, 9).unwrap();
        let mut rng = plan.rng();
        assert!(draw_batch(&plan, 0, &mut rng).is_empty());
        let b = draw_batch(&plan, 5, &mut rng);
        assert!(b.iter().all(|d| d.id == "u0"));
        let mut r1 = plan.rng();
        let mut r2 = plan.rng();
        assert_eq!(draw_batch(&plan, 7, &mut r1), draw_batch(&plan, 7, &mut r2));
    }

    #[test]
    fn uniform_matches_plan_when_scores_are_equal() {
        let t = table(vec![0.2, 0.2], &[(0, 0.2), (1, 0.2), (1, 0.2), (0, 0.2)]);
        let plan = build_plan(&t, 1e-9, 1e-3, 0).unwrap();
        let uni = UniformSampler::from_table(&t).unwrap();
        for (_, p) in plan.draw_probabilities() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((plan.expected_ood() - uni.expected_ood()).abs() < 1e-15);
    }

    #[test]
    fn empirical_frequencies_match_plan() {
        let members: Vec<(usize, f64)> = (0..30)
            .map(|i| (i % 3, 0.1 + (i % 7) as f64 * 0.3 + (i % 3) as f64))
            .collect();
        let t = table(vec![0.2, 1.0, 2.5], &members);
        let plan = build_plan(&t, 1e-9, 1e-3, 4).unwrap();
        let mut rng = plan.rng();
        let n = 100_000;
        let draws = draw_batch(&plan, n, &mut rng);
        let mut group_counts = vec![0usize; plan.groups.len()];
        let mut id_counts: HashMap<&str, usize> = HashMap::new();
        for d in &draws {
            group_counts[d.group] += 1;
            *id_counts.entry(d.id.as_str()).or_default() += 1;
        }
        for (g, group) in plan.groups.iter().enumerate() {
            let freq = group_counts[g] as f64 / n as f64;
            assert!((freq - group.weight).abs() < 0.02);
            for (id, &w) in group.members.iter().zip(&group.member_weights) {
                if w > 0.01 && group_counts[g] > 0 {
                    let f = id_counts.get(id.as_str()).copied().unwrap_or(0) as f64
                        / group_counts[g] as f64;
                    assert!((f - w).abs() / w < 0.05 || group.weight * w * n as f64 <= 1000.0);
                }
            }
        }
    }

    #[test]
    fn histogram_cases() {
        let t = table(vec![0.5], &[(0, 2.0)]);
        let draws = vec![
            Draw {
                id: "u0".into(),
                group: 0,
                ood_score: 2.0
            };
            4
        ];
        let h = exposure_histogram(&draws, &t, 5).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 4);

        let scores: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        let h = Histogram::new(scores.iter().copied(), &scores, 10).unwrap();
        assert!(h.counts.iter().all(|&c| c == 100));
        assert!(exposure_histogram::<f64>(&[], &t, 5).is_err());
    }

    #[test]
    fn draw_log_format() {
        let mut buf = Vec::new();
        write_draw_log(
            &[(
                3,
                Draw {
                    id: "u1".into(),
                    group: 2,
                    ood_score: 0.5f64,
                },
            )],
            &mut buf,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,id,group,ood_score\n3,u1,2,5.0000000000000000e-1\n"
        );
    }

    proptest! {
        #[test]
        fn alias_probabilities_equal_weights(w in prop::collection::vec(0.0f64..10.0, 1..40)) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let t = AliasTable::new(&w).unwrap();
            let total: f64 = w.iter().sum();
            for (p, q) in t.probabilities().iter().zip(&w) {
                prop_assert!((p - q / total).abs() < 1e-12);
            }
        }

        #[test]
        fn merged_groups_are_separated(cis in prop::collection::vec(0.0f64..3.0, 1..15), tol in 0.0f64..0.5) {
            let m = merge_super_clusters(&cis, tol, None).unwrap();
            let mut all: Vec<usize> = m.groups.concat();
            all.sort();
            prop_assert_eq!(all, (0..cis.len()).collect::<Vec<_>>());
            for a in 0..m.group_cis.len() {
                for b in (a + 1)..m.group_cis.len() {
                    prop_assert!((m.group_cis[a] - m.group_cis[b]).abs() > tol);
                }
            }
        }

        #[test]
        fn inverse_weighting_lowers_expected_score(scores in prop::collection::vec(0.0f64..5.0, 2..50)) {
            let members: Vec<(usize, f64)> = scores.iter().map(|&s| (0, s)).collect();
            let plan = build_plan(&table(vec![1.0], &members), 1e-9, 1e-3, 0).unwrap();
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            let constant = scores.iter().all(|&s| s == scores[0]);
            if !constant {
                prop_assert!(plan.expected_ood() < mean);
            }
        }
    }
}
