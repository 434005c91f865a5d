//! ROC AUC, accuracy, permutation tests and Bonferroni annotation.
//!
//! AUC is the Mann-Whitney statistic. It is carried internally as the
//! integer `2U = 2 * #(pos > neg) + #(pos == neg)` so permutation
//! comparisons are exact. Null distributions are drawn from per-replicate
//! RNG streams keyed by `(seed, replicate)`, and the permuted quantities
//! never depend on the observed assignment, which makes p-values
//! schedule-independent and monotone in the observed statistic.

use std::collections::HashMap;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::replicate_rng;

/// Sizes at or below which the null distribution is enumerated.
pub const EXACT_NULL_MAX_SLIDES: usize = 7;
pub const EXACT_PAIRED_MAX_PAIRS: usize = 6;
/// Ratio `p / corrected_alpha` above which a significant result is
/// reported as marginal.
pub const MARGINAL_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSlide {
    pub slide_id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledScores {
    pub rows: Vec<ScoredSlide>,
}

impl LabeledScores {
    pub fn new(rows: Vec<ScoredSlide>) -> Self {
        LabeledScores { rows }
    }

    pub fn from_pairs(scores: &[f64], labels: &[u8]) -> Self {
        LabeledScores {
            rows: scores
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&score, &label))| ScoredSlide {
                    slide_id: format!("s{i}"),
                    score,
                    label,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.rows.iter().filter(|r| r.label == 1).count();
        (pos, self.rows.len() - pos)
    }

    fn check(&self) -> Result<(usize, usize)> {
        if let Some(r) = self.rows.iter().find(|r| !r.score.is_finite() || r.label > 1) {
            return Err(Error::InvalidArgument(format!(
                "slide {}: score must be finite and label 0 or 1",
                r.slide_id
            )));
        }
        let (pos, neg) = self.counts();
        if pos == 0 || neg == 0 {
            return Err(Error::AucUndefined(format!(
                "need both classes, got {pos} positive and {neg} negative"
            )));
        }
        Ok((pos, neg))
    }
}

/// Twice the midrank of every score (integers, ties share a rank).
fn doubled_midranks(scores: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0u64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, doubled: (i + 1) + (j + 1).
        let r2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = r2;
        }
        i = j + 1;
    }
    ranks
}

/// `2U` from the doubled midranks of the positive items.
fn u2_from_rank_sum(rank2_sum: u64, n_pos: usize) -> u64 {
    rank2_sum - (n_pos * (n_pos + 1)) as u64
}

fn u2(data: &LabeledScores) -> u64 {
    let scores: Vec<f64> = data.rows.iter().map(|r| r.score).collect();
    let ranks = doubled_midranks(&scores);
    let (pos, _) = data.counts();
    let sum: u64 = data
        .rows
        .iter()
        .zip(&ranks)
        .filter(|(r, _)| r.label == 1)
        .map(|(_, k)| k)
        .sum();
    u2_from_rank_sum(sum, pos)
}

pub fn auc(data: &LabeledScores) -> Result<f64> {
    let (pos, neg) = data.check()?;
    Ok(u2(data) as f64 / (2 * pos * neg) as f64)
}

/// Fraction of rows where `(score >= threshold)` agrees with the label.
pub fn accuracy(data: &LabeledScores, threshold: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = data
        .rows
        .iter()
        .filter(|r| (r.score >= threshold) == (r.label == 1))
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Significance {
    NotSignificant,
    /// Below the corrected alpha but within the caution band.
    Marginal,
    Significant,
}

impl fmt::Display for Significance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Significance::NotSignificant => "not_significant",
            Significance::Marginal => "marginal",
            Significance::Significant => "significant",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub statistic: f64,
    pub p_value: f64,
    /// Replicates drawn, or the size of the enumerated null when `exact`.
    pub n_permutations: u64,
    pub exact: bool,
    pub alpha: f64,
    pub comparisons: usize,
    pub corrected_alpha: f64,
    pub significance: Significance,
}

impl TestReport {
    fn new(statistic: f64, p_value: f64, n_permutations: u64, exact: bool) -> Self {
        let mut r = TestReport {
            statistic,
            p_value,
            n_permutations,
            exact,
            alpha: 0.05,
            comparisons: 1,
            corrected_alpha: 0.05,
            significance: Significance::NotSignificant,
        };
        r.annotate(0.05, 1);
        r
    }

    fn annotate(&mut self, alpha: f64, m: usize) {
        self.alpha = alpha;
        self.comparisons = m;
        self.corrected_alpha = alpha / m as f64;
        self.significance = if self.p_value < self.corrected_alpha {
            if self.p_value / self.corrected_alpha > MARGINAL_RATIO {
                Significance::Marginal
            } else {
                Significance::Significant
            }
        } else {
            Significance::NotSignificant
        };
    }

    pub fn is_significant(&self) -> bool {
        self.significance != Significance::NotSignificant
    }
}

/// Annotate reports against `alpha / m`. p-values are left untouched.
pub fn bonferroni(reports: &[TestReport], alpha: f64, m: usize) -> Result<Vec<TestReport>> {
    if m < 1 {
        return Err(Error::InvalidArgument("comparison count m must be >= 1".into()));
    }
    Ok(reports
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.annotate(alpha, m);
            r
        })
        .collect())
}

/// One-sided permutation test of AUC against label exchangeability.
/// With at most seven slides every labeling is enumerated instead.
pub fn p_vs_null(data: &LabeledScores, n_perm: u64, seed: u64) -> Result<TestReport> {
    if data.len() <= EXACT_NULL_MAX_SLIDES {
        p_vs_null_exact(data)
    } else {
        p_vs_null_sampled(data, n_perm, seed)
    }
}

pub fn p_vs_null_exact(data: &LabeledScores) -> Result<TestReport> {
    let (pos, neg) = data.check()?;
    let n = data.len();
    if n > 20 {
        return Err(Error::InvalidArgument(format!(
            "exact enumeration limited to 20 slides, got {n}"
        )));
    }
    let scores: Vec<f64> = data.rows.iter().map(|r| r.score).collect();
    let ranks = doubled_midranks(&scores);
    let obs = u2(data);
    let (mut total, mut hits) = (0u64, 0u64);
    for subset in 0u32..(1 << n) {
        if subset.count_ones() as usize != pos {
            continue;
        }
        let sum: u64 = (0..n).filter(|i| subset >> i & 1 == 1).map(|i| ranks[i]).sum();
        total += 1;
        hits += (u2_from_rank_sum(sum, pos) >= obs) as u64;
    }
    Ok(TestReport::new(
        obs as f64 / (2 * pos * neg) as f64,
        hits as f64 / total as f64,
        total,
        true,
    ))
}

/// `p = (1 + #{AUC_perm >= AUC_obs}) / (1 + n_perm)`.
pub fn p_vs_null_sampled(data: &LabeledScores, n_perm: u64, seed: u64) -> Result<TestReport> {
    let (pos, neg) = data.check()?;
    if n_perm == 0 {
        return Err(Error::InvalidArgument("n_perm must be >= 1".into()));
    }
    let n = data.len();
    let scores: Vec<f64> = data.rows.iter().map(|r| r.score).collect();
    let ranks = doubled_midranks(&scores);
    let obs = u2(data);
    let hits: u64 = (0..n_perm)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let sum: u64 = index::sample(&mut rng, n, pos).iter().map(|i| ranks[i]).sum();
            (u2_from_rank_sum(sum, pos) >= obs) as u64
        })
        .sum();
    Ok(TestReport::new(
        obs as f64 / (2 * pos * neg) as f64,
        (1 + hits) as f64 / (1 + n_perm) as f64,
        n_perm,
        false,
    ))
}

/// Paired slides of one stratum: `(label, score_a, score_b)`.
type Pairs = Vec<(u8, f64, f64)>;

fn align(a: &LabeledScores, b: &LabeledScores) -> Result<Pairs> {
    let index: HashMap<&str, &ScoredSlide> =
        b.rows.iter().map(|r| (r.slide_id.as_str(), r)).collect();
    let a_ids: std::collections::HashSet<&str> =
        a.rows.iter().map(|r| r.slide_id.as_str()).collect();
    let mut mismatched: Vec<String> = a
        .rows
        .iter()
        .filter(|r| index.get(r.slide_id.as_str()).is_none_or(|o| o.label != r.label))
        .map(|r| r.slide_id.clone())
        .chain(
            b.rows
                .iter()
                .filter(|r| !a_ids.contains(r.slide_id.as_str()))
                .map(|r| r.slide_id.clone()),
        )
        .collect();
    if !mismatched.is_empty() || a.len() != b.len() {
        mismatched.sort();
        mismatched.dedup();
        return Err(Error::Unpaired(mismatched));
    }
    Ok(a.rows
        .iter()
        .map(|r| (r.label, r.score, index[r.slide_id.as_str()].score))
        .collect())
}

fn stratum_delta(pairs: &Pairs, swap: impl Fn(usize) -> bool) -> Result<f64> {
    let (mut sa, mut sb) = (Vec::with_capacity(pairs.len()), Vec::with_capacity(pairs.len()));
    let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
    for (i, &(_, a, b)) in pairs.iter().enumerate() {
        if swap(i) {
            sa.push(b);
            sb.push(a);
        } else {
            sa.push(a);
            sb.push(b);
        }
    }
    Ok(auc(&LabeledScores::from_pairs(&sb, &labels))?
        - auc(&LabeledScores::from_pairs(&sa, &labels))?)
}

const DELTA_TOLERANCE: f64 = 1e-12;

/// One-sided paired permutation test that arm `b` has higher AUC than
/// arm `a`. Each stratum is compared on its own slides; the statistic is
/// the mean per-stratum AUC difference and every permutation swaps each
/// slide's pair of scores with probability one half.
pub fn p_paired_strata(
    strata: &[(LabeledScores, LabeledScores)],
    n_perm: u64,
    seed: u64,
) -> Result<TestReport> {
    if strata.is_empty() {
        return Err(Error::EmptyInput);
    }
    let aligned: Vec<Pairs> = strata
        .iter()
        .map(|(a, b)| {
            a.check()?;
            align(a, b)
        })
        .collect::<Result<_>>()?;
    let offsets: Vec<usize> = aligned
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.len();
            Some(o)
        })
        .collect();
    let total: usize = aligned.iter().map(Vec::len).sum();
    let statistic = |swaps: &dyn Fn(usize) -> bool| -> Result<f64> {
        let mut sum = 0.0;
        for (pairs, &off) in aligned.iter().zip(&offsets) {
            sum += stratum_delta(pairs, |i| swaps(off + i))?;
        }
        Ok(sum / aligned.len() as f64)
    };
    let obs = statistic(&|_| false)?;

    if total <= EXACT_PAIRED_MAX_PAIRS {
        let patterns = 1u64 << total;
        let mut hits = 0u64;
        for pattern in 0..patterns {
            let d = statistic(&|i| pattern >> i & 1 == 1)?;
            hits += (d >= obs - DELTA_TOLERANCE) as u64;
        }
        return Ok(TestReport::new(obs, hits as f64 / patterns as f64, patterns, true));
    }
    if n_perm == 0 {
        return Err(Error::InvalidArgument("n_perm must be >= 1".into()));
    }
    let hits: u64 = (0..n_perm)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let swaps: Vec<bool> = (0..total).map(|_| rng.gen_bool(0.5)).collect();
            statistic(&|i| swaps[i]).map(|d| (d >= obs - DELTA_TOLERANCE) as u64)
        })
        .sum::<Result<u64>>()?;
    Ok(TestReport::new(
        obs,
        (1 + hits) as f64 / (1 + n_perm) as f64,
        n_perm,
        false,
    ))
}

pub fn p_paired_arms(
    arm_a: &LabeledScores,
    arm_b: &LabeledScores,
    n_perm: u64,
    seed: u64,
) -> Result<TestReport> {
    p_paired_strata(&[(arm_a.clone(), arm_b.clone())], n_perm, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(scores: &[f64], labels: &[u8]) -> LabeledScores {
        LabeledScores::from_pairs(scores, labels)
    }

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_separation() {
        assert_eq!(auc(&ls(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0])).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_is_half() {
        assert_eq!(auc(&ls(&[0.4; 6], &[1, 0, 1, 0, 0, 1])).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auc(&ls(&[0.1, 0.2], &[1, 1])),
            Err(Error::AucUndefined(_))
        ));
    }

    #[test]
    fn matches_pair_counting_on_small_random_sets() {
        let mut rng = replicate_rng(1, 0);
        for _ in 0..2000 {
            let n = rng.gen_range(2..=8);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let d = ls(&scores, &labels);
            match auc(&d) {
                Ok(a) => assert_eq!(a, brute_auc(&scores, &labels)),
                Err(_) => assert!(labels.iter().all(|&l| l == labels[0])),
            }
        }
    }

    #[test]
    fn flipping_labels_complements() {
        let scores = [0.3, 0.7, 0.7, 0.1, 0.9, 0.5];
        let labels = [1, 0, 1, 0, 1, 0];
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let a = auc(&ls(&scores, &labels)).unwrap();
        let b = auc(&ls(&scores, &flipped)).unwrap();
        assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn accuracy_cases() {
        let scores = [0.9, 0.2, 0.6, 0.4];
        assert_eq!(accuracy(&ls(&scores, &[1, 0, 1, 0]), 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&ls(&scores, &[0, 1, 0, 1]), 0.5).unwrap(), 0.0);
        // Hand count: 0.5 counts as positive; hits marked *.
        let scores = [0.5, 0.49, 0.1, 0.95, 0.7, 0.3, 0.51, 0.0, 1.0, 0.6];
        let labels = [1, 1, 0, 0, 1, 0, 0, 0, 1, 1];
        //            *  -  *  -  *  *  -  *  *  *
        assert_eq!(accuracy(&ls(&scores, &labels), 0.5).unwrap(), 0.7);
        assert!(accuracy(&LabeledScores::default(), 0.5).is_err());
    }

    #[test]
    fn balanced_null_is_not_significant() {
        // AUC exactly 0.5 on 20 balanced slides.
        let scores: Vec<f64> = (0..20).map(|i| (i / 2) as f64).collect();
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let r = p_vs_null(&ls(&scores, &labels), 2000, 3).unwrap();
        assert_eq!(r.statistic, 0.5);
        assert!(r.p_value >= 0.5);
        assert!(!r.is_significant());
    }

    #[test]
    fn perfect_ranking_of_twenty_is_tiny() {
        let scores: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let labels: Vec<u8> = (0..20).map(|i| (i >= 10) as u8).collect();
        let r = p_vs_null(&ls(&scores, &labels), 10_000, 5).unwrap();
        // 1 / C(20,10) ~ 5.4e-6, plus the 1 / (1 + n) estimator floor.
        assert!(r.p_value <= 0.001);
        assert!(r.p_value >= 1.0 / 10_001.0);
    }

    #[test]
    fn p_is_monotone_in_observed_auc() {
        let scores: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let weak = [1, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0, 1];
        let strong = [0, 0, 0, 1, 0, 0, 1, 0, 1, 1, 1, 1];
        let a = p_vs_null_sampled(&ls(&scores, &weak), 3000, 8).unwrap();
        let b = p_vs_null_sampled(&ls(&scores, &strong), 3000, 8).unwrap();
        assert!(b.statistic > a.statistic);
        assert!(b.p_value <= a.p_value);
    }

    #[test]
    fn identical_arms_have_zero_delta() {
        let a = ls(&[0.1, 0.8, 0.4, 0.6, 0.3, 0.9, 0.2, 0.7], &[0, 1, 0, 1, 1, 1, 0, 0]);
        let r = p_paired_arms(&a, &a, 1000, 1).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(r.p_value >= 0.5);
    }

    #[test]
    fn unpaired_arms_name_the_mismatch() {
        let a = ls(&[0.1, 0.9], &[0, 1]);
        let mut b = a.clone();
        b.rows[1].slide_id = "other".into();
        match p_paired_arms(&a, &b, 10, 0) {
            Err(Error::Unpaired(ids)) => assert_eq!(ids, vec!["other", "s1"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn paired_small_matches_enumeration() {
        let a = ls(&[0.2, 0.6, 0.4, 0.5, 0.3, 0.55], &[0, 1, 1, 0, 0, 1]);
        let b = ls(&[0.1, 0.7, 0.6, 0.45, 0.35, 0.8], &[0, 1, 1, 0, 0, 1]);
        let r = p_paired_arms(&a, &b, 100, 0).unwrap();
        assert!(r.exact);
        assert_eq!(r.n_permutations, 64);
        // Independent enumeration over swap patterns.
        let pairs: Vec<(f64, f64)> = a.rows.iter().zip(&b.rows).map(|(x, y)| (x.score, y.score)).collect();
        let labels: Vec<u8> = a.rows.iter().map(|r| r.label).collect();
        let obs = brute_auc(&pairs.iter().map(|p| p.1).collect::<Vec<_>>(), &labels)
            - brute_auc(&pairs.iter().map(|p| p.0).collect::<Vec<_>>(), &labels);
        let mut hits = 0;
        for pat in 0..64u32 {
            let (sa, sb): (Vec<f64>, Vec<f64>) = pairs
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| if pat >> i & 1 == 1 { (y, x) } else { (x, y) })
                .unzip();
            if brute_auc(&sb, &labels) - brute_auc(&sa, &labels) >= obs - 1e-12 {
                hits += 1;
            }
        }
        assert_eq!(r.p_value, hits as f64 / 64.0);
    }

    #[test]
    fn uniformly_better_arm_is_significant() {
        let labels: Vec<u8> = (0..15).map(|i| (i % 2) as u8).collect();
        let a_scores: Vec<f64> = (0..15).map(|i| ((i * 7) % 15) as f64 / 15.0).collect();
        let b_scores: Vec<f64> = labels
            .iter()
            .zip(&a_scores)
            .map(|(&l, &s)| if l == 1 { s + 1.0 } else { s - 1.0 })
            .collect();
        let r = p_paired_arms(&ls(&a_scores, &labels), &ls(&b_scores, &labels), 10_000, 2).unwrap();
        assert!(r.statistic > 0.0);
        assert!(r.p_value < 0.01, "{}", r.p_value);
    }

    #[test]
    fn bonferroni_decisions() {
        let mk = |p| TestReport::new(0.0, p, 100, false);
        let out = bonferroni(&[mk(0.010), mk(0.2), mk(0.001)], 0.05, 4).unwrap();
        assert_eq!(out[0].corrected_alpha, 0.0125);
        assert_eq!(out[0].significance, Significance::Marginal);
        assert_eq!(out[0].p_value, 0.010);
        assert_eq!(out[1].significance, Significance::NotSignificant);
        assert_eq!(out[2].significance, Significance::Significant);
        let single = bonferroni(&[mk(0.03)], 0.05, 1).unwrap();
        assert_eq!(single[0].corrected_alpha, 0.05);
        assert!(single[0].is_significant());
        assert!(bonferroni(&[mk(0.03)], 0.05, 0).is_err());
    }
}
