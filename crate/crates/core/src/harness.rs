//! Three-fold same-batch / cross-batch experiment protocol.
//!
//! Patients are ordered (identity or a seeded permutation), three test
//! ranges are carved from the end of that order, and for each fold a
//! classifier trained on one batch scores the held-out patients' slides
//! from both batches. Tile scores become slide scores by the median.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::classifier::{BuiltinModel, ClassifierConfig, LabeledTile};
use crate::color::{OdParams, TilePixels};
use crate::error::{Error, Result};
use crate::external::ExternalToolSpec;
use crate::manifest::{
    fmt_f64, read_csv, write_csv, Batch, TileManifest, TileRecord,
};
use crate::normalize::{
    build_template, normalize_tile, run_external_normalizer, SlideTiles, StainTemplate,
};
use crate::seed;
use crate::stain::FactorizationConfig;
use crate::stats::{
    accuracy, auc, bonferroni, p_paired_strata, p_vs_null, LabeledScores, ScoredSlide,
    Significance, TestReport,
};

/// Seed labels of the permutation tests, shared with the `stats` command so
/// that recomputing a p-value from saved slide scores gives the same bytes.
pub const NULL_SEED_LABEL: &str = "null";
pub const PAIRED_SEED_LABEL: &str = "paired";

pub const REFERENCE_COHORT_SIZE: usize = 154;
pub const REFERENCE_TEST_SIZE: usize = 36;
pub const FOLDS: usize = 3;

pub const SCORE_HEADER: [&str; 3] = ["slide_id", "tile_id", "score"];
pub const SLIDE_SCORE_HEADER: [&str; 3] = ["slide_id", "score", "label"];
pub const PLAN_HEADER: [&str; 4] = ["fold", "role", "position", "patient_index"];
pub const RESULT_HEADER: [&str; 11] = [
    "train_batch",
    "test_arm",
    "test_batch",
    "mode",
    "fold",
    "n_slides",
    "auc",
    "accuracy",
    "p_vs_null",
    "p_vs_none",
    "significance",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormalizationMode {
    None,
    Traditional,
    External,
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizationMode::None => "none",
            NormalizationMode::Traditional => "traditional",
            NormalizationMode::External => "external",
        })
    }
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(NormalizationMode::None),
            "traditional" => Ok(NormalizationMode::Traditional),
            "external" => Ok(NormalizationMode::External),
            other => Err(Error::InvalidArgument(format!(
                "normalization mode must be none, traditional or external, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Same,
    Cross,
}

impl Arm {
    pub fn test_batch(self, train: Batch) -> Batch {
        match self {
            Arm::Same => train,
            Arm::Cross => train.other(),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Same => "same_batch",
            Arm::Cross => "cross_batch",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "same_batch" => Ok(Arm::Same),
            "cross_batch" => Ok(Arm::Cross),
            other => Err(Error::InvalidArgument(format!("unknown test arm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortPatient {
    pub patient_index: usize,
    pub outcome: u8,
    /// Slide ids for batch A and batch B.
    pub slides: [Option<String>; 2],
}

fn batch_slot(b: Batch) -> usize {
    match b {
        Batch::A => 0,
        Batch::B => 1,
    }
}

impl CohortPatient {
    pub fn slide(&self, batch: Batch) -> Option<&str> {
        self.slides[batch_slot(batch)].as_deref()
    }

    pub fn is_paired(&self) -> bool {
        self.slides.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortIndex {
    /// Sorted by patient index.
    pub patients: Vec<CohortPatient>,
}

impl CohortIndex {
    pub fn from_manifest(manifest: &TileManifest) -> Result<CohortIndex> {
        if manifest.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut by_index: BTreeMap<usize, CohortPatient> = BTreeMap::new();
        for rec in &manifest.tiles {
            let p = by_index.entry(rec.patient_index).or_insert_with(|| CohortPatient {
                patient_index: rec.patient_index,
                outcome: rec.outcome,
                slides: [None, None],
            });
            if p.outcome != rec.outcome {
                return Err(Error::InvalidArgument(format!(
                    "patient {} has conflicting outcomes (slide {})",
                    rec.patient_index, rec.slide_id
                )));
            }
            let slot = &mut p.slides[batch_slot(rec.batch)];
            match slot {
                Some(s) if *s != rec.slide_id => {
                    return Err(Error::InvalidArgument(format!(
                        "patient {} has two batch-{} slides: {s}, {}",
                        rec.patient_index, rec.batch, rec.slide_id
                    )))
                }
                Some(_) => {}
                None => *slot = Some(rec.slide_id.clone()),
            }
        }
        Ok(CohortIndex {
            patients: by_index.into_values().collect(),
        })
    }

    /// Cohort of patients `1..=n` with the given outcomes and synthetic
    /// slide ids, for planning without data.
    pub fn synthetic(outcomes: &[u8]) -> CohortIndex {
        CohortIndex {
            patients: outcomes
                .iter()
                .enumerate()
                .map(|(i, &o)| CohortPatient {
                    patient_index: i + 1,
                    outcome: o,
                    slides: [
                        Some(crate::synth::slide_id(i + 1, Batch::A)),
                        Some(crate::synth::slide_id(i + 1, Batch::B)),
                    ],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// (total, outcome 1, outcome 0)
    pub fn counts(&self) -> (usize, usize, usize) {
        let pos = self.patients.iter().filter(|p| p.outcome == 1).count();
        (self.len(), pos, self.len() - pos)
    }

    pub fn patient(&self, index: usize) -> Option<&CohortPatient> {
        self.patients
            .binary_search_by_key(&index, |p| p.patient_index)
            .ok()
            .map(|i| &self.patients[i])
    }
}

/// 1-based inclusive position ranges of the three test sets, from the
/// proportional boundaries `floor(n * (154 - 36 k) / 154)`.
pub fn fold_bounds(n: usize) -> [(usize, usize); FOLDS] {
    let b = |k: usize| n * (REFERENCE_COHORT_SIZE - REFERENCE_TEST_SIZE * k) / REFERENCE_COHORT_SIZE;
    [1, 2, 3].map(|k| (b(k) + 1, b(k - 1)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    /// 1-based.
    pub index: usize,
    /// Inclusive positions in the ordered cohort.
    pub test_positions: (usize, usize),
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentPlan {
    pub folds: Vec<Fold>,
    pub train_batch: Batch,
    pub mode: NormalizationMode,
    /// Patient index at each position.
    pub order: Vec<usize>,
    pub seed: Option<u64>,
    pub nonstandard_cohort: bool,
}

pub fn make_plan(
    cohort: &CohortIndex,
    train_batch: Batch,
    mode: NormalizationMode,
    seed: Option<u64>,
) -> Result<ExperimentPlan> {
    let n = cohort.len();
    let mut order: Vec<usize> = cohort.patients.iter().map(|p| p.patient_index).collect();
    if let Some(s) = seed {
        order.shuffle(&mut seed::rng_for(s, "plan"));
    }
    let mut folds = Vec::with_capacity(FOLDS);
    for (k, &(lo, hi)) in fold_bounds(n).iter().enumerate() {
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "cohort of {n} patients is too small for {FOLDS} folds"
            )));
        }
        let test = order[lo - 1..hi].to_vec();
        let train = order[..lo - 1].iter().chain(&order[hi..]).copied().collect();
        folds.push(Fold {
            index: k + 1,
            test_positions: (lo, hi),
            train,
            test,
        });
    }
    let nonstandard_cohort = n != REFERENCE_COHORT_SIZE;
    if nonstandard_cohort {
        log::info!("nonstandard cohort: {n} patients, proportional fold ranges");
    }
    Ok(ExperimentPlan {
        folds,
        train_batch,
        mode,
        order,
        seed,
        nonstandard_cohort,
    })
}

impl ExperimentPlan {
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for f in &self.folds {
            let (lo, hi) = f.test_positions;
            out.push_str(&format!(
                "fold {}: test positions {lo}-{hi} ({} patients), train {} patients\n",
                f.index,
                f.test.len(),
                f.train.len()
            ));
            if self.seed.is_some() {
                let ids: Vec<String> = f.test.iter().map(usize::to_string).collect();
                out.push_str(&format!("  test patients: {}\n", ids.join(" ")));
            }
        }
        if self.nonstandard_cohort {
            out.push_str(&format!(
                "nonstandard cohort: {} patients, proportional ranges\n",
                self.order.len()
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path, provenance: &str) -> Result<()> {
        let position = |p: usize| self.order.iter().position(|&q| q == p).unwrap_or(0) + 1;
        let mut rows = Vec::new();
        for f in &self.folds {
            for (role, set) in [("test", &f.test), ("train", &f.train)] {
                for &p in set {
                    rows.push(vec![
                        f.index.to_string(),
                        role.to_string(),
                        position(p).to_string(),
                        p.to_string(),
                    ]);
                }
            }
        }
        write_csv(path, &PLAN_HEADER, rows, provenance)
    }
}

/// Median of tile scores; an even count averages the two central values.
pub fn aggregate_slide_score(tile_scores: &[f64]) -> Result<f64> {
    if tile_scores.is_empty() {
        return Err(Error::NoTilesScored);
    }
    let mut v = tile_scores.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub slide_id: String,
    pub tile_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(rows: Vec<ScoreRow>) -> Result<ScoreTable> {
        let bad: Vec<String> = rows
            .iter()
            .filter(|r| !(r.score.is_finite() && (0.0..=1.0).contains(&r.score)))
            .map(|r| r.tile_id.clone())
            .collect();
        if !bad.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "scores outside [0, 1] for tiles: {}",
                bad.join(", ")
            )));
        }
        Ok(ScoreTable { rows })
    }

    pub fn read(path: &Path) -> Result<ScoreTable> {
        let rows = read_csv(path, &SCORE_HEADER)?
            .into_iter()
            .map(|r| {
                let score = r[2].parse::<f64>().map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    message: format!("tile {}: score {:?}: {e}", r[1], r[2]),
                })?;
                Ok(ScoreRow {
                    slide_id: r[0].clone(),
                    tile_id: r[1].clone(),
                    score,
                })
            })
            .collect::<Result<_>>()?;
        ScoreTable::new(rows)
    }

    pub fn write(&self, path: &Path, provenance: &str) -> Result<()> {
        let rows = self
            .rows
            .iter()
            .map(|r| vec![r.slide_id.clone(), r.tile_id.clone(), r.score.to_string()]);
        write_csv(path, &SCORE_HEADER, rows, provenance)
    }

    /// Median score per slide, ordered by slide id.
    pub fn slide_scores(&self) -> Result<Vec<(String, f64)>> {
        let mut by_slide: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            by_slide.entry(&r.slide_id).or_default().push(r.score);
        }
        by_slide
            .into_iter()
            .map(|(s, v)| Ok((s.to_string(), aggregate_slide_score(&v)?)))
            .collect()
    }
}

/// Scores are written at full precision so that re-reading them reproduces
/// the statistics computed in memory.
pub fn write_slide_scores(path: &Path, data: &LabeledScores, provenance: &str) -> Result<()> {
    let rows = data
        .rows
        .iter()
        .map(|r| vec![r.slide_id.clone(), r.score.to_string(), r.label.to_string()]);
    write_csv(path, &SLIDE_SCORE_HEADER, rows, provenance)
}

pub fn read_slide_scores(path: &Path) -> Result<LabeledScores> {
    let parse_err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let rows = read_csv(path, &SLIDE_SCORE_HEADER)?
        .into_iter()
        .map(|r| {
            let score = r[1]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("slide {}: score: {e}", r[0])))?;
            let label = match r[2].as_str() {
                "0" => 0,
                "1" => 1,
                other => return Err(parse_err(format!("slide {}: label {other:?}", r[0]))),
            };
            Ok(ScoredSlide {
                slide_id: r[0].clone(),
                score,
                label,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LabeledScores::new(rows))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierSpec {
    Builtin(ClassifierConfig),
    External(ExternalToolSpec),
}

impl ClassifierSpec {
    pub fn id(&self) -> String {
        match self {
            ClassifierSpec::Builtin(_) => "builtin".into(),
            ClassifierSpec::External(t) => format!("external:{}", t.command_line()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub classifier: ClassifierSpec,
    pub factorization: FactorizationConfig,
    pub od: OdParams,
    pub template_tiles_per_slide: usize,
    /// Normalize the same-batch test arm too, not only the cross-batch one.
    pub normalize_same_batch: bool,
    pub external_normalizer: Option<ExternalToolSpec>,
    pub n_permutations: u64,
    pub alpha: f64,
    pub bonferroni_m: usize,
    pub accuracy_threshold: f64,
    pub seed: u64,
    /// Appended to every CSV as its trailing comment line.
    pub provenance: String,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            classifier: ClassifierSpec::Builtin(ClassifierConfig::default()),
            factorization: FactorizationConfig::default(),
            od: OdParams::default(),
            template_tiles_per_slide: 4,
            normalize_same_batch: true,
            external_normalizer: None,
            n_permutations: 10_000,
            alpha: 0.05,
            bonferroni_m: 4,
            accuracy_threshold: 0.5,
            seed: 0,
            provenance: format!("stainbench {}", env!("CARGO_PKG_VERSION")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub fold: usize,
    pub arm: Arm,
    pub test_batch: Batch,
    pub mode: NormalizationMode,
    pub slide_scores: LabeledScores,
    pub auc: f64,
    pub accuracy: f64,
    pub p_vs_null: TestReport,
}

impl ArmResult {
    pub fn n_slides(&self) -> usize {
        self.slide_scores.len()
    }
}

/// One test arm under one normalization mode, across folds.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub train_batch: Batch,
    pub arm: Arm,
    pub mode: NormalizationMode,
    pub folds: Vec<ArmResult>,
    /// Fold-stratified paired test against the unnormalized arm,
    /// annotated against the Bonferroni-corrected alpha.
    pub paired_vs_none: Option<TestReport>,
}

impl ArmSummary {
    pub fn test_batch(&self) -> Batch {
        self.arm.test_batch(self.train_batch)
    }

    pub fn mean_auc(&self) -> f64 {
        self.folds.iter().map(|f| f.auc).sum::<f64>() / self.folds.len() as f64
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.folds.iter().map(|f| f.accuracy).sum::<f64>() / self.folds.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub train_batch: Batch,
    pub mode: NormalizationMode,
    pub nonstandard_cohort: bool,
    /// Unnormalized arms first, then the plan's mode when it differs.
    pub summaries: Vec<ArmSummary>,
}

impl ExperimentResult {
    pub fn summary(&self, arm: Arm, mode: NormalizationMode) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm && s.mode == mode)
    }

    pub fn result_rows(&self) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for s in &self.summaries {
            for f in &s.folds {
                rows.push(ResultRow {
                    train_batch: s.train_batch,
                    arm: s.arm,
                    test_batch: s.test_batch(),
                    mode: s.mode,
                    fold: Some(f.fold),
                    n_slides: f.n_slides(),
                    auc: f.auc,
                    accuracy: f.accuracy,
                    p_vs_null: Some(f.p_vs_null.p_value),
                    p_vs_none: None,
                    significance: None,
                });
            }
            rows.push(ResultRow {
                train_batch: s.train_batch,
                arm: s.arm,
                test_batch: s.test_batch(),
                mode: s.mode,
                fold: None,
                n_slides: s.folds.iter().map(ArmResult::n_slides).sum(),
                auc: s.mean_auc(),
                accuracy: s.mean_accuracy(),
                p_vs_null: None,
                p_vs_none: s.paired_vs_none.as_ref().map(|r| r.p_value),
                significance: s.paired_vs_none.as_ref().map(|r| r.significance),
            });
        }
        rows.into_iter().map(|r| r.rounded()).collect()
    }
}

/// One line of the results CSV. `fold = None` is the across-fold mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub train_batch: Batch,
    pub arm: Arm,
    pub test_batch: Batch,
    pub mode: NormalizationMode,
    pub fold: Option<usize>,
    pub n_slides: usize,
    pub auc: f64,
    pub accuracy: f64,
    pub p_vs_null: Option<f64>,
    pub p_vs_none: Option<f64>,
    pub significance: Option<Significance>,
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn parse_significance(s: &str) -> Result<Significance> {
    match s {
        "not_significant" => Ok(Significance::NotSignificant),
        "marginal" => Ok(Significance::Marginal),
        "significant" => Ok(Significance::Significant),
        other => Err(Error::InvalidArgument(format!("unknown significance {other:?}"))),
    }
}

impl ResultRow {
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.train_batch.to_string(),
            self.arm.to_string(),
            self.test_batch.to_string(),
            self.mode.to_string(),
            self.fold.map_or_else(|| "mean".to_string(), |f| f.to_string()),
            self.n_slides.to_string(),
            fmt_f64(self.auc),
            fmt_f64(self.accuracy),
            opt_f64(self.p_vs_null),
            opt_f64(self.p_vs_none),
            self.significance.map(|s| s.to_string()).unwrap_or_default(),
        ]
    }

    pub fn from_record(r: &[String]) -> Result<ResultRow> {
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        if r.len() != RESULT_HEADER.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} result columns, found {}",
                RESULT_HEADER.len(),
                r.len()
            )));
        }
        Ok(ResultRow {
            train_batch: r[0].parse()?,
            arm: r[1].parse()?,
            test_batch: r[2].parse()?,
            mode: r[3].parse()?,
            fold: match r[4].as_str() {
                "mean" => None,
                f => Some(f.parse().map_err(|e| {
                    Error::InvalidArgument(format!("bad fold {f:?}: {e}"))
                })?),
            },
            n_slides: r[5]
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("bad n_slides {:?}: {e}", r[5])))?,
            auc: num(&r[6])?,
            accuracy: num(&r[7])?,
            p_vs_null: opt(&r[8])?,
            p_vs_none: opt(&r[9])?,
            significance: if r[10].is_empty() {
                None
            } else {
                Some(parse_significance(&r[10])?)
            },
        })
    }

    /// The row as it reads back from CSV, so tables rendered from memory
    /// and from disk agree exactly.
    fn rounded(&self) -> ResultRow {
        ResultRow::from_record(&self.to_record()).expect("formatted row parses")
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow], provenance: &str) -> Result<()> {
    write_csv(path, &RESULT_HEADER, rows.iter().map(ResultRow::to_record), provenance)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    read_csv(path, &RESULT_HEADER)?
        .iter()
        .map(|r| ResultRow::from_record(r))
        .collect::<Result<_>>()
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

/// Human-readable summary: one line per (train batch, test arm, mode)
/// with per-fold AUCs, their mean and the paired test against no
/// normalization.
pub fn render_table(rows: &[ResultRow]) -> Result<String> {
    type Group<'a> = (Vec<(usize, f64)>, Option<&'a ResultRow>);
    let mut groups: BTreeMap<(Batch, Arm, NormalizationMode), Group> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.train_batch, r.arm, r.mode)).or_default();
        match r.fold {
            Some(f) => g.0.push((f, r.auc)),
            None => g.1 = Some(r),
        }
    }
    if groups.is_empty() {
        return Err(Error::NoArms);
    }
    let n_folds = groups.values().map(|g| g.0.len()).max().unwrap_or(0);
    let mut out = format!("{:<6} {:<6} {:<12} {:<12}", "train", "test", "arm", "mode");
    for f in 1..=n_folds {
        out.push_str(&format!(" {:>7}", format!("auc_f{f}")));
    }
    out.push_str(&format!(
        " {:>8} {:>8} {:>10} {}\n",
        "auc_mean", "acc_mean", "p_vs_none", "significance"
    ));
    for ((train, arm, mode), (mut folds, mean)) in groups {
        folds.sort_by_key(|f| f.0);
        out.push_str(&format!(
            "{:<6} {:<6} {:<12} {:<12}",
            train.to_string(),
            arm.test_batch(train).to_string(),
            arm.to_string(),
            mode.to_string()
        ));
        for f in 0..n_folds {
            match folds.get(f) {
                Some((_, a)) => out.push_str(&format!(" {a:>7.3}")),
                None => out.push_str(&format!(" {:>7}", "-")),
            }
        }
        match mean {
            Some(m) => out.push_str(&format!(
                " {:>8.3} {:>8.3} {:>10} {}\n",
                m.auc,
                m.accuracy,
                m.p_vs_none.map_or_else(|| "-".to_string(), |p| format!("{p:.4}")),
                m.significance.map_or_else(|| "-".to_string(), |s| s.to_string())
            )),
            None => out.push_str(&format!(" {:>8} {:>8} {:>10} -\n", "-", "-", "-")),
        }
    }
    Ok(out)
}

fn absolute(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_tiles(manifest: &TileManifest) -> Result<Vec<TilePixels>> {
    manifest
        .tiles
        .par_iter()
        .map(|rec| TilePixels::read_png(&manifest.resolve(rec)))
        .collect()
}

enum TrainedModel {
    Builtin(Box<BuiltinModel>, ClassifierConfig),
    External {
        tool: ExternalToolSpec,
        fold_dir: PathBuf,
    },
}

/// Copy of `manifest` with absolute tile paths, for external tools.
fn with_absolute_paths(manifest: &TileManifest) -> TileManifest {
    let tiles = manifest
        .tiles
        .iter()
        .map(|r| TileRecord {
            path: absolute(manifest.resolve(r)),
            ..r.clone()
        })
        .collect();
    TileManifest::new(tiles, manifest.root.clone())
}

fn train_classifier(
    spec: &ClassifierSpec,
    train: &TileManifest,
    seed: u64,
    fold_dir: &Path,
) -> Result<TrainedModel> {
    match spec {
        ClassifierSpec::Builtin(cfg) => {
            let pixels = load_tiles(train)?;
            let tiles: Vec<LabeledTile> = train
                .tiles
                .iter()
                .zip(pixels)
                .map(|(r, px)| LabeledTile {
                    slide_id: r.slide_id.clone(),
                    tile_id: r.tile_id.clone(),
                    pixels: px,
                    label: r.outcome,
                })
                .collect();
            let model = BuiltinModel::train(&tiles, seed, cfg)?;
            model.write(&fold_dir.join("model.txt"))?;
            Ok(TrainedModel::Builtin(Box::new(model), cfg.clone()))
        }
        ClassifierSpec::External(tool) => {
            tool.run(fold_dir, &["train", "--manifest", "train.csv", "--model-out", "model"])?;
            if !fold_dir.join("model").exists() {
                return Err(Error::ExternalTool(format!(
                    "{:?} train wrote no model at {}",
                    tool.command_line(),
                    fold_dir.join("model").display()
                )));
            }
            Ok(TrainedModel::External {
                tool: tool.clone(),
                fold_dir: fold_dir.to_path_buf(),
            })
        }
    }
}

fn score_tiles(model: &TrainedModel, test: &TileManifest, arm_dir: &Path, provenance: &str) -> Result<ScoreTable> {
    match model {
        TrainedModel::Builtin(m, cfg) => {
            let rows = test
                .tiles
                .par_iter()
                .map(|r| {
                    let px = TilePixels::read_png(&test.resolve(r))?;
                    Ok(ScoreRow {
                        slide_id: r.slide_id.clone(),
                        tile_id: r.tile_id.clone(),
                        score: m.score(&px, cfg)?,
                    })
                })
                .collect::<Result<_>>()?;
            ScoreTable::new(rows)
        }
        TrainedModel::External { tool, fold_dir } => {
            let manifest_path = absolute(arm_dir.join("test.csv"));
            let scores_path = absolute(arm_dir.join("external_scores.csv"));
            with_absolute_paths(test).write(&manifest_path, provenance)?;
            let model_path = absolute(fold_dir.join("model"));
            tool.run(
                fold_dir,
                &[
                    "score",
                    "--manifest",
                    &manifest_path.display().to_string(),
                    "--model",
                    &model_path.display().to_string(),
                    "--scores-out",
                    &scores_path.display().to_string(),
                ],
            )?;
            let table = ScoreTable::read(&scores_path)?;
            check_coverage(&table, test)?;
            Ok(table)
        }
    }
}

/// Every test slide needs at least one score and no unknown slides may appear.
fn check_coverage(table: &ScoreTable, test: &TileManifest) -> Result<()> {
    let expected: BTreeSet<&str> = test.tiles.iter().map(|r| r.slide_id.as_str()).collect();
    let seen: BTreeSet<&str> = table.rows.iter().map(|r| r.slide_id.as_str()).collect();
    let unknown: Vec<&str> = seen.difference(&expected).copied().collect();
    if !unknown.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "classifier scored unknown slides: {}",
            unknown.join(", ")
        )));
    }
    let missing: Vec<&str> = expected.difference(&seen).copied().collect();
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "classifier returned no scores for slides: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

fn normalize_arm(
    mode: NormalizationMode,
    template: Option<&StainTemplate>,
    opts: &ExperimentOptions,
    test: &TileManifest,
    arm_dir: &Path,
) -> Result<TileManifest> {
    match mode {
        NormalizationMode::None => Ok(test.clone()),
        NormalizationMode::Traditional => {
            let template = template.expect("template fitted for traditional mode");
            let tiles_dir = arm_dir.join("tiles");
            create_dir(&tiles_dir)?;
            let records = test
                .tiles
                .par_iter()
                .map(|r| {
                    let px = TilePixels::read_png(&test.resolve(r))?;
                    let out = normalize_tile(&px, template, &opts.factorization, opts.od)?;
                    if out.passed_through {
                        log::info!("tile {} passed through unnormalized", r.tile_id);
                    }
                    let rel = PathBuf::from("tiles").join(format!("{}.png", r.tile_id));
                    out.pixels.write_png(&arm_dir.join(&rel))?;
                    Ok(TileRecord {
                        path: rel,
                        ..r.clone()
                    })
                })
                .collect::<Result<_>>()?;
            let m = TileManifest::new(records, arm_dir);
            m.write(&arm_dir.join("manifest.csv"), &opts.provenance)?;
            Ok(m)
        }
        NormalizationMode::External => {
            let tool = opts.external_normalizer.as_ref().ok_or_else(|| {
                Error::InvalidArgument("external normalization needs an external normalizer command".into())
            })?;
            let m = run_external_normalizer(test, tool, arm_dir, &opts.provenance)?;
            m.write(&arm_dir.join("manifest.csv"), &opts.provenance)?;
            Ok(m)
        }
    }
}

fn fit_template(train: &TileManifest, opts: &ExperimentOptions) -> Result<StainTemplate> {
    let pixels = load_tiles(train)?;
    let mut slides: Vec<SlideTiles> = Vec::new();
    for (rec, px) in train.tiles.iter().zip(pixels) {
        match slides.iter_mut().find(|s| s.slide_id == rec.slide_id) {
            Some(s) => s.tiles.push((rec.tile_id.clone(), px)),
            None => slides.push(SlideTiles {
                slide_id: rec.slide_id.clone(),
                tiles: vec![(rec.tile_id.clone(), px)],
            }),
        }
    }
    let cfg = FactorizationConfig {
        seed: opts.seed,
        ..opts.factorization.clone()
    };
    build_template(&slides, opts.template_tiles_per_slide, &cfg, opts.od)
}

fn evaluate_arm(
    fold: usize,
    arm: Arm,
    test_batch: Batch,
    mode: NormalizationMode,
    table: &ScoreTable,
    labels: &BTreeMap<String, u8>,
    opts: &ExperimentOptions,
) -> Result<ArmResult> {
    let rows = table
        .slide_scores()?
        .into_iter()
        .map(|(slide_id, score)| {
            let label = *labels.get(&slide_id).ok_or_else(|| {
                Error::InvalidArgument(format!("no outcome known for slide {slide_id}"))
            })?;
            Ok(ScoredSlide {
                slide_id,
                score,
                label,
            })
        })
        .collect::<Result<_>>()?;
    let data = LabeledScores::new(rows);
    let auc_value = auc(&data).map_err(|e| match e {
        Error::AucUndefined(m) => Error::AucUndefined(format!("fold {fold} {arm}: {m}")),
        other => other,
    })?;
    let p = p_vs_null(&data, opts.n_permutations, seed::derive(opts.seed, NULL_SEED_LABEL))?;
    Ok(ArmResult {
        fold,
        arm,
        test_batch,
        mode,
        auc: auc_value,
        accuracy: accuracy(&data, opts.accuracy_threshold)?,
        p_vs_null: p,
        slide_scores: data,
    })
}

/// Run all folds of `plan` on the tiles in `manifest`, writing every
/// intermediate artifact under `out_dir`.
///
/// Unnormalized arms are always evaluated; when the plan's mode is not
/// `none` the normalized arms are evaluated as well and tested against
/// them with a fold-stratified paired permutation test.
pub fn run_experiment(
    plan: &ExperimentPlan,
    cohort: &CohortIndex,
    manifest: &TileManifest,
    opts: &ExperimentOptions,
    out_dir: &Path,
) -> Result<ExperimentResult> {
    create_dir(out_dir)?;
    plan.write_csv(&out_dir.join("plan.csv"), &opts.provenance)?;
    let train_batch = plan.train_batch;
    let mode = plan.mode;
    let mut modes = vec![NormalizationMode::None];
    if mode != NormalizationMode::None {
        modes.push(mode);
    }
    let labels: BTreeMap<String, u8> = manifest
        .tiles
        .iter()
        .map(|r| (r.slide_id.clone(), r.outcome))
        .collect();

    let mut per_arm: BTreeMap<(NormalizationMode, Arm), Vec<ArmResult>> = BTreeMap::new();
    for fold in &plan.folds {
        let fold_dir = out_dir.join(format!("fold{}", fold.index));
        create_dir(&fold_dir)?;
        let mut included = BTreeSet::new();
        for &p in &fold.test {
            match cohort.patient(p) {
                Some(cp) if cp.is_paired() => {
                    included.insert(p);
                }
                _ => log::warn!(
                    "fold {}: patient {p} lacks a slide in one batch; excluded from both arms",
                    fold.index
                ),
            }
        }
        let train_set: BTreeSet<usize> = fold.train.iter().copied().collect();
        let train = manifest.filter(|r| r.batch == train_batch && train_set.contains(&r.patient_index));
        if train.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "fold {}: no batch-{train_batch} training tiles",
                fold.index
            )));
        }
        with_absolute_paths(&train).write(&fold_dir.join("train.csv"), &opts.provenance)?;
        let model = train_classifier(
            &opts.classifier,
            &train,
            seed::derive(opts.seed, &format!("classifier-{train_batch}-{}", fold.index)),
            &fold_dir,
        )?;
        let template = if mode == NormalizationMode::Traditional {
            let t = fit_template(&train, opts)?;
            t.write(&fold_dir.join("template"))?;
            Some(t)
        } else {
            None
        };

        for arm in [Arm::Same, Arm::Cross] {
            let test_batch = arm.test_batch(train_batch);
            let test = manifest.filter(|r| r.batch == test_batch && included.contains(&r.patient_index));
            let mut baseline: Option<ScoreTable> = None;
            for &m in &modes {
                let arm_dir = fold_dir.join(m.to_string()).join(arm.to_string());
                create_dir(&arm_dir)?;
                let table = match (&baseline, m) {
                    (Some(b), _) if arm == Arm::Same && !opts.normalize_same_batch => b.clone(),
                    _ => {
                        let tiles = normalize_arm(m, template.as_ref(), opts, &test, &arm_dir)?;
                        score_tiles(&model, &tiles, &arm_dir, &opts.provenance)?
                    }
                };
                table.write(&arm_dir.join("tile_scores.csv"), &opts.provenance)?;
                let result = evaluate_arm(
                    fold.index,
                    arm,
                    test_batch,
                    m,
                    &table,
                    &labels,
                    opts,
                )?;
                write_slide_scores(&arm_dir.join("slide_scores.csv"), &result.slide_scores, &opts.provenance)?;
                per_arm.entry((m, arm)).or_default().push(result);
                if m == NormalizationMode::None {
                    baseline = Some(table);
                }
            }
        }
    }

    let mut summaries = Vec::new();
    for &m in &modes {
        for arm in [Arm::Same, Arm::Cross] {
            let folds = per_arm.remove(&(m, arm)).unwrap_or_default();
            let paired_vs_none = if m == NormalizationMode::None {
                None
            } else {
                let base = &summaries
                    .iter()
                    .find(|s: &&ArmSummary| s.arm == arm && s.mode == NormalizationMode::None)
                    .expect("baseline summarized first")
                    .folds;
                let strata: Vec<(LabeledScores, LabeledScores)> = base
                    .iter()
                    .zip(&folds)
                    .map(|(a, b): (&ArmResult, &ArmResult)| (a.slide_scores.clone(), b.slide_scores.clone()))
                    .collect();
                let report = p_paired_strata(
                    &strata,
                    opts.n_permutations,
                    seed::derive(opts.seed, PAIRED_SEED_LABEL),
                )?;
                Some(bonferroni(&[report], opts.alpha, opts.bonferroni_m)?.remove(0))
            };
            summaries.push(ArmSummary {
                train_batch,
                arm,
                mode: m,
                folds,
                paired_vs_none,
            });
        }
    }
    Ok(ExperimentResult {
        train_batch,
        mode,
        nonstandard_cohort: plan.nonstandard_cohort,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(n: usize) -> CohortIndex {
        CohortIndex::synthetic(&(0..n).map(|i| (i % 2) as u8).collect::<Vec<_>>())
    }

    #[test]
    fn reference_fold_ranges() {
        assert_eq!(fold_bounds(154), [(119, 154), (83, 118), (47, 82)]);
        let plan = make_plan(&cohort(154), Batch::A, NormalizationMode::None, None).unwrap();
        assert!(!plan.nonstandard_cohort);
        let expect = [(119..=154), (83..=118), (47..=82)];
        for (f, range) in plan.folds.iter().zip(expect) {
            assert_eq!(f.test, range.collect::<Vec<_>>());
            assert_eq!(f.train.len(), 118);
            assert_eq!(f.test.len(), 36);
        }
    }

    #[test]
    fn small_cohort_is_flagged() {
        let plan = make_plan(&cohort(10), Batch::A, NormalizationMode::None, None).unwrap();
        assert!(plan.nonstandard_cohort);
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![3, 2, 3]);
        assert!(make_plan(&cohort(2), Batch::A, NormalizationMode::None, None).is_err());
    }

    #[test]
    fn seeded_plan_is_reproducible() {
        let c = cohort(40);
        let a = make_plan(&c, Batch::B, NormalizationMode::Traditional, Some(7)).unwrap();
        let b = make_plan(&c, Batch::B, NormalizationMode::Traditional, Some(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.order, (1..=40).collect::<Vec<_>>());
    }

    #[test]
    fn median_conventions() {
        assert_eq!(aggregate_slide_score(&[0.2, 0.8, 0.5]).unwrap(), 0.5);
        assert_eq!(aggregate_slide_score(&[0.2, 0.4, 0.6, 0.8]).unwrap(), 0.5);
        assert!(matches!(aggregate_slide_score(&[]), Err(Error::NoTilesScored)));
        assert_eq!(Error::NoTilesScored.to_string(), "no tiles scored");
    }

    #[test]
    fn score_table_validates_range() {
        let row = |s: f64| ScoreRow {
            slide_id: "s".into(),
            tile_id: "t".into(),
            score: s,
        };
        assert!(ScoreTable::new(vec![row(0.0), row(1.0)]).is_ok());
        assert!(ScoreTable::new(vec![row(1.5)]).is_err());
        assert!(ScoreTable::new(vec![row(f64::NAN)]).is_err());
    }

    #[test]
    fn result_rows_round_trip() {
        let row = ResultRow {
            train_batch: Batch::A,
            arm: Arm::Cross,
            test_batch: Batch::B,
            mode: NormalizationMode::Traditional,
            fold: None,
            n_slides: 36,
            auc: 0.61,
            accuracy: 0.5,
            p_vs_null: None,
            p_vs_none: Some(0.01),
            significance: Some(Significance::Marginal),
        };
        assert_eq!(ResultRow::from_record(&row.to_record()).unwrap(), row);
        assert!(matches!(render_table(&[]), Err(Error::NoArms)));
        let table = render_table(&[row]).unwrap();
        assert!(table.contains("marginal"));
    }

    #[test]
    fn cohort_detects_conflicts() {
        let rec = |slide: &str, patient: usize, batch: Batch, outcome: u8| TileRecord {
            tile_id: format!("{slide}-t"),
            slide_id: slide.into(),
            patient_index: patient,
            batch,
            outcome,
            x: 0,
            y: 0,
            path: "x.png".into(),
        };
        let ok = TileManifest::new(
            vec![rec("a1", 1, Batch::A, 1), rec("b1", 1, Batch::B, 1), rec("a2", 2, Batch::A, 0)],
            ".",
        );
        let c = CohortIndex::from_manifest(&ok).unwrap();
        assert_eq!(c.counts(), (2, 1, 1));
        assert!(c.patient(1).unwrap().is_paired());
        assert!(!c.patient(2).unwrap().is_paired());
        let bad = TileManifest::new(vec![rec("a1", 1, Batch::A, 1), rec("b1", 1, Batch::B, 0)], ".");
        assert!(CohortIndex::from_manifest(&bad).is_err());
    }
}
