//! Command-line front end. Every subcommand delegates to one library
//! operation; `run` chains them exactly as the individual commands would.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::color::TilePixels;
use crate::config::{defaults_help, RawConfig, RunConfig};
use crate::error::{Error, Result};
use crate::harness::{
    make_plan, read_results, read_slide_scores, render_table, run_experiment, write_results,
    CohortIndex, NormalizationMode, ResultRow, NULL_SEED_LABEL, PAIRED_SEED_LABEL,
};
use crate::manifest::{fmt_f64, write_csv, Batch, TileManifest, TileRecord};
use crate::normalize::{build_template, normalize_tile, SlideTiles, StainTemplate};
use crate::seed;
use crate::stain::FactorizationConfig;
use crate::stats::{bonferroni, p_paired_strata, p_vs_null, LabeledScores, TestReport};
use crate::synth;
use crate::tiler::{build_mask, tile_slide, Polygon};

pub const THREADS_ENV: &str = "STAINBENCH_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "stainbench",
    version,
    about = "Stain separation, color normalization and cross-batch evaluation for H&E tiles",
    after_help = defaults_help()
)]
pub struct Cli {
    /// Configuration file (`[section]` headers, `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set stats.alpha=0.01`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads (default: STAINBENCH_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Validate inputs and configuration without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the tissue mask of a low-resolution slide raster inside a polygon.
    Mask(MaskArgs),
    /// Sample tiles from a slide raster inside an ROI polygon.
    Tile(TileArgs),
    /// Fit a stain template from the tiles of a manifest.
    FitTemplate(FitTemplateArgs),
    /// Normalize every tile of a manifest to a template.
    Normalize(NormalizeArgs),
    /// Generate a synthetic two-batch dataset.
    Synth(SynthArgs),
    /// Print the three-fold plan.
    Plan(PlanArgs),
    /// Run the full same-batch / cross-batch experiment.
    Run(RunArgs),
    /// Permutation tests on slide-level score files.
    Stats(StatsArgs),
    /// Render a results CSV as a summary table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Slide raster (PNG) at mask resolution.
    #[arg(long)]
    pub slide: PathBuf,
    /// ROI polygon, one `x y` vertex per line, in raster pixels.
    #[arg(long)]
    pub polygon: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// Level-0 slide raster (PNG).
    #[arg(long)]
    pub slide: PathBuf,
    /// ROI polygon in level-0 pixels.
    #[arg(long)]
    pub polygon: PathBuf,
    #[arg(long)]
    pub slide_id: String,
    #[arg(long, default_value_t = 1)]
    pub patient_index: usize,
    #[arg(long, default_value = "A")]
    pub batch: Batch,
    #[arg(long, default_value_t = 0)]
    pub outcome: u8,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitTemplateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Only use tiles of this batch.
    #[arg(long)]
    pub batch: Option<Batch>,
    /// Output prefix; writes PREFIX.stains and PREFIX.scale.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Template prefix written by `fit-template`.
    #[arg(long)]
    pub template: PathBuf,
    /// Only normalize tiles of this batch.
    #[arg(long)]
    pub batch: Option<Batch>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (default: paths.output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// `identity` or an integer seed (default: seeds.plan_seed).
    #[arg(long)]
    pub seed: Option<String>,
    /// Cohort size when no manifest is given.
    #[arg(long, default_value_t = 154)]
    pub n: usize,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "A")]
    pub train_batch: Batch,
    /// Also write the plan as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Tile manifest (default: paths.manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output root (default: paths.output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Slide score CSV (slide_id, score, label); repeat for several strata.
    #[arg(long, required = true)]
    pub scores: Vec<PathBuf>,
    /// Baseline slide scores, one per --scores, for the paired test.
    #[arg(long)]
    pub baseline: Vec<PathBuf>,
    /// Write the test reports as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: PathBuf,
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

fn thread_count(cli: &Cli) -> Result<Option<usize>> {
    if let Some(n) = cli.threads {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| Error::InvalidArgument(format!("{THREADS_ENV}={v:?}: {e}"))),
        _ => Ok(None),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut raw = match &cli.config {
        Some(p) => RawConfig::read(p)?,
        None => RawConfig::default(),
    };
    for s in &cli.overrides {
        raw.set(s)?;
    }
    raw.build()
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let run = || dispatch(cli, &cfg);
    match thread_count(cli)? {
        Some(0) => Err(Error::InvalidArgument("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let dry = cli.dry_run;
    match &cli.command {
        Command::Mask(a) => cmd_mask(a, dry),
        Command::Tile(a) => cmd_tile(a, cfg, dry),
        Command::FitTemplate(a) => cmd_fit_template(a, cfg, dry),
        Command::Normalize(a) => cmd_normalize(a, cfg, dry),
        Command::Synth(a) => cmd_synth(a, cfg, dry),
        Command::Plan(a) => cmd_plan(a, cfg, dry),
        Command::Run(a) => cmd_run(a, cfg, dry).map(|_| ()),
        Command::Stats(a) => cmd_stats(a, cfg, dry),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_mask(a: &MaskArgs, dry: bool) -> Result<()> {
    let raster = TilePixels::read_png(&a.slide)?;
    let polygon = Polygon::read(&a.polygon)?;
    let mask = build_mask(&raster, &polygon)?;
    println!("{} of {} pixels in mask", mask.count(), mask.width() * mask.height());
    if !dry {
        mask.write_png(&a.out)?;
    }
    Ok(())
}

fn cmd_tile(a: &TileArgs, cfg: &RunConfig, dry: bool) -> Result<()> {
    if a.outcome > 1 {
        return Err(Error::InvalidArgument("--outcome must be 0 or 1".into()));
    }
    let slide = TilePixels::read_png(&a.slide)?;
    let polygon = Polygon::read(&a.polygon)?;
    let tiling = tile_slide(&slide, &polygon, &cfg.tiling, seed::derive(cfg.seed, &a.slide_id))?;
    if tiling.with_replacement {
        log::warn!("slide {}: too few candidate positions, sampled with replacement", a.slide_id);
    }
    println!("{} tiles from slide {}", tiling.tiles.len(), a.slide_id);
    if dry {
        return Ok(());
    }
    let tiles_dir = a.out.join("tiles");
    std::fs::create_dir_all(&tiles_dir).map_err(|e| Error::io(&tiles_dir, e))?;
    tiling.mask.write_png(&a.out.join("mask.png"))?;
    let records = tiling
        .tiles
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let tile_id = format!("{}-t{i:04}", a.slide_id);
            let rel = PathBuf::from("tiles").join(format!("{tile_id}.png"));
            t.pixels.write_png(&a.out.join(&rel))?;
            Ok(TileRecord {
                tile_id,
                slide_id: a.slide_id.clone(),
                patient_index: a.patient_index,
                batch: a.batch,
                outcome: a.outcome,
                x: t.x,
                y: t.y,
                path: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TileManifest::new(records, &a.out).write(&a.out.join("manifest.csv"), &cfg.provenance())
}

fn slide_tiles(manifest: &TileManifest) -> Result<Vec<SlideTiles>> {
    manifest
        .by_slide()
        .into_iter()
        .map(|(slide_id, recs)| {
            let tiles = recs
                .par_iter()
                .map(|r| Ok((r.tile_id.clone(), TilePixels::read_png(&manifest.resolve(r))?)))
                .collect::<Result<_>>()?;
            Ok(SlideTiles { slide_id, tiles })
        })
        .collect()
}

fn read_manifest(path: &Path, batch: Option<Batch>) -> Result<TileManifest> {
    let m = TileManifest::read(path)?;
    let m = match batch {
        Some(b) => m.filter(|r| r.batch == b),
        None => m,
    };
    if m.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no matching tiles", path.display())));
    }
    Ok(m)
}

fn cmd_fit_template(a: &FitTemplateArgs, cfg: &RunConfig, dry: bool) -> Result<()> {
    let manifest = read_manifest(&a.manifest, a.batch)?;
    let fcfg = FactorizationConfig {
        seed: cfg.seed,
        ..cfg.factorization.clone()
    };
    let t = build_template(&slide_tiles(&manifest)?, cfg.template_tiles_per_slide, &fcfg, cfg.od)?;
    println!("template from {} tiles", t.source_tile_count);
    if !dry {
        t.write(&a.out)?;
    }
    Ok(())
}

fn cmd_normalize(a: &NormalizeArgs, cfg: &RunConfig, dry: bool) -> Result<()> {
    let manifest = read_manifest(&a.manifest, a.batch)?;
    let template = StainTemplate::read(&a.template)?;
    let tiles_dir = a.out.join("tiles");
    if !dry {
        std::fs::create_dir_all(&tiles_dir).map_err(|e| Error::io(&tiles_dir, e))?;
    }
    let records = manifest
        .tiles
        .par_iter()
        .map(|r| {
            let px = TilePixels::read_png(&manifest.resolve(r))?;
            let out = normalize_tile(&px, &template, &cfg.factorization, cfg.od)
                .map_err(|e| Error::InvalidArgument(format!("tile {}: {e}", r.tile_id)))?;
            let rel = PathBuf::from("tiles").join(format!("{}.png", r.tile_id));
            if !dry {
                out.pixels.write_png(&a.out.join(&rel))?;
            }
            Ok((
                TileRecord {
                    path: rel,
                    ..r.clone()
                },
                out.passed_through,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = records.iter().filter(|(_, p)| *p).count();
    println!("{} tiles normalized, {passed} passed through", records.len() - passed);
    if !dry {
        TileManifest::new(records.into_iter().map(|(r, _)| r).collect(), &a.out)
            .write(&a.out.join("manifest.csv"), &cfg.provenance())?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs, cfg: &RunConfig, dry: bool) -> Result<()> {
    cfg.synth.validate()?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output.clone());
    if dry {
        println!(
            "would write {} tiles to {}",
            2 * cfg.synth.n_patients * cfg.synth.tiles_per_slide,
            out.display()
        );
        return Ok(());
    }
    let data = synth::generate(&cfg.synth, &out)?;
    let combined = data.combined();
    combined.write(&out.join("manifest.csv"), &cfg.provenance())?;
    println!("{} tiles written to {}", combined.len(), out.display());
    Ok(())
}

fn parse_plan_seed(s: &str) -> Result<Option<u64>> {
    match s {
        "identity" => Ok(None),
        n => n
            .parse()
            .map(Some)
            .map_err(|e| Error::InvalidArgument(format!("--seed {n:?}: expected identity or an integer ({e})"))),
    }
}

fn cmd_plan(a: &PlanArgs, cfg: &RunConfig, dry: bool) -> Result<()> {
    let plan_seed = match &a.seed {
        Some(s) => parse_plan_seed(s)?,
        None => cfg.plan_seed,
    };
    let cohort = match &a.manifest {
        Some(p) => CohortIndex::from_manifest(&TileManifest::read(p)?)?,
        None => CohortIndex::synthetic(&vec![0; a.n]),
    };
    let plan = make_plan(&cohort, a.train_batch, NormalizationMode::None, plan_seed)?;
    print!("{}", plan.describe());
    if let (Some(out), false) = (&a.out, dry) {
        plan.write_csv(out, &cfg.provenance())?;
    }
    Ok(())
}

/// Full experiment; returns the result rows written to `results.csv`.
pub fn cmd_run(a: &RunArgs, cfg: &RunConfig, dry: bool) -> Result<Vec<ResultRow>> {
    let manifest_path = a
        .manifest
        .clone()
        .or_else(|| cfg.manifest.clone())
        .ok_or_else(|| Error::InvalidArgument("run needs a manifest (--manifest or paths.manifest)".into()))?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output.clone());
    let manifest = TileManifest::read(&manifest_path)?;
    let cohort = CohortIndex::from_manifest(&manifest)?;
    let missing: Vec<String> = manifest
        .tiles
        .iter()
        .filter(|r| !manifest.resolve(r).is_file())
        .map(|r| r.tile_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingOutputs(missing));
    }
    let (n, pos, neg) = cohort.counts();
    println!("cohort: {n} patients ({pos} outcome 1, {neg} outcome 0)");
    if dry {
        for &b in &cfg.train_batches {
            print!("{}", make_plan(&cohort, b, NormalizationMode::None, cfg.plan_seed)?.describe());
        }
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    std::fs::write(out.join("config.txt"), format!("# {}\n{}", cfg.provenance(), cfg.canonical))
        .map_err(|e| Error::io(out.join("config.txt"), e))?;
    let opts = cfg.experiment_options();
    let normalized: Vec<NormalizationMode> = cfg
        .modes
        .iter()
        .copied()
        .filter(|&m| m != NormalizationMode::None)
        .collect();
    let want_none = cfg.modes.contains(&NormalizationMode::None);
    let mut rows = Vec::new();
    for &b in &cfg.train_batches {
        let runs: Vec<NormalizationMode> = if normalized.is_empty() {
            vec![NormalizationMode::None]
        } else {
            normalized.clone()
        };
        for (i, &m) in runs.iter().enumerate() {
            let plan = make_plan(&cohort, b, m, cfg.plan_seed)?;
            let dir = out.join(format!("train_{b}")).join(m.to_string());
            let result = run_experiment(&plan, &cohort, &manifest, &opts, &dir)?;
            for r in result.result_rows() {
                let keep = if r.mode == NormalizationMode::None {
                    want_none && i == 0
                } else {
                    true
                };
                if keep {
                    rows.push(r);
                }
            }
        }
    }
    write_results(&out.join("results.csv"), &rows, &cfg.provenance())?;
    let table = render_table(&rows)?;
    std::fs::write(out.join("results.txt"), &table).map_err(|e| Error::io(out.join("results.txt"), e))?;
    print!("{table}");
    Ok(rows)
}

pub const REPORT_HEADER: [&str; 10] = [
    "test",
    "stratum_count",
    "statistic",
    "p_value",
    "n_permutations",
    "exact",
    "alpha",
    "comparisons",
    "corrected_alpha",
    "significance",
];

fn report_record(name: &str, strata: usize, r: &TestReport) -> Vec<String> {
    vec![
        name.to_string(),
        strata.to_string(),
        fmt_f64(r.statistic),
        fmt_f64(r.p_value),
        r.n_permutations.to_string(),
        r.exact.to_string(),
        fmt_f64(r.alpha),
        r.comparisons.to_string(),
        fmt_f64(r.corrected_alpha),
        r.significance.to_string(),
    ]
}

fn cmd_stats(a: &StatsArgs, cfg: &RunConfig, dry: bool) -> Result<()> {
    let scores: Vec<LabeledScores> = a.scores.iter().map(|p| read_slide_scores(p)).collect::<Result<_>>()?;
    let mut records = Vec::new();
    for (p, data) in a.scores.iter().zip(&scores) {
        let r = p_vs_null(data, cfg.n_permutations, seed::derive(cfg.seed, NULL_SEED_LABEL))?;
        records.push(report_record(&format!("auc_vs_null:{}", p.display()), 1, &r));
    }
    if !a.baseline.is_empty() {
        if a.baseline.len() != a.scores.len() {
            return Err(Error::InvalidArgument(format!(
                "{} --baseline files for {} --scores files",
                a.baseline.len(),
                a.scores.len()
            )));
        }
        let strata = a
            .baseline
            .iter()
            .zip(&scores)
            .map(|(b, s)| Ok((read_slide_scores(b)?, s.clone())))
            .collect::<Result<Vec<_>>>()?;
        let r = p_paired_strata(&strata, cfg.n_permutations, seed::derive(cfg.seed, PAIRED_SEED_LABEL))?;
        let r = bonferroni(&[r], cfg.alpha, cfg.bonferroni_m)?.remove(0);
        records.push(report_record("paired_delta_auc", strata.len(), &r));
    }
    println!(
        "{:<40} {:>9} {:>9} {:>8} significance",
        "test", "statistic", "p_value", "alpha_m"
    );
    for r in &records {
        println!("{:<40} {:>9} {:>9} {:>8} {}", r[0], r[2], r[3], r[8], r[9]);
    }
    if let (Some(out), false) = (&a.out, dry) {
        write_csv(out, &REPORT_HEADER, records, &cfg.provenance())?;
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let rows = read_results(&a.results)?;
    print!("{}", render_table(&rows)?);
    Ok(())
}
