//! Plain-text run configuration: `[section]` headers, `key = value`
//! lines and `#` comments. Every key, its default and its meaning live in
//! [`KEYS`], which also feeds the CLI help.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::classifier::ClassifierConfig;
use crate::color::OdParams;
use crate::error::{Error, Result};
use crate::external::ExternalToolSpec;
use crate::harness::{ClassifierSpec, ExperimentOptions, NormalizationMode};
use crate::manifest::Batch;
use crate::seed::short_hash;
use crate::stain::{canonical_order, FactorizationConfig, StainMatrix};
use crate::synth::{shifted_stains, SynthConfig};
use crate::tiler::TileSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn k(section: &'static str, key: &'static str, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec {
        section,
        key,
        default,
        doc,
    }
}

pub const KEYS: &[KeySpec] = &[
    k("paths", "manifest", "", "tile manifest CSV used by `run` (required there)"),
    k("paths", "output", "out", "output root directory"),
    k("seeds", "seed", "0", "master seed for sampling, templates, classifiers and permutations"),
    k("seeds", "plan_seed", "identity", "patient order for the folds: identity or an integer seed"),
    k("factorization", "sparsity_lambda", "0.1", "l1 weight on concentrations"),
    k("factorization", "max_iters", "200", "alternating-update iteration cap"),
    k("factorization", "rel_tolerance", "1e-6", "stop when the relative objective decrease falls below this"),
    k("factorization", "background_cutoff", "0.15", "minimum OD norm of a pixel used for fitting"),
    k("factorization", "min_foreground", "100", "minimum foreground pixels to fit a tile"),
    k("od", "i0", "255", "incident light intensity"),
    k("od", "eps", "1", "offset added before taking logarithms"),
    k("tiling", "source_size", "512", "tile side at level 0, in pixels"),
    k("tiling", "output_size", "256", "tile side after 2x downsampling"),
    k("tiling", "physical_extent_um", "130", "physical tile side in micrometres"),
    k("tiling", "tiles_per_slide", "1000", "tiles sampled per slide"),
    k("tiling", "crop_size", "224", "random crop side used by augmentation"),
    k("tiling", "min_coverage", "0.5", "minimum fraction of a tile inside the ROI mask"),
    k("tiling", "mask_downsample", "16", "level-0 pixels per mask pixel"),
    k("normalization", "modes", "none,traditional", "comma-separated modes: none, traditional, external"),
    k("normalization", "template_tiles_per_slide", "4", "training tiles per slide used to fit a template"),
    k("normalization", "normalize_same_batch", "true", "also normalize the same-batch test arm"),
    k("normalization", "external_command", "", "external normalizer command for mode external"),
    k("classifier", "kind", "builtin", "builtin or external"),
    k("classifier", "command", "", "external classifier command for kind external"),
    k("classifier", "l2", "1", "L2 penalty of the built-in logistic model"),
    k("classifier", "max_iters", "100", "Newton iteration cap of the built-in model"),
    k("classifier", "stain_tiles_per_slide", "2", "tiles per slide for the built-in model's stain fit"),
    k("experiment", "train_batches", "A,B", "batches to train on, each tested on both batches"),
    k("stats", "n_permutations", "10000", "permutation replicates per test"),
    k("stats", "alpha", "0.05", "family-wise significance level"),
    k("stats", "bonferroni_m", "4", "number of comparisons for the Bonferroni correction"),
    k("stats", "accuracy_threshold", "0.5", "score threshold for the accuracy metric"),
    k("synth", "n_patients", "154", "synthetic patients"),
    k("synth", "tiles_per_slide", "8", "tiles per synthetic slide"),
    k("synth", "tile_size", "64", "synthetic tile side in pixels"),
    k("synth", "positive_fraction", "63/154", "fraction of patients with outcome 1"),
    k("synth", "class_signal_strength", "0.5", "class effect on nuclear density and size, in [0, 1]"),
    k("synth", "stains_a", "reference", "batch A stain matrix: reference, shifted or six numbers h_rgb e_rgb"),
    k("synth", "stains_b", "shifted", "batch B stain matrix, same syntax as stains_a"),
    k("synth", "gain_a", "1", "concentration gain of batch A"),
    k("synth", "gain_b", "1.3", "concentration gain of batch B"),
    k("synth", "noise_sigma", "0.02", "additive OD noise standard deviation"),
    k("synth", "nuclei_per_kilopixel", "2", "mean nuclei per 1000 pixels without class signal"),
    k("synth", "nucleus_radius", "3", "mean nucleus radius in pixels"),
    k("synth", "stroma_fraction", "0.05 1", "range of the per-patient stroma fraction"),
];

/// Help text listing every key with its default.
pub fn defaults_help() -> String {
    let mut out = String::from("Configuration keys (section.key = default):\n");
    for s in KEYS {
        let default = if s.default.is_empty() { "\"\"" } else { s.default };
        out.push_str(&format!("  {}.{} = {}\n      {}\n", s.section, s.key, default, s.doc));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Origin {
    Default,
    File(usize),
    Flag,
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    origin: Origin,
}

/// Key/value pairs before typing, remembering where each came from.
#[derive(Debug, Clone)]
pub struct RawConfig {
    path: String,
    base_dir: PathBuf,
    entries: BTreeMap<String, Entry>,
}

fn spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| format!("{}.{}", s.section, s.key) == name)
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            path: "<defaults>".into(),
            base_dir: PathBuf::from("."),
            entries: KEYS
                .iter()
                .map(|s| {
                    (
                        format!("{}.{}", s.section, s.key),
                        Entry {
                            value: s.default.to_string(),
                            origin: Origin::Default,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl RawConfig {
    pub fn parse(text: &str, path: &str, base_dir: &Path) -> Result<RawConfig> {
        let mut raw = RawConfig {
            path: path.to_string(),
            base_dir: base_dir.to_path_buf(),
            ..RawConfig::default()
        };
        let err = |line: usize, message: String| Error::Config {
            path: path.to_string(),
            line,
            message,
        };
        let mut section: Option<String> = None;
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line_no, format!("unterminated section header {line:?}")))?
                    .trim();
                if !KEYS.iter().any(|s| s.section == name) {
                    return Err(err(line_no, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected `key = value`, found {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            let sec = section
                .as_deref()
                .ok_or_else(|| err(line_no, format!("key `{key}` appears before any [section]")))?;
            let name = format!("{sec}.{key}");
            if spec(&name).is_none() {
                return Err(err(line_no, format!("unknown key `{key}` in [{sec}]")));
            }
            let entry = raw.entries.get_mut(&name).expect("all keys have defaults");
            if let Origin::File(first) = entry.origin {
                return Err(err(line_no, format!("duplicate key `{name}` (first set on line {first})")));
            }
            *entry = Entry {
                value: value.to_string(),
                origin: Origin::File(line_no),
            };
        }
        Ok(raw)
    }

    pub fn read(path: &Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RawConfig::parse(&text, &path.display().to_string(), &base)
    }

    /// Apply a `section.key=value` override from the command line.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (name, value) = assignment.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("--set expects section.key=value, got {assignment:?}"))
        })?;
        let name = name.trim();
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("--set: unknown key `{name}`")))?;
        *entry = Entry {
            value: value.trim().to_string(),
            origin: Origin::Flag,
        };
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown key {name}")).value
    }

    fn error(&self, name: &str, message: String) -> Error {
        match self.entries.get(name).map(|e| &e.origin) {
            Some(Origin::File(line)) => Error::Config {
                path: self.path.clone(),
                line: *line,
                message: format!("{name}: {message}"),
            },
            Some(Origin::Flag) => Error::InvalidArgument(format!("--set {name}: {message}")),
            _ => Error::InvalidArgument(format!("default {name}: {message}")),
        }
    }

    fn parsed<T: std::str::FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(name)
            .parse::<T>()
            .map_err(|e| self.error(name, format!("{:?}: {e}", self.get(name))))
    }

    fn real(&self, name: &str) -> Result<f64> {
        let v = self.get(name);
        let parsed = match v.split_once('/') {
            Some((a, b)) => a
                .trim()
                .parse::<f64>()
                .and_then(|a| b.trim().parse::<f64>().map(|b| a / b)),
            None => v.parse::<f64>(),
        };
        match parsed {
            Ok(x) if x.is_finite() => Ok(x),
            Ok(_) => Err(self.error(name, format!("{v:?} is not finite"))),
            Err(e) => Err(self.error(name, format!("{v:?}: {e}"))),
        }
    }

    fn flag(&self, name: &str) -> Result<bool> {
        match self.get(name) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(self.error(name, format!("expected true or false, got {other:?}"))),
        }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        let v = self.get(name);
        if v.is_empty() {
            return None;
        }
        let p = PathBuf::from(v);
        Some(match self.entries[name].origin {
            Origin::File(_) if p.is_relative() => self.base_dir.join(p),
            _ => p,
        })
    }

    fn command(&self, name: &str) -> Result<Option<ExternalToolSpec>> {
        let v = self.get(name);
        if v.is_empty() {
            Ok(None)
        } else {
            ExternalToolSpec::parse(v).map(Some).map_err(|e| self.error(name, e.to_string()))
        }
    }

    fn stains(&self, name: &str) -> Result<StainMatrix> {
        match self.get(name) {
            "reference" => Ok(StainMatrix::reference_he()),
            "shifted" => Ok(shifted_stains()),
            v => {
                let nums: Vec<f64> = v
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| self.error(name, format!("{v:?}: {e}")))?;
                if nums.len() != 6 {
                    return Err(self.error(name, format!("expected 6 numbers, found {}", nums.len())));
                }
                let norm = |c: &[f64]| {
                    let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                    [c[0] / n, c[1] / n, c[2] / n]
                };
                canonical_order([norm(&nums[..3]), norm(&nums[3..])])
                    .map_err(|e| self.error(name, e.to_string()))
            }
        }
    }

    /// `validate` failures point at the first key of `section` set in the file.
    fn section_error(&self, section: &str, e: Error) -> Error {
        let name = KEYS
            .iter()
            .filter(|s| s.section == section)
            .map(|s| format!("{}.{}", s.section, s.key))
            .filter(|n| matches!(self.entries[n].origin, Origin::File(_) | Origin::Flag))
            .min_by_key(|n| match self.entries[n].origin {
                Origin::File(l) => l,
                _ => usize::MAX,
            });
        match name {
            Some(n) => self.error(&n, e.to_string()),
            None => e,
        }
    }

    /// Canonical `section.key = value` listing of experiment settings;
    /// `[paths]` is left out so relocating inputs or outputs keeps the hash.
    pub fn canonical_text(&self) -> String {
        KEYS.iter()
            .filter(|s| s.section != "paths")
            .map(|s| format!("{}.{} = {}\n", s.section, s.key, self.get(&format!("{}.{}", s.section, s.key))))
            .collect()
    }

    pub fn hash(&self) -> String {
        short_hash(&self.canonical_text())
    }

    pub fn build(&self) -> Result<RunConfig> {
        let factorization = FactorizationConfig {
            sparsity_lambda: self.real("factorization.sparsity_lambda")?,
            max_iters: self.parsed("factorization.max_iters")?,
            rel_tolerance: self.real("factorization.rel_tolerance")?,
            seed: self.parsed("seeds.seed")?,
            background_cutoff: self.real("factorization.background_cutoff")?,
            min_foreground: self.parsed("factorization.min_foreground")?,
        };
        factorization
            .validate()
            .map_err(|e| self.section_error("factorization", e))?;
        let od = OdParams {
            i0: self.real("od.i0")?,
            eps: self.real("od.eps")?,
        };
        if !(od.i0 > 0.0 && od.eps > 0.0) {
            return Err(self.section_error(
                "od",
                Error::InvalidArgument("i0 and eps must be positive".into()),
            ));
        }
        let tiling = TileSpec {
            source_size: self.parsed("tiling.source_size")?,
            output_size: self.parsed("tiling.output_size")?,
            physical_extent_um: self.real("tiling.physical_extent_um")?,
            tiles_per_slide: self.parsed("tiling.tiles_per_slide")?,
            crop_size: self.parsed("tiling.crop_size")?,
            min_coverage: self.real("tiling.min_coverage")?,
            mask_downsample: self.parsed("tiling.mask_downsample")?,
        };
        tiling.validate().map_err(|e| self.section_error("tiling", e))?;

        let modes = self
            .get("normalization.modes")
            .split(',')
            .map(|m| m.trim().parse::<NormalizationMode>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| self.error("normalization.modes", e.to_string()))?;
        let external_normalizer = self.command("normalization.external_command")?;
        if modes.contains(&NormalizationMode::External) && external_normalizer.is_none() {
            return Err(self.error(
                "normalization.modes",
                "mode external needs normalization.external_command".into(),
            ));
        }
        let template_tiles_per_slide: usize = self.parsed("normalization.template_tiles_per_slide")?;
        if template_tiles_per_slide == 0 {
            return Err(self.error("normalization.template_tiles_per_slide", "must be >= 1".into()));
        }

        let classifier = match self.get("classifier.kind") {
            "builtin" => {
                let cfg = ClassifierConfig {
                    l2: self.real("classifier.l2")?,
                    max_iters: self.parsed("classifier.max_iters")?,
                    stain_tiles_per_slide: self.parsed("classifier.stain_tiles_per_slide")?,
                    factorization: factorization.clone(),
                    od,
                };
                if !(cfg.l2 > 0.0) {
                    return Err(self.error("classifier.l2", "must be positive".into()));
                }
                ClassifierSpec::Builtin(cfg)
            }
            "external" => ClassifierSpec::External(
                self.command("classifier.command")?
                    .ok_or_else(|| self.error("classifier.command", "kind external needs a command".into()))?,
            ),
            other => {
                return Err(self.error("classifier.kind", format!("expected builtin or external, got {other:?}")))
            }
        };

        let train_batches = self
            .get("experiment.train_batches")
            .split(',')
            .map(|b| b.trim().parse::<Batch>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| self.error("experiment.train_batches", e.to_string()))?;

        let plan_seed = match self.get("seeds.plan_seed") {
            "identity" => None,
            _ => Some(self.parsed("seeds.plan_seed")?),
        };
        let n_permutations: u64 = self.parsed("stats.n_permutations")?;
        if n_permutations == 0 {
            return Err(self.error("stats.n_permutations", "must be >= 1".into()));
        }
        let alpha = self.real("stats.alpha")?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(self.error("stats.alpha", "must be in (0, 1)".into()));
        }
        let bonferroni_m: usize = self.parsed("stats.bonferroni_m")?;
        if bonferroni_m == 0 {
            return Err(self.error("stats.bonferroni_m", "must be >= 1".into()));
        }

        let lo_hi: Vec<f64> = self
            .get("synth.stroma_fraction")
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| self.error("synth.stroma_fraction", e.to_string()))?;
        if lo_hi.len() != 2 {
            return Err(self.error("synth.stroma_fraction", "expected two numbers".into()));
        }
        let synth = SynthConfig {
            n_patients: self.parsed("synth.n_patients")?,
            tiles_per_slide: self.parsed("synth.tiles_per_slide")?,
            tile_size: self.parsed("synth.tile_size")?,
            positive_fraction: self.real("synth.positive_fraction")?,
            class_signal_strength: self.real("synth.class_signal_strength")?,
            stains_a: self.stains("synth.stains_a")?,
            stains_b: self.stains("synth.stains_b")?,
            gain_a: self.real("synth.gain_a")?,
            gain_b: self.real("synth.gain_b")?,
            noise_sigma: self.real("synth.noise_sigma")?,
            nuclei_per_kilopixel: self.real("synth.nuclei_per_kilopixel")?,
            nucleus_radius: self.real("synth.nucleus_radius")?,
            stroma_fraction: (lo_hi[0], lo_hi[1]),
            seed: factorization.seed,
        };
        synth.validate().map_err(|e| self.section_error("synth", e))?;

        Ok(RunConfig {
            manifest: self.path("paths.manifest"),
            output: self.path("paths.output").unwrap_or_else(|| PathBuf::from("out")),
            seed: factorization.seed,
            plan_seed,
            od,
            tiling,
            modes,
            template_tiles_per_slide,
            normalize_same_batch: self.flag("normalization.normalize_same_batch")?,
            external_normalizer,
            classifier,
            train_batches,
            n_permutations,
            alpha,
            bonferroni_m,
            accuracy_threshold: self.real("stats.accuracy_threshold")?,
            synth,
            factorization,
            hash: self.hash(),
            canonical: self.canonical_text(),
        })
    }
}

/// Typed, validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    /// `None` keeps patients in index order.
    pub plan_seed: Option<u64>,
    pub factorization: FactorizationConfig,
    pub od: OdParams,
    pub tiling: TileSpec,
    pub modes: Vec<NormalizationMode>,
    pub template_tiles_per_slide: usize,
    pub normalize_same_batch: bool,
    pub external_normalizer: Option<ExternalToolSpec>,
    pub classifier: ClassifierSpec,
    pub train_batches: Vec<Batch>,
    pub n_permutations: u64,
    pub alpha: f64,
    pub bonferroni_m: usize,
    pub accuracy_threshold: f64,
    pub synth: SynthConfig,
    pub hash: String,
    /// Effective settings as `section.key = value` lines.
    pub canonical: String,
}

impl RunConfig {
    pub fn provenance(&self) -> String {
        format!("stainbench {} config {}", env!("CARGO_PKG_VERSION"), self.hash)
    }

    pub fn experiment_options(&self) -> ExperimentOptions {
        ExperimentOptions {
            classifier: self.classifier.clone(),
            factorization: self.factorization.clone(),
            od: self.od,
            template_tiles_per_slide: self.template_tiles_per_slide,
            normalize_same_batch: self.normalize_same_batch,
            external_normalizer: self.external_normalizer.clone(),
            n_permutations: self.n_permutations,
            alpha: self.alpha,
            bonferroni_m: self.bonferroni_m,
            accuracy_threshold: self.accuracy_threshold,
            seed: self.seed,
            provenance: self.provenance(),
        }
    }
}
