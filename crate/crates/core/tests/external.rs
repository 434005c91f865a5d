use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use stainbench::color::TilePixels;
use stainbench::external::ExternalToolSpec;
use stainbench::harness::{
    make_plan, run_experiment, Arm, ClassifierSpec, CohortIndex, ExperimentOptions,
    NormalizationMode,
};
use stainbench::manifest::{Batch, TileManifest};
use stainbench::normalize::run_external_normalizer;
use stainbench::synth::{self, SynthConfig};
use stainbench::Error;

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\nset -e\n{body}")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

fn small_data(dir: &Path) -> TileManifest {
    let cfg = SynthConfig {
        n_patients: 30,
        tiles_per_slide: 2,
        tile_size: 32,
        ..SynthConfig::default()
    };
    synth::generate(&cfg, dir).unwrap().combined()
}

const NORMALIZER_ARGS: &str = r#"
while [ $# -gt 0 ]; do
  case "$1" in
    --manifest) manifest="$2"; shift ;;
    --out) out="$2"; shift ;;
  esac
  shift
done
"#;

#[test]
fn identity_normalizer_round_trips_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path()).filter(|r| r.batch == Batch::B);
    let tool = script(
        dir.path(),
        "copy.sh",
        &format!(
            "{NORMALIZER_ARGS}grep -v '^#' \"$manifest\" | tail -n +2 | \
             while IFS=, read id slide path; do cp \"$path\" \"$out/$id.png\"; done\n"
        ),
    );
    let work = dir.path().join("work");
    std::fs::create_dir_all(&work).unwrap();
    let spec = ExternalToolSpec::parse(tool.to_str().unwrap()).unwrap();
    let out = run_external_normalizer(&manifest, &spec, &work, "test").unwrap();
    assert_eq!(out.len(), manifest.len());
    for (a, b) in manifest.tiles.iter().zip(&out.tiles) {
        let before = TilePixels::read_png(&manifest.resolve(a)).unwrap();
        let after = TilePixels::read_png(&out.resolve(b)).unwrap();
        assert_eq!(before, after);
    }
}

#[test]
fn normalizer_dropping_a_tile_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path()).filter(|r| r.batch == Batch::A);
    let tool = script(
        dir.path(),
        "lossy.sh",
        &format!(
            "{NORMALIZER_ARGS}grep -v '^#' \"$manifest\" | tail -n +3 | \
             while IFS=, read id slide path; do cp \"$path\" \"$out/$id.png\"; done\n"
        ),
    );
    let work = dir.path().join("work");
    std::fs::create_dir_all(&work).unwrap();
    let spec = ExternalToolSpec::parse(tool.to_str().unwrap()).unwrap();
    match run_external_normalizer(&manifest, &spec, &work, "test") {
        Err(Error::MissingOutputs(ids)) => assert_eq!(ids, vec![manifest.tiles[0].tile_id.clone()]),
        other => panic!("expected MissingOutputs, got {other:?}"),
    }
}

#[test]
fn lut_tool_with_unit_gamma_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path()).filter(|r| r.batch == Batch::B);
    let work = dir.path().join("work");
    std::fs::create_dir_all(&work).unwrap();
    let spec = ExternalToolSpec::parse(env!("CARGO_BIN_EXE_stainbench-lut")).unwrap();
    let out = run_external_normalizer(&manifest, &spec, &work, "test").unwrap();
    for (a, b) in manifest.tiles.iter().zip(&out.tiles) {
        assert_eq!(
            TilePixels::read_png(&manifest.resolve(a)).unwrap(),
            TilePixels::read_png(&out.resolve(b)).unwrap()
        );
    }
}

/// Scores each tile with a shell expression over the manifest columns.
fn classifier_script(dir: &Path, score_expr: &str) -> ExternalToolSpec {
    let body = format!(
        r#"cmd="$1"; shift
while [ $# -gt 0 ]; do
  case "$1" in
    --manifest) manifest="$2"; shift ;;
    --model-out) model="$2"; shift ;;
    --scores-out) scores="$2"; shift ;;
  esac
  shift
done
if [ "$cmd" = train ]; then echo fitted > "$model"; exit 0; fi
echo slide_id,tile_id,score > "$scores"
grep -v '^#' "$manifest" | tail -n +2 | awk -F, '{{ print $2 "," $1 "," {score_expr} }}' >> "$scores"
"#
    );
    let path = script(dir, "classifier.sh", &body);
    ExternalToolSpec::parse(path.to_str().unwrap()).unwrap()
}

fn run_with(dir: &Path, manifest: &TileManifest, tool: ExternalToolSpec) -> Vec<(Arm, f64, usize)> {
    let cohort = CohortIndex::from_manifest(manifest).unwrap();
    let plan = make_plan(&cohort, Batch::A, NormalizationMode::None, None).unwrap();
    let opts = ExperimentOptions {
        classifier: ClassifierSpec::External(tool),
        n_permutations: 100,
        ..ExperimentOptions::default()
    };
    let result = run_experiment(&plan, &cohort, manifest, &opts, &dir.join("out")).unwrap();
    result
        .summaries
        .iter()
        .flat_map(|s| s.folds.iter().map(move |f| (s.arm, f.auc, f.n_slides())))
        .collect()
}

#[test]
fn constant_external_classifier_has_chance_auc() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let tool = classifier_script(dir.path(), "0.5");
    for (_, auc, _) in run_with(dir.path(), &manifest, tool) {
        assert_eq!(auc, 0.5);
    }
}

#[test]
fn label_reading_classifier_is_perfect_and_unpaired_patients_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let full = small_data(dir.path());
    let dropped = full.tiles.iter().find(|r| r.batch == Batch::B).unwrap().slide_id.clone();
    let manifest = full.filter(|r| r.slide_id != dropped);
    let tool = classifier_script(dir.path(), "$5");
    let folds = run_with(dir.path(), &manifest, tool);
    let slides = |arm| folds.iter().filter(|f| f.0 == arm).map(|f| f.2).sum::<usize>();
    for (_, auc, _) in &folds {
        assert_eq!(*auc, 1.0);
    }
    assert_eq!(slides(Arm::Same), slides(Arm::Cross));
    assert!(slides(Arm::Same) < 30);
}
