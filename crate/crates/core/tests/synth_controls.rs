use stainbench::harness::{
    make_plan, run_experiment, Arm, CohortIndex, ExperimentOptions, ExperimentResult,
    NormalizationMode,
};
use stainbench::manifest::Batch;
use stainbench::synth::{self, SynthConfig};

fn run(cfg: &SynthConfig) -> ExperimentResult {
    let dir = tempfile::tempdir().unwrap();
    let data = synth::generate(cfg, dir.path()).unwrap();
    let manifest = data.combined();
    let cohort = CohortIndex::from_manifest(&manifest).unwrap();
    let plan = make_plan(&cohort, Batch::A, NormalizationMode::None, Some(cfg.seed)).unwrap();
    let opts = ExperimentOptions {
        seed: cfg.seed,
        n_permutations: 50,
        ..ExperimentOptions::default()
    };
    run_experiment(&plan, &cohort, &manifest, &opts, &dir.path().join("out")).unwrap()
}

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        n_patients: 60,
        tiles_per_slide: 3,
        tile_size: 48,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn no_class_signal_gives_chance_auc() {
    let mut aucs = Vec::new();
    for seed in 0..20 {
        let cfg = SynthConfig {
            class_signal_strength: 0.0,
            ..small(seed)
        };
        let r = run(&cfg);
        aucs.push(r.summary(Arm::Same, NormalizationMode::None).unwrap().mean_auc());
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.07, "mean AUC {mean} over {aucs:?}");
}

#[test]
fn identical_batches_show_no_gap() {
    for seed in 0..3 {
        let base = small(seed);
        let cfg = SynthConfig {
            stains_b: base.stains_a,
            gain_b: base.gain_a,
            ..base
        };
        let r = run(&cfg);
        let same = r.summary(Arm::Same, NormalizationMode::None).unwrap().mean_auc();
        let cross = r.summary(Arm::Cross, NormalizationMode::None).unwrap().mean_auc();
        assert!((same - cross).abs() <= 0.03, "seed {seed}: same {same} cross {cross}");
    }
}
