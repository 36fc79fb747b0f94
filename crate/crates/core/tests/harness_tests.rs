use std::path::Path;

use tpunet::harness::{
    adam_step, cosine_lr, default_lr_min, train, AdamState, ConfigFile, RunConfig, Trained,
    Variant, CHECKPOINT_FILE,
};
use tpunet::params::ParamStore;
use tpunet::synthdata::{generate_dataset, Dataset, Split, SynthConfig};
use tpunet::tensor::Tensor;

fn dataset(dir: &Path, cfg: &SynthConfig) -> Dataset {
    generate_dataset(cfg, dir).unwrap();
    Dataset::open(dir).unwrap()
}

fn small_data() -> SynthConfig {
    SynthConfig {
        patients: 16,
        slices: 4,
        image_size: 16,
        ..SynthConfig::default()
    }
}

fn small_run(variant: Variant, steps: usize) -> RunConfig {
    RunConfig {
        variant,
        steps,
        batch_size: 4,
        eval_every: 10,
        base_channels: 4,
        text_dim: 8,
        fusion_dim: 8,
        ..RunConfig::default()
    }
}

#[test]
fn cosine_schedule_never_increases() {
    let lr0 = 3e-5;
    let lrs: Vec<f64> = (0..=500)
        .map(|s| cosine_lr(s, 500, lr0, default_lr_min(lr0)).unwrap())
        .collect();
    assert_eq!(lrs[0], lr0);
    assert!((lrs[500] - lr0 / 100.0).abs() < 1e-18);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(cosine_lr(501, 500, lr0, 0.0).is_err());
}

#[test]
fn adam_moves_by_lr_under_constant_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::full([3], 1.0).requiring_grad());
    let mut state = AdamState::new(&store);
    let lr = 1e-3;
    let mut prev = 1.0;
    for step in 0..200 {
        store.get_mut(id).set_grad(vec![0.7, 0.7, 0.7]).unwrap();
        adam_step(&mut store, &mut state, lr, 0.0).unwrap();
        let now = store.get(id).data()[0];
        if step > 0 {
            assert!(((prev - now) - lr).abs() < 1e-8);
        }
        prev = now;
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(ConfigFile::parse(r#"{"steps": 10, "patients": 12}"#).is_ok());
    assert!(ConfigFile::parse(r#"{"stpes": 10}"#).is_err());
}

#[test]
fn smoke_run_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        image_size: 32,
        ..small_data()
    };
    let ds = dataset(&dir.path().join("data"), &cfg);
    assert_eq!(ds.manifest.records.len(), 64);
    for variant in Variant::ALL {
        let out = train(&small_run(variant, 50), &ds, |_| {}).unwrap();
        assert_eq!(out.log.len(), 50);
        assert!(out.log.iter().all(|l| l.total.is_finite()));
        let run_dir = dir.path().join(variant.as_str());
        out.trained.save(&run_dir).unwrap();
        assert!(run_dir.join(CHECKPOINT_FILE).is_file());
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), &small_data());
    let out = train(&small_run(Variant::Full, 20), &ds, |_| {}).unwrap();
    out.trained.save(&dir.path().join("run")).unwrap();
    let loaded = Trained::load(&dir.path().join("run").join(CHECKPOINT_FILE)).unwrap();
    let test = ds.load(Split::Test).unwrap();
    assert_eq!(
        out.trained.predict(&test).unwrap(),
        loaded.predict(&test).unwrap()
    );
    assert_eq!(
        out.trained.evaluate(&test, Split::Test).unwrap().to_json(),
        loaded.evaluate(&test, Split::Test).unwrap().to_json()
    );
}

#[test]
fn repeated_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), &small_data());
    for variant in [Variant::Full, Variant::NoModalityFusion] {
        let run = small_run(variant, 30);
        let a = train(&run, &ds, |_| {}).unwrap();
        let b = train(&run, &ds, |_| {}).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        let bits = |o: &tpunet::harness::TrainOutcome| {
            o.log.iter().map(|l| l.total.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn loss_falls_over_300_steps_on_default_data() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), &SynthConfig::default());
    let mut first = Vec::new();
    let mut last = Vec::new();
    for seed in [1, 2, 3] {
        let run = RunConfig {
            seed,
            steps: 301,
            eval_every: 301,
            ..RunConfig::default()
        };
        let out = train(&run, &ds, |_| {}).unwrap();
        first.push(out.log[0].total);
        last.push(out.log[300].total);
    }
    let median = tpunet::harness::median;
    assert!(median(&last) < median(&first), "{last:?} vs {first:?}");
}
