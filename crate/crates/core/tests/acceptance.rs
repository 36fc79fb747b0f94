//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpunet::align::{loss_i2t, loss_t2i, AlignmentBatch};
use tpunet::fusion::FusionParams;
use tpunet::gradsuite::run_suite;
use tpunet::harness::{run_ablation, train, RunConfig, Variant};
use tpunet::objectives::{bce, dice, jaccard, soft_dice_loss, tversky, TVERSKY_SMOOTH};
use tpunet::params::ParamStore;
use tpunet::prompt::{render_prompt, Modality, PromptSpec};
use tpunet::synthdata::{
    generate_dataset, generate_patient, presence_weight, Dataset, OrganSpec, SynthConfig,
};
use tpunet::tensor::{Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = run_suite(None, 0);
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.report.passed)
        .map(|c| format!("{}/{}", c.module, c.case))
        .collect();
    let worst = cases
        .iter()
        .map(|c| c.report.max_rel_err())
        .fold(0.0, f64::max);
    let e2e = cases.iter().filter(|c| c.module == "end_to_end").count();
    outcome(
        failed.is_empty() && e2e > 0 && secs < 120.0,
        format!(
            "{} cases, worst rel err {worst:.2e}, {secs:.1} s, failed {failed:?}",
            cases.len()
        ),
    )
}

fn loss_oracles() -> Outcome {
    let tape = Tape::new();
    let one = |d: Vec<f64>| tape.constant(Tensor::new([1, 3], d).unwrap());
    let single = AlignmentBatch::new(
        one(vec![0.3, -1.0, 2.0]),
        one(vec![1.0, 0.5, 0.0]),
        0.1,
        0.5,
    )
    .unwrap();
    let l1 = (
        loss_i2t(&single).unwrap().item().unwrap(),
        loss_t2i(&single).unwrap().item().unwrap(),
    );

    let eye = || tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let pair = AlignmentBatch::new(eye(), eye(), 1.0, 0.5).unwrap();
    let expect = (1.0 + (-1.0f64).exp()).ln();
    let l2 = (
        loss_i2t(&pair).unwrap().item().unwrap(),
        loss_t2i(&pair).unwrap().item().unwrap(),
    );

    let half = tape.constant(Tensor::full([1, 1], 0.5));
    let b = bce(half, tape.constant(Tensor::full([1, 1], 1.0)))
        .unwrap()
        .item()
        .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let shape = [
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        ];
        let n: usize = shape.iter().product();
        let p = Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let y = Tensor::new(
            shape,
            (0..n).map(|_| rng.gen_bool(0.4) as u8 as f64).collect(),
        )
        .unwrap();
        let (p, y) = (tape.constant(p), tape.constant(y));
        let t = tversky(p, y, 0.5, 0.5).unwrap().item().unwrap();
        let d = soft_dice_loss(p, y, 2.0 * TVERSKY_SMOOTH)
            .unwrap()
            .item()
            .unwrap();
        worst = worst.max((t - d).abs());
    }
    let pass = l1.0.abs() < 1e-12
        && l1.1.abs() < 1e-12
        && (l2.0 - 0.31326).abs() < 1e-5
        && (l2.1 - 0.31326).abs() < 1e-5
        && (l2.0 - expect).abs() < 1e-12
        && (b - 2f64.ln()).abs() < 1e-9
        && worst < 1e-12;
    outcome(
        pass,
        format!(
            "Nb=1 ({:.1e}, {:.1e}); Nb=2 ({:.6}, {:.6}); BCE {b:.12}; tversky-dice gap {worst:.1e}",
            l1.0, l1.1, l2.0, l2.1
        ),
    )
}

fn set_scores(a: &[bool], b: &[bool]) -> (f64, f64) {
    let sa: HashSet<usize> = (0..a.len()).filter(|&i| a[i]).collect();
    let sb: HashSet<usize> = (0..b.len()).filter(|&i| b[i]).collect();
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    if union == 0.0 {
        return (1.0, 1.0);
    }
    (2.0 * inter / (sa.len() + sb.len()) as f64, inter / union)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut identity) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (pa, pb) = (rng.gen::<f64>(), rng.gen::<f64>());
        let a: Vec<bool> = (0..256).map(|_| rng.gen_bool(pa)).collect();
        let b: Vec<bool> = (0..256).map(|_| rng.gen_bool(pb)).collect();
        let (d, j) = (dice(&a, &b), jaccard(&a, &b));
        let (od, oj) = set_scores(&a, &b);
        worst = worst.max((d - od).abs()).max((j - oj).abs());
        identity = identity.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    outcome(
        worst < 1e-12 && identity < 1e-12,
        format!("max oracle gap {worst:.1e}, max |D - 2J/(1+J)| {identity:.1e}"),
    )
}

fn attention_contract() -> Outcome {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = FusionParams::new(&mut store, &mut rng, 6, 5, 8);
    let mut row_gap = 0.0f64;
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let img = Tensor::new(
            [2, 6, 3, 3],
            (0..108).map(|_| r.gen_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let txt =
            Tensor::new([2, 4, 5], (0..40).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap();
        let (im, tx) = f
            .project(&p, tape.constant(img), tape.constant(txt))
            .unwrap();
        let pad = [false, false, true, true, false, false, false, true];
        let w = f
            .cross_attention(&p, im, tx, Some(&pad))
            .unwrap()
            .weights
            .to_vec();
        for row in w.chunks(13) {
            row_gap = row_gap.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    for id in [f.query_weight(), f.key_weight()] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let p = store.bind(&tape);
    let s = Tensor::new(
        [2, 5, 8],
        (0..80).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let out = f
        .attend(&p, tape.constant(s.clone()), None)
        .unwrap()
        .output
        .to_vec();
    let wv = store.get(f.value_weight()).data();
    let mut uniform_gap = 0.0f64;
    for b in 0..2 {
        for j in 0..8 {
            let mean: f64 = (0..5)
                .map(|t| {
                    (0..8)
                        .map(|c| s.data()[(b * 5 + t) * 8 + c] * wv[c * 8 + j])
                        .sum::<f64>()
                })
                .sum::<f64>()
                / 5.0;
            for t in 0..5 {
                uniform_gap = uniform_gap.max((out[(b * 5 + t) * 8 + j] - mean).abs());
            }
        }
    }
    outcome(
        row_gap < 1e-9 && uniform_gap < 1e-9,
        format!("max row-sum gap {row_gap:.1e}, uniform closed-form gap {uniform_gap:.1e}"),
    )
}

/// Gaussian-kernel density of the slice positions at which an organ is present.
fn presence_peak(positions: &[f64], bandwidth: f64) -> f64 {
    let density = |t: f64| {
        positions
            .iter()
            .map(|&x| (-(t - x).powi(2) / (2.0 * bandwidth * bandwidth)).exp())
            .sum::<f64>()
    };
    (0..=1000)
        .map(|g| g as f64 / 1000.0)
        .max_by(|&a, &b| density(a).total_cmp(&density(b)))
        .unwrap()
}

fn temporal_fidelity() -> Outcome {
    let mut organs = tpunet::synthdata::default_organs();
    organs.push(OrganSpec::new("liver", 0.78, 0.1, 1, 0.12));
    let cfg = SynthConfig {
        organs,
        slices: 100,
        ..SynthConfig::default()
    };
    let plane = cfg.image_size * cfg.image_size;
    let mut positions = vec![Vec::new(); cfg.organs.len()];
    let mut slices = 0;
    for patient in 0..100 {
        for s in generate_patient(&cfg, patient) {
            slices += 1;
            let t = s.slice_index as f64 / s.slice_total as f64;
            for (c, pos) in positions.iter_mut().enumerate() {
                if s.masks.data()[c * plane..(c + 1) * plane]
                    .iter()
                    .any(|&v| v > 0.5)
                {
                    pos.push(t);
                }
            }
        }
    }
    let mut worst = 0.0f64;
    let mut peaks = Vec::new();
    for (organ, pos) in cfg.organs.iter().zip(&positions) {
        let peak = presence_peak(pos, organ.sigma);
        worst = worst.max((peak - organ.mu).abs());
        peaks.push(format!("{}={peak:.3}", organ.name));
    }
    let example = OrganSpec::new("example", 0.78, 0.1, 0, 0.18);
    let argmax = (1..=100)
        .max_by(|&a, &b| {
            presence_weight(&example, a, 100).total_cmp(&presence_weight(&example, b, 100))
        })
        .unwrap();
    outcome(
        slices >= 10_000 && worst <= 0.05 && argmax == 78,
        format!(
            "{slices} slices, peaks [{}], max offset {worst:.3}, μ=0.78 argmax slice {argmax}",
            peaks.join(", ")
        ),
    )
}

fn prompt_latency() -> Outcome {
    let mut times = Vec::with_capacity(10_000);
    for k in 0..10_000usize {
        let n = 16 + k % 200;
        let spec = PromptSpec::new(Modality::Mri, "small bowel", 1 + k % n, n, true).unwrap();
        let start = Instant::now();
        let text = render_prompt(&spec).unwrap();
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(text);
    }
    times.sort_by(f64::total_cmp);
    let p99 = times[9_899];
    outcome(p99 < 1e-3, format!("p99 {:.2} µs", p99 * 1e6))
}

fn ablation(dataset: &Dataset) -> Outcome {
    let start = Instant::now();
    let table = run_ablation(
        &RunConfig::default(),
        dataset,
        &[1, 2, 3],
        |v, seed, _, report| {
            if let Some(r) = report {
                eprintln!(
                    "  ablation {v} seed {seed}: test mean Dice {:.4}",
                    r.mean_dice
                );
            }
        },
    )
    .expect("ablation runs");
    let hours = start.elapsed().as_secs_f64() / 3600.0;
    let m = |v: Variant| table.row(v).expect("every variant").mean_dice;
    let full = m(Variant::Full);
    let nti = m(Variant::NoTemporalInfo);
    let ntp = m(Variant::NoTemporalPrompt);
    let others = [
        Variant::Full,
        Variant::NoTemporalInfo,
        Variant::NoSemanticAlign,
        Variant::NoModalityFusion,
    ];
    let ntp_min = others.iter().all(|&v| ntp < m(v));
    let medians: Vec<String> = Variant::ALL
        .iter()
        .map(|&v| format!("{v}={:.4}", m(v)))
        .collect();
    outcome(
        full - nti >= 0.03 && full > ntp && ntp_min && hours <= 2.0,
        format!(
            "medians [{}], full-no_temporal_info {:+.4}, no_temporal_prompt minimum {ntp_min}, {hours:.2} h",
            medians.join(", "),
            full - nti
        ),
    )
}

fn determinism(dataset: &Dataset) -> Outcome {
    let run = RunConfig {
        steps: 60,
        eval_every: 20,
        ..RunConfig::default()
    };
    let a = train(&run, dataset, |_| {})
        .expect("first run")
        .report
        .to_json();
    let b = train(&run, dataset, |_| {})
        .expect("second run")
        .report
        .to_json();
    outcome(
        a == b,
        format!("{} JSON bytes, identical {}", a.len(), a == b),
    )
}

fn main() {
    let data_dir = tempfile::tempdir().expect("temp dir");
    generate_dataset(&SynthConfig::default(), data_dir.path()).expect("default dataset");
    let dataset = Dataset::open(data_dir.path()).expect("dataset opens");

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("closed-form loss oracles", Box::new(loss_oracles)),
        ("metric oracle", Box::new(metric_oracle)),
        ("attention contract", Box::new(attention_contract)),
        ("temporal-model fidelity", Box::new(temporal_fidelity)),
        ("prompt latency", Box::new(prompt_latency)),
        ("determinism", Box::new(|| determinism(&dataset))),
        ("ablation direction", Box::new(|| ablation(&dataset))),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failures = 0;
    for (name, check) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let r = check();
        failures += usize::from(!r.pass);
        println!(
            "{} {name}: {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
