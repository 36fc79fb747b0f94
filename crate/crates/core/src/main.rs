use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use tpunet::gradsuite::{run_suite, MODULES};
use tpunet::harness::{
    append_metrics_csv, run_ablation, train, write_loss_csv, ConfigFile, Trained, Variant,
    CHECKPOINT_FILE, LOSS_FILE,
};
use tpunet::synthdata::{generate_dataset, Dataset, Split, MANIFEST_FILE};

#[derive(Parser)]
#[command(
    name = "tpunet",
    version,
    about = "Temporal-prompt guided UNet segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic slice dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and keep the best validation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train and test all five variants over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    Ok(match path {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::parse("{}")?,
    })
}

fn data_dir(flag: Option<PathBuf>, cfg: &ConfigFile) -> Result<PathBuf> {
    match flag.or_else(|| cfg.run.data.clone().map(PathBuf::from)) {
        Some(d) => Ok(d),
        None => bail!("no dataset given: pass --data or set \"data\" in the config"),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let manifest = generate_dataset(&cfg.synth, &out)?;
            let hash = tpunet::synthdata::file_hash(&out.join(MANIFEST_FILE))?;
            let counts: Vec<usize> = Split::ALL
                .iter()
                .map(|&s| manifest.records_in(s).count())
                .collect();
            println!(
                "{}",
                json!({
                    "command": "gen-data",
                    "out": out,
                    "samples": manifest.records.len(),
                    "train": counts[0],
                    "val": counts[1],
                    "test": counts[2],
                    "manifest_hash": hash,
                })
            );
            Ok(true)
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = Dataset::open(&data_dir(data, &cfg)?)?;
            let steps = cfg.run.steps;
            let outcome = train(&cfg.run, &dataset, |l| {
                if (l.step + 1) % 50 == 0 || l.step + 1 == steps {
                    eprintln!(
                        "step {:>5}/{steps}  lr {:.3e}  loss {:.5}",
                        l.step + 1,
                        l.lr,
                        l.total
                    );
                }
            })?;
            outcome.trained.save(&out)?;
            write_loss_csv(&out.join(LOSS_FILE), &outcome.log)?;
            std::fs::write(out.join("metrics_val.json"), outcome.report.to_json())
                .with_context(|| format!("writing metrics into {}", out.display()))?;
            println!(
                "{}",
                json!({
                    "command": "train",
                    "checkpoint": out.join(CHECKPOINT_FILE),
                    "wall_clock_seconds": outcome.report.wall_clock_seconds,
                    "report": outcome.report,
                })
            );
            Ok(true)
        }
        Command::Eval { ckpt, data, split } => {
            let trained = Trained::load(&ckpt)?;
            let dataset = Dataset::open(&data)?;
            if dataset.num_classes() != trained.record.run.num_classes {
                bail!(
                    "checkpoint has {} classes, dataset has {}",
                    trained.record.run.num_classes,
                    dataset.num_classes()
                );
            }
            let report = trained.evaluate(&dataset.load(split)?, split)?;
            let dir = ckpt.parent().unwrap_or(Path::new("."));
            let run_id = dir
                .file_name()
                .map_or("run".into(), |n| n.to_string_lossy().into_owned());
            let csv = dir.join(format!("metrics_{split}.csv"));
            if csv.exists() {
                std::fs::remove_file(&csv)
                    .with_context(|| format!("replacing {}", csv.display()))?;
            }
            append_metrics_csv(&csv, &report, &run_id)?;
            std::fs::write(dir.join(format!("metrics_{split}.json")), report.to_json())
                .with_context(|| format!("writing metrics into {}", dir.display()))?;
            println!("{}", json!({ "command": "eval", "report": report }));
            Ok(true)
        }
        Command::Ablate {
            config,
            data,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = Dataset::open(&data_dir(data, &cfg)?)?;
            let table = run_ablation(&cfg.run, &dataset, &seeds, |variant, seed, step, report| {
                if let Some(r) = report {
                    eprintln!(
                        "{variant} seed {seed}: test mean Dice {:.4} ({:.0} s)",
                        r.mean_dice, r.wall_clock_seconds
                    );
                } else if let Some(l) = step {
                    if (l.step + 1) % 250 == 0 {
                        eprintln!(
                            "{variant} seed {seed}: step {} loss {:.5}",
                            l.step + 1,
                            l.total
                        );
                    }
                }
            })?;
            table.write_csv(&out)?;
            let runs_path = out.with_extension("runs.json");
            std::fs::write(&runs_path, serde_json::to_string_pretty(&table.runs)?)
                .with_context(|| format!("writing {}", runs_path.display()))?;
            let dice = |v: Variant| table.row(v).map_or(f64::NAN, |r| r.mean_dice);
            let full = dice(Variant::Full);
            let others = [
                Variant::Full,
                Variant::NoTemporalInfo,
                Variant::NoSemanticAlign,
                Variant::NoModalityFusion,
            ];
            let prompt_weakest = others
                .iter()
                .all(|&v| dice(Variant::NoTemporalPrompt) < dice(v));
            println!(
                "{}",
                json!({
                    "command": "ablate",
                    "table": out,
                    "seeds": seeds,
                    "median_mean_dice": table.rows.iter().map(|r| (r.variant.as_str(), r.mean_dice)).collect::<std::collections::BTreeMap<_, _>>(),
                    "full_minus_no_temporal_info": full - dice(Variant::NoTemporalInfo),
                    "no_temporal_prompt_is_minimum": prompt_weakest,
                })
            );
            Ok(true)
        }
        Command::Gradcheck { module, seed } => {
            if let Some(m) = &module {
                if !MODULES.contains(&m.as_str()) {
                    bail!(
                        "unknown module {m:?}; expected one of {}",
                        MODULES.join(", ")
                    );
                }
            }
            let start = std::time::Instant::now();
            let cases = run_suite(module.as_deref(), seed);
            let passed = cases.iter().all(|c| c.report.passed);
            let summary: Vec<_> = cases
                .iter()
                .map(|c| {
                    json!({
                        "module": c.module,
                        "case": c.case,
                        "passed": c.report.passed,
                        "tol": c.report.tol,
                        "max_rel_err": c.report.max_rel_err(),
                        "error": c.report.error,
                    })
                })
                .collect();
            println!(
                "{}",
                json!({
                    "command": "gradcheck",
                    "passed": passed,
                    "cases": summary,
                    "seconds": start.elapsed().as_secs_f64(),
                })
            );
            Ok(passed)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            println!("{}", json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
