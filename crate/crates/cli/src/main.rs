use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pointkey_cli::checkpoint::Checkpoint;
use pointkey_cli::config::{version_stamp, RunConfig};
use pointkey_cli::error::{CliError, Result};
use pointkey_cli::evalrun;
use pointkey_cli::manifest::{LoadedDataset, Split};
use pointkey_cli::perturbrun;
use pointkey_cli::synthgen;
use pointkey_cli::trainer;
use pointkey_core::train::objective_gradcheck;

/// Self-supervised 3D keypoint estimation from point clouds.
#[derive(Parser)]
#[command(name = "pointkey", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON configuration file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of shapes.
        #[arg(long)]
        count: Option<usize>,
        /// Points per cloud.
        #[arg(long)]
        n_points: Option<usize>,
        /// Dataset seed (shapes, splits, pose bank).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory (with manifest.json).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of keypoints.
        #[arg(long)]
        k: Option<usize>,
        /// Architecture preset: desk, paper, or compact.
        #[arg(long)]
        net_preset: Option<String>,
        /// Training objective: sc3k or chamfer.
        #[arg(long)]
        objective: Option<String>,
        /// Resume from a `last.ckpt` written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Force fully sequential evaluation.
        #[arg(long)]
        deterministic: bool,
        /// Fresh random rotations instead of the pose bank.
        #[arg(long)]
        fresh_rotations: bool,
        /// Skip the gradient-correctness gate.
        #[arg(long)]
        skip_gradcheck: bool,
    },
    /// Evaluate a checkpoint (or external keypoints) on a dataset split.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Inclusivity threshold override.
        #[arg(long)]
        tau2: Option<f64>,
        /// Rotated copies per object for the matching error.
        #[arg(long)]
        me_copies: Option<usize>,
        /// Evaluate keypoints from a CSV (id,index,x,y,z) instead of a
        /// checkpoint; the matching error is skipped.
        #[arg(long)]
        keypoints_csv: Option<PathBuf>,
    },
    /// Metric grid over noise scales and down-sampling ratios.
    Perturb {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated noise scales.
        #[arg(long)]
        noise: Option<String>,
        /// Comma-separated down-sampling ratios.
        #[arg(long)]
        ratios: Option<String>,
    },
    /// Finite-difference check of the training objective's gradients.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
        /// Number of random configurations.
        #[arg(long, default_value_t = 20)]
        configs: u64,
        #[arg(long, default_value_t = 64)]
        n_points: usize,
        #[arg(long, default_value_t = 6)]
        keypoints: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Predict keypoints and write them as CSV (id,index,x,y,z).
    Infer {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; inference runs over --split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Individual cloud files (.pcf or XYZ text) instead of a dataset.
        #[arg(long)]
        cloud: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"kind": e.kind(), "msg": e.to_string()});
            eprintln!("{line}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            out,
            count,
            n_points,
            seed,
        } => {
            let mut cfg = RunConfig::load_or_default(config.config.as_deref())?;
            if let Some(c) = count {
                cfg.data.count = c;
            }
            if let Some(n) = n_points {
                cfg.data.n_points = n;
                cfg.net.n_points = n;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            fs::create_dir_all(&out)?;
            let manifest = synthgen::generate_dataset(&out, &cfg)?;
            println!(
                "wrote {} shapes ({} train / {} val / {} test) to {}",
                manifest.entries.len(),
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                manifest.splits.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            batch_size,
            lr,
            seed,
            k,
            net_preset,
            objective,
            resume,
            deterministic,
            fresh_rotations,
            skip_gradcheck,
        } => {
            let mut cfg = RunConfig::load_or_default(config.config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(k) = k {
                cfg.net.n_keypoints = k;
            }
            if let Some(p) = net_preset {
                cfg.net.preset = p;
            }
            if let Some(o) = objective {
                cfg.train.objective = o;
            }
            cfg.train.deterministic |= deterministic;
            cfg.train.fresh_rotations |= fresh_rotations;
            cfg.train.skip_gradcheck |= skip_gradcheck;

            let dataset = LoadedDataset::load(&data)?;
            cfg.net.n_points = dataset.manifest.n_points;
            let resume_ckpt = resume.map(|p| Checkpoint::load(&p)).transpose()?;

            fs::create_dir_all(&out)?;
            let log_path = out.join("train_log.jsonl");
            let mut log_file = fs::File::create(&log_path)?;
            let header = serde_json::json!({"version": version_stamp(), "config": cfg});
            writeln!(log_file, "{header}")?;

            let outcome = trainer::fit(&dataset, &cfg, resume_ckpt, &mut |record| {
                if let Ok(line) = serde_json::to_string(record) {
                    let _ = writeln!(log_file, "{line}");
                    let _ = log_file.flush();
                }
                println!(
                    "epoch {:>4}  train {:>10.5}  val {:>10.5}  ({} ms)",
                    record.epoch, record.train_total, record.val_total, record.wall_ms
                );
            })?;

            outcome.best.save(&out.join("best.ckpt"))?;
            outcome.last.save(&out.join("last.ckpt"))?;
            println!(
                "best epoch {} (val {:.6}); checkpoints in {}",
                outcome.best_epoch,
                outcome.best.best_val_loss,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
            split,
            tau2,
            me_copies,
            keypoints_csv,
        } => {
            let mut cfg = RunConfig::load_or_default(config.config.as_deref())?;
            if let Some(t) = tau2 {
                cfg.metric.tau2 = t;
            }
            if let Some(m) = me_copies {
                cfg.metric.me_copies = m;
            }
            let dataset = LoadedDataset::load(&data)?;
            let split_kind = Split::parse(&split)?;
            let indices = dataset.split_indices(split_kind)?;

            let report = match (&checkpoint, &keypoints_csv) {
                (_, Some(csv)) => {
                    let preds = evalrun::read_keypoints_csv(csv)?;
                    evalrun::evaluate_keypoint_sets(&preds, &dataset, &indices, &split, &cfg)?
                }
                (Some(ckpt_path), None) => {
                    let ckpt = Checkpoint::load(ckpt_path)?;
                    cfg.net = ckpt.config.net.clone();
                    evalrun::evaluate_model(&ckpt.params, &dataset, &indices, &split, &cfg)?
                }
                (None, None) => {
                    return Err(CliError::Config(
                        "need --checkpoint or --keypoints-csv".into(),
                    ))
                }
            };
            evalrun::write_report(&report, &out)?;
            let a = &report.average;
            println!(
                "{} split: inclusivity {:.2} (tau2 {}), coverage {:.2}, das {}, me {}",
                report.split,
                a.inclusivity,
                cfg.metric.tau2,
                a.coverage,
                a.das.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
                a.me_mu.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            );
            Ok(())
        }
        Command::Perturb {
            config,
            checkpoint,
            data,
            out,
            split,
            noise,
            ratios,
        } => {
            let mut cfg = RunConfig::load_or_default(config.config.as_deref())?;
            if let Some(list) = noise {
                cfg.data.noise_scales = parse_list(&list, "noise")?;
            }
            if let Some(list) = ratios {
                cfg.data.ds_ratios = parse_list(&list, "ratios")?;
            }
            let dataset = LoadedDataset::load(&data)?;
            let indices = dataset.split_indices(Split::parse(&split)?)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            cfg.net = ckpt.config.net.clone();
            let report = perturbrun::perturb_eval(&ckpt.params, &dataset, &indices, &split, &cfg)?;
            perturbrun::write_report(&report, &out)?;
            for row in &report.rows {
                println!(
                    "noise {:>5}  ratio {:>3}x  inclusivity {:>7.2}  coverage {:>7.2}  me {:.4}",
                    row.noise, row.ratio, row.inclusivity, row.coverage, row.me_mu
                );
            }
            Ok(())
        }
        Command::Gradcheck {
            config,
            configs,
            n_points,
            keypoints,
            tolerance,
            step,
        } => {
            let cfg = RunConfig::load_or_default(config.config.as_deref())?;
            let tcfg = cfg.train.resolve()?;
            let mut worst: f64 = 0.0;
            for seed in 0..configs {
                let report = objective_gradcheck(n_points, keypoints, seed, step, &tcfg);
                println!(
                    "config {seed:>3}: max rel err {:.3e} (param {}, element {})",
                    report.max_rel_err, report.worst_param, report.worst_index
                );
                worst = worst.max(report.max_rel_err);
            }
            println!("worst over {configs} configurations: {worst:.3e}");
            if worst > tolerance {
                return Err(CliError::Numeric(format!(
                    "gradient check failed: {worst:.3e} > {tolerance:.1e}"
                )));
            }
            Ok(())
        }
        Command::Infer {
            config,
            checkpoint,
            data,
            cloud,
            split,
            out,
        } => {
            let _cfg = RunConfig::load_or_default(config.config.as_deref())?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let rows = match (&data, cloud.is_empty()) {
                (Some(dir), true) => {
                    let dataset = LoadedDataset::load(dir)?;
                    let indices = dataset.split_indices(Split::parse(&split)?)?;
                    evalrun::write_inference_csv(&ckpt.params, &dataset, &indices, &out)?
                }
                (None, false) => infer_files(&ckpt, &cloud, &out)?,
                _ => {
                    return Err(CliError::Config(
                        "use exactly one of --data or --cloud".into(),
                    ))
                }
            };
            println!("wrote {rows} keypoint rows to {}", out.display());
            Ok(())
        }
    }
}

fn infer_files(ckpt: &Checkpoint, clouds: &[PathBuf], out: &Path) -> Result<usize> {
    use pointkey_cli::formats;
    use pointkey_core::data::normalize_cloud;
    use pointkey_core::model::forward_eval;

    let mut csv = String::from("id,index,x,y,z\n");
    let mut rows = 0usize;
    let mut seen = BTreeMap::new();
    for path in clouds {
        let raw = formats::read_cloud(path)?;
        let (cloud, _) = normalize_cloud(&raw);
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("cloud")
            .to_string();
        if seen.insert(id.clone(), ()).is_some() {
            return Err(CliError::Data(format!("duplicate cloud id '{id}'")));
        }
        let output = forward_eval(&ckpt.params, &cloud)?;
        for (k, p) in output.keypoints.points().iter().enumerate() {
            csv.push_str(&format!("{id},{k},{},{},{}\n", p[0], p[1], p[2]));
            rows += 1;
        }
    }
    fs::write(out, csv)?;
    Ok(rows)
}

fn parse_list<T: std::str::FromStr>(list: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| CliError::Config(format!("bad {what} value '{s}': {e}")))
        })
        .collect()
}
