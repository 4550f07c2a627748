//! `dndetr`: train, evaluate and compare denoising detector runs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use dndetr_core::harness::config::apply_seed_env;
use dndetr_core::harness::train::{build_dataset, read_metrics, run_experiment_on, METRICS_FILE};
use dndetr_core::harness::{ablation_configs, checkpoint, evaluate, RunOptions, Sweep, TrainConfig};
use dndetr_core::metrics::EpochRow;

#[derive(Parser)]
#[command(name = "dndetr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.csv, config.toml and final.ckpt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config file and DN_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dn_groups: Option<usize>,
        #[arg(long)]
        no_mask: bool,
        /// Train without the denoising path.
        #[arg(long, conflicts_with = "dn_groups")]
        baseline: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Replace existing results in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the validation scenes of its config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare per-epoch instability of finished runs.
    Instability {
        #[arg(long = "run-dir", required = true, num_args = 1)]
        run_dirs: Vec<PathBuf>,
    },
    /// Run one ablation sweep.
    Ablate {
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "ablations")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let mut cfg = TrainConfig::default();
            apply_seed_env(&mut cfg)?;
            cfg
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn train_one(cfg: &TrainConfig, out: &Path, force: bool, label: &str) -> Result<dndetr_core::harness::ExperimentResult> {
    let (train, val) = build_dataset(cfg)?;
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        force,
    };
    let result = run_experiment_on(cfg, &train, &val, &opts, &mut |r| {
        println!(
            "{label}epoch {:>3}  loss {:.4}  AP50 {:.4}  mAP {:.4}  IS {}  lr {:.1e}  {:.1}s",
            r.epoch,
            r.losses.total,
            r.ap50,
            r.mean_ap,
            fmt_opt(r.mean_is),
            r.lr,
            r.wall_secs
        );
    })?;
    Ok(result)
}

fn mean_is(rows: &[EpochRow]) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.mean_is).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            dn_groups,
            no_mask,
            baseline,
            epochs,
            out,
            force,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(p) = dn_groups {
                cfg.dn_groups = p;
                cfg.baseline = false;
            }
            if baseline {
                cfg = cfg.baseline();
            }
            if no_mask {
                cfg.attention_mask = false;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
                cfg.lr_drop_epoch = cfg.lr_drop_epoch.min(e);
            }
            cfg.validate()?;
            let r = train_one(&cfg, &out, force, "")?;
            println!(
                "final AP50 {:.4}  mean IS {:.4}  digest {}",
                r.final_ap50,
                r.mean_instability(),
                &r.config_digest[..12]
            );
            println!("results in {}", out.display());
        }
        Command::Eval { checkpoint: path } => {
            let (cfg, params) = checkpoint::load(&path, None)?;
            let (_, val) = build_dataset(&cfg)?;
            let e = evaluate(&params, &cfg.match_weights(), &val)?;
            println!("scenes {}  AP50 {:.4}  mAP {:.4}", val.len(), e.ap50, e.mean_ap);
        }
        Command::Instability { run_dirs } => {
            let runs: Vec<Vec<EpochRow>> = run_dirs
                .iter()
                .map(|d| read_metrics(&d.join(METRICS_FILE)).with_context(|| format!("reading run {}", d.display())))
                .collect::<Result<_>>()?;
            let epochs = runs.iter().map(Vec::len).max().unwrap_or(0);
            print!("epoch");
            for d in &run_dirs {
                print!("\t{}", d.display());
            }
            println!();
            for e in 0..epochs {
                print!("{}", e + 1);
                for r in &runs {
                    print!("\t{}", fmt_opt(r.get(e).and_then(|row| row.mean_is)));
                }
                println!();
            }
            print!("mean");
            for r in &runs {
                print!("\t{}", fmt_opt(mean_is(r)));
            }
            println!();
        }
        Command::Ablate {
            sweep,
            config,
            seed,
            out,
            force,
        } => {
            let sweep: Sweep = sweep.parse()?;
            let base = load_config(config.as_deref(), seed)?;
            let mut summary = Vec::new();
            for (label, cfg) in ablation_configs(&base, sweep) {
                let dir = out.join(&label);
                let r = train_one(&cfg, &dir, force, &format!("[{label}] "))?;
                summary.push((label, r.final_ap50, r.mean_instability()));
            }
            println!("variant\tfinal_AP50\tmean_IS");
            for (label, ap, is) in summary {
                println!("{label}\t{ap:.4}\t{is:.4}");
            }
        }
    }
    Ok(())
}
