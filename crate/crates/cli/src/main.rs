use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use cploss::data::Split;
use cploss::experiment::{run_compare, run_scale_ablation, AblationSpec, CompareSpec, DataSource};
use cploss::train::{evaluate, save_checkpoints, save_history, train, TrainConfig};
use cploss::{Error, LossKind};

/// Train linear forecasters with MSE, MAE or the channel-wise perceptual loss.
#[derive(Parser, Debug)]
#[command(name = "cploss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare losses across horizons and seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Forecast horizons, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "96,192,336,720")]
        horizon: Vec<usize>,
        /// Losses to train with, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "mse,cp")]
        loss: Vec<LossKind>,
    },
    /// Sweep the number of pyramid scales with the CP loss.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 96)]
        horizon: usize,
        /// Scale counts to try, comma separated.
        #[arg(long = "scales-list", value_delimiter = ',', default_value = "1,2,3,4,5")]
        scales_list: Vec<usize>,
    },
    /// Train a single model and save its checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 96)]
        horizon: usize,
        #[arg(long, default_value = "cp")]
        loss: LossKind,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// CSV file with a date column followed by numeric channels.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "date")]
    date_column: String,
    /// Use the built-in heterogeneous synthetic series instead of a CSV.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 3)]
    synth_channels: usize,
    #[arg(long, default_value_t = 8000)]
    synth_len: usize,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,

    #[arg(long, default_value_t = 96)]
    lookback: usize,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 5)]
    scales: usize,
    /// Filter kernel size (odd).
    #[arg(long, default_value_t = 5)]
    kernel: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    filter_lr_mult: f64,
    /// Gradient-norm clip threshold.
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long)]
    no_clip: bool,
    /// Stop the kernel gradient through the target's decomposition.
    #[arg(long)]
    detach_target: bool,
    /// Share forecaster weights across channels.
    #[arg(long)]
    shared_weights: bool,
    /// Keep validation and test lookbacks inside their own split.
    #[arg(long)]
    strict_splits: bool,
    /// Output directory for reports, histories and checkpoints.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl Common {
    fn source(&self) -> anyhow::Result<DataSource> {
        match (&self.data, self.synthetic) {
            (Some(path), false) => Ok(DataSource::Csv {
                path: path.clone(),
                date_column: self.date_column.clone(),
            }),
            (None, true) => Ok(DataSource::Synthetic {
                channels: self.synth_channels,
                len: self.synth_len,
                seed: self.synth_seed,
            }),
            _ => Err(Error::Usage("pass either --data PATH or --synthetic".into()).into()),
        }
    }

    fn train_config(&self, loss: LossKind) -> TrainConfig {
        TrainConfig {
            loss,
            scales: self.scales,
            kernel_size: self.kernel,
            learning_rate: self.lr,
            batch_size: self.batch,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seeds.first().copied().unwrap_or(0),
            detach_target: self.detach_target,
            filter_lr_multiplier: self.filter_lr_mult,
            clip_norm: (!self.no_clip).then_some(self.clip),
            shared_weights: self.shared_weights,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Compare { common, horizon, loss } => {
            let spec = CompareSpec {
                lookback: common.lookback,
                horizons: horizon,
                losses: loss,
                seeds: common.seeds.clone(),
                train: common.train_config(LossKind::Mse),
                strict_splits: common.strict_splits,
            };
            std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            let report = run_compare(&common.source()?, &spec, Some(&common.out))?;
            report.write(&common.out)?;
            print!("{}", report.table());
            for s in &report.skipped {
                println!("skipped {s}");
            }
        }
        Command::Ablation { common, horizon, scales_list } => {
            let spec = AblationSpec {
                lookback: common.lookback,
                horizon,
                scales: scales_list,
                seeds: common.seeds.clone(),
                train: common.train_config(LossKind::Cp),
                strict_splits: common.strict_splits,
            };
            std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            let report = run_scale_ablation(&common.source()?, &spec, Some(&common.out))?;
            report.write(&common.out)?;
            print!("{}", report.table());
            for s in &report.skipped {
                println!("skipped {s}");
            }
        }
        Command::Train { common, horizon, loss } => {
            let ds = common.source()?.load(common.strict_splits)?;
            let cfg = common.train_config(loss);
            let outcome = train(&cfg, &ds, common.lookback, horizon)?;
            let test = evaluate(&outcome.model, &ds, Split::Test, common.lookback, horizon)?;
            std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            save_checkpoints(&common.out, &outcome)?;
            save_history(&common.out, &format!("h{horizon}_{loss}_s{}", cfg.seed), &outcome.history)?;
            std::fs::write(common.out.join("norm_stats.json"), ds.norm.to_json()?)?;
            println!(
                "{} N={horizon} loss={loss} best_epoch={} test mse {:.3} mae {:.3}",
                ds.name, outcome.best_epoch, test.mse, test.mae
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() => 2,
        Some(Error::Parse { .. } | Error::Data(_) | Error::Csv(_) | Error::Io(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
