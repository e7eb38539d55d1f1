use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mssl_core::commands::{
    cmd_ablate, cmd_eval, cmd_sweep_alpha, cmd_synth, cmd_train, data_root, load_checkpoint,
    parse_bins, parse_grid, read_synth_spec, AblationPlan, EvalSettings, RunConfig, Variant,
    DATA_ROOT_ENV,
};
use mssl_core::data::{Split, SyntheticSpec};
use mssl_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mssl",
    version,
    about = "Multi-scale similarity learning for partially relevant video retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-moment synthetic dataset.
    Synth {
        /// Dataset spec (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on <data>/train.json, validating on <data>/val.json.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue the run stored in --out.
        #[arg(long)]
        resume: bool,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = DATA_ROOT_ENV)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Defaults to the α the checkpoint was trained with.
        #[arg(long)]
        alpha: Option<f64>,
        /// Equal-count bin count or comma-separated M/V edges.
        #[arg(long)]
        bins: Option<String>,
        /// Skip the M/V breakdown (data without moment labels).
        #[arg(long, conflicts_with = "bins")]
        no_bins: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a grid of fusion weights.
    SweepAlpha {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = DATA_ROOT_ENV)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// `start:end:step` or a comma-separated list.
        #[arg(long, default_value = "0:1:0.1")]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a matrix of ablation variants and seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated: full, no_clip, no_frame, simple_attention,
        /// mean_pool, no_nce, no_triplet.
        #[arg(long, default_value = "full,no_frame,no_clip")]
        variants: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON) or a resolved-config snapshot.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = DATA_ROOT_ENV)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Equal-count bin count or comma-separated M/V edges.
    #[arg(long)]
    bins: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    disable_clip_branch: bool,
    #[arg(long)]
    disable_frame_branch: bool,
    #[arg(long)]
    simple_attention: bool,
    #[arg(long)]
    mean_pool_baseline: bool,
    #[arg(long)]
    no_triplet: bool,
    #[arg(long)]
    no_nce: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(b) = &self.bins {
            c.mv_bins = parse_bins(b)?;
        }
        if let Some(e) = self.epochs {
            c.train.max_epochs = e;
        }
        if let Some(lr) = self.lr {
            c.train.lr = lr;
        }
        if let Some(b) = self.batch_size {
            c.train.batch_size = b;
        }
        let a = &mut c.ablation;
        a.disable_clip_branch |= self.disable_clip_branch;
        a.disable_frame_branch |= self.disable_frame_branch;
        a.simple_attention |= self.simple_attention;
        a.mean_pool_baseline |= self.mean_pool_baseline;
        a.no_triplet |= self.no_triplet;
        a.no_nce |= self.no_nce;
        Ok(c)
    }

    fn data(&self) -> Result<PathBuf> {
        data_root(self.data.as_deref())
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| format!("unknown split '{s}' (expected train, val or test)"))
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(v: &serde_json::Value) {
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(v).expect("values serialize")
    ));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut spec = match config {
                Some(p) => read_synth_spec(&p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            for p in cmd_synth(&spec, &out)? {
                emit(&format!("{}\n", p.display()));
            }
        }
        Command::Train {
            run,
            out,
            resume,
            print_config,
        } => {
            let config = run.config()?;
            if print_config {
                let resolved = config.resolve()?;
                print_json(&serde_json::to_value(&resolved).expect("config serializes"));
                return Ok(());
            }
            let out = out.ok_or_else(|| Error::Config("--out is required for training".into()))?;
            let r = cmd_train(&config, &run.data()?, &out, resume)?;
            print_json(&serde_json::json!({
                "best_epoch": r.best_epoch,
                "best_val_sumr": r.best_sumr,
                "epochs_run": r.log.epochs().count(),
                "checkpoint": out.join("best"),
            }));
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            alpha,
            bins,
            no_bins,
            out,
        } => {
            let trained = load_checkpoint(&checkpoint)?.1;
            let alpha = alpha.or(trained.as_ref().map(|c| c.alpha)).unwrap_or(0.5);
            let mv_bins = if no_bins {
                None
            } else {
                Some(match bins {
                    Some(b) => parse_bins(&b)?,
                    None => trained.map(|c| c.mv_bins).unwrap_or_default(),
                })
            };
            let settings = EvalSettings {
                split,
                alpha,
                mv_bins,
            };
            let report = cmd_eval(
                &checkpoint,
                &data_root(data.as_deref())?,
                &settings,
                out.as_deref(),
            )?;
            print_json(&report.to_json());
        }
        Command::SweepAlpha {
            checkpoint,
            data,
            split,
            grid,
            out,
        } => {
            let grid = parse_grid(&grid)?;
            let rows = cmd_sweep_alpha(
                &checkpoint,
                &data_root(data.as_deref())?,
                split,
                &grid,
                out.as_deref(),
            )?;
            let mut table = String::from("alpha,SumR\n");
            for (a, r) in rows {
                table.push_str(&format!("{a},{:.1}\n", r.sum_recall()));
            }
            emit(&table);
        }
        Command::Ablate {
            run,
            out,
            variants,
            seeds,
            split,
        } => {
            let plan = AblationPlan {
                variants: variants
                    .split(',')
                    .map(|v| Variant::named(v.trim()))
                    .collect::<Result<_>>()?,
                seeds: seeds
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad seed '{s}'")))
                    })
                    .collect::<Result<_>>()?,
                split,
            };
            let summary = cmd_ablate(&run.config()?, &plan, &run.data()?, &out)?;
            emit(&summary.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
