use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zsugr::config::{Overrides, Preset, RunConfig};
use zsugr::error::{Error, Result};
use zsugr::pipeline::Pipeline;

#[derive(Parser)]
#[command(name = "zsugr", version, about = "Zero-shot underwater gesture recognition pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base configuration: `full` or `desk`.
    #[arg(long, global = true, default_value = "full")]
    preset: String,

    #[arg(long, global = true)]
    outdir: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    n_seen: Option<usize>,

    #[arg(long, global = true)]
    n_unseen: Option<usize>,

    /// gelu, elu, relu, sigmoid or silu.
    #[arg(long, global = true)]
    gate_activation: Option<String>,

    /// `decoder=off`, `gcat=off` or `gate=off`; repeatable.
    #[arg(long, global = true)]
    ablate: Vec<String>,

    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Recompute cached stages and accept mixed inputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Args)]
struct SplitArg {
    /// Split index; all splits when omitted.
    #[arg(long)]
    split: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seen/unseen splits.
    Split,
    /// Stage 1: train the feature extractor on seen classes.
    TrainGcat(SplitArg),
    /// Extract gesture features for every split roster.
    Extract(SplitArg),
    /// Train the conditional feature generator.
    TrainGan(SplitArg),
    /// Generate unseen-class features.
    Synthesize(SplitArg),
    /// Train the final softmax classifier.
    TrainClassifier(SplitArg),
    /// Score CZSL and GZSL predictions and aggregate across splits.
    Eval(SplitArg),
    /// Export decoder attention maps.
    Visualize {
        #[command(flatten)]
        split: SplitArg,
        /// Sample ids; defaults to one unseen-test sample per unseen class.
        #[arg(long, value_delimiter = ',')]
        samples: Vec<String>,
    },
    /// Every stage for every split.
    RunAll,
    /// Print the resolved configuration.
    ShowConfig,
}

fn resolve(global: &Global) -> Result<RunConfig> {
    let preset: Preset = global.preset.parse()?;
    let mut config = RunConfig::load(preset, global.config.as_deref(), std::env::vars())?;
    config.apply(&Overrides {
        seed: global.seed,
        outdir: global.outdir.clone(),
        n_seen: global.n_seen,
        n_unseen: global.n_unseen,
        gate_activation: global.gate_activation.clone(),
        ablate: global.ablate.clone(),
        workers: global.workers,
    })?;
    Ok(config)
}

fn each(p: &Pipeline, arg: &SplitArg, f: impl Fn(&Pipeline, usize) -> Result<()>) -> Result<()> {
    let splits = match arg.split {
        Some(i) if i >= p.config.split.n_splits => {
            return Err(Error::config("split", format!("index {i} out of range for {} splits", p.config.split.n_splits)))
        }
        Some(i) => vec![i],
        None => p.split_indices(),
    };
    for i in splits {
        f(p, i)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = resolve(&cli.global)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let p = Pipeline::new(config, cli.global.force)?;
    match &cli.command {
        Command::Split => {
            let splits = p.split()?;
            for s in splits {
                println!("{}", p.stage_dir(s.split_index, zsugr::pipeline::Stage::Split).join("split.json").display());
            }
        }
        Command::TrainGcat(a) => each(&p, a, |p, i| p.train_gcat(i))?,
        Command::Extract(a) => each(&p, a, |p, i| p.extract(i))?,
        Command::TrainGan(a) => each(&p, a, |p, i| p.train_gan(i))?,
        Command::Synthesize(a) => each(&p, a, |p, i| p.synthesize(i))?,
        Command::TrainClassifier(a) => each(&p, a, |p, i| p.train_classifier(i))?,
        Command::Eval(a) => {
            let splits = match a.split {
                Some(i) => vec![i],
                None => p.split_indices(),
            };
            let agg = p.eval(&splits)?;
            print!(
                "{}",
                std::fs::read_to_string(p.outdir().join("aggregate").join("table.txt")).map_err(|e| Error::io("table.txt", e))?
            );
            log::debug!("{agg:?}");
        }
        Command::Visualize { split, samples } => each(&p, split, |p, i| {
            for path in p.visualize(i, samples)? {
                println!("{}", path.display());
            }
            Ok(())
        })?,
        Command::RunAll => {
            p.run_all()?;
            print!(
                "{}",
                std::fs::read_to_string(p.outdir().join("aggregate").join("table.txt")).map_err(|e| Error::io("table.txt", e))?
            );
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("ZSUGR_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
