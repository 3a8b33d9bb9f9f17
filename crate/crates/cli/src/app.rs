//! Command-line front end.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use crate::runner::RunError;
use crate::{
    apply_overrides, preset, preset_names, run_experiment, write_outputs, ConfigError,
    ExperimentConfig,
};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

const SEED_ENV: &str = "FEDSIM_SEED";

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Federated learning attack/defense simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or a preset.
    Run(RunArgs),
    /// Print the preset catalog, one name per line.
    ListPresets,
    /// Check a config file and print "OK".
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["config", "preset"]))]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// `key=value` with a dotted key path, e.g. `common.rounds=5`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides `common.seed` and FEDSIM_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to `output.dir`, else `./runs/<timestamp>-<name>`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn run(args: RunArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let (base, name) = match (&args.config, &args.preset) {
        (Some(path), _) => (
            ExperimentConfig::load(path)?,
            path.file_stem()
                .map_or("config".into(), |s| s.to_string_lossy().into_owned()),
        ),
        (None, Some(name)) => (preset(name)?, name.clone()),
        (None, None) => unreachable!("clap enforces one source"),
    };
    let mut cfg = apply_overrides(&base, &args.overrides)?;

    // precedence: --seed > FEDSIM_SEED > config
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.common.seed = raw
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer"))?;
    }
    if let Some(seed) = args.seed {
        cfg.common.seed = seed;
    }

    let dir = args
        .output_dir
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            PathBuf::from("runs").join(format!("{stamp}-{name}"))
        });

    let result = run_experiment(&cfg)?;
    let written = write_outputs(&dir, &cfg, &result)
        .with_context(|| format!("writing outputs to {}", dir.display()))?;
    if let Some(last) = result.records.last() {
        let _ = writeln!(
            out,
            "{name}: {} rounds, final accuracy {:.4}",
            result.records.len(),
            last.test_accuracy
        );
    }
    for path in written {
        let _ = writeln!(out, "wrote {}", path.display());
    }
    Ok(())
}

/// Entry point of the `fedsim` binary; `args` includes the program name.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    ExitCode::from(run_cli(
        args,
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    ))
}

/// Runs one command line, writing to `out` and `err`, and returns the exit
/// status: 0 success, 1 runtime error, 2 usage error. Write failures (e.g. a
/// closed pipe) are ignored.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => run(args, out),
        Command::ListPresets => {
            for name in preset_names() {
                if writeln!(out, "{name}").is_err() {
                    break;
                }
            }
            Ok(())
        }
        Command::Validate { config } => ExperimentConfig::load(&config)
            .map(|_| {
                let _ = writeln!(out, "OK");
            })
            .map_err(Into::into),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Invalid configs and overrides are usage errors; everything else is a
/// runtime error.
fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.downcast_ref::<ConfigError>().is_some()
        || matches!(e.downcast_ref::<RunError>(), Some(RunError::Config(_)));
    if usage {
        2
    } else {
        1
    }
}
