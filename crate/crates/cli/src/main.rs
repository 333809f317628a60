//! `flairshift` command-line front end.
//!
//! Exit codes: 0 success, 2 invalid configuration or input, 3 estimation
//! or fitting failure, 4 predictor failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flairshift::estimation::FitMode;
use flairshift::shift::DesignKind;
use flairshift::stress::F1Mode;

use crate::config::{Config, ConfigError, SweepParam};

#[derive(Parser, Debug)]
#[command(name = "flairshift", version, about = "FLAIR acquisition-shift simulation and segmentation stress testing")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    max_parallel: Option<usize>,
    /// Seed for the tissue fit and the phantom.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a scan model from a baseline FLAIR study.
    Estimate(EstimateArgs),
    /// Synthesize images from a scan model.
    Simulate(SimulateArgs),
    /// Run the segmentation stress test and fit the F1 response surface.
    Stress(StressArgs),
    /// Sweep signal sensitivities over T1 or T2.
    Sensitivity(SensitivityArgs),
    /// Write a synthetic phantom study.
    Phantom,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Draw tissue parameters from the prior ranges instead of fitting them.
    #[arg(long)]
    randomize_tissue: bool,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Single echo time (ms); requires --ti.
    #[arg(long, requires = "ti")]
    te: Option<f64>,
    /// Single inversion time (ms); requires --te.
    #[arg(long, requires = "te")]
    ti: Option<f64>,
    /// Grid size as `<n_te>x<n_ti>`, e.g. 7x7.
    #[arg(long, conflicts_with_all = ["te", "ti"], value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long, value_enum, conflicts_with_all = ["te", "ti"])]
    design: Option<DesignArg>,
}

#[derive(Args, Debug)]
pub struct StressArgs {
    #[arg(long, value_parser = parse_f1_mode)]
    f1_mode: Option<F1Mode>,
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long, value_enum)]
    design: Option<DesignArg>,
}

#[derive(Args, Debug)]
pub struct SensitivityArgs {
    /// wm, gm, csf or lesion.
    #[arg(long)]
    tissue: Option<flairshift::volume::TissueLabel>,
    #[arg(long, value_enum)]
    sweep: Option<SweepParam>,
    /// Sweep range as `<lo>:<hi>` in ms.
    #[arg(long, value_parser = parse_range)]
    range: Option<[f64; 2]>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum DesignArg {
    Grid,
    Ccd,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or("expected <n_te>x<n_ti>")?;
    let n = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    Ok((n(a)?, n(b)?))
}

fn parse_range(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(':').ok_or("expected <lo>:<hi>")?;
    let n = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    Ok([n(a)?, n(b)?])
}

fn parse_f1_mode(s: &str) -> Result<F1Mode, String> {
    s.parse().map_err(|e: flairshift::Error| e.to_string())
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(flairshift::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<flairshift::Error> for CliError {
    fn from(e: flairshift::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => e.fmt(f),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

fn core_exit_code(e: &flairshift::Error) -> u8 {
    use flairshift::Error as E;
    match e {
        E::PredictorFailed { .. } | E::PredictorTimeout { .. } | E::PredictorOutput { .. } => 4,
        E::Stage { source, .. } => match core_exit_code(source) {
            2 if !matches!(**source, E::InvalidParameter { .. }) => 2,
            4 => 4,
            _ => 3,
        },
        E::MissingTissue(_)
        | E::TooFewPureVoxels { .. }
        | E::Estimation(_)
        | E::FitFailed(_)
        | E::RankDeficient { .. } => 3,
        E::Io { .. }
        | E::Nifti { .. }
        | E::UnsupportedDatatype(_)
        | E::GridMismatch(_)
        | E::InvalidVolume(_)
        | E::InvalidParameter { .. }
        | E::Manifest(_) => 2,
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn apply_overrides(cfg: &mut Config, g: &GlobalArgs, cmd: &Command) {
    if let Some(d) = &g.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(n) = g.max_parallel {
        cfg.max_parallel = n;
    }
    if let Some(s) = g.seed {
        cfg.fit.seed = s;
        cfg.phantom.seed = s;
    }
    let mut design = |grid: &Option<(usize, usize)>, kind: &Option<DesignArg>| {
        if let Some((a, b)) = *grid {
            cfg.domain.n_te = a;
            cfg.domain.n_ti = b;
            cfg.domain.design = DesignKind::Grid;
        }
        if let Some(k) = kind {
            cfg.domain.design = match k {
                DesignArg::Grid => DesignKind::Grid,
                DesignArg::Ccd => DesignKind::Ccd,
            };
        }
    };
    match cmd {
        Command::Simulate(a) => design(&a.grid, &a.design),
        Command::Stress(a) => {
            design(&a.grid, &a.design);
            if let Some(m) = a.f1_mode {
                cfg.stress.f1_mode = m;
            }
        }
        Command::Sensitivity(a) => {
            if let Some(t) = a.tissue {
                cfg.sensitivity.tissue = t;
            }
            if let Some(s) = a.sweep {
                if s != cfg.sensitivity.sweep && a.range.is_none() {
                    cfg.sensitivity.range_ms = None;
                }
                cfg.sensitivity.sweep = s;
            }
            if let Some(r) = a.range {
                cfg.sensitivity.range_ms = Some(r);
            }
            if let Some(n) = a.n {
                cfg.sensitivity.n = n;
            }
        }
        Command::Estimate(a) => {
            if a.randomize_tissue {
                cfg.fit.mode = FitMode::Randomize;
            }
        }
        Command::Phantom => {}
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = Config::load(cli.global.config.as_deref())?;
    apply_overrides(&mut cfg, &cli.global, &cli.command);
    cfg.validate()?;
    match &cli.command {
        Command::Estimate(_) => commands::estimate(&cfg),
        Command::Simulate(a) => commands::simulate(&cfg, a.te.zip(a.ti)),
        Command::Stress(_) => commands::stress(&cfg),
        Command::Sensitivity(_) => commands::sensitivity(&cfg),
        Command::Phantom => commands::phantom(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_range_parsing() {
        assert_eq!(parse_grid("7x7"), Ok((7, 7)));
        assert_eq!(parse_grid("3X5"), Ok((3, 5)));
        assert!(parse_grid("7").is_err());
        assert_eq!(parse_range("40:200"), Ok([40.0, 200.0]));
    }

    #[test]
    fn exit_codes() {
        use flairshift::Error as E;
        let pred = E::PredictorFailed {
            point: "p".into(),
            reason: "r".into(),
        };
        assert_eq!(CliError::Core(pred).exit_code(), 4);
        assert_eq!(CliError::Core(E::FitFailed("x".into())).exit_code(), 3);
        assert_eq!(CliError::Core(E::Manifest("x".into())).exit_code(), 2);
        assert_eq!(CliError::Config(config::invalid("a", "b")).exit_code(), 2);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
