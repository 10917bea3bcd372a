use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mia_tradeoff::bench::{
    emit_curve, emit_report, load_report, run_experiment, sweep, write_table, ApproachSelection,
    ExperimentConfig, ReportFormat, SweepAxis,
};
use mia_tradeoff::{Error, Result};

/// Accuracy / membership-leakage / communication trade-off of federated
/// learning versus distributed coreset sharing.
#[derive(Parser)]
#[command(name = "mia-tradeoff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write report.csv or report.json.
    Run(Common),
    /// Measure target accuracy along one axis and write curve_<axis>.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
        /// Ascending comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        /// Also run the attacks at every point.
        #[arg(long)]
        with_attacks: bool,
    },
    /// Print a saved report as a table, optionally converting its format.
    Report {
        /// report.csv or report.json
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long, value_enum)]
    approach: Option<ApproachArg>,
    #[arg(long)]
    centers_only: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ApproachArg {
    Fed,
    Coreset,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Epochs,
    CoresetSize,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seeds) = &self.seed {
            cfg.seeds = seeds.clone();
        }
        if let Some(a) = self.approach {
            cfg.approach = match a {
                ApproachArg::Fed => ApproachSelection::Federated,
                ApproachArg::Coreset => ApproachSelection::Coreset,
                ApproachArg::Both => ApproachSelection::Both,
            };
        }
        if self.centers_only {
            cfg.coreset.centers_only = true;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        cfg.validate()?;
        let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

fn stdout_err(source: std::io::Error) -> Error {
    Error::Io {
        path: "<stdout>".into(),
        source,
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run(common) => {
            let (cfg, out) = common.load()?;
            let reports = run_experiment(&cfg)?;
            let path = emit_report(&reports, common.format.into(), &out)?;
            write_table(&reports, std::io::stdout().lock()).map_err(stdout_err)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Sweep {
            common,
            axis,
            values,
            with_attacks,
        } => {
            let (cfg, out) = common.load()?;
            let preset = cfg.sweep.clone();
            let axis = match (axis, &preset) {
                (Some(AxisArg::Epochs), _) => SweepAxis::Epochs,
                (Some(AxisArg::CoresetSize), _) => SweepAxis::CoresetSize,
                (None, Some(s)) => s.axis,
                (None, None) => return Err(Error::Config("sweep needs --axis or a sweep section".into())),
            };
            let values = values
                .or_else(|| preset.as_ref().filter(|s| s.axis == axis).map(|s| s.values.clone()))
                .ok_or_else(|| Error::Config("sweep needs --values or a sweep section".into()))?;
            let attacks = with_attacks || preset.is_some_and(|s| s.with_attacks);
            let points = sweep(&cfg, axis, &values, attacks)?;
            let path = emit_curve(&points, &out)?;
            println!("axis,value,approach,seed,target_accuracy,leakage");
            for p in &points {
                let seed = p.seed.map_or_else(|| "median".into(), |s| s.to_string());
                let leak = p.leakage.map_or_else(String::new, |l| l.to_string());
                println!("{},{},{},{seed},{},{leak}", p.axis.name(), p.value, p.approach, p.target_accuracy);
            }
            eprintln!("wrote {}", path.display());
        }
        Command::Report { input, out, format } => {
            let reports = load_report(&input)?;
            write_table(&reports, std::io::stdout().lock()).map_err(stdout_err)?;
            if let Some(format) = format {
                let dir = out.unwrap_or_else(|| PathBuf::from("."));
                let path = emit_report(&reports, format.into(), &dir)?;
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_validation() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
