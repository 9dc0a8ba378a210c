use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kinwealth_cli::commands::{self, Solver, COMPARISON};
use kinwealth_cli::config::{preset_names, EquationChoice};
use kinwealth_cli::output::ensure_dir;
use kinwealth_cli::{CliError, RunConfig};

/// Wealth-knowledge kinetic model: particle and Fokker-Planck solvers.
#[derive(Parser)]
#[command(name = "kinwealth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo particle solver and write a bundle.
    Simulate(ConfigArgs),
    /// Integrate the Fokker-Planck equation and write a bundle.
    Fp(ConfigArgs),
    /// Analyze an `x,v` snapshot CSV.
    Analyze {
        snapshot: PathBuf,
        /// Output directory (default: the snapshot's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Take analysis settings from a preset.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Take analysis settings from a config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare the marginals, tail slopes and moments of two bundles.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write `comparison.csv` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one bundle per point of a Cartesian parameter grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// `key=v1,v2,...` with a dotted config key; repeatable.
        #[arg(long = "set", required = true)]
        sets: Vec<String>,
        #[arg(long, value_enum, default_value_t = SolverArg::Simulate)]
        solver: SolverArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Simulate,
    Fp,
}

#[derive(Clone, Copy, ValueEnum)]
enum EquationArg {
    Fp,
    Fp2,
}

#[derive(Args)]
struct ConfigArgs {
    /// Built-in parameter set.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of agents.
    #[arg(long)]
    n: Option<usize>,
    /// Bundle directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fokker-Planck grid as `NXxNV`, e.g. `200x200`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, value_enum)]
    equation: Option<EquationArg>,
}

fn base_config(preset: Option<&str>, config: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match (preset, config) {
        (Some(p), _) => RunConfig::preset(p),
        (None, Some(path)) => RunConfig::from_file(path),
        (None, None) => Ok(RunConfig::default()),
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("--grid '{s}' must look like 200x200"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = base_config(self.preset.as_deref(), self.config.as_ref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.n {
            cfg.simulation.n_agents = n;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(g) = &self.grid {
            (cfg.fp.nx, cfg.fp.nv) = parse_grid(g)?;
        }
        if let Some(e) = self.equation {
            cfg.fp.equation = match e {
                EquationArg::Fp => EquationChoice::Fp,
                EquationArg::Fp2 => EquationChoice::Fp2,
            };
        }
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.load()?;
            commands::simulate(&cfg)?;
            eprintln!("bundle written to {}", cfg.output.dir.display());
        }
        Command::Fp(args) => {
            let cfg = args.load()?;
            commands::fp(&cfg)?;
            eprintln!("bundle written to {}", cfg.output.dir.display());
        }
        Command::Analyze {
            snapshot,
            out,
            preset,
            config,
        } => {
            let cfg = base_config(preset.as_deref(), config.as_ref())?;
            let out = out.unwrap_or_else(|| {
                snapshot
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            commands::analyze(&snapshot, &cfg.analysis, &out)?;
        }
        Command::Compare { a, b, out } => {
            let rows = commands::compare(&a, &b)?;
            if let Some(dir) = out {
                ensure_dir(&dir)?;
                commands::write_comparison(&dir.join(COMPARISON), &rows)?;
            }
            println!("metric,a,b,difference");
            for r in &rows {
                let f = kinwealth_cli::output::fmt_opt;
                println!("{},{},{},{}", r.metric, f(r.a), f(r.b), f(r.difference));
            }
        }
        Command::Sweep {
            config,
            sets,
            solver,
        } => {
            let cfg = config.load()?;
            let sets = sets
                .iter()
                .map(|s| commands::parse_set(s))
                .collect::<Result<Vec<_>, _>>()?;
            let solver = match solver {
                SolverArg::Simulate => Solver::Simulate,
                SolverArg::Fp => Solver::Fp,
            };
            let dirs = commands::sweep(&cfg, &sets, solver)?;
            eprintln!("{} bundles under {}", dirs.len(), cfg.output.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Config(_) = e {
                eprintln!(
                    "presets: {}",
                    preset_names().collect::<Vec<_>>().join(", ")
                );
            }
            ExitCode::from(e.exit_code())
        }
    }
}
