use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use consiter::audit::{measure_effective_c, RunArtifact};
use consiter::butcher::builtin_tableaux;
use consiter::config::{Problem, ProblemSpec};
use consiter::experiments::{
    acceleration_study, convergence_study, krylov_equivalence_study, simulate, write_acceleration_csv,
    write_convergence_csv, write_equivalence_csv,
};
use consiter::flux::FLUX_NAMES;
use consiter::grid::StateField;
use consiter::problems::EquationKind;
use consiter::Error;

#[derive(Parser)]
#[command(name = "consiter", version, about = "Conservation-auditing implicit finite-volume solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set space.nx=80`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ProblemSpec, Error> {
        let text = std::fs::read_to_string(&self.config)
            .map_err(|e| Error::config("--config", format!("{}: {e}", self.config.display())))?;
        let mut spec = ProblemSpec::from_toml(&text)?;
        for o in &self.overrides {
            spec = spec.with_override(o)?;
        }
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured problem to its final time.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// CSV snapshot of the final state.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// JSON run artifact for `audit`.
        #[arg(long)]
        artifact: Option<PathBuf>,
    },
    /// Grid-refinement study; writes `dx,err_original,err_modified,c,evals`.
    Convergence {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Grid sizes `nx`; defaults to `output.levels` or nx, 2nx, 4nx.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit a run artifact and print a JSON conservation report.
    Audit {
        #[arg(long)]
        artifact: PathBuf,
        /// Configuration of the run, to fit the effective speed factor.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check GMRES iterates against explicit RK steps; writes `n,k,a,difference`.
    KrylovEquiv {
        #[arg(long, default_value_t = 50)]
        cases: usize,
        #[arg(long, default_value_t = 32)]
        max_n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Newton-GMRES with zero vs explicit Euler initial guesses; writes
    /// `residual,evals_standard,evals_consistent,cfl`.
    Accel {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        cfl: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List fluxes, time integrators and equations.
    ListMethods,
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::InvalidConfig { .. } | Error::UnknownFlux(_) | Error::UnknownMethodName(_))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { cfg, snapshot, artifact } => {
            let spec = cfg.load()?;
            let problem = Problem::from_spec(&spec)?;
            let artifact_path = artifact.or_else(|| spec.output.artifact.clone());
            let sim = simulate(&problem, artifact_path.is_some())?;
            println!("method: {}", problem.describe());
            println!("steps: {}", sim.steps);
            println!("evaluations: {}", sim.evaluations);
            println!("mass_drift: {:?}", sim.mass_drift);
            if let Some(c) = problem.consistency_factor() {
                println!("consistency_factor: {c:.6}");
            }
            if let Some(path) = snapshot.or_else(|| spec.output.snapshot.clone()) {
                sim.state.write_csv(BufWriter::new(File::create(path)?))?;
            }
            if let (Some(path), Some(art)) = (artifact_path, sim.artifact) {
                serde_json::to_writer(BufWriter::new(File::create(path)?), &art)?;
            }
        }
        Command::Convergence { cfg, levels, out } => {
            let spec = cfg.load()?;
            let levels = if !levels.is_empty() {
                levels
            } else if let Some(l) = &spec.output.levels {
                l.clone()
            } else {
                vec![spec.space.nx, 2 * spec.space.nx, 4 * spec.space.nx]
            };
            let rows = convergence_study(&spec, &levels)?;
            let mut w = output(out.or_else(|| spec.output.csv.clone()).as_deref())?;
            write_convergence_csv(&rows, &mut w)?;
            w.flush()?;
        }
        Command::Audit { artifact, config, out } => {
            let text = std::fs::read_to_string(&artifact)
                .map_err(|e| Error::config("--artifact", format!("{}: {e}", artifact.display())))?;
            let art: RunArtifact =
                serde_json::from_str(&text).map_err(|e| Error::config("--artifact", e.to_string()))?;
            let mut report = art.audit()?;
            if let Some(path) = config {
                let problem = Problem::from_spec(&ProblemSpec::from_file(&path)?)?;
                let last = art.steps.last().ok_or_else(|| Error::config("--artifact", "no steps recorded"))?;
                let state = StateField::from_values(problem.grid, problem.components, last.u_np1.clone())?;
                let t = problem.final_time();
                report.effective_c = Some(measure_effective_c(&state, 0, &|c| problem.exact(t, c))?);
            }
            let mut w = output(out.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
            w.flush()?;
        }
        Command::KrylovEquiv { cases, max_n, seed, out } => {
            let rows = krylov_equivalence_study(cases, max_n, seed)?;
            let mut w = output(out.as_deref())?;
            write_equivalence_csv(&rows, &mut w)?;
            w.flush()?;
        }
        Command::Accel { cfg, cfl, out } => {
            let spec = cfg.load()?;
            let cfl = if !cfl.is_empty() { cfl } else { spec.output.cfl.clone().unwrap_or_else(|| vec![1.0]) };
            let runs = acceleration_study(&spec, &cfl)?;
            let mut w = output(out.or_else(|| spec.output.csv.clone()).as_deref())?;
            write_acceleration_csv(&runs, &mut w)?;
            w.flush()?;
        }
        Command::ListMethods => {
            println!("fluxes:");
            for name in FLUX_NAMES {
                println!("  {name}");
            }
            println!("tableaux:");
            for t in builtin_tableaux::<f64>() {
                let kind = if t.is_explicit() { "explicit" } else { "implicit" };
                println!("  {:<20} stages={} {kind}", t.name(), t.stages());
            }
            println!("equations:");
            for name in EquationKind::NAMES {
                println!("  {name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_config_error(&e) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
