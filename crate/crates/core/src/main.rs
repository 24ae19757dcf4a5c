use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ttsa::config::{parse_config, ExperimentConfig, SolverKind};
use ttsa::experiment::{run_experiment, validate_schedule};
use ttsa::problem::{make_abs_instance, make_tanh_instance, remark2_instance, scalar_instance};
use ttsa::solver::SolverSpec;
use ttsa::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ttsa",
    about = "Classic and operator-averaged two-time-scale stochastic approximation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Fast,
    Classic,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long, env = "TTSA_OUTPUT_DIR")]
        output_dir: Option<PathBuf>,
        /// Overrides `workers`.
        #[arg(long, env = "TTSA_WORKERS")]
        workers: Option<usize>,
        /// Runs a single actor-critic variant (lqr experiments).
        #[arg(long, value_enum)]
        variant: Option<Variant>,
    },
    /// Check a config's schedule against its problem's step-size conditions.
    ValidateSchedule {
        config: PathBuf,
    },
    /// List built-in problem ids with their regularity constants.
    ListProblems,
    Version,
}

fn load(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
    parse_config(&text)
}

fn run(
    path: &PathBuf,
    output_dir: Option<PathBuf>,
    workers: Option<usize>,
    variant: Option<Variant>,
) -> Result<i32> {
    let mut cfg = load(path)?;
    if output_dir.is_some() {
        cfg.output_dir = output_dir;
    }
    if workers.is_some() {
        cfg.workers = workers;
    }
    if let Some(v) = variant {
        cfg.solver = Some(match v {
            Variant::Fast => SolverKind::Fast,
            Variant::Classic => SolverKind::Classic,
        });
    }
    let out = run_experiment(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&out.summary)?);
    eprintln!(
        "wrote {} files to {}",
        out.files.len(),
        out.output_dir.display()
    );
    Ok(out.exit_code())
}

fn validate(path: &PathBuf) -> Result<i32> {
    let cfg = load(path)?;
    let problem = cfg.build_problem()?;
    let spec = cfg.solver_spec(&problem)?;
    let report = validate_schedule(&spec, &problem, cfg.horizon);
    let ok = match &spec {
        SolverSpec::Fast(p) => report.passes(p.mode),
        SolverSpec::Classic(_) => report.is_valid(),
    };
    let out = serde_json::json!({ "schedule": spec, "report": report, "passes": ok });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(if ok { 0 } else { 1 })
}

fn list_problems() -> Result<i32> {
    let examples = [
        ("scalar", scalar_instance()),
        ("remark2", remark2_instance()),
        ("tanh:<c>  (shown c = 0.5)", make_tanh_instance(0.5)?),
        ("abs:<c>   (shown c = 0.5)", make_abs_instance(0.5)?),
    ];
    println!(
        "{:<28} {:>5} {:>5} {:>10} {:>10} {:>10}",
        "id", "dim_x", "dim_y", "mu_F", "mu_G", "L"
    );
    for (id, p) in examples {
        println!(
            "{:<28} {:>5} {:>5} {:>10.4} {:>10.4} {:>10.4}",
            id,
            p.dim_x(),
            p.dim_y(),
            p.mu_f(),
            p.mu_g(),
            p.lipschitz()
        );
    }
    println!("<path>.json: linear instance with keys A11, A12, A21, A22, b1, b2");
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            output_dir,
            workers,
            variant,
        } => run(config, output_dir.clone(), *workers, *variant),
        Command::ValidateSchedule { config } => validate(config),
        Command::ListProblems => list_problems(),
        Command::Version => {
            println!("ttsa {}", env!("CARGO_PKG_VERSION"));
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
