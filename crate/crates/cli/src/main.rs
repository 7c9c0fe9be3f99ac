use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rollout_core::constraints::{assemble_instance, Variant};
use rollout_core::network::{derive_topology, generate_synthetic_feeder, parse_case, FeederSpec, NetworkModel};
use rollout_core::packing::{Schedule, ScheduleDocument};
use rollout_core::pipeline::{
    bounds_json, exit_code, run_compare, run_pipeline, write_artifact, write_instance, PipelineError, ReportFormat,
    RunConfig,
};
use rollout_core::universal_bounds;
use rollout_core::verify::{worst_case_margins, VIOLATION_TOL};

/// Safe rollout scheduling of inverter software updates on radial feeders.
#[derive(Parser, Debug)]
#[command(name = "rollout", version)]
struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true, env = "ROLLOUT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute worst-case voltage and current bounds.
    Bounds(CaseArgs),
    /// Assemble the packing instance and write it to the output directory.
    Build(CaseArgs),
    /// Run bounds, assembly and packing; optionally verify.
    Solve {
        #[command(flatten)]
        case: CaseArgs,
        /// Sample failure scenarios for each slot after packing.
        #[arg(long, env = "ROLLOUT_VERIFY")]
        verify: bool,
    },
    /// Check an existing schedule against sampled failure scenarios.
    Verify {
        #[command(flatten)]
        case: CaseArgs,
        /// Schedule JSON produced by `solve`.
        #[arg(long, env = "ROLLOUT_SCHEDULE")]
        schedule: PathBuf,
    },
    /// Run both variants and report them side by side.
    Compare(CaseArgs),
    /// Generate a synthetic feeder case document.
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct CaseArgs {
    /// Case document (JSON).
    case: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Nonlinear, env = "ROLLOUT_VARIANT")]
    variant: VariantArg,
    /// Polygon sides for the current constraint.
    #[arg(long, default_value_t = 4, env = "ROLLOUT_SIDES_PRIME")]
    sides_prime: usize,
    /// Polygon sides for the per-line injection bound.
    #[arg(long, default_value_t = 4, env = "ROLLOUT_SIDES_DBLPRIME")]
    sides_dblprime: usize,
    /// Relative stopping tolerance of the bound iteration.
    #[arg(long, default_value_t = 1e-6, env = "ROLLOUT_EPS")]
    eps: f64,
    #[arg(long, default_value_t = 100, env = "ROLLOUT_BOUNDS_MAX_ITER")]
    bounds_max_iter: usize,
    /// Power-flow residual tolerance.
    #[arg(long, default_value_t = 1e-10, env = "ROLLOUT_PF_TOL")]
    pf_tol: f64,
    #[arg(long, default_value_t = 200, env = "ROLLOUT_PF_MAX_ITER")]
    pf_max_iter: usize,
    #[arg(long, default_value_t = 0, env = "ROLLOUT_SEED")]
    seed: u64,
    /// Random scenarios per slot during verification.
    #[arg(long, default_value_t = 512, env = "ROLLOUT_SAMPLES")]
    samples: usize,
    #[arg(long, env = "ROLLOUT_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json, env = "ROLLOUT_FORMAT")]
    format: FormatArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Nonlinear,
    Linearized,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Default,
    HeavyLoad,
    SignificantDg,
    UtilityScale,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Number of non-slack buses.
    #[arg(long, default_value_t = 40, env = "ROLLOUT_GEN_BUSES")]
    buses: usize,
    #[arg(long, default_value_t = 0, env = "ROLLOUT_SEED")]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Default, env = "ROLLOUT_GEN_PRESET")]
    preset: Preset,
    /// Full generator spec (JSON); overrides the other generator flags.
    #[arg(long, conflicts_with_all = ["buses", "preset"])]
    spec: Option<PathBuf>,
    /// Write the case here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: exit_code::IO,
        message: format!("{}: {e}", path.display()),
    }
}

impl CaseArgs {
    fn config(&self, verify: bool) -> RunConfig {
        RunConfig {
            variant: match self.variant {
                VariantArg::Nonlinear => Variant::Nonlinear,
                VariantArg::Linearized => Variant::Linearized,
            },
            sides_prime: self.sides_prime,
            sides_dblprime: self.sides_dblprime,
            eps: self.eps,
            bounds_max_iter: self.bounds_max_iter,
            pf_tol: self.pf_tol,
            pf_max_iter: self.pf_max_iter,
            seed: self.seed,
            samples: self.samples,
            verify,
            format: match self.format {
                FormatArg::Json => ReportFormat::Json,
                FormatArg::Csv => ReportFormat::Csv,
            },
            out_dir: self.out_dir.clone(),
        }
    }

    fn load(&self) -> Result<NetworkModel, Failure> {
        let text = fs::read_to_string(&self.case).map_err(|e| io_failure(&self.case, e))?;
        parse_case(&text).map_err(|e| PipelineError::from(e).into())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(threads) = cli.threads {
        configure_threads(threads)?;
    }
    match cli.command {
        Command::Bounds(args) => {
            let model = args.load()?;
            let topo = derive_topology(&model).map_err(PipelineError::from)?;
            let bounds =
                universal_bounds(&model, &topo, args.eps, args.bounds_max_iter).map_err(PipelineError::from)?;
            let doc = bounds_json(&model, &bounds);
            match &args.out_dir {
                Some(dir) => write_artifact(dir, "bounds.json", &doc)?,
                None => print!("{}", String::from_utf8_lossy(&doc)),
            }
        }
        Command::Build(args) => {
            let Some(dir) = args.out_dir.clone() else {
                return Err(Failure {
                    code: exit_code::VALIDATION,
                    message: "build needs --out-dir".into(),
                });
            };
            let model = args.load()?;
            let config = args.config(false);
            let topo = derive_topology(&model).map_err(PipelineError::from)?;
            let bounds =
                universal_bounds(&model, &topo, config.eps, config.bounds_max_iter).map_err(PipelineError::from)?;
            write_artifact(&dir, "bounds.json", &bounds_json(&model, &bounds))?;
            let system = assemble_instance(
                &model,
                &topo,
                &bounds,
                config.variant,
                config.sides_prime,
                config.sides_dblprime,
            )
            .map_err(PipelineError::from)?;
            write_instance(&dir, &model, &system)?;
        }
        Command::Solve { case, verify } => {
            let model = case.load()?;
            let config = case.config(verify);
            let outcome = run_pipeline(&model, &config)?;
            if config.out_dir.is_none() {
                match config.format {
                    ReportFormat::Json => println!("{}", outcome.schedule.to_json(&model)),
                    ReportFormat::Csv => print!("{}", outcome.schedule.to_csv(&model)),
                }
            }
            eprintln!(
                "{} slots for {} buses ({:.3} s)",
                outcome.schedule.len(),
                model.n(),
                outcome.timings.total_seconds
            );
        }
        Command::Verify { case, schedule } => {
            let model = case.load()?;
            let config = case.config(true);
            let text = fs::read_to_string(&schedule).map_err(|e| io_failure(&schedule, e))?;
            let doc: ScheduleDocument = serde_json::from_str(&text).map_err(|e| Failure {
                code: exit_code::PARSE,
                message: format!("{}: {e}", schedule.display()),
            })?;
            let sched = Schedule::from_document(&doc, &model).map_err(PipelineError::from)?;
            let topo = derive_topology(&model).map_err(PipelineError::from)?;
            let report = worst_case_margins(&model, &topo, &sched, &config.verify_options());
            match &config.out_dir {
                Some(dir) => {
                    write_artifact(
                        dir,
                        "margins.json",
                        format!(
                            "{}\n",
                            serde_json::to_string_pretty(&report).expect("report serializes")
                        )
                        .as_bytes(),
                    )?;
                    if config.format == ReportFormat::Csv {
                        write_artifact(dir, "margins.csv", report.to_csv().as_bytes())?;
                    }
                }
                None => match config.format {
                    ReportFormat::Json => {
                        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"))
                    }
                    ReportFormat::Csv => print!("{}", report.to_csv()),
                },
            }
            eprintln!("{} (minimum margin {:e})", report.label, report.min_margin());
            if report.violation_found(VIOLATION_TOL) {
                return Err(PipelineError::Violation {
                    min_margin: report.min_margin(),
                }
                .into());
            }
        }
        Command::Compare(args) => {
            let model = args.load()?;
            let report = run_compare(&model, &args.config(true))?;
            if args.out_dir.is_none() {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            }
            for v in &report.variants {
                eprintln!(
                    "{}: {} slots, exit {}",
                    v.variant,
                    v.slots.map_or("-".into(), |s| s.to_string()),
                    v.exit_code
                );
            }
        }
        Command::Gen(args) => {
            let spec = match &args.spec {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
                    serde_json::from_str(&text).map_err(|e| Failure {
                        code: exit_code::PARSE,
                        message: format!("{}: {e}", path.display()),
                    })?
                }
                None => match args.preset {
                    Preset::Default => FeederSpec::new(args.buses, args.seed),
                    Preset::HeavyLoad => FeederSpec::heavy_load(args.buses, args.seed),
                    Preset::SignificantDg => FeederSpec::significant_dg(args.buses, args.seed),
                    Preset::UtilityScale => FeederSpec::utility_scale(args.buses, args.seed),
                },
            };
            let model = generate_synthetic_feeder(&spec).map_err(PipelineError::from)?;
            let mut text = model.to_json();
            text.push('\n');
            match &args.output {
                Some(path) => fs::write(path, text).map_err(|e| io_failure(path, e))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: usize) -> Result<(), Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure {
            code: exit_code::VALIDATION,
            message: format!("--threads: {e}"),
        })
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_threads: usize) -> Result<(), Failure> {
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
