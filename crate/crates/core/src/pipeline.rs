//! End-to-end rollout scheduling: bounds, constraint assembly, packing and
//! sampled verification, with artifacts written after every stage.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, universal_bounds, BoundsError, BoundsResult};
use crate::constraints::{assemble_instance, ConstraintError, ConstraintSystem, Variant, DEFAULT_SIDES};
use crate::distflow;
use crate::network::{derive_topology, DerivedTopology, NetworkError, NetworkModel};
use crate::packing::{best_fit_decreasing, PackingError, Schedule};
use crate::verify::{worst_case_margins, MarginReport, VerifyOptions, DEFAULT_SAMPLES, VIOLATION_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Every knob of a run. Serialized next to the artifacts so a run can be
/// replayed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub sides_prime: usize,
    pub sides_dblprime: usize,
    pub eps: f64,
    pub bounds_max_iter: usize,
    pub pf_tol: f64,
    pub pf_max_iter: usize,
    pub seed: u64,
    pub samples: usize,
    /// Run sampled verification after packing.
    pub verify: bool,
    pub format: ReportFormat,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Nonlinear,
            sides_prime: DEFAULT_SIDES,
            sides_dblprime: DEFAULT_SIDES,
            eps: bounds::DEFAULT_EPS,
            bounds_max_iter: bounds::DEFAULT_MAX_ITER,
            pf_tol: distflow::DEFAULT_TOL,
            pf_max_iter: distflow::DEFAULT_MAX_ITER,
            seed: 0,
            samples: DEFAULT_SAMPLES,
            verify: true,
            format: ReportFormat::Json,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn verify_options(&self) -> VerifyOptions {
        VerifyOptions {
            samples_per_slot: self.samples,
            seed: self.seed,
            pf_tol: self.pf_tol,
            pf_max_iter: self.pf_max_iter,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error("verification found a violation (minimum margin {min_margin:e})")]
    Violation { min_margin: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub mod exit_code {
    pub const IO: i32 = 1;
    pub const PARSE: i32 = 2;
    pub const VALIDATION: i32 = 3;
    pub const BOUND_FAILURE: i32 = 4;
    pub const NOMINAL_UNSAFE: i32 = 5;
    pub const INFEASIBLE: i32 = 6;
    pub const PACKING_INTERNAL: i32 = 7;
    pub const VIOLATION: i32 = 8;
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        use exit_code::*;
        match self {
            PipelineError::Network(NetworkError::Parse { .. }) => PARSE,
            PipelineError::Network(_) => VALIDATION,
            PipelineError::Bounds(BoundsError::Collapse { .. }) => BOUND_FAILURE,
            PipelineError::Bounds(BoundsError::InvalidArgument(_)) => VALIDATION,
            PipelineError::Constraint(ConstraintError::BoundFailure { .. }) => BOUND_FAILURE,
            PipelineError::Constraint(ConstraintError::NominalUnsafe { .. }) => NOMINAL_UNSAFE,
            PipelineError::Constraint(_) => VALIDATION,
            PipelineError::Packing(PackingError::Infeasible { .. }) => INFEASIBLE,
            PipelineError::Packing(PackingError::Document(_)) => PARSE,
            PipelineError::Packing(PackingError::Dimension { .. }) => VALIDATION,
            PipelineError::Packing(_) => PACKING_INTERNAL,
            PipelineError::Violation { .. } => VIOLATION,
            PipelineError::Io { .. } => IO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Topology,
    Bounds,
    Assembly,
    Packing,
    Verify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub bounds: BoundsResult,
    pub system: ConstraintSystem,
    pub schedule: Schedule,
    pub report: Option<MarginReport>,
    pub timings: Timings,
}

struct Clock {
    start: Instant,
    stages: Vec<StageTiming>,
}

impl Clock {
    fn new() -> Self {
        Clock {
            start: Instant::now(),
            stages: Vec::new(),
        }
    }

    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.stages.push(StageTiming {
            stage,
            seconds: t.elapsed().as_secs_f64(),
        });
        out
    }

    fn finish(&self) -> Timings {
        Timings {
            stages: self.stages.clone(),
            total_seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

/// Writes `contents` to `dir/name`, creating `dir` if needed.
pub fn write_artifact(dir: &Path, name: &str, contents: &[u8]) -> Result<(), PipelineError> {
    let io = |path: PathBuf| move |source| PipelineError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io(path.clone()))
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s.into_bytes()
}

#[derive(Serialize)]
struct BoundsArtifact<'a> {
    bus_ids: &'a [u64],
    #[serde(flatten)]
    bounds: &'a BoundsResult,
}

pub fn bounds_json(model: &NetworkModel, bounds: &BoundsResult) -> Vec<u8> {
    json(&BoundsArtifact {
        bus_ids: &model.ids,
        bounds,
    })
}

/// Writes the `(H, b)` container and its metadata sidecar.
pub fn write_instance(dir: &Path, model: &NetworkModel, system: &ConstraintSystem) -> Result<(), PipelineError> {
    let io = |path: PathBuf| move |source| PipelineError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
    let path = dir.join("instance.bin");
    let file = fs::File::create(&path).map_err(io(path.clone()))?;
    system.write_binary(BufWriter::new(file)).map_err(io(path))?;
    write_artifact(dir, "instance.json", &json(&system.metadata(model)))
}

/// Runs every stage on `model`. With an output directory, each stage's
/// artifacts are written as soon as the stage finishes, so a later failure
/// still leaves the earlier results on disk. A verification violation is
/// returned as an error after all artifacts are written.
pub fn run_pipeline(model: &NetworkModel, config: &RunConfig) -> Result<PipelineOutcome, PipelineError> {
    let mut clock = Clock::new();
    let out = config.out_dir.as_deref();
    if let Some(dir) = out {
        write_artifact(dir, "config.json", &json(config))?;
    }
    let topo = clock.time(Stage::Topology, || derive_topology(model))?;
    let outcome = run_with_topology(model, &topo, config, &mut clock)?;
    check_violation(&outcome)?;
    Ok(outcome)
}

fn run_with_topology(
    model: &NetworkModel,
    topo: &DerivedTopology,
    config: &RunConfig,
    clock: &mut Clock,
) -> Result<PipelineOutcome, PipelineError> {
    let out = config.out_dir.as_deref();
    let bounds = clock.time(Stage::Bounds, || {
        universal_bounds(model, topo, config.eps, config.bounds_max_iter)
    })?;
    if let Some(dir) = out {
        write_artifact(dir, "bounds.json", &bounds_json(model, &bounds))?;
    }

    let system = clock.time(Stage::Assembly, || {
        assemble_instance(
            model,
            topo,
            &bounds,
            config.variant,
            config.sides_prime,
            config.sides_dblprime,
        )
    })?;
    if let Some(dir) = out {
        write_instance(dir, model, &system)?;
    }

    let schedule = clock.time(Stage::Packing, || best_fit_decreasing(&system.h, &system.b))?;
    if let Some(dir) = out {
        write_artifact(dir, "schedule.json", schedule.to_json(model).as_bytes())?;
        write_artifact(dir, "schedule.csv", schedule.to_csv(model).as_bytes())?;
    }

    let report = if config.verify {
        let options = config.verify_options();
        let report = clock.time(Stage::Verify, || worst_case_margins(model, topo, &schedule, &options));
        if let Some(dir) = out {
            write_artifact(dir, "margins.json", &json(&report))?;
            if config.format == ReportFormat::Csv {
                write_artifact(dir, "margins.csv", report.to_csv().as_bytes())?;
            }
        }
        Some(report)
    } else {
        None
    };

    let timings = clock.finish();
    if let Some(dir) = out {
        write_artifact(dir, "timings.json", &json(&timings))?;
    }
    Ok(PipelineOutcome {
        bounds,
        system,
        schedule,
        report,
        timings,
    })
}

fn check_violation(outcome: &PipelineOutcome) -> Result<(), PipelineError> {
    match &outcome.report {
        Some(r) if r.violation_found(VIOLATION_TOL) => Err(PipelineError::Violation {
            min_margin: r.min_margin(),
        }),
        _ => Ok(()),
    }
}

/// One variant's result inside a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub slots: Option<usize>,
    pub min_margin: Option<f64>,
    pub violation_found: Option<bool>,
    pub verification_label: Option<String>,
    pub error: Option<String>,
    pub exit_code: i32,
    pub timings: Option<Timings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub variants: Vec<VariantSummary>,
}

/// Runs both variants with otherwise identical settings. Each variant's
/// artifacts go to a subdirectory named after it.
pub fn run_compare(model: &NetworkModel, config: &RunConfig) -> Result<ComparisonReport, PipelineError> {
    let mut variants = Vec::new();
    for variant in [Variant::Nonlinear, Variant::Linearized] {
        let mut cfg = config.clone();
        cfg.variant = variant;
        cfg.verify = true;
        cfg.out_dir = config.out_dir.as_ref().map(|d| d.join(variant.to_string()));
        let mut clock = Clock::new();
        let result = derive_topology(model)
            .map_err(PipelineError::from)
            .and_then(|topo| run_with_topology(model, &topo, &cfg, &mut clock));
        let summary = match result {
            Ok(o) => {
                let violation = check_violation(&o).is_err();
                VariantSummary {
                    variant,
                    slots: Some(o.schedule.len()),
                    min_margin: o.report.as_ref().map(|r| r.min_margin()),
                    violation_found: Some(violation),
                    verification_label: o.report.map(|r| r.label),
                    error: None,
                    exit_code: if violation { exit_code::VIOLATION } else { 0 },
                    timings: Some(o.timings),
                }
            }
            Err(e) => VariantSummary {
                variant,
                slots: None,
                min_margin: None,
                violation_found: None,
                verification_label: None,
                exit_code: e.exit_code(),
                error: Some(e.to_string()),
                timings: Some(clock.finish()),
            },
        };
        variants.push(summary);
    }
    let report = ComparisonReport { variants };
    if let Some(dir) = &config.out_dir {
        write_artifact(dir, "compare.json", &json(&report))?;
    }
    Ok(report)
}
