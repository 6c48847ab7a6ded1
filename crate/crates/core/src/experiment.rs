//! Multi-run experiments: teacher construction, lambda sweeps over seeds,
//! and the per-lambda summaries used to pick a distillation weight.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data_io::read_params;
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::objectives::{ModelKind, Objective};
use crate::optimizers::{run, LambdaPolicy, Mode, RunOutput, RunSchedule, RunSetup, TeacherSource};
use crate::oracle::{make_teacher, proxy_constants, reference_solution, solve_linear_regression, ExactConstants};
use crate::rng::Rng;

/// Default distillation-weight grid.
pub const DEFAULT_LAMBDA_GRID: [f64; 10] = [0.0, 0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 0.9, 1.0];

/// Where a teacher comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherSpec {
    None,
    /// `x* + alpha u` with `f(theta) - f* = quality`; `u` is a seeded
    /// Gaussian direction. Classifiers use a reference solution as `x*`.
    Oracle { quality: f64, seed: u64 },
    /// Final iterate of a plain SGD run.
    SgdRun { epochs: u64, gamma: f64, batch_size: usize, seed: u64 },
    /// Near-converged accelerated full-gradient solution.
    Reference { iterations: usize },
    Path(PathBuf),
    SelfRefresh,
}

/// Minimizer and constants for a solvable objective: exact for least
/// squares, a reference-run proxy for the convex classifiers.
pub fn problem_constants(obj: &Objective) -> Result<ExactConstants> {
    match obj.kind() {
        ModelKind::LinearRegression => match solve_linear_regression(obj) {
            Ok(c) => Ok(c),
            Err(Error::RankDeficient { min_norm, .. }) => Ok(*min_norm),
            Err(e) => Err(e),
        },
        ModelKind::MlpRelu { .. } => Err(Error::InvalidKind {
            op: "problem_constants",
            kind: obj.kind().name(),
        }),
        _ => {
            let r = reference_solution(obj, 20_000, 1e-10)?;
            proxy_constants(obj, &r, 16, &mut Rng::new(0))
        }
    }
}

pub fn resolve_teacher(obj: &Objective, spec: &TeacherSpec, init: &ParamVector) -> Result<TeacherSource> {
    Ok(match spec {
        TeacherSpec::None => TeacherSource::None,
        TeacherSpec::SelfRefresh => TeacherSource::SelfRefresh,
        TeacherSpec::Path(p) => {
            let t = read_params(p)?;
            if t.len() != obj.param_dim() {
                return Err(Error::DimensionMismatch {
                    expected: obj.param_dim(),
                    found: t.len(),
                });
            }
            TeacherSource::Fixed(t)
        }
        TeacherSpec::Oracle { quality, seed } => {
            let c = problem_constants(obj)?;
            let mut rng = Rng::new(*seed);
            let u = ParamVector::new((0..obj.param_dim()).map(|_| rng.standard_normal()).collect());
            TeacherSource::Fixed(make_teacher(obj, &c, *quality, &u)?)
        }
        TeacherSpec::Reference { iterations } => {
            TeacherSource::Fixed(reference_solution(obj, *iterations, 1e-12)?.x)
        }
        TeacherSpec::SgdRun {
            epochs,
            gamma,
            batch_size,
            seed,
        } => {
            let steps = epochs * obj.len().div_ceil(*batch_size) as u64;
            let mut schedule = RunSchedule::new(steps, *batch_size, *gamma, Mode::Sgd, 0.0);
            schedule.run_id = "teacher".into();
            let out = run(
                RunSetup {
                    obj,
                    test: None,
                    init: init.clone(),
                    teacher: TeacherSource::None,
                    seed: *seed,
                },
                &schedule,
            )?;
            if let Some(d) = out.diverged {
                return Err(d.into());
            }
            TeacherSource::Fixed(out.final_x)
        }
    })
}

/// One `(lambda, seed)` run of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub lambda: f64,
    pub seed: u64,
    pub output: RunOutput,
}

pub struct Sweep<'a> {
    pub obj: &'a Objective,
    pub test: Option<&'a Objective>,
    /// Template; its mode and lambda are overridden per run.
    pub schedule: RunSchedule,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub init: ParamVector,
    pub teacher: TeacherSource,
}

impl Sweep<'_> {
    /// Runs every `(lambda, seed)` pair, in parallel, returning them in grid
    /// order. `lambda = 0` runs are plain SGD.
    pub fn run(&self) -> Result<Vec<SweepRun>> {
        if self.lambdas.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("sweep needs at least one lambda and one seed"));
        }
        let jobs: Vec<(f64, u64)> = self
            .lambdas
            .iter()
            .flat_map(|&l| self.seeds.iter().map(move |&s| (l, s)))
            .collect();
        jobs.par_iter()
            .map(|&(lambda, seed)| {
                let mut schedule = self.schedule.clone();
                schedule.lambda = LambdaPolicy::Fixed(lambda);
                if lambda == 0.0 && matches!(schedule.mode, Mode::Kd) {
                    schedule.mode = Mode::Sgd;
                }
                schedule.run_id = format!("lambda={lambda}");
                let output = run(
                    RunSetup {
                        obj: self.obj,
                        test: self.test,
                        init: self.init.clone(),
                        teacher: self.teacher.clone(),
                        seed,
                    },
                    &schedule,
                )?;
                Ok(SweepRun { lambda, seed, output })
            })
            .collect()
    }
}

/// Per-lambda statistics over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub runs: usize,
    pub diverged: usize,
    /// Mean over seeds of the minimum full train loss over epochs.
    pub min_loss: f64,
    /// Mean and standard deviation of the full train loss over the last
    /// `window` epochs, pooled over seeds.
    pub tail_mean: f64,
    pub tail_std: f64,
    pub final_test_accuracy: Option<f64>,
}

pub fn summarize(runs: &[SweepRun], window: usize) -> Vec<LambdaSummary> {
    let mut lambdas: Vec<f64> = runs.iter().map(|r| r.lambda).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    lambdas
        .into_iter()
        .map(|lambda| {
            let group: Vec<&SweepRun> = runs.iter().filter(|r| r.lambda == lambda).collect();
            let ok: Vec<&&SweepRun> = group.iter().filter(|r| !r.output.trace.is_empty()).collect();
            let mins: Vec<f64> = ok.iter().filter_map(|r| r.output.min_full_loss()).collect();
            let tail: Vec<f64> = ok
                .iter()
                .flat_map(|r| {
                    let t = &r.output.trace;
                    t[t.len().saturating_sub(window)..].iter().map(|e| e.full_loss)
                })
                .collect();
            let accs: Vec<f64> = ok
                .iter()
                .filter_map(|r| r.output.final_trace().and_then(|e| e.test_accuracy))
                .collect();
            let (tail_mean, tail_std) = mean_std(&tail);
            LambdaSummary {
                lambda,
                runs: group.len(),
                diverged: group.iter().filter(|r| r.output.diverged.is_some()).count(),
                min_loss: mean_std(&mins).0,
                tail_mean,
                tail_std,
                final_test_accuracy: (!accs.is_empty()).then(|| mean_std(&accs).0),
            }
        })
        .collect()
}

/// Mean and sample standard deviation; NaN for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Lambda with the smallest mean minimum loss; ties go to the smaller lambda.
pub fn best_lambda(summaries: &[LambdaSummary]) -> Option<f64> {
    summaries
        .iter()
        .filter(|s| s.min_loss.is_finite())
        .min_by(|a, b| a.min_loss.total_cmp(&b.min_loss).then(a.lambda.total_cmp(&b.lambda)))
        .map(|s| s.lambda)
}

pub const SUMMARY_HEADER: &str = "lambda,runs,diverged,min_loss,tail_mean,tail_std,test_acc";

pub fn write_summary_to<W: Write>(summaries: &[LambdaSummary], mut w: W) -> Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for s in summaries {
        writeln!(
            w,
            "{:.16e},{},{},{:.16e},{:.16e},{:.16e},{}",
            s.lambda,
            s.runs,
            s.diverged,
            s.min_loss,
            s.tail_mean,
            s.tail_std,
            s.final_test_accuracy.map(|a| format!("{a:.16e}")).unwrap_or_default()
        )?;
    }
    Ok(())
}

pub fn write_summary(summaries: &[LambdaSummary], path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_summary_to(summaries, f)
}
