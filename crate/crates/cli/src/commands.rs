//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kdvr_core::data_io::{load, write_csv, write_params};
use kdvr_core::distillation::{optimal_lambda_for, reduction_ratio_for, NeighborhoodConstant};
use kdvr_core::experiment::{
    best_lambda, problem_constants, resolve_teacher, summarize, write_summary, LambdaSummary, Sweep, SweepRun,
};
use kdvr_core::optimizers::{run, RunSetup};
use kdvr_core::oracle::{expected_smoothness_check, step_size_report, ExactConstants};
use kdvr_core::telemetry::write_trace;
use kdvr_core::verify::{run_suite, Hooks, PropertyResult};
use kdvr_core::{DistillationForm, LambdaPolicy, ModelKind, Mode, Objective, ParamVector, Rng, TeacherSource, TeacherStats};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, LambdaPolicyConfig};
use crate::error::CliError;

/// Everything a run needs, built once from a config.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub obj: Objective,
    pub test: Option<Objective>,
    pub init: ParamVector,
}

impl Experiment {
    pub fn build(cfg: ExperimentConfig) -> Result<Self, CliError> {
        let data = load(&cfg.dataset.spec())?.dataset;
        let kind = cfg.model_kind(data.classes())?;
        let obj = Objective::new(kind, data, cfg.objective.bias)?;
        let test = match &cfg.test_dataset {
            Some(t) => Some(obj.with_data(load(&t.spec())?.dataset)?),
            None => None,
        };
        let init = match kind {
            ModelKind::MlpRelu { .. } => obj.init_params(&mut Rng::new(cfg.seeds[0]).substream(1000)),
            _ => ParamVector::zeros(obj.param_dim()),
        };
        log::info!(
            "objective {} with N={}, d={}, {} parameters",
            kind.name(),
            obj.len(),
            obj.data().dim(),
            obj.param_dim()
        );
        Ok(Experiment { cfg, obj, test, init })
    }

    fn teacher(&self) -> Result<TeacherSource, CliError> {
        let t = resolve_teacher(&self.obj, &self.cfg.teacher_spec(), &self.init)?;
        if let TeacherSource::Fixed(x) = &t {
            log::info!("teacher loss {:.6e}", self.obj.full_loss(x)?);
        }
        Ok(t)
    }

    fn neighborhood_c(&self, constants: &ExactConstants) -> f64 {
        NeighborhoodConstant::from(self.cfg.schedule.c).resolve(constants.mu, constants.l_full)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Io(format!("{}: {e}", cfg.output_dir.display())))?;
    Ok(cfg.output_dir.clone())
}

fn trace_name(lambda: f64, seed: u64) -> String {
    format!("trace_lambda={lambda}_seed={seed}.csv")
}

/// Runs every configured `(lambda, seed)` pair and writes one trace per run,
/// the summary, the teacher and the resolved config.
pub fn train(cfg: ExperimentConfig) -> Result<Vec<LambdaSummary>, CliError> {
    cfg.validate_for_training()?;
    let out = out_dir(&cfg)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let exp = Experiment::build(cfg)?;
    let teacher = exp.teacher()?;
    if let TeacherSource::Fixed(t) = &teacher {
        write_params(t, &out.join("teacher.params"))?;
    }
    let schedule = exp.cfg.run_schedule(exp.obj.len(), exp.obj.param_dim())?;
    let optimal = exp.cfg.schedule.lambda_policy == LambdaPolicyConfig::Optimal;
    let runs: Vec<SweepRun> = match exp.cfg.schedule.lambda_policy {
        LambdaPolicyConfig::Fixed => Sweep {
            obj: &exp.obj,
            test: exp.test.as_ref(),
            schedule,
            lambdas: exp.cfg.lambda_grid.clone(),
            seeds: exp.cfg.seeds.clone(),
            init: exp.init.clone(),
            teacher,
        }
        .run()?,
        LambdaPolicyConfig::Optimal => {
            let constants = problem_constants(&exp.obj)?;
            let mut schedule = schedule;
            schedule.lambda = LambdaPolicy::OptimalPerPhase {
                c: exp.neighborhood_c(&constants),
                x_star: constants.x_star,
            };
            schedule.run_id = "lambda=optimal".into();
            exp.cfg
                .seeds
                .par_iter()
                .map(|&seed| {
                    let output = run(
                        RunSetup {
                            obj: &exp.obj,
                            test: exp.test.as_ref(),
                            init: exp.init.clone(),
                            teacher: teacher.clone(),
                            seed,
                        },
                        &schedule,
                    )?;
                    let lambda = output.lambdas.first().map_or(f64::NAN, |c| c.used);
                    Ok(SweepRun { lambda, seed, output })
                })
                .collect::<kdvr_core::Result<Vec<_>>>()?
        }
    };
    for r in &runs {
        if let Some(d) = &r.output.diverged {
            log::warn!("lambda={} seed={} diverged at step {}: {}", r.lambda, r.seed, d.step, d.reason);
        }
        write_trace(&r.output.trace, &out.join(trace_name(r.lambda, r.seed)))?;
        if optimal {
            let mut s = String::from("phase,unclamped,used\n");
            for c in &r.output.lambdas {
                writeln!(s, "{},{:.16e},{:.16e}", c.phase, c.unclamped, c.used).expect("string write");
            }
            fs::write(out.join(format!("lambdas_seed={}.csv", r.seed)), s)?;
        }
    }
    let summaries = summarize(&runs, 10);
    write_summary(&summaries, &out.join("summary.csv"))?;
    for s in &summaries {
        println!(
            "lambda {:<6} min loss {:.6e}  last-10 mean {:.6e} +- {:.2e}{}",
            s.lambda,
            s.min_loss,
            s.tail_mean,
            s.tail_std,
            if s.diverged > 0 { format!("  ({} diverged)", s.diverged) } else { String::new() }
        );
    }
    Ok(summaries)
}

pub fn sweep_lambda(cfg: ExperimentConfig) -> Result<(), CliError> {
    let out = cfg.output_dir.clone();
    let summaries = train(cfg)?;
    let best = best_lambda(&summaries).ok_or_else(|| CliError::PropertyFailure("every run diverged".into()))?;
    fs::write(out.join("best_lambda.txt"), format!("{best}\n"))?;
    println!("best lambda: {best}");
    Ok(())
}

/// Teacher diagnostics for solvable objectives; per-epoch gradient-gap
/// statistics for networks.
pub fn diagnose(cfg: ExperimentConfig) -> Result<(), CliError> {
    let out = out_dir(&cfg)?;
    let exp = Experiment::build(cfg)?;
    if matches!(exp.obj.kind(), ModelKind::MlpRelu { .. }) {
        return diagnose_network(&exp, &out);
    }
    let constants = problem_constants(&exp.obj)?;
    let c = exp.neighborhood_c(&constants);
    let gamma = exp.cfg.schedule.gamma;
    let mut rows: Vec<(String, String, String)> = Vec::new();
    let mut put = |q: &str, v: String, reason: &str| rows.push((q.into(), v, reason.into()));
    let num = |v: f64| format!("{v:.16e}");
    put("provenance", constants.provenance.label().into(), "");
    put("rank_deficient", constants.rank_deficient.to_string(), "");
    put("f_star", num(constants.f_star), "");
    put("mu", num(constants.mu), "");
    put("l_full", num(constants.l_full), "");
    put("l_expected", num(constants.l_expected), "");
    put("sigma_star_sq", num(constants.sigma_star_sq), "");
    put("gamma", num(gamma), "");
    put("c", num(c), "");
    for s in step_size_report(&constants, gamma) {
        put(&format!("gamma_bound[{}]", s.name), num(s.bound), if s.satisfied { "" } else { "gamma exceeds bound" });
    }
    match exp.teacher()? {
        TeacherSource::Fixed(theta) => {
            put("teacher_gap", num(exp.obj.full_loss(&theta)? - constants.f_star), "");
            let stats = TeacherStats::compute(&exp.obj, &constants.x_star, &theta)?;
            for (name, v) in [("beta", stats.beta()), ("rho", stats.rho())] {
                match v {
                    Ok(v) => put(name, num(v), ""),
                    Err(e) => put(name, String::new(), &e.to_string()),
                }
            }
            match optimal_lambda_for(c * gamma, &stats) {
                Ok(l) => {
                    put("lambda_star_unclamped", num(l.value), "");
                    put("lambda_star", num(l.clamped()), "");
                    put("clamped", l.needs_clamp().to_string(), "");
                }
                Err(e) => {
                    for q in ["lambda_star_unclamped", "lambda_star", "clamped"] {
                        put(q, String::new(), &e.to_string());
                    }
                }
            }
            match reduction_ratio_for(c * gamma, &stats) {
                Ok(r) => put("reduction_ratio", num(r), ""),
                Err(e) => put("reduction_ratio", String::new(), &e.to_string()),
            }
        }
        _ => {
            for q in ["teacher_gap", "beta", "rho", "lambda_star_unclamped", "lambda_star", "clamped", "reduction_ratio"] {
                put(q, String::new(), "no fixed teacher configured");
            }
        }
    }
    let mut csv = String::from("quantity,value,reason\n");
    for (q, v, r) in &rows {
        writeln!(csv, "{},{},{}", quote(q), v, quote(r)).expect("string write");
        println!("{q:<48} {v:<24} {r}");
    }
    fs::write(out.join("diagnostics.csv"), csv)?;
    Ok(())
}

fn quote(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn diagnose_network(exp: &Experiment, out: &Path) -> Result<(), CliError> {
    let teacher = exp.teacher()?;
    let mut schedule = exp.cfg.run_schedule(exp.obj.len(), exp.obj.param_dim())?;
    schedule.mode = Mode::Kd;
    schedule.form = DistillationForm::Network;
    schedule.track_kd_gap = true;
    let lambdas: Vec<f64> = exp.cfg.lambda_grid.iter().copied().filter(|&l| l > 0.0).collect();
    if lambdas.is_empty() {
        return Err(CliError::Config("lambda_grid: gap statistics need some lambda > 0".into()));
    }
    let runs = Sweep {
        obj: &exp.obj,
        test: exp.test.as_ref(),
        schedule,
        lambdas,
        seeds: exp.cfg.seeds.clone(),
        init: exp.init.clone(),
        teacher,
    }
    .run()?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.16e}")).unwrap_or_default();
    let mut csv = String::from("lambda,seed,epoch,cosine,l2,snr\n");
    for r in &runs {
        for e in &r.output.trace {
            writeln!(csv, "{},{},{},{},{},{}", r.lambda, r.seed, e.epoch, opt(e.cosine_mean), opt(e.l2_mean), opt(e.snr_mean))
                .expect("string write");
        }
        if let Some(e) = r.output.trace.last() {
            println!(
                "lambda {:<5} seed {:<3} final epoch: cosine {}  l2 {}  snr {}",
                r.lambda,
                r.seed,
                opt(e.cosine_mean),
                opt(e.l2_mean),
                opt(e.snr_mean)
            );
        }
    }
    fs::write(out.join("gap_stats.csv"), csv)?;
    Ok(())
}

/// Property suite, plus a constants report when a config is given.
pub fn verify(cfg: Option<ExperimentConfig>, out: Option<&Path>) -> Result<(), CliError> {
    let results = run_suite(&Hooks::default());
    let report = property_report(&results);
    print!("{report}");
    let mut failures: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let constants_csv = match cfg {
        Some(cfg) => {
            let exp = Experiment::build(cfg)?;
            let c = problem_constants(&exp.obj)?;
            let mut csv = String::from("quantity,value\n");
            for (q, v) in [
                ("f_star", c.f_star),
                ("mu", c.mu),
                ("l_full", c.l_full),
                ("l_expected", c.l_expected),
                ("sigma_star_sq", c.sigma_star_sq),
            ] {
                writeln!(csv, "{q},{v:.16e}").expect("string write");
                println!("{q:<48} {v:.6e}");
            }
            match expected_smoothness_check(&exp.obj, &c, 1000, &mut Rng::new(exp.cfg.seeds[0])) {
                Ok(r) => {
                    writeln!(csv, "expected_smoothness_max_ratio,{:.16e}", r.max_ratio).expect("string write");
                    println!("expected smoothness: max ratio {:.6e} <= declared {:.6e}", r.max_ratio, r.declared);
                }
                Err(e) => {
                    println!("expected smoothness: {e}");
                    failures.push("expected_smoothness");
                }
            }
            Some(csv)
        }
        None => None,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("verify.csv"), property_csv(&results))?;
        if let Some(csv) = constants_csv {
            fs::write(dir.join("constants.csv"), csv)?;
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::PropertyFailure(format!("failed: {}", failures.join(", "))))
    }
}

pub fn property_report(results: &[PropertyResult]) -> String {
    let mut s = String::new();
    for r in results {
        writeln!(
            s,
            "{:<48} observed {:>12.4e}  tolerance {:.1e}  {}",
            r.name,
            r.observed,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        )
        .expect("string write");
    }
    s
}

pub fn property_csv(results: &[PropertyResult]) -> String {
    let mut s = String::from("property,tolerance,observed,passed\n");
    for r in results {
        writeln!(s, "{},{:.16e},{:.16e},{}", r.name, r.tolerance, r.observed, r.passed).expect("string write");
    }
    s
}

/// Converts the configured dataset (and test dataset) to the CSV format.
pub fn ingest(cfg: ExperimentConfig) -> Result<(), CliError> {
    let out = out_dir(&cfg)?;
    let mut sets = vec![("dataset.csv", &cfg.dataset)];
    if let Some(t) = &cfg.test_dataset {
        sets.push(("test.csv", t));
    }
    for (name, spec) in sets {
        let loaded = load(&spec.spec())?;
        let path = out.join(name);
        write_csv(&loaded.dataset, &path)?;
        println!(
            "{}: N={} d={}{}",
            path.display(),
            loaded.dataset.len(),
            loaded.dataset.dim(),
            loaded.dataset.classes().map(|k| format!(" classes={k}")).unwrap_or_default()
        );
        if let Some(w) = loaded.planted {
            write_params(&w, &out.join(name.replace(".csv", "_planted.params")))?;
        }
    }
    Ok(())
}
