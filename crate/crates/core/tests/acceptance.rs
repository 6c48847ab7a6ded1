//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any criterion fails.
//!
//! Reference values are computed here independently of the library where
//! possible: least-squares minimizers via a dense LU solve, composite losses
//! and per-sample gradients from their closed forms, and the optimal
//! distillation weight by golden-section search.

use std::path::{Path, PathBuf};
use std::time::Instant;

use kdvr_core::compression::{rand_k_apply, Compressor};
use kdvr_core::data_io::{load, synth, write_csv, DatasetSpec, Normalization, Source, SynthKind};
use kdvr_core::distillation::{
    distillation_grad, optimal_lambda_for, reduction_ratio_for, true_kd_grad, DistillationForm, KdConfig,
    TeacherStats,
};
use kdvr_core::experiment::{best_lambda, resolve_teacher, summarize, Sweep, TeacherSpec, DEFAULT_LAMBDA_GRID};
use kdvr_core::objectives::{log_sum_exp, sigmoid, softmax, Dataset, ModelKind, Objective, Targets};
use kdvr_core::optimizers::{run, run_observed, Mode, RunSchedule, RunSetup, TeacherSource};
use kdvr_core::oracle::{make_teacher, solve_linear_regression, ExactConstants};
use kdvr_core::telemetry::{approx_gap_stats, write_trace};
use kdvr_core::{Minibatch, ParamVector, Result, Rng};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

// ---------------------------------------------------------------- helpers

fn gaussian(rng: &mut Rng, len: usize, scale: f64) -> ParamVector {
    ParamVector::new((0..len).map(|_| scale * rng.standard_normal()).collect())
}

fn unit(rng: &mut Rng, len: usize) -> ParamVector {
    let g = gaussian(rng, len, 1.0);
    g.scaled(1.0 / g.norm())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Welch's t statistic, degrees of freedom and two-sided p-value for
/// `mean(a) - mean(b)`.
fn welch(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (va, vb) = (sample_var(a) / a.len() as f64, sample_var(b) / b.len() as f64);
    let t = (mean(a) - mean(b)) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    (t, df, 2.0 * (1.0 - dist.cdf(t.abs())))
}

fn linear_objective(n: usize, d: usize, noise: f64, seed: u64) -> Result<Objective> {
    let (data, _) = synth(SynthKind::LinearGaussian, n, d, noise, seed)?;
    Objective::new(ModelKind::LinearRegression, data, true)
}

/// Least-squares minimizer from a dense LU solve of the normal equations.
fn lstsq_reference(obj: &Objective) -> Vec<f64> {
    let p = obj.input_width();
    let a = DMatrix::from_fn(obj.len(), p, |r, c| obj.lifted(r)[c]);
    let b = match obj.data().targets() {
        Targets::Real(b) => DVector::from_column_slice(b),
        _ => unreachable!(),
    };
    let x = (a.transpose() * &a).lu().solve(&(a.transpose() * b)).expect("nonsingular");
    x.iter().copied().collect()
}

/// Per-sample least-squares gradient `2 a (a.x - b)`.
fn ls_grad(obj: &Objective, x: &[f64], n: usize) -> Vec<f64> {
    let a = obj.lifted(n);
    let b = match obj.data().targets() {
        Targets::Real(b) => b[n],
        _ => unreachable!(),
    };
    let r: f64 = a.iter().zip(x).map(|(u, v)| u * v).sum::<f64>() - b;
    a.iter().map(|u| 2.0 * u * r).collect()
}

/// Mean squared distance to `x_star` over the last fifth of the steps.
fn tail_error(
    obj: &Objective,
    schedule: &RunSchedule,
    init: &ParamVector,
    teacher: TeacherSource,
    seed: u64,
    x_star: &ParamVector,
) -> Result<f64> {
    let from = schedule.total_steps - schedule.total_steps / 5;
    let (mut sum, mut count) = (0.0, 0u64);
    let out = run_observed(
        RunSetup {
            obj,
            test: None,
            init: init.clone(),
            teacher,
            seed,
        },
        schedule,
        |s| {
            if s.step > from {
                sum += s.x.dist_sq(x_star).expect("same length");
                count += 1;
            }
        },
    )?;
    if let Some(d) = out.diverged {
        return Err(d.into());
    }
    Ok(sum / count as f64)
}

// ------------------------------------------------------------ criterion 1

/// Composite self-distillation loss of one lifted sample, from closed forms.
fn composite_loss(kind: ModelKind, a: &[f64], target: &Targets, n: usize, x: &[f64], t: &[f64], lambda: f64) -> f64 {
    let w = a.len();
    let lin = |p: &[f64], k: usize| -> f64 { (0..w).map(|i| p[k * w + i] * a[i]).sum() };
    match kind {
        ModelKind::LinearRegression => {
            let b = match target {
                Targets::Real(b) => b[n],
                _ => unreachable!(),
            };
            let (z, zt) = (lin(x, 0), lin(t, 0));
            (1.0 - lambda) * (z - b).powi(2) + lambda * (z - zt).powi(2)
        }
        ModelKind::BinaryLogistic => {
            let b = match target {
                Targets::Real(b) => b[n],
                _ => unreachable!(),
            };
            let z = lin(x, 0);
            let soft = (1.0 - lambda) * b + lambda * sigmoid(lin(t, 0));
            // -soft ln s(z) - (1 - soft) ln(1 - s(z)) = ln(1 + e^z) - soft z
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            softplus - soft * z
        }
        ModelKind::SoftmaxLinear { classes } => {
            let label = match target {
                Targets::Classes { labels, .. } => labels[n],
                _ => unreachable!(),
            };
            let z: Vec<f64> = (0..classes).map(|k| lin(x, k)).collect();
            let zt: Vec<f64> = (0..classes).map(|k| lin(t, k)).collect();
            let pt = softmax(&zt);
            let soft: Vec<f64> = (0..classes)
                .map(|k| (1.0 - lambda) * f64::from(u8::from(k == label)) + lambda * pt[k])
                .collect();
            log_sum_exp(&z) - soft.iter().zip(&z).map(|(s, v)| s * v).sum::<f64>()
        }
        ModelKind::MlpRelu { .. } => unreachable!(),
    }
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * (1.0 + x[i].abs());
            p[i] = x[i] + step;
            let up = f(&p);
            p[i] = x[i] - step;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

fn criterion_1() -> Result<Outcome> {
    let mut rng = Rng::new(101);
    let mut worst = Vec::new();
    for kind in [
        ModelKind::LinearRegression,
        ModelKind::BinaryLogistic,
        ModelKind::SoftmaxLinear { classes: 4 },
    ] {
        let (n, d) = (12, 5);
        let inputs: Vec<f64> = (0..n * d).map(|_| rng.standard_normal()).collect();
        let targets = match kind {
            ModelKind::LinearRegression => Targets::Real((0..n).map(|_| 2.0 * rng.standard_normal()).collect()),
            ModelKind::BinaryLogistic => Targets::Real((0..n).map(|_| rng.uniform()).collect()),
            _ => Targets::Classes {
                labels: (0..n).map(|_| rng.index(4)).collect(),
                classes: 4,
            },
        };
        let obj = Objective::new(kind, Dataset::new(d, inputs, targets.clone())?, true)?;
        let mut kind_worst: f64 = 0.0;
        for _ in 0..100 {
            let x = gaussian(&mut rng, obj.param_dim(), 1.0);
            let t = gaussian(&mut rng, obj.param_dim(), 1.0);
            let lambda = rng.uniform();
            let i = rng.index(n);
            let g = distillation_grad(&obj, &x, &KdConfig::new(lambda, 1.0, t.clone(), 1.0)?, i)?;
            let a = obj.lifted(i).to_vec();
            let fd = central_difference(|p| composite_loss(kind, &a, &targets, i, p, &t, lambda), &x, 1e-5);
            kind_worst = kind_worst.max(rel_err(&g, &fd));
        }
        worst.push((kind.name(), kind_worst));
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    outcome(
        max <= 1e-5,
        format!(
            "max relative error vs finite differences {} (tol 1e-5)",
            worst.iter().map(|(k, e)| format!("{k}={e:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ------------------------------------------------------------ criterion 2

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section search followed by parabolic polishing.
fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-5 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mut m = 0.5 * (a + b);
    for _ in 0..2 {
        let h = 0.05;
        let (f0, f1, f2) = (f(m - h), f(m), f(m + h));
        let curv = f0 - 2.0 * f1 + f2;
        if curv <= 0.0 {
            break;
        }
        m -= h * (f2 - f0) / (2.0 * curv);
    }
    m
}

/// `N(lambda)` from per-sample gradients evaluated with the closed form.
struct Neighborhood {
    at_opt: Vec<Vec<f64>>,
    at_teacher: Vec<Vec<f64>>,
    full_sq: f64,
    c_gamma: f64,
}

impl Neighborhood {
    fn new(obj: &Objective, x_star: &[f64], teacher: &[f64], c_gamma: f64) -> Self {
        let at_opt: Vec<Vec<f64>> = (0..obj.len()).map(|n| ls_grad(obj, x_star, n)).collect();
        let at_teacher: Vec<Vec<f64>> = (0..obj.len()).map(|n| ls_grad(obj, teacher, n)).collect();
        let p = teacher.len();
        let full: Vec<f64> = (0..p)
            .map(|i| at_teacher.iter().map(|g| g[i]).sum::<f64>() / obj.len() as f64)
            .collect();
        Neighborhood {
            at_opt,
            at_teacher,
            full_sq: full.iter().map(|v| v * v).sum(),
            c_gamma,
        }
    }

    fn eval(&self, lambda: f64) -> f64 {
        let spread: f64 = self
            .at_opt
            .iter()
            .zip(&self.at_teacher)
            .map(|(s, t)| s.iter().zip(t).map(|(u, v)| (u - lambda * v).powi(2)).sum::<f64>())
            .sum::<f64>()
            / self.at_opt.len() as f64;
        lambda * lambda * self.full_sq + self.c_gamma * spread
    }
}

fn criterion_2() -> Result<Outcome> {
    let mut rng = Rng::new(202);
    let (mut lam_err, mut ratio_err, mut x_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..50u64 {
        let n = 20 + rng.index(40);
        let d = 2 + rng.index(5);
        let obj = linear_objective(n, d, 0.2 + 1.8 * rng.uniform(), 2000 + i)?;
        let c = solve_linear_regression(&obj)?;
        let reference = lstsq_reference(&obj);
        x_err = x_err.max(rel_err(&c.x_star, &reference));
        let scale = 10f64.powf(-3.0 + 3.0 * rng.uniform());
        let teacher = c.x_star.axpy(1.0, &unit(&mut rng, obj.param_dim()).scaled(scale))?;
        let gamma = rng.uniform().max(0.05) / (8.0 * c.l_expected);
        let cc = [c.mu / 4.0, c.l_full, 2.0 * c.mu][i as usize % 3];
        let stats = TeacherStats::compute(&obj, &c.x_star, &teacher)?;
        let analytic = optimal_lambda_for(cc * gamma, &stats)?.value;
        let nb = Neighborhood::new(&obj, &c.x_star, &teacher, cc * gamma);
        let bound = 1.0 + 2.0 * (stats.sigma_star_sq / stats.second_moment).sqrt();
        let numeric = golden_section(|l| nb.eval(l), -bound, bound);
        lam_err = lam_err.max((analytic - numeric).abs());
        let closed = reduction_ratio_for(cc * gamma, &stats)?;
        ratio_err = ratio_err.max((closed - nb.eval(analytic) / nb.eval(0.0)).abs());
    }
    // teacher at the optimum
    let obj = linear_objective(40, 4, 1.0, 2999)?;
    let c = solve_linear_regression(&obj)?;
    let gamma = 1.0 / (8.0 * c.l_expected);
    let stats = TeacherStats::compute(&obj, &c.x_star, &c.x_star)?;
    let at_opt = optimal_lambda_for(c.mu / 4.0 * gamma, &stats)?.value;
    let ratio_opt = reduction_ratio_for(c.mu / 4.0 * gamma, &stats)?;
    let passed = lam_err <= 1e-8 && ratio_err <= 1e-10 && at_opt == 1.0 && ratio_opt == 0.0 && x_err <= 1e-9;
    outcome(
        passed,
        format!(
            "50 instances: |lambda* - golden| max {lam_err:.2e} (tol 1e-8), ratio gap max {ratio_err:.2e} (tol 1e-10); \
             theta=x*: lambda*={at_opt}, ratio={ratio_opt}; minimizer vs LU {x_err:.1e}"
        ),
    )
}

// ------------------------------------------------------------ criterion 3

struct Quadratic {
    obj: Objective,
    c: ExactConstants,
}

fn quadratic_benchmark() -> Result<Quadratic> {
    let obj = linear_objective(200, 20, 1.0, 303)?;
    let c = solve_linear_regression(&obj)?;
    Ok(Quadratic { obj, c })
}

/// Largest teacher suboptimality in a decade grid whose clamped optimal
/// weight reaches `target`.
fn teacher_with_weight(q: &Quadratic, gamma: f64, c: f64, target: f64, seed: u64) -> Result<(ParamVector, f64, f64)> {
    let mut rng = Rng::new(seed);
    let dir = gaussian(&mut rng, q.obj.param_dim(), 1.0);
    let mut last = None;
    for e in 0..14 {
        let quality = q.c.f_star * 10f64.powi(-e);
        let t = make_teacher(&q.obj, &q.c, quality, &dir)?;
        let stats = TeacherStats::compute(&q.obj, &q.c.x_star, &t)?;
        let lambda = optimal_lambda_for(c * gamma, &stats)?.clamped();
        last = Some((t, quality, lambda));
        if lambda >= target {
            break;
        }
    }
    Ok(last.expect("grid is nonempty"))
}

fn criterion_3() -> Result<Outcome> {
    let q = quadratic_benchmark()?;
    let gamma = 1.0 / (8.0 * q.c.l_expected);
    let (teacher, quality, lambda) = teacher_with_weight(&q, gamma, q.c.mu / 4.0, 0.5, 31)?;
    let steps = 50_000;
    let init = ParamVector::zeros(q.obj.param_dim());
    let seeds: Vec<u64> = (0..12).collect();
    let (mut sgd, mut kd, mut star) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &seeds {
        let s = RunSchedule::new(steps, 1, gamma, Mode::Sgd, 0.0);
        sgd.push(tail_error(&q.obj, &s, &init, TeacherSource::None, seed, &q.c.x_star)?);
        let s = RunSchedule::new(steps, 1, gamma, Mode::Kd, lambda);
        kd.push(tail_error(&q.obj, &s, &init, TeacherSource::Fixed(teacher.clone()), seed, &q.c.x_star)?);
        let s = RunSchedule::new(steps, 1, gamma, Mode::Kd, 1.0);
        star.push(tail_error(&q.obj, &s, &init, TeacherSource::Fixed(q.c.x_star.clone()), seed, &q.c.x_star)?);
    }
    let (t, df, p) = welch(&kd, &sgd);
    let (m_sgd, m_kd, m_star) = (mean(&sgd), mean(&kd), mean(&star));
    let passed = m_kd < m_sgd && p < 0.05 && m_star <= 1e-2 * m_sgd && m_sgd >= m_kd && m_kd >= m_star;
    outcome(
        passed,
        format!(
            "terminal E||x-x*||^2: sgd {m_sgd:.3e}, kd(lambda={lambda:.3}, f(theta)-f*={quality:.1e}) {m_kd:.3e} \
             (Welch t={t:.2}, df={df:.1}, p={p:.1e}), kd(theta=x*, lambda=1) {m_star:.2e} = {:.1e} x sgd",
            m_star / m_sgd
        ),
    )
}

// ------------------------------------------------------------ criterion 4

fn criterion_4() -> Result<Outcome> {
    let q = quadratic_benchmark()?;
    let gamma = q.c.mu / (12.0 * q.c.l_full * q.c.l_expected);
    let tau = (1.0 / (gamma * q.c.mu)).ceil() as u64;
    let phases = 5usize;
    let mut rng = Rng::new(404);
    let init = q.c.x_star.axpy(1.0, &unit(&mut rng, q.obj.param_dim()).scaled(10.0))?;
    let gap0 = q.obj.full_loss(&init)? - q.c.f_star;
    let mut ratios = vec![Vec::new(); phases];
    for seed in 0..10 {
        let mut schedule = RunSchedule::new(tau * phases as u64, 1, gamma, Mode::UnbiasedKd, 1.0);
        schedule.phase_length = tau;
        schedule.epoch_length = Some(tau);
        let mut gaps = vec![gap0];
        let out = run_observed(
            RunSetup {
                obj: &q.obj,
                test: None,
                init: init.clone(),
                teacher: TeacherSource::SelfRefresh,
                seed,
            },
            &schedule,
            |s| {
                if s.step % tau == 0 {
                    gaps.push(q.obj.full_loss(&s.x).expect("finite") - q.c.f_star);
                }
            },
        )?;
        if let Some(d) = out.diverged {
            return Err(d.into());
        }
        for m in 0..phases {
            ratios[m].push(gaps[m + 1] / gaps[m]);
        }
    }
    let means: Vec<f64> = ratios.iter().map(|r| mean(r)).collect();
    let overall = mean(&means);
    let passed = means.iter().all(|&m| m <= 0.75);
    outcome(
        passed,
        format!(
            "gamma=mu/(12 L Lexp)={gamma:.3e}, tau={tau}; mean phase ratios [{}] (each <= 0.75), average {overall:.3e}",
            means.iter().map(|m| format!("{m:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ------------------------------------------------------------ criterion 5

/// 64 sign-flipped rows of the 8x8 Sylvester-Hadamard matrix, so that the
/// empirical second moment of the inputs is the identity.
fn hadamard_problem(x_star: &ParamVector, noise: f64, seed: u64) -> Result<Objective> {
    let d = 8;
    let h = |r: usize, c: usize| if (r & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
    let mut rng = Rng::new(seed);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for r in 0..d {
        for _ in 0..8 {
            let s = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            let row: Vec<f64> = (0..d).map(|c| s * h(r, c)).collect();
            let b: f64 = row.iter().zip(x_star.iter()).map(|(a, x)| a * x).sum();
            targets.push(b + noise * rng.standard_normal());
            inputs.extend(row);
        }
    }
    Objective::new(ModelKind::LinearRegression, Dataset::new(d, inputs, Targets::Real(targets))?, false)
}

fn criterion_5() -> Result<Outcome> {
    // exhaustive rand-k identities
    let mut rng = Rng::new(505);
    let mut ident_err: f64 = 0.0;
    for d in 4..=8usize {
        for k in 1..=d {
            let x = gaussian(&mut rng, d, 1.0);
            let (mut mean_out, mut err, mut count) = (vec![0.0; d], 0.0, 0.0);
            for mask in 0u32..(1 << d) {
                if mask.count_ones() as usize != k {
                    continue;
                }
                let kept: Vec<usize> = (0..d).filter(|i| mask >> i & 1 == 1).collect();
                let y = rand_k_apply(&x, &kept, k);
                for i in 0..d {
                    mean_out[i] += y[i];
                }
                err += y.dist_sq(&x)?;
                count += 1.0;
            }
            let omega = d as f64 / k as f64 - 1.0;
            for i in 0..d {
                ident_err = ident_err.max((mean_out[i] / count - x[i]).abs());
            }
            ident_err = ident_err.max((err / count - omega * x.norm_sq()).abs() / x.norm_sq());
        }
    }

    // plateau scaling with ||x*||^2 at sigma*^2 = 0
    let d = 8;
    let u = unit(&mut Rng::new(506), d);
    let compressor = Compressor::rand_k(d, d / 2)?;
    let steps = 20_000;
    let plateau = |scale: f64| -> Result<f64> {
        let x_star = u.scaled(scale);
        let obj = hadamard_problem(&x_star, 0.0, 507)?;
        let c = solve_linear_regression(&obj)?;
        let schedule = RunSchedule::new(steps, 32, 1.0 / c.l_full, Mode::CompressedKd(compressor.clone()), 0.0);
        let init = u.scaled(2.0);
        let runs = (0..4)
            .map(|seed| tail_error(&obj, &schedule, &init, TeacherSource::None, seed, &c.x_star))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&runs))
    };
    let (p0, p1, p4) = (plateau(0.0)?, plateau(1.0)?, plateau(4.0)?);
    let scaling = p4 / p1;

    // distillation under compression with sampling noise
    let x_star = u.scaled(1.0);
    let obj = hadamard_problem(&x_star, 0.5, 508)?;
    let c = solve_linear_regression(&obj)?;
    let gamma = 1.0 / c.l_full;
    let teacher = make_teacher(&obj, &c, 1e-4 * c.f_star, &gaussian(&mut Rng::new(509), d, 1.0))?;
    let stats = TeacherStats::compute(&obj, &c.x_star, &teacher)?;
    let lambda = optimal_lambda_for(2.0 * c.mu * gamma, &stats)?.clamped();
    let init = ParamVector::zeros(d);
    let (mut sgd, mut kd) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let s = RunSchedule::new(steps, 32, gamma, Mode::CompressedKd(compressor.clone()), 0.0);
        sgd.push(tail_error(&obj, &s, &init, TeacherSource::None, seed, &c.x_star)?);
        let s = RunSchedule::new(steps, 32, gamma, Mode::CompressedKd(compressor.clone()), lambda);
        kd.push(tail_error(&obj, &s, &init, TeacherSource::Fixed(teacher.clone()), seed, &c.x_star)?);
    }
    let (m_sgd, m_kd) = (mean(&sgd), mean(&kd));
    let passed = ident_err <= 1e-12 && p0 <= 1e-8 && (8.0..=32.0).contains(&scaling) && m_kd <= m_sgd;
    outcome(
        passed,
        format!(
            "rand-k identities err {ident_err:.1e} (tol 1e-12); plateaus |x*|=0:{p0:.1e} 1:{p1:.3e} 4:{p4:.3e}, \
             ratio {scaling:.2} (in [8,32]); compressed kd(lambda={lambda:.3}) {m_kd:.3e} <= compressed sgd {m_sgd:.3e}"
        ),
    )
}

// ------------------------------------------------------------ criterion 6

fn mnist_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os("KDVR_MNIST_DIR")?);
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

fn idx_spec(dir: &Path, prefix: &str) -> DatasetSpec {
    DatasetSpec {
        source: Source::IdxPair {
            images: dir.join(format!("{prefix}-images-idx3-ubyte")),
            labels: dir.join(format!("{prefix}-labels-idx1-ubyte")),
        },
        normalization: Normalization::Scale01,
        subset: None,
    }
}

/// Softmax stand-in for the MNIST linear model: overlapping Gaussian classes.
fn standin_classification() -> Result<Objective> {
    let spec = DatasetSpec {
        source: Source::Synthetic {
            kind: SynthKind::GaussianClasses { classes: 10 },
            n: 1000,
            d: 32,
            noise: 3.0,
            seed: 606,
        },
        normalization: Normalization::Standardize,
        subset: None,
    };
    Objective::new(ModelKind::SoftmaxLinear { classes: 10 }, load(&spec)?.dataset, true)
}

fn criterion_6() -> Result<Outcome> {
    let (obj, test, seeds, grid, anchor_set) = match mnist_dir() {
        Some(dir) => {
            let train = load(&idx_spec(&dir, "train"))?.dataset;
            let test = load(&idx_spec(&dir, "t10k"))?.dataset;
            let obj = Objective::new(ModelKind::SoftmaxLinear { classes: 10 }, train, true)?;
            let test = obj.with_data(test)?;
            (obj, Some(test), vec![0u64], vec![0.0, 0.2, 0.5, 0.8, 1.0], true)
        }
        None => (standin_classification()?, None, vec![0u64, 1, 2], DEFAULT_LAMBDA_GRID.to_vec(), false),
    };
    let epochs = 100;
    let steps = epochs * obj.len().div_ceil(10) as u64;
    let init = ParamVector::zeros(obj.param_dim());
    let sgd_teacher = resolve_teacher(
        &obj,
        &TeacherSpec::SgdRun {
            epochs,
            gamma: 0.05,
            batch_size: 10,
            seed: 6000,
        },
        &init,
    )?;
    let teacher_acc = match &sgd_teacher {
        TeacherSource::Fixed(t) => obj.accuracy(t)?.unwrap_or(f64::NAN),
        _ => unreachable!(),
    };
    let reference = resolve_teacher(&obj, &TeacherSpec::Reference { iterations: 20_000 }, &init)?;
    let sweep = |teacher: TeacherSource| -> Result<Vec<kdvr_core::experiment::LambdaSummary>> {
        let runs = Sweep {
            obj: &obj,
            test: test.as_ref(),
            schedule: RunSchedule::new(steps, 10, 0.05, Mode::Kd, 0.0),
            lambdas: grid.clone(),
            seeds: seeds.clone(),
            init: init.clone(),
            teacher,
        }
        .run()?;
        Ok(summarize(&runs, 10))
    };
    let with_sgd = sweep(sgd_teacher)?;
    let with_ref = sweep(reference)?;
    let base = with_sgd.iter().find(|s| s.lambda == 0.0).expect("grid has 0").min_loss;
    let improving: Vec<f64> = with_sgd
        .iter()
        .filter(|s| s.lambda > 0.0 && s.min_loss < base)
        .map(|s| s.lambda)
        .collect();
    let best_ref = best_lambda(&with_ref).unwrap_or(f64::NAN);
    let anchor_ok = !anchor_set || (teacher_acc - 0.92).abs() <= 0.01;
    let passed = !improving.is_empty() && best_ref >= 0.8 && anchor_ok;
    outcome(
        passed,
        format!(
            "{}; SGD teacher train acc {:.2}% ({}); lambda=0 min loss {base:.5}, lower with lambda in {improving:?}; \
             best lambda with reference teacher {best_ref} (>= 0.8)",
            if anchor_set { "MNIST" } else { "synthetic stand-in (MNIST files absent)" },
            100.0 * teacher_acc,
            if anchor_set { "anchor 92 +- 1.0" } else { "accuracy anchor skipped" },
        ),
    )
}

// ------------------------------------------------------------ criterion 7

fn criterion_7() -> Result<Outcome> {
    let q = quadratic_benchmark()?;
    let gamma = 1.0 / (8.0 * q.c.l_expected);
    let init = ParamVector::zeros(q.obj.param_dim());
    let teacher = resolve_teacher(
        &q.obj,
        &TeacherSpec::SgdRun {
            epochs: 100,
            gamma,
            batch_size: 1,
            seed: 7000,
        },
        &init,
    )?;
    let epochs = 40u64;
    let steps = epochs * q.obj.len() as u64;
    let lambda = 0.5;
    let seeds = 5;
    let collect = |mode: Mode, lambda: f64, teacher: TeacherSource| -> Result<(Vec<f64>, f64)> {
        let mut var = vec![0.0; epochs as usize];
        let mut tail = 0.0;
        for seed in 0..seeds {
            let mut s = RunSchedule::new(steps, 1, gamma, mode.clone(), lambda);
            s.track_variance = true;
            let out = run(
                RunSetup {
                    obj: &q.obj,
                    test: None,
                    init: init.clone(),
                    teacher: teacher.clone(),
                    seed,
                },
                &s,
            )?;
            for (v, r) in var.iter_mut().zip(&out.trace) {
                *v += r.grad_variance.expect("tracked") / seeds as f64;
            }
            let last = &out.trace[out.trace.len() - 5..];
            tail += last.iter().map(|r| r.full_loss).sum::<f64>() / 5.0 / seeds as f64;
        }
        Ok((var, tail))
    };
    let (v_sgd, _) = collect(Mode::Sgd, 0.0, TeacherSource::None)?;
    let (v_kd, loss_kd) = collect(Mode::Kd, lambda, teacher.clone())?;
    let (v_ukd, loss_ukd) = collect(Mode::UnbiasedKd, lambda, teacher)?;
    let frac = |v: &[f64]| v.iter().zip(&v_sgd).filter(|(a, b)| a <= b).count() as f64 / v.len() as f64;
    let (f_kd, f_ukd) = (frac(&v_kd), frac(&v_ukd));
    let passed = f_kd >= 0.9 && f_ukd >= 0.9 && loss_ukd <= loss_kd;
    outcome(
        passed,
        format!(
            "epochs with variance <= sgd: kd {:.0}%, unbiased kd {:.0}% (>= 90%); final-epoch variance sgd {:.3e} kd {:.3e} \
             unbiased {:.3e}; final train loss unbiased {loss_ukd:.6} <= kd {loss_kd:.6}",
            100.0 * f_kd,
            100.0 * f_ukd,
            v_sgd[v_sgd.len() - 1],
            v_kd[v_kd.len() - 1],
            v_ukd[v_ukd.len() - 1]
        ),
    )
}

// ------------------------------------------------------------ criterion 8

/// Composite loss of the one-hidden-layer network on one lifted sample.
fn mlp_loss(a: &[f64], label: usize, x: &[f64], t: &[f64], lambda: f64, hidden: usize, classes: usize) -> f64 {
    let w = a.len();
    let logits = |p: &[f64]| -> Vec<f64> {
        let h: Vec<f64> = (0..hidden)
            .map(|j| (0..w).map(|i| p[j * w + i] * a[i]).sum::<f64>().max(0.0))
            .collect();
        let off = hidden * w;
        (0..classes)
            .map(|k| {
                let row = &p[off + k * (hidden + 1)..off + (k + 1) * (hidden + 1)];
                row[..hidden].iter().zip(&h).map(|(u, v)| u * v).sum::<f64>() + row[hidden]
            })
            .collect()
    };
    let z = logits(x);
    let pt = softmax(&logits(t));
    let soft: Vec<f64> = (0..classes)
        .map(|k| (1.0 - lambda) * f64::from(u8::from(k == label)) + lambda * pt[k])
        .collect();
    log_sum_exp(&z) - soft.iter().zip(&z).map(|(s, v)| s * v).sum::<f64>()
}

fn criterion_8() -> Result<Outcome> {
    let (hidden, classes) = (16, 3);
    let (data, _) = synth(SynthKind::GaussianClasses { classes }, 300, 20, 1.5, 808)?;
    let obj = Objective::new(ModelKind::MlpRelu { hidden, classes }, data, true)?;
    let mut rng = Rng::new(808);
    let init = obj.init_params(&mut rng);

    // finite differences of the composite loss against the exact network gradient
    let labels = match obj.data().targets() {
        Targets::Classes { labels, .. } => labels.clone(),
        _ => unreachable!(),
    };
    let mut fd_err: f64 = 0.0;
    for _ in 0..30 {
        let x = obj.init_params(&mut rng);
        let t = obj.init_params(&mut rng);
        let lambda = rng.uniform();
        let i = rng.index(obj.len());
        let g = true_kd_grad(&obj, &x, &KdConfig::new(lambda, 1.0, t.clone(), 1.0)?, i)?;
        let a = obj.lifted(i).to_vec();
        let fd = central_difference(|p| mlp_loss(&a, labels[i], p, &t, lambda, hidden, classes), &x, 1e-6);
        fd_err = fd_err.max(rel_err(&g, &fd));
    }

    // SGD teacher, then students started at the teacher
    let teacher = match resolve_teacher(
        &obj,
        &TeacherSpec::SgdRun {
            epochs: 30,
            gamma: 0.05,
            batch_size: 10,
            seed: 8000,
        },
        &init,
    )? {
        TeacherSource::Fixed(t) => t,
        _ => unreachable!(),
    };
    let lambdas = [0.1, 0.5, 0.9];
    let epochs = 20u64;
    let mut cosines = Vec::new();
    let mut finals = Vec::new();
    for &lambda in &lambdas {
        let mut s = RunSchedule::new(epochs * 30, 10, 0.05, Mode::Kd, lambda);
        s.form = DistillationForm::Network;
        s.track_kd_gap = true;
        let mut acc = 0.0;
        let seeds = 3;
        for seed in 0..seeds {
            let out = run(
                RunSetup {
                    obj: &obj,
                    test: None,
                    init: teacher.clone(),
                    teacher: TeacherSource::Fixed(teacher.clone()),
                    seed,
                },
                &s,
            )?;
            acc += out.trace.last().and_then(|r| r.cosine_mean).unwrap_or(f64::NAN) / seeds as f64;
            if seed == 0 {
                finals.push(out.final_x);
            }
        }
        cosines.push(acc);
    }
    let ordered = cosines[0] > cosines[1] && cosines[1] > cosines[2];

    // gap linear in lambda at a fixed state
    let batch = Minibatch::new((0..10).collect(), obj.len())?;
    let mut lin_err: f64 = 0.0;
    for x in &finals {
        let unit_gap = approx_gap_stats(&obj, x, &teacher, 1.0, &batch)?.l2;
        for &lambda in &lambdas {
            let l2 = approx_gap_stats(&obj, x, &teacher, lambda, &batch)?.l2;
            lin_err = lin_err.max((l2 - lambda * unit_gap).abs() / unit_gap);
        }
    }
    let passed = ordered && lin_err <= 1e-10 && fd_err <= 1e-5;
    outcome(
        passed,
        format!(
            "final-epoch cosine lambda=0.1:{:.6} 0.5:{:.6} 0.9:{:.6} (decreasing); gap linearity err {lin_err:.1e} \
             (tol 1e-10); network gradient vs finite differences {fd_err:.1e} (tol 1e-5)",
            cosines[0], cosines[1], cosines[2]
        ),
    )
}

// ------------------------------------------------------------ criterion 9

fn criterion_9() -> Result<Outcome> {
    let obj = standin_classification()?;
    let init = ParamVector::zeros(obj.param_dim());
    let teacher = resolve_teacher(&obj, &TeacherSpec::Reference { iterations: 20_000 }, &init)?;
    let sparsities = [0.25, 0.5, 0.75];
    let steps = 100 * obj.len().div_ceil(10) as u64;
    let seeds = 5u64;
    let lambda = 0.5;
    let mut votes = 0;
    let mut mean_gain = vec![0.0; sparsities.len()];
    for seed in 0..seeds {
        let mut gains = Vec::new();
        for (j, &s) in sparsities.iter().enumerate() {
            let mask = Compressor::random_mask(obj.param_dim(), s, &mut Rng::new(9000 + seed).substream(j as u64))?;
            let min_loss = |lambda: f64, teacher: TeacherSource| -> Result<f64> {
                let sched = RunSchedule::new(steps, 10, 0.05, Mode::CompressedKd(mask.clone()), lambda);
                let out = run(
                    RunSetup {
                        obj: &obj,
                        test: None,
                        init: init.clone(),
                        teacher,
                        seed,
                    },
                    &sched,
                )?;
                Ok(out.min_full_loss().unwrap_or(f64::INFINITY))
            };
            let gain = min_loss(0.0, TeacherSource::None)? - min_loss(lambda, teacher.clone())?;
            mean_gain[j] += gain / seeds as f64;
            gains.push(gain);
        }
        let ok = gains.iter().all(|&g| g > 0.0) && gains.windows(2).all(|w| w[1] <= w[0]);
        votes += usize::from(ok);
    }
    let passed = 2 * votes > seeds as usize;
    outcome(
        passed,
        format!(
            "fixed-mask kd improvement over sgd (mean min-loss gain) 25%:{:.4e} 50%:{:.4e} 75%:{:.4e}; \
             positive and nonincreasing in {votes}/{seeds} seeds",
            mean_gain[0], mean_gain[1], mean_gain[2]
        ),
    )
}

// ----------------------------------------------------------- criterion 10

fn traces_bytes(dir: &Path, tag: &str) -> Result<Vec<Vec<u8>>> {
    let obj = standin_classification()?;
    let init = ParamVector::zeros(obj.param_dim());
    let teacher = resolve_teacher(
        &obj,
        &TeacherSpec::SgdRun {
            epochs: 3,
            gamma: 0.05,
            batch_size: 10,
            seed: 1,
        },
        &init,
    )?;
    let mut schedule = RunSchedule::new(5 * 100, 10, 0.05, Mode::Kd, 0.0);
    schedule.track_variance = true;
    let runs = Sweep {
        obj: &obj,
        test: None,
        schedule,
        lambdas: vec![0.0, 0.5, 1.0],
        seeds: vec![3, 4],
        init: init.clone(),
        teacher,
    }
    .run()?;
    let mut out = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let p = dir.join(format!("{tag}-{i}.csv"));
        write_trace(&r.output.trace, &p)?;
        out.push(std::fs::read(&p)?);
    }
    // a compressed run, whose randomness also drives the iterate
    let q = hadamard_problem(&ParamVector::new(vec![1.0; 8]), 0.5, 10)?;
    let s = RunSchedule::new(2_000, 8, 0.25, Mode::CompressedKd(Compressor::rand_k(8, 3)?), 0.0);
    let o = run(
        RunSetup {
            obj: &q,
            test: None,
            init: ParamVector::zeros(8),
            teacher: TeacherSource::None,
            seed: 10,
        },
        &s,
    )?;
    let p = dir.join(format!("{tag}-compressed.csv"));
    write_trace(&o.trace, &p)?;
    out.push(std::fs::read(&p)?);
    // and the dataset writer
    let p = dir.join(format!("{tag}-data.csv"));
    write_csv(obj.data(), &p)?;
    out.push(std::fs::read(&p)?);
    Ok(out)
}

fn criterion_10() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let a = traces_bytes(dir.path(), "a")?;
    let b = traces_bytes(dir.path(), "b")?;
    let identical = a == b && a.iter().all(|f| !f.is_empty());
    let rows: usize = a.iter().map(|f| f.iter().filter(|&&c| c == b'\n').count()).sum();
    outcome(
        identical,
        format!("{} files ({rows} lines) written twice from the same seeds: byte-identical={identical}", a.len()),
    )
}

// ---------------------------------------------------------------- driver

type Check = fn() -> Result<Outcome>;

fn main() {
    let criteria: [(u32, &str, Check); 10] = [
        (1, "distillation gradient exactness", criterion_1),
        (2, "optimal weight and reduction ratio", criterion_2),
        (3, "partial variance reduction", criterion_3),
        (4, "phase halving with teacher refresh", criterion_4),
        (5, "compressed iterates", criterion_5),
        (6, "lambda sweep shape on a linear classifier", criterion_6),
        (7, "gradient variance per epoch", criterion_7),
        (8, "network gradient approximation", criterion_8),
        (9, "fixed-mask pruning", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let results: Vec<(u32, &str, std::result::Result<Outcome, String>, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = criteria
            .iter()
            .filter(|(id, _, _)| filter.is_empty() || filter.contains(id))
            .map(|&(id, name, check)| {
                scope.spawn(move || {
                    let start = Instant::now();
                    let r = check().map_err(|e| e.to_string());
                    (id, name, r, start.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| (0, "panicked", Err("criterion panicked".into()), 0.0))
            })
            .collect()
    });
    let mut failed = 0;
    for (id, name, r, secs) in &results {
        match r {
            Ok(o) => {
                if !o.passed {
                    failed += 1;
                }
                println!(
                    "criterion {id:>2} {} {name}: {} [{secs:.1}s]",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.detail
                );
            }
            Err(e) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name}: error: {e} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
