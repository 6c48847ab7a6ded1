//! Distillation gradients, soft labels, and the optimal-weight machinery.
//!
//! For self-distillation with linear, logistic and softmax models the
//! per-sample gradient of the composite loss
//! `(1 - lambda) l(phi_x, b) + lambda l(phi_x, phi_theta)` is exactly
//! `grad f_n(x) - lambda grad f_n(theta)`. For a network the exact gradient
//! back-propagates the soft-label residual through the student's Jacobian;
//! [`approx_kd_grad`] keeps the linear-model form.
//!
//! The teacher statistics are exact expectations over single-sample
//! minibatches, i.e. plain averages over the `N` samples.

use crate::error::{Error, Result};
use crate::linalg::{dot, ParamVector};
use crate::objectives::{ModelOutput, Objective};
use crate::sampling::Minibatch;

/// Distillation weight, step size, teacher and the neighborhood constant `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct KdConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub teacher: ParamVector,
    pub c: f64,
}

impl KdConfig {
    pub fn new(lambda: f64, gamma: f64, teacher: ParamVector, c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::invalid(format!("step size {gamma} must be positive")));
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::invalid(format!("constant c = {c} must be positive")));
        }
        if !teacher.is_finite() {
            return Err(Error::invalid("teacher has non-finite entries"));
        }
        Ok(KdConfig {
            lambda,
            gamma,
            teacher,
            c,
        })
    }

    /// Same config with a different weight (unchecked range; used for
    /// evaluating `N(lambda)` off the unit interval).
    pub fn with_lambda(&self, lambda: f64) -> KdConfig {
        KdConfig {
            lambda,
            ..self.clone()
        }
    }

    pub fn c_gamma(&self) -> f64 {
        self.c * self.gamma
    }

    fn check_teacher(&self, obj: &Objective) -> Result<()> {
        if self.teacher.len() != obj.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: obj.param_dim(),
                found: self.teacher.len(),
            });
        }
        Ok(())
    }
}

/// Standard choices of `c` in `N(lambda)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeighborhoodConstant {
    /// `mu / 4`, strongly quasi-convex analysis.
    QuarterMu,
    /// `L`, PL analysis.
    Smoothness,
    /// `2 mu`, compressed-iterate analysis.
    TwiceMu,
    Value(f64),
}

impl NeighborhoodConstant {
    pub fn resolve(self, mu: f64, l_full: f64) -> f64 {
        match self {
            NeighborhoodConstant::QuarterMu => mu / 4.0,
            NeighborhoodConstant::Smoothness => l_full,
            NeighborhoodConstant::TwiceMu => 2.0 * mu,
            NeighborhoodConstant::Value(c) => c,
        }
    }
}

/// `s = (1 - lambda) b + lambda t`.
pub fn soft_label(b: &ModelOutput, teacher_out: &ModelOutput, lambda: f64) -> Result<ModelOutput> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    match (b, teacher_out) {
        (ModelOutput::Scalar(b), ModelOutput::Scalar(t)) => {
            Ok(ModelOutput::Scalar((1.0 - lambda) * b + lambda * t))
        }
        (ModelOutput::Distribution(b), ModelOutput::Distribution(t)) => {
            if b.len() != t.len() {
                return Err(Error::DimensionMismatch {
                    expected: b.len(),
                    found: t.len(),
                });
            }
            Ok(ModelOutput::Distribution(
                b.iter()
                    .zip(t)
                    .map(|(b, t)| (1.0 - lambda) * b + lambda * t)
                    .collect(),
            ))
        }
        _ => Err(Error::invalid("label and teacher output shapes differ")),
    }
}

/// Composite self-distillation loss of sample `n`:
/// `(1 - lambda) l(phi_x(a_n), b_n) + lambda l(phi_x(a_n), phi_theta(a_n))`.
pub fn distillation_loss(
    obj: &Objective,
    x: &[f64],
    teacher: &[f64],
    lambda: f64,
    n: usize,
) -> Result<f64> {
    let b = obj.target(n);
    let t = obj.predict(teacher, n)?;
    Ok((1.0 - lambda) * obj.loss_against(x, n, &b)? + lambda * obj.loss_against(x, n, &t)?)
}

/// `grad f_n(x) - lambda grad f_n(theta)`; exact for the linear model kinds.
pub fn distillation_grad(obj: &Objective, x: &ParamVector, cfg: &KdConfig, n: usize) -> Result<ParamVector> {
    if obj.kind().is_mlp() {
        return Err(Error::InvalidKind {
            op: "distillation_grad",
            kind: obj.kind().name(),
        });
    }
    linearized(obj, x, cfg, n)
}

fn linearized(obj: &Objective, x: &ParamVector, cfg: &KdConfig, n: usize) -> Result<ParamVector> {
    cfg.check_teacher(obj)?;
    let mut g = obj.grad(x, n)?;
    g.add_scaled(-cfg.lambda, &obj.grad(&cfg.teacher, n)?)?;
    Ok(g)
}

/// Exact network distillation gradient
/// `Jpsi_n(x) (grad phi_n(psi_n(x)) - lambda grad phi_n(psi_n(theta)))`.
pub fn true_kd_grad(obj: &Objective, x: &ParamVector, cfg: &KdConfig, n: usize) -> Result<ParamVector> {
    require_mlp(obj, "true_kd_grad")?;
    network_grad(obj, x, cfg, n)
}

/// Linear-model form applied to a network: `grad f_n(x) - lambda grad f_n(theta)`.
pub fn approx_kd_grad(obj: &Objective, x: &ParamVector, cfg: &KdConfig, n: usize) -> Result<ParamVector> {
    require_mlp(obj, "approx_kd_grad")?;
    linearized(obj, x, cfg, n)
}

fn require_mlp(obj: &Objective, op: &'static str) -> Result<()> {
    if !obj.kind().is_mlp() {
        return Err(Error::InvalidKind {
            op,
            kind: obj.kind().name(),
        });
    }
    Ok(())
}

fn network_grad(obj: &Objective, x: &ParamVector, cfg: &KdConfig, n: usize) -> Result<ParamVector> {
    cfg.check_teacher(obj)?;
    let mut out = vec![0.0; obj.param_dim()];
    accumulate_network(obj, x, &cfg.teacher, cfg.lambda, n, 1.0, &mut out)?;
    Ok(ParamVector::new(out))
}

fn accumulate_network(
    obj: &Objective,
    x: &[f64],
    teacher: &[f64],
    lambda: f64,
    n: usize,
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    let b = obj.target(n);
    let fx = obj.forward(x, n)?;
    let ft = obj.forward(teacher, n)?;
    let mut dz = obj.logit_grad(&fx.logits, &b)?;
    let dt = obj.logit_grad(&ft.logits, &b)?;
    for (a, t) in dz.iter_mut().zip(&dt) {
        *a -= lambda * t;
    }
    obj.logit_vjp(x, n, &fx, &dz, scale, out)
}

/// Which distillation gradient drives a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistillationForm {
    /// `grad f_xi(x) - lambda grad f_xi(theta)`.
    #[default]
    Linearized,
    /// Back-propagate the soft-label residual through the student.
    Network,
}

/// Minibatch distillation direction; both gradients use the same batch.
pub fn kd_direction(
    obj: &Objective,
    x: &ParamVector,
    teacher: &ParamVector,
    lambda: f64,
    batch: &Minibatch,
    form: DistillationForm,
) -> Result<ParamVector> {
    if teacher.len() != obj.param_dim() {
        return Err(Error::DimensionMismatch {
            expected: obj.param_dim(),
            found: teacher.len(),
        });
    }
    match form {
        DistillationForm::Linearized => {
            let mut g = obj.minibatch_grad(x, batch)?;
            g.add_scaled(-lambda, &obj.minibatch_grad(teacher, batch)?)?;
            Ok(g)
        }
        DistillationForm::Network => {
            if batch.is_empty() {
                return Err(Error::invalid("empty minibatch"));
            }
            let mut out = vec![0.0; obj.param_dim()];
            let w = batch.weight();
            for &n in batch.indices() {
                accumulate_network(obj, x, teacher, lambda, n, w, &mut out)?;
            }
            Ok(ParamVector::new(out))
        }
    }
}

/// Exact moments of the stochastic gradients at the teacher and the optimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherStats {
    /// `||grad f(theta)||^2`
    pub full_grad_norm_sq: f64,
    /// `E ||grad f_xi(theta)||^2`
    pub second_moment: f64,
    /// `E <grad f_xi(x*), grad f_xi(theta)>`
    pub cross_moment: f64,
    /// `E ||grad f_xi(x*)||^2`
    pub sigma_star_sq: f64,
}

impl TeacherStats {
    /// Validates the moment inequalities up to a relative rounding slack.
    pub fn new(full_grad_norm_sq: f64, second_moment: f64, cross_moment: f64, sigma_star_sq: f64) -> Result<Self> {
        let slack = 1e-12 * (1.0 + second_moment.abs() + sigma_star_sq.abs());
        let ok = full_grad_norm_sq >= 0.0
            && sigma_star_sq >= 0.0
            && second_moment + slack >= full_grad_norm_sq
            && cross_moment.abs() <= (second_moment * sigma_star_sq).sqrt() + slack;
        if !ok || ![full_grad_norm_sq, second_moment, cross_moment, sigma_star_sq]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid(format!(
                "inconsistent teacher statistics (G={full_grad_norm_sq}, M={second_moment}, X={cross_moment}, s2={sigma_star_sq})"
            )));
        }
        Ok(TeacherStats {
            full_grad_norm_sq,
            second_moment,
            cross_moment,
            sigma_star_sq,
        })
    }

    /// Enumerates all `N` single-sample gradients at `x_star` and `teacher`.
    pub fn compute(obj: &Objective, x_star: &ParamVector, teacher: &ParamVector) -> Result<Self> {
        let n = obj.len();
        let mut full = vec![0.0; obj.param_dim()];
        let mut second = 0.0;
        let mut cross = 0.0;
        let mut sigma = 0.0;
        for i in 0..n {
            let gt = obj.grad(teacher, i)?;
            let gs = obj.grad(x_star, i)?;
            second += dot(&gt, &gt);
            cross += dot(&gs, &gt);
            sigma += dot(&gs, &gs);
            crate::linalg::axpy_in_place(1.0, &gt, &mut full);
        }
        let inv = 1.0 / n as f64;
        for v in &mut full {
            *v *= inv;
        }
        TeacherStats::new(dot(&full, &full), second * inv, cross * inv, sigma * inv)
    }

    /// Signal-to-noise ratio `||grad f(theta)||^2 / E||grad f_xi(theta)||^2`.
    pub fn beta(&self) -> Result<f64> {
        if self.second_moment <= 0.0 {
            return Err(Error::UndefinedRatio(
                "zero second moment of teacher gradients".into(),
            ));
        }
        Ok((self.full_grad_norm_sq / self.second_moment).clamp(0.0, 1.0))
    }

    /// Variance of the teacher's stochastic gradients, `M - G`.
    pub fn teacher_variance(&self) -> f64 {
        self.second_moment - self.full_grad_norm_sq
    }

    /// Correlation of the stochastic gradients at `x*` and `theta`, using
    /// `grad f(x*) = 0` so the covariance is the plain cross moment.
    pub fn rho(&self) -> Result<f64> {
        let var_t = self.teacher_variance();
        if self.sigma_star_sq <= 0.0 || var_t <= 1e-14 * self.second_moment {
            return Err(Error::UndefinedRatio(
                "zero gradient variance at x* or at the teacher".into(),
            ));
        }
        let rho_sq = self.cross_moment * self.cross_moment / (self.sigma_star_sq * var_t);
        Ok((rho_sq.sqrt() * self.cross_moment.signum()).clamp(-1.0, 1.0))
    }

    /// `N(lambda) = lambda^2 G + c gamma (s2 - 2 lambda X + lambda^2 M)`.
    pub fn neighborhood(&self, lambda: f64, c_gamma: f64) -> f64 {
        lambda * lambda * self.full_grad_norm_sq
            + c_gamma
                * (self.sigma_star_sq - 2.0 * lambda * self.cross_moment
                    + lambda * lambda * self.second_moment)
    }
}

/// `beta(theta)` by enumeration over the dataset.
pub fn beta_snr(obj: &Objective, teacher: &ParamVector) -> Result<f64> {
    let n = obj.len();
    let mut full = vec![0.0; obj.param_dim()];
    let mut second = 0.0;
    for i in 0..n {
        let g = obj.grad(teacher, i)?;
        second += dot(&g, &g);
        crate::linalg::axpy_in_place(1.0, &g, &mut full);
    }
    let inv = 1.0 / n as f64;
    for v in &mut full {
        *v *= inv;
    }
    TeacherStats {
        full_grad_norm_sq: dot(&full, &full),
        second_moment: second * inv,
        cross_moment: 0.0,
        sigma_star_sq: 0.0,
    }
    .beta()
}

/// `rho(x*, theta)` by enumeration over the dataset.
pub fn rho_correlation(obj: &Objective, x_star: &ParamVector, teacher: &ParamVector) -> Result<f64> {
    TeacherStats::compute(obj, x_star, teacher)?.rho()
}

pub fn neighborhood_n(lambda: f64, cfg: &KdConfig, stats: &TeacherStats) -> f64 {
    stats.neighborhood(lambda, cfg.c_gamma())
}

/// Unconstrained minimizer of `N(lambda)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalLambda {
    pub value: f64,
}

impl OptimalLambda {
    /// Whether plugging the value into a [`KdConfig`] requires clamping.
    pub fn needs_clamp(&self) -> bool {
        !(0.0..=1.0).contains(&self.value)
    }

    pub fn clamped(&self) -> f64 {
        self.value.clamp(0.0, 1.0)
    }
}

/// `lambda* = X / (M + G / (c gamma))`.
pub fn optimal_lambda(cfg: &KdConfig, stats: &TeacherStats) -> Result<OptimalLambda> {
    optimal_lambda_for(cfg.c_gamma(), stats)
}

pub fn optimal_lambda_for(c_gamma: f64, stats: &TeacherStats) -> Result<OptimalLambda> {
    let denom = stats.second_moment + stats.full_grad_norm_sq / c_gamma;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::UndefinedRatio(
            "zero denominator in optimal distillation weight".into(),
        ));
    }
    Ok(OptimalLambda {
        value: stats.cross_moment / denom,
    })
}

/// `N(lambda*)/N(0) = 1 - rho^2 (1 - beta) / (1 + beta / (c gamma))`.
pub fn reduction_ratio(cfg: &KdConfig, stats: &TeacherStats) -> Result<f64> {
    reduction_ratio_for(cfg.c_gamma(), stats)
}

pub fn reduction_ratio_for(c_gamma: f64, stats: &TeacherStats) -> Result<f64> {
    if stats.sigma_star_sq <= 0.0 {
        return Err(Error::UndefinedRatio(
            "sigma*^2 = 0: plain SGD has no noise neighborhood".into(),
        ));
    }
    let beta = stats.beta()?;
    let var_t = stats.teacher_variance();
    // rho^2 (1 - beta) = X^2 / (s2 M); the product stays finite when the
    // teacher gradients have no spread.
    let weighted = if var_t > 0.0 {
        let rho_sq = stats.cross_moment * stats.cross_moment / (stats.sigma_star_sq * var_t);
        rho_sq * (1.0 - beta)
    } else {
        stats.cross_moment * stats.cross_moment / (stats.sigma_star_sq * stats.second_moment)
    };
    Ok(1.0 - weighted / (1.0 + beta / c_gamma))
}

/// The same ratio evaluated as the quotient `N(lambda*) / N(0)`.
pub fn reduction_ratio_direct(c_gamma: f64, stats: &TeacherStats) -> Result<f64> {
    if stats.sigma_star_sq <= 0.0 {
        return Err(Error::UndefinedRatio("sigma*^2 = 0".into()));
    }
    let l = optimal_lambda_for(c_gamma, stats)?.value;
    Ok(stats.neighborhood(l, c_gamma) / stats.neighborhood(0.0, c_gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{Dataset, ModelKind, Targets};

    fn logistic() -> Objective {
        let data = Dataset::new(
            2,
            vec![0.5, -1.0, 1.5, 0.2, -0.7, 0.9],
            Targets::Real(vec![1.0, 0.0, 1.0]),
        )
        .unwrap();
        Objective::new(ModelKind::BinaryLogistic, data, true).unwrap()
    }

    #[test]
    fn soft_label_endpoints_and_mix() {
        let b = ModelOutput::Distribution(vec![1.0, 0.0]);
        let t = ModelOutput::Distribution(vec![0.8, 0.2]);
        assert_eq!(soft_label(&b, &t, 0.0).unwrap(), b);
        assert_eq!(soft_label(&b, &t, 1.0).unwrap(), t);
        assert_eq!(
            soft_label(&b, &t, 0.5).unwrap(),
            ModelOutput::Distribution(vec![0.9, 0.1])
        );
        assert!(soft_label(&b, &t, 1.5).is_err());
    }

    #[test]
    fn lambda_zero_is_plain_grad() {
        let obj = logistic();
        let x = ParamVector::new(vec![0.1, -0.3, 0.2]);
        let cfg = KdConfig::new(0.0, 0.1, ParamVector::new(vec![1.0, 2.0, 3.0]), 1.0).unwrap();
        assert_eq!(distillation_grad(&obj, &x, &cfg, 1).unwrap(), obj.grad(&x, 1).unwrap());
    }

    #[test]
    fn teacher_equal_student_cancels() {
        let obj = logistic();
        let x = ParamVector::new(vec![0.1, -0.3, 0.2]);
        let cfg = KdConfig::new(1.0, 0.1, x.clone(), 1.0).unwrap();
        let g = distillation_grad(&obj, &x, &cfg, 2).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn network_ops_reject_linear_kinds() {
        let obj = logistic();
        let x = ParamVector::zeros(3);
        let cfg = KdConfig::new(0.5, 0.1, x.clone(), 1.0).unwrap();
        assert!(matches!(
            true_kd_grad(&obj, &x, &cfg, 0),
            Err(Error::InvalidKind { .. })
        ));
        assert!(approx_kd_grad(&obj, &x, &cfg, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let t = ParamVector::zeros(2);
        assert!(KdConfig::new(-0.1, 0.1, t.clone(), 1.0).is_err());
        assert!(KdConfig::new(0.5, 0.0, t.clone(), 1.0).is_err());
        assert!(KdConfig::new(0.5, 0.1, t, 0.0).is_err());
    }

    #[test]
    fn beta_one_for_identical_sample_gradients() {
        let data = Dataset::new(1, vec![1.0, 1.0, 1.0], Targets::Real(vec![0.0, 0.0, 0.0])).unwrap();
        let obj = Objective::new(ModelKind::LinearRegression, data, false).unwrap();
        let b = beta_snr(&obj, &ParamVector::new(vec![2.0])).unwrap();
        assert!((b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beta_undefined_at_interpolating_optimum() {
        let data = Dataset::new(1, vec![1.0, 2.0], Targets::Real(vec![3.0, 6.0])).unwrap();
        let obj = Objective::new(ModelKind::LinearRegression, data, false).unwrap();
        assert!(matches!(
            beta_snr(&obj, &ParamVector::new(vec![3.0])),
            Err(Error::UndefinedRatio(_))
        ));
    }

    #[test]
    fn rho_self_and_anti() {
        let s = TeacherStats::new(0.0, 2.5, 2.5, 2.5).unwrap();
        assert_eq!(s.rho().unwrap(), 1.0);
        // grad f_xi(theta) = -grad f_xi(x*) + c with ||c||^2 = 0.7
        let s = TeacherStats::new(0.7, 2.5 + 0.7, -2.5, 2.5).unwrap();
        assert!((s.rho().unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn neighborhood_special_values() {
        let s = TeacherStats::new(0.3, 2.0, 0.8, 1.7).unwrap();
        assert_eq!(s.neighborhood(0.0, 0.05), 0.05 * 1.7);
        let at_opt = TeacherStats::new(0.0, 1.7, 1.7, 1.7).unwrap();
        assert_eq!(at_opt.neighborhood(1.0, 0.05), 0.0);
    }

    #[test]
    fn optimal_lambda_special_values() {
        let at_opt = TeacherStats::new(0.0, 1.7, 1.7, 1.7).unwrap();
        assert_eq!(optimal_lambda_for(0.01, &at_opt).unwrap().value, 1.0);
        assert_eq!(reduction_ratio_for(0.01, &at_opt).unwrap(), 0.0);
        let uncorrelated = TeacherStats::new(0.3, 2.0, 0.0, 1.7).unwrap();
        assert_eq!(optimal_lambda_for(0.01, &uncorrelated).unwrap().value, 0.0);
        assert_eq!(reduction_ratio_for(0.01, &uncorrelated).unwrap(), 1.0);
        let zero = TeacherStats::new(0.0, 0.0, 0.0, 1.0).unwrap();
        assert!(optimal_lambda_for(0.01, &zero).is_err());
        let noiseless = TeacherStats::new(0.1, 0.5, 0.0, 0.0).unwrap();
        assert!(reduction_ratio_for(0.01, &noiseless).is_err());
    }

    #[test]
    fn inconsistent_stats_are_rejected() {
        assert!(TeacherStats::new(2.0, 1.0, 0.0, 1.0).is_err());
        assert!(TeacherStats::new(0.0, 1.0, 5.0, 1.0).is_err());
    }

    #[test]
    fn clamp_flag() {
        assert!(OptimalLambda { value: 1.2 }.needs_clamp());
        assert_eq!(OptimalLambda { value: 1.2 }.clamped(), 1.0);
        assert!(!OptimalLambda { value: 0.4 }.needs_clamp());
    }
}
