//! Ground truth for solvable problems.
//!
//! Least-squares objectives get exact constants: the minimizer from the
//! normal equations, `mu` and `L` from the spectrum of the Hessian
//! `(2/N) A^T A`, and the expected-smoothness constant
//! `2 max_n ||a_n||^2` for uniform single-sample subsampling. Classifiers get
//! a long-run reference solution, labelled as a proxy.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{dot, ParamVector};
use crate::objectives::{ModelKind, Objective, Targets};
use crate::rng::Rng;

/// How trustworthy a set of constants is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Closed form.
    Exact,
    /// Minimizer and constants from a numerical reference run.
    Proxy,
}

impl Provenance {
    pub fn label(&self) -> &'static str {
        match self {
            Provenance::Exact => "exact",
            Provenance::Proxy => "proxy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactConstants {
    pub x_star: ParamVector,
    pub f_star: f64,
    /// Strong convexity (smallest Hessian eigenvalue).
    pub mu: f64,
    /// Smoothness of `f` (largest Hessian eigenvalue).
    pub l_full: f64,
    /// Expected smoothness for single-sample uniform subsampling.
    pub l_expected: f64,
    pub sigma_star_sq: f64,
    pub provenance: Provenance,
    pub rank_deficient: bool,
}

impl ExactConstants {
    /// Expected-smoothness constant for minibatches of `batch` indices drawn
    /// with replacement: `(1 - 1/b) L + (1/b) L_1`.
    pub fn l_expected_for_batch(&self, batch: usize) -> f64 {
        let b = batch.max(1) as f64;
        (1.0 - 1.0 / b) * self.l_full + self.l_expected / b
    }

    /// `sigma*^2 / b` for with-replacement minibatches.
    pub fn sigma_star_sq_for_batch(&self, batch: usize) -> f64 {
        self.sigma_star_sq / batch.max(1) as f64
    }
}

fn design_matrix(obj: &Objective) -> DMatrix<f64> {
    let p = obj.input_width();
    DMatrix::from_fn(obj.len(), p, |r, c| obj.lifted(r)[c])
}

/// `(1/N) A^T A` built with sequential accumulation.
fn gram(obj: &Objective) -> DMatrix<f64> {
    let p = obj.input_width();
    let mut g = DMatrix::zeros(p, p);
    for n in 0..obj.len() {
        let a = obj.lifted(n);
        for i in 0..p {
            for j in i..p {
                g[(i, j)] += a[i] * a[j];
            }
        }
    }
    let inv = 1.0 / obj.len() as f64;
    for i in 0..p {
        for j in i..p {
            g[(i, j)] *= inv;
            g[(j, i)] = g[(i, j)];
        }
    }
    g
}

/// Lower-triangular Cholesky factor; `None` when a pivot falls below
/// `1e-12` times the largest diagonal entry.
fn cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 1e-12 * scale {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = DVector::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Exact constants of a least-squares objective.
///
/// A singular Gram matrix yields [`Error::RankDeficient`] carrying the
/// minimum-norm solution with `mu = 0`.
pub fn solve_linear_regression(obj: &Objective) -> Result<ExactConstants> {
    if obj.kind() != ModelKind::LinearRegression {
        return Err(Error::InvalidKind {
            op: "solve_linear_regression",
            kind: obj.kind().name(),
        });
    }
    let targets = match obj.data().targets() {
        Targets::Real(v) => v,
        Targets::Classes { .. } => unreachable!("validated by Objective::new"),
    };
    let p = obj.input_width();
    let g = gram(obj);
    let mut rhs = DVector::zeros(p);
    for n in 0..obj.len() {
        let a = obj.lifted(n);
        for i in 0..p {
            rhs[i] += a[i] * targets[n];
        }
    }
    rhs /= obj.len() as f64;

    let hessian = &g * 2.0;
    let eig = SymmetricEigen::new(hessian);
    let l_full = eig.eigenvalues.max();
    let mut mu = eig.eigenvalues.min().max(0.0);

    let (x, rank_deficient) = match cholesky(&g) {
        Some(l) => {
            let mut x = cholesky_solve(&l, &rhs);
            // one step of iterative refinement
            let r = &rhs - &g * &x;
            x += cholesky_solve(&l, &r);
            (x, false)
        }
        None => {
            let tol = 1e-12 * l_full.max(f64::MIN_POSITIVE);
            let mut x = DVector::zeros(p);
            for (k, &ev) in eig.eigenvalues.iter().enumerate() {
                if ev > tol {
                    let v = eig.eigenvectors.column(k);
                    // Hessian eigenpairs: Gram eigenvalue is ev / 2.
                    let coef = v.dot(&rhs) / (ev / 2.0);
                    x += v * coef;
                }
            }
            mu = 0.0;
            (x, true)
        }
    };

    let x_star = ParamVector::new(x.iter().copied().collect());
    let l_expected = (0..obj.len())
        .map(|n| 2.0 * dot(obj.lifted(n), obj.lifted(n)))
        .fold(0.0_f64, f64::max);
    let consts = ExactConstants {
        f_star: obj.full_loss(&x_star)?,
        sigma_star_sq: sigma_star_sq(obj, &x_star)?,
        x_star,
        mu,
        l_full,
        l_expected,
        provenance: Provenance::Exact,
        rank_deficient,
    };
    if rank_deficient {
        let rank = eig
            .eigenvalues
            .iter()
            .filter(|&&ev| ev > 1e-12 * l_full)
            .count();
        return Err(Error::RankDeficient {
            rank,
            dim: p,
            min_norm: Box::new(consts),
        });
    }
    Ok(consts)
}

/// `E||grad f_xi(x)||^2` over single samples.
pub fn sigma_star_sq(obj: &Objective, x: &ParamVector) -> Result<f64> {
    let mut acc = 0.0;
    for n in 0..obj.len() {
        let g = obj.grad(x, n)?;
        acc += dot(&g, &g);
    }
    Ok(acc / obj.len() as f64)
}

/// Result of probing the expected-smoothness inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessReport {
    pub samples: usize,
    /// Largest observed `E||g_xi(x) - g_xi(x*)||^2 / (2 (f(x) - f*))`,
    /// a lower bound on the true constant.
    pub max_ratio: f64,
    pub declared: f64,
}

fn smoothness_ratio(obj: &Objective, x: &ParamVector, x_star: &ParamVector, f_star: f64) -> Result<Option<f64>> {
    let gap = obj.full_loss(x)? - f_star;
    let mut lhs = 0.0;
    for n in 0..obj.len() {
        let d = obj.grad(x, n)?.sub(&obj.grad(x_star, n)?)?;
        lhs += d.norm_sq();
    }
    lhs /= obj.len() as f64;
    if gap <= 1e-12 * (1.0 + f_star.abs()) {
        return Ok(None);
    }
    Ok(Some(lhs / (2.0 * gap)))
}

fn random_probe(x_star: &ParamVector, rng: &mut Rng) -> ParamVector {
    let mut u: Vec<f64> = (0..x_star.len()).map(|_| rng.standard_normal()).collect();
    let norm = dot(&u, &u).sqrt().max(f64::MIN_POSITIVE);
    // radius log-uniform in [1e-2, 1e2]
    let r = 10f64.powf(-2.0 + 4.0 * rng.uniform());
    for (ui, xi) in u.iter_mut().zip(x_star.iter()) {
        *ui = xi + r * *ui / norm;
    }
    ParamVector::new(u)
}

/// Checks `E||g_xi(x) - g_xi(x*)||^2 <= 2 Lexp (f(x) - f*)` at random points.
pub fn expected_smoothness_check(
    obj: &Objective,
    constants: &ExactConstants,
    samples: usize,
    rng: &mut Rng,
) -> Result<SmoothnessReport> {
    let mut max_ratio: f64 = 0.0;
    for _ in 0..samples {
        let x = random_probe(&constants.x_star, rng);
        if let Some(r) = smoothness_ratio(obj, &x, &constants.x_star, constants.f_star)? {
            if r > constants.l_expected * (1.0 + 1e-9) {
                return Err(Error::ConstantsInvalid {
                    ratio: r,
                    declared: constants.l_expected,
                    witness: x.into_inner(),
                });
            }
            max_ratio = max_ratio.max(r);
        }
    }
    Ok(SmoothnessReport {
        samples,
        max_ratio,
        declared: constants.l_expected,
    })
}

/// Empirical expected-smoothness constant (max observed ratio) around a
/// reference point, for objectives without a closed form.
pub fn estimate_expected_smoothness(
    obj: &Objective,
    x_ref: &ParamVector,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let f_ref = obj.full_loss(x_ref)?;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..samples {
        let x = random_probe(x_ref, rng);
        if let Some(r) = smoothness_ratio(obj, &x, x_ref, f_ref)? {
            max_ratio = max_ratio.max(r);
        }
    }
    Ok(max_ratio)
}

/// `f(x*) - [f(x) + <grad f(x), x* - x> + (mu/2)||x* - x||^2]`; nonnegative
/// under strong quasi-convexity.
pub fn strong_convexity_slack(obj: &Objective, c: &ExactConstants, x: &ParamVector) -> Result<f64> {
    let g = obj.full_grad(x)?;
    let d = c.x_star.sub(x)?;
    Ok(c.f_star - obj.full_loss(x)? - g.dot(&d)? - 0.5 * c.mu * d.norm_sq())
}

/// `||grad f(x)||^2 - 2 mu (f(x) - f*)`; nonnegative under the PL condition.
pub fn pl_slack(obj: &Objective, c: &ExactConstants, x: &ParamVector) -> Result<f64> {
    let g = obj.full_grad(x)?;
    Ok(g.norm_sq() - 2.0 * c.mu * (obj.full_loss(x)? - c.f_star))
}

/// Per-sample gradients at `x*` and at the teacher, cached for repeated
/// evaluation of `N(lambda)`.
struct NeighborhoodProbe {
    at_opt: Vec<ParamVector>,
    at_teacher: Vec<ParamVector>,
    teacher_full_sq: f64,
    c_gamma: f64,
}

impl NeighborhoodProbe {
    fn new(obj: &Objective, x_star: &ParamVector, teacher: &ParamVector, c_gamma: f64) -> Result<Self> {
        let at_opt = (0..obj.len()).map(|n| obj.grad(x_star, n)).collect::<Result<Vec<_>>>()?;
        let at_teacher = (0..obj.len()).map(|n| obj.grad(teacher, n)).collect::<Result<Vec<_>>>()?;
        let full = obj.full_grad(teacher)?;
        Ok(NeighborhoodProbe {
            at_opt,
            at_teacher,
            teacher_full_sq: full.norm_sq(),
            c_gamma,
        })
    }

    /// `lambda^2 ||grad f(theta)||^2 + c gamma E||g_xi(x*) - lambda g_xi(theta)||^2`
    fn eval(&self, lambda: f64) -> f64 {
        let mut acc = 0.0;
        for (gs, gt) in self.at_opt.iter().zip(&self.at_teacher) {
            let mut s = 0.0;
            for (a, b) in gs.iter().zip(gt.iter()) {
                let d = a - lambda * b;
                s += d * d;
            }
            acc += s;
        }
        lambda * lambda * self.teacher_full_sq + self.c_gamma * acc / self.at_opt.len() as f64
    }
}

/// `N(lambda)` evaluated directly by enumeration.
pub fn neighborhood_by_enumeration(
    obj: &Objective,
    x_star: &ParamVector,
    teacher: &ParamVector,
    c_gamma: f64,
    lambda: f64,
) -> Result<f64> {
    Ok(NeighborhoodProbe::new(obj, x_star, teacher, c_gamma)?.eval(lambda))
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Numerical minimizer of `N(lambda)` over `interval`, independent of the
/// closed form: golden-section search narrows the bracket, then successive
/// parabolic interpolation polishes the minimizer (exact for quadratics up
/// to rounding, so the result is accurate to ~1e-10).
pub fn golden_section_lambda(
    obj: &Objective,
    x_star: &ParamVector,
    teacher: &ParamVector,
    gamma: f64,
    c: f64,
    interval: (f64, f64),
) -> Result<f64> {
    let (mut a, mut b) = interval;
    if !(a < b) {
        return Err(Error::invalid("interval must satisfy lo < hi"));
    }
    let probe = NeighborhoodProbe::new(obj, x_star, teacher, c * gamma)?;
    let f = |l: f64| probe.eval(l);
    let (lo, hi) = interval;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > 1e-4 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    let mut m = 0.5 * (a + b);
    let h = 1e-2;
    for _ in 0..3 {
        let (p, q) = ((m - h).max(lo), (m + h).min(hi));
        if q - p < h {
            break;
        }
        let mid = 0.5 * (p + q);
        let (fp, fm, fq) = (f(p), f(mid), f(q));
        let num = (mid - p).powi(2) * (fm - fq) - (mid - q).powi(2) * (fm - fp);
        let den = (mid - p) * (fm - fq) - (mid - q) * (fm - fp);
        if den == 0.0 || !(fm <= fp.max(fq)) {
            break;
        }
        let next = (mid - 0.5 * num / den).clamp(lo, hi);
        if (next - m).abs() < 1e-13 {
            m = next;
            break;
        }
        m = next;
    }
    Ok(m)
}

/// Teacher `x* + alpha u` with `f(theta) - f* = quality`, `alpha >= 0` found
/// by bisection on the exact objective.
pub fn make_teacher(
    obj: &Objective,
    constants: &ExactConstants,
    quality: f64,
    direction: &ParamVector,
) -> Result<ParamVector> {
    if !(quality >= 0.0) || !quality.is_finite() {
        return Err(Error::invalid(format!("teacher quality {quality} must be >= 0")));
    }
    let norm = direction.norm();
    if direction.len() != constants.x_star.len() {
        return Err(Error::DimensionMismatch {
            expected: constants.x_star.len(),
            found: direction.len(),
        });
    }
    if norm == 0.0 {
        return Err(Error::invalid("direction must be nonzero"));
    }
    if quality == 0.0 {
        return Ok(constants.x_star.clone());
    }
    let u = direction.scaled(1.0 / norm);
    let point = |alpha: f64| -> Result<ParamVector> {
        let mut p = constants.x_star.clone();
        p.add_scaled(alpha, &u)?;
        Ok(p)
    };
    let gap = |alpha: f64| -> Result<f64> { Ok(obj.full_loss(&point(alpha)?)? - constants.f_star) };
    let mut hi = 1.0;
    let mut guard = 0;
    while gap(hi)? < quality {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::invalid("objective is flat along the requested direction"));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gap(mid)? < quality {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (glo, ghi) = (gap(lo)?, gap(hi)?);
    let alpha = if (glo - quality).abs() <= (ghi - quality).abs() { lo } else { hi };
    point(alpha)
}

/// Numerical near-minimizer of a convex objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub x: ParamVector,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Accelerated full-gradient descent with step `1 / L_bound`, where the
/// bound is the spectral norm of the Gram matrix times the link curvature
/// (2 for squared loss, 1/4 logistic, 1/2 softmax).
pub fn reference_solution(obj: &Objective, max_iters: usize, grad_tol: f64) -> Result<ReferenceSolution> {
    let curvature = match obj.kind() {
        ModelKind::LinearRegression => 2.0,
        ModelKind::BinaryLogistic => 0.25,
        ModelKind::SoftmaxLinear { .. } => 0.5,
        ModelKind::MlpRelu { .. } => {
            return Err(Error::InvalidKind {
                op: "reference_solution",
                kind: obj.kind().name(),
            })
        }
    };
    let gram_max = SymmetricEigen::new(gram(obj)).eigenvalues.max();
    let step = 1.0 / (curvature * gram_max);
    let mut x = ParamVector::zeros(obj.param_dim());
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut iterations = 0;
    for it in 0..max_iters {
        iterations = it + 1;
        let g = obj.full_grad(&y)?;
        let mut next = y.clone();
        next.add_scaled(-step, &g)?;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        let mut y_next = next.clone();
        let diff = next.sub(&x)?;
        y_next.add_scaled(momentum, &diff)?;
        // restart when the objective goes up
        if obj.full_loss(&next)? > obj.full_loss(&x)? {
            t = 1.0;
            y = x.clone();
            continue;
        }
        x = next;
        y = y_next;
        t = t_next;
        if it % 50 == 0 && obj.full_grad(&x)?.norm() <= grad_tol {
            break;
        }
    }
    let grad_norm = obj.full_grad(&x)?.norm();
    Ok(ReferenceSolution {
        loss: obj.full_loss(&x)?,
        x,
        grad_norm,
        iterations,
    })
}

/// Constants of a classifier around a reference solution. `mu` and `L` are
/// bounded from the Gram spectrum; everything is labelled as a proxy.
pub fn proxy_constants(obj: &Objective, reference: &ReferenceSolution, samples: usize, rng: &mut Rng) -> Result<ExactConstants> {
    let l_expected = estimate_expected_smoothness(obj, &reference.x, samples, rng)?;
    let eig = SymmetricEigen::new(gram(obj));
    let curvature = match obj.kind() {
        ModelKind::BinaryLogistic => 0.25,
        _ => 0.5,
    };
    Ok(ExactConstants {
        f_star: reference.loss,
        sigma_star_sq: sigma_star_sq(obj, &reference.x)?,
        x_star: reference.x.clone(),
        mu: 0.0,
        l_full: curvature * eig.eigenvalues.max(),
        l_expected,
        provenance: Provenance::Proxy,
        rank_deficient: false,
    })
}

/// Whether a step size meets the bounds used by the convergence results.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizeCheck {
    pub name: &'static str,
    pub bound: f64,
    pub satisfied: bool,
}

pub fn step_size_report(c: &ExactConstants, gamma: f64) -> Vec<StepSizeCheck> {
    let (mu, l, le) = (c.mu, c.l_full, c.l_expected);
    [
        ("strongly-quasi-convex kd: 1/(8 Lexp)", 1.0 / (8.0 * le)),
        ("pl kd: mu/(4 Lexp L)", mu / (4.0 * le * l)),
        ("unbiased kd: mu/(3 L Lexp)", mu / (3.0 * l * le)),
        ("phase halving: mu/(12 L Lexp)", mu / (12.0 * l * le)),
        ("compressed kd: 1/(16 Lexp)", 1.0 / (16.0 * le)),
    ]
    .into_iter()
    .map(|(name, bound)| StepSizeCheck {
        name,
        bound,
        satisfied: gamma <= bound,
    })
    .collect()
}

/// Hessian `(2/N) A^T A` of a least-squares objective as a dense matrix.
pub fn least_squares_hessian(obj: &Objective) -> DMatrix<f64> {
    let a = design_matrix(obj);
    (a.transpose() * a) * (2.0 / obj.len() as f64)
}
