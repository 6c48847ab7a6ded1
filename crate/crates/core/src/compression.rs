//! Compression operators applied to iterates.
//!
//! Unbiased operators satisfy `E[C(x)] = x` and
//! `E||C(x) - x||^2 <= omega ||x||^2`. The fixed pruning mask is biased and is
//! only kept for the pruning experiment; it is flagged as such.

use crate::distillation::{DistillationForm, KdConfig};
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::objectives::Objective;
use crate::optimizers::{kd_update_direction, TrainerState};
use crate::rng::Rng;
use crate::sampling::Minibatch;

#[derive(Debug, Clone, PartialEq)]
pub enum CompressorKind {
    Identity,
    /// Keep `k` of `dim` coordinates chosen uniformly, scaled by `dim / k`.
    RandK { dim: usize, k: usize },
    /// Elementwise mask without rescaling.
    FixedMask { mask: Vec<bool> },
    /// Randomized rounding of `|x_i| / ||x||_inf` onto `levels` uniform steps.
    StochasticQuantize { dim: usize, levels: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressor {
    kind: CompressorKind,
    omega: f64,
}

impl Compressor {
    pub fn identity() -> Self {
        Compressor {
            kind: CompressorKind::Identity,
            omega: 0.0,
        }
    }

    pub fn rand_k(dim: usize, k: usize) -> Result<Self> {
        if k == 0 || k > dim {
            return Err(Error::invalid(format!("rand-k needs 1 <= k <= d, got k={k}, d={dim}")));
        }
        Ok(Compressor {
            kind: CompressorKind::RandK { dim, k },
            omega: dim as f64 / k as f64 - 1.0,
        })
    }

    pub fn fixed_mask(mask: Vec<bool>) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::invalid("empty mask"));
        }
        Ok(Compressor {
            kind: CompressorKind::FixedMask { mask },
            omega: 1.0,
        })
    }

    /// Random mask zeroing `round(sparsity * dim)` coordinates, drawn once.
    pub fn random_mask(dim: usize, sparsity: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&sparsity) {
            return Err(Error::invalid(format!("sparsity {sparsity} outside [0, 1]")));
        }
        let pruned = (sparsity * dim as f64).round() as usize;
        let mut mask = vec![true; dim];
        for i in rand::seq::index::sample(rng, dim, pruned) {
            mask[i] = false;
        }
        Compressor::fixed_mask(mask)
    }

    /// Per-entry rounding variance is at most `(s / levels)^2 / 4` with
    /// `s = ||x||_inf <= ||x||`, so `omega = dim / (4 levels^2)`.
    pub fn stochastic_quantize(dim: usize, levels: u32) -> Result<Self> {
        if levels == 0 || dim == 0 {
            return Err(Error::invalid("quantizer needs positive dimension and levels"));
        }
        Ok(Compressor {
            kind: CompressorKind::StochasticQuantize { dim, levels },
            omega: dim as f64 / (4.0 * f64::from(levels).powi(2)),
        })
    }

    pub fn kind(&self) -> &CompressorKind {
        &self.kind
    }

    /// Declared variance parameter.
    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn is_biased(&self) -> bool {
        matches!(self.kind, CompressorKind::FixedMask { .. })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, CompressorKind::Identity)
    }

    pub fn name(&self) -> String {
        match &self.kind {
            CompressorKind::Identity => "identity".into(),
            CompressorKind::RandK { k, .. } => format!("rand_k({k})"),
            CompressorKind::FixedMask { mask } => {
                let kept = mask.iter().filter(|&&m| m).count();
                format!("fixed_mask({kept}/{})", mask.len())
            }
            CompressorKind::StochasticQuantize { levels, .. } => format!("quantize({levels})"),
        }
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        let expected = match &self.kind {
            CompressorKind::Identity => return Ok(()),
            CompressorKind::RandK { dim, .. } | CompressorKind::StochasticQuantize { dim, .. } => *dim,
            CompressorKind::FixedMask { mask } => mask.len(),
        };
        if expected != len {
            return Err(Error::DimensionMismatch {
                expected,
                found: len,
            });
        }
        Ok(())
    }

    pub fn compress(&self, x: &ParamVector, rng: &mut Rng) -> Result<ParamVector> {
        self.check_dim(x.len())?;
        if !x.is_finite() {
            return Err(Error::invalid("cannot compress a non-finite vector"));
        }
        Ok(match &self.kind {
            CompressorKind::Identity => x.clone(),
            CompressorKind::RandK { dim, k } => {
                let kept = rand::seq::index::sample(rng, *dim, *k).into_vec();
                rand_k_apply(x, &kept, *k)
            }
            CompressorKind::FixedMask { mask } => ParamVector::new(
                x.iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { v } else { 0.0 })
                    .collect(),
            ),
            CompressorKind::StochasticQuantize { levels, .. } => {
                let s = x.max_abs();
                if s == 0.0 {
                    return Ok(x.clone());
                }
                let l = f64::from(*levels);
                ParamVector::new(
                    x.iter()
                        .map(|&v| {
                            let u = v.abs() / s * l;
                            let lo = u.floor();
                            let level = if rng.uniform() < u - lo { lo + 1.0 } else { lo };
                            v.signum() * s * level / l
                        })
                        .collect(),
                )
            }
        })
    }
}

/// `C(x - gamma (g_B(x) - lambda g_B(theta)))`; compression is applied to
/// the updated iterate and draws from the state's generator.
pub fn compressed_kd_step(
    obj: &Objective,
    state: &mut TrainerState,
    cfg: &KdConfig,
    c: &Compressor,
    batch: &Minibatch,
) -> Result<()> {
    let d = kd_update_direction(obj, &state.x, cfg, batch, DistillationForm::Linearized)?;
    let moved = d.axpy(-cfg.gamma, &state.x)?;
    if !moved.is_finite() {
        return state.commit(moved);
    }
    let next = c.compress(&moved, &mut state.rng)?;
    state.commit(next)
}

/// Rand-k output for a given kept subset.
pub fn rand_k_apply(x: &ParamVector, kept: &[usize], k: usize) -> ParamVector {
    let scale = x.len() as f64 / k as f64;
    let mut out = vec![0.0; x.len()];
    for &i in kept {
        out[i] = scale * x[i];
    }
    ParamVector::new(out)
}

/// Exact mean and `E||C(x) - x||^2` of rand-k by enumerating all
/// `binom(d, k)` subsets (each equally likely).
pub fn rand_k_exact_moments(x: &ParamVector, k: usize) -> Result<(ParamVector, f64)> {
    let d = x.len();
    if k == 0 || k > d {
        return Err(Error::invalid("k out of range"));
    }
    if d > 24 {
        return Err(Error::invalid("exhaustive enumeration limited to d <= 24"));
    }
    let mut mean = vec![0.0; d];
    let mut err = 0.0;
    let mut count = 0u64;
    let mut kept = Vec::with_capacity(k);
    for bits in 0u32..(1u32 << d) {
        if bits.count_ones() as usize != k {
            continue;
        }
        kept.clear();
        kept.extend((0..d).filter(|i| bits >> i & 1 == 1));
        let c = rand_k_apply(x, &kept, k);
        crate::linalg::axpy_in_place(1.0, &c, &mut mean);
        err += c.dist_sq(x)?;
        count += 1;
    }
    let inv = 1.0 / count as f64;
    for v in &mut mean {
        *v *= inv;
    }
    Ok((ParamVector::new(mean), err * inv))
}

/// Outcome of an empirical check of the compression contract.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionStats {
    /// Per test point, the mean of `C(x) - x`.
    pub empirical_mean_error: Vec<ParamVector>,
    /// Largest coordinate mean error in standard errors (0 when exact).
    pub max_mean_z: f64,
    /// Max over test points of `E||C(x) - x||^2 / ||x||^2`.
    pub empirical_variance_ratio: f64,
    pub declared_omega: f64,
    pub unbiased: bool,
    pub variance_within_omega: bool,
    /// Set for operators that violate unbiasedness by construction.
    pub flagged_biased: bool,
}

impl CompressionStats {
    pub fn passed(&self) -> bool {
        self.unbiased && self.variance_within_omega
    }
}

/// Monte-Carlo check: mean error within 4 standard errors of zero per
/// coordinate, variance ratio within `omega` plus a Monte-Carlo slack.
pub fn verify_compressor(
    c: &Compressor,
    test_points: &[ParamVector],
    trials: usize,
    rng: &mut Rng,
) -> Result<CompressionStats> {
    verify_compressor_with(c, test_points, trials, rng, |x, r| c.compress(x, r))
}

/// [`verify_compressor`] against an arbitrary implementation of `c`.
pub fn verify_compressor_with<F>(
    c: &Compressor,
    test_points: &[ParamVector],
    trials: usize,
    rng: &mut Rng,
    mut compress: F,
) -> Result<CompressionStats>
where
    F: FnMut(&ParamVector, &mut Rng) -> Result<ParamVector>,
{
    if trials == 0 {
        return Err(Error::invalid("trials must be positive"));
    }
    let t = trials as f64;
    let mut means = Vec::with_capacity(test_points.len());
    let mut max_z: f64 = 0.0;
    let mut ratio: f64 = 0.0;
    let mut var_ok = true;
    for x in test_points {
        let d = x.len();
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        let mut err_sum = 0.0;
        let mut err_sq_sum = 0.0;
        for _ in 0..trials {
            let cx = compress(x, rng)?;
            let mut e2 = 0.0;
            for i in 0..d {
                let e = cx[i] - x[i];
                sum[i] += e;
                sum_sq[i] += e * e;
                e2 += e * e;
            }
            err_sum += e2;
            err_sq_sum += e2 * e2;
        }
        let mut mean = vec![0.0; d];
        for i in 0..d {
            let m = sum[i] / t;
            mean[i] = m;
            let var = if trials > 1 {
                ((sum_sq[i] - t * m * m) / (t - 1.0)).max(0.0)
            } else {
                0.0
            };
            let se = (var / t).sqrt();
            let z = if se > 0.0 {
                m.abs() / se
            } else if m != 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            max_z = max_z.max(z);
        }
        means.push(ParamVector::new(mean));
        let nx = x.norm_sq();
        if nx > 0.0 {
            let r = err_sum / t / nx;
            ratio = ratio.max(r);
            let m = err_sum / t;
            let var = if trials > 1 {
                ((err_sq_sum - t * m * m) / (t - 1.0)).max(0.0)
            } else {
                0.0
            };
            let slack = 4.0 * (var / t).sqrt() / nx;
            if r > c.omega() * (1.0 + 1e-12) + slack {
                var_ok = false;
            }
        }
    }
    Ok(CompressionStats {
        empirical_mean_error: means,
        max_mean_z: max_z,
        empirical_variance_ratio: ratio,
        declared_omega: c.omega(),
        unbiased: max_z <= 4.0,
        variance_within_omega: var_ok,
        flagged_biased: c.is_biased(),
    })
}

/// Exhaustive version for rand-k: exact moments, no Monte-Carlo slack.
pub fn verify_rand_k_exhaustive(c: &Compressor, test_points: &[ParamVector]) -> Result<CompressionStats> {
    let k = match c.kind() {
        CompressorKind::RandK { k, .. } => *k,
        _ => return Err(Error::invalid("exhaustive mode is only defined for rand-k")),
    };
    let mut means = Vec::new();
    let mut max_err: f64 = 0.0;
    let mut ratio: f64 = 0.0;
    let mut var_ok = true;
    for x in test_points {
        let (mean, err) = rand_k_exact_moments(x, k)?;
        let e = mean.sub(x)?;
        max_err = max_err.max(e.max_abs() / (1.0 + x.max_abs()));
        means.push(e);
        let nx = x.norm_sq();
        if nx > 0.0 {
            let r = err / nx;
            ratio = ratio.max(r);
            var_ok &= r <= c.omega() * (1.0 + 1e-12) + 1e-12;
        }
    }
    Ok(CompressionStats {
        empirical_mean_error: means,
        max_mean_z: max_err,
        empirical_variance_ratio: ratio,
        declared_omega: c.omega(),
        unbiased: max_err <= 1e-12,
        variance_within_omega: var_ok,
        flagged_biased: false,
    })
}
