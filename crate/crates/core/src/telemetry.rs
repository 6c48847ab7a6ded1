//! Measurements taken during training and the trace CSV format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::distillation::{approx_kd_grad, true_kd_grad, KdConfig};
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::objectives::Objective;
use crate::rng::Rng;
use crate::sampling::{sample_minibatch, Minibatch};

pub const TRACE_HEADER: [&str; 13] = [
    "epoch",
    "run_id",
    "seed",
    "mode",
    "lambda",
    "gamma",
    "loss_running",
    "loss_full",
    "grad_variance",
    "cosine",
    "l2",
    "snr",
    "test_acc",
];

/// One row of a training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub run_id: String,
    pub seed: u64,
    pub mode: String,
    pub lambda: f64,
    pub gamma: f64,
    /// Mean of the minibatch losses seen during the epoch.
    pub running_avg_loss: f64,
    /// Full training loss at the end of the epoch.
    pub full_loss: f64,
    /// Epoch mean of the update direction's variance around its own mean.
    pub grad_variance: Option<f64>,
    pub cosine_mean: Option<f64>,
    pub l2_mean: Option<f64>,
    pub snr_mean: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// How to estimate the variance of a stochastic direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    /// Enumerate every single-sample batch.
    ExactEnumeration,
    /// Sample `trials` batches of `batch_size`.
    MonteCarlo { trials: usize, batch_size: usize },
}

/// Variance of a stochastic direction, around its own mean and around a
/// reference vector (typically the full gradient).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionVariance {
    pub own_mean: f64,
    pub about_reference: Option<f64>,
}

/// `E||g_xi - E g_xi||^2` of the direction returned by `direction`.
pub fn grad_variance_probe<F>(dataset_size: usize, direction: F, mode: VarianceMode, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&Minibatch) -> Result<ParamVector>,
{
    Ok(direction_variance(dataset_size, direction, None, mode, rng)?.own_mean)
}

/// Same as [`grad_variance_probe`], also reporting `E||g_xi - reference||^2`.
pub fn direction_variance<F>(
    dataset_size: usize,
    mut direction: F,
    reference: Option<&ParamVector>,
    mode: VarianceMode,
    rng: &mut Rng,
) -> Result<DirectionVariance>
where
    F: FnMut(&Minibatch) -> Result<ParamVector>,
{
    let samples: Vec<ParamVector> = match mode {
        VarianceMode::ExactEnumeration => (0..dataset_size)
            .map(|n| direction(&Minibatch::single(n)))
            .collect::<Result<_>>()?,
        VarianceMode::MonteCarlo { trials, batch_size } => {
            if trials < 2 {
                return Err(Error::invalid("monte-carlo variance needs at least 2 trials"));
            }
            (0..trials)
                .map(|_| direction(&sample_minibatch(dataset_size, batch_size, rng)?))
                .collect::<Result<_>>()?
        }
    };
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = samples[0].len();
    let count = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in &samples {
        for (m, v) in mean.iter_mut().zip(s.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let spread = |center: &[f64]| -> f64 {
        samples
            .iter()
            .map(|s| s.iter().zip(center).map(|(v, c)| (v - c) * (v - c)).sum::<f64>())
            .sum::<f64>()
    };
    let own_mean = match mode {
        VarianceMode::ExactEnumeration => spread(&mean) / count,
        VarianceMode::MonteCarlo { .. } => spread(&mean) / (count - 1.0),
    };
    let about_reference = reference.map(|r| spread(r.as_slice()) / count);
    Ok(DirectionVariance {
        own_mean,
        about_reference,
    })
}

/// Agreement between the exact network distillation gradient and its
/// linear-model approximation on one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapStats {
    /// Missing when either gradient vanishes.
    pub cosine: Option<f64>,
    pub l2: f64,
    /// `l2 / ||true||`; missing when the true gradient vanishes.
    pub snr: Option<f64>,
}

pub fn approx_gap_stats(
    obj: &Objective,
    x: &ParamVector,
    teacher: &ParamVector,
    lambda: f64,
    batch: &Minibatch,
) -> Result<GapStats> {
    let cfg = KdConfig::new(lambda, 1.0, teacher.clone(), 1.0)?;
    let mut exact = ParamVector::zeros(obj.param_dim());
    let mut approx = ParamVector::zeros(obj.param_dim());
    let w = batch.weight();
    for &n in batch.indices() {
        exact.add_scaled(w, &true_kd_grad(obj, x, &cfg, n)?)?;
        approx.add_scaled(w, &approx_kd_grad(obj, x, &cfg, n)?)?;
    }
    let l2 = exact.sub(&approx)?.norm();
    let norm = exact.norm();
    Ok(GapStats {
        cosine: exact.cosine(&approx)?,
        l2,
        snr: (norm > 0.0).then(|| l2 / norm),
    })
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Writes records under the fixed trace header.
pub fn write_trace_to<W: Write>(records: &[EpochStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER).map_err(csv_io)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.run_id.clone(),
            r.seed.to_string(),
            r.mode.clone(),
            fmt_float(r.lambda),
            fmt_float(r.gamma),
            fmt_float(r.running_avg_loss),
            fmt_float(r.full_loss),
            fmt_opt(r.grad_variance),
            fmt_opt(r.cosine_mean),
            fmt_opt(r.l2_mean),
            fmt_opt(r.snr_mean),
            fmt_opt(r.test_accuracy),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(records: &[EpochStats], path: &Path) -> Result<()> {
    write_trace_to(records, BufWriter::new(File::create(path)?))
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("{other:?}")),
    }
}

/// Parses a trace written by [`write_trace`].
pub fn read_trace(path: &Path) -> Result<Vec<EpochStats>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(File::open(path)?));
    let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(Error::format(path, "unexpected trace header"));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::format(path, format!("row {row}: {e}")))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize| -> Result<f64> {
            field(c)
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("row {row}, column {}: bad number", c + 1)))
        };
        let opt = |c: usize| -> Result<Option<f64>> {
            if field(c).is_empty() {
                Ok(None)
            } else {
                num(c).map(Some)
            }
        };
        let int = |c: usize| -> Result<u64> {
            field(c)
                .parse::<u64>()
                .map_err(|_| Error::format(path, format!("row {row}, column {}: bad integer", c + 1)))
        };
        out.push(EpochStats {
            epoch: int(0)?,
            run_id: field(1).to_string(),
            seed: int(2)?,
            mode: field(3).to_string(),
            lambda: num(4)?,
            gamma: num(5)?,
            running_avg_loss: num(6)?,
            full_loss: num(7)?,
            grad_variance: opt(8)?,
            cosine_mean: opt(9)?,
            l2_mean: opt(10)?,
            snr_mean: opt(11)?,
            test_accuracy: opt(12)?,
        });
    }
    Ok(out)
}
