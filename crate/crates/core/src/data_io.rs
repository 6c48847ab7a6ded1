//! Dataset loading: IDX image/label pairs, CSV feature matrices and seeded
//! synthetic generators.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::{dot, ParamVector};
use crate::objectives::{Dataset, Targets};
use crate::rng::Rng;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Classes,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthKind {
    /// `b = w . [a, 1] + noise * eps`, Gaussian inputs.
    LinearGaussian,
    /// Binary 0/1 targets `1{w . [a, 1] > 0}`.
    LogisticSeparable,
    /// Binary 0/1 targets `1{w . [a, 1] + noise * eps > 0}` with logistic `eps`.
    LogisticNoisy,
    /// `classes` Gaussian clusters with unit-variance centers and
    /// within-class standard deviation `noise`.
    GaussianClasses { classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    IdxPair { images: PathBuf, labels: PathBuf },
    Csv {
        path: PathBuf,
        /// Defaults to the last column.
        label_column: Option<usize>,
        header: bool,
        labels: LabelKind,
    },
    Synthetic {
        kind: SynthKind,
        n: usize,
        d: usize,
        noise: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    None,
    /// IDX pixels are divided by 255; other sources are min-max scaled per feature.
    Scale01,
    /// Zero mean, unit variance per feature (constant features are only centered).
    Standardize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: Source,
    pub normalization: Normalization,
    /// Keep `count` rows chosen without replacement using `seed`.
    pub subset: Option<(usize, u64)>,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    /// Generating parameter of the linear-Gaussian generator.
    pub planted: Option<ParamVector>,
}

pub fn load(spec: &DatasetSpec) -> Result<Loaded> {
    let (data, planted) = match &spec.source {
        Source::IdxPair { images, labels } => (load_idx(images, labels)?, None),
        Source::Csv {
            path,
            label_column,
            header,
            labels,
        } => (load_csv(path, *label_column, *header, *labels)?, None),
        Source::Synthetic { kind, n, d, noise, seed } => {
            let (data, planted) = synth(*kind, *n, *d, *noise, *seed)?;
            (data, planted)
        }
    };
    let data = match spec.normalization {
        Normalization::None => data,
        Normalization::Scale01 => match &spec.source {
            Source::IdxPair { .. } => data.map_inputs(|_, v| v / 255.0)?,
            _ => min_max(&data)?,
        },
        Normalization::Standardize => standardize(&data)?,
    };
    let data = match spec.subset {
        None => data,
        Some((count, seed)) => subset(&data, count, seed)?,
    };
    Ok(Loaded { dataset: data, planted })
}

fn column_stats(data: &Dataset) -> Vec<(f64, f64, f64, f64)> {
    // (min, max, mean, std)
    let d = data.dim();
    let n = data.len() as f64;
    (0..d)
        .map(|j| {
            let col = || (0..data.len()).map(|r| data.row(r)[j]);
            let (lo, hi) = col().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            let mean = col().sum::<f64>() / n;
            let var = col().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (lo, hi, mean, var.sqrt())
        })
        .collect()
}

fn min_max(data: &Dataset) -> Result<Dataset> {
    let s = column_stats(data);
    data.map_inputs(|j, v| {
        let (lo, hi, _, _) = s[j];
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    })
}

fn standardize(data: &Dataset) -> Result<Dataset> {
    let s = column_stats(data);
    data.map_inputs(|j, v| {
        let (_, _, mean, std) = s[j];
        if std > 0.0 {
            (v - mean) / std
        } else {
            v - mean
        }
    })
}

pub fn subset(data: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || count > data.len() {
        return Err(Error::invalid(format!(
            "subset of {count} rows requested from {} rows",
            data.len()
        )));
    }
    let mut rng = Rng::new(seed);
    let mut idx = rand::seq::index::sample(&mut rng, data.len(), count).into_vec();
    idx.sort_unstable();
    data.select(&idx)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header at byte {offset}")))
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let m = be_u32(bytes, 0, path)?;
    if m != magic {
        return Err(Error::format(
            path,
            format!("bad magic 0x{m:08x} at byte 0, expected 0x{magic:08x}"),
        ));
    }
    (0..dims).map(|i| be_u32(bytes, 4 + 4 * i, path).map(|v| v as usize)).collect()
}

/// Reads an IDX image file and its label file. Pixels are returned as raw
/// byte values; labels must be digits below the number of classes seen.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;
    let dims = idx_header(&img, images, IDX_IMAGES, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let ln = idx_header(&lab, labels, IDX_LABELS, 1)?[0];
    if n != ln {
        return Err(Error::format(
            labels,
            format!("label count {ln} at byte 4 does not match image count {n}"),
        ));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = rows * cols;
    let start = 16;
    let need = start + n * d;
    if img.len() < need {
        return Err(Error::format(
            images,
            format!("truncated pixel data: file ends at byte {}, expected {need}", img.len()),
        ));
    }
    if lab.len() < 8 + n {
        return Err(Error::format(
            labels,
            format!("truncated label data: file ends at byte {}, expected {}", lab.len(), 8 + n),
        ));
    }
    let inputs: Vec<f64> = img[start..need].iter().map(|&b| f64::from(b)).collect();
    let label_bytes = &lab[8..8 + n];
    if let Some(pos) = label_bytes.iter().position(|&b| b > 9) {
        return Err(Error::format(
            labels,
            format!("label {} at byte {} is not a digit class", label_bytes[pos], 8 + pos),
        ));
    }
    let classes = 10;
    Dataset::new(
        d,
        inputs,
        Targets::Classes {
            labels: label_bytes.iter().map(|&b| b as usize).collect(),
            classes,
        },
    )
}

/// Reads a numeric CSV with one label column. Row numbers in errors are
/// 1-based file lines.
pub fn load_csv(path: &Path, label_column: Option<usize>, header: bool, labels: LabelKind) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut width = None;
    let mut inputs = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::format(path, format!("row {row}: {e}")))?;
        if header && i == 0 {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::format(
                path,
                format!("row {row} has {} columns, expected {w}", rec.len()),
            ));
        }
        if w < 2 {
            return Err(Error::format(path, format!("row {row}: need at least one feature and a label")));
        }
        let lc = label_column.unwrap_or(w - 1);
        if lc >= w {
            return Err(Error::format(path, format!("label column {lc} out of range for {w} columns")));
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("row {row}, column {}: non-numeric cell {cell:?}", c + 1)))?;
            if c == lc {
                raw_labels.push((v, row, c + 1));
            } else {
                inputs.push(v);
            }
        }
    }
    let Some(w) = width else {
        return Err(Error::EmptyDataset);
    };
    if raw_labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let targets = match labels {
        LabelKind::Real => Targets::Real(raw_labels.iter().map(|l| l.0).collect()),
        LabelKind::Classes => {
            let mut out = Vec::with_capacity(raw_labels.len());
            for &(v, row, col) in &raw_labels {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::format(
                        path,
                        format!("row {row}, column {col}: label {v} is not a class index"),
                    ));
                }
                out.push(v as usize);
            }
            let classes = out.iter().copied().max().unwrap_or(0).max(1) + 1;
            Targets::Classes { labels: out, classes }
        }
    };
    Dataset::new(w - 1, inputs, targets)
}

/// Writes features followed by a `label` column, with a header row. Values
/// use the shortest representation that parses back to the same float.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).chain(["label".into()]).collect();
    writeln!(w, "{}", header.join(","))?;
    for r in 0..data.len() {
        let mut line = data.row(r).iter().map(|v| v.to_string()).collect::<Vec<_>>();
        line.push(match data.targets() {
            Targets::Real(b) => b[r].to_string(),
            Targets::Classes { labels, .. } => labels[r].to_string(),
        });
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// One value per line, shortest round-trip representation.
pub fn write_params(x: &ParamVector, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in x.iter() {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ParamVector> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: not a number", i + 1)))?;
        out.push(v);
    }
    ParamVector::try_finite(out)
}

/// Seeded synthetic data. The linear-Gaussian generator also returns the
/// planted parameter (weights then bias).
pub fn synth(kind: SynthKind, n: usize, d: usize, noise: f64, seed: u64) -> Result<(Dataset, Option<ParamVector>)> {
    if n == 0 || d == 0 {
        return Err(Error::invalid(format!("synthetic data needs N >= 1 and d >= 1, got N={n}, d={d}")));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid(format!("noise {noise} must be >= 0")));
    }
    let mut rng = Rng::new(seed);
    if let SynthKind::GaussianClasses { classes } = kind {
        if classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let centers: Vec<f64> = (0..classes * d).map(|_| rng.standard_normal()).collect();
        let mut inputs = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.index(classes);
            labels.push(k);
            for j in 0..d {
                inputs.push(centers[k * d + j] + noise * rng.standard_normal());
            }
        }
        return Ok((Dataset::new(d, inputs, Targets::Classes { labels, classes })?, None));
    }
    let w: Vec<f64> = (0..=d).map(|_| rng.standard_normal()).collect();
    let inputs: Vec<f64> = (0..n * d).map(|_| rng.standard_normal()).collect();
    let score = |r: usize| dot(&inputs[r * d..(r + 1) * d], &w[..d]) + w[d];
    match kind {
        SynthKind::LinearGaussian => {
            let b: Vec<f64> = (0..n).map(|r| score(r) + noise * rng.standard_normal()).collect();
            Ok((Dataset::new(d, inputs.clone(), Targets::Real(b))?, Some(ParamVector::new(w))))
        }
        SynthKind::LogisticSeparable | SynthKind::LogisticNoisy => {
            let labels: Vec<f64> = (0..n)
                .map(|r| {
                    let eps = if kind == SynthKind::LogisticNoisy {
                        let u = rng.uniform().clamp(1e-12, 1.0 - 1e-12);
                        noise * (u / (1.0 - u)).ln()
                    } else {
                        0.0
                    };
                    if score(r) + eps > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Ok((Dataset::new(d, inputs.clone(), Targets::Real(labels))?, None))
        }
        SynthKind::GaussianClasses { .. } => unreachable!(),
    }
}
