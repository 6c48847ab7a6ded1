//! Finite-sum objectives with per-sample loss and gradient oracles.
//!
//! Every model kind is written as `logits = psi_n(x)` followed by a per-sample
//! link loss on the logits. Gradients are formed as the vector-Jacobian
//! product `Jpsi_n(x) * dloss/dlogits`, which is also what the generic-network
//! distillation gradient needs.
//!
//! Inputs are lifted to `[a, 1]` when the objective carries a bias, so the
//! bias is an ordinary trailing parameter.

use crate::error::{Error, Result};
use crate::linalg::{axpy_in_place, dot, ParamVector};
use crate::rng::Rng;
use crate::sampling::Minibatch;

/// Labels attached to a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Real regression targets, or binary labels in `[0, 1]`.
    Real(Vec<f64>),
    /// Class indices in `0..classes`.
    Classes { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `N` samples of `dim` raw features (row-major) with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    dim: usize,
    inputs: Vec<f64>,
    targets: Targets,
}

impl Dataset {
    pub fn new(dim: usize, inputs: Vec<f64>, targets: Targets) -> Result<Self> {
        let n = targets.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if inputs.len() != n * dim {
            return Err(Error::DimensionMismatch {
                expected: n * dim,
                found: inputs.len(),
            });
        }
        if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite input at sample {}, feature {}",
                i / dim,
                i % dim
            )));
        }
        match &targets {
            Targets::Real(v) => {
                if let Some(i) = v.iter().position(|t| !t.is_finite()) {
                    return Err(Error::invalid(format!("non-finite target at sample {i}")));
                }
            }
            Targets::Classes { labels, classes } => {
                if *classes < 2 {
                    return Err(Error::invalid("need at least two classes"));
                }
                if let Some(i) = labels.iter().position(|&c| c >= *classes) {
                    return Err(Error::invalid(format!(
                        "label {} at sample {i} is not below {classes}",
                        labels[i]
                    )));
                }
            }
        }
        Ok(Dataset {
            n,
            dim,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.inputs[n * self.dim..(n + 1) * self.dim]
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { classes, .. } => Some(classes),
            Targets::Real(_) => None,
        }
    }

    /// Dataset restricted to `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.n {
                return Err(Error::invalid(format!("index {i} out of range")));
            }
            inputs.extend_from_slice(self.row(i));
        }
        let targets = match &self.targets {
            Targets::Real(v) => Targets::Real(indices.iter().map(|&i| v[i]).collect()),
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        };
        Dataset::new(self.dim, inputs, targets)
    }

    /// Copy with each input replaced by `f(feature_index, value)`.
    pub fn map_inputs(&self, f: impl Fn(usize, f64) -> f64) -> Result<Dataset> {
        let dim = self.dim;
        let inputs = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i % dim, v))
            .collect();
        Dataset::new(dim, inputs, self.targets.clone())
    }
}

/// A model output or a (possibly soft) target in the output space.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelOutput {
    /// Regression value or the probability of class 1.
    Scalar(f64),
    /// A point on the probability simplex.
    Distribution(Vec<f64>),
}

impl ModelOutput {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            ModelOutput::Scalar(v) => std::slice::from_ref(v),
            ModelOutput::Distribution(v) => v,
        }
    }

    pub fn argmax(&self) -> usize {
        match self {
            ModelOutput::Scalar(p) => usize::from(*p >= 0.5),
            ModelOutput::Distribution(v) => v
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
                    if x > bv {
                        (i, x)
                    } else {
                        (bi, bv)
                    }
                })
                .0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LinearRegression,
    BinaryLogistic,
    SoftmaxLinear { classes: usize },
    /// One hidden ReLU layer, linear output, softmax.
    MlpRelu { hidden: usize, classes: usize },
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::LinearRegression => "linear_regression",
            ModelKind::BinaryLogistic => "binary_logistic",
            ModelKind::SoftmaxLinear { .. } => "softmax_linear",
            ModelKind::MlpRelu { .. } => "mlp_relu",
        }
    }

    pub fn is_mlp(&self) -> bool {
        matches!(self, ModelKind::MlpRelu { .. })
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelKind::LinearRegression)
    }

    fn outputs(&self) -> usize {
        match *self {
            ModelKind::LinearRegression | ModelKind::BinaryLogistic => 1,
            ModelKind::SoftmaxLinear { classes } | ModelKind::MlpRelu { classes, .. } => classes,
        }
    }
}

/// Logits of one sample, plus the hidden activations for the MLP.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<f64>,
    hidden: Vec<f64>,
}

/// Finite-sum objective `f(x) = (1/N) sum_n loss(phi_x(a_n), b_n)`.
#[derive(Debug, Clone)]
pub struct Objective {
    kind: ModelKind,
    data: Dataset,
    bias: bool,
    width: usize,
    design: Vec<f64>,
}

impl Objective {
    pub fn new(kind: ModelKind, data: Dataset, bias: bool) -> Result<Self> {
        match (&kind, data.targets()) {
            (ModelKind::LinearRegression, Targets::Real(_)) => {}
            (ModelKind::BinaryLogistic, Targets::Real(v)) => {
                if let Some(i) = v.iter().position(|t| !(0.0..=1.0).contains(t)) {
                    return Err(Error::invalid(format!(
                        "binary target at sample {i} is outside [0, 1]"
                    )));
                }
            }
            (ModelKind::SoftmaxLinear { classes }, Targets::Classes { classes: k, .. })
            | (ModelKind::MlpRelu { classes, .. }, Targets::Classes { classes: k, .. }) => {
                if classes != k {
                    return Err(Error::DimensionMismatch {
                        expected: *classes,
                        found: *k,
                    });
                }
            }
            (kind, _) => {
                return Err(Error::invalid(format!(
                    "targets do not match objective kind {}",
                    kind.name()
                )))
            }
        }
        if let ModelKind::MlpRelu { hidden: 0, .. } = kind {
            return Err(Error::invalid("hidden width must be positive"));
        }
        let width = data.dim() + usize::from(bias);
        let mut design = Vec::with_capacity(data.len() * width);
        for n in 0..data.len() {
            design.extend_from_slice(data.row(n));
            if bias {
                design.push(1.0);
            }
        }
        Ok(Objective {
            kind,
            data,
            bias,
            width,
            design,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Width of the lifted input `[a, 1]` (or `a` without bias).
    pub fn input_width(&self) -> usize {
        self.width
    }

    /// Lifted input of sample `n`.
    pub fn lifted(&self, n: usize) -> &[f64] {
        &self.design[n * self.width..(n + 1) * self.width]
    }

    pub fn param_dim(&self) -> usize {
        match self.kind {
            ModelKind::LinearRegression | ModelKind::BinaryLogistic => self.width,
            ModelKind::SoftmaxLinear { classes } => self.width * classes,
            ModelKind::MlpRelu { hidden, classes } => hidden * self.width + classes * (hidden + 1),
        }
    }

    /// Default starting point: zeros for linear kinds, He-scaled Gaussian
    /// weights with zero biases for the MLP.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        match self.kind {
            ModelKind::MlpRelu { hidden, classes } => {
                let mut x = vec![0.0; self.param_dim()];
                let in_scale = (2.0 / self.data.dim() as f64).sqrt();
                for j in 0..hidden {
                    for i in 0..self.data.dim() {
                        x[j * self.width + i] = in_scale * rng.standard_normal();
                    }
                }
                let off = hidden * self.width;
                let out_scale = (1.0 / hidden as f64).sqrt();
                for k in 0..classes {
                    for j in 0..hidden {
                        x[off + k * (hidden + 1) + j] = out_scale * rng.standard_normal();
                    }
                }
                ParamVector::new(x)
            }
            _ => ParamVector::zeros(self.param_dim()),
        }
    }

    fn check(&self, x: &[f64], n: usize) -> Result<()> {
        if x.len() != self.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim(),
                found: x.len(),
            });
        }
        if n >= self.data.len() {
            return Err(Error::invalid(format!(
                "sample index {n} out of range for {} samples",
                self.data.len()
            )));
        }
        Ok(())
    }

    /// True target of sample `n` in output space (one-hot for classes).
    pub fn target(&self, n: usize) -> ModelOutput {
        match self.data.targets() {
            Targets::Real(v) => ModelOutput::Scalar(v[n]),
            Targets::Classes { labels, classes } => {
                let mut t = vec![0.0; *classes];
                t[labels[n]] = 1.0;
                ModelOutput::Distribution(t)
            }
        }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Result<Forward> {
        self.check(x, n)?;
        Ok(self.forward_unchecked(x, n))
    }

    fn forward_unchecked(&self, x: &[f64], n: usize) -> Forward {
        let a = self.lifted(n);
        let w = self.width;
        match self.kind {
            ModelKind::LinearRegression | ModelKind::BinaryLogistic => Forward {
                logits: vec![dot(x, a)],
                hidden: Vec::new(),
            },
            ModelKind::SoftmaxLinear { classes } => Forward {
                logits: (0..classes).map(|k| dot(&x[k * w..(k + 1) * w], a)).collect(),
                hidden: Vec::new(),
            },
            ModelKind::MlpRelu { hidden, classes } => {
                let h: Vec<f64> = (0..hidden)
                    .map(|j| dot(&x[j * w..(j + 1) * w], a).max(0.0))
                    .collect();
                let off = hidden * w;
                let logits = (0..classes)
                    .map(|k| {
                        let row = &x[off + k * (hidden + 1)..off + (k + 1) * (hidden + 1)];
                        dot(&row[..hidden], &h) + row[hidden]
                    })
                    .collect();
                Forward { logits, hidden: h }
            }
        }
    }

    /// Model output `phi_x(a_n)`.
    pub fn predict(&self, x: &[f64], n: usize) -> Result<ModelOutput> {
        let fwd = self.forward(x, n)?;
        Ok(self.output_of(&fwd.logits))
    }

    fn output_of(&self, logits: &[f64]) -> ModelOutput {
        match self.kind {
            ModelKind::LinearRegression => ModelOutput::Scalar(logits[0]),
            ModelKind::BinaryLogistic => ModelOutput::Scalar(sigmoid(logits[0])),
            _ => ModelOutput::Distribution(softmax(logits)),
        }
    }

    /// Per-sample loss against the true label.
    pub fn loss(&self, x: &[f64], n: usize) -> Result<f64> {
        self.check(x, n)?;
        Ok(self.loss_unchecked(x, n))
    }

    fn loss_unchecked(&self, x: &[f64], n: usize) -> f64 {
        let fwd = self.forward_unchecked(x, n);
        match (self.kind, self.data.targets()) {
            (ModelKind::LinearRegression, Targets::Real(v)) => (fwd.logits[0] - v[n]).powi(2),
            (ModelKind::BinaryLogistic, Targets::Real(v)) => {
                binary_cross_entropy(fwd.logits[0], v[n])
            }
            (_, Targets::Classes { labels, .. }) => log_sum_exp(&fwd.logits) - fwd.logits[labels[n]],
            _ => unreachable!("targets validated at construction"),
        }
    }

    /// Loss of the model's prediction on sample `n` measured against an
    /// arbitrary (soft) target.
    pub fn loss_against(&self, x: &[f64], n: usize, target: &ModelOutput) -> Result<f64> {
        self.check(x, n)?;
        let fwd = self.forward_unchecked(x, n);
        self.link_loss(&fwd.logits, target)
    }

    fn link_loss(&self, logits: &[f64], target: &ModelOutput) -> Result<f64> {
        match (self.kind, target) {
            (ModelKind::LinearRegression, ModelOutput::Scalar(t)) => Ok((logits[0] - t).powi(2)),
            (ModelKind::BinaryLogistic, ModelOutput::Scalar(t)) => {
                Ok(binary_cross_entropy(logits[0], *t))
            }
            (ModelKind::SoftmaxLinear { .. } | ModelKind::MlpRelu { .. }, ModelOutput::Distribution(t)) => {
                if t.len() != logits.len() {
                    return Err(Error::DimensionMismatch {
                        expected: logits.len(),
                        found: t.len(),
                    });
                }
                let lse = log_sum_exp(logits);
                let mut acc = 0.0;
                for (tk, zk) in t.iter().zip(logits) {
                    acc += tk * (lse - zk);
                }
                Ok(acc)
            }
            _ => Err(Error::invalid("target shape does not match model output")),
        }
    }

    /// Derivative of the link loss with respect to the logits.
    pub fn logit_grad(&self, logits: &[f64], target: &ModelOutput) -> Result<Vec<f64>> {
        match (self.kind, target) {
            (ModelKind::LinearRegression, ModelOutput::Scalar(t)) => Ok(vec![2.0 * (logits[0] - t)]),
            (ModelKind::BinaryLogistic, ModelOutput::Scalar(t)) => Ok(vec![sigmoid(logits[0]) - t]),
            (ModelKind::SoftmaxLinear { .. } | ModelKind::MlpRelu { .. }, ModelOutput::Distribution(t)) => {
                if t.len() != logits.len() {
                    return Err(Error::DimensionMismatch {
                        expected: logits.len(),
                        found: t.len(),
                    });
                }
                Ok(softmax(logits).iter().zip(t).map(|(p, tk)| p - tk).collect())
            }
            _ => Err(Error::invalid("target shape does not match model output")),
        }
    }

    fn true_logit_grad(&self, logits: &[f64], n: usize) -> Vec<f64> {
        match (self.kind, self.data.targets()) {
            (ModelKind::LinearRegression, Targets::Real(v)) => vec![2.0 * (logits[0] - v[n])],
            (ModelKind::BinaryLogistic, Targets::Real(v)) => vec![sigmoid(logits[0]) - v[n]],
            (_, Targets::Classes { labels, .. }) => {
                let mut p = softmax(logits);
                p[labels[n]] -= 1.0;
                p
            }
            _ => unreachable!("targets validated at construction"),
        }
    }

    /// Accumulates `scale * Jpsi_n(x) * dlogits` into `out`.
    pub fn logit_vjp(
        &self,
        x: &[f64],
        n: usize,
        fwd: &Forward,
        dlogits: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check(x, n)?;
        if dlogits.len() != self.kind.outputs() {
            return Err(Error::DimensionMismatch {
                expected: self.kind.outputs(),
                found: dlogits.len(),
            });
        }
        if out.len() != self.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim(),
                found: out.len(),
            });
        }
        self.vjp_unchecked(x, n, fwd, dlogits, scale, out);
        Ok(())
    }

    fn vjp_unchecked(
        &self,
        x: &[f64],
        n: usize,
        fwd: &Forward,
        dlogits: &[f64],
        scale: f64,
        out: &mut [f64],
    ) {
        let a = self.lifted(n);
        let w = self.width;
        match self.kind {
            ModelKind::LinearRegression | ModelKind::BinaryLogistic => {
                axpy_in_place(scale * dlogits[0], a, out);
            }
            ModelKind::SoftmaxLinear { classes } => {
                for k in 0..classes {
                    axpy_in_place(scale * dlogits[k], a, &mut out[k * w..(k + 1) * w]);
                }
            }
            ModelKind::MlpRelu { hidden, classes } => {
                let off = hidden * w;
                let mut dh = vec![0.0; hidden];
                for k in 0..classes {
                    let base = off + k * (hidden + 1);
                    let dz = dlogits[k];
                    let row_out = &mut out[base..base + hidden + 1];
                    axpy_in_place(scale * dz, &fwd.hidden, &mut row_out[..hidden]);
                    row_out[hidden] += scale * dz;
                    axpy_in_place(dz, &x[base..base + hidden], &mut dh);
                }
                for j in 0..hidden {
                    // ReLU subgradient is 0 at the kink.
                    if fwd.hidden[j] > 0.0 {
                        axpy_in_place(scale * dh[j], a, &mut out[j * w..(j + 1) * w]);
                    }
                }
            }
        }
    }

    /// Accumulates `scale * grad f_n(x)` into `out`; returns the sample loss.
    pub(crate) fn accumulate_grad(&self, x: &[f64], n: usize, scale: f64, out: &mut [f64]) -> f64 {
        let fwd = self.forward_unchecked(x, n);
        let dz = self.true_logit_grad(&fwd.logits, n);
        self.vjp_unchecked(x, n, &fwd, &dz, scale, out);
        match (self.kind, self.data.targets()) {
            (ModelKind::LinearRegression, Targets::Real(v)) => (fwd.logits[0] - v[n]).powi(2),
            (ModelKind::BinaryLogistic, Targets::Real(v)) => {
                binary_cross_entropy(fwd.logits[0], v[n])
            }
            (_, Targets::Classes { labels, .. }) => log_sum_exp(&fwd.logits) - fwd.logits[labels[n]],
            _ => unreachable!(),
        }
    }

    /// Per-sample gradient `grad f_n(x)`.
    pub fn grad(&self, x: &[f64], n: usize) -> Result<ParamVector> {
        self.check(x, n)?;
        let mut out = vec![0.0; self.param_dim()];
        self.accumulate_grad(x, n, 1.0, &mut out);
        Ok(ParamVector::new(out))
    }

    /// Mean gradient over the batch (duplicates counted with multiplicity).
    pub fn minibatch_grad(&self, x: &[f64], batch: &Minibatch) -> Result<ParamVector> {
        self.minibatch_grad_and_loss(x, batch).map(|(g, _)| g)
    }

    /// Mean gradient and mean loss over the batch in one pass.
    pub fn minibatch_grad_and_loss(&self, x: &[f64], batch: &Minibatch) -> Result<(ParamVector, f64)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty minibatch"));
        }
        self.check(x, 0)?;
        let w = batch.weight();
        let mut out = vec![0.0; self.param_dim()];
        let mut loss = 0.0;
        for &n in batch.indices() {
            if n >= self.len() {
                return Err(Error::invalid(format!("sample index {n} out of range")));
            }
            loss += self.accumulate_grad(x, n, w, &mut out);
        }
        Ok((ParamVector::new(out), loss * w))
    }

    pub fn minibatch_loss(&self, x: &[f64], batch: &Minibatch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty minibatch"));
        }
        let mut acc = 0.0;
        for &n in batch.indices() {
            acc += self.loss(x, n)?;
        }
        Ok(acc * batch.weight())
    }

    pub fn full_grad(&self, x: &[f64]) -> Result<ParamVector> {
        self.check(x, 0)?;
        let w = 1.0 / self.len() as f64;
        let mut out = vec![0.0; self.param_dim()];
        for n in 0..self.len() {
            self.accumulate_grad(x, n, w, &mut out);
        }
        Ok(ParamVector::new(out))
    }

    pub fn full_loss(&self, x: &[f64]) -> Result<f64> {
        self.check(x, 0)?;
        let mut acc = 0.0;
        for n in 0..self.len() {
            acc += self.loss_unchecked(x, n);
        }
        Ok(acc / self.len() as f64)
    }

    /// Fraction of samples whose predicted class matches the label.
    /// `None` for regression.
    pub fn accuracy(&self, x: &[f64]) -> Result<Option<f64>> {
        if !self.kind.is_classifier() {
            return Ok(None);
        }
        self.check(x, 0)?;
        let mut hits = 0usize;
        for n in 0..self.len() {
            let fwd = self.forward_unchecked(x, n);
            let pred = self.output_of(&fwd.logits).argmax();
            let label = match self.data.targets() {
                Targets::Real(v) => usize::from(v[n] >= 0.5),
                Targets::Classes { labels, .. } => labels[n],
            };
            hits += usize::from(pred == label);
        }
        Ok(Some(hits as f64 / self.len() as f64))
    }

    /// Same model kind and bias convention on a different dataset (e.g. a
    /// held-out split).
    pub fn with_data(&self, data: Dataset) -> Result<Objective> {
        Objective::new(self.kind, data, self.bias)
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `-q ln sigma(z) - (1-q) ln(1 - sigma(z))`.
fn binary_cross_entropy(z: f64, q: f64) -> f64 {
    q * softplus(-z) + (1.0 - q) * softplus(z)
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for v in z {
        acc += (v - m).exp();
    }
    m + acc.ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let mut s = 0.0;
    for v in &e {
        s += v;
    }
    e.into_iter().map(|v| v / s).collect()
}
