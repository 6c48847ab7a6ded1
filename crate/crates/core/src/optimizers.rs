//! Training dynamics: SGD, distillation SGD, the bias-corrected variant with
//! teacher refresh, and distillation with compressed iterates.

use log::{debug, info};

use crate::compression::{compressed_kd_step, Compressor};
use crate::distillation::{kd_direction, optimal_lambda_for, DistillationForm, KdConfig, TeacherStats};
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::objectives::Objective;
use crate::rng::Rng;
use crate::sampling::{BatchSampler, Minibatch, SamplingPolicy};
use crate::telemetry::{approx_gap_stats, direction_variance, EpochStats, VarianceMode};

/// Loss above which a run is treated as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub x: ParamVector,
    pub step: u64,
    pub rng: Rng,
    /// `grad f(theta)`, present while the bias-corrected update is in use.
    pub cached_full_teacher_grad: Option<ParamVector>,
    pub phase: u64,
}

impl TrainerState {
    pub fn new(x: ParamVector, rng: Rng) -> Self {
        TrainerState {
            x,
            step: 0,
            rng,
            cached_full_teacher_grad: None,
            phase: 0,
        }
    }

    /// Replaces the iterate if `next` is finite; otherwise leaves the state
    /// at its last finite value and reports divergence.
    pub(crate) fn commit(&mut self, next: ParamVector) -> Result<()> {
        if !next.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                reason: "non-finite iterate".into(),
            });
        }
        self.x = next;
        self.step += 1;
        Ok(())
    }
}

/// `x - gamma * g_B(x)`.
pub fn sgd_step(obj: &Objective, state: &mut TrainerState, gamma: f64, batch: &Minibatch) -> Result<()> {
    let g = obj.minibatch_grad(&state.x, batch)?;
    let next = g.axpy(-gamma, &state.x)?;
    state.commit(next)
}

/// Distillation direction on `batch`; with `lambda = 0` the teacher is not
/// evaluated, so the direction is bitwise the plain gradient.
pub fn kd_update_direction(
    obj: &Objective,
    x: &ParamVector,
    cfg: &KdConfig,
    batch: &Minibatch,
    form: DistillationForm,
) -> Result<ParamVector> {
    if cfg.lambda == 0.0 {
        return obj.minibatch_grad(x, batch);
    }
    kd_direction(obj, x, &cfg.teacher, cfg.lambda, batch, form)
}

/// `x - gamma (g_B(x) - lambda g_B(theta))`.
pub fn kd_step(obj: &Objective, state: &mut TrainerState, cfg: &KdConfig, batch: &Minibatch) -> Result<()> {
    kd_step_with_form(obj, state, cfg, batch, DistillationForm::Linearized)
}

pub fn kd_step_with_form(
    obj: &Objective,
    state: &mut TrainerState,
    cfg: &KdConfig,
    batch: &Minibatch,
    form: DistillationForm,
) -> Result<()> {
    let d = kd_update_direction(obj, &state.x, cfg, batch, form)?;
    let next = d.axpy(-cfg.gamma, &state.x)?;
    state.commit(next)
}

/// `g_B(x) - lambda g_B(theta) + lambda grad f(theta)`.
pub fn unbiased_direction(
    obj: &Objective,
    x: &ParamVector,
    cfg: &KdConfig,
    teacher_full_grad: &ParamVector,
    batch: &Minibatch,
) -> Result<ParamVector> {
    let mut d = kd_update_direction(obj, x, cfg, batch, DistillationForm::Linearized)?;
    if cfg.lambda != 0.0 {
        d.add_scaled(cfg.lambda, teacher_full_grad)?;
    }
    Ok(d)
}

/// Bias-corrected distillation step; needs `grad f(theta)` cached in the state.
pub fn unbiased_kd_step(obj: &Objective, state: &mut TrainerState, cfg: &KdConfig, batch: &Minibatch) -> Result<()> {
    let cached = state
        .cached_full_teacher_grad
        .as_ref()
        .ok_or_else(|| Error::Precondition("full teacher gradient is not cached".into()))?;
    let d = unbiased_direction(obj, &state.x, cfg, cached, batch)?;
    let next = d.axpy(-cfg.gamma, &state.x)?;
    state.commit(next)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    Sgd,
    Kd,
    UnbiasedKd,
    CompressedKd(Compressor),
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Sgd => "sgd",
            Mode::Kd => "kd",
            Mode::UnbiasedKd => "unbiased_kd",
            Mode::CompressedKd(_) => "compressed_kd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaPolicy {
    Fixed(f64),
    /// Recompute the clamped neighborhood-minimizing weight whenever the
    /// teacher changes, using the known minimizer and constant `c`.
    OptimalPerPhase { x_star: ParamVector, c: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TeacherSource {
    None,
    Fixed(ParamVector),
    /// Teacher of phase `m` is the iterate at step `m * tau`.
    SelfRefresh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSchedule {
    pub run_id: String,
    pub total_steps: u64,
    /// Steps between teacher refreshes.
    pub phase_length: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub mode: Mode,
    pub lambda: LambdaPolicy,
    pub sampling: SamplingPolicy,
    pub form: DistillationForm,
    /// Steps per trace record; `None` means `ceil(N / batch_size)`.
    pub epoch_length: Option<u64>,
    /// Per-step exact variance of the update direction.
    pub track_variance: bool,
    /// Per-step gap between exact and linearized network distillation gradients.
    pub track_kd_gap: bool,
}

impl RunSchedule {
    pub fn new(total_steps: u64, batch_size: usize, gamma: f64, mode: Mode, lambda: f64) -> Self {
        RunSchedule {
            run_id: "run".into(),
            total_steps,
            phase_length: u64::MAX,
            batch_size,
            gamma,
            mode,
            lambda: LambdaPolicy::Fixed(lambda),
            sampling: SamplingPolicy::WithReplacement,
            form: DistillationForm::Linearized,
            epoch_length: None,
            track_variance: false,
            track_kd_gap: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase_length == 0 {
            return Err(Error::invalid("phase length must be at least 1"));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("step size {} must be positive", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if let LambdaPolicy::Fixed(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invalid(format!("lambda {l} outside [0, 1]")));
            }
        }
        if self.epoch_length == Some(0) {
            return Err(Error::invalid("epoch length must be at least 1"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_size: usize) -> u64 {
        self.epoch_length
            .unwrap_or_else(|| dataset_size.div_ceil(self.batch_size) as u64)
    }
}

/// Distillation weight chosen at the start of a phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaChoice {
    pub phase: u64,
    pub unclamped: f64,
    pub used: f64,
}

/// Extra per-epoch measurements that are not part of the trace CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochExtras {
    pub full_grad_norm: f64,
    /// Epoch mean of `E||g - grad f(x)||^2` for the update direction.
    pub variance_about_gradient: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<EpochStats>,
    pub extras: Vec<EpochExtras>,
    pub final_x: ParamVector,
    pub steps: u64,
    pub lambdas: Vec<LambdaChoice>,
    /// Set when the run stopped early; the trace holds the completed epochs.
    pub diverged: Option<Divergence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: u64,
    pub reason: String,
}

impl From<Divergence> for Error {
    fn from(d: Divergence) -> Self {
        Error::Diverged {
            step: d.step,
            reason: d.reason,
        }
    }
}

impl RunOutput {
    pub fn final_trace(&self) -> Option<&EpochStats> {
        self.trace.last()
    }

    pub fn min_full_loss(&self) -> Option<f64> {
        self.trace.iter().map(|r| r.full_loss).reduce(f64::min)
    }
}

/// Per-run inputs besides the schedule.
pub struct RunSetup<'a> {
    pub obj: &'a Objective,
    pub test: Option<&'a Objective>,
    pub init: ParamVector,
    pub teacher: TeacherSource,
    pub seed: u64,
}

#[derive(Default)]
struct EpochAccumulator {
    loss_sum: f64,
    batches: u64,
    variance: (f64, u64),
    about_gradient: (f64, u64),
    cosine: (f64, u64),
    l2: (f64, u64),
    snr: (f64, u64),
}

fn mean(acc: (f64, u64)) -> Option<f64> {
    (acc.1 > 0).then(|| acc.0 / acc.1 as f64)
}

fn push(acc: &mut (f64, u64), v: Option<f64>) {
    if let Some(v) = v {
        acc.0 += v;
        acc.1 += 1;
    }
}

struct Driver<'a> {
    obj: &'a Objective,
    schedule: &'a RunSchedule,
    teacher_source: TeacherSource,
    cfg: KdConfig,
    lambdas: Vec<LambdaChoice>,
}

impl Driver<'_> {
    fn needs_teacher(&self) -> bool {
        !matches!(self.schedule.mode, Mode::Sgd)
    }

    /// Start of phase: refresh the teacher, its cached gradient and the weight.
    fn begin_phase(&mut self, state: &mut TrainerState) -> Result<()> {
        if !self.needs_teacher() {
            return Ok(());
        }
        let refreshed = match &self.teacher_source {
            TeacherSource::SelfRefresh => {
                self.cfg.teacher = state.x.clone();
                true
            }
            _ => state.phase == 0,
        };
        if !refreshed {
            return Ok(());
        }
        if let LambdaPolicy::OptimalPerPhase { x_star, c } = &self.schedule.lambda {
            let stats = TeacherStats::compute(self.obj, x_star, &self.cfg.teacher)?;
            let opt = optimal_lambda_for(c * self.schedule.gamma, &stats)?;
            self.cfg.lambda = opt.clamped();
            if opt.needs_clamp() {
                info!(
                    "{}: phase {} optimal lambda {} clamped to {}",
                    self.schedule.run_id, state.phase, opt.value, self.cfg.lambda
                );
            }
            self.lambdas.push(LambdaChoice {
                phase: state.phase,
                unclamped: opt.value,
                used: self.cfg.lambda,
            });
        } else if state.phase == 0 {
            self.lambdas.push(LambdaChoice {
                phase: 0,
                unclamped: self.cfg.lambda,
                used: self.cfg.lambda,
            });
        }
        if matches!(self.schedule.mode, Mode::UnbiasedKd) {
            state.cached_full_teacher_grad = Some(self.obj.full_grad(&self.cfg.teacher)?);
        }
        debug!("{}: phase {} at step {}", self.schedule.run_id, state.phase, state.step);
        Ok(())
    }

    fn direction(&self, state: &TrainerState, x: &ParamVector, batch: &Minibatch) -> Result<ParamVector> {
        match &self.schedule.mode {
            Mode::Sgd => self.obj.minibatch_grad(x, batch),
            Mode::Kd | Mode::CompressedKd(_) => kd_update_direction(self.obj, x, &self.cfg, batch, self.schedule.form),
            Mode::UnbiasedKd => unbiased_direction(
                self.obj,
                x,
                &self.cfg,
                state.cached_full_teacher_grad.as_ref().expect("cached at phase start"),
                batch,
            ),
        }
    }

    fn step(&self, state: &mut TrainerState, batch: &Minibatch) -> Result<()> {
        match &self.schedule.mode {
            Mode::Sgd => sgd_step(self.obj, state, self.schedule.gamma, batch),
            Mode::Kd => kd_step_with_form(self.obj, state, &self.cfg, batch, self.schedule.form),
            Mode::UnbiasedKd => unbiased_kd_step(self.obj, state, &self.cfg, batch),
            Mode::CompressedKd(c) => compressed_kd_step(self.obj, state, &self.cfg, c, batch),
        }
    }

    /// Exact variance of the single-sample direction, scaled to the batch
    /// size (with-replacement sampling), plus the spread around `grad f(x)`.
    fn variance(&self, state: &mut TrainerState) -> Result<(f64, f64)> {
        let x = state.x.clone();
        let full = self.obj.full_grad(&x)?;
        let mut scratch = Rng::new(0);
        let v = direction_variance(
            self.obj.len(),
            |b| self.direction(state, &x, b),
            Some(&full),
            VarianceMode::ExactEnumeration,
            &mut scratch,
        )?;
        let b = self.schedule.batch_size as f64;
        let bias_sq = (v.about_reference.unwrap_or(0.0) - v.own_mean).max(0.0);
        Ok((v.own_mean / b, bias_sq + v.own_mean / b))
    }
}

/// Runs the schedule from `setup.init`, recording one trace row per epoch.
/// `observer` sees the iterate after every step.
pub fn run_observed(
    setup: RunSetup<'_>,
    schedule: &RunSchedule,
    mut observer: impl FnMut(&TrainerState),
) -> Result<RunOutput> {
    schedule.validate()?;
    let obj = setup.obj;
    if setup.init.len() != obj.param_dim() {
        return Err(Error::DimensionMismatch {
            expected: obj.param_dim(),
            found: setup.init.len(),
        });
    }
    let lambda0 = match &schedule.lambda {
        LambdaPolicy::Fixed(l) => *l,
        LambdaPolicy::OptimalPerPhase { .. } => 0.0,
    };
    let teacher0 = match &setup.teacher {
        TeacherSource::Fixed(t) => t.clone(),
        TeacherSource::SelfRefresh => setup.init.clone(),
        TeacherSource::None => {
            let needs = !matches!(schedule.mode, Mode::Sgd)
                && !matches!(schedule.lambda, LambdaPolicy::Fixed(l) if l == 0.0);
            if needs {
                return Err(Error::Precondition("distillation mode needs a teacher".into()));
            }
            ParamVector::zeros(obj.param_dim())
        }
    };
    let cfg = KdConfig::new(lambda0, schedule.gamma, teacher0, 1.0)?;
    if cfg.teacher.len() != obj.param_dim() {
        return Err(Error::DimensionMismatch {
            expected: obj.param_dim(),
            found: cfg.teacher.len(),
        });
    }
    let root = Rng::new(setup.seed);
    let mut sampling_rng = root.substream(1);
    let mut state = TrainerState::new(setup.init, root.substream(2));
    let mut sampler = BatchSampler::new(schedule.sampling, obj.len(), schedule.batch_size)?;
    let mut driver = Driver {
        obj,
        schedule,
        teacher_source: setup.teacher,
        cfg,
        lambdas: Vec::new(),
    };
    let epoch_len = schedule.steps_per_epoch(obj.len());
    let mut out = RunOutput {
        trace: Vec::new(),
        extras: Vec::new(),
        final_x: state.x.clone(),
        steps: 0,
        lambdas: Vec::new(),
        diverged: None,
    };
    let mut acc = EpochAccumulator::default();
    let mut epoch = 0u64;

    while state.step < schedule.total_steps {
        if state.step % schedule.phase_length == 0 {
            if state.step > 0 {
                state.phase += 1;
            }
            driver.begin_phase(&mut state)?;
        }
        let batch = sampler.next_batch(&mut sampling_rng);
        let loss = obj.minibatch_loss(&state.x, &batch)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            out.diverged = Some(Divergence {
                step: state.step,
                reason: format!("minibatch loss {loss:e}"),
            });
            break;
        }
        acc.loss_sum += loss;
        acc.batches += 1;
        if schedule.track_variance {
            let (own, about) = driver.variance(&mut state)?;
            push(&mut acc.variance, Some(own));
            push(&mut acc.about_gradient, Some(about));
        }
        if schedule.track_kd_gap && obj.kind().is_mlp() && driver.needs_teacher() {
            let g = approx_gap_stats(obj, &state.x, &driver.cfg.teacher, driver.cfg.lambda, &batch)?;
            push(&mut acc.cosine, g.cosine);
            push(&mut acc.l2, Some(g.l2));
            push(&mut acc.snr, g.snr);
        }
        if let Err(e) = driver.step(&mut state, &batch) {
            match e {
                Error::Diverged { step, reason } => {
                    out.diverged = Some(Divergence { step, reason });
                    break;
                }
                other => return Err(other),
            }
        }
        observer(&state);
        let epoch_done = state.step % epoch_len == 0 || state.step == schedule.total_steps;
        if epoch_done {
            let full_loss = obj.full_loss(&state.x)?;
            if !full_loss.is_finite() || full_loss > DIVERGENCE_LOSS {
                out.diverged = Some(Divergence {
                    step: state.step,
                    reason: format!("full loss {full_loss:e}"),
                });
                break;
            }
            let test_accuracy = match setup.test {
                Some(t) => t.accuracy(&state.x)?,
                None => None,
            };
            out.trace.push(EpochStats {
                epoch,
                run_id: schedule.run_id.clone(),
                seed: setup.seed,
                mode: schedule.mode.name().to_string(),
                lambda: driver.cfg.lambda,
                gamma: schedule.gamma,
                running_avg_loss: acc.loss_sum / acc.batches as f64,
                full_loss,
                grad_variance: mean(acc.variance),
                cosine_mean: mean(acc.cosine),
                l2_mean: mean(acc.l2),
                snr_mean: mean(acc.snr),
                test_accuracy,
            });
            out.extras.push(EpochExtras {
                full_grad_norm: obj.full_grad(&state.x)?.norm(),
                variance_about_gradient: mean(acc.about_gradient),
            });
            acc = EpochAccumulator::default();
            epoch += 1;
        }
    }
    out.final_x = state.x;
    out.steps = state.step;
    out.lambdas = driver.lambdas;
    Ok(out)
}

pub fn run(setup: RunSetup<'_>, schedule: &RunSchedule) -> Result<RunOutput> {
    run_observed(setup, schedule, |_| {})
}
