//! Nesterov-accelerated recovery with an adaptively weighted score term.
//!
//! One iteration, with look-ahead point `z = x + μv`:
//!
//! ```text
//! g  = Pᵀ ∇L(P z)                         (data gradient, lifted to the iterate grid)
//! s  = S(z)                               (prior score)
//! ŝ[i] = s[i] · ‖g‖/‖s‖   if i is sampled by P
//!        s[i] · α         otherwise
//! v ← μv − η (g − ŝ)
//! x ← x + v
//! ```
//!
//! In standard mode `P` is the identity, every pixel is sampled and the
//! score is rescaled to the norm of the data gradient.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::error::{MtdError, Result};
use crate::forward::DownsampleOp;
use crate::image::Image;
use crate::moments::Objective;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::score::Score;

#[derive(Clone, Debug, PartialEq)]
pub enum Mode {
    Standard,
    SuperRes(DownsampleOp),
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitPolicy<T> {
    /// Uniform `[0, 1)` pixels from the configured seed.
    UniformRandom,
    WarmStart(Image<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryConfig<T> {
    pub momentum: T,
    pub learning_rate: T,
    pub iterations: usize,
    /// Weight `α` of the raw score on pixels outside the sampled set.
    pub score_factor: T,
    pub mode: Mode,
    pub init: InitPolicy<T>,
    pub seed: u64,
    /// Record traces every `log_every` steps (and at the last step); 0 logs only the last step.
    pub log_every: usize,
    /// Clip iterates to `[0, 1]` after every step.
    pub project_unit_box: bool,
}

impl<T: Scalar> RecoveryConfig<T> {
    pub fn new(momentum: T, learning_rate: T, iterations: usize) -> Self {
        Self {
            momentum,
            learning_rate,
            iterations,
            score_factor: T::zero(),
            mode: Mode::Standard,
            init: InitPolicy::UniformRandom,
            seed: 0,
            log_every: 0,
            project_unit_box: false,
        }
    }

    /// Parameters of the standard-mode experiment (μ = 0.993, η = 18000, T = 10000).
    pub fn standard_reference() -> Self {
        Self::new(T::lit(0.993), T::lit(18000.0), 10_000)
    }

    /// Parameters of the super-resolution experiment (μ = 0.993, η = 18000,
    /// α = 1e-10, T = 5000).
    pub fn superres_reference(op: DownsampleOp) -> Self {
        Self {
            score_factor: T::lit(1e-10),
            mode: Mode::SuperRes(op),
            ..Self::new(T::lit(0.993), T::lit(18000.0), 5_000)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MtdError::Config(m.to_string()));
        if !(self.momentum >= T::zero() && self.momentum < T::one()) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.learning_rate > T::zero()) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.iterations == 0 {
            return bad("iteration count must be >= 1");
        }
        if !(self.score_factor >= T::zero()) || !self.score_factor.is_finite() {
            return bad("score factor must be >= 0");
        }
        Ok(())
    }
}

/// Iterate and velocity of the accelerated scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryState<T> {
    pub x: Image<T>,
    pub v: Image<T>,
    pub t: usize,
}

impl<T: Scalar> RecoveryState<T> {
    pub fn new(x: Image<T>) -> Self {
        let v = Image::zeros(x.width(), x.height());
        Self { x, v, t: 0 }
    }
}

/// Norms observed during one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport<T> {
    pub grad_norm: T,
    pub score_norm: T,
}

#[derive(Clone, Debug)]
pub struct RecoveryResult<T> {
    pub estimate: Image<T>,
    /// Data loss at the final iterate.
    pub final_loss: T,
    /// `(step, loss)` at logged steps.
    pub loss_trace: Vec<(usize, T)>,
    pub grad_norm_trace: Vec<T>,
    pub score_norm_trace: Vec<T>,
    pub wall_time: Duration,
}

/// Geometry of one run: the operator between iterate and data grids.
struct Lift<'a> {
    op: Option<&'a DownsampleOp>,
    mask: Vec<bool>,
}

impl<'a> Lift<'a> {
    fn new<T: Scalar>(cfg: &'a RecoveryConfig<T>, data_side: usize) -> Result<(Self, usize)> {
        match &cfg.mode {
            Mode::Standard => Ok((
                Lift {
                    op: None,
                    mask: vec![true; data_side * data_side],
                },
                data_side,
            )),
            Mode::SuperRes(op) => {
                if op.l_low() != data_side {
                    return Err(MtdError::shape(format!(
                        "down-sampler emits {0}x{0}, data term expects {1}x{1}",
                        op.l_low(),
                        data_side
                    )));
                }
                Ok((
                    Lift {
                        op: Some(op),
                        mask: op.sampled_mask(),
                    },
                    op.l_high(),
                ))
            }
        }
    }

    fn down<T: Scalar>(&self, x: &Image<T>) -> Result<Image<T>> {
        match self.op {
            Some(op) => op.apply(x),
            None => Ok(x.clone()),
        }
    }

    fn gradient<T: Scalar, O: Objective<T> + ?Sized>(
        &self,
        objective: &O,
        z: &Image<T>,
    ) -> Result<Image<T>> {
        match self.op {
            Some(op) => op.adjoint(&objective.gradient(&op.apply(z)?)?),
            None => objective.gradient(z),
        }
    }
}

fn step_with<T, O, S>(
    state: &mut RecoveryState<T>,
    objective: &O,
    prior: &S,
    cfg: &RecoveryConfig<T>,
    lift: &Lift<'_>,
) -> Result<StepReport<T>>
where
    T: Scalar,
    O: Objective<T> + ?Sized,
    S: Score<T> + ?Sized,
{
    let (mu, eta, alpha) = (cfg.momentum, cfg.learning_rate, cfg.score_factor);
    let look = state.x.axpy(mu, &state.v)?;
    let g = lift.gradient(objective, &look)?;
    let s = prior.score(&look)?;
    if !g.same_shape(&state.x) || !s.same_shape(&state.x) {
        return Err(MtdError::shape("gradient or score does not match the iterate"));
    }
    let (gn, sn) = (g.norm(), s.norm());
    let ratio = if sn > T::zero() { gn / sn } else { T::zero() };
    let (x, v) = (state.x.data_mut(), state.v.data_mut());
    for i in 0..x.len() {
        let weight = if lift.mask[i] { ratio } else { alpha };
        let shat = s.data()[i] * weight;
        v[i] = mu * v[i] - eta * (g.data()[i] - shat);
        x[i] += v[i];
        if cfg.project_unit_box {
            x[i] = x[i].max(T::zero()).min(T::one());
        }
    }
    state.t += 1;
    Ok(StepReport {
        grad_norm: gn,
        score_norm: sn,
    })
}

/// Advances `state` by one iteration.
pub fn nag_step<T, O, S>(
    state: &mut RecoveryState<T>,
    objective: &O,
    prior: &S,
    cfg: &RecoveryConfig<T>,
) -> Result<StepReport<T>>
where
    T: Scalar,
    O: Objective<T> + ?Sized,
    S: Score<T> + ?Sized,
{
    let (lift, _) = Lift::new(cfg, objective.side())?;
    step_with(state, objective, prior, cfg, &lift)
}

fn initial_iterate<T: Scalar>(cfg: &RecoveryConfig<T>, side: usize) -> Result<Image<T>> {
    match &cfg.init {
        InitPolicy::UniformRandom => {
            let mut rng = stream(cfg.seed, &[0x1a17]);
            Ok(Image::from_fn(side, side, |_, _| {
                T::lit(rng.random::<f64>())
            }))
        }
        InitPolicy::WarmStart(img) => {
            if img.side()? != side {
                return Err(MtdError::shape(format!(
                    "warm start is {}x{}, iterate must be {side}x{side}",
                    img.width(),
                    img.height()
                )));
            }
            Ok(img.clone())
        }
    }
}

/// Runs the full iteration from the configured initialization.
pub fn recover<T, O, S>(objective: &O, prior: &S, cfg: &RecoveryConfig<T>) -> Result<RecoveryResult<T>>
where
    T: Scalar,
    O: Objective<T> + ?Sized,
    S: Score<T> + ?Sized,
{
    cfg.validate()?;
    let started = Instant::now();
    let (lift, side) = Lift::new(cfg, objective.side())?;
    if prior.side() != side {
        return Err(MtdError::shape(format!(
            "prior is defined on {0}x{0} images, iterate is {side}x{side}",
            prior.side()
        )));
    }
    let mut state = RecoveryState::new(initial_iterate(cfg, side)?);
    let mut loss_trace = Vec::new();
    let mut grad_norm_trace = Vec::new();
    let mut score_norm_trace = Vec::new();
    for t in 0..cfg.iterations {
        let previous = state.x.clone();
        let report = match step_with(&mut state, objective, prior, cfg, &lift) {
            Ok(r) => Some(r),
            Err(MtdError::Numeric(_)) => None,
            Err(e) => return Err(e),
        };
        let report = match report {
            Some(r) if state.x.is_finite() && state.v.is_finite() => r,
            _ => return Err(MtdError::Divergence {
                iteration: t,
                side,
                last_finite: previous.data().iter().map(|v| v.to_f64_lossy()).collect(),
            }),
        };
        let last = t + 1 == cfg.iterations;
        if last || (cfg.log_every > 0 && (t + 1) % cfg.log_every == 0) {
            loss_trace.push((t + 1, objective.loss(&lift.down(&state.x)?)?));
            grad_norm_trace.push(report.grad_norm);
            score_norm_trace.push(report.score_norm);
        }
    }
    let final_loss = loss_trace.last().map(|&(_, l)| l).unwrap_or(T::nan());
    Ok(RecoveryResult {
        estimate: state.x,
        final_loss,
        loss_trace,
        grad_norm_trace,
        score_norm_trace,
        wall_time: started.elapsed(),
    })
}

/// Runs `restarts` independent initializations (seeds derived from
/// `cfg.seed`) and keeps the run with the smallest final data loss.
/// Returns the winning restart index and its result, or the last divergence
/// when every restart diverged.
pub fn recover_best_of<T, O, S>(
    objective: &O,
    prior: &S,
    cfg: &RecoveryConfig<T>,
    restarts: usize,
) -> Result<(usize, RecoveryResult<T>)>
where
    T: Scalar,
    O: Objective<T> + ?Sized,
    S: Score<T> + ?Sized,
{
    let mut best: Option<(usize, RecoveryResult<T>)> = None;
    let mut diverged = None;
    for k in 0..restarts.max(1) {
        let run_cfg = RecoveryConfig {
            seed: crate::rng::derive_seed(cfg.seed, &[k as u64]),
            ..cfg.clone()
        };
        let res = match recover(objective, prior, &run_cfg) {
            Ok(r) => r,
            // A diverged restart simply loses; the others may still succeed.
            Err(e @ MtdError::Divergence { .. }) => {
                diverged = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| res.final_loss < b.final_loss || b.final_loss.is_nan());
        if better {
            best = Some((k, res));
        }
    }
    best.ok_or_else(|| diverged.expect("at least one restart ran"))
}

/// Relative Frobenius error `‖x* − x̂‖ / ‖x*‖`.
pub fn evaluate_error<T: Scalar>(x_hat: &Image<T>, x_star: &Image<T>) -> Result<T> {
    if !x_hat.same_shape(x_star) {
        return Err(MtdError::shape("estimate and ground truth differ in shape"));
    }
    let denom = x_star.norm();
    if denom == T::zero() {
        return Err(MtdError::Undefined(
            "relative error against a zero ground truth".into(),
        ));
    }
    Ok(x_star.axpy(-T::one(), x_hat)?.norm() / denom)
}
