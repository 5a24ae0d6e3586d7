//! Deterministic DDIM integration in both directions.
//!
//! One step from `t` to `t'` is
//!
//! ```text
//! x' = √α' (x − √(1 − α) ε̂(x, t)) / √α + √(1 − α') ε̂(x, t)
//! ```
//!
//! With `t' < t` this denoises; with `t' > t` it is the usual explicit
//! inversion. The explicit inversion is only first-order consistent with the
//! denoiser, so [`InversionMode::FixedPoint`] is offered as well: it solves for
//! the `x'` whose denoising step lands exactly on `x`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{LocoError, Result};
use crate::molrg::SubspaceModel;
use crate::pmp::epsilon_predictor;
use crate::schedule::{check_time, NoiseSchedule};

/// Generation starts here rather than at `t = 1`, where `√α` vanishes.
pub const GENERATION_START: f64 = 1.0 - 1e-3;

/// A noise prediction `ε̂(x, t)`.
pub trait NoisePredictor {
    fn predict(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&DVector<f64>, f64) -> Result<DVector<f64>>,
{
    fn predict(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self(x, t)
    }
}

/// The exact ε-prediction of a [`SubspaceModel`].
#[derive(Clone, Copy)]
pub struct AnalyticPredictor<'a> {
    model: &'a SubspaceModel,
}

impl<'a> AnalyticPredictor<'a> {
    pub fn new(model: &'a SubspaceModel) -> Self {
        Self { model }
    }
}

impl NoisePredictor for AnalyticPredictor<'_> {
    fn predict(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        epsilon_predictor(self.model, x, t)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GridKind {
    #[default]
    Uniform,
    /// Spacing grows linearly away from `t = 0`.
    Quadratic,
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridKind::Uniform => "uniform",
            GridKind::Quadratic => "quadratic",
        })
    }
}

impl FromStr for GridKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "uniform" => Ok(GridKind::Uniform),
            "quadratic" => Ok(GridKind::Quadratic),
            other => Err(format!("unknown grid `{other}` (expected uniform or quadratic)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InversionMode {
    /// The DDIM update applied with an increasing time step.
    #[default]
    Explicit,
    /// Exact inverse of the denoising step, found by fixed-point iteration.
    FixedPoint,
}

impl fmt::Display for InversionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InversionMode::Explicit => "explicit",
            InversionMode::FixedPoint => "fixed-point",
        })
    }
}

impl FromStr for InversionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "explicit" => Ok(InversionMode::Explicit),
            "fixed-point" | "fixedpoint" => Ok(InversionMode::FixedPoint),
            other => Err(format!(
                "unknown inversion mode `{other}` (expected explicit or fixed-point)"
            )),
        }
    }
}

/// Strictly monotone sequence of timesteps in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(LocoError::Precondition("a time grid needs at least two points".into()));
        }
        for &t in &points {
            check_time(t)?;
        }
        let up = points.windows(2).all(|w| w[1] > w[0]);
        let down = points.windows(2).all(|w| w[1] < w[0]);
        if !(up || down) {
            return Err(LocoError::Precondition("time grid is not strictly monotone".into()));
        }
        Ok(Self { points })
    }

    /// `n_steps + 1` points from `from` to `to`, endpoints exact.
    pub fn new(from: f64, to: f64, n_steps: usize, kind: GridKind) -> Result<Self> {
        check_time(from)?;
        check_time(to)?;
        if n_steps == 0 {
            return Err(LocoError::Precondition("n_steps must be at least 1".into()));
        }
        if from == to {
            return Err(LocoError::Precondition("grid endpoints coincide".into()));
        }
        let (lo, hi) = (from.min(to), from.max(to));
        let n = n_steps as f64;
        let mut ascending: Vec<f64> = (0..=n_steps)
            .map(|i| {
                let s = i as f64 / n;
                match kind {
                    GridKind::Uniform => lo + (hi - lo) * s,
                    GridKind::Quadratic => lo + (hi - lo) * s * s,
                }
            })
            .collect();
        ascending[0] = lo;
        ascending[n_steps] = hi;
        if from > to {
            ascending.reverse();
        }
        Self::from_points(ascending)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn is_ascending(&self) -> bool {
        self.points[1] > self.points[0]
    }
}

/// Explicit DDIM update from `t` to `t_next`.
///
/// At `t = 0` (only reachable when inverting) the predictor is evaluated at
/// `t_next`, since `ε̂` is undefined on the clean data.
pub fn ddim_step<P: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    x: &DVector<f64>,
    t: f64,
    t_next: f64,
    eps_fn: &P,
) -> Result<DVector<f64>> {
    let alpha = schedule.alpha(t)?;
    let alpha_next = schedule.alpha(t_next)?;
    if t == t_next {
        return Err(LocoError::Precondition(format!("degenerate step at t = {t}")));
    }
    if alpha == 0.0 {
        return Err(LocoError::Singular {
            t,
            reason: "cannot denoise from α = 0",
        });
    }
    let eval_at = if t == 0.0 { t_next } else { t };
    let eps = eps_fn.predict(x, eval_at)?;
    Ok(combine(x, &eps, alpha, alpha_next))
}

fn combine(x: &DVector<f64>, eps: &DVector<f64>, alpha: f64, alpha_next: f64) -> DVector<f64> {
    let x0_hat = (x - eps * (1.0 - alpha).sqrt()) / alpha.sqrt();
    x0_hat * alpha_next.sqrt() + eps * (1.0 - alpha_next).sqrt()
}

/// DDIM integrator with a fixed schedule, grid shape and inversion mode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Ddim {
    pub schedule: NoiseSchedule,
    pub grid: GridKind,
    pub inversion: InversionMode,
}

impl Ddim {
    const FIXED_POINT_ITERS: usize = 200;
    const FIXED_POINT_TOL: f64 = 1e-15;

    pub fn new(schedule: NoiseSchedule) -> Self {
        Self {
            schedule,
            ..Self::default()
        }
    }

    pub fn with_grid(mut self, grid: GridKind) -> Self {
        self.grid = grid;
        self
    }

    pub fn with_inversion(mut self, inversion: InversionMode) -> Self {
        self.inversion = inversion;
        self
    }

    /// One step; inverting steps honour [`InversionMode`].
    pub fn step<P: NoisePredictor + ?Sized>(
        &self,
        x: &DVector<f64>,
        t: f64,
        t_next: f64,
        eps_fn: &P,
    ) -> Result<DVector<f64>> {
        let explicit = ddim_step(&self.schedule, x, t, t_next, eps_fn)?;
        if t_next < t || self.inversion == InversionMode::Explicit {
            return Ok(explicit);
        }
        // Solve x = step(x', t_next → t) for x'.
        let alpha = self.schedule.alpha(t)?;
        let alpha_next = self.schedule.alpha(t_next)?;
        if alpha_next == 0.0 {
            return Err(LocoError::Singular {
                t: t_next,
                reason: "exact inversion into α = 0 has no denoising step to invert",
            });
        }
        let mut guess = explicit;
        for _ in 0..Self::FIXED_POINT_ITERS {
            let eps = eps_fn.predict(&guess, t_next)?;
            let next = (x - &eps * (1.0 - alpha).sqrt()) * (alpha_next / alpha).sqrt()
                + &eps * (1.0 - alpha_next).sqrt();
            let change = (&next - &guess).norm();
            guess = next;
            if change <= Self::FIXED_POINT_TOL * guess.norm().max(1.0) {
                return Ok(guess);
            }
        }
        Err(LocoError::Conditioning(format!(
            "fixed-point inversion from t = {t} to {t_next} did not converge"
        )))
    }

    /// Walks `x` from `t_from` to `t_to` in `n_steps` steps.
    pub fn integrate<P: NoisePredictor + ?Sized>(
        &self,
        x: &DVector<f64>,
        t_from: f64,
        t_to: f64,
        n_steps: usize,
        eps_fn: &P,
    ) -> Result<DVector<f64>> {
        check_time(t_from)?;
        check_time(t_to)?;
        if n_steps == 0 {
            return Err(LocoError::Precondition("n_steps must be at least 1".into()));
        }
        if t_from == t_to {
            return Ok(x.clone());
        }
        let grid = TimeGrid::new(t_from, t_to, n_steps, self.grid)?;
        self.integrate_on(x, &grid, eps_fn)
    }

    pub fn integrate_on<P: NoisePredictor + ?Sized>(
        &self,
        x: &DVector<f64>,
        grid: &TimeGrid,
        eps_fn: &P,
    ) -> Result<DVector<f64>> {
        let mut x = x.clone();
        for w in grid.points().windows(2) {
            x = self.step(&x, w[0], w[1], eps_fn)?;
        }
        Ok(x)
    }

    /// `‖DDIM(DDIM-Inv(x0, t_mid), 0) − x0‖ / ‖x0‖` with the analytic predictor.
    pub fn roundtrip_error(
        &self,
        model: &SubspaceModel,
        x0: &DVector<f64>,
        t_mid: f64,
        n_steps: usize,
    ) -> Result<f64> {
        let eps = AnalyticPredictor::new(model);
        let noisy = self.integrate(x0, 0.0, t_mid, n_steps, &eps)?;
        let back = self.integrate(&noisy, t_mid, 0.0, n_steps, &eps)?;
        let scale = x0.norm();
        let err = (back - x0).norm();
        Ok(if scale > 0.0 { err / scale } else { err })
    }
}

/// [`Ddim::roundtrip_error`] with the model's schedule, a uniform grid and
/// explicit inversion.
pub fn roundtrip_error(
    model: &SubspaceModel,
    x0: &DVector<f64>,
    t_mid: f64,
    n_steps: usize,
) -> Result<f64> {
    Ddim::new(model.schedule()).roundtrip_error(model, x0, t_mid, n_steps)
}
