//! Masked Jacobians, edit-direction discovery with nullspace projection, and
//! the one-step / full-trajectory edits built on them.
//!
//! Discovery takes the top-`r` right singular vectors of `P_Ω J`, picks one,
//! and removes from it every direction that `P_{Ω^C} J` responds to, so the
//! edit changes the predicted clean point inside `Ω` while leaving the rest
//! (to first order) alone.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, LocoError, Result};
use crate::molrg::SubspaceModel;
use crate::pmp::{posterior_mean, JacobianMode, JacobianOperator};
use crate::sampler::{AnalyticPredictor, Ddim};
use crate::spectral::{gpm_topk, GpmOptions, LinearMapHandle, NullspaceProjector, SIGMA_FLOOR_REL};

/// A set of coordinates `Ω ⊆ {0, …, d − 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    dim: usize,
    indices: Vec<usize>,
}

impl Mask {
    /// Indices may come in any order but must be distinct and below `dim`.
    pub fn new(dim: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(LocoError::Precondition(format!("mask index {} repeated", w[0])));
        }
        if let Some(&bad) = indices.last().filter(|&&i| i >= dim) {
            return Err(LocoError::Precondition(format!(
                "mask index {bad} out of range for dimension {dim}"
            )));
        }
        Ok(Self { dim, indices })
    }

    pub fn full(dim: usize) -> Self {
        Self {
            dim,
            indices: (0..dim).collect(),
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
        }
    }

    /// Half-open coordinate range `start..end`.
    pub fn range(dim: usize, start: usize, end: usize) -> Result<Self> {
        Self::new(dim, (start..end).collect())
    }

    /// Comma-separated indices such as `0,1,5`; an empty string is the empty mask.
    pub fn parse(dim: usize, text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(Self::empty(dim));
        }
        let indices = text
            .split(',')
            .map(|tok| {
                tok.trim().parse::<usize>().map_err(|_| {
                    LocoError::Precondition(format!("bad mask index `{}`", tok.trim()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dim, indices)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn complement(&self) -> Self {
        Self {
            dim: self.dim,
            indices: (0..self.dim).filter(|i| !self.contains(*i)).collect(),
        }
    }

    /// `P_Ω v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        self.apply_in_place(&mut out);
        out
    }

    pub fn apply_in_place(&self, v: &mut DVector<f64>) {
        let mut next = self.indices.iter().peekable();
        for (i, x) in v.iter_mut().enumerate() {
            if next.peek() == Some(&&i) {
                next.next();
            } else {
                *x = 0.0;
            }
        }
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, i) in self.indices.iter().enumerate() {
            if n > 0 {
                f.write_str(",")?;
            }
            write!(f, "{i}")?;
        }
        Ok(())
    }
}

/// A unit editing direction in `x_t`-space plus what is needed to reuse it.
#[derive(Clone, Debug, PartialEq)]
pub struct EditDirection {
    pub v_p: DVector<f64>,
    pub t: f64,
    pub omega: Mask,
    /// 1-based index of the singular vector that was picked.
    pub pick: usize,
    pub sigma: f64,
}

impl EditDirection {
    pub fn dim(&self) -> usize {
        self.v_p.len()
    }

    /// `d t pick sigma`, the mask on the second line, then one component per line.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {:.16e} {} {:.16e}\n{}\n",
            self.dim(),
            self.t,
            self.pick,
            self.sigma,
            self.omega
        );
        for x in self.v_p.iter() {
            out.push_str(&format!("{x:.16e}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(1, "expected `d t pick sigma`"));
        }
        let dim: usize = fields[0].parse().map_err(|_| parse_err(1, "bad dimension"))?;
        let t: f64 = fields[1].parse().map_err(|_| parse_err(1, "bad t"))?;
        let pick: usize = fields[2].parse().map_err(|_| parse_err(1, "bad pick"))?;
        let sigma: f64 = fields[3].parse().map_err(|_| parse_err(1, "bad sigma"))?;
        let mask_line = lines.next().ok_or_else(|| parse_err(2, "missing mask line"))?;
        let omega = Mask::parse(dim, mask_line).map_err(|e| parse_err(2, &e.to_string()))?;
        let mut values = Vec::with_capacity(dim);
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            values.push(
                line.parse::<f64>()
                    .map_err(|_| parse_err(n + 3, "bad component"))?,
            );
        }
        if values.len() != dim {
            return Err(parse_err(
                dim + 3,
                &format!("expected {dim} components, found {}", values.len()),
            ));
        }
        Ok(Self {
            v_p: DVector::from_vec(values),
            t,
            omega,
            pick,
            sigma,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_err(line: usize, message: &str) -> LocoError {
    LocoError::Parse {
        line,
        message: message.to_string(),
    }
}

/// `v ↦ P_Ω J v`, adjoint-checked.
pub fn masked_jacobian<'a>(
    model: &'a SubspaceModel,
    x_t: &DVector<f64>,
    t: f64,
    omega: &Mask,
    mode: JacobianMode,
) -> Result<LinearMapHandle<JacobianOperator<'a>>> {
    let op = JacobianOperator::new(model, x_t, t, mode)?.with_mask(omega.clone())?;
    // Probe draws are fixed so discovery stays a pure function of its inputs.
    let mut probe_rng = ChaCha8Rng::seed_from_u64(0x5eed_ad10);
    let tolerance = match mode {
        JacobianMode::Analytic => LinearMapHandle::<JacobianOperator>::ADJOINT_TOL,
        // Central differences carry an O(h²) mismatch between the two products.
        JacobianMode::FiniteDifference => 1e-5,
    };
    LinearMapHandle::with_tolerance(op, tolerance, &mut probe_rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOptions {
    pub r: usize,
    pub r_null: usize,
    pub pick: usize,
    /// When false the candidate is returned without nullspace projection.
    pub project: bool,
    pub mode: JacobianMode,
    pub gpm: GpmOptions,
    pub seed: u64,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            r: 5,
            r_null: 5,
            pick: 1,
            project: true,
            mode: JacobianMode::Analytic,
            gpm: GpmOptions::default(),
            seed: 0,
        }
    }
}

/// Everything computed while discovering a direction.
#[derive(Clone, Debug)]
pub struct Discovery {
    pub direction: EditDirection,
    /// The picked singular vector before projection.
    pub candidate: DVector<f64>,
    /// Right singular vectors of `P_{Ω^C} J` kept after the `σ_floor` filter.
    pub null_basis: DMatrix<f64>,
    pub sigma_inside: Vec<f64>,
    pub sigma_outside: Vec<f64>,
}

/// Finds an editing direction for the region `omega` at `(x_t, t)`.
///
/// `r` and `r_null` are clamped to `d`. The pick is rejected as degenerate when
/// its singular value is below `SIGMA_FLOOR_REL` times the largest singular
/// value seen on either side of the mask, or when projection leaves less than
/// `1e−8` of it.
pub fn discover(
    model: &SubspaceModel,
    x_t: &DVector<f64>,
    t: f64,
    omega: &Mask,
    opts: &EditOptions,
) -> Result<Discovery> {
    let d = model.dim();
    check_dim(d, omega.dim())?;
    let r = opts.r.min(d);
    let r_null = opts.r_null.min(d);
    if opts.pick == 0 || opts.pick > r {
        return Err(LocoError::Precondition(format!(
            "pick = {} must lie in 1..={r}",
            opts.pick
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let inside = masked_jacobian(model, x_t, t, omega, opts.mode)?;
    let svd_in = gpm_topk(&inside, r, &opts.gpm, &mut rng)?;
    let candidate = svd_in.v.column(opts.pick - 1).into_owned();
    let sigma = svd_in.sigma[opts.pick - 1];

    let outside_mask = omega.complement();
    let (projector, sigma_outside) = if r_null == 0 || outside_mask.is_empty() {
        (NullspaceProjector::new(DMatrix::zeros(d, 0))?, Vec::new())
    } else {
        let outside = masked_jacobian(model, x_t, t, &outside_mask, opts.mode)?;
        let svd_out = gpm_topk(&outside, r_null, &opts.gpm, &mut rng)?;
        (NullspaceProjector::from_svd(&svd_out), svd_out.sigma)
    };

    let scale = svd_in.sigma[0].max(sigma_outside.first().copied().unwrap_or(0.0));
    if !(sigma > SIGMA_FLOOR_REL * scale) {
        return Err(LocoError::DegenerateDirection(format!(
            "singular value {sigma:e} of pick {} is numerically zero; the mask does not see the data",
            opts.pick
        )));
    }

    let v = if opts.project {
        projector.apply(&candidate)
    } else {
        candidate.clone()
    };
    let norm = v.norm();
    if norm < 1e-8 {
        return Err(LocoError::DegenerateDirection(format!(
            "projected direction has norm {norm:e}; it lies in the outside-mask span"
        )));
    }

    Ok(Discovery {
        direction: EditDirection {
            v_p: v / norm,
            t,
            omega: omega.clone(),
            pick: opts.pick,
            sigma,
        },
        candidate,
        null_basis: projector.basis().clone(),
        sigma_inside: svd_in.sigma,
        sigma_outside,
    })
}

/// [`discover`] with default options apart from `r`, `r_null` and `pick`.
pub fn find_edit_direction(
    model: &SubspaceModel,
    x_t: &DVector<f64>,
    t: f64,
    omega: &Mask,
    r: usize,
    r_null: usize,
    pick: usize,
) -> Result<EditDirection> {
    let opts = EditOptions {
        r,
        r_null,
        pick,
        ..EditOptions::default()
    };
    Ok(discover(model, x_t, t, omega, &opts)?.direction)
}

fn same_time(dir: &EditDirection, t: f64) -> Result<()> {
    if dir.t == t {
        Ok(())
    } else {
        Err(LocoError::Precondition(format!(
            "direction was found at t = {} but is applied at t = {t}; use transfer_edit",
            dir.t
        )))
    }
}

/// `f(x_t + λ v_p)`.
pub fn one_step_edit(
    model: &SubspaceModel,
    x_t: &DVector<f64>,
    t: f64,
    dir: &EditDirection,
    lambda: f64,
) -> Result<DVector<f64>> {
    same_time(dir, t)?;
    check_dim(model.dim(), dir.dim())?;
    posterior_mean(model, &(x_t + &dir.v_p * lambda), t)
}

/// Inverts `x0` to `t`, adds `λ v_p` and denoises back to `t = 0`.
pub fn apply_edit(
    model: &SubspaceModel,
    x0: &DVector<f64>,
    t: f64,
    dir: &EditDirection,
    lambda: f64,
    n_steps: usize,
) -> Result<DVector<f64>> {
    apply_edit_with(&Ddim::new(model.schedule()), model, x0, t, dir, lambda, n_steps)
}

pub fn apply_edit_with(
    ddim: &Ddim,
    model: &SubspaceModel,
    x0: &DVector<f64>,
    t: f64,
    dir: &EditDirection,
    lambda: f64,
    n_steps: usize,
) -> Result<DVector<f64>> {
    same_time(dir, t)?;
    edit_pipeline(ddim, model, x0, t, &dir.v_p, lambda, n_steps)
}

/// Applies `dir` to another sample, possibly at another timestep. No rescaling.
pub fn transfer_edit(
    model: &SubspaceModel,
    dir: &EditDirection,
    other_x0: &DVector<f64>,
    t_target: f64,
    lambda: f64,
    n_steps: usize,
) -> Result<DVector<f64>> {
    let ddim = Ddim::new(model.schedule());
    edit_pipeline(&ddim, model, other_x0, t_target, &dir.v_p, lambda, n_steps)
}

fn edit_pipeline(
    ddim: &Ddim,
    model: &SubspaceModel,
    x0: &DVector<f64>,
    t: f64,
    v: &DVector<f64>,
    lambda: f64,
    n_steps: usize,
) -> Result<DVector<f64>> {
    check_dim(model.dim(), x0.len())?;
    check_dim(model.dim(), v.len())?;
    let eps = AnalyticPredictor::new(model);
    let x_t = ddim.integrate(x0, 0.0, t, n_steps, &eps)?;
    ddim.integrate(&(x_t + v * lambda), t, 0.0, n_steps, &eps)
}

/// `Σ λ_i v_p,i`, not renormalized. All directions must share one timestep.
pub fn compose_directions(dim: usize, pairs: &[(f64, &EditDirection)]) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(dim);
    let Some((_, first)) = pairs.first() else {
        return Ok(out);
    };
    for (lambda, dir) in pairs {
        check_dim(dim, dir.dim())?;
        if dir.t != first.t {
            return Err(LocoError::Precondition(format!(
                "cannot compose directions found at t = {} and t = {}",
                first.t, dir.t
            )));
        }
        out.axpy(*lambda, &dir.v_p, 1.0);
    }
    Ok(out)
}

/// `(‖P_Ω Δf‖, ‖P_{Ω^C} Δf‖)` with `Δf = f(x_t + λ v_p) − f(x_t)`.
pub fn disentanglement_score(
    model: &SubspaceModel,
    x_t: &DVector<f64>,
    t: f64,
    dir: &EditDirection,
    lambda: f64,
) -> Result<(f64, f64)> {
    masked_change(model, x_t, t, &dir.v_p, &dir.omega, lambda)
}

/// [`disentanglement_score`] for an arbitrary direction `v`.
pub fn masked_change(
    model: &SubspaceModel,
    x_t: &DVector<f64>,
    t: f64,
    v: &DVector<f64>,
    omega: &Mask,
    lambda: f64,
) -> Result<(f64, f64)> {
    check_dim(model.dim(), v.len())?;
    check_dim(model.dim(), omega.dim())?;
    let delta = posterior_mean(model, &(x_t + v * lambda), t)? - posterior_mean(model, x_t, t)?;
    let inside = omega.apply(&delta).norm();
    let outside = omega.complement().apply(&delta).norm();
    Ok((inside, outside))
}
