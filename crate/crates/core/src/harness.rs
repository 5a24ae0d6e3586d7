//! Experiment drivers. Each returns a [`CurveTable`] with one row per grid
//! point; failed cells are kept as rows with an `error` status.
//!
//! Randomness: a driver draws one base seed from the caller's generator and
//! derives an independent ChaCha stream per `(curve, grid point, sample)` cell,
//! so results do not depend on how rayon schedules the cells.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{LocoError, Result};
use crate::linalg::{random_unit_vector, standard_normal_matrix, standard_normal_vector};
use crate::molrg::{noised, SubspaceModel};
use crate::pmp::{
    jacobian_dense, posterior_mean, weights, JacobianMode, JacobianOperator, DENSE_LIMIT,
};
use crate::spectral::{
    gpm_topk, numerical_rank, principal_angles, singular_values, GpmOptions, LinearMap, SIGMA_FLOOR_REL,
};

/// Errors at or below this are rounding, not curvature.
pub const LINEARITY_FLOOR: f64 = 1e-10;
pub const SYMMETRY_TOL_ANALYTIC: f64 = 1e-12;
pub const SYMMETRY_TOL_FD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// A hard invariant failed.
    Violation,
    /// A soft expectation failed; reported, not enforced.
    Finding,
    Error,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Ok => "ok",
            Status::Violation => "violation",
            Status::Finding => "finding",
            Status::Error => "error",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub values: Vec<f64>,
    pub status: Status,
}

/// A named numeric table with `key=value` metadata and a trailing status column.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<CurveRow>,
    pub meta: Vec<(String, String)>,
}

impl CurveTable {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            meta: Vec::new(),
        }
    }

    pub fn push(&mut self, values: Vec<f64>, status: Status) {
        assert_eq!(values.len(), self.columns.len(), "ragged row in {}", self.name);
        self.rows.push(CurveRow { values, status });
    }

    /// Whitespace in values is replaced by `_` to keep the meta line parseable.
    pub fn set_meta(&mut self, key: &str, value: impl fmt::Display) {
        let value: String = value
            .to_string()
            .chars()
            .map(|c| if c.is_whitespace() { '_' } else { c })
            .collect();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.values[j]).collect())
    }

    pub fn worst_status(&self) -> Status {
        let rank = |s: Status| match s {
            Status::Ok => 0,
            Status::Finding => 1,
            Status::Error => 2,
            Status::Violation => 3,
        };
        self.rows
            .iter()
            .map(|r| r.status)
            .max_by_key(|s| rank(*s))
            .unwrap_or(Status::Ok)
    }

    pub fn has_violations(&self) -> bool {
        self.rows
            .iter()
            .any(|r| matches!(r.status, Status::Violation | Status::Error))
    }

    /// `# meta k=v …`, the header, then rows with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# meta");
        let _ = write!(out, " name={}", self.name);
        for (k, v) in &self.meta {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
        out.push_str(&self.columns.join(","));
        out.push_str(",status\n");
        for row in &self.rows {
            for v in &row.values {
                let _ = write!(out, "{v:.16e},");
            }
            let _ = writeln!(out, "{}", row.status);
        }
        out
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.csv", self.name));
        std::fs::write(&path, self.to_csv())?;
        Ok(path)
    }
}

/// Shared settings of the drivers.
#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub t_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub eta: f64,
    pub n_samples: usize,
    /// Where the linearity constant is calibrated.
    pub calibration_t: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            t_grid: default_t_grid(),
            lambda_grid: vec![1.0, 2.0, 5.0, 10.0, 20.0, 40.0],
            eta: 0.99,
            n_samples: 15,
            calibration_t: 0.5,
        }
    }
}

/// `{0.1, 0.2, …, 0.9, 0.95}`.
pub fn default_t_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    grid.push(0.95);
    grid
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `base ⊕ splitmix64(splitmix64(tag) ⊕ index)`.
pub fn cell_seed(base: u64, tag: u64, index: u64) -> u64 {
    base ^ splitmix64(splitmix64(tag) ^ index)
}

fn cell_rng(base: u64, tag: u64, grid: usize, sample: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cell_seed(base, tag, ((grid as u64) << 32) | sample as u64))
}

const TAG_RANK: u64 = 1;
const TAG_LINEARITY: u64 = 2;
const TAG_SYMMETRY: u64 = 3;
const TAG_SUBSPACE: u64 = 4;
const TAG_EPSRANK: u64 = 5;
const TAG_THEOREM_LINEAR: u64 = 6;
const TAG_GPM: u64 = 7;

const GPM_CHECK_NOISE: f64 = 0.5;
pub const GPM_SIGMA_TOL: f64 = 1e-6;
pub const GPM_ANGLE_TOL: f64 = 1e-4;

/// A clean point, its noise and the noised point.
struct Draw {
    x0: DVector<f64>,
    eps: DVector<f64>,
    x_t: DVector<f64>,
}

fn draw<R: Rng>(model: &SubspaceModel, t: f64, rng: &mut R) -> Result<Draw> {
    let alpha = model.schedule().alpha(t)?;
    let x0 = model.sample_x0(rng).x0;
    let eps = standard_normal_vector(model.dim(), rng);
    let x_t = noised(&x0, &eps, alpha);
    Ok(Draw { x0, eps, x_t })
}

fn describe(table: &mut CurveTable, model: &SubspaceModel, base_seed: u64) {
    table.set_meta("d", model.dim());
    table.set_meta("K", model.num_components());
    let ranks: Vec<String> = model.ranks().iter().map(|r| r.to_string()).collect();
    table.set_meta("ranks", ranks.join(","));
    table.set_meta("schedule", model.schedule().kind());
    table.set_meta("base_seed", base_seed);
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

/// Count of singular values above `SIGMA_FLOOR_REL · σ_1`.
pub fn raw_rank(sigma: &[f64]) -> usize {
    let floor = SIGMA_FLOOR_REL * sigma.first().copied().unwrap_or(0.0);
    sigma.iter().filter(|s| **s > floor).count()
}

/// η-rank when only the leading singular values are known and the remaining
/// energy is summarized by `tail_energy = Σ_{i>k} σ_i²`.
pub fn rank_with_tail(sigma: &[f64], tail_energy: f64, eta: f64) -> Result<usize> {
    let head: f64 = sigma.iter().map(|s| s * s).sum();
    let total = head + tail_energy.max(0.0);
    if total == 0.0 {
        return Ok(0);
    }
    let mut cum = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        cum += s * s;
        if (cum / total).sqrt() > eta {
            return Ok(i + 1);
        }
    }
    // Not reached within the computed head; the rank is at least k + 1.
    Ok(sigma.len() + 1)
}

/// Singular values of `J` at `(x, t)`, dense when possible and otherwise the
/// top `Σ r_k + 5` from GPM together with a Hutchinson estimate of the rest.
fn jacobian_spectrum(
    model: &SubspaceModel,
    x: &DVector<f64>,
    t: f64,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, usize)> {
    if model.dim() <= DENSE_LIMIT {
        let sigma = singular_values(&jacobian_dense(model, x, t)?)?;
        let rank = numerical_rank(&sigma, eta)?;
        return Ok((sigma, rank));
    }
    let op = JacobianOperator::new(model, x, t, JacobianMode::Analytic)?;
    let k = (model.total_rank() + 5).min(model.dim());
    let svd = gpm_topk(&op, k, &GpmOptions::default(), rng)?;
    let probes = 32;
    let mut frob = 0.0;
    for _ in 0..probes {
        let z = standard_normal_vector(model.dim(), rng);
        frob += op.apply(&z).norm_squared();
    }
    frob /= probes as f64;
    let head: f64 = svd.sigma.iter().map(|s| s * s).sum();
    let rank = rank_with_tail(&svd.sigma, frob - head, eta)?;
    Ok((svd.sigma, rank))
}

fn summarize(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

fn cells(grid_len: usize, n_samples: usize) -> Vec<(usize, usize)> {
    (0..grid_len)
        .flat_map(|g| (0..n_samples).map(move |s| (g, s)))
        .collect()
}

/// Numerical rank of the Jacobian against `t`.
pub fn rank_ratio_curve<R: RngCore>(
    model: &SubspaceModel,
    t_grid: &[f64],
    eta: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<CurveTable> {
    numerical_rank(&[1.0], eta)?;
    let base = rng.next_u64();
    let d = model.dim() as f64;
    let bound = model.total_rank();
    let results: Vec<Result<(usize, usize)>> = cells(t_grid.len(), n_samples)
        .into_par_iter()
        .map(|(g, s)| {
            let mut rng = cell_rng(base, TAG_RANK, g, s);
            let t = t_grid[g];
            let x = draw(model, t, &mut rng)?.x_t;
            let (sigma, rank) = jacobian_spectrum(model, &x, t, eta, &mut rng)?;
            Ok((rank, raw_rank(&sigma)))
        })
        .collect();

    let mut table = CurveTable::new(
        "rank",
        &[
            "t",
            "mean_rank",
            "min_rank",
            "max_rank",
            "mean_ratio",
            "min_ratio",
            "max_ratio",
            "max_raw_rank",
            "rank_bound",
            "violations",
            "samples",
        ],
    );
    for (g, chunk) in results.chunks(n_samples.max(1)).enumerate().take(t_grid.len()) {
        let ok: Vec<(usize, usize)> = chunk.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let ranks: Vec<f64> = ok.iter().map(|(r, _)| *r as f64).collect();
        let (mean, min, max) = summarize(&ranks);
        let raw_max = ok.iter().map(|(_, r)| *r).max().map_or(f64::NAN, |r| r as f64);
        let violations = ok.iter().filter(|(r, _)| *r > bound).count();
        let status = if ok.len() < chunk.len() || ok.is_empty() {
            Status::Error
        } else if violations > 0 {
            Status::Violation
        } else {
            Status::Ok
        };
        table.push(
            vec![
                t_grid[g],
                mean,
                min,
                max,
                mean / d,
                min / d,
                max / d,
                raw_max,
                bound as f64,
                violations as f64,
                ok.len() as f64,
            ],
            status,
        );
    }
    describe(&mut table, model, base);
    table.set_meta("eta", eta);
    table.set_meta("n_samples", n_samples);
    table.set_meta("t_grid", join(t_grid));
    Ok(table)
}

/// One linearization measurement at `x` along unit `dx`.
struct Linearized {
    norm_ratio: f64,
    cosine: f64,
    err: f64,
}

fn linearize(
    model: &SubspaceModel,
    op: &JacobianOperator<'_>,
    f_x: &DVector<f64>,
    jdx: &DVector<f64>,
    dx: &DVector<f64>,
    lambda: f64,
) -> Result<Linearized> {
    let moved = posterior_mean(model, &(op.point() + dx * lambda), op.t())?;
    let linear = f_x + jdx * lambda;
    let (nm, nl) = (moved.norm(), linear.norm());
    let (norm_ratio, cosine) = if nm == 0.0 && nl == 0.0 {
        (1.0, 1.0)
    } else if nl == 0.0 || nm == 0.0 {
        (if nl == 0.0 { f64::INFINITY } else { 0.0 }, 0.0)
    } else {
        (nm / nl, moved.dot(&linear) / (nm * nl))
    };
    Ok(Linearized {
        norm_ratio,
        cosine,
        err: (moved - linear).norm(),
    })
}

/// Norm ratio and cosine between `f(x + λΔx)` and `f(x) + λJΔx` against `λ`.
pub fn linearity_curve<R: RngCore>(
    model: &SubspaceModel,
    t: f64,
    lambda_grid: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<CurveTable> {
    model.noisy_alpha(t)?;
    let base = rng.next_u64();
    let per_sample: Vec<Result<Vec<Linearized>>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = cell_rng(base, TAG_LINEARITY, 0, s);
            let x = draw(model, t, &mut rng)?.x_t;
            let dx = random_unit_vector(model.dim(), &mut rng);
            let op = JacobianOperator::new(model, &x, t, JacobianMode::Analytic)?;
            let f_x = posterior_mean(model, &x, t)?;
            let jdx = op.jvp(&dx);
            lambda_grid
                .iter()
                .map(|&l| linearize(model, &op, &f_x, &jdx, &dx, l))
                .collect()
        })
        .collect();

    let mut table = CurveTable::new(
        "linearity",
        &["lambda", "norm_ratio", "cosine", "mean_err", "max_err", "samples"],
    );
    let ok: Vec<&Vec<Linearized>> = per_sample.iter().filter_map(|r| r.as_ref().ok()).collect();
    let status = if ok.len() < per_sample.len() || ok.is_empty() {
        Status::Error
    } else {
        Status::Ok
    };
    for (j, &lambda) in lambda_grid.iter().enumerate() {
        let ratios: Vec<f64> = ok.iter().map(|v| v[j].norm_ratio).collect();
        let cosines: Vec<f64> = ok.iter().map(|v| v[j].cosine).collect();
        let errs: Vec<f64> = ok.iter().map(|v| v[j].err).collect();
        let (mean_err, _, max_err) = summarize(&errs);
        table.push(
            vec![
                lambda,
                summarize(&ratios).0,
                summarize(&cosines).0,
                mean_err,
                max_err,
                ok.len() as f64,
            ],
            status,
        );
    }
    describe(&mut table, model, base);
    table.set_meta("t", t);
    table.set_meta("n_samples", n_samples);
    table.set_meta("lambda_grid", join(lambda_grid));
    Ok(table)
}

/// `‖J − Jᵀ‖_F / ‖J‖_F` of the operator at `(x, t)`, materialized column by
/// column through `jvp`. Zero for the zero map.
pub fn asymmetry(
    model: &SubspaceModel,
    x: &DVector<f64>,
    t: f64,
    mode: JacobianMode,
) -> Result<f64> {
    let j = JacobianOperator::new(model, x, t, mode)?.to_dense()?;
    let norm = j.norm();
    Ok(if norm == 0.0 {
        0.0
    } else {
        (&j - j.transpose()).norm() / norm
    })
}

/// Relative asymmetry of the Jacobian against `t`.
pub fn symmetry_curve<R: RngCore>(
    model: &SubspaceModel,
    t_grid: &[f64],
    n_samples: usize,
    mode: JacobianMode,
    rng: &mut R,
) -> Result<CurveTable> {
    let base = rng.next_u64();
    let tol = match mode {
        JacobianMode::Analytic => SYMMETRY_TOL_ANALYTIC,
        JacobianMode::FiniteDifference => SYMMETRY_TOL_FD,
    };
    let results: Vec<Result<f64>> = cells(t_grid.len(), n_samples)
        .into_par_iter()
        .map(|(g, s)| {
            let mut rng = cell_rng(base, TAG_SYMMETRY, g, s);
            let t = t_grid[g];
            let x = draw(model, t, &mut rng)?.x_t;
            asymmetry(model, &x, t, mode)
        })
        .collect();
    let mut table = CurveTable::new(
        "symmetry",
        &["t", "mean_asymmetry", "max_asymmetry", "tolerance", "samples"],
    );
    for (g, chunk) in results.chunks(n_samples.max(1)).enumerate().take(t_grid.len()) {
        let ok: Vec<f64> = chunk.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let (mean, _, max) = summarize(&ok);
        let status = if ok.len() < chunk.len() || ok.is_empty() {
            Status::Error
        } else if max > tol {
            Status::Violation
        } else {
            Status::Ok
        };
        table.push(vec![t_grid[g], mean, max, tol, ok.len() as f64], status);
    }
    describe(&mut table, model, base);
    table.set_meta("mode", format!("{mode:?}").to_lowercase());
    table.set_meta("n_samples", n_samples);
    table.set_meta("t_grid", join(t_grid));
    Ok(table)
}

/// Per-sample output of the subspace measurement.
#[derive(Clone, Copy, Debug)]
pub struct SubspaceSample {
    /// `‖(I − U Uᵀ) M‖_F` with `U` the top `Σ r_k` left singular vectors.
    pub distance: f64,
    /// Same with `U` cut at the η-rank.
    pub eta_distance: f64,
    /// `(α/(1 − α)) C₃ C₄ / min_k ω_k`; infinite where undefined.
    pub bound: f64,
    pub x0_norm: f64,
    pub eps_norm: f64,
}

fn left_block(model: &SubspaceModel, x: &DVector<f64>, t: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let svd = crate::spectral::dense_svd(&jacobian_dense(model, x, t)?)?;
    Ok((svd.u, svd.sigma))
}

fn residual_norm(m: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
    (m - u * u.tr_mul(m)).norm()
}

/// Distance of `span(M)` from the leading singular block of `J` at one draw.
pub fn subspace_sample(
    model: &SubspaceModel,
    x0: &DVector<f64>,
    eps: &DVector<f64>,
    t: f64,
    eta: f64,
) -> Result<SubspaceSample> {
    let alpha = model.noisy_alpha(t)?;
    let x = noised(x0, eps, alpha);
    let m = model.stacked_basis();
    let (u, sigma) = left_block(model, &x, t)?;
    let r = model.total_rank();
    let distance = residual_norm(&m, &u.columns(0, r).into_owned());
    let eta_rank = numerical_rank(&sigma, eta)?;
    let eta_distance = residual_norm(&m, &u.columns(0, eta_rank).into_owned());

    let norm = x0.norm().max(eps.norm());
    let max_r = model.max_rank() as f64;
    let c3 = 2.0 * std::f64::consts::SQRT_2 * max_r * norm;
    let c4 = std::f64::consts::SQRT_2 * max_r * norm;
    let min_w = weights(model, &x, t)?.min();
    let bound = match model.schedule().snr_ratio(t) {
        Ok(snr) if min_w > 0.0 => snr * c3 * c4 / min_w,
        _ => f64::INFINITY,
    };
    Ok(SubspaceSample {
        distance,
        eta_distance,
        bound,
        x0_norm: x0.norm(),
        eps_norm: eps.norm(),
    })
}

/// Distance between the leading singular subspace of `J` and `span(M)` against
/// `t`, next to the perturbation bound instantiated with realized norms.
/// Rows where the distance exceeds the bound are marked as findings.
pub fn subspace_convergence_curve<R: RngCore>(
    model: &SubspaceModel,
    t_grid: &[f64],
    n_samples: usize,
    eta: f64,
    rng: &mut R,
) -> Result<CurveTable> {
    let base = rng.next_u64();
    let results: Vec<Result<SubspaceSample>> = cells(t_grid.len(), n_samples)
        .into_par_iter()
        .map(|(g, s)| {
            let mut rng = cell_rng(base, TAG_SUBSPACE, g, s);
            let t = t_grid[g];
            let dr = draw(model, t, &mut rng)?;
            subspace_sample(model, &dr.x0, &dr.eps, t, eta)
        })
        .collect();

    let mut table = CurveTable::new(
        "subspace",
        &[
            "t",
            "mean_distance",
            "max_distance",
            "mean_eta_distance",
            "mean_bound",
            "min_bound",
            "bound_violations",
            "max_x0_norm",
            "max_eps_norm",
            "samples",
        ],
    );
    let (mut all_x0, mut all_eps): (f64, f64) = (0.0, 0.0);
    for (g, chunk) in results.chunks(n_samples.max(1)).enumerate().take(t_grid.len()) {
        let ok: Vec<SubspaceSample> = chunk.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let dist: Vec<f64> = ok.iter().map(|s| s.distance).collect();
        let eta_dist: Vec<f64> = ok.iter().map(|s| s.eta_distance).collect();
        let bounds: Vec<f64> = ok.iter().map(|s| s.bound).collect();
        let violations = ok.iter().filter(|s| s.distance > s.bound).count();
        let x0_max = ok.iter().map(|s| s.x0_norm).fold(0.0, f64::max);
        let eps_max = ok.iter().map(|s| s.eps_norm).fold(0.0, f64::max);
        all_x0 = all_x0.max(x0_max);
        all_eps = all_eps.max(eps_max);
        let (mean_d, _, max_d) = summarize(&dist);
        let (mean_b, min_b, _) = summarize(&bounds);
        let status = if ok.len() < chunk.len() || ok.is_empty() {
            Status::Error
        } else if violations > 0 {
            Status::Finding
        } else {
            Status::Ok
        };
        table.push(
            vec![
                t_grid[g],
                mean_d,
                max_d,
                summarize(&eta_dist).0,
                mean_b,
                min_b,
                violations as f64,
                x0_max,
                eps_max,
                ok.len() as f64,
            ],
            status,
        );
    }
    describe(&mut table, model, base);
    table.set_meta("eta", eta);
    table.set_meta("n_samples", n_samples);
    table.set_meta("t_grid", join(t_grid));
    table.set_meta("bound", "snr*C3*C4/min_w;C3=2sqrt2*max_r*B;C4=sqrt2*max_r*B;B=max(|x0|,|eps|)");
    table.set_meta("realized_max_x0_norm", all_x0);
    table.set_meta("realized_max_eps_norm", all_eps);
    Ok(table)
}

/// Ranks of `J` and of `∂ε̂/∂x = (I − √α J)/√(1 − α)` at one point:
/// `(η-rank J, η-rank ∂ε̂, raw rank J, raw rank ∂ε̂)`.
pub fn epsilon_ranks(
    model: &SubspaceModel,
    x: &DVector<f64>,
    t: f64,
    eta: f64,
) -> Result<(usize, usize, usize, usize)> {
    let alpha = model.noisy_alpha(t)?;
    let j = jacobian_dense(model, x, t)?;
    let d = model.dim();
    let de = (DMatrix::identity(d, d) - &j * alpha.sqrt()) / (1.0 - alpha).sqrt();
    let sj = singular_values(&j)?;
    let se = singular_values(&de)?;
    Ok((
        numerical_rank(&sj, eta)?,
        numerical_rank(&se, eta)?,
        raw_rank(&sj),
        raw_rank(&se),
    ))
}

/// η-ranks of both Jacobians against `t`. The relation
/// `rank(∂ε̂/∂x) ≥ d − rank(J)` is checked on floor-based ranks, since the
/// η-rank of a flat spectrum undercounts by design.
pub fn epsilon_rank_relation<R: RngCore>(
    model: &SubspaceModel,
    t_grid: &[f64],
    eta: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<CurveTable> {
    let base = rng.next_u64();
    let results: Vec<Result<(usize, usize, usize, usize)>> = cells(t_grid.len(), n_samples)
        .into_par_iter()
        .map(|(g, s)| {
            let mut rng = cell_rng(base, TAG_EPSRANK, g, s);
            let t = t_grid[g];
            let x = draw(model, t, &mut rng)?.x_t;
            epsilon_ranks(model, &x, t, eta)
        })
        .collect();
    let d = model.dim();
    let mut table = CurveTable::new(
        "epsrank",
        &[
            "t",
            "max_jac_rank",
            "min_eps_rank",
            "max_jac_raw_rank",
            "min_eps_raw_rank",
            "dim",
            "violations",
            "samples",
        ],
    );
    for (g, chunk) in results.chunks(n_samples.max(1)).enumerate().take(t_grid.len()) {
        let ok: Vec<(usize, usize, usize, usize)> =
            chunk.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let violations = ok.iter().filter(|(_, _, rj, re)| re + rj < d).count();
        let max_or_nan = |it: &mut dyn Iterator<Item = usize>| it.max().map_or(f64::NAN, |v| v as f64);
        let min_or_nan = |it: &mut dyn Iterator<Item = usize>| it.min().map_or(f64::NAN, |v| v as f64);
        let status = if ok.len() < chunk.len() || ok.is_empty() {
            Status::Error
        } else if violations > 0 {
            Status::Violation
        } else {
            Status::Ok
        };
        table.push(
            vec![
                t_grid[g],
                max_or_nan(&mut ok.iter().map(|r| r.0)),
                min_or_nan(&mut ok.iter().map(|r| r.1)),
                max_or_nan(&mut ok.iter().map(|r| r.2)),
                min_or_nan(&mut ok.iter().map(|r| r.3)),
                d as f64,
                violations as f64,
                ok.len() as f64,
            ],
            status,
        );
    }
    describe(&mut table, model, base);
    table.set_meta("eta", eta);
    table.set_meta("n_samples", n_samples);
    table.set_meta("t_grid", join(t_grid));
    Ok(table)
}

/// Outcome of the linearity-scaling check.
#[derive(Clone, Debug)]
pub struct LinearityScaling {
    /// `max err/(λ² snr)` at the calibration time.
    pub c_hat: f64,
    /// `max err/(λ² snr)` over the later-time checks above [`LINEARITY_FLOOR`].
    pub worst_ratio: f64,
    pub checks: usize,
    /// Later-time checks above `Ĉ` and above [`LINEARITY_FLOOR`].
    pub ratio_violations: usize,
    /// `(t, λ)` pairs whose mean error grew from the previous `t`.
    pub monotone_breaks: usize,
}

impl LinearityScaling {
    pub fn pass_fraction(&self) -> f64 {
        if self.checks == 0 {
            return 1.0;
        }
        1.0 - self.ratio_violations as f64 / self.checks as f64
    }
}

/// Calibrates `Ĉ = max err/(λ² α/(1 − α))` at `calibration_t` and checks
/// `err/λ² ≤ Ĉ α_t/(1 − α_t)` at every later `t` in `t_grid`. Each sample keeps
/// its `(x_0, ε, Δx)` across times, so the mean error per `λ` can also be
/// checked for decrease in `t`.
pub fn linearity_scaling<R: RngCore>(
    model: &SubspaceModel,
    t_grid: &[f64],
    calibration_t: f64,
    lambda_grid: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<LinearityScaling> {
    let base = rng.next_u64();
    let mut times = vec![calibration_t];
    times.extend(t_grid.iter().copied().filter(|&t| t > calibration_t && t < 1.0));
    let schedule = model.schedule();
    let snr: Vec<f64> = times
        .iter()
        .map(|&t| schedule.snr_ratio(t))
        .collect::<Result<_>>()?;

    // errs[s][ti][li]
    let errs: Vec<Vec<Vec<f64>>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = cell_rng(base, TAG_THEOREM_LINEAR, 0, s);
            let x0 = model.sample_x0(&mut rng).x0;
            let eps = standard_normal_vector(model.dim(), &mut rng);
            let dx = random_unit_vector(model.dim(), &mut rng);
            times
                .iter()
                .map(|&t| {
                    let x = noised(&x0, &eps, schedule.alpha(t)?);
                    lambda_grid
                        .iter()
                        .map(|&l| crate::pmp::linearization_error(model, &x, t, &dx, l))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let ratio = |s: usize, ti: usize, li: usize| {
        errs[s][ti][li] / (lambda_grid[li] * lambda_grid[li] * snr[ti])
    };
    let mut c_hat: f64 = 0.0;
    for s in 0..n_samples {
        for li in 0..lambda_grid.len() {
            c_hat = c_hat.max(ratio(s, 0, li));
        }
    }
    let (mut worst, mut checks, mut violations) = (0.0f64, 0, 0);
    for s in 0..n_samples {
        for ti in 1..times.len() {
            for li in 0..lambda_grid.len() {
                let r = ratio(s, ti, li);
                checks += 1;
                if errs[s][ti][li] <= LINEARITY_FLOOR {
                    continue;
                }
                worst = worst.max(r);
                if r > c_hat {
                    violations += 1;
                }
            }
        }
    }
    let mut breaks = 0;
    for li in 0..lambda_grid.len() {
        let mean = |ti: usize| errs.iter().map(|e| e[ti][li]).sum::<f64>() / n_samples.max(1) as f64;
        for ti in 1..times.len() {
            if mean(ti) > mean(ti - 1) + LINEARITY_FLOOR {
                breaks += 1;
            }
        }
    }
    Ok(LinearityScaling {
        c_hat,
        worst_ratio: worst,
        checks,
        ratio_violations: violations,
        monotone_breaks: breaks,
    })
}

/// One summary row per bullet of the theorem:
///
/// 1. η-rank of `J` never exceeds `Σ r_k`;
/// 2. linearization error scales like `λ² α/(1 − α)` (≥ 99 % of checks under
///    the calibrated constant, mean error decreasing in `t`);
/// 3. the leading singular block of `J` spans `span(M)` at the largest `t`.
///
/// `margin = max(0, statistic − bound)`. Perturbation-bound violations in
/// bullet 3 are counted as findings and do not affect `pass`.
pub fn theorem1_report<R: RngCore>(
    model: &SubspaceModel,
    config: &HarnessConfig,
    rng: &mut R,
) -> Result<CurveTable> {
    if config.t_grid.is_empty() {
        return Err(LocoError::Precondition("empty t grid".into()));
    }
    let rank = rank_ratio_curve(model, &config.t_grid, config.eta, config.n_samples, rng)?;
    let scaling = linearity_scaling(
        model,
        &config.t_grid,
        config.calibration_t,
        &config.lambda_grid,
        config.n_samples,
        rng,
    )?;
    let subspace =
        subspace_convergence_curve(model, &config.t_grid, config.n_samples, config.eta, rng)?;

    let mut table = CurveTable::new(
        "theorem1",
        &["bullet", "pass", "statistic", "bound", "margin", "violations", "checks", "findings"],
    );
    let row = |table: &mut CurveTable, bullet: f64, pass: bool, stat: f64, bound: f64, viol: usize, checks: usize, findings: usize| {
        table.push(
            vec![
                bullet,
                if pass { 1.0 } else { 0.0 },
                stat,
                bound,
                (stat - bound).max(0.0),
                viol as f64,
                checks as f64,
                findings as f64,
            ],
            if pass { Status::Ok } else { Status::Violation },
        );
    };

    let max_rank = rank.column("max_rank").unwrap_or_default();
    let violations: usize = rank
        .column("violations")
        .unwrap_or_default()
        .iter()
        .map(|v| *v as usize)
        .sum();
    let bullet1_stat = max_rank.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rank_ok = !rank.has_violations() && violations == 0;
    row(
        &mut table,
        1.0,
        rank_ok,
        bullet1_stat,
        model.total_rank() as f64,
        violations,
        config.t_grid.len() * config.n_samples,
        0,
    );

    let pass2 = scaling.pass_fraction() >= 0.99 && scaling.monotone_breaks == 0;
    row(
        &mut table,
        2.0,
        pass2,
        scaling.worst_ratio,
        scaling.c_hat,
        scaling.ratio_violations + scaling.monotone_breaks,
        scaling.checks,
        0,
    );

    let distances = subspace.column("mean_distance").unwrap_or_default();
    let times = subspace.column("t").unwrap_or_default();
    let last = times
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let bullet3_stat = distances.get(last).copied().unwrap_or(f64::NAN);
    let bullet3_bound = 1e-8 * (model.total_rank() as f64).sqrt();
    let findings: usize = subspace
        .column("bound_violations")
        .unwrap_or_default()
        .iter()
        .map(|v| *v as usize)
        .sum();
    let subspace_errors = subspace.rows.iter().any(|r| r.status == Status::Error);
    row(
        &mut table,
        3.0,
        bullet3_stat <= bullet3_bound && !subspace_errors,
        bullet3_stat,
        bullet3_bound,
        usize::from(!(bullet3_stat <= bullet3_bound)),
        config.n_samples,
        findings,
    );

    table.meta = rank.meta.clone();
    table.meta.retain(|(k, _)| k != "base_seed");
    table.set_meta("lambda_grid", join(&config.lambda_grid));
    table.set_meta("calibration_t", config.calibration_t);
    table.set_meta("c_hat", scaling.c_hat);
    table.set_meta("monotone_breaks", scaling.monotone_breaks);
    if let Some(v) = subspace.meta("realized_max_x0_norm") {
        table.set_meta("realized_max_x0_norm", v.to_string());
    }
    if let Some(v) = subspace.meta("realized_max_eps_norm") {
        table.set_meta("realized_max_eps_norm", v.to_string());
    }
    Ok(table)
}

/// `G Hᵀ + noise · N` with `G, H` of width `k` and `N` standard normal.
pub fn low_rank_plus_noise<R: Rng + ?Sized>(dim: usize, k: usize, noise: f64, rng: &mut R) -> DMatrix<f64> {
    let g = standard_normal_matrix(dim, k, rng);
    let h = standard_normal_matrix(dim, k, rng);
    g * h.transpose() + standard_normal_matrix(dim, dim, rng) * noise
}

/// GPM against the dense oracle on seeded `d × d` test matrices whose gap
/// `σ_k/σ_{k+1}` is at least `min_gap` (draws below it are rejected).
/// Rows hold the trial, its gap, the worst relative singular-value error,
/// the worst principal angle on either side, and the iteration count.
pub fn gpm_check<R: RngCore>(
    dim: usize,
    k: usize,
    n_trials: usize,
    min_gap: f64,
    opts: &GpmOptions,
    rng: &mut R,
) -> Result<CurveTable> {
    if k == 0 || k >= dim {
        return Err(LocoError::Precondition(format!("need 0 < k = {k} < d = {dim}")));
    }
    let base = rng.next_u64();
    let results: Vec<Result<[f64; 5]>> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = cell_rng(base, TAG_GPM, 0, trial);
            let (a, oracle, gap) = loop {
                let a = low_rank_plus_noise(dim, k, GPM_CHECK_NOISE, &mut rng);
                let oracle = crate::spectral::dense_svd(&a)?;
                let gap = oracle.sigma[k - 1] / oracle.sigma[k];
                if gap >= min_gap {
                    break (a, oracle, gap);
                }
            };
            let svd = gpm_topk(&a, k, opts, &mut rng)?;
            let sigma_err = (0..k)
                .map(|i| (svd.sigma[i] - oracle.sigma[i]).abs() / oracle.sigma[i])
                .fold(0.0, f64::max);
            let top = |m: &DMatrix<f64>| m.columns(0, k).into_owned();
            let angle_v = principal_angles(&svd.v, &top(&oracle.v))?.into_iter().fold(0.0, f64::max);
            let angle_u = principal_angles(&svd.u, &top(&oracle.u))?.into_iter().fold(0.0, f64::max);
            Ok([gap, sigma_err, angle_v.max(angle_u), svd.iterations as f64, f64::from(u8::from(svd.converged))])
        })
        .collect();
    let mut table = CurveTable::new(
        "gpm",
        &["trial", "gap", "max_rel_sigma_err", "max_angle", "iterations", "converged"],
    );
    for (trial, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => {
                let bad = v[1] > GPM_SIGMA_TOL || v[2] > GPM_ANGLE_TOL;
                table.push(
                    vec![trial as f64, v[0], v[1], v[2], v[3], v[4]],
                    if bad { Status::Violation } else { Status::Ok },
                );
            }
            Err(_) => table.push(vec![trial as f64, f64::NAN, f64::NAN, f64::NAN, f64::NAN, 0.0], Status::Error),
        }
    }
    table.set_meta("d", dim);
    table.set_meta("k", k);
    table.set_meta("min_gap", min_gap);
    table.set_meta("noise", GPM_CHECK_NOISE);
    table.set_meta("tol", opts.tol);
    table.set_meta("max_iters", opts.max_iters);
    table.set_meta("base_seed", base);
    Ok(table)
}
