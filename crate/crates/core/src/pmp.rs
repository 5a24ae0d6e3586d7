//! Posterior mean predictor `f(x_t) = E[x_0 | x_t]` of the mixture model and its
//! Jacobian.
//!
//! With responsibilities `ω_k(x_t)` the predictor is
//! `f(x) = √α Σ_k ω_k M_k M_kᵀ x` and its Jacobian is
//!
//! ```text
//! J = √α A + (α√α/(1 − α)) (B − C)
//! A = Σ ω_k M_k M_kᵀ
//! B = Σ ω_k (M_k M_kᵀ x)(M_k M_kᵀ x)ᵀ
//! C = (A x)(A x)ᵀ
//! ```
//!
//! `B − C` is the ω-weighted covariance of the projections `M_k M_kᵀ x`, so `J`
//! is symmetric positive semidefinite with range inside `span(M)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::edit::Mask;
use crate::error::{check_dim, LocoError, Result};
use crate::linalg::softmax;
use crate::molrg::{noised, SubspaceModel};
use crate::spectral::LinearMap;

/// Largest dimension for which a dense `d × d` Jacobian is materialized.
pub const DENSE_LIMIT: usize = 4096;

/// Posterior responsibilities `ω_k(x_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorWeights(Vec<f64>);

impl PosteriorWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Softmax over components of `α‖M_kᵀx‖²/(2(1 − α))`, plus the per-component
/// normalizer `(r_k/2) log(1 − α)` which only matters for unequal ranks.
pub fn weights(model: &SubspaceModel, x: &DVector<f64>, t: f64) -> Result<PosteriorWeights> {
    check_dim(model.dim(), x.len())?;
    let alpha = model.noisy_alpha(t)?;
    Ok(PosteriorWeights(weights_at(model, &model.coordinates(x), alpha)))
}

fn weights_at(model: &SubspaceModel, coords: &[DVector<f64>], alpha: f64) -> Vec<f64> {
    softmax(&model.component_logits(coords, alpha))
}

/// Closed-form posterior mean `√α Σ_k ω_k M_k M_kᵀ x`.
pub fn posterior_mean(model: &SubspaceModel, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    check_dim(model.dim(), x.len())?;
    let alpha = model.noisy_alpha(t)?;
    Ok(mean_at(model, x, alpha))
}

pub(crate) fn mean_at(model: &SubspaceModel, x: &DVector<f64>, alpha: f64) -> DVector<f64> {
    let coords = model.coordinates(x);
    let omega = weights_at(model, &coords, alpha);
    let scale = alpha.sqrt();
    let mut out = DVector::zeros(model.dim());
    for ((b, p), w) in model.bases().iter().zip(&coords).zip(&omega) {
        out += b * (p * (scale * w));
    }
    out
}

/// Posterior mean assembled from the score through Tweedie's formula,
/// `(x + (1 − α) ∇log p_t(x)) / √α`. Kept as an independent cross-check of
/// [`posterior_mean`].
pub fn posterior_mean_via_tweedie(
    model: &SubspaceModel,
    x: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    let alpha = model.noisy_alpha(t)?;
    if alpha <= 0.0 {
        return Err(LocoError::Singular {
            t,
            reason: "Tweedie's formula divides by √α = 0",
        });
    }
    let score = model.score(x, t)?;
    Ok((x + score * (1.0 - alpha)) / alpha.sqrt())
}

/// Exact analytic Jacobian of the posterior mean.
pub fn jacobian_dense(model: &SubspaceModel, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_dim(model.dim(), x.len())?;
    if model.dim() > DENSE_LIMIT {
        return Err(LocoError::Capacity {
            dim: model.dim(),
            limit: DENSE_LIMIT,
        });
    }
    let alpha = model.noisy_alpha(t)?;
    let parts = JacobianParts::new(model, x, alpha);
    let d = model.dim();
    let mut a = DMatrix::zeros(d, d);
    let mut spread = DMatrix::zeros(d, d);
    for ((basis, y), w) in model.bases().iter().zip(&parts.projections).zip(&parts.omega) {
        a += basis * basis.transpose() * *w;
        // B − C = Σ ω_k (y_k − m)(y_k − m)ᵀ
        let centered = y - &parts.mean_projection;
        spread.ger(*w, &centered, &centered, 1.0);
    }
    Ok(a * alpha.sqrt() + spread * parts.curvature)
}

/// `ε̂ = (x − √α f(x)) / √(1 − α)`, the noise prediction consistent with the
/// analytic posterior mean.
pub fn epsilon_predictor(model: &SubspaceModel, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    check_dim(model.dim(), x.len())?;
    let alpha = model.noisy_alpha(t)?;
    let mean = mean_at(model, x, alpha);
    Ok((x - mean * alpha.sqrt()) / (1.0 - alpha).sqrt())
}

/// `‖f(x + λΔx) − f(x) − λ J Δx‖`, the error of the first-order model.
pub fn linearization_error(
    model: &SubspaceModel,
    x: &DVector<f64>,
    t: f64,
    direction: &DVector<f64>,
    lambda: f64,
) -> Result<f64> {
    let op = JacobianOperator::new(model, x, t, JacobianMode::Analytic)?;
    check_dim(model.dim(), direction.len())?;
    let alpha = op.alpha;
    let moved = mean_at(model, &(x + direction * lambda), alpha);
    let base = mean_at(model, x, alpha);
    Ok((moved - base - op.jvp(direction) * lambda).norm())
}

/// Least-squares linear predictor `x̂_0 = W x_t` fitted on fresh `(x_0, x_t)` pairs:
/// `W = S_0t S_tt⁻¹` with a ridge of `1e−8 · tr(S_tt)/d` on the diagonal.
pub fn fit_linear_denoiser<R: Rng + ?Sized>(
    model: &SubspaceModel,
    t: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = model.dim();
    if n_samples < 10 * d {
        return Err(LocoError::Conditioning(format!(
            "{n_samples} samples cannot determine a {d}×{d} denoiser (need at least {})",
            10 * d
        )));
    }
    let alpha = model.schedule().alpha(t)?;
    let mut cross = DMatrix::zeros(d, d);
    let mut auto = DMatrix::zeros(d, d);
    for _ in 0..n_samples {
        let x0 = model.sample_x0(rng).x0;
        let eps = crate::linalg::standard_normal_vector(d, rng);
        let xt = noised(&x0, &eps, alpha);
        cross.ger(1.0, &x0, &xt, 1.0);
        auto.ger(1.0, &xt, &xt, 1.0);
    }
    cross /= n_samples as f64;
    auto /= n_samples as f64;
    let ridge = 1e-8 * auto.trace() / d as f64;
    for i in 0..d {
        auto[(i, i)] += ridge;
    }
    let chol = Cholesky::new(auto)
        .ok_or_else(|| LocoError::Conditioning("second-moment matrix is not positive definite".into()))?;
    // W = S_0t S_tt⁻¹  ⇔  Wᵀ = S_tt⁻¹ S_0tᵀ.
    Ok(chol.solve(&cross.transpose()).transpose())
}

/// Population optimum of [`fit_linear_denoiser`]:
/// `√α Σ_0 (α Σ_0 + (1 − α) I)⁻¹` with `Σ_0 = (1/K) Σ_k M_k M_kᵀ`, which
/// reduces to `√α (1/K) / (α/K + 1 − α) · M Mᵀ`.
pub fn population_linear_denoiser(model: &SubspaceModel, t: f64) -> Result<DMatrix<f64>> {
    let alpha = model.schedule().alpha(t)?;
    let inv_k = 1.0 / model.num_components() as f64;
    let gain = alpha.sqrt() * inv_k / (alpha * inv_k + 1.0 - alpha);
    let m = model.stacked_basis();
    Ok(&m * m.transpose() * gain)
}

/// How a [`JacobianOperator`] evaluates products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum JacobianMode {
    /// Closed-form `A/B/C` products without materializing `J`.
    #[default]
    Analytic,
    /// Central differences of the posterior mean.
    FiniteDifference,
}

struct JacobianParts {
    omega: Vec<f64>,
    coords: Vec<DVector<f64>>,
    projections: Vec<DVector<f64>>,
    mean_projection: DVector<f64>,
    curvature: f64,
}

impl JacobianParts {
    fn new(model: &SubspaceModel, x: &DVector<f64>, alpha: f64) -> Self {
        let coords = model.coordinates(x);
        let omega = weights_at(model, &coords, alpha);
        let projections: Vec<DVector<f64>> =
            model.bases().iter().zip(&coords).map(|(b, p)| b * p).collect();
        let mut mean_projection = DVector::zeros(model.dim());
        for (y, w) in projections.iter().zip(&omega) {
            mean_projection.axpy(*w, y, 1.0);
        }
        Self {
            omega,
            coords,
            projections,
            mean_projection,
            curvature: alpha * alpha.sqrt() / (1.0 - alpha),
        }
    }
}

/// Matrix-free view of `∇_x f` at a fixed `(x_t, t)`, optionally followed by a
/// coordinate mask: `v ↦ P_Ω J v` with adjoint `u ↦ J P_Ω u`.
pub struct JacobianOperator<'a> {
    model: &'a SubspaceModel,
    x: DVector<f64>,
    t: f64,
    alpha: f64,
    mode: JacobianMode,
    mask: Option<Mask>,
    parts: JacobianParts,
}

impl<'a> JacobianOperator<'a> {
    pub fn new(
        model: &'a SubspaceModel,
        x: &DVector<f64>,
        t: f64,
        mode: JacobianMode,
    ) -> Result<Self> {
        check_dim(model.dim(), x.len())?;
        let alpha = model.noisy_alpha(t)?;
        Ok(Self {
            model,
            x: x.clone(),
            t,
            alpha,
            mode,
            mask: None,
            parts: JacobianParts::new(model, x, alpha),
        })
    }

    pub fn with_mask(mut self, mask: Mask) -> Result<Self> {
        check_dim(self.model.dim(), mask.dim())?;
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn point(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn mode(&self) -> JacobianMode {
        self.mode
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }

    pub fn weights(&self) -> PosteriorWeights {
        PosteriorWeights(self.parts.omega.clone())
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// `P_Ω J v`.
    pub fn jvp(&self, v: &DVector<f64>) -> DVector<f64> {
        let jv = match self.mode {
            JacobianMode::Analytic => self.analytic_product(v),
            JacobianMode::FiniteDifference => self.fd_jvp(v),
        };
        self.masked(jv)
    }

    /// `J P_Ω u` (`Jᵀ = J` in the analytic mode).
    pub fn vjp(&self, u: &DVector<f64>) -> DVector<f64> {
        let u = self.masked(u.clone());
        match self.mode {
            JacobianMode::Analytic => self.analytic_product(&u),
            JacobianMode::FiniteDifference => self.fd_vjp(&u),
        }
    }

    /// Dense `d × d` matrix of the (masked) operator, one `jvp` per column.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if d > DENSE_LIMIT {
            return Err(LocoError::Capacity {
                dim: d,
                limit: DENSE_LIMIT,
            });
        }
        let mut out = DMatrix::zeros(d, d);
        let mut e = DVector::zeros(d);
        for j in 0..d {
            e[j] = 1.0;
            out.set_column(j, &self.jvp(&e));
            e[j] = 0.0;
        }
        Ok(out)
    }

    fn masked(&self, mut v: DVector<f64>) -> DVector<f64> {
        if let Some(mask) = &self.mask {
            mask.apply_in_place(&mut v);
        }
        v
    }

    // J v = √α Σ_k ω_k M_k q_k + c Σ_k ω_k (s_k − s̄)(y_k − m)
    // with q_k = M_kᵀv, s_k = ⟨y_k, v⟩ and s̄ = ⟨m, v⟩. The centered form makes
    // the curvature term vanish exactly when one weight is 1.
    fn analytic_product(&self, v: &DVector<f64>) -> DVector<f64> {
        let p = &self.parts;
        let scale = self.alpha.sqrt();
        let mut out = DVector::zeros(self.dim());
        let mut s = Vec::with_capacity(p.omega.len());
        for ((b, coord), w) in self.model.bases().iter().zip(&p.coords).zip(&p.omega) {
            let q = b.tr_mul(v);
            s.push(coord.dot(&q));
            out += b * (q * (scale * w));
        }
        let s_bar: f64 = s.iter().zip(&p.omega).map(|(s, w)| s * w).sum();
        for ((y, w), s) in p.projections.iter().zip(&p.omega).zip(&s) {
            let weight = p.curvature * w * (s - s_bar);
            if weight != 0.0 {
                out += (y - &p.mean_projection) * weight;
            }
        }
        out
    }

    fn fd_step(&self, direction_norm: f64) -> f64 {
        (1e-7 * self.x.norm() / direction_norm.max(1e-12)).max(1e-5)
    }

    fn fd_jvp(&self, v: &DVector<f64>) -> DVector<f64> {
        let h = self.fd_step(v.norm());
        let plus = mean_at(self.model, &(&self.x + v * h), self.alpha);
        let minus = mean_at(self.model, &(&self.x - v * h), self.alpha);
        (plus - minus) / (2.0 * h)
    }

    // Gradient of x ↦ ⟨u, f(x)⟩, one coordinate pair at a time.
    fn fd_vjp(&self, u: &DVector<f64>) -> DVector<f64> {
        let d = self.dim();
        let h = self.fd_step(1.0);
        let mut out = DVector::zeros(d);
        let mut probe = self.x.clone();
        for i in 0..d {
            let xi = probe[i];
            probe[i] = xi + h;
            let plus = u.dot(&mean_at(self.model, &probe, self.alpha));
            probe[i] = xi - h;
            let minus = u.dot(&mean_at(self.model, &probe, self.alpha));
            probe[i] = xi;
            out[i] = (plus - minus) / (2.0 * h);
        }
        out
    }
}

impl LinearMap for JacobianOperator<'_> {
    fn nrows(&self) -> usize {
        self.dim()
    }

    fn ncols(&self) -> usize {
        self.dim()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.jvp(v)
    }

    fn apply_adjoint(&self, u: &DVector<f64>) -> DVector<f64> {
        self.vjp(u)
    }
}
