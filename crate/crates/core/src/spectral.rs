//! Truncated SVD of matrix-free operators and small dense helpers around it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, LocoError, Result};
use crate::linalg::{
    orthonormality_defect, orthonormalize, orthonormalize_keep_sign, standard_normal_matrix,
    standard_normal_vector,
};
use crate::pmp::DENSE_LIMIT;

/// Singular directions with `σ ≤ SIGMA_FLOOR_REL · σ_1` are treated as null.
pub const SIGMA_FLOOR_REL: f64 = 1e-8;

/// A linear operator known only through its products with vectors.
pub trait LinearMap {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
    fn apply_adjoint(&self, u: &DVector<f64>) -> DVector<f64>;

    /// `A V` one column at a time.
    fn apply_block(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), v.ncols());
        for j in 0..v.ncols() {
            out.set_column(j, &self.apply(&v.column(j).into_owned()));
        }
        out
    }

    /// `Aᵀ U` one column at a time.
    fn apply_adjoint_block(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ncols(), u.ncols());
        for j in 0..u.ncols() {
            out.set_column(j, &self.apply_adjoint(&u.column(j).into_owned()));
        }
        out
    }
}

impl LinearMap for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }

    fn ncols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self * v
    }

    fn apply_adjoint(&self, u: &DVector<f64>) -> DVector<f64> {
        self.tr_mul(u)
    }

    fn apply_block(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        self * v
    }

    fn apply_adjoint_block(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        self.tr_mul(u)
    }
}

/// Operator given by a pair of closures.
pub struct FnMap<F, G> {
    rows: usize,
    cols: usize,
    forward: F,
    adjoint: G,
}

impl<F, G> FnMap<F, G>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    pub fn new(rows: usize, cols: usize, forward: F, adjoint: G) -> Self {
        Self {
            rows,
            cols,
            forward,
            adjoint,
        }
    }
}

impl<F, G> LinearMap for FnMap<F, G>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    fn nrows(&self) -> usize {
        self.rows
    }

    fn ncols(&self) -> usize {
        self.cols
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        (self.forward)(v)
    }

    fn apply_adjoint(&self, u: &DVector<f64>) -> DVector<f64> {
        (self.adjoint)(u)
    }
}

/// A [`LinearMap`] whose adjoint has been checked against its forward map on
/// random probes.
pub struct LinearMapHandle<M> {
    map: M,
    adjoint_defect: f64,
    empty: bool,
}

impl<M: LinearMap> LinearMapHandle<M> {
    pub const ADJOINT_TOL: f64 = 1e-8;
    pub const PROBES: usize = 10;

    pub fn new<R: Rng + ?Sized>(map: M, rng: &mut R) -> Result<Self> {
        Self::with_tolerance(map, Self::ADJOINT_TOL, rng)
    }

    /// Rejects the map when `|⟨u, Av⟩ − ⟨Aᵀu, v⟩|`, relative to the larger of
    /// `‖u‖‖Av‖` and `‖Aᵀu‖‖v‖`, exceeds `tolerance` on any probe.
    pub fn with_tolerance<R: Rng + ?Sized>(map: M, tolerance: f64, rng: &mut R) -> Result<Self> {
        let mut worst: f64 = 0.0;
        let mut empty = true;
        for _ in 0..Self::PROBES {
            let v = standard_normal_vector(map.ncols(), rng);
            let u = standard_normal_vector(map.nrows(), rng);
            let av = map.apply(&v);
            let atu = map.apply_adjoint(&u);
            check_dim(map.nrows(), av.len())?;
            check_dim(map.ncols(), atu.len())?;
            let scale = (u.norm() * av.norm()).max(atu.norm() * v.norm());
            if scale > 0.0 {
                empty = false;
                worst = worst.max((u.dot(&av) - atu.dot(&v)).abs() / scale);
            }
        }
        if !(worst <= tolerance) {
            return Err(LocoError::AdjointMismatch {
                defect: worst,
                tolerance,
            });
        }
        Ok(Self {
            map,
            adjoint_defect: worst,
            empty,
        })
    }

    pub fn map(&self) -> &M {
        &self.map
    }

    pub fn into_inner(self) -> M {
        self.map
    }

    /// Largest relative adjoint defect seen while probing.
    pub fn adjoint_defect(&self) -> f64 {
        self.adjoint_defect
    }

    /// True when every probe returned exactly zero, i.e. the map is the zero map.
    pub fn is_zero_map(&self) -> bool {
        self.empty
    }
}

impl<M: LinearMap> LinearMap for LinearMapHandle<M> {
    fn nrows(&self) -> usize {
        self.map.nrows()
    }

    fn ncols(&self) -> usize {
        self.map.ncols()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.map.apply(v)
    }

    fn apply_adjoint(&self, u: &DVector<f64>) -> DVector<f64> {
        self.map.apply_adjoint(u)
    }

    fn apply_block(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.map.apply_block(v)
    }

    fn apply_adjoint_block(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        self.map.apply_adjoint_block(u)
    }
}

/// Top-`k` singular triplets.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
    /// `max_i max(‖A v_i − σ_i u_i‖, ‖Aᵀ u_i − σ_i v_i‖)`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Singular value estimates after every iteration.
    pub sigma_trace: Vec<Vec<f64>>,
}

impl TruncatedSvd {
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// Columns of `V` whose singular value exceeds `SIGMA_FLOOR_REL · σ_1`.
    pub fn retained_v(&self) -> DMatrix<f64> {
        let floor = SIGMA_FLOOR_REL * self.sigma.first().copied().unwrap_or(0.0);
        let keep: Vec<usize> = (0..self.k()).filter(|&i| self.sigma[i] > floor).collect();
        self.v.select_columns(keep.iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpmOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for GpmOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-9,
        }
    }
}

/// Generalized power method for the top-`k` singular triplets of `map`.
///
/// Each iteration computes `U = orth(A V)`, `V̂ = Aᵀ U` and takes `V` and `Σ`
/// from the SVD of `V̂`. Unlike the textbook loop, `U` is re-orthonormalized on
/// every pass rather than only on exit. A final Rayleigh–Ritz step on `A V`
/// aligns the returned `U` and `V` with each other.
pub fn gpm_topk<M, R>(map: &M, k: usize, opts: &GpmOptions, rng: &mut R) -> Result<TruncatedSvd>
where
    M: LinearMap + ?Sized,
    R: Rng + ?Sized,
{
    let n = map.ncols();
    if k == 0 || k > n.min(map.nrows()) {
        return Err(LocoError::Precondition(format!(
            "k = {k} must lie in 1..={}",
            n.min(map.nrows())
        )));
    }
    let mut v = orthonormalize(&standard_normal_matrix(n, k, rng));
    let mut sigma: Vec<f64> = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        iterations += 1;
        let u = orthonormalize(&map.apply_block(&v));
        let v_hat = map.apply_adjoint_block(&u);
        let svd = jacobi_svd(&v_hat);
        let values = svd.sigma;
        v = svd.u;
        let change = relative_change(&sigma, &values);
        sigma = values;
        trace.push(sigma.clone());
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    // Rayleigh–Ritz on span(V).
    let w = map.apply_block(&v);
    let ritz = jacobi_svd(&w);
    let mut v = &v * &ritz.v;
    let sigma = ritz.sigma;
    let mut u = orthonormalize_keep_sign(&ritz.u);
    fix_signs(&mut u, &mut v);

    let av = map.apply_block(&v);
    let atu = map.apply_adjoint_block(&u);
    let mut residual: f64 = 0.0;
    for i in 0..k {
        let r1 = (av.column(i) - u.column(i) * sigma[i]).norm();
        let r2 = (atu.column(i) - v.column(i) * sigma[i]).norm();
        residual = residual.max(r1).max(r2);
    }

    Ok(TruncatedSvd {
        u,
        sigma,
        v,
        residual,
        iterations,
        converged,
        sigma_trace: trace,
    })
}

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

// Values already below the floor count as converged.
fn relative_change(prev: &[f64], next: &[f64]) -> f64 {
    if prev.len() != next.len() {
        return f64::INFINITY;
    }
    let top = next.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0.0;
    }
    let floor = SIGMA_FLOOR_REL * top;
    prev.iter()
        .zip(next)
        .filter(|(_, s)| **s > floor)
        .map(|(p, s)| (s - p).abs() / s.max(floor))
        .fold(0.0, f64::max)
}

/// Flips each pair `(u_i, v_i)` so the largest-magnitude entry of `v_i` is positive.
pub fn fix_signs(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    for j in 0..v.ncols() {
        let col = v.column(j);
        let mut pivot = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            v.column_mut(j).neg_mut();
            if j < u.ncols() {
                u.column_mut(j).neg_mut();
            }
        }
    }
}

/// Full SVD `A = U diag(σ) Vᵀ` with `σ` nonincreasing.
#[derive(Clone, Debug)]
pub struct DenseSvd {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
}

/// One-sided (Hestenes) Jacobi SVD, for inputs up to the dense limit.
pub fn dense_svd(a: &DMatrix<f64>) -> Result<DenseSvd> {
    let (m, n) = a.shape();
    if m.max(n) > DENSE_LIMIT {
        return Err(LocoError::Capacity {
            dim: m.max(n),
            limit: DENSE_LIMIT,
        });
    }
    Ok(jacobi_svd(a))
}

/// Singular values only, nonincreasing.
pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(dense_svd(a)?.sigma)
}

// Thin SVD: `u` is m×min(m, n). Used for the small blocks inside GPM too,
// where nalgebra's bidiagonal solver occasionally stalls a few digits short.
pub(crate) fn jacobi_svd(a: &DMatrix<f64>) -> DenseSvd {
    let (m, n) = a.shape();
    if m < n {
        let t = jacobi_svd(&a.transpose());
        return DenseSvd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
    }

    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut w, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let order = descending_order(&norms);
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let v = v.select_columns(order.iter());
    let top = sigma.first().copied().unwrap_or(0.0);
    let negligible = n as f64 * f64::EPSILON * top;

    let mut u = DMatrix::zeros(m, n);
    let mut filled = 0;
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > negligible && norms[j] > 0.0 {
            u.set_column(slot, &(w.column(j) / norms[j]));
            filled = slot + 1;
        }
    }
    complete_basis(&mut u, filled);
    DenseSvd { u, sigma, v }
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let a = m[(i, p)];
        let b = m[(i, q)];
        m[(i, p)] = c * a - s * b;
        m[(i, q)] = s * a + c * b;
    }
}

// Fills columns `from..` with unit vectors orthogonal to everything before them.
fn complete_basis(u: &mut DMatrix<f64>, from: usize) {
    let m = u.nrows();
    let mut candidate = 0;
    for slot in from..u.ncols() {
        loop {
            let mut e = DVector::zeros(m);
            e[candidate % m] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for j in 0..slot {
                    let proj = u.column(j).dot(&e);
                    e.axpy(-proj, &u.column(j).into_owned(), 1.0);
                }
            }
            let norm = e.norm();
            if norm > 0.5 {
                u.set_column(slot, &(e / norm));
                break;
            }
        }
    }
}

/// Smallest `r` with `sqrt(Σ_{i≤r} σ_i² / Σ_i σ_i²) > η`; zero for an all-zero
/// spectrum.
pub fn numerical_rank(sigma: &[f64], eta: f64) -> Result<usize> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(LocoError::Domain {
            what: "eta",
            value: eta,
            allowed: "(0, 1)",
        });
    }
    if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(LocoError::Precondition(
            "singular values must be finite and nonnegative".into(),
        ));
    }
    if sigma.windows(2).any(|w| w[1] > w[0]) {
        return Err(LocoError::Precondition(
            "singular values must be nonincreasing".into(),
        ));
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
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
    Ok(sigma.len())
}

/// Principal angles between `span(A)` and `span(B)`, ascending.
///
/// Angles whose cosine exceeds `1/√2` are recovered from the singular values
/// of `(I − AAᵀ)B` instead, since `arccos` loses half the digits near zero.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_dim(a.nrows(), b.nrows())?;
    for (name, m) in [("A", a), ("B", b)] {
        let defect = orthonormality_defect(m);
        if !(defect <= 1e-8) {
            return Err(LocoError::Precondition(format!(
                "{name} is not orthonormal (defect {defect:e})"
            )));
        }
    }
    let (a, b) = if a.ncols() >= b.ncols() { (a, b) } else { (b, a) };
    if b.ncols() == 0 {
        return Ok(Vec::new());
    }
    let cosines = jacobi_svd(&a.tr_mul(b)).sigma;
    let residual = b - a * a.tr_mul(b);
    let mut sines = jacobi_svd(&residual).sigma;
    sines.reverse();
    Ok(cosines
        .iter()
        .zip(&sines)
        .map(|(c, s)| {
            if c * c >= 0.5 {
                s.clamp(0.0, 1.0).asin()
            } else {
                c.clamp(0.0, 1.0).acos()
            }
        })
        .collect())
}

/// `v ↦ (I − V̄V̄ᵀ) v`.
#[derive(Clone, Debug)]
pub struct NullspaceProjector {
    basis: DMatrix<f64>,
}

impl NullspaceProjector {
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let defect = orthonormality_defect(&basis);
        if !(defect <= 1e-8) {
            return Err(LocoError::Precondition(format!(
                "nullspace basis is not orthonormal (defect {defect:e})"
            )));
        }
        Ok(Self { basis })
    }

    /// Projector built from the right singular vectors that survive the
    /// `σ_floor` filter.
    pub fn from_svd(svd: &TruncatedSvd) -> Self {
        Self {
            basis: svd.retained_v(),
        }
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.basis.ncols() == 0 {
            return v.clone();
        }
        v - &self.basis * self.basis.tr_mul(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(d: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        v
    }

    fn tight() -> GpmOptions {
        GpmOptions {
            tol: 1e-14,
            ..GpmOptions::default()
        }
    }

    #[test]
    fn gpm_on_diagonal_map() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0, 0.0]));
        let svd = gpm_topk(&a, 2, &GpmOptions::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(svd.converged);
        // Stopping on a 1e−9 relative change in σ leaves σ errors well below that,
        // but the vectors only to about √tol.
        assert!((svd.sigma[0] - 3.0).abs() < 1e-10 && (svd.sigma[1] - 2.0).abs() < 1e-10);
        assert!((svd.v.column(1) - unit(4, 1)).norm() < 1e-4);
        let svd = gpm_topk(&a, 2, &tight(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((svd.v.column(0) - unit(4, 0)).norm() < 1e-6);
        assert!((svd.v.column(1) - unit(4, 1)).norm() < 1e-6);
    }

    #[test]
    fn gpm_on_rank_one_map() {
        let a = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let b = DVector::from_vec(vec![0.0, 3.0, -4.0, 1.0]);
        let m = &a * b.transpose();
        let svd = gpm_topk(&m, 1, &GpmOptions::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((svd.sigma[0] - a.norm() * b.norm()).abs() < 1e-12);
        // Sign convention: largest entry (−4/‖b‖) becomes positive.
        assert!((svd.v.column(0) + &b / b.norm()).norm() < 1e-12);
    }

    #[test]
    fn gpm_matches_dense_oracle_on_random_matrix() {
        // Random singular vectors, spectrum 8, 4, 2, 1, … so consecutive gaps are 2×.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q1 = orthonormalize(&standard_normal_matrix(8, 8, &mut rng));
        let q2 = orthonormalize(&standard_normal_matrix(8, 8, &mut rng));
        let s = DVector::from_fn(8, |i, _| 8.0 / 2f64.powi(i as i32));
        let a = &q1 * DMatrix::from_diagonal(&s) * q2.transpose();
        let svd = gpm_topk(&a, 3, &tight(), &mut rng).unwrap();
        let dense = dense_svd(&a).unwrap();
        for i in 0..3 {
            assert!((svd.sigma[i] - dense.sigma[i]).abs() <= 1e-8 * dense.sigma[i]);
        }
        let top = dense.v.columns(0, 3).into_owned();
        for angle in principal_angles(&svd.v, &top).unwrap() {
            assert!(angle < 1e-6, "{angle}");
        }
        assert!(orthonormality_defect(&svd.u) < 1e-8);
        assert!(orthonormality_defect(&svd.v) < 1e-8);
        assert!(svd.residual <= 1e-6f64.max(1e-6 * svd.sigma[0]));
    }

    #[test]
    fn gpm_sigma_estimates_never_decrease() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = standard_normal_matrix(20, 20, &mut rng);
            let svd = gpm_topk(&a, 4, &GpmOptions::default(), &mut rng).unwrap();
            for pair in svd.sigma_trace.windows(2) {
                for (prev, next) in pair[0].iter().zip(&pair[1]) {
                    assert!(*next >= prev - 1e-12 * prev.max(1.0), "{prev} -> {next}");
                }
            }
        }
    }

    #[test]
    fn gpm_rejects_bad_k_and_handles_zero_map() {
        let z = DMatrix::<f64>::zeros(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(gpm_topk(&z, 0, &GpmOptions::default(), &mut rng).is_err());
        assert!(gpm_topk(&z, 6, &GpmOptions::default(), &mut rng).is_err());
        let svd = gpm_topk(&z, 3, &GpmOptions::default(), &mut rng).unwrap();
        assert!(svd.sigma.iter().all(|s| *s == 0.0));
        assert_eq!(svd.retained_v().ncols(), 0);
        assert!(orthonormality_defect(&svd.u) < 1e-12);
    }

    #[test]
    fn dense_svd_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(dense_svd(&id).unwrap().sigma, vec![1.0, 1.0, 1.0]);
        let z = dense_svd(&DMatrix::zeros(4, 4)).unwrap();
        assert!(z.sigma.iter().all(|s| *s == 0.0));
        assert!(orthonormality_defect(&z.u) < 1e-15);
    }

    fn reconstruct(svd: &DenseSvd) -> DMatrix<f64> {
        let k = svd.sigma.len();
        let s = DMatrix::from_diagonal(&DVector::from_vec(svd.sigma.clone()));
        svd.u.columns(0, k) * s * svd.v.columns(0, k).transpose()
    }

    #[test]
    fn dense_svd_reconstructs_random_and_rectangular_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (m, n) in [(10, 10), (7, 4), (4, 7)] {
            let a = standard_normal_matrix(m, n, &mut rng);
            let svd = dense_svd(&a).unwrap();
            assert!((reconstruct(&svd) - &a).norm() <= 1e-10 * a.norm());
            assert!(orthonormality_defect(&svd.u) < 1e-12);
            assert!(orthonormality_defect(&svd.v) < 1e-12);
            assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
            // nalgebra's bidiagonal SVD as an independent reference.
            let mut reference: Vec<f64> = a.singular_values().iter().copied().collect();
            reference.sort_by(|x, y| y.total_cmp(x));
            for (x, y) in svd.sigma.iter().zip(&reference) {
                assert!((x - y).abs() < 1e-12 * reference[0]);
            }
        }
    }

    #[test]
    fn dense_svd_completes_u_for_rank_deficient_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = standard_normal_matrix(6, 2, &mut rng);
        let a = &b * b.transpose();
        let svd = dense_svd(&a).unwrap();
        assert!(orthonormality_defect(&svd.u) < 1e-12);
        assert!((reconstruct(&svd) - &a).norm() <= 1e-10 * a.norm());
    }

    #[test]
    fn numerical_rank_examples() {
        assert_eq!(numerical_rank(&[1.0; 100], 0.99).unwrap(), 99);
        assert_eq!(numerical_rank(&[5.0, 0.0, 0.0], 0.99).unwrap(), 1);
        assert_eq!(numerical_rank(&[10.0, 1.0, 0.1, 0.01], 0.99).unwrap(), 1);
        assert_eq!(numerical_rank(&[0.0, 0.0], 0.99).unwrap(), 0);
        assert!(numerical_rank(&[1.0], 1.0).is_err());
        assert!(numerical_rank(&[1.0], 0.0).is_err());
        assert!(numerical_rank(&[1.0, 2.0], 0.5).is_err());
        assert!(numerical_rank(&[1.0, -1.0], 0.5).is_err());
    }

    #[test]
    fn principal_angle_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = orthonormalize(&standard_normal_matrix(6, 3, &mut rng));
        assert!(principal_angles(&a, &a).unwrap().iter().all(|t| t.abs() < 1e-14));

        let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let e2 = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        let angle = principal_angles(&e1, &e2).unwrap()[0];
        assert!((angle - std::f64::consts::FRAC_PI_2).abs() < 1e-15);

        let skew = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]);
        assert!(principal_angles(&skew, &e1).is_err());
    }

    #[test]
    fn small_angles_keep_full_precision() {
        let theta = 1e-9f64;
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(3, 1, &[theta.cos(), theta.sin(), 0.0]);
        let angle = principal_angles(&a, &b).unwrap()[0];
        assert!((angle - theta).abs() < 1e-20);
    }

    /// Angle between a line and a plane in ℝ³ against a brute-force scan of
    /// unit vectors in the plane.
    #[test]
    fn principal_angle_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let line = orthonormalize(&standard_normal_matrix(3, 1, &mut rng));
            let plane = orthonormalize(&standard_normal_matrix(3, 2, &mut rng));
            let steps = 200_000;
            let mut best: f64 = 0.0;
            for i in 0..steps {
                let phi = std::f64::consts::PI * i as f64 / steps as f64;
                let w = plane.column(0) * phi.cos() + plane.column(1) * phi.sin();
                best = best.max(line.column(0).dot(&w).abs());
            }
            let brute = best.min(1.0).acos();
            let angle = principal_angles(&line, &plane).unwrap()[0];
            assert!((angle - brute).abs() < 1e-3);
        }
    }

    #[test]
    fn nullspace_projector_examples() {
        let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let e2 = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        let p2 = NullspaceProjector::new(e2).unwrap();
        assert_eq!(p2.apply(&unit(3, 0)), unit(3, 0));
        let p1 = NullspaceProjector::new(e1).unwrap();
        assert_eq!(p1.apply(&unit(3, 0)).norm(), 0.0);
        let empty = NullspaceProjector::new(DMatrix::zeros(3, 0)).unwrap();
        assert_eq!(empty.apply(&unit(3, 2)), unit(3, 2));
        assert!(NullspaceProjector::new(DMatrix::from_element(3, 1, 1.0)).is_err());
    }

    #[test]
    fn adjoint_probe_accepts_matrices_and_rejects_inconsistent_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = standard_normal_matrix(5, 3, &mut rng);
        let h = LinearMapHandle::new(a.clone(), &mut rng).unwrap();
        assert!(h.adjoint_defect() < 1e-14);
        assert!(!h.is_zero_map());

        let bad = FnMap::new(5, 3, move |v: &DVector<f64>| &a * v, |u: &DVector<f64>| u.rows(0, 3) * 2.0);
        assert!(matches!(
            LinearMapHandle::new(bad, &mut rng),
            Err(LocoError::AdjointMismatch { .. })
        ));

        let zero = LinearMapHandle::new(DMatrix::<f64>::zeros(4, 4), &mut rng).unwrap();
        assert!(zero.is_zero_map());
    }

    proptest! {
        #[test]
        fn numerical_rank_is_monotone_in_eta(
            mut sigma in proptest::collection::vec(0.0f64..10.0, 1..30),
            e1 in 0.01f64..0.999,
            e2 in 0.01f64..0.999,
        ) {
            sigma.sort_by(|a, b| b.total_cmp(a));
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(numerical_rank(&sigma, lo).unwrap() <= numerical_rank(&sigma, hi).unwrap());
        }

        #[test]
        fn projector_is_idempotent(seed in 0u64..1000, d in 2usize..10, frac in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = ((d as f64 * frac) as usize).min(d - 1);
            let basis = orthonormalize(&standard_normal_matrix(d, r.max(1), &mut rng));
            let p = NullspaceProjector::new(basis).unwrap();
            let v = standard_normal_vector(d, &mut rng);
            let once = p.apply(&v);
            prop_assert!((p.apply(&once) - &once).norm() <= 1e-12 * v.norm().max(1.0));
        }
    }
}
