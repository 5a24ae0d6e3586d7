//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn standard_normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Column-major fill, so the draw order is stable for a given seed.
pub fn standard_normal_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    DMatrix::from_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)),
    )
}

/// Uniform draw from the unit sphere `S^{d-1}`.
pub fn random_unit_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = standard_normal_vector(len, rng);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Thin `Q` factor of a Householder QR. Columns are orthonormal even when
/// the input is rank deficient.
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.ncols().min(m.nrows());
    let q = m.clone().qr().q();
    q.columns(0, k).into_owned()
}

/// Same as [`orthonormalize`] but keeps each column's orientation: column `j`
/// of the result has a nonnegative inner product with column `j` of the input.
pub fn orthonormalize_keep_sign(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = orthonormalize(m);
    for j in 0..q.ncols() {
        if q.column(j).dot(&m.column(j)) < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Modified Gram–Schmidt with a second pass. Each output column is a
/// combination of the input columns up to it, so exact zero rows shared by
/// those columns stay exactly zero. `None` if the columns are dependent.
pub fn gram_schmidt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut q = m.clone();
    for j in 0..q.ncols() {
        let start = q.column(j).norm();
        for _ in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                if proj != 0.0 {
                    let qi = q.column(i).into_owned();
                    q.column_mut(j).axpy(-proj, &qi, 1.0);
                }
            }
        }
        let norm = q.column(j).norm();
        if !(norm > 1e-10 * start) {
            return None;
        }
        q.column_mut(j).unscale_mut(norm);
    }
    Some(q)
}

/// `max |MᵀM − I|`.
pub fn orthonormality_defect(m: &DMatrix<f64>) -> f64 {
    let gram = m.tr_mul(m);
    let mut worst: f64 = 0.0;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// `log Σ exp(x_i)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormalize_handles_rank_deficiency() {
        let mut m = DMatrix::zeros(5, 3);
        m[(0, 0)] = 2.0;
        m[(0, 1)] = 4.0;
        let q = orthonormalize(&m);
        assert!(orthonormality_defect(&q) < 1e-14);
    }

    #[test]
    fn gram_schmidt_keeps_disjoint_supports() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = standard_normal_matrix(6, 3, &mut rng);
        for i in 3..6 {
            m[(i, 0)] = 0.0;
            m[(i, 1)] = 0.0;
        }
        for i in 0..3 {
            m[(i, 2)] = 0.0;
        }
        let q = gram_schmidt(&m).unwrap();
        assert!(orthonormality_defect(&q) < 1e-14);
        assert!(q.rows(3, 3).columns(0, 2).iter().all(|x| *x == 0.0));
        assert!(q.rows(0, 3).column(2).iter().all(|x| *x == 0.0));
        let mut dep = m.clone();
        dep.set_column(2, &(m.column(0) * 2.0));
        assert!(gram_schmidt(&dep).is_none());
    }

    #[test]
    fn keep_sign_preserves_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = standard_normal_matrix(6, 3, &mut rng);
        let q = orthonormalize_keep_sign(&m);
        for j in 0..3 {
            assert!(q.column(j).dot(&m.column(j)) > 0.0);
        }
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let w = softmax(&[1e300, 1e300 - 1e290, 0.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
