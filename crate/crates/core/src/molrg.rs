//! Mixture of low-rank Gaussians.
//!
//! Clean data is drawn by picking one of `K` mutually orthogonal subspaces
//! uniformly at random and sampling standard-normal coordinates in it:
//! `x_0 = M_k a_k`, `a_k ~ N(0, I_{r_k})`. After noising to time `t` the
//! marginal is the Gaussian mixture `(1/K) Σ_k N(0, α_t M_k M_kᵀ + (1 − α_t) I)`,
//! whose density and score are available in closed form through
//! `(α M Mᵀ + (1 − α) I)⁻¹ = (I − α M Mᵀ)/(1 − α)` and
//! `log det(α M Mᵀ + (1 − α) I) = (d − r) log(1 − α)`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, LocoError, Result};
use crate::linalg::{
    gram_schmidt, log_sum_exp, orthonormality_defect, orthonormalize, standard_normal_matrix,
};
use crate::schedule::NoiseSchedule;

/// Tolerance on `MᵀM = I` and `M_iᵀM_j = 0` accepted at construction.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Ground-truth union-of-subspaces model.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceModel {
    dim: usize,
    ranks: Vec<usize>,
    bases: Vec<DMatrix<f64>>,
    schedule: NoiseSchedule,
}

/// One clean draw together with the latent component and coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x0: DVector<f64>,
    /// Zero-based component index.
    pub class: usize,
    pub coeff: DVector<f64>,
}

impl SubspaceModel {
    /// Builds a model from explicit bases, checking every orthogonality invariant.
    pub fn new(bases: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = bases.first() else {
            return Err(LocoError::InvalidModel("at least one component is required".into()));
        };
        let dim = first.nrows();
        if dim == 0 {
            return Err(LocoError::InvalidModel("ambient dimension must be positive".into()));
        }
        let mut ranks = Vec::with_capacity(bases.len());
        for (k, b) in bases.iter().enumerate() {
            if b.nrows() != dim {
                return Err(LocoError::InvalidModel(format!(
                    "basis {k} has {} rows, expected {dim}",
                    b.nrows()
                )));
            }
            if b.ncols() == 0 {
                return Err(LocoError::InvalidModel(format!("basis {k} has rank 0")));
            }
            ranks.push(b.ncols());
        }
        let total: usize = ranks.iter().sum();
        if total > dim {
            return Err(LocoError::InvalidModel(format!(
                "ranks sum to {total}, exceeding dimension {dim}"
            )));
        }
        let stacked = stack(&bases, dim, total);
        let defect = orthonormality_defect(&stacked);
        if defect > ORTHONORMAL_TOL {
            return Err(LocoError::InvalidModel(format!(
                "bases are not orthonormal and mutually orthogonal (defect {defect:e})"
            )));
        }
        Ok(Self {
            dim,
            ranks,
            bases,
            schedule: NoiseSchedule::default(),
        })
    }

    /// Bases from the QR factor of a seeded `d × Σr_k` standard-normal matrix,
    /// sliced column-wise per component.
    pub fn random(dim: usize, ranks: &[usize], seed: u64) -> Result<Self> {
        check_ranks(dim, ranks)?;
        let total: usize = ranks.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = standard_normal_matrix(dim, total, &mut rng);
        Self::new(split(&orthonormalize(&g), ranks))
    }

    /// Like [`random`](Self::random) but component `k` is drawn with support on
    /// the coordinates `supports[k]`. With disjoint supports each basis stays
    /// confined to its own coordinates; overlapping supports are orthogonalized
    /// in component order, so later components may pick up earlier coordinates.
    pub fn random_localized(
        dim: usize,
        ranks: &[usize],
        supports: &[Vec<usize>],
        seed: u64,
    ) -> Result<Self> {
        check_ranks(dim, ranks)?;
        if supports.len() != ranks.len() {
            return Err(LocoError::InvalidModel(format!(
                "{} supports given for {} components",
                supports.len(),
                ranks.len()
            )));
        }
        let total: usize = ranks.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = standard_normal_matrix(dim, total, &mut rng);
        let mut masked = DMatrix::zeros(dim, total);
        let mut col = 0;
        for (k, (&r, support)) in ranks.iter().zip(supports).enumerate() {
            if support.len() < r || support.iter().any(|&i| i >= dim) {
                return Err(LocoError::InvalidModel(format!(
                    "support of component {k} must hold at least {r} in-range coordinates"
                )));
            }
            for c in col..col + r {
                for &i in support {
                    masked[(i, c)] = g[(i, c)];
                }
            }
            col += r;
        }
        let q = gram_schmidt(&masked).ok_or_else(|| {
            LocoError::InvalidModel("supports leave too few independent directions".into())
        })?;
        Self::new(split(&q, ranks))
    }

    /// Component `k` supported on the `k`-th of `K` contiguous coordinate blocks.
    pub fn random_blocks(dim: usize, ranks: &[usize], seed: u64) -> Result<Self> {
        check_ranks(dim, ranks)?;
        let supports = block_supports(dim, ranks.len());
        Self::random_localized(dim, ranks, &supports, seed)
    }

    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.bases.len()
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn total_rank(&self) -> usize {
        self.ranks.iter().sum()
    }

    pub fn max_rank(&self) -> usize {
        self.ranks.iter().copied().max().unwrap_or(0)
    }

    pub fn basis(&self, k: usize) -> &DMatrix<f64> {
        &self.bases[k]
    }

    pub fn bases(&self) -> &[DMatrix<f64>] {
        &self.bases
    }

    /// `M = [M_1 … M_K]`.
    pub fn stacked_basis(&self) -> DMatrix<f64> {
        stack(&self.bases, self.dim, self.total_rank())
    }

    /// Orthogonal projection onto `span(M)`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for b in &self.bases {
            out += b * b.tr_mul(x);
        }
        out
    }

    /// `M_kᵀ x` for every component.
    pub fn coordinates(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        self.bases.iter().map(|b| b.tr_mul(x)).collect()
    }

    pub fn sample_x0<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let class = rng.random_range(0..self.bases.len());
        let coeff = crate::linalg::standard_normal_vector(self.ranks[class], rng);
        let x0 = &self.bases[class] * &coeff;
        Sample { x0, class, coeff }
    }

    /// `x_t = √α_t x_0 + √(1 − α_t) ε`.
    pub fn forward_noise<R: Rng + ?Sized>(
        &self,
        x0: &DVector<f64>,
        t: f64,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        check_dim(self.dim, x0.len())?;
        let alpha = self.schedule.alpha(t)?;
        let eps = crate::linalg::standard_normal_vector(self.dim, rng);
        Ok(noised(x0, &eps, alpha))
    }

    /// Log of the noised marginal density `p_t(x_t)`.
    pub fn log_density(&self, x: &DVector<f64>, t: f64) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let alpha = self.noisy_alpha(t)?;
        let noise = 1.0 - alpha;
        let sq = x.norm_squared();
        let d = self.dim as f64;
        let terms: Vec<f64> = self
            .bases
            .iter()
            .zip(&self.ranks)
            .map(|(b, &r)| {
                let proj = b.tr_mul(x).norm_squared();
                let quad = (sq - alpha * proj) / noise;
                let log_det = (d - r as f64) * noise.ln();
                -0.5 * (d * (2.0 * PI).ln() + log_det + quad)
            })
            .collect();
        Ok(log_sum_exp(&terms) - (self.bases.len() as f64).ln())
    }

    /// `∇ log p_t(x) = −x/(1 − α) + (α/(1 − α)) Σ_k ω_k M_k M_kᵀ x`.
    pub fn score(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        check_dim(self.dim, x.len())?;
        let alpha = self.noisy_alpha(t)?;
        let noise = 1.0 - alpha;
        let coords = self.coordinates(x);
        let omega = crate::linalg::softmax(&self.component_logits(&coords, alpha));
        let mut out = x * (-1.0 / noise);
        for ((b, p), w) in self.bases.iter().zip(&coords).zip(&omega) {
            out += b * (p * (w * alpha / noise));
        }
        Ok(out)
    }

    /// Unnormalized log posterior responsibilities of each component:
    /// `α‖M_kᵀx‖²/(2(1 − α)) + (r_k/2) log(1 − α)`. The second term is the
    /// per-component normalizer; it is constant in `k` when all ranks agree.
    pub(crate) fn component_logits(&self, coords: &[DVector<f64>], alpha: f64) -> Vec<f64> {
        let noise = 1.0 - alpha;
        let half_log_noise = 0.5 * noise.ln();
        coords
            .iter()
            .zip(&self.ranks)
            .map(|(p, &r)| alpha * p.norm_squared() / (2.0 * noise) + r as f64 * half_log_noise)
            .collect()
    }

    /// `α_t` for `t ∈ (0, 1]`, where the mixture covariances are nonsingular.
    pub(crate) fn noisy_alpha(&self, t: f64) -> Result<f64> {
        let alpha = self.schedule.alpha(t)?;
        if alpha >= 1.0 {
            return Err(LocoError::Singular {
                t,
                reason: "the clean distribution has singular covariance",
            });
        }
        Ok(alpha)
    }

    /// Text serialization: a header `d K r_1 … r_K`, then one line per basis
    /// column holding its `d` entries with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write!(out, "{} {}", self.dim, self.bases.len()).unwrap();
        for r in &self.ranks {
            write!(out, " {r}").unwrap();
        }
        out.push('\n');
        for b in &self.bases {
            for col in b.column_iter() {
                let line: Vec<String> = col.iter().map(|v| format!("{v:.16e}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines.next().ok_or(LocoError::Parse {
            line: 1,
            message: "empty model file".into(),
        })?;
        let header: Vec<usize> = header
            .split_whitespace()
            .map(|tok| {
                tok.parse().map_err(|_| LocoError::Parse {
                    line: hline + 1,
                    message: format!("`{tok}` is not a non-negative integer"),
                })
            })
            .collect::<Result<_>>()?;
        if header.len() < 3 || header.len() != 2 + header[1] {
            return Err(LocoError::Parse {
                line: hline + 1,
                message: "header must read `d K r_1 … r_K`".into(),
            });
        }
        let dim = header[0];
        let ranks = &header[2..];
        let mut bases = Vec::with_capacity(ranks.len());
        for &r in ranks {
            let mut b = DMatrix::zeros(dim, r);
            for c in 0..r {
                let (lno, line) = lines.next().ok_or(LocoError::Parse {
                    line: hline + 1,
                    message: "file ends before all basis columns were read".into(),
                })?;
                let values: Vec<f64> = line
                    .split_whitespace()
                    .map(|tok| {
                        tok.parse().map_err(|_| LocoError::Parse {
                            line: lno + 1,
                            message: format!("`{tok}` is not a number"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if values.len() != dim {
                    return Err(LocoError::Parse {
                        line: lno + 1,
                        message: format!("expected {dim} entries, found {}", values.len()),
                    });
                }
                b.set_column(c, &DVector::from_vec(values));
            }
            bases.push(b);
        }
        if let Some((lno, _)) = lines.next() {
            return Err(LocoError::Parse {
                line: lno + 1,
                message: "unexpected trailing data".into(),
            });
        }
        Self::new(bases)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn noised(x0: &DVector<f64>, eps: &DVector<f64>, alpha: f64) -> DVector<f64> {
    x0 * alpha.sqrt() + eps * (1.0 - alpha).sqrt()
}

/// Contiguous, nearly equal coordinate blocks, one per component.
pub fn block_supports(dim: usize, components: usize) -> Vec<Vec<usize>> {
    (0..components)
        .map(|k| (k * dim / components..(k + 1) * dim / components).collect())
        .collect()
}

fn check_ranks(dim: usize, ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(LocoError::InvalidModel("ranks must be positive and non-empty".into()));
    }
    let total: usize = ranks.iter().sum();
    if total > dim {
        return Err(LocoError::InvalidModel(format!(
            "ranks sum to {total}, exceeding dimension {dim}"
        )));
    }
    Ok(())
}

fn split(q: &DMatrix<f64>, ranks: &[usize]) -> Vec<DMatrix<f64>> {
    let mut col = 0;
    ranks
        .iter()
        .map(|&r| {
            let b = q.columns(col, r).into_owned();
            col += r;
            b
        })
        .collect()
}

fn stack(bases: &[DMatrix<f64>], dim: usize, total: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, total);
    let mut col = 0;
    for b in bases {
        m.columns_mut(col, b.ncols()).copy_from(b);
        col += b.ncols();
    }
    m
}
