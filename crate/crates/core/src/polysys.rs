//! The polynomial maps `P_0 … P_{K+1}` built from a [`MomentTable`], their
//! stacked forms `Γ` (all of them) and `Λ` (`P_0 … P_{K−1}`), and derivatives
//! with respect to both the evaluation point and the raw coefficient vector.
//!
//! Every `P_m` is stored per category as a univariate polynomial in `z = −h_k`:
//!
//! ```text
//! P_m(h) = Σ_k Σ_{j=0}^{d_m} a[m][k][j] · (−h_k)^{d_m − j},   d_m = max(m, 1)
//! ```
//!
//! For `m ≥ 1`, `a[m][k][j] = binom(m, j) (Q[j][0][k] − Q[j][1][k])`. `P_0` is the
//! mean restriction `Σ_k (Q[1][0][k] − h_k Q[0][0][k])`, which fits the same
//! layout as a degree-one polynomial with `a[0][k] = [Q[0][0][k], Q[1][0][k]]`.
//! Evaluation and differentiation share this single representation.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::MomentTable;
use crate::numeric::binomial;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySystem {
    #[serde(rename = "K")]
    k: usize,
    /// `coeffs[m][k][j]`, `m = 0..=K+1`.
    coeffs: Vec<Vec<Vec<f64>>>,
    /// Sample size of the source table (0 for population tables).
    n: usize,
    /// Largest `|Q[j][ℓ][k]|` with `j ≤ K−1`; sets the finite-sample root tolerance.
    coefficient_scale: f64,
    empty: [Vec<bool>; 2],
    source_hash: String,
}

/// Value and derivative in `z` of `Σ_j a_j z^{d−j}` (Horner).
#[inline]
fn horner(a: &[f64], z: f64) -> (f64, f64) {
    let mut p = a[0];
    let mut dp = 0.0;
    for &coef in &a[1..] {
        dp = dp * z + p;
        p = p * z + coef;
    }
    (p, dp)
}

impl PolySystem {
    pub fn build(table: &MomentTable) -> Result<Self> {
        let k = table.k;
        table.require_power(k + 1)?;
        for ell in 0..2 {
            if !(table.p_w[ell] > 0.0) {
                return Err(Error::DegenerateInstrument { missing: ell as u8 });
            }
        }
        let mut coeffs = Vec::with_capacity(k + 2);
        coeffs.push(
            (0..k)
                .map(|c| vec![table.q(0, 0, c), table.q(1, 0, c)])
                .collect::<Vec<_>>(),
        );
        for m in 1..=k + 1 {
            coeffs.push(
                (0..k)
                    .map(|c| {
                        (0..=m)
                            .map(|j| binomial(m, j) * (table.q(j, 0, c) - table.q(j, 1, c)))
                            .collect()
                    })
                    .collect(),
            );
        }
        Ok(Self {
            k,
            coeffs,
            n: table.n,
            coefficient_scale: table.coefficient_scale(k.saturating_sub(1).max(1)),
            empty: table.empty.clone(),
            source_hash: table.provenance_hash(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coefficient_scale(&self) -> f64 {
        self.coefficient_scale
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// Coefficients of `P_m` for category `category`, highest power of `−h_k` first.
    pub fn coefficients(&self, m: usize, category: usize) -> &[f64] {
        &self.coeffs[m][category]
    }

    pub fn first_empty_cell(&self) -> Option<(u8, usize)> {
        (0..2u8).find_map(|ell| {
            (0..self.k)
                .find(|&c| self.empty[ell as usize][c])
                .map(|c| (ell, c))
        })
    }

    /// Error if any `(ℓ, k)` cell had no observations.
    pub fn require_populated(&self) -> Result<()> {
        match self.first_empty_cell() {
            Some((instrument, category)) => Err(Error::EmptyCell {
                instrument,
                category: category + 1,
            }),
            None => Ok(()),
        }
    }

    pub fn eval(&self, m: usize, h: &[f64]) -> f64 {
        debug_assert_eq!(h.len(), self.k);
        self.coeffs[m]
            .iter()
            .zip(h)
            .map(|(a, &hk)| horner(a, -hk).0)
            .sum()
    }

    fn eval_rows(&self, rows: Range<usize>, h: &[f64]) -> Vec<f64> {
        rows.map(|m| self.eval(m, h)).collect()
    }

    /// `Γ(h) = (P_0(h), …, P_{K+1}(h))`.
    pub fn eval_gamma(&self, h: &[f64]) -> Vec<f64> {
        self.eval_rows(0..self.k + 2, h)
    }

    /// `Λ(h) = (P_0(h), …, P_{K−1}(h))`.
    pub fn eval_lambda(&self, h: &[f64]) -> Vec<f64> {
        self.eval_rows(0..self.k, h)
    }

    /// Analytic `∂P_m/∂h_k` for `m` in `rows`.
    pub fn jacobian_h(&self, h: &[f64], rows: Range<usize>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(rows.len(), self.k);
        for (r, m) in rows.enumerate() {
            for (c, &hk) in h.iter().enumerate() {
                // d/dh = −d/dz at z = −h
                jac[(r, c)] = -horner(&self.coeffs[m][c], -hk).1;
            }
        }
        jac
    }

    /// Jacobian of `Λ`, the matrix `V` when evaluated at the truth.
    pub fn jacobian_lambda(&self, h: &[f64]) -> DMatrix<f64> {
        self.jacobian_h(h, 0..self.k)
    }

    /// Relabel categories: category `c` becomes `perm[c]`.
    pub fn permute_categories(&self, perm: &[usize]) -> PolySystem {
        let mut out = self.clone();
        for (m, row) in self.coeffs.iter().enumerate() {
            for (c, a) in row.iter().enumerate() {
                out.coeffs[m][perm[c]] = a.clone();
            }
        }
        for ell in 0..2 {
            for (c, &e) in self.empty[ell].iter().enumerate() {
                out.empty[ell][perm[c]] = e;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Raw coefficient vector and Ψ

/// 1-based flat index `ι(j, ℓ, k) = 2Kj + 2k + ℓ − 1` for `j ∈ 0..K`,
/// `ℓ ∈ {0,1}`, `k ∈ 1..=K`.
pub fn iota(k_dim: usize, j: usize, instrument: u8, category: usize) -> usize {
    2 * k_dim * j + 2 * category + instrument as usize - 1
}

/// `(C[j][ℓ][k])` for `j < K` in `ι` order, followed by `P(W=0)` and `P(W=1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    k: usize,
    entries: Vec<f64>,
}

impl CoefficientVector {
    pub fn new(k: usize, entries: Vec<f64>) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument("the coefficient vector requires K >= 2".into()));
        }
        if entries.len() != 2 * k * k + 2 {
            return Err(Error::InvalidArgument(format!(
                "coefficient vector for K = {k} needs {} entries, got {}",
                2 * k * k + 2,
                entries.len()
            )));
        }
        Ok(Self { k, entries })
    }

    pub fn from_table(table: &MomentTable) -> Result<Self> {
        let k = table.k;
        if k < 2 {
            return Err(Error::InvalidArgument("the coefficient vector requires K >= 2".into()));
        }
        table.require_power(k - 1)?;
        let mut entries = vec![0.0; 2 * k * k + 2];
        for j in 0..k {
            for ell in 0..2u8 {
                for c in 0..k {
                    entries[Self::index(k, j, ell, c)] = table.c(j, ell, c);
                }
            }
        }
        entries[2 * k * k] = table.p_w[0];
        entries[2 * k * k + 1] = table.p_w[1];
        Ok(Self { k, entries })
    }

    /// 0-based position of `C[j][ℓ][category]` (0-based category).
    #[inline]
    pub fn index(k: usize, j: usize, instrument: u8, category: usize) -> usize {
        iota(k, j, instrument, category + 1) - 1
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn at(&self, j: usize, instrument: u8, category: usize) -> f64 {
        self.entries[Self::index(self.k, j, instrument, category)]
    }

    fn p_w(&self) -> (f64, f64) {
        let n = self.entries.len();
        (self.entries[n - 2], self.entries[n - 1])
    }

    fn require_positive_pw(&self) -> Result<()> {
        let (a, b) = self.p_w();
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "instrument probabilities must be positive, got ({a}, {b})"
            )));
        }
        Ok(())
    }

    /// `Ψ(v, w) = (Ψ_0, …, Ψ_{K−1})`; equals `Λ(v)` when `w` is built from the
    /// same table.
    pub fn psi(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.require_positive_pw()?;
        let (pa, pb) = self.p_w();
        let k = self.k;
        let mut out = vec![0.0; k];
        out[0] = (0..k).map(|c| (self.at(1, 0, c) - v[c] * self.at(0, 0, c)) / pa).sum();
        for (m, slot) in out.iter_mut().enumerate().skip(1) {
            *slot = (0..k)
                .map(|c| {
                    (0..=m)
                        .map(|j| {
                            binomial(m, j)
                                * (self.at(j, 0, c) / pa - self.at(j, 1, c) / pb)
                                * (-v[c]).powi((m - j) as i32)
                        })
                        .sum::<f64>()
                })
                .sum();
        }
        Ok(out)
    }

    /// `D_w Ψ(v, w)`: a `K × (2K² + 2)` matrix.
    pub fn jacobian_w(&self, v: &[f64]) -> Result<DMatrix<f64>> {
        self.require_positive_pw()?;
        let (pa, pb) = self.p_w();
        let k = self.k;
        let (ia, ib) = (2 * k * k, 2 * k * k + 1);
        let mut jac = DMatrix::zeros(k, 2 * k * k + 2);

        for c in 0..k {
            jac[(0, Self::index(k, 1, 0, c))] = 1.0 / pa;
            jac[(0, Self::index(k, 0, 0, c))] = -v[c] / pa;
            jac[(0, ia)] -= (self.at(1, 0, c) - v[c] * self.at(0, 0, c)) / (pa * pa);
        }
        for m in 1..k {
            for c in 0..k {
                for j in 0..=m {
                    let base = binomial(m, j) * (-v[c]).powi((m - j) as i32);
                    jac[(m, Self::index(k, j, 0, c))] += base / pa;
                    jac[(m, Self::index(k, j, 1, c))] -= base / pb;
                    jac[(m, ia)] -= base * self.at(j, 0, c) / (pa * pa);
                    jac[(m, ib)] += base * self.at(j, 1, c) / (pb * pb);
                }
            }
        }
        Ok(jac)
    }

    /// `D_v Ψ(v, w)`, the `K × K` Jacobian in the evaluation point.
    pub fn jacobian_v(&self, v: &[f64]) -> Result<DMatrix<f64>> {
        self.require_positive_pw()?;
        let (pa, pb) = self.p_w();
        let k = self.k;
        let mut jac = DMatrix::zeros(k, k);
        for c in 0..k {
            jac[(0, c)] = -self.at(0, 0, c) / pa;
        }
        for m in 1..k {
            for c in 0..k {
                jac[(m, c)] = (0..m)
                    .map(|j| {
                        -binomial(m, j)
                            * (self.at(j, 0, c) / pa - self.at(j, 1, c) / pb)
                            * (m - j) as f64
                            * (-v[c]).powi((m - j - 1) as i32)
                    })
                    .sum();
            }
        }
        Ok(jac)
    }

    /// Copy with `entries + step · direction`.
    pub fn perturbed(&self, direction: &[f64], step: f64) -> CoefficientVector {
        CoefficientVector {
            k: self.k,
            entries: self.entries.iter().zip(direction).map(|(a, d)| a + step * d).collect(),
        }
    }
}

/// Convenience form of [`CoefficientVector::jacobian_w`].
pub fn jacobian_w(h: &[f64], w: &CoefficientVector) -> Result<DMatrix<f64>> {
    if h.len() != w.k() {
        return Err(Error::InvalidArgument("h must have K entries".into()));
    }
    w.jacobian_w(h)
}
