//! Delta-method covariance of `g̃` and Wald intervals.
//!
//! `√n (g̃ − g)` is asymptotically normal with covariance `Σ = D Ω D′`, where
//! `D = −V⁻¹Δ`, `V` is the Jacobian of `Λ` at `g̃`, `Δ` the Jacobian of `Ψ` in
//! the raw coefficient vector, and `Ω` the covariance of that vector's
//! per-observation summands.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::moments::{estimate_moments, MomentTable};
use crate::numeric::{condition_number, normal_quantile};
use crate::polysys::{CoefficientVector, PolySystem};

/// Condition number of `V` at which inference is refused.
pub const SINGULAR_CONDITION: f64 = 1e10;
/// Condition number above which a warning flag is attached.
pub const NEAR_SINGULAR_CONDITION: f64 = 1e6;

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaMatrix {
    #[serde(rename = "K")]
    pub k: usize,
    pub dim: usize,
    pub values: Vec<Vec<f64>>,
}

impl OmegaMatrix {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |r, c| self.values[r][c])
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a][b]
    }
}

/// `Ω` from a table holding powers up to `2K−2`. Products of two summands vanish
/// unless they share the `(ℓ, k)` cell, so every second moment is itself a
/// table entry.
pub fn omega_from_table(table: &MomentTable) -> Result<OmegaMatrix> {
    let k = table.k;
    if k < 2 {
        return Err(Error::InvalidArgument("inference requires K >= 2".into()));
    }
    table.require_power(2 * k - 2)?;
    let dim = 2 * k * k + 2;
    let mut mean = vec![0.0; dim];
    // (j, ℓ, category) of each monomial entry
    let mut cell = vec![None; dim];
    for j in 0..k {
        for ell in 0..2u8 {
            for c in 0..k {
                let a = CoefficientVector::index(k, j, ell, c);
                mean[a] = table.c(j, ell, c);
                cell[a] = Some((j, ell, c));
            }
        }
    }
    mean[dim - 2] = table.p_w[0];
    mean[dim - 1] = table.p_w[1];
    let second = |a: usize, b: usize| -> f64 {
        match (cell[a], cell[b]) {
            (Some((ja, la, ca)), Some((jb, lb, cb))) => {
                if la == lb && ca == cb {
                    table.c(ja + jb, la, ca)
                } else {
                    0.0
                }
            }
            (Some((j, l, c)), None) | (None, Some((j, l, c))) => {
                let ind = if a >= dim - 2 { a } else { b } - (dim - 2);
                if ind == l as usize {
                    table.c(j, l, c)
                } else {
                    0.0
                }
            }
            (None, None) => {
                if a == b {
                    table.p_w[a - (dim - 2)]
                } else {
                    0.0
                }
            }
        }
    };
    let mut values = vec![vec![0.0; dim]; dim];
    for a in 0..dim {
        for b in a..dim {
            let v = second(a, b) - mean[a] * mean[b];
            values[a][b] = v;
            values[b][a] = v;
        }
    }
    Ok(OmegaMatrix { k, dim, values })
}

/// Plug-in `Ω̂` from a sample.
pub fn omega_hat(sample: &Sample) -> Result<OmegaMatrix> {
    let k = sample.k();
    if k < 2 {
        return Err(Error::InvalidArgument("inference requires K >= 2".into()));
    }
    if sample.n() == 0 {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let table = crate::moments::accumulate_moments(sample, (2 * k - 2).max(1))?;
    omega_from_table(&table)
}

/// `D = −V⁻¹Δ` at `h`, both Jacobians taken from the coefficient vector.
pub fn implicit_derivative(w: &CoefficientVector, h: &[f64]) -> Result<DMatrix<f64>> {
    let v = w.jacobian_v(h)?;
    let delta = w.jacobian_w(h)?;
    solve_derivative(&v, &delta)
}

fn solve_derivative(v: &DMatrix<f64>, delta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let condition = condition_number(v);
    if !(condition < SINGULAR_CONDITION) {
        return Err(Error::SingularJacobian { condition });
    }
    let lu = v.clone().lu();
    let sol = lu.solve(delta).ok_or(Error::SingularJacobian { condition })?;
    Ok(-sol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub g_tilde: Vec<f64>,
    /// `Σ / n`.
    pub cov: Vec<Vec<f64>>,
    /// Asymptotic covariance `Σ = D Ω D′` of `√n (g̃ − g)`.
    pub sigma: Vec<Vec<f64>>,
    pub ci: Vec<Interval>,
    pub level: f64,
    pub n: usize,
    #[serde(rename = "condition_V")]
    pub condition_v: f64,
    pub flags: Vec<String>,
}

impl EstimateReport {
    /// `Σ^{-1/2} √n (g̃ − g)`, approximately standard normal at the truth.
    pub fn standardize(&self, g: &[f64]) -> Result<Vec<f64>> {
        let k = self.g_tilde.len();
        let sigma = DMatrix::from_fn(k, k, |r, c| self.sigma[r][c]);
        let eig = SymmetricEigen::new(sigma);
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::NotPositiveSemidefinite {
                min_eigenvalue: eig.eigenvalues.min(),
            });
        }
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
            * eig.eigenvectors.transpose();
        let rn = (self.n as f64).sqrt();
        let d = DVector::from_iterator(k, self.g_tilde.iter().zip(g).map(|(a, b)| rn * (a - b)));
        Ok((inv_sqrt * d).iter().copied().collect())
    }
}

/// Symmetrise and clip eigenvalues in `(−tol, 0)`; more negative ones are an error.
fn repair_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-10 * lmax.max(1.0);
    let lmin = eig.eigenvalues.min();
    if lmin < -tol {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue: lmin });
    }
    if lmin >= 0.0 {
        return Ok(sym);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())
}

/// Covariance and intervals for `g̃` at confidence level `level`.
pub fn asymptotic_report(sample: &Sample, g_tilde: &[f64], sys: &PolySystem, level: f64) -> Result<EstimateReport> {
    let k = sys.k();
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must lie in (0, 1), got {level}")));
    }
    if k < 2 {
        return Err(Error::InvalidArgument("inference requires K >= 2".into()));
    }
    if g_tilde.len() != k || sample.k() != k {
        return Err(Error::InvalidArgument("dimension mismatch between sample, system and estimate".into()));
    }
    sys.require_populated()?;
    let table = estimate_moments(sample, (2 * k - 2).max(k - 1).max(1))?;
    let w = CoefficientVector::from_table(&table)?;
    let omega = omega_from_table(&table)?.matrix();

    let v = sys.jacobian_lambda(g_tilde);
    let condition_v = condition_number(&v);
    let delta = w.jacobian_w(g_tilde)?;
    let d = solve_derivative(&v, &delta)?;
    let sigma = repair_psd(&d * omega * d.transpose())?;
    let n = sample.n();
    let cov = &sigma / n as f64;

    let z = normal_quantile(0.5 + level / 2.0);
    let ci = (0..k)
        .map(|i| {
            let half = z * cov[(i, i)].max(0.0).sqrt();
            Interval {
                lower: g_tilde[i] - half,
                upper: g_tilde[i] + half,
            }
        })
        .collect();
    let mut flags = Vec::new();
    if condition_v > NEAR_SINGULAR_CONDITION {
        flags.push("near-singular-jacobian".to_string());
    }
    Ok(EstimateReport {
        g_tilde: g_tilde.to_vec(),
        cov: to_rows(&cov),
        sigma: to_rows(&sigma),
        ci,
        level,
        n,
        condition_v,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::population_table;
    use crate::sim::{simulate, DgpSpec, ErrorFamily};

    fn gaussian() -> DgpSpec {
        DgpSpec::exogenous(vec![0.7, 0.3], vec![0.3, 0.7], vec![1.0, -0.5], 0.5, ErrorFamily::Gaussian { sigma: 1.0 }).unwrap()
    }

    #[test]
    fn identical_rows_give_zero_omega() {
        let s = Sample::new(vec![2.0; 6], vec![1; 6], vec![0; 6], Some(2)).unwrap();
        let om = omega_hat(&s).unwrap();
        assert_eq!(om.dim, 10);
        assert!(om.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn indicator_entries() {
        let s = simulate(&gaussian(), 500, 3).unwrap();
        let om = omega_hat(&s).unwrap();
        let t = estimate_moments(&s, 2).unwrap();
        assert!((om.get(8, 9) + t.p_w[0] * t.p_w[1]).abs() < 1e-12);
        assert!((om.get(8, 8) - t.p_w[0] * t.p_w[1]).abs() < 1e-12);
        let m = om.matrix();
        assert!((&m - m.transpose()).norm() == 0.0);
        assert!(SymmetricEigen::new(m).eigenvalues.min() > -1e-10);
    }

    #[test]
    fn constant_sample_omega_is_zero() {
        // one W group cannot occur, so compare the monomial block inside W = 0 only
        let table = MomentTable::from_raw(
            2,
            (0..3).map(|j| [vec![3f64.powi(j), 0.0], vec![0.0, 0.0]]).collect(),
            [1.0, 0.0],
            10,
        )
        .unwrap();
        let om = omega_from_table(&table).unwrap();
        assert!(om.values.iter().flatten().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn report_on_population_scaled_sample() {
        let dgp = gaussian();
        let s = simulate(&dgp, 20_000, 11).unwrap();
        let t = estimate_moments(&s, 3).unwrap();
        let sys = PolySystem::build(&t).unwrap();
        let est = crate::solver::estimate_g_tilde(&sys, 10.0, &Default::default()).unwrap();
        let rep = asymptotic_report(&s, &est.g_tilde, &sys, 0.95).unwrap();
        for (k, ci) in rep.ci.iter().enumerate() {
            assert!(ci.contains(rep.g_tilde[k]));
            assert!(ci.upper - ci.lower > 0.0);
        }
        let cov = DMatrix::from_fn(2, 2, |r, c| rep.cov[r][c]);
        assert!((&cov - cov.transpose()).norm() < 1e-10);
        assert!(rep.condition_v < 10.0);
        let z = rep.standardize(&dgp.g).unwrap();
        assert!(z.iter().all(|v| v.abs() < 5.0));
    }

    #[test]
    fn singular_v_is_rejected() {
        let dgp = DgpSpec::exogenous(vec![0.5, 0.5], vec![0.5, 0.5], vec![0.0, 0.0], 0.5, ErrorFamily::Gaussian { sigma: 1.0 }).unwrap();
        let s = simulate(&dgp, 200, 1).unwrap();
        let table = population_table(&dgp, 3).unwrap();
        let sys = PolySystem::build(&table).unwrap();
        let err = asymptotic_report(&s, &[0.0, 0.0], &sys, 0.95).unwrap_err();
        assert!(matches!(err, Error::SingularJacobian { .. }));
        assert!(err.is_statistical());
    }

    #[test]
    fn bad_level() {
        let dgp = gaussian();
        let s = simulate(&dgp, 100, 1).unwrap();
        let sys = PolySystem::build(&population_table(&dgp, 3).unwrap()).unwrap();
        assert!(asymptotic_report(&s, &dgp.g, &sys, 1.0).is_err());
    }
}
