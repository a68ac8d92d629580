//! Conditional-moment coefficients `C[j][ℓ][k] = E[Y^j 1{W=ℓ, X=k}]`,
//! instrument marginals `P(W=ℓ)` and `Q = C / P(W=ℓ)`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;
use crate::sim::DgpSpec;

/// Highest power of `Y` needed for point estimation plus inference:
/// `max(K+1, 2K−2)`.
pub fn inference_power(k: usize) -> usize {
    (k + 1).max(2 * k.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "J")]
    pub j_max: usize,
    /// Sample size backing the estimates; 0 for population tables.
    pub n: usize,
    #[serde(rename = "pW")]
    pub p_w: [f64; 2],
    /// `C[j][ℓ][k]`.
    #[serde(rename = "C")]
    pub c: Vec<[Vec<f64>; 2]>,
    /// `Q[j][ℓ][k] = C[j][ℓ][k] / pW[ℓ]` (0 when `pW[ℓ] = 0`).
    #[serde(rename = "Q")]
    pub q: Vec<[Vec<f64>; 2]>,
    /// `empty[ℓ][k]`: no mass in cell `(ℓ, k)`.
    pub empty: [Vec<bool>; 2],
}

impl MomentTable {
    /// Assemble a table from raw `C[j][ℓ][k]` and `pW`.
    pub fn from_raw(k: usize, c: Vec<[Vec<f64>; 2]>, p_w: [f64; 2], n: usize) -> Result<Self> {
        if c.is_empty() {
            return Err(Error::InvalidArgument("moment table needs at least power 0".into()));
        }
        if c.iter().any(|row| row[0].len() != k || row[1].len() != k) {
            return Err(Error::InvalidArgument("every C[j][ℓ] must have K entries".into()));
        }
        let q = c
            .iter()
            .map(|row| {
                let scale = |ell: usize| {
                    row[ell]
                        .iter()
                        .map(|&v| if p_w[ell] > 0.0 { v / p_w[ell] } else { 0.0 })
                        .collect::<Vec<_>>()
                };
                [scale(0), scale(1)]
            })
            .collect();
        let empty = [
            c[0][0].iter().map(|&v| v <= 0.0).collect(),
            c[0][1].iter().map(|&v| v <= 0.0).collect(),
        ];
        Ok(Self {
            k,
            j_max: c.len() - 1,
            n,
            p_w,
            c,
            q,
            empty,
        })
    }

    /// `Q[j][ℓ][k]` with a 0-based category.
    #[inline]
    pub fn q(&self, j: usize, instrument: u8, category: usize) -> f64 {
        self.q[j][instrument as usize][category]
    }

    #[inline]
    pub fn c(&self, j: usize, instrument: u8, category: usize) -> f64 {
        self.c[j][instrument as usize][category]
    }

    pub fn is_empty_cell(&self, instrument: u8, category: usize) -> bool {
        self.empty[instrument as usize][category]
    }

    /// First empty cell, if any.
    pub fn first_empty_cell(&self) -> Option<(u8, usize)> {
        (0..2u8).find_map(|ell| (0..self.k).find(|&k| self.is_empty_cell(ell, k)).map(|k| (ell, k)))
    }

    pub fn require_power(&self, needed: usize) -> Result<()> {
        if self.j_max < needed {
            return Err(Error::InsufficientPower { needed, got: self.j_max });
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn provenance_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("moment table serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Largest `|Q[j][ℓ][k]|` over `j ≤ max_power`.
    pub fn coefficient_scale(&self, max_power: usize) -> f64 {
        self.q
            .iter()
            .take(max_power + 1)
            .flat_map(|row| row.iter().flatten())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    /// Relabel categories: category `c` becomes `perm[c]`.
    pub fn permute_categories(&self, perm: &[usize]) -> MomentTable {
        let permute = |v: &[f64]| {
            let mut out = vec![0.0; v.len()];
            for (c, &val) in v.iter().enumerate() {
                out[perm[c]] = val;
            }
            out
        };
        let c = self.c.iter().map(|row| [permute(&row[0]), permute(&row[1])]).collect();
        MomentTable::from_raw(self.k, c, self.p_w, self.n).expect("permuted table is valid")
    }
}

/// Plug-in estimates of `C`, `P(W=ℓ)` and `Q` up to power `j_max`, accumulated
/// in one pass with compensated summation. The result does not depend on any
/// thread partition.
pub fn estimate_moments(sample: &Sample, j_max: usize) -> Result<MomentTable> {
    if j_max < 1 {
        return Err(Error::InvalidArgument("J must be at least 1".into()));
    }
    sample.require_both_instruments()?;
    accumulate_moments(sample, j_max)
}

/// As [`estimate_moments`] but without the instrument-support check.
pub(crate) fn accumulate_moments(sample: &Sample, j_max: usize) -> Result<MomentTable> {
    let k = sample.k();
    let mut sums = vec![[vec![CompensatedSum::new(); k], vec![CompensatedSum::new(); k]]; j_max + 1];
    let mut w_count = [0usize; 2];
    for (y, x, w) in sample.iter() {
        let ell = w as usize;
        w_count[ell] += 1;
        let mut pow = 1.0;
        for row in sums.iter_mut() {
            row[ell][x].add(pow);
            pow *= y;
        }
    }
    let n = sample.n() as f64;
    let c = sums
        .iter()
        .map(|row| [row[0].iter().map(|s| s.value() / n).collect(), row[1].iter().map(|s| s.value() / n).collect()])
        .collect();
    let p_w = [w_count[0] as f64 / n, w_count[1] as f64 / n];
    MomentTable::from_raw(k, c, p_w, sample.n())
}

/// Exact (infinite-sample) table implied by a DGP.
pub fn population_table(dgp: &DgpSpec, j_max: usize) -> Result<MomentTable> {
    dgp.validate()?;
    if j_max < 1 {
        return Err(Error::InvalidArgument("J must be at least 1".into()));
    }
    let cells = dgp.cell_moments(j_max);
    let p_w = [dgp.p_w(0), dgp.p_w(1)];
    let c = (0..=j_max)
        .map(|j| {
            let row = |ell: usize| (0..dgp.k).map(|k| p_w[ell] * cells[ell][k][j]).collect::<Vec<_>>();
            [row(0), row(1)]
        })
        .collect();
    MomentTable::from_raw(dgp.k, c, p_w, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, ErrorFamily};

    fn four_rows() -> Sample {
        Sample::new(vec![1.0, 2.0, 3.0, 4.0], vec![0, 0, 1, 1], vec![0, 1, 0, 1], None).unwrap()
    }

    #[test]
    fn four_row_hand_values() {
        let t = estimate_moments(&four_rows(), 2).unwrap();
        assert_eq!(t.c(1, 0, 0), 0.25);
        assert_eq!(t.p_w[0], 0.5);
        assert_eq!(t.q(1, 0, 0), 0.5);
        assert_eq!(t.c(2, 1, 1), 16.0 / 4.0);
        assert_eq!(t.n, 4);
    }

    #[test]
    fn zero_power_rows_sum_to_one() {
        let dgp = DgpSpec::exogenous(vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.0, 1.0, 2.0], 0.3, ErrorFamily::Uniform { half_width: 1.0 }).unwrap();
        let t = estimate_moments(&simulate(&dgp, 2000, 4).unwrap(), 3).unwrap();
        for ell in 0..2 {
            let s: f64 = t.q[0][ell].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let c: f64 = t.c[0][ell].iter().sum();
            assert!((c - t.p_w[ell]).abs() < 1e-12);
        }
        assert!((t.p_w[0] + t.p_w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let s = Sample::new(vec![1.0, 2.0], vec![0, 1], vec![0, 0], None).unwrap();
        assert!(matches!(estimate_moments(&s, 2), Err(Error::DegenerateInstrument { missing: 1 })));
        assert!(matches!(estimate_moments(&four_rows(), 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn empty_cells_are_flagged_and_zero() {
        let s = Sample::new(vec![1.0, 2.0, 3.0], vec![0, 0, 1], vec![0, 1, 0], Some(3)).unwrap();
        let t = estimate_moments(&s, 2).unwrap();
        assert!(t.is_empty_cell(1, 1));
        assert!(t.is_empty_cell(0, 2));
        assert!(!t.is_empty_cell(0, 0));
        assert_eq!(t.q(2, 1, 1), 0.0);
        assert_eq!(t.first_empty_cell(), Some((0, 2)));
    }

    #[test]
    fn population_table_special_cases() {
        let gauss = DgpSpec::exogenous(vec![0.7, 0.3], vec![0.3, 0.7], vec![0.0, 0.0], 0.5, ErrorFamily::Gaussian { sigma: 1.0 }).unwrap();
        let t = population_table(&gauss, 3).unwrap();
        assert_eq!(t.q(2, 0, 0), 0.7);
        assert_eq!(t.n, 0);

        let g = vec![1.5, -2.0];
        let point = DgpSpec::exogenous(vec![0.4, 0.6], vec![0.9, 0.1], g.clone(), 0.5, ErrorFamily::Gaussian { sigma: 0.0 }).unwrap();
        let t = population_table(&point, 4).unwrap();
        for j in 0..=4 {
            for ell in 0..2u8 {
                for k in 0..2 {
                    let expected = g[k].powi(j as i32) * point.p(ell)[k];
                    assert!((t.q(j, ell, k) - expected).abs() < 1e-12);
                }
            }
        }

        let two = DgpSpec::exogenous(vec![0.5, 0.5], vec![0.2, 0.8], vec![0.0, 0.0], 0.5, ErrorFamily::TwoPoint { v: 1.3 }).unwrap();
        let t = population_table(&two, 3).unwrap();
        assert!(t.q[3].iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn json_has_expected_keys() {
        let t = estimate_moments(&four_rows(), 2).unwrap();
        let v: serde_json::Value = serde_json::to_value(&t).unwrap();
        for key in ["K", "J", "pW", "C", "Q", "n", "empty"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: MomentTable = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
        assert_eq!(t.provenance_hash().len(), 64);
    }

    #[test]
    fn inference_power_values() {
        assert_eq!(inference_power(2), 3);
        assert_eq!(inference_power(3), 4);
        assert_eq!(inference_power(4), 6);
        assert_eq!(inference_power(1), 2);
    }
}
