//! Identification diagnostics: instrument relevance over category subsets,
//! the `K!` root bound, an observationally equivalent pair of designs when
//! relevance fails, and the characteristic-function set estimator.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::moments::MomentTable;
use crate::sim::{DgpSpec, LatentClass};

const MAX_AUDIT_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMargin {
    /// 1-based category labels, ascending.
    pub subset: Vec<usize>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    #[serde(rename = "K")]
    pub k: usize,
    /// One entry per strict nonempty subset, in bitmask order.
    pub margins: Vec<SubsetMargin>,
    pub min_margin: f64,
    pub min_subset: Vec<usize>,
}

impl RelevanceReport {
    pub fn margin_of(&self, subset: &[usize]) -> Option<f64> {
        let mut s = subset.to_vec();
        s.sort_unstable();
        self.margins.iter().find(|m| m.subset == s).map(|m| m.margin)
    }
}

fn labels(mask: u32, k: usize) -> Vec<usize> {
    (0..k).filter(|&c| mask >> c & 1 == 1).map(|c| c + 1).collect()
}

/// `|P(X∈J | W=0) − P(X∈J | W=1)|` for every strict nonempty `J`, from `Q[0]`.
///
/// The minimum is reported with ties (within 1e-12) going to the smaller
/// subset, then to the lexicographically smaller label list.
pub fn check_relevance(table: &MomentTable) -> Result<RelevanceReport> {
    let k = table.k;
    if k < 2 {
        return Err(Error::InvalidArgument("relevance needs K >= 2".into()));
    }
    if k > MAX_AUDIT_K {
        return Err(Error::InvalidArgument(format!(
            "K = {k} has too many subsets to enumerate (limit {MAX_AUDIT_K}); audit a sampled family of subsets instead"
        )));
    }
    let diff: Vec<f64> = (0..k).map(|c| table.q(0, 0, c) - table.q(0, 1, c)).collect();
    let full = (1u32 << k) - 1;
    let margins: Vec<SubsetMargin> = (1..full)
        .map(|mask| SubsetMargin {
            subset: labels(mask, k),
            margin: (0..k).filter(|&c| mask >> c & 1 == 1).map(|c| diff[c]).sum::<f64>().abs(),
        })
        .collect();
    let mut best = &margins[0];
    for m in &margins[1..] {
        let better = if (m.margin - best.margin).abs() <= 1e-12 {
            (m.subset.len(), &m.subset) < (best.subset.len(), &best.subset)
        } else {
            m.margin < best.margin
        };
        if better {
            best = m;
        }
    }
    Ok(RelevanceReport {
        k,
        min_margin: best.margin,
        min_subset: best.subset.clone(),
        margins,
    })
}

/// `K!`, the most isolated roots the identifying system can have.
pub fn bezout_bound(k: usize) -> Result<u64> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if k > MAX_AUDIT_K {
        return Err(Error::Overflow(k));
    }
    Ok((1..=k as u64).product())
}

/// Two designs with the same law of `(Y, X, W)` but different `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonidentifiedDesign {
    /// The base design rewritten with one latent class for `J` and one for its complement.
    pub original: DgpSpec,
    /// Structural function `g + δ` with errors shifted by `−δ₀` on `J` and `−δ₁` off `J`.
    pub shifted: DgpSpec,
    pub alternative_g: Vec<f64>,
    pub delta: Vec<f64>,
    pub delta1: f64,
}

/// Build the equivalent pair for a subset `subset` (0-based categories) on
/// which the instrument has no aggregate effect.
///
/// `base` must be a single-class design; its error law is used on both `J`
/// and the complement.
pub fn nonidentified_dgp(base: &DgpSpec, subset: &[usize], delta0: f64) -> Result<NonidentifiedDesign> {
    base.validate()?;
    let k = base.k;
    if base.classes.len() != 1 {
        return Err(Error::InvalidArgument("base design must have a single error class".into()));
    }
    let mut in_j = vec![false; k];
    for &c in subset {
        if c >= k {
            return Err(Error::InvalidArgument(format!("category {} out of range", c + 1)));
        }
        in_j[c] = true;
    }
    let size = in_j.iter().filter(|&&b| b).count();
    if size == 0 || size == k {
        return Err(Error::InvalidArgument("subset must be strict and nonempty".into()));
    }
    if !(delta0 != 0.0 && delta0.is_finite()) {
        return Err(Error::InvalidArgument("delta0 must be finite and nonzero".into()));
    }
    let p = [base.p(0), base.p(1)];
    let mass = |ell: usize| (0..k).filter(|&c| in_j[c]).map(|c| p[ell][c]).sum::<f64>();
    let (pj0, pj1) = (mass(0), mass(1));
    if (pj0 - pj1).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "P(X in J | W) differs across instrument values ({pj0} vs {pj1})"
        )));
    }
    if !(pj0 > 0.0 && pj0 < 1.0) {
        return Err(Error::InvalidArgument("subset must have probability strictly between 0 and 1".into()));
    }
    let delta1 = -delta0 * pj0 / (1.0 - pj0);
    let noise = base.classes[0].noise.clone();
    let restrict = |inside: bool, weight: f64| -> [Vec<f64>; 2] {
        let row = |ell: usize| {
            (0..k)
                .map(|c| if in_j[c] == inside { p[ell][c] / weight } else { 0.0 })
                .collect::<Vec<_>>()
        };
        [row(0), row(1)]
    };
    let classes = |shift_j: f64, shift_c: f64| {
        vec![
            LatentClass {
                weight: pj0,
                shift: shift_j,
                noise: noise.clone(),
                x_given_w: restrict(true, pj0),
            },
            LatentClass {
                weight: 1.0 - pj0,
                shift: shift_c,
                noise: noise.clone(),
                x_given_w: restrict(false, 1.0 - pj0),
            },
        ]
    };
    let delta: Vec<f64> = (0..k).map(|c| if in_j[c] { delta0 } else { delta1 }).collect();
    let alternative_g: Vec<f64> = base.g.iter().zip(&delta).map(|(g, d)| g + d).collect();
    let original = DgpSpec {
        k,
        g: base.g.clone(),
        p_w0: base.p_w0,
        classes: classes(0.0, 0.0),
    };
    let shifted = DgpSpec {
        k,
        g: alternative_g.clone(),
        p_w0: base.p_w0,
        classes: classes(-delta0, -delta1),
    };
    original.validate()?;
    shifted.validate()?;
    Ok(NonidentifiedDesign {
        original,
        shifted,
        alternative_g,
        delta,
        delta1,
    })
}

/// Empirical `E[exp(i t (Y − h(X))) | W = ℓ]`; 0 for an empty group.
pub fn ecf(sample: &Sample, h: &[f64], t: f64, instrument: u8) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    let mut count = 0usize;
    for (y, x, w) in sample.iter() {
        if w == instrument {
            acc += Complex64::from_polar(1.0, t * (y - h[x]));
            count += 1;
        }
    }
    if count == 0 {
        Complex64::new(0.0, 0.0)
    } else {
        acc / count as f64
    }
}

/// 64 equispaced points on `[0, 1]`.
pub fn default_t_grid() -> Vec<f64> {
    equispaced_t_grid(64)
}

pub fn equispaced_t_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        m => (0..m).map(|i| i as f64 / (m - 1) as f64).collect(),
    }
}

/// `n^{−1/3}`.
pub fn default_eta(n: usize) -> f64 {
    (n as f64).powf(-1.0 / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedSetEstimate {
    pub candidates: Vec<Vec<f64>>,
    pub criterion: Vec<f64>,
    /// `|Ê[Y − h(X)]|` per candidate.
    pub mean_part: Vec<f64>,
    /// `max_t |ECF₀ − ECF₁|` per candidate.
    pub ecf_part: Vec<f64>,
    pub eta: f64,
    pub t_grid: Vec<f64>,
    /// Indices of candidates with criterion ≤ eta.
    pub members: Vec<usize>,
}

impl IdentifiedSetEstimate {
    pub fn members_at(&self, eta: f64) -> Vec<usize> {
        (0..self.criterion.len()).filter(|&i| self.criterion[i] <= eta).collect()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members.binary_search(&index).is_ok()
    }
}

fn validate_set_args(k: usize, candidates: &[Vec<f64>], t_grid: &[f64], eta: f64) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("candidate list is empty".into()));
    }
    if let Some(i) = candidates.iter().position(|c| c.len() != k || c.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument(format!("candidate {} must have {k} finite entries", i + 1)));
    }
    if t_grid.is_empty() || t_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidArgument("t grid must be nonempty and inside [0, 1]".into()));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    Ok(())
}

fn finish(candidates: &[Vec<f64>], mean_part: Vec<f64>, ecf_part: Vec<f64>, t_grid: &[f64], eta: f64) -> IdentifiedSetEstimate {
    let criterion: Vec<f64> = mean_part.iter().zip(&ecf_part).map(|(a, b)| a.max(*b)).collect();
    let members = (0..criterion.len()).filter(|&i| criterion[i] <= eta).collect();
    IdentifiedSetEstimate {
        candidates: candidates.to_vec(),
        criterion,
        mean_part,
        ecf_part,
        eta,
        t_grid: t_grid.to_vec(),
        members,
    }
}

/// Candidates whose mean residual and ECF gap across instrument groups both
/// stay below `eta`.
///
/// Per-cell sums `Σ exp(i t Y)` are formed once, so each candidate costs
/// `O(|t_grid|·K)`.
pub fn estimate_identified_set(sample: &Sample, candidates: &[Vec<f64>], t_grid: &[f64], eta: f64) -> Result<IdentifiedSetEstimate> {
    let k = sample.k();
    validate_set_args(k, candidates, t_grid, eta)?;
    let n = sample.n() as f64;
    let counts = crate::data::split_counts(sample);
    let group = [counts.instrument_total(0) as f64, counts.instrument_total(1) as f64];
    let cell_share: Vec<f64> = (0..k).map(|c| (counts.get(0, c) + counts.get(1, c)) as f64 / n).collect();
    let y_mean: f64 = sample.y().iter().sum::<f64>() / n;

    // sums[ti][ℓ][k] = Σ_{i in cell} exp(i t Y_i)
    let sums: Vec<[Vec<Complex64>; 2]> = t_grid
        .par_iter()
        .map(|&t| {
            let mut cell = [vec![Complex64::new(0.0, 0.0); k], vec![Complex64::new(0.0, 0.0); k]];
            for (y, x, w) in sample.iter() {
                cell[w as usize][x] += Complex64::from_polar(1.0, t * y);
            }
            cell
        })
        .collect();

    let parts: Vec<(f64, f64)> = candidates
        .par_iter()
        .map(|h| {
            let mean = (y_mean - h.iter().zip(&cell_share).map(|(a, b)| a * b).sum::<f64>()).abs();
            let mut gap = 0.0f64;
            for (ti, &t) in t_grid.iter().enumerate() {
                let mut e = [Complex64::new(0.0, 0.0); 2];
                for (ell, acc) in e.iter_mut().enumerate() {
                    if group[ell] == 0.0 {
                        continue;
                    }
                    for c in 0..k {
                        *acc += Complex64::from_polar(1.0, -t * h[c]) * sums[ti][ell][c];
                    }
                    *acc /= group[ell];
                }
                gap = gap.max((e[0] - e[1]).norm());
            }
            (mean, gap)
        })
        .collect();
    let (mean_part, ecf_part) = parts.into_iter().unzip();
    Ok(finish(candidates, mean_part, ecf_part, t_grid, eta))
}

/// Population counterpart of the set criterion for a known design.
pub fn population_criterion(dgp: &DgpSpec, h: &[f64], t_grid: &[f64]) -> f64 {
    let mean = dgp.population_mean_residual(h).abs();
    let gap = t_grid
        .iter()
        .map(|&t| (dgp.population_ecf(h, t, 0) - dgp.population_ecf(h, t, 1)).norm())
        .fold(0.0, f64::max);
    mean.max(gap)
}

/// Set estimate computed from population quantities.
pub fn population_identified_set(dgp: &DgpSpec, candidates: &[Vec<f64>], t_grid: &[f64], eta: f64) -> Result<IdentifiedSetEstimate> {
    validate_set_args(dgp.k, candidates, t_grid, eta)?;
    let mean_part = candidates.iter().map(|h| dgp.population_mean_residual(h).abs()).collect();
    let ecf_part = candidates
        .iter()
        .map(|h| {
            t_grid
                .iter()
                .map(|&t| (dgp.population_ecf(h, t, 0) - dgp.population_ecf(h, t, 1)).norm())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(finish(candidates, mean_part, ecf_part, t_grid, eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::population_table;
    use crate::sim::{simulate, ErrorFamily};

    fn table(p0: Vec<f64>, p1: Vec<f64>) -> MomentTable {
        let k = p0.len();
        let dgp = DgpSpec::exogenous(p0, p1, vec![0.0; k], 0.5, ErrorFamily::Gaussian { sigma: 1.0 }).unwrap();
        population_table(&dgp, 2).unwrap()
    }

    #[test]
    fn relevance_examples() {
        let r = check_relevance(&table(vec![0.7, 0.3], vec![0.3, 0.7])).unwrap();
        assert_eq!(r.margins.len(), 2);
        assert!((r.margin_of(&[1]).unwrap() - 0.4).abs() < 1e-12);
        assert!((r.margin_of(&[2]).unwrap() - 0.4).abs() < 1e-12);
        assert!((r.min_margin - 0.4).abs() < 1e-12);
        assert_eq!(r.min_subset, vec![1]);

        let r = check_relevance(&table(vec![0.5, 0.3, 0.2], vec![0.2, 0.5, 0.3])).unwrap();
        assert_eq!(r.margins.len(), 6);
        assert!((r.min_margin - 0.1).abs() < 1e-12);
        assert_eq!(r.min_subset, vec![3]);

        let r = check_relevance(&table(vec![0.25; 4], vec![0.25; 4])).unwrap();
        assert_eq!(r.min_margin, 0.0);
        assert_eq!(r.margins.len(), 14);
    }

    #[test]
    fn bezout_values() {
        assert_eq!(bezout_bound(1).unwrap(), 1);
        assert_eq!(bezout_bound(3).unwrap(), 6);
        assert_eq!(bezout_bound(5).unwrap(), 120);
        assert_eq!(bezout_bound(20).unwrap(), 2_432_902_008_176_640_000);
        assert!(matches!(bezout_bound(21), Err(Error::Overflow(21))));
        assert!(bezout_bound(0).is_err());
    }

    #[test]
    fn nonidentified_k2() {
        let base = DgpSpec::exogenous(vec![0.5, 0.5], vec![0.5, 0.5], vec![0.2, 0.4], 0.5, ErrorFamily::Gaussian { sigma: 1.0 }).unwrap();
        let d = nonidentified_dgp(&base, &[0], 1.0).unwrap();
        assert_eq!(d.delta1, -1.0);
        assert_eq!(d.delta, vec![1.0, -1.0]);
        assert_eq!(d.alternative_g, vec![1.2, -0.6]);
        // identical population moments
        let a = population_table(&d.original, 4).unwrap();
        let b = population_table(&d.shifted, 4).unwrap();
        for j in 0..=4 {
            for ell in 0..2u8 {
                for c in 0..2 {
                    assert!((a.c(j, ell, c) - b.c(j, ell, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn nonidentified_rejects_relevant_subset() {
        let base = DgpSpec::exogenous(vec![0.7, 0.3], vec![0.3, 0.7], vec![0.0, 0.0], 0.5, ErrorFamily::Gaussian { sigma: 1.0 }).unwrap();
        assert!(nonidentified_dgp(&base, &[0], 1.0).is_err());
        assert!(nonidentified_dgp(&base, &[0, 1], 1.0).is_err());
    }

    #[test]
    fn ecf_examples() {
        let s = Sample::new(vec![2.5, 7.0], vec![0, 1], vec![0, 1], None).unwrap();
        assert_eq!(ecf(&s, &[0.5, 0.0], 0.0, 0), Complex64::new(1.0, 0.0));
        let e = ecf(&s, &[0.5, 0.0], 0.5, 0);
        assert!((e.re - 1f64.cos()).abs() < 1e-15 && (e.im - 1f64.sin()).abs() < 1e-15);
        let only0 = Sample::new(vec![1.0], vec![0], vec![0], Some(1)).unwrap();
        assert_eq!(ecf(&only0, &[0.0], 0.3, 1), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn fast_criterion_matches_direct_ecf() {
        let dgp = DgpSpec::exogenous(vec![0.6, 0.4], vec![0.2, 0.8], vec![1.0, -1.0], 0.4, ErrorFamily::Uniform { half_width: 1.0 }).unwrap();
        let s = simulate(&dgp, 400, 2).unwrap();
        let cands = vec![vec![1.0, -1.0], vec![0.3, 0.8]];
        let t = equispaced_t_grid(9);
        let est = estimate_identified_set(&s, &cands, &t, 0.1).unwrap();
        for (i, h) in cands.iter().enumerate() {
            let gap = t.iter().map(|&tt| (ecf(&s, h, tt, 0) - ecf(&s, h, tt, 1)).norm()).fold(0.0, f64::max);
            assert!((gap - est.ecf_part[i]).abs() < 1e-12);
            let mean: f64 = s.iter().map(|(y, x, _)| y - h[x]).sum::<f64>() / s.n() as f64;
            assert!((mean.abs() - est.mean_part[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn set_argument_errors() {
        let s = Sample::new(vec![1.0, 2.0], vec![0, 1], vec![0, 1], None).unwrap();
        assert!(estimate_identified_set(&s, &[], &[0.5], 0.1).is_err());
        assert!(estimate_identified_set(&s, &[vec![0.0, 0.0]], &[1.5], 0.1).is_err());
        assert!(estimate_identified_set(&s, &[vec![0.0, 0.0]], &[0.5], 0.0).is_err());
        assert!(estimate_identified_set(&s, &[vec![0.0]], &[0.5], 0.1).is_err());
    }

    #[test]
    fn defaults() {
        let t = default_t_grid();
        assert_eq!(t.len(), 64);
        assert_eq!((t[0], t[63]), (0.0, 1.0));
        assert!((default_eta(1000) - 0.1).abs() < 1e-12);
    }
}
