//! Discretised shift operator for continuous regressors:
//!
//! ```text
//! (T h)(t) = ∫∫_{X × [0, 2B]} h(x, u) (f₀(x, t+u) − f₁(x, t+u)) du dx
//! ```
//!
//! `h` lives on a cell basis of `X × [0, 2B]` whose cells are unions of density
//! cells. Rows are indexed by `t`. Norms in `t` use quadrature weights and the
//! basis is scaled to be orthonormal in `L²`, so singular values approximate
//! those of the continuous operator.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MASS_TOL: f64 = 1e-9;

/// Cell averages of a density on an equal-width grid over `[x_lo, x_hi] × [u_lo, u_hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub x_lo: f64,
    pub x_hi: f64,
    pub u_lo: f64,
    pub u_hi: f64,
    /// `values[ix][iu]`.
    pub values: Vec<Vec<f64>>,
}

impl DensityGrid {
    pub fn new(x_lo: f64, x_hi: f64, u_lo: f64, u_hi: f64, values: Vec<Vec<f64>>) -> Result<Self> {
        let g = DensityGrid { x_lo, x_hi, u_lo, u_hi, values };
        g.validate()?;
        Ok(g)
    }

    /// Grid from midpoint values of `f`, rescaled to total mass one.
    pub fn from_fn(
        x_range: (f64, f64),
        n_x: usize,
        u_range: (f64, f64),
        n_u: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if n_x == 0 || n_u == 0 {
            return Err(Error::InvalidGrid("grid needs at least one cell per axis".into()));
        }
        let dx = (x_range.1 - x_range.0) / n_x as f64;
        let du = (u_range.1 - u_range.0) / n_u as f64;
        let values: Vec<Vec<f64>> = (0..n_x)
            .map(|ix| {
                let x = x_range.0 + (ix as f64 + 0.5) * dx;
                (0..n_u).map(|iu| f(x, u_range.0 + (iu as f64 + 0.5) * du)).collect()
            })
            .collect();
        Self::normalized(x_range, u_range, values)
    }

    /// Rescale nonnegative `values` to unit mass.
    pub fn normalized(x_range: (f64, f64), u_range: (f64, f64), mut values: Vec<Vec<f64>>) -> Result<Self> {
        let probe = DensityGrid {
            x_lo: x_range.0,
            x_hi: x_range.1,
            u_lo: u_range.0,
            u_hi: u_range.1,
            values: values.clone(),
        };
        probe.check_shape()?;
        let mass = probe.raw_mass();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::InvalidGrid("density has no positive mass".into()));
        }
        for row in values.iter_mut() {
            for v in row.iter_mut() {
                *v /= mass;
            }
        }
        Self::new(x_range.0, x_range.1, u_range.0, u_range.1, values)
    }

    fn check_shape(&self) -> Result<()> {
        if !(self.x_hi > self.x_lo) || !(self.u_hi > self.u_lo) || !self.x_lo.is_finite() || !self.u_hi.is_finite() {
            return Err(Error::InvalidGrid("grid ranges must be finite with positive width".into()));
        }
        if self.values.is_empty() || self.values[0].is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one cell per axis".into()));
        }
        let n_u = self.values[0].len();
        if self.values.iter().any(|r| r.len() != n_u) {
            return Err(Error::InvalidGrid("every x row must have the same number of u cells".into()));
        }
        if self.values.iter().flatten().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidGrid("density values must be finite and nonnegative".into()));
        }
        Ok(())
    }

    fn raw_mass(&self) -> f64 {
        self.values.iter().flatten().sum::<f64>() * self.dx() * self.du()
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        let mass = self.raw_mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidGrid(format!("total mass is {mass}, expected 1")));
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        self.values.len()
    }

    pub fn n_u(&self) -> usize {
        self.values[0].len()
    }

    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / self.n_x() as f64
    }

    pub fn du(&self) -> f64 {
        (self.u_hi - self.u_lo) / self.n_u() as f64
    }

    pub fn x_mid(&self, ix: usize) -> f64 {
        self.x_lo + (ix as f64 + 0.5) * self.dx()
    }

    pub fn u_mid(&self, iu: usize) -> f64 {
        self.u_lo + (iu as f64 + 0.5) * self.du()
    }

    pub fn cell_mass(&self, ix: usize, iu: usize) -> f64 {
        self.values[ix][iu] * self.dx() * self.du()
    }

    pub fn total_mass(&self) -> f64 {
        self.raw_mass()
    }

    pub fn same_grid(&self, other: &DensityGrid) -> bool {
        self.x_lo == other.x_lo
            && self.x_hi == other.x_hi
            && self.u_lo == other.u_lo
            && self.u_hi == other.u_hi
            && self.n_x() == other.n_x()
            && self.n_u() == other.n_u()
    }

    /// Linear interpolation of row `ix` through the u-cell midpoints, held
    /// constant out to the grid edges and zero beyond them.
    pub fn interpolate(&self, ix: usize, u: f64) -> f64 {
        interpolate_row(&self.values[ix], self.u_lo, self.u_hi, self.du(), u)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let g: DensityGrid = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    /// CSV layout: a header `x_lo,x_hi,u_lo,u_hi`, one row with those numbers,
    /// then one row of `n_u` cell values per x cell.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| Error::Csv { row: 0, message: e.to_string() })?.clone();
        let expected = ["x_lo", "x_hi", "u_lo", "u_hi"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(a, b)| a != b) {
            return Err(Error::InvalidGrid("density csv must start with the header x_lo,x_hi,u_lo,u_hi".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv { row: i + 1, message: e.to_string() })?;
            let row = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>().map_err(|_| Error::NonNumeric {
                        row: i + 1,
                        column: "value".into(),
                        value: s.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.len() < 2 || rows[0].len() != 4 {
            return Err(Error::InvalidGrid("density csv needs the range row and at least one value row".into()));
        }
        let r = rows.remove(0);
        Self::new(r[0], r[1], r[2], r[3], rows)
    }

    /// Load from `.json` or `.csv` (by extension).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "json" => Self::from_json_str(&text),
            Some(e) if e == "csv" => Self::from_csv_str(&text),
            _ => Err(Error::InvalidArgument(format!("{}: expected a .json or .csv density file", path.display()))),
        }
    }
}

fn interpolate_row(row: &[f64], u_lo: f64, u_hi: f64, du: f64, u: f64) -> f64 {
    if u < u_lo || u > u_hi {
        return 0.0;
    }
    let n = row.len();
    let pos = (u - u_lo) / du - 0.5;
    if pos <= 0.0 {
        return row[0];
    }
    if pos >= (n - 1) as f64 {
        return row[n - 1];
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if frac == 0.0 {
        return row[i];
    }
    row[i] * (1.0 - frac) + row[i + 1] * frac
}

/// Cell basis of `X × [0, 2B]`: each basis cell merges `x_factor` density
/// x-cells and `u_factor` density u-widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub x_factor: usize,
    pub u_factor: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { x_factor: 1, u_factor: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorMatrix {
    pub t_grid: Vec<f64>,
    #[serde(rename = "B")]
    pub b: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    /// Basis cells along x.
    pub n_x: usize,
    /// Basis cells along `[0, 2B]`.
    pub n_b: usize,
    pub basis: BasisSpec,
    /// Row `i` holds `T` applied to each basis indicator at `t_grid[i]`;
    /// column `ix·n_b + ib`.
    pub values: Vec<Vec<f64>>,
    /// Density x-cell midpoints, used to discretise indicators.
    pub fine_x: Vec<f64>,
}

/// `t` from `u_lo − 2B` to `u_hi` in steps of `step`.
pub fn t_grid_with_step(grid: &DensityGrid, b: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("t step must be positive".into()));
    }
    let lo = grid.u_lo - 2.0 * b;
    let count = ((grid.u_hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| lo + i as f64 * step).collect())
}

/// Default `t` grid: the density's u resolution over `[u_lo − 2B, u_hi]`.
pub fn default_t_grid(grid: &DensityGrid, b: f64) -> Vec<f64> {
    t_grid_with_step(grid, b, grid.du()).expect("positive cell width")
}

fn cells_in(total: f64, width: f64) -> Option<usize> {
    let n = total / width;
    let r = n.round();
    if r >= 1.0 && (n - r).abs() <= 1e-9 * n.max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}

/// Discretise `T` with the default basis (one basis cell per density cell).
pub fn discretize_t(f0: &DensityGrid, f1: &DensityGrid, b: f64, t_grid: &[f64]) -> Result<OperatorMatrix> {
    discretize_t_with_basis(f0, f1, b, t_grid, BasisSpec::default())
}

/// Discretise `T` on a coarser cell basis. Each entry is the midpoint rule
/// over the density sub-cells of the basis cell, with `f₀ − f₁` linearly
/// interpolated at the shifted point `t + u`.
pub fn discretize_t_with_basis(f0: &DensityGrid, f1: &DensityGrid, b: f64, t_grid: &[f64], basis: BasisSpec) -> Result<OperatorMatrix> {
    f0.validate()?;
    f1.validate()?;
    if !f0.same_grid(f1) {
        return Err(Error::InvalidGrid("f0 and f1 must share the same grid".into()));
    }
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::InvalidArgument(format!("B must be positive, got {b}")));
    }
    if 2.0 * b > f0.u_hi - f0.u_lo + 1e-12 {
        return Err(Error::InvalidGrid("2B exceeds the width of the u range".into()));
    }
    if t_grid.is_empty() || t_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("t grid must be nonempty and finite".into()));
    }
    if basis.x_factor == 0 || basis.u_factor == 0 || f0.n_x() % basis.x_factor != 0 {
        return Err(Error::InvalidGrid("basis x cells must evenly merge density x cells".into()));
    }
    let du = f0.du();
    let dx = f0.dx();
    let fine_b = cells_in(2.0 * b, du)
        .ok_or_else(|| Error::InvalidGrid(format!("2B = {} is not a multiple of the u cell width {du}", 2.0 * b)))?;
    if fine_b % basis.u_factor != 0 {
        return Err(Error::InvalidGrid("basis u cells must evenly merge density u cells on [0, 2B]".into()));
    }
    let n_b = fine_b / basis.u_factor;
    let n_x = f0.n_x() / basis.x_factor;
    let diff: Vec<Vec<f64>> = f0
        .values
        .iter()
        .zip(&f1.values)
        .map(|(a, c)| a.iter().zip(c).map(|(p, q)| p - q).collect())
        .collect();
    let cols = n_x * n_b;
    let values: Vec<Vec<f64>> = t_grid
        .par_iter()
        .map(|&t| {
            let mut row = vec![0.0; cols];
            for (ix, d) in diff.iter().enumerate() {
                let bx = ix / basis.x_factor;
                for s in 0..fine_b {
                    let u = t + (s as f64 + 0.5) * du;
                    let v = interpolate_row(d, f0.u_lo, f0.u_hi, du, u);
                    row[bx * n_b + s / basis.u_factor] += v;
                }
            }
            for v in row.iter_mut() {
                *v *= dx * du;
            }
            row
        })
        .collect();
    Ok(OperatorMatrix {
        t_grid: t_grid.to_vec(),
        b,
        x_lo: f0.x_lo,
        x_hi: f0.x_hi,
        n_x,
        n_b,
        basis,
        values,
        fine_x: (0..f0.n_x()).map(|ix| f0.x_mid(ix)).collect(),
    })
}

impl OperatorMatrix {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.n_x * self.n_b
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows(), self.cols(), |r, c| self.values[r][c])
    }

    pub fn cell_dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / self.n_x as f64
    }

    pub fn cell_db(&self) -> f64 {
        2.0 * self.b / self.n_b as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_dx() * self.cell_db()
    }

    /// `T h` for cell coefficients `h` (column order `ix·n_b + ib`).
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        self.values.iter().map(|row| row.iter().zip(h).map(|(a, b)| a * b).sum()).collect()
    }

    /// Trapezoid weights of the t grid (1 for a single point).
    pub fn t_weights(&self) -> Vec<f64> {
        let t = &self.t_grid;
        let n = t.len();
        if n == 1 {
            return vec![1.0];
        }
        (0..n)
            .map(|i| {
                let left = if i > 0 { t[i] - t[i - 1] } else { 0.0 };
                let right = if i + 1 < n { t[i + 1] - t[i] } else { 0.0 };
                0.5 * (left.abs() + right.abs())
            })
            .collect()
    }

    /// Weighted `L²(t)` norm of `T h`.
    pub fn image_norm(&self, h: &[f64]) -> f64 {
        self.apply(h)
            .iter()
            .zip(self.t_weights())
            .map(|(v, w)| w * v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `L²` norm of the function with cell coefficients `h`.
    pub fn function_norm(&self, h: &[f64]) -> f64 {
        (self.cell_area() * h.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    /// Coefficients of `1{u ∈ [0, δ(x)]}` with fractional coverage of the
    /// boundary cell, averaged over the density x-cells of each basis cell.
    pub fn indicator_coefficients(&self, delta: impl Fn(f64) -> f64) -> Vec<f64> {
        let db = self.cell_db();
        let per = self.basis.x_factor;
        let mut h = vec![0.0; self.cols()];
        for (fine, &x) in self.fine_x.iter().enumerate() {
            let d = delta(x);
            let bx = fine / per;
            for ib in 0..self.n_b {
                let cover = ((d - ib as f64 * db) / db).clamp(0.0, 1.0);
                h[bx * self.n_b + ib] += cover / per as f64;
            }
        }
        h
    }

    /// Coefficients of an x-invariant function `H(u)` on `[0, 2B]`.
    pub fn invariant_coefficients(&self, profile: &[f64]) -> Vec<f64> {
        assert_eq!(profile.len(), self.n_b);
        (0..self.n_x).flat_map(|_| profile.iter().copied()).collect()
    }
}

/// Orthonormal basis of the zero-sum vectors in `R^n` (Helmert contrasts), as columns.
fn zero_sum_basis(n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n - 1);
    for j in 1..n {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            m[(i, j - 1)] = 1.0 / norm;
        }
        m[(j, j - 1)] = -(j as f64) / norm;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMargin {
    /// Smallest singular value of `T` on the complement of the x-invariant functions.
    pub margin: f64,
    /// Unit-`L²` cell coefficients attaining it.
    pub witness: Vec<f64>,
    /// Largest singular value on the same subspace.
    pub largest: f64,
}

/// Smallest singular value of `T` restricted to functions orthogonal to every
/// x-invariant function, with `L²` scaling on both sides.
pub fn kernel_margin(op: &OperatorMatrix) -> Result<KernelMargin> {
    if op.n_x < 2 {
        return Err(Error::InvalidGrid("kernel margin needs at least two x cells".into()));
    }
    let (n_x, n_b) = (op.n_x, op.n_b);
    let z = zero_sum_basis(n_x);
    let dim = (n_x - 1) * n_b;
    // columns of N: orthonormal (ℓ²) cell vectors, zero-sum in x for each b cell
    let mut n = DMatrix::zeros(op.cols(), dim);
    for ib in 0..n_b {
        for q in 0..n_x - 1 {
            for ix in 0..n_x {
                n[(ix * n_b + ib, ib * (n_x - 1) + q)] = z[(ix, q)];
            }
        }
    }
    let scale = 1.0 / op.cell_area().sqrt();
    let w: Vec<f64> = op.t_weights().iter().map(|v| v.sqrt()).collect();
    let t = op.matrix();
    let mut m = DMatrix::from_fn(t.nrows(), t.ncols(), |r, c| w[r] * t[(r, c)]) * &n * scale;
    if m.nrows() < m.ncols() {
        let extra = m.ncols() - m.nrows();
        let rows = m.nrows();
        m = m.insert_rows(rows, extra, 0.0);
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let (mut imin, mut imax) = (0, 0);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s < svd.singular_values[imin] {
            imin = i;
        }
        if s > svd.singular_values[imax] {
            imax = i;
        }
    }
    let coeffs = &n * v_t.row(imin).transpose() * scale;
    let mut witness: Vec<f64> = coeffs.iter().copied().collect();
    // fix the sign so the first sizeable entry is positive
    if let Some(first) = witness.iter().find(|v| v.abs() > 1e-12) {
        if *first < 0.0 {
            witness.iter_mut().for_each(|v| *v = -*v);
        }
    }
    Ok(KernelMargin {
        margin: svd.singular_values[imin],
        witness,
        largest: svd.singular_values[imax],
    })
}

/// Piecewise-linear `δ(x)` through values at fixed knot positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaFamily {
    pub knots: Vec<f64>,
    /// Largest allowed `|δ'|`.
    pub max_slope: f64,
    /// Smallest allowed `max δ − min δ` (excludes constants).
    pub min_range: f64,
}

impl DeltaFamily {
    /// `δ(x) = a + b·x`, parametrised by its values at the two ends.
    pub fn affine(x_lo: f64, x_hi: f64, b: f64) -> Self {
        Self::equispaced(x_lo, x_hi, 2, b)
    }

    /// `knots` equally spaced knots over `[x_lo, x_hi]`, slope unrestricted
    /// beyond the range bound.
    pub fn equispaced(x_lo: f64, x_hi: f64, knots: usize, b: f64) -> Self {
        let knots = knots.max(2);
        DeltaFamily {
            knots: (0..knots).map(|i| x_lo + (x_hi - x_lo) * i as f64 / (knots - 1) as f64).collect(),
            max_slope: f64::INFINITY,
            min_range: 0.1 * 2.0 * b,
        }
    }

    pub fn validate(&self, op: &OperatorMatrix) -> Result<()> {
        if self.knots.len() < 2 {
            return Err(Error::InvalidFamily("at least two knots are required".into()));
        }
        if self.knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidFamily("knots must be strictly increasing".into()));
        }
        if self.knots[0] > op.x_lo + 1e-12 || *self.knots.last().unwrap() < op.x_hi - 1e-12 {
            return Err(Error::InvalidFamily("knots must span the x range".into()));
        }
        if !(self.max_slope > 0.0) {
            return Err(Error::InvalidFamily("max_slope must be positive".into()));
        }
        if !(self.min_range > 0.0) || self.min_range > 2.0 * op.b {
            return Err(Error::InvalidFamily("min_range must lie in (0, 2B]".into()));
        }
        Ok(())
    }

    pub fn eval(&self, params: &[f64], x: f64) -> f64 {
        let k = &self.knots;
        if x <= k[0] {
            return params[0];
        }
        let i = k.partition_point(|&v| v <= x).min(k.len() - 1).max(1);
        let frac = (x - k[i - 1]) / (k[i] - k[i - 1]);
        params[i - 1] * (1.0 - frac.min(1.0)) + params[i] * frac.min(1.0)
    }

    /// Whether `params` satisfy `0 ≤ δ ≤ 2B`, the slope bound and the range bound.
    pub fn feasible(&self, params: &[f64], b: f64) -> bool {
        let hi = 2.0 * b;
        if params.iter().any(|&p| !(p >= -1e-12 && p <= hi + 1e-12)) {
            return false;
        }
        let (mn, mx) = params.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), &p| (a.min(p), c.max(p)));
        if mx - mn < self.min_range - 1e-12 {
            return false;
        }
        params
            .windows(2)
            .zip(self.knots.windows(2))
            .all(|(p, k)| ((p[1] - p[0]) / (k[1] - k[0])).abs() <= self.max_slope * (1.0 + 1e-12))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSearch {
    /// Smallest `‖T 1{u ∈ [0, δ(x)]}‖` found.
    pub objective: f64,
    /// Knot values of the minimising `δ`.
    pub params: Vec<f64>,
    pub evaluations: usize,
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return x < y;
        }
    }
    false
}

/// Search the family for an indicator nearly annihilated by `T`: a grid over
/// knot values, then pattern-search refinement from the best grid point.
/// Ties go to the lexicographically smaller parameter vector.
pub fn indicator_kernel_search(op: &OperatorMatrix, family: &DeltaFamily, budget: usize) -> Result<IndicatorSearch> {
    family.validate(op)?;
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be positive".into()));
    }
    let m = family.knots.len();
    let hi = 2.0 * op.b;
    let objective = |p: &[f64]| op.image_norm(&op.indicator_coefficients(|x| family.eval(p, x)));

    let grid_budget = (budget / 2).max(1);
    let levels = ((grid_budget as f64).powf(1.0 / m as f64).floor() as usize).max(2);
    let total = (levels as u128).checked_pow(m as u32).unwrap_or(u128::MAX);
    let step0 = hi / (levels - 1) as f64;
    if total > 1 << 22 {
        return Err(Error::InvalidFamily(format!("{m} knots give too large a search grid")));
    }
    let candidates: Vec<Vec<f64>> = (0..total as usize)
        .map(|mut idx| {
            let mut p = vec![0.0; m];
            for slot in p.iter_mut().rev() {
                *slot = (idx % levels) as f64 * step0;
                idx /= levels;
            }
            p
        })
        .filter(|p| family.feasible(p, op.b))
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidFamily("no feasible member on the search grid; relax min_range or max_slope".into()));
    }
    let scores: Vec<f64> = candidates.par_iter().map(|p| objective(p)).collect();
    let mut best = 0;
    for i in 1..candidates.len() {
        if scores[i] < scores[best] || (scores[i] == scores[best] && lex_less(&candidates[i], &candidates[best])) {
            best = i;
        }
    }
    let mut params = candidates[best].clone();
    let mut value = scores[best];
    let mut evaluations = candidates.len();

    let mut step = step0 / 2.0;
    while value > 0.0 && evaluations < budget && step > 1e-9 * hi {
        let mut moved = false;
        for i in 0..m {
            for dir in [-1.0, 1.0] {
                if evaluations >= budget {
                    break;
                }
                let mut cand = params.clone();
                cand[i] = (cand[i] + dir * step).clamp(0.0, hi);
                if cand == params || !family.feasible(&cand, op.b) {
                    continue;
                }
                let v = objective(&cand);
                evaluations += 1;
                if v < value || (v == value && lex_less(&cand, &params)) {
                    params = cand;
                    value = v;
                    moved = true;
                }
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    Ok(IndicatorSearch {
        objective: value,
        params,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(u: f64, m: f64, s: f64) -> f64 {
        (-(u - m) * (u - m) / (2.0 * s * s)).exp()
    }

    fn pair_equal() -> (DensityGrid, DensityGrid) {
        let f = DensityGrid::from_fn((0.0, 1.0), 8, (-4.0, 4.0), 32, |x, u| (1.0 + x) * gauss(u, 0.0, 1.0)).unwrap();
        (f.clone(), f)
    }

    #[test]
    fn grid_validation() {
        assert!(DensityGrid::new(0.0, 1.0, 0.0, 1.0, vec![vec![1.0]]).is_ok());
        assert!(DensityGrid::new(0.0, 1.0, 0.0, 1.0, vec![vec![0.5]]).is_err());
        assert!(DensityGrid::new(0.0, 1.0, 0.0, 1.0, vec![vec![-1.0, 3.0]]).is_err());
        assert!(DensityGrid::new(1.0, 1.0, 0.0, 1.0, vec![vec![1.0]]).is_err());
        let (f, _) = pair_equal();
        assert!((f.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loaders_round_trip() {
        let (f, _) = pair_equal();
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(DensityGrid::from_json_str(&json).unwrap(), f);
        let mut csv = String::from("x_lo,x_hi,u_lo,u_hi\n0,1,-4,4\n");
        for row in &f.values {
            csv.push_str(&row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
            csv.push('\n');
        }
        assert_eq!(DensityGrid::from_csv_str(&csv).unwrap(), f);
        assert!(DensityGrid::from_csv_str("a,b\n1,2\n").is_err());
    }

    #[test]
    fn interpolation_edges() {
        let row = [1.0, 3.0];
        assert_eq!(interpolate_row(&row, 0.0, 2.0, 1.0, 0.2), 1.0);
        assert_eq!(interpolate_row(&row, 0.0, 2.0, 1.0, 1.0), 2.0);
        assert_eq!(interpolate_row(&row, 0.0, 2.0, 1.0, 1.9), 3.0);
        assert_eq!(interpolate_row(&row, 0.0, 2.0, 1.0, 2.1), 0.0);
        assert_eq!(interpolate_row(&row, 0.0, 2.0, 1.0, -0.1), 0.0);
    }

    #[test]
    fn equal_densities_give_zero_matrix_and_margin() {
        let (f0, f1) = pair_equal();
        let t = default_t_grid(&f0, 1.0);
        let op = discretize_t(&f0, &f1, 1.0, &t).unwrap();
        assert_eq!(op.n_b, 8);
        assert!(op.values.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(kernel_margin(&op).unwrap().margin, 0.0);
        let fam = DeltaFamily::affine(0.0, 1.0, 1.0);
        let s = indicator_kernel_search(&op, &fam, 100).unwrap();
        assert_eq!(s.objective, 0.0);
    }

    #[test]
    fn discretize_errors() {
        let (f0, f1) = pair_equal();
        assert!(discretize_t(&f0, &f1, 0.0, &[0.0]).is_err());
        assert!(discretize_t(&f0, &f1, 0.3, &[0.0]).is_err());
        assert!(discretize_t(&f0, &f1, 5.0, &[0.0]).is_err());
        let other = DensityGrid::from_fn((0.0, 1.0), 4, (-4.0, 4.0), 32, |_, u| gauss(u, 0.0, 1.0)).unwrap();
        assert!(discretize_t(&f0, &other, 1.0, &[0.0]).is_err());
        let one = DensityGrid::from_fn((0.0, 1.0), 1, (-4.0, 4.0), 32, |_, u| gauss(u, 0.0, 1.0)).unwrap();
        let op = discretize_t(&one, &one, 1.0, &[0.0]).unwrap();
        assert!(matches!(kernel_margin(&op), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn zero_sum_basis_is_orthonormal() {
        let z = zero_sum_basis(5);
        let g = z.transpose() * &z;
        assert!((g - DMatrix::identity(4, 4)).norm() < 1e-14);
        for c in 0..4 {
            assert!(z.column(c).sum().abs() < 1e-14);
        }
    }

    #[test]
    fn family_evaluation_and_feasibility() {
        let fam = DeltaFamily { knots: vec![0.0, 0.5, 1.0], max_slope: 2.0, min_range: 0.2 };
        assert_eq!(fam.eval(&[0.0, 1.0, 0.0], 0.25), 0.5);
        assert_eq!(fam.eval(&[0.0, 1.0, 0.0], 1.0), 0.0);
        assert!(fam.feasible(&[0.0, 1.0, 0.0], 1.0));
        assert!(!fam.feasible(&[0.0, 1.5, 0.0], 1.0));
        assert!(!fam.feasible(&[0.5, 0.5, 0.5], 1.0));
        assert!(!fam.feasible(&[0.0, 2.5, 0.0], 1.0));
    }
}
