//! Small numerical helpers shared across modules: compensated summation,
//! the normal quantile, binomial coefficients and Halton points.

use nalgebra::{DMatrix, DVector};

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// `binom(n, k)` as a float; exact for the small arguments used here.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// Inverse of the standard normal CDF (Wichura, AS 241, PPND16).
///
/// Relative accuracy is about 1e-16 over the open unit interval.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "normal_quantile: p must lie in (0, 1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((r * 2509.080_928_730_122_7 + 33430.575_583_588_128) * r
                + 67265.770_927_008_700)
                * r
                + 45921.953_931_549_871)
                * r
                + 13731.693_765_509_461)
                * r
                + 1971.590_950_306_551_3)
                * r
                + 133.141_667_891_784_38)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((r * 5226.495_278_852_545_5 + 28729.085_735_721_943) * r
                + 39307.895_800_092_710)
                * r
                + 21213.794_301_586_595)
                * r
                + 5394.196_021_424_751_1)
                * r
                + 687.187_007_492_057_91)
                * r
                + 42.313_330_701_600_911)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        (((((((r * 7.745_450_142_783_414_1e-4 + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_61)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691_4)
            * r
            + 4.630_337_846_156_545_3)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((r * 1.050_750_071_644_416_9e-9 + 5.475_938_084_995_344_9e-4) * r
                + 0.015_198_666_563_616_457)
                * r
                + 0.148_103_976_427_480_07)
                * r
                + 0.689_767_334_985_100_0)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_758_8)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((r * 2.010_334_399_292_288_1e-7 + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_123)
            * r
            + 0.296_560_571_828_504_89)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114_4)
            * r
            + 6.657_904_643_501_103_8)
            / (((((((r * 2.044_263_103_389_939_7e-15 + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_132_6e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_888)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

const PRIMES: [u32; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

fn radical_inverse(mut index: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut factor = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % b) as f64 * factor;
        index /= b;
        factor *= inv;
    }
    out
}

/// Point `index` of the `dim`-dimensional Halton sequence, rotated modulo 1
/// by `shift` (Cranley-Patterson randomisation).
pub fn halton_point(index: u64, dim: usize, shift: &[f64]) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "halton_point supports at most 24 dimensions");
    (0..dim)
        .map(|d| {
            let v = radical_inverse(index + 1, PRIMES[d]) + shift.get(d).copied().unwrap_or(0.0);
            v - v.floor()
        })
        .collect()
}

/// Map a point of the unit cube `[0,1)^{K+1}` to the closed ball of radius `r`
/// in `R^K` (normal-quantile direction, radius from the last coordinate).
pub fn cube_to_ball(u: &[f64], r: f64) -> Vec<f64> {
    let k = u.len() - 1;
    let clamp = |p: f64| p.clamp(1e-12, 1.0 - 1e-12);
    let z: Vec<f64> = u[..k].iter().map(|&p| normal_quantile(clamp(p))).collect();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let radius = r * u[k].powf(1.0 / k as f64);
    if norm == 0.0 {
        return vec![0.0; k];
    }
    z.iter().map(|v| v / norm * radius).collect()
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// 2-norm condition number; infinite for singular or empty matrices.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Minimum-norm least-squares solution of `a x = b` through the SVD,
/// discarding singular values below `rcond * s_max`.
pub fn lstsq(a: &DMatrix<f64>, b: &[f64], rcond: f64) -> Vec<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = (rcond * smax).max(f64::MIN_POSITIVE);
    let rhs = DVector::from_column_slice(b);
    match svd.solve(&rhs, eps) {
        Ok(x) => x.iter().copied().collect(),
        Err(_) => vec![0.0; a.ncols()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut acc = CompensatedSum::new();
        acc.add(1e16);
        for _ in 0..1000 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.value(), 1000.0);
    }

    #[test]
    fn binomial_small_table() {
        assert_eq!(binomial(5, 2), 10.0);
        assert_eq!(binomial(6, 0), 1.0);
        assert_eq!(binomial(6, 6), 1.0);
        assert_eq!(binomial(3, 4), 0.0);
        assert_eq!(binomial(20, 10), 184756.0);
    }

    #[test]
    fn normal_quantile_reference_values() {
        // reference values from the standard normal table
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((normal_quantile(0.5)).abs() < 1e-15);
        assert!((normal_quantile(0.025) + 1.959_963_984_540_054).abs() < 1e-12);
        assert!((normal_quantile(0.995) - 2.575_829_303_548_901).abs() < 1e-12);
        assert!((normal_quantile(1e-10) + 6.361_340_902_404_056).abs() < 1e-9);
    }

    #[test]
    fn halton_points_lie_in_unit_cube_and_ball_map_respects_radius() {
        let shift = [0.3, 0.7, 0.11];
        for i in 0..500 {
            let u = halton_point(i, 3, &shift);
            assert!(u.iter().all(|&v| (0.0..1.0).contains(&v)));
            let h = cube_to_ball(&u, 2.5);
            assert_eq!(h.len(), 2);
            assert!(norm2(&h) <= 2.5 + 1e-12);
        }
    }

    #[test]
    fn lstsq_solves_square_system() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let x = lstsq(&a, &[3.0, 5.0], 1e-14);
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
    }
}
