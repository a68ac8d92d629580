//! Bounded zero set of `Λ` by multi-start damped Newton, and the two point
//! estimators: `g̃` (root of `Λ` with the smallest `‖Γ‖`) and `ĝ` (direct
//! minimisation of `‖Γ‖²` over the ball).

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cube_to_ball, dist2, halton_point, lstsq, norm2, singular_values};
use crate::polysys::PolySystem;
use crate::sim::stream_rng;

/// Hard ceiling on the default start count (`200·K!` grows too fast past K = 6).
const MAX_DEFAULT_STARTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Newton starts; `None` means `200·K!`.
    pub starts: Option<usize>,
    /// Residual bound for accepting a root; `None` picks it from the table.
    pub root_tol: Option<f64>,
    /// Multiplier of `coefficient_scale / √n` for the finite-sample default of `root_tol`.
    pub noise_mult: f64,
    /// Clustering radius; `None` means `1e-4·(1+R)`.
    pub dedup_tol: Option<f64>,
    pub max_iter: usize,
    /// A converged point whose local uncertainty `root_tol / σ_min` exceeds
    /// `resolution·(1+R)` is kept as is and flagged rank-deficient.
    pub resolution: f64,
    /// Starts for the direct minimiser; `None` means `min(50·K!, 5000)`.
    pub hat_starts: Option<usize>,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            starts: None,
            root_tol: None,
            noise_mult: 1.0,
            dedup_tol: None,
            max_iter: 100,
            resolution: 0.01,
            hat_starts: None,
            seed: 0x5eed,
        }
    }
}

fn factorial_capped(k: usize, cap: usize) -> usize {
    (1..=k).try_fold(1usize, |acc, i| acc.checked_mul(i)).unwrap_or(usize::MAX).min(cap)
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.root_tol {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::InvalidArgument(format!("root_tol must be positive, got {t}")));
            }
        }
        if let Some(t) = self.dedup_tol {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::InvalidArgument(format!("dedup_tol must be positive, got {t}")));
            }
        }
        if self.starts == Some(0) || self.hat_starts == Some(0) {
            return Err(Error::InvalidArgument("start counts must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be positive".into()));
        }
        if !(self.noise_mult > 0.0) || !(self.resolution > 0.0) {
            return Err(Error::InvalidArgument("noise_mult and resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn starts_for(&self, k: usize) -> usize {
        self.starts
            .unwrap_or_else(|| 200usize.saturating_mul(factorial_capped(k, MAX_DEFAULT_STARTS)).min(MAX_DEFAULT_STARTS))
    }

    pub fn hat_starts_for(&self, k: usize) -> usize {
        self.hat_starts.unwrap_or_else(|| 50usize.saturating_mul(factorial_capped(k, 5000)).min(5000))
    }

    pub fn root_tol_for(&self, sys: &PolySystem) -> f64 {
        self.root_tol.unwrap_or_else(|| {
            if sys.n() == 0 {
                1e-8
            } else {
                (self.noise_mult * sys.coefficient_scale() / (sys.n() as f64).sqrt()).max(1e-8)
            }
        })
    }

    pub fn dedup_tol_for(&self, radius: f64) -> f64 {
        self.dedup_tol.unwrap_or(1e-4 * (1.0 + radius))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverFlag {
    /// No start converged; the reported point is the best residual found.
    NoRoot,
    /// At least one root sits where the Jacobian of `Λ` is (numerically) singular.
    RankDeficient,
    /// More roots than the `K!` bound.
    BezoutExceeded,
    /// The direct minimiser stopped on the boundary of the ball.
    BoundarySolution,
}

impl fmt::Display for SolverFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverFlag::NoRoot => "no-root",
            SolverFlag::RankDeficient => "rank-deficient",
            SolverFlag::BezoutExceeded => "bezout-exceeded",
            SolverFlag::BoundarySolution => "boundary-solution",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSet {
    pub roots: Vec<Vec<f64>>,
    /// `‖Λ(h)‖` at each root.
    pub residuals: Vec<f64>,
    pub rank_deficient: Vec<bool>,
    #[serde(rename = "R")]
    pub radius: f64,
    pub root_tol: f64,
    pub dedup_tol: f64,
    pub starts_used: usize,
    pub converged_fraction: f64,
    /// Best-residual point over all starts (the only point reported when no root is found).
    pub best_point: Vec<f64>,
    pub best_residual: f64,
    pub flags: Vec<SolverFlag>,
}

impl SolutionSet {
    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn has_flag(&self, flag: SolverFlag) -> bool {
        self.flags.contains(&flag)
    }
}

struct NewtonOutcome {
    point: Vec<f64>,
    residual: f64,
    converged: bool,
    rank_deficient: bool,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

/// Newton steps from `h` until the residual no longer drops, with a cap.
fn polish(sys: &PolySystem, h: &[f64], residual: f64) -> (Vec<f64>, f64) {
    let k = sys.k();
    let mut h = h.to_vec();
    let mut res = residual;
    for _ in 0..20 {
        let r = sys.eval_lambda(&h);
        let jac = sys.jacobian_h(&h, 0..k);
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let step = lstsq(&jac, &neg, 1e-14);
        let cand: Vec<f64> = h.iter().zip(&step).map(|(a, s)| a + s).collect();
        let cres = norm2(&sys.eval_lambda(&cand));
        if !(cres < res) {
            break;
        }
        let tiny = norm2(&step) <= 1e-15 * (1.0 + norm2(&h));
        h = cand;
        res = cres;
        if tiny || res == 0.0 {
            break;
        }
    }
    (h, res)
}

fn newton(sys: &PolySystem, start: Vec<f64>, radius: f64, root_tol: f64, cfg: &SolverConfig) -> NewtonOutcome {
    let k = sys.k();
    let escape = 10.0 * (1.0 + radius);
    let mut h = start;
    let mut r = sys.eval_lambda(&h);
    let mut res = norm2(&r);
    let mut best = (h.clone(), res);
    for _ in 0..cfg.max_iter {
        if res <= root_tol {
            break;
        }
        let jac = sys.jacobian_h(&h, 0..k);
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let step = lstsq(&jac, &neg, 1e-12);
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-10 {
            let cand: Vec<f64> = h.iter().zip(&step).map(|(a, s)| a + alpha * s).collect();
            let cr = sys.eval_lambda(&cand);
            let cres = norm2(&cr);
            if cres.is_finite() && cres <= (1.0 - 1e-4 * alpha) * res {
                h = cand;
                r = cr;
                res = cres;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if norm2(&h) <= radius && res < best.1 {
            best = (h.clone(), res);
        }
        if !moved || norm2(&h) > escape {
            break;
        }
    }
    if res > root_tol || norm2(&h) > radius {
        return NewtonOutcome {
            point: best.0,
            residual: best.1,
            converged: false,
            rank_deficient: false,
        };
    }
    let s = singular_values(&sys.jacobian_h(&h, 0..k));
    let (smax, smin) = (s[0], *s.last().unwrap());
    let unresolved = smin <= 1e-12 * smax || root_tol / smin > cfg.resolution * (1.0 + radius);
    if unresolved {
        return NewtonOutcome {
            point: h,
            residual: res,
            converged: true,
            rank_deficient: true,
        };
    }
    let (ph, pres) = polish(sys, &h, res);
    if norm2(&ph) <= radius {
        h = ph;
        res = pres;
    }
    NewtonOutcome {
        point: h,
        residual: res,
        converged: true,
        rank_deficient: false,
    }
}

/// Low-discrepancy starts in the ball `‖h‖ ≤ R`, randomly shifted by `seed`.
pub fn start_points(k: usize, count: usize, radius: f64, seed: u64, stream: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, stream);
    let shift: Vec<f64> = (0..=k).map(|_| rng.gen::<f64>()).collect();
    (0..count as u64)
        .map(|i| cube_to_ball(&halton_point(i, k + 1, &shift), radius))
        .collect()
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    Ok(())
}

/// Enumerate roots of `Λ` in the ball of radius `radius`.
pub fn solve_zero_set(sys: &PolySystem, radius: f64, cfg: &SolverConfig) -> Result<SolutionSet> {
    check_radius(radius)?;
    cfg.validate()?;
    let k = sys.k();
    let root_tol = cfg.root_tol_for(sys);
    let dedup_tol = cfg.dedup_tol_for(radius);
    let starts = start_points(k, cfg.starts_for(k), radius, cfg.seed, 0);
    let outcomes: Vec<NewtonOutcome> = starts
        .into_par_iter()
        .map(|s| newton(sys, s, radius, root_tol, cfg))
        .collect();

    let starts_used = outcomes.len();
    let mut best: Option<(&[f64], f64)> = None;
    for o in &outcomes {
        let better = match best {
            None => true,
            Some((p, r)) => o.residual < r || (o.residual == r && lex_cmp(&o.point, p) == Ordering::Less),
        };
        if better {
            best = Some((&o.point, o.residual));
        }
    }
    let (best_point, best_residual) = best.map(|(p, r)| (p.to_vec(), r)).unwrap_or((vec![0.0; k], f64::INFINITY));

    let mut converged: Vec<&NewtonOutcome> = outcomes.iter().filter(|o| o.converged).collect();
    let converged_fraction = converged.len() as f64 / starts_used.max(1) as f64;
    converged.sort_by(|a, b| {
        a.rank_deficient
            .cmp(&b.rank_deficient)
            .then(a.residual.total_cmp(&b.residual))
            .then_with(|| lex_cmp(&a.point, &b.point))
    });
    let mut kept: Vec<&NewtonOutcome> = Vec::new();
    for o in converged {
        if kept.iter().all(|q| dist2(&q.point, &o.point) >= dedup_tol) {
            kept.push(o);
        }
    }
    kept.sort_by(|a, b| lex_cmp(&a.point, &b.point));

    let mut flags = Vec::new();
    if kept.is_empty() {
        flags.push(SolverFlag::NoRoot);
    }
    if kept.iter().any(|o| o.rank_deficient) {
        flags.push(SolverFlag::RankDeficient);
    }
    if kept.len() > factorial_capped(k, usize::MAX) {
        flags.push(SolverFlag::BezoutExceeded);
    }
    Ok(SolutionSet {
        roots: kept.iter().map(|o| o.point.clone()).collect(),
        residuals: kept.iter().map(|o| o.residual).collect(),
        rank_deficient: kept.iter().map(|o| o.rank_deficient).collect(),
        radius,
        root_tol,
        dedup_tol,
        starts_used,
        converged_fraction,
        best_point,
        best_residual,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GTildeEstimate {
    pub g_tilde: Vec<f64>,
    /// `‖Γ(g̃)‖`.
    pub gamma_norm: f64,
    pub solutions: SolutionSet,
    pub flags: Vec<SolverFlag>,
}

/// `g̃`: the root with the smallest `‖Γ‖`; ties go to the smaller norm, then
/// lexicographic order. Without roots, falls back to [`estimate_g_hat`].
pub fn estimate_g_tilde(sys: &PolySystem, radius: f64, cfg: &SolverConfig) -> Result<GTildeEstimate> {
    let solutions = solve_zero_set(sys, radius, cfg)?;
    let mut flags = solutions.flags.clone();
    if solutions.is_empty() {
        let hat = estimate_g_hat(sys, radius, cfg)?;
        for f in hat.flags {
            if !flags.contains(&f) {
                flags.push(f);
            }
        }
        return Ok(GTildeEstimate {
            gamma_norm: hat.objective.sqrt(),
            g_tilde: hat.g_hat,
            solutions,
            flags,
        });
    }
    let scored: Vec<(f64, f64, &Vec<f64>)> = solutions
        .roots
        .iter()
        .map(|r| (norm2(&sys.eval_gamma(r)), norm2(r), r))
        .collect();
    let best = scored
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then_with(|| lex_cmp(a.2, b.2)))
        .expect("nonempty root set");
    Ok(GTildeEstimate {
        g_tilde: best.2.clone(),
        gamma_norm: best.0,
        solutions: solutions.clone(),
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GHatEstimate {
    pub g_hat: Vec<f64>,
    /// `‖Γ(ĝ)‖²`.
    pub objective: f64,
    pub flags: Vec<SolverFlag>,
}

fn project(h: &mut [f64], radius: f64) {
    let n = norm2(h);
    if n > radius {
        for v in h.iter_mut() {
            *v *= radius / n;
        }
    }
}

fn objective(sys: &PolySystem, h: &[f64]) -> f64 {
    sys.eval_gamma(h).iter().map(|v| v * v).sum()
}

/// Projected Levenberg-Marquardt on `‖Γ‖²`.
fn levenberg_marquardt(sys: &PolySystem, start: Vec<f64>, radius: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let k = sys.k();
    let mut h = start;
    let mut f = objective(sys, &h);
    let mut mu = 1e-3;
    for _ in 0..max_iter {
        let r = DVector::from_vec(sys.eval_gamma(&h));
        let jac = sys.jacobian_h(&h, 0..k + 2);
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;
        if grad.norm() <= 1e-15 * (1.0 + f) {
            break;
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..k {
                a[(i, i)] += mu * (1.0 + jtj[(i, i)]);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    mu *= 10.0;
                    continue;
                }
            };
            let mut cand: Vec<f64> = h.iter().zip(step.iter()).map(|(x, s)| x + s).collect();
            project(&mut cand, radius);
            let cf = objective(sys, &cand);
            if cf < f {
                let rel = (f - cf) / f.max(1e-300);
                h = cand;
                f = cf;
                mu = (mu / 3.0).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            mu *= 4.0;
        }
        if !improved || f == 0.0 {
            break;
        }
    }
    (h, f)
}

/// `ĝ`: the best minimiser of `‖Γ‖²` over the ball found from several starts.
pub fn estimate_g_hat(sys: &PolySystem, radius: f64, cfg: &SolverConfig) -> Result<GHatEstimate> {
    check_radius(radius)?;
    cfg.validate()?;
    let k = sys.k();
    let starts = start_points(k, cfg.hat_starts_for(k), radius, cfg.seed, 1);
    let results: Vec<(Vec<f64>, f64)> = starts
        .into_par_iter()
        .map(|s| levenberg_marquardt(sys, s, radius, cfg.max_iter.max(200)))
        .collect();
    let (g_hat, objective) = results
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)))
        .expect("at least one start");
    let mut flags = Vec::new();
    if norm2(&g_hat) >= radius - 1e-3 {
        flags.push(SolverFlag::BoundarySolution);
    }
    Ok(GHatEstimate { g_hat, objective, flags })
}

/// Jacobian of `Λ` as a plain matrix, for callers that want `V` directly.
pub fn lambda_jacobian(sys: &PolySystem, h: &[f64]) -> DMatrix<f64> {
    sys.jacobian_lambda(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::population_table;
    use crate::sim::{DgpSpec, ErrorFamily};

    fn system(p0: Vec<f64>, p1: Vec<f64>, g: Vec<f64>, err: ErrorFamily) -> PolySystem {
        let k = g.len();
        let dgp = DgpSpec::exogenous(p0, p1, g, 0.5, err).unwrap();
        PolySystem::build(&population_table(&dgp, k + 1).unwrap()).unwrap()
    }

    #[test]
    fn gaussian_k2_unique_root() {
        let sys = system(vec![0.7, 0.3], vec![0.3, 0.7], vec![0.0, 0.0], ErrorFamily::Gaussian { sigma: 1.0 });
        let set = solve_zero_set(&sys, 10.0, &SolverConfig::default()).unwrap();
        assert_eq!(set.roots.len(), 1);
        assert!(norm2(&set.roots[0]) < 1e-10);
        assert!(set.residuals[0] < 1e-12);
        assert!(set.flags.is_empty());
        let est = estimate_g_tilde(&sys, 10.0, &SolverConfig::default()).unwrap();
        assert!(norm2(&est.g_tilde) < 1e-10);
    }

    #[test]
    fn affine_root_matches_linear_solve() {
        let sys = system(vec![0.6, 0.4], vec![0.25, 0.75], vec![1.3, -0.4], ErrorFamily::Uniform { half_width: 2.0 });
        // Λ is affine for K = 2: solve J h = J·0 − Λ(0)
        let j = sys.jacobian_lambda(&[0.0, 0.0]);
        let l0 = sys.eval_lambda(&[0.0, 0.0]);
        let x = j.lu().solve(&DVector::from_vec(l0.iter().map(|v| -v).collect())).unwrap();
        let set = solve_zero_set(&sys, 5.0, &SolverConfig::default()).unwrap();
        assert_eq!(set.roots.len(), 1);
        assert!((set.roots[0][0] - x[0]).abs() < 1e-10 && (set.roots[0][1] - x[1]).abs() < 1e-10);
    }

    #[test]
    fn zero_difference_system_is_rank_deficient() {
        let sys = system(vec![0.3, 0.3, 0.4], vec![0.3, 0.3, 0.4], vec![0.5, 1.0, -1.0], ErrorFamily::Gaussian { sigma: 1.0 });
        let cfg = SolverConfig { starts: Some(300), ..Default::default() };
        let set = solve_zero_set(&sys, 3.0, &cfg).unwrap();
        assert!(set.roots.len() > 6);
        assert!(set.has_flag(SolverFlag::RankDeficient));
        assert!(set.has_flag(SolverFlag::BezoutExceeded));
        for (r, res) in set.roots.iter().zip(&set.residuals) {
            assert!(*res <= set.root_tol);
            assert!(norm2(r) <= 3.0);
        }
    }

    #[test]
    fn g_hat_on_population_system_and_boundary() {
        let sys = system(vec![0.7, 0.3], vec![0.3, 0.7], vec![0.0, 0.0], ErrorFamily::Gaussian { sigma: 1.0 });
        let est = estimate_g_hat(&sys, 10.0, &SolverConfig::default()).unwrap();
        assert!(norm2(&est.g_hat) < 1e-6);
        assert!(est.flags.is_empty());

        let far = system(vec![0.7, 0.3], vec![0.3, 0.7], vec![3.0, 4.0], ErrorFamily::Gaussian { sigma: 1.0 });
        let est = estimate_g_hat(&far, 2.0, &SolverConfig::default()).unwrap();
        assert!(norm2(&est.g_hat) <= 2.0 + 1e-12);
        assert!(est.objective > 0.0);
        assert!(est.flags.contains(&SolverFlag::BoundarySolution));
    }

    #[test]
    fn argument_errors() {
        let sys = system(vec![0.7, 0.3], vec![0.3, 0.7], vec![0.0, 0.0], ErrorFamily::Gaussian { sigma: 1.0 });
        let bad = SolverConfig { root_tol: Some(0.0), ..Default::default() };
        assert!(matches!(solve_zero_set(&sys, 1.0, &bad), Err(Error::InvalidArgument(_))));
        assert!(solve_zero_set(&sys, -1.0, &SolverConfig::default()).is_err());
        assert!(estimate_g_hat(&sys, 0.0, &SolverConfig::default()).is_err());
    }

    #[test]
    fn default_start_counts() {
        let cfg = SolverConfig::default();
        assert_eq!(cfg.starts_for(2), 400);
        assert_eq!(cfg.starts_for(4), 4800);
        assert_eq!(cfg.starts_for(10), MAX_DEFAULT_STARTS);
    }

    #[test]
    fn no_root_falls_back_to_minimiser() {
        // roots exist only outside the tiny ball
        let sys = system(vec![0.7, 0.3], vec![0.3, 0.7], vec![3.0, 4.0], ErrorFamily::Gaussian { sigma: 1.0 });
        let est = estimate_g_tilde(&sys, 1.0, &SolverConfig::default()).unwrap();
        assert!(est.solutions.is_empty());
        assert!(est.flags.contains(&SolverFlag::NoRoot));
        assert!(norm2(&est.g_tilde) <= 1.0 + 1e-12);
    }

    #[test]
    fn flags_display() {
        assert_eq!(SolverFlag::NoRoot.to_string(), "no-root");
        assert_eq!(serde_json::to_string(&SolverFlag::BezoutExceeded).unwrap(), "\"bezout-exceeded\"");
    }
}
