//! Data-generating processes for `Y = g(X) + U` with `U ⟂ W`, and a Monte
//! Carlo harness.
//!
//! A DGP is a latent-class design: a class `C` is drawn independently of the
//! instrument, `X` is drawn from a distribution that may depend on both `C`
//! and `W`, and `U = shift_C + ε_C` with `ε_C` from a mean-zero family.
//! Because the class law does not involve `W`, `U ⟂ W` holds by construction
//! while `U` may still be correlated with `X` (the endogenous case). A single
//! class with zero shift is the exogenous design.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numeric::{binomial, dist2};

const PROB_TOL: f64 = 1e-12;

/// Mean-zero error families with closed-form moments and characteristic functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ErrorFamily {
    /// `N(0, σ²)`; `σ = 0` is the point mass at zero.
    Gaussian { sigma: f64 },
    /// Uniform on `[-half_width, half_width]`.
    Uniform { half_width: f64 },
    /// `±v` with probability one half each.
    TwoPoint { v: f64 },
    /// Finite mixture `Σ weight · (shift + component)` with `Σ weight · shift = 0`.
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub shift: f64,
    pub family: ErrorFamily,
}

impl ErrorFamily {
    pub fn validate(&self) -> Result<()> {
        match self {
            ErrorFamily::Gaussian { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::InvalidDgp(format!("gaussian sigma must be finite and >= 0, got {sigma}")))
            }
            ErrorFamily::Uniform { half_width } if !(*half_width >= 0.0 && half_width.is_finite()) => {
                Err(Error::InvalidDgp(format!("uniform half-width must be >= 0, got {half_width}")))
            }
            ErrorFamily::TwoPoint { v } if !v.is_finite() => {
                Err(Error::InvalidDgp("two-point value must be finite".into()))
            }
            ErrorFamily::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::InvalidDgp("mixture needs at least one component".into()));
                }
                let mut wsum = 0.0;
                let mut mean = 0.0;
                for c in components {
                    if !(c.weight >= 0.0) || !c.shift.is_finite() {
                        return Err(Error::InvalidDgp("mixture weights must be >= 0, shifts finite".into()));
                    }
                    c.family.validate()?;
                    wsum += c.weight;
                    mean += c.weight * c.shift;
                }
                if (wsum - 1.0).abs() > PROB_TOL {
                    return Err(Error::InvalidDgp(format!("mixture weights sum to {wsum}, not 1")));
                }
                if mean.abs() > 1e-12 {
                    return Err(Error::InvalidDgp(format!("mixture has mean {mean}, not 0")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ErrorFamily::Gaussian { .. } => "gaussian",
            ErrorFamily::Uniform { .. } => "uniform",
            ErrorFamily::TwoPoint { .. } => "two_point",
            ErrorFamily::Mixture { .. } => "mixture",
        }
    }

    /// Raw moments `E[U^i]` for `i = 0..=order`.
    pub fn raw_moments(&self, order: usize) -> Vec<f64> {
        let mut m = vec![0.0; order + 1];
        m[0] = 1.0;
        match self {
            ErrorFamily::Gaussian { sigma } => {
                // E[U^{2r}] = σ^{2r} (2r-1)!!
                let mut acc = 1.0;
                for i in (2..=order).step_by(2) {
                    acc *= (i - 1) as f64 * sigma * sigma;
                    m[i] = acc;
                }
            }
            ErrorFamily::Uniform { half_width } => {
                for i in (2..=order).step_by(2) {
                    m[i] = half_width.powi(i as i32) / (i + 1) as f64;
                }
            }
            ErrorFamily::TwoPoint { v } => {
                for i in (2..=order).step_by(2) {
                    m[i] = v.powi(i as i32);
                }
            }
            ErrorFamily::Mixture { components } => {
                m[0] = 0.0;
                for c in components {
                    let shifted = shifted_moments(&c.family.raw_moments(order), c.shift);
                    for (acc, v) in m.iter_mut().zip(shifted) {
                        *acc += c.weight * v;
                    }
                }
            }
        }
        m
    }

    /// Characteristic function `E[exp(i t U)]`.
    pub fn characteristic(&self, t: f64) -> Complex64 {
        match self {
            ErrorFamily::Gaussian { sigma } => Complex64::new((-0.5 * sigma * sigma * t * t).exp(), 0.0),
            ErrorFamily::Uniform { half_width } => {
                let a = half_width * t;
                if a.abs() < 1e-8 {
                    Complex64::new(1.0 - a * a / 6.0, 0.0)
                } else {
                    Complex64::new(a.sin() / a, 0.0)
                }
            }
            ErrorFamily::TwoPoint { v } => Complex64::new((v * t).cos(), 0.0),
            ErrorFamily::Mixture { components } => components
                .iter()
                .map(|c| c.weight * Complex64::from_polar(1.0, t * c.shift) * c.family.characteristic(t))
                .sum(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ErrorFamily::Gaussian { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            }
            ErrorFamily::Uniform { half_width } => half_width * (2.0 * rng.gen::<f64>() - 1.0),
            ErrorFamily::TwoPoint { v } => {
                if rng.gen::<bool>() {
                    *v
                } else {
                    -v
                }
            }
            ErrorFamily::Mixture { components } => {
                let u: f64 = rng.gen();
                let idx = pick(components.iter().map(|c| c.weight), u);
                let c = &components[idx];
                c.shift + c.family.sample(rng)
            }
        }
    }
}

/// Moments of `shift + U` from the raw moments of `U`.
pub fn shifted_moments(raw: &[f64], shift: f64) -> Vec<f64> {
    (0..raw.len())
        .map(|j| {
            (0..=j)
                .map(|i| binomial(j, i) * shift.powi((j - i) as i32) * raw[i])
                .sum()
        })
        .collect()
}

fn pick(weights: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
        }
        acc += w;
        if u < acc {
            return i;
        }
    }
    last
}

/// One latent class of the design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentClass {
    /// `P(C = c)`, identical for both instrument values.
    pub weight: f64,
    /// Location of `U` within the class.
    pub shift: f64,
    /// Mean-zero noise added to the shift.
    pub noise: ErrorFamily,
    /// `P(X = k | C = c, W = ℓ)` indexed `[ℓ][k]`.
    pub x_given_w: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub k: usize,
    pub g: Vec<f64>,
    /// `P(W = 0)`.
    pub p_w0: f64,
    pub classes: Vec<LatentClass>,
}

fn check_probability_vector(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidDgp(format!("{what} has a negative or NaN entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidDgp(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

impl DgpSpec {
    /// Exogenous design: `U ⟂ (X, W)` with a common error family.
    pub fn exogenous(p0: Vec<f64>, p1: Vec<f64>, g: Vec<f64>, p_w0: f64, error: ErrorFamily) -> Result<Self> {
        let spec = DgpSpec {
            k: g.len(),
            g,
            p_w0,
            classes: vec![LatentClass {
                weight: 1.0,
                shift: 0.0,
                noise: error,
                x_given_w: [p0, p1],
            }],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.g.len() != self.k {
            return Err(Error::InvalidDgp(format!("g has length {}, K = {}", self.g.len(), self.k)));
        }
        if self.g.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDgp("g must be finite".into()));
        }
        if !(self.p_w0 > 0.0 && self.p_w0 < 1.0) {
            return Err(Error::InvalidDgp(format!("P(W=0) must lie in (0,1), got {}", self.p_w0)));
        }
        if self.classes.is_empty() {
            return Err(Error::InvalidDgp("at least one latent class is required".into()));
        }
        check_probability_vector(&self.classes.iter().map(|c| c.weight).collect::<Vec<_>>(), "class weights")?;
        let mut mean = 0.0;
        for (i, c) in self.classes.iter().enumerate() {
            c.noise.validate()?;
            for ell in 0..2 {
                if c.x_given_w[ell].len() != self.k {
                    return Err(Error::InvalidDgp(format!("class {i}: p row {ell} must have K entries")));
                }
                check_probability_vector(&c.x_given_w[ell], &format!("class {i} p row {ell}"))?;
            }
            let noise_mean = c.noise.raw_moments(1)[1];
            if noise_mean.abs() > 1e-12 {
                return Err(Error::InvalidDgp(format!("class {i} noise has nonzero mean")));
            }
            mean += c.weight * c.shift;
        }
        if mean.abs() > 1e-12 {
            return Err(Error::InvalidDgp(format!("E[U] = {mean}, not 0")));
        }
        Ok(())
    }

    pub fn p_w(&self, instrument: u8) -> f64 {
        if instrument == 0 {
            self.p_w0
        } else {
            1.0 - self.p_w0
        }
    }

    /// `p_k(ℓ) = P(X = k | W = ℓ)`.
    pub fn p(&self, instrument: u8) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for c in &self.classes {
            for (o, q) in out.iter_mut().zip(&c.x_given_w[instrument as usize]) {
                *o += c.weight * q;
            }
        }
        out
    }

    /// True when `U` does not depend on `X` (single class, or all classes
    /// sharing the same shift, noise and `X` law).
    pub fn is_exogenous(&self) -> bool {
        self.classes.windows(2).all(|w| w[0].shift == w[1].shift && w[0].noise == w[1].noise)
    }

    /// `E[(g_k + U)^j 1{X=k} | W=ℓ]` for `j = 0..=order`, indexed `[ℓ][k][j]`.
    pub fn cell_moments(&self, order: usize) -> [Vec<Vec<f64>>; 2] {
        let mut out = [vec![vec![0.0; order + 1]; self.k], vec![vec![0.0; order + 1]; self.k]];
        for c in &self.classes {
            let noise = c.noise.raw_moments(order);
            for k in 0..self.k {
                let m = shifted_moments(&noise, self.g[k] + c.shift);
                for (ell, cell) in out.iter_mut().enumerate() {
                    let mass = c.weight * c.x_given_w[ell][k];
                    for (acc, v) in cell[k].iter_mut().zip(&m) {
                        *acc += mass * v;
                    }
                }
            }
        }
        out
    }

    /// Population `E[exp(i t (Y − h(X))) | W = ℓ]`.
    pub fn population_ecf(&self, h: &[f64], t: f64, instrument: u8) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for c in &self.classes {
            let phi = c.noise.characteristic(t);
            for k in 0..self.k {
                let mass = c.weight * c.x_given_w[instrument as usize][k];
                if mass == 0.0 {
                    continue;
                }
                acc += mass * Complex64::from_polar(1.0, t * (self.g[k] - h[k] + c.shift)) * phi;
            }
        }
        acc
    }

    /// Population `E[Y − h(X)]`.
    pub fn population_mean_residual(&self, h: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ell in 0..2u8 {
            let pw = self.p_w(ell);
            for c in &self.classes {
                for k in 0..self.k {
                    acc += pw * c.weight * c.x_given_w[ell as usize][k] * (self.g[k] - h[k] + c.shift);
                }
            }
        }
        acc
    }

    /// Relabel categories: category `c` becomes `perm[c]`.
    pub fn permute_categories(&self, perm: &[usize]) -> DgpSpec {
        let permute = |v: &[f64]| {
            let mut out = vec![0.0; v.len()];
            for (c, &val) in v.iter().enumerate() {
                out[perm[c]] = val;
            }
            out
        };
        DgpSpec {
            k: self.k,
            g: permute(&self.g),
            p_w0: self.p_w0,
            classes: self
                .classes
                .iter()
                .map(|c| LatentClass {
                    x_given_w: [permute(&c.x_given_w[0]), permute(&c.x_given_w[1])],
                    ..c.clone()
                })
                .collect(),
        }
    }
}

/// Independent random stream for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random two-class design whose error location depends on the class, and
/// hence on `X`. Such designs are identified with a nonsingular Jacobian at
/// `g` almost surely; used for root-count experiments.
pub fn random_design(k: usize, seed: u64) -> Result<DgpSpec> {
    if k == 0 {
        return Err(Error::InvalidDgp("K must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, u64::MAX);
    let row = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..k).map(|_| 0.1 + rng.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let w_a = 0.3 + 0.4 * rng.gen::<f64>();
    let shift_a = 0.5 + rng.gen::<f64>();
    let families = |rng: &mut ChaCha8Rng| match rng.gen_range(0..3) {
        0 => ErrorFamily::Gaussian { sigma: 0.5 + rng.gen::<f64>() },
        1 => ErrorFamily::Uniform { half_width: 0.5 + 1.5 * rng.gen::<f64>() },
        _ => ErrorFamily::TwoPoint { v: 0.5 + rng.gen::<f64>() },
    };
    let classes = vec![
        LatentClass {
            weight: w_a,
            shift: shift_a,
            noise: families(&mut rng),
            x_given_w: [row(&mut rng), row(&mut rng)],
        },
        LatentClass {
            weight: 1.0 - w_a,
            shift: -shift_a * w_a / (1.0 - w_a),
            noise: families(&mut rng),
            x_given_w: [row(&mut rng), row(&mut rng)],
        },
    ];
    let g = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let spec = DgpSpec {
        k,
        g,
        p_w0: 0.3 + 0.4 * rng.gen::<f64>(),
        classes,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn simulate(dgp: &DgpSpec, n: usize, seed: u64) -> Result<Sample> {
    simulate_stream(dgp, n, seed, 0)
}

/// Draw `n` observations from stream `stream` of `seed`.
pub fn simulate_stream(dgp: &DgpSpec, n: usize, seed: u64, stream: u64) -> Result<Sample> {
    dgp.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, stream);
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for _ in 0..n {
        let wi: u8 = if rng.gen::<f64>() < dgp.p_w0 { 0 } else { 1 };
        let ci = pick(dgp.classes.iter().map(|c| c.weight), rng.gen());
        let class = &dgp.classes[ci];
        let xi = pick(class.x_given_w[wi as usize].iter().copied(), rng.gen());
        let ui = class.shift + class.noise.sample(&mut rng);
        y.push(dgp.g[xi] + ui);
        x.push(xi);
        w.push(wi);
    }
    Sample::new(y, x, w, Some(dgp.k))
}

// ---------------------------------------------------------------------------
// Plain-text configuration

/// Parse a DGP from `key = value` lines.
///
/// ```text
/// # exogenous design
/// K = 2
/// p0 = 0.7, 0.3
/// p1 = 0.3, 0.7
/// g = 1, -0.5
/// pW0 = 0.5
/// error = gaussian 1.0
/// ```
///
/// Error values: `gaussian <sigma>`, `uniform <half_width>`, `two_point <v>`,
/// or `mixture <weight>:<shift>:<family>:<param>; ...`.
/// Endogenous designs list classes instead of `p0`/`p1`/`error`:
/// `class.1 = <weight> | <shift> | <error> | <p0 row> | <p1 row>`.
pub fn parse_dgp_config(text: &str) -> Result<DgpSpec> {
    let mut kv = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidDgp(format!("line {}: expected key = value", lineno + 1)))?;
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| kv.get(key).ok_or_else(|| Error::InvalidDgp(format!("missing key {key}")));
    let g = parse_list(get("g")?)?;
    let k = match kv.get("K") {
        Some(v) => v
            .parse()
            .map_err(|_| Error::InvalidDgp(format!("K must be a positive integer, got {v}")))?,
        None => g.len(),
    };
    let p_w0 = match kv.get("pW0") {
        Some(v) => parse_num(v)?,
        None => 0.5,
    };
    let class_keys: Vec<&String> = kv.keys().filter(|key| key.starts_with("class.")).collect();
    let spec = if class_keys.is_empty() {
        DgpSpec {
            k,
            g,
            p_w0,
            classes: vec![LatentClass {
                weight: 1.0,
                shift: 0.0,
                noise: parse_error_family(get("error")?)?,
                x_given_w: [parse_list(get("p0")?)?, parse_list(get("p1")?)?],
            }],
        }
    } else {
        let mut classes = Vec::new();
        for key in class_keys {
            let parts: Vec<&str> = kv[key].split('|').map(str::trim).collect();
            if parts.len() != 5 {
                return Err(Error::InvalidDgp(format!(
                    "{key}: expected weight | shift | error | p0 | p1"
                )));
            }
            classes.push(LatentClass {
                weight: parse_num(parts[0])?,
                shift: parse_num(parts[1])?,
                noise: parse_error_family(parts[2])?,
                x_given_w: [parse_list(parts[3])?, parse_list(parts[4])?],
            });
        }
        DgpSpec { k, g, p_w0, classes }
    };
    spec.validate()?;
    Ok(spec)
}

pub fn load_dgp_config(path: impl AsRef<Path>) -> Result<DgpSpec> {
    parse_dgp_config(&std::fs::read_to_string(path)?)
}

fn parse_num(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidDgp(format!("not a number: \"{s}\"")))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split([',', ' '])
        .filter(|t| !t.trim().is_empty())
        .map(parse_num)
        .collect()
}

pub fn parse_error_family(s: &str) -> Result<ErrorFamily> {
    let s = s.trim();
    let (name, rest) = s.split_once(char::is_whitespace).unwrap_or((s, ""));
    let family = match name {
        "gaussian" => ErrorFamily::Gaussian { sigma: parse_num(rest)? },
        "uniform" => ErrorFamily::Uniform { half_width: parse_num(rest)? },
        "two_point" => ErrorFamily::TwoPoint { v: parse_num(rest)? },
        "mixture" => {
            let mut components = Vec::new();
            for part in rest.split(';').filter(|p| !p.trim().is_empty()) {
                let fields: Vec<&str> = part.split(':').map(str::trim).collect();
                if fields.len() != 4 {
                    return Err(Error::InvalidDgp(format!(
                        "mixture component \"{part}\": expected weight:shift:family:param"
                    )));
                }
                components.push(MixtureComponent {
                    weight: parse_num(fields[0])?,
                    shift: parse_num(fields[1])?,
                    family: parse_error_family(&format!("{} {}", fields[2], fields[3]))?,
                });
            }
            ErrorFamily::Mixture { components }
        }
        other => return Err(Error::InvalidDgp(format!("unknown error family \"{other}\""))),
    };
    family.validate()?;
    Ok(family)
}

// ---------------------------------------------------------------------------
// Monte Carlo study

/// Estimator settings for one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub radius: f64,
    pub solver: crate::solver::SolverConfig,
    /// Nominal confidence level of the reported intervals.
    pub level: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            radius: 10.0,
            solver: crate::solver::SolverConfig::default(),
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub n: usize,
    pub rep: usize,
    pub g_tilde: Option<Vec<f64>>,
    pub ci_hits: Option<Vec<bool>>,
    pub root_count: Option<usize>,
    pub flags: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySummary {
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    /// `sqrt(mean ||g̃ − g||²)` over successful replications.
    pub rmse: f64,
    pub rmse_by_component: Vec<f64>,
    /// Share of successful replications whose interval covers `g_k`.
    pub coverage: Vec<f64>,
    pub mean_root_count: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub dgp: DgpSpec,
    pub config: EstimatorConfig,
    pub seed: u64,
    pub summaries: Vec<StudySummary>,
    pub records: Vec<ReplicationRecord>,
}

/// Stream identifier of replication `rep` at sample-size index `n_index`.
pub fn replication_stream(n_index: usize, rep: usize) -> u64 {
    ((n_index as u64) << 40) | rep as u64
}

fn run_replication(dgp: &DgpSpec, n: usize, rep: usize, n_index: usize, seed: u64, cfg: &EstimatorConfig) -> ReplicationRecord {
    let mut record = ReplicationRecord {
        n,
        rep,
        g_tilde: None,
        ci_hits: None,
        root_count: None,
        flags: Vec::new(),
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let sample = simulate_stream(dgp, n, seed, replication_stream(n_index, rep))?;
        let table = crate::moments::estimate_moments(&sample, crate::moments::inference_power(dgp.k))?;
        let sys = crate::polysys::PolySystem::build(&table)?;
        let estimate = crate::solver::estimate_g_tilde(&sys, cfg.radius, &cfg.solver)?;
        record.root_count = Some(estimate.solutions.roots.len());
        record.flags.extend(estimate.flags.iter().map(|f| f.to_string()));
        record.g_tilde = Some(estimate.g_tilde.clone());
        let report = crate::inference::asymptotic_report(&sample, &estimate.g_tilde, &sys, cfg.level)?;
        record.ci_hits = Some(
            report
                .ci
                .iter()
                .zip(&dgp.g)
                .map(|(ci, &g)| ci.lower <= g && g <= ci.upper)
                .collect(),
        );
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
    }
    record
}

/// Simulate `reps` samples for every `n` in `n_list`, estimate `g̃` with
/// intervals, and aggregate RMSE, coverage and root counts.
///
/// Replications run in parallel; every replication draws from its own
/// counter-addressed stream and records are merged in `(n, rep)` order, so the
/// report does not depend on the thread count.
pub fn run_study(dgp: &DgpSpec, n_list: &[usize], reps: usize, cfg: &EstimatorConfig, seed: u64) -> Result<StudyReport> {
    dgp.validate()?;
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    if n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::InvalidArgument("n_list must contain positive sizes".into()));
    }
    let jobs: Vec<(usize, usize, usize)> = n_list
        .iter()
        .enumerate()
        .flat_map(|(ni, &n)| (0..reps).map(move |rep| (ni, n, rep)))
        .collect();
    let records: Vec<ReplicationRecord> = jobs
        .par_iter()
        .map(|&(ni, n, rep)| run_replication(dgp, n, rep, ni, seed, cfg))
        .collect();

    let summaries = n_list
        .iter()
        .map(|&n| summarize(dgp, n, records.iter().filter(|r| r.n == n)))
        .collect();
    Ok(StudyReport {
        dgp: dgp.clone(),
        config: cfg.clone(),
        seed,
        summaries,
        records,
    })
}

fn summarize<'a>(dgp: &DgpSpec, n: usize, records: impl Iterator<Item = &'a ReplicationRecord>) -> StudySummary {
    let k = dgp.k;
    let mut reps = 0;
    let mut failures = 0;
    let mut sq = 0.0;
    let mut sq_comp = vec![0.0; k];
    let mut ok = 0usize;
    let mut hits = vec![0usize; k];
    let mut with_ci = 0usize;
    let mut roots = 0usize;
    let mut with_roots = 0usize;
    for r in records {
        reps += 1;
        if let Some(rc) = r.root_count {
            roots += rc;
            with_roots += 1;
        }
        match &r.g_tilde {
            Some(gt) => {
                ok += 1;
                sq += dist2(gt, &dgp.g).powi(2);
                for (acc, (a, b)) in sq_comp.iter_mut().zip(gt.iter().zip(&dgp.g)) {
                    *acc += (a - b) * (a - b);
                }
            }
            None => failures += 1,
        }
        if let Some(h) = &r.ci_hits {
            with_ci += 1;
            for (acc, &hit) in hits.iter_mut().zip(h) {
                *acc += hit as usize;
            }
        } else if r.g_tilde.is_some() {
            failures += 1;
        }
    }
    let okf = ok.max(1) as f64;
    StudySummary {
        n,
        reps,
        failures,
        rmse: (sq / okf).sqrt(),
        rmse_by_component: sq_comp.iter().map(|s| (s / okf).sqrt()).collect(),
        coverage: hits.iter().map(|&h| h as f64 / with_ci.max(1) as f64).collect(),
        mean_root_count: roots as f64 / with_roots.max(1) as f64,
    }
}
