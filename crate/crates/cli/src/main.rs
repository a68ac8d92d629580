use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use polyiv::identify::{bezout_bound, equispaced_t_grid};
use polyiv::operator::{self, BasisSpec, DeltaFamily, DensityGrid};
use polyiv::sim::EstimatorConfig;
use polyiv::{CsvSchema, Sample, SolverConfig};

const SCHEMA: u32 = 1;
const DEFAULT_SEED: u64 = 0x5eed;

#[derive(Parser)]
#[command(name = "polyiv", version, about = "Nonparametric IV estimation with a discrete regressor and a binary instrument")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "POLYIV_THREADS")]
    threads: Option<usize>,

    /// Write JSON here (and the text table next to it, with a .txt extension).
    /// Without it JSON goes to stdout and the table to stderr.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the moment table of a sample.
    Moments {
        #[command(flatten)]
        input: InputArgs,
        /// Highest power of Y; defaults to what inference needs.
        #[arg(long = "J")]
        j: Option<usize>,
    },
    /// Solve the moment system for g̃, optionally with asymptotic intervals.
    Estimate {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        solver: SolverArgs,
        /// Also report covariance and confidence intervals.
        #[arg(long)]
        infer: bool,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Relevance margins of the instrument over all category subsets.
    Identify {
        /// Sample CSV (exclusive with --dgp).
        #[arg(long, conflicts_with = "dgp", required_unless_present = "dgp")]
        input: Option<PathBuf>,
        #[command(flatten)]
        columns: ColumnArgs,
        /// DGP config; margins are then computed from population moments.
        #[arg(long)]
        dgp: Option<PathBuf>,
        /// Margins below this count as a relevance failure (exit 1).
        #[arg(long, default_value_t = 1e-8)]
        margin_tol: f64,
    },
    /// Estimate the identified set over a finite list of candidates.
    PartialSet {
        #[command(flatten)]
        input: InputArgs,
        /// CSV with one candidate K-vector per row.
        #[arg(long)]
        candidates_file: PathBuf,
        /// Membership threshold; defaults to n^(-1/3).
        #[arg(long)]
        eta: Option<f64>,
        /// Number of equispaced t points on [0, 1].
        #[arg(long, default_value_t = 64)]
        t_grid: usize,
    },
    /// Discretise the continuous-X operator and report kernel diagnostics.
    OperatorDiag {
        /// Density f(x, u | W = 0), JSON or CSV grid.
        #[arg(long)]
        f0: PathBuf,
        /// Density f(x, u | W = 1) on the same grid.
        #[arg(long)]
        f1: PathBuf,
        /// Half-width of the support shift window; 2B must be a multiple of the u cell width.
        #[arg(long = "B")]
        b: f64,
        /// Resample both densities to this many x cells.
        #[arg(long)]
        nx: Option<usize>,
        /// Resample both densities to this many u cells.
        #[arg(long)]
        nu: Option<usize>,
        /// Step of the t grid; defaults to the u cell width.
        #[arg(long)]
        t_res: Option<f64>,
        /// Search family for δ: `affine` or `pwl:N` (N knots).
        #[arg(long, default_value = "affine")]
        family: String,
        #[arg(long)]
        max_slope: Option<f64>,
        /// Objective evaluations for the indicator search.
        #[arg(long, default_value_t = 2000)]
        budget: usize,
    },
    /// Draw a sample from a DGP config and write it as CSV.
    Simulate {
        #[arg(long)]
        dgp: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Monte Carlo study of g̃ and its intervals.
    Study {
        #[arg(long)]
        dgp: PathBuf,
        /// Comma-separated sample sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Per-replication CSV table (default: next to --output, or none).
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ColumnArgs {
    #[arg(long, default_value = "y")]
    y_col: String,
    #[arg(long, default_value = "x")]
    x_col: String,
    #[arg(long, default_value = "w")]
    w_col: String,
    /// Number of categories (default: largest label present).
    #[arg(long = "K")]
    k: Option<usize>,
}

#[derive(Args)]
struct InputArgs {
    /// Sample CSV with outcome, category (1..K) and instrument (0/1) columns.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    columns: ColumnArgs,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 10.0)]
    radius: f64,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    root_tol: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

impl SolverArgs {
    fn config(&self) -> Result<SolverConfig, Failure> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Failure::Usage(format!("--radius must be positive, got {}", self.radius)));
        }
        let cfg = SolverConfig {
            starts: self.starts,
            root_tol: self.root_tol,
            seed: self.seed,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ColumnArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            y: self.y_col.clone(),
            x: self.x_col.clone(),
            w: self.w_col.clone(),
            k: self.k,
        }
    }
}

#[derive(Debug)]
enum Failure {
    /// Exit 1.
    Statistical(String),
    /// Exit 2.
    Usage(String),
}

impl From<polyiv::Error> for Failure {
    fn from(e: polyiv::Error) -> Self {
        if e.is_statistical() {
            Failure::Statistical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn check_level(level: f64) -> Result<(), Failure> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--level must lie in (0, 1), got {level}")))
    }
}

fn file_hash(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    Ok(s)
}

fn load_sample(input: &InputArgs) -> Result<(Sample, String), Failure> {
    let hash = file_hash(&input.input)?;
    let sample = polyiv::load_csv(&input.input, &input.columns.schema())?;
    Ok((sample, hash))
}

/// What every subcommand hands back: the JSON result and a human table.
struct Artifact {
    command: &'static str,
    config: Value,
    inputs: BTreeMap<String, String>,
    result: Value,
    table: Vec<(String, String)>,
    /// Set when the report is written but the run still fails.
    failure: Option<Failure>,
}

#[derive(Serialize)]
struct Envelope<'a> {
    schema: u32,
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a Value,
    input_sha256: &'a BTreeMap<String, String>,
    result: &'a Value,
}

fn render_table(rows: &[(String, String)]) -> String {
    let width = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<width$}  {v}");
    }
    out
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn emit(cli_output: Option<&Path>, art: &Artifact) -> Result<(), Failure> {
    let env = Envelope {
        schema: SCHEMA,
        tool: "polyiv",
        version: env!("CARGO_PKG_VERSION"),
        command: art.command,
        config: &art.config,
        input_sha256: &art.inputs,
        result: &art.result,
    };
    let mut text = serde_json::to_string_pretty(&env).map_err(|e| Failure::Usage(e.to_string()))?;
    text.push('\n');
    let table = render_table(&art.table);
    match cli_output {
        Some(path) => {
            fs::write(path, text)?;
            fs::write(path.with_extension("txt"), table)?;
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            eprint!("{table}");
        }
    }
    Ok(())
}

fn cmd_moments(input: &InputArgs, j: Option<usize>) -> Result<Artifact, Failure> {
    let (sample, hash) = load_sample(input)?;
    let j = j.unwrap_or_else(|| polyiv::inference_power(sample.k()));
    let table = polyiv::estimate_moments(&sample, j)?;
    let mut rows = vec![
        ("K".to_string(), table.k.to_string()),
        ("J".to_string(), table.j_max.to_string()),
        ("n".to_string(), table.n.to_string()),
        ("pW".to_string(), fmt_vec(&table.p_w)),
    ];
    for jj in 1..=table.j_max.min(2) {
        for l in 0..2u8 {
            let vals: Vec<f64> = (0..table.k).map(|c| table.q(jj, l, c)).collect();
            rows.push((format!("E[Y^{jj} 1(X=k) | W={l}]"), fmt_vec(&vals)));
        }
    }
    Ok(Artifact {
        command: "moments",
        config: json!({ "J": j, "columns": input.columns.schema() }),
        inputs: BTreeMap::from([(input.input.display().to_string(), hash)]),
        result: serde_json::to_value(&table).map_err(|e| Failure::Usage(e.to_string()))?,
        table: rows,
        failure: None,
    })
}

fn cmd_estimate(input: &InputArgs, solver: &SolverArgs, infer: bool, level: f64) -> Result<Artifact, Failure> {
    check_level(level)?;
    let cfg = solver.config()?;
    let (sample, hash) = load_sample(input)?;
    sample.require_both_instruments()?;
    let j = polyiv::inference_power(sample.k());
    let table = polyiv::estimate_moments(&sample, j)?;
    let sys = polyiv::PolySystem::build(&table)?;
    sys.require_populated()?;
    let est = polyiv::estimate_g_tilde(&sys, solver.radius, &cfg)?;
    let sol = &est.solutions;
    let mut result = serde_json::Map::new();
    result.insert("K".into(), json!(sample.k()));
    result.insert("n".into(), json!(sample.n()));
    result.insert("g_tilde".into(), json!(est.g_tilde));
    result.insert("gamma_norm".into(), json!(est.gamma_norm));
    result.insert("roots".into(), json!(sol.roots));
    result.insert("residuals".into(), json!(sol.residuals));
    result.insert("rank_deficient".into(), json!(sol.rank_deficient));
    result.insert("root_tol".into(), json!(sol.root_tol));
    result.insert("dedup_tol".into(), json!(sol.dedup_tol));
    result.insert("starts_used".into(), json!(sol.starts_used));
    result.insert("converged_fraction".into(), json!(sol.converged_fraction));
    let mut flags: Vec<String> = est.flags.iter().map(|f| f.to_string()).collect();
    let mut rows = vec![
        ("n".to_string(), sample.n().to_string()),
        ("roots".to_string(), sol.roots.len().to_string()),
        ("g_tilde".to_string(), fmt_vec(&est.g_tilde)),
        ("||Gamma(g_tilde)||".to_string(), format!("{:.3e}", est.gamma_norm)),
    ];
    if infer {
        let report = polyiv::asymptotic_report(&sample, &est.g_tilde, &sys, level)?;
        result.insert("cov".into(), json!(report.cov));
        result.insert("sigma".into(), json!(report.sigma));
        result.insert("ci".into(), json!(report.ci));
        result.insert("level".into(), json!(report.level));
        result.insert("condition_V".into(), json!(report.condition_v));
        for (k, (ci, row)) in report.ci.iter().zip(&report.cov).enumerate() {
            rows.push((
                format!("g[{}]", k + 1),
                format!("{:.6}  se {:.6}  {:.0}% CI [{:.6}, {:.6}]", report.g_tilde[k], row[k].sqrt(), level * 100.0, ci.lower, ci.upper),
            ));
        }
        rows.push(("cond(V)".to_string(), format!("{:.3e}", report.condition_v)));
        flags.extend(report.flags.iter().cloned());
    }
    rows.push(("flags".to_string(), if flags.is_empty() { "-".into() } else { flags.join(",") }));
    result.insert("flags".into(), json!(flags));
    Ok(Artifact {
        command: "estimate",
        config: json!({
            "columns": input.columns.schema(),
            "radius": solver.radius,
            "solver": {
                "starts": cfg.starts_for(sample.k()),
                "root_tol": sol.root_tol,
                "dedup_tol": sol.dedup_tol,
                "noise_mult": cfg.noise_mult,
                "max_iter": cfg.max_iter,
                "resolution": cfg.resolution,
                "hat_starts": cfg.hat_starts_for(sample.k()),
                "seed": cfg.seed,
            },
            "infer": infer,
            "level": level,
            "J": j,
        }),
        inputs: BTreeMap::from([(input.input.display().to_string(), hash)]),
        result: Value::Object(result),
        table: rows,
        failure: None,
    })
}

fn cmd_identify(input: Option<&Path>, columns: &ColumnArgs, dgp: Option<&Path>, margin_tol: f64) -> Result<Artifact, Failure> {
    if !(margin_tol >= 0.0) {
        return Err(Failure::Usage("--margin-tol must be nonnegative".into()));
    }
    let (table, source, hash) = match (input, dgp) {
        (Some(path), None) => {
            let hash = file_hash(path)?;
            let sample = polyiv::load_csv(path, &columns.schema())?;
            (polyiv::estimate_moments(&sample, 1)?, path, hash)
        }
        (None, Some(path)) => {
            let hash = file_hash(path)?;
            let spec = polyiv::sim::load_dgp_config(path)?;
            (polyiv::population_table(&spec, 1)?, path, hash)
        }
        _ => return Err(Failure::Usage("give exactly one of --input and --dgp".into())),
    };
    let report = polyiv::check_relevance(&table)?;
    let bound = bezout_bound(report.k).ok();
    let labels = |s: &[usize]| s.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    let rows = vec![
        ("K".to_string(), report.k.to_string()),
        ("subsets".to_string(), report.margins.len().to_string()),
        ("min margin".to_string(), format!("{:.6e}", report.min_margin)),
        ("at J".to_string(), format!("{{{}}}", labels(&report.min_subset))),
        ("root bound K!".to_string(), bound.map_or("overflow".into(), |b| b.to_string())),
    ];
    let mut art = Artifact {
        command: "identify",
        config: json!({ "margin_tol": margin_tol, "source": if dgp.is_some() { "dgp" } else { "sample" } }),
        inputs: BTreeMap::from([(source.display().to_string(), hash)]),
        result: json!({ "relevance": report, "bezout_bound": bound }),
        table: rows,
        failure: None,
    };
    if report.min_margin < margin_tol {
        art.failure = Some(Failure::Statistical(format!(
            "instrument relevance fails: margin {:.3e} at J={{{}}}",
            report.min_margin,
            labels(&report.min_subset)
        )));
    }
    Ok(art)
}

fn read_candidates(path: &Path, k: usize) -> Result<Vec<Vec<f64>>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => {
                if v.len() != k {
                    return Err(Failure::Usage(format!(
                        "candidates file line {}: expected {k} values, got {}",
                        i + 1,
                        v.len()
                    )));
                }
                out.push(v);
            }
            // a header line is allowed before the first candidate
            Err(_) if out.is_empty() && i == 0 => continue,
            Err(_) => return Err(Failure::Usage(format!("candidates file line {}: not numeric", i + 1))),
        }
    }
    if out.is_empty() {
        return Err(Failure::Usage(format!("candidates file {} has no candidates", path.display())));
    }
    Ok(out)
}

fn cmd_partial_set(input: &InputArgs, candidates_file: &Path, eta: Option<f64>, t_points: usize) -> Result<Artifact, Failure> {
    if t_points == 0 {
        return Err(Failure::Usage("--t-grid must be positive".into()));
    }
    if let Some(e) = eta {
        if !(e > 0.0) {
            return Err(Failure::Usage(format!("--eta must be positive, got {e}")));
        }
    }
    let (sample, hash) = load_sample(input)?;
    let cand_hash = file_hash(candidates_file)?;
    let candidates = read_candidates(candidates_file, sample.k())?;
    let eta = eta.unwrap_or_else(|| polyiv::identify::default_eta(sample.n()));
    let grid = equispaced_t_grid(t_points);
    let est = polyiv::estimate_identified_set(&sample, &candidates, &grid, eta)?;
    let mut rows = vec![
        ("n".to_string(), sample.n().to_string()),
        ("eta".to_string(), format!("{eta:.6}")),
        ("candidates".to_string(), candidates.len().to_string()),
        ("members".to_string(), est.members.len().to_string()),
    ];
    for &m in est.members.iter().take(20) {
        rows.push((format!("member {}", m + 1), format!("{}  criterion {:.6}", fmt_vec(&candidates[m]), est.criterion[m])));
    }
    Ok(Artifact {
        command: "partial-set",
        config: json!({ "columns": input.columns.schema(), "eta": eta, "t_grid": t_points }),
        inputs: BTreeMap::from([
            (input.input.display().to_string(), hash),
            (candidates_file.display().to_string(), cand_hash),
        ]),
        result: serde_json::to_value(&est).map_err(|e| Failure::Usage(e.to_string()))?,
        table: rows,
        failure: None,
    })
}

fn resample(grid: &DensityGrid, nx: usize, nu: usize) -> Result<DensityGrid, Failure> {
    let (gx, gu) = (grid.n_x(), grid.n_u());
    let f = |x: f64, u: f64| {
        let ix = (((x - grid.x_lo) / grid.dx()).floor().max(0.0) as usize).min(gx - 1);
        let iu = (((u - grid.u_lo) / grid.du()).floor().max(0.0) as usize).min(gu - 1);
        grid.values[ix][iu]
    };
    Ok(DensityGrid::from_fn((grid.x_lo, grid.x_hi), nx, (grid.u_lo, grid.u_hi), nu, f)?)
}

fn parse_family(spec: &str, x_lo: f64, x_hi: f64, b: f64, max_slope: Option<f64>) -> Result<DeltaFamily, Failure> {
    let mut fam = match spec {
        "affine" => DeltaFamily::affine(x_lo, x_hi, b),
        s if s.starts_with("pwl:") => {
            let knots: usize = s[4..]
                .parse()
                .map_err(|_| Failure::Usage(format!("--family {s}: knot count is not an integer")))?;
            if knots < 2 {
                return Err(Failure::Usage("--family pwl:N needs N >= 2".into()));
            }
            DeltaFamily::equispaced(x_lo, x_hi, knots, b)
        }
        s => return Err(Failure::Usage(format!("--family must be affine or pwl:N, got {s}"))),
    };
    if let Some(m) = max_slope {
        fam.max_slope = m;
    }
    Ok(fam)
}

#[allow(clippy::too_many_arguments)]
fn cmd_operator_diag(
    f0_path: &Path,
    f1_path: &Path,
    b: f64,
    nx: Option<usize>,
    nu: Option<usize>,
    t_res: Option<f64>,
    family: &str,
    max_slope: Option<f64>,
    budget: usize,
) -> Result<Artifact, Failure> {
    if !(b > 0.0) {
        return Err(Failure::Usage(format!("--B must be positive, got {b}")));
    }
    let h0 = file_hash(f0_path)?;
    let h1 = file_hash(f1_path)?;
    let mut f0 = DensityGrid::load(f0_path)?;
    let mut f1 = DensityGrid::load(f1_path)?;
    if nx.is_some() || nu.is_some() {
        let (tx, tu) = (nx.unwrap_or(f0.n_x()), nu.unwrap_or(f0.n_u()));
        if tx == 0 || tu == 0 {
            return Err(Failure::Usage("--nx and --nu must be positive".into()));
        }
        f0 = resample(&f0, tx, tu)?;
        f1 = resample(&f1, tx, tu)?;
    }
    let t_grid = match t_res {
        Some(step) => operator::t_grid_with_step(&f0, b, step)?,
        None => operator::default_t_grid(&f0, b),
    };
    let op = operator::discretize_t(&f0, &f1, b, &t_grid)?;
    let fam = parse_family(family, op.x_lo, op.x_hi, b, max_slope)?;
    let max_abs = op.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let km = operator::kernel_margin(&op)?;
    let ones = vec![1.0; op.n_b];
    let v = op.invariant_coefficients(&ones);
    let invariant_residual = op.image_norm(&v) / op.function_norm(&v);
    let search = operator::indicator_kernel_search(&op, &fam, budget)?;
    let rows = vec![
        ("grid".to_string(), format!("{} x {}", f0.n_x(), f0.n_u())),
        ("operator".to_string(), format!("{} x {}", op.rows(), op.cols())),
        ("max |T_ij|".to_string(), format!("{max_abs:.3e}")),
        ("x-invariant residual".to_string(), format!("{invariant_residual:.3e}")),
        ("kernel margin".to_string(), format!("{:.6e}", km.margin)),
        ("largest gain".to_string(), format!("{:.6e}", km.largest)),
        ("indicator objective".to_string(), format!("{:.6e}", search.objective)),
        ("delta knots".to_string(), fmt_vec(&search.params)),
    ];
    Ok(Artifact {
        command: "operator-diag",
        config: json!({
            "B": b,
            "nx": f0.n_x(),
            "nu": f0.n_u(),
            "t_res": t_grid.get(1).map(|t| t - t_grid[0]),
            "family": fam,
            "budget": budget,
        }),
        inputs: BTreeMap::from([(f0_path.display().to_string(), h0), (f1_path.display().to_string(), h1)]),
        result: json!({
            "rows": op.rows(),
            "cols": op.cols(),
            "max_abs_entry": max_abs,
            "invariant_residual": invariant_residual,
            "kernel_margin": km.margin,
            "largest_gain": km.largest,
            "witness": km.witness,
            "indicator_search": search,
            "basis": BasisSpec::default(),
        }),
        table: rows,
        failure: None,
    })
}

fn cmd_simulate(dgp: &Path, n: usize, seed: u64, output: Option<&Path>) -> Result<(), Failure> {
    if n == 0 {
        return Err(Failure::Usage("--n must be positive".into()));
    }
    let spec = polyiv::sim::load_dgp_config(dgp)?;
    let sample = polyiv::simulate(&spec, n, seed)?;
    match output {
        Some(path) => polyiv::data::write_csv(&sample, fs::File::create(path)?)?,
        None => polyiv::data::write_csv(&sample, std::io::stdout().lock())?,
    }
    Ok(())
}

fn records_csv(report: &polyiv::sim::StudyReport) -> String {
    let k = report.dgp.k;
    let mut out = String::from("n,rep");
    for i in 1..=k {
        let _ = write!(out, ",g_tilde_{i}");
    }
    for i in 1..=k {
        let _ = write!(out, ",ci_hit_{i}");
    }
    out.push_str(",root_count,flags,error\n");
    for r in &report.records {
        let _ = write!(out, "{},{}", r.n, r.rep);
        for i in 0..k {
            out.push(',');
            if let Some(g) = &r.g_tilde {
                let _ = write!(out, "{}", g[i]);
            }
        }
        for i in 0..k {
            out.push(',');
            if let Some(h) = &r.ci_hits {
                out.push_str(if h[i] { "1" } else { "0" });
            }
        }
        out.push(',');
        if let Some(c) = r.root_count {
            let _ = write!(out, "{c}");
        }
        let err = r.error.as_deref().unwrap_or("").replace('"', "'");
        let _ = writeln!(out, ",{},\"{}\"", r.flags.join(";"), err);
    }
    out
}

fn cmd_study(
    dgp: &Path,
    n_list: &[usize],
    reps: usize,
    solver: &SolverArgs,
    level: f64,
    records: Option<&Path>,
    output: Option<&Path>,
) -> Result<Artifact, Failure> {
    check_level(level)?;
    let cfg = solver.config()?;
    if reps == 0 {
        return Err(Failure::Usage("--reps must be positive".into()));
    }
    let hash = file_hash(dgp)?;
    let spec = polyiv::sim::load_dgp_config(dgp)?;
    let est_cfg = EstimatorConfig {
        radius: solver.radius,
        solver: cfg,
        level,
    };
    let report = polyiv::sim::run_study(&spec, n_list, reps, &est_cfg, solver.seed)?;
    let records_path = records
        .map(Path::to_path_buf)
        .or_else(|| output.map(|p| p.with_extension("records.csv")));
    if let Some(path) = &records_path {
        fs::write(path, records_csv(&report))?;
    }
    let mut rows = vec![("reps".to_string(), reps.to_string())];
    for s in &report.summaries {
        rows.push((
            format!("n = {}", s.n),
            format!(
                "rmse {:.6}  coverage {}  failures {}  mean roots {:.2}",
                s.rmse,
                fmt_vec(&s.coverage),
                s.failures,
                s.mean_root_count
            ),
        ));
    }
    Ok(Artifact {
        command: "study",
        config: json!({ "n": n_list, "reps": reps, "estimator": est_cfg, "seed": solver.seed }),
        inputs: BTreeMap::from([(dgp.display().to_string(), hash)]),
        result: serde_json::to_value(&report).map_err(|e| Failure::Usage(e.to_string()))?,
        table: rows,
        failure: None,
    })
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let out = cli.output.as_deref();
    let art = match &cli.command {
        Command::Moments { input, j } => cmd_moments(input, *j),
        Command::Estimate { input, solver, infer, level } => cmd_estimate(input, solver, *infer, *level),
        Command::Identify { input, columns, dgp, margin_tol } => {
            cmd_identify(input.as_deref(), columns, dgp.as_deref(), *margin_tol)
        }
        Command::PartialSet { input, candidates_file, eta, t_grid } => {
            cmd_partial_set(input, candidates_file, *eta, *t_grid)
        }
        Command::OperatorDiag { f0, f1, b, nx, nu, t_res, family, max_slope, budget } => {
            cmd_operator_diag(f0, f1, *b, *nx, *nu, *t_res, family, *max_slope, *budget)
        }
        Command::Simulate { dgp, n, seed } => return cmd_simulate(dgp, *n, *seed, out),
        Command::Study { dgp, n, reps, solver, level, records } => {
            cmd_study(dgp, n, *reps, solver, *level, records.as_deref(), out)
        }
    };
    let mut art = art?;
    emit(out, &art)?;
    match art.failure.take() {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Statistical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
