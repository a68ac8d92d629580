//! Nonparametric instrumental-variable estimation with a discrete regressor
//! and a binary instrument.
//!
//! The pipeline runs `data` → `moments` → `polysys` → `solver` → `inference`;
//! `identify`, `operator` and `sim` supply diagnostics and simulated designs.

pub mod data;
pub mod error;
pub mod identify;
pub mod inference;
pub mod moments;
pub mod numeric;
pub mod operator;
pub mod polysys;
pub mod sim;
pub mod solver;

pub use data::{load_csv, read_csv, CsvSchema, Sample};
pub use error::{Error, Result};
pub use identify::{check_relevance, estimate_identified_set, nonidentified_dgp};
pub use inference::{asymptotic_report, omega_hat, EstimateReport};
pub use moments::{estimate_moments, inference_power, population_table, MomentTable};
pub use polysys::{CoefficientVector, PolySystem};
pub use sim::{simulate, DgpSpec, ErrorFamily};
pub use solver::{estimate_g_hat, estimate_g_tilde, solve_zero_set, SolutionSet, SolverConfig};
