//! Seeded experiment runner: configuration, path fan-out, estimators and report files.
//!
//! Every experiment runs `n_paths` independent simulations. Path `p` draws its
//! driving noise from `RngStream::new(master_seed, p)`; auxiliary streams (bridge
//! windings, a second simulator, random chart points) use stream indices with a
//! high tag bit set, so no two uses share a stream. Results are merged by path
//! index, which makes `paths.csv` independent of scheduling.

mod kinds;
mod output;

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub use output::{format_real, PathRows};

/// Largest tolerated fraction of flagged paths.
pub const MAX_FLAGGED_FRACTION: f64 = 0.01;
/// Flagged paths listed individually in the summary.
const LISTED_FLAGS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    UnitaryQv,
    FlagGenerator,
    RadialMatch,
    JacobiStationary,
    AreaCovariation,
    Martingale,
    CauchyLimit,
    StiefelWinding,
    HorizontalLift,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        Self::UnitaryQv,
        Self::FlagGenerator,
        Self::RadialMatch,
        Self::JacobiStationary,
        Self::AreaCovariation,
        Self::Martingale,
        Self::CauchyLimit,
        Self::StiefelWinding,
        Self::HorizontalLift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::UnitaryQv => "unitary-qv",
            Self::FlagGenerator => "flag-generator",
            Self::RadialMatch => "radial-match",
            Self::JacobiStationary => "jacobi-stationary",
            Self::AreaCovariation => "area-covariation",
            Self::Martingale => "martingale",
            Self::CauchyLimit => "cauchy-limit",
            Self::StiefelWinding => "stiefel-winding",
            Self::HorizontalLift => "horizontal-lift",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown experiment `{s}`")))
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_thin() -> usize {
    100
}

/// One experiment. For `martingale`, `u` holds the frequencies (one per block);
/// for `jacobi-stationary` it optionally overrides the Jacobi index `κ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub m: usize,
    pub k: usize,
    #[serde(rename = "T")]
    pub t: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub u: Option<Vec<f64>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_thin")]
    pub thin: usize,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, m: usize, k: usize, t: f64, dt: f64, n_paths: usize, master_seed: u64) -> Self {
        Self { experiment, m, k, t, dt, n_paths, master_seed, u: None, output_dir: default_output_dir(), thin: default_thin() }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        crate::flag::FlagDims::new(self.m, self.k).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive and finite, got {}", self.dt));
        }
        if !(self.t.is_finite() && self.t >= self.dt) {
            return bad(format!("T must be finite and at least dt, got {}", self.t));
        }
        if self.n_paths == 0 {
            return bad("n_paths must be at least 1".into());
        }
        if self.thin == 0 {
            return bad("thin must be at least 1".into());
        }
        let blocks = self.k + 1;
        if let Some(u) = &self.u {
            if u.len() != blocks {
                return bad(format!("u needs {blocks} entries (one per block), got {}", u.len()));
            }
            if u.iter().any(|x| !x.is_finite()) {
                return bad("u must be finite".into());
            }
        }
        match self.experiment {
            ExperimentKind::Martingale if self.u.is_none() => bad("martingale needs u".into()),
            ExperimentKind::JacobiStationary if self.m != 1 => bad("jacobi-stationary has a closed-form law only for m = 1".into()),
            ExperimentKind::JacobiStationary if self.u.as_ref().is_some_and(|u| u.iter().any(|x| *x <= 0.0)) => {
                bad("Jacobi index entries must be positive".into())
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn steps(&self) -> usize {
        crate::liebm::step_count(self.t, self.dt).expect("validated horizon")
    }
}

/// One pass/fail check: `pass` iff `lower ≤ value ≤ upper`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
}

impl Verdict {
    pub fn within(name: impl Into<String>, value: f64, lower: f64, upper: f64) -> Self {
        Self { name: name.into(), value, lower, upper, pass: value >= lower && value <= upper }
    }

    /// `|value − target| ≤ tolerance`, reported as the signed deviation.
    pub fn near(name: impl Into<String>, value: f64, target: f64, tolerance: f64) -> Self {
        Self::within(name, value - target, -tolerance, tolerance)
    }

    /// A check whose statistic could not be computed.
    pub fn unavailable(name: impl Into<String>) -> Self {
        Self { name: name.into(), value: f64::NAN, lower: f64::NAN, upper: f64::NAN, pass: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPath {
    pub path_index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Library {
    pub name: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub library: Library,
    pub config: ExperimentConfig,
    pub parallel: bool,
    pub n_paths: usize,
    pub flagged_count: usize,
    pub flagged_fraction: f64,
    pub flagged: Vec<FlaggedPath>,
    pub estimates: serde_json::Value,
    pub verdicts: Vec<Verdict>,
    pub all_pass: bool,
    pub exit_code: i32,
}

impl Summary {
    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Write `paths.csv` alongside `summary.json`.
    pub write_paths: bool,
    /// Write nothing to disk.
    pub dry: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { write_paths: true, dry: false }
    }
}

/// Exit status for a failed run.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::ConfigInvalid(_) => 2,
        _ => 3,
    }
}

/// Maps `f` over path indices, in parallel when the `parallel` feature is on.
/// The output is ordered by index either way.
pub fn map_paths<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_paths_sequential(n, f)
    }
}

/// [`map_paths`] on the calling thread only.
pub fn map_paths_sequential<T>(n: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Runs `config`, writes `summary.json` (and `paths.csv`) into its output
/// directory, and returns the summary. The summary's `exit_code` is 0 when
/// every verdict passes, 1 when one fails and 3 when too many paths were flagged.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<Summary> {
    config.validate()?;
    let outcome = kinds::run(config)?;
    let flagged: Vec<FlaggedPath> = outcome
        .flags
        .iter()
        .map(|(path_index, e)| FlaggedPath { path_index: *path_index, reason: e.to_string() })
        .collect();
    let fraction = flagged.len() as f64 / outcome.total_paths as f64;
    let mut verdicts = outcome.verdicts;
    verdicts.push(Verdict::within("flagged_fraction", fraction, 0.0, MAX_FLAGGED_FRACTION));
    let all_pass = verdicts.iter().all(|v| v.pass);
    let exit_code = if fraction > MAX_FLAGGED_FRACTION {
        3
    } else if all_pass {
        0
    } else {
        1
    };
    let summary = Summary {
        library: Library { name: env!("CARGO_PKG_NAME").into(), version: env!("CARGO_PKG_VERSION").into() },
        config: config.clone(),
        parallel: cfg!(feature = "parallel"),
        n_paths: outcome.total_paths,
        flagged_count: flagged.len(),
        flagged_fraction: fraction,
        flagged: flagged.into_iter().take(LISTED_FLAGS).collect(),
        estimates: outcome.estimates,
        verdicts,
        all_pass,
        exit_code,
    };
    if !options.dry {
        std::fs::create_dir_all(&config.output_dir)?;
        if options.write_paths {
            output::write_csv(&config.output_dir.join("paths.csv"), &outcome.rows)?;
        }
        let json = serde_json::to_string_pretty(&summary)?;
        std::fs::write(config.output_dir.join("summary.json"), json + "\n")?;
    }
    Ok(summary)
}
