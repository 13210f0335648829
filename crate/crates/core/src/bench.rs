//! Batch experiments over a grid of (sources, microphones, input SIR, prior).
//!
//! ```toml
//! seed = 1
//! trials = 30
//! sources = [2]
//! mics = [2]
//! input_sir_db = [0.0, 5.0, 10.0]
//! priors = ["t", "ssl"]
//! duration_s = 6.0
//! rt60 = 0.2
//!
//! [solver]
//! max_iter = 100
//! tol = 1e-6
//! ```
//!
//! Trial `i` of every cell uses seed `seed + i`, so cells differing only in
//! SIR or prior see the same source signals. All priors of one trial share a
//! single rendered mixture.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{extract, SolverConfig};
use crate::metrics::{aggregate, projector, EvalReport, Summary, DEFAULT_FILTER_LEN};
use crate::priors::{ContrastModel, DEFAULT_NU};
use crate::roomsim::{default_geometry, render};
use crate::scenario::{ScenarioFile, SignalSpec, DEFAULT_SAMPLE_RATE};
use crate::stft::{StftConfig, WindowKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_fft")]
    pub fft_size: usize,
    #[serde(default = "default_hop")]
    pub hop_size: usize,
    #[serde(default = "default_window")]
    pub window: WindowKind,
}

fn default_max_iter() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-6
}
fn default_fft() -> usize {
    2048
}
fn default_hop() -> usize {
    512
}
fn default_window() -> WindowKind {
    WindowKind::Hann
}
fn default_priors() -> Vec<String> {
    vec!["t".into()]
}
fn default_nu() -> f64 {
    DEFAULT_NU
}
fn default_duration() -> f64 {
    10.0
}
fn default_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}
fn default_rt60() -> f64 {
    0.2
}
fn default_filter_len() -> usize {
    DEFAULT_FILTER_LEN
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iter: default_max_iter(),
            tol: default_tol(),
            fft_size: default_fft(),
            hop_size: default_hop(),
            window: default_window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default)]
    pub seed: u64,
    pub trials: usize,
    pub sources: Vec<usize>,
    pub mics: Vec<usize>,
    pub input_sir_db: Vec<f64>,
    #[serde(default = "default_priors")]
    pub priors: Vec<String>,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: u32,
    #[serde(default = "default_rt60")]
    pub rt60: f64,
    #[serde(default = "default_filter_len")]
    pub filter_len: usize,
    #[serde(default)]
    pub solver: SolverSettings,
}

/// One point of the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub sources: usize,
    pub mics: usize,
    pub input_sir_db: f64,
    pub prior: String,
}

impl Grid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: Grid = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::BadConfig("grid needs at least one trial".into()));
        }
        if self.sources.is_empty() || self.mics.is_empty() || self.input_sir_db.is_empty() || self.priors.is_empty() {
            return Err(Error::BadConfig("every grid axis needs at least one value".into()));
        }
        let g = default_geometry();
        if let Some(s) = self.sources.iter().find(|&&s| s == 0 || s > g.sources.len()) {
            return Err(Error::BadConfig(format!("source count {s} outside 1..={}", g.sources.len())));
        }
        if let Some(m) = self.mics.iter().find(|&&m| m < 2 || m > g.mics.len()) {
            return Err(Error::BadConfig(format!("microphone count {m} outside 2..={}", g.mics.len())));
        }
        for p in &self.priors {
            ContrastModel::from_name(p, self.nu)?;
        }
        self.stft()?;
        Ok(())
    }

    pub fn stft(&self) -> Result<StftConfig> {
        StftConfig::new(self.solver.fft_size, self.solver.hop_size, self.solver.window)
    }

    /// Cells in report order: sources, then mics, then SIR, then prior.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &sources in &self.sources {
            for &mics in &self.mics {
                for &sir in &self.input_sir_db {
                    for prior in &self.priors {
                        out.push(Cell {
                            sources,
                            mics,
                            input_sir_db: sir,
                            prior: prior.clone(),
                        });
                    }
                }
            }
        }
        out
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }

    pub fn trial_scenario(&self, sources: usize, mics: usize, input_sir_db: f64, trial: usize) -> ScenarioFile {
        ScenarioFile {
            seed: self.trial_seed(trial),
            sample_rate_hz: self.sample_rate_hz,
            input_sir_db,
            soi_index: 0,
            ref_mic: 0,
            num_sources: Some(sources),
            num_mics: Some(mics),
            sources: None,
            mics: None,
            room: Some(crate::roomsim::RoomSpec::new(default_geometry().room.dimensions, self.rt60)),
            signals: SignalSpec::Synthetic {
                duration_s: self.duration_s,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub cell: usize,
    pub trial: usize,
    pub seed: u64,
    pub sources: usize,
    pub mics: usize,
    pub nominal_sir_db: f64,
    pub prior: String,
    #[serde(flatten)]
    pub report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: usize,
    #[serde(flatten)]
    pub spec: Cell,
    /// Trials that failed to run; excluded from `summary`.
    pub errors: usize,
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub grid: Grid,
    pub records: Vec<TrialRecord>,
    pub cells: Vec<CellSummary>,
}

fn scenario_id(sources: usize, mics: usize, sir: f64, trial: usize, seed: u64) -> String {
    format!("s{sources}m{mics}_sir{sir}_trial{trial}_seed{seed}")
}

/// Simulates one mixture and extracts it with each prior. Returns one report
/// per prior, in order.
pub fn run_trial(
    scenario: &ScenarioFile,
    priors: &[ContrastModel],
    solver: &SolverSettings,
    filter_len: usize,
    scenario_id: &str,
) -> Result<Vec<EvalReport>> {
    let (_, sc) = scenario.resolve(std::path::Path::new("."))?;
    let truth = render(&sc, scenario.sample_rate_hz)?;
    let stft = StftConfig::new(solver.fft_size, solver.hop_size, solver.window)?;
    let proj = projector(&truth, sc.soi_index, sc.ref_mic, filter_len)?;
    let input_sir = proj.sir_db(&truth.mixture.channel(sc.ref_mic))?;
    priors
        .iter()
        .map(|prior| {
            let cfg = SolverConfig {
                max_iter: solver.max_iter,
                tol: solver.tol,
                ref_mic: sc.ref_mic,
                prior: *prior,
                rank: None,
            };
            let result = extract(&truth.mixture, &cfg, &stft)?;
            Ok(EvalReport::new(
                scenario_id,
                format!("fastive-{}", prior.label()),
                input_sir,
                proj.sir_db(&result.audio.channel(0))?,
                result.runtime_seconds,
                result.iterations_used,
            ))
        })
        .collect()
}

/// Runs the whole grid on `jobs` worker threads.
pub fn run_grid(grid: &Grid, jobs: usize) -> Result<BenchReport> {
    grid.validate()?;
    let priors: Vec<ContrastModel> = grid
        .priors
        .iter()
        .map(|p| ContrastModel::from_name(p, grid.nu))
        .collect::<Result<_>>()?;
    let mut tasks = Vec::new();
    for &s in &grid.sources {
        for &m in &grid.mics {
            for &sir in &grid.input_sir_db {
                for t in 0..grid.trials {
                    tasks.push((s, m, sir, t));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::BadConfig(e.to_string()))?;
    let outcomes: Vec<Result<Vec<EvalReport>>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(s, m, sir, t)| {
                let id = scenario_id(s, m, sir, t, grid.trial_seed(t));
                run_trial(&grid.trial_scenario(s, m, sir, t), &priors, &grid.solver, grid.filter_len, &id)
            })
            .collect()
    });

    let cells = grid.cells();
    let n_priors = priors.len();
    let mut records = Vec::with_capacity(cells.len() * grid.trials);
    // tasks and cells share the (sources, mics, sir) nesting
    for (block, chunk) in outcomes.chunks(grid.trials).enumerate() {
        for (p, name) in grid.priors.iter().enumerate() {
            let cell = block * n_priors + p;
            for (t, outcome) in chunk.iter().enumerate() {
                let spec = &cells[cell];
                let (report, error) = match outcome {
                    Ok(reports) => (Some(reports[p].clone()), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                records.push(TrialRecord {
                    cell,
                    trial: t,
                    seed: grid.trial_seed(t),
                    sources: spec.sources,
                    mics: spec.mics,
                    nominal_sir_db: spec.input_sir_db,
                    prior: name.clone(),
                    report,
                    error,
                });
            }
        }
    }

    let summaries = cells
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let reports: Vec<EvalReport> = records
                .iter()
                .filter(|r| r.cell == i)
                .filter_map(|r| r.report.clone())
                .collect();
            CellSummary {
                cell: i,
                spec,
                errors: grid.trials - reports.len(),
                summary: aggregate(&reports).ok(),
            }
        })
        .collect();
    Ok(BenchReport {
        grid: grid.clone(),
        records,
        cells: summaries,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

/// Plain-text table of the per-cell aggregates.
pub fn format_table(cells: &[CellSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4} {:>3} {:>3} {:>7} {:>5} {:>7} {:>9} {:>14} {:>10} {:>9} {:>6}",
        "cell", "src", "mic", "sir_db", "prior", "trials", "success", "sirimp_succ_db", "sirimp_db", "runtime_s", "errors"
    );
    for c in cells {
        let s = c.summary.as_ref();
        let _ = writeln!(
            out,
            "{:>4} {:>3} {:>3} {:>7.1} {:>5} {:>7} {:>9} {:>14} {:>10} {:>9} {:>6}",
            c.cell,
            c.spec.sources,
            c.spec.mics,
            c.spec.input_sir_db,
            c.spec.prior,
            s.map_or(0, |s| s.trials),
            s.map_or_else(|| "-".into(), |s| format!("{:.3}", s.success_rate)),
            opt(s.and_then(|s| s.mean_sirimp_success_db)),
            opt(s.map(|s| s.mean_sirimp_all_db)),
            s.map_or_else(|| "-".into(), |s| format!("{:.4}", s.mean_runtime_s)),
            c.errors
        );
    }
    out
}
