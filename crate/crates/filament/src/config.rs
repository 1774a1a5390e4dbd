//! Config schema, validation, and output writers.
//!
//! A config file is JSON with six optional sections (`grid`, `kernel`,
//! `past_data`, `run`, `outputs`, `study`); unknown keys are rejected and
//! semantic errors name the offending key.  Outputs are CSVs with numbers at
//! 17 significant digits plus a JSON run summary, so a run's artifacts can
//! be replayed as oracles; identical configs produce byte-identical CSVs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::delay::{PastData, SubDtRule};
use crate::diagnostics::{SlopeFit, StudySetup, SweepResult};
use crate::evolve::{MarchParams, RunStatus, Trajectory};
use crate::kernel::{make_exponential_kernel, make_power_kernel_with, KernelOptions, KernelSpec};
use crate::profile::{SpaceFn, SpaceTerm};
use crate::spatial::{FieldState, Grid};
use crate::{Error, Result};

/// Environment variable naming the directory all output paths resolve under.
pub const OUT_ROOT_ENV: &str = "FILAMENT_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub grid: GridSection,
    pub kernel: KernelSection,
    pub past_data: PastSection,
    pub run: RunSection,
    pub outputs: OutputsSection,
    pub study: StudySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub length: f64,
    pub n_cells: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { length: 1.0, n_cells: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Exponential,
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub kind: KernelKind,
    /// Linkage density profile `b(s)`, a sum of closed-form terms.
    pub b: Vec<SpaceTerm>,
    /// Power-kernel prefactor (ignored for the exponential kind).
    pub scale: f64,
    /// Power-kernel decay exponent; the moment hypotheses need > 5/2.
    pub exponent: f64,
    /// Claimed tail lower-bound coefficient of the power kernel.
    pub tail_coeff: f64,
    /// Age cutoff of the power kernel's quadrature; `None` derives it from
    /// the tail tolerance, which is far too deep for marching.
    pub a_max: Option<f64>,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            kind: KernelKind::Exponential,
            b: vec![SpaceTerm::Const { amp: 1.0 }],
            scale: 1.0,
            exponent: 4.0,
            tail_coeff: 1.0,
            a_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PastSection {
    /// Polynomial-in-time past `z_p(s, t) = sum_k coeffs[k](s) t^k`, each
    /// coefficient a sum of closed-form space terms.
    pub coeffs: Vec<Vec<SpaceTerm>>,
    /// Uniform nodal noise added to the t^0 coefficient; 0 disables.
    pub perturb_amplitude: f64,
    /// Seed of the perturbation stream (overridable from the CLI).
    pub seed: u64,
}

impl Default for PastSection {
    fn default() -> Self {
        Self { coeffs: vec![vec![SpaceTerm::Const { amp: 0.0 }]], perturb_amplitude: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Delay scale; 0 selects the limit problem.
    pub eps: f64,
    /// Step size; defaults to eps/20 (or the march default when eps = 0).
    pub dt: Option<f64>,
    pub t_end: f64,
    pub fp_tol: f64,
    pub fp_max_iters: usize,
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub semi_implicit: bool,
    pub sub_dt: SubDtRule,
    pub output_every: usize,
    pub stab_tol: f64,
    pub stab_window: usize,
    pub branch_tol: f64,
    pub res_tol: f64,
    pub history_bytes: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let p = MarchParams::default();
        Self {
            eps: 0.05,
            dt: None,
            t_end: p.t_end,
            fp_tol: p.fp_tol,
            fp_max_iters: p.fp_max_iters,
            newton_tol: p.newton_tol,
            newton_max_iters: p.newton_max_iters,
            semi_implicit: p.semi_implicit,
            sub_dt: p.sub_dt,
            output_every: p.output_every,
            stab_tol: p.stab_tol,
            stab_window: p.stab_window,
            branch_tol: p.branch_tol,
            res_tol: p.res_tol,
            history_bytes: p.history_bytes,
        }
    }
}

impl RunSection {
    pub fn to_params(&self) -> Result<MarchParams> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::config("run.eps", format!("must be >= 0, got {}", self.eps)));
        }
        let default_dt =
            if self.eps > 0.0 { self.eps / 20.0 } else { MarchParams::default().dt };
        let params = MarchParams {
            dt: self.dt.unwrap_or(default_dt),
            t_end: self.t_end,
            fp_tol: self.fp_tol,
            fp_max_iters: self.fp_max_iters,
            newton_tol: self.newton_tol,
            newton_max_iters: self.newton_max_iters,
            semi_implicit: self.semi_implicit,
            sub_dt: self.sub_dt,
            output_every: self.output_every,
            stab_tol: self.stab_tol,
            stab_window: self.stab_window,
            branch_tol: self.branch_tol,
            res_tol: self.res_tol,
            history_bytes: self.history_bytes,
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputsSection {
    /// Output directory, resolved under [`OUT_ROOT_ENV`] when relative.
    pub dir: Option<PathBuf>,
    /// Number of state snapshots written, evenly spaced over the records.
    pub snapshot_count: usize,
}

impl Default for OutputsSection {
    fn default() -> Self {
        Self { dir: None, snapshot_count: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    /// Sweep abscissas, strictly decreasing.
    pub eps_list: Vec<f64>,
    /// Pairs for the interpolation probe; empty derives nested pairs
    /// `(2 eps, eps)` from `eps_list`.
    pub eps_pairs: Vec<[f64; 2]>,
    pub t_probe: f64,
    /// Per-run step policy `dt = dt_per_eps * eps`.
    pub dt_per_eps: f64,
    /// Shared record spacing; required by the convergence study.
    pub out_dt: Option<f64>,
    pub noise_floor: f64,
    /// Step of the delay-free reference run; defaults to an exact divisor
    /// of `out_dt` near `dt_per_eps * min(eps_list) / 2`.
    pub reference_dt: Option<f64>,
    /// Slope-forcing profile of the factored-solve probe.
    pub f: Vec<SpaceTerm>,
    /// Load-forcing profile of the factored-solve probe.
    pub g: Vec<SpaceTerm>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            eps_list: vec![0.1, 0.05, 0.025, 0.0125],
            eps_pairs: Vec::new(),
            t_probe: 0.002,
            dt_per_eps: 0.05,
            out_dt: None,
            noise_floor: 1e-8,
            reference_dt: None,
            f: vec![SpaceTerm::Const { amp: 1.0 }],
            g: Vec::new(),
        }
    }
}

impl StudySection {
    /// Pairs for the interpolation probe, deriving nested `(2 eps, eps)`
    /// pairs from the sweep list when none are given.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        if self.eps_pairs.is_empty() {
            self.eps_list.iter().map(|&e| (2.0 * e, e)).collect()
        } else {
            self.eps_pairs.iter().map(|p| (p[0], p[1])).collect()
        }
    }
}

/// A validated config: resolved grid, kernel, past data, and march
/// parameters, plus the raw file for echoing into summaries.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub file: ConfigFile,
    pub grid: Grid,
    pub kernel: KernelSpec,
    pub past: PastData,
    pub params: MarchParams,
    pub eps: f64,
}

impl RunConfig {
    pub fn study_setup(&self) -> StudySetup<'_> {
        let mut setup = StudySetup::new(&self.grid, &self.kernel, &self.past);
        setup.base = self.params.clone();
        setup.dt_per_eps = self.file.study.dt_per_eps;
        setup.out_dt = self.file.study.out_dt;
        setup.noise_floor = self.file.study.noise_floor;
        setup
    }

    /// Output directory: `outputs.dir` (default `out`) resolved under the
    /// [`OUT_ROOT_ENV`] root when relative.
    pub fn out_dir(&self) -> PathBuf {
        let dir = self.file.outputs.dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(dir),
            None => dir,
        }
    }
}

/// Validate a parsed config and resolve it against the grid.
pub fn resolve_config(file: ConfigFile) -> Result<RunConfig> {
    let grid = Grid::new(file.grid.length, file.grid.n_cells)
        .map_err(|e| Error::config("grid", e.to_string()))?;
    let b = SpaceFn::new(file.kernel.b.clone(), file.grid.length);
    let kernel = match file.kernel.kind {
        KernelKind::Exponential => make_exponential_kernel(b)?,
        KernelKind::Power => {
            let k = &file.kernel;
            if let Some(a_max) = k.a_max {
                if !(a_max.is_finite() && a_max > 0.0) {
                    return Err(Error::config(
                        "kernel.a_max",
                        format!("must be positive, got {a_max}"),
                    ));
                }
            }
            let options = KernelOptions { a_max: k.a_max, ..KernelOptions::default() };
            make_power_kernel_with(k.scale, k.exponent, k.tail_coeff, b, options)?
        }
    };
    if file.past_data.coeffs.is_empty() {
        return Err(Error::config("past_data.coeffs", "past data needs at least one coefficient"));
    }
    let coeffs: Vec<FieldState> = file
        .past_data
        .coeffs
        .iter()
        .map(|terms| {
            FieldState::from_space_fn(&grid, &SpaceFn::new(terms.clone(), file.grid.length))
        })
        .collect();
    let mut past = PastData::poly(coeffs)
        .map_err(|e| Error::config("past_data.coeffs", e.to_string()))?;
    if file.past_data.perturb_amplitude != 0.0 {
        let amp = file.past_data.perturb_amplitude;
        if !(amp.is_finite() && amp > 0.0) {
            return Err(Error::config(
                "past_data.perturb_amplitude",
                format!("must be finite and >= 0, got {amp}"),
            ));
        }
        past = past.perturbed(&noise_field(&grid, amp, file.past_data.seed));
    }
    let params = file.run.to_params()?;
    let eps = file.run.eps;
    Ok(RunConfig { file, grid, kernel, past, params, eps })
}

/// Read and validate a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let file: ConfigFile = serde_json::from_str(&text)?;
    resolve_config(file)
}

pub fn write_config(file: &ConfigFile, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(file)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Deterministic nodal noise: uniform values and slopes in `[-amp, amp]`.
fn noise_field(grid: &Grid, amp: f64, seed: u64) -> FieldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta = FieldState::zeros(grid);
    for d in &mut delta.dofs {
        *d = rng.gen_range(-amp..=amp);
    }
    delta
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Per-record diagnostics table.
pub fn diagnostics_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,E,delay_E,diss_rate,theta,mu1_inner,fp_iters,contraction\n");
    for r in &traj.series {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt(r.t),
            fmt(r.energy),
            fmt(r.delay_energy),
            fmt(r.dissipation_rate),
            fmt(r.theta),
            fmt(r.mu1_inner),
            r.fp_iters,
            fmt(r.contraction),
        ));
    }
    out
}

/// Nodal state table: position, value, slope, curvature.
pub fn snapshot_csv(grid: &Grid, state: &FieldState) -> String {
    let mut out = String::from("s,z,dz,d2z\n");
    for i in 0..=grid.n_cells {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt(grid.node_s(i)),
            fmt(state.value(i)),
            fmt(state.slope(i)),
            fmt(state.second_at_node(grid, i)),
        ));
    }
    out
}

/// Run summary echoed next to the CSVs.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    /// Termination status variant name.
    pub status: String,
    /// True when the march stopped before its horizon without stabilizing.
    pub partial: bool,
    pub t_final: f64,
    pub records: usize,
    pub kappa: f64,
    /// Steady branch the run settled on, if it stabilized.
    pub matched_branch: Option<String>,
    pub stabilized_at: Option<f64>,
    pub failure_t: Option<f64>,
    pub failure_ratio: Option<f64>,
    /// Record indices of the written snapshots.
    pub snapshots: Vec<usize>,
    pub config: ConfigFile,
}

/// Evenly spaced record indices including the first and last.
fn snapshot_indices(n_records: usize, count: usize) -> Vec<usize> {
    match (n_records, count) {
        (0, _) | (_, 0) => Vec::new(),
        (n, 1) => vec![n - 1],
        (n, c) => {
            let c = c.min(n);
            if c == 1 {
                return vec![n - 1];
            }
            let mut idx: Vec<usize> =
                (0..c).map(|k| (k * (n - 1)) / (c - 1)).collect();
            idx.dedup();
            idx
        }
    }
}

/// Write diagnostics CSV, snapshot CSVs, and the JSON summary into `dir`.
pub fn write_outputs(
    grid: &Grid,
    traj: &Trajectory,
    config: &ConfigFile,
    dir: &Path,
) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("diagnostics.csv"), diagnostics_csv(traj))?;
    let snaps = snapshot_indices(traj.states.len(), config.outputs.snapshot_count);
    for &i in &snaps {
        fs::write(dir.join(format!("snapshot_{i:04}.csv")), snapshot_csv(grid, &traj.states[i]))?;
    }
    let (status, partial, matched, stab_t, fail_t, fail_ratio) = match &traj.status {
        RunStatus::ReachedTEnd => ("ReachedTEnd", false, None, None, None, None),
        RunStatus::Stabilized { branch, t } => {
            ("Stabilized", false, Some(branch.branch.label()), Some(*t), None, None)
        }
        RunStatus::FixedPointFailure { t, ratio } => {
            ("FixedPointFailure", true, None, None, Some(*t), Some(*ratio))
        }
    };
    let summary = RunSummary {
        status: status.to_string(),
        partial,
        t_final: traj.times.last().copied().unwrap_or(0.0),
        records: traj.states.len(),
        kappa: traj.kappa,
        matched_branch: matched,
        stabilized_at: stab_t,
        failure_t: fail_t,
        failure_ratio: fail_ratio,
        snapshots: snaps,
        config: config.clone(),
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
struct FitSummary {
    name: String,
    slope: f64,
    intercept: f64,
    residual: f64,
    points: usize,
    expected_slope: Option<f64>,
    passed: Option<bool>,
}

/// Sweep summary: per-fit slopes with pass/fail against expectations.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub study: String,
    pub inconclusive: bool,
    pub note: String,
    pub failed_indices: Vec<usize>,
    fits: Vec<FitSummary>,
    /// Overall verdict: conclusive and every expected slope met.
    pub passed: bool,
}

fn fit_summary(fit: &SlopeFit, expected: Option<f64>) -> FitSummary {
    FitSummary {
        name: fit.name.to_string(),
        slope: fit.slope,
        intercept: fit.intercept,
        residual: fit.residual,
        points: fit.points,
        expected_slope: expected,
        passed: expected.map(|e| fit.meets(e)),
    }
}

/// Raw sweep metrics table: abscissa plus one column per metric.
pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from("x");
    for c in &result.columns {
        out.push(',');
        out.push_str(c.name);
    }
    out.push('\n');
    for (i, &x) in result.xs.iter().enumerate() {
        out.push_str(&fmt(x));
        for c in &result.columns {
            out.push(',');
            out.push_str(&fmt(c.values[i]));
        }
        out.push('\n');
    }
    out
}

/// Write the sweep CSV and JSON summary; `expectations` maps fit names to
/// the slopes the study is checked against.
pub fn write_sweep_outputs(
    study: &str,
    result: &SweepResult,
    expectations: &[(&str, f64)],
    dir: &Path,
) -> Result<SweepSummary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("sweep.csv"), sweep_csv(result))?;
    let fits: Vec<FitSummary> = result
        .fits
        .iter()
        .map(|f| {
            let expected = expectations.iter().find(|(n, _)| *n == f.name).map(|&(_, e)| e);
            fit_summary(f, expected)
        })
        .collect();
    let all_met = expectations.iter().all(|(name, e)| {
        result.fits.iter().any(|f| f.name == *name && f.meets(*e))
    });
    let summary = SweepSummary {
        study: study.to_string(),
        inconclusive: result.inconclusive,
        note: result.note.clone(),
        failed_indices: result.failed.clone(),
        fits,
        passed: !result.inconclusive && all_met,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(dir.join("sweep_summary.json"), text)?;
    Ok(summary)
}

/// Steady-state census table.
pub fn census_csv(fields: &[crate::steady::SteadyField]) -> String {
    let mut out = String::from("label,constant,residual\n");
    for f in fields {
        out.push_str(&format!("{},{},{}\n", f.branch.label(), fmt(f.c), fmt(f.residual)));
    }
    out
}
