//! The experiment pipeline, one public function per stage so the CLI can run
//! stages on their own.

use nalgebra::DVector;
use rddc_core::bounds::{
    compute_noise_ratios, error_budget, relative_error_bound, scaled_uncertainty_radius, ErrorBudget, NoiseRatios,
};
use rddc_core::datamat::{build_from_episodes, build_mode_masked, DataMatrices, ModeMasked, StateSource};
use rddc_core::identify::{identify_switched, IdentifiedModel};
use rddc_core::numkernel::{matrix_norm, NormKind};
use rddc_core::plant::{add_measurement_noise, collect_episodes, random_ensemble, EpisodePlan, SwitchedModel, Trajectory};
use rddc_core::precond::{column_subset, rescaled_identify_switched, scaled_data, PrecondKind, Preconditioner};
use rddc_core::rng::{derive_seed, uniform_vec, Purpose};
use rddc_core::synth::{
    synthesize_switched_with, verify_closed_loop, ClosedLoopReport, ModeUncertainty, SynthStatus, SynthesisConfig,
    SynthesisResult,
};
use rddc_core::{Error, Mat, Result};
use serde::Serialize;

use crate::config::{ExperimentConfig, PreconditionMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Generate,
    Corrupt,
    Identify,
    Bound,
    Precondition,
    Synthesize,
    Verify,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::Corrupt => "corrupt",
            Stage::Identify => "identify",
            Stage::Bound => "bound",
            Stage::Precondition => "precondition",
            Stage::Synthesize => "synthesize",
            Stage::Verify => "verify",
        }
    }
}

/// Process exit code for a core error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::RankDeficient { .. }
        | Error::ModeRichness { .. }
        | Error::AssumptionViolation(_)
        | Error::BoundUnavailable { .. }
        | Error::Divergence { .. } => 2,
        Error::Io { .. } | Error::Csv { .. } | Error::Json(_) => 4,
        Error::InvalidInput(_) | Error::MalformedProblem(_) => 1,
    }
}

pub fn remediation(e: &Error) -> &'static str {
    match e {
        Error::RankDeficient { .. } | Error::ModeRichness { .. } => {
            "collect a longer trajectory (T) or excite the system with richer inputs"
        }
        Error::AssumptionViolation(_) => "lower the noise level or collect larger-amplitude data",
        Error::BoundUnavailable { .. } => "lower the noise level or pre-condition the data (precondition = ruiz)",
        Error::Divergence { .. } => "shorten the episodes or lower the input and state amplitudes",
        Error::Io { .. } | Error::Csv { .. } | Error::Json(_) => "check the file paths, permissions and formats",
        Error::InvalidInput(_) => "check the configuration values",
        Error::MalformedProblem(_) => "this is a bug in problem assembly; please report it",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub stage: Stage,
    pub message: String,
    pub hint: &'static str,
    pub exit_code: i32,
}

impl Failure {
    pub fn new(stage: Stage, e: &Error) -> Self {
        Failure {
            stage,
            message: e.to_string(),
            hint: remediation(e),
            exit_code: exit_code(e),
        }
    }
}

/// Trajectories plus the model that produced them, when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub model: Option<SwitchedModel>,
    pub episodes: Vec<Trajectory>,
    pub gamma: usize,
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let model = random_ensemble(cfg.n, cfg.m, cfg.gamma, cfg.seed)?;
    let plan = EpisodePlan {
        steps: cfg.steps,
        episode_length: cfg.episode_length,
        input_amplitude: cfg.input_amplitude,
        state_amplitude: cfg.state_amplitude,
    };
    let episodes = collect_episodes(&model, &plan, cfg.seed)?;
    Ok(Dataset {
        model: Some(model),
        episodes,
        gamma: cfg.gamma,
    })
}

/// Measurement noise, with an independent stream per episode.
pub fn corrupt(ds: &Dataset, noise_pct: f64, seed: u64) -> Result<Dataset> {
    let episodes = ds
        .episodes
        .iter()
        .enumerate()
        .map(|(e, t)| add_measurement_noise(t, noise_pct, derive_seed(seed, Purpose::Episode, e as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        episodes,
        ..ds.clone()
    })
}

/// Data matrices ready for identification.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub measured: DataMatrices,
    pub truth: Option<DataMatrices>,
    pub modes: Vec<usize>,
    pub masked: ModeMasked,
    pub gamma: usize,
    /// Kept columns of the full data when a subset was requested.
    pub subset: Option<Vec<usize>>,
}

impl Prepared {
    pub fn columns_per_mode(&self) -> Vec<usize> {
        self.masked.modes.iter().map(|m| m.columns.len()).collect()
    }
}

pub fn prepare(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Prepared> {
    let (measured, modes) = build_from_episodes(&ds.episodes, StateSource::Measured)?;
    let truth = if ds.episodes.iter().all(Trajectory::has_ground_truth) {
        Some(build_from_episodes(&ds.episodes, StateSource::GroundTruth)?.0)
    } else {
        None
    };
    let masked = build_mode_masked(&measured, &modes, ds.gamma)?;
    let mut p = Prepared {
        measured,
        truth,
        modes,
        masked,
        gamma: ds.gamma,
        subset: None,
    };
    if let Some(total) = cfg.allow_column_subset {
        if total < p.measured.len() {
            subset_columns(&mut p, total, cfg)?;
        }
    }
    Ok(p)
}

/// Shrinks every mode to its share of `total` columns, choosing the
/// best-conditioned sampled subset.
/// Splits `total` columns over modes holding `haves` columns: every mode
/// gets `floor` (or all it has), the rest goes out in proportion to what is
/// left over, largest remainder first. Sums to `total` whenever that fits.
fn allocate(total: usize, haves: &[usize], floor: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = haves.iter().map(|&h| h.min(floor)).collect();
    let spare: Vec<usize> = haves.iter().zip(&sizes).map(|(h, s)| h - s).collect();
    let pool: usize = spare.iter().sum();
    let extra = total.saturating_sub(sizes.iter().sum()).min(pool);
    if pool == 0 || extra == 0 {
        return sizes;
    }
    let mut rem = Vec::with_capacity(haves.len());
    let mut given = 0;
    for (i, &sp) in spare.iter().enumerate() {
        let exact = extra as f64 * sp as f64 / pool as f64;
        let whole = exact.floor() as usize;
        sizes[i] += whole;
        given += whole;
        rem.push((exact - whole as f64, i));
    }
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let bump: Vec<usize> = rem.iter().map(|r| r.1).filter(|&i| sizes[i] < haves[i]).take(extra - given).collect();
    for i in bump {
        sizes[i] += 1;
    }
    sizes
}

fn subset_columns(p: &mut Prepared, total: usize, cfg: &ExperimentConfig) -> Result<()> {
    let rows = p.measured.m() + p.measured.n();
    let haves: Vec<usize> = p.masked.modes.iter().map(|mm| mm.columns.len()).collect();
    let sizes = allocate(total, &haves, rows);
    let mut keep = Vec::new();
    for (i, mm) in p.masked.modes.iter().enumerate() {
        let (have, size) = (haves[i], sizes[i]);
        if size < rows || size == have {
            keep.extend_from_slice(&mm.columns);
            continue;
        }
        let sel = column_subset(
            &mm.stacked_nonzero(),
            size,
            cfg.column_trials,
            derive_seed(cfg.seed, Purpose::ColumnSelect, i as u64),
        )?;
        keep.extend(sel.indices.iter().map(|&j| mm.columns[j]));
    }
    keep.sort_unstable();
    p.measured = p.measured.select_columns(&keep);
    p.truth = p.truth.as_ref().map(|d| d.select_columns(&keep));
    p.modes = keep.iter().map(|&k| p.modes[k]).collect();
    p.masked = build_mode_masked(&p.measured, &p.modes, p.gamma)?;
    p.subset = Some(keep);
    Ok(())
}

pub fn identify_raw(p: &Prepared) -> Result<IdentifiedModel> {
    identify_switched(&p.measured, &p.masked)
}

/// One preconditioner per mode, or `None` for `PreconditionMode::None`.
pub fn build_preconditioners(p: &Prepared, cfg: &ExperimentConfig) -> Result<Option<Vec<Preconditioner>>> {
    use rddc_core::precond::{RUIZ_MAX_ITERS, RUIZ_TOL};
    if cfg.precondition == PreconditionMode::None {
        return Ok(None);
    }
    let min_cols = p.measured.m() + p.measured.n();
    let mut out = Vec::with_capacity(p.gamma);
    for (i, mm) in p.masked.modes.iter().enumerate() {
        if mm.columns.len() < min_cols {
            return Err(Error::ModeRichness { modes: vec![i + 1] });
        }
        let stacked = mm.stacked();
        let seed = derive_seed(cfg.seed, Purpose::ColumnSelect, 1000 + i as u64);
        let pc = match cfg.precondition {
            PreconditionMode::Ruiz => Preconditioner::diagonal(&stacked, &mm.columns, RUIZ_MAX_ITERS, RUIZ_TOL)?,
            PreconditionMode::Colsel => Preconditioner::columns(&stacked, &mm.columns, min_cols, cfg.column_trials, seed)?.0,
            PreconditionMode::Both => {
                Preconditioner::diagonal_then_columns(
                    &stacked,
                    &mm.columns,
                    RUIZ_MAX_ITERS,
                    RUIZ_TOL,
                    min_cols,
                    cfg.column_trials,
                    seed,
                )?
                .0
            }
            PreconditionMode::None => unreachable!(),
        };
        out.push(pc);
    }
    Ok(Some(out))
}

pub fn identify_preconditioned(p: &Prepared, pcs: &[Preconditioner]) -> Result<IdentifiedModel> {
    rescaled_identify_switched(&p.measured, &p.masked, pcs)
}

/// Where noise ratios come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratios {
    /// From the ground-truth data (requires `Prepared::truth`).
    Oracle,
    Declared(NoiseRatios),
}

/// Per-mode condition numbers, bounds and (with ground truth) actual errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeRow {
    pub mode: usize,
    pub columns: usize,
    pub kappa_raw: f64,
    pub kappa_pre: Option<f64>,
    /// Relative error bound of the raw estimate.
    pub bound_raw: f64,
    /// Relative error bound of the estimate in scaled coordinates.
    pub bound_pre: Option<f64>,
    /// Scaled condition number combined with the raw noise ratios.
    pub bound_pre_raw_ratios: Option<f64>,
    pub actual_err_raw: Option<f64>,
    pub actual_err_pre: Option<f64>,
    /// Relative error in scaled coordinates, the quantity `bound_pre` bounds.
    pub actual_err_pre_scaled: Option<f64>,
    pub ratios_raw: NoiseRatios,
    pub ratios_pre: Option<NoiseRatios>,
    pub budget_raw: ErrorBudget,
    pub budget_pre: Option<ErrorBudget>,
}

fn spectral(m: &Mat) -> Result<f64> {
    matrix_norm(m, NormKind::Spectral)
}

fn rel_err(est: &Mat, truth: &Mat) -> Result<f64> {
    let t = spectral(truth)?;
    let d = spectral(&(est - truth))?;
    Ok(if t == 0.0 { d } else { d / t })
}

fn unscale(m: &Mat, d_l: Option<&DVector<f64>>) -> Mat {
    match d_l {
        Some(d) => m * Mat::from_diagonal(&d.map(|v| 1.0 / v)),
        None => m.clone(),
    }
}

/// Builds the per-mode table. `truth_model` enables actual errors.
pub fn mode_rows(
    p: &Prepared,
    raw: &IdentifiedModel,
    pre: Option<(&IdentifiedModel, &[Preconditioner])>,
    ratios: Ratios,
    truth_model: Option<&SwitchedModel>,
    k_bar: f64,
) -> Result<Vec<ModeRow>> {
    let mut rows = Vec::with_capacity(p.gamma);
    let all: Vec<usize> = (0..p.measured.len()).collect();
    for (i, mm) in p.masked.modes.iter().enumerate() {
        let meas_i = p.measured.select_columns(&mm.columns);
        let r_raw = match ratios {
            Ratios::Declared(r) => r,
            Ratios::Oracle => {
                let truth = p
                    .truth
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("oracle noise ratios need ground-truth states".into()))?;
                compute_noise_ratios(&meas_i, &truth.select_columns(&mm.columns))?
            }
        };
        let est_raw = &raw.blocks[i];
        let kappa_raw = raw.condition_numbers[i];
        let budget_raw = error_budget(kappa_raw, &r_raw, spectral(est_raw)?, Some(k_bar))?;
        let truth_i = truth_model.map(|m| m.modes[i].stacked());
        let actual_err_raw = truth_i.as_ref().map(|t| rel_err(est_raw, t)).transpose()?;

        let mut row = ModeRow {
            mode: i + 1,
            columns: mm.columns.len(),
            kappa_raw,
            kappa_pre: None,
            bound_raw: budget_raw.relative_bound,
            bound_pre: None,
            bound_pre_raw_ratios: None,
            actual_err_raw,
            actual_err_pre: None,
            actual_err_pre_scaled: None,
            ratios_raw: r_raw,
            ratios_pre: None,
            budget_raw,
            budget_pre: None,
        };
        if let Some((pre_model, pcs)) = pre {
            let pc = &pcs[i];
            let d_l = pc.d_l();
            let kappa_pre = pre_model.condition_numbers[i];
            let r_pre = match ratios {
                Ratios::Declared(r) => r,
                Ratios::Oracle => {
                    let truth = p.truth.as_ref().expect("checked above");
                    let cols = match &pc.kind {
                        PrecondKind::ColumnSelection { .. } => &all,
                        PrecondKind::Diagonal { .. } => &mm.columns,
                    };
                    compute_noise_ratios(&scaled_data(&p.measured, cols, pc)?, &scaled_data(truth, cols, pc)?)?
                }
            };
            let est_hat = unscale(&pre_model.blocks[i], d_l.as_ref());
            let mut budget_pre = error_budget(kappa_pre, &r_pre, spectral(&est_hat)?, Some(k_bar))?;
            if let (Some(d), Some(a)) = (&d_l, budget_pre.absolute_bound) {
                budget_pre.radius_dx1 = Some(scaled_uncertainty_radius(a, k_bar, d, p.measured.m()));
            }
            row.kappa_pre = Some(kappa_pre);
            row.bound_pre = Some(budget_pre.relative_bound);
            row.bound_pre_raw_ratios = Some(relative_error_bound(kappa_pre, &r_raw)?);
            if let Some(t) = &truth_i {
                row.actual_err_pre = Some(rel_err(&pre_model.blocks[i], t)?);
                row.actual_err_pre_scaled = Some(rel_err(&est_hat, &unscale(t, d_l.as_ref()))?);
            }
            row.ratios_pre = Some(r_pre);
            row.budget_pre = Some(budget_pre);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Uncertainty descriptions for synthesis: the scaled-path budgets when
/// pre-conditioned, otherwise the raw ones.
pub fn uncertainties(rows: &[ModeRow], pcs: Option<&[Preconditioner]>) -> Vec<ModeUncertainty> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| match (pcs, &r.budget_pre) {
            (Some(pcs), Some(b)) => ModeUncertainty {
                absolute_bound: b.absolute_bound,
                c_bar: b.c_bar,
                d_l: pcs[i].d_l(),
            },
            _ => ModeUncertainty::from_budget(&r.budget_raw),
        })
        .collect()
}

pub fn synthesis_config(cfg: &ExperimentConfig) -> SynthesisConfig {
    SynthesisConfig {
        k_bar: cfg.k_bar,
        lambda_grid: cfg.lambda_grid.clone(),
        margin_eta: cfg.margin_eta,
        lyapunov: cfg.lyapunov,
        ..SynthesisConfig::default()
    }
}

pub fn synthesize(p: &Prepared, pcs: Option<&[Preconditioner]>, rows: &[ModeRow], cfg: &ExperimentConfig) -> Result<SynthesisResult> {
    synthesize_switched_with(&p.measured, &p.masked, pcs, &uncertainties(rows, pcs), &synthesis_config(cfg))
}

/// Closed loop from `x0 ~ U(-1, 1)^n` under uniformly random switching.
pub fn closed_loop(model: &SwitchedModel, gains: &[Mat], steps: usize, seed: u64) -> Result<ClosedLoopReport> {
    let x0 = DVector::from_vec(uniform_vec(seed, Purpose::ClosedLoopInitial, 0, model.n(), -1.0, 1.0));
    verify_closed_loop(model, gains, &x0, steps, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub episodes: usize,
    pub columns: usize,
    pub columns_per_mode: Vec<usize>,
    pub column_subset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecondSummary {
    pub mode: usize,
    pub kind: &'static str,
    pub kappa_before: f64,
    pub kappa_after: f64,
    pub d_l: Option<Vec<f64>>,
    pub columns_used: Option<usize>,
}

impl PrecondSummary {
    pub fn new(mode: usize, pc: &Preconditioner) -> Self {
        let (kind, d_l, columns_used) = match &pc.kind {
            PrecondKind::ColumnSelection { indices } => ("column_selection", None, Some(indices.len())),
            PrecondKind::Diagonal { d_l, columns, .. } => ("diagonal", Some(d_l.clone()), columns.as_ref().map(Vec::len)),
        };
        PrecondSummary {
            mode,
            kind,
            kappa_before: pc.kappa_before,
            kappa_after: pc.kappa_after,
            d_l,
            columns_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoopSummary {
    pub gains_certified: bool,
    pub steps: usize,
    pub x0_norm: f64,
    pub spectral_radii: Vec<f64>,
    pub spectral_norms: Vec<f64>,
    pub max_spectral_norm: f64,
    pub converged: bool,
    pub settling_step: Option<usize>,
    pub diverged: bool,
    pub trajectory_file: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Consistency {
    pub checks: usize,
    pub violations: Vec<String>,
}

/// Slack for comparing a proved inequality in floating point: relative, plus
/// an absolute floor for bounds that are exactly zero on noiseless data.
const CONSISTENCY_SLACK: f64 = 1e-9;
const CONSISTENCY_FLOOR: f64 = 1e-10;

/// Actual errors must not exceed the bounds that apply to them.
pub fn check_consistency(rows: &[ModeRow], raw: &IdentifiedModel, truth_model: Option<&SwitchedModel>) -> Consistency {
    let mut checks = 0;
    let mut violations = Vec::new();
    let mut check = |ok: bool, what: String| {
        checks += 1;
        if !ok {
            violations.push(what);
        }
    };
    let le = |a: f64, b: f64| a <= b * (1.0 + CONSISTENCY_SLACK) + CONSISTENCY_FLOOR;
    for r in rows {
        if let Some(e) = r.actual_err_raw {
            check(le(e, r.bound_raw), format!("mode {}: raw error {e:e} exceeds bound {:e}", r.mode, r.bound_raw));
            if let (Some(abs), Some(m)) = (r.budget_raw.absolute_bound, truth_model) {
                let truth = m.modes[r.mode - 1].stacked();
                let scale = spectral(&truth).unwrap_or(1.0).max(1.0);
                let d = spectral(&(&raw.blocks[r.mode - 1] - truth)).unwrap_or(f64::INFINITY);
                check(le(d / scale, abs / scale), format!("mode {}: raw absolute error {d:e} exceeds bound {abs:e}", r.mode));
            }
        }
        if let (Some(e), Some(b)) = (r.actual_err_pre_scaled, r.bound_pre) {
            check(le(e, b), format!("mode {}: scaled error {e:e} exceeds bound {b:e}", r.mode));
        }
    }
    Consistency { checks, violations }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub toolkit: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub data: Option<DataSummary>,
    pub modes: Vec<ModeRow>,
    pub preconditioners: Option<Vec<PrecondSummary>>,
    pub synthesis: Option<serde_json::Value>,
    pub closed_loop: Option<ClosedLoopSummary>,
    pub consistency: Option<Consistency>,
    pub failed_at: Option<Failure>,
    #[serde(skip)]
    pub trajectory: Vec<DVector<f64>>,
    #[serde(skip)]
    pub synthesis_result: Option<SynthesisResult>,
    #[serde(skip)]
    pub model: Option<SwitchedModel>,
}

impl Report {
    fn new(cfg: &ExperimentConfig) -> Self {
        Report {
            toolkit: "rddc",
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config: cfg.clone(),
            data: None,
            modes: Vec::new(),
            preconditioners: None,
            synthesis: None,
            closed_loop: None,
            consistency: None,
            failed_at: None,
            trajectory: Vec::new(),
            synthesis_result: None,
            model: None,
        }
    }

    pub fn synthesis_status(&self) -> Option<SynthStatus> {
        self.synthesis_result.as_ref().map(|s| s.status)
    }

    /// 0 on success, the failure's code, or 3 when synthesis ran but did not
    /// certify every mode.
    pub fn exit_code(&self) -> i32 {
        if let Some(f) = &self.failed_at {
            return f.exit_code;
        }
        if self.consistency.as_ref().is_some_and(|c| !c.violations.is_empty()) {
            return 1;
        }
        match self.synthesis_status() {
            Some(SynthStatus::Feasible) | None => 0,
            Some(_) => 3,
        }
    }
}

fn at<T>(stage: Stage, r: Result<T>) -> std::result::Result<T, (Stage, Error)> {
    r.map_err(|e| (stage, e))
}

/// Runs the whole pipeline. Never panics on bad input: the first failing
/// stage is recorded in `failed_at` and everything computed before it is kept.
pub fn run_experiment(cfg: &ExperimentConfig) -> Report {
    let mut report = Report::new(cfg);
    if let Err((stage, e)) = run_stages(cfg, &mut report) {
        report.failed_at = Some(Failure::new(stage, &e));
    }
    report
}

fn run_stages(cfg: &ExperimentConfig, r: &mut Report) -> std::result::Result<(), (Stage, Error)> {
    at(Stage::Config, cfg.validate())?;
    let clean = at(Stage::Generate, generate(cfg))?;
    r.model = clean.model.clone();
    let noisy = at(Stage::Corrupt, corrupt(&clean, cfg.noise_pct, cfg.seed))?;
    let p = at(Stage::Identify, prepare(&noisy, cfg))?;
    r.data = Some(DataSummary {
        episodes: noisy.episodes.len(),
        columns: p.measured.len(),
        columns_per_mode: p.columns_per_mode(),
        column_subset: p.subset.is_some(),
    });
    let raw = at(Stage::Identify, identify_raw(&p))?;
    let pcs = at(Stage::Precondition, build_preconditioners(&p, cfg))?;
    if let Some(pcs) = &pcs {
        r.preconditioners = Some(pcs.iter().enumerate().map(|(i, pc)| PrecondSummary::new(i + 1, pc)).collect());
    }
    let pre = match &pcs {
        Some(pcs) => Some(at(Stage::Precondition, identify_preconditioned(&p, pcs))?),
        None => None,
    };
    let model = clean.model.as_ref();
    let rows = at(
        Stage::Bound,
        mode_rows(&p, &raw, pre.as_ref().zip(pcs.as_deref()), Ratios::Oracle, model, cfg.k_bar),
    )?;
    r.consistency = Some(check_consistency(&rows, &raw, model));
    r.modes = rows;
    if !cfg.synthesize {
        return Ok(());
    }
    let syn = at(Stage::Synthesize, synthesize(&p, pcs.as_deref(), &r.modes, cfg))?;
    r.synthesis = Some(syn.to_json());
    let gains = syn.gains();
    let certified = syn.status == SynthStatus::Feasible;
    r.synthesis_result = Some(syn);
    if let (Some(gains), Some(model)) = (gains, model) {
        let cl = at(Stage::Verify, closed_loop(model, &gains, cfg.closed_loop_steps, cfg.seed))?;
        r.closed_loop = Some(ClosedLoopSummary {
            gains_certified: certified,
            steps: cl.modes.len(),
            x0_norm: cl.states[0].norm(),
            max_spectral_norm: cl.spectral_norms.iter().fold(0.0, |a: f64, &b| a.max(b)),
            spectral_radii: cl.spectral_radii,
            spectral_norms: cl.spectral_norms,
            converged: cl.converged,
            settling_step: cl.settling_step,
            diverged: cl.diverged,
            trajectory_file: "trajectory.csv",
        });
        r.trajectory = cl.states;
    }
    Ok(())
}
