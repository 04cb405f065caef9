//! Robust state-feedback synthesis from data, and closed-loop verification.
//!
//! Each problem looks for `Q` with `X0 Q = I`, `||U0 Q|| <= K_bar` and a
//! small estimated closed loop `X1 Q`, then takes `K = U0 Q`. `Q` is searched
//! in the row space of the (scaled) stacked data matrix, `Q = B Y`; on that
//! subspace `X1 Q = E [K; I]` holds exactly for the identified `E`, so the
//! true closed loop differs from `X1 Q` by `delta_BA [K; I]` only, which is
//! what the uncertainty radius bounds.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{scaled_uncertainty_radius, uncertainty_radius, ErrorBudget};
use crate::datamat::{DataMatrices, ModeMasked};
use crate::error::{Error, Result};
use crate::identify::{row_major, structured_pseudo_inverse};
use crate::lmi::{solve_feasibility, AffineExpr, SdpProblem, SdpStatus, SolveOptions, VarId};
use crate::numkernel::{min_eig_unchecked, row_space_basis, spectral, spectral_radius, Mat};
use crate::plant::SwitchedModel;
use crate::precond::{PrecondKind, Preconditioner};
use crate::rng::{stream, Purpose};

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [1.0, 0.75, 0.5, 0.25, 0.1, 0.01];

/// Lyapunov certificate shared by all modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lyapunov {
    /// `P = I`: every mode must satisfy its own norm bound, problems decouple.
    Identity,
    /// A free common `P >= I`, solved jointly over all modes.
    Common,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub k_bar: f64,
    pub lambda_grid: Vec<f64>,
    pub margin_eta: f64,
    pub lyapunov: Lyapunov,
    pub solver: SolveOptions,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            k_bar: 20.0,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            margin_eta: 1e-3,
            lyapunov: Lyapunov::Identity,
            solver: SolveOptions::default(),
        }
    }
}

impl SynthesisConfig {
    fn validate(&self) -> Result<()> {
        if !(self.k_bar > 0.0) || !self.k_bar.is_finite() {
            return Err(Error::invalid(format!("K_bar must be positive and finite, got {}", self.k_bar)));
        }
        if !(self.margin_eta > 0.0 && self.margin_eta < 1.0) {
            return Err(Error::invalid(format!("margin_eta must lie in (0, 1), got {}", self.margin_eta)));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid("lambda grid must be a non-empty list of positive reals"));
        }
        Ok(())
    }

    /// Grid in descending order without duplicates.
    fn grid(&self) -> Vec<f64> {
        let mut g = self.lambda_grid.clone();
        g.sort_by(|a, b| b.partial_cmp(a).expect("finite grid"));
        g.dedup();
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthStatus {
    /// LMIs feasible and robust stability certified.
    Feasible,
    /// LMIs feasible, but only at a point whose robustness does not follow.
    Uncertified,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaAttempt {
    pub lambda: f64,
    /// `None` when the grid point was skipped (`lambda * radius > 1 - eta`).
    pub status: Option<SdpStatus>,
    pub margin: Option<f64>,
}

/// Independent re-evaluation of a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recheck {
    /// `max |X0 Q - I|` (or `|X0 Q - P|`).
    pub eq_residual: f64,
    pub gain_norm: f64,
    /// Smallest eigenvalue of the gain-bound block.
    pub gain_block_margin: f64,
    /// Smallest eigenvalue of the closed-loop block.
    pub stability_block_margin: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSynthesis {
    pub status: SynthStatus,
    pub lambda: Option<f64>,
    pub gain: Option<Mat>,
    pub q: Option<Mat>,
    pub delta_q: Option<Mat>,
    pub radius: f64,
    /// `||X1 Q||`, the estimated closed-loop norm (with `P = I`).
    pub x1q_norm: Option<f64>,
    /// `||X1 Q|| + ||delta_BA [K; I]||` bound; `< 1` certifies the mode.
    pub certified_bound: Option<f64>,
    pub recheck: Option<Recheck>,
    pub attempts: Vec<LambdaAttempt>,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    pub status: SynthStatus,
    pub lyapunov: Lyapunov,
    pub modes: Vec<ModeSynthesis>,
    /// Common Lyapunov matrix when solved for (`Lyapunov::Common`).
    pub p: Option<Mat>,
}

impl SynthesisResult {
    pub fn gains(&self) -> Option<Vec<Mat>> {
        self.modes.iter().map(|m| m.gain.clone()).collect()
    }

    /// 1-based modes that are not certified feasible.
    pub fn failing_modes(&self) -> Vec<usize> {
        self.modes
            .iter()
            .enumerate()
            .filter(|(_, m)| m.status != SynthStatus::Feasible)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let modes: Vec<_> = self
            .modes
            .iter()
            .enumerate()
            .map(|(i, m)| {
                serde_json::json!({
                    "mode": i + 1,
                    "status": m.status,
                    "lambda": m.lambda,
                    "gain": m.gain.as_ref().map(row_major),
                    "gain_shape": m.gain.as_ref().map(|g| [g.nrows(), g.ncols()]),
                    "radius_DX1": m.radius,
                    "x1q_norm": m.x1q_norm,
                    "certified_bound": m.certified_bound,
                    "recheck": m.recheck,
                    "attempts": m.attempts,
                    "diagnostic": m.diagnostic,
                })
            })
            .collect();
        serde_json::json!({
            "status": self.status,
            "lyapunov": self.lyapunov,
            "failing_modes": self.failing_modes(),
            "modes": modes,
        })
    }
}

/// Uncertainty description for one mode: the absolute error bound of
/// the estimate as identified, plus the left scaling if the estimate was
/// made on a diagonally scaled system.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeUncertainty {
    pub absolute_bound: Option<f64>,
    pub c_bar: f64,
    pub d_l: Option<DVector<f64>>,
}

impl ModeUncertainty {
    pub fn from_budget(b: &ErrorBudget) -> Self {
        ModeUncertainty {
            absolute_bound: b.absolute_bound,
            c_bar: b.c_bar,
            d_l: None,
        }
    }

    fn abs(&self) -> Result<f64> {
        self.absolute_bound
            .ok_or(Error::BoundUnavailable { c_bar: self.c_bar })
    }

    fn radius(&self, k_bar: f64, m: usize) -> Result<f64> {
        let a = self.abs()?;
        Ok(match &self.d_l {
            Some(d) => scaled_uncertainty_radius(a, k_bar, d, m),
            None => uncertainty_radius(a, k_bar),
        })
    }

    /// Bound on `||delta_BA [K; I]||` for a concrete gain.
    fn perturbation(&self, k: &Mat) -> Result<f64> {
        let a = self.abs()?;
        let (m, n) = (k.nrows(), k.ncols());
        let mut ki = Mat::zeros(m + n, n);
        ki.rows_mut(0, m).copy_from(k);
        ki.rows_mut(m, n).fill_with_identity();
        if let Some(d) = &self.d_l {
            ki = Mat::from_diagonal(d) * ki;
        }
        Ok(a * spectral(&ki))
    }
}

/// One mode's data in synthesis form.
struct ModeData {
    u0: Mat,
    x0: Mat,
    /// `X1 Pi_i` (plain `X1` for an LTI system).
    x1: Mat,
    /// `T x (m + n)` basis of the admissible `Q` columns.
    basis: Mat,
    unc: ModeUncertainty,
}

/// `Pi_i = I_T - sum_{j != i} S_j M_j` with `S_j` the structured inverse of
/// mode `j`. On noiseless data `X1 Pi_i = [B_i A_i] M_i`.
pub fn mode_projector(masked: &ModeMasked, mode: usize) -> Result<Mat> {
    let t = masked.modes.first().map_or(0, |m| m.u0.ncols());
    let mut pi = Mat::identity(t, t);
    for (j, mm) in masked.modes.iter().enumerate() {
        if j != mode {
            let s = structured_pseudo_inverse(mm, j)?;
            pi -= s * mm.stacked();
        }
    }
    Ok(pi)
}

/// Row-space basis of `stacked` restricted to `cols`, scattered back into a
/// full-width `T x rows` matrix, optionally through a preconditioner.
fn admissible_basis(stacked: &Mat, cols: &[usize], pc: Option<&Preconditioner>) -> Result<(Mat, Option<DVector<f64>>)> {
    let t = stacked.ncols();
    let r = stacked.nrows();
    let scatter = |v: &Mat, idx: &[usize]| {
        let mut b = Mat::zeros(t, r);
        for (row, &k) in idx.iter().enumerate() {
            b.set_row(k, &v.row(row));
        }
        b
    };
    match pc.map(|p| &p.kind) {
        None => Ok((scatter(&row_space_basis(&stacked.select_columns(cols))?, cols), None)),
        Some(PrecondKind::ColumnSelection { indices }) => {
            Ok((scatter(&row_space_basis(&stacked.select_columns(indices))?, indices), None))
        }
        Some(PrecondKind::Diagonal { d_l, d_r, columns }) => {
            let cols = columns.as_deref().unwrap_or(cols);
            if d_l.len() != r || d_r.len() != t || cols.iter().any(|&k| k >= t) {
                return Err(Error::invalid("preconditioner diagonals do not match the data dimensions"));
            }
            let sub = stacked.select_columns(cols);
            let scaled = Mat::from_fn(r, cols.len(), |i, j| d_l[i] * sub[(i, j)] * d_r[cols[j]]);
            let mut v = row_space_basis(&scaled)?;
            for (row, &k) in cols.iter().enumerate() {
                v.row_mut(row).scale_mut(d_r[k]);
            }
            Ok((scatter(&v, cols), Some(DVector::from_column_slice(d_l))))
        }
    }
}

fn gain_block(k_bar: f64, uq: AffineExpr, m: usize, n: usize) -> Vec<((usize, usize), AffineExpr)> {
    vec![
        ((0, 0), AffineExpr::identity(m, k_bar)),
        ((0, 1), uq),
        ((1, 1), AffineExpr::identity(n, k_bar)),
    ]
}

fn recheck_identity(d: &ModeData, q: &Mat, dq: Option<&Mat>, k_bar: f64, lambda: f64, c: f64, tol: &SolveOptions) -> Recheck {
    let n = d.x0.nrows();
    let m = d.u0.nrows();
    let eq_residual = (&d.x0 * q - Mat::identity(n, n)).amax();
    let uq = &d.u0 * q;
    let mut gb = Mat::identity(m + n, m + n) * k_bar;
    gb.view_mut((0, m), (m, n)).copy_from(&uq);
    gb.view_mut((m, 0), (n, m)).copy_from(&uq.transpose());
    let mut off = &d.x1 * q;
    if let Some(dq) = dq {
        off += dq * (1.0 - lambda);
    }
    let mut sb = Mat::identity(2 * n, 2 * n) * c;
    sb.view_mut((0, n), (n, n)).copy_from(&off);
    sb.view_mut((n, 0), (n, n)).copy_from(&off.transpose());
    let gain_norm = spectral(&uq);
    let gain_block_margin = min_eig_unchecked(&gb);
    let stability_block_margin = min_eig_unchecked(&sb);
    Recheck {
        eq_residual,
        gain_norm,
        gain_block_margin,
        stability_block_margin,
        passes: eq_residual <= tol.eq_tol
            && gain_norm <= k_bar + 1e-6
            && gain_block_margin >= -tol.psd_tol
            && stability_block_margin >= -tol.psd_tol,
    }
}

fn solve_mode_identity(d: &ModeData, cfg: &SynthesisConfig) -> Result<ModeSynthesis> {
    let (m, n) = (d.u0.nrows(), d.x0.nrows());
    let eta = cfg.margin_eta;
    let radius = d.unc.radius(cfg.k_bar, m)?;
    let mut out = ModeSynthesis {
        status: SynthStatus::Infeasible,
        lambda: None,
        gain: None,
        q: None,
        delta_q: None,
        radius,
        x1q_norm: None,
        certified_bound: None,
        recheck: None,
        attempts: Vec::new(),
        diagnostic: None,
    };
    if radius >= 1.0 {
        out.diagnostic = Some(format!(
            "uncertainty radius {radius:.4} >= 1: no gain can be certified; pre-condition the data or lower K_bar"
        ));
        return Ok(out);
    }
    let x0b = &d.x0 * &d.basis;
    let u0b = &d.u0 * &d.basis;
    let x1b = &d.x1 * &d.basis;
    for lambda in cfg.grid() {
        if lambda * radius > 1.0 - eta {
            out.attempts.push(LambdaAttempt {
                lambda,
                status: None,
                margin: None,
            });
            continue;
        }
        let c = (1.0 - eta) * (1.0 - lambda * radius);
        let mut p = SdpProblem::new();
        let y = p.add_var("Y", m + n, n)?;
        p.add_equality(p.var(y).lmul(&x0b)?, &Mat::identity(n, n))?;
        p.add_psd(&[m, n], gain_block(cfg.k_bar, p.var(y).lmul(&u0b)?, m, n))?;
        let mut xq = p.var(y).lmul(&x1b)?;
        let dq = if lambda < 1.0 {
            let v = p.add_var("dQ", n, n)?;
            xq = xq.add(p.var(v).scale(1.0 - lambda))?;
            Some(v)
        } else {
            None
        };
        p.add_psd(
            &[n, n],
            vec![
                ((0, 0), AffineExpr::identity(n, c)),
                ((0, 1), xq),
                ((1, 1), AffineExpr::identity(n, c)),
            ],
        )?;
        let sol = solve_feasibility(&p, &cfg.solver)?;
        out.attempts.push(LambdaAttempt {
            lambda,
            status: Some(sol.status),
            margin: Some(sol.psd_margin),
        });
        if sol.status != SdpStatus::Feasible {
            continue;
        }
        let q = &d.basis * sol.value(y);
        let dqm = dq.map(|v| sol.value(v).clone());
        let k = &d.u0 * &q;
        let x1q = spectral(&(&d.x1 * &q));
        let bound = x1q + d.unc.perturbation(&k)?;
        out.recheck = Some(recheck_identity(d, &q, dqm.as_ref(), cfg.k_bar, lambda, c, &cfg.solver));
        out.status = if bound < 1.0 {
            SynthStatus::Feasible
        } else {
            out.diagnostic = Some(format!(
                "feasible at lambda = {lambda} only through the free dQ term; ||X1 Q|| + perturbation = {bound:.4} >= 1"
            ));
            SynthStatus::Uncertified
        };
        out.lambda = Some(lambda);
        out.gain = Some(k);
        out.q = Some(q);
        out.delta_q = dqm;
        out.x1q_norm = Some(x1q);
        out.certified_bound = Some(bound);
        return Ok(out);
    }
    out.diagnostic = Some("no grid point is feasible".into());
    Ok(out)
}

/// All modes jointly with a common `P >= I`. Variables per mode: `L_i = K_i P`
/// and `mu_i >= ||D_L [L_i; P]||`; `Q_i = B_i W_i^{-1} [L_i; P]` with
/// `W_i = M_i B_i`.
fn solve_common(data: &[ModeData], cfg: &SynthesisConfig) -> Result<(Vec<ModeSynthesis>, Option<Mat>)> {
    let (m, n) = (data[0].u0.nrows(), data[0].x0.nrows());
    let eta = cfg.margin_eta;
    let mut p = SdpProblem::new();
    let pv = p.add_sym_var("P", n)?;
    p.add_psd(&[n], vec![((0, 0), p.var(pv).sub(AffineExpr::identity(n, 1.0))?)])?;
    let mut handles = Vec::new();
    for (i, d) in data.iter().enumerate() {
        let e = d.unc.abs()?;
        let l = p.add_var(&format!("L{}", i + 1), m, n)?;
        let mu = p.add_var(&format!("mu{}", i + 1), 1, 1)?;
        let mut stacked_m = Mat::zeros(m + n, d.basis.nrows());
        stacked_m.rows_mut(0, m).copy_from(&d.u0);
        stacked_m.rows_mut(m, n).copy_from(&d.x0);
        let w = &stacked_m * &d.basis;
        let winv = w
            .try_inverse()
            .ok_or_else(|| Error::invalid(format!("mode {} data basis is singular", i + 1)))?;
        let top = Mat::identity(m + n, m + n).rows(0, m).into_owned().transpose();
        let bot = Mat::identity(m + n, m + n).rows(m, n).into_owned().transpose();
        // [L; P] = E_u L + E_x P
        let lp = p.var(l).lmul(&top)?.add(p.var(pv).lmul(&bot)?)?;
        let dl = d.unc.d_l.clone().unwrap_or_else(|| DVector::from_element(m + n, 1.0));
        let dlp = lp.clone().lmul(&Mat::from_diagonal(&dl))?;
        p.add_psd(
            &[m, n],
            vec![
                ((0, 0), AffineExpr::identity(m, cfg.k_bar)),
                ((0, 1), p.var(l)),
                ((1, 1), AffineExpr::identity(n, cfg.k_bar)),
            ],
        )?;
        // ||D_L [L; P]|| <= mu as [[mu I, D_L [L; P]], [., mu I]]
        p.add_psd(
            &[m + n, n],
            vec![((0, 0), scalar_identity(&p, mu, m + n)?), ((0, 1), dlp), ((1, 1), scalar_identity(&p, mu, n)?)],
        )?;
        let x1q = lp.lmul(&(&d.x1 * &d.basis * &winv))?;
        let diag = p
            .var(pv)
            .scale(1.0 - eta)
            .sub(scalar_identity(&p, mu, n)?.scale(e))?;
        p.add_psd(&[n, n], vec![((0, 0), diag.clone()), ((0, 1), x1q), ((1, 1), diag)])?;
        handles.push((l, mu, winv));
    }
    let sol = solve_feasibility(&p, &cfg.solver)?;
    let attempt = LambdaAttempt {
        lambda: 1.0,
        status: Some(sol.status),
        margin: Some(sol.psd_margin),
    };
    let mut modes = Vec::with_capacity(data.len());
    let pm = sol.value(pv).clone();
    let feasible = sol.status == SdpStatus::Feasible;
    let pinv = pm.clone().try_inverse();
    for (d, (l, _, winv)) in data.iter().zip(&handles) {
        let radius = d.unc.radius(cfg.k_bar, m)?;
        let mut ms = ModeSynthesis {
            status: SynthStatus::Infeasible,
            lambda: None,
            gain: None,
            q: None,
            delta_q: None,
            radius,
            x1q_norm: None,
            certified_bound: None,
            recheck: None,
            attempts: vec![attempt],
            diagnostic: None,
        };
        if let (true, Some(pinv)) = (feasible, pinv.as_ref()) {
            let lm = sol.value(*l);
            let k = lm * pinv;
            let mut lp = Mat::zeros(m + n, n);
            lp.rows_mut(0, m).copy_from(lm);
            lp.rows_mut(m, n).copy_from(&pm);
            let q = &d.basis * winv * &lp;
            let eq_residual = (&d.x0 * &q - &pm).amax();
            let gain_norm = spectral(&k);
            let closed = &d.x1 * &q;
            // the LMI at mu = ||D_L [L; P]|| itself, recomputed from the solution
            let dl = d.unc.d_l.clone().unwrap_or_else(|| DVector::from_element(m + n, 1.0));
            let pert = d.unc.abs()? * spectral(&(Mat::from_diagonal(&dl) * &lp));
            let mut sb = Mat::zeros(2 * n, 2 * n);
            let diag = &pm * (1.0 - eta) - Mat::identity(n, n) * pert;
            sb.view_mut((0, 0), (n, n)).copy_from(&diag);
            sb.view_mut((n, n), (n, n)).copy_from(&diag);
            sb.view_mut((0, n), (n, n)).copy_from(&closed);
            sb.view_mut((n, 0), (n, n)).copy_from(&closed.transpose());
            let stability_block_margin = min_eig_unchecked(&sb);
            let mut gb = Mat::identity(m + n, m + n) * cfg.k_bar;
            gb.view_mut((0, m), (m, n)).copy_from(lm);
            gb.view_mut((m, 0), (n, m)).copy_from(&lm.transpose());
            let gain_block_margin = min_eig_unchecked(&gb);
            ms.recheck = Some(Recheck {
                eq_residual,
                gain_norm,
                gain_block_margin,
                stability_block_margin,
                passes: eq_residual <= cfg.solver.eq_tol
                    && gain_norm <= cfg.k_bar + 1e-6
                    && gain_block_margin >= -cfg.solver.psd_tol
                    && stability_block_margin >= -cfg.solver.psd_tol,
            });
            ms.status = if stability_block_margin >= -cfg.solver.psd_tol {
                SynthStatus::Feasible
            } else {
                SynthStatus::Uncertified
            };
            ms.lambda = Some(1.0);
            ms.x1q_norm = Some(spectral(&(&d.x1 * &q * pinv)));
            ms.gain = Some(k);
            ms.q = Some(q);
        } else {
            ms.diagnostic = Some(format!("common Lyapunov problem {:?}", sol.status));
        }
        modes.push(ms);
    }
    Ok((modes, feasible.then_some(pm)))
}

/// `mu I_k` for a scalar variable `mu`, as `sum_i e_i mu e_i^T`.
fn scalar_identity(p: &SdpProblem, mu: VarId, k: usize) -> Result<AffineExpr> {
    let mut acc = AffineExpr::zeros(k, k);
    for i in 0..k {
        let mut e = Mat::zeros(k, 1);
        e[(i, 0)] = 1.0;
        acc = acc.add(p.var(mu).lmul(&e)?.rmul(&e.transpose())?)?;
    }
    Ok(acc)
}

fn overall(modes: &[ModeSynthesis]) -> SynthStatus {
    if modes.iter().all(|m| m.status == SynthStatus::Feasible) {
        SynthStatus::Feasible
    } else if modes.iter().any(|m| m.status == SynthStatus::Infeasible) {
        SynthStatus::Infeasible
    } else {
        SynthStatus::Uncertified
    }
}

fn run(data: Vec<ModeData>, cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    cfg.validate()?;
    for d in &data {
        d.unc.abs()?;
    }
    let (modes, p) = match cfg.lyapunov {
        Lyapunov::Identity => (
            data.iter().map(|d| solve_mode_identity(d, cfg)).collect::<Result<Vec<_>>>()?,
            None,
        ),
        Lyapunov::Common => solve_common(&data, cfg)?,
    };
    Ok(SynthesisResult {
        status: overall(&modes),
        lyapunov: cfg.lyapunov,
        modes,
        p,
    })
}

/// Robust gain for an LTI system from raw data and its error budget.
pub fn synthesize_lti(dm: &DataMatrices, budget: &ErrorBudget, cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    synthesize_lti_with(dm, None, &ModeUncertainty::from_budget(budget), cfg)
}

/// LTI synthesis with `Q` taken from the row space of the pre-conditioned
/// data. `unc` describes the estimate made on that system.
pub fn synthesize_lti_with(dm: &DataMatrices, pc: Option<&Preconditioner>, unc: &ModeUncertainty, cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    let stacked = dm.stacked();
    let cols: Vec<usize> = (0..dm.len()).collect();
    let (basis, d_l) = admissible_basis(&stacked, &cols, pc)?;
    let mut unc = unc.clone();
    if unc.d_l.is_none() {
        unc.d_l = d_l;
    }
    run(
        vec![ModeData {
            u0: dm.u0.clone(),
            x0: dm.x0.clone(),
            x1: dm.x1.clone(),
            basis,
            unc,
        }],
        cfg,
    )
}

/// Per-mode robust gains from raw switched data.
pub fn synthesize_switched(dm: &DataMatrices, masked: &ModeMasked, budgets: &[ErrorBudget], cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    let unc: Vec<_> = budgets.iter().map(ModeUncertainty::from_budget).collect();
    synthesize_switched_with(dm, masked, None, &unc, cfg)
}

/// Switched synthesis with optional per-mode preconditioners.
pub fn synthesize_switched_with(
    dm: &DataMatrices,
    masked: &ModeMasked,
    pcs: Option<&[Preconditioner]>,
    unc: &[ModeUncertainty],
    cfg: &SynthesisConfig,
) -> Result<SynthesisResult> {
    let gamma = masked.gamma();
    if unc.len() != gamma || pcs.is_some_and(|p| p.len() != gamma) {
        return Err(Error::invalid(format!("expected {gamma} per-mode budgets/preconditioners")));
    }
    let mut data = Vec::with_capacity(gamma);
    for (i, mm) in masked.modes.iter().enumerate() {
        let pi = mode_projector(masked, i)?;
        let (basis, d_l) = admissible_basis(&mm.stacked(), &mm.columns, pcs.map(|p| &p[i]))?;
        let mut u = unc[i].clone();
        if u.d_l.is_none() {
            u.d_l = d_l;
        }
        data.push(ModeData {
            u0: mm.u0.clone(),
            x0: mm.x0.clone(),
            x1: &dm.x1 * pi,
            basis,
            unc: u,
        });
    }
    run(data, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub spectral_radii: Vec<f64>,
    pub spectral_norms: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub modes: Vec<usize>,
    pub converged: bool,
    /// First step with `||x(k)|| <= 1e-3 ||x(0)||`.
    pub settling_step: Option<usize>,
    pub diverged: bool,
}

/// Ground-truth check of `A_i + B_i K_i` and a simulation under uniformly
/// random switching (stream `(seed, ClosedLoopSwitching, k)`).
pub fn verify_closed_loop(model: &SwitchedModel, gains: &[Mat], x0: &DVector<f64>, steps: usize, seed: u64) -> Result<ClosedLoopReport> {
    let (n, m, gamma) = (model.n(), model.m(), model.gamma());
    if gains.len() != gamma || gains.iter().any(|k| k.shape() != (m, n)) || x0.len() != n {
        return Err(Error::invalid(format!(
            "closed-loop check needs {gamma} gains of shape {m}x{n} and a state of length {n}"
        )));
    }
    let closed: Vec<Mat> = model.modes.iter().zip(gains).map(|(md, k)| &md.a + &md.b * k).collect();
    let spectral_radii = closed.iter().map(spectral_radius).collect::<Result<Vec<_>>>()?;
    let spectral_norms = closed.iter().map(spectral).collect();
    let x0n = x0.norm();
    let mut states = vec![x0.clone()];
    let mut modes = Vec::with_capacity(steps);
    let mut settling_step = (x0n == 0.0).then_some(0);
    let mut diverged = false;
    for k in 0..steps {
        let s = stream(seed, Purpose::ClosedLoopSwitching, k as u64).gen_range(0..gamma);
        let next = &closed[s] * &states[k];
        modes.push(s);
        if next.iter().any(|v| !v.is_finite() || v.abs() > crate::plant::DIVERGENCE_LIMIT) {
            diverged = true;
            break;
        }
        if settling_step.is_none() && next.norm() <= 1e-3 * x0n {
            settling_step = Some(k + 1);
        }
        states.push(next);
    }
    let last = states.last().map_or(0.0, |x| x.norm());
    Ok(ClosedLoopReport {
        spectral_radii,
        spectral_norms,
        converged: !diverged && last <= 1e-3 * x0n,
        states,
        modes,
        settling_step,
        diverged,
    })
}
