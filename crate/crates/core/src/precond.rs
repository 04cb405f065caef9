//! Pre-conditioning of stacked data matrices: Ruiz diagonal equilibration
//! and randomized column-subset selection, plus identification through the
//! pre-conditioned system.

use nalgebra::DVector;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::datamat::{check_richness, DataMatrices, ModeMasked};
use crate::error::{Error, Result};
use crate::identify::{IdPath, IdentifiedModel};
use crate::numkernel::{condition_number, ensure_finite, right_pseudo_inverse, Mat};
use crate::rng::{stream, Purpose};

pub const RUIZ_MAX_ITERS: usize = 100;
pub const RUIZ_TOL: f64 = 1e-3;
pub const COLUMN_TRIALS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibration {
    pub d_l: DVector<f64>,
    pub d_r: DVector<f64>,
    pub scaled: Mat,
    pub sweeps: usize,
    pub converged: bool,
}

fn row_max(m: &Mat, i: usize) -> f64 {
    m.row(i).iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

fn col_max(m: &Mat, j: usize) -> f64 {
    m.column(j).iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

fn equilibrated(m: &Mat, tol: f64) -> bool {
    let ok = |v: f64| (1.0 - tol..=1.0 + tol).contains(&v);
    (0..m.nrows()).all(|i| ok(row_max(m, i)))
        && (0..m.ncols()).all(|j| {
            let c = col_max(m, j);
            c == 0.0 || ok(c)
        })
}

/// Ruiz equilibration in the max-absolute norm. Each sweep takes the row and
/// column maxima of the current matrix and divides every row and every
/// nonzero column by the square root of its maximum. All-zero columns keep a
/// unit scale.
pub fn ruiz_equilibrate(m: &Mat, max_iters: usize, tol: f64) -> Result<Equilibration> {
    ensure_finite(m, "matrix to equilibrate")?;
    if let Some(i) = (0..m.nrows()).find(|&i| row_max(m, i) == 0.0) {
        return Err(Error::invalid(format!("row {} is all zero; cannot equilibrate", i + 1)));
    }
    let mut d_l = DVector::from_element(m.nrows(), 1.0);
    let mut d_r = DVector::from_element(m.ncols(), 1.0);
    let mut scaled = m.clone();
    let mut sweeps = 0;
    while sweeps < max_iters && !equilibrated(&scaled, tol) {
        let rs: Vec<f64> = (0..scaled.nrows()).map(|i| 1.0 / row_max(&scaled, i).sqrt()).collect();
        let cs: Vec<f64> = (0..scaled.ncols())
            .map(|j| {
                let c = col_max(&scaled, j);
                if c == 0.0 {
                    1.0
                } else {
                    1.0 / c.sqrt()
                }
            })
            .collect();
        for i in 0..scaled.nrows() {
            d_l[i] *= rs[i];
            for j in 0..scaled.ncols() {
                scaled[(i, j)] *= rs[i] * cs[j];
            }
        }
        for (j, c) in cs.iter().enumerate() {
            d_r[j] *= c;
        }
        sweeps += 1;
    }
    let converged = equilibrated(&scaled, tol);
    Ok(Equilibration {
        d_l,
        d_r,
        scaled,
        sweeps,
        converged,
    })
}

/// Outcome of a column-subset search. Indices are 0-based and ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSelection {
    pub indices: Vec<usize>,
    pub kappa_before: f64,
    pub kappa_after: f64,
    /// True when the full set was returned because no subset helped.
    pub fallback: bool,
    pub diagnostic: Option<String>,
}

/// Randomized search for a column subset with a smaller condition number.
///
/// Columns are standardized to unit norm before ranking candidates. Trial `t`
/// samples `min_cols + t mod (cols - min_cols)` columns uniformly without
/// replacement from stream `(seed, ColumnSelect, t)`; subsets that lose row
/// rank are discarded. The best standardized subset is kept only if its
/// condition number on the original matrix is below the full set's.
pub fn column_select(m: &Mat, min_cols: usize, trials: usize, seed: u64) -> Result<ColumnSelection> {
    let (rows, cols) = m.shape();
    if min_cols < rows {
        return Err(Error::invalid(format!(
            "min_cols = {min_cols} is below the row count {rows}; no subset could have full row rank"
        )));
    }
    let kappa_full = condition_number(m)?;
    let all: Vec<usize> = (0..cols).collect();
    let fallback = |diag: &str| ColumnSelection {
        indices: all.clone(),
        kappa_before: kappa_full,
        kappa_after: kappa_full,
        fallback: true,
        diagnostic: Some(diag.to_string()),
    };
    if min_cols >= cols {
        return Ok(fallback("no proper subset of the requested size exists"));
    }

    let mut standardized = m.clone();
    for j in 0..cols {
        let nrm = standardized.column(j).norm();
        if nrm > 0.0 {
            standardized.column_mut(j).unscale_mut(nrm);
        }
    }
    let span = cols - min_cols;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for t in 0..trials {
        let size = min_cols + t % span;
        let mut rng = stream(seed, Purpose::ColumnSelect, t as u64);
        let mut idx = sample(&mut rng, cols, size).into_vec();
        idx.sort_unstable();
        let sub = standardized.select_columns(&idx);
        if !check_richness(&sub, rows).satisfied {
            continue;
        }
        let k = condition_number(&sub)?;
        if best.as_ref().is_none_or(|(bk, _)| k < *bk) {
            best = Some((k, idx));
        }
    }
    let Some((_, idx)) = best else {
        return Ok(fallback("no full-row-rank subset found in any trial"));
    };
    let kappa_sub = condition_number(&m.select_columns(&idx))?;
    if kappa_sub < kappa_full {
        Ok(ColumnSelection {
            indices: idx,
            kappa_before: kappa_full,
            kappa_after: kappa_sub,
            fallback: false,
            diagnostic: None,
        })
    } else {
        Ok(fallback("no sampled subset improved the condition number"))
    }
}

/// Best-conditioned subset of exactly `size` columns over `trials` samples,
/// ranked on unit-norm columns. Unlike [`column_select`] the result may be
/// worse conditioned than the full set; it exists to shrink the data.
pub fn column_subset(m: &Mat, size: usize, trials: usize, seed: u64) -> Result<ColumnSelection> {
    let (rows, cols) = m.shape();
    if size < rows || size > cols {
        return Err(Error::invalid(format!(
            "subset size {size} must lie between the row count {rows} and the column count {cols}"
        )));
    }
    let kappa_full = condition_number(m)?;
    if size == cols {
        return Ok(ColumnSelection {
            indices: (0..cols).collect(),
            kappa_before: kappa_full,
            kappa_after: kappa_full,
            fallback: true,
            diagnostic: None,
        });
    }
    let mut standardized = m.clone();
    for j in 0..cols {
        let nrm = standardized.column(j).norm();
        if nrm > 0.0 {
            standardized.column_mut(j).unscale_mut(nrm);
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for t in 0..trials.max(1) {
        let mut rng = stream(seed, Purpose::ColumnSelect, t as u64);
        let mut idx = sample(&mut rng, cols, size).into_vec();
        idx.sort_unstable();
        let sub = standardized.select_columns(&idx);
        if !check_richness(&sub, rows).satisfied {
            continue;
        }
        let k = condition_number(&sub)?;
        if best.as_ref().is_none_or(|(bk, _)| k < *bk) {
            best = Some((k, idx));
        }
    }
    let (_, idx) = best.ok_or(Error::RankDeficient {
        context: format!("every sampled {size}-column subset"),
        rank: 0,
        required: rows,
    })?;
    Ok(ColumnSelection {
        kappa_after: condition_number(&m.select_columns(&idx))?,
        indices: idx,
        kappa_before: kappa_full,
        fallback: false,
        diagnostic: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrecondKind {
    /// Column indices into the full trajectory (0-based).
    ColumnSelection { indices: Vec<usize> },
    /// `D_L` has `m + n` entries, `D_R` one per trajectory column. When
    /// `columns` is set, only those columns of the scaled system are used.
    Diagonal {
        d_l: Vec<f64>,
        d_r: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        columns: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    #[serde(flatten)]
    pub kind: PrecondKind,
    pub kappa_before: f64,
    pub kappa_after: f64,
}

impl Preconditioner {
    /// Ruiz scaling of a (possibly masked) full-width stacked matrix.
    /// `cols` are its nonzero columns; condition numbers refer to them.
    pub fn diagonal(stacked: &Mat, cols: &[usize], max_iters: usize, tol: f64) -> Result<Self> {
        let eq = ruiz_equilibrate(stacked, max_iters, tol)?;
        let kappa_before = condition_number(&stacked.select_columns(cols))?;
        let kappa_after = condition_number(&eq.scaled.select_columns(cols))?;
        Ok(Preconditioner {
            kind: PrecondKind::Diagonal {
                d_l: eq.d_l.iter().copied().collect(),
                d_r: eq.d_r.iter().copied().collect(),
                columns: None,
            },
            kappa_before,
            kappa_after,
        })
    }

    /// Ruiz scaling followed by column selection on the scaled matrix. The
    /// subset is kept only if it lowers the scaled condition number.
    pub fn diagonal_then_columns(
        stacked: &Mat,
        cols: &[usize],
        max_iters: usize,
        tol: f64,
        min_cols: usize,
        trials: usize,
        seed: u64,
    ) -> Result<(Self, ColumnSelection)> {
        let eq = ruiz_equilibrate(stacked, max_iters, tol)?;
        let kappa_before = condition_number(&stacked.select_columns(cols))?;
        let sel = column_select(&eq.scaled.select_columns(cols), min_cols, trials, seed)?;
        let columns = (!sel.fallback).then(|| sel.indices.iter().map(|&i| cols[i]).collect());
        Ok((
            Preconditioner {
                kind: PrecondKind::Diagonal {
                    d_l: eq.d_l.iter().copied().collect(),
                    d_r: eq.d_r.iter().copied().collect(),
                    columns,
                },
                kappa_before,
                kappa_after: sel.kappa_after,
            },
            sel,
        ))
    }

    /// Column selection restricted to `cols` of a full-width stacked matrix.
    pub fn columns(stacked: &Mat, cols: &[usize], min_cols: usize, trials: usize, seed: u64) -> Result<(Self, ColumnSelection)> {
        let sel = column_select(&stacked.select_columns(cols), min_cols, trials, seed)?;
        let indices = sel.indices.iter().map(|&i| cols[i]).collect();
        Ok((
            Preconditioner {
                kind: PrecondKind::ColumnSelection { indices },
                kappa_before: sel.kappa_before,
                kappa_after: sel.kappa_after,
            },
            sel,
        ))
    }

    pub fn identity(stacked: &Mat) -> Result<Self> {
        let k = condition_number(stacked)?;
        Ok(Preconditioner {
            kind: PrecondKind::Diagonal {
                d_l: vec![1.0; stacked.nrows()],
                d_r: vec![1.0; stacked.ncols()],
                columns: None,
            },
            kappa_before: k,
            kappa_after: k,
        })
    }

    pub fn d_l(&self) -> Option<DVector<f64>> {
        match &self.kind {
            PrecondKind::Diagonal { d_l, .. } => Some(DVector::from_column_slice(d_l)),
            PrecondKind::ColumnSelection { .. } => None,
        }
    }
}

/// Data of the pre-conditioned system restricted to `cols`:
/// `(D_L [U0; X0] D_R, X1 D_R)` split back into `U0`, `X0`, `X1`.
/// Column selection keeps only the selected columns.
pub fn scaled_data(dm: &DataMatrices, cols: &[usize], pc: &Preconditioner) -> Result<DataMatrices> {
    match &pc.kind {
        PrecondKind::ColumnSelection { indices } => Ok(dm.select_columns(indices)),
        PrecondKind::Diagonal { d_l, d_r, columns } => {
            let cols = columns.as_deref().unwrap_or(cols);
            let (m, n) = (dm.m(), dm.n());
            if d_l.len() != m + n || d_r.len() != dm.len() {
                return Err(Error::invalid("preconditioner diagonals do not match the data dimensions"));
            }
            if d_l.iter().chain(d_r.iter()).any(|&d| !(d > 0.0) || !d.is_finite()) {
                return Err(Error::invalid("preconditioner diagonals must be positive and finite"));
            }
            if cols.iter().any(|&k| k >= dm.len()) {
                return Err(Error::invalid("preconditioner column index out of range"));
            }
            let sub = dm.select_columns(cols);
            let dr: Vec<f64> = cols.iter().map(|&k| d_r[k]).collect();
            let scale = |a: &Mat, row_off: Option<usize>| {
                Mat::from_fn(a.nrows(), a.ncols(), |i, j| {
                    let l = row_off.map_or(1.0, |o| d_l[o + i]);
                    a[(i, j)] * l * dr[j]
                })
            };
            DataMatrices::new(scale(&sub.u0, Some(0)), scale(&sub.x0, Some(m)), scale(&sub.x1, None), dm.source)
        }
    }
}

/// Estimate of one block from the columns `cols` through `pc`. Returns the
/// unscaled `[B^e A^e]` and the estimator's condition number.
fn estimate_block(dm: &DataMatrices, cols: &[usize], pc: &Preconditioner) -> Result<(Mat, f64)> {
    let sd = scaled_data(dm, cols, pc)?;
    let stacked = sd.stacked();
    if !check_richness(&stacked, stacked.nrows()).satisfied {
        let r = check_richness(&stacked, stacked.nrows());
        return Err(Error::RankDeficient {
            context: "pre-conditioned [U0; X0]".into(),
            rank: r.numerical_rank,
            required: stacked.nrows(),
        });
    }
    let est_hat = &sd.x1 * right_pseudo_inverse(&stacked)?;
    let kappa = condition_number(&stacked)?;
    let est = match pc.d_l() {
        Some(d_l) => est_hat * Mat::from_diagonal(&d_l),
        None => est_hat,
    };
    Ok((est, kappa))
}

/// LTI identification through the pre-conditioned system.
pub fn rescaled_identify(dm: &DataMatrices, pc: &Preconditioner) -> Result<IdentifiedModel> {
    let cols: Vec<usize> = (0..dm.len()).collect();
    let (est, kappa) = estimate_block(dm, &cols, pc)?;
    Ok(IdentifiedModel {
        m: dm.m(),
        n: dm.n(),
        blocks: vec![est],
        condition_numbers: vec![kappa],
        path: IdPath::Preconditioned {
            preconditioners: vec![pc.clone()],
        },
    })
}

/// Switched identification with one preconditioner per mode, each built on
/// that mode's masked stacked matrix.
pub fn rescaled_identify_switched(dm: &DataMatrices, masked: &ModeMasked, pcs: &[Preconditioner]) -> Result<IdentifiedModel> {
    if pcs.len() != masked.gamma() {
        return Err(Error::invalid(format!(
            "{} preconditioners supplied for {} modes",
            pcs.len(),
            masked.gamma()
        )));
    }
    let mut blocks = Vec::with_capacity(pcs.len());
    let mut kappas = Vec::with_capacity(pcs.len());
    let mut failing = Vec::new();
    for (i, (mm, pc)) in masked.modes.iter().zip(pcs).enumerate() {
        match estimate_block(dm, &mm.columns, pc) {
            Ok((b, k)) => {
                blocks.push(b);
                kappas.push(k);
            }
            Err(Error::RankDeficient { .. }) => failing.push(i + 1),
            Err(e) => return Err(e),
        }
    }
    if !failing.is_empty() {
        return Err(Error::ModeRichness { modes: failing });
    }
    Ok(IdentifiedModel {
        m: dm.m(),
        n: dm.n(),
        blocks,
        condition_numbers: kappas,
        path: IdPath::Preconditioned {
            preconditioners: pcs.to_vec(),
        },
    })
}
