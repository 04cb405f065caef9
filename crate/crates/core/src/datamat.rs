//! Data matrices `U0`, `X0`, `X1` and their per-mode masked variants.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{rank_tolerance, singular_values, Mat};
use crate::plant::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSource {
    Measured,
    GroundTruth,
}

/// `U0 = [u(0)..u(T-1)]`, `X0 = [x(0)..x(T-1)]`, `X1 = [x(1)..x(T)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub u0: Mat,
    pub x0: Mat,
    pub x1: Mat,
    pub source: StateSource,
}

impl DataMatrices {
    pub fn new(u0: Mat, x0: Mat, x1: Mat, source: StateSource) -> Result<Self> {
        let t = u0.ncols();
        if t == 0 || x0.ncols() != t || x1.ncols() != t {
            return Err(Error::invalid(format!(
                "data matrices need equal, positive column counts (U0 {}, X0 {}, X1 {})",
                u0.ncols(),
                x0.ncols(),
                x1.ncols()
            )));
        }
        if x0.nrows() != x1.nrows() {
            return Err(Error::invalid("X0 and X1 must have the same number of rows"));
        }
        Ok(DataMatrices { u0, x0, x1, source })
    }

    pub fn n(&self) -> usize {
        self.x0.nrows()
    }

    pub fn m(&self) -> usize {
        self.u0.nrows()
    }

    pub fn len(&self) -> usize {
        self.u0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.u0.ncols() == 0
    }

    /// `[U0; X0]`.
    pub fn stacked(&self) -> Mat {
        stack_rows(&self.u0, &self.x0)
    }

    /// Horizontal concatenation. Each transition `(x(k), u(k), x(k+1))` stays
    /// inside one column, so episodes can be joined without straddling resets.
    pub fn concat(parts: &[DataMatrices]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        if parts
            .iter()
            .any(|p| p.n() != first.n() || p.m() != first.m() || p.source != first.source)
        {
            return Err(Error::invalid("cannot concatenate data matrices of different shape or source"));
        }
        let total: usize = parts.iter().map(DataMatrices::len).sum();
        let mut out = DataMatrices {
            u0: Mat::zeros(first.m(), total),
            x0: Mat::zeros(first.n(), total),
            x1: Mat::zeros(first.n(), total),
            source: first.source,
        };
        let mut c = 0;
        for p in parts {
            let t = p.len();
            out.u0.columns_mut(c, t).copy_from(&p.u0);
            out.x0.columns_mut(c, t).copy_from(&p.x0);
            out.x1.columns_mut(c, t).copy_from(&p.x1);
            c += t;
        }
        Ok(out)
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> DataMatrices {
        DataMatrices {
            u0: self.u0.select_columns(cols),
            x0: self.x0.select_columns(cols),
            x1: self.x1.select_columns(cols),
            source: self.source,
        }
    }
}

pub(crate) fn stack_rows(top: &Mat, bottom: &Mat) -> Mat {
    let mut out = Mat::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

fn columns_of(vs: &[DVector<f64>], rows: usize) -> Mat {
    Mat::from_fn(rows, vs.len(), |i, j| vs[j][i])
}

pub fn build_data_matrices(traj: &Trajectory, source: StateSource) -> Result<DataMatrices> {
    traj.validate(None)?;
    let t = traj.len();
    if t == 0 {
        return Err(Error::invalid("trajectory has no transitions (T = 0)"));
    }
    let states = match source {
        StateSource::Measured => &traj.states_measured,
        StateSource::GroundTruth => traj
            .states_true
            .as_ref()
            .ok_or_else(|| Error::invalid("ground-truth states requested but the trajectory has none"))?,
    };
    let n = traj.n();
    DataMatrices::new(
        columns_of(&traj.inputs, traj.m()),
        columns_of(&states[..t], n),
        columns_of(&states[1..], n),
        source,
    )
}

/// Builds one block per episode and concatenates them. Also returns the
/// concatenated mode sequence.
pub fn build_from_episodes(episodes: &[Trajectory], source: StateSource) -> Result<(DataMatrices, Vec<usize>)> {
    let parts = episodes
        .iter()
        .map(|e| build_data_matrices(e, source))
        .collect::<Result<Vec<_>>>()?;
    let modes = episodes.iter().flat_map(|e| e.modes.iter().copied()).collect();
    Ok((DataMatrices::concat(&parts)?, modes))
}

/// One mode's masked matrices: column `k` is kept when `sigma(k) = i` and
/// zeroed otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMode {
    pub u0: Mat,
    pub x0: Mat,
    /// Columns `k` with `sigma(k) = i`, ascending.
    pub columns: Vec<usize>,
}

impl MaskedMode {
    /// `[U_i0; X_i0]`, full width `T`.
    pub fn stacked(&self) -> Mat {
        stack_rows(&self.u0, &self.x0)
    }

    /// The nonzero-column submatrix of `[U_i0; X_i0]`.
    pub fn stacked_nonzero(&self) -> Mat {
        self.stacked().select_columns(&self.columns)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeMasked {
    pub modes: Vec<MaskedMode>,
}

impl ModeMasked {
    pub fn gamma(&self) -> usize {
        self.modes.len()
    }
}

pub fn build_mode_masked(dm: &DataMatrices, modes: &[usize], gamma: usize) -> Result<ModeMasked> {
    if modes.len() != dm.len() {
        return Err(Error::invalid(format!(
            "mode sequence has {} entries, data has {} columns",
            modes.len(),
            dm.len()
        )));
    }
    if gamma == 0 {
        return Err(Error::invalid("mode count must be positive"));
    }
    if let Some(k) = modes.iter().position(|&s| s >= gamma) {
        return Err(Error::invalid(format!(
            "mode {} at column {k} outside [1, {gamma}]",
            modes[k] + 1
        )));
    }
    let masked = (0..gamma)
        .map(|i| {
            let columns: Vec<usize> = (0..dm.len()).filter(|&k| modes[k] == i).collect();
            let mut u0 = Mat::zeros(dm.m(), dm.len());
            let mut x0 = Mat::zeros(dm.n(), dm.len());
            for &k in &columns {
                u0.set_column(k, &dm.u0.column(k));
                x0.set_column(k, &dm.x0.column(k));
            }
            MaskedMode { u0, x0, columns }
        })
        .collect();
    Ok(ModeMasked { modes: masked })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Richness {
    pub satisfied: bool,
    pub numerical_rank: usize,
    /// Smallest singular value above the rank tolerance (0 when rank is 0).
    pub smallest_kept_singular_value: f64,
}

/// Rank test of a stacked data matrix against `required_rank` (`m + n`).
pub fn check_richness(stacked: &Mat, required_rank: usize) -> Richness {
    let sv = singular_values(stacked);
    if sv.is_empty() || !(sv[0] > 0.0) || stacked.iter().any(|v| !v.is_finite()) {
        return Richness {
            satisfied: required_rank == 0,
            numerical_rank: 0,
            smallest_kept_singular_value: 0.0,
        };
    }
    let tol = rank_tolerance(stacked.nrows(), stacked.ncols(), sv[0]);
    let kept: Vec<f64> = sv.iter().copied().filter(|&s| s > tol).collect();
    Richness {
        satisfied: kept.len() >= required_rank,
        numerical_rank: kept.len(),
        smallest_kept_singular_value: kept.last().copied().unwrap_or(0.0),
    }
}
