//! Pseudo-inverse identification of LTI, switched and known-basis systems.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::datamat::{check_richness, DataMatrices, MaskedMode, ModeMasked};
use crate::error::{Error, Result};
use crate::numkernel::{condition_number, right_pseudo_inverse, Mat};
use crate::plant::{LtiModel, SwitchedModel};
use crate::precond::Preconditioner;

/// How an estimate was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IdPath {
    Raw,
    /// One preconditioner per mode, in mode order.
    Preconditioned { preconditioners: Vec<Preconditioner> },
}

/// Estimated `[B_i | A_i]` per mode (one block for an LTI system).
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiedModel {
    pub m: usize,
    pub n: usize,
    pub blocks: Vec<Mat>,
    /// Condition number of each mode's (masked) stacked data matrix as used
    /// by the estimator. For the preconditioned path this is the scaled one.
    pub condition_numbers: Vec<f64>,
    pub path: IdPath,
}

#[derive(Serialize, Deserialize)]
struct IdentifiedModelJson {
    mode_count: usize,
    m: usize,
    n: usize,
    blocks: Vec<Vec<f64>>,
    condition_numbers: Vec<f64>,
    path: IdPath,
}

pub(crate) fn row_major(m: &Mat) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl IdentifiedModel {
    pub fn mode_count(&self) -> usize {
        self.blocks.len()
    }

    /// `(B_i, A_i)`.
    pub fn split(&self, mode: usize) -> (Mat, Mat) {
        let blk = &self.blocks[mode];
        (blk.columns(0, self.m).into_owned(), blk.columns(self.m, self.n).into_owned())
    }

    pub fn to_switched(&self) -> Result<SwitchedModel> {
        let modes = self
            .blocks
            .iter()
            .map(|b| LtiModel::from_stacked(b, self.m))
            .collect::<Result<Vec<_>>>()?;
        SwitchedModel::new(modes)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(IdentifiedModelJson {
            mode_count: self.mode_count(),
            m: self.m,
            n: self.n,
            blocks: self.blocks.iter().map(row_major).collect(),
            condition_numbers: self.condition_numbers.clone(),
            path: self.path.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let raw: IdentifiedModelJson = serde_json::from_value(v.clone())?;
        if raw.blocks.len() != raw.mode_count {
            return Err(Error::invalid("mode_count does not match the number of blocks"));
        }
        let cols = raw.m + raw.n;
        let blocks = raw
            .blocks
            .iter()
            .map(|b| {
                if b.len() != raw.n * cols {
                    Err(Error::invalid(format!("block has {} entries, expected {}", b.len(), raw.n * cols)))
                } else {
                    Ok(Mat::from_row_slice(raw.n, cols, b))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IdentifiedModel {
            m: raw.m,
            n: raw.n,
            blocks,
            condition_numbers: raw.condition_numbers,
            path: raw.path,
        })
    }
}

fn richness_error(stacked: &Mat, what: &str) -> Error {
    let r = check_richness(stacked, stacked.nrows());
    Error::RankDeficient {
        context: format!("{what}; collect a longer trajectory or use richer inputs"),
        rank: r.numerical_rank,
        required: stacked.nrows(),
    }
}

/// `[B^e A^e] = X1 [U0; X0]^+`.
pub fn identify_lti(dm: &DataMatrices) -> Result<IdentifiedModel> {
    let stacked = dm.stacked();
    if !check_richness(&stacked, stacked.nrows()).satisfied {
        return Err(richness_error(&stacked, "[U0; X0]"));
    }
    let pinv = right_pseudo_inverse(&stacked)?;
    Ok(IdentifiedModel {
        m: dm.m(),
        n: dm.n(),
        blocks: vec![&dm.x1 * pinv],
        condition_numbers: vec![condition_number(&stacked)?],
        path: IdPath::Raw,
    })
}

/// Right inverse of a masked stacked matrix whose rows at the other modes'
/// columns are zero, so every other mode's masked matrix is annihilated.
/// `mode` is 0-based; errors name it 1-based.
pub fn structured_pseudo_inverse(masked: &MaskedMode, mode: usize) -> Result<Mat> {
    let sub = masked.stacked_nonzero();
    let rows = masked.u0.nrows() + masked.x0.nrows();
    if masked.columns.is_empty() || !check_richness(&sub, rows).satisfied {
        return Err(Error::ModeRichness { modes: vec![mode + 1] });
    }
    let pinv = right_pseudo_inverse(&sub)?;
    let mut out = Mat::zeros(masked.u0.ncols(), rows);
    for (r, &k) in masked.columns.iter().enumerate() {
        out.set_row(k, &pinv.row(r));
    }
    Ok(out)
}

/// Per-mode `[B_i A_i] = X1 [U_i0; X_i0]^+` with the structured inverse.
pub fn identify_switched(dm: &DataMatrices, masked: &ModeMasked) -> Result<IdentifiedModel> {
    let rows = dm.m() + dm.n();
    let failing: Vec<usize> = masked
        .modes
        .iter()
        .enumerate()
        .filter(|(_, mm)| mm.columns.is_empty() || !check_richness(&mm.stacked_nonzero(), rows).satisfied)
        .map(|(i, _)| i + 1)
        .collect();
    if !failing.is_empty() {
        return Err(Error::ModeRichness { modes: failing });
    }
    let mut blocks = Vec::with_capacity(masked.gamma());
    let mut kappas = Vec::with_capacity(masked.gamma());
    for (i, mm) in masked.modes.iter().enumerate() {
        let pinv = structured_pseudo_inverse(mm, i)?;
        blocks.push(&dm.x1 * pinv);
        kappas.push(condition_number(&mm.stacked_nonzero())?);
    }
    Ok(IdentifiedModel {
        m: dm.m(),
        n: dm.n(),
        blocks,
        condition_numbers: kappas,
        path: IdPath::Raw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisEstimate {
    pub a: Mat,
    pub basis: String,
    pub condition_number: f64,
}

/// `A = Y0 Phi0^+` where column `k` of `Phi0` is `phi(u(k))`.
pub fn identify_basis(us: &[DVector<f64>], ys: &[DVector<f64>], basis: &Basis) -> Result<BasisEstimate> {
    if us.is_empty() || us.len() != ys.len() {
        return Err(Error::invalid(format!(
            "need equally many inputs and outputs (got {} and {})",
            us.len(),
            ys.len()
        )));
    }
    let p = ys[0].len();
    if ys.iter().any(|y| y.len() != p) {
        return Err(Error::invalid("outputs have inconsistent lengths"));
    }
    let phis = us.iter().map(|u| basis.eval(u)).collect::<Result<Vec<_>>>()?;
    let phi0 = Mat::from_fn(basis.len(), us.len(), |i, k| phis[k][i]);
    let y0 = Mat::from_fn(p, ys.len(), |i, k| ys[k][i]);
    if !check_richness(&phi0, phi0.nrows()).satisfied {
        return Err(richness_error(&phi0, "basis data matrix Phi0"));
    }
    Ok(BasisEstimate {
        a: y0 * right_pseudo_inverse(&phi0)?,
        basis: basis.describe(),
        condition_number: condition_number(&phi0)?,
    })
}
