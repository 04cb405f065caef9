//! Small semidefinite feasibility engine.
//!
//! Problems are built from named matrix variables, affine matrix expressions
//! `C + sum_k s_k L_k op(X_k) R_k`, affine equalities and symmetric block PSD
//! constraints. Equalities are eliminated exactly (reduced row echelon form),
//! then a primal log-barrier path-following method maximizes the smallest
//! eigenvalue margin `t` of the blocks over the remaining free parameters.
//!
//! [`verify`] re-evaluates a candidate assignment straight from the
//! expressions with dense matrix products; it does not touch the compiled
//! coefficient tables the solver uses.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{Cholesky, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{min_eig_unchecked, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
struct VarInfo {
    name: String,
    rows: usize,
    cols: usize,
    symmetric: bool,
    offset: usize,
}

impl VarInfo {
    fn params(&self) -> usize {
        if self.symmetric {
            self.rows * (self.rows + 1) / 2
        } else {
            self.rows * self.cols
        }
    }

    /// Entry positions `(a, b)` set by parameter `p` (two for off-diagonal
    /// symmetric parameters).
    fn positions(&self, p: usize) -> ([(usize, usize); 2], usize) {
        if self.symmetric {
            let (a, b) = upper_index(p, self.rows);
            if a == b {
                ([(a, a), (a, a)], 1)
            } else {
                ([(a, b), (b, a)], 2)
            }
        } else {
            ([(p % self.rows, p / self.rows), (0, 0)], 1)
        }
    }
}

/// Parameter `p` of an `n x n` symmetric variable, upper triangle column by
/// column: (0,0), (0,1), (1,1), (0,2), ...
fn upper_index(p: usize, _n: usize) -> (usize, usize) {
    let mut b = 0;
    while (b + 1) * (b + 2) / 2 <= p {
        b += 1;
    }
    (p - b * (b + 1) / 2, b)
}

#[derive(Debug, Clone)]
struct Term {
    scale: f64,
    left: Option<Mat>,
    var: VarId,
    transposed: bool,
    right: Option<Mat>,
}

/// Affine matrix expression in the problem variables.
#[derive(Debug, Clone)]
pub struct AffineExpr {
    rows: usize,
    cols: usize,
    constant: Mat,
    terms: Vec<Term>,
}

impl AffineExpr {
    pub fn constant(c: Mat) -> Self {
        AffineExpr {
            rows: c.nrows(),
            cols: c.ncols(),
            constant: c,
            terms: Vec::new(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Mat::zeros(rows, cols))
    }

    pub fn identity(n: usize, scale: f64) -> Self {
        Self::constant(Mat::identity(n, n) * scale)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// `L * self`.
    pub fn lmul(mut self, l: &Mat) -> Result<Self> {
        if l.ncols() != self.rows {
            return Err(Error::MalformedProblem(format!(
                "left factor is {}x{} but the expression has {} rows",
                l.nrows(),
                l.ncols(),
                self.rows
            )));
        }
        self.constant = l * &self.constant;
        for t in &mut self.terms {
            t.left = Some(match &t.left {
                Some(x) => l * x,
                None => l.clone(),
            });
        }
        self.rows = l.nrows();
        Ok(self)
    }

    /// `self * R`.
    pub fn rmul(mut self, r: &Mat) -> Result<Self> {
        if r.nrows() != self.cols {
            return Err(Error::MalformedProblem(format!(
                "right factor is {}x{} but the expression has {} columns",
                r.nrows(),
                r.ncols(),
                self.cols
            )));
        }
        self.constant = &self.constant * r;
        for t in &mut self.terms {
            t.right = Some(match &t.right {
                Some(x) => x * r,
                None => r.clone(),
            });
        }
        self.cols = r.ncols();
        Ok(self)
    }

    pub fn transpose(mut self) -> Self {
        self.constant = self.constant.transpose();
        for t in &mut self.terms {
            let l = t.left.take().map(|m| m.transpose());
            let r = t.right.take().map(|m| m.transpose());
            t.left = r;
            t.right = l;
            t.transposed = !t.transposed;
        }
        std::mem::swap(&mut self.rows, &mut self.cols);
        self
    }

    pub fn scale(mut self, s: f64) -> Self {
        self.constant *= s;
        for t in &mut self.terms {
            t.scale *= s;
        }
        self
    }

    pub fn add(mut self, other: AffineExpr) -> Result<Self> {
        if other.shape() != self.shape() {
            return Err(Error::MalformedProblem(format!(
                "cannot add {}x{} and {}x{} expressions",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        self.constant += other.constant;
        self.terms.extend(other.terms);
        Ok(self)
    }

    pub fn sub(self, other: AffineExpr) -> Result<Self> {
        self.add(other.scale(-1.0))
    }

    pub fn add_constant(self, c: &Mat) -> Result<Self> {
        self.add(AffineExpr::constant(c.clone()))
    }

    /// Direct evaluation at the given variable values.
    pub fn eval(&self, values: &[Mat]) -> Mat {
        let mut out = self.constant.clone();
        for t in &self.terms {
            let x = &values[t.var.0];
            let mut v = if t.transposed { x.transpose() } else { x.clone() };
            if let Some(l) = &t.left {
                v = l * v;
            }
            if let Some(r) = &t.right {
                v *= r;
            }
            out += v * t.scale;
        }
        out
    }
}

#[derive(Debug, Clone)]
struct PsdBlock {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    dim: usize,
    /// Upper cells `(i, j)` with `i <= j`.
    cells: Vec<(usize, usize, AffineExpr)>,
}

impl PsdBlock {
    fn eval(&self, values: &[Mat]) -> Mat {
        let mut s = Mat::zeros(self.dim, self.dim);
        for (i, j, e) in &self.cells {
            let v = e.eval(values);
            let (ro, co) = (self.offsets[*i], self.offsets[*j]);
            if i == j {
                let sym = (&v + v.transpose()) * 0.5;
                let mut view = s.view_mut((ro, co), (v.nrows(), v.ncols()));
                view += sym;
            } else {
                let mut view = s.view_mut((ro, co), (v.nrows(), v.ncols()));
                view += &v;
                let mut view = s.view_mut((co, ro), (v.ncols(), v.nrows()));
                view += v.transpose();
            }
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct SdpProblem {
    vars: Vec<VarInfo>,
    n_params: usize,
    equalities: Vec<AffineExpr>,
    blocks: Vec<PsdBlock>,
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_var(&mut self, name: &str, rows: usize, cols: usize, symmetric: bool) -> Result<VarId> {
        if rows == 0 || cols == 0 {
            return Err(Error::MalformedProblem(format!("variable '{name}' has an empty shape")));
        }
        if self.vars.iter().any(|v| v.name == name) {
            return Err(Error::MalformedProblem(format!("variable '{name}' declared twice")));
        }
        let info = VarInfo {
            name: name.to_string(),
            rows,
            cols,
            symmetric,
            offset: self.n_params,
        };
        self.n_params += info.params();
        self.vars.push(info);
        Ok(VarId(self.vars.len() - 1))
    }

    pub fn add_var(&mut self, name: &str, rows: usize, cols: usize) -> Result<VarId> {
        self.push_var(name, rows, cols, false)
    }

    pub fn add_sym_var(&mut self, name: &str, n: usize) -> Result<VarId> {
        self.push_var(name, n, n, true)
    }

    pub fn var(&self, id: VarId) -> AffineExpr {
        let v = &self.vars[id.0];
        AffineExpr {
            rows: v.rows,
            cols: v.cols,
            constant: Mat::zeros(v.rows, v.cols),
            terms: vec![Term {
                scale: 1.0,
                left: None,
                var: id,
                transposed: false,
                right: None,
            }],
        }
    }

    pub fn var_by_name(&self, name: &str) -> Option<VarId> {
        self.vars.iter().position(|v| v.name == name).map(VarId)
    }

    pub fn var_count(&self) -> usize {
        self.vars.len()
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    fn check_expr(&self, e: &AffineExpr) -> Result<()> {
        for t in &e.terms {
            let v = self.vars.get(t.var.0).ok_or_else(|| {
                Error::MalformedProblem("expression references an undeclared variable".into())
            })?;
            let (r, c) = if t.transposed { (v.cols, v.rows) } else { (v.rows, v.cols) };
            let rows = t.left.as_ref().map_or(r, |l| l.nrows());
            let cols = t.right.as_ref().map_or(c, |m| m.ncols());
            let inner_ok = t.left.as_ref().is_none_or(|l| l.ncols() == r)
                && t.right.as_ref().is_none_or(|m| m.nrows() == c);
            if !inner_ok || rows != e.rows || cols != e.cols {
                return Err(Error::MalformedProblem(format!(
                    "term in variable '{}' does not match the expression shape {}x{}",
                    v.name, e.rows, e.cols
                )));
            }
        }
        if e.constant.iter().any(|x| !x.is_finite()) || e.terms.iter().any(|t| !t.scale.is_finite()) {
            return Err(Error::MalformedProblem("expression has non-finite coefficients".into()));
        }
        Ok(())
    }

    /// `lhs = rhs`.
    pub fn add_equality(&mut self, lhs: AffineExpr, rhs: &Mat) -> Result<()> {
        if lhs.shape() != rhs.shape() {
            return Err(Error::MalformedProblem(format!(
                "equality sides differ in shape: {:?} vs {:?}",
                lhs.shape(),
                rhs.shape()
            )));
        }
        let e = lhs.sub(AffineExpr::constant(rhs.clone()))?;
        self.check_expr(&e)?;
        self.equalities.push(e);
        Ok(())
    }

    /// Block matrix `S` with diagonal block sizes `sizes`, required PSD.
    /// Cells are given for `i <= j`; a cell `(i, j)` with `i > j` is stored
    /// transposed at `(j, i)`. Lower cells are the transposes of the upper
    /// ones and diagonal cells are symmetrized. Missing cells are zero.
    pub fn add_psd(&mut self, sizes: &[usize], cells: Vec<((usize, usize), AffineExpr)>) -> Result<()> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::MalformedProblem("PSD block needs positive block sizes".into()));
        }
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &s in sizes {
            offsets.push(acc);
            acc += s;
        }
        let mut stored = Vec::with_capacity(cells.len());
        for ((i, j), e) in cells {
            let (i, j, e) = if i > j { (j, i, e.transpose()) } else { (i, j, e) };
            if j >= sizes.len() {
                return Err(Error::MalformedProblem(format!("cell ({i}, {j}) outside a {}-block grid", sizes.len())));
            }
            if e.shape() != (sizes[i], sizes[j]) {
                return Err(Error::MalformedProblem(format!(
                    "cell ({i}, {j}) is {}x{}, expected {}x{}",
                    e.rows, e.cols, sizes[i], sizes[j]
                )));
            }
            self.check_expr(&e)?;
            stored.push((i, j, e));
        }
        self.blocks.push(PsdBlock {
            sizes: sizes.to_vec(),
            offsets,
            dim: acc,
            cells: stored,
        });
        Ok(())
    }

    /// Plain-text listing for debugging: variables, equalities and the block
    /// expression trees. Not a stable format.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variables ({} parameters)", self.n_params);
        for v in &self.vars {
            let _ = writeln!(
                s,
                "  {} {}x{}{} @{}",
                v.name,
                v.rows,
                v.cols,
                if v.symmetric { " sym" } else { "" },
                v.offset
            );
        }
        let term_str = |e: &AffineExpr| -> String {
            let mut parts = vec![format!("C[{}x{}, |C|={:.3e}]", e.rows, e.cols, e.constant.norm())];
            for t in &e.terms {
                parts.push(format!(
                    "{:+}*{}{}{}{}",
                    t.scale,
                    t.left.as_ref().map_or(String::new(), |l| format!("L[{}x{}]*", l.nrows(), l.ncols())),
                    self.vars[t.var.0].name,
                    if t.transposed { "'" } else { "" },
                    t.right.as_ref().map_or(String::new(), |r| format!("*R[{}x{}]", r.nrows(), r.ncols()))
                ));
            }
            parts.join(" ")
        };
        let _ = writeln!(s, "equalities ({})", self.equalities.len());
        for (k, e) in self.equalities.iter().enumerate() {
            let _ = writeln!(s, "  eq{k}: {} = 0", term_str(e));
        }
        let _ = writeln!(s, "psd blocks ({})", self.blocks.len());
        for (k, b) in self.blocks.iter().enumerate() {
            let _ = writeln!(s, "  block{k} sizes {:?}", b.sizes);
            for (i, j, e) in &b.cells {
                let _ = writeln!(s, "    ({i},{j}): {}", term_str(e));
            }
        }
        s
    }

    /// Builds variable matrices from a flat parameter vector.
    fn unpack(&self, x: &DVector<f64>) -> Vec<Mat> {
        self.vars
            .iter()
            .map(|v| {
                let mut m = Mat::zeros(v.rows, v.cols);
                for p in 0..v.params() {
                    let (pos, cnt) = v.positions(p);
                    for &(a, b) in &pos[..cnt] {
                        m[(a, b)] = x[v.offset + p];
                    }
                }
                m
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Stop at the first strictly feasible point.
    Feasibility,
    /// Push the smallest block eigenvalue up to `margin_cap`.
    MaxMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub eq_tol: f64,
    pub psd_tol: f64,
    pub objective: Objective,
    pub margin_cap: f64,
    pub max_newton: usize,
    pub gap_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            eq_tol: 1e-6,
            psd_tol: 1e-7,
            objective: Objective::Feasibility,
            margin_cap: 1.0,
            max_newton: 400,
            gap_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Feasible,
    Infeasible,
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// One matrix per variable, in declaration order.
    pub assignment: Vec<Mat>,
    /// Largest absolute equality residual.
    pub eq_residual: f64,
    /// Smallest eigenvalue over all PSD blocks (`+inf` without blocks).
    pub psd_margin: f64,
    pub newton_steps: usize,
}

impl SdpSolution {
    pub fn value(&self, id: VarId) -> &Mat {
        &self.assignment[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub eq_residual: f64,
    pub psd_margin: f64,
}

impl Verification {
    pub fn passes(&self, eq_tol: f64, psd_tol: f64) -> bool {
        self.eq_residual <= eq_tol && self.psd_margin >= -psd_tol
    }
}

/// Evaluates every constraint of `p` at `values` from the expressions alone.
pub fn verify(p: &SdpProblem, values: &[Mat]) -> Result<Verification> {
    if values.len() != p.vars.len()
        || values.iter().zip(&p.vars).any(|(m, v)| m.shape() != (v.rows, v.cols))
    {
        return Err(Error::MalformedProblem("assignment does not match the declared variables".into()));
    }
    let eq_residual = p
        .equalities
        .iter()
        .map(|e| e.eval(values).amax())
        .fold(0.0_f64, f64::max);
    let psd_margin = p
        .blocks
        .iter()
        .map(|b| min_eig_unchecked(&b.eval(values)))
        .fold(f64::INFINITY, f64::min);
    Ok(Verification { eq_residual, psd_margin })
}

// ---------------------------------------------------------------------------
// compilation

/// `M` contributed by parameter `p` of `var` to term `t`: `scale * L E R`,
/// written into `sink(i, j, value)`.
fn term_param_contribution(t: &Term, var: &VarInfo, p: usize, mut sink: impl FnMut(usize, usize, f64)) {
    let (pos, cnt) = var.positions(p);
    for &(a, b) in &pos[..cnt] {
        let (a, b) = if t.transposed { (b, a) } else { (a, b) };
        // L[:, a] * R[b, :]
        let lrows = t.left.as_ref().map_or(1, |l| l.nrows());
        let rcols = t.right.as_ref().map_or(1, |r| r.ncols());
        for j in 0..rcols {
            let (jj, rv) = match &t.right {
                Some(r) => (j, r[(b, j)]),
                None => (b, 1.0),
            };
            if rv == 0.0 {
                continue;
            }
            for i in 0..lrows {
                let (ii, lv) = match &t.left {
                    Some(l) => (i, l[(i, a)]),
                    None => (a, 1.0),
                };
                if lv != 0.0 {
                    sink(ii, jj, t.scale * lv * rv);
                }
            }
        }
    }
}

struct CompiledBlock {
    dim: usize,
    /// Global parameter index per coefficient column.
    support: Vec<usize>,
    /// `dim^2 x |support|`, column-major vec of each coefficient matrix.
    coef: Mat,
    constant: Mat,
}

fn compile_block(p: &SdpProblem, b: &PsdBlock) -> CompiledBlock {
    let dim = b.dim;
    let mut col_of: HashMap<usize, usize> = HashMap::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut support = Vec::new();
    let mut constant = Mat::zeros(dim, dim);
    for (i, j, e) in &b.cells {
        let (ro, co) = (b.offsets[*i], b.offsets[*j]);
        let diag = i == j;
        for r in 0..e.rows {
            for c in 0..e.cols {
                let v = e.constant[(r, c)];
                if diag {
                    constant[(ro + r, co + c)] += 0.5 * v;
                    constant[(co + c, ro + r)] += 0.5 * v;
                } else {
                    constant[(ro + r, co + c)] += v;
                    constant[(co + c, ro + r)] += v;
                }
            }
        }
        for t in &e.terms {
            let var = &p.vars[t.var.0];
            for q in 0..var.params() {
                let g = var.offset + q;
                let col = *col_of.entry(g).or_insert_with(|| {
                    cols.push(vec![0.0; dim * dim]);
                    support.push(g);
                    cols.len() - 1
                });
                let target = &mut cols[col];
                term_param_contribution(t, var, q, |r, c, v| {
                    let (a, bb) = (ro + r, co + c);
                    if diag {
                        target[a + bb * dim] += 0.5 * v;
                        target[bb + a * dim] += 0.5 * v;
                    } else {
                        target[a + bb * dim] += v;
                        target[bb + a * dim] += v;
                    }
                });
            }
        }
    }
    let coef = Mat::from_fn(dim * dim, cols.len(), |r, c| cols[c][r]);
    CompiledBlock {
        dim,
        support,
        coef,
        constant,
    }
}

/// Dense equality system `A x = b`.
fn compile_equalities(p: &SdpProblem) -> (Mat, DVector<f64>) {
    let rows: usize = p.equalities.iter().map(|e| e.rows * e.cols).sum();
    let mut a = Mat::zeros(rows, p.n_params);
    let mut b = DVector::zeros(rows);
    let mut base = 0;
    for e in &p.equalities {
        for c in 0..e.cols {
            for r in 0..e.rows {
                b[base + r + c * e.rows] = -e.constant[(r, c)];
            }
        }
        for t in &e.terms {
            let var = &p.vars[t.var.0];
            for q in 0..var.params() {
                let g = var.offset + q;
                term_param_contribution(t, var, q, |r, c, v| {
                    a[(base + r + c * e.rows, g)] += v;
                });
            }
        }
        base += e.rows * e.cols;
    }
    (a, b)
}

/// Affine parameterization `x = x_p + Z z` of `{x : A x = b}`. `Z` is kept
/// column-sparse: one `(param, value)` list per free parameter.
struct EqSolution {
    xp: DVector<f64>,
    z_cols: Vec<Vec<(usize, f64)>>,
}

/// Reduced row echelon form with complete pivoting. Returns the residual of
/// the inconsistent rows when the system has no solution within `eq_tol`.
fn solve_equalities(a: &Mat, b: &DVector<f64>, eq_tol: f64) -> std::result::Result<EqSolution, f64> {
    let (r, c) = a.shape();
    let mut m = a.clone();
    let mut rhs = b.clone();
    let mut perm: Vec<usize> = (0..c).collect();
    let scale = m.amax();
    let piv_tol = 1e-12 * scale.max(1e-300) * (r.max(c) as f64);
    let mut rank = 0;
    while rank < r.min(c) {
        let mut best = (0.0, rank, rank);
        for j in rank..c {
            for i in rank..r {
                let v = m[(i, j)].abs();
                if v > best.0 {
                    best = (v, i, j);
                }
            }
        }
        if best.0 <= piv_tol {
            break;
        }
        let (_, pi, pj) = best;
        m.swap_rows(rank, pi);
        rhs.swap_rows(rank, pi);
        m.swap_columns(rank, pj);
        perm.swap(rank, pj);
        let piv = m[(rank, rank)];
        for j in rank..c {
            m[(rank, j)] /= piv;
        }
        rhs[rank] /= piv;
        for i in 0..r {
            if i == rank {
                continue;
            }
            let f = m[(i, rank)];
            if f == 0.0 {
                continue;
            }
            for j in rank..c {
                let v = m[(rank, j)];
                if v != 0.0 {
                    m[(i, j)] -= f * v;
                }
            }
            rhs[i] -= f * rhs[rank];
        }
        rank += 1;
    }
    let inconsistency = (rank..r).map(|i| rhs[i].abs()).fold(0.0_f64, f64::max);
    if inconsistency > eq_tol {
        return Err(inconsistency);
    }
    let mut xp = DVector::zeros(c);
    for i in 0..rank {
        xp[perm[i]] = rhs[i];
    }
    let z_cols = (rank..c)
        .map(|f| {
            let mut col = vec![(perm[f], 1.0)];
            for i in 0..rank {
                let v = m[(i, f)];
                if v != 0.0 {
                    col.push((perm[i], -v));
                }
            }
            col
        })
        .collect();
    Ok(EqSolution { xp, z_cols })
}

/// Block in the reduced coordinates `z`.
struct ReducedBlock {
    dim: usize,
    vars: Vec<usize>,
    g: Mat,
    s0: Mat,
}

impl ReducedBlock {
    fn eval(&self, z: &[f64], t: f64) -> Mat {
        let zs = DVector::from_iterator(self.vars.len(), self.vars.iter().map(|&v| z[v]));
        let lin = &self.g * zs;
        let mut s = &self.s0 + Mat::from_column_slice(self.dim, self.dim, lin.as_slice());
        for i in 0..self.dim {
            s[(i, i)] -= t;
        }
        s
    }
}

fn reduce(blocks: &[CompiledBlock], eq: &EqSolution, n_params: usize) -> (Vec<ReducedBlock>, Vec<usize>) {
    // which free parameters touch which global parameter
    let mut by_param: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_params];
    for (f, col) in eq.z_cols.iter().enumerate() {
        for &(g, v) in col {
            by_param[g].push((f, v));
        }
    }
    let mut raw = Vec::with_capacity(blocks.len());
    let mut used = vec![false; eq.z_cols.len()];
    for b in blocks {
        let d2 = b.dim * b.dim;
        let mut s0 = b.constant.clone();
        let mut cols: HashMap<usize, DVector<f64>> = HashMap::new();
        for (k, &g) in b.support.iter().enumerate() {
            let c = b.coef.column(k);
            if eq.xp[g] != 0.0 {
                let add = Mat::from_column_slice(b.dim, b.dim, (c * eq.xp[g]).as_slice());
                s0 += add;
            }
            for &(f, v) in &by_param[g] {
                cols.entry(f).or_insert_with(|| DVector::zeros(d2)).axpy(v, &c, 1.0);
            }
        }
        let mut vars: Vec<usize> = cols
            .iter()
            .filter(|(_, c)| c.amax() > 0.0)
            .map(|(&f, _)| f)
            .collect();
        vars.sort_unstable();
        for &f in &vars {
            used[f] = true;
        }
        let g = Mat::from_fn(d2, vars.len(), |r, c| cols[&vars[c]][r]);
        raw.push(ReducedBlock {
            dim: b.dim,
            vars,
            g,
            s0: (&s0 + s0.transpose()) * 0.5,
        });
    }
    // compact the free parameters to the ones that appear in some block
    let active: Vec<usize> = (0..used.len()).filter(|&f| used[f]).collect();
    let mut index = vec![usize::MAX; used.len()];
    for (k, &f) in active.iter().enumerate() {
        index[f] = k;
    }
    for b in &mut raw {
        for v in &mut b.vars {
            *v = index[*v];
        }
    }
    (raw, active)
}

// ---------------------------------------------------------------------------
// barrier method

const BALL_RADIUS: f64 = 1e7;

struct BarrierState {
    z: Vec<f64>,
    t: f64,
}

struct Barrier<'a> {
    blocks: &'a [ReducedBlock],
    nz: usize,
    cap: f64,
}

impl Barrier<'_> {
    /// Barrier value at weight `tau`, or `None` outside the domain.
    fn value(&self, z: &[f64], t: f64, tau: f64) -> Option<f64> {
        if t >= self.cap {
            return None;
        }
        let zz: f64 = z.iter().map(|v| v * v).sum();
        let ball = BALL_RADIUS * BALL_RADIUS - zz;
        if ball <= 0.0 {
            return None;
        }
        let mut f = -tau * t - (self.cap - t).ln() - ball.ln();
        for b in self.blocks {
            let ch = Cholesky::new(b.eval(z, t))?;
            let l = ch.l_dirty();
            f -= 2.0 * (0..b.dim).map(|i| l[(i, i)].ln()).sum::<f64>();
        }
        Some(f)
    }

    /// Gradient and Hessian in `(z, t)`; `t` is the last coordinate.
    fn derivatives(&self, z: &[f64], t: f64, tau: f64) -> Option<(DVector<f64>, Mat)> {
        let nv = self.nz + 1;
        let mut grad = DVector::zeros(nv);
        let mut hess = Mat::zeros(nv, nv);
        let sqrt2 = std::f64::consts::SQRT_2;
        for b in self.blocks {
            let s = b.eval(z, t);
            let ch = Cholesky::new(s)?;
            let linv = ch.l().solve_lower_triangular(&Mat::identity(b.dim, b.dim))?;
            let linv_t = linv.transpose();
            let packed_len = b.dim * (b.dim + 1) / 2;
            let k = b.vars.len();
            let mut w = Mat::zeros(packed_len, k + 1);
            let pack = |col: usize, m: &Mat, w: &mut Mat| {
                let mut r = 0;
                for j in 0..b.dim {
                    for i in j..b.dim {
                        w[(r, col)] = if i == j { m[(i, i)] } else { sqrt2 * m[(i, j)] };
                        r += 1;
                    }
                }
            };
            for c in 0..k {
                let gj = Mat::from_column_slice(b.dim, b.dim, b.g.column(c).as_slice());
                let wj = &linv * gj * &linv_t;
                grad[b.vars[c]] -= wj.trace();
                pack(c, &wj, &mut w);
            }
            let wt = -(&linv_t.transpose() * &linv_t);
            grad[nv - 1] -= wt.trace();
            pack(k, &wt, &mut w);
            let h = w.tr_mul(&w);
            let idx: Vec<usize> = b.vars.iter().copied().chain(std::iter::once(nv - 1)).collect();
            for (a, &ia) in idx.iter().enumerate() {
                for (c, &ic) in idx.iter().enumerate() {
                    hess[(ia, ic)] += h[(a, c)];
                }
            }
        }
        grad[nv - 1] += -tau + 1.0 / (self.cap - t);
        hess[(nv - 1, nv - 1)] += 1.0 / (self.cap - t).powi(2);
        let zz: f64 = z.iter().map(|v| v * v).sum();
        let ball = BALL_RADIUS * BALL_RADIUS - zz;
        for i in 0..self.nz {
            grad[i] += 2.0 * z[i] / ball;
            hess[(i, i)] += 2.0 / ball;
            for j in 0..self.nz {
                hess[(i, j)] += 4.0 * z[i] * z[j] / (ball * ball);
            }
        }
        Some((grad, hess))
    }
}

fn newton_direction(grad: &DVector<f64>, hess: &Mat) -> DVector<f64> {
    let diag_max = hess.diagonal().amax().max(1e-300);
    let mut ridge = 0.0;
    loop {
        let mut h = hess.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += ridge;
        }
        if let Some(ch) = Cholesky::new(h) {
            return -ch.solve(grad);
        }
        ridge = if ridge == 0.0 { 1e-12 * diag_max } else { ridge * 100.0 };
    }
}

enum BarrierOutcome {
    Feasible,
    Infeasible,
    Inconclusive,
}

fn run_barrier(blocks: &[ReducedBlock], nz: usize, opts: &SolveOptions) -> (BarrierState, BarrierOutcome, usize) {
    let cap = opts.margin_cap;
    let bar = Barrier { blocks, nz, cap };
    let z0 = vec![0.0; nz];
    let lmin = blocks
        .iter()
        .map(|b| min_eig_unchecked(&b.eval(&z0, 0.0)))
        .fold(f64::INFINITY, f64::min);
    let mut st = BarrierState {
        z: z0,
        t: (lmin - 1.0).min(cap - 1.0),
    };
    let nu: f64 = blocks.iter().map(|b| b.dim as f64).sum::<f64>() + 2.0;
    let mut tau = 1.0;
    let mut steps = 0;
    let feasible_now = |t: f64| opts.objective == Objective::Feasibility && t > 0.0;
    if feasible_now(st.t) {
        return (st, BarrierOutcome::Feasible, 0);
    }
    loop {
        // centering
        let mut inner = 0;
        loop {
            if steps >= opts.max_newton {
                return (st, BarrierOutcome::Inconclusive, steps);
            }
            let Some((grad, hess)) = bar.derivatives(&st.z, st.t, tau) else {
                return (st, BarrierOutcome::Inconclusive, steps);
            };
            let d = newton_direction(&grad, &hess);
            let decrement = -grad.dot(&d);
            steps += 1;
            inner += 1;
            if decrement.is_nan() {
                return (st, BarrierOutcome::Inconclusive, steps);
            }
            if decrement / 2.0 < 1e-10 {
                break;
            }
            let f0 = bar.value(&st.z, st.t, tau).unwrap_or(f64::INFINITY);
            let mut alpha = 1.0;
            let mut moved = false;
            while alpha > 1e-14 {
                let zn: Vec<f64> = st.z.iter().enumerate().map(|(i, v)| v + alpha * d[i]).collect();
                let tn = st.t + alpha * d[nz];
                if let Some(f1) = bar.value(&zn, tn, tau) {
                    if f1 <= f0 - 0.25 * alpha * decrement {
                        st.z = zn;
                        st.t = tn;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if feasible_now(st.t) {
                return (st, BarrierOutcome::Feasible, steps);
            }
            if !moved || inner > 60 {
                break;
            }
        }
        let gap = nu / tau;
        if st.t + gap < -opts.psd_tol {
            return (st, BarrierOutcome::Infeasible, steps);
        }
        // close enough to the cap that further centering changes nothing useful
        if opts.objective == Objective::MaxMargin && st.t >= cap * (1.0 - 1e-3) {
            return (st, BarrierOutcome::Feasible, steps);
        }
        if gap < opts.gap_tol {
            let outcome = if st.t >= -opts.psd_tol {
                BarrierOutcome::Feasible
            } else {
                BarrierOutcome::Inconclusive
            };
            return (st, outcome, steps);
        }
        tau *= 10.0;
    }
}

/// Decides feasibility of `p`; see the module documentation.
pub fn solve_feasibility(p: &SdpProblem, opts: &SolveOptions) -> Result<SdpSolution> {
    if !(opts.eq_tol > 0.0 && opts.psd_tol > 0.0 && opts.margin_cap > 0.0 && opts.gap_tol > 0.0) {
        return Err(Error::invalid("solver tolerances and margin cap must be positive"));
    }
    let (a, b) = compile_equalities(p);
    let zero = DVector::zeros(p.n_params);
    let eq = match solve_equalities(&a, &b, opts.eq_tol) {
        Ok(eq) => eq,
        Err(_) => {
            let assignment = p.unpack(&zero);
            let v = verify(p, &assignment)?;
            return Ok(SdpSolution {
                status: SdpStatus::Infeasible,
                assignment,
                eq_residual: v.eq_residual,
                psd_margin: v.psd_margin,
                newton_steps: 0,
            });
        }
    };
    let compiled: Vec<CompiledBlock> = p.blocks.iter().map(|b| compile_block(p, b)).collect();
    let (reduced, active) = reduce(&compiled, &eq, p.n_params);

    let (z, outcome, steps) = if active.is_empty() || reduced.is_empty() {
        let margin = reduced
            .iter()
            .map(|b| min_eig_unchecked(&b.s0))
            .fold(f64::INFINITY, f64::min);
        let outcome = if margin >= -opts.psd_tol {
            BarrierOutcome::Feasible
        } else {
            BarrierOutcome::Infeasible
        };
        (vec![0.0; active.len()], outcome, 0)
    } else {
        let (st, outcome, steps) = run_barrier(&reduced, active.len(), opts);
        (st.z, outcome, steps)
    };

    let mut x = eq.xp.clone();
    for (k, &f) in active.iter().enumerate() {
        if z[k] != 0.0 {
            for &(g, v) in &eq.z_cols[f] {
                x[g] += v * z[k];
            }
        }
    }
    let assignment = p.unpack(&x);
    let check = verify(p, &assignment)?;
    let status = match outcome {
        BarrierOutcome::Feasible if check.passes(opts.eq_tol, opts.psd_tol) => SdpStatus::Feasible,
        BarrierOutcome::Feasible => SdpStatus::Inconclusive,
        BarrierOutcome::Infeasible => SdpStatus::Infeasible,
        BarrierOutcome::Inconclusive if check.passes(opts.eq_tol, opts.psd_tol) => SdpStatus::Feasible,
        BarrierOutcome::Inconclusive => SdpStatus::Inconclusive,
    };
    Ok(SdpSolution {
        status,
        assignment,
        eq_residual: check.eq_residual,
        psd_margin: check.psd_margin,
        newton_steps: steps,
    })
}
