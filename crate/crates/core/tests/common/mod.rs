//! Helpers shared by the integration tests. The oracles here deliberately
//! avoid the library's SVD-based routines.
#![allow(dead_code)]

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rddc_core::datamat::{build_from_episodes, DataMatrices, StateSource};
use rddc_core::plant::{simulate, LtiModel, SwitchedModel, Trajectory};
use rddc_core::Mat;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7e57)
}

/// Spectral norm as the square root of the top eigenvalue of `M M^T`.
pub fn spec_norm(m: &Mat) -> f64 {
    let g = m * m.transpose();
    g.symmetric_eigen().eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v)).max(0.0).sqrt()
}

/// `sigma_max / sigma_min` from the eigenvalues of `M M^T` (wide `M`).
pub fn cond(m: &Mat) -> f64 {
    let ev = (m * m.transpose()).symmetric_eigen().eigenvalues;
    let hi = ev.iter().fold(f64::MIN, |a, &v| a.max(v));
    let lo = ev.iter().fold(f64::MAX, |a, &v| a.min(v));
    (hi / lo).sqrt()
}

/// Least squares through the normal equations: `Y M^T (M M^T)^-1`.
pub fn lstsq(y: &Mat, m: &Mat) -> Mat {
    let g = m * m.transpose();
    let inv = g.cholesky().expect("full row rank").inverse();
    y * m.transpose() * inv
}

pub fn uniform_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| r.gen_range(lo..hi))
}

/// Random model with spectral norm of `A` equal to `rho`.
pub fn random_lti(r: &mut ChaCha8Rng, n: usize, m: usize, rho: f64) -> LtiModel {
    let a = uniform_mat(r, n, n, -1.0, 1.0);
    let a = &a * (rho / spec_norm(&a));
    LtiModel::new(a, uniform_mat(r, n, m, -1.0, 1.0)).unwrap()
}

pub fn random_switched(r: &mut ChaCha8Rng, n: usize, m: usize, gamma: usize) -> SwitchedModel {
    SwitchedModel::new((0..gamma).map(|_| random_lti(r, n, m, 0.9)).collect()).unwrap()
}

/// Episodes of length `len` with inputs and initial states ~ U(-1, 1) and
/// uniformly random modes.
pub fn episodes(r: &mut ChaCha8Rng, model: &SwitchedModel, count: usize, len: usize) -> Vec<Trajectory> {
    let (n, m, g) = (model.n(), model.m(), model.gamma());
    (0..count)
        .map(|_| {
            let x0 = DVector::from_fn(n, |_, _| r.gen_range(-1.0..1.0));
            let us: Vec<_> = (0..len).map(|_| DVector::from_fn(m, |_, _| r.gen_range(-1.0..1.0))).collect();
            let modes: Vec<_> = (0..len).map(|_| r.gen_range(0..g)).collect();
            simulate(model, &x0, &us, &modes).unwrap()
        })
        .collect()
}

pub fn data(eps: &[Trajectory], source: StateSource) -> (DataMatrices, Vec<usize>) {
    build_from_episodes(eps, source).unwrap()
}

pub fn rel(est: &Mat, truth: &Mat) -> f64 {
    spec_norm(&(est - truth)) / spec_norm(truth)
}
