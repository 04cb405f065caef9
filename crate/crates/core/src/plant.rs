//! Ground-truth models, trajectory simulation, measurement noise and the
//! random switched-system ensemble.
//!
//! Mode indices are 0-based in memory. Files and reports use 1-based modes.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::error::{Error, Result};
use crate::numkernel::{ensure_finite, Mat};
use crate::rng::{self, Purpose};

/// States whose magnitude exceeds this are treated as a divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// `x(k+1) = A x(k) + B u(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel {
    pub a: Mat,
    pub b: Mat,
}

impl LtiModel {
    pub fn new(a: Mat, b: Mat) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::invalid(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::invalid(format!(
                "B must be {}xm with m >= 1, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        ensure_finite(&a, "A")?;
        ensure_finite(&b, "B")?;
        Ok(LtiModel { a, b })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `[B A]`, the block every identification routine estimates.
    pub fn stacked(&self) -> Mat {
        let (n, m) = (self.n(), self.m());
        let mut ba = Mat::zeros(n, m + n);
        ba.columns_mut(0, m).copy_from(&self.b);
        ba.columns_mut(m, n).copy_from(&self.a);
        ba
    }

    pub fn from_stacked(ba: &Mat, m: usize) -> Result<Self> {
        let n = ba.nrows();
        if ba.ncols() != m + n {
            return Err(Error::invalid("stacked block must be n x (m + n)"));
        }
        LtiModel::new(ba.columns(m, n).into_owned(), ba.columns(0, m).into_owned())
    }
}

/// `x(k+1) = A_{sigma(k)} x(k) + B_{sigma(k)} u(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedModel {
    pub modes: Vec<LtiModel>,
}

impl SwitchedModel {
    pub fn new(modes: Vec<LtiModel>) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| Error::invalid("switched model needs at least one mode"))?;
        let (n, m) = (first.n(), first.m());
        if let Some(i) = modes.iter().position(|md| md.n() != n || md.m() != m) {
            return Err(Error::invalid(format!(
                "mode {} has shape (n={}, m={}), expected (n={n}, m={m})",
                i + 1,
                modes[i].n(),
                modes[i].m()
            )));
        }
        Ok(SwitchedModel { modes })
    }

    pub fn single(model: LtiModel) -> Self {
        SwitchedModel { modes: vec![model] }
    }

    pub fn n(&self) -> usize {
        self.modes[0].n()
    }

    pub fn m(&self) -> usize {
        self.modes[0].m()
    }

    pub fn gamma(&self) -> usize {
        self.modes.len()
    }
}

/// Static nonlinear map `y = A phi(u)` with a known basis.
#[derive(Debug, Clone)]
pub struct BasisModel {
    pub a: Mat,
    pub basis: Basis,
}

impl BasisModel {
    pub fn new(a: Mat, basis: Basis) -> Result<Self> {
        if a.ncols() != basis.len() {
            return Err(Error::invalid(format!(
                "A has {} columns but the basis has {} functions",
                a.ncols(),
                basis.len()
            )));
        }
        ensure_finite(&a, "A")?;
        Ok(BasisModel { a, basis })
    }

    pub fn output(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * self.basis.eval(u)?)
    }
}

/// Time-indexed states, inputs and modes. `states_*` have `T + 1` entries,
/// `inputs` and `modes` have `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states_true: Option<Vec<DVector<f64>>>,
    pub states_measured: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub modes: Vec<usize>,
}

impl Trajectory {
    /// Trajectory from external data, without ground truth.
    pub fn from_measurements(
        states: Vec<DVector<f64>>,
        inputs: Vec<DVector<f64>>,
        modes: Vec<usize>,
    ) -> Result<Self> {
        let t = Trajectory {
            states_true: None,
            states_measured: states,
            inputs,
            modes,
        };
        t.validate(None)?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n(&self) -> usize {
        self.states_measured.first().map_or(0, |x| x.len())
    }

    pub fn m(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    pub fn has_ground_truth(&self) -> bool {
        self.states_true.is_some()
    }

    /// Checks lengths, widths and (optionally) the mode range.
    pub fn validate(&self, gamma: Option<usize>) -> Result<()> {
        let t = self.inputs.len();
        if self.states_measured.len() != t + 1 || self.modes.len() != t {
            return Err(Error::invalid(format!(
                "trajectory lengths inconsistent: {} states, {} inputs, {} modes",
                self.states_measured.len(),
                t,
                self.modes.len()
            )));
        }
        let n = self.n();
        if self.states_measured.iter().any(|x| x.len() != n) {
            return Err(Error::invalid("state vectors have inconsistent widths"));
        }
        let m = self.m();
        if self.inputs.iter().any(|u| u.len() != m) {
            return Err(Error::invalid("input vectors have inconsistent widths"));
        }
        if let Some(truth) = &self.states_true {
            if truth.len() != t + 1 || truth.iter().any(|x| x.len() != n) {
                return Err(Error::invalid("ground-truth states inconsistent with measurements"));
            }
        }
        if let Some(g) = gamma {
            if let Some(k) = self.modes.iter().position(|&s| s >= g) {
                return Err(Error::invalid(format!(
                    "mode {} at step {k} outside [1, {g}]",
                    self.modes[k] + 1
                )));
            }
        }
        let finite = |v: &[DVector<f64>]| v.iter().all(|x| x.iter().all(|e| e.is_finite()));
        if !finite(&self.states_measured) || !finite(&self.inputs) {
            return Err(Error::invalid("trajectory contains non-finite values"));
        }
        Ok(())
    }
}

/// Replays `inputs` and `modes` through the model from `x0`.
pub fn simulate(
    model: &SwitchedModel,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    modes: &[usize],
) -> Result<Trajectory> {
    let (n, m) = (model.n(), model.m());
    if x0.len() != n {
        return Err(Error::invalid(format!("x0 has {} entries, expected {n}", x0.len())));
    }
    if inputs.len() != modes.len() {
        return Err(Error::invalid("inputs and modes must have equal length"));
    }
    if let Some(k) = inputs.iter().position(|u| u.len() != m) {
        return Err(Error::invalid(format!("input at step {k} has wrong width (expected {m})")));
    }
    if let Some(k) = modes.iter().position(|&s| s >= model.gamma()) {
        return Err(Error::invalid(format!(
            "mode index {} at step {k} outside [1, {}]",
            modes[k] + 1,
            model.gamma()
        )));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for (k, (u, &mode)) in inputs.iter().zip(modes).enumerate() {
        let md = &model.modes[mode];
        let next = &md.a * &states[k] + &md.b * u;
        if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::Divergence {
                step: k + 1,
                limit: DIVERGENCE_LIMIT,
            });
        }
        states.push(next);
    }
    Ok(Trajectory {
        states_true: Some(states.clone()),
        states_measured: states,
        inputs: inputs.to_vec(),
        modes: modes.to_vec(),
    })
}

/// Multiplicative measurement noise: entry `i` of state `k` becomes
/// `x_i (1 + eta)` with `eta ~ Uniform(-noise_pct, noise_pct)` drawn from the
/// stream keyed by `(seed, k)` at position `i`.
pub fn add_measurement_noise(traj: &Trajectory, noise_pct: f64, seed: u64) -> Result<Trajectory> {
    if !(noise_pct >= 0.0) || !noise_pct.is_finite() {
        return Err(Error::invalid(format!("noise level must be >= 0, got {noise_pct}")));
    }
    let truth = traj
        .states_true
        .as_ref()
        .ok_or_else(|| Error::invalid("measurement noise needs ground-truth states"))?;
    let measured = truth
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let eta = rng::uniform_vec(seed, Purpose::Noise, k as u64, x.len(), -noise_pct, noise_pct);
            DVector::from_iterator(x.len(), x.iter().zip(eta).map(|(v, e)| v * (1.0 + e)))
        })
        .collect();
    Ok(Trajectory {
        states_true: Some(truth.clone()),
        states_measured: measured,
        inputs: traj.inputs.clone(),
        modes: traj.modes.clone(),
    })
}

/// Random ensemble: `B_i` entries ~ U(0, 0.1), `A_i = 0.9 I + dA_i` with
/// `dA_i` entries ~ U(0, 0.1).
pub fn random_ensemble(n: usize, m: usize, gamma: usize, seed: u64) -> Result<SwitchedModel> {
    if n == 0 || m == 0 || gamma == 0 {
        return Err(Error::invalid(format!(
            "ensemble dimensions must be positive (n={n}, m={m}, gamma={gamma})"
        )));
    }
    let modes = (0..gamma)
        .map(|i| {
            let da = rng::uniform_vec(seed, Purpose::EnsembleA, i as u64, n * n, 0.0, 0.1);
            let a = Mat::identity(n, n) * 0.9 + Mat::from_row_slice(n, n, &da);
            let b = Mat::from_row_slice(n, m, &rng::uniform_vec(seed, Purpose::EnsembleB, i as u64, n * m, 0.0, 0.1));
            LtiModel { a, b }
        })
        .collect();
    Ok(SwitchedModel { modes })
}

/// How exploration data is collected from a (possibly unstable) plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodePlan {
    /// Total number of transitions `T`.
    pub steps: usize,
    /// Transitions per episode before restarting from a fresh initial state.
    pub episode_length: usize,
    /// Inputs are drawn from `U(-input_amplitude, input_amplitude)`.
    pub input_amplitude: f64,
    /// Initial states are drawn from `U(-state_amplitude, state_amplitude)`.
    pub state_amplitude: f64,
}

/// Runs `ceil(steps / episode_length)` episodes under uniformly random inputs
/// and uniformly random switching. Inputs and modes are keyed by the global
/// step index, initial states by the episode index.
pub fn collect_episodes(model: &SwitchedModel, plan: &EpisodePlan, seed: u64) -> Result<Vec<Trajectory>> {
    if plan.steps == 0 || plan.episode_length == 0 {
        return Err(Error::invalid("episode plan needs steps >= 1 and episode_length >= 1"));
    }
    let (n, m, gamma) = (model.n(), model.m(), model.gamma());
    let mut episodes = Vec::new();
    let mut start = 0;
    while start < plan.steps {
        let len = plan.episode_length.min(plan.steps - start);
        let e = episodes.len() as u64;
        let x0 = DVector::from_vec(rng::uniform_vec(
            seed,
            Purpose::InitialState,
            e,
            n,
            -plan.state_amplitude,
            plan.state_amplitude,
        ));
        let inputs: Vec<_> = (start..start + len)
            .map(|k| {
                DVector::from_vec(rng::uniform_vec(
                    seed,
                    Purpose::Input,
                    k as u64,
                    m,
                    -plan.input_amplitude,
                    plan.input_amplitude,
                ))
            })
            .collect();
        let modes: Vec<_> = (start..start + len)
            .map(|k| rng::stream(seed, Purpose::Mode, k as u64).gen_range(0..gamma))
            .collect();
        episodes.push(simulate(model, &x0, &inputs, &modes)?);
        start += len;
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(a: f64, b: f64) -> LtiModel {
        LtiModel::new(Mat::from_element(1, 1, a), Mat::from_element(1, 1, b)).unwrap()
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn scalar_recursion() {
        let model = SwitchedModel::single(scalar(0.5, 1.0));
        let tr = simulate(&model, &v(1.0), &[v(1.0), v(-1.0)], &[0, 0]).unwrap();
        let xs: Vec<f64> = tr.states_measured.iter().map(|x| x[0]).collect();
        assert_eq!(xs, vec![1.0, 1.5, -0.25]);
    }

    #[test]
    fn two_mode_recursion() {
        let model = SwitchedModel::new(vec![scalar(0.5, 1.0), scalar(-0.5, 2.0)]).unwrap();
        let inputs = [v(1.0), v(1.0), v(-1.0), v(2.0)];
        let tr = simulate(&model, &v(1.0), &inputs, &[0, 1, 0, 1]).unwrap();
        let xs: Vec<f64> = tr.states_true.unwrap().iter().map(|x| x[0]).collect();
        assert_eq!(xs, vec![1.0, 1.5, 1.25, -0.375, 4.1875]);
    }

    #[test]
    fn zero_input_zero_state() {
        let model = random_ensemble(3, 2, 2, 4).unwrap();
        let inputs = vec![DVector::zeros(2); 6];
        let tr = simulate(&model, &DVector::zeros(3), &inputs, &[0, 1, 1, 0, 1, 0]).unwrap();
        assert!(tr.states_measured.iter().all(|x| x.iter().all(|&e| e == 0.0)));
    }

    #[test]
    fn divergence_reports_step() {
        let model = SwitchedModel::single(scalar(1e7, 0.0));
        let inputs = vec![v(0.0); 5];
        match simulate(&model, &v(1.0), &inputs, &[0; 5]) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_mode_rejected() {
        let model = SwitchedModel::single(scalar(0.5, 1.0));
        assert!(simulate(&model, &v(1.0), &[v(1.0)], &[1]).is_err());
    }

    #[test]
    fn noise_free_and_deterministic() {
        let model = random_ensemble(3, 2, 2, 1).unwrap();
        let plan = EpisodePlan {
            steps: 12,
            episode_length: 4,
            input_amplitude: 1.0,
            state_amplitude: 1.0,
        };
        let tr = &collect_episodes(&model, &plan, 3).unwrap()[0];
        let clean = add_measurement_noise(tr, 0.0, 9).unwrap();
        assert_eq!(clean.states_measured, tr.states_measured);
        let a = add_measurement_noise(tr, 0.005, 9).unwrap();
        let b = add_measurement_noise(tr, 0.005, 9).unwrap();
        assert_eq!(a, b);
        for (xm, xt) in a.states_measured.iter().zip(tr.states_measured.iter()) {
            for (m, t) in xm.iter().zip(xt.iter()) {
                assert!((m - t).abs() <= 0.005 * t.abs() + 1e-15);
            }
        }
        let no_truth = Trajectory::from_measurements(tr.states_measured.clone(), tr.inputs.clone(), tr.modes.clone()).unwrap();
        assert!(add_measurement_noise(&no_truth, 0.01, 1).is_err());
        assert!(add_measurement_noise(tr, -0.1, 1).is_err());
    }

    #[test]
    fn ensemble_shape_and_ranges() {
        let model = random_ensemble(20, 10, 5, 0).unwrap();
        assert_eq!((model.n(), model.m(), model.gamma()), (20, 10, 5));
        for md in &model.modes {
            assert!(md.b.iter().all(|&b| (0.0..0.1).contains(&b)));
            for i in 0..20 {
                for j in 0..20 {
                    let da = md.a[(i, j)] - if i == j { 0.9 } else { 0.0 };
                    assert!((-1e-15..0.1).contains(&da));
                }
            }
        }
        assert_eq!(random_ensemble(20, 10, 5, 0).unwrap(), model);
        assert_ne!(random_ensemble(20, 10, 5, 1).unwrap(), model);
        assert_eq!(random_ensemble(2, 1, 1, 3).unwrap().gamma(), 1);
        assert!(random_ensemble(0, 1, 1, 0).is_err());
    }

    #[test]
    fn episodes_cover_all_steps() {
        let model = random_ensemble(2, 1, 3, 2).unwrap();
        let plan = EpisodePlan {
            steps: 23,
            episode_length: 5,
            input_amplitude: 0.1,
            state_amplitude: 1.0,
        };
        let eps = collect_episodes(&model, &plan, 11).unwrap();
        assert_eq!(eps.len(), 5);
        assert_eq!(eps.iter().map(Trajectory::len).sum::<usize>(), 23);
        assert_eq!(eps[4].len(), 3);
        for e in &eps {
            e.validate(Some(3)).unwrap();
            assert!(e.inputs.iter().all(|u| u[0].abs() <= 0.1));
        }
    }

    #[test]
    fn stacked_round_trip() {
        let md = scalar(0.5, 2.0);
        let ba = md.stacked();
        assert_abs_diff_eq!(ba, Mat::from_row_slice(1, 2, &[2.0, 0.5]));
        assert_eq!(LtiModel::from_stacked(&ba, 1).unwrap(), md);
    }
}
