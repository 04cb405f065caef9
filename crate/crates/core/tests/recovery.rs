mod common;

use common::*;
use nalgebra::DVector;
use rand::Rng;
use rddc_core::basis::Basis;
use rddc_core::datamat::{build_mode_masked, StateSource};
use rddc_core::identify::{identify_basis, identify_lti, identify_switched};
use rddc_core::plant::{BasisModel, SwitchedModel};
use rddc_core::precond::{rescaled_identify_switched, Preconditioner, RUIZ_MAX_ITERS, RUIZ_TOL};

#[test]
fn lti_recovery_from_noiseless_episodes() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let (n, m) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let model = SwitchedModel::single(random_lti(&mut r, n, m, 0.9));
        let eps = episodes(&mut r, &model, 2 * (n + m), 4);
        let (dm, _) = data(&eps, StateSource::Measured);
        let est = identify_lti(&dm).unwrap();
        let truth = model.modes[0].stacked();
        assert!(rel(&est.blocks[0], &truth) < 1e-8, "seed {seed}");
        assert!(rel(&est.blocks[0], &lstsq(&dm.x1, &dm.stacked())) < 1e-8);
    }
}

#[test]
fn switched_recovery_from_noiseless_episodes() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let (n, m, g) = (r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=3));
        let model = random_switched(&mut r, n, m, g);
        let eps = episodes(&mut r, &model, 4 * g * (n + m), 4);
        let (dm, modes) = data(&eps, StateSource::Measured);
        let masked = build_mode_masked(&dm, &modes, g).unwrap();
        let est = identify_switched(&dm, &masked).unwrap();
        for i in 0..g {
            assert!(rel(&est.blocks[i], &model.modes[i].stacked()) < 1e-8, "seed {seed} mode {i}");
        }
        let cols: Vec<_> = masked.modes.iter().map(|mm| mm.columns.clone()).collect();
        let pcs: Vec<_> = masked
            .modes
            .iter()
            .zip(&cols)
            .map(|(mm, c)| Preconditioner::diagonal(&mm.stacked(), c, RUIZ_MAX_ITERS, RUIZ_TOL).unwrap())
            .collect();
        let pre = rescaled_identify_switched(&dm, &masked, &pcs).unwrap();
        for i in 0..g {
            assert!(rel(&pre.blocks[i], &model.modes[i].stacked()) < 1e-8, "seed {seed} mode {i} (scaled)");
        }
    }
}

#[test]
fn basis_recovery() {
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let inputs = r.gen_range(1..=3);
        let basis = Basis::polynomial(inputs, 3);
        let p = r.gen_range(1..=4);
        let model = BasisModel::new(uniform_mat(&mut r, p, basis.len(), -1.0, 1.0), basis.clone()).unwrap();
        let us: Vec<_> = (0..3 * basis.len())
            .map(|_| DVector::from_fn(inputs, |_, _| r.gen_range(-1.0..1.0)))
            .collect();
        let ys: Vec<_> = us.iter().map(|u| model.output(u).unwrap()).collect();
        let est = identify_basis(&us, &ys, &basis).unwrap();
        assert!(rel(&est.a, &model.a) < 1e-8, "seed {seed}");
    }
}

#[test]
fn too_short_data_is_reported_per_mode() {
    let mut r = rng(7);
    let model = random_switched(&mut r, 3, 2, 3);
    let eps = episodes(&mut r, &model, 2, 4);
    let (dm, modes) = data(&eps, StateSource::Measured);
    let masked = build_mode_masked(&dm, &modes, 3).unwrap();
    let err = identify_switched(&dm, &masked).unwrap_err();
    assert!(matches!(err, rddc_core::Error::ModeRichness { .. }), "{err}");
}
