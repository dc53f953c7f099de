mod common;

use common::*;

use qmmm_adapt::coupling::{decompose_ball, pure_qm_partition, solve_equilibrium, HybridProblem, Region, SolverOptions};
use qmmm_adapt::estimator::truncated_force_at;
use qmmm_adapt::lattice::{build_lattice, Displacement, LatticeSpec};
use qmmm_adapt::mmpotential::{hessian_min_eigenvalue, mm_site_energy, mm_site_gradient};
use qmmm_adapt::reference::{solve_reference, true_error};
use qmmm_adapt::tightbinding::{cluster_site_energies, locality_profile, total_energy, Cluster, TbModel};
use qmmm_adapt::Vec2;
use rand::Rng;

#[test]
fn site_energy_derivatives_decay_exponentially() {
    let model = TbModel::morse_toy();
    let c = Cluster::rigid(patch(6.0, false));
    let centre = c.positions.iter().position(|p| p.norm() < 1e-9).unwrap();
    let prof = locality_profile(&model, &c, centre).unwrap();
    let at = |r: f64| {
        prof.iter()
            .filter(|(d, _)| (d - r).abs() < 0.6)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max)
    };
    let v: Vec<f64> = (1..=5).map(|r| at(r as f64)).collect();
    assert!(strictly_decreasing(&v) && v[4] < 1e-2 * v[0], "shell maxima {v:?}");
}

#[test]
fn centre_site_energy_converges_with_cluster_size() {
    let model = TbModel::morse_toy();
    let centre_energy = |r: f64| {
        let c = Cluster::rigid(patch(r, false));
        let k = c.positions.iter().position(|p| p.norm() < 1e-9).unwrap();
        cluster_site_energies(&model, &c).unwrap()[k]
    };
    let limit = centre_energy(10.0);
    let gaps: Vec<f64> = [4.0, 6.0, 8.0].iter().map(|&r| (centre_energy(r) - limit).abs()).collect();
    assert!(strictly_decreasing(&gaps), "gaps {gaps:?}");
}

#[test]
fn mm_remainder_is_third_order() {
    let out = check_mm_order(3);
    assert!(out.pass, "{}", out.detail);
}

#[test]
fn mm_potential_is_consistent_at_the_reference() {
    let pot = potential();
    assert_eq!(pot.len(), 36);
    assert!(pot.asymmetry() <= 1e-12);
    assert!((pot.v0 + 0.34881).abs() < 1e-4, "v0 = {}", pot.v0);
    let zero = vec![Vec2::ZERO; pot.len()];
    assert_eq!(mm_site_energy(&pot, &zero).unwrap(), pot.v0);
    // A rigid shift leaves every difference at zero; the linear term pairs
    // opposite neighbours, so the bulk force cancels.
    let g0 = mm_site_gradient(&pot, &zero).unwrap();
    for (k, rho) in pot.stencil.iter().enumerate() {
        let opp = pot.stencil.iter().position(|s| (*s + *rho).norm() < 1e-9).unwrap();
        assert!((g0[k] + g0[opp]).max_abs() < 1e-10);
    }
    let lam = hessian_min_eigenvalue(&pot).unwrap();
    assert!(lam.is_finite());
}

#[test]
fn perfect_crystal_is_force_free() {
    let model = TbModel::morse_toy();
    let lattice = build_lattice(&LatticeSpec::triangular(), 14.0).unwrap();
    let y = lattice.sites().to_vec();
    for l in lattice.ball(Vec2::ZERO, 4.0) {
        let f = truncated_force_at(&model, &lattice, l, &y, 5.0).unwrap();
        assert!(f.max_abs() < 1e-12, "site {l}: {f:?}");
    }
    let pot = potential();
    let part = decompose_ball(&lattice, 3.0, 9.0, 5.0).unwrap();
    let problem = HybridProblem::new(&lattice, &model, &part, Some(&pot)).unwrap();
    let (_, g) = problem.energy_and_gradient(&Displacement::zeros(lattice.len())).unwrap();
    for l in lattice.ball(Vec2::ZERO, 9.0) {
        let r = lattice.radius_of(l);
        if part.labels[l] == Region::Mm && r > 3.0 + 3.1 && r < 9.0 - 3.1 {
            assert!(g[l].max_abs() < 1e-12, "MM site {l} at {r}: {:?}", g[l]);
        }
    }
}

#[test]
fn pure_qm_energy_is_the_cluster_energy_difference() {
    let model = TbModel::morse_toy();
    let lattice = build_lattice(&LatticeSpec::single_vacancy(), 8.0).unwrap();
    let part = pure_qm_partition(&lattice, &[Vec2::ZERO], 2.5, 2.0).unwrap();
    let problem = HybridProblem::new(&lattice, &model, &part, None).unwrap();
    let mut r = rng(5);
    let mut u = Displacement::zeros(lattice.len());
    for &l in problem.free_sites() {
        u[l] = Vec2::new(r.random_range(-0.05..0.05), r.random_range(-0.05..0.05));
    }
    let ids = part.qm_cluster();
    let e = |y: &[Vec2]| total_energy(&model, &Cluster::from_lattice(&lattice, &ids, y).unwrap()).unwrap();
    let oracle = e(&u.positions(&lattice)) - e(lattice.sites());
    let got = problem.energy(&u).unwrap();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}

#[test]
fn hybrid_needs_a_potential_and_rejects_far_field_motion() {
    let model = TbModel::morse_toy();
    let lattice = build_lattice(&LatticeSpec::single_vacancy(), 15.0).unwrap();
    let part = decompose_ball(&lattice, 4.0, 9.0, 5.0).unwrap();
    assert!(HybridProblem::new(&lattice, &model, &part, None).is_err());
    let pot = potential();
    let problem = HybridProblem::new(&lattice, &model, &part, Some(&pot)).unwrap();
    let mut u = Displacement::zeros(lattice.len());
    let ff = part.ids(Region::Ff)[0];
    u[ff] = Vec2::new(0.01, 0.0);
    assert!(problem.energy(&u).is_err());
}

#[test]
fn small_reference_is_symmetric_cached_and_close_to_pure_qm() {
    let dir = tempfile::tempdir().unwrap();
    let model = TbModel::morse_toy();
    let spec = LatticeSpec::single_vacancy();
    let opts = SolverOptions::default();
    let t = std::time::Instant::now();
    let (sol, lattice) = solve_reference(&model, &spec, 9.0, 3.0, &opts, Some(dir.path())).unwrap();
    let first = t.elapsed();
    let t = std::time::Instant::now();
    let (again, _) = solve_reference(&model, &spec, 9.0, 3.0, &opts, Some(dir.path())).unwrap();
    assert!(t.elapsed() < first);
    assert_eq!(sol, again);
    assert!(sol.gradient_norm <= opts.g_tol);

    let rot = std::f64::consts::FRAC_PI_3;
    for l in 0..lattice.len() {
        let k = lattice.id_of(lattice.site(l).rotated(rot)).unwrap();
        assert!((sol.u_ref[k] - sol.u_ref[l].rotated(rot)).max_abs() < 1e-5);
    }
    // The vacancy pulls its neighbours inwards or pushes them out radially.
    let n1 = lattice.ball(Vec2::ZERO, 1.01);
    for &l in &n1 {
        let p = lattice.site(l);
        let tangential = p.x * sol.u_ref[l].y - p.y * sol.u_ref[l].x;
        assert!(tangential.abs() < 1e-6);
    }

    let part = pure_qm_partition(&lattice, &[Vec2::ZERO], 6.0, 3.0).unwrap();
    let problem = HybridProblem::new(&lattice, &model, &part, None).unwrap();
    let state = solve_equilibrium(&problem, &Displacement::zeros(lattice.len()), &opts).unwrap();
    let err = true_error(&state.u, &lattice, &sol, &lattice, &Default::default()).unwrap();
    assert!(err < 1e-4, "same problem, error {err}");
}
