use std::collections::HashSet;

use qmmm_adapt::adaptive::{refine_partition, split_marked};
use qmmm_adapt::coupling::{decompose_ball, decompose_multi, Region};
use qmmm_adapt::estimator::{graded_mesh, graded_radii, multi_defect_mesh, omega_c};
use qmmm_adapt::lattice::{build_lattice, LatticeSpec};
use qmmm_adapt::Vec2;

#[test]
fn radii_are_graded_and_hit_the_interfaces() {
    let r = graded_radii(4.0, 16.0, 5.0);
    assert_eq!(&r[..5], &[0.0, 1.0, 2.0, 3.0, 4.0]);
    assert!(r.windows(2).all(|w| w[1] > w[0]));
    assert!(r.iter().any(|x| (x - 16.0).abs() < 1e-12));
    assert!((r.last().unwrap() - 21.0).abs() < 1e-12);
    let h: Vec<f64> = r.windows(2).map(|w| w[1] - w[0]).collect();
    let coarsest = h.iter().cloned().fold(0.0, f64::max);
    assert!(coarsest > 1.0);
}

#[test]
fn mesh_tiles_omega_c_with_site_count_weights() {
    let lattice = build_lattice(&LatticeSpec::single_vacancy(), 22.0).unwrap();
    let part = decompose_ball(&lattice, 4.0, 16.0, 5.0).unwrap();
    let mesh = graded_mesh(&lattice, &part, 8, 5.0).unwrap();
    let omega = omega_c(&lattice, &part, 5.0);
    let mut seen = HashSet::new();
    for e in &mesh.elements {
        assert!(e.members.contains(&e.repatom));
        assert_eq!(e.weight, e.members.len() as f64);
        for &m in &e.members {
            assert!(seen.insert(m), "site {m} in two elements");
        }
    }
    assert_eq!(seen, omega.iter().copied().collect::<HashSet<_>>());
    let w: f64 = mesh.elements.iter().map(|e| e.weight).sum();
    assert_eq!(w as usize, omega.len());
    assert_eq!(mesh.covered, omega.len());
    assert!(omega.len() >= 5 * mesh.elements.len());
}

#[test]
fn mesh_rejects_bad_arguments() {
    let lattice = build_lattice(&LatticeSpec::single_vacancy(), 14.0).unwrap();
    let part = decompose_ball(&lattice, 3.0, 9.0, 5.0).unwrap();
    assert!(graded_mesh(&lattice, &part, 3, 5.0).is_err());
    assert!(graded_mesh(&lattice, &part, 8, 6.0).is_err());
    assert!(multi_defect_mesh(&lattice, &part, &[], 8, 5.0).is_err());
}

#[test]
fn multi_defect_mesh_assigns_sites_to_the_nearest_centre() {
    let centers = [Vec2::new(-6.0, 0.0), Vec2::new(6.0, 0.0)];
    let spec = LatticeSpec::triangular().with_vacancies(centers.to_vec());
    let lattice = build_lattice(&spec, 21.0).unwrap();
    let part = decompose_multi(&lattice, &centers, 3.0, 9.0, 5.0).unwrap();
    let mesh = multi_defect_mesh(&lattice, &part, &centers, 8, 5.0).unwrap();
    let owner = |p: Vec2| {
        let id = lattice.id_of(p).unwrap();
        mesh.elements.iter().find(|e| e.members.contains(&id)).unwrap().center
    };
    assert_eq!(owner(Vec2::new(-3.0, 0.0)), centers[0]);
    assert_eq!(owner(Vec2::new(3.0, 0.0)), centers[1]);
    // Equidistant sites go to the lexicographically smaller centre.
    assert_eq!(owner(Vec2::new(0.0, 0.0)), centers[0]);
    let total: usize = mesh.elements.iter().map(|e| e.members.len()).sum();
    assert_eq!(total, omega_c(&lattice, &part, 5.0).len());
}

#[test]
fn marked_sites_split_by_proximity() {
    let lattice = build_lattice(&LatticeSpec::single_vacancy(), 20.0).unwrap();
    let part = decompose_ball(&lattice, 3.0, 9.0, 5.0).unwrap();
    let near_qm = lattice.id_of(Vec2::new(4.0, 0.0)).unwrap();
    let near_ff = lattice.id_of(Vec2::new(9.0, 0.0)).unwrap();
    let (q, m) = split_marked(&[near_qm, near_ff], &part, &lattice);
    assert_eq!(q, vec![near_qm]);
    assert_eq!(m, vec![near_ff]);

    let refined = refine_partition(&part, &q, &m, &lattice, 5.0).unwrap();
    assert_eq!(refined.r_qm, 5.0);
    assert_eq!(refined.r_mm, 10.0);
    assert_eq!(refined.labels[near_qm], Region::Qm);
    assert_eq!(refined.labels[near_ff], Region::Mm);
    assert!(refine_partition(&part, &[], &[], &lattice, 5.0).unwrap().same_regions(&part));

    // QM growth drags the MM radius along to keep the buffer inside MM.
    let far_qm = lattice.id_of(Vec2::new(7.0, 0.0)).unwrap();
    let grown = refine_partition(&part, &[far_qm], &[], &lattice, 5.0).unwrap();
    assert_eq!(grown.r_qm, 8.0);
    assert_eq!(grown.r_mm, 13.0);
}
