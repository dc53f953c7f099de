//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qmmm_adapt::adaptive::{dorfler_select, AdaptiveTrace};
use qmmm_adapt::coupling::{decompose_ball, HybridProblem, Region};
use qmmm_adapt::lattice::{build_lattice, Displacement, LatticeSpec};
use qmmm_adapt::mmpotential::{build_mm_potential, homogeneous_site_energy, mm_site_energy, mm_site_gradient, MmPotential};
use qmmm_adapt::par::Execution;
use qmmm_adapt::tightbinding::{
    band_energy, cluster_spectrum, cluster_site_energies, evaluate, projected_energy_gradient, site_energies,
    total_energy, total_forces, Cluster, Projection, TbModel,
};
use qmmm_adapt::Vec2;

pub const FD_STEP: f64 = 1e-5;

/// Cache shared across test binaries; `QMMM_CACHE_DIR` overrides it.
pub fn cache_dir() -> PathBuf {
    std::env::var_os("QMMM_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("qmmm-cache"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn potential() -> MmPotential {
    build_mm_potential(&TbModel::morse_toy(), &LatticeSpec::triangular(), 3.05, 2, Execution::Parallel).unwrap()
}

/// Triangular patch of radius `r` about the origin, optionally without the origin.
pub fn patch(r: f64, vacancy: bool) -> Vec<Vec2> {
    let spec = if vacancy {
        LatticeSpec::single_vacancy()
    } else {
        LatticeSpec::triangular()
    };
    build_lattice(&spec, r).unwrap().sites().to_vec()
}

pub fn jiggle(points: &[Vec2], amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<Vec2> {
    points
        .iter()
        .map(|p| *p + Vec2::new(rng.random_range(-amplitude..amplitude), rng.random_range(-amplitude..amplitude)))
        .collect()
}

/// Central differences of `f` in every coordinate of `x`.
pub fn central_difference(x: &[Vec2], step: f64, f: &dyn Fn(&[Vec2]) -> f64) -> Vec<Vec2> {
    let mut out = vec![Vec2::ZERO; x.len()];
    let mut y = x.to_vec();
    for i in 0..x.len() {
        for a in 0..2 {
            let base = y[i].component(a);
            *y[i].component_mut(a) = base + step;
            let fp = f(&y);
            *y[i].component_mut(a) = base - step;
            let fm = f(&y);
            *y[i].component_mut(a) = base;
            *out[i].component_mut(a) = (fp - fm) / (2.0 * step);
        }
    }
    out
}

/// `max |a - b| / max |b|` over all components.
pub fn relative_error(a: &[Vec2], b: &[Vec2]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (*x - *y).max_abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.max_abs()).fold(0.0, f64::max);
    num / den
}

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

/// Relative errors of the four analytic gradients against central differences.
pub fn gradient_errors(seed: u64) -> [f64; 4] {
    let model = TbModel::morse_toy();
    let mut rng = rng(seed);

    let base = patch(2.6, true);
    let y = jiggle(&base, 0.05, &mut rng);
    let c = Cluster::rigid(base.clone()).with_positions(y.clone());
    let forces = total_forces(&model, &c).unwrap();
    let grad: Vec<Vec2> = forces.iter().map(|f| -*f).collect();
    let fd = central_difference(&y, FD_STEP, &|p| total_energy(&model, &c.with_positions(p.to_vec())).unwrap());
    let e_forces = relative_error(&grad, &fd);

    let proj: Vec<usize> = (0..c.len()).filter(|i| i % 3 == 0).collect();
    let pg = projected_energy_gradient(&model, &c, &proj).unwrap();
    let fd = central_difference(&y, FD_STEP, &|p| {
        evaluate(&model, &c.with_positions(p.to_vec()), &Projection::Sites(proj.clone()))
            .unwrap()
            .energy
    });
    let e_proj = relative_error(&pg, &fd);

    let pot = potential();
    // The MM stencil may not see a vacancy, so a vacancy cluster this small
    // cannot be coupled; the hybrid check runs on the perfect crystal.
    let lattice = build_lattice(&LatticeSpec::triangular(), 11.0).unwrap();
    let partition = decompose_ball(&lattice, 2.0, 4.5, 0.95).unwrap();
    let problem = HybridProblem::new(&lattice, &model, &partition, Some(&pot)).unwrap();
    assert!(problem.cluster_size() <= 30);
    let free = problem.free_sites().to_vec();
    let mut u0 = vec![Vec2::ZERO; lattice.len()];
    for &l in &free {
        u0[l] = Vec2::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
    }
    let (_, g) = problem.energy_and_gradient(&Displacement::new(u0.clone()).unwrap()).unwrap();
    let sub: Vec<Vec2> = free.iter().map(|&l| u0[l]).collect();
    let fd = central_difference(&sub, FD_STEP, &|p| {
        let mut u = u0.clone();
        for (k, &l) in free.iter().enumerate() {
            u[l] = p[k];
        }
        problem.energy(&Displacement::new(u).unwrap()).unwrap()
    });
    let g_free: Vec<Vec2> = free.iter().map(|&l| g[l]).collect();
    let e_hybrid = relative_error(&g_free, &fd);

    let gm: Vec<Vec2> = (0..pot.len())
        .map(|_| Vec2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
        .collect();
    let mg = mm_site_gradient(&pot, &gm).unwrap();
    let fd = central_difference(&gm, FD_STEP, &|p| mm_site_energy(&pot, p).unwrap());
    let e_mm = relative_error(&mg, &fd);

    [e_forces, e_proj, e_hybrid, e_mm]
}

pub fn check_gradients(seed: u64) -> Outcome {
    let e = gradient_errors(seed);
    Outcome {
        pass: e.iter().all(|&x| x <= 1e-6),
        detail: format!(
            "rel errors forces {:.1e}, projected {:.1e}, hybrid {:.1e}, mm {:.1e} (tol 1e-6)",
            e[0], e[1], e[2], e[3]
        ),
    }
}

/// Worst deviations in the conservation and invariance suite.
pub struct Conservation {
    pub site_sum: f64,
    pub force_sum: f64,
    pub rotation: f64,
    pub permutation: f64,
    pub gauge: f64,
}

/// Rigid rotation of `points` about the origin.
pub fn rotate_all(points: &[Vec2], angle: f64) -> Vec<Vec2> {
    points.iter().map(|p| p.rotated(angle)).collect()
}

pub fn conservation(seed: u64, trials: usize) -> Conservation {
    let model = TbModel::morse_toy();
    let band_model = model.clone().band_only();
    let mut rng = rng(seed);
    let mut out = Conservation {
        site_sum: 0.0,
        force_sum: 0.0,
        rotation: 0.0,
        permutation: 0.0,
        gauge: 0.0,
    };
    let base = patch(2.6, true);
    for _ in 0..trials {
        let y = jiggle(&base, 0.08, &mut rng);
        let c = Cluster::rigid(base.clone()).with_positions(y.clone());
        let spec = cluster_spectrum(&band_model, &c).unwrap();
        let e = band_energy(&spec, &band_model);
        let s: f64 = site_energies(&spec, &band_model).iter().sum();
        out.site_sum = out.site_sum.max((s - e).abs());

        let f = total_forces(&model, &c).unwrap();
        let sum = f.iter().fold(Vec2::ZERO, |a, b| a + *b);
        out.force_sum = out.force_sum.max(sum.max_abs());

        let site = cluster_site_energies(&model, &c).unwrap();
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let rc = c.with_positions(rotate_all(&y, angle));
        let rsite = cluster_site_energies(&model, &rc).unwrap();
        let rband = band_energy(&cluster_spectrum(&band_model, &rc).unwrap(), &band_model);
        let dev = site.iter().zip(&rsite).map(|(a, b)| (a - b).abs()).fold((rband - e).abs(), f64::max);
        out.rotation = out.rotation.max(dev);

        let mut perm: Vec<usize> = (0..y.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pc = Cluster::rigid(perm.iter().map(|&i| base[i]).collect())
            .with_positions(perm.iter().map(|&i| y[i]).collect());
        let psite = cluster_site_energies(&model, &pc).unwrap();
        let pband = band_energy(&cluster_spectrum(&band_model, &pc).unwrap(), &band_model);
        let dev = perm
            .iter()
            .enumerate()
            .map(|(k, &i)| (psite[k] - site[i]).abs())
            .fold((pband - e).abs(), f64::max);
        out.permutation = out.permutation.max(dev);
    }
    out.gauge = gauge_deviation(seed);
    out
}

/// Seminorm change under a constant shift, on dyadic data so that the
/// differences are exact in floating point.
pub fn gauge_deviation(seed: u64) -> f64 {
    use qmmm_adapt::lattice::{seminorm, SeminormParams};
    let lattice = build_lattice(&LatticeSpec::single_vacancy(), 8.0).unwrap();
    let mut rng = rng(seed ^ 0x9e37);
    let dyadic = |rng: &mut ChaCha8Rng| rng.random_range(-512i32..512) as f64 / 1024.0;
    let u = Displacement::new((0..lattice.len()).map(|_| Vec2::new(dyadic(&mut rng), dyadic(&mut rng))).collect()).unwrap();
    let params = SeminormParams::default();
    let a = seminorm(&u, &params, &lattice).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..8 {
        let t = Vec2::new(dyadic(&mut rng) * 4.0, dyadic(&mut rng) * 4.0);
        let b = seminorm(&u.shifted(t), &params, &lattice).unwrap();
        worst = worst.max((a - b).abs());
    }
    worst
}

pub fn check_conservation(seed: u64) -> Outcome {
    let c = conservation(seed, 8);
    Outcome {
        pass: c.site_sum <= 1e-10 && c.force_sum <= 1e-9 && c.rotation <= 1e-10 && c.permutation <= 1e-10 && c.gauge == 0.0,
        detail: format!(
            "site sum {:.1e}, force sum {:.1e}, rotation {:.1e}, permutation {:.1e}, gauge {:.1e}",
            c.site_sum, c.force_sum, c.rotation, c.permutation, c.gauge
        ),
    }
}

/// Smallest cardinality of any subset reaching `tau` of the total.
pub fn exhaustive_min(etas: &[f64], tau: f64) -> usize {
    let total: f64 = etas.iter().sum();
    let n = etas.len();
    let mut best = n;
    for mask in 0u32..(1 << n) {
        let k = mask.count_ones() as usize;
        if k >= best {
            continue;
        }
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| etas[i]).sum();
        if s >= tau * total {
            best = k;
        }
    }
    best
}

/// Integer-valued indicators so that every partial sum is exact.
pub fn integer_etas(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=12);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0..50) as f64).collect();
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    v
}

pub fn dorfler_violations(seed: u64, cases: usize) -> (usize, usize) {
    let mut rng = rng(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let etas = integer_etas(&mut rng);
        let total: f64 = etas.iter().sum();
        let tau = rng.random_range(1..100) as f64 / 100.0;
        let m = dorfler_select(&etas, tau).unwrap();
        let sum: f64 = m.elements.iter().map(|&i| etas[i]).sum();
        let mut ok = sum >= tau * total && m.elements.len() == exhaustive_min(&etas, tau);
        let tau2 = (tau + rng.random_range(0.0..(1.0 - tau))).min(0.999);
        let m2 = dorfler_select(&etas, tau2).unwrap();
        ok &= m.elements.iter().all(|e| m2.elements.contains(e));
        let scale = 2f64.powi(rng.random_range(-20..20));
        let scaled: Vec<f64> = etas.iter().map(|e| e * scale).collect();
        ok &= dorfler_select(&scaled, tau).unwrap() == m;
        if !ok {
            bad += 1;
        }
    }
    (bad, cases)
}

pub fn check_dorfler(seed: u64) -> Outcome {
    let (bad, n) = dorfler_violations(seed, 200);
    Outcome {
        pass: bad == 0,
        detail: format!("{bad} of {n} random vectors violate sum, minimality, monotonicity or scaling"),
    }
}

/// `|V#(εg) - V^MM(εg)| / |V#(εg/2) - V^MM(εg/2)|` for a seeded direction.
pub fn mm_remainder_ratio(seed: u64, eps: f64) -> f64 {
    let model = TbModel::morse_toy();
    let pot = potential();
    let mut rng = rng(seed);
    let g: Vec<Vec2> = (0..pot.len())
        .map(|_| Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let rem = |e: f64| {
        let ge: Vec<Vec2> = g.iter().map(|v| *v * e).collect();
        let exact = homogeneous_site_energy(&model, &pot.stencil, &ge).unwrap().0;
        (exact - mm_site_energy(&pot, &ge).unwrap()).abs()
    };
    rem(eps) / rem(eps / 2.0)
}

pub fn check_mm_order(seed: u64) -> Outcome {
    let ratios: Vec<f64> = (0..3).map(|k| mm_remainder_ratio(seed + k, 0.005)).collect();
    Outcome {
        pass: ratios.iter().all(|r| (6.0..=10.0).contains(r)),
        detail: format!("remainder ratios {ratios:.3?} (need [6, 10])"),
    }
}

/// Whether QM sites plus the vacancies form one nearest-neighbour cluster
/// that surrounds every vacancy.
pub fn qm_connected_with(snapshot: &qmmm_adapt::adaptive::IterationSnapshot, vacancies: &[Vec2]) -> bool {
    let lat = &snapshot.lattice;
    let mut nodes: Vec<Vec2> = snapshot.partition.ids(Region::Qm).iter().map(|&l| lat.site(l)).collect();
    for v in vacancies {
        let ring = LatticeSpec::triangular().stencil(1.01);
        let all_qm = ring.iter().all(|(_, r)| match lat.id_of(*v + *r) {
            Some(k) => snapshot.partition.labels[k] == Region::Qm,
            None => false,
        });
        if !all_qm {
            return false;
        }
        nodes.push(*v);
    }
    let n = nodes.len();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && (nodes[i] - nodes[j]).norm() <= 1.0 + 1e-9 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

pub fn trace_summary(trace: &AdaptiveTrace) -> String {
    trace
        .records
        .iter()
        .map(|r| {
            format!(
                "{}:{:.3e}/{}",
                r.iter,
                r.eta_total,
                r.true_error.map(|e| format!("{e:.2e}")).unwrap_or_else(|| "-".into())
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}
