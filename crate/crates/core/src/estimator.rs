//! Residual-force a posteriori indicator, graded sampling meshes and the
//! sampled indicator.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::coupling::{center_distance, Region, RegionPartition};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::lattice::{DefectiveLattice, Displacement};
use crate::par::{self, Execution};
use crate::tightbinding::{total_forces, Cluster, TbModel};

const TOL: f64 = 1e-9;

/// `f_ℓ` computed from the finite system `Λ ∩ B_{r_cut}(ℓ)` at `y`.
pub fn truncated_force_at(model: &TbModel, lattice: &DefectiveLattice, site: usize, y: &[Vec2], r_cut: f64) -> Result<Vec2> {
    lattice.check_id(site)?;
    let x = lattice.site(site);
    if x.norm() + r_cut > lattice.domain_radius() + TOL {
        return Err(Error::Geometry(format!(
            "force ball of radius {r_cut} about site {site} (|x| = {:.3}) leaves the domain of radius {}",
            x.norm(),
            lattice.domain_radius()
        )));
    }
    let ids = lattice.ball(x, r_cut);
    let local = ids.binary_search(&site).expect("site lies in its own ball");
    let cluster = Cluster::from_lattice(lattice, &ids, y)?;
    Ok(total_forces(model, &cluster)?[local])
}

/// [`truncated_force_at`] with displacements instead of positions.
pub fn truncated_force(model: &TbModel, lattice: &DefectiveLattice, site: usize, u: &Displacement, r_cut: f64) -> Result<Vec2> {
    if u.len() != lattice.len() {
        return Err(Error::Dimension {
            expected: lattice.len(),
            found: u.len(),
        });
    }
    truncated_force_at(model, lattice, site, &u.positions(lattice), r_cut)
}

/// `Ω_c`: sites within `r_cut` of some QM or MM site, sorted by id.
pub fn omega_c(lattice: &DefectiveLattice, partition: &RegionPartition, r_cut: f64) -> Vec<usize> {
    let mut mark = vec![false; lattice.len()];
    for (l, lab) in partition.labels.iter().enumerate() {
        if *lab != Region::Ff {
            for k in lattice.ball(lattice.site(l), r_cut) {
                mark[k] = true;
            }
        }
    }
    (0..lattice.len()).filter(|&i| mark[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndicatorMode {
    Full,
    Sampled,
}

/// One element of an indicator report; in full mode each element is a site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorEntry {
    pub element: usize,
    pub repatom: usize,
    /// Distance of the repatom from the nearest defect centre.
    pub radius: f64,
    pub weight: f64,
    pub force: f64,
    pub eta: f64,
    #[serde(skip)]
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorReport {
    pub entries: Vec<IndicatorEntry>,
    pub total: f64,
    pub r_cut: f64,
    pub mode: IndicatorMode,
    pub force_evaluations: usize,
}

impl IndicatorReport {
    /// η values indexed by element id.
    pub fn etas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.eta).collect()
    }

    /// Write one CSV row per element.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Element of the sampling mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshElement {
    pub id: usize,
    pub center: Vec2,
    /// Radial band `i` (1-based) and angular sector `j` (1-based).
    pub band: usize,
    pub sector: usize,
    pub repatom: usize,
    pub weight: f64,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledMesh {
    pub elements: Vec<MeshElement>,
    pub radii: Vec<f64>,
    pub angles: Vec<f64>,
    /// Number of sites covered by the mesh.
    pub covered: usize,
}

fn assemble_report(
    elements: Vec<(usize, Vec<usize>, f64)>,
    lattice: &DefectiveLattice,
    centers: &[Vec2],
    mode: IndicatorMode,
    r_cut: f64,
    exec: Execution,
    force: &(dyn Fn(usize) -> Result<Vec2> + Sync),
) -> Result<IndicatorReport> {
    let forces = par::try_map(exec, &elements, |(rep, _, _)| force(*rep))?;
    let mut entries = Vec::with_capacity(elements.len());
    let mut total = 0.0;
    for (id, ((rep, members, w), f)) in elements.into_iter().zip(forces).enumerate() {
        let radius = center_distance(centers, lattice.site(rep));
        let fnorm = f.norm();
        let eta = w * (2.0 + radius).ln() * fnorm;
        total += eta;
        entries.push(IndicatorEntry {
            element: id,
            repatom: rep,
            radius,
            weight: w,
            force: fnorm,
            eta,
            members,
        });
    }
    let n = entries.len();
    Ok(IndicatorReport {
        entries,
        total,
        r_cut,
        mode,
        force_evaluations: n,
    })
}

/// `η_rcut = Σ_{ℓ ∈ Ω_c} log(2 + |ℓ|) |f_ℓ|` with a caller-supplied force.
pub fn full_indicator_with(
    lattice: &DefectiveLattice,
    partition: &RegionPartition,
    r_cut: f64,
    exec: Execution,
    force: &(dyn Fn(usize) -> Result<Vec2> + Sync),
) -> Result<IndicatorReport> {
    let elements = omega_c(lattice, partition, r_cut)
        .into_iter()
        .map(|l| (l, vec![l], 1.0))
        .collect();
    assemble_report(elements, lattice, &partition.centers, IndicatorMode::Full, r_cut, exec, force)
}

/// Full indicator with truncated TB forces.
pub fn full_indicator(
    model: &TbModel,
    lattice: &DefectiveLattice,
    u: &Displacement,
    partition: &RegionPartition,
    r_cut: f64,
    exec: Execution,
) -> Result<IndicatorReport> {
    let y = u.positions(lattice);
    full_indicator_with(lattice, partition, r_cut, exec, &|l| {
        truncated_force_at(model, lattice, l, &y, r_cut)
    })
}

/// `(Σ |f_ℓ|^{6/5})^{5/6}`, the three-dimensional form of the indicator.
pub fn d3_indicator_formula<V: AsRef<[f64]>>(forces: &[V]) -> f64 {
    forces
        .iter()
        .map(|f| {
            let n = f.as_ref().iter().map(|v| v * v).sum::<f64>().sqrt();
            n.powf(1.2)
        })
        .sum::<f64>()
        .powf(5.0 / 6.0)
}

/// Radial lines `r_0 = 0 < r_1 < ... < r_{n_r} = R_MM + r_cut`.
pub fn graded_radii(r_qm: f64, r_mm: f64, r_cut: f64) -> Vec<f64> {
    let n_qm = r_qm.round().max(1.0);
    let h_qm = r_qm / n_qm;
    let mut radii = vec![0.0];
    for k in 1..=(n_qm as usize) {
        radii.push(h_qm * k as f64);
    }
    *radii.last_mut().unwrap() = r_qm;

    // Fine-to-coarse spacings up to the middle of the MM annulus.
    let mid = 0.5 * (r_qm + r_mm);
    let mut fine: Vec<f64> = Vec::new();
    let mut r = r_qm;
    while r < mid - TOL {
        let base = 0.5 * (r / n_qm).powf(1.5);
        let mut h = (r / n_qm).powf(1.5);
        for _ in 0..200 {
            let next = base + 0.5 * ((r + h) / n_qm).powf(1.5);
            let done = (next - h).abs() <= 1e-8;
            h = next;
            if done {
                break;
            }
        }
        if !h.is_finite() || r + h > mid {
            h = mid - r;
        }
        fine.push(h);
        r += h;
        radii.push(r);
    }
    // Mirror back towards the MM/FF interface: h_{n+j} = h_{n-j}, continuing
    // with the QM spacing once the fine sequence is exhausted.
    let n1 = fine.len();
    let mut j = 1;
    while r < r_mm - TOL {
        let h = if j < n1 { fine[n1 - 1 - j] } else { h_qm };
        r = (r + h).min(r_mm);
        radii.push(r);
        j += 1;
    }
    // Far field repeats the fine sequence.
    let outer = r_mm + r_cut;
    let mut j = 0;
    while r < outer - TOL {
        let h = fine.get(j).copied().or(fine.last().copied()).unwrap_or(h_qm);
        r = (r + h).min(outer);
        radii.push(r);
        j += 1;
    }
    radii
}

/// Centre of the polar cell: midpoint radius at the bisecting angle.
fn sector_center(center: Vec2, a: f64, b: f64, t0: f64, t1: f64) -> Vec2 {
    center + Vec2::new(0.5 * (a + b), 0.0).rotated(0.5 * (t0 + t1))
}

/// Polar element index of `p` about `center`, or `None` beyond the last radius.
fn locate(p: Vec2, center: Vec2, radii: &[f64], n_theta: usize) -> Option<(usize, usize)> {
    let d = p - center;
    let r = d.norm();
    if r <= TOL {
        return Some((1, 1));
    }
    let band = radii.partition_point(|&ri| ri < r - TOL);
    if band == 0 || band >= radii.len() {
        return None;
    }
    let tau = TAU / n_theta as f64;
    let theta = d.angle();
    // Half-open (θ_{j-1}, θ_j]; θ = 0 is θ_{n_θ} = 2π.
    let mut sector = (theta / tau - 1e-12).ceil() as usize;
    if sector == 0 {
        sector = n_theta;
    }
    Some((band, sector.min(n_theta)))
}

/// Mesh about one centre restricted to the sites `members`.
fn mesh_about(
    lattice: &DefectiveLattice,
    center: Vec2,
    radii: &[f64],
    n_theta: usize,
    members: &[usize],
) -> Vec<MeshElement> {
    let n_r = radii.len() - 1;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n_r * n_theta];
    for &l in members {
        if let Some((i, j)) = locate(lattice.site(l), center, radii, n_theta) {
            buckets[(i - 1) * n_theta + (j - 1)].push(l);
        }
    }
    let tau = TAU / n_theta as f64;
    let mut out = Vec::new();
    for (k, sites) in buckets.into_iter().enumerate() {
        if sites.is_empty() {
            continue;
        }
        let (i, j) = (k / n_theta + 1, k % n_theta + 1);
        let c = sector_center(center, radii[i - 1], radii[i], (j - 1) as f64 * tau, j as f64 * tau);
        let repatom = *sites
            .iter()
            .min_by(|&&a, &&b| {
                let da = (lattice.site(a) - c).norm();
                let db = (lattice.site(b) - c).norm();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap();
        out.push(MeshElement {
            id: 0,
            center,
            band: i,
            sector: j,
            repatom,
            weight: sites.len() as f64,
            members: sites,
        });
    }
    out
}

fn check_mesh_args(lattice: &DefectiveLattice, partition: &RegionPartition, n_theta: usize, r_cut: f64) -> Result<()> {
    if n_theta < 4 {
        return Err(Error::InvalidSpec(format!("n_theta = {n_theta} must be at least 4")));
    }
    let reach = partition.centers.iter().map(|c| c.norm()).fold(0.0, f64::max) + partition.r_mm + r_cut;
    if reach > lattice.domain_radius() + TOL {
        return Err(Error::Geometry(format!(
            "mesh radius {reach:.3} exceeds the domain radius {}",
            lattice.domain_radius()
        )));
    }
    Ok(())
}

/// Graded polar mesh over `Ω_c` about the partition's first centre.
pub fn graded_mesh(lattice: &DefectiveLattice, partition: &RegionPartition, n_theta: usize, r_cut: f64) -> Result<SampledMesh> {
    let centers = partition.centers.clone();
    multi_defect_mesh(lattice, partition, &centers[..1], n_theta, r_cut)
}

/// One graded mesh per centre, each restricted to the sites nearest to it
/// (ties go to the lexicographically smaller centre).
pub fn multi_defect_mesh(
    lattice: &DefectiveLattice,
    partition: &RegionPartition,
    centers: &[Vec2],
    n_theta: usize,
    r_cut: f64,
) -> Result<SampledMesh> {
    check_mesh_args(lattice, partition, n_theta, r_cut)?;
    if centers.is_empty() {
        return Err(Error::InvalidSpec("mesh needs at least one centre".into()));
    }
    for (a, ca) in centers.iter().enumerate() {
        if centers[..a].iter().any(|cb| (*ca - *cb).norm() <= TOL) {
            return Err(Error::InvalidSpec("mesh centres coincide".into()));
        }
    }
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| {
        centers[a]
            .x
            .total_cmp(&centers[b].x)
            .then(centers[a].y.total_cmp(&centers[b].y))
    });
    let omega = omega_c(lattice, partition, r_cut);
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
    for &l in &omega {
        let p = lattice.site(l);
        let mut best = order[0];
        let mut bd = (p - centers[best]).norm();
        for &c in &order[1..] {
            let d = (p - centers[c]).norm();
            if d < bd - TOL {
                best = c;
                bd = d;
            }
        }
        cells[best].push(l);
    }
    let radii = graded_radii(partition.r_qm, partition.r_mm, r_cut);
    let mut elements = Vec::new();
    for (c, cell) in centers.iter().zip(&cells) {
        elements.extend(mesh_about(lattice, *c, &radii, n_theta, cell));
    }
    for (k, e) in elements.iter_mut().enumerate() {
        e.id = k;
    }
    let covered = elements.iter().map(|e| e.members.len()).sum();
    let tau = TAU / n_theta as f64;
    Ok(SampledMesh {
        elements,
        radii,
        angles: (0..=n_theta).map(|j| j as f64 * tau).collect(),
        covered,
    })
}

/// `η^T = w(T) log(2 + |ℓ̃|) |f(ℓ̃)|` with a caller-supplied force.
pub fn sampled_indicator_with(
    lattice: &DefectiveLattice,
    mesh: &SampledMesh,
    centers: &[Vec2],
    r_cut: f64,
    exec: Execution,
    force: &(dyn Fn(usize) -> Result<Vec2> + Sync),
) -> Result<IndicatorReport> {
    let elements = mesh
        .elements
        .iter()
        .map(|e| (e.repatom, e.members.clone(), e.weight))
        .collect();
    assemble_report(elements, lattice, centers, IndicatorMode::Sampled, r_cut, exec, force)
}

/// Sampled indicator with truncated TB forces at the repatoms.
pub fn sampled_indicator(
    model: &TbModel,
    lattice: &DefectiveLattice,
    u: &Displacement,
    mesh: &SampledMesh,
    centers: &[Vec2],
    r_cut: f64,
    exec: Execution,
) -> Result<IndicatorReport> {
    let y = u.positions(lattice);
    sampled_indicator_with(lattice, mesh, centers, r_cut, exec, &|l| {
        truncated_force_at(model, lattice, l, &y, r_cut)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d3_formula() {
        assert_eq!(d3_indicator_formula::<[f64; 3]>(&[]), 0.0);
        assert!((d3_indicator_formula(&[[0.0, 1.0, 0.0]]) - 1.0).abs() < 1e-15);
        let two = d3_indicator_formula(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!((two - 2f64.powf(5.0 / 6.0)).abs() < 1e-14);
    }

    #[test]
    fn radii_start_with_unit_bands() {
        let r = graded_radii(4.0, 16.0, 5.0);
        assert_eq!(&r[..5], &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!((r.last().unwrap() - 21.0).abs() < 1e-12);
        assert!(r.windows(2).all(|w| w[1] > w[0]));
        assert!(r.iter().any(|&x| (x - 10.0).abs() < 1e-12));
        assert!(r.iter().any(|&x| (x - 16.0).abs() < 1e-12));
    }

    #[test]
    fn locate_half_open_sectors() {
        let radii = [0.0, 1.0, 2.0];
        assert_eq!(locate(Vec2::new(1.0, 0.0), Vec2::ZERO, &radii, 8), Some((1, 8)));
        assert_eq!(locate(Vec2::ZERO, Vec2::ZERO, &radii, 8), Some((1, 1)));
        assert_eq!(locate(Vec2::new(0.0, 1.5), Vec2::ZERO, &radii, 8), Some((2, 2)));
        assert_eq!(locate(Vec2::new(3.0, 0.0), Vec2::ZERO, &radii, 8), None);
    }
}
