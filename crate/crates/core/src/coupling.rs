//! Region decomposition, the hybrid QM/MM energy functional and its
//! minimization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::lattice::{DefectiveLattice, Displacement};
use crate::mmpotential::{mm_site_energy, mm_site_gradient, MmPotential};
use crate::tightbinding::{evaluate, Cluster, Projection, TbModel};

const TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Qm,
    Mm,
    Ff,
}

impl Region {
    pub fn label(self) -> &'static str {
        match self {
            Region::Qm => "QM",
            Region::Mm => "MM",
            Region::Ff => "FF",
        }
    }
}

/// Hybrid QM/MM, or a QM region embedded in a clamped crystal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionKind {
    Hybrid,
    PureQm,
}

/// QM / MM / FF labels on a lattice, plus the buffer shell.
///
/// In `PureQm` partitions the buffer belongs to the clamped far field and the
/// energy is the total cluster energy of QM ∪ BUF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub kind: PartitionKind,
    pub labels: Vec<Region>,
    /// Sorted ids of the buffer shell.
    pub buffer: Vec<usize>,
    pub r_qm: f64,
    pub r_mm: f64,
    pub r_cut_buffer: f64,
    /// Defect centres the balls are drawn around.
    pub centers: Vec<Vec2>,
}

impl RegionPartition {
    /// Outer radius of the buffer shell.
    pub fn r_buf(&self) -> f64 {
        self.r_qm + self.r_cut_buffer
    }

    pub fn ids(&self, region: Region) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == region).collect()
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|&&r| r == region).count()
    }

    /// Free sites (QM ∪ MM), sorted.
    pub fn free(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != Region::Ff).collect()
    }

    /// QM ∪ BUF, sorted.
    pub fn qm_cluster(&self) -> Vec<usize> {
        let mut ids = self.ids(Region::Qm);
        ids.extend_from_slice(&self.buffer);
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Distance from `p` to the nearest centre.
    pub fn center_distance(&self, p: Vec2) -> f64 {
        center_distance(&self.centers, p)
    }

    /// Same radii and labels, i.e. no refinement happened.
    pub fn same_regions(&self, other: &RegionPartition) -> bool {
        self.labels == other.labels && self.buffer == other.buffer
    }

    /// Check disjointness, the buffer condition and buffer ⊆ MM where applicable.
    pub fn check(&self, lattice: &DefectiveLattice) -> Result<()> {
        if self.labels.len() != lattice.len() {
            return Err(Error::Dimension {
                expected: lattice.len(),
                found: self.labels.len(),
            });
        }
        let cluster = self.qm_cluster();
        for l in self.ids(Region::Qm) {
            for k in lattice.ball(lattice.site(l), self.r_cut_buffer) {
                if cluster.binary_search(&k).is_err() {
                    return Err(Error::Constraint(format!(
                        "buffer condition violated: site {k} near QM site {l} is outside QM ∪ BUF"
                    )));
                }
            }
        }
        if self.kind == PartitionKind::Hybrid {
            if let Some(b) = self.buffer.iter().find(|&&b| self.labels[b] != Region::Mm) {
                return Err(Error::Constraint(format!("buffer site {b} is not an MM site")));
            }
        }
        Ok(())
    }
}

pub fn center_distance(centers: &[Vec2], p: Vec2) -> f64 {
    centers
        .iter()
        .map(|c| (p - *c).norm())
        .fold(f64::INFINITY, f64::min)
}

fn check_radii(lattice: &DefectiveLattice, centers: &[Vec2], r_qm: f64, r_mm: f64, r_cut_buffer: f64) -> Result<()> {
    if centers.is_empty() {
        return Err(Error::InvalidSpec("at least one defect centre is required".into()));
    }
    if !(r_qm >= 2.0) {
        return Err(Error::Geometry(format!("R_QM = {r_qm} is below the minimum of 2")));
    }
    if !(r_cut_buffer > 0.0) {
        return Err(Error::Geometry("buffer cutoff must be positive".into()));
    }
    let reach = centers.iter().map(|c| c.norm()).fold(0.0, f64::max) + r_mm + r_cut_buffer;
    if reach > lattice.domain_radius() + TOL {
        return Err(Error::DomainTooSmall {
            required: reach,
            available: lattice.domain_radius(),
        });
    }
    Ok(())
}

/// Balls about the defect centres: QM for `d <= R_QM`, MM for `d <= R_MM`.
pub fn decompose_multi(
    lattice: &DefectiveLattice,
    centers: &[Vec2],
    r_qm: f64,
    r_mm: f64,
    r_cut_buffer: f64,
) -> Result<RegionPartition> {
    check_radii(lattice, centers, r_qm, r_mm, r_cut_buffer)?;
    if !(r_mm >= r_qm + r_cut_buffer - TOL) {
        return Err(Error::Geometry(format!(
            "R_MM = {r_mm} must be at least R_QM + r_cut = {}",
            r_qm + r_cut_buffer
        )));
    }
    let labels: Vec<Region> = lattice
        .sites()
        .iter()
        .map(|p| {
            let d = center_distance(centers, *p);
            if d <= r_qm + TOL {
                Region::Qm
            } else if d <= r_mm + TOL {
                Region::Mm
            } else {
                Region::Ff
            }
        })
        .collect();
    let buffer = buffer_shell(lattice, &labels, r_cut_buffer);
    let p = RegionPartition {
        kind: PartitionKind::Hybrid,
        labels,
        buffer,
        r_qm,
        r_mm,
        r_cut_buffer,
        centers: centers.to_vec(),
    };
    Ok(p)
}

/// Balls about the origin.
pub fn decompose_ball(lattice: &DefectiveLattice, r_qm: f64, r_mm: f64, r_cut_buffer: f64) -> Result<RegionPartition> {
    decompose_multi(lattice, &[Vec2::ZERO], r_qm, r_mm, r_cut_buffer)
}

/// QM ball embedded in the clamped crystal, no MM region.
pub fn pure_qm_partition(
    lattice: &DefectiveLattice,
    centers: &[Vec2],
    r_qm: f64,
    r_cut_buffer: f64,
) -> Result<RegionPartition> {
    check_radii(lattice, centers, r_qm, r_qm, r_cut_buffer)?;
    let labels: Vec<Region> = lattice
        .sites()
        .iter()
        .map(|p| {
            if center_distance(centers, *p) <= r_qm + TOL {
                Region::Qm
            } else {
                Region::Ff
            }
        })
        .collect();
    let buffer = buffer_shell(lattice, &labels, r_cut_buffer);
    Ok(RegionPartition {
        kind: PartitionKind::PureQm,
        labels,
        buffer,
        r_qm,
        r_mm: r_qm,
        r_cut_buffer,
        centers: centers.to_vec(),
    })
}

/// Non-QM sites within `r` of some QM site.
fn buffer_shell(lattice: &DefectiveLattice, labels: &[Region], r: f64) -> Vec<usize> {
    let mut mark = vec![false; labels.len()];
    for (l, lab) in labels.iter().enumerate() {
        if *lab == Region::Qm {
            for k in lattice.ball(lattice.site(l), r) {
                if labels[k] != Region::Qm {
                    mark[k] = true;
                }
            }
        }
    }
    (0..labels.len()).filter(|&i| mark[i]).collect()
}

/// Converged (or best-effort) state of a coupled minimization.
#[derive(Debug, Clone)]
pub struct HybridState {
    pub u: Displacement,
    pub partition: RegionPartition,
    pub energy: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
}

/// One MM site term: the site and the ids of its stencil neighbours
/// (`None` outside the materialized domain, where `u = 0`).
#[derive(Debug, Clone)]
struct MmTerm {
    site: usize,
    neighbours: Vec<Option<usize>>,
}

/// Precomputed data for repeated hybrid-energy evaluations.
pub struct HybridProblem<'a> {
    lattice: &'a DefectiveLattice,
    model: &'a TbModel,
    partition: &'a RegionPartition,
    pot: Option<&'a MmPotential>,
    cluster_ids: Vec<usize>,
    qm_local: Vec<usize>,
    free: Vec<usize>,
    terms: Vec<MmTerm>,
    e_ref: f64,
}

impl<'a> HybridProblem<'a> {
    pub fn new(
        lattice: &'a DefectiveLattice,
        model: &'a TbModel,
        partition: &'a RegionPartition,
        pot: Option<&'a MmPotential>,
    ) -> Result<Self> {
        partition.check(lattice)?;
        let cluster_ids = partition.qm_cluster();
        let qm_local: Vec<usize> = cluster_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| partition.labels[id] == Region::Qm)
            .map(|(i, _)| i)
            .collect();
        let free = partition.free();
        let terms = match partition.kind {
            PartitionKind::PureQm => Vec::new(),
            PartitionKind::Hybrid => {
                let pot = pot.ok_or_else(|| {
                    Error::Config("a hybrid partition needs an MM potential".into())
                })?;
                mm_terms(lattice, partition, pot)?
            }
        };
        let mut prob = HybridProblem {
            lattice,
            model,
            partition,
            pot,
            cluster_ids,
            qm_local,
            free,
            terms,
            e_ref: 0.0,
        };
        let x0 = lattice.sites().to_vec();
        prob.e_ref = prob.qm_part(&x0, false)?.0;
        Ok(prob)
    }

    pub fn free_sites(&self) -> &[usize] {
        &self.free
    }

    pub fn partition(&self) -> &RegionPartition {
        self.partition
    }

    pub fn cluster_size(&self) -> usize {
        self.cluster_ids.len()
    }

    fn projection(&self) -> Projection {
        match self.partition.kind {
            PartitionKind::PureQm => Projection::All,
            PartitionKind::Hybrid => Projection::Sites(self.qm_local.clone()),
        }
    }

    fn qm_part(&self, y: &[Vec2], with_grad: bool) -> Result<(f64, Vec<Vec2>)> {
        if self.qm_local.is_empty() {
            return Ok((0.0, Vec::new()));
        }
        let cluster = Cluster::from_lattice(self.lattice, &self.cluster_ids, y)?;
        let ev = evaluate(self.model, &cluster, &self.projection())?;
        Ok((ev.energy, if with_grad { ev.gradient } else { Vec::new() }))
    }

    fn check_u(&self, u: &Displacement) -> Result<()> {
        if u.len() != self.lattice.len() {
            return Err(Error::Dimension {
                expected: self.lattice.len(),
                found: u.len(),
            });
        }
        for (i, lab) in self.partition.labels.iter().enumerate() {
            if *lab == Region::Ff && u[i] != Vec2::ZERO {
                return Err(Error::Constraint(format!("nonzero displacement on far-field site {i}")));
            }
        }
        Ok(())
    }

    fn stencil_differences(&self, u: &Displacement, term: &MmTerm) -> Vec<Vec2> {
        let ul = u[term.site];
        term.neighbours
            .iter()
            .map(|k| k.map_or(Vec2::ZERO, |k| u[k]) - ul)
            .collect()
    }

    /// Hybrid energy difference relative to the reference configuration.
    pub fn energy(&self, u: &Displacement) -> Result<f64> {
        self.check_u(u)?;
        let y = u.positions(self.lattice);
        let mut e = self.qm_part(&y, false)?.0 - self.e_ref;
        if let Some(pot) = self.pot {
            for t in &self.terms {
                e += mm_site_energy(pot, &self.stencil_differences(u, t))? - pot.v0;
            }
        }
        Ok(e)
    }

    /// Energy and gradient; gradient entries on FF sites are exactly zero.
    pub fn energy_and_gradient(&self, u: &Displacement) -> Result<(f64, Vec<Vec2>)> {
        self.check_u(u)?;
        let y = u.positions(self.lattice);
        let (eq, gq) = self.qm_part(&y, true)?;
        let mut e = eq - self.e_ref;
        let mut grad = vec![Vec2::ZERO; self.lattice.len()];
        for (local, g) in gq.iter().enumerate() {
            grad[self.cluster_ids[local]] += *g;
        }
        if let Some(pot) = self.pot {
            for t in &self.terms {
                let g = self.stencil_differences(u, t);
                e += mm_site_energy(pot, &g)? - pot.v0;
                let dg = mm_site_gradient(pot, &g)?;
                for (k, d) in t.neighbours.iter().zip(&dg) {
                    if let Some(k) = k {
                        grad[*k] += *d;
                    }
                    grad[t.site] -= *d;
                }
            }
        }
        for (i, lab) in self.partition.labels.iter().enumerate() {
            if *lab == Region::Ff {
                grad[i] = Vec2::ZERO;
            }
        }
        Ok((e, grad))
    }
}

/// MM site terms: every non-QM site whose stencil can see a free site.
fn mm_terms(lattice: &DefectiveLattice, partition: &RegionPartition, pot: &MmPotential) -> Result<Vec<MmTerm>> {
    let mut terms = Vec::new();
    for l in 0..lattice.len() {
        if partition.labels[l] == Region::Qm {
            continue;
        }
        let c = lattice.coords(l);
        let mut neighbours = Vec::with_capacity(pot.len());
        let mut sees_free = partition.labels[l] != Region::Ff;
        for (n, rho) in pot.offsets.iter().zip(&pot.stencil) {
            let k = lattice.id_of_coords([c[0] + n[0], c[1] + n[1]]);
            if let Some(k) = k {
                sees_free |= partition.labels[k] != Region::Ff;
            }
            neighbours.push(k);
            if k.is_none() && lattice.is_vacancy(lattice.site(l) + *rho) {
                if partition.labels[l] == Region::Mm {
                    return Err(Error::Geometry(format!(
                        "MM site {l} has a vacancy in its stencil; enlarge the QM region"
                    )));
                }
            }
        }
        if sees_free {
            // A far-field site next to a vacancy only matters if the vacancy
            // is in its stencil and it sees free sites, which the partition geometry rules out.
            if partition.labels[l] == Region::Ff
                && neighbours.iter().zip(&pot.stencil).any(|(k, rho)| k.is_none() && lattice.is_vacancy(lattice.site(l) + *rho))
            {
                return Err(Error::Geometry(format!(
                    "far-field site {l} near a vacancy interacts with free sites"
                )));
            }
            terms.push(MmTerm { site: l, neighbours });
        }
    }
    Ok(terms)
}

/// `ℰ^H(u)`.
pub fn hybrid_energy(
    u: &Displacement,
    partition: &RegionPartition,
    model: &TbModel,
    pot: Option<&MmPotential>,
    lattice: &DefectiveLattice,
) -> Result<f64> {
    HybridProblem::new(lattice, model, partition, pot)?.energy(u)
}

/// `∇ℰ^H(u)`, zero on FF sites.
pub fn hybrid_gradient(
    u: &Displacement,
    partition: &RegionPartition,
    model: &TbModel,
    pot: Option<&MmPotential>,
    lattice: &DefectiveLattice,
) -> Result<Vec<Vec2>> {
    Ok(HybridProblem::new(lattice, model, partition, pot)?
        .energy_and_gradient(u)?
        .1)
}

/// Settings for [`solve_equilibrium`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub g_tol: f64,
    pub max_iter: usize,
    pub memory: usize,
    pub armijo: f64,
    /// Largest displacement change allowed in one step.
    pub max_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            g_tol: 1e-6,
            max_iter: 2000,
            memory: 20,
            armijo: 1e-4,
            max_step: 0.2,
        }
    }
}

/// Absolute slack in the sufficient-decrease test, covering eigensolver round-off.
const ENERGY_NOISE: f64 = 1e-13;

fn inf_norm(g: &[Vec2], free: &[usize]) -> f64 {
    free.iter().map(|&i| g[i].max_abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize the hybrid energy over displacements vanishing on FF, by L-BFGS
/// with a backtracking Armijo line search.
pub fn solve_equilibrium(problem: &HybridProblem<'_>, u0: &Displacement, opts: &SolverOptions) -> Result<HybridState> {
    let free = problem.free_sites().to_vec();
    let pack = |g: &[Vec2]| -> Vec<f64> { free.iter().flat_map(|&i| [g[i].x, g[i].y]).collect() };
    let mut u = u0.clone();
    let (mut e, g) = problem.energy_and_gradient(&u)?;
    let e0 = e;
    let mut evaluations = 1;
    let mut gradient = pack(&g);
    let mut gnorm = inf_norm(&g, &free);
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut iterations = 0;

    while gnorm > opts.g_tol && iterations < opts.max_iter {
        // Two-loop recursion.
        let mut q: Vec<f64> = gradient.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir = q;
        let mut slope = dot(&dir, &gradient);
        if !(slope < 0.0) {
            hist.clear();
            dir = gradient.iter().map(|v| -v).collect();
            slope = dot(&dir, &gradient);
        }
        let dmax = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut step = if hist.is_empty() {
            (opts.max_step / dmax).min(1.0)
        } else {
            (opts.max_step / dmax).min(1.0)
        };

        let mut accepted = None;
        let mut tried_reset = false;
        loop {
            let mut trial = u.clone();
            for (k, &i) in free.iter().enumerate() {
                trial[i] += Vec2::new(dir[2 * k], dir[2 * k + 1]) * step;
            }
            match problem.energy_and_gradient(&trial) {
                Ok((et, gt)) => {
                    evaluations += 1;
                    if et <= e + opts.armijo * step * slope + ENERGY_NOISE {
                        accepted = Some((trial, et, gt));
                        break;
                    }
                }
                Err(Error::Configuration { .. }) => {
                    evaluations += 1;
                }
                Err(err) => return Err(err),
            }
            step *= 0.5;
            if step * dmax < 1e-14 {
                if tried_reset || hist.is_empty() {
                    break;
                }
                // Retry once along steepest descent before giving up.
                tried_reset = true;
                hist.clear();
                dir = gradient.iter().map(|v| -v).collect();
                slope = dot(&dir, &gradient);
                let dmax2 = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                step = (opts.max_step / dmax2).min(1.0);
            }
        }
        let Some((trial, et, gt)) = accepted else {
            return Err(Error::Optimization {
                message: format!("line search failed (|g|inf = {gnorm:.3e}, E = {e:.12e})"),
                iterations,
                last_iterate: u.into_inner(),
            });
        };
        let gnew = pack(&gt);
        let s: Vec<f64> = dir.iter().map(|d| d * step).collect();
        let y: Vec<f64> = gnew.iter().zip(&gradient).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        u = trial;
        e = et;
        gradient = gnew;
        gnorm = inf_norm(&gt, &free);
        iterations += 1;
    }
    debug_assert!(e <= e0 + 1e-12 || iterations == 0);
    Ok(HybridState {
        u,
        partition: problem.partition().clone(),
        energy: e,
        gradient_norm: gnorm,
        converged: gnorm <= opts.g_tol,
        iterations,
        evaluations,
    })
}
