//! Reference lattices with point defects, finite-difference stencils and the
//! exponentially weighted displacement seminorm.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::Vec2;

/// Tolerance used when snapping a point onto `A Z^2`.
const SNAP_TOL: f64 = 1e-8;
/// Radii and angles are quantized to this resolution before sorting.
const ORDER_QUANTUM: f64 = 1e-9;

/// Bravais cell plus the lattice points removed to create the defect core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    /// Columns are the primitive vectors: `cell[r][c]` is row `r`, column `c`.
    pub cell: [[f64; 2]; 2],
    #[serde(default)]
    pub defects: Vec<Vec2>,
    #[serde(default)]
    pub defect_radius: f64,
}

impl LatticeSpec {
    /// The triangular lattice with primitive vectors (1, 0) and (1/2, √3/2).
    pub fn triangular() -> Self {
        let (s, c) = (std::f64::consts::FRAC_PI_3).sin_cos();
        LatticeSpec {
            cell: [[1.0, c], [0.0, s]],
            defects: Vec::new(),
            defect_radius: 0.0,
        }
    }

    /// Triangular lattice with the origin removed.
    pub fn single_vacancy() -> Self {
        Self::triangular().with_vacancies(vec![Vec2::ZERO])
    }

    /// Replace the defect list; the defect radius grows to enclose every vacancy.
    pub fn with_vacancies(mut self, vacancies: Vec<Vec2>) -> Self {
        let r = vacancies.iter().map(|p| p.norm()).fold(0.0, f64::max);
        self.defect_radius = self.defect_radius.max(r);
        self.defects = vacancies;
        self
    }

    pub fn det(&self) -> f64 {
        self.cell[0][0] * self.cell[1][1] - self.cell[0][1] * self.cell[1][0]
    }

    /// `A n` for an integer pair `n`.
    #[inline]
    pub fn point(&self, n: [i64; 2]) -> Vec2 {
        let (i, j) = (n[0] as f64, n[1] as f64);
        Vec2::new(
            self.cell[0][0] * i + self.cell[0][1] * j,
            self.cell[1][0] * i + self.cell[1][1] * j,
        )
    }

    /// Real coordinates `A^{-1} p`.
    fn fractional(&self, p: Vec2) -> [f64; 2] {
        let d = self.det();
        let a = self.cell;
        [
            (a[1][1] * p.x - a[0][1] * p.y) / d,
            (-a[1][0] * p.x + a[0][0] * p.y) / d,
        ]
    }

    /// Integer coordinates of `p` if it lies on `A Z^2`.
    pub fn snap(&self, p: Vec2) -> Option<[i64; 2]> {
        let f = self.fractional(p);
        let n = [f[0].round() as i64, f[1].round() as i64];
        ((self.point(n) - p).norm() <= SNAP_TOL).then_some(n)
    }

    /// Smallest singular value of the cell matrix.
    fn sigma_min(&self) -> f64 {
        let a = self.cell;
        let p = a[0][0] * a[0][0] + a[1][0] * a[1][0];
        let q = a[0][1] * a[0][1] + a[1][1] * a[1][1];
        let r = a[0][0] * a[0][1] + a[1][0] * a[1][1];
        let mean = 0.5 * (p + q);
        let disc = (0.25 * (p - q) * (p - q) + r * r).sqrt();
        (mean - disc).max(0.0).sqrt()
    }

    fn validate(&self) -> Result<()> {
        if !(self.det().abs() > 1e-12) {
            return Err(Error::InvalidSpec(format!(
                "cell matrix is singular (det = {:e})",
                self.det()
            )));
        }
        if !(self.defect_radius >= 0.0) {
            return Err(Error::InvalidSpec("defect radius must be nonnegative".into()));
        }
        for p in &self.defects {
            if self.snap(*p).is_none() {
                return Err(Error::InvalidSpec(format!(
                    "defect site ({}, {}) is not a lattice point",
                    p.x, p.y
                )));
            }
            if p.norm() > self.defect_radius + SNAP_TOL {
                return Err(Error::InvalidSpec(format!(
                    "defect site ({}, {}) lies outside the defect radius {}",
                    p.x, p.y, self.defect_radius
                )));
            }
        }
        Ok(())
    }

    /// All integer pairs `n` with `|A n - center| <= radius`, unordered.
    fn integer_ball(&self, center: Vec2, radius: f64) -> Vec<[i64; 2]> {
        let f = self.fractional(center);
        let reach = (radius / self.sigma_min()).ceil() as i64 + 1;
        let (ci, cj) = (f[0].round() as i64, f[1].round() as i64);
        let mut out = Vec::new();
        for i in ci - reach..=ci + reach {
            for j in cj - reach..=cj + reach {
                if (self.point([i, j]) - center).norm() <= radius + SNAP_TOL {
                    out.push([i, j]);
                }
            }
        }
        out
    }

    /// Homogeneous lattice offsets `0 < |ρ| <= radius`, ordered by (radius, angle).
    pub fn stencil(&self, radius: f64) -> Vec<([i64; 2], Vec2)> {
        let mut pts: Vec<[i64; 2]> = self
            .integer_ball(Vec2::ZERO, radius)
            .into_iter()
            .filter(|n| *n != [0, 0])
            .collect();
        sort_polar(self, &mut pts, Vec2::ZERO);
        pts.into_iter().map(|n| (n, self.point(n))).collect()
    }

    /// Short hash of the spec, stable across runs.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for row in &self.cell {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
        for p in &self.defects {
            h.update(p.x.to_le_bytes());
            h.update(p.y.to_le_bytes());
        }
        h.update(self.defect_radius.to_le_bytes());
        hex16(&h.finalize())
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn quantize(x: f64) -> i64 {
    (x / ORDER_QUANTUM).round() as i64
}

fn sort_polar(spec: &LatticeSpec, pts: &mut [[i64; 2]], center: Vec2) {
    pts.sort_by_cached_key(|n| {
        let d = spec.point(*n) - center;
        let r = quantize(d.norm());
        let a = if r == 0 { 0 } else { quantize(d.angle()) };
        (r, a, n[0], n[1])
    });
}

/// Reference configuration: the homogeneous lattice inside a ball minus the
/// defect sites. Ids are dense and ordered by (radius, angle).
#[derive(Debug, Clone)]
pub struct DefectiveLattice {
    spec: LatticeSpec,
    domain_radius: f64,
    sites: Vec<Vec2>,
    coords: Vec<[i64; 2]>,
    index: HashMap<[i64; 2], usize>,
    norms: Vec<f64>,
}

/// Materialize every point of `A Z^2` with `|x| <= domain_radius`, minus the defects.
pub fn build_lattice(spec: &LatticeSpec, domain_radius: f64) -> Result<DefectiveLattice> {
    spec.validate()?;
    if !(domain_radius > 0.0) || !domain_radius.is_finite() {
        return Err(Error::InvalidSpec(format!(
            "domain radius must be positive and finite, got {domain_radius}"
        )));
    }
    if domain_radius < spec.defect_radius {
        return Err(Error::InvalidSpec(format!(
            "domain radius {domain_radius} is smaller than the defect radius {}",
            spec.defect_radius
        )));
    }
    let holes: Vec<[i64; 2]> = spec.defects.iter().filter_map(|p| spec.snap(*p)).collect();
    let mut coords: Vec<[i64; 2]> = spec
        .integer_ball(Vec2::ZERO, domain_radius)
        .into_iter()
        .filter(|n| !holes.contains(n))
        .collect();
    sort_polar(spec, &mut coords, Vec2::ZERO);
    let sites: Vec<Vec2> = coords.iter().map(|n| spec.point(*n)).collect();
    let norms = sites.iter().map(|p| p.norm()).collect();
    let index = coords.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    Ok(DefectiveLattice {
        spec: spec.clone(),
        domain_radius,
        sites,
        coords,
        index,
        norms,
    })
}

impl DefectiveLattice {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn domain_radius(&self) -> f64 {
        self.domain_radius
    }

    pub fn sites(&self) -> &[Vec2] {
        &self.sites
    }

    #[inline]
    pub fn site(&self, id: usize) -> Vec2 {
        self.sites[id]
    }

    /// `|x0(id)|`.
    #[inline]
    pub fn radius_of(&self, id: usize) -> f64 {
        self.norms[id]
    }

    pub fn coords(&self, id: usize) -> [i64; 2] {
        self.coords[id]
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::Index {
                index: id,
                len: self.len(),
            })
        }
    }

    pub fn id_of_coords(&self, n: [i64; 2]) -> Option<usize> {
        self.index.get(&n).copied()
    }

    /// Id of the site at reference position `p`, if any.
    pub fn id_of(&self, p: Vec2) -> Option<usize> {
        self.spec.snap(p).and_then(|n| self.id_of_coords(n))
    }

    /// True if `p` is a lattice point that has been deleted.
    pub fn is_vacancy(&self, p: Vec2) -> bool {
        self.spec
            .defects
            .iter()
            .any(|d| (*d - p).norm() <= SNAP_TOL)
    }

    /// Site ids with `|x0 - center| <= radius`, sorted by id.
    pub fn ball(&self, center: Vec2, radius: f64) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .spec
            .integer_ball(center, radius)
            .into_iter()
            .filter_map(|n| self.id_of_coords(n))
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Site ids with `|x0| <= radius`. Ids are radius-ordered, so this is a prefix.
    pub fn ids_within(&self, radius: f64) -> Vec<usize> {
        let n = self.norms.partition_point(|&r| r <= radius + SNAP_TOL);
        (0..n).collect()
    }

    /// Neighbours of `site` within `radius`, with exact reference offsets.
    pub fn neighbors(&self, site: usize, radius: f64) -> Result<Vec<(usize, Vec2)>> {
        self.check_id(site)?;
        let stencil = self.spec.stencil(radius);
        Ok(self.neighbors_in(site, &stencil))
    }

    /// Like [`neighbors`](Self::neighbors) with a precomputed stencil.
    pub fn neighbors_in(&self, site: usize, stencil: &[([i64; 2], Vec2)]) -> Vec<(usize, Vec2)> {
        let c = self.coords[site];
        stencil
            .iter()
            .filter_map(|(n, rho)| {
                self.id_of_coords([c[0] + n[0], c[1] + n[1]])
                    .map(|k| (k, *rho))
            })
            .collect()
    }

    /// Stable identity of the materialized lattice.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec.digest().as_bytes());
        h.update(self.domain_radius.to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        hex16(&h.finalize())
    }
}

/// Per-site displacement field `u`, indexed by lattice id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Displacement(Vec<Vec2>);

impl Displacement {
    pub fn zeros(n: usize) -> Self {
        Displacement(vec![Vec2::ZERO; n])
    }

    /// Wraps `values`, rejecting NaN or infinite entries.
    pub fn new(values: Vec<Vec2>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite displacement at site {i}")));
        }
        Ok(Displacement(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[Vec2] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [Vec2] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<Vec2> {
        self.0
    }

    /// Deformed positions `x0 + u`.
    pub fn positions(&self, lattice: &DefectiveLattice) -> Vec<Vec2> {
        lattice
            .sites()
            .iter()
            .zip(&self.0)
            .map(|(x, u)| *x + *u)
            .collect()
    }

    pub fn shifted(&self, t: Vec2) -> Self {
        Displacement(self.0.iter().map(|v| *v + t).collect())
    }

    pub fn scaled(&self, a: f64) -> Self {
        Displacement(self.0.iter().map(|v| *v * a).collect())
    }

    pub fn sub(&self, other: &Displacement) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                found: other.len(),
            });
        }
        Ok(Displacement(
            self.0.iter().zip(&other.0).map(|(a, b)| *a - *b).collect(),
        ))
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|v| v.max_abs()).fold(0.0, f64::max)
    }
}

/// Carry `u` from lattice `from` to lattice `to` by integer coordinates;
/// sites missing from `from` get zero.
pub fn transfer(u: &Displacement, from: &DefectiveLattice, to: &DefectiveLattice) -> Displacement {
    Displacement(
        (0..to.len())
            .map(|i| {
                from.id_of_coords(to.coords(i))
                    .map_or(Vec2::ZERO, |k| u[k])
            })
            .collect(),
    )
}

impl std::ops::Index<usize> for Displacement {
    type Output = Vec2;
    fn index(&self, i: usize) -> &Vec2 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Displacement {
    fn index_mut(&mut self, i: usize) -> &mut Vec2 {
        &mut self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeminormParams {
    pub gamma: f64,
    pub stencil_radius: f64,
}

impl Default for SeminormParams {
    fn default() -> Self {
        SeminormParams {
            gamma: 1.0,
            stencil_radius: 3.05,
        }
    }
}

impl SeminormParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidSpec("gamma must be positive".into()));
        }
        if !(self.stencil_radius >= 1.0 - 1e-12) {
            return Err(Error::InvalidSpec(
                "stencil radius must reach the nearest neighbours".into(),
            ));
        }
        Ok(())
    }
}

fn check_len(u: &Displacement, lattice: &DefectiveLattice) -> Result<()> {
    if u.len() != lattice.len() {
        return Err(Error::Dimension {
            expected: lattice.len(),
            found: u.len(),
        });
    }
    Ok(())
}

/// Squared local norm `|Du(ℓ)|_γ^2`, skipping neighbours for which `keep` is false.
fn local_sq(
    u: &Displacement,
    lattice: &DefectiveLattice,
    stencil: &[([i64; 2], Vec2)],
    weights: &[f64],
    site: usize,
    keep: &dyn Fn(usize) -> bool,
) -> f64 {
    let c = lattice.coords[site];
    let mut acc = 0.0;
    for ((n, _), w) in stencil.iter().zip(weights) {
        if let Some(k) = lattice.id_of_coords([c[0] + n[0], c[1] + n[1]]) {
            if keep(k) {
                acc += w * (u[k] - u[site]).norm_squared();
            }
        }
    }
    acc
}

fn weighted_stencil(
    lattice: &DefectiveLattice,
    params: &SeminormParams,
) -> (Vec<([i64; 2], Vec2)>, Vec<f64>) {
    let stencil = lattice.spec.stencil(params.stencil_radius);
    let weights = stencil
        .iter()
        .map(|(_, rho)| (-2.0 * params.gamma * rho.norm()).exp())
        .collect();
    (stencil, weights)
}

/// `‖Du‖_{ℓ²_γ}` over the materialized domain.
pub fn seminorm(u: &Displacement, params: &SeminormParams, lattice: &DefectiveLattice) -> Result<f64> {
    seminorm_within(u, params, lattice, f64::INFINITY)
}

/// Seminorm restricted to pairs whose both endpoints satisfy `|x0| <= radius`.
pub fn seminorm_within(
    u: &Displacement,
    params: &SeminormParams,
    lattice: &DefectiveLattice,
    radius: f64,
) -> Result<f64> {
    check_len(u, lattice)?;
    params.validate()?;
    let (stencil, weights) = weighted_stencil(lattice, params);
    let inside = |k: usize| lattice.norms[k] <= radius + SNAP_TOL;
    let total: f64 = (0..lattice.len())
        .filter(|&l| inside(l))
        .map(|l| local_sq(u, lattice, &stencil, &weights, l, &inside))
        .sum();
    Ok(total.sqrt())
}

/// Per-site `|Du(ℓ)|_γ`.
pub fn local_seminorms(
    u: &Displacement,
    params: &SeminormParams,
    lattice: &DefectiveLattice,
) -> Result<Vec<f64>> {
    check_len(u, lattice)?;
    params.validate()?;
    let (stencil, weights) = weighted_stencil(lattice, params);
    Ok((0..lattice.len())
        .map(|l| local_sq(u, lattice, &stencil, &weights, l, &|_| true).sqrt())
        .collect())
}
