//! Two-centre tight-binding model: Hamiltonian assembly, spectral energies and
//! their exact gradients.
//!
//! Every energy handled here is a spectral function of `H`. Its first-order
//! change is written as `dE = tr(W dH) + pair terms` for a symmetric weight
//! matrix `W`, so one assembly routine serves both Hellmann-Feynman forces and
//! projected site-energy gradients.

use faer::{Mat, MatRef, Side};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::lattice::{hex16, DefectiveLattice};

/// Lower bound `𝔪` in `|y(ℓ) - y(k)| >= 𝔪 |x0(ℓ) - x0(k)|`.
pub const ADMISSIBILITY: f64 = 0.5;

/// Relative gap below which the divided difference falls back to `g'`.
const DEGENERACY_TOL: f64 = 1e-8;

/// Smooth scalar function with its first derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarFn {
    Zero,
    /// `amplitude * exp(-rate * (x - shift))`
    Exponential { amplitude: f64, rate: f64, shift: f64 },
    /// `Σ c_k x^k`
    Polynomial { coeffs: Vec<f64> },
}

impl ScalarFn {
    #[inline]
    pub fn eval(&self, x: f64) -> (f64, f64) {
        match self {
            ScalarFn::Zero => (0.0, 0.0),
            ScalarFn::Exponential {
                amplitude,
                rate,
                shift,
            } => {
                let v = amplitude * (-rate * (x - shift)).exp();
                (v, -rate * v)
            }
            ScalarFn::Polynomial { coeffs } => {
                let mut v = 0.0;
                let mut d = 0.0;
                for c in coeffs.iter().rev() {
                    d = d * x + v;
                    v = v * x + c;
                }
                (v, d)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ScalarFn::Zero => true,
            ScalarFn::Exponential { amplitude, .. } => *amplitude == 0.0,
            ScalarFn::Polynomial { coeffs } => coeffs.iter().all(|c| *c == 0.0),
        }
    }
}

/// Single-orbital two-centre model.
///
/// `repulsion` is a classical pair term added to the band energy; each bond
/// contributes half its value to both end sites. It leaves `H` untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbModel {
    pub onsite: ScalarFn,
    pub density: ScalarFn,
    pub hopping: ScalarFn,
    pub repulsion: ScalarFn,
    pub cutoff: f64,
    pub taper_width: f64,
    pub mu: f64,
    pub beta: f64,
}

impl Default for TbModel {
    fn default() -> Self {
        Self::morse_toy()
    }
}

impl TbModel {
    /// Morse hopping `exp(-4(r-1))`, no on-site term, `β = 0.5`, `μ = 0`, with a
    /// short-ranged repulsion `A exp(-16(r-1))` that keeps the lattice stable.
    pub fn morse_toy() -> Self {
        TbModel {
            onsite: ScalarFn::Zero,
            density: ScalarFn::Zero,
            hopping: ScalarFn::Exponential {
                amplitude: 1.0,
                rate: 4.0,
                shift: 1.0,
            },
            repulsion: ScalarFn::Exponential {
                amplitude: 0.0794,
                rate: 16.0,
                shift: 1.0,
            },
            cutoff: 5.5,
            taper_width: 1.0,
            mu: 0.0,
            beta: 0.5,
        }
    }

    /// The same Hamiltonian with the pair repulsion removed.
    pub fn band_only(mut self) -> Self {
        self.repulsion = ScalarFn::Zero;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("tight-binding model: {m}")));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive and finite");
        }
        if !self.mu.is_finite() {
            return bad("mu must be finite");
        }
        if !(self.cutoff > 0.0 && self.taper_width > 0.0 && self.taper_width <= self.cutoff) {
            return bad("need 0 < taper_width <= cutoff");
        }
        Ok(())
    }

    /// Stable hash over all parameters.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("model serializes");
        hex16(&Sha256::digest(&json))
    }

    /// Quintic C² taper: 1 below `cutoff - taper_width`, 0 at and beyond `cutoff`.
    #[inline]
    pub fn taper(&self, r: f64) -> (f64, f64) {
        let start = self.cutoff - self.taper_width;
        if r <= start {
            return (1.0, 0.0);
        }
        if r >= self.cutoff {
            return (0.0, 0.0);
        }
        let t = (r - start) / self.taper_width;
        let t2 = t * t;
        let s = 1.0 - t2 * t * (10.0 - 15.0 * t + 6.0 * t2);
        let ds = -30.0 * t2 * (1.0 - t) * (1.0 - t) / self.taper_width;
        (s, ds)
    }

    #[inline]
    fn tapered(&self, f: &ScalarFn, r: f64) -> (f64, f64) {
        if r >= self.cutoff || f.is_zero() {
            return (0.0, 0.0);
        }
        let (v, dv) = f.eval(r);
        let (s, ds) = self.taper(r);
        (v * s, dv * s + v * ds)
    }

    pub fn hop(&self, r: f64) -> (f64, f64) {
        self.tapered(&self.hopping, r)
    }

    pub fn rho(&self, r: f64) -> (f64, f64) {
        self.tapered(&self.density, r)
    }

    pub fn pair(&self, r: f64) -> (f64, f64) {
        self.tapered(&self.repulsion, r)
    }

    /// Fermi-Dirac occupation.
    #[inline]
    pub fn fermi(&self, e: f64) -> f64 {
        let x = self.beta * (e - self.mu);
        if x > 0.0 {
            let z = (-x).exp();
            z / (1.0 + z)
        } else {
            1.0 / (1.0 + x.exp())
        }
    }

    /// `g(ε) = f(ε) ε`.
    #[inline]
    pub fn g(&self, e: f64) -> f64 {
        self.fermi(e) * e
    }

    /// `g'(ε) = f + ε f'` with `f' = -β f (1 - f)`.
    #[inline]
    pub fn g_prime(&self, e: f64) -> f64 {
        let f = self.fermi(e);
        f - e * self.beta * f * (1.0 - f)
    }
}

/// A finite set of sites with reference and deformed positions.
#[derive(Debug, Clone)]
pub struct Cluster {
    /// Global site ids (labels only; used in diagnostics).
    pub ids: Vec<usize>,
    pub reference: Vec<Vec2>,
    pub positions: Vec<Vec2>,
}

impl Cluster {
    /// Sites `ids` of `lattice`, deformed by the full-lattice positions `y`.
    pub fn from_lattice(lattice: &DefectiveLattice, ids: &[usize], y: &[Vec2]) -> Result<Self> {
        if y.len() != lattice.len() {
            return Err(Error::Dimension {
                expected: lattice.len(),
                found: y.len(),
            });
        }
        for &i in ids {
            lattice.check_id(i)?;
        }
        Ok(Cluster {
            ids: ids.to_vec(),
            reference: ids.iter().map(|&i| lattice.site(i)).collect(),
            positions: ids.iter().map(|&i| y[i]).collect(),
        })
    }

    /// Cluster whose reference and current positions coincide.
    pub fn rigid(points: Vec<Vec2>) -> Self {
        Cluster {
            ids: (0..points.len()).collect(),
            reference: points.clone(),
            positions: points,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Same cluster with new deformed positions.
    pub fn with_positions(&self, positions: Vec<Vec2>) -> Self {
        assert_eq!(positions.len(), self.len());
        Cluster {
            ids: self.ids.clone(),
            reference: self.reference.clone(),
            positions,
        }
    }

    /// Local index of global id `id`.
    pub fn local(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }
}

#[derive(Debug, Clone, Copy)]
struct Bond {
    i: usize,
    j: usize,
    /// Unit vector from `j` to `i`.
    e: Vec2,
    dh: f64,
    drho: f64,
    phi: f64,
    dphi: f64,
}

/// Bonds within the cutoff plus on-site densities.
struct Geometry {
    bonds: Vec<Bond>,
    hop: Vec<(usize, usize, f64)>,
    sigma: Vec<f64>,
}

fn geometry(model: &TbModel, cluster: &Cluster) -> Result<Geometry> {
    let n = cluster.len();
    let y = &cluster.positions;
    let x = &cluster.reference;
    let mut bonds = Vec::new();
    let mut hop = Vec::new();
    let mut sigma = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = y[i] - y[j];
            let r = d.norm();
            let r0 = (x[i] - x[j]).norm();
            if !(r >= ADMISSIBILITY * r0) || r == 0.0 {
                return Err(Error::Configuration {
                    first: cluster.ids[i],
                    second: cluster.ids[j],
                    distance: r,
                    minimum: ADMISSIBILITY * r0,
                });
            }
            if r >= model.cutoff {
                continue;
            }
            let (h, dh) = model.hop(r);
            let (rho, drho) = model.rho(r);
            let (phi, dphi) = model.pair(r);
            sigma[i] += rho;
            sigma[j] += rho;
            if h != 0.0 {
                hop.push((i, j, h));
            }
            bonds.push(Bond {
                i,
                j,
                e: d * (1.0 / r),
                dh,
                drho,
                phi,
                dphi,
            });
        }
    }
    Ok(Geometry { bonds, hop, sigma })
}

fn hamiltonian_from(model: &TbModel, n: usize, geo: &Geometry) -> Mat<f64> {
    let mut h = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = model.onsite.eval(geo.sigma[i]).0;
    }
    for &(i, j, v) in &geo.hop {
        h[(i, j)] = v;
        h[(j, i)] = v;
    }
    h
}

/// Dense two-centre Hamiltonian of `cluster`.
pub fn assemble_hamiltonian(model: &TbModel, cluster: &Cluster) -> Result<Mat<f64>> {
    let geo = geometry(model, cluster)?;
    Ok(hamiltonian_from(model, cluster.len(), &geo))
}

/// Eigenpairs of a symmetric Hamiltonian, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub eigenvalues: Vec<f64>,
    /// Column `s` is `ψ_s`.
    pub eigenvectors: Mat<f64>,
    pub cluster_ids: Vec<usize>,
}

impl SpectralData {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Full symmetric eigendecomposition.
pub fn spectral_decompose(h: MatRef<'_, f64>) -> Result<SpectralData> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::Shape(format!("matrix is {}x{}, not square", n, h.ncols())));
    }
    let mut asym = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            asym = asym.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    if asym > 1e-12 {
        return Err(Error::Shape(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    if n == 0 {
        return Ok(SpectralData {
            eigenvalues: vec![],
            eigenvectors: Mat::zeros(0, 0),
            cluster_ids: vec![],
        });
    }
    let evd = h.self_adjoint_eigen(Side::Lower).map_err(|e| {
        Error::Numerical(format!(
            "symmetric eigensolver did not converge for n = {n}: {e:?}"
        ))
    })?;
    let s = evd.S();
    let u = evd.U();
    let mut order: Vec<usize> = (0..n).collect();
    let vals: Vec<f64> = (0..n).map(|i| s[i]).collect();
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("eigenvalue {i} is not finite")));
    }
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let eigenvalues = order.iter().map(|&k| vals[k]).collect();
    let eigenvectors = Mat::from_fn(n, n, |i, j| u[(i, order[j])]);
    Ok(SpectralData {
        eigenvalues,
        eigenvectors,
        cluster_ids: (0..n).collect(),
    })
}

/// Decompose the Hamiltonian of `cluster`, labelling the result with its ids.
pub fn cluster_spectrum(model: &TbModel, cluster: &Cluster) -> Result<SpectralData> {
    let h = assemble_hamiltonian(model, cluster)?;
    let mut spec = spectral_decompose(h.as_ref())?;
    spec.cluster_ids = cluster.ids.clone();
    Ok(spec)
}

/// `Σ_s f(ε_s) ε_s`.
pub fn band_energy(spec: &SpectralData, model: &TbModel) -> f64 {
    spec.eigenvalues.iter().map(|&e| model.g(e)).sum()
}

/// `E_ℓ = Σ_s f(ε_s) ε_s |ψ_s(ℓ)|²`, band part only.
pub fn site_energies(spec: &SpectralData, model: &TbModel) -> Vec<f64> {
    let n = spec.len();
    let mut out = vec![0.0; n];
    let u = spec.eigenvectors.as_ref();
    for (s, &e) in spec.eigenvalues.iter().enumerate() {
        let g = model.g(e);
        let col = u.col(s);
        for l in 0..n {
            let c = col[l];
            out[l] += g * c * c;
        }
    }
    out
}

/// Which site energies an evaluation sums.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    /// Every site: the total cluster energy.
    All,
    /// The listed local indices.
    Sites(Vec<usize>),
}

/// Energy plus gradient with respect to the deformed positions.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub energy: f64,
    pub gradient: Vec<Vec2>,
}

/// Band plus pair site energies of every cluster site.
pub fn cluster_site_energies(model: &TbModel, cluster: &Cluster) -> Result<Vec<f64>> {
    let geo = geometry(model, cluster)?;
    let spec = spectral_decompose(hamiltonian_from(model, cluster.len(), &geo).as_ref())?;
    let mut e = site_energies(&spec, model);
    for b in &geo.bonds {
        e[b.i] += 0.5 * b.phi;
        e[b.j] += 0.5 * b.phi;
    }
    Ok(e)
}

/// Band plus pair energy of the whole cluster.
pub fn total_energy(model: &TbModel, cluster: &Cluster) -> Result<f64> {
    Ok(cluster_site_energies(model, cluster)?.iter().sum())
}

/// Energy and exact gradient of `Σ_{ℓ ∈ projection} E_ℓ`.
pub fn evaluate(model: &TbModel, cluster: &Cluster, projection: &Projection) -> Result<Evaluation> {
    let n = cluster.len();
    let geo = geometry(model, cluster)?;
    let spec = spectral_decompose(hamiltonian_from(model, n, &geo).as_ref())?;
    let mut weight = vec![0.0; n];
    match projection {
        Projection::All => weight.fill(1.0),
        Projection::Sites(p) => {
            for &l in p {
                if l >= n {
                    return Err(Error::Index { index: l, len: n });
                }
                weight[l] = 1.0;
            }
        }
    }
    let (band, w) = match projection {
        Projection::All => (band_energy(&spec, model), hellmann_feynman_weights(&spec, model)),
        Projection::Sites(p) => {
            let e = site_energies(&spec, model);
            (p.iter().map(|&l| e[l]).sum(), projected_weights(&spec, model, p))
        }
    };
    let mut energy = band;
    for b in &geo.bonds {
        energy += 0.5 * (weight[b.i] + weight[b.j]) * b.phi;
    }
    let gradient = assemble_gradient(model, &geo, w.as_ref(), &weight, n);
    Ok(Evaluation { energy, gradient })
}

/// `W = Ψ diag(g'(ε)) Ψᵀ`.
fn hellmann_feynman_weights(spec: &SpectralData, model: &TbModel) -> Mat<f64> {
    let u = spec.eigenvectors.as_ref();
    let gp: Vec<f64> = spec.eigenvalues.iter().map(|&e| model.g_prime(e)).collect();
    let scaled = Mat::from_fn(u.nrows(), u.ncols(), |i, s| u[(i, s)] * gp[s]);
    &scaled * u.transpose()
}

/// Divided differences `g[a, b]`, with the derivative branch on near-ties.
pub fn divided_difference(model: &TbModel, a: f64, b: f64) -> f64 {
    if (a - b).abs() <= DEGENERACY_TOL * 1f64.max(a.abs()).max(b.abs()) {
        0.5 * (model.g_prime(a) + model.g_prime(b))
    } else {
        (model.g(a) - model.g(b)) / (a - b)
    }
}

/// `W = Ψ (G ∘ Ψ_Pᵀ Ψ_P) Ψᵀ` for the projector onto `sites`.
fn projected_weights(spec: &SpectralData, model: &TbModel, sites: &[usize]) -> Mat<f64> {
    let n = spec.len();
    let u = spec.eigenvectors.as_ref();
    let up = Mat::from_fn(sites.len(), n, |p, s| u[(sites[p], s)]);
    let m = up.transpose() * &up;
    let ev = &spec.eigenvalues;
    let kernel = Mat::from_fn(n, n, |s, t| divided_difference(model, ev[s], ev[t]) * m[(s, t)]);
    let tmp = u * &kernel;
    &tmp * u.transpose()
}

fn assemble_gradient(
    model: &TbModel,
    geo: &Geometry,
    w: MatRef<'_, f64>,
    weight: &[f64],
    n: usize,
) -> Vec<Vec2> {
    let mut grad = vec![Vec2::ZERO; n];
    let onsite_active = !model.onsite.is_zero() && !model.density.is_zero();
    let dons: Vec<f64> = if onsite_active {
        geo.sigma.iter().map(|&s| model.onsite.eval(s).1).collect()
    } else {
        Vec::new()
    };
    for b in &geo.bonds {
        let mut c = 2.0 * w[(b.i, b.j)] * b.dh;
        if onsite_active {
            c += (w[(b.i, b.i)] * dons[b.i] + w[(b.j, b.j)] * dons[b.j]) * b.drho;
        }
        c += 0.5 * (weight[b.i] + weight[b.j]) * b.dphi;
        let f = b.e * c;
        grad[b.i] += f;
        grad[b.j] -= f;
    }
    grad
}

/// `f_ℓ = -∂E/∂y(ℓ)` of the total cluster energy.
pub fn total_forces(model: &TbModel, cluster: &Cluster) -> Result<Vec<Vec2>> {
    let ev = evaluate(model, cluster, &Projection::All)?;
    Ok(ev.gradient.into_iter().map(|g| -g).collect())
}

/// `∂(Σ_{ℓ ∈ projection} E_ℓ)/∂y(m)` for every cluster site `m`.
///
/// `projection` holds local indices into `cluster`.
pub fn projected_energy_gradient(
    model: &TbModel,
    cluster: &Cluster,
    projection: &[usize],
) -> Result<Vec<Vec2>> {
    Ok(evaluate(model, cluster, &Projection::Sites(projection.to_vec()))?.gradient)
}

/// Shell maxima of `|∂E_center/∂y(m)|`, grouped by reference distance from
/// `center` (local index) and ordered by distance.
pub fn locality_profile(model: &TbModel, cluster: &Cluster, center: usize) -> Result<Vec<(f64, f64)>> {
    if center >= cluster.len() {
        return Err(Error::Index {
            index: center,
            len: cluster.len(),
        });
    }
    let grad = projected_energy_gradient(model, cluster, &[center])?;
    let mut shells: Vec<(i64, f64)> = Vec::new();
    let c = cluster.positions[center];
    for (m, g) in grad.iter().enumerate() {
        let key = ((cluster.positions[m] - c).norm() * 1e6).round() as i64;
        match shells.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => *v = v.max(g.norm()),
            None => shells.push((key, g.norm())),
        }
    }
    shells.sort_by_key(|(k, _)| *k);
    Ok(shells.into_iter().map(|(k, v)| (k as f64 * 1e-6, v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dimer(r: f64) -> Cluster {
        Cluster::rigid(vec![Vec2::ZERO, Vec2::new(r, 0.0)])
    }

    #[test]
    fn dimer_hamiltonian() {
        let m = TbModel::morse_toy();
        let h = assemble_hamiltonian(&m, &dimer(1.0)).unwrap();
        assert_eq!(h[(0, 1)], 1.0);
        assert_eq!(h[(1, 0)], 1.0);
        assert_eq!(h[(0, 0)], 0.0);
        let far = assemble_hamiltonian(&m, &dimer(5.5)).unwrap();
        assert!(far.col_iter().all(|c| c.iter().all(|v| *v == 0.0)));
        let single = assemble_hamiltonian(&m, &Cluster::rigid(vec![Vec2::ZERO])).unwrap();
        assert_eq!((single.nrows(), single[(0, 0)]), (1, 0.0));
    }

    #[test]
    fn interpenetration_is_rejected() {
        let m = TbModel::morse_toy();
        let c = Cluster {
            ids: vec![7, 9],
            reference: vec![Vec2::ZERO, Vec2::new(1.0, 0.0)],
            positions: vec![Vec2::ZERO, Vec2::new(0.4, 0.0)],
        };
        match assemble_hamiltonian(&m, &c) {
            Err(Error::Configuration { first, second, .. }) => assert_eq!((first, second), (7, 9)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimer_spectrum_and_energies() {
        let mut m = TbModel::morse_toy();
        m.beta = 4.0;
        let h = assemble_hamiltonian(&m, &dimer(1.0)).unwrap();
        let s = spectral_decompose(h.as_ref()).unwrap();
        assert!((s.eigenvalues[0] + 1.0).abs() < 1e-14);
        assert!((s.eigenvalues[1] - 1.0).abs() < 1e-14);
        let e = band_energy(&s, &m);
        assert!((e + 2.0f64.tanh()).abs() < 1e-12);
        for v in site_energies(&s, &m) {
            assert!((v + 0.5 * 2.0f64.tanh()).abs() < 1e-12);
        }
        m.beta = 1e-12;
        assert!(band_energy(&s, &m).abs() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let h = Mat::from_fn(2, 2, |i, j| if i < j { 1.0 } else { 0.0 });
        assert!(matches!(spectral_decompose(h.as_ref()), Err(Error::Shape(_))));
    }

    #[test]
    fn dimer_force_matches_finite_difference() {
        let m = TbModel::morse_toy();
        let r = 1.2;
        let f = total_forces(&m, &dimer(r)).unwrap();
        let step = 1e-5;
        let ep = total_energy(&m, &dimer(r + step)).unwrap();
        let em = total_energy(&m, &dimer(r - step)).unwrap();
        let fd = -(ep - em) / (2.0 * step);
        assert!((f[1].x - fd).abs() <= 1e-6 * fd.abs());
        assert!((f[0] + f[1]).norm() < 1e-14);
    }

    #[test]
    fn taper_is_c2() {
        let m = TbModel::morse_toy();
        let start = m.cutoff - m.taper_width;
        assert_eq!(m.taper(start), (1.0, 0.0));
        assert_eq!(m.taper(m.cutoff), (0.0, 0.0));
        let h = 1e-6;
        for &r in &[start + 1e-9, m.cutoff - 1e-9] {
            let (_, d) = m.taper(r);
            assert!(d.abs() < 1e-12);
            let dd = (m.taper(r + h).1 - m.taper(r - h).1) / (2.0 * h);
            assert!(dd.abs() < 1e-4);
        }
    }

    #[test]
    fn polynomial_eval() {
        let p = ScalarFn::Polynomial {
            coeffs: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(p.eval(2.0), (17.0, 14.0));
    }
}
