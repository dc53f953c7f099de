//! Second-order Taylor expansion of the homogeneous-lattice site energy,
//! used as the MM site potential.

use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::lattice::{hex16, LatticeSpec};
use crate::par::{self, Execution};
use crate::tightbinding::{evaluate, Cluster, Projection, TbModel};

/// Central finite-difference step for the Hessian.
pub const HESSIAN_STEP: f64 = 1e-4;

const CACHE_FORMAT: u32 = 1;

/// `V(g) = v0 + grad·g + ½ gᵀ hess g` over the stencil differences `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct MmPotential {
    /// Integer offsets of the stencil, ordered by (radius, angle).
    pub offsets: Vec<[i64; 2]>,
    /// Reference offset vectors ρ.
    pub stencil: Vec<Vec2>,
    pub v0: f64,
    pub grad: Vec<Vec2>,
    /// Row-major `(2|ℛ|)²` matrix in `(ρ, axis)` order.
    pub hess: Vec<f64>,
    pub order: u32,
    pub r_cut_mm: f64,
    pub model_hash: String,
}

impl MmPotential {
    pub fn len(&self) -> usize {
        self.stencil.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stencil.is_empty()
    }

    pub fn dim(&self) -> usize {
        2 * self.stencil.len()
    }

    #[inline]
    pub fn hess_at(&self, row: usize, col: usize) -> f64 {
        self.hess[row * self.dim() + col]
    }

    /// Largest `|H - Hᵀ|` entry.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim();
        let mut m = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                m = m.max((self.hess_at(i, j) - self.hess_at(j, i)).abs());
            }
        }
        m
    }

    fn check(&self, g: &[Vec2]) -> Result<()> {
        if g.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                found: g.len(),
            });
        }
        Ok(())
    }

    /// `hess · g` as per-offset vectors.
    fn hess_apply(&self, g: &[Vec2]) -> Vec<Vec2> {
        let d = self.dim();
        let flat: Vec<f64> = g.iter().flat_map(|v| [v.x, v.y]).collect();
        let mut out = vec![Vec2::ZERO; self.len()];
        for (r, row) in self.hess.chunks_exact(d).enumerate() {
            let v: f64 = row.iter().zip(&flat).map(|(a, b)| a * b).sum();
            *out[r / 2].component_mut(r % 2) = v;
        }
        out
    }
}

/// Site energy of the origin in a homogeneous cluster whose neighbours sit at
/// `ρ + g_ρ`; with the gradient with respect to each `g_ρ`.
pub fn homogeneous_site_energy(model: &TbModel, stencil: &[Vec2], g: &[Vec2]) -> Result<(f64, Vec<Vec2>)> {
    if g.len() != stencil.len() {
        return Err(Error::Dimension {
            expected: stencil.len(),
            found: g.len(),
        });
    }
    let mut reference = Vec::with_capacity(stencil.len() + 1);
    reference.push(Vec2::ZERO);
    reference.extend_from_slice(stencil);
    let mut positions = Vec::with_capacity(reference.len());
    positions.push(Vec2::ZERO);
    positions.extend(stencil.iter().zip(g).map(|(r, d)| *r + *d));
    let cluster = Cluster {
        ids: (0..reference.len()).collect(),
        reference,
        positions,
    };
    let ev = evaluate(model, &cluster, &Projection::Sites(vec![0]))?;
    Ok((ev.energy, ev.gradient[1..].to_vec()))
}

/// Build the Taylor potential of order `order` (only 2 is supported).
pub fn build_mm_potential(
    model: &TbModel,
    cell: &LatticeSpec,
    r_cut_mm: f64,
    order: u32,
    exec: Execution,
) -> Result<MmPotential> {
    if order != 2 {
        return Err(Error::UnsupportedOrder(order));
    }
    model.validate()?;
    let (offsets, stencil): (Vec<[i64; 2]>, Vec<Vec2>) = cell.stencil(r_cut_mm).into_iter().unzip();
    if stencil.is_empty() {
        return Err(Error::InvalidSpec(format!(
            "MM cutoff {r_cut_mm} is below the nearest-neighbour distance"
        )));
    }
    let zero = vec![Vec2::ZERO; stencil.len()];
    let (v0, grad) = homogeneous_site_energy(model, &stencil, &zero)?;
    let d = 2 * stencil.len();
    let coords: Vec<usize> = (0..d).collect();
    let columns = par::try_map(exec, &coords, |&c| -> Result<Vec<f64>> {
        let mut gp = zero.clone();
        *gp[c / 2].component_mut(c % 2) = HESSIAN_STEP;
        let mut gm = zero.clone();
        *gm[c / 2].component_mut(c % 2) = -HESSIAN_STEP;
        let (_, fp) = homogeneous_site_energy(model, &stencil, &gp)?;
        let (_, fm) = homogeneous_site_energy(model, &stencil, &gm)?;
        Ok(fp
            .iter()
            .zip(&fm)
            .flat_map(|(a, b)| {
                let v = (*a - *b) * (0.5 / HESSIAN_STEP);
                [v.x, v.y]
            })
            .collect())
    })?;
    // columns[c][r] = ∂grad_r/∂g_c; symmetrize into row-major storage.
    let mut hess = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            hess[r * d + c] = 0.5 * (columns[c][r] + columns[r][c]);
        }
    }
    Ok(MmPotential {
        offsets,
        stencil,
        v0,
        grad,
        hess,
        order,
        r_cut_mm,
        model_hash: model.digest(),
    })
}

/// `V^MM(g)`.
pub fn mm_site_energy(pot: &MmPotential, g: &[Vec2]) -> Result<f64> {
    pot.check(g)?;
    let hg = pot.hess_apply(g);
    let lin: f64 = pot.grad.iter().zip(g).map(|(a, b)| a.dot(*b)).sum();
    let quad: f64 = hg.iter().zip(g).map(|(a, b)| a.dot(*b)).sum();
    Ok(pot.v0 + lin + 0.5 * quad)
}

/// `∂V^MM/∂g = grad + hess·g`.
pub fn mm_site_gradient(pot: &MmPotential, g: &[Vec2]) -> Result<Vec<Vec2>> {
    pot.check(g)?;
    Ok(pot
        .hess_apply(g)
        .into_iter()
        .zip(&pot.grad)
        .map(|(h, g0)| h + *g0)
        .collect())
}

/// Smallest eigenvalue of the Hessian; useful for stability diagnostics.
pub fn hessian_min_eigenvalue(pot: &MmPotential) -> Result<f64> {
    let d = pot.dim();
    let h = Mat::from_fn(d, d, |i, j| pot.hess_at(i, j));
    let ev = h
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::Numerical(format!("Hessian spectrum: {e:?}")))?;
    Ok(ev.into_iter().fold(f64::INFINITY, f64::min))
}

#[derive(Serialize, Deserialize)]
struct CacheBody {
    format: u32,
    model_hash: String,
    r_cut_mm: f64,
    order: u32,
    offsets: Vec<[i64; 2]>,
    stencil: Vec<Vec2>,
    v0: f64,
    grad: Vec<Vec2>,
    hess: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    checksum: String,
    body: CacheBody,
}

fn checksum(body: &CacheBody) -> Result<String> {
    let bytes = serde_json::to_vec(body)?;
    Ok(hex16(&Sha256::digest(&bytes)))
}

/// Write the potential to `path` as checksummed JSON (atomic replace).
pub fn save_potential(pot: &MmPotential, path: &Path) -> Result<()> {
    let body = CacheBody {
        format: CACHE_FORMAT,
        model_hash: pot.model_hash.clone(),
        r_cut_mm: pot.r_cut_mm,
        order: pot.order,
        offsets: pot.offsets.clone(),
        stencil: pot.stencil.clone(),
        v0: pot.v0,
        grad: pot.grad.clone(),
        hess: pot.hess.clone(),
    };
    let file = CacheFile {
        checksum: checksum(&body)?,
        body,
    };
    crate::io::write_atomic(path, &serde_json::to_vec(&file)?)
}

/// Read a cached potential, verifying checksum, format and model hash.
pub fn load_potential(path: &Path, model: &TbModel, r_cut_mm: f64) -> Result<MmPotential> {
    let file: CacheFile = serde_json::from_slice(&std::fs::read(path)?)?;
    let body = file.body;
    if checksum(&body)? != file.checksum {
        return Err(Error::Cache(format!("{}: checksum mismatch", path.display())));
    }
    if body.format != CACHE_FORMAT {
        return Err(Error::Cache(format!("{}: unknown format {}", path.display(), body.format)));
    }
    if body.model_hash != model.digest() || body.r_cut_mm != r_cut_mm {
        return Err(Error::Cache(format!("{}: built for a different model", path.display())));
    }
    Ok(MmPotential {
        offsets: body.offsets,
        stencil: body.stencil,
        v0: body.v0,
        grad: body.grad,
        hess: body.hess,
        order: body.order,
        r_cut_mm: body.r_cut_mm,
        model_hash: body.model_hash,
    })
}

/// Load from `dir` if a valid cache exists, otherwise build and store it.
pub fn cached_potential(
    dir: &Path,
    model: &TbModel,
    cell: &LatticeSpec,
    r_cut_mm: f64,
    exec: Execution,
) -> Result<MmPotential> {
    let path = dir.join(format!("mm-{}-{}.json", model.digest(), cell.digest()));
    if let Ok(p) = load_potential(&path, model, r_cut_mm) {
        return Ok(p);
    }
    let pot = build_mm_potential(model, cell, r_cut_mm, 2, exec)?;
    std::fs::create_dir_all(dir)?;
    save_potential(&pot, &path)?;
    Ok(pot)
}
