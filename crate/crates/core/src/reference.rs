//! Large pure-QM reference solutions and the true-error norm.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coupling::{pure_qm_partition, solve_equilibrium, HybridProblem, SolverOptions};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::lattice::{build_lattice, hex16, seminorm_within, transfer, DefectiveLattice, Displacement, LatticeSpec, SeminormParams};
use crate::tightbinding::TbModel;

const CACHE_FORMAT: u32 = 1;

/// Relaxed pure-QM configuration on `B_{R_ref}`, clamped outside
/// `B_{R_ref - r_cut}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub fingerprint: String,
    pub spec_digest: String,
    pub model_hash: String,
    pub r_ref: f64,
    pub r_cut_buffer: f64,
    pub u_ref: Displacement,
    pub g_tol: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub energy: f64,
}

impl ReferenceSolution {
    /// Radius of the free (relaxed) region.
    pub fn r_free(&self) -> f64 {
        self.r_ref - self.r_cut_buffer
    }
}

fn cache_key(model: &TbModel, spec: &LatticeSpec, r_ref: f64, r_cut_buffer: f64, g_tol: f64) -> String {
    let mut h = Sha256::new();
    h.update(model.digest().as_bytes());
    h.update(spec.digest().as_bytes());
    for v in [r_ref, r_cut_buffer, g_tol] {
        h.update(v.to_le_bytes());
    }
    hex16(&h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    format: u32,
    checksum: String,
    solution: ReferenceSolution,
}

fn checksum(sol: &ReferenceSolution) -> Result<String> {
    Ok(hex16(&Sha256::digest(serde_json::to_vec(sol)?)))
}

fn read_cache(path: &Path, lattice: &DefectiveLattice) -> Result<ReferenceSolution> {
    let file: CacheFile = serde_json::from_slice(&std::fs::read(path)?)?;
    if file.format != CACHE_FORMAT || checksum(&file.solution)? != file.checksum {
        return Err(Error::Cache(format!("{}: corrupt or stale cache", path.display())));
    }
    if file.solution.fingerprint != lattice.fingerprint() {
        return Err(Error::Fingerprint(format!("{}: cached for another lattice", path.display())));
    }
    Ok(file.solution)
}

/// Exclusive lock file held for the lifetime of the guard.
struct Lock(PathBuf);

impl Lock {
    fn acquire(path: PathBuf, timeout: Duration) -> Result<Lock> {
        let start = Instant::now();
        loop {
            match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(Lock(path)),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > timeout {
                        return Err(Error::Cache(format!("timed out waiting for {}", path.display())));
                    }
                    std::thread::sleep(Duration::from_millis(200));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Relax the pure-QM system on `B_{R_ref}` about the origin.
///
/// With `cache_dir`, results are read from and written to
/// `<cache_dir>/ref-<key>.json`, where the key hashes the model, the lattice
/// spec, `R_ref`, the buffer width and `g_tol`.
pub fn solve_reference(
    model: &TbModel,
    spec: &LatticeSpec,
    r_ref: f64,
    r_cut_buffer: f64,
    opts: &SolverOptions,
    cache_dir: Option<&Path>,
) -> Result<(ReferenceSolution, DefectiveLattice)> {
    let lattice = build_lattice(spec, r_ref)?;
    let key = cache_key(model, spec, r_ref, r_cut_buffer, opts.g_tol);
    let path = cache_dir.map(|d| d.join(format!("ref-{key}.json")));
    if let Some(p) = &path {
        if let Ok(sol) = read_cache(p, &lattice) {
            return Ok((sol, lattice));
        }
    }
    let _lock = match (&path, cache_dir) {
        (Some(p), Some(dir)) => {
            std::fs::create_dir_all(dir)?;
            let lock = Lock::acquire(p.with_extension("lock"), Duration::from_secs(3600))?;
            // Another writer may have finished while we waited.
            if let Ok(sol) = read_cache(p, &lattice) {
                return Ok((sol, lattice));
            }
            Some(lock)
        }
        _ => None,
    };
    let partition = pure_qm_partition(&lattice, &[Vec2::ZERO], r_ref - r_cut_buffer, r_cut_buffer)?;
    let problem = HybridProblem::new(&lattice, model, &partition, None)?;
    let state = solve_equilibrium(&problem, &Displacement::zeros(lattice.len()), opts)?;
    if !state.converged {
        return Err(Error::Optimization {
            message: format!("reference solve stopped at |g|inf = {:.3e}", state.gradient_norm),
            iterations: state.iterations,
            last_iterate: state.u.into_inner(),
        });
    }
    let sol = ReferenceSolution {
        fingerprint: lattice.fingerprint(),
        spec_digest: spec.digest(),
        model_hash: model.digest(),
        r_ref,
        r_cut_buffer,
        u_ref: state.u,
        g_tol: opts.g_tol,
        gradient_norm: state.gradient_norm,
        iterations: state.iterations,
        energy: state.energy,
    };
    if let Some(p) = &path {
        let file = CacheFile {
            format: CACHE_FORMAT,
            checksum: checksum(&sol)?,
            solution: sol.clone(),
        };
        crate::io::write_atomic(p, &serde_json::to_vec(&file)?)?;
    }
    Ok((sol, lattice))
}

/// `‖D(u_h - u_ref)‖` over `|ℓ| <= R_ref - r_cut`, with `u_h` carried onto the
/// reference lattice (zero where it is undefined).
pub fn true_error(
    u_h: &Displacement,
    lattice_h: &DefectiveLattice,
    reference: &ReferenceSolution,
    ref_lattice: &DefectiveLattice,
    params: &SeminormParams,
) -> Result<f64> {
    if ref_lattice.fingerprint() != reference.fingerprint {
        return Err(Error::Fingerprint("reference lattice does not match the solution".into()));
    }
    if lattice_h.spec().digest() != reference.spec_digest {
        return Err(Error::Fingerprint("approximation lives on a different defect lattice".into()));
    }
    if u_h.len() != lattice_h.len() {
        return Err(Error::Dimension {
            expected: lattice_h.len(),
            found: u_h.len(),
        });
    }
    let mapped = transfer(u_h, lattice_h, ref_lattice);
    let diff = mapped.sub(&reference.u_ref)?;
    seminorm_within(&diff, params, ref_lattice, reference.r_free())
}
