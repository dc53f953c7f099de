//! Dörfler and maximum marking, interface-aware splitting, region growth and
//! the adaptive QM/MM loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coupling::{decompose_multi, solve_equilibrium, HybridProblem, Region, RegionPartition, SolverOptions};
use crate::error::{Error, Result};
use crate::estimator::{full_indicator, multi_defect_mesh, sampled_indicator, IndicatorReport};
use crate::geom::Vec2;
use crate::lattice::{build_lattice, transfer, DefectiveLattice, Displacement, LatticeSpec, SeminormParams};
use crate::mmpotential::MmPotential;
use crate::par::Execution;
use crate::reference::{true_error, ReferenceSolution};
use crate::tightbinding::TbModel;

/// Elements selected by a marking strategy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Marking {
    pub elements: Vec<usize>,
    /// True when the indicator vanishes and nothing needs marking.
    pub converged: bool,
}

fn descending(etas: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..etas.len()).collect();
    ids.sort_by(|&a, &b| etas[b].total_cmp(&etas[a]).then(a.cmp(&b)));
    ids
}

/// Smallest descending prefix carrying at least `tau` of the total.
pub fn dorfler_select(etas: &[f64], tau: f64) -> Result<Marking> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("Dörfler parameter {tau} must lie in (0, 1)")));
    }
    if etas.is_empty() {
        return Err(Error::InvalidSpec("cannot mark an empty indicator".into()));
    }
    if etas.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return Err(Error::Numerical("indicator values must be finite and nonnegative".into()));
    }
    let total: f64 = etas.iter().sum();
    if total == 0.0 {
        return Ok(Marking {
            elements: Vec::new(),
            converged: true,
        });
    }
    let target = tau * total;
    let mut acc = 0.0;
    let mut out = Vec::new();
    for id in descending(etas) {
        out.push(id);
        acc += etas[id];
        if acc >= target {
            break;
        }
    }
    Ok(Marking {
        elements: out,
        converged: false,
    })
}

pub fn dorfler_mark(report: &IndicatorReport, tau: f64) -> Result<Marking> {
    dorfler_select(&report.etas(), tau)
}

/// The single largest element, smallest id on ties.
pub fn max_select(etas: &[f64]) -> Result<Marking> {
    if etas.is_empty() {
        return Err(Error::InvalidSpec("cannot mark an empty indicator".into()));
    }
    Ok(Marking {
        elements: vec![descending(etas)[0]],
        converged: false,
    })
}

pub fn max_mark(report: &IndicatorReport) -> Result<Marking> {
    max_select(&report.etas())
}

/// Marked sites split by proximity to the QM region versus the far field.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkingResult {
    pub marked_elements: Vec<usize>,
    pub marked_sites: Vec<usize>,
    pub qm_marked: Vec<usize>,
    pub mm_marked: Vec<usize>,
    pub tau: f64,
}

fn nearest(lattice: &DefectiveLattice, p: Vec2, ids: &[usize]) -> f64 {
    ids.iter()
        .map(|&k| (lattice.site(k) - p).norm())
        .fold(f64::INFINITY, f64::min)
}

/// `ℓ` goes to the QM side iff `dist(ℓ, QM) <= dist(ℓ, FF)`.
pub fn split_marked(marked: &[usize], partition: &RegionPartition, lattice: &DefectiveLattice) -> (Vec<usize>, Vec<usize>) {
    let qm = partition.ids(Region::Qm);
    let ff = partition.ids(Region::Ff);
    let mut to_qm = Vec::new();
    let mut to_mm = Vec::new();
    for &l in marked {
        let p = lattice.site(l);
        if nearest(lattice, p, &qm) <= nearest(lattice, p, &ff) {
            to_qm.push(l);
        } else {
            to_mm.push(l);
        }
    }
    (to_qm, to_mm)
}

/// Grow the balls to contain the marked sites with one shell of slack.
pub fn refine_partition(
    partition: &RegionPartition,
    qm_marked: &[usize],
    mm_marked: &[usize],
    lattice: &DefectiveLattice,
    r_cut_buffer: f64,
) -> Result<RegionPartition> {
    if qm_marked.is_empty() && mm_marked.is_empty() {
        return Ok(partition.clone());
    }
    let far = |ids: &[usize]| {
        ids.iter()
            .map(|&l| partition.center_distance(lattice.site(l)))
            .fold(0.0, f64::max)
    };
    let r_qm = if qm_marked.is_empty() {
        partition.r_qm
    } else {
        partition.r_qm.max(far(qm_marked) + 1.0)
    };
    let mut r_mm = partition.r_mm.max(r_qm + r_cut_buffer);
    if !mm_marked.is_empty() {
        r_mm = r_mm.max(far(mm_marked) + 1.0);
    }
    decompose_multi(lattice, &partition.centers, r_qm, r_mm, r_cut_buffer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    ToleranceMet,
    BudgetExceeded,
    Stagnation,
    IterationLimit,
    SolverFailure,
}

impl Termination {
    pub fn label(self) -> &'static str {
        match self {
            Termination::ToleranceMet => "tolerance",
            Termination::BudgetExceeded => "budget",
            Termination::Stagnation => "stagnation",
            Termination::IterationLimit => "iteration-limit",
            Termination::SolverFailure => "solver-failure",
        }
    }
}

/// One row of the adaptive trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    #[serde(rename = "R_QM")]
    pub r_qm: f64,
    #[serde(rename = "R_MM")]
    pub r_mm: f64,
    #[serde(rename = "N_QM")]
    pub n_qm: usize,
    #[serde(rename = "N_MM")]
    pub n_mm: usize,
    pub eta_total: f64,
    pub true_error: Option<f64>,
    pub seconds: f64,
    pub eigensolves: usize,
    pub termination: String,
}

/// Partition and indicator of one iteration, for plotting and checks.
#[derive(Debug, Clone)]
pub struct IterationSnapshot {
    pub lattice: DefectiveLattice,
    pub partition: RegionPartition,
    pub report: IndicatorReport,
    pub u: Displacement,
    pub marked: Option<MarkingResult>,
}

#[derive(Debug, Clone)]
pub struct AdaptiveTrace {
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<IterationSnapshot>,
    pub termination: Termination,
    pub diagnostic: Option<String>,
}

impl AdaptiveTrace {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parameters of [`adaptive_loop`].
#[derive(Debug, Clone)]
pub struct AdaptiveConfig {
    pub model: TbModel,
    pub spec: LatticeSpec,
    pub centers: Vec<Vec2>,
    pub r_qm: f64,
    pub r_mm: f64,
    pub r_cut_buffer: f64,
    pub r_cut: f64,
    pub n_theta: usize,
    pub tau: f64,
    pub eps_tol: f64,
    pub n_qm_max: usize,
    pub n_mm_max: usize,
    pub max_iterations: usize,
    pub sampled: bool,
    pub solver: SolverOptions,
    pub seminorm: SeminormParams,
    pub exec: Execution,
}

impl AdaptiveConfig {
    /// Single vacancy at the origin with the default numerical knobs.
    pub fn single_vacancy(model: TbModel) -> Self {
        AdaptiveConfig {
            model,
            spec: LatticeSpec::single_vacancy(),
            centers: vec![Vec2::ZERO],
            r_qm: 3.0,
            r_mm: 9.0,
            r_cut_buffer: 5.0,
            r_cut: 5.0,
            n_theta: 8,
            tau: 0.4,
            eps_tol: 1e-3,
            n_qm_max: 400,
            n_mm_max: 3000,
            max_iterations: 12,
            sampled: true,
            solver: SolverOptions::default(),
            seminorm: SeminormParams::default(),
            exec: Execution::Parallel,
        }
    }

    fn domain_for(&self, r_mm: f64) -> f64 {
        let off = self.centers.iter().map(|c| c.norm()).fold(0.0, f64::max);
        (off + r_mm + 2.0 * self.r_cut.max(self.r_cut_buffer) + 0.5).ceil()
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau = {} must lie in (0, 1)", self.tau)));
        }
        if !(self.eps_tol > 0.0) {
            return Err(Error::Config("eps_tol must be positive".into()));
        }
        self.model.validate()
    }
}

/// Reference data used to report true errors along the trace.
pub struct TrueErrorProbe<'a> {
    pub reference: &'a ReferenceSolution,
    pub lattice: &'a DefectiveLattice,
}

/// Materialize a lattice large enough for `r_mm` and the force balls.
fn lattice_for(cfg: &AdaptiveConfig, r_mm: f64) -> Result<DefectiveLattice> {
    build_lattice(&cfg.spec, cfg.domain_for(r_mm))
}

/// Solve, estimate, mark and refine until a stopping rule fires.
pub fn adaptive_loop(cfg: &AdaptiveConfig, pot: &MmPotential, probe: Option<&TrueErrorProbe<'_>>) -> Result<AdaptiveTrace> {
    cfg.validate()?;
    let mut lattice = lattice_for(cfg, cfg.r_mm)?;
    let mut partition = decompose_multi(&lattice, &cfg.centers, cfg.r_qm, cfg.r_mm, cfg.r_cut_buffer)?;
    let mut u = Displacement::zeros(lattice.len());
    let mut trace = AdaptiveTrace {
        records: Vec::new(),
        snapshots: Vec::new(),
        termination: Termination::IterationLimit,
        diagnostic: None,
    };
    for iter in 1..=cfg.max_iterations {
        let n_qm = partition.count(Region::Qm);
        let n_mm = partition.count(Region::Mm);
        if n_qm > cfg.n_qm_max || n_mm > cfg.n_mm_max {
            trace.termination = Termination::BudgetExceeded;
            break;
        }
        let start = Instant::now();
        let problem = HybridProblem::new(&lattice, &cfg.model, &partition, Some(pot))?;
        let state = match solve_equilibrium(&problem, &u, &cfg.solver) {
            Ok(s) => s,
            Err(e) => {
                trace.termination = Termination::SolverFailure;
                trace.diagnostic = Some(e.to_string());
                break;
            }
        };
        u = state.u;
        let report = if cfg.sampled {
            let mesh = multi_defect_mesh(&lattice, &partition, &cfg.centers, cfg.n_theta, cfg.r_cut)?;
            sampled_indicator(&cfg.model, &lattice, &u, &mesh, &cfg.centers, cfg.r_cut, cfg.exec)?
        } else {
            full_indicator(&cfg.model, &lattice, &u, &partition, cfg.r_cut, cfg.exec)?
        };
        let err = match probe {
            // Past the reference's free radius the comparison measures the
            // reference's own truncation, so it is not reported.
            Some(p) if partition.r_mm <= p.reference.r_free() => {
                Some(true_error(&u, &lattice, p.reference, p.lattice, &cfg.seminorm)?)
            }
            _ => None,
        };
        let mut record = TraceRecord {
            iter,
            r_qm: partition.r_qm,
            r_mm: partition.r_mm,
            n_qm,
            n_mm,
            eta_total: report.total,
            true_error: err,
            seconds: 0.0,
            eigensolves: state.evaluations + report.force_evaluations,
            termination: String::new(),
        };
        let mut snapshot = IterationSnapshot {
            lattice: lattice.clone(),
            partition: partition.clone(),
            report: report.clone(),
            u: u.clone(),
            marked: None,
        };
        if report.total < cfg.eps_tol {
            record.seconds = start.elapsed().as_secs_f64();
            trace.records.push(record);
            trace.snapshots.push(snapshot);
            trace.termination = Termination::ToleranceMet;
            break;
        }
        let marking = dorfler_mark(&report, cfg.tau)?;
        let mut sites: Vec<usize> = marking
            .elements
            .iter()
            .flat_map(|&e| report.entries[e].members.iter().copied())
            .collect();
        sites.sort_unstable();
        let (qm_marked, mm_marked) = split_marked(&sites, &partition, &lattice);

        // Grow the domain first if the new radii would not fit.
        let wanted = planned_r_mm(&partition, &qm_marked, &mm_marked, &lattice, cfg.r_cut_buffer);
        if cfg.domain_for(wanted.max(partition.r_mm + 1.0)) > lattice.domain_radius() {
            let bigger = lattice_for(cfg, wanted.max(partition.r_mm + 1.0))?;
            u = transfer(&u, &lattice, &bigger);
            let map = |ids: &[usize]| -> Vec<usize> {
                ids.iter()
                    .filter_map(|&l| bigger.id_of_coords(lattice.coords(l)))
                    .collect()
            };
            let (q, m) = (map(&qm_marked), map(&mm_marked));
            let old = decompose_multi(&bigger, &partition.centers, partition.r_qm, partition.r_mm, cfg.r_cut_buffer)?;
            lattice = bigger;
            partition = old;
            snapshot.marked = Some(MarkingResult {
                marked_elements: marking.elements.clone(),
                marked_sites: sites.clone(),
                qm_marked: qm_marked.clone(),
                mm_marked: mm_marked.clone(),
                tau: cfg.tau,
            });
            partition = refine_partition(&partition, &q, &m, &lattice, cfg.r_cut_buffer)?;
        } else {
            snapshot.marked = Some(MarkingResult {
                marked_elements: marking.elements.clone(),
                marked_sites: sites.clone(),
                qm_marked: qm_marked.clone(),
                mm_marked: mm_marked.clone(),
                tau: cfg.tau,
            });
            partition = refine_partition(&partition, &qm_marked, &mm_marked, &lattice, cfg.r_cut_buffer)?;
        }
        // Warm start: zero on sites that just became free is automatic, and
        // sites that left the free set cannot occur because regions only grow.
        record.seconds = start.elapsed().as_secs_f64();
        trace.records.push(record);
        trace.snapshots.push(snapshot);
        if trace.snapshots.last().map(|s| s.partition.same_regions(&partition)).unwrap_or(false)
            && trace.snapshots.last().unwrap().lattice.len() == lattice.len()
        {
            trace.termination = Termination::Stagnation;
            break;
        }
    }
    if let Some(last) = trace.records.last_mut() {
        last.termination = trace.termination.label().to_string();
    }
    Ok(trace)
}

fn planned_r_mm(
    partition: &RegionPartition,
    qm_marked: &[usize],
    mm_marked: &[usize],
    lattice: &DefectiveLattice,
    r_cut_buffer: f64,
) -> f64 {
    let far = |ids: &[usize]| {
        ids.iter()
            .map(|&l| partition.center_distance(lattice.site(l)) + 1.0)
            .fold(0.0, f64::max)
    };
    let r_qm = partition.r_qm.max(far(qm_marked));
    partition.r_mm.max(r_qm + r_cut_buffer).max(far(mm_marked))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dorfler_examples() {
        let eta = [5.0, 3.0, 2.0];
        assert_eq!(dorfler_select(&eta, 0.5).unwrap().elements, vec![0]);
        assert_eq!(dorfler_select(&eta, 0.9).unwrap().elements, vec![0, 1, 2]);
        assert_eq!(dorfler_select(&eta, 1e-9).unwrap().elements, vec![0]);
        let z = dorfler_select(&[0.0, 0.0], 0.5).unwrap();
        assert!(z.converged && z.elements.is_empty());
        assert!(dorfler_select(&eta, 1.0).is_err());
    }

    #[test]
    fn max_marking_ties() {
        assert_eq!(max_select(&[5.0, 3.0, 2.0]).unwrap().elements, vec![0]);
        assert_eq!(max_select(&[1.0, 1.0, 1.0]).unwrap().elements, vec![0]);
        assert_eq!(max_select(&[1.0, 4.0, 4.0]).unwrap().elements, vec![1]);
    }
}
