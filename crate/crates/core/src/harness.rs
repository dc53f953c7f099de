//! Experiment configuration and drivers that emit tidy CSV tables.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::{adaptive_loop, AdaptiveConfig, AdaptiveTrace, TrueErrorProbe};
use crate::coupling::{decompose_multi, pure_qm_partition, HybridProblem, HybridState, Region, RegionPartition, SolverOptions, solve_equilibrium};
use crate::error::{Error, Result};
use crate::estimator::{full_indicator, multi_defect_mesh, sampled_indicator, IndicatorReport};
use crate::geom::Vec2;
use crate::lattice::{build_lattice, DefectiveLattice, Displacement, LatticeSpec, SeminormParams};
use crate::mmpotential::{build_mm_potential, cached_potential, MmPotential};
use crate::par::Execution;
use crate::reference::{solve_reference, true_error, ReferenceSolution};
use crate::tightbinding::{ScalarFn, TbModel};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    PureQmSweep,
    RcutStudy,
    FixedQmmm,
    Adaptive,
    DivacancyAdaptive,
    IndicatorBenchmark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mu: f64,
    pub beta: f64,
    pub cutoff: f64,
    pub taper_width: f64,
    pub repulsion_amplitude: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let m = TbModel::morse_toy();
        let amplitude = match m.repulsion {
            ScalarFn::Exponential { amplitude, .. } => amplitude,
            _ => 0.0,
        };
        ModelConfig {
            mu: m.mu,
            beta: m.beta,
            cutoff: m.cutoff,
            taper_width: m.taper_width,
            repulsion_amplitude: amplitude,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<TbModel> {
        let mut m = TbModel::morse_toy();
        m.mu = self.mu;
        m.beta = self.beta;
        m.cutoff = self.cutoff;
        m.taper_width = self.taper_width;
        if let ScalarFn::Exponential { amplitude, .. } = &mut m.repulsion {
            *amplitude = self.repulsion_amplitude;
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    /// Vacancy positions; each also serves as a region centre.
    pub vacancies: Vec<[f64; 2]>,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig {
            vacancies: vec![[0.0, 0.0]],
        }
    }
}

impl LatticeConfig {
    pub fn centers(&self) -> Vec<Vec2> {
        self.vacancies.iter().map(|&p| Vec2::from(p)).collect()
    }

    pub fn spec(&self) -> LatticeSpec {
        LatticeSpec::triangular().with_vacancies(self.centers())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    pub gamma: f64,
    pub stencil_radius: f64,
    pub r_qm: f64,
    pub r_mm: f64,
    pub r_cut_buffer: f64,
    pub r_cut: f64,
    pub r_qm_list: Vec<f64>,
    pub r_cut_list: Vec<f64>,
    pub r_mm_list: Vec<f64>,
    pub n_theta: usize,
    pub tau: f64,
    pub eps_tol: f64,
    pub n_qm_max: usize,
    pub n_mm_max: usize,
    pub max_iterations: usize,
    pub sampled: bool,
    pub r_ref: f64,
    /// Width of the clamped shell around pure-QM and reference clusters.
    pub reference_buffer: f64,
    /// Compare against a pure-QM reference where one is meaningful.
    pub true_error: bool,
    pub g_tol: f64,
    pub max_iter: usize,
    pub r_cut_mm: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            gamma: 1.0,
            stencil_radius: 3.05,
            r_qm: 4.0,
            r_mm: 16.0,
            r_cut_buffer: 5.0,
            r_cut: 5.0,
            r_qm_list: vec![3.0, 4.0, 5.0, 6.0],
            r_cut_list: vec![3.0, 4.0, 5.0, 6.0],
            r_mm_list: vec![10.0, 13.0, 16.0],
            n_theta: 8,
            tau: 0.4,
            eps_tol: 1e-3,
            n_qm_max: 400,
            n_mm_max: 3000,
            max_iterations: 12,
            sampled: true,
            r_ref: 20.0,
            reference_buffer: 5.0,
            true_error: true,
            g_tol: 1e-6,
            max_iter: 2000,
            r_cut_mm: 3.05,
        }
    }
}

impl Numerics {
    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            g_tol: self.g_tol,
            max_iter: self.max_iter,
            ..SolverOptions::default()
        }
    }

    pub fn seminorm(&self) -> SeminormParams {
        SeminormParams {
            gamma: self.gamma,
            stencil_radius: self.stencil_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Where MM potentials and references are cached; none disables caching.
    pub cache_dir: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            cache_dir: Some(PathBuf::from("cache")),
        }
    }
}

/// Everything a study needs, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: Option<StudyKind>,
    pub model: ModelConfig,
    pub lattice: LatticeConfig,
    pub numerics: Numerics,
    pub output: OutputConfig,
    /// Recorded in every artifact; only perturbation tests draw from it.
    pub seed: u64,
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    };
    Ok((key.trim().to_string(), value))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parse `text`, then apply `section.key=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut table, &k, v)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.numerics;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(n.tau > 0.0 && n.tau < 1.0) {
            return bad(format!("tau = {} must lie in (0, 1)", n.tau));
        }
        if !(n.r_qm < n.r_mm) {
            return bad(format!("need r_qm < r_mm, got {} and {}", n.r_qm, n.r_mm));
        }
        if n.true_error && !(n.r_mm < n.r_ref) {
            return bad(format!("need r_mm < r_ref, got {} and {}", n.r_mm, n.r_ref));
        }
        if n.r_qm_list.iter().any(|&r| !(r < n.r_ref)) {
            return bad("every r_qm_list entry must be below r_ref".into());
        }
        if !(n.eps_tol > 0.0) || !(n.g_tol > 0.0) || !(n.r_cut > 0.0) || n.n_theta == 0 {
            return bad("eps_tol, g_tol, r_cut and n_theta must be positive".into());
        }
        if self.lattice.vacancies.is_empty() {
            return bad("at least one vacancy is required".into());
        }
        self.model.build()?;
        n.seminorm().validate()
    }

    /// Short digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        crate::lattice::hex16(&Sha256::digest(bytes))
    }
}

/// A table row with a fixed column list.
pub trait Row: Serialize {
    const HEADER: &'static [&'static str];
}

/// Render rows as CSV with `#` provenance lines ahead of the header.
pub fn render_table<T: Row>(cfg: &ExperimentConfig, rows: &[T]) -> Result<Vec<u8>> {
    let mut out = format!(
        "# qmmm-adapt {VERSION}\n# config {}\n# seed {}\n",
        cfg.hash(),
        cfg.seed
    )
    .into_bytes();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut out);
        w.write_record(T::HEADER)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(out)
}

pub fn write_table<T: Row>(path: &Path, cfg: &ExperimentConfig, rows: &[T]) -> Result<()> {
    crate::io::write_atomic(path, &render_table(cfg, rows)?)
}

/// Model, lattice spec and MM potential shared by the drivers.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub model: TbModel,
    pub spec: LatticeSpec,
    pub centers: Vec<Vec2>,
    pub exec: Execution,
    pot: Option<MmPotential>,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        Ok(Context {
            model: cfg.model.build()?,
            spec: cfg.lattice.spec(),
            centers: cfg.lattice.centers(),
            exec,
            cfg,
            pot: None,
        })
    }

    pub fn potential(&mut self) -> Result<&MmPotential> {
        if self.pot.is_none() {
            let cell = LatticeSpec::triangular();
            let r = self.cfg.numerics.r_cut_mm;
            let pot = match &self.cfg.output.cache_dir {
                Some(dir) => cached_potential(dir, &self.model, &cell, r, self.exec)?,
                None => build_mm_potential(&self.model, &cell, r, 2, self.exec)?,
            };
            self.pot = Some(pot);
        }
        Ok(self.pot.as_ref().expect("set above"))
    }

    pub fn reference(&self) -> Result<(ReferenceSolution, DefectiveLattice)> {
        let n = &self.cfg.numerics;
        solve_reference(
            &self.model,
            &self.spec,
            n.r_ref,
            n.reference_buffer,
            &n.solver(),
            self.cfg.output.cache_dir.as_deref(),
        )
    }

    /// Lattice radius covering `r_mm` plus the force balls beyond it.
    pub fn domain_for(&self, r_mm: f64) -> f64 {
        let n = &self.cfg.numerics;
        let off = self.centers.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let reach = n.r_cut_list.iter().copied().fold(n.r_cut.max(n.r_cut_buffer), f64::max);
        (off + r_mm + 2.0 * reach + 0.5).ceil()
    }

    fn indicators(
        &self,
        lattice: &DefectiveLattice,
        u: &Displacement,
        partition: &RegionPartition,
        r_cut: f64,
    ) -> Result<(IndicatorReport, IndicatorReport)> {
        let full = full_indicator(&self.model, lattice, u, partition, r_cut, self.exec)?;
        let mesh = multi_defect_mesh(lattice, partition, &self.centers, self.cfg.numerics.n_theta, r_cut)?;
        let sampled = sampled_indicator(&self.model, lattice, u, &mesh, &self.centers, r_cut, self.exec)?;
        Ok((full, sampled))
    }
}

fn relax(lattice: &DefectiveLattice, model: &TbModel, partition: &RegionPartition, pot: Option<&MmPotential>, opts: &SolverOptions) -> Result<HybridState> {
    let problem = HybridProblem::new(lattice, model, partition, pot)?;
    let state = solve_equilibrium(&problem, &Displacement::zeros(lattice.len()), opts)?;
    if !state.converged {
        return Err(Error::Optimization {
            message: format!("stopped at |g|inf = {:.3e}", state.gradient_norm),
            iterations: state.iterations,
            last_iterate: state.u.into_inner(),
        });
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub r_qm: f64,
    pub n_qm: usize,
    pub eta_full: f64,
    pub eta_sampled: f64,
    pub true_error: f64,
    /// `eta_full / true_error`.
    pub ratio: f64,
    pub status: String,
}

impl Row for SweepRow {
    const HEADER: &'static [&'static str] = &["R_QM", "N_QM", "eta_full", "eta_sampled", "true_error", "ratio", "status"];
}

impl SweepRow {
    fn failed(r_qm: f64, e: &Error) -> Self {
        SweepRow {
            r_qm,
            n_qm: 0,
            eta_full: f64::NAN,
            eta_sampled: f64::NAN,
            true_error: f64::NAN,
            ratio: f64::NAN,
            status: e.to_string(),
        }
    }
}

/// Pure-QM solves on the reference lattice for each radius in `r_qm_list`.
pub fn run_pure_qm_sweep(ctx: &Context) -> Result<Vec<SweepRow>> {
    let n = &ctx.cfg.numerics;
    if n.r_qm_list.is_empty() {
        return Ok(Vec::new());
    }
    let (reference, lattice) = ctx.reference()?;
    let params = n.seminorm();
    let mut rows = Vec::new();
    for &r_qm in &n.r_qm_list {
        let row = (|| -> Result<SweepRow> {
            let partition = pure_qm_partition(&lattice, &ctx.centers, r_qm, n.reference_buffer)?;
            let state = relax(&lattice, &ctx.model, &partition, None, &n.solver())?;
            let (full, sampled) = ctx.indicators(&lattice, &state.u, &partition, n.r_cut)?;
            let err = true_error(&state.u, &lattice, &reference, &lattice, &params)?;
            Ok(SweepRow {
                r_qm,
                n_qm: partition.count(Region::Qm),
                eta_full: full.total,
                eta_sampled: sampled.total,
                true_error: err,
                ratio: full.total / err,
                status: "ok".into(),
            })
        })();
        rows.push(row.unwrap_or_else(|e| SweepRow::failed(r_qm, &e)));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RcutRow {
    pub r_qm: f64,
    pub r_cut: f64,
    pub eta: f64,
    /// Relative distance to the largest `r_cut` in the list.
    pub rel_to_largest: f64,
    pub status: String,
}

impl Row for RcutRow {
    const HEADER: &'static [&'static str] = &["R_QM", "r_cut", "eta", "rel_to_largest", "status"];
}

/// Full indicator of each pure-QM state for every `r_cut` in `r_cut_list`.
pub fn run_rcut_study(ctx: &Context) -> Result<Vec<RcutRow>> {
    let n = &ctx.cfg.numerics;
    if n.r_qm_list.is_empty() || n.r_cut_list.is_empty() {
        return Ok(Vec::new());
    }
    let lattice = build_lattice(&ctx.spec, n.r_ref)?;
    let largest = n.r_cut_list.iter().copied().fold(f64::MIN, f64::max);
    let mut rows = Vec::new();
    for &r_qm in &n.r_qm_list {
        let etas = (|| -> Result<Vec<f64>> {
            let partition = pure_qm_partition(&lattice, &ctx.centers, r_qm, n.reference_buffer)?;
            let state = relax(&lattice, &ctx.model, &partition, None, &n.solver())?;
            n.r_cut_list
                .iter()
                .map(|&rc| Ok(full_indicator(&ctx.model, &lattice, &state.u, &partition, rc, ctx.exec)?.total))
                .collect()
        })();
        match etas {
            Ok(etas) => {
                let top = n.r_cut_list.iter().zip(&etas).find(|(r, _)| **r == largest).map(|(_, e)| *e).unwrap_or(f64::NAN);
                for (&r_cut, &eta) in n.r_cut_list.iter().zip(&etas) {
                    rows.push(RcutRow {
                        r_qm,
                        r_cut,
                        eta,
                        rel_to_largest: (eta - top).abs() / top,
                        status: "ok".into(),
                    });
                }
            }
            Err(e) => rows.extend(n.r_cut_list.iter().map(|&r_cut| RcutRow {
                r_qm,
                r_cut,
                eta: f64::NAN,
                rel_to_largest: f64::NAN,
                status: e.to_string(),
            })),
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedRow {
    pub r_qm: f64,
    pub r_mm: f64,
    pub n_qm: usize,
    pub n_mm: usize,
    pub energy: f64,
    pub iterations: usize,
    pub eta_full: f64,
    pub eta_sampled: f64,
    pub evals_full: usize,
    pub evals_sampled: usize,
    pub true_error: Option<f64>,
}

impl Row for FixedRow {
    const HEADER: &'static [&'static str] = &[
        "R_QM", "R_MM", "N_QM", "N_MM", "energy", "iterations", "eta_full", "eta_sampled", "evals_full",
        "evals_sampled", "true_error",
    ];
}

/// Output of [`run_fixed_qmmm`].
pub struct FixedResult {
    pub row: FixedRow,
    pub lattice: DefectiveLattice,
    pub partition: RegionPartition,
    pub state: HybridState,
    pub full: IndicatorReport,
    pub sampled: IndicatorReport,
}

/// One hybrid solve at the configured `(r_qm, r_mm)`.
pub fn run_fixed_qmmm(ctx: &mut Context) -> Result<FixedResult> {
    ctx.potential()?;
    let n = ctx.cfg.numerics.clone();
    let lattice = build_lattice(&ctx.spec, ctx.domain_for(n.r_mm))?;
    let partition = decompose_multi(&lattice, &ctx.centers, n.r_qm, n.r_mm, n.r_cut_buffer)?;
    let state = relax(&lattice, &ctx.model, &partition, ctx.pot.as_ref(), &n.solver())?;
    let (full, sampled) = ctx.indicators(&lattice, &state.u, &partition, n.r_cut)?;
    let err = if n.true_error {
        let (reference, ref_lattice) = ctx.reference()?;
        Some(true_error(&state.u, &lattice, &reference, &ref_lattice, &n.seminorm())?)
    } else {
        None
    };
    let row = FixedRow {
        r_qm: n.r_qm,
        r_mm: n.r_mm,
        n_qm: partition.count(Region::Qm),
        n_mm: partition.count(Region::Mm),
        energy: state.energy,
        iterations: state.iterations,
        eta_full: full.total,
        eta_sampled: sampled.total,
        evals_full: full.force_evaluations,
        evals_sampled: sampled.force_evaluations,
        true_error: err,
    };
    Ok(FixedResult {
        row,
        lattice,
        partition,
        state,
        full,
        sampled,
    })
}

impl Context {
    /// The adaptive-loop settings implied by the configuration.
    pub fn adaptive_config(&self) -> AdaptiveConfig {
        let n = &self.cfg.numerics;
        AdaptiveConfig {
            model: self.model.clone(),
            spec: self.spec.clone(),
            centers: self.centers.clone(),
            r_qm: n.r_qm,
            r_mm: n.r_mm,
            r_cut_buffer: n.r_cut_buffer,
            r_cut: n.r_cut,
            n_theta: n.n_theta,
            tau: n.tau,
            eps_tol: n.eps_tol,
            n_qm_max: n.n_qm_max,
            n_mm_max: n.n_mm_max,
            max_iterations: n.max_iterations,
            sampled: n.sampled,
            solver: n.solver(),
            seminorm: n.seminorm(),
            exec: self.exec,
        }
    }
}

/// Run the adaptive loop, with true errors when `numerics.true_error` is set.
pub fn run_adaptive(ctx: &mut Context) -> Result<AdaptiveTrace> {
    let acfg = ctx.adaptive_config();
    let reference = if ctx.cfg.numerics.true_error {
        Some(ctx.reference()?)
    } else {
        None
    };
    let pot = ctx.potential()?;
    let probe = reference.as_ref().map(|(r, l)| TrueErrorProbe {
        reference: r,
        lattice: l,
    });
    adaptive_loop(&acfg, pot, probe.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub r_qm: f64,
    pub r_mm: f64,
    pub n_qm: usize,
    pub n_mm: usize,
    /// `N_QM³ + N_MM`.
    pub cost: f64,
    pub eta_total: f64,
    pub true_error: Option<f64>,
    pub seconds: f64,
    pub eigensolves: usize,
    pub termination: String,
}

impl Row for TraceRow {
    const HEADER: &'static [&'static str] = &[
        "iter", "R_QM", "R_MM", "N_QM", "N_MM", "cost", "eta_total", "true_error", "seconds", "eigensolves",
        "termination",
    ];
}

pub fn trace_rows(trace: &AdaptiveTrace) -> Vec<TraceRow> {
    trace
        .records
        .iter()
        .map(|r| TraceRow {
            iter: r.iter,
            r_qm: r.r_qm,
            r_mm: r.r_mm,
            n_qm: r.n_qm,
            n_mm: r.n_mm,
            cost: (r.n_qm as f64).powi(3) + r.n_mm as f64,
            eta_total: r.eta_total,
            true_error: r.true_error,
            seconds: r.seconds,
            eigensolves: r.eigensolves,
            termination: r.termination.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionRow {
    pub site: usize,
    pub x: f64,
    pub y: f64,
    pub region: &'static str,
    pub buffer: bool,
}

impl Row for PartitionRow {
    const HEADER: &'static [&'static str] = &["site", "x", "y", "region", "buffer"];
}

pub fn partition_rows(lattice: &DefectiveLattice, partition: &RegionPartition) -> Vec<PartitionRow> {
    partition
        .labels
        .iter()
        .enumerate()
        .map(|(l, lab)| {
            let p = lattice.site(l);
            PartitionRow {
                site: l,
                x: p.x,
                y: p.y,
                region: lab.label(),
                buffer: partition.buffer.binary_search(&l).is_ok(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndicatorRow {
    pub element: usize,
    pub repatom: usize,
    pub radius: f64,
    pub weight: f64,
    pub force: f64,
    pub eta: f64,
}

impl Row for IndicatorRow {
    const HEADER: &'static [&'static str] = &["element", "repatom", "radius", "weight", "force", "eta"];
}

pub fn indicator_rows(report: &IndicatorReport) -> Vec<IndicatorRow> {
    report
        .entries
        .iter()
        .map(|e| IndicatorRow {
            element: e.element,
            repatom: e.repatom,
            radius: e.radius,
            weight: e.weight,
            force: e.force,
            eta: e.eta,
        })
        .collect()
}

/// Trace, per-iteration indicators and partition snapshots under `dir`.
pub fn write_adaptive(dir: &Path, cfg: &ExperimentConfig, trace: &AdaptiveTrace) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_table(&dir.join("trace.csv"), cfg, &trace_rows(trace))?;
    for (k, snap) in trace.snapshots.iter().enumerate() {
        let it = k + 1;
        write_table(&dir.join(format!("indicator-{it:02}.csv")), cfg, &indicator_rows(&snap.report))?;
        write_table(
            &dir.join(format!("partition-{it:02}.csv")),
            cfg,
            &partition_rows(&snap.lattice, &snap.partition),
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub r_mm: f64,
    pub evals_full: usize,
    pub evals_sampled: usize,
    pub seconds_full: f64,
    pub seconds_sampled: f64,
    pub eta_full: f64,
    pub eta_sampled: f64,
    pub rel_diff: f64,
}

impl Row for BenchRow {
    const HEADER: &'static [&'static str] = &[
        "R_MM", "evals_full", "evals_sampled", "seconds_full", "seconds_sampled", "eta_full", "eta_sampled",
        "rel_diff",
    ];
}

/// Wall time and force-evaluation counts of both indicators per `R_MM`.
pub fn run_indicator_benchmark(ctx: &mut Context) -> Result<Vec<BenchRow>> {
    ctx.potential()?;
    let n = ctx.cfg.numerics.clone();
    let mut rows = Vec::new();
    for &r_mm in &n.r_mm_list {
        let lattice = build_lattice(&ctx.spec, ctx.domain_for(r_mm))?;
        let partition = decompose_multi(&lattice, &ctx.centers, n.r_qm, r_mm, n.r_cut_buffer)?;
        let state = relax(&lattice, &ctx.model, &partition, ctx.pot.as_ref(), &n.solver())?;
        let t = Instant::now();
        let full = full_indicator(&ctx.model, &lattice, &state.u, &partition, n.r_cut, ctx.exec)?;
        let seconds_full = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let mesh = multi_defect_mesh(&lattice, &partition, &ctx.centers, n.n_theta, n.r_cut)?;
        let sampled = sampled_indicator(&ctx.model, &lattice, &state.u, &mesh, &ctx.centers, n.r_cut, ctx.exec)?;
        let seconds_sampled = t.elapsed().as_secs_f64();
        rows.push(BenchRow {
            r_mm,
            evals_full: full.force_evaluations,
            evals_sampled: sampled.force_evaluations,
            seconds_full,
            seconds_sampled,
            eta_full: full.total,
            eta_sampled: sampled.total,
            rel_diff: (sampled.total - full.total).abs() / full.total,
        });
    }
    Ok(rows)
}
