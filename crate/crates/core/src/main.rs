use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qmmm_adapt::adaptive::Termination;
use qmmm_adapt::harness::{
    run_adaptive, run_fixed_qmmm, run_indicator_benchmark, run_pure_qm_sweep, run_rcut_study, trace_rows,
    write_adaptive, write_table, indicator_rows, partition_rows, Context, ExperimentConfig, StudyKind,
};
use qmmm_adapt::par::{configure_threads, Execution};
use qmmm_adapt::Error;

#[derive(Parser)]
#[command(name = "qmmm", version, about = "Adaptive QM/MM experiments on a defective triangular lattice")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed recorded in every artifact (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set numerics.tau=0.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pure-QM solves over `numerics.r_qm_list` against the reference.
    PureQmSweep,
    /// Indicator totals for each `numerics.r_cut_list` entry.
    RcutStudy,
    /// One hybrid solve at `numerics.r_qm`, `numerics.r_mm`.
    FixedQmmm,
    /// The adaptive loop (single vacancy or several).
    Adaptive,
    /// Full versus sampled indicator cost over `numerics.r_mm_list`.
    IndicatorBench,
    /// Build the MM potential into `output.cache_dir`.
    BuildMmCache,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidSpec(_) => 2,
        _ => 3,
    }
}

fn expect_study(cfg: &ExperimentConfig, allowed: &[StudyKind]) -> Result<(), Error> {
    match cfg.study {
        Some(s) if !allowed.contains(&s) => Err(Error::Config(format!(
            "config declares study {s:?}, which this subcommand does not run"
        ))),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    let mut cfg = ExperimentConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(out) = cli.common.out {
        cfg.output.dir = out;
    }
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    let exec = match cli.common.threads {
        Some(0) => return Err(Error::Config("--threads must be positive".into())),
        Some(1) => Execution::Sequential,
        Some(n) => {
            configure_threads(n).map_err(Error::Config)?;
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir)?;
    let mut ctx = Context::new(cfg.clone(), exec)?;
    match cli.command {
        Command::PureQmSweep => {
            expect_study(&cfg, &[StudyKind::PureQmSweep])?;
            let rows = run_pure_qm_sweep(&ctx)?;
            for r in &rows {
                println!("R_QM {:>4} err {:.4e} eta {:.4e} ratio {:.4} {}", r.r_qm, r.true_error, r.eta_full, r.ratio, r.status);
            }
            write_table(&dir.join("pure-qm-sweep.csv"), &cfg, &rows)?;
        }
        Command::RcutStudy => {
            expect_study(&cfg, &[StudyKind::RcutStudy])?;
            let rows = run_rcut_study(&ctx)?;
            for r in &rows {
                println!("R_QM {:>4} r_cut {:>4} eta {:.4e} rel {:.4}", r.r_qm, r.r_cut, r.eta, r.rel_to_largest);
            }
            write_table(&dir.join("rcut-study.csv"), &cfg, &rows)?;
        }
        Command::FixedQmmm => {
            expect_study(&cfg, &[StudyKind::FixedQmmm])?;
            let res = run_fixed_qmmm(&mut ctx)?;
            println!(
                "E {:.6e} eta full {:.4e} sampled {:.4e} evals {}/{}",
                res.row.energy, res.row.eta_full, res.row.eta_sampled, res.row.evals_full, res.row.evals_sampled
            );
            write_table(&dir.join("fixed-qmmm.csv"), &cfg, &[res.row.clone()])?;
            write_table(&dir.join("fixed-indicator-full.csv"), &cfg, &indicator_rows(&res.full))?;
            write_table(&dir.join("fixed-indicator-sampled.csv"), &cfg, &indicator_rows(&res.sampled))?;
            write_table(&dir.join("fixed-partition.csv"), &cfg, &partition_rows(&res.lattice, &res.partition))?;
        }
        Command::Adaptive => {
            expect_study(&cfg, &[StudyKind::Adaptive, StudyKind::DivacancyAdaptive])?;
            let trace = run_adaptive(&mut ctx)?;
            for r in trace_rows(&trace) {
                println!(
                    "iter {:>2} R_QM {:.2} R_MM {:.2} N_QM {} N_MM {} eta {:.4e} err {}",
                    r.iter,
                    r.r_qm,
                    r.r_mm,
                    r.n_qm,
                    r.n_mm,
                    r.eta_total,
                    r.true_error.map(|e| format!("{e:.4e}")).unwrap_or_else(|| "-".into())
                );
            }
            write_adaptive(&dir, &cfg, &trace)?;
            println!("termination: {}", trace.termination.label());
            if let Some(d) = &trace.diagnostic {
                eprintln!("solver: {d}");
                return Ok(3);
            }
            if trace.termination == Termination::BudgetExceeded {
                return Ok(4);
            }
        }
        Command::IndicatorBench => {
            expect_study(&cfg, &[StudyKind::IndicatorBenchmark])?;
            let rows = run_indicator_benchmark(&mut ctx)?;
            for r in &rows {
                println!(
                    "R_MM {:>5} full {} in {:.2}s sampled {} in {:.2}s rel {:.3}",
                    r.r_mm, r.evals_full, r.seconds_full, r.evals_sampled, r.seconds_sampled, r.rel_diff
                );
            }
            write_table(&dir.join("indicator-bench.csv"), &cfg, &rows)?;
        }
        Command::BuildMmCache => {
            if cfg.output.cache_dir.is_none() {
                return Err(Error::Config("output.cache_dir is not set".into()));
            }
            let pot = ctx.potential()?;
            println!("MM potential: {} neighbours, v0 = {:.12e}", pot.len(), pot.v0);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
