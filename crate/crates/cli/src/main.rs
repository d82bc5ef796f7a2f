//! `datareg`: batch entry point for training runs, scoring benchmarks,
//! simulations, verification suites, case studies and fixtures.
//!
//! Exit codes: 0 success, 1 a check or assertion failed, 2 the
//! configuration could not be read or did not validate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use datareg::tensor::Precision;
use datareg_cli::bench::{self, BenchGrid, BenchReport};
use datareg_cli::config::{Overrides, RunConfig};
use datareg_cli::report::{checks_csv, read_json, Check, OutDir};
use datareg_cli::simulate::{self, SimConfig};
use datareg_cli::verify::{self, Fault, Suite, VerifyOptions};
use datareg_cli::{case_study, exit, fixtures, train, CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "datareg", version, about = "Data-regularized update experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Arithmetic precision of activations and weights.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the synthetic two-distribution task.
    Train,
    /// Meter scoring costs on a shape grid.
    BenchScoring,
    /// Monte-Carlo bias/variance tables and regime sweeps.
    Simulate,
    /// Run invariant suites.
    Verify {
        /// Suites to run; all when omitted.
        #[arg(long = "suite", value_enum)]
        suites: Vec<Suite>,
        /// Inject a schedule fault into the ledger suite.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
    },
    /// Per-layer score statistics along a training run.
    CaseStudy,
    /// Regenerate or check the fixture manifest.
    Fixtures {
        #[arg(long, default_value = "fixtures/manifest.json")]
        manifest: PathBuf,
        /// Report differences without rewriting; fails on any difference.
        #[arg(long)]
        check: bool,
        /// Recompute a single fixture and print it.
        #[arg(long)]
        only: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    SkipSwap,
}

fn out_dir(cli: &Cli, fallback: Option<&Path>, default: &str) -> OutDir {
    OutDir::new(cli.out.clone().or_else(|| fallback.map(Path::to_path_buf)).unwrap_or_else(|| PathBuf::from(default)))
}

fn need_config(cli: &Cli) -> Result<&Path> {
    cli.config.as_deref().ok_or_else(|| CliError::Config("this command needs --config".into()))
}

fn report_checks(checks: &[Check]) -> Result<()> {
    for c in checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        precision: cli.precision.map(|p| match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }),
    };
    match &cli.command {
        Command::Train => {
            let mut cfg: RunConfig = read_json(need_config(cli)?)?;
            overrides.apply(&mut cfg);
            let r = train::run(&cfg)?;
            r.write(&out_dir(cli, cfg.out_dir.as_deref(), "out/train"))?;
            let s = &r.summary;
            println!(
                "{:?}: {} steps, target loss {:.6e} -> {:.6e}",
                s.kind, s.steps, s.initial_target_loss, s.final_target_loss
            );
        }
        Command::BenchScoring => {
            let mut grid: BenchGrid = match &cli.config {
                Some(p) => read_json(p)?,
                None => BenchGrid::default(),
            };
            if let Some(s) = cli.seed {
                grid.seed = s;
            }
            let r = bench::run(&grid)?;
            let out = out_dir(cli, None, "out/bench");
            out.write("bench.csv", &BenchReport::csv(&r.rows))?;
            out.write("bench_sweeps.csv", &BenchReport::csv(&r.sweep_rows))?;
            out.write("crossovers.csv", &r.crossover_csv())?;
            out.write("bench.json", &serde_json::to_string_pretty(&r)?)?;
            let mut checks = vec![Check::new(
                "bench",
                "measured_equals_predicted",
                r.all_exact(),
                format!("{} rows", r.rows.len() + r.sweep_rows.len()),
            )];
            for c in &r.crossovers {
                checks.push(Check::new(
                    "bench",
                    &format!("{}_crossover_n{}_m{}_w{}", c.method.name(), c.n, c.m, c.w),
                    c.steps_off <= 1,
                    format!("flip at T={:?}, predicted {:.2}, {} grid steps off", c.flip_t, c.predicted_t, c.steps_off),
                ));
            }
            report_checks(&checks)?;
        }
        Command::Simulate => {
            let mut cfg: SimConfig = match &cli.config {
                Some(p) => read_json(p)?,
                None => SimConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let r = simulate::run(&cfg)?;
            let out = out_dir(cli, None, "out/simulate");
            out.write("sim.csv", &r.results_csv())?;
            if !r.regimes.is_empty() {
                out.write("regime.csv", &r.regime_csv())?;
            }
            out.write("checks.csv", &checks_csv(&r.checks))?;
            out.write("sim.json", &serde_json::to_string_pretty(&r)?)?;
            print!("{}", r.results_csv());
            for g in &r.regimes {
                println!("mismatch {}: {}", g.mismatch, g.transitions.join(" -> "));
            }
            report_checks(&r.checks)?;
        }
        Command::Verify { suites, fault } => {
            let opts = VerifyOptions {
                suites: if suites.is_empty() { Suite::ALL.to_vec() } else { suites.clone() },
                seed: cli.seed.unwrap_or(0),
                fault: fault.map(|FaultArg::SkipSwap| Fault::SkipSwap),
            };
            let checks = verify::run(&opts)?;
            if let Some(o) = &cli.out {
                OutDir::new(o).write("verify.csv", &checks_csv(&checks))?;
            }
            report_checks(&checks)?;
        }
        Command::CaseStudy => {
            let mut cfg: RunConfig = read_json(need_config(cli)?)?;
            overrides.apply(&mut cfg);
            let cs = case_study::run(&cfg)?;
            let out = out_dir(cli, cfg.out_dir.as_deref(), "out/case_study");
            out.write("case_study.csv", &cs.csv())?;
            out.write("case_study.json", &serde_json::to_string_pretty(&cs)?)?;
            for a in &cs.aggregate {
                let rho = a.spearman.map(|v| format!("{v:.3}")).unwrap_or_else(|| "undefined".into());
                println!("layer {}: mean |score| {:.4e}, spearman {rho}", a.layer, a.mean_abs_score);
            }
        }
        Command::Fixtures { manifest, check, only } => {
            let mut m = fixtures::load(manifest)?;
            if let Some(s) = cli.seed {
                m.seed = s;
            }
            if let Some(id) = only {
                m.records.retain(|r| &r.id == id);
                if m.records.is_empty() {
                    return Err(CliError::Config(format!("no fixture named {id}")));
                }
            }
            let (new, changes) = fixtures::regenerate(&m)?;
            for c in &changes {
                println!("{}: {} -> {}", c.id, c.old, c.new);
            }
            if only.is_some() {
                println!("{}", serde_json::to_string(&new.records[0].expected)?);
            } else if *check {
                if !changes.is_empty() {
                    return Err(CliError::Failed(format!("{} fixtures differ", changes.len())));
                }
            } else {
                fixtures::save(manifest, &new)?;
            }
            println!("{} fixtures, {} changed", new.records.len(), changes.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
