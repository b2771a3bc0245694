use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptrial::config::Config;
use adaptrial::designs::{DesignConfig, DesignKind};
use adaptrial::estimators::{estimate_all, EstimatorKind};
use adaptrial::harness::{
    design_convergence_trajectory, initial_outcome_model, metrics, relvar_designs, relvar_estimators, run_experiment,
    run_monte_carlo, write_eic_csv, write_metrics_csv, write_relvar_csv, Allocator, McResult, MetricRow, RelVarRow,
};
use adaptrial::io::{fmt_real, read_trajectory, write_trajectory};
use adaptrial::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "adaptrial", version, about = "Adaptive-trial simulation and estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set mc.reps=10`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
    /// Sets both scenario.seed and mc.base_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo replicates.
    #[arg(long, env = "ADAPTRIAL_THREADS", global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one trial and write trajectory.csv.
    Simulate,
    /// Run all four estimators on a saved trajectory.
    Estimate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Monte Carlo run of the configured design.
    Montecarlo,
    /// ADL-TMLE versus AD-TMLE variance under the two adaptive designs.
    Figure2,
    /// Variance under each design relative to the non-adaptive design.
    Figure3,
    /// Relative second moment of the canonical gradient at the average design over time.
    Figure4,
    /// ADL-TMLE performance under benefit-driven and standard Neyman designs.
    Table1,
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::parse(&fs::read_to_string(p)?)?,
        None => Config::default(),
    };
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.scenario.seed = seed;
        cfg.mc.base_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn with_kind(cfg: &Config, kind: DesignKind) -> Config {
    let mut c = cfg.clone();
    c.design.kind = kind;
    c
}

fn summarize(result: &McResult) {
    let rows = metrics(result);
    for r in rows.iter().filter(|r| r.estimator == EstimatorKind::AdlTmle) {
        println!(
            "{} t={} n={} ADL-TMLE bias={:.5} var={:.5} cov={:.3} oracle_cov={:.3} failures={}",
            r.design, r.time_point, r.n, r.bias, r.var, r.coverage, r.oracle_coverage, r.failures
        );
    }
    if let Some(msg) = result.reps.iter().flat_map(|r| &r.errors).next() {
        eprintln!("{} replicate errors; first: {msg}", result.total_errors());
    }
}

fn monte_carlo(cfg: &Config) -> Result<McResult> {
    let r = run_monte_carlo(cfg)?;
    summarize(&r);
    Ok(r)
}

fn write_metrics(dir: &Path, results: &[&McResult]) -> Result<Vec<MetricRow>> {
    let rows: Vec<MetricRow> = results.iter().flat_map(|r| metrics(r)).collect();
    let mut f = create(dir, "metrics.csv")?;
    write_metrics_csv(&rows, &mut f)?;
    f.flush()?;
    Ok(rows)
}

fn write_relvar(dir: &Path, rows: &[RelVarRow]) -> Result<()> {
    let mut f = create(dir, "relvar.csv")?;
    write_relvar_csv(rows, &mut f)?;
    f.flush()?;
    Ok(())
}

fn simulate(cfg: &Config, dir: &Path) -> Result<()> {
    let scenario = cfg.scenario.scenario()?;
    let sites = cfg.scenario.multisite()?;
    let mut alloc = Allocator::new(&cfg.design, &scenario, sites.as_ref())?;
    let n = cfg.n_at(cfg.mc.num_periods);
    let traj = run_experiment(&scenario, &mut alloc, n, cfg.scenario.seed)?;
    let mut f = create(dir, "trajectory.csv")?;
    write_trajectory(&traj, &mut f)?;
    f.flush()?;
    for (period, n) in cfg.schedule() {
        let obs = &traj.observations()[..n];
        let treated = obs.iter().filter(|o| o.a == 1).count() as f64 / n as f64;
        let ybar = obs.iter().map(|o| o.y).sum::<f64>() / n as f64;
        println!("t={period} n={n} treated_fraction={treated:.4} mean_y={ybar:.4}");
    }
    Ok(())
}

fn estimate(cfg: &Config, dir: &Path, input: &Path) -> Result<()> {
    let traj = read_trajectory::<f64, _>(BufReader::new(File::open(input)?))?;
    let scenario = cfg.scenario.scenario()?;
    let model = initial_outcome_model(&cfg.design.learner, &scenario, &traj)?;
    let mut f = create(dir, "estimates.csv")?;
    writeln!(f, "estimator,n,psi,se,ci_lo,ci_hi,epsilon,score_residual")?;
    let mut first_err = None;
    for (k, r) in estimate_all(&traj, model.as_ref(), &cfg.estimator).into_iter().enumerate() {
        let kind = EstimatorKind::ALL[k];
        match r {
            Ok(e) => {
                let eps = e.epsilon.map(fmt_real).unwrap_or_default();
                writeln!(
                    f,
                    "{},{},{},{},{},{},{},{}",
                    kind.label(),
                    e.n,
                    fmt_real(e.psi),
                    fmt_real(e.se),
                    fmt_real(e.ci_lo),
                    fmt_real(e.ci_hi),
                    eps,
                    fmt_real(e.score_residual)
                )?;
                println!(
                    "{} n={} psi={:.6} se={:.6} ci=[{:.6}, {:.6}]",
                    kind.label(),
                    e.n,
                    e.psi,
                    e.se,
                    e.ci_lo,
                    e.ci_hi
                );
            }
            Err(err) => {
                eprintln!("{}: {err}", kind.label());
                first_err.get_or_insert(err);
            }
        }
    }
    f.flush()?;
    first_err.map_or(Ok(()), Err)
}

fn figure2(cfg: &Config, dir: &Path) -> Result<()> {
    let runs = [
        monte_carlo(&with_kind(cfg, DesignKind::BenefitDriven))?,
        monte_carlo(&with_kind(cfg, DesignKind::StandardNeyman))?,
    ];
    write_metrics(dir, &runs.iter().collect::<Vec<_>>())?;
    let mut rows = Vec::new();
    for r in &runs {
        rows.extend(relvar_estimators(
            r,
            EstimatorKind::AdlTmle,
            EstimatorKind::AdTmle,
            cfg.mc.bootstrap,
            cfg.mc.base_seed,
        )?);
        rows.extend(relvar_estimators(
            r,
            EstimatorKind::AdlAipw,
            EstimatorKind::AdAipw,
            cfg.mc.bootstrap,
            cfg.mc.base_seed,
        )?);
    }
    write_relvar(dir, &rows)
}

fn figure3(cfg: &Config, dir: &Path) -> Result<()> {
    let reference = monte_carlo(&with_kind(cfg, DesignKind::NonAdaptive))?;
    let mut runs = vec![];
    for kind in
        [DesignKind::StandardNeyman, DesignKind::GbarDriven, DesignKind::OracleNeyman, DesignKind::BenefitDriven]
    {
        runs.push(monte_carlo(&with_kind(cfg, kind))?);
    }
    let mut all: Vec<&McResult> = vec![&reference];
    all.extend(runs.iter());
    write_metrics(dir, &all)?;
    let mut rows = Vec::new();
    for r in &runs {
        rows.extend(relvar_designs(r, &reference, EstimatorKind::AdlTmle, cfg.mc.bootstrap, cfg.mc.base_seed)?);
    }
    write_relvar(dir, &rows)
}

fn figure4(cfg: &Config, dir: &Path) -> Result<()> {
    let oracle_var = |kind| DesignConfig { oracle_variance: true, ..with_kind(cfg, kind).design };
    let designs = [
        with_kind(cfg, DesignKind::NonAdaptive).design,
        oracle_var(DesignKind::StandardNeyman),
        oracle_var(DesignKind::GbarDriven),
        with_kind(cfg, DesignKind::OracleNeyman).design,
    ];
    let rows = design_convergence_trajectory(cfg, &designs)?;
    for r in &rows {
        println!("{} t={} n={} rel_mean={:.5} rel_rep0={:.5}", r.design, r.time_point, r.n, r.rel_mean, r.rel_rep0);
    }
    let mut f = create(dir, "eic_trajectory.csv")?;
    write_eic_csv(&rows, &mut f)?;
    f.flush()?;
    Ok(())
}

fn table1(cfg: &Config, dir: &Path) -> Result<()> {
    let runs = [
        monte_carlo(&with_kind(cfg, DesignKind::BenefitDriven))?,
        monte_carlo(&with_kind(cfg, DesignKind::StandardNeyman))?,
    ];
    let rows = write_metrics(dir, &runs.iter().collect::<Vec<_>>())?;
    let mut f = create(dir, "table1.csv")?;
    writeln!(f, "design,time,bias,var,mse,cov,oracle_cov")?;
    for r in rows.iter().filter(|r| r.estimator == EstimatorKind::AdlTmle) {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.design, r.time_point, r.bias, r.var, r.mse, r.coverage, r.oracle_coverage
        )?;
    }
    f.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let dir = &cli.common.out;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_string())?;
    let work = || match &cli.command {
        Command::Simulate => simulate(&cfg, dir),
        Command::Estimate { input } => estimate(&cfg, dir, input),
        Command::Montecarlo => {
            let r = monte_carlo(&cfg)?;
            write_metrics(dir, &[&r])?;
            let rows = relvar_estimators(
                &r,
                EstimatorKind::AdlTmle,
                EstimatorKind::AdTmle,
                cfg.mc.bootstrap,
                cfg.mc.base_seed,
            )?;
            write_relvar(dir, &rows)
        }
        Command::Figure2 => figure2(&cfg, dir),
        Command::Figure3 => figure3(&cfg, dir),
        Command::Figure4 => figure4(&cfg, dir),
        Command::Table1 => table1(&cfg, dir),
    };
    match cli.common.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {n} threads: {e}")))?
            .install(work),
        None => work(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
