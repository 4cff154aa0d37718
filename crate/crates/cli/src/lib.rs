//! Argument parsing and command implementations behind the `mcpval`
//! binary. Results go to `out`; progress records and diagnostics go to
//! `err`, so `out` is byte-identical for identical arguments and seed.

use std::fs;
use std::hash::BuildHasher;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, Command as Process, Stdio};
use std::time::{Duration, SystemTime};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mcpval::applications::{chisq_critical, chisq_pvalue, ContingencyTable, SampleCounts, Study};
use mcpval::inference::{
    confidence_interval, confidence_interval_running, curve, naive_risk, CiOptions, ConfidenceInterval, HorizonPolicy,
};
use mcpval::persist;
use mcpval::source::{Prefetch, TextSource};
use mcpval::{
    interim_interval, run, sim_rng, BernoulliSource, BitSource, BoundaryTable, Error, Progress, ReportEvery,
    RunOptions, RunResult, RunStatus, Side, SpendingSequence, TableCache, TableHandle,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_TRUNCATED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mcpval", version, about = "Sequential Monte Carlo p-values with bounded resampling risk")]
pub struct Cli {
    #[command(flatten)]
    pub config: Config,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Config {
    /// Significance threshold the estimate is compared against.
    #[arg(long, global = true, default_value_t = 0.05)]
    pub alpha: f64,
    /// Bound on the resampling risk; at most 1/4.
    #[arg(long = "eps", global = true, default_value_t = 1e-3)]
    pub epsilon: f64,
    /// Parameter of the default spending sequence eps * n / (k + n).
    #[arg(long, global = true, default_value_t = 1000)]
    pub k: u64,
    /// Tabulated spending sequence: eps_1, eps_2, ... separated by
    /// whitespace or commas. Replaces --k.
    #[arg(long, global = true)]
    pub spending_file: Option<PathBuf>,
    /// Seed for every random draw; chosen from entropy when absent and
    /// always echoed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Precomputed boundary table (CSV plus `.state.json` sidecar); loaded
    /// when present, written back when extended.
    #[arg(long, global = true)]
    pub boundary_file: Option<PathBuf>,
    /// Worker threads for grid sweeps and sample production.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Suppress progress records on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Text,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the stopping boundaries for n = 1..N as CSV.
    Boundaries {
        #[arg(long, default_value_t = 5000)]
        n: u64,
    },
    /// Run the procedure on a bit stream.
    Run(RunArgs),
    /// Resampling-risk curve over a grid of p.
    Risk(CurveArgs),
    /// Expected stopping time over a grid of p, with Wald's lower bound.
    Etau(CurveArgs),
    /// Contingency-table case study.
    Demo(DemoArgs),
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct SourceArgs {
    /// Simulate Bernoulli(P) exceedance indicators.
    #[arg(long, value_name = "P")]
    pub simulate_p: Option<f64>,
    /// Read one 0/1 per line from standard input.
    #[arg(long)]
    pub stdin: bool,
    /// Run a shell command and read one 0/1 per line from its stdout.
    #[arg(long, value_name = "COMMAND")]
    pub cmd: Option<String>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Progress record every this many steps (0 disables).
    #[arg(long, default_value_t = 10_000)]
    pub report_every: u64,
    /// Progress record after this many seconds of wall time (0 disables).
    #[arg(long, default_value_t = 1.0)]
    pub report_secs: f64,
    /// Also report a 1 - BETA confidence interval.
    #[arg(long, value_name = "BETA")]
    pub ci: Option<f64>,
}

#[derive(Args, Debug)]
pub struct CurveArgs {
    /// Explicit grid points; overrides --grid-*.
    #[arg(long, value_delimiter = ',')]
    pub p: Vec<f64>,
    #[arg(long, default_value_t = 0.005)]
    pub grid_from: f64,
    #[arg(long, default_value_t = 0.995)]
    pub grid_to: f64,
    #[arg(long, default_value_t = 99)]
    pub grid_points: usize,
    /// Initial recursion horizon; doubled until the residual is small.
    #[arg(long, default_value_t = 100_000)]
    pub horizon: u64,
    #[arg(long, default_value_t = 1 << 21)]
    pub max_horizon: u64,
    #[arg(long, default_value_t = 1e-8)]
    pub residual_target: f64,
    /// Add the risk of the fixed-size estimator with this many samples.
    #[arg(long)]
    pub naive_n: Option<u64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoName {
    Bootstrap,
    Level,
    DoubleBootstrap,
    TripleLevel,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(value_enum)]
    pub name: DemoName,
    /// Contingency table (CSV rows); defaults to the bundled 5x7 table.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Truncate the outermost run.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Truncation of inner bootstrap runs.
    #[arg(long, default_value_t = 250)]
    pub m: u64,
    /// Truncation of the middle runs of the triple-level check.
    #[arg(long, default_value_t = 500)]
    pub m_middle: u64,
    /// First-stage budget of the double bootstrap [default: 10000, or 1000
    /// per outer table in triple-level].
    #[arg(long)]
    pub first_stage: Option<u64>,
    /// Nominal level of the tests whose level is checked.
    #[arg(long, default_value_t = 0.05)]
    pub nominal: f64,
    /// Thresholds for the level demo.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.07")]
    pub thresholds: Vec<f64>,
}

/// Runs `cli`, returning the process exit code.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let outcome = match &cli.command {
        Command::Boundaries { n } => cmd_boundaries(&cli.config, *n, out),
        Command::Run(args) => cmd_run(&cli.config, args, out, err),
        Command::Risk(args) => cmd_curve(&cli.config, args, CurveKind::Risk, out),
        Command::Etau(args) => cmd_curve(&cli.config, args, CurveKind::StopTime, out),
        Command::Demo(args) => cmd_demo(&cli.config, args, out),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParameter(_)
        | Error::SpendingOutOfRange { .. }
        | Error::Format(_)
        | Error::ParameterMismatch(_)
        | Error::MassDefect { .. }
        | Error::NonBracketing(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

fn entropy_seed() -> u64 {
    std::collections::hash_map::RandomState::new().hash_one(SystemTime::now())
}

impl Config {
    fn check(&self) -> Result<(), Error> {
        if !(self.epsilon > 0.0 && self.epsilon <= 0.25) {
            return Err(config_error(format!("epsilon must satisfy 0 < epsilon <= 1/4 (got {})", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(config_error(format!("alpha must lie in (0, 1) (got {})", self.alpha)));
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or_else(entropy_seed)
    }

    fn spending(&self) -> Result<SpendingSequence, Error> {
        match &self.spending_file {
            None => SpendingSequence::new_default(self.epsilon, self.k),
            Some(path) => {
                let text = fs::read_to_string(path)?;
                let values = text
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|f| !f.is_empty())
                    .map(|f| f.parse::<f64>().map_err(|e| Error::Format(format!("{f:?}: {e}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                SpendingSequence::new_custom(self.epsilon, values)
            }
        }
    }

    fn format(&self, default: Format, allowed: &[Format]) -> Result<Format, Error> {
        let f = self.format.unwrap_or(default);
        if allowed.contains(&f) {
            Ok(f)
        } else {
            Err(config_error(format!("--format {f:?} is not supported by this command").to_lowercase()))
        }
    }
}

/// Boundary table for `alpha`, from `--boundary-file` when it exists.
struct TableSource {
    handle: TableHandle,
    file: Option<PathBuf>,
    loaded: u64,
}

impl TableSource {
    fn open(cfg: &Config, alpha: f64) -> Result<Self, Error> {
        let spending = cfg.spending()?;
        match &cfg.boundary_file {
            Some(path) if path.exists() => {
                let table = persist::load(path)?;
                if table.alpha() != alpha || table.spending() != &spending {
                    return Err(Error::ParameterMismatch(format!(
                        "{} holds alpha={} spending={}, requested alpha={} spending={}",
                        path.display(),
                        table.alpha(),
                        table.spending().descriptor(),
                        alpha,
                        spending.descriptor()
                    )));
                }
                let loaded = table.n_max();
                Ok(TableSource { handle: TableHandle::new(table), file: Some(path.clone()), loaded })
            }
            other => Ok(TableSource {
                handle: TableHandle::new(BoundaryTable::new(alpha, spending)?),
                file: other.clone(),
                loaded: 0,
            }),
        }
    }

    fn save_if_grown(&self) -> Result<(), Error> {
        if let Some(path) = &self.file {
            let table = self.handle.read();
            if table.n_max() > self.loaded {
                persist::save(&table, path)?;
            }
        }
        Ok(())
    }
}

fn cmd_boundaries(cfg: &Config, n: u64, out: &mut dyn Write) -> Result<u8, Error> {
    cfg.check()?;
    if n == 0 {
        return Err(config_error("--n must be at least 1"));
    }
    let format = cfg.format(Format::Csv, &[Format::Csv, Format::Json])?;
    let src = TableSource::open(cfg, cfg.alpha)?;
    src.handle.ensure(n)?;
    src.save_if_grown()?;
    let table = src.handle.read();
    match format {
        Format::Json => {
            let rows: Vec<_> = table.rows().take(n as usize).collect();
            writeln!(out, "{}", serde_json::to_string(&rows)?)?;
        }
        _ => {
            persist::write_csv_head(&table, n, &mut *out)?;
        }
    }
    Ok(EXIT_OK)
}

fn run_json(result: &RunResult) -> Value {
    match result.status {
        RunStatus::Stopped { tau, s_tau, side } => json!({
            "status": "stopped",
            "tau": tau,
            "s_tau": s_tau,
            "side": side_name(side),
            "p_hat": result.p_hat,
        }),
        RunStatus::Truncated { n, s } => json!({
            "status": "truncated",
            "n": n,
            "s": s,
            "p_hat": result.p_hat,
        }),
    }
}

fn side_name(side: Side) -> &'static str {
    match side {
        Side::Upper => "upper",
        Side::Lower => "lower",
    }
}

fn ci_json(ci: &ConfidenceInterval) -> Value {
    json!({
        "beta": ci.beta,
        "p_low": ci.p_low,
        "p_high": ci.p_high,
        "certified": ci.certified,
        "horizon": ci.horizon,
    })
}

/// Adds the interim interval of a truncated run.
fn with_interim(mut v: Value, result: &RunResult, handle: &TableHandle) -> Result<Value, Error> {
    if let RunStatus::Truncated { n, .. } = result.status {
        let iv = interim_interval(&mut handle.write(), n, None)?;
        v["interim"] = json!({ "p_min": iv.lower_value(), "p_max": iv.upper_value() });
    }
    Ok(v)
}

fn config_json(cfg: &Config, spending: &SpendingSequence, seed: u64) -> Value {
    json!({
        "seed": seed,
        "alpha": cfg.alpha,
        "epsilon": cfg.epsilon,
        "spending": spending.descriptor(),
    })
}

struct ChildGuard(Child);

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn cmd_run(cfg: &Config, args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8, Error> {
    cfg.check()?;
    let format = cfg.format(Format::Json, &[Format::Json, Format::Text])?;
    let seed = cfg.seed();
    let src = TableSource::open(cfg, cfg.alpha)?;
    let report = if cfg.quiet {
        ReportEvery::default()
    } else {
        ReportEvery {
            steps: (args.report_every > 0).then_some(args.report_every),
            wall: (args.report_secs > 0.0).then(|| Duration::from_secs_f64(args.report_secs)),
        }
    };
    let opts = RunOptions { max_steps: args.max_steps, report, interim_window: None };
    let mut sink = |p: &Progress| {
        let _ = writeln!(err, "{}", serde_json::to_string(p).unwrap_or_default());
    };

    let mut child = None;
    let source: Box<dyn BitSource> = match (&args.source.simulate_p, &args.source.cmd) {
        (Some(p), _) => {
            if !(0.0..=1.0).contains(p) {
                return Err(config_error(format!("--simulate-p must lie in [0, 1] (got {p})")));
            }
            let bern = BernoulliSource::with_rng(*p, sim_rng(seed, 0));
            if cfg.threads > 1 {
                Box::new(Prefetch::spawn(bern, 4096, cfg.threads * 2))
            } else {
                Box::new(bern)
            }
        }
        (None, Some(command)) => {
            let mut c =
                Process::new("sh").arg("-c").arg(command).stdout(Stdio::piped()).stdin(Stdio::null()).spawn()?;
            let stdout = c.stdout.take().expect("piped stdout");
            child = Some(ChildGuard(c));
            Box::new(TextSource::new(BufReader::new(stdout)))
        }
        (None, None) => Box::new(TextSource::new(io::stdin().lock())),
    };
    let result = run(&src.handle, source, &opts, &mut sink);
    drop(child);
    let result = result?;

    let ci = match args.ci {
        None => None,
        Some(beta) => {
            let ci_opts = CiOptions::new(beta);
            Some(match result.status {
                RunStatus::Stopped { .. } => confidence_interval(&src.handle, &result, &ci_opts)?,
                RunStatus::Truncated { n, s } => confidence_interval_running(&src.handle, n, s, &ci_opts)?,
            })
        }
    };
    let mut report = with_interim(run_json(&result), &result, &src.handle)?;
    if let Some(ci) = &ci {
        report["ci"] = ci_json(ci);
    }
    src.save_if_grown()?;

    let spending = src.handle.read().spending().clone();
    match format {
        Format::Text => {
            writeln!(out, "seed {seed}")?;
            match result.status {
                RunStatus::Stopped { tau, s_tau, side } => writeln!(
                    out,
                    "stopped at n = {tau} on the {} boundary: p_hat = {s_tau}/{tau} = {}",
                    side_name(side),
                    result.p_hat
                )?,
                RunStatus::Truncated { n, s } => {
                    writeln!(out, "truncated at n = {n}: S_n = {s}, running estimate {}", result.p_hat)?;
                    let iv = &report["interim"];
                    writeln!(out, "eventual estimate in [{}, {}]", iv["p_min"], iv["p_max"])?;
                }
            }
            if let Some(ci) = &ci {
                writeln!(out, "{}% confidence interval [{}, {}]", 100.0 * (1.0 - ci.beta), ci.p_low, ci.p_high)?;
            }
        }
        _ => {
            let mut full = config_json(cfg, &spending, seed);
            full["result"] = report;
            writeln!(out, "{}", serde_json::to_string_pretty(&full)?)?;
        }
    }
    Ok(if result.is_stopped() { EXIT_OK } else { EXIT_TRUNCATED })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CurveKind {
    Risk,
    StopTime,
}

fn grid(args: &CurveArgs) -> Result<Vec<f64>, Error> {
    let g: Vec<f64> = if !args.p.is_empty() {
        args.p.clone()
    } else if args.grid_points == 1 {
        vec![args.grid_from]
    } else {
        let step = (args.grid_to - args.grid_from) / (args.grid_points - 1) as f64;
        (0..args.grid_points).map(|i| args.grid_from + step * i as f64).collect()
    };
    if g.is_empty() || g.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(config_error("grid points must lie in [0, 1]"));
    }
    Ok(g)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

fn cmd_curve(cfg: &Config, args: &CurveArgs, kind: CurveKind, out: &mut dyn Write) -> Result<u8, Error> {
    cfg.check()?;
    let format = cfg.format(Format::Csv, &[Format::Csv, Format::Json])?;
    let points = grid(args)?;
    let src = TableSource::open(cfg, cfg.alpha)?;
    let policy = HorizonPolicy {
        initial: args.horizon,
        max: args.max_horizon.max(args.horizon),
        residual_target: args.residual_target,
    };
    let rows = curve(&src.handle, &points, &policy, cfg.threads)?;
    let naive = args
        .naive_n
        .map(|n| points.iter().map(|&p| naive_risk(p, n, cfg.alpha)).collect::<Result<Vec<_>, _>>())
        .transpose()?;
    src.save_if_grown()?;

    if format == Format::Json {
        let mut values = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            let mut v = serde_json::to_value(r)?;
            if let Some(naive) = &naive {
                v["naive_risk"] = json!(naive[i]);
            }
            values.push(v);
        }
        writeln!(out, "{}", serde_json::to_string(&values)?)?;
        return Ok(EXIT_OK);
    }
    match kind {
        CurveKind::Risk => {
            write!(out, "p,rr_lower,rr_upper,residual,horizon")?;
            if let Some(n) = args.naive_n {
                write!(out, ",naive_risk_n{n}")?;
            }
            writeln!(out)?;
            for (i, r) in rows.iter().enumerate() {
                write!(out, "{},{},{},{},{}", r.p, r.rr_lower, r.rr_upper, r.residual, r.horizon)?;
                if let Some(naive) = &naive {
                    write!(out, ",{}", naive[i])?;
                }
                writeln!(out)?;
            }
        }
        CurveKind::StopTime => {
            writeln!(out, "p,e_tau,residual,horizon,wald_bound,ratio")?;
            for r in &rows {
                let ratio = r.wald_bound.map(|w| r.e_tau / w);
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.p,
                    r.e_tau,
                    r.residual,
                    r.horizon,
                    fmt_opt(r.wald_bound),
                    ratio.map_or_else(|| "0".to_string(), |v| v.to_string())
                )?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn counts_json(c: &SampleCounts) -> Value {
    json!({ "levels": c.levels, "total": c.total })
}

fn cmd_demo(cfg: &Config, args: &DemoArgs, out: &mut dyn Write) -> Result<u8, Error> {
    cfg.check()?;
    cfg.format(Format::Json, &[Format::Json])?;
    let seed = cfg.seed();
    let data = match &args.data {
        Some(path) => ContingencyTable::parse(&fs::read_to_string(path)?)?,
        None => ContingencyTable::bundled(),
    };
    let spending = cfg.spending()?;
    let cache = TableCache::new(spending.clone());
    let study = Study::new(data, &cache, sim_rng(seed, 0))?;
    let opts = RunOptions { max_steps: args.max_steps, ..Default::default() };
    let t = study.statistic();
    let df = study.data().df();

    let mut report = config_json(cfg, &spending, seed);
    report["demo"] = json!(match args.name {
        DemoName::Bootstrap => "bootstrap",
        DemoName::Level => "level",
        DemoName::DoubleBootstrap => "double-bootstrap",
        DemoName::TripleLevel => "triple-level",
    });
    report["T"] = json!(t);
    report["df"] = json!(df);
    report["chisq_p"] = json!(chisq_pvalue(t, df));

    let mut decided = true;
    match args.name {
        DemoName::Bootstrap => {
            let r = study.bootstrap_pvalue(cfg.alpha, &opts)?;
            decided = r.is_stopped();
            report["bootstrap"] = with_interim(run_json(&r), &r, &cache.get(cfg.alpha)?)?;
        }
        DemoName::Level => {
            report["critical"] = json!(chisq_critical(args.nominal, df)?);
            let mut asymptotic = Vec::new();
            let mut bootstrap = Vec::new();
            for &threshold in &args.thresholds {
                let r = study.check_level(args.nominal, threshold, &opts)?;
                decided &= r.is_stopped();
                let mut v = with_interim(run_json(&r), &r, &cache.get(threshold)?)?;
                v["threshold"] = json!(threshold);
                asymptotic.push(v);

                let before = study.counts();
                let r = study.check_level_bootstrap(args.m, args.nominal, threshold, &opts)?;
                decided &= r.is_stopped();
                let after = study.counts();
                let mut v = with_interim(run_json(&r), &r, &cache.get(threshold)?)?;
                v["threshold"] = json!(threshold);
                v["inner_samples"] = json!(after.levels[1] - before.levels[1]);
                bootstrap.push(v);
            }
            report["asymptotic"] = json!(asymptotic);
            report["bootstrap"] = json!(bootstrap);
        }
        DemoName::DoubleBootstrap => {
            let d = study.double_bootstrap(args.m, args.first_stage.unwrap_or(10_000), cfg.alpha, &opts)?;
            decided = d.run.is_stopped();
            let mut v = with_interim(run_json(&d.run), &d.run, &cache.get(cfg.alpha)?)?;
            v["first_stage_p"] = json!(d.first_stage);
            report["double_bootstrap"] = v;
        }
        DemoName::TripleLevel => {
            let r = study.check_level_double_bootstrap(
                args.m,
                args.m_middle,
                args.first_stage.unwrap_or(1_000),
                args.nominal,
                cfg.alpha,
                &opts,
            )?;
            decided = r.is_stopped();
            report["triple_level"] = with_interim(run_json(&r), &r, &cache.get(cfg.alpha)?)?;
        }
    }
    report["samples_used"] = counts_json(&study.counts());
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(if decided { EXIT_OK } else { EXIT_TRUNCATED })
}
