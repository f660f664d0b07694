//! `mixbell`: generate MDPs and datasets, run the λ-weighted solver, check
//! the bounds and sweep λ.
//!
//! Exit status: 0 on success, 1 when a bound check fails, 2 on usage or
//! input errors.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mixbell::data::{perturb_dynamics, sample_covering_dataset, sample_dataset};
use mixbell::harness::{
    check_bounds, emit_reports, sweep, BoundCheckReport, EvalMetric, ExperimentConfig, Report,
    SweepReport,
};
use mixbell::mdp::exact_backup;
use mixbell::solver::run_fqi;
use mixbell::{
    DomainPair, OperatorMode, SamplingDistribution, SolveConfig, TabularMdp, TransitionDataset,
};
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(
    name = "mixbell",
    version,
    about = "Tabular lab for λ-weighted offline RL"
)]
struct Cli {
    /// Worker threads for resamples and sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Root for outputs written without an explicit path.
    #[arg(
        long,
        global = true,
        env = "MIXBELL_OUT_DIR",
        default_value = "mixbell-out"
    )]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a random MDP as JSON.
    GenMdp {
        /// Number of states.
        #[arg(long)]
        states: usize,
        /// Number of actions.
        #[arg(long)]
        actions: usize,
        /// Discount factor γ in [0, 1).
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        /// Rewards lie in [-B, B].
        #[arg(long, default_value_t = 1.0)]
        reward_bound: f64,
        /// Seed for rewards and transitions.
        #[arg(long)]
        seed: u64,
        /// Output file [default: <out-dir>/mdp.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mix an MDP's dynamics with a random kernel: (1-ε)P + εR.
    Perturb {
        /// Input MDP JSON.
        #[arg(long = "in")]
        input: PathBuf,
        /// Mixing weight ε in [0, 1]; 0 keeps the dynamics.
        #[arg(long)]
        epsilon: f64,
        /// Seed for the random kernel R.
        #[arg(long)]
        seed: u64,
        /// Output file [default: <out-dir>/source.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample transitions from an MDP, cells drawn uniformly.
    Collect {
        /// MDP JSON to sample from.
        #[arg(long)]
        mdp: PathBuf,
        /// Number of transitions.
        #[arg(long)]
        n: usize,
        /// Sampling seed.
        #[arg(long)]
        seed: u64,
        /// Resample until every (s, a) appears at least once.
        #[arg(long)]
        cover: bool,
        /// Attempts allowed with --cover.
        #[arg(long, default_value_t = 10_000)]
        max_attempts: usize,
        /// Output JSONL file [default: <out-dir>/dataset.jsonl].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the weighted iteration and write per-step diagnostics as CSV.
    Solve {
        /// Target MDP JSON.
        #[arg(long)]
        target: PathBuf,
        /// Source MDP JSON.
        #[arg(long)]
        source: PathBuf,
        /// Dataset JSONL drawn from the target.
        #[arg(long)]
        data: PathBuf,
        /// Weight λ in [0, 1] on the exact source term.
        #[arg(long)]
        lambda: f64,
        /// Number of updates from Q = 0.
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Output CSV [default: <out-dir>/trace.csv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo check of every bound; writes a JSON report.
    CheckBounds(ExperimentArgs),
    /// λ × ε × n grid over seeded families; writes CSV and JSON.
    Sweep(ExperimentArgs),
    /// Print a summary of a report written by check-bounds or sweep.
    Report {
        /// Report JSON to summarize.
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// Config file plus overrides; flags win over file values. Without
/// --config the built-in default suite is the base.
#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every resample.
    #[arg(long)]
    master_seed: Option<u64>,
    /// Resamples per cell (M).
    #[arg(long)]
    resamples: Option<usize>,
    /// Iterations (K).
    #[arg(long)]
    iterations: Option<usize>,
    /// Failure probability δ in (0, 1).
    #[arg(long)]
    delta: Option<f64>,
    /// Comma-separated dataset sizes.
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    /// Comma-separated mixing weights ε.
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    /// Comma-separated λ grid.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Number of seeded families (sweep).
    #[arg(long)]
    families: Option<usize>,
    /// TDGap or PolicyReturn.
    #[arg(long, value_parser = parse_metric)]
    metric: Option<EvalMetric>,
}

fn parse_metric(s: &str) -> Result<EvalMetric, String> {
    match s {
        "TDGap" | "td-gap" => Ok(EvalMetric::TDGap),
        "PolicyReturn" | "policy-return" => Ok(EvalMetric::PolicyReturn),
        _ => Err(format!(
            "unknown metric {s:?}; expected TDGap or PolicyReturn"
        )),
    }
}

enum Failure {
    Usage(anyhow::Error),
    Validation(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

impl From<mixbell::Error> for Failure {
    fn from(e: mixbell::Error) -> Self {
        Failure::Usage(e.into())
    }
}

impl ExperimentArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default_suite(),
        };
        if let Some(v) = self.master_seed {
            c.master_seed = v;
        }
        if let Some(v) = self.resamples {
            c.num_resamples = v;
        }
        if let Some(v) = self.iterations {
            c.num_iterations = v;
        }
        if let Some(v) = self.delta {
            c.delta = v;
        }
        if let Some(v) = &self.n_list {
            c.n_list = v.clone();
        }
        if let Some(v) = &self.epsilons {
            c.pair.epsilons = v.clone();
        }
        if let Some(v) = &self.lambda_grid {
            c.lambda_grid = v.clone();
        }
        if let Some(v) = self.families {
            c.num_families = v;
        }
        if let Some(v) = self.metric {
            c.eval_metric = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn read_mdp(path: &Path) -> anyhow::Result<TabularMdp> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let m: TabularMdp = serde_json::from_reader(BufReader::new(f))
        .with_context(|| format!("parsing {}", path.display()))?;
    m.validate()
        .with_context(|| format!("validating {}", path.display()))?;
    Ok(m)
}

fn write_mdp(path: &Path, m: &TabularMdp) -> anyhow::Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// `run-<first 16 hex digits of sha256(compact config JSON)>`.
fn run_dir(root: &Path, config: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let bytes = serde_json::to_vec(config)?;
    let hash = hex::encode(Sha256::digest(&bytes));
    Ok(root.join(format!("run-{}", &hash[..16])))
}

fn echo_config(dir: &Path, config: &ExperimentConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(dir.join("config.json"), text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out_or = |p: Option<PathBuf>, name: &str| p.unwrap_or_else(|| cli.out_dir.join(name));
    match cli.command {
        Command::GenMdp {
            states,
            actions,
            gamma,
            reward_bound,
            seed,
            out,
        } => {
            let m = TabularMdp::random(states, actions, gamma, reward_bound, seed)?;
            let path = out_or(out, "mdp.json");
            write_mdp(&path, &m)?;
            println!("wrote {}", path.display());
        }
        Command::Perturb {
            input,
            epsilon,
            seed,
            out,
        } => {
            let m = read_mdp(&input)?;
            let s = perturb_dynamics(&m, epsilon, seed)?;
            let path = out_or(out, "source.json");
            write_mdp(&path, &s)?;
            println!("wrote {}", path.display());
        }
        Command::Collect {
            mdp,
            n,
            seed,
            cover,
            max_attempts,
            out,
        } => {
            let m = read_mdp(&mdp)?;
            let sa = SamplingDistribution::uniform(m.num_states(), m.num_actions());
            let ds = if cover {
                sample_covering_dataset(&m, &sa, n, seed, max_attempts)?
            } else {
                sample_dataset(&m, &sa, n, seed)?
            };
            let path = out_or(out, "dataset.jsonl");
            ensure_parent(&path)?;
            let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(f);
            ds.write_jsonl(&mut w)?;
            w.flush().context("flushing dataset")?;
            println!("wrote {} ({} transitions)", path.display(), ds.len());
        }
        Command::Solve {
            target,
            source,
            data,
            lambda,
            iters,
            out,
        } => {
            let t = read_mdp(&target)?;
            let s = read_mdp(&source)?;
            let f = File::open(&data).with_context(|| format!("opening {}", data.display()))?;
            let ds = TransitionDataset::read_jsonl(BufReader::new(f))
                .with_context(|| format!("reading {}", data.display()))?;
            let pair = DomainPair::uniform(t, s)?;
            let q_star = mixbell::mdp::optimal_q(
                &pair.target,
                mixbell::mdp::VALUE_ITERATION_TOL,
                1_000_000,
            )?;
            let trace = run_fqi(&pair, &ds, &SolveConfig::new(lambda, iters), Some(&q_star))?;
            let path = out_or(out, "trace.csv");
            ensure_parent(&path)?;
            let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(f);
            trace.write_csv(&mut w)?;
            w.flush().context("flushing trace")?;
            let q = trace.final_q();
            let residual =
                exact_backup(&pair.target, q, &OperatorMode::Optimality)?.sup_distance(q);
            println!("wrote {}", path.display());
            println!("final bellman residual (target): {residual:e}");
            println!("final sup distance to Q*: {:e}", q.sup_distance(&q_star));
        }
        Command::CheckBounds(args) => {
            let config = args.resolve()?;
            let dir = run_dir(&cli.out_dir, &config)?;
            echo_config(&dir, &config)?;
            let report = check_bounds(&config)?;
            let s = report.summary.clone();
            let failures = report.failures();
            emit_reports(&[Report::Bounds(report)], &dir)?;
            let line = format!(
                "expected {}/{} high-probability {}/{} convergence {}/{} cells pass; report in {}",
                s.expected_cells - s.expected_failures,
                s.expected_cells,
                s.high_probability_cells - s.high_probability_failures,
                s.high_probability_cells,
                s.convergence_cells - s.convergence_failures,
                s.convergence_cells,
                dir.display()
            );
            if s.pass {
                println!("PASS {line}");
            } else {
                println!("FAIL {line}");
                return Err(Failure::Validation(failures.join("\n")));
            }
        }
        Command::Sweep(args) => {
            let config = args.resolve()?;
            let dir = run_dir(&cli.out_dir, &config)?;
            echo_config(&dir, &config)?;
            let report = sweep(&config)?;
            let t = report.trend.clone();
            emit_reports(&[Report::Sweep(report)], &dir)?;
            println!(
                "best lambda non-decreasing as epsilon falls: {}/{}; non-increasing as n grows: {}/{}; output in {}",
                t.epsilon_monotone,
                t.epsilon_sequences,
                t.n_monotone,
                t.n_sequences,
                dir.display()
            );
        }
        Command::Report { input } => {
            let text = fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            if let Ok(b) = serde_json::from_str::<BoundCheckReport>(&text) {
                print_bounds(&b);
            } else if let Ok(s) = serde_json::from_str::<SweepReport>(&text) {
                print_sweep(&s);
            } else {
                bail_usage(&input)?;
            }
        }
    }
    Ok(())
}

fn bail_usage(path: &Path) -> anyhow::Result<()> {
    bail!(
        "{} is neither a bound-check nor a sweep report",
        path.display()
    )
}

fn mark(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

/// `lhs / rhs`, with a zero bound counted as tight only when exceeded.
fn tightness(lhs: f64, rhs: f64) -> f64 {
    if rhs > 0.0 {
        lhs / rhs
    } else if lhs > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

fn print_bounds(r: &BoundCheckReport) {
    println!("expected bound (worst-case varsigma), tightest step per (epsilon, n, lambda):");
    println!(
        "{:>8} {:>6} {:>7} {:>13} {:>13} {:>13}  verdict",
        "epsilon", "n", "lambda", "lhs_mean", "3se", "rhs"
    );
    let mut shown: Vec<(u64, usize, u64)> = Vec::new();
    for c in &r.expected_bound {
        let key = (c.epsilon.to_bits(), c.n, c.lambda.to_bits());
        if shown.contains(&key) {
            continue;
        }
        shown.push(key);
        let worst = r
            .expected_bound
            .iter()
            .filter(|x| (x.epsilon.to_bits(), x.n, x.lambda.to_bits()) == key)
            .max_by(|a, b| {
                tightness(a.lhs_mean, a.rhs_worst_case)
                    .total_cmp(&tightness(b.lhs_mean, b.rhs_worst_case))
            })
            .expect("non-empty");
        let all = r
            .expected_bound
            .iter()
            .filter(|x| (x.epsilon.to_bits(), x.n, x.lambda.to_bits()) == key)
            .all(|x| x.pass);
        println!(
            "{:>8} {:>6} {:>7} {:>13.6e} {:>13.6e} {:>13.6e}  {}",
            c.epsilon,
            c.n,
            c.lambda,
            worst.lhs_mean,
            3.0 * worst.lhs_se,
            worst.rhs_worst_case,
            mark(all)
        );
    }
    let worst_frac = r
        .high_probability_bound
        .iter()
        .map(|c| c.fraction)
        .fold(0.0, f64::max);
    println!(
        "high-probability bound: max violation fraction {} (threshold {}), {} failing cells",
        worst_frac,
        r.high_probability_bound
            .first()
            .map(|c| c.threshold)
            .unwrap_or(f64::NAN),
        r.summary.high_probability_failures
    );
    println!("convergence, final step:");
    println!(
        "{:>8} {:>6} {:>7} {:>13} {:>13} {:>13} {:>8}  verdict",
        "epsilon", "n", "lambda", "lhs_final", "rhs_final", "radius", "in_radius"
    );
    for c in &r.convergence {
        let last = c.steps.last().expect("non-empty");
        println!(
            "{:>8} {:>6} {:>7} {:>13.6e} {:>13.6e} {:>13.6e} {:>8}  {}",
            c.epsilon,
            c.n,
            c.lambda,
            last.lhs_mean,
            last.rhs,
            c.neighborhood_c,
            if c.final_pass { "yes" } else { "no" },
            mark(c.pass)
        );
    }
    println!("overall: {}", mark(r.summary.pass));
}

fn print_sweep(r: &SweepReport) {
    println!(
        "metric {:?}, {} families, K = {}",
        r.eval_metric, r.num_families, r.num_iterations
    );
    println!(
        "{:>7} {:>8} {:>6} {:>10} {:>12}",
        "family", "epsilon", "n", "xi", "best_lambda"
    );
    for b in &r.best {
        println!(
            "{:>7} {:>8} {:>6} {:>10.3e} {:>12}",
            b.family, b.epsilon, b.n, b.xi, b.best_lambda
        );
    }
    let t = &r.trend;
    println!(
        "non-decreasing as epsilon falls: {}/{} ({:.2}); non-increasing as n grows: {}/{} ({:.2})",
        t.epsilon_monotone,
        t.epsilon_sequences,
        t.epsilon_fraction,
        t.n_monotone,
        t.n_sequences,
        t.n_fraction
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(2);
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(msg) => eprintln!("{msg}"),
                Failure::Usage(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(status(&f))
        }
    }
}

fn status(f: &Failure) -> u8 {
    match f {
        Failure::Validation(_) => 1,
        Failure::Usage(_) => 2,
    }
}
