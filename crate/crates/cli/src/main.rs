//! `groupsync`: run synchronization experiments and lower-bound numerics
//! from the command line.
//!
//! Exit codes are stable: 0 success, 2 invalid flags, 3 statistical failure
//! (flag rate of at least 1%), 4 information identity violated, 5 prior
//! invariant failed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use groupsync_core::experiments::{summary_json, write_results_csv, RESULTS_SCHEMA_VERSION};
use groupsync_core::lower_bound::{
    check_prior_rotation, parameter_count, prior_pair, prior_radius, PriorCheck, PriorSampler,
};
use groupsync_core::rng::derive_seed;
use groupsync_core::theory::{information_identity, minimax_risk, naive_risk};
use groupsync_core::{
    information_bundle, run_experiment, vantrees_estimate, Error, ExperimentSpec, GroupKind,
    IterationConfig, Mode, PriorParams, Summary, SyncParams, TrialRecord,
};
use serde_json::json;

const DEFAULT_SEED: u64 = 20_240_601;

/// Flag rate at or above which an experiment counts as failed.
const MAX_FLAG_RATE: f64 = 0.01;

const EXIT_VALIDATION: u8 = 2;
const EXIT_STATISTICAL: u8 = 3;
const EXIT_IDENTITY: u8 = 4;
const EXIT_PRIOR: u8 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "groupsync",
    version,
    about = "Orthogonal and rotation group synchronization experiments",
    after_help = "Exit codes: 0 success, 2 invalid flags, 3 flag rate >= 1%, \
                  4 information identity violated, 5 prior invariant failed.\n\
                  All randomness derives from --seed (default 20240601)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Spectral initialization plus iterative polar steps, scored against
    /// sigma^2 d (d-1) / (2 n p). Expected mean/theory band: [0.85, 1.25].
    Simulate(SimulateArgs),
    /// One projection step from the true elements, plus the skew-part
    /// variance check. Expected bands: mean/theory and skew ratio / 0.5 in
    /// [0.9, 1.1].
    Oracle(OracleArgs),
    /// Van Trees information trace averaged over prior draws, checked against
    /// the exact value sigma^2 d (d-1) / ((n-2) p) to relative error 1e-6.
    Lowerbound(LowerboundArgs),
    /// Sample prior parameters and verify the guarantees on Q(r):
    /// orthonormality and det 1 to 1e-10, s_aa >= 7/8 and
    /// |s_ab| <= 1/(4d^2) to 1e-9, derivative norm <= 5 to 1e-3.
    CheckPrior(CheckPriorArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Group {
    Orthogonal,
    Rotation,
}

impl From<Group> for GroupKind {
    fn from(g: Group) -> Self {
        match g {
            Group::Orthogonal => GroupKind::Orthogonal,
            Group::Rotation => GroupKind::Rotation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct Output {
    /// Write results to this file (nothing is written without it)
    #[arg(long)]
    out: Option<PathBuf>,
    /// File format for --out
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Number of nodes (n >= 2)
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Matrix dimension (d >= 2)
    #[arg(long, default_value_t = 3)]
    d: usize,
    /// Edge probability, in (0, 1]
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    /// Noise level (sigma >= 0)
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = Group::Orthogonal)]
    group: Group,
    /// Independent trials
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Polar iterations [default: max(ceil(ln(1/sigma^2)), 20), capped at 200]
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Worker threads [default: available cores]
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    workers: Option<u32>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// Number of nodes (n >= 2)
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Matrix dimension (d >= 2)
    #[arg(long, default_value_t = 3)]
    d: usize,
    /// Edge probability, in (0, 1]
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    /// Noise level (sigma > 0)
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = Group::Orthogonal)]
    group: Group,
    /// Independent trials
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Worker threads [default: available cores]
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    workers: Option<u32>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct LowerboundArgs {
    /// Number of nodes (n >= 3)
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Matrix dimension (d >= 2)
    #[arg(long, default_value_t = 3)]
    d: usize,
    /// Edge probability, in (0, 1]
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    /// Noise level (sigma > 0)
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Prior draws (r, r') to average over
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct CheckPriorArgs {
    /// Matrix dimension (d >= 2)
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Parameter vectors drawn from the prior
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Also check as many corners of the parameter box (every |r_ab| = c)
    #[arg(long)]
    boundary: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

/// Outcome of a subcommand that ran to completion.
enum Failure {
    Validation(String),
    Statistical(String),
    Identity(String),
    Prior(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Statistical(_) => EXIT_STATISTICAL,
            Failure::Identity(_) => EXIT_IDENTITY,
            Failure::Prior(_) => EXIT_PRIOR,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m)
            | Failure::Statistical(m)
            | Failure::Identity(m)
            | Failure::Prior(m)
            | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParam { name, constraint } => {
                let flag = if name == "max_iters" { "iters" } else { name };
                Failure::Validation(format!("invalid --{flag}: {constraint}"))
            }
            e @ Error::IdentityViolation { .. } => Failure::Identity(e.to_string()),
            e @ Error::InfeasibleParams(_) => Failure::Prior(e.to_string()),
            e => Failure::Other(e.to_string()),
        }
    }
}

fn invalid(flag: &str, constraint: impl std::fmt::Display) -> Failure {
    Failure::Validation(format!("invalid --{flag}: {constraint}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Oracle(a) => oracle(a),
        Command::Lowerbound(a) => lowerbound(a),
        Command::CheckPrior(a) => check_prior(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let params = SyncParams::new(a.n, a.d, a.p, a.sigma, a.group.into(), a.seed)?;
    let iteration = match a.iters {
        Some(t) => IterationConfig::new(t, true)?,
        None => IterationConfig::for_sigma(a.sigma, true),
    };
    let spec = ExperimentSpec::new(params, a.trials, iteration, Mode::Pipeline)?;
    let (records, summary) = run_experiment(&spec, a.workers.map(|w| w as usize))?;

    println!("mode: pipeline ({} iterations)", iteration.max_iters());
    print_summary(&summary);
    write_experiment(&a.output, &spec, &records, &summary)?;
    check_flag_rate("pipeline", &summary)
}

fn oracle(a: &OracleArgs) -> Result<(), Failure> {
    let params = SyncParams::new(a.n, a.d, a.p, a.sigma, a.group.into(), a.seed)?;
    let one = IterationConfig::new(1, false)?;
    let spec = ExperimentSpec::new(params, a.trials, one, Mode::Oracle)?;
    let skew_spec = ExperimentSpec::new(params, a.trials, one, Mode::SkewCheck)?;
    let workers = a.workers.map(|w| w as usize);
    let (records, summary) = run_experiment(&spec, workers)?;
    let (_, skew) = run_experiment(&skew_spec, workers)?;

    let naive = naive_risk(a.n, a.d, a.p, a.sigma);
    let optimal = minimax_risk(a.n, a.d, a.p, a.sigma);
    println!("mode: oracle");
    print_summary(&summary);
    println!("naive reference: {naive:.6e}");
    println!("naive/optimal: {:.4}", naive / optimal);
    println!("skew variance ratio: {:.4} (expected 0.5)", skew.mean);
    println!("skew ratio/0.5: {}", fmt_opt(skew.mean_ratio));
    if let Some(m) = skew.max_abs_diagonal {
        println!("skew max |K_aa|: {m:.3e}");
    }

    if let Some(out) = &a.output.out {
        match a.output.format {
            Format::Csv => write_csv(out, &records)?,
            Format::Json => {
                let mut doc = summary_json(&spec, &summary);
                doc["naive_reference"] = json!(naive);
                doc["naive_over_optimal"] = json!(naive / optimal);
                doc["skew_check"] = json!(skew);
                write_json(out, &doc)?;
            }
        }
    }
    check_flag_rate("oracle", &summary)?;
    check_flag_rate("skew check", &skew)
}

fn lowerbound(a: &LowerboundArgs) -> Result<(), Failure> {
    if a.n < 3 {
        return Err(invalid("n", format!("n >= 3 required, got {}", a.n)));
    }
    if a.d < 2 {
        return Err(invalid("d", format!("d >= 2 required, got {}", a.d)));
    }
    if !(a.p > 0.0 && a.p <= 1.0) {
        return Err(invalid("p", format!("p in (0, 1] required, got {}", a.p)));
    }
    if !(a.sigma.is_finite() && a.sigma > 0.0) {
        return Err(invalid("sigma", format!("finite sigma > 0 required, got {}", a.sigma)));
    }
    if a.samples == 0 {
        return Err(invalid("samples", "samples >= 1 required"));
    }

    let est = vantrees_estimate(a.n, a.p, a.sigma, a.d, a.samples, a.seed)?;
    println!("van Trees trace: {:.9e} +/- {:.3e} ({} samples)", est.mean, est.std_error, est.samples);
    println!("identity check: ok (relative error <= 1e-6 on every draw)");
    println!("theory sigma^2 d (d-1) / ((n-2) p): {:.9e}", est.identity_value);
    println!("mean/theory: {:.6}", est.mean / est.identity_value);

    if let Some(out) = &a.output.out {
        let theory = information_identity(a.n, a.d, a.p, a.sigma);
        match a.output.format {
            Format::Json => write_json(
                out,
                &json!({
                    "schema_version": RESULTS_SCHEMA_VERSION,
                    "n": a.n,
                    "d": a.d,
                    "p": a.p,
                    "sigma": a.sigma,
                    "seed": a.seed,
                    "samples": est.samples,
                    "mean": est.mean,
                    "std_error": est.std_error,
                    "identity_value": est.identity_value,
                    "identity_ok": true,
                    "theory": theory,
                }),
            )?,
            Format::Csv => {
                let mut body = String::from("draw,trace_j,identity_value,schema_version\n");
                for k in 0..a.samples as u64 {
                    let (r, rp) = prior_pair(a.d, a.seed, k);
                    let b = information_bundle(a.n, a.p, a.sigma, &r, &rp)?;
                    body.push_str(&format!(
                        "{k},{},{},{RESULTS_SCHEMA_VERSION}\n",
                        b.trace_j, b.identity_value
                    ));
                }
                write_bytes(out, body.as_bytes())?;
            }
        }
    }
    Ok(())
}

/// Running worst case of every guarantee.
struct Margins {
    orthonormality: f64,
    determinant: f64,
    min_diagonal: f64,
    max_below: f64,
    max_derivative: f64,
    checked: usize,
}

impl Margins {
    fn new() -> Self {
        Self {
            orthonormality: 0.0,
            determinant: 0.0,
            min_diagonal: f64::INFINITY,
            max_below: 0.0,
            max_derivative: 0.0,
            checked: 0,
        }
    }

    fn absorb(&mut self, c: &PriorCheck) {
        self.orthonormality = self.orthonormality.max(c.orthonormality_residual);
        self.determinant = self.determinant.max((c.determinant - 1.0).abs());
        self.min_diagonal = self.min_diagonal.min(c.min_diagonal);
        self.max_below = self.max_below.max(c.max_below_diagonal);
        self.max_derivative = self.max_derivative.max(c.max_derivative_norm);
        self.checked += 1;
    }
}

/// Corner `k` of the parameter box; signs come from the bits of derived seeds.
fn corner(d: usize, seed: u64, k: u64) -> PriorParams {
    let c = prior_radius(d);
    let m = parameter_count(d);
    let words: Vec<u64> = (0..m.div_ceil(64) as u64)
        .map(|w| derive_seed(derive_seed(seed, k), w))
        .collect();
    let v = (0..m)
        .map(|b| if (words[b / 64] >> (b % 64)) & 1 == 1 { c } else { -c })
        .collect();
    PriorParams::new(d, v).expect("corners lie in the closed box")
}

fn check_prior(a: &CheckPriorArgs) -> Result<(), Failure> {
    if a.d < 2 {
        return Err(invalid("d", format!("d >= 2 required, got {}", a.d)));
    }
    if a.samples == 0 {
        return Err(invalid("samples", "samples >= 1 required"));
    }

    let mut margins = Margins::new();
    let mut verify = |r: &PriorParams| -> Result<(), Failure> {
        let check = check_prior_rotation(r)
            .map_err(|e| Failure::Prior(format!("{e}; r = {:?}", r.values())))?;
        if !check.passes(a.d) {
            return Err(Failure::Prior(format!(
                "prior invariant failed: {check:?}; r = {:?}",
                r.values()
            )));
        }
        margins.absorb(&check);
        Ok(())
    };
    let mut sampler = PriorSampler::new(a.d, a.seed);
    for _ in 0..a.samples {
        verify(&sampler.draw())?;
    }
    if a.boundary {
        for k in 0..a.samples as u64 {
            verify(&corner(a.d, a.seed, k))?;
        }
    }

    let below = PriorCheck::max_below_diagonal_bound(a.d);
    println!("checked: {} parameter vectors (d = {})", margins.checked, a.d);
    println!("max ||Q^T Q - I||_F: {:.3e} (<= 1e-10)", margins.orthonormality);
    println!("max |det Q - 1|: {:.3e} (<= 1e-10)", margins.determinant);
    println!("min s_aa: {:.9} (>= {})", margins.min_diagonal, PriorCheck::MIN_DIAGONAL);
    println!("max |s_ab|, a > b: {:.6e} (<= {below:.6e})", margins.max_below);
    println!(
        "max derivative norm: {:.6} (<= {})",
        margins.max_derivative,
        PriorCheck::MAX_DERIVATIVE_NORM
    );
    println!("status: pass");

    if let Some(out) = &a.output.out {
        let doc = json!({
            "schema_version": RESULTS_SCHEMA_VERSION,
            "d": a.d,
            "seed": a.seed,
            "checked": margins.checked,
            "boundary": a.boundary,
            "max_orthonormality_residual": margins.orthonormality,
            "max_determinant_error": margins.determinant,
            "min_diagonal": margins.min_diagonal,
            "max_below_diagonal": margins.max_below,
            "max_below_diagonal_bound": below,
            "max_derivative_norm": margins.max_derivative,
            "pass": true,
        });
        match a.output.format {
            Format::Json => write_json(out, &doc)?,
            Format::Csv => {
                let map = doc.as_object().expect("object literal");
                let header: Vec<&str> = map.keys().map(String::as_str).collect();
                let row: Vec<String> = map.values().map(|v| v.to_string()).collect();
                let body = format!("{}\n{}\n", header.join(","), row.join(","));
                write_bytes(out, body.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn print_summary(s: &Summary) {
    println!("trials: {} ({} used, {} flagged)", s.trials, s.used_trials, s.flagged_trials);
    println!("mean loss: {:.6e} +/- {:.2e}", s.mean, s.std_error);
    println!("min/max: {:.6e} / {:.6e}", s.min, s.max);
    println!("theory sigma^2 d (d-1) / (2 n p): {:.6e}", s.theory);
    println!("mean/theory: {}", fmt_opt(s.mean_ratio));
    if let Some(band) = s.tolerance {
        let status = match s.within_tolerance {
            Some(true) => "inside",
            Some(false) => "outside",
            None => "n/a",
        };
        println!("tolerance band: [{}, {}] ({status})", band.lower, band.upper);
    }
    if s.flagged_nodes > 0 {
        println!("flagged nodes: {}", s.flagged_nodes);
    }
}

fn check_flag_rate(what: &str, s: &Summary) -> Result<(), Failure> {
    let rate = s.failure_rate();
    if rate >= MAX_FLAG_RATE {
        return Err(Failure::Statistical(format!(
            "{what}: flag rate {:.2}% is at least {:.0}%",
            100.0 * rate,
            100.0 * MAX_FLAG_RATE
        )));
    }
    Ok(())
}

fn write_experiment(
    output: &Output,
    spec: &ExperimentSpec,
    records: &[TrialRecord],
    summary: &Summary,
) -> Result<(), Failure> {
    let Some(out) = &output.out else {
        return Ok(());
    };
    match output.format {
        Format::Csv => write_csv(out, records),
        Format::Json => write_json(out, &summary_json(spec, summary)),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Other(format!("cannot write {}: {e}", path.display())))
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Other(format!("cannot write {}: {e}", path.display()))
}

fn write_csv(path: &Path, records: &[TrialRecord]) -> Result<(), Failure> {
    let mut w = create(path)?;
    write_results_csv(records, &mut w)?;
    w.flush().map_err(|e| io_failure(path, e))
}

fn write_json(path: &Path, doc: &serde_json::Value) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, doc).map_err(|e| io_failure(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_failure(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let mut w = create(path)?;
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| io_failure(path, e))
}
