//! `dpate`: differentially private average treatment effect estimation.
//!
//! Subcommands: `estimate` (one private run), `oracle` (the non-private
//! baseline), `synth` (benchmark data generator), `bench` (relative-error
//! sweeps), `bound` (squared-error diagnostic). Exit codes: 0 success,
//! 1 usage error, 2 data error, 3 internal accounting violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use dpate::dataset::PrivacyLevel;
use dpate::error::Error;
use dpate::estimation::LimitMode;
use dpate::io as dio;
use dpate::pipeline;

mod bench;

pub const SEED_ENV: &str = "DPATE_SEED";

#[derive(Parser)]
#[command(name = "dpate", version, about = "Differentially private ATE estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the average treatment effect under differential privacy.
    Estimate(EstimateArgs),
    /// Compute the non-private matching estimate used as the baseline.
    Oracle(OracleArgs),
    /// Generate a synthetic benchmark dataset with a known true effect.
    Synth(SynthArgs),
    /// Run a relative-error sweep and write results/summary CSVs.
    Bench(bench::BenchArgs),
    /// Report the squared-error diagnostic bound for a matching limit.
    Bound(BoundArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV (comma-separated, header row, '.' decimals).
    #[arg(long)]
    input: PathBuf,
    /// Column mapping `treatment,outcome[,cov1,cov2,...]`; with no explicit
    /// covariates every remaining column is used.
    #[arg(long)]
    schema: String,
    /// Public maximum variation range B of the outcome.
    #[arg(long = "b-range")]
    b_range: f64,
}

impl DataArgs {
    fn load(&self) -> Result<dpate::Dataset, Error> {
        let schema = dio::CsvSchema::parse(&self.schema)?;
        dio::load_csv(&self.input, &schema, self.b_range)
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Privacy level: label | sample.
    #[arg(long, default_value = "label")]
    level: String,
    /// Total privacy budget ε.
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
    /// Neighbors per counterfactual (N).
    #[arg(long, default_value_t = 5)]
    neighbors: usize,
    /// Error coefficient (defaults: 0.01 label, 0.001 sample).
    #[arg(long)]
    coeff: Option<f64>,
    /// L2 regularization strength of the propensity model.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// RNG seed; defaults to $DPATE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Use a fixed matching limit instead of the adaptive one.
    #[arg(long = "fixed-k")]
    fixed_k: Option<u32>,
    /// Phase budget ratios `r1,r2,r3` (sample level).
    #[arg(long, default_value = "0.1,0.7,0.2")]
    ratios: String,
    /// Fit the propensity model with an intercept term.
    #[arg(long)]
    intercept: bool,
    /// Noise- and cap-free test mode; output is non-private.
    #[arg(long = "oracle-mode")]
    oracle_mode: bool,
    /// Acknowledge that oracle-mode output is not a private release.
    #[arg(long = "unsafe")]
    unsafe_ok: bool,
    /// Write the result JSON here as well as to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Write the full provenance document (config, spend log, result) here.
    #[arg(long)]
    provenance: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 5)]
    neighbors: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    d: usize,
    /// True additive treatment effect.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path; a `<out>.json` sidecar records τ, params, and B.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Matching limit k to diagnose.
    #[arg(long)]
    k: u32,
    /// Privacy budget ε the bound is evaluated at.
    #[arg(long)]
    eps: f64,
    #[arg(long, default_value_t = 5)]
    neighbors: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let outcome = match cli.command {
        Command::Estimate(args) => run_estimate(args),
        Command::Oracle(args) => run_oracle(args),
        Command::Synth(args) => run_synth(args),
        Command::Bench(args) => bench::run(args),
        Command::Bound(args) => run_bound(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonPositiveBudget(_)
        | Error::NonPositiveSensitivity(_)
        | Error::InvalidRatios(..)
        | Error::InvalidConfig(_)
        | Error::UncappedWithoutOracle => 1,
        Error::LedgerViolation(_) | Error::BudgetExceeded { .. } => 3,
        _ => 2,
    }
}

pub fn default_seed() -> u64 {
    std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn parse_ratios(spec: &str) -> Result<(f64, f64, f64), CliError> {
    let parts: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad ratios `{spec}`")))?;
    if parts.len() != 3 {
        return Err(CliError::Usage("ratios must be `r1,r2,r3`".into()));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn emit(json: &str, output: Option<&PathBuf>) -> Result<(), CliError> {
    println!("{json}");
    if let Some(path) = output {
        std::fs::write(path, format!("{json}\n")).map_err(Error::from)?;
    }
    Ok(())
}

fn run_estimate(args: EstimateArgs) -> Result<(), CliError> {
    if args.oracle_mode && !args.unsafe_ok {
        return Err(CliError::Usage(
            "--oracle-mode produces a non-private result; pass --unsafe to acknowledge".into(),
        ));
    }
    let level: PrivacyLevel = args.level.parse()?;
    let dataset = args.data.load()?;
    let mut config = pipeline::RunConfig::new(
        level,
        args.eps,
        args.seed.unwrap_or_else(default_seed),
    );
    config.match_config.neighbors = args.neighbors;
    if let Some(c) = args.coeff {
        config.match_config.error_coeff = c;
    }
    if let Some(k) = args.fixed_k {
        config.match_config.limit_mode = LimitMode::Fixed(k);
    }
    config.lambda = args.lambda;
    config.split_ratios = parse_ratios(&args.ratios)?;
    config.intercept = args.intercept;
    config.oracle_mode = args.oracle_mode;
    let prov = pipeline::run_with_provenance(&dataset, &config)?;
    if prov.result.tainted && !args.unsafe_ok {
        return Err(CliError::Usage(
            "result is tainted (noise disabled); pass --unsafe to release it".into(),
        ));
    }
    if let Some(path) = &args.provenance {
        std::fs::write(path, format!("{}\n", prov.to_json())).map_err(Error::from)?;
    }
    emit(&prov.result.to_json(), args.output.as_ref())
}

fn run_oracle(args: OracleArgs) -> Result<(), CliError> {
    let dataset = args.data.load()?;
    let tau = pipeline::run_oracle_psm(&dataset, args.neighbors, args.lambda)?;
    let json = serde_json::json!({
        "tau_oracle": tau,
        "neighbors": args.neighbors,
        "lambda": args.lambda,
        "n": dataset.n(),
    });
    emit(&serde_json::to_string_pretty(&json).expect("serializes"), args.output.as_ref())
}

fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    let params = dio::SynthParams {
        n: args.n,
        d: args.d,
        tau: args.tau,
        seed: args.seed.unwrap_or_else(default_seed),
        ..Default::default()
    };
    let (dataset, true_tau) = dio::generate_synth(&params)?;
    dio::write_dataset_csv(&args.out, &dataset)?;
    let sidecar_path = args
        .sidecar
        .unwrap_or_else(|| PathBuf::from(format!("{}.json", args.out.display())));
    let sidecar = dio::SynthSidecar::new(&params, true_tau, dataset.outcome_range());
    std::fs::write(&sidecar_path, format!("{}\n", sidecar.to_json())).map_err(Error::from)?;
    let counts = dataset.group_counts();
    let json = serde_json::json!({
        "out": args.out.display().to_string(),
        "sidecar": sidecar_path.display().to_string(),
        "n": dataset.n(),
        "d": dataset.d(),
        "n_treated": counts.n_treated,
        "n_control": counts.n_control,
        "true_tau": true_tau,
        "B": dataset.outcome_range(),
    });
    println!("{}", serde_json::to_string_pretty(&json).expect("serializes"));
    Ok(())
}

fn run_bound(args: BoundArgs) -> Result<(), CliError> {
    if args.k == 0 {
        return Err(CliError::Usage("--k must be >= 1".into()));
    }
    let dataset = args.data.load()?;
    let model = dpate::propensity::train(
        &dataset,
        args.lambda,
        dpate::propensity::DEFAULT_TOLERANCE,
        dpate::propensity::DEFAULT_MAX_ITERS,
    )?;
    let scores = dpate::propensity::score(&model, &dataset)?;
    let mut ledger = dpate::BudgetLedger::new(args.eps);
    let mut rng = dpate::NoiseSource::new(0, 0);
    let view = dpate::matching::perturb_treatment(
        &dataset,
        PrivacyLevel::LabelLevel,
        0.0,
        &mut rng,
        &mut ledger,
    )?;
    let matrices = dpate::matching::build_sorted_matrices(&scores, &view)?;
    let (bound, replacements) = dpate::estimation::error_bound_label(
        &matrices,
        args.neighbors,
        args.k,
        dataset.outcome_range(),
        args.eps,
    )?;
    let json = serde_json::json!({
        "bound": bound,
        "replacements": replacements,
        "k": args.k,
        "eps": args.eps,
        "neighbors": args.neighbors,
        "B": dataset.outcome_range(),
        "n": dataset.n(),
    });
    emit(&serde_json::to_string_pretty(&json).expect("serializes"), args.output.as_ref())
}
