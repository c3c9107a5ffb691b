//! The `bench` subcommand: sweep specification (file and/or flags), sweep
//! execution, and CSV emission.

use std::path::PathBuf;

use clap::Args;

use dpate::dataset::{Dataset, PrivacyLevel};
use dpate::error::Error;
use dpate::estimation::LimitMode;
use dpate::harness::{results_csv, run_sweep, summary_csv, SweepSpec};
use dpate::io::{self as dio, CsvSchema, SynthParams};

use crate::{default_seed, CliError};

#[derive(Args)]
pub struct BenchArgs {
    /// Spec file of `key=value` lines; flags override file entries.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    schema: Option<String>,
    #[arg(long = "b-range")]
    b_range: Option<f64>,
    /// Synthetic dataset size when no input file is given.
    #[arg(long = "synth-n")]
    synth_n: Option<usize>,
    #[arg(long = "synth-d")]
    synth_d: Option<usize>,
    #[arg(long = "synth-tau")]
    synth_tau: Option<f64>,
    #[arg(long = "synth-seed")]
    synth_seed: Option<u64>,
    /// Comma-separated ε grid, e.g. `0.5,1,2,4`.
    #[arg(long = "eps-grid")]
    eps_grid: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated levels, e.g. `label,sample`.
    #[arg(long)]
    levels: Option<String>,
    /// Comma-separated limit modes, e.g. `adaptive,fixed-1,fixed-50`.
    #[arg(long)]
    limits: Option<String>,
    #[arg(long)]
    neighbors: Option<usize>,
    /// Comma-separated error-coefficient grid.
    #[arg(long = "coeff-grid")]
    coeff_grid: Option<String>,
    /// Comma-separated `r1:r2` allocation pairs, e.g. `0.1:0.7,0.2:0.6`.
    #[arg(long = "alloc-grid")]
    alloc_grid: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "seed-base")]
    seed_base: Option<u64>,
    /// Write zero wall-time columns so output is byte-reproducible.
    #[arg(long = "fixed-clock")]
    fixed_clock: bool,
    /// Results CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary CSV path.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Default)]
struct FileSpec {
    entries: Vec<(String, String)>,
}

impl FileSpec {
    fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "spec line {}: expected `key=value`, got `{line}`",
                    lineno + 1
                )));
            };
            entries.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(FileSpec { entries })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn parse_list<T: std::str::FromStr>(spec: &str, what: &str) -> Result<Vec<T>, CliError> {
    spec.split(',')
        .map(|s| s.trim().parse::<T>())
        .collect::<Result<Vec<T>, _>>()
        .map_err(|_| CliError::Usage(format!("bad {what} list `{spec}`")))
}

fn parse_levels(spec: &str) -> Result<Vec<PrivacyLevel>, CliError> {
    spec.split(',')
        .map(|s| s.trim().parse::<PrivacyLevel>().map_err(CliError::from))
        .collect()
}

fn parse_limits(spec: &str) -> Result<Vec<LimitMode>, CliError> {
    spec.split(',')
        .map(|s| s.trim().parse::<LimitMode>().map_err(CliError::from))
        .collect()
}

fn parse_allocs(spec: &str) -> Result<Vec<(f64, f64)>, CliError> {
    spec.split(',')
        .map(|pair| {
            let (r1, r2) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("bad allocation `{pair}`")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("bad allocation `{pair}`")))
            };
            Ok((parse(r1)?, parse(r2)?))
        })
        .collect()
}

pub fn run(args: BenchArgs) -> Result<(), CliError> {
    let file = match &args.spec {
        Some(path) => FileSpec::parse(&std::fs::read_to_string(path).map_err(Error::from)?)?,
        None => FileSpec::default(),
    };
    let dataset = load_dataset(&args, &file)?;
    let from_file = |key: &str| file.get(key).map(str::to_string);

    let mut spec = SweepSpec::default();
    if let Some(v) = args.eps_grid.or_else(|| from_file("eps")) {
        spec.eps_grid = parse_list(&v, "eps")?;
    }
    if let Some(v) = args.trials.or_else(|| from_file("trials").and_then(|s| s.parse().ok())) {
        spec.trials = v;
    }
    if let Some(v) = args.levels.or_else(|| from_file("levels")) {
        spec.levels = parse_levels(&v)?;
    }
    if let Some(v) = args.limits.or_else(|| from_file("limits")) {
        spec.limit_modes = parse_limits(&v)?;
    }
    if let Some(v) =
        args.neighbors.or_else(|| from_file("neighbors").and_then(|s| s.parse().ok()))
    {
        spec.neighbors = v;
    }
    if let Some(v) = args.coeff_grid.or_else(|| from_file("coeff")) {
        spec.coeff_grid = Some(parse_list(&v, "coeff")?);
    }
    if let Some(v) = args.alloc_grid.or_else(|| from_file("alloc")) {
        spec.alloc_grid = Some(parse_allocs(&v)?);
    }
    if let Some(v) = args.lambda.or_else(|| from_file("lambda").and_then(|s| s.parse().ok())) {
        spec.lambda = v;
    }
    spec.seed_base = args
        .seed_base
        .or_else(|| from_file("seed").and_then(|s| s.parse().ok()))
        .unwrap_or_else(default_seed);
    spec.fixed_clock =
        args.fixed_clock || from_file("fixed_clock").map(|v| v == "true").unwrap_or(false);

    let result = run_sweep(&dataset, &spec)?;

    let out_path = args
        .out
        .or_else(|| from_file("out").map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("bench needs --out (or `out=` in the spec)".into()))?;
    std::fs::write(&out_path, results_csv(&result.records)).map_err(Error::from)?;
    let summary_path = args
        .summary
        .or_else(|| from_file("summary").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("{}.summary.csv", out_path.display())));
    std::fs::write(&summary_path, summary_csv(&result.summaries)).map_err(Error::from)?;

    let json = serde_json::json!({
        "cells": result.summaries.len(),
        "trials": spec.trials,
        "rows": result.records.len(),
        "out": out_path.display().to_string(),
        "summary": summary_path.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&json).expect("serializes"));
    Ok(())
}

fn load_dataset(args: &BenchArgs, file: &FileSpec) -> Result<Dataset, CliError> {
    let input = args.input.clone().or_else(|| file.get("input").map(PathBuf::from));
    if let Some(path) = input {
        let schema_spec = args
            .schema
            .clone()
            .or_else(|| file.get("schema").map(str::to_string))
            .ok_or_else(|| CliError::Usage("--input needs --schema".into()))?;
        let b = args
            .b_range
            .or_else(|| file.get("b").and_then(|s| s.parse().ok()))
            .ok_or_else(|| CliError::Usage("--input needs --b-range".into()))?;
        let schema = CsvSchema::parse(&schema_spec)?;
        return Ok(dio::load_csv(&path, &schema, b)?);
    }
    let params = SynthParams {
        n: args.synth_n.or_else(|| file.get("synth_n").and_then(|s| s.parse().ok())).unwrap_or(1000),
        d: args.synth_d.or_else(|| file.get("synth_d").and_then(|s| s.parse().ok())).unwrap_or(20),
        tau: args
            .synth_tau
            .or_else(|| file.get("synth_tau").and_then(|s| s.parse().ok()))
            .unwrap_or(0.5),
        seed: args
            .synth_seed
            .or_else(|| file.get("synth_seed").and_then(|s| s.parse().ok()))
            .unwrap_or_else(default_seed),
        ..Default::default()
    };
    Ok(dio::generate_synth(&params)?.0)
}
