//! Repeated-trial evaluation harness: relative-error sweeps over privacy
//! budgets, levels, and limit modes, with plot-ready CSV output.

use std::time::Instant;

use serde::Serialize;

use crate::dataset::{Dataset, PrivacyLevel};
use crate::error::{Error, Result};
use crate::estimation::{LimitMode, DEFAULT_NEIGHBORS};
use crate::pipeline::{self, RunConfig, DEFAULT_SPLIT_RATIOS};
use crate::propensity::DEFAULT_LAMBDA;

/// RE = |τ̂ − τ| / |τ| against the non-private estimate.
pub fn relative_error(tau_hat: f64, tau_oracle: f64) -> Result<f64> {
    if tau_oracle == 0.0 {
        return Err(Error::ZeroTrueEffect);
    }
    Ok((tau_hat - tau_oracle).abs() / tau_oracle.abs())
}

/// The grid a sweep runs over. Every combination of level, budget, limit
/// mode, error coefficient, and allocation becomes one cell; each cell is
/// repeated `trials` times with seeds `seed_base + trial`.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub eps_grid: Vec<f64>,
    pub trials: usize,
    pub levels: Vec<PrivacyLevel>,
    pub limit_modes: Vec<LimitMode>,
    /// Overrides the per-level default error coefficient when present.
    pub coeff_grid: Option<Vec<f64>>,
    /// (r1, r2) budget allocations; r3 is the remainder. Sample level only,
    /// label-level cells carry them along unchanged.
    pub alloc_grid: Option<Vec<(f64, f64)>>,
    pub neighbors: usize,
    pub lambda: f64,
    pub seed_base: u64,
    pub oracle_mode: bool,
    /// Report zero wall time instead of measurements, for byte-stable output.
    pub fixed_clock: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            eps_grid: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
            trials: 10,
            levels: vec![PrivacyLevel::LabelLevel, PrivacyLevel::SampleLevel],
            limit_modes: vec![LimitMode::Adaptive],
            coeff_grid: None,
            alloc_grid: None,
            neighbors: DEFAULT_NEIGHBORS,
            lambda: DEFAULT_LAMBDA,
            seed_base: 0,
            oracle_mode: false,
            fixed_clock: false,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be >= 1".into()));
        }
        if self.eps_grid.is_empty() || self.levels.is_empty() || self.limit_modes.is_empty() {
            return Err(Error::InvalidConfig("sweep grids must be non-empty".into()));
        }
        if matches!(&self.coeff_grid, Some(g) if g.is_empty())
            || matches!(&self.alloc_grid, Some(g) if g.is_empty())
        {
            return Err(Error::InvalidConfig("optional grids must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub cell_id: String,
    pub level: PrivacyLevel,
    pub eps: f64,
    pub limit_mode: String,
    pub trial: usize,
    pub tau_hat: f64,
    pub tau_oracle: f64,
    pub re: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub cell_id: String,
    pub level: PrivacyLevel,
    pub eps: f64,
    pub limit_mode: String,
    pub trials: usize,
    pub tau_oracle: f64,
    pub mean_re: f64,
    /// Population standard deviation over the cell's trials.
    pub std_re: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<CellSummary>,
}

struct Cell {
    id: String,
    level: PrivacyLevel,
    eps: f64,
    limit_mode: LimitMode,
    coeff: Option<f64>,
    alloc: Option<(f64, f64)>,
}

fn enumerate_cells(spec: &SweepSpec) -> Vec<Cell> {
    let coeffs: Vec<Option<f64>> = match &spec.coeff_grid {
        Some(grid) => grid.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    let allocs: Vec<Option<(f64, f64)>> = match &spec.alloc_grid {
        Some(grid) => grid.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    let mut cells = Vec::new();
    for &level in &spec.levels {
        for &eps in &spec.eps_grid {
            for &limit_mode in &spec.limit_modes {
                for &coeff in &coeffs {
                    for &alloc in &allocs {
                        let mut id =
                            format!("{}:eps{}:{}", level.as_str(), eps, limit_mode.label());
                        if let Some(c) = coeff {
                            id.push_str(&format!(":c{c}"));
                        }
                        if let Some((r1, r2)) = alloc {
                            id.push_str(&format!(":a{r1}-{r2}"));
                        }
                        cells.push(Cell { id, level, eps, limit_mode, coeff, alloc });
                    }
                }
            }
        }
    }
    cells
}

/// Runs the sweep. The oracle τ is computed once per dataset and reused as
/// every trial's denominator.
pub fn run_sweep(dataset: &Dataset, spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let tau_oracle = pipeline::run_oracle_psm(dataset, spec.neighbors, spec.lambda)?;
    if tau_oracle == 0.0 {
        return Err(Error::ZeroTrueEffect);
    }
    let cells = enumerate_cells(spec);
    let mut records = Vec::with_capacity(cells.len() * spec.trials);
    let mut summaries = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut res = Vec::with_capacity(spec.trials);
        for trial in 0..spec.trials {
            let mut config = RunConfig::new(cell.level, cell.eps, spec.seed_base + trial as u64);
            config.match_config.neighbors = spec.neighbors;
            config.match_config.limit_mode = cell.limit_mode;
            if let Some(c) = cell.coeff {
                config.match_config.error_coeff = c;
            }
            if let Some((r1, r2)) = cell.alloc {
                config.split_ratios = (r1, r2, 1.0 - r1 - r2);
            } else {
                config.split_ratios = DEFAULT_SPLIT_RATIOS;
            }
            config.lambda = spec.lambda;
            config.oracle_mode = spec.oracle_mode;

            let started = Instant::now();
            let result = pipeline::run(dataset, &config)?;
            let seconds =
                if spec.fixed_clock { 0.0 } else { started.elapsed().as_secs_f64() };
            let re = relative_error(result.tau_hat, tau_oracle)?;
            res.push(re);
            records.push(TrialRecord {
                cell_id: cell.id.clone(),
                level: cell.level,
                eps: cell.eps,
                limit_mode: cell.limit_mode.label(),
                trial,
                tau_hat: result.tau_hat,
                tau_oracle,
                re,
                seconds,
            });
        }
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let var = res.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / res.len() as f64;
        summaries.push(CellSummary {
            cell_id: cell.id.clone(),
            level: cell.level,
            eps: cell.eps,
            limit_mode: cell.limit_mode.label(),
            trials: spec.trials,
            tau_oracle,
            mean_re: mean,
            std_re: var.sqrt(),
        });
    }
    Ok(SweepResult { records, summaries })
}

pub const RESULTS_HEADER: &str = "cell_id,level,eps,limit_mode,trial,tau_hat,tau_oracle,re,seconds";
pub const SUMMARY_HEADER: &str = "cell_id,level,eps,limit_mode,trials,tau_oracle,mean_re,std_re";

pub fn results_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.cell_id,
            r.level.as_str(),
            r.eps,
            r.limit_mode,
            r.trial,
            r.tau_hat,
            r.tau_oracle,
            r.re,
            r.seconds
        ));
    }
    out
}

pub fn summary_csv(summaries: &[CellSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.cell_id,
            s.level.as_str(),
            s.eps,
            s.limit_mode,
            s.trials,
            s.tau_oracle,
            s.mean_re,
            s.std_re
        ));
    }
    out
}

/// Parses a results CSV back into records. Together with `results_csv` this
/// round-trips byte-identically: floats are emitted in shortest form, which
/// reparses to the same value.
pub fn parse_results_csv(text: &str) -> Result<Vec<TrialRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == RESULTS_HEADER => {}
        other => {
            return Err(Error::SchemaError(format!(
                "unexpected results header {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::ParseError {
                row,
                col: "*".into(),
                message: format!("expected 9 fields, got {}", fields.len()),
            });
        }
        let parse_f64 = |value: &str, col: &str| -> Result<f64> {
            value.parse().map_err(|_| Error::ParseError {
                row,
                col: col.into(),
                message: format!("bad float `{value}`"),
            })
        };
        records.push(TrialRecord {
            cell_id: fields[0].to_string(),
            level: fields[1].parse()?,
            eps: parse_f64(fields[2], "eps")?,
            limit_mode: fields[3].to_string(),
            trial: fields[4].parse().map_err(|_| Error::ParseError {
                row,
                col: "trial".into(),
                message: format!("bad integer `{}`", fields[4]),
            })?,
            tau_hat: parse_f64(fields[5], "tau_hat")?,
            tau_oracle: parse_f64(fields[6], "tau_oracle")?,
            re: parse_f64(fields[7], "re")?,
            seconds: parse_f64(fields[8], "seconds")?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synth, SynthParams};

    #[test]
    fn relative_error_examples() {
        assert!((relative_error(0.4, 0.5).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(relative_error(0.5, 0.5).unwrap(), 0.0);
        assert!((relative_error(-1.0, -2.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(relative_error(1.0, 0.0), Err(Error::ZeroTrueEffect)));
    }

    fn small_synth() -> Dataset {
        generate_synth(&SynthParams { n: 120, d: 3, seed: 77, ..Default::default() })
            .unwrap()
            .0
    }

    #[test]
    fn oracle_cell_has_zero_re() {
        let ds = small_synth();
        let spec = SweepSpec {
            eps_grid: vec![1.0],
            trials: 1,
            levels: vec![PrivacyLevel::LabelLevel],
            oracle_mode: true,
            fixed_clock: true,
            ..Default::default()
        };
        let result = run_sweep(&ds, &spec).unwrap();
        assert_eq!(result.records.len(), 1);
        assert!(result.records[0].re < 1e-9, "re = {}", result.records[0].re);
    }

    #[test]
    fn row_count_is_cells_times_trials() {
        let ds = small_synth();
        let spec = SweepSpec {
            eps_grid: vec![0.5, 2.0],
            trials: 3,
            levels: vec![PrivacyLevel::LabelLevel, PrivacyLevel::SampleLevel],
            limit_modes: vec![LimitMode::Adaptive, LimitMode::Fixed(1)],
            fixed_clock: true,
            ..Default::default()
        };
        let result = run_sweep(&ds, &spec).unwrap();
        assert_eq!(result.records.len(), 2 * 2 * 2 * 3);
        assert_eq!(result.summaries.len(), 2 * 2 * 2);
    }

    #[test]
    fn summaries_match_recomputation() {
        let ds = small_synth();
        let spec = SweepSpec {
            eps_grid: vec![1.0],
            trials: 4,
            levels: vec![PrivacyLevel::LabelLevel],
            fixed_clock: true,
            ..Default::default()
        };
        let result = run_sweep(&ds, &spec).unwrap();
        for summary in &result.summaries {
            let res: Vec<f64> = result
                .records
                .iter()
                .filter(|r| r.cell_id == summary.cell_id)
                .map(|r| r.re)
                .collect();
            let mean = res.iter().sum::<f64>() / res.len() as f64;
            let var =
                res.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / res.len() as f64;
            assert_eq!(summary.mean_re, mean);
            assert_eq!(summary.std_re, var.sqrt());
        }
    }

    #[test]
    fn adaptive_beats_a_large_fixed_limit_at_low_budget() {
        // At eps = 0.5 a fixed limit of 50 inflates the sum sensitivity to
        // 51B while the adaptive limit stays small; the mean RE over ten
        // trials should favor the adaptive rule at sample level.
        let (ds, _) =
            generate_synth(&SynthParams { seed: 4242, ..Default::default() }).unwrap();
        let spec = SweepSpec {
            eps_grid: vec![0.5],
            trials: 10,
            levels: vec![PrivacyLevel::SampleLevel],
            limit_modes: vec![LimitMode::Adaptive, LimitMode::Fixed(50)],
            fixed_clock: true,
            ..Default::default()
        };
        let result = run_sweep(&ds, &spec).unwrap();
        let mean = |mode: &str| {
            result
                .summaries
                .iter()
                .find(|s| s.limit_mode == mode)
                .map(|s| s.mean_re)
                .unwrap()
        };
        assert!(
            mean("adaptive") <= mean("fixed-50"),
            "adaptive {} vs fixed-50 {}",
            mean("adaptive"),
            mean("fixed-50")
        );
    }

    #[test]
    fn coeff_and_alloc_grids_multiply_the_cells() {
        let ds = small_synth();
        let spec = SweepSpec {
            eps_grid: vec![1.0],
            trials: 2,
            levels: vec![PrivacyLevel::SampleLevel],
            coeff_grid: Some(vec![0.001, 0.01]),
            alloc_grid: Some(vec![(0.1, 0.7), (0.2, 0.6)]),
            fixed_clock: true,
            ..Default::default()
        };
        let result = run_sweep(&ds, &spec).unwrap();
        assert_eq!(result.summaries.len(), 4);
        assert_eq!(result.records.len(), 8);
        let ids: Vec<&str> = result.summaries.iter().map(|s| s.cell_id.as_str()).collect();
        assert!(ids.contains(&"sample:eps1:adaptive:c0.001:a0.1-0.7"));
        assert!(ids.contains(&"sample:eps1:adaptive:c0.01:a0.2-0.6"));
    }

    #[test]
    fn results_csv_round_trips_byte_identically() {
        let ds = small_synth();
        let spec = SweepSpec {
            eps_grid: vec![0.5, 1.5],
            trials: 2,
            levels: vec![PrivacyLevel::SampleLevel],
            fixed_clock: true,
            ..Default::default()
        };
        let result = run_sweep(&ds, &spec).unwrap();
        let emitted = results_csv(&result.records);
        let reparsed = parse_results_csv(&emitted).unwrap();
        assert_eq!(results_csv(&reparsed), emitted);
    }

    #[test]
    fn trial_seeds_are_base_plus_index() {
        let ds = small_synth();
        let spec = SweepSpec {
            eps_grid: vec![1.0],
            trials: 2,
            levels: vec![PrivacyLevel::SampleLevel],
            seed_base: 100,
            fixed_clock: true,
            ..Default::default()
        };
        let a = run_sweep(&ds, &spec).unwrap();
        let shifted = SweepSpec { seed_base: 101, ..spec };
        let b = run_sweep(&ds, &shifted).unwrap();
        // Trial 1 of the first sweep is trial 0 of the shifted sweep.
        assert_eq!(a.records[1].tau_hat, b.records[0].tau_hat);
    }
}
